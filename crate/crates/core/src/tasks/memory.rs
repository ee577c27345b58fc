//! Memory probes over a small symbol alphabet.

use rand::Rng;

use crate::error::{Result, SsmError};

pub const N_SYMBOLS: usize = 8;
/// Selective-copy filler; content symbols are `0..N_SYMBOLS`.
pub const FILLER: usize = N_SYMBOLS;

/// I.i.d. uniform symbols; the label is the symbol `lag` steps before the last.
pub fn echo_sample<R: Rng>(rng: &mut R, seq_len: usize, lag: usize) -> (Vec<usize>, usize) {
    let tokens: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..N_SYMBOLS)).collect();
    let label = tokens[seq_len - 1 - lag];
    (tokens, label)
}

pub fn check_echo(seq_len: usize, lag: usize) -> Result<()> {
    if lag >= seq_len {
        return Err(SsmError::InvalidArgument(format!("lag {lag} must be < sequence length {seq_len}")));
    }
    Ok(())
}

/// Fillers everywhere except `positions`, which carry random symbols.
/// The label is the symbol at the earliest position.
pub fn selective_copy_at<R: Rng>(rng: &mut R, seq_len: usize, positions: &[usize]) -> (Vec<usize>, usize) {
    let mut tokens = vec![FILLER; seq_len];
    for &p in positions {
        tokens[p] = rng.gen_range(0..N_SYMBOLS);
    }
    let first = *positions.iter().min().expect("at least one mark");
    let label = tokens[first];
    (tokens, label)
}

/// `n_marks` distinct random positions.
pub fn selective_copy_sample<R: Rng>(rng: &mut R, seq_len: usize, n_marks: usize) -> (Vec<usize>, usize) {
    let positions = rand::seq::index::sample(rng, seq_len, n_marks).into_vec();
    selective_copy_at(rng, seq_len, &positions)
}

pub fn check_selective_copy(seq_len: usize, n_marks: usize) -> Result<()> {
    if n_marks == 0 || n_marks >= seq_len {
        return Err(SsmError::InvalidArgument(format!(
            "need 1 ≤ n_marks < sequence length (got {n_marks}, {seq_len})"
        )));
    }
    Ok(())
}

/// Re-extracts the selective-copy label from tokens alone.
pub fn first_mark(tokens: &[usize]) -> Option<usize> {
    tokens.iter().copied().find(|&t| t != FILLER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn echo_extremes() {
        let mut r = rng::substream(1, "echo");
        let (t, l) = echo_sample(&mut r, 10, 0);
        assert_eq!(l, t[9]);
        let (t, l) = echo_sample(&mut r, 10, 9);
        assert_eq!(l, t[0]);
        assert!(check_echo(10, 10).is_err());
    }

    #[test]
    fn single_fixed_mark_is_an_echo() {
        let mut r = rng::substream(2, "sc");
        let (t, l) = selective_copy_at(&mut r, 32, &[32 - 1 - 5]);
        assert_eq!(l, t[32 - 1 - 5]);
        assert_eq!(first_mark(&t), Some(l));
        assert_eq!(t.iter().filter(|&&x| x != FILLER).count(), 1);
    }

    #[test]
    fn re_extraction_matches_labels() {
        let mut r = rng::substream(3, "sc");
        for _ in 0..10_000 {
            let (t, l) = selective_copy_sample(&mut r, 64, 4);
            assert_eq!(first_mark(&t), Some(l));
            assert_eq!(t.iter().filter(|&&x| x != FILLER).count(), 4);
        }
    }
}
