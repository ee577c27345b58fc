//! Classification tasks with exact label oracles.
//!
//! Every sample is a pure function of `(seed, index, spec)`: sample `i`
//! draws from its own indexed stream, so generation parallelizes without
//! changing results. Splits take disjoint index ranges of one stream
//! family (train first, then validation, then test).

pub mod listops;
pub mod memory;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::rng;

pub use listops::{eval_tokens_stack, random_expr, ListOp, ListOpsExpr, ListOpsLimits};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SSMD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ListOps,
    Echo,
    SelectiveCopy,
}

/// Generator settings for one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    ListOps { max_len: usize, max_depth: usize, max_args: usize },
    Echo { seq_len: usize, lag: usize },
    SelectiveCopy { seq_len: usize, n_marks: usize },
}

impl Default for TaskSpec {
    fn default() -> Self {
        let l = ListOpsLimits::default();
        TaskSpec::ListOps { max_len: l.max_len, max_depth: l.max_depth, max_args: l.max_args }
    }
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::ListOps { .. } => TaskKind::ListOps,
            TaskSpec::Echo { .. } => TaskKind::Echo,
            TaskSpec::SelectiveCopy { .. } => TaskKind::SelectiveCopy,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TaskSpec::ListOps { .. } => listops::N_CLASSES,
            _ => memory::N_SYMBOLS,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            TaskSpec::ListOps { .. } => listops::VOCAB,
            TaskSpec::Echo { .. } => memory::N_SYMBOLS,
            TaskSpec::SelectiveCopy { .. } => memory::N_SYMBOLS + 1,
        }
    }

    pub fn max_len(&self) -> usize {
        match *self {
            TaskSpec::ListOps { max_len, .. } => max_len,
            TaskSpec::Echo { seq_len, .. } | TaskSpec::SelectiveCopy { seq_len, .. } => seq_len,
        }
    }

    /// Token used to pad batches; it is never read by a masked model.
    pub fn pad(&self) -> usize {
        match self {
            TaskSpec::ListOps { .. } => listops::PAD,
            TaskSpec::Echo { .. } => 0,
            TaskSpec::SelectiveCopy { .. } => memory::FILLER,
        }
    }

    pub fn random_baseline(&self) -> f64 {
        random_baseline(self.n_classes())
    }

    fn limits(&self) -> Option<ListOpsLimits> {
        match *self {
            TaskSpec::ListOps { max_len, max_depth, max_args } => Some(ListOpsLimits { max_len, max_depth, max_args }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::ListOps { .. } => self.limits().unwrap().validate(),
            TaskSpec::Echo { seq_len, lag } => memory::check_echo(seq_len, lag),
            TaskSpec::SelectiveCopy { seq_len, n_marks } => memory::check_selective_copy(seq_len, n_marks),
        }
    }

    /// Sample `index` of the stream family rooted at `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> TaskSample {
        let mut r = rng::indexed(seed, index);
        let (tokens, label) = match *self {
            TaskSpec::ListOps { .. } => {
                let e = random_expr(&mut r, &self.limits().unwrap());
                let label = e.eval().expect("generated trees are well formed") as usize;
                let mut tokens = e.to_tokens();
                tokens.push(listops::SEP);
                (tokens, label)
            }
            TaskSpec::Echo { seq_len, lag } => memory::echo_sample(&mut r, seq_len, lag),
            TaskSpec::SelectiveCopy { seq_len, n_marks } => memory::selective_copy_sample(&mut r, seq_len, n_marks),
        };
        TaskSample { tokens, label, task: self.kind() }
    }

    /// Recomputes a label from tokens alone, without the generator.
    pub fn oracle_label(&self, tokens: &[usize]) -> Result<usize> {
        match *self {
            TaskSpec::ListOps { .. } => eval_tokens_stack(tokens).map(|v| v as usize),
            TaskSpec::Echo { lag, .. } => tokens
                .len()
                .checked_sub(lag + 1)
                .map(|i| tokens[i])
                .ok_or_else(|| SsmError::InvalidArgument("sequence shorter than lag".into())),
            TaskSpec::SelectiveCopy { .. } => {
                memory::first_mark(tokens).ok_or_else(|| SsmError::InvalidArgument("no marked token".into()))
            }
        }
    }

    /// Samples `start..start + n`, generated in parallel.
    pub fn generate(&self, seed: u64, start: u64, n: usize) -> Result<Vec<TaskSample>> {
        self.validate()?;
        Ok((0..n as u64).into_par_iter().map(|i| self.sample(seed, start + i)).collect())
    }
}

/// `1 / n_classes`.
pub fn random_baseline(n_classes: usize) -> f64 {
    1.0 / n_classes as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub task: TaskKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub split: Split,
    /// Index of the first sample in the stream family.
    pub start: u64,
    pub samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn generate(spec: TaskSpec, seed: u64, split: Split, start: u64, n: usize) -> Result<Self> {
        let samples = spec.generate(seed, start, n)?;
        Ok(Dataset { spec, seed, split, start, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.n_classes()];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Number of samples whose stored label differs from the oracle's.
    pub fn oracle_mismatches(&self) -> Result<usize> {
        let mut bad = 0;
        for s in &self.samples {
            if self.spec.oracle_label(&s.tokens)? != s.label {
                bad += 1;
            }
        }
        Ok(bad)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            generator: self.spec,
            seed: self.seed,
            split: self.split,
            start: self.start,
            count: self.len(),
            vocab: self.spec.vocab(),
            n_classes: self.spec.n_classes(),
            class_histogram: self.class_histogram(),
        }
    }

    /// Writes `{name}.bin` and `{name}.json` into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(format!("{name}.bin")))?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&(s.label as u32).to_le_bytes())?;
            w.write_all(&(s.tokens.len() as u32).to_le_bytes())?;
            for &t in &s.tokens {
                w.write_all(&(t as u32).to_le_bytes())?;
            }
        }
        w.flush()?;
        let m = File::create(dir.join(format!("{name}.json")))?;
        serde_json::to_writer_pretty(m, &self.manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{name}.json")))?))?;
        if m.format_version != FORMAT_VERSION {
            return Err(SsmError::Format(format!("unsupported format version {}", m.format_version)));
        }
        let mut r = BufReader::new(File::open(dir.join(format!("{name}.bin")))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SsmError::Format("bad magic".into()));
        }
        if read_u32(&mut r)? != FORMAT_VERSION {
            return Err(SsmError::Format("binary and manifest versions differ".into()));
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let count = u64::from_le_bytes(n) as usize;
        if count != m.count {
            return Err(SsmError::Format(format!("manifest count {} vs binary {count}", m.count)));
        }
        let kind = m.generator.kind();
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let label = read_u32(&mut r)? as usize;
            let len = read_u32(&mut r)? as usize;
            let tokens = (0..len).map(|_| read_u32(&mut r).map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
            if label >= m.n_classes {
                return Err(SsmError::LabelOutOfRange { label, n_classes: m.n_classes });
            }
            if let Some(&t) = tokens.iter().find(|&&t| t >= m.vocab) {
                return Err(SsmError::OutOfVocabulary { token: t, vocab: m.vocab });
            }
            samples.push(TaskSample { tokens, label, task: kind });
        }
        Ok(Dataset { spec: m.generator, seed: m.seed, split: m.split, start: m.start, samples })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: TaskSpec,
    pub seed: u64,
    pub split: Split,
    pub start: u64,
    pub count: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub class_histogram: Vec<usize>,
}

/// Task plus split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { spec: TaskSpec::default(), n_train: 20_000, n_val: 1_000, n_test: 2_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskConfig {
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        let (a, b) = (self.n_train as u64, (self.n_train + self.n_val) as u64);
        Ok(Splits {
            train: Dataset::generate(self.spec, seed, Split::Train, 0, self.n_train)?,
            val: Dataset::generate(self.spec, seed, Split::Val, a, self.n_val)?,
            test: Dataset::generate(self.spec, seed, Split::Test, b, self.n_test)?,
        })
    }
}

pub fn gen_listops(seed: u64, n: usize, max_len: usize, max_depth: usize) -> Result<Dataset> {
    let spec = TaskSpec::ListOps { max_len, max_depth, max_args: ListOpsLimits::default().max_args };
    Dataset::generate(spec, seed, Split::Train, 0, n)
}

pub fn gen_delayed_echo(seed: u64, n: usize, seq_len: usize, lag: usize) -> Result<Dataset> {
    Dataset::generate(TaskSpec::Echo { seq_len, lag }, seed, Split::Train, 0, n)
}

pub fn gen_selective_copy(seed: u64, n: usize, seq_len: usize, n_marks: usize) -> Result<Dataset> {
    Dataset::generate(TaskSpec::SelectiveCopy { seq_len, n_marks }, seed, Split::Train, 0, n)
}
