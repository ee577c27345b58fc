//! Nested list operations over digits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};

pub const OP_BASE: usize = 10;
pub const OPEN: usize = 14;
pub const CLOSE: usize = 15;
pub const SEP: usize = 16;
pub const PAD: usize = 17;
pub const VOCAB: usize = 18;
pub const N_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListOp {
    Max,
    Min,
    Median,
    Mean,
}

impl ListOp {
    pub const ALL: [ListOp; 4] = [ListOp::Max, ListOp::Min, ListOp::Median, ListOp::Mean];

    pub fn token(self) -> usize {
        OP_BASE + self as usize
    }

    pub fn from_token(t: usize) -> Option<ListOp> {
        t.checked_sub(OP_BASE).and_then(|i| ListOp::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            ListOp::Max => "max",
            ListOp::Min => "min",
            ListOp::Median => "median",
            ListOp::Mean => "mean",
        }
    }

    /// Mean is floored and median is the lower median, so results stay in 0..=9.
    pub fn apply(self, args: &[u8]) -> u8 {
        debug_assert!(!args.is_empty());
        match self {
            ListOp::Max => *args.iter().max().unwrap(),
            ListOp::Min => *args.iter().min().unwrap(),
            ListOp::Median => {
                let mut v = args.to_vec();
                v.sort_unstable();
                v[(v.len() - 1) / 2]
            }
            ListOp::Mean => (args.iter().map(|&a| a as u32).sum::<u32>() / args.len() as u32) as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ListOpsExpr {
    Leaf(u8),
    Node(ListOp, Vec<ListOpsExpr>),
}

impl ListOpsExpr {
    /// Recursive evaluation.
    pub fn eval(&self) -> Result<u8> {
        match self {
            ListOpsExpr::Leaf(d) if *d <= 9 => Ok(*d),
            ListOpsExpr::Leaf(d) => Err(SsmError::MalformedExpr(format!("leaf {d} is not a digit"))),
            ListOpsExpr::Node(op, args) => {
                if args.len() < 2 {
                    return Err(SsmError::MalformedExpr(format!("{} has {} argument(s)", op.name(), args.len())));
                }
                let vals = args.iter().map(|a| a.eval()).collect::<Result<Vec<_>>>()?;
                Ok(op.apply(&vals))
            }
        }
    }

    /// Leaves have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            ListOpsExpr::Leaf(_) => 0,
            ListOpsExpr::Node(_, args) => 1 + args.iter().map(|a| a.depth()).max().unwrap_or(0),
        }
    }

    /// Serialized token count.
    pub fn len(&self) -> usize {
        match self {
            ListOpsExpr::Leaf(_) => 1,
            ListOpsExpr::Node(_, args) => 3 + args.iter().map(|a| a.len()).sum::<usize>(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[ OP args… ]` with digits as their own value.
    pub fn to_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        self.write_tokens(&mut out);
        out
    }

    fn write_tokens(&self, out: &mut Vec<usize>) {
        match self {
            ListOpsExpr::Leaf(d) => out.push(*d as usize),
            ListOpsExpr::Node(op, args) => {
                out.push(OPEN);
                out.push(op.token());
                for a in args {
                    a.write_tokens(out);
                }
                out.push(CLOSE);
            }
        }
    }

    /// Inverse of [`ListOpsExpr::to_tokens`]; trailing separator and padding are ignored.
    pub fn from_tokens(tokens: &[usize]) -> Result<Self> {
        let end = tokens.iter().position(|&t| t == SEP || t == PAD).unwrap_or(tokens.len());
        let mut pos = 0;
        let e = parse_tokens(&tokens[..end], &mut pos)?;
        if pos != end {
            return Err(SsmError::MalformedExpr(format!("trailing tokens at {pos}")));
        }
        Ok(e)
    }
}

fn parse_tokens(t: &[usize], pos: &mut usize) -> Result<ListOpsExpr> {
    let tok = *t.get(*pos).ok_or_else(|| SsmError::MalformedExpr("unexpected end".into()))?;
    *pos += 1;
    match tok {
        0..=9 => Ok(ListOpsExpr::Leaf(tok as u8)),
        OPEN => {
            let op = t
                .get(*pos)
                .and_then(|&o| ListOp::from_token(o))
                .ok_or_else(|| SsmError::MalformedExpr(format!("expected operator at {}", *pos)))?;
            *pos += 1;
            let mut args = Vec::new();
            while t.get(*pos) != Some(&CLOSE) {
                if *pos >= t.len() {
                    return Err(SsmError::MalformedExpr("unclosed bracket".into()));
                }
                args.push(parse_tokens(t, pos)?);
            }
            *pos += 1;
            if args.len() < 2 {
                return Err(SsmError::MalformedExpr(format!("{} has {} argument(s)", op.name(), args.len())));
            }
            Ok(ListOpsExpr::Node(op, args))
        }
        other => Err(SsmError::MalformedExpr(format!("unexpected token {other}"))),
    }
}

/// Independent evaluator over the token stream: a value stack with
/// bracket frames, no tree.
pub fn eval_tokens_stack(tokens: &[usize]) -> Result<u8> {
    enum Item {
        Frame(ListOp),
        Val(u8),
    }
    let mut stack: Vec<Item> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i] {
            d @ 0..=9 => stack.push(Item::Val(d as u8)),
            OPEN => {
                let op = tokens
                    .get(i + 1)
                    .and_then(|&o| ListOp::from_token(o))
                    .ok_or_else(|| SsmError::MalformedExpr("bracket without operator".into()))?;
                stack.push(Item::Frame(op));
                i += 1;
            }
            CLOSE => {
                let mut vals = Vec::new();
                let op = loop {
                    match stack.pop() {
                        Some(Item::Val(v)) => vals.push(v),
                        Some(Item::Frame(op)) => break op,
                        None => return Err(SsmError::MalformedExpr("unbalanced close".into())),
                    }
                };
                if vals.len() < 2 {
                    return Err(SsmError::MalformedExpr("operator with < 2 arguments".into()));
                }
                stack.push(Item::Val(op.apply(&vals)));
            }
            SEP | PAD => break,
            t => return Err(SsmError::MalformedExpr(format!("unexpected token {t}"))),
        }
        i += 1;
    }
    match stack.as_slice() {
        [Item::Val(v)] => Ok(*v),
        _ => Err(SsmError::MalformedExpr("expression does not reduce to one value".into())),
    }
}

impl fmt::Display for ListOpsExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ListOpsExpr::Leaf(d) => write!(f, "{d}"),
            ListOpsExpr::Node(op, args) => {
                write!(f, "{}(", op.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Parses the functional form, e.g. `max(4, min(5, 6))`.
impl FromStr for ListOpsExpr {
    type Err = SsmError;
    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let e = parse_text(&chars, &mut pos)?;
        if pos != chars.len() {
            return Err(SsmError::MalformedExpr(format!("trailing input at {pos}")));
        }
        Ok(e)
    }
}

fn parse_text(c: &[char], pos: &mut usize) -> Result<ListOpsExpr> {
    let start = *pos;
    if let Some(d) = c.get(*pos).and_then(|ch| ch.to_digit(10)) {
        *pos += 1;
        return Ok(ListOpsExpr::Leaf(d as u8));
    }
    while c.get(*pos).is_some_and(|ch| ch.is_ascii_alphabetic()) {
        *pos += 1;
    }
    let name: String = c[start..*pos].iter().collect::<String>().to_ascii_lowercase();
    let op = match name.as_str() {
        "max" => ListOp::Max,
        "min" => ListOp::Min,
        "median" | "med" => ListOp::Median,
        "mean" | "avg" => ListOp::Mean,
        _ => return Err(SsmError::MalformedExpr(format!("unknown operator `{name}`"))),
    };
    if c.get(*pos) != Some(&'(') {
        return Err(SsmError::MalformedExpr(format!("expected `(` after {name}")));
    }
    *pos += 1;
    let mut args = vec![parse_text(c, pos)?];
    loop {
        match c.get(*pos) {
            Some(',') => {
                *pos += 1;
                args.push(parse_text(c, pos)?);
            }
            Some(')') => {
                *pos += 1;
                break;
            }
            _ => return Err(SsmError::MalformedExpr("expected `,` or `)`".into())),
        }
    }
    if args.len() < 2 {
        return Err(SsmError::MalformedExpr(format!("{name} has 1 argument")));
    }
    Ok(ListOpsExpr::Node(op, args))
}

/// Generator limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ListOpsLimits {
    /// Includes the trailing separator.
    pub max_len: usize,
    pub max_depth: usize,
    pub max_args: usize,
}

impl Default for ListOpsLimits {
    fn default() -> Self {
        ListOpsLimits { max_len: 128, max_depth: 4, max_args: 5 }
    }
}

impl ListOpsLimits {
    /// Shortest sample of depth `d`: a chain of binary nodes, plus the separator.
    pub fn min_len(depth: usize) -> usize {
        4 * depth + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_args < 2 || self.max_len == 0 {
            return Err(SsmError::InfeasibleLimits(format!(
                "need max_depth ≥ 1, max_args ≥ 2 and max_len ≥ 1 (got {self:?})"
            )));
        }
        if Self::min_len(self.max_depth) > self.max_len {
            return Err(SsmError::InfeasibleLimits(format!(
                "depth {} needs at least {} tokens, max_len is {}",
                self.max_depth,
                Self::min_len(self.max_depth),
                self.max_len
            )));
        }
        Ok(())
    }
}

const NEST_PROB: f64 = 0.25;
const MAX_ATTEMPTS: usize = 64;

/// A tree of exactly `depth` whose serialization plus separator fits `max_len`.
///
/// The depth is drawn uniformly from `1..=max_depth`. Oversized draws are
/// retried, and after repeated failures the minimal binary chain of that
/// depth is used, which always fits once the limits validate.
pub fn random_expr<R: Rng>(rng: &mut R, lim: &ListOpsLimits) -> ListOpsExpr {
    let depth = rng.gen_range(1..=lim.max_depth);
    let budget = lim.max_len - 1;
    for _ in 0..MAX_ATTEMPTS {
        let e = grow(rng, depth, lim.max_args);
        if e.len() <= budget {
            return e;
        }
    }
    chain(rng, depth)
}

fn leaf<R: Rng>(rng: &mut R) -> ListOpsExpr {
    ListOpsExpr::Leaf(rng.gen_range(0..10))
}

fn grow<R: Rng>(rng: &mut R, depth: usize, max_args: usize) -> ListOpsExpr {
    if depth == 0 {
        return leaf(rng);
    }
    let op = ListOp::ALL[rng.gen_range(0..4)];
    let n = rng.gen_range(2..=max_args);
    let forced = rng.gen_range(0..n);
    let args = (0..n)
        .map(|i| {
            if i == forced {
                grow(rng, depth - 1, max_args)
            } else if depth > 1 && rng.gen_bool(NEST_PROB) {
                let d = rng.gen_range(1..depth);
                grow(rng, d, max_args)
            } else {
                leaf(rng)
            }
        })
        .collect();
    ListOpsExpr::Node(op, args)
}

fn chain<R: Rng>(rng: &mut R, depth: usize) -> ListOpsExpr {
    let op = ListOp::ALL[rng.gen_range(0..4)];
    let inner = if depth == 1 { leaf(rng) } else { chain(rng, depth - 1) };
    let mut args = vec![inner, leaf(rng)];
    if rng.gen_bool(0.5) {
        args.swap(0, 1);
    }
    ListOpsExpr::Node(op, args)
}
