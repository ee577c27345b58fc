//! The six model cores and their two forward paths: a direct path over
//! the domain structs and the exec engines, and a tape path over a
//! [`ParamStore`](crate::learn::ParamStore) for training.

mod lti;
mod selective;
mod tape;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lti::{lti_forward, LtiModel, LtiParams};
pub use selective::{rglru_forward, rglru_gates, s6_compute_params, s6_forward, RgLruModel, S6Model};
pub use tape::core_tape_forward;

use crate::error::{Result, SsmError};
use crate::exec::{ExecMode, ExecOptions};
use crate::init::{self, InitSpec, LruRing};
use crate::learn::ParamStore;
use crate::system::Sequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "s4")]
    S4,
    #[serde(rename = "s4d")]
    S4d,
    #[serde(rename = "s5")]
    S5,
    #[serde(rename = "lru")]
    Lru,
    #[serde(rename = "s6")]
    S6,
    #[serde(rename = "rglru")]
    RgLru,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::S4,
        ModelKind::S4d,
        ModelKind::S5,
        ModelKind::Lru,
        ModelKind::S6,
        ModelKind::RgLru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::S4 => "s4",
            ModelKind::S4d => "s4d",
            ModelKind::S5 => "s5",
            ModelKind::Lru => "lru",
            ModelKind::S6 => "s6",
            ModelKind::RgLru => "rglru",
        }
    }

    pub fn is_lti(self) -> bool {
        !matches!(self, ModelKind::S6 | ModelKind::RgLru)
    }

    /// Single-input single-output cores run one subsystem per channel.
    pub fn is_siso(self) -> bool {
        matches!(self, ModelKind::S4 | ModelKind::S4d)
    }

    /// Engine used by the training path.
    pub fn default_mode(self) -> ExecMode {
        match self {
            ModelKind::S4 | ModelKind::S4d => ExecMode::Conv,
            _ => ExecMode::Scan,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = SsmError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| SsmError::InvalidArgument(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    #[default]
    Zoh,
    Bilinear,
}

/// Shape and initialization settings for one core.
///
/// `p` is the per-channel state size for S4/S4D/S6 and the total state
/// size for S5/LRU/RG-LRU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreConfig {
    pub kind: ModelKind,
    pub p: usize,
    pub q: usize,
    /// S5 block count.
    pub n_blocks: usize,
    /// S5 discretization; S4D always uses ZOH and S4 the bilinear transform.
    pub discretization: Discretization,
    pub delta_range: (f64, f64),
    pub lru_ring: LruRing,
    pub rglru_band: (f64, f64),
    pub rglru_c: f64,
    /// Caps the initial `|ā|` of S4D/S5 by pushing `Re λ` left.
    pub abar_cap: Option<f64>,
    /// Engine for the training path; `None` picks the kind's default.
    pub mode: Option<ExecMode>,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            kind: ModelKind::S4d,
            p: 8,
            q: 4,
            n_blocks: 1,
            discretization: Discretization::Zoh,
            delta_range: (1e-3, 1e-1),
            lru_ring: LruRing::default(),
            rglru_band: (0.9, 0.999),
            rglru_c: 8.0,
            abar_cap: None,
            mode: None,
        }
    }
}

impl CoreConfig {
    pub fn new(kind: ModelKind, p: usize, q: usize) -> Self {
        CoreConfig { kind, p, q, ..Default::default() }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode.unwrap_or_else(|| self.kind.default_mode())
    }

    pub fn init_spec(&self, seed: u64) -> InitSpec {
        InitSpec {
            model_kind: self.kind,
            p: self.p,
            q: self.q,
            lru_ring: self.lru_ring,
            delta_range: self.delta_range,
            seed,
            rglru_band: self.rglru_band,
            abar_cap: self.abar_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(SsmError::InvalidArgument("p and q must be ≥ 1".into()));
        }
        self.init_spec(0).validate()?;
        match self.kind {
            ModelKind::S4 | ModelKind::S4d if self.p % 2 != 0 => Err(SsmError::OddStateDim(self.p)),
            ModelKind::S5 if self.n_blocks == 0 || self.p % (2 * self.n_blocks) != 0 => {
                Err(SsmError::BlockDivisibility { p: self.p, blocks: self.n_blocks })
            }
            ModelKind::RgLru if self.p != self.q => Err(SsmError::NonSquare { p: self.p, q: self.q }),
            ModelKind::RgLru if !(self.rglru_c > 0.0) => Err(SsmError::InvalidArgument("RG-LRU c must be positive".into())),
            _ => Ok(()),
        }?;
        match (self.kind, self.mode) {
            (ModelKind::S4, Some(ExecMode::Scan)) => Err(SsmError::InvalidArgument(
                "S4's transition is not diagonal; use conv or recurrent".into(),
            )),
            (ModelKind::S6 | ModelKind::RgLru, Some(ExecMode::Conv)) => Err(SsmError::NotTimeInvariant),
            _ => Ok(()),
        }
    }
}

/// A core with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum CoreModel {
    Lti(LtiModel),
    S6(S6Model),
    RgLru(RgLruModel),
}

impl CoreModel {
    pub fn init(cfg: &CoreConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.init_spec(seed);
        Ok(match cfg.kind {
            ModelKind::S4 | ModelKind::S4d => CoreModel::Lti(LtiModel::init_siso(&spec)?),
            ModelKind::S5 => CoreModel::Lti(LtiModel {
                kind: ModelKind::S5,
                params: LtiParams::Mimo(init::init_s5(&spec, cfg.n_blocks)?),
                discretization: cfg.discretization,
            }),
            ModelKind::Lru => CoreModel::Lti(LtiModel {
                kind: ModelKind::Lru,
                params: LtiParams::Lru(init::init_lru(&spec)?),
                discretization: Discretization::Zoh,
            }),
            ModelKind::S6 => CoreModel::S6(init::init_s6(&spec)?),
            ModelKind::RgLru => CoreModel::RgLru(init::init_rglru(&spec, cfg.rglru_c)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            CoreModel::Lti(m) => m.kind,
            CoreModel::S6(_) => ModelKind::S6,
            CoreModel::RgLru(_) => ModelKind::RgLru,
        }
    }

    pub fn q(&self) -> usize {
        match self {
            CoreModel::Lti(m) => m.q(),
            CoreModel::S6(m) => m.q(),
            CoreModel::RgLru(m) => m.p(),
        }
    }

    /// Direct forward of one sequence.
    pub fn forward(&self, u: &Sequence, mode: ExecMode, opts: ExecOptions) -> Result<Sequence> {
        match self {
            CoreModel::Lti(m) => lti_forward(m, u, mode, opts),
            CoreModel::S6(m) => {
                if mode == ExecMode::Conv {
                    return Err(SsmError::NotTimeInvariant);
                }
                s6_forward(m, u, opts)
            }
            CoreModel::RgLru(m) => {
                if mode == ExecMode::Conv {
                    return Err(SsmError::NotTimeInvariant);
                }
                rglru_forward(m, u, opts)
            }
        }
    }

    /// Write the trainable parameters under `prefix`.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        match self {
            CoreModel::Lti(m) => m.register(store, prefix),
            CoreModel::S6(m) => m.register(store, prefix),
            CoreModel::RgLru(m) => m.register(store, prefix),
        }
    }

    /// Rebuild from parameters written by [`CoreModel::register`].
    pub fn from_store(cfg: &CoreConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(match cfg.kind {
            ModelKind::S6 => CoreModel::S6(S6Model::from_store(store, prefix)?),
            ModelKind::RgLru => CoreModel::RgLru(RgLruModel::from_store(store, prefix, cfg.rglru_c)?),
            _ => CoreModel::Lti(LtiModel::from_store(cfg, store, prefix)?),
        })
    }
}
