//! Structured state-space sequence models.
//!
//! The crate covers six model cores (S4, S4D, S5, LRU, S6, RG-LRU) that all
//! reduce to a diagonal linear recurrence
//!
//! ```text
//! x(k) = ā(k) ⊙ x(k-1) + drive(k)
//! y(k) = Re(C̄ x(k)) + D̄ ⊙ u(k)
//! ```
//!
//! and three interchangeable engines to evaluate it: a sequential
//! recurrence, an associative parallel scan and an FFT convolution.
//! Around the cores sit the gated scaffolds, a layer stack with a
//! classification head, a small tensor tape for reverse-mode gradients,
//! Adam, and synthetic task generators.

pub mod bench;
pub mod discretize;
pub mod error;
pub mod exec;
pub mod init;
pub mod learn;
pub mod models;
pub mod rng;
pub mod scaffold;
pub mod system;
pub mod tasks;

pub use error::{Result, SsmError};
pub use num_complex::Complex64;
pub use system::{ContinuousSystem, DiscreteSystem, Sequence, TimeVaryingParams};
