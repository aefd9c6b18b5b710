//! A desk-scale laboratory for sparse mixture-of-experts mechanisms:
//! grouped routing and expert-parallel balance, straight-through router
//! gradients, expert expansion, a masked importance-sampled policy-gradient
//! loss, FP8/BF16 rounding emulation, rollout router replay and adaptive
//! time-series patching.
//!
//! All arithmetic is `f64`; lower precisions are explicit rounding emulations.

pub mod checkpoint;
pub mod cli;
pub mod epsim;
pub mod error;
pub mod expansion;
pub mod experiments;
pub mod numeric;
pub mod precision;
pub mod replay;
pub mod rlloss;
pub mod routing;
pub mod signal;
mod wire;

pub use error::{Error, FormatError, Result};
pub use numeric::{Matrix, Rng};
pub use routing::{ExpertBank, MoeLayerSpec, RoutingDecision, RoutingMode};
