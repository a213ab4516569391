//! Numerical lab for preference-optimization dynamics of diffusion models.
//!
//! A small tanh MLP denoiser with hand-written reverse mode supplies exact
//! Gaussian transition likelihoods. On top of it sit the DPO-family losses
//! (SFT, DPO, IPO, SLiC, PG-DPO), first-order update diagnostics built on
//! empirical NTK blocks, and a deterministic experiment harness.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod math;
pub mod net;
pub mod oracle;
pub mod verify;

pub use diffusion::{Denoiser, NoisyLatent, Schedule, ScheduleConfig, Transition};
pub use dynamics::{GTerm, KernelBlock, StepDiagnostics};
pub use error::{Error, Result};
pub use experiments::{RunConfig, RunLog};
pub use losses::{LossConfig, LossFamily, PreferencePair, RewardPair};
pub use net::{NetArch, ParamVector};
