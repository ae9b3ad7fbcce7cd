//! Absorbing-state masked discrete diffusion for sequence generation.
//!
//! The crate covers the whole loop at desk scale:
//!
//! - [`diffusion`]: forward corruption, conditional kernels, the reverse
//!   posterior and the `1/t`-weighted masked cross entropy.
//! - [`masking`]: unmaskable-prefix, truncated-suffix and block masking, the
//!   epoch curriculum, and prompt conditioning for fine-tuning.
//! - [`denoiser`]: an exact tabular Bayes denoiser and a tiny bidirectional
//!   transformer with a hand-written backward pass.
//! - [`sampler`]: confidence-ranked iterative unmasking, threshold-based
//!   parallel decoding and infilling.
//! - [`trainer`], [`data`], [`eval`]: the three-stage training recipe, toy
//!   corpora and shards, and exact-match evaluation with step sweeps.
//!
//! The `maskdiff` binary wraps these behind subcommands; see [`cli`].

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod eval;
pub mod masking;
pub mod sampler;
pub mod schedule;
pub mod seq;
pub mod toy;
pub mod trainer;
pub mod vocab;

pub use denoiser::{Denoiser, DenoiserOutput, TabularDenoiser, TinyTransformer, ToyDistribution};
pub use diffusion::MaskDiffusion;
pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use seq::{MaskabilityMask, TokenSeq};
pub use vocab::{TokenId, Vocabulary};
