//! Core numerics for weakly supervised lesion segmentation experiments.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! tensor containers, the soft pseudo-label pipeline, the normalized
//! active-passive loss family with analytic gradients, a deterministic
//! phantom/rater simulator, a small fixed convolutional segmenter with
//! hand-derived backpropagation, and pixel/instance evaluation metrics.
//!
//! The crate is `no_std` (with `alloc`); file formats, JSON schemas, and
//! the CLI live in the companion `noisyseg` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod softlabel;
pub mod stf;
pub mod synth;
pub mod tensor;

pub use losses::{apl, mae, normalized, soft_ce, soft_rce, BaseLoss, LossConfig, LossValueAndGrad};
pub use rng::SplitMix64;
pub use tensor::{BinaryMask, PredMap, SampleRecord, SoftMask, Tensor2D, Tensor3D};
