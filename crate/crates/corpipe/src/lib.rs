//! Joint mention detection and coreference linking over CorefUD data.
//!
//! The pipeline mirrors a jointly trained two-task setup: a shared token
//! encoder feeds a mention-detection head (stack-instruction tags decoded by
//! a constrained linear-chain CRF) and a coreference-linking head (masked
//! dot-product attention over previous mentions). Documents are processed in
//! sliding context windows; multilingual corpora are mixed by configurable
//! sampling ratios; evaluation uses head-based partial mention matching with
//! MUC, B³ and CEAF-e.

pub mod codec;
pub mod corefud;
pub mod crf;
pub mod encoder;
pub mod linker;
pub mod model;
pub mod sampling;
pub mod scalar;
pub mod scorer;
pub mod synth;
pub mod union_find;
pub mod window;

pub use scalar::Scalar;

/// Default scalar type for training and inference.
pub type F64 = f64;
/// Single-precision alias; all core math is generic over [`Scalar`].
pub type F32 = f32;
