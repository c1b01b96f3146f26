//! Correlated quantization for distributed mean estimation.
//!
//! Clients hold bounded scalars or vectors and send a few bits each to a
//! server that estimates their mean. Correlated quantizers draw the
//! clients' rounding thresholds from a shared random permutation, so the
//! rounding errors cancel across clients and the estimation error scales
//! with the mean absolute deviation of the inputs instead of their range.
//!
//! Module map:
//!
//! - [`randomness`]: seed derivation and the per-round shared randomness.
//! - [`scalar_quant`]: one-dimensional correlated and independent quantizers.
//! - [`vector_quant`]: coordinate-wise, entropy-coded and Hadamard-rotated
//!   vector quantizers plus baselines.
//! - [`bitcodec`]: Elias-gamma and fixed-width bit packing, wire messages.
//! - [`harness`]: Monte-Carlo mean-estimation simulator and dataset generators.
//! - [`tasks`]: k-means, power iteration, SGD and federated averaging on top
//!   of the mean-estimation primitive.
//!
//! With the default `parallel` feature, Monte-Carlo trials and per-client
//! work run on the rayon thread pool. Results are identical either way.

pub mod bitcodec;
mod error;
pub mod harness;
pub mod par;
pub mod randomness;
pub mod scalar_quant;
pub mod tasks;
pub mod vector_quant;

pub use error::{Error, Result};
pub use harness::SchemeId;
pub use randomness::{MasterSeed, RandomnessContext};
