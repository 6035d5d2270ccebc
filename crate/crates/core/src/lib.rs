//! Parameter-efficient fine-tuning and compression at desk scale.
//!
//! * [`lora`]: low-rank adapters over frozen base matrices, with closed-form
//!   gradients and merging.
//! * [`quant`]: absmax b-bit quantization and the quantized-base forward.
//! * [`prune`]: magnitude pruning masks with exact-count thresholds.
//! * [`trainer`]: a deterministic adapter-only training loop over a small
//!   rectifier network.
//! * [`metrics`]: ROUGE-1/2/L, BLEU and BERTScore with pluggable embeddings.
//! * [`datapipe`]: temporal image pairing, filtering, splits and
//!   conversational annotation records.
//! * [`compress`]: merge, prune and quantize a trained model.
//! * [`checkpoint`]: the binary section formats shared by all of the above.

pub mod checkpoint;
pub mod compress;
pub mod datapipe;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod numerics;
pub mod prune;
pub mod quant;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{finite_difference_grad, gaussian_matrix, matmul, Matrix, SeededRng};
