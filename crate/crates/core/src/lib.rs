//! Compression of per-layer model deltas under a hard per-layer bit budget.
//!
//! The delta of each layer is factored by a truncated SVD, the factors are
//! sparsified down to exact bit-budget parity with a plain rank-r SVD, and
//! the surviving entries are serialized into compact records. Three methods
//! share the budget ladder: plain truncation, magnitude sparsification, and
//! importance-aware joint sparsification.

pub mod budget;
pub mod error;
pub mod linalg;
pub mod matio;
pub mod model;
pub mod osd;
pub mod sparsify;
pub mod synth;

pub use error::{Error, Result};

/// Sizes the global worker pool. Call once, before any parallel entry point;
/// later calls return an error from the pool builder. Zero threads means the
/// library default (one worker per core). Results never depend on the count.
pub fn init_thread_pool(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))
}
