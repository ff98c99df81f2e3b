//! Fully convolutional JPEG deblocking networks trained from scratch on the CPU.
//!
//! The crate covers the whole pipeline: luma image I/O, a JPEG degradation
//! simulator, a small convolution engine with exact gradients, the L4 and L8
//! networks, quality metrics, the shift-averaging baseline, and the training
//! and experiment drivers.

pub mod arch;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod image;
pub mod jpeg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod spp;
pub mod train;

pub use arch::{build_l4, build_l8, Arch, Network, NetworkSpec, Objective};
pub use error::{Error, Result};
pub use image::GrayImage;
pub use jpeg::jpeg_degrade;
pub use model::{load_model, save_model};
pub use spp::spp_filter;
pub use train::{train, TrainConfig};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DEBLOCK_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`], if set.
///
/// Returns the thread count in effect. Results are deterministic for a fixed
/// count; a count of 1 gives the reference results.
pub fn init_threads_from_env() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
