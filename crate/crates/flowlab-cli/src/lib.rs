//! Config-driven experiment driver around the flowlab library: pair
//! generation, training, evaluation, the source-batch scaling study, and the
//! consolidated trajectory-straightness pipeline. Every run is reproducible
//! from (config, seed): artifacts are byte-stable and content-hashed into a
//! run manifest.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod ops;

/// Caps the global worker pool when `FLOWLAB_THREADS` is set. Results do not
/// depend on the thread count; only wall time does. Call once at startup.
pub fn init_threads() {
    if let Ok(v) = std::env::var("FLOWLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
