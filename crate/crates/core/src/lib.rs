pub mod diagnostics;
pub mod engine;
pub mod ensemble;
pub mod experiment;
pub mod oracle;
pub mod problem;
pub(crate) mod sampling;
pub mod schedule;
pub(crate) mod util;

/// Sizes the global trajectory worker pool; `0` keeps one thread per core.
///
/// Must run before the first parallel call; afterwards the pool is fixed and
/// resizing fails.
pub fn configure_thread_pool(threads: usize) -> Result<(), String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    builder.build_global().map_err(|e| e.to_string())
}
