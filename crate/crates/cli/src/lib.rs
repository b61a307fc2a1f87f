//! Batch front end for the elutriation toolkit: JSON configs in, CSV data
//! series and a self-describing run document out.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};

/// Run `f` on a dedicated pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::config("--threads", "must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::config("--threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
