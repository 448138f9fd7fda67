//! Thread-count control. Kernels split work per output plane, so results do
//! not depend on the number of threads.

/// Caps internal parallelism when set to a positive integer.
pub const THREADS_ENV: &str = "FDDW_THREADS";

pub fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}");
            None
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `threads` is `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Sizes the global pool from the environment; later calls are no-ops.
pub fn init_from_env() {
    if let Some(n) = threads_from_env() {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedicated_pool_has_requested_size() {
        assert_eq!(with_threads(Some(3), rayon::current_num_threads), 3);
    }
}
