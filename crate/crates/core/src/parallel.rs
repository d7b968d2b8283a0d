//! Thread-pool sizing.

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "PLENOCAL_THREADS";

/// Worker count from `PLENOCAL_THREADS`, or the rayon default.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Run `job` on a pool sized by [`thread_count`].
pub fn install<R: Send>(job: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build() {
        Ok(pool) => pool.install(job),
        Err(_) => job(),
    }
}
