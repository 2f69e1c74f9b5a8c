use rayon::ThreadPoolBuilder;

/// Run `f` on a pool of `threads` workers; 0 uses the global pool.
///
/// Callers collect parallel results in index order and reduce them
/// sequentially, so the worker count never changes a result bit.
pub fn install<T, F>(threads: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if threads == 0 {
        return f();
    }
    match ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
