//! Execution strategy for data-parallel inner loops.
//!
//! Every parallel site in the crate partitions its output by index (disjoint
//! chunks or an ordered collect), so the numeric result is bit-identical in
//! sequential and parallel mode and independent of thread count. Reductions
//! that would otherwise depend on scheduling are done per fixed partition and
//! combined in index order.
//!
//! With the `parallel` feature (default) the mode can be switched at runtime,
//! which the benches use to compare both paths in one binary. Without the
//! feature rayon is not linked and everything runs sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How the crate's data-parallel loops execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon work-stealing over index-partitioned output. Requires the
    /// `parallel` feature; selecting it without the feature is a no-op.
    Parallel,
}

#[cfg(feature = "parallel")]
static MODE: AtomicU8 = AtomicU8::new(1);
#[cfg(not(feature = "parallel"))]
static MODE: AtomicU8 = AtomicU8::new(0);

/// Current execution mode.
pub fn exec_mode() -> ExecMode {
    if MODE.load(Ordering::Relaxed) == 0 {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Select the execution mode for subsequent kernel calls.
pub fn set_exec_mode(mode: ExecMode) {
    let v = match mode {
        ExecMode::Sequential => 0,
        ExecMode::Parallel => {
            if cfg!(feature = "parallel") {
                1
            } else {
                0
            }
        }
    };
    MODE.store(v, Ordering::Relaxed);
}

/// Configure the global thread pool. `1` forces sequential mode; other
/// values size the rayon pool (first call wins, later calls only switch
/// the mode). Without the `parallel` feature this only ever selects the
/// sequential path.
pub fn configure_threads(threads: usize) {
    if threads == 1 {
        set_exec_mode(ExecMode::Sequential);
        return;
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    set_exec_mode(ExecMode::Parallel);
}

/// Apply `f` to consecutive `chunk_len`-sized pieces of `data`, passing the
/// chunk index. Chunks are disjoint, so parallel and sequential execution
/// write identical bytes.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if exec_mode() == ExecMode::Parallel {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n` and collect the results in index order.
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec_mode() == ExecMode::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
