//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper runs the same closure per index whether or not rayon is
//! enabled, and results come back in index order. Reductions are done by the
//! caller over that ordered output, so both paths are bit-identical.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Toggle the rayon path at runtime. A no-op without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

/// True when the rayon path is compiled in, switched on and has more than
/// one worker thread.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::Relaxed) && rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// `(0..n).map(f).collect()`, fanned out over the rayon pool when enabled.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to consecutive `chunk`-sized slices of `out`, in parallel when
/// enabled. `f` receives the chunk index.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
