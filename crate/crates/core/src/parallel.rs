//! Optional data parallelism.
//!
//! With the `parallel` feature the helpers here fan work out over rayon;
//! without it they run the same closures in a plain loop. Every helper
//! partitions work over independent outputs, so the accumulation order of
//! each output element never depends on the thread count and results are
//! bit-identical either way.
//!
//! [`set_enabled`] switches the parallel path off at runtime, which the
//! benches use to compare both paths from one binary.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work below this many scalar operations stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// True when the crate was built with `parallel` and it has not been
/// switched off.
pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
///
/// `work_per_chunk` is a rough operation count used to decide whether
/// spawning is worth it.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let chunks = data.len().div_ceil(chunk_len);
        if is_enabled() && chunks > 1 && chunks.saturating_mul(work_per_chunk) >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_chunk;
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, work_per_item: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && n > 1 && n.saturating_mul(work_per_item) >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_and_sequential_agree() {
        let mut a = vec![0u64; 100_000];
        for_each_chunk_mut(&mut a, 1000, 1000, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = (i * 1000 + j) as u64;
            }
        });
        assert!(a.iter().enumerate().all(|(i, &x)| x == i as u64));
        let m = map_indexed(50_000, 1, |i| i * 2);
        assert_eq!(m[49_999], 99_998);
    }
}
