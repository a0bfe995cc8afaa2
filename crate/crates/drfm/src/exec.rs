//! Execution-mode plumbing for the `parallel` feature.
//!
//! With the (default) `parallel` feature the hot loops fan out over rayon;
//! without it they compile straight to sequential loops. Either way every
//! output element is accumulated in the same fixed order, so the two paths
//! produce bit-identical results — [`run_sequential`] exists so benches and
//! tests can check exactly that claim inside one binary, and so the overhead
//! of the thread pool can be measured against the plain loops.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

struct SeqGuard {
    prev: bool,
}

impl Drop for SeqGuard {
    fn drop(&mut self) {
        FORCE_SEQUENTIAL.with(|f| f.set(self.prev));
    }
}

/// Run `f` with the parallel paths disabled on the current thread.
///
/// Nested calls are fine; the previous state is restored on exit (also on
/// panic).
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let _guard = SeqGuard {
        prev: FORCE_SEQUENTIAL.with(|flag| flag.replace(true)),
    };
    f()
}

/// True when work should fan out over rayon.
#[inline]
pub(crate) fn parallel_active() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|f| f.get())
}

/// Apply `f(i, row)` to each `width`-sized row of `data`.
///
/// Rows are disjoint output slices, so the parallel and sequential paths
/// perform identical arithmetic per row and the results match bit-for-bit.
pub(crate) fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in data.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

/// Apply `f(first_row, rows)` to consecutive blocks of up to `block` rows.
///
/// Like [`for_each_row`] but hands out multi-row chunks, so kernels can tile
/// across rows; the final block may be short.
pub(crate) fn for_each_row_block<F>(data: &mut [f64], width: usize, block: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && block > 0 && data.len() % width == 0);
    let chunk = width * block;
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, rows)| f(i * block, rows));
        return;
    }
    for (i, rows) in data.chunks_mut(chunk).enumerate() {
        f(i * block, rows);
    }
}

/// Apply `f(i, row_a, row_b)` to the i-th rows of two equally-rowed buffers
/// (row widths may differ), e.g. to fill two matrices in one fused pass.
pub(crate) fn for_each_row_pair<F>(
    a: &mut [f64],
    width_a: usize,
    b: &mut [f64],
    width_b: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    debug_assert!(width_a > 0 && width_b > 0);
    debug_assert_eq!(a.len() / width_a, b.len() / width_b);
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        a.par_chunks_mut(width_a)
            .zip(b.par_chunks_mut(width_b))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
        return;
    }
    for (i, (ra, rb)) in a.chunks_mut(width_a).zip(b.chunks_mut(width_b)).enumerate() {
        f(i, ra, rb);
    }
}
