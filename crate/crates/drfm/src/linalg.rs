//! Deterministic tiled matrix multiply for the batched training passes.
//!
//! Every output element is the fold `acc = a[i,l].mul_add(b[l,j], acc)` over
//! ascending `l`, no matter which register tile computed it — the same chain
//! as [`crate::model::dot`] — so results are independent of tile shape,
//! thread count, and execution mode. Tiling only changes how many such
//! chains advance per pass over `a` and `b`.

use crate::exec;
use crate::mat::Mat;

/// Rows of `out` advanced together (compile-time unrolled).
const ROW_TILE: usize = 4;
/// Columns of `out` advanced together in the widest kernel.
const COL_TILE: usize = 8;

/// `out = a * b` with `a: m x kk`, `b: kk x n`, `out: m x n` (overwritten).
pub(crate) fn matmul_into(out: &mut Mat, a: &Mat, b: &Mat) {
    let (m, kk, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(b.rows(), kk, "inner dimensions differ");
    assert_eq!((out.rows(), out.cols()), (m, n), "output shape differs");
    if m == 0 || n == 0 {
        return;
    }
    let a_data = a.as_slice();
    let b_data = b.as_slice();
    exec::for_each_row_block(out.as_mut_slice(), n, ROW_TILE, |i0, rows| {
        match rows.len() / n {
            1 => row_band::<1>(i0, rows, a_data, b_data, kk, n),
            2 => row_band::<2>(i0, rows, a_data, b_data, kk, n),
            3 => row_band::<3>(i0, rows, a_data, b_data, kk, n),
            4 => row_band::<4>(i0, rows, a_data, b_data, kk, n),
            _ => unreachable!("block larger than ROW_TILE"),
        }
    });
}

/// Fill `R` consecutive output rows starting at row `i0`.
fn row_band<const R: usize>(i0: usize, rows: &mut [f64], a: &[f64], b: &[f64], kk: usize, n: usize) {
    let mut j = 0;
    while j + COL_TILE <= n {
        tile::<R, COL_TILE>(i0, j, rows, a, b, kk, n);
        j += COL_TILE;
    }
    if j + 4 <= n {
        tile::<R, 4>(i0, j, rows, a, b, kk, n);
        j += 4;
    }
    if j + 2 <= n {
        tile::<R, 2>(i0, j, rows, a, b, kk, n);
        j += 2;
    }
    if j < n {
        tile::<R, 1>(i0, j, rows, a, b, kk, n);
    }
}

/// One `R x C` register tile: C-wide fma chains for R rows, `l` ascending.
#[inline]
fn tile<const R: usize, const C: usize>(
    i0: usize,
    j0: usize,
    rows: &mut [f64],
    a: &[f64],
    b: &[f64],
    kk: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; C]; R];
    for l in 0..kk {
        let bv: &[f64; C] = b[l * n + j0..l * n + j0 + C].try_into().unwrap();
        for r in 0..R {
            let av = a[(i0 + r) * kk + l];
            for c in 0..C {
                acc[r][c] = av.mul_add(bv[c], acc[r][c]);
            }
        }
    }
    for r in 0..R {
        rows[r * n + j0..r * n + j0 + C].copy_from_slice(&acc[r]);
    }
}
