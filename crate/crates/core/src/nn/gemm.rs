//! Matrix products and the im2col/col2im lowering used by the convolutions.

use crate::par;

use std::cell::RefCell;

/// Block sizes used to split products across workers; fixed so that the
/// split never depends on the degree of parallelism.
const ROW_BLOCK: usize = 16;
const COL_BLOCK: usize = 1024;

/// Raw output pointer shared by workers that write disjoint column ranges.
#[derive(Clone, Copy)]
struct OutPtr(*mut f64);
// SAFETY: each worker writes a disjoint set of columns of the output.
unsafe impl Send for OutPtr {}
unsafe impl Sync for OutPtr {}

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]` for row-major operands.
///
/// `a_t`/`b_t` select the transposed interpretation of the stored matrix
/// (`a` stored `k×m`, `b` stored `n×k`). Work is split along whichever
/// output dimension is larger; every output element is computed by the
/// same kernel sequence either way, so the split does not change results.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if b_t { (1isize, k as isize) } else { (n as isize, 1isize) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if n > m {
        let out = OutPtr(c.as_mut_ptr());
        par::map_range(n.div_ceil(COL_BLOCK), |blk| {
            let j0 = blk * COL_BLOCK;
            let cols = COL_BLOCK.min(n - j0);
            let out = out;
            // SAFETY: columns j0..j0+cols of the m×n output belong to this
            // block only; `b` is offset to the same columns.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    cols,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr().offset(j0 as isize * csb),
                    rsb,
                    csb,
                    beta,
                    out.0.add(j0),
                    n as isize,
                    1,
                );
            }
        });
        return;
    }
    par::for_each_chunk_mut(c, ROW_BLOCK * n, |blk, cblk| {
        let r0 = blk * ROW_BLOCK;
        let rows = cblk.len() / n;
        // SAFETY: row offset r0 < m, strides describe valid m×k / k×n views of
        // `a`/`b`, and `cblk` is exactly rows×n contiguous outputs.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                cblk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Run `f` on a reusable buffer of `len` values with unspecified contents.
pub fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let r = f(&mut buf[..len]);
    SCRATCH.with(|s| {
        let mut slot = s.borrow_mut();
        if slot.len() < buf.len() {
            *slot = buf;
        }
    });
    r
}

/// Output columns `ox` whose input column `ox·s + kj − p` lies in `0..win`.
fn valid_cols(wout: usize, win: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    // ox·s + kj ≥ p  and  ox·s + kj < win + p
    let lo = p.saturating_sub(kj).div_ceil(s);
    let hi = if win + p > kj { (win + p - kj).div_ceil(s) } else { 0 };
    (lo.min(wout), hi.min(wout).max(lo.min(wout)))
}

/// Geometry of a 2-D cross-correlation with square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub hin: usize,
    pub win: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, hin: usize, win: usize, k: usize, stride: usize, pad: usize) -> Self {
        let hout = (hin + 2 * pad).saturating_sub(k) / stride + 1;
        let wout = (win + 2 * pad).saturating_sub(k) / stride + 1;
        ConvGeom { cin, hin, win, k, stride, pad, hout, wout }
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Lower the input into a `[cin·k·k, hout·wout]` patch matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.im2col_into(x, &mut cols);
        cols
    }

    /// [`Self::im2col`] into `cols`, overwriting every element.
    pub fn im2col_into(&self, x: &[f64], cols: &mut [f64]) {
        if self.is_pointwise() {
            cols.copy_from_slice(x);
            return;
        }
        let (k, s, p) = (self.k, self.stride, self.pad);
        let ncol = self.cols();
        let geo = *self;
        par::for_each_chunk_mut(cols, k * k * ncol, |c, block| {
            let plane = &x[c * geo.hin * geo.win..(c + 1) * geo.hin * geo.win];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut block[(ki * k + kj) * ncol..(ki * k + kj + 1) * ncol];
                    let (lo, hi) = valid_cols(geo.wout, geo.win, s, kj, p);
                    for oy in 0..geo.hout {
                        let iy = (oy * s + ki) as isize - p as isize;
                        let dst = &mut row[oy * geo.wout..(oy + 1) * geo.wout];
                        if iy < 0 || iy >= geo.hin as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * geo.win..(iy as usize + 1) * geo.win];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo < hi {
                            let first = lo * s + kj - p;
                            if s == 1 {
                                dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src[first + j * s];
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    /// Scatter-add a patch matrix back onto an input-shaped buffer.
    pub fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        if self.is_pointwise() {
            for (o, c) in out.iter_mut().zip(cols) {
                *o += c;
            }
            return;
        }
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncol = self.cols();
        let geo = *self;
        par::for_each_chunk_mut(out, geo.hin * geo.win, |c, plane| {
            let block = &cols[c * k * k * ncol..(c + 1) * k * k * ncol];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &block[(ki * k + kj) * ncol..(ki * k + kj + 1) * ncol];
                    let (lo, hi) = valid_cols(geo.wout, geo.win, s, kj, p as usize);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kj - p as usize;
                    for oy in 0..geo.hout {
                        let iy = (oy * s) as isize + ki as isize - p;
                        if iy < 0 || iy >= geo.hin as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * geo.win..(iy as usize + 1) * geo.win];
                        let src = &row[oy * geo.wout + lo..oy * geo.wout + hi];
                        if s == 1 {
                            for (d, v) in dst[first..first + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in src.iter().enumerate() {
                                dst[first + j * s] += v;
                            }
                        }
                    }
                }
            }
        });
    }
}
