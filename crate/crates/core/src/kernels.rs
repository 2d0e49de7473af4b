//! Raw compute kernels: matrix multiply, im2col convolution and their
//! backward passes.
//!
//! The matrix multiply is an axpy-style kernel processing two output
//! rows at a time; on x86-64 it is additionally compiled with AVX2+FMA
//! enabled and dispatched at runtime. Convolutions parallelize over
//! batch samples and reduce per-sample contributions in batch order, so
//! for a given build every result is bit-identical run to run regardless
//! of thread count. Transposed multiplies are realized by explicitly
//! transposing an operand first, which keeps the per-element summation
//! order (and therefore the rounding) identical to the plain kernel.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Rows of B processed per cache block; 128 rows of 256-wide f32 keep
/// the active B slice inside L2 while every row group revisits it.
const K_BLOCK: usize = 128;

#[inline(always)]
fn fused_or_plain<S: Scalar, const FUSED: bool>(acc: S, a: S, b: S) -> S {
    if FUSED {
        b.mul_add(a, acc)
    } else {
        acc + a * b
    }
}

/// `C[m,n] += A[m,k] * B[k,n]`.
///
/// Blocked over k with four output rows per pass: each B row read is
/// amortized over four accumulator rows that stay L1-resident. Every
/// output element still accumulates its k-terms in ascending order, so
/// the result is independent of the blocking. `FUSED` selects `mul_add`,
/// which maps onto actual fma instructions only in the feature-gated
/// build below.
#[inline(always)]
fn mm_into<S: Scalar, const FUSED: bool>(
    c: &mut [S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut k0 = 0;
    while k0 < k {
        let k_end = (k0 + K_BLOCK).min(k);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, rest) = rest.split_at_mut(n);
            let c3 = &mut rest[..n];
            for kk in k0..k_end {
                let b_row = &b[kk * n..kk * n + n];
                let a0 = a[i * k + kk];
                let a1 = a[(i + 1) * k + kk];
                let a2 = a[(i + 2) * k + kk];
                let a3 = a[(i + 3) * k + kk];
                for j in 0..n {
                    let bv = b_row[j];
                    c0[j] = fused_or_plain::<S, FUSED>(c0[j], a0, bv);
                    c1[j] = fused_or_plain::<S, FUSED>(c1[j], a1, bv);
                    c2[j] = fused_or_plain::<S, FUSED>(c2[j], a2, bv);
                    c3[j] = fused_or_plain::<S, FUSED>(c3[j], a3, bv);
                }
            }
            i += 4;
        }
        while i < m {
            let c_row = &mut c[i * n..i * n + n];
            for kk in k0..k_end {
                let b_row = &b[kk * n..kk * n + n];
                let av = a[i * k + kk];
                for j in 0..n {
                    c_row[j] = fused_or_plain::<S, FUSED>(c_row[j], av, b_row[j]);
                }
            }
            i += 1;
        }
        k0 = k_end;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn mm_into_avx2<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    mm_into::<S, true>(c, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

fn mm_dispatch<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // Safe: feature presence checked at runtime.
        unsafe { mm_into_avx2(c, a, b, m, k, n) };
        return;
    }
    mm_into::<S, false>(c, a, b, m, k, n);
}

pub fn transpose<S: Scalar>(src: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    transpose_into(src, rows, cols, &mut out);
    out
}

fn transpose_into<S: Scalar>(src: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

/// `C[m,n] = A[m,k] * B[k,n]`.
pub fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    mm_dispatch(&mut c, a, b, m, k, n);
    c
}

/// `C[m,n] = A[m,k] * B^T` with `B[n,k]`.
pub fn mm_a_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let bt = transpose(b, n, k);
    mm(a, &bt, m, k, n)
}

/// `C[m,n] = A^T * B` with `A[k,m]`, `B[k,n]`.
pub fn mm_at_b<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let at = transpose(a, k, m);
    mm(&at, b, m, k, n)
}

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<ConvGeom> {
        let h_pad = h + 2 * padding;
        let w_pad = w + 2 * padding;
        if stride == 0 || kh == 0 || kw == 0 || kh > h_pad || kw > w_pad {
            return None;
        }
        Some(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h_pad - kh) / stride + 1,
            w_out: (w_pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output-x range `[lo, hi)` whose input column `ox*stride + c - pad`
/// falls inside `[0, w)`.
#[inline]
fn valid_ox_range(g: &ConvGeom, c: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(c).div_ceil(g.stride);
    let hi = (g.w + g.padding)
        .saturating_sub(c)
        .div_ceil(g.stride)
        .min(g.w_out);
    (lo.min(hi), hi)
}

/// Unfolds one sample into a `[c_in*kh*kw, h_out*w_out]` patch matrix.
/// Per (kernel-column, output-row) the valid span is copied wholesale;
/// out-of-image positions are zero-filled.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.out_pixels();
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for r in 0..g.kh {
            for c in 0..g.kw {
                let (ox_lo, ox_hi) = valid_ox_range(g, c);
                let out_row = &mut cols[row * p..(row + 1) * p];
                for (oy, dst) in out_row.chunks_exact_mut(g.w_out).enumerate() {
                    let iy = (oy * g.stride + r) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..ox_lo].fill(S::zero());
                    dst[ox_hi..].fill(S::zero());
                    if g.stride == 1 {
                        let ix_lo = ox_lo + c - g.padding;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    } else {
                        for (d, ox) in dst[ox_lo..ox_hi].iter_mut().zip(ox_lo..) {
                            *d = src[ox * g.stride + c - g.padding];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one input sample (scatter-add).
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.out_pixels();
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for r in 0..g.kh {
            for c in 0..g.kw {
                let (ox_lo, ox_hi) = valid_ox_range(g, c);
                let col_row = &cols[row * p..(row + 1) * p];
                for (oy, src) in col_row.chunks_exact(g.w_out).enumerate() {
                    let iy = (oy * g.stride + r) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let ix_lo = ox_lo + c - g.padding;
                        for (d, &v) in dst[ix_lo..ix_lo + (ox_hi - ox_lo)]
                            .iter_mut()
                            .zip(&src[ox_lo..ox_hi])
                        {
                            *d = *d + v;
                        }
                    } else {
                        for (&v, ox) in src[ox_lo..ox_hi].iter().zip(ox_lo..) {
                            let ix = ox * g.stride + c - g.padding;
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution over a batch: `x[b,ci,h,w] * w[co,ci,kh,kw] + bias[co]`.
pub fn conv2d_forward<S: Scalar>(x: &[S], weight: &[S], bias: &[S], g: &ConvGeom) -> Vec<S> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * p;
    let mut out = vec![S::zero(); g.batch * sample_out];
    out.par_chunks_mut(sample_out)
        .zip(x.par_chunks(sample_in))
        .for_each_init(
            // Patch-matrix scratch reused across the samples a worker
            // processes.
            || vec![S::zero(); k * p],
            |cols, (out_b, x_b)| {
                im2col(x_b, g, cols);
                mm_dispatch(out_b, weight, cols, g.c_out, k, p);
                for (co, row) in out_b.chunks_exact_mut(p).enumerate() {
                    let b_val = bias[co];
                    for v in row {
                        *v = *v + b_val;
                    }
                }
            },
        );
    out
}

/// Backward convolution. Returns `(dx, dw, dbias)`.
pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    d_out: &[S],
    g: &ConvGeom,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let p = g.out_pixels();
    let k = g.patch_len();
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * p;
    let weight_t = transpose(weight, g.c_out, k);

    // Per-sample contributions computed in parallel, then reduced in batch
    // order so the accumulation order is fixed.
    let per_sample: Vec<(Vec<S>, Vec<S>)> = (0..g.batch)
        .into_par_iter()
        .map_init(
            || (vec![S::zero(); k * p], vec![S::zero(); k * p], vec![S::zero(); k * p]),
            |(cols, cols_t, dcols), b| {
                let x_b = &x[b * sample_in..(b + 1) * sample_in];
                let d_out_b = &d_out[b * sample_out..(b + 1) * sample_out];
                im2col(x_b, g, cols);
                // dW_b[co, k] = dOut_b[co, p] * cols^T
                transpose_into(cols, k, p, cols_t);
                let dw_b = mm(d_out_b, cols_t, g.c_out, p, k);
                // dcols[k, p] = W^T * dOut_b
                dcols.fill(S::zero());
                mm_dispatch(dcols, &weight_t, d_out_b, k, g.c_out, p);
                let mut dx_b = vec![S::zero(); sample_in];
                col2im(dcols, g, &mut dx_b);
                (dw_b, dx_b)
            },
        )
        .collect();

    let mut dw = vec![S::zero(); g.c_out * k];
    let mut dx = vec![S::zero(); g.batch * sample_in];
    for (b, (dw_b, dx_b)) in per_sample.into_iter().enumerate() {
        for (acc, v) in dw.iter_mut().zip(dw_b) {
            *acc = *acc + v;
        }
        dx[b * sample_in..(b + 1) * sample_in].copy_from_slice(&dx_b);
    }

    let mut dbias = vec![S::zero(); g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let row = &d_out[b * sample_out + co * p..b * sample_out + (co + 1) * p];
            let mut acc = S::zero();
            for &v in row {
                acc = acc + v;
            }
            dbias[co] = dbias[co] + acc;
        }
    }

    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as the oracle for the kernels.
    fn conv2d_direct(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.out_pixels()];
        for bi in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = b[co];
                        for ci in 0..g.c_in {
                            for r in 0..g.kh {
                                for c in 0..g.kw {
                                    let iy = (oy * g.stride + r) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + c) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x[((bi * g.c_in + ci) * g.h + iy as usize) * g.w
                                        + ix as usize];
                                    let wv = w[((co * g.c_in + ci) * g.kh + r) * g.kw + c];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((bi * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matmul_small() {
        // 2x3 * 3x2 computed by hand.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = mm(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_odd_rows() {
        // 3x2 * 2x2: exercises the odd-row tail of the paired kernel.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, -1.0, 2.0, 0.5];
        let c = mm(&a, &b, 3, 2, 2);
        assert_eq!(c, vec![5.0, 0.0, 11.0, -1.0, 17.0, -2.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|i| (i as f64) * 0.1 - 0.7).collect(); // 4x5
        let c = mm(&a, &b, 3, 4, 5);

        let bt = transpose(&b, 4, 5);
        let c2 = mm_a_bt(&a, &bt, 3, 4, 5);
        assert_eq!(c, c2);

        let at = transpose(&a, 3, 4);
        let c3 = mm_at_b(&at, &b, 3, 4, 5);
        assert_eq!(c, c3);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..15).map(|i| i as f64).collect();
        assert_eq!(transpose(&transpose(&a, 3, 5), 5, 3), a);
    }

    #[test]
    fn conv_center_of_ones_is_nine() {
        // 3x3 input of ones, single 3x3 kernel of ones, padding 1, stride 1:
        // the center output sums the full kernel.
        let g = ConvGeom::new(1, 1, 3, 3, 1, 3, 3, 1, 1).unwrap();
        let x = vec![1.0f64; 9];
        let w = vec![1.0f64; 9];
        let out = conv2d_forward(&x, &w, &[0.0], &g);
        assert_eq!(out.len(), 9);
        assert_eq!(out[4], 9.0);
        // Corners see a 2x2 patch, edges a 2x3 patch.
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(b, ci, h, w, co, kh, stride, pad) in &[
            (2usize, 3usize, 5usize, 4usize, 4usize, 3usize, 1usize, 1usize),
            (1, 2, 6, 6, 3, 3, 2, 1),
            (3, 1, 4, 4, 2, 2, 2, 0),
            (1, 5, 7, 7, 7, 3, 1, 1),
        ] {
            let g = ConvGeom::new(b, ci, h, w, co, kh, kh, stride, pad).unwrap();
            let x: Vec<f64> = (0..b * ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..co * ci * kh * kh).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&x, &wt, &bias, &g);
            let slow = conv2d_direct(&x, &wt, &bias, &g);
            for (a, b_) in fast.iter().zip(&slow) {
                assert!((a - b_).abs() < 1e-10, "conv mismatch: {a} vs {b_}");
            }
        }
    }
}
