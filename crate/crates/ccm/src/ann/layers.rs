//! Batched tensor primitives: im2col convolution, 2x2 average pooling,
//! nearest-neighbor upsampling, channel concatenation, and the pointwise
//! nonlinearities.
//!
//! Feature maps are stored as (channels, batch*height*width) matrices so
//! convolutions become GEMMs. Parallel sections split work into fixed-size
//! chunks with no cross-thread accumulation, keeping results bitwise
//! independent of the worker count.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rayon::prelude::*;

use crate::linalg::{par_gemm, Scalar};

/// A batch of feature maps: `data[(c, bi*h*w + y*w + x)]`.
#[derive(Debug, Clone)]
pub(crate) struct FeatMap<F> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Array2<F>,
}

impl<F: Scalar> FeatMap<F> {
    pub fn new(c: usize, b: usize, h: usize, w: usize, data: Array2<F>) -> Self {
        debug_assert_eq!(data.dim(), (c, b * h * w));
        Self { c, b, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Allocates an uninitialized matrix. Only used where every element is
/// written before any read: im2col writes full rows (padding included) and
/// beta = 0 GEMM overwrites its output. Float types make any bit pattern a
/// valid value, so this never materializes an invalid `F`.
fn uninit2<F: Scalar>(rows: usize, cols: usize) -> Array2<F> {
    let n = rows * cols;
    let mut v: Vec<F> = Vec::with_capacity(n);
    #[allow(clippy::uninit_vec)]
    unsafe {
        v.set_len(n);
    }
    Array2::from_shape_vec((rows, cols), v).expect("length matches shape")
}

/// Unfolds `x` into convolution columns: output row `c*k*k + dy*k + dx`
/// holds the input channel `c` shifted by the kernel offset, zero-padded so
/// spatial size is preserved.
pub(crate) fn im2col<F: Scalar>(x: &FeatMap<F>, k: usize) -> Array2<F> {
    let pad = (k / 2) as isize;
    let (c, b, h, w) = (x.c, x.b, x.h, x.w);
    let hw = h * w;
    let mut cols = uninit2::<F>(c * k * k, b * hw);
    let rows: Vec<_> = cols.axis_iter_mut(Axis(0)).collect();
    rows.into_par_iter().enumerate().for_each(|(row_idx, mut row)| {
        let ci = row_idx / (k * k);
        let sy = ((row_idx / k) % k) as isize - pad;
        let sx = (row_idx % k) as isize - pad;
        let dst = row.as_slice_mut().expect("cols rows are contiguous");
        let src_row = x.data.row(ci);
        let src = src_row.as_slice().expect("feature rows are contiguous");
        // Valid output columns satisfy 0 <= x + sx < w.
        let x_lo = (-sx).max(0) as usize;
        let x_hi = ((w as isize - sx).clamp(0, w as isize)) as usize;
        for bi in 0..b {
            for y in 0..h {
                let yy = y as isize + sy;
                let seg = &mut dst[bi * hw + y * w..bi * hw + (y + 1) * w];
                if yy < 0 || yy >= h as isize {
                    seg.fill(F::zero());
                    continue;
                }
                seg[..x_lo].fill(F::zero());
                if x_hi > x_lo {
                    let s0 = bi * hw + yy as usize * w + (x_lo as isize + sx) as usize;
                    seg[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
                seg[x_hi..].fill(F::zero());
            }
        }
    });
    cols
}

/// Folds column gradients back onto the input: the adjoint of [`im2col`].
pub(crate) fn col2im<F: Scalar>(
    dcols: &ArrayView2<F>,
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Array2<F> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut dx = Array2::<F>::zeros((c, b * hw));
    let rows: Vec<_> = dx.axis_iter_mut(Axis(0)).collect();
    rows.into_par_iter().enumerate().for_each(|(ci, mut out_row)| {
        let out = out_row.as_slice_mut().expect("contiguous");
        for dy in 0..k {
            for dxo in 0..k {
                let row_idx = ci * k * k + dy * k + dxo;
                let src_row = dcols.row(row_idx);
                let src = src_row.as_slice().expect("contiguous");
                let sy = dy as isize - pad;
                let sx = dxo as isize - pad;
                // cols[row, bi, y, x] draws from X[ci, bi, y+sy, x+sx], so
                // dX[ci, bi, yy, xx] accumulates dcols[row, bi, yy-sy, xx-sx].
                let y_lo = sy.max(0) as usize;
                let y_hi = ((h as isize + sy).clamp(0, h as isize)) as usize;
                let x_lo = sx.max(0) as usize;
                let x_hi = ((w as isize + sx).clamp(0, w as isize)) as usize;
                if x_hi <= x_lo {
                    continue;
                }
                for bi in 0..b {
                    for yy in y_lo..y_hi {
                        let src_base =
                            bi * hw + (yy as isize - sy) as usize * w + (x_lo as isize - sx) as usize;
                        let dst_base = bi * hw + yy * w + x_lo;
                        let n = x_hi - x_lo;
                        let (d, s) = (&mut out[dst_base..dst_base + n], &src[src_base..src_base + n]);
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv = *dv + *sv;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Convolution with zero padding preserving spatial size; no activation.
pub(crate) fn conv_forward<F: Scalar>(
    weight: &Array4<F>,
    bias: &Array1<F>,
    x: &FeatMap<F>,
) -> FeatMap<F> {
    let (g, cin, k, _) = weight.dim();
    debug_assert_eq!(cin, x.c);
    let n = x.b * x.hw();
    let w2 = weight.to_shape((g, cin * k * k)).expect("weights contiguous");
    let mut out = uninit2::<F>(g, n);
    if k == 1 {
        par_gemm(&w2.view(), &x.data.view(), &mut out);
    } else {
        let cols = im2col(x, k);
        par_gemm(&w2.view(), &cols.view(), &mut out);
    }
    for (mut row, &bv) in out.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + bv);
    }
    FeatMap::new(g, x.b, x.h, x.w, out)
}

pub(crate) struct ConvGrads<F> {
    pub d_weight: Array4<F>,
    pub d_bias: Array1<F>,
    pub d_input: Array2<F>,
}

/// Gradients of a convolution given `d_z`, the gradient at its pre-activation
/// output. `x` is the forward input (columns are recomputed rather than
/// cached; they are the largest transient in the network).
pub(crate) fn conv_backward<F: Scalar>(
    weight: &Array4<F>,
    x: &FeatMap<F>,
    d_z: &ArrayView2<F>,
) -> ConvGrads<F> {
    let (g, cin, k, _) = weight.dim();
    let n = x.b * x.hw();
    debug_assert_eq!(d_z.dim(), (g, n));
    let w2 = weight.to_shape((g, cin * k * k)).expect("weights contiguous");
    let mut d_w2 = Array2::<F>::zeros((g, cin * k * k));
    let d_input = if k == 1 {
        par_gemm(d_z, &x.data.t(), &mut d_w2);
        let mut dx = uninit2::<F>(cin, n);
        par_gemm(&w2.t(), d_z, &mut dx);
        dx
    } else {
        let cols = im2col(x, k);
        par_gemm(d_z, &cols.t(), &mut d_w2);
        let mut dcols = uninit2::<F>(cin * k * k, n);
        par_gemm(&w2.t(), d_z, &mut dcols);
        col2im(&dcols.view(), cin, x.b, x.h, x.w, k)
    };
    let d_bias = Array1::from_iter(d_z.outer_iter().map(|row| row.sum()));
    let d_weight = d_w2
        .into_shape_with_order((g, cin, k, k))
        .expect("contiguous reshape");
    ConvGrads {
        d_weight,
        d_bias,
        d_input,
    }
}

pub(crate) fn relu_inplace<F: Scalar>(data: &mut Array2<F>) {
    data.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// d_z = d_a where the activation was positive, else 0. `act` is the
/// post-ReLU output (positive iff the pre-activation was).
pub(crate) fn relu_backward<F: Scalar>(mut d_a: Array2<F>, act: &ArrayView2<F>) -> Array2<F> {
    ndarray::Zip::from(&mut d_a).and(act).for_each(|d, &a| {
        if a <= F::zero() {
            *d = F::zero();
        }
    });
    d_a
}

/// Logistic squash, clamped away from exactly 0 and 1 so downstream code can
/// rely on outputs strictly inside (0, 1) even in f32.
pub(crate) fn sigmoid_inplace<F: Scalar>(data: &mut Array2<F>) {
    let lo = F::from_real(1e-7);
    let hi = F::one() - lo;
    data.mapv_inplace(|z| {
        let p = F::one() / (F::one() + (-z).exp());
        p.max(lo).min(hi)
    });
}

pub(crate) fn concat_channels<F: Scalar>(a: FeatMap<F>, b: &FeatMap<F>) -> FeatMap<F> {
    debug_assert_eq!((a.b, a.h, a.w), (b.b, b.h, b.w));
    let data = ndarray::concatenate(Axis(0), &[a.data.view(), b.data.view()])
        .expect("channel concat shapes agree");
    FeatMap::new(a.c + b.c, a.b, a.h, a.w, data)
}

/// 2x2 average pooling; spatial dims must be even.
pub(crate) fn avg_pool2<F: Scalar>(x: &FeatMap<F>) -> FeatMap<F> {
    let (b, h, w) = (x.b, x.h, x.w);
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (h2, w2) = (h / 2, w / 2);
    let quarter = F::from_real(0.25);
    let mut out = uninit2::<F>(x.c, b * h2 * w2);
    let rows: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    rows.into_par_iter().enumerate().for_each(|(ci, mut orow)| {
        let dst = orow.as_slice_mut().expect("contiguous");
        let srow = x.data.row(ci);
        let src = srow.as_slice().expect("contiguous");
        for bi in 0..b {
            for y2 in 0..h2 {
                let r0 = bi * h * w + 2 * y2 * w;
                let r1 = r0 + w;
                let dbase = bi * h2 * w2 + y2 * w2;
                for x2 in 0..w2 {
                    let s = src[r0 + 2 * x2]
                        + src[r0 + 2 * x2 + 1]
                        + src[r1 + 2 * x2]
                        + src[r1 + 2 * x2 + 1];
                    dst[dbase + x2] = s * quarter;
                }
            }
        }
    });
    FeatMap::new(x.c, b, h2, w2, out)
}

/// Adjoint of [`avg_pool2`]: spreads each gradient over its 2x2 source.
pub(crate) fn avg_pool2_backward<F: Scalar>(
    d_out: &ArrayView2<F>,
    c: usize,
    b: usize,
    h: usize,
    w: usize,
) -> Array2<F> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = F::from_real(0.25);
    let mut dx = uninit2::<F>(c, b * h * w);
    let rows: Vec<_> = dx.axis_iter_mut(Axis(0)).collect();
    rows.into_par_iter().enumerate().for_each(|(ci, mut drow)| {
        let dst = drow.as_slice_mut().expect("contiguous");
        let srow = d_out.row(ci);
        let src = srow.as_slice().expect("contiguous");
        for bi in 0..b {
            for y in 0..h {
                let sbase = bi * h2 * w2 + (y / 2) * w2;
                let dbase = bi * h * w + y * w;
                for x in 0..w {
                    dst[dbase + x] = src[sbase + x / 2] * quarter;
                }
            }
        }
    });
    dx
}

/// Nearest-neighbor 2x upsampling.
pub(crate) fn upsample2<F: Scalar>(x: &FeatMap<F>) -> FeatMap<F> {
    let (b, h, w) = (x.b, x.h, x.w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = uninit2::<F>(x.c, b * h2 * w2);
    let rows: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
    rows.into_par_iter().enumerate().for_each(|(ci, mut orow)| {
        let dst = orow.as_slice_mut().expect("contiguous");
        let srow = x.data.row(ci);
        let src = srow.as_slice().expect("contiguous");
        for bi in 0..b {
            for y in 0..h2 {
                let sbase = bi * h * w + (y / 2) * w;
                let dbase = bi * h2 * w2 + y * w2;
                for x2 in 0..w2 {
                    dst[dbase + x2] = src[sbase + x2 / 2];
                }
            }
        }
    });
    FeatMap::new(x.c, b, h2, w2, out)
}

/// Adjoint of [`upsample2`]: sums each 2x2 replication group.
pub(crate) fn upsample2_backward<F: Scalar>(
    d_out: &ArrayView2<F>,
    c: usize,
    b: usize,
    h: usize,
    w: usize,
) -> Array2<F> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = uninit2::<F>(c, b * h * w);
    let rows: Vec<_> = dx.axis_iter_mut(Axis(0)).collect();
    rows.into_par_iter().enumerate().for_each(|(ci, mut drow)| {
        let dst = drow.as_slice_mut().expect("contiguous");
        let srow = d_out.row(ci);
        let src = srow.as_slice().expect("contiguous");
        for bi in 0..b {
            for y in 0..h {
                let s0 = bi * h2 * w2 + 2 * y * w2;
                let s1 = s0 + w2;
                let dbase = bi * h * w + y * w;
                for x in 0..w {
                    dst[dbase + x] =
                        src[s0 + 2 * x] + src[s0 + 2 * x + 1] + src[s1 + 2 * x] + src[s1 + 2 * x + 1];
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fm(c: usize, b: usize, h: usize, w: usize, vals: Vec<f64>) -> FeatMap<f64> {
        FeatMap::new(c, b, h, w, Array2::from_shape_vec((c, b * h * w), vals).unwrap())
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // 3x3 kernel with a 1 in the center acts as identity.
        let x = fm(1, 1, 4, 4, (0..16).map(|v| v as f64).collect());
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let b = Array1::zeros(1);
        let y = conv_forward(&w, &b, &x);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let x = fm(2, 1, 3, 4, (0..24).map(|v| (v as f64 * 0.37).sin()).collect());
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, i, a, b)| {
            ((o * 18 + i * 9 + a * 3 + b) as f64 * 0.11).cos()
        });
        let bias = array![0.3, -0.2, 0.05];
        let y = conv_forward(&w, &bias, &x);
        for o in 0..3 {
            for yy in 0..3_isize {
                for xx in 0..4_isize {
                    let mut acc = bias[o];
                    for i in 0..2 {
                        for dy in -1..=1_isize {
                            for dx in -1..=1_isize {
                                let (sy, sx) = (yy + dy, xx + dx);
                                if sy >= 0 && sy < 3 && sx >= 0 && sx < 4 {
                                    acc += w[(o, i, (dy + 1) as usize, (dx + 1) as usize)]
                                        * x.data[(i, sy as usize * 4 + sx as usize)];
                                }
                            }
                        }
                    }
                    let got = y.data[(o, yy as usize * 4 + xx as usize)];
                    assert!((acc - got).abs() < 1e-12, "({o},{yy},{xx}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let x = fm(2, 2, 4, 4, (0..64).map(|v| (v as f64 * 0.7).sin()).collect());
        let cols = im2col(&x, 3);
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 31 + j * 7) as f64 * 0.13).cos());
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y.view(), 2, 2, 4, 4, 3);
        let rhs: f64 = x.data.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn pool_and_upsample_shapes_and_adjoints() {
        let x = fm(1, 1, 4, 4, (0..16).map(|v| v as f64).collect());
        let p = avg_pool2(&x);
        assert_eq!((p.h, p.w), (2, 2));
        assert_eq!(p.data[(0, 0)], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);

        // Adjoint identity for pooling.
        let dy = Array2::from_shape_fn((1, 4), |(_, j)| (j + 1) as f64);
        let dx = avg_pool2_backward(&dy.view(), 1, 1, 4, 4);
        let lhs: f64 = p.data.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u = upsample2(&p);
        assert_eq!((u.h, u.w), (4, 4));
        assert_eq!(u.data[(0, 0)], p.data[(0, 0)]);
        assert_eq!(u.data[(0, 5)], p.data[(0, 0)]);

        let dy2 = Array2::from_shape_fn((1, 16), |(_, j)| (j as f64 * 0.3).sin());
        let dx2 = upsample2_backward(&dy2.view(), 1, 1, 2, 2);
        let lhs: f64 = u.data.iter().zip(dy2.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = p.data.iter().zip(dx2.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let mut d = Array2::from_shape_vec((1, 4), vec![-100.0, -1.0, 1.0, 100.0]).unwrap();
        sigmoid_inplace(&mut d);
        for &v in d.iter() {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }
}
