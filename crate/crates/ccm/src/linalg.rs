//! Dense linear algebra kernels shared by the solver and the network.
//!
//! Everything here is deterministic independent of thread count: parallel
//! loops split work into fixed-size chunks with no cross-thread reductions,
//! so each output element is produced by exactly one sequential computation.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::{Error, Result};

/// Scalar types the numeric kernels are generic over (f32 for production,
/// f64 for oracles and gradient checks).
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + Send + Sync + std::iter::Sum + 'static
{
    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;
    /// One standard-normal draw; used by seeded initializers.
    fn standard_normal<R: rand::Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_real(v: f64) -> Self {
        v as f32
    }
    fn to_real(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: rand::Rng>(rng: &mut R) -> Self {
        rand::Rng::sample(rng, rand_distr::StandardNormal)
    }
}

impl Scalar for f64 {
    fn from_real(v: f64) -> Self {
        v
    }
    fn to_real(self) -> f64 {
        self
    }
    fn standard_normal<R: rand::Rng>(rng: &mut R) -> Self {
        rand::Rng::sample(rng, rand_distr::StandardNormal)
    }
}

/// Column chunk width for parallel GEMM. Fixed so results do not depend on
/// the worker count.
const GEMM_CHUNK: usize = 512;

/// C = A.B, parallelized over fixed-width column chunks of C.
pub fn par_gemm<F: Scalar>(a: &ArrayView2<F>, b: &ArrayView2<F>, c: &mut Array2<F>) {
    par_gemm_acc(F::one(), a, b, F::zero(), c);
}

/// C = alpha.A.B + beta.C over fixed-width column chunks.
pub fn par_gemm_acc<F: Scalar>(
    alpha: F,
    a: &ArrayView2<F>,
    b: &ArrayView2<F>,
    beta: F,
    c: &mut Array2<F>,
) {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(c.nrows(), a.nrows());
    debug_assert_eq!(c.ncols(), b.ncols());
    let jobs: Vec<(ArrayViewMut2<F>, ArrayView2<F>)> = c
        .axis_chunks_iter_mut(Axis(1), GEMM_CHUNK)
        .zip(b.axis_chunks_iter(Axis(1), GEMM_CHUNK))
        .collect();
    jobs.into_par_iter().for_each(|(mut cc, bc)| {
        general_mat_mul(alpha, a, &bc, beta, &mut cc);
    });
}

/// Gram matrix G = A.A^T of the row-major matrix `a`, with an optional ridge
/// added to the diagonal. Used for normal-equation solves where the rows of
/// `a` are the operator columns.
pub fn gram_with_ridge<F: Scalar>(a: &ArrayView2<F>, ridge: F) -> Array2<F> {
    let n = a.nrows();
    let mut g = Array2::<F>::zeros((n, n));
    par_gemm(a, &a.t(), &mut g);
    for i in 0..n {
        g[(i, i)] = g[(i, i)] + ridge;
    }
    g
}

/// Block size for the blocked Cholesky factorization.
const CHOL_BLOCK: usize = 128;

/// In-place blocked Cholesky factorization A = L.L^T (lower triangle of `a`
/// receives L; the strict upper triangle is left untouched). Fails with
/// [`Error::RankDeficient`] on a non-positive pivot.
pub fn cholesky_in_place<F: Scalar>(a: &mut Array2<F>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(
            "cholesky",
            format!("{n}x{n}"),
            format!("{}x{}", n, a.ncols()),
        ));
    }
    let mut k = 0;
    while k < n {
        let nb = CHOL_BLOCK.min(n - k);
        {
            let mut diag = a.slice_mut(s![k..k + nb, k..k + nb]);
            cholesky_unblocked(&mut diag)?;
        }
        if k + nb < n {
            // L_kk is tiny; an owned copy sidesteps aliasing with the panel.
            let lkk = a.slice(s![k..k + nb, k..k + nb]).to_owned();
            {
                let mut panel = a.slice_mut(s![k + nb.., k..k + nb]);
                let chunks: Vec<ArrayViewMut2<F>> =
                    panel.axis_chunks_iter_mut(Axis(0), 64).collect();
                chunks.into_par_iter().for_each(|mut rows| {
                    for mut row in rows.axis_iter_mut(Axis(0)) {
                        // Solve x.L^T = b by forward substitution.
                        for j in 0..nb {
                            let mut sum = row[j];
                            for i in 0..j {
                                sum = sum - row[i] * lkk[(j, i)];
                            }
                            row[j] = sum / lkk[(j, j)];
                        }
                    }
                });
            }
            let panel = a.slice(s![k + nb.., k..k + nb]).to_owned();
            let mut trailing = a.slice_mut(s![k + nb.., k + nb..]);
            let m = trailing.nrows();
            // Peel fixed-width column blocks; each task owns one block of the
            // lower triangle, so the update is schedule-independent.
            let mut jobs: Vec<(usize, ArrayViewMut2<F>)> = Vec::new();
            let mut rem = trailing.view_mut();
            let mut offset = 0;
            while offset < m {
                let jb = CHOL_BLOCK.min(m - offset);
                let (cur, rest) = rem.split_at(Axis(1), jb);
                let (_, cur_low) = cur.split_at(Axis(0), offset);
                jobs.push((offset, cur_low));
                rem = rest;
                offset += jb;
            }
            jobs.into_par_iter().for_each(|(off, mut block)| {
                let jb = block.ncols();
                let pj = panel.slice(s![off..off + jb, ..]);
                let pi = panel.slice(s![off.., ..]);
                general_mat_mul(-F::one(), &pi, &pj.t(), F::one(), &mut block);
            });
        }
        k += nb;
    }
    Ok(())
}

fn cholesky_unblocked<F: Scalar>(a: &mut ArrayViewMut2<F>) -> Result<()> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - a[(j, k)] * a[(j, k)];
        }
        if d <= F::zero() || !d.to_real().is_finite() {
            return Err(Error::RankDeficient);
        }
        let djj = d.sqrt();
        a[(j, j)] = djj;
        for i in j + 1..n {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum = sum - a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = sum / djj;
        }
    }
    Ok(())
}

/// Solves L.y = b in place given the lower-triangular factor.
pub fn forward_subst<F: Scalar>(l: &ArrayView2<F>, b: &mut [F]) {
    let n = l.nrows();
    for i in 0..n {
        let row = l.row(i);
        let mut sum = b[i];
        for j in 0..i {
            sum = sum - row[j] * b[j];
        }
        b[i] = sum / row[i];
    }
}

/// Solves L^T.x = b in place, expressed with row accesses of L so the memory
/// walk stays contiguous.
pub fn backward_subst_transposed<F: Scalar>(l: &ArrayView2<F>, b: &mut [F]) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let row = l.row(i);
        let xi = b[i] / row[i];
        b[i] = xi;
        for j in 0..i {
            b[j] = b[j] - xi * row[j];
        }
    }
}

/// Solves (L.L^T).x = b in place.
pub fn cholesky_solve<F: Scalar>(l: &ArrayView2<F>, b: &mut [F]) {
    forward_subst(l, b);
    backward_subst_transposed(l, b);
}

/// Thin SVD of an f64 matrix: returns (U, singular values, V^T) with
/// singular values in non-increasing order. Backed by nalgebra.
pub fn svd_f64(a: &ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (m, n) = (a.nrows(), a.ncols());
    let dm = nalgebra::DMatrix::from_row_iterator(m, n, a.iter().cloned());
    let svd = dm.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    let mut u_nd = Array2::<f64>::zeros((m, k));
    let mut s_nd = Array1::<f64>::zeros(k);
    let mut vt_nd = Array2::<f64>::zeros((k, n));
    for (new_idx, &old_idx) in order.iter().enumerate() {
        s_nd[new_idx] = svd.singular_values[old_idx];
        for r in 0..m {
            u_nd[(r, new_idx)] = u[(r, old_idx)];
        }
        for c in 0..n {
            vt_nd[(new_idx, c)] = vt[(old_idx, c)];
        }
    }
    (u_nd, s_nd, vt_nd)
}

/// Estimates the spectral condition number of a linear operator given its
/// matvec and transpose-matvec, via Golub-Kahan bidiagonalization with full
/// reorthogonalization. The extreme Ritz values of the small bidiagonal
/// matrix estimate sigma_max / sigma_min.
pub fn condition_estimate(
    n_rows: usize,
    n_cols: usize,
    steps: usize,
    seed: u64,
    matvec: impl Fn(&[f64]) -> Vec<f64>,
    rmatvec: impl Fn(&[f64]) -> Vec<f64>,
) -> f64 {
    use rand::SeedableRng;
    let k = steps.min(n_rows.min(n_cols)).max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n_cols)
        .map(|_| f64::standard_normal(&mut rng))
        .collect();
    normalize(&mut v);

    let mut vs: Vec<Vec<f64>> = vec![v.clone()];
    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut alphas = Vec::new();
    let mut betas = Vec::new();

    let mut u = matvec(&v);
    let mut alpha = norm(&u);
    if alpha == 0.0 {
        return f64::INFINITY;
    }
    scale(&mut u, 1.0 / alpha);
    us.push(u.clone());
    alphas.push(alpha);

    for _ in 1..k {
        let mut vnext = rmatvec(&u);
        axpy(&mut vnext, -alpha, &v);
        for prev in &vs {
            let d = dot(&vnext, prev);
            axpy(&mut vnext, -d, prev);
        }
        let beta = norm(&vnext);
        if beta < 1e-300 {
            break;
        }
        scale(&mut vnext, 1.0 / beta);
        betas.push(beta);
        v = vnext;
        vs.push(v.clone());

        let mut unext = matvec(&v);
        axpy(&mut unext, -beta, &u);
        for prev in &us {
            let d = dot(&unext, prev);
            axpy(&mut unext, -d, prev);
        }
        alpha = norm(&unext);
        if alpha < 1e-300 {
            break;
        }
        scale(&mut unext, 1.0 / alpha);
        u = unext;
        us.push(u.clone());
        alphas.push(alpha);
    }

    // Dense SVD of the small lower-bidiagonal matrix (alphas on the diagonal,
    // betas below it).
    let kk = alphas.len();
    let mut b = nalgebra::DMatrix::<f64>::zeros(kk, kk);
    for i in 0..kk {
        b[(i, i)] = alphas[i];
        if i > 0 {
            b[(i, i - 1)] = betas[i - 1];
        }
    }
    let sv = b.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &mut [f64], s: f64) {
    for x in a {
        *x *= s;
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
        let mut g = a.dot(&a.t());
        for i in 0..n {
            g[(i, i)] += n as f64;
        }
        g
    }

    #[test]
    fn blocked_cholesky_matches_nalgebra() {
        for &n in &[1usize, 5, 64, 150, 300] {
            let g = random_spd(n, n as u64);
            let mut l = g.clone();
            cholesky_in_place(&mut l).unwrap();

            let ng = nalgebra::DMatrix::from_row_iterator(n, n, g.iter().cloned());
            let nl = ng.cholesky().expect("spd").l();
            for i in 0..n {
                for j in 0..=i {
                    let want = nl[(i, j)];
                    let got = l[(i, j)];
                    assert!(
                        (want - got).abs() <= 1e-9 * (1.0 + want.abs()),
                        "n={n} ({i},{j}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn cholesky_solve_recovers_known_vector() {
        let n = 120;
        let g = random_spd(n, 3);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = g.dot(&Array1::from(x_true.clone()));
        let mut l = g.clone();
        cholesky_in_place(&mut l).unwrap();
        let mut x = b.to_vec();
        cholesky_solve(&l.view(), &mut x);
        for (xs, xt) in x.iter().zip(&x_true) {
            assert!((xs - xt).abs() < 1e-8);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            cholesky_in_place(&mut a),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn par_gemm_matches_ndarray_dot() {
        let a = Array2::from_shape_fn((37, 53), |(i, j)| (i * 53 + j) as f64 * 0.01);
        let b = Array2::from_shape_fn((53, 1100), |(i, j)| ((i + j) % 17) as f64 * 0.1);
        let mut c = Array2::<f64>::zeros((37, 1100));
        par_gemm(&a.view(), &b.view(), &mut c);
        let want = a.dot(&b);
        assert!(c.iter().zip(want.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn svd_reconstructs_matrix() {
        let a = Array2::from_shape_fn((8, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).sin());
        let (u, s, vt) = svd_f64(&a.view());
        let k = s.len();
        let mut recon = Array2::<f64>::zeros((8, 5));
        for r in 0..8 {
            for c in 0..5 {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += u[(r, kk)] * s[kk] * vt[(kk, c)];
                }
                recon[(r, c)] = acc;
            }
        }
        assert!(recon
            .iter()
            .zip(a.iter())
            .all(|(x, y)| (x - y).abs() < 1e-10));
        for i in 1..k {
            assert!(s[i] <= s[i - 1] + 1e-15);
        }
    }

    #[test]
    fn condition_estimate_close_to_truth_on_diagonal_operator() {
        // Diagonal operator with known singular values 1..=40.
        let n = 40;
        let diag: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let d1 = diag.clone();
        let d2 = diag;
        let est = condition_estimate(
            n,
            n,
            40,
            7,
            move |x| x.iter().zip(&d1).map(|(v, d)| v * d).collect(),
            move |x| x.iter().zip(&d2).map(|(v, d)| v * d).collect(),
        );
        assert!((est - 40.0).abs() / 40.0 < 0.05, "estimate {est}");
    }
}
