//! Calibration by single-pixel probing and regularized linear inversion.
//!
//! The baseline reconstruction path: probe the transfer operator one object
//! pixel at a time, then invert with either Tikhonov (normal equations +
//! Cholesky) or a truncated SVD. Factorizations are computed once per
//! (matrix, regularizer) and reused across images, so per-image solve cost
//! is two triangular solves plus a matrix-vector product.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fiber::{forward, ColumnNorm, NoiseSpec, TransferOperator};
use crate::image::{normalize_unit, ImageGrid};
use crate::linalg::{self, Scalar};
use crate::metrics::{mae, ssim, SsimConfig};
use crate::phantom::PairedDataset;
use crate::{Error, Result};

/// Regularization method; exactly one parameter is active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerSpec {
    Tikhonov { lambda: f64 },
    TruncatedSvd { rank: usize },
}

impl RegularizerSpec {
    fn validate(&self, n_obj: usize, n_sen: usize) -> Result<()> {
        match *self {
            RegularizerSpec::Tikhonov { lambda } => {
                if !(lambda >= 0.0) {
                    return Err(Error::InvalidArg(format!("lambda must be >= 0, got {lambda}")));
                }
            }
            RegularizerSpec::TruncatedSvd { rank } => {
                let max = n_obj.min(n_sen);
                if rank == 0 || rank > max {
                    return Err(Error::InvalidArg(format!(
                        "rank must be in 1..={max}, got {rank}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Numeric value for report rows (lambda or rank).
    pub fn report_value(&self) -> f64 {
        match *self {
            RegularizerSpec::Tikhonov { lambda } => lambda,
            RegularizerSpec::TruncatedSvd { rank } => rank as f64,
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            RegularizerSpec::Tikhonov { .. } => "tikhonov",
            RegularizerSpec::TruncatedSvd { .. } => "truncated_svd",
        }
    }
}

/// Result of probing the operator pixel by pixel.
#[derive(Debug, Clone)]
pub struct CalibrationRecord {
    pub probed: TransferOperator,
    pub probe_count: usize,
    /// Per-column relative L2 error of the probe against the ground-truth
    /// operator.
    pub per_column_rel_err: Vec<f64>,
}

impl CalibrationRecord {
    pub fn mean_rel_err(&self) -> f64 {
        self.per_column_rel_err.iter().sum::<f64>() / self.per_column_rel_err.len().max(1) as f64
    }
}

/// Images the single-pixel object e_i through `forward()` for every object
/// pixel and records the responses as the probed matrix. Probe `i` uses the
/// noise stream derived from (noise.seed, i); with zero noise the probed
/// matrix equals the ground truth bitwise.
pub fn calibrate(op: &TransferOperator, noise: &NoiseSpec) -> Result<CalibrationRecord> {
    let n_obj = op.n_obj();
    let (oh, ow) = op.obj_shape();
    let mut probed = Array2::<f64>::zeros((n_obj, op.n_sen()));
    let rows: Vec<_> = probed.outer_iter_mut().collect();
    rows.into_par_iter()
        .enumerate()
        .map(|(i, mut row)| {
            let mut data = vec![0.0; n_obj];
            data[i] = 1.0;
            let probe = ImageGrid::new(oh, ow, 1.0, data)?;
            let response = forward(op, &probe, &noise.for_entry(i as u64))?;
            for (r, &v) in row.iter_mut().zip(response.data()) {
                *r = v;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;

    let per_column_rel_err: Vec<f64> = probed
        .outer_iter()
        .zip(op.columns().outer_iter())
        .map(|(got, truth)| {
            let num: f64 = got
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = truth.iter().map(|b| b * b).sum::<f64>().sqrt();
            if den > 0.0 {
                num / den
            } else {
                num
            }
        })
        .collect();

    let column_norm = if noise.is_zero() {
        op.column_norm
    } else {
        // Noisy probes no longer sum to one.
        ColumnNorm::None
    };
    let probed = TransferOperator::from_columns(
        probed,
        op.obj_shape(),
        op.sen_shape(),
        op.seed,
        op.mode_count,
        column_norm,
    )?;
    Ok(CalibrationRecord {
        probed,
        probe_count: n_obj,
        per_column_rel_err,
    })
}

enum Factor<F> {
    /// Lower Cholesky factor of M^T M + lambda I, plus the probed columns
    /// for forming the right-hand side M^T y.
    Chol {
        columns: Array2<F>,
        l: Array2<F>,
    },
    /// Thin SVD of M (n_sen x n_obj), truncated at `rank`.
    Svd {
        u: Array2<f64>,
        s: Array1<f64>,
        vt: Array2<f64>,
        rank: usize,
    },
}

/// A factorized solver bound to one (matrix, regularizer) pair. `solve` is
/// read-only and may run concurrently across images.
pub struct LinearSolver<F: Scalar> {
    factor: Factor<F>,
    obj_shape: (usize, usize),
    n_sen: usize,
    pub reg: RegularizerSpec,
    /// Wall-clock cost of building the factorization, in milliseconds.
    pub factorize_ms: f64,
}

/// Reconstruction of one sensor image: the clamped image, the raw
/// (unclamped) solution for diagnostics, and the solve wall time.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub image: ImageGrid,
    pub raw: Vec<f64>,
    pub solve_ms: f64,
}

impl<F: Scalar> LinearSolver<F> {
    /// Builds the factorization. Tikhonov with lambda = 0 on a singular
    /// normal matrix fails with the rank-deficiency error.
    pub fn prepare(probed: &TransferOperator, reg: RegularizerSpec) -> Result<Self> {
        reg.validate(probed.n_obj(), probed.n_sen())?;
        let start = Instant::now();
        let factor = match reg {
            RegularizerSpec::Tikhonov { lambda } => {
                let columns = probed.columns().mapv(|v| F::from_real(v));
                let mut g = linalg::gram_with_ridge(&columns.view(), F::from_real(lambda));
                linalg::cholesky_in_place(&mut g)?;
                Factor::Chol { columns, l: g }
            }
            RegularizerSpec::TruncatedSvd { rank } => {
                // SVD runs in f64 regardless of the solver's working type.
                let m = probed.columns().t().to_owned();
                let (u, s, vt) = linalg::svd_f64(&m.view());
                Factor::Svd { u, s, vt, rank }
            }
        };
        Ok(Self {
            factor,
            obj_shape: probed.obj_shape(),
            n_sen: probed.n_sen(),
            reg,
            factorize_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Solves for one sensor image. Negative values are clamped to zero in
    /// the returned image; the raw solution is kept for diagnostics.
    pub fn solve(&self, y: &ImageGrid) -> Result<SolveOutput> {
        if y.len() != self.n_sen {
            return Err(Error::shape("solve sensor image", self.n_sen, y.len()));
        }
        let start = Instant::now();
        let raw: Vec<f64> = match &self.factor {
            Factor::Chol { columns, l } => {
                let yf: Vec<F> = y.data().iter().map(|&v| F::from_real(v)).collect();
                // rhs = M^T y; stored rows are M's columns, so this is one
                // pass of row dot products.
                let mut rhs: Vec<F> = columns
                    .outer_iter()
                    .map(|row| row.iter().zip(&yf).map(|(m, v)| *m * *v).sum())
                    .collect();
                linalg::cholesky_solve(&l.view(), &mut rhs);
                rhs.iter().map(|v| v.to_real()).collect()
            }
            Factor::Svd { u, s, vt, rank } => {
                let n_obj = vt.ncols();
                let mut x = vec![0.0_f64; n_obj];
                for k in 0..*rank {
                    if s[k] <= 0.0 {
                        break;
                    }
                    let coef: f64 = u.column(k).iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    let scale = coef / s[k];
                    for (xi, &v) in x.iter_mut().zip(vt.row(k).iter()) {
                        *xi += scale * v;
                    }
                }
                x
            }
        };
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let clamped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
        let (oh, ow) = self.obj_shape;
        let pitch = y.pitch_um() * (y.len() as f64 / (oh * ow) as f64).sqrt();
        Ok(SolveOutput {
            image: ImageGrid::new(oh, ow, pitch, clamped)?,
            raw,
            solve_ms,
        })
    }
}

/// One-shot convenience: factorize and solve a single image. The reported
/// solve time excludes factorization (available separately on the solver).
pub fn solve(
    probed: &TransferOperator,
    y: &ImageGrid,
    reg: RegularizerSpec,
) -> Result<SolveOutput> {
    LinearSolver::<f64>::prepare(probed, reg)?.solve(y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_mae: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best_lambda: f64,
}

/// Evaluates Tikhonov reconstruction over the dataset's test split for each
/// lambda, reporting mean MAE/SSIM per lambda and the argmin-MAE lambda.
pub fn sweep_lambda(
    probed: &TransferOperator,
    dataset: &PairedDataset,
    lambdas: &[f64],
) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArg("lambda list is empty".into()));
    }
    if dataset.manifest.test_indices.is_empty() {
        return Err(Error::InvalidArg("dataset has no test split".into()));
    }
    let n = probed.obj_shape().0.min(probed.obj_shape().1);
    let cfg = if n >= 11 {
        SsimConfig::default()
    } else {
        SsimConfig {
            window: if n % 2 == 1 { n } else { n - 1 },
            ..SsimConfig::default()
        }
    };
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let solver = LinearSolver::<f64>::prepare(probed, RegularizerSpec::Tikhonov { lambda })?;
        let stats: Vec<(f64, f64)> = dataset
            .test_entries()
            .map(|(obj, sen)| {
                let out = solver.solve(sen)?;
                let rec = normalize_unit(&out.image);
                Ok((mae(&rec, obj)?, ssim(&rec, obj, &cfg)?))
            })
            .collect::<Result<_>>()?;
        let count = stats.len() as f64;
        rows.push(SweepRow {
            lambda,
            mean_mae: stats.iter().map(|s| s.0).sum::<f64>() / count,
            mean_ssim: stats.iter().map(|s| s.1).sum::<f64>() / count,
        });
    }
    let best_lambda = rows
        .iter()
        .min_by(|a, b| a.mean_mae.partial_cmp(&b.mean_mae).unwrap())
        .expect("non-empty rows")
        .lambda;
    Ok(SweepTable { rows, best_lambda })
}

/// Writes a sweep table CSV.
pub fn write_sweep_csv(path: &Path, table: &SweepTable) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# metrics on [0,1]-normalized reconstructions vs objects")?;
    writeln!(f, "lambda,mean_mae,mean_ssim")?;
    for r in &table.rows {
        writeln!(f, "{:e},{:.9},{:.9}", r.lambda, r.mean_mae, r.mean_ssim)?;
    }
    writeln!(f, "# best_lambda = {:e}", table.best_lambda)?;
    Ok(())
}

/// One row of a reconstruction report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconRow {
    pub index: usize,
    pub method: String,
    pub lambda_or_rank: f64,
    pub mae: f64,
    pub ssim: f64,
    pub solve_ms: f64,
}

/// Writes the reconstruction report CSV.
pub fn write_recon_report(path: &Path, rows: &[ReconRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# metrics on [0,1]-normalized reconstructions vs objects")?;
    writeln!(f, "index,method,lambda_or_rank,mae,ssim,solve_ms")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:e},{:.6},{:.6},{:.4}",
            r.index, r.method, r.lambda_or_rank, r.mae, r.ssim, r.solve_ms
        )?;
    }
    Ok(())
}
