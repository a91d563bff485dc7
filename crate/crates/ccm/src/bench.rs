//! Timing harness comparing neural inference against cached-factorization
//! linear solves across image sizes.
//!
//! Timed quantities are medians (with p10/p90) over many repetitions of the
//! per-image work only; factorization cost is reported separately with a
//! small repetition count, since refactorizing a desk-scale matrix a hundred
//! times is not a meaningful measurement. Assertions downstream are
//! orderings and ratios, never absolute milliseconds.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::ann::{infer, NetworkParams};
use crate::fiber::TransferOperator;
use crate::image::ImageGrid;
use crate::linear::{LinearSolver, RegularizerSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    AnnInfer,
    LinearSolve,
    LinearFactorize,
}

impl BenchMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BenchMethod::AnnInfer => "ann_infer",
            BenchMethod::LinearSolve => "linear_solve",
            BenchMethod::LinearFactorize => "linear_factorize",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: BenchMethod,
    pub image_side: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub machine: String,
}

/// Describes the machine the numbers were taken on.
pub fn machine_descriptor() -> String {
    format!(
        "{}-{} threads={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

fn record(method: BenchMethod, side: usize, mut times_ms: Vec<f64>) -> BenchRecord {
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    BenchRecord {
        method,
        image_side: side,
        reps: times_ms.len(),
        median_ms: percentile(&times_ms, 0.5),
        p10_ms: percentile(&times_ms, 0.1),
        p90_ms: percentile(&times_ms, 0.9),
        machine: machine_descriptor(),
    }
}

/// Seeded synthetic sensor image used as the timing workload.
fn bench_input(side: usize, seed: u64) -> ImageGrid {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
    ImageGrid::new(side, side, 200.0 / side as f64, data).expect("valid image")
}

/// Benchmarks one side: ANN inference and cached linear solve, `reps`
/// repetitions each, plus the factorization measured `factor_reps` times.
pub fn bench_side(
    side: usize,
    params: &NetworkParams<f32>,
    matrix: &TransferOperator,
    lambda: f64,
    reps: usize,
    factor_reps: usize,
) -> Result<Vec<BenchRecord>> {
    if params.spec.input_size != side {
        return Err(Error::shape("bench checkpoint", side, params.spec.input_size));
    }
    if matrix.n_sen() != side * side {
        return Err(Error::shape("bench matrix", side * side, matrix.n_sen()));
    }
    let input = bench_input(side, 1234 + side as u64);

    // ANN inference.
    let mut ann_times = Vec::with_capacity(reps);
    let _ = infer(params, &input)?; // warmup
    for _ in 0..reps {
        let (_, dt) = infer(params, &input)?;
        ann_times.push(dt.as_secs_f64() * 1e3);
    }

    // Factorization, measured separately.
    let reg = RegularizerSpec::Tikhonov { lambda };
    let mut factor_times = Vec::with_capacity(factor_reps);
    let mut solver = None;
    for _ in 0..factor_reps.max(1) {
        let s = LinearSolver::<f64>::prepare(matrix, reg)?;
        factor_times.push(s.factorize_ms);
        solver = Some(s);
    }
    let solver = solver.expect("at least one factorization");

    // Per-image solve with the cached factorization.
    let mut solve_times = Vec::with_capacity(reps);
    let _ = solver.solve(&input)?; // warmup
    for _ in 0..reps {
        let out = solver.solve(&input)?;
        solve_times.push(out.solve_ms);
    }

    Ok(vec![
        record(BenchMethod::AnnInfer, side, ann_times),
        record(BenchMethod::LinearSolve, side, solve_times),
        record(BenchMethod::LinearFactorize, side, factor_times),
    ])
}

/// Writes bench records as CSV.
pub fn write_bench_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,image_side,reps,median_ms,p10_ms,p90_ms,machine")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{:.4},{:.4},{:.4},{}",
            r.method.name(),
            r.image_side,
            r.reps,
            r.median_ms,
            r.p10_ms,
            r.p90_ms,
            r.machine
        )?;
    }
    Ok(())
}

/// Ratio table between consecutive sides for each method, as printable rows
/// (method, side_a, side_b, ratio).
pub fn ratio_table(records: &[BenchRecord]) -> Vec<(BenchMethod, usize, usize, f64)> {
    let mut out = Vec::new();
    for method in [BenchMethod::AnnInfer, BenchMethod::LinearSolve] {
        let mut rows: Vec<&BenchRecord> = records.iter().filter(|r| r.method == method).collect();
        rows.sort_by_key(|r| r.image_side);
        for pair in rows.windows(2) {
            out.push((
                method,
                pair[0].image_side,
                pair[1].image_side,
                pair[1].median_ms / pair[0].median_ms,
            ));
        }
    }
    out
}

/// Convenience for tests: median wall time of `f` over `reps` runs, in ms.
pub fn median_time_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile(&times, 0.5)
}
