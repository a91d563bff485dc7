//! Multimode-fiber intensity transfer operator: synthesis, forward model,
//! and the CCMM on-disk format.
//!
//! Incoherent fluorescence transport through the cannula is a nonnegative
//! linear map from object intensity to sensor intensity. The synthetic
//! operator models it as a sum of speckle modes: each object pixel couples
//! with a smoothly varying complex coefficient into `mode_count` random
//! low-pass-filtered complex fields over the sensor, and its point-spread
//! column is the resulting intensity pattern. `mode_count` and
//! `correlation_px` tune how ill-conditioned the map is; no single setting
//! is claimed to match a physical cannula.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::ImageGrid;
use crate::linalg;
use crate::util::derive_seed;
use crate::{Error, Result};

/// Magic bytes of the CCMM format.
pub const CCMM_MAGIC: &[u8; 4] = b"CCMM";
/// Current CCMM version.
pub const CCMM_VERSION: u32 = 1;

/// Per-column normalization of the transfer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnNorm {
    /// Each column sums to 1: the fiber conserves the energy of every
    /// object point.
    UnitSum,
    /// Columns are left at their raw speckle intensities.
    None,
}

impl ColumnNorm {
    fn to_u8(self) -> u8 {
        match self {
            ColumnNorm::UnitSum => 0,
            ColumnNorm::None => 1,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ColumnNorm::UnitSum),
            1 => Some(ColumnNorm::None),
            _ => None,
        }
    }
}

/// Additive/shot noise model for the sensor: `gaussian_sigma` is the read
/// noise standard deviation as a fraction of the clean sensor maximum;
/// `poisson_scale` is the expected photon count at unit intensity (0
/// disables shot noise). All draws are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub poisson_scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            gaussian_sigma: 0.0,
            poisson_scale: 0.0,
            seed,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            gaussian_sigma: sigma,
            poisson_scale: 0.0,
            seed,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.gaussian_sigma == 0.0 && self.poisson_scale == 0.0
    }

    fn validate(&self) -> Result<()> {
        if self.gaussian_sigma < 0.0 || self.poisson_scale < 0.0 {
            return Err(Error::InvalidArg(
                "noise parameters must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Noise spec for dataset entry `index`, with an independent seed.
    pub fn for_entry(&self, index: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, index),
            ..*self
        }
    }
}

/// Dense intensity transfer operator. Row `i` of `columns` holds the sensor
/// response (transfer-matrix column) of object pixel `i`, so columns are
/// contiguous in memory and in the column-major CCMM file.
#[derive(Debug, Clone)]
pub struct TransferOperator {
    columns: Array2<f64>,
    obj_shape: (usize, usize),
    sen_shape: (usize, usize),
    pub seed: u64,
    pub mode_count: u32,
    pub column_norm: ColumnNorm,
    /// Golub-Kahan estimate of the spectral condition number, filled by
    /// [`synthesize_operator`]; `None` for operators assembled from raw
    /// matrices or loaded from disk.
    pub condition_estimate: Option<f64>,
}

impl TransferOperator {
    /// Assembles an operator from an explicit matrix. `columns` row `i` is
    /// the response of object pixel `i`. Validates nonnegativity and, for
    /// [`ColumnNorm::UnitSum`], that every column sums to 1 within 1e-9.
    pub fn from_columns(
        columns: Array2<f64>,
        obj_shape: (usize, usize),
        sen_shape: (usize, usize),
        seed: u64,
        mode_count: u32,
        column_norm: ColumnNorm,
    ) -> Result<Self> {
        let (n_obj, n_sen) = (obj_shape.0 * obj_shape.1, sen_shape.0 * sen_shape.1);
        if n_obj == 0 || n_sen == 0 {
            return Err(Error::InvalidArg("operator grids must be nonempty".into()));
        }
        if columns.nrows() != n_obj || columns.ncols() != n_sen {
            return Err(Error::shape(
                "TransferOperator::from_columns",
                format!("{n_obj}x{n_sen}"),
                format!("{}x{}", columns.nrows(), columns.ncols()),
            ));
        }
        if columns.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite {
                context: "transfer matrix entries".into(),
            });
        }
        if column_norm == ColumnNorm::UnitSum {
            for (i, row) in columns.outer_iter().enumerate() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArg(format!(
                        "column {i} sums to {s}, not 1 within 1e-9"
                    )));
                }
            }
        }
        Ok(Self {
            columns,
            obj_shape,
            sen_shape,
            seed,
            mode_count,
            column_norm,
            condition_estimate: None,
        })
    }

    pub fn n_obj(&self) -> usize {
        self.obj_shape.0 * self.obj_shape.1
    }

    pub fn n_sen(&self) -> usize {
        self.sen_shape.0 * self.sen_shape.1
    }

    pub fn obj_shape(&self) -> (usize, usize) {
        self.obj_shape
    }

    pub fn sen_shape(&self) -> (usize, usize) {
        self.sen_shape
    }

    /// (n_obj, n_sen) matrix; row `i` is transfer-matrix column `i`.
    pub fn columns(&self) -> ArrayView2<'_, f64> {
        self.columns.view()
    }

    /// Transfer-matrix column for object pixel `i` (its speckle PSF).
    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.columns.row(i)
    }

    /// Golub-Kahan condition-number estimate with `steps` bidiagonalization
    /// steps.
    pub fn estimate_condition(&self, steps: usize) -> f64 {
        let cols = &self.columns;
        let n_obj = self.n_obj();
        let n_sen = self.n_sen();
        linalg::condition_estimate(
            n_sen,
            n_obj,
            steps,
            derive_seed(self.seed, 0xC0DE),
            |x| {
                // y = M.x accumulated over contiguous rows of `columns`.
                let mut y = vec![0.0; n_sen];
                for (i, row) in cols.outer_iter().enumerate() {
                    let xi = x[i];
                    if xi != 0.0 {
                        for (ys, &m) in y.iter_mut().zip(row.iter()) {
                            *ys += xi * m;
                        }
                    }
                }
                y
            },
            |y| {
                // x = M^T.y: dot of each stored row with y.
                cols.outer_iter()
                    .map(|row| row.iter().zip(y).map(|(m, v)| m * v).sum())
                    .collect()
            },
        )
    }

    /// Writes the CCMM format: magic "CCMM", version u32, n_sen u32, n_obj
    /// u32, seed u64, mode_count u32, column_norm u8, then the matrix as
    /// n_sen x n_obj f32 column-major, all little-endian.
    pub fn write_ccmm<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CCMM_MAGIC)?;
        w.write_all(&CCMM_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_sen() as u32).to_le_bytes())?;
        w.write_all(&(self.n_obj() as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.mode_count.to_le_bytes())?;
        w.write_all(&[self.column_norm.to_u8()])?;
        // Column-major transfer matrix == row-major walk of `columns`.
        let mut buf = Vec::with_capacity(self.n_sen() * 4);
        for row in self.columns.outer_iter() {
            buf.clear();
            for &v in row.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save_ccmm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ccmm(std::io::BufWriter::new(f))
    }

    /// Reads a CCMM file. Grid shapes are reconstructed as squares (the
    /// format stores only flattened sizes); unit-sum columns are
    /// renormalized in f64 to restore the energy-conservation invariant
    /// after f32 quantization.
    pub fn read_ccmm<R: Read>(mut r: R, name: &str) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(name, "truncated header"))?;
        if &magic != CCMM_MAGIC {
            return Err(Error::format(name, "bad magic (not a CCMM file)"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf)
                .map_err(|_| Error::format(name, "truncated header"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != CCMM_VERSION {
            return Err(Error::format(name, format!("unsupported version {version}")));
        }
        let n_sen = read_u32(&mut r)? as usize;
        let n_obj = read_u32(&mut r)? as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)
            .map_err(|_| Error::format(name, "truncated header"))?;
        let seed = u64::from_le_bytes(u64buf);
        let mode_count = read_u32(&mut r)?;
        let mut nb = [0u8; 1];
        r.read_exact(&mut nb)
            .map_err(|_| Error::format(name, "truncated header"))?;
        let column_norm = ColumnNorm::from_u8(nb[0])
            .ok_or_else(|| Error::format(name, format!("bad column_norm byte {}", nb[0])))?;

        let sen_side = (n_sen as f64).sqrt().round() as usize;
        let obj_side = (n_obj as f64).sqrt().round() as usize;
        if sen_side * sen_side != n_sen || obj_side * obj_side != n_obj {
            return Err(Error::format(
                name,
                "non-square grids cannot be reconstructed from CCMM",
            ));
        }

        let mut payload = vec![0u8; n_sen * n_obj * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(name, "truncated payload"))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut columns = Array2::from_shape_vec((n_obj, n_sen), data)
            .map_err(|e| Error::format(name, e.to_string()))?;
        if column_norm == ColumnNorm::UnitSum {
            for mut row in columns.outer_iter_mut() {
                let s: f64 = row.sum();
                if s > 0.0 {
                    row.mapv_inplace(|v| v / s);
                }
            }
        }
        Self::from_columns(
            columns,
            (obj_side, obj_side),
            (sen_side, sen_side),
            seed,
            mode_count,
            column_norm,
        )
    }

    pub fn load_ccmm(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_ccmm(std::io::BufReader::new(f), &path.display().to_string())
    }
}

/// A complex field over a grid, stored as separate real and imaginary parts.
pub struct ComplexField {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

impl ComplexField {
    /// Low-pass-filtered complex Gaussian noise with unit mean power:
    /// iid complex normals blurred by a separable Gaussian of sigma
    /// `correlation_px / 2`, then rescaled to RMS 1. `correlation_px` is
    /// roughly the speckle grain diameter in pixels.
    pub fn smooth_random(h: usize, w: usize, correlation_px: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        let mut re = Array2::from_shape_fn((h, w), |_| normal.sample(&mut rng));
        let mut im = Array2::from_shape_fn((h, w), |_| normal.sample(&mut rng));
        let sigma = correlation_px / 2.0;
        if sigma > 0.05 {
            gaussian_blur(&mut re, sigma);
            gaussian_blur(&mut im, sigma);
        }
        let power: f64 =
            (re.iter().map(|v| v * v).sum::<f64>() + im.iter().map(|v| v * v).sum::<f64>())
                / (h * w) as f64;
        let scale = if power > 0.0 { 1.0 / power.sqrt() } else { 1.0 };
        re.mapv_inplace(|v| v * scale);
        im.mapv_inplace(|v| v * scale);
        Self { re, im }
    }

    /// Constant field (for tests of degenerate mode structure).
    pub fn constant(h: usize, w: usize, re: f64, im: f64) -> Self {
        Self {
            re: Array2::from_elem((h, w), re),
            im: Array2::from_elem((h, w), im),
        }
    }
}

fn gaussian_blur(field: &mut Array2<f64>, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let (h, w) = field.dim();
    // Horizontal pass.
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = c as isize + ki as isize - radius as isize;
                if cc >= 0 && (cc as usize) < w {
                    acc += k * field[(r, cc as usize)];
                }
            }
            tmp[(r, c)] = acc;
        }
    }
    // Vertical pass.
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = r as isize + ki as isize - radius as isize;
                if rr >= 0 && (rr as usize) < h {
                    acc += k * tmp[(rr as usize, c)];
                }
            }
            field[(r, c)] = acc;
        }
    }
}

/// Builds the operator from explicit mode fields and per-pixel couplings:
/// column `i` is `|sum_k couplings[k][i] * modes[k][s]|^2` over sensor
/// pixels `s`, then normalized per `column_norm`. Exposed so degenerate mode
/// structures can be constructed directly.
pub fn operator_from_modes(
    modes: &[ComplexField],
    couplings: &[ComplexField],
    obj_shape: (usize, usize),
    sen_shape: (usize, usize),
    column_norm: ColumnNorm,
    seed: u64,
) -> Result<TransferOperator> {
    if modes.is_empty() || modes.len() != couplings.len() {
        return Err(Error::InvalidArg(
            "need equal, nonzero numbers of modes and coupling fields".into(),
        ));
    }
    let k = modes.len();
    let n_obj = obj_shape.0 * obj_shape.1;
    let n_sen = sen_shape.0 * sen_shape.1;
    if n_obj == 0 || n_sen == 0 {
        return Err(Error::InvalidArg("operator grids must be nonempty".into()));
    }

    // Stack fields as (K, n) matrices.
    let stack = |fields: &[ComplexField], n: usize, part: fn(&ComplexField) -> &Array2<f64>| {
        let mut m = Array2::<f64>::zeros((k, n));
        for (row, f) in fields.iter().enumerate() {
            let flat: Vec<f64> = part(f).iter().cloned().collect();
            m.slice_mut(s![row, ..]).assign(&ndarray::ArrayView1::from(&flat));
        }
        m
    };
    let m_re = stack(modes, n_sen, |f| &f.re);
    let m_im = stack(modes, n_sen, |f| &f.im);
    let a_re = stack(couplings, n_obj, |f| &f.re);
    let a_im = stack(couplings, n_obj, |f| &f.im);

    // P = A^T.M per 2048-row block: P_re = Are^T.Mre - Aim^T.Mim, etc.
    let mut columns = Array2::<f64>::zeros((n_obj, n_sen));
    const ROW_BLOCK: usize = 2048;
    let mut start = 0;
    while start < n_obj {
        let stop = (start + ROW_BLOCK).min(n_obj);
        let are = a_re.slice(s![.., start..stop]);
        let aim = a_im.slice(s![.., start..stop]);
        let mut p_re = Array2::<f64>::zeros((stop - start, n_sen));
        let mut p_im = Array2::<f64>::zeros((stop - start, n_sen));
        linalg::par_gemm_acc(1.0, &are.t(), &m_re.view(), 0.0, &mut p_re);
        linalg::par_gemm_acc(-1.0, &aim.t(), &m_im.view(), 1.0, &mut p_re);
        linalg::par_gemm_acc(1.0, &are.t(), &m_im.view(), 0.0, &mut p_im);
        linalg::par_gemm_acc(1.0, &aim.t(), &m_re.view(), 1.0, &mut p_im);
        let mut block = columns.slice_mut(s![start..stop, ..]);
        ndarray::Zip::from(&mut block)
            .and(&p_re)
            .and(&p_im)
            .for_each(|c, &re, &im| *c = re * re + im * im);
        start = stop;
    }

    if column_norm == ColumnNorm::UnitSum {
        columns.outer_iter_mut().for_each(|mut row| {
            let s: f64 = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        });
    }

    TransferOperator::from_columns(
        columns,
        obj_shape,
        sen_shape,
        seed,
        k as u32,
        column_norm,
    )
}

/// Synthesizes a speckle transfer operator. Deterministic for fixed
/// arguments; per-mode random streams are derived from (seed, mode index)
/// so generation is schedule-independent. The returned operator carries a
/// spectral condition number estimate in its metadata.
pub fn synthesize_operator(
    obj_h: usize,
    obj_w: usize,
    sen_h: usize,
    sen_w: usize,
    mode_count: u32,
    correlation_px: f64,
    seed: u64,
) -> Result<TransferOperator> {
    if obj_h == 0 || obj_w == 0 || sen_h == 0 || sen_w == 0 {
        return Err(Error::InvalidArg("operator grids must be nonempty".into()));
    }
    if mode_count < 1 {
        return Err(Error::InvalidArg("mode_count must be >= 1".into()));
    }
    if !(correlation_px >= 1.0) {
        return Err(Error::InvalidArg("correlation_px must be >= 1".into()));
    }
    let k = mode_count as usize;
    let norm = 1.0 / (k as f64).sqrt();
    let fields: Vec<(ComplexField, ComplexField)> = (0..k)
        .into_par_iter()
        .map(|m| {
            let mode = ComplexField::smooth_random(
                sen_h,
                sen_w,
                correlation_px,
                derive_seed(seed, 2 * m as u64),
            );
            let mut coup = ComplexField::smooth_random(
                obj_h,
                obj_w,
                correlation_px,
                derive_seed(seed, 2 * m as u64 + 1),
            );
            coup.re.mapv_inplace(|v| v * norm);
            coup.im.mapv_inplace(|v| v * norm);
            (mode, coup)
        })
        .collect();
    let (modes, couplings): (Vec<_>, Vec<_>) = fields.into_iter().unzip();
    let mut op = operator_from_modes(
        &modes,
        &couplings,
        (obj_h, obj_w),
        (sen_h, sen_w),
        ColumnNorm::UnitSum,
        seed,
    )?;
    op.mode_count = mode_count;
    op.condition_estimate = Some(op.estimate_condition(32));
    Ok(op)
}

/// Applies the forward model y = M.x, then optional Poisson resampling and
/// additive Gaussian read noise (std = gaussian_sigma x max of the clean y),
/// clamped at zero. Deterministic given `noise.seed`.
pub fn forward(op: &TransferOperator, obj: &ImageGrid, noise: &NoiseSpec) -> Result<ImageGrid> {
    noise.validate()?;
    let n_obj = op.n_obj();
    if obj.len() != n_obj {
        return Err(Error::shape(
            "forward object",
            format!("{} pixels ({}x{})", n_obj, op.obj_shape().0, op.obj_shape().1),
            format!("{} pixels ({}x{})", obj.len(), obj.height(), obj.width()),
        ));
    }
    let n_sen = op.n_sen();
    let x = obj.data();

    // y accumulated per fixed sensor-range chunk; each chunk walks all
    // contributing rows, so the result is schedule-independent.
    let chunk = 8192.min(n_sen).max(1);
    let mut y = vec![0.0_f64; n_sen];
    let cols = op.columns();
    y.par_chunks_mut(chunk).enumerate().for_each(|(ci, out)| {
        let lo = ci * chunk;
        let hi = lo + out.len();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = cols.row(i);
                let seg = &row.to_slice().expect("rows are contiguous")[lo..hi];
                for (o, &m) in out.iter_mut().zip(seg) {
                    *o += xi * m;
                }
            }
        }
    });

    if !noise.is_zero() {
        let clean_max = y.iter().cloned().fold(0.0_f64, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        if noise.poisson_scale > 0.0 {
            for v in &mut y {
                let lam = *v * noise.poisson_scale;
                if lam > 0.0 {
                    let p = rand_distr::Poisson::new(lam).expect("positive lambda");
                    let counts: f64 = p.sample(&mut rng);
                    *v = counts / noise.poisson_scale;
                }
            }
        }
        if noise.gaussian_sigma > 0.0 {
            let std = noise.gaussian_sigma * clean_max;
            if std > 0.0 {
                let g = rand_distr::Normal::new(0.0, std).expect("positive std");
                for v in &mut y {
                    *v += g.sample(&mut rng);
                }
            }
        }
        for v in &mut y {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    let (sh, sw) = op.sen_shape();
    let (oh, ow) = op.obj_shape();
    let pitch = obj.pitch_um() * ((oh * ow) as f64 / (sh * sw) as f64).sqrt();
    ImageGrid::new(sh, sw, pitch, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageGrid;

    fn desk_op(side: usize, modes: u32, seed: u64) -> TransferOperator {
        synthesize_operator(side, side, side, side, modes, 2.0, seed).unwrap()
    }

    #[test]
    fn single_flat_mode_gives_uniform_columns() {
        let modes = vec![ComplexField::constant(4, 4, 1.0, 0.0)];
        let coups = vec![ComplexField::constant(3, 3, 1.0, 0.0)];
        let op =
            operator_from_modes(&modes, &coups, (3, 3), (4, 4), ColumnNorm::UnitSum, 0).unwrap();
        for i in 0..9 {
            for &v in op.column(i) {
                assert!((v - 1.0 / 16.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn columns_unit_sum_and_adjacent_correlation() {
        let op = desk_op(8, 32, 7);
        for i in 0..op.n_obj() {
            let s: f64 = op.column(i).sum();
            assert!((s - 1.0).abs() < 1e-9, "column {i} sums to {s}");
        }
        // Pearson correlation of columns 0 and 1, computed directly.
        let a = op.column(0);
        let b = op.column(1);
        let n = a.len() as f64;
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let r = cov / (va * vb).sqrt();
        assert!(r > 0.0 && r < 1.0, "adjacent-column correlation {r}");
    }

    #[test]
    fn different_seeds_differ() {
        let a = desk_op(8, 8, 7);
        let b = desk_op(8, 8, 8);
        let diff: f64 = a
            .columns()
            .iter()
            .zip(b.columns().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 0.0);
    }

    #[test]
    fn identical_seeds_bitwise_identical() {
        let a = desk_op(8, 16, 42);
        let b = desk_op(8, 16, 42);
        assert_eq!(a.columns().as_slice(), b.columns().as_slice());
        assert_eq!(a.condition_estimate, b.condition_estimate);
    }

    #[test]
    fn forward_identity_operator_is_identity_map() {
        let n = 4;
        let mut cols = Array2::zeros((n * n, n * n));
        for i in 0..n * n {
            cols[(i, i)] = 1.0;
        }
        let op = TransferOperator::from_columns(
            cols,
            (n, n),
            (n, n),
            0,
            1,
            ColumnNorm::UnitSum,
        )
        .unwrap();
        let img = ImageGrid::new(n, n, 1.0, (0..16).map(|i| i as f64).collect()).unwrap();
        let out = forward(&op, &img, &NoiseSpec::none(0)).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn forward_conserves_energy_with_unit_sum() {
        let op = desk_op(8, 16, 3);
        let img = ImageGrid::new(8, 8, 1.0, (0..64).map(|i| (i % 5) as f64).collect()).unwrap();
        let out = forward(&op, &img, &NoiseSpec::none(0)).unwrap();
        let rel = (out.sum() - img.sum()).abs() / img.sum();
        assert!(rel < 1e-6, "energy drift {rel}");
    }

    #[test]
    fn forward_single_pixel_extracts_column() {
        let op = desk_op(8, 16, 11);
        let i = 19;
        let mut data = vec![0.0; 64];
        data[i] = 1.0;
        let img = ImageGrid::new(8, 8, 1.0, data).unwrap();
        let out = forward(&op, &img, &NoiseSpec::none(0)).unwrap();
        let col = op.column(i);
        assert_eq!(out.data().len(), col.len());
        for (a, b) in out.data().iter().zip(col.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let op = desk_op(8, 4, 1);
        let img = ImageGrid::zeros(4, 4, 1.0);
        let err = forward(&op, &img, &NoiseSpec::none(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn forward_is_linear_without_noise() {
        let op = desk_op(8, 16, 5);
        let x1 = ImageGrid::new(8, 8, 1.0, (0..64).map(|i| (i % 3) as f64).collect()).unwrap();
        let x2 = ImageGrid::new(8, 8, 1.0, (0..64).map(|i| (i % 7) as f64 * 0.5).collect()).unwrap();
        let (alpha, beta) = (0.7, 1.9);
        let combo = ImageGrid::new(
            8,
            8,
            1.0,
            x1.data()
                .iter()
                .zip(x2.data())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap();
        let y1 = forward(&op, &x1, &NoiseSpec::none(0)).unwrap();
        let y2 = forward(&op, &x2, &NoiseSpec::none(0)).unwrap();
        let yc = forward(&op, &combo, &NoiseSpec::none(0)).unwrap();
        for ((a, b), c) in y1.data().iter().zip(y2.data()).zip(yc.data()) {
            let want = alpha * a + beta * b;
            assert!((want - c).abs() <= 1e-9 * want.abs().max(1e-30));
        }
    }

    #[test]
    fn scrambling_decorrelates_structured_objects() {
        // Single lit disk: sensor output should have little resemblance.
        let op = desk_op(16, 32, 9);
        let mut data = vec![0.0; 256];
        for r in 6..10 {
            for c in 6..10 {
                data[r * 16 + c] = 1.0;
            }
        }
        let img = ImageGrid::new(16, 16, 1.0, data).unwrap();
        let out = forward(&op, &img, &NoiseSpec::none(0)).unwrap();
        let x = img.data();
        let y = out.data();
        let n = x.len() as f64;
        let (mx, my) = (img.sum() / n, out.sum() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!(r.abs() < 0.2, "object/sensor correlation {r}");
    }

    #[test]
    fn noisy_forward_is_seeded_and_deterministic() {
        let op = desk_op(8, 16, 2);
        let img = ImageGrid::new(8, 8, 1.0, (0..64).map(|i| (i % 9) as f64 * 0.1).collect()).unwrap();
        let noise = NoiseSpec {
            gaussian_sigma: 0.05,
            poisson_scale: 1000.0,
            seed: 77,
        };
        let a = forward(&op, &img, &noise).unwrap();
        let b = forward(&op, &img, &noise).unwrap();
        assert_eq!(a.data(), b.data());
        let c = forward(&op, &img, &NoiseSpec { seed: 78, ..noise }).unwrap();
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ccmm_round_trip() {
        let op = desk_op(8, 4, 13);
        let mut buf = Vec::new();
        op.write_ccmm(&mut buf).unwrap();
        let back = TransferOperator::read_ccmm(&buf[..], "mem").unwrap();
        assert_eq!(back.n_obj(), op.n_obj());
        assert_eq!(back.n_sen(), op.n_sen());
        assert_eq!(back.seed, op.seed);
        assert_eq!(back.mode_count, op.mode_count);
        assert_eq!(back.column_norm, op.column_norm);
        // f32 quantization, then renormalization: close but not bitwise.
        for (a, b) in back.columns().iter().zip(op.columns().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for i in 0..back.n_obj() {
            assert!((back.column(i).sum() - 1.0).abs() < 1e-9);
        }

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(TransferOperator::read_ccmm(&bad[..], "mem").is_err());
        assert!(TransferOperator::read_ccmm(&buf[..100], "mem").is_err());
    }

    #[test]
    fn zero_size_grid_rejected() {
        assert!(synthesize_operator(0, 4, 4, 4, 1, 1.0, 0).is_err());
        assert!(synthesize_operator(4, 4, 4, 4, 0, 1.0, 0).is_err());
    }

    #[test]
    fn condition_estimate_present_and_finite() {
        let op = desk_op(8, 32, 21);
        let cond = op.condition_estimate.expect("synthesize fills estimate");
        assert!(cond.is_finite() && cond > 1.0, "cond {cond}");
    }
}
