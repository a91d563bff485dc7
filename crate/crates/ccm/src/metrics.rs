//! Quantitative evaluation: MAE, windowed SSIM, line profiles, FWHM, and
//! two-point separation.
//!
//! All metrics operate on [0, 1]-normalized images (L = 1 by default); the
//! report writer states this in its header. FWHM subtracts the profile
//! baseline (its minimum) before locating half-maximum crossings, making the
//! measure robust to the DC haze synthetic reconstructions carry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::ImageGrid;
use crate::{Error, Result};

/// Window shape for SSIM statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WindowKind {
    Gaussian { sigma: f64 },
    Uniform,
}

/// SSIM configuration. The default is the canonical parameterization:
/// 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03, L = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub window_kind: WindowKind,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            window_kind: WindowKind::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.k1 > 0.0) || !(self.k2 > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::InvalidArg("SSIM constants must be positive".into()));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        let n = self.window;
        match self.window_kind {
            WindowKind::Uniform => vec![1.0 / (n * n) as f64; n * n],
            WindowKind::Gaussian { sigma } => {
                let c = (n / 2) as f64;
                let mut w = Vec::with_capacity(n * n);
                for r in 0..n {
                    for col in 0..n {
                        let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
                        w.push((-d2 / (2.0 * sigma * sigma)).exp());
                    }
                }
                let sum: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= sum);
                w
            }
        }
    }
}

fn check_same_shape(a: &ImageGrid, b: &ImageGrid, context: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    Ok(())
}

fn check_range(img: &ImageGrid, hi: f64, context: &str) -> Result<()> {
    if img.data().iter().any(|&v| v < 0.0 || v > hi) {
        return Err(Error::InvalidArg(format!(
            "{context}: values must lie in [0, {hi}] (normalize first)"
        )));
    }
    Ok(())
}

/// Mean absolute error between two [0, 1]-normalized images.
pub fn mae(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_shape(a, b, "mae")?;
    check_range(a, 1.0, "mae")?;
    check_range(b, 1.0, "mae")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Mean structural similarity over all valid window positions (borders are
/// handled by valid-window cropping, not padding).
pub fn ssim(a: &ImageGrid, b: &ImageGrid, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    check_same_shape(a, b, "ssim")?;
    let l = cfg.dynamic_range;
    check_range(a, l, "ssim")?;
    check_range(b, l, "ssim")?;
    let win = cfg.window;
    let (h, w) = (a.height(), a.width());
    if h < win || w < win {
        return Err(Error::InvalidArg(format!(
            "image {h}x{w} is smaller than the {win}x{win} SSIM window"
        )));
    }
    let weights = cfg.weights();
    let c1 = (cfg.k1 * l) * (cfg.k1 * l);
    let c2 = (cfg.k2 * l) * (cfg.k2 * l);
    let (ad, bd) = (a.data(), b.data());

    let mut total = 0.0_f64;
    let mut count = 0usize;
    for wy in 0..=h - win {
        for wx in 0..=w - win {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut ea2 = 0.0;
            let mut eb2 = 0.0;
            let mut eab = 0.0;
            let mut k = 0;
            for r in 0..win {
                let base = (wy + r) * w + wx;
                for c in 0..win {
                    let wt = weights[k];
                    k += 1;
                    let x = ad[base + c];
                    let y = bd[base + c];
                    mu_a += wt * x;
                    mu_b += wt * y;
                    ea2 += wt * (x * x);
                    eb2 += wt * (y * y);
                    eab += wt * (x * y);
                }
            }
            let va = ea2 - mu_a * mu_a;
            let vb = eb2 - mu_b * mu_b;
            let cov = eab - mu_a * mu_b;
            let num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A straight sampling line through an image, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileLine {
    pub start: (f64, f64),
    pub end: (f64, f64),
    /// Sample spacing along the line, in pixels.
    pub spacing_px: f64,
}

impl ProfileLine {
    /// Horizontal line through row `row` spanning the full width.
    pub fn horizontal(img: &ImageGrid, row: f64, spacing_px: f64) -> Self {
        Self {
            start: (row, 0.0),
            end: (row, img.width() as f64 - 1.0),
            spacing_px,
        }
    }
}

/// A sampled 1D intensity profile with its physical sample spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub values: Vec<f64>,
    pub spacing_um: f64,
}

impl Profile {
    pub fn new(values: Vec<f64>, spacing_um: f64) -> Self {
        Self { values, spacing_um }
    }

    /// Physical positions of the samples, starting at 0.
    pub fn positions_um(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|i| i as f64 * self.spacing_um)
            .collect()
    }
}

/// Bilinear samples along the line at the requested spacing. The sample
/// count is floor(length / spacing) + 1; every sample must fall inside the
/// image.
pub fn line_profile(img: &ImageGrid, line: &ProfileLine) -> Result<Profile> {
    if !(line.spacing_px > 0.0) {
        return Err(Error::InvalidArg("profile spacing must be > 0".into()));
    }
    let (r0, c0) = line.start;
    let (r1, c1) = line.end;
    let len = ((r1 - r0).powi(2) + (c1 - c0).powi(2)).sqrt();
    if len == 0.0 {
        return Err(Error::InvalidArg("profile endpoints must be distinct".into()));
    }
    let n = (len / line.spacing_px).floor() as usize + 1;
    let (dr, dc) = ((r1 - r0) / len, (c1 - c0) / len);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let d = i as f64 * line.spacing_px;
        let (r, c) = (r0 + dr * d, c0 + dc * d);
        values.push(bilinear(img, r, c)?);
    }
    Ok(Profile::new(values, line.spacing_px * img.pitch_um()))
}

fn bilinear(img: &ImageGrid, r: f64, c: f64) -> Result<f64> {
    let (h, w) = (img.height() as f64, img.width() as f64);
    if r < 0.0 || c < 0.0 || r > h - 1.0 || c > w - 1.0 {
        return Err(Error::InvalidArg(format!(
            "line exits image bounds at ({r:.2}, {c:.2})"
        )));
    }
    let r0 = (r.floor() as usize).min(img.height() - 1);
    let c0 = (c.floor() as usize).min(img.width() - 1);
    let r1 = (r0 + 1).min(img.height() - 1);
    let c1 = (c0 + 1).min(img.width() - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    Ok(img.pixel(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + img.pixel(r0, c1) * (1.0 - fr) * fc
        + img.pixel(r1, c0) * fr * (1.0 - fc)
        + img.pixel(r1, c1) * fr * fc)
}

/// Full width at half maximum in physical units. The baseline (profile
/// minimum) is subtracted, crossings on each side of the peak are located by
/// linear interpolation, and the peak must be interior and bracketed, else
/// "peak truncated".
pub fn fwhm(profile: &Profile) -> Result<f64> {
    let v = &profile.values;
    if v.len() < 3 {
        return Err(Error::InvalidArg("profile too short for FWHM".into()));
    }
    let baseline = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let (peak_idx, &peak_val) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("non-empty");
    if peak_idx == 0 || peak_idx == v.len() - 1 || peak_val <= baseline {
        return Err(Error::InvalidArg(
            "profile needs a strict interior maximum".into(),
        ));
    }
    let target = baseline + (peak_val - baseline) / 2.0;

    // Left crossing: nearest sample at or below the target, interpolated
    // toward the peak.
    let mut left = None;
    for j in (0..peak_idx).rev() {
        if v[j] <= target {
            let frac = (target - v[j]) / (v[j + 1] - v[j]);
            left = Some(j as f64 + frac);
            break;
        }
    }
    let mut right = None;
    for j in peak_idx + 1..v.len() {
        if v[j] <= target {
            let frac = (v[j - 1] - target) / (v[j - 1] - v[j]);
            right = Some((j - 1) as f64 + frac);
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok((r - l) * profile.spacing_um),
        _ => Err(Error::InvalidArg(
            "peak truncated: half-maximum never crossed on one side".into(),
        )),
    }
}

/// Rayleigh-like two-point criterion: a valley-to-peak ratio below this
/// resolves the pair.
pub const DEFAULT_DIP_THRESHOLD: f64 = 0.735;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPointResult {
    pub resolved: bool,
    /// Distance between the two highest qualifying peaks; None when fewer
    /// than two peaks qualify.
    pub peak_distance_um: Option<f64>,
    /// Valley minimum divided by the lower peak; None without two peaks.
    pub dip_ratio: Option<f64>,
}

/// Finds the two highest local maxima above baseline + 10% of range and
/// reports their separation and valley depth. With fewer than two
/// qualifying peaks, `resolved` is false and the distance is flagged
/// undefined (None).
pub fn two_point_separation(profile: &Profile) -> TwoPointResult {
    two_point_separation_with(profile, DEFAULT_DIP_THRESHOLD)
}

pub fn two_point_separation_with(profile: &Profile, dip_threshold: f64) -> TwoPointResult {
    let v = &profile.values;
    let unresolved = TwoPointResult {
        resolved: false,
        peak_distance_um: None,
        dip_ratio: None,
    };
    if v.len() < 3 {
        return unresolved;
    }
    let baseline = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = baseline + 0.1 * (max - baseline);

    // Local maxima with plateau handling: a run bounded by an ascent on the
    // left and a descent on the right counts once, at its center.
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    let mut i = 1;
    while i < v.len() - 1 {
        if v[i] > v[i - 1] {
            let mut j = i;
            while j + 1 < v.len() && v[j + 1] == v[i] {
                j += 1;
            }
            if j + 1 < v.len() && v[j + 1] < v[i] && v[i] >= threshold {
                peaks.push(((i + j) as f64 / 2.0, v[i]));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    if peaks.len() < 2 {
        return unresolved;
    }
    // Two highest peaks, ordered left to right.
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&x, &y| peaks[y].1.partial_cmp(&peaks[x].1).unwrap());
    let (mut pa, mut pb) = (peaks[order[0]], peaks[order[1]]);
    if pa.0 > pb.0 {
        std::mem::swap(&mut pa, &mut pb);
    }
    let lo = pa.0.ceil() as usize;
    let hi = pb.0.floor() as usize;
    let valley = v[lo..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
    let lower_peak = pa.1.min(pb.1);
    let dip_ratio = if lower_peak > 0.0 {
        valley / lower_peak
    } else {
        1.0
    };
    TwoPointResult {
        resolved: dip_ratio < dip_threshold,
        peak_distance_um: Some((pb.0 - pa.0) * profile.spacing_um),
        dip_ratio: Some(dip_ratio),
    }
}

/// One row of a metrics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub index: usize,
    pub mae: f64,
    pub ssim: f64,
    pub fwhm_um: Option<f64>,
    pub peak_distance_um: Option<f64>,
    pub dip_ratio: Option<f64>,
    pub resolved: Option<bool>,
}

/// Writes the report CSV. The header records that metrics are computed on
/// [0, 1]-normalized images.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# MAE and SSIM computed on [0,1]-normalized images (L = 1)")?;
    writeln!(f, "# FWHM baseline: profile minimum subtracted before half-max")?;
    writeln!(f, "index,mae,ssim,fwhm_um,peak_distance_um,dip_ratio,resolved")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{},{},{},{}",
            r.index,
            r.mae,
            r.ssim,
            opt(r.fwhm_um),
            opt(r.peak_distance_um),
            opt(r.dip_ratio),
            r.resolved.map(|b| b.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}
