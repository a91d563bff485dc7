//! Image container, aperture masking, resampling, normalization, and the
//! IMGF on-disk format.
//!
//! Conventions shared by every module: images are row-major with the origin
//! at the top-left pixel, integer pixel indices name pixel centers, and
//! `pitch_um` is the physical size of one pixel.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Magic bytes of the IMGF format.
pub const IMGF_MAGIC: &[u8; 4] = b"CCMI";
/// Current IMGF version.
pub const IMGF_VERSION: u32 = 1;

/// A nonnegative real-valued intensity field with a physical pixel pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pitch_um: f64,
    data: Vec<f64>,
}

impl ImageGrid {
    /// Builds an image from row-major data, validating the invariants:
    /// nonzero dimensions, positive pitch, and finite nonnegative intensities.
    pub fn new(height: usize, width: usize, pitch_um: f64, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArg("image dimensions must be >= 1".into()));
        }
        if !(pitch_um > 0.0) || !pitch_um.is_finite() {
            return Err(Error::InvalidArg(format!(
                "pitch must be positive and finite, got {pitch_um}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                "ImageGrid::new",
                height * width,
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArg(format!(
                "intensities must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            pitch_um,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize, pitch_um: f64) -> Self {
        Self::new(height, width, pitch_um, vec![0.0; height * width])
            .expect("zeros is always valid for positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pitch_um(&self) -> f64 {
        self.pitch_um
    }

    /// Row-major intensity data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0_f64, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Total integrated intensity: pixel sum times pixel area.
    pub fn integrated_intensity(&self) -> f64 {
        self.sum() * self.pitch_um * self.pitch_um
    }

    /// Replaces the pixel data, revalidating invariants.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.pitch_um, data)
    }

    /// Writes the IMGF binary format: magic "CCMI", version u32, height u32,
    /// width u32, pitch_um f64, then height*width f32 row-major values, all
    /// little-endian.
    pub fn write_imgf<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(IMGF_MAGIC)?;
        w.write_all(&IMGF_VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&self.pitch_um.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save_imgf(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_imgf(std::io::BufWriter::new(f))
    }

    /// Reads the IMGF format, rejecting wrong magic, unknown versions, and
    /// truncated payloads with distinct errors.
    pub fn read_imgf<R: Read>(mut r: R, name: &str) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(name, "truncated header"))?;
        if &magic != IMGF_MAGIC {
            return Err(Error::format(name, "bad magic (not an IMGF file)"));
        }
        let version = read_u32(&mut r, name)?;
        if version != IMGF_VERSION {
            return Err(Error::format(name, format!("unsupported version {version}")));
        }
        let height = read_u32(&mut r, name)? as usize;
        let width = read_u32(&mut r, name)? as usize;
        let mut pb = [0u8; 8];
        r.read_exact(&mut pb)
            .map_err(|_| Error::format(name, "truncated header"))?;
        let pitch = f64::from_le_bytes(pb);
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::format(name, "dimension overflow"))?;
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format(name, "truncated payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        ImageGrid::new(height, width, pitch, data)
    }

    pub fn load_imgf(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_imgf(std::io::BufReader::new(f), &path.display().to_string())
    }

    /// Renders the image as an 8-bit binary portable graymap (P5), scaling
    /// the maximum intensity to 255. For inspection only; quantitative paths
    /// use IMGF.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "P5\n{} {}\n255", self.width, self.height)?;
        let max = self.max();
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R, name: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(name, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

/// A circular field-of-view mask. `center` is in pixel coordinates
/// (fractional allowed); integer indices are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ApertureMask {
    pub diameter_um: f64,
    /// (row, col) of the disk center in pixel coordinates.
    pub center: (f64, f64),
}

impl ApertureMask {
    /// Disk of `diameter_um` centered on the image.
    pub fn centered(img: &ImageGrid, diameter_um: f64) -> Self {
        Self {
            diameter_um,
            center: (
                (img.height() as f64 - 1.0) / 2.0,
                (img.width() as f64 - 1.0) / 2.0,
            ),
        }
    }
}

/// Zeroes every pixel whose center lies outside the mask disk; pixels inside
/// are unchanged. Errors with "empty aperture" when the disk lies entirely
/// outside the image rectangle.
pub fn apply_aperture(img: &ImageGrid, mask: &ApertureMask) -> Result<ImageGrid> {
    if !(mask.diameter_um > 0.0) {
        return Err(Error::InvalidArg("aperture diameter must be > 0".into()));
    }
    let radius_px = mask.diameter_um / 2.0 / img.pitch_um();
    // Image rectangle in pixel coordinates, extended half a pixel beyond the
    // outermost pixel centers.
    let (cr, cc) = mask.center;
    let near_r = cr.clamp(-0.5, img.height() as f64 - 0.5);
    let near_c = cc.clamp(-0.5, img.width() as f64 - 0.5);
    let gap = ((cr - near_r).powi(2) + (cc - near_c).powi(2)).sqrt();
    if gap > radius_px {
        return Err(Error::EmptyAperture);
    }
    let r2 = radius_px * radius_px;
    let mut data = img.data().to_vec();
    for row in 0..img.height() {
        for col in 0..img.width() {
            let dr = row as f64 - cr;
            let dc = col as f64 - cc;
            if dr * dr + dc * dc > r2 {
                data[row * img.width() + col] = 0.0;
            }
        }
    }
    img.with_data(data)
}

/// Area-weighted average resampling. Each output pixel takes the mean of the
/// input intensity over its footprint, so the integrated intensity
/// (sum x pixel area) is conserved. The pitch is rescaled by the geometric
/// mean of the two axis ratios, which keeps pixel area (and hence integrated
/// intensity) well-defined for anisotropic resizes.
pub fn resample(img: &ImageGrid, new_h: usize, new_w: usize) -> Result<ImageGrid> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArg("resample target must be >= 1 pixel".into()));
    }
    let (h, w) = (img.height(), img.width());
    let sy = h as f64 / new_h as f64; // input rows per output row
    let sx = w as f64 / new_w as f64;
    let mut out = vec![0.0_f64; new_h * new_w];
    for oy in 0..new_h {
        let y0 = oy as f64 * sy;
        let y1 = y0 + sy;
        let iy0 = y0.floor() as usize;
        let iy1 = (y1.ceil() as usize).min(h);
        for ox in 0..new_w {
            let x0 = ox as f64 * sx;
            let x1 = x0 + sx;
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(w);
            let mut acc = 0.0;
            for iy in iy0..iy1 {
                let oy_len = overlap(y0, y1, iy as f64, iy as f64 + 1.0);
                if oy_len <= 0.0 {
                    continue;
                }
                let row = &img.data()[iy * w..(iy + 1) * w];
                for (ix, &v) in row.iter().enumerate().take(ix1).skip(ix0) {
                    let ox_len = overlap(x0, x1, ix as f64, ix as f64 + 1.0);
                    if ox_len > 0.0 {
                        acc += v * oy_len * ox_len;
                    }
                }
            }
            out[oy * new_w + ox] = acc / (sy * sx);
        }
    }
    let area_ratio = ((h * w) as f64 / (new_h * new_w) as f64).sqrt();
    // Clamp tiny negative rounding noise so the nonnegativity invariant holds.
    for v in &mut out {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    ImageGrid::new(new_h, new_w, img.pitch_um() * area_ratio, out)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Scales the image so the maximum is 1; an all-zero image is returned
/// unchanged. Output is always in [0, 1].
pub fn normalize_unit(img: &ImageGrid) -> ImageGrid {
    let max = img.max();
    if max <= 0.0 {
        return img.clone();
    }
    let data = img.data().iter().map(|&v| v / max).collect();
    img.with_data(data)
        .expect("dividing by the positive max preserves invariants")
}
