//! Hyperspectral cube type and binary file format, synthetic RGB/HSI pair
//! generation, and patch extraction.
//!
//! Cube file layout (all integers little-endian):
//!   magic "M3SR" | u32 version=1 | u32 H | u32 W | u32 bands |
//!   u32 wavelength_start_nm | u32 wavelength_step_nm |
//!   H·W·bands f32 values in (h, w, c) row-major order.
//!
//! RGB images reuse the format with bands = 3 and nominal wavelength
//! metadata (start 450, step 85); channels are stored in R, G, B order
//! regardless of the nominal grid.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, TensorF};

pub const CUBE_MAGIC: &[u8; 4] = b"M3SR";
pub const CUBE_VERSION: u32 = 1;
pub const DEFAULT_BANDS: usize = 31;
pub const DEFAULT_WL_START: u32 = 400;
pub const DEFAULT_WL_STEP: u32 = 10;
pub const RGB_WL_START: u32 = 450;
pub const RGB_WL_STEP: u32 = 85;

/// (H, W, bands) cube with values in [0, 1], row-major channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub h: usize,
    pub w: usize,
    pub bands: usize,
    pub wl_start_nm: u32,
    pub wl_step_nm: u32,
    values: Vec<f64>,
}

impl HsiCube {
    pub fn new(
        h: usize,
        w: usize,
        bands: usize,
        wl_start_nm: u32,
        wl_step_nm: u32,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != h * w * bands {
            return Err(Error::Shape(format!(
                "cube {h}x{w}x{bands} wants {} values, got {}",
                h * w * bands,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "cube values".into(), index: Some(i) });
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("cube values must lie in [0, 1]".into()));
        }
        Ok(HsiCube { h, w, bands, wl_start_nm, wl_step_nm, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, band: usize) -> f64 {
        self.values[(y * self.w + x) * self.bands + band]
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        (0..self.bands)
            .map(|k| self.wl_start_nm as f64 + k as f64 * self.wl_step_nm as f64)
            .collect()
    }

    /// Channel-first tensor view (bands, H, W).
    pub fn to_chw(&self) -> TensorF {
        let mut data = vec![0.0; self.values.len()];
        let plane = self.h * self.w;
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.bands {
                    data[c * plane + y * self.w + x] = self.get(y, x, c);
                }
            }
        }
        TensorF::from_vec(vec![self.bands, self.h, self.w], data).expect("same element count")
    }

    /// Builds a cube from a (C, H, W) tensor, clamping into [0, 1].
    pub fn from_chw_clamped(t: &TensorF, wl_start_nm: u32, wl_step_nm: u32) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("expected (C, H, W), got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        t.check_finite("cube source tensor")?;
        let plane = h * w;
        let mut values = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    values[(y * w + x) * c + ch] =
                        t.data()[ch * plane + y * w + x].clamp(0.0, 1.0);
                }
            }
        }
        HsiCube::new(h, w, c, wl_start_nm, wl_step_nm, values)
    }
}

/// Writes the binary cube format described in the module docs.
pub fn write_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CUBE_MAGIC)?;
    for v in [
        CUBE_VERSION,
        cube.h as u32,
        cube.w as u32,
        cube.bands as u32,
        cube.wl_start_nm,
        cube.wl_step_nm,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(cube.values.len() * 4);
    for &v in &cube.values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Exact inverse of `write_cube`. Bad magic, version mismatch and truncated
/// payload are distinct errors.
pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 4 {
        return Err(Error::TruncatedPayload { expected_bytes: 28, got_bytes: raw.len() });
    }
    if &raw[0..4] != CUBE_MAGIC {
        return Err(Error::BadMagic { found: [raw[0], raw[1], raw[2], raw[3]] });
    }
    if raw.len() < 28 {
        return Err(Error::TruncatedPayload { expected_bytes: 28, got_bytes: raw.len() });
    }
    let word = |i: usize| u32::from_le_bytes(raw[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != CUBE_VERSION {
        return Err(Error::VersionMismatch { found: version });
    }
    let (h, w, bands) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let (wl_start, wl_step) = (word(4), word(5));
    let expected = 28 + h * w * bands * 4;
    if raw.len() < expected {
        return Err(Error::TruncatedPayload { expected_bytes: expected, got_bytes: raw.len() });
    }
    if raw.len() > expected {
        return Err(Error::Shape(format!(
            "cube file has {} trailing bytes",
            raw.len() - expected
        )));
    }
    let values: Vec<f64> = raw[28..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    HsiCube::new(h, w, bands, wl_start, wl_step, values)
}

/// Spectral response function: a (3, bands) row-stochastic matrix taking a
/// spectrum to R, G, B.
#[derive(Debug, Clone)]
pub struct Srf {
    pub bands: usize,
    /// rows R, G, B, each summing to 1
    pub weights: Vec<f64>,
}

impl Srf {
    /// Gaussian responses centered at 620/550/450 nm with sigma 40 nm over
    /// the given wavelength grid, each row normalized to sum 1.
    pub fn default_gaussian(wavelengths: &[f64]) -> Srf {
        let centers = [620.0, 550.0, 450.0];
        let sigma = 40.0;
        let bands = wavelengths.len();
        let mut weights = vec![0.0; 3 * bands];
        for (r, &c0) in centers.iter().enumerate() {
            let row = &mut weights[r * bands..(r + 1) * bands];
            for (k, &wl) in wavelengths.iter().enumerate() {
                row[k] = (-((wl - c0) * (wl - c0)) / (2.0 * sigma * sigma)).exp();
            }
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Srf { bands, weights }
    }

    pub fn project(&self, spectrum: &[f64]) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for (r, out) in rgb.iter_mut().enumerate() {
            *out = self.weights[r * self.bands..(r + 1) * self.bands]
                .iter()
                .zip(spectrum)
                .map(|(w, s)| w * s)
                .sum();
        }
        rgb
    }

    /// Projects a whole cube to an RGB map (3, H, W).
    pub fn project_cube(&self, cube: &HsiCube) -> FeatureMap {
        let plane = cube.h * cube.w;
        let mut data = vec![0.0; 3 * plane];
        let mut spectrum = vec![0.0; cube.bands];
        for y in 0..cube.h {
            for x in 0..cube.w {
                for k in 0..cube.bands {
                    spectrum[k] = cube.get(y, x, k);
                }
                let rgb = self.project(&spectrum);
                for (r, &v) in rgb.iter().enumerate() {
                    data[r * plane + y * cube.w + x] = v;
                }
            }
        }
        FeatureMap::new(TensorF::from_vec(vec![3, cube.h, cube.w], data).unwrap()).unwrap()
    }
}

/// Aligned RGB (3, H, W) and HSI training pair.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub rgb: FeatureMap,
    pub hsi: HsiCube,
}

/// Generates one synthetic pair: the HSI is a sum of 3..=6 smooth spatial
/// blobs, each with a smooth spectrum (mixture of 1..=3 Gaussians over
/// wavelength), clipped to [0, 1]; the RGB is the default SRF projection.
pub fn synth_pair<R: Rng>(rng: &mut R, h: usize, w: usize) -> Result<SamplePair> {
    if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!(
            "synthetic pair size {h}x{w} must be >= 4 and divisible by 4"
        )));
    }
    let bands = DEFAULT_BANDS;
    let wavelengths: Vec<f64> =
        (0..bands).map(|k| DEFAULT_WL_START as f64 + k as f64 * DEFAULT_WL_STEP as f64).collect();
    let min_side = h.min(w) as f64;
    let n_blobs = rng.gen_range(3..=6);
    let mut values = vec![0.0; h * w * bands];
    for _ in 0..n_blobs {
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let sigma = rng.gen_range(min_side / 8.0..min_side / 2.5);
        let amp = rng.gen_range(0.25..0.9);
        let n_peaks = rng.gen_range(1..=3);
        let mut spectrum = vec![0.0; bands];
        for _ in 0..n_peaks {
            let center = rng.gen_range(400.0..700.0);
            let width = rng.gen_range(25.0..120.0);
            let weight = rng.gen_range(0.3..1.0);
            for (k, &wl) in wavelengths.iter().enumerate() {
                spectrum[k] += weight * (-((wl - center) * (wl - center)) / (2.0 * width * width)).exp();
            }
        }
        let peak = spectrum.iter().fold(0.0f64, |m, &v| m.max(v));
        for s in spectrum.iter_mut() {
            *s *= amp / peak;
        }
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let spatial = (-d2 / (2.0 * sigma * sigma)).exp();
                if spatial < 1e-6 {
                    continue;
                }
                let base = (y * w + x) * bands;
                for k in 0..bands {
                    values[base + k] += spatial * spectrum[k];
                }
            }
        }
    }
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let hsi = HsiCube::new(h, w, bands, DEFAULT_WL_START, DEFAULT_WL_STEP, values)?;
    let srf = Srf::default_gaussian(&hsi.wavelengths());
    let rgb = srf.project_cube(&hsi);
    Ok(SamplePair { rgb, hsi })
}

#[derive(Debug, Clone, Copy)]
pub enum CropMode {
    /// Regular grid with the given stride.
    Grid { stride: usize },
    /// `count` windows at uniformly drawn coordinates.
    Random { count: usize },
}

/// Crops aligned (rgb, hsi) windows of side `patch` from a pair.
pub fn crop_patches<R: Rng>(
    pair: &SamplePair,
    patch: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<Vec<SamplePair>> {
    let (h, w) = (pair.hsi.h, pair.hsi.w);
    if patch > h.min(w) {
        return Err(Error::Shape(format!(
            "patch {patch} larger than image {h}x{w}"
        )));
    }
    if patch % 4 != 0 {
        return Err(Error::Shape(format!("patch {patch} must be divisible by 4")));
    }
    let coords: Vec<(usize, usize)> = match mode {
        CropMode::Grid { stride } => {
            if stride == 0 {
                return Err(Error::Config("stride must be positive".into()));
            }
            let mut cs = Vec::new();
            let mut y = 0;
            while y + patch <= h {
                let mut x = 0;
                while x + patch <= w {
                    cs.push((y, x));
                    x += stride;
                }
                y += stride;
            }
            cs
        }
        CropMode::Random { count } => (0..count)
            .map(|_| (rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch)))
            .collect(),
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(coords.len());
    for (y0, x0) in coords {
        let mut rgb = vec![0.0; 3 * patch * patch];
        for c in 0..3 {
            for y in 0..patch {
                for x in 0..patch {
                    rgb[(c * patch + y) * patch + x] =
                        pair.rgb.tensor().data()[c * plane + (y0 + y) * w + (x0 + x)];
                }
            }
        }
        let mut hsi = vec![0.0; patch * patch * pair.hsi.bands];
        for y in 0..patch {
            for x in 0..patch {
                for k in 0..pair.hsi.bands {
                    hsi[(y * patch + x) * pair.hsi.bands + k] = pair.hsi.get(y0 + y, x0 + x, k);
                }
            }
        }
        out.push(SamplePair {
            rgb: FeatureMap::new(TensorF::from_vec(vec![3, patch, patch], rgb)?)?,
            hsi: HsiCube::new(
                patch,
                patch,
                pair.hsi.bands,
                pair.hsi.wl_start_nm,
                pair.hsi.wl_step_nm,
                hsi,
            )?,
        });
    }
    Ok(out)
}
