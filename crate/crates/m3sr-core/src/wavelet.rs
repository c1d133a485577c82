//! Single-level orthonormal Haar decomposition of a feature map into four
//! sub-bands and its exact inverse. Per 2x2 block and channel:
//!   LL = (p00+p01+p10+p11)/2    LH = (p00+p01-p10-p11)/2
//!   HL = (p00-p01+p10-p11)/2    HH = (p00-p01-p10+p11)/2
//! The 4x4 analysis matrix is orthogonal, so reconstruction is its
//! transpose and energy is conserved.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{FeatureMap, TensorF};

/// LL/LH/HL/HH sub-bands, each (C, H/2, W/2).
#[derive(Debug, Clone)]
pub struct SubBands {
    pub ll: FeatureMap,
    pub lh: FeatureMap,
    pub hl: FeatureMap,
    pub hh: FeatureMap,
}

impl SubBands {
    pub fn bands(&self) -> [&FeatureMap; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands()
            .iter()
            .map(|b| b.tensor().data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Decomposes (C, H, W) with even H and W into four sub-bands.
pub fn dwt2(f: &FeatureMap) -> Result<SubBands> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "dwt2 requires even extents, got {h}x{w}"
        )));
    }
    let mut stacked = vec![0.0; c * h * w];
    kernels::dwt2_fwd(f.tensor().data(), c, h, w, &mut stacked);
    let plane = (h / 2) * (w / 2);
    let band = |i: usize| -> Result<FeatureMap> {
        FeatureMap::new(TensorF::from_vec(
            vec![c, h / 2, w / 2],
            stacked[i * c * plane..(i + 1) * c * plane].to_vec(),
        )?)
    };
    Ok(SubBands { ll: band(0)?, lh: band(1)?, hl: band(2)?, hh: band(3)? })
}

/// Exact inverse of `dwt2`.
pub fn idwt2(s: &SubBands) -> Result<FeatureMap> {
    let shape = s.ll.tensor().shape().to_vec();
    for b in s.bands() {
        if b.tensor().shape() != shape {
            return Err(Error::Shape(format!(
                "sub-band shapes differ: {:?} vs {:?}",
                b.tensor().shape(),
                shape
            )));
        }
    }
    let (c, h2, w2) = (shape[0], shape[1], shape[2]);
    let mut stacked = Vec::with_capacity(4 * c * h2 * w2);
    for b in s.bands() {
        stacked.extend_from_slice(b.tensor().data());
    }
    let mut out = vec![0.0; 4 * c * h2 * w2];
    kernels::idwt2_fwd(&stacked, c, h2, w2, &mut out);
    FeatureMap::new(TensorF::from_vec(vec![c, 2 * h2, 2 * w2], out)?)
}
