//! SS2D: flattening a 2D feature map into token sequences along four
//! directions, scanning each with an independent selective scan, and
//! summing the un-flattened results.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ssm::{s6_forward, SelectiveParams};
use crate::tensor::{FeatureMap, TensorF};

/// Token orders used by the four directional scans. Directions 2 and 3 are
/// exact reversals of 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajorForward = 0,
    ColMajorForward = 1,
    RowMajorReversed = 2,
    ColMajorReversed = 3,
}

pub const DIRECTIONS: [ScanDirection; 4] = [
    ScanDirection::RowMajorForward,
    ScanDirection::ColMajorForward,
    ScanDirection::RowMajorReversed,
    ScanDirection::ColMajorReversed,
];

impl ScanDirection {
    pub fn id(self) -> usize {
        self as usize
    }

    /// Pixel visiting order as flat (y*W + x) offsets.
    pub fn token_order(self, h: usize, w: usize) -> Vec<usize> {
        let mut order = Vec::with_capacity(h * w);
        match self {
            ScanDirection::RowMajorForward => {
                order.extend(0..h * w);
            }
            ScanDirection::ColMajorForward => {
                for x in 0..w {
                    for y in 0..h {
                        order.push(y * w + x);
                    }
                }
            }
            ScanDirection::RowMajorReversed => {
                order.extend((0..h * w).rev());
            }
            ScanDirection::ColMajorReversed => {
                for x in (0..w).rev() {
                    for y in (0..h).rev() {
                        order.push(y * w + x);
                    }
                }
            }
        }
        order
    }
}

/// Gather table turning (C, H, W) into the (H·W, C) token sequence of one
/// direction: out[t*C + c] = in[c*H*W + order[t]].
pub fn flatten_perm(c: usize, h: usize, w: usize, d: ScanDirection) -> Rc<Vec<u32>> {
    let order = d.token_order(h, w);
    let plane = h * w;
    let mut perm = Vec::with_capacity(c * plane);
    for &p in &order {
        for ch in 0..c {
            perm.push((ch * plane + p) as u32);
        }
    }
    Rc::new(perm)
}

/// Gather table for the inverse: (H·W, C) tokens back to (C, H, W).
pub fn unflatten_perm(c: usize, h: usize, w: usize, d: ScanDirection) -> Rc<Vec<u32>> {
    let order = d.token_order(h, w);
    let plane = h * w;
    // position of each pixel in the token sequence
    let mut pos = vec![0u32; plane];
    for (t, &p) in order.iter().enumerate() {
        pos[p] = t as u32;
    }
    let mut perm = Vec::with_capacity(c * plane);
    for ch in 0..c {
        for p in 0..plane {
            perm.push(pos[p] * c as u32 + ch as u32);
        }
    }
    Rc::new(perm)
}

fn apply_perm(data: &[f64], perm: &[u32]) -> Vec<f64> {
    perm.iter().map(|&i| data[i as usize]).collect()
}

/// Flattens a (C, H, W) map into an (L, C) sequence, L = H·W, along the
/// given direction.
pub fn flatten_direction(f: &FeatureMap, d: ScanDirection) -> TensorF {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let perm = flatten_perm(c, h, w, d);
    TensorF::from_vec(vec![h * w, c], apply_perm(f.tensor().data(), &perm)).expect("perm shape")
}

/// Inverse of `flatten_direction` for the same direction and extents.
pub fn unflatten_direction(seq: &TensorF, d: ScanDirection, h: usize, w: usize) -> Result<FeatureMap> {
    let shape = seq.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::Shape(format!(
            "sequence {shape:?} does not match {h}x{w} tokens"
        )));
    }
    let c = shape[1];
    let perm = unflatten_perm(c, h, w, d);
    FeatureMap::new(TensorF::from_vec(vec![c, h, w], apply_perm(seq.data(), &perm))?)
}

/// Four independent per-direction parameter sets.
#[derive(Debug, Clone)]
pub struct Ss2dParams {
    pub directions: Vec<SelectiveParams>,
}

impl Ss2dParams {
    pub fn init<R: rand::Rng>(dim: usize, state: usize, rng: &mut R) -> Self {
        Ss2dParams { directions: (0..4).map(|_| SelectiveParams::init(dim, state, rng)).collect() }
    }
}

/// y = Σ_d unflatten(s6(flatten(F, d)), d), summed in direction order
/// 0,1,2,3. Output shape equals input shape.
pub fn ss2d(f: &FeatureMap, params: &Ss2dParams) -> Result<FeatureMap> {
    if params.directions.len() != 4 {
        return Err(Error::Config(format!(
            "ss2d needs exactly 4 direction parameter sets, got {}",
            params.directions.len()
        )));
    }
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let mut acc = TensorF::zeros(vec![c, h, w]);
    for (d, sp) in DIRECTIONS.iter().zip(&params.directions) {
        let seq = flatten_direction(f, *d);
        let scanned = s6_forward(&seq, sp)?;
        let back = unflatten_direction(&scanned, *d, h, w)?;
        for (o, v) in acc.data_mut().iter_mut().zip(back.tensor().data()) {
            *o += v;
        }
    }
    FeatureMap::new(acc)
}
