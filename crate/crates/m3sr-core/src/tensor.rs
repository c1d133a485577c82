//! Dense row-major f64 tensor, the carrier for activations, parameters and
//! gradients. Values are immutable once a public operation has produced the
//! tensor; in-place mutation is reserved for construction sites.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorF {
    /// Builds a tensor from explicit shape and row-major data
    /// (last axis fastest).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(TensorF { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorF { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        TensorF { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        TensorF { shape: vec![1], data: vec![value] }
    }

    /// Uniform fill over [lo, hi), consuming one draw per element in
    /// row-major order.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        TensorF { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a multi-index; element (i,j,k) of shape (A,B,C) lives
    /// at (i*B + j)*C + k.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < extent, "index {ix} out of range at axis {i}");
            flat = flat * extent + ix;
        }
        flat
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    /// Reinterprets the same data under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the first non-finite coordinate, used by operations that
    /// promise finite outputs.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite { what: what.to_string(), index: Some(i) }),
        }
    }

    pub fn max_abs_diff(&self, other: &TensorF) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A (channels, height, width) activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub TensorF);

impl FeatureMap {
    pub fn new(tensor: TensorF) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "feature map must be rank 3 (C,H,W), got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap(tensor))
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap(TensorF::zeros(vec![c, h, w]))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &TensorF {
        &self.0
    }
}
