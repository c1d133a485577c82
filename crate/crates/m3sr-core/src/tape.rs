//! Reverse-mode differentiation tape. Operations evaluate eagerly, record
//! themselves as nodes, and replay hand-derived backward kernels in reverse
//! creation order. One tape holds one forward computation; gradients for a
//! backward pass are confined to the calling thread.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::fastmath::{sigmoid, softplus};
use crate::kernels::{self, LnSaved, ScanDims, ScanSaved};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale { x: VarId, s: VarId },
    Sum(VarId),
    Narrow { x: VarId, start: usize },
    Permute { x: VarId, perm: Rc<Vec<u32>> },
    ConcatFirst { xs: Vec<VarId> },
    Reshape(VarId),
    Silu(VarId),
    Softplus(VarId),
    Linear { x: VarId, w: VarId, b: VarId, t: usize, din: usize, dout: usize },
    Pointwise { x: VarId, w: VarId, b: VarId, ci: usize, co: usize, p: usize },
    Conv3x3 { x: VarId, w: VarId, b: VarId, ci: usize, co: usize, h: usize, wd: usize, stride: usize },
    TConv3x3 { x: VarId, w: VarId, b: VarId, ci: usize, co: usize, h: usize, wd: usize },
    DwConv3x3 { x: VarId, w: VarId, b: VarId, c: usize, h: usize, wd: usize },
    DwConv1d { x: VarId, w: VarId, b: VarId, batch: usize, len: usize, d: usize },
    LayerNormChw { x: VarId, gamma: VarId, beta: VarId, c: usize, p: usize, saved: LnSaved },
    Dwt2 { x: VarId, c: usize, h: usize, w: usize },
    Idwt2 { x: VarId, c: usize, h2: usize, w2: usize },
    PadHw { x: VarId, c: usize, h: usize, w: usize, new_h: usize, new_w: usize },
    CropHw { x: VarId, c: usize, h: usize, w: usize, new_h: usize, new_w: usize },
    Scan {
        u: VarId,
        dt: VarId,
        bs: VarId,
        cs: VarId,
        a: VarId,
        d_skip: Option<VarId>,
        dims: ScanDims,
        saved: ScanSaved,
    },
    Mae { a: VarId, b: VarId },
}

struct Node {
    value: TensorF,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by one backward pass.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to the given variable, if any path
    /// reached it.
    pub fn get(&self, id: VarId) -> Option<&[f64]> {
        self.by_node[id.0].as_deref()
    }
}

fn take_grad(grads: &mut [Option<Vec<f64>>], id: VarId, numel: usize) -> Vec<f64> {
    grads[id.0].take().unwrap_or_else(|| vec![0.0; numel])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &TensorF {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: TensorF, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node { value, requires_grad, op });
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: TensorF) -> VarId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient (fixed data such as targets).
    pub fn leaf_const(&mut self, value: TensorF) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = TensorF::from_vec(va.shape().to_vec(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = TensorF::from_vec(va.shape().to_vec(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Mul(a, b)))
    }

    /// Multiplies every element of `x` by the scalar variable `s` (shape [1]).
    pub fn scale(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::Shape("scale: scalar operand must have 1 element".into()));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|v| sv * v).collect();
        let value = TensorF::from_vec(vx.shape().to_vec(), data)?;
        let rq = self.requires(x) || self.requires(s);
        Ok(self.push(value, rq, Op::Scale { x, s }))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let rq = self.requires(x);
        self.push(TensorF::scalar(total), rq, Op::Sum(x))
    }

    /// Flat slice [start, start+numel(shape)) of `x`, viewed as `shape`.
    pub fn narrow(&mut self, x: VarId, start: usize, shape: Vec<usize>) -> Result<VarId> {
        let n: usize = shape.iter().product();
        let vx = &self.nodes[x.0].value;
        if start + n > vx.numel() {
            return Err(Error::Shape(format!(
                "narrow: [{start}, {}) out of {} elements",
                start + n,
                vx.numel()
            )));
        }
        let data = vx.data()[start..start + n].to_vec();
        let value = TensorF::from_vec(shape, data)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Narrow { x, start }))
    }

    /// Gather permutation: out[j] = x[perm[j]]. `perm` must index into `x`
    /// and have exactly numel(out_shape) entries.
    pub fn permute(&mut self, x: VarId, perm: Rc<Vec<u32>>, out_shape: Vec<usize>) -> Result<VarId> {
        let n: usize = out_shape.iter().product();
        if n != perm.len() {
            return Err(Error::Shape("permute: table length != output size".into()));
        }
        let vx = self.nodes[x.0].value.data();
        let data: Vec<f64> = perm.iter().map(|&i| vx[i as usize]).collect();
        let value = TensorF::from_vec(out_shape, data)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Permute { x, perm }))
    }

    /// Concatenation along the first axis; trailing extents must match.
    pub fn concat_first(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat: empty input list".into()));
        }
        let tail = self.nodes[xs[0].0].value.shape()[1..].to_vec();
        let mut first = 0;
        let mut data = Vec::new();
        let mut rq = false;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat: trailing shape {:?} vs {:?}",
                    &v.shape()[1..],
                    tail
                )));
            }
            first += v.shape()[0];
            data.extend_from_slice(v.data());
            rq |= self.requires(x);
        }
        let mut shape = vec![first];
        shape.extend_from_slice(&tail);
        let value = TensorF::from_vec(shape, data)?;
        Ok(self.push(value, rq, Op::ConcatFirst { xs: xs.to_vec() }))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let vx = &self.nodes[x.0].value;
        let value = vx.clone().reshaped(shape)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Reshape(x)))
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = TensorF::from_vec(vx.shape().to_vec(), data).expect("same shape");
        let rq = self.requires(x);
        self.push(value, rq, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let vx = &self.nodes[x.0].value;
        let data: Vec<f64> = vx.data().iter().map(|&v| softplus(v)).collect();
        let value = TensorF::from_vec(vx.shape().to_vec(), data).expect("same shape");
        let rq = self.requires(x);
        self.push(value, rq, Op::Softplus(x))
    }

    /// x (T, Din) * w (Dout, Din)^T + b (Dout) -> (T, Dout).
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(Error::Shape(format!(
                "linear: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (t, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; t * dout];
        kernels::linear_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            t, din, dout, &mut out,
        );
        let value = TensorF::from_vec(vec![t, dout], out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::Linear { x, w, b, t, din, dout }))
    }

    /// x (Ci, H, W) with w (Co, Ci), b (Co) -> (Co, H, W).
    pub fn pointwise(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(Error::Shape(format!(
                "pointwise: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        let p = h * wd;
        let mut out = vec![0.0; co * p];
        kernels::pointwise_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            ci, co, p, &mut out,
        );
        let value = TensorF::from_vec(vec![co, h, wd], out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::Pointwise { x, w, b, ci, co, p }))
    }

    pub fn conv3x3(&mut self, x: VarId, w: VarId, b: VarId, stride: usize) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 || sb != [sw[0]] {
            return Err(Error::Shape(format!("conv3x3: x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv3x3: unsupported stride {stride}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        let (ho, wo) = (kernels::conv_out_extent(h, stride), kernels::conv_out_extent(wd, stride));
        let mut out = vec![0.0; co * ho * wo];
        kernels::conv3x3_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            ci, co, h, wd, stride, &mut out,
        );
        let value = TensorF::from_vec(vec![co, ho, wo], out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::Conv3x3 { x, w, b, ci, co, h, wd, stride }))
    }

    /// Stride-2 transposed conv, exact 2x upsampling.
    pub fn tconv3x3(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 || sb != [sw[0]] {
            return Err(Error::Shape(format!("tconv3x3: x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        let mut out = vec![0.0; co * 4 * h * wd];
        kernels::tconv3x3_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            ci, co, h, wd, &mut out,
        );
        let value = TensorF::from_vec(vec![co, 2 * h, 2 * wd], out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::TConv3x3 { x, w, b, ci, co, h, wd }))
    }

    pub fn dwconv3x3(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw != [sx[0], 3, 3] || sb != [sx[0]] {
            return Err(Error::Shape(format!("dwconv3x3: x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; c * h * wd];
        kernels::dwconv3x3_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            c, h, wd, &mut out,
        );
        let value = TensorF::from_vec(vec![c, h, wd], out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::DwConv3x3 { x, w, b, c, h, wd }))
    }

    /// Causal width-3 depthwise conv along each length-`len` sequence of a
    /// batched (batch*len, D) tensor.
    pub fn dwconv1d_causal(&mut self, x: VarId, w: VarId, b: VarId, batch: usize, len: usize) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sx[0] != batch * len || sw != [sx[1], 3] || sb != [sx[1]] {
            return Err(Error::Shape(format!(
                "dwconv1d: x {sx:?} (batch {batch} len {len}), w {sw:?}, b {sb:?}"
            )));
        }
        let d = sx[1];
        let mut out = vec![0.0; sx[0] * d];
        kernels::dwconv1d_causal_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            batch, len, d, &mut out,
        );
        let value = TensorF::from_vec(sx.to_vec(), out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::DwConv1d { x, w, b, batch, len, d }))
    }

    /// Layer norm across channels of (C, H, W), one mean/variance per pixel.
    pub fn layer_norm_chw(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 3 || sg != [sx[0]] || sb != [sx[0]] {
            return Err(Error::Shape(format!(
                "layer_norm: x {sx:?}, gamma {sg:?}, beta {sb:?}"
            )));
        }
        let (c, p) = (sx[0], sx[1] * sx[2]);
        let mut out = vec![0.0; c * p];
        let saved = kernels::layer_norm_chw_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            c, p, &mut out,
        );
        let value = TensorF::from_vec(sx.to_vec(), out)?;
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(value, rq, Op::LayerNormChw { x, gamma, beta, c, p, saved }))
    }

    /// (C, H, W) -> (4C, H/2, W/2) Haar sub-bands stacked [LL; LH; HL; HH].
    pub fn dwt2(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] % 2 != 0 || sx[2] % 2 != 0 {
            return Err(Error::Shape(format!(
                "dwt2 requires even H and W, got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; c * h * w];
        kernels::dwt2_fwd(self.nodes[x.0].value.data(), c, h, w, &mut out);
        let value = TensorF::from_vec(vec![4 * c, h / 2, w / 2], out)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Dwt2 { x, c, h, w }))
    }

    /// (4C, H2, W2) stacked sub-bands -> (C, 2*H2, 2*W2).
    pub fn idwt2(&mut self, x: VarId) -> Result<VarId> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] % 4 != 0 {
            return Err(Error::Shape(format!(
                "idwt2 requires 4C stacked sub-bands, got {sx:?}"
            )));
        }
        let (c, h2, w2) = (sx[0] / 4, sx[1], sx[2]);
        let mut out = vec![0.0; 4 * c * h2 * w2];
        kernels::idwt2_fwd(self.nodes[x.0].value.data(), c, h2, w2, &mut out);
        let value = TensorF::from_vec(vec![c, 2 * h2, 2 * w2], out)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Idwt2 { x, c, h2, w2 }))
    }

    /// Zero-pads (C, H, W) at the bottom/right to (C, new_h, new_w).
    pub fn pad_hw(&mut self, x: VarId, new_h: usize, new_w: usize) -> Result<VarId> {
        let sx = self.shape(x);
        if sx.len() != 3 || new_h < sx[1] || new_w < sx[2] {
            return Err(Error::Shape(format!(
                "pad_hw: {sx:?} -> ({new_h}, {new_w})"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; c * new_h * new_w];
        let data = self.nodes[x.0].value.data();
        for ch in 0..c {
            for y in 0..h {
                let src = ch * h * w + y * w;
                let dst = ch * new_h * new_w + y * new_w;
                out[dst..dst + w].copy_from_slice(&data[src..src + w]);
            }
        }
        let value = TensorF::from_vec(vec![c, new_h, new_w], out)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::PadHw { x, c, h, w, new_h, new_w }))
    }

    /// Keeps the top-left (new_h, new_w) window of (C, H, W).
    pub fn crop_hw(&mut self, x: VarId, new_h: usize, new_w: usize) -> Result<VarId> {
        let sx = self.shape(x);
        if sx.len() != 3 || new_h > sx[1] || new_w > sx[2] {
            return Err(Error::Shape(format!(
                "crop_hw: {sx:?} -> ({new_h}, {new_w})"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; c * new_h * new_w];
        let data = self.nodes[x.0].value.data();
        for ch in 0..c {
            for y in 0..new_h {
                let src = ch * h * w + y * w;
                let dst = ch * new_h * new_w + y * new_w;
                out[dst..dst + new_w].copy_from_slice(&data[src..src + new_w]);
            }
        }
        let value = TensorF::from_vec(vec![c, new_h, new_w], out)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::CropHw { x, c, h, w, new_h, new_w }))
    }

    /// Fused selective scan over `batch` sequences of length `len`:
    /// u, dt (batch*len, D); bs, cs (batch*len, N); a (D, N);
    /// optional skip coefficients d_skip (D).
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        u: VarId,
        dt: VarId,
        bs: VarId,
        cs: VarId,
        a: VarId,
        d_skip: Option<VarId>,
        batch: usize,
        len: usize,
    ) -> Result<VarId> {
        let (su, sdt, sbs, scs, sa) = (
            self.shape(u), self.shape(dt), self.shape(bs), self.shape(cs), self.shape(a),
        );
        let rows = batch * len;
        if su.len() != 2 || su[0] != rows {
            return Err(Error::Shape(format!(
                "scan: u {su:?} does not match batch {batch} x len {len}"
            )));
        }
        let dim = su[1];
        if sdt != [rows, dim] || sa.len() != 2 || sa[0] != dim {
            return Err(Error::Shape(format!("scan: dt {sdt:?} / a {sa:?} vs u {su:?}")));
        }
        let state = sa[1];
        if sbs != [rows, state] || scs != [rows, state] {
            return Err(Error::Shape(format!(
                "scan: bs {sbs:?} / cs {scs:?}, expected ({rows}, {state})"
            )));
        }
        if let Some(ds) = d_skip {
            if self.shape(ds) != [dim] {
                return Err(Error::Shape(format!(
                    "scan: d_skip {:?}, expected ({dim})",
                    self.shape(ds)
                )));
            }
        }
        // Delta must be finite; the error names the offending timestep.
        if let Some(i) = self.nodes[dt.0].value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "scan time-scale".into(), index: Some(i / dim) });
        }
        let dims = ScanDims { batch, len, dim, state };
        let mut out = vec![0.0; rows * dim];
        let saved = kernels::scan_fwd(
            self.nodes[u.0].value.data(),
            self.nodes[dt.0].value.data(),
            self.nodes[bs.0].value.data(),
            self.nodes[cs.0].value.data(),
            self.nodes[a.0].value.data(),
            d_skip.map(|ds| self.nodes[ds.0].value.data()),
            dims,
            &mut out,
        );
        let value = TensorF::from_vec(vec![rows, dim], out)?;
        let mut rq = self.requires(u)
            || self.requires(dt)
            || self.requires(bs)
            || self.requires(cs)
            || self.requires(a);
        if let Some(ds) = d_skip {
            rq |= self.requires(ds);
        }
        Ok(self.push(value, rq, Op::Scan { u, dt, bs, cs, a, d_skip, dims, saved }))
    }

    /// Mean absolute error between two same-shape tensors, scalar output.
    pub fn mae(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mae: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = va.numel() as f64;
        let total: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(TensorF::scalar(total / n), rq, Op::Mae { a, b }))
    }

    /// Reverse pass from a scalar loss variable. Returns per-node gradients.
    pub fn backward(&self, loss: VarId) -> Result<Grads> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape("backward: loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.push_back(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn numel(&self, id: VarId) -> usize {
        self.nodes[id.0].value.numel()
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], id: VarId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let mut buf = take_grad(grads, id, self.numel(id));
        contrib(&mut buf);
        grads[id.0] = Some(buf);
    }

    fn push_back(&self, idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                self.add_into(grads, *b, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.add_into(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * vb[i];
                    }
                });
                self.add_into(grads, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale { x, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                let vx = self.nodes[x.0].value.data();
                self.add_into(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += sv * g[i];
                    }
                });
                self.add_into(grads, *s, |buf| {
                    buf[0] += vx.iter().zip(g).map(|(x, gv)| x * gv).sum::<f64>();
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.add_into(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Narrow { x, start } => {
                self.add_into(grads, *x, |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        buf[start + i] += gv;
                    }
                });
            }
            Op::Permute { x, perm } => {
                self.add_into(grads, *x, |buf| {
                    for (j, &src) in perm.iter().enumerate() {
                        buf[src as usize] += g[j];
                    }
                });
            }
            Op::ConcatFirst { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.numel(x);
                    let seg = &g[offset..offset + n];
                    self.add_into(grads, x, |buf| {
                        for (o, gv) in buf.iter_mut().zip(seg) {
                            *o += gv;
                        }
                    });
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.add_into(grads, *x, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Op::Silu(x) => {
                let vx = self.nodes[x.0].value.data();
                self.add_into(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        let s = sigmoid(vx[i]);
                        buf[i] += g[i] * s * (1.0 + vx[i] * (1.0 - s));
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = self.nodes[x.0].value.data();
                self.add_into(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * sigmoid(vx[i]);
                    }
                });
            }
            Op::Linear { x, w, b, t, din, dout } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let mut gx = take_grad(grads, *x, t * din);
                let mut gw = take_grad(grads, *w, dout * din);
                let mut gb = take_grad(grads, *b, *dout);
                kernels::linear_bwd(xv, wv, *t, *din, *dout, g, &mut gx, &mut gw, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::Pointwise { x, w, b, ci, co, p } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let mut gx = take_grad(grads, *x, ci * p);
                let mut gw = take_grad(grads, *w, co * ci);
                let mut gb = take_grad(grads, *b, *co);
                kernels::pointwise_bwd(xv, wv, *ci, *co, *p, g, &mut gx, &mut gw, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::Conv3x3 { x, w, b, ci, co, h, wd, stride } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let mut gx = take_grad(grads, *x, ci * h * wd);
                let mut gw = take_grad(grads, *w, co * ci * 9);
                let mut gb = take_grad(grads, *b, *co);
                kernels::conv3x3_bwd(xv, wv, *ci, *co, *h, *wd, *stride, g, &mut gx, &mut gw, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::TConv3x3 { x, w, b, ci, co, h, wd } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let mut gx = take_grad(grads, *x, ci * h * wd);
                let mut gw = take_grad(grads, *w, co * ci * 9);
                let mut gb = take_grad(grads, *b, *co);
                kernels::tconv3x3_bwd(xv, wv, *ci, *co, *h, *wd, g, &mut gx, &mut gw, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::DwConv3x3 { x, w, b, c, h, wd } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let mut gx = take_grad(grads, *x, c * h * wd);
                let mut gw = take_grad(grads, *w, c * 9);
                let mut gb = take_grad(grads, *b, *c);
                kernels::dwconv3x3_bwd(xv, wv, *c, *h, *wd, g, &mut gx, &mut gw, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::DwConv1d { x, w, b, batch, len, d } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                let mut gx = take_grad(grads, *x, batch * len * d);
                let mut gw = take_grad(grads, *w, d * 3);
                let mut gb = take_grad(grads, *b, *d);
                kernels::dwconv1d_causal_bwd(xv, wv, *batch, *len, *d, g, &mut gx, &mut gw, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *w, gw);
                self.restore(grads, *b, gb);
            }
            Op::LayerNormChw { x, gamma, beta, c, p, saved } => {
                let (xv, gv) = (self.nodes[x.0].value.data(), self.nodes[gamma.0].value.data());
                let mut gx = take_grad(grads, *x, c * p);
                let mut gg = take_grad(grads, *gamma, *c);
                let mut gb = take_grad(grads, *beta, *c);
                kernels::layer_norm_chw_bwd(xv, gv, saved, *c, *p, g, &mut gx, &mut gg, &mut gb);
                self.restore(grads, *x, gx);
                self.restore(grads, *gamma, gg);
                self.restore(grads, *beta, gb);
            }
            // The Haar analysis operator is orthogonal: its adjoint is its
            // inverse, so gradients flow through the opposite transform.
            Op::Dwt2 { x, c, h, w } => {
                let mut gx = take_grad(grads, *x, c * h * w);
                let mut tmp = vec![0.0; c * h * w];
                kernels::idwt2_fwd(g, *c, h / 2, w / 2, &mut tmp);
                for (o, t) in gx.iter_mut().zip(&tmp) {
                    *o += t;
                }
                self.restore(grads, *x, gx);
            }
            Op::Idwt2 { x, c, h2, w2 } => {
                let n = 4 * c * h2 * w2;
                let mut gx = take_grad(grads, *x, n);
                let mut tmp = vec![0.0; n];
                kernels::dwt2_fwd(g, *c, 2 * h2, 2 * w2, &mut tmp);
                for (o, t) in gx.iter_mut().zip(&tmp) {
                    *o += t;
                }
                self.restore(grads, *x, gx);
            }
            Op::PadHw { x, c, h, w, new_h, new_w } => {
                let _ = new_h;
                self.add_into(grads, *x, |buf| {
                    for ch in 0..*c {
                        for y in 0..*h {
                            let src = ch * new_h * new_w + y * new_w;
                            let dst = ch * h * w + y * w;
                            for xx in 0..*w {
                                buf[dst + xx] += g[src + xx];
                            }
                        }
                    }
                });
            }
            Op::CropHw { x, c, h, w, new_h, new_w } => {
                self.add_into(grads, *x, |buf| {
                    for ch in 0..*c {
                        for y in 0..*new_h {
                            let src = ch * new_h * new_w + y * new_w;
                            let dst = ch * h * w + y * w;
                            for xx in 0..*new_w {
                                buf[dst + xx] += g[src + xx];
                            }
                        }
                    }
                });
            }
            Op::Scan { u, dt, bs, cs, a, d_skip, dims, saved } => {
                let rows = dims.rows();
                let (dim, state) = (dims.dim, dims.state);
                let mut gu = take_grad(grads, *u, rows * dim);
                let mut gdt = take_grad(grads, *dt, rows * dim);
                let mut gbs = take_grad(grads, *bs, rows * state);
                let mut gcs = take_grad(grads, *cs, rows * state);
                let mut ga = take_grad(grads, *a, dim * state);
                let mut gds = d_skip.map(|ds| take_grad(grads, ds, self.numel(ds)));
                kernels::scan_bwd(
                    self.nodes[u.0].value.data(),
                    self.nodes[dt.0].value.data(),
                    self.nodes[bs.0].value.data(),
                    self.nodes[cs.0].value.data(),
                    self.nodes[a.0].value.data(),
                    d_skip.map(|ds| self.nodes[ds.0].value.data()),
                    *dims,
                    saved,
                    g,
                    &mut gu,
                    &mut gdt,
                    &mut gbs,
                    &mut gcs,
                    &mut ga,
                    gds.as_deref_mut(),
                );
                self.restore(grads, *u, gu);
                self.restore(grads, *dt, gdt);
                self.restore(grads, *bs, gbs);
                self.restore(grads, *cs, gcs);
                self.restore(grads, *a, ga);
                if let (Some(ds), Some(buf)) = (*d_skip, gds) {
                    self.restore(grads, ds, buf);
                }
            }
            Op::Mae { a, b } => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let scale = g[0] / va.len() as f64;
                self.add_into(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += scale * (va[i] - vb[i]).signum();
                    }
                });
                self.add_into(grads, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= scale * (va[i] - vb[i]).signum();
                    }
                });
            }
        }
    }

    fn restore(&self, grads: &mut [Option<Vec<f64>>], id: VarId, buf: Vec<f64>) {
        if self.nodes[id.0].requires_grad {
            grads[id.0] = Some(buf);
        }
    }
}
