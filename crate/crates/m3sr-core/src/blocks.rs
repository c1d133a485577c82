//! Network building blocks: the VSS block, the Mamba block, the spatial /
//! frequency / spectral perceptual branches, and the adaptive-fusion block
//! that combines them with learned scalar weights plus a residual.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fastmath::softplus_inv;
use crate::params::{Ctx, ParamId, ParamSet};
use crate::scan2d::{flatten_perm, unflatten_perm, DIRECTIONS};
use crate::tape::{Tape, VarId};
use crate::tensor::{FeatureMap, TensorF};

/// Which perceptual branches an MPF block instantiates. Disabled branches
/// have no parameters at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSet {
    pub spatial: bool,
    pub frequency: bool,
    pub spectral: bool,
}

impl BranchSet {
    pub const ALL: BranchSet = BranchSet { spatial: true, frequency: true, spectral: true };
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        LinearIds {
            w: ps.alloc_fan_in(format!("{prefix}.w"), vec![dout, din], din, rng),
            b: ps.alloc(format!("{prefix}.b"), TensorF::zeros(vec![dout])),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    fn init(ps: &mut ParamSet, prefix: &str, c: usize) -> Self {
        LayerNormIds {
            gamma: ps.alloc(format!("{prefix}.gamma"), TensorF::full(vec![c], 1.0)),
            beta: ps.alloc(format!("{prefix}.beta"), TensorF::zeros(vec![c])),
        }
    }
}

/// Selective-scan parameter handles (see `ssm::SelectiveParams` for the
/// semantics and initialization).
#[derive(Debug, Clone, Copy)]
pub struct SelectiveIds {
    pub a: ParamId,
    pub w_b: ParamId,
    pub b_b: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub w_dt: ParamId,
    pub b_dt: ParamId,
    pub d_skip: ParamId,
}

impl SelectiveIds {
    fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, dim: usize, state: usize, rng: &mut R) -> Self {
        let a_data: Vec<f64> = (0..dim * state).map(|k| -(((k % state) + 1) as f64)).collect();
        let a = ps.alloc(format!("{prefix}.a"), TensorF::from_vec(vec![dim, state], a_data).unwrap());
        let w_b = ps.alloc_fan_in(format!("{prefix}.w_b"), vec![state, dim], dim, rng);
        let b_b = ps.alloc(format!("{prefix}.b_b"), TensorF::zeros(vec![state]));
        let w_c = ps.alloc_fan_in(format!("{prefix}.w_c"), vec![state, dim], dim, rng);
        let b_c = ps.alloc(format!("{prefix}.b_c"), TensorF::zeros(vec![state]));
        let w_dt = ps.alloc_fan_in(format!("{prefix}.w_dt"), vec![dim, dim], dim, rng);
        let b_dt_data: Vec<f64> =
            (0..dim).map(|_| softplus_inv(rng.gen_range(1e-3..1e-1))).collect();
        let b_dt =
            ps.alloc(format!("{prefix}.b_dt"), TensorF::from_vec(vec![dim], b_dt_data).unwrap());
        let d_skip = ps.alloc(format!("{prefix}.d_skip"), TensorF::full(vec![dim], 1.0));
        SelectiveIds { a, w_b, b_b, w_c, b_c, w_dt, b_dt, d_skip }
    }
}

/// VSS block: out = Lin(LN(SS2D(SiLU(DWConv(Lin(x)))))), channels
/// preserved.
#[derive(Debug, Clone)]
pub struct VssIds {
    pub lin1: LinearIds,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ss2d: [SelectiveIds; 4],
    pub ln: LayerNormIds,
    pub lin2: LinearIds,
    pub channels: usize,
}

impl VssIds {
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, c: usize, state: usize, rng: &mut R) -> Self {
        let lin1 = LinearIds::init(ps, &format!("{prefix}.lin1"), c, c, rng);
        let dw_w = ps.alloc_fan_in(format!("{prefix}.dw.w"), vec![c, 3, 3], 9, rng);
        let dw_b = ps.alloc(format!("{prefix}.dw.b"), TensorF::zeros(vec![c]));
        let ss2d = [
            SelectiveIds::init(ps, &format!("{prefix}.ss2d.dir0"), c, state, rng),
            SelectiveIds::init(ps, &format!("{prefix}.ss2d.dir1"), c, state, rng),
            SelectiveIds::init(ps, &format!("{prefix}.ss2d.dir2"), c, state, rng),
            SelectiveIds::init(ps, &format!("{prefix}.ss2d.dir3"), c, state, rng),
        ];
        let ln = LayerNormIds::init(ps, &format!("{prefix}.ln"), c);
        let lin2 = LinearIds::init(ps, &format!("{prefix}.lin2"), c, c, rng);
        VssIds { lin1, dw_w, dw_b, ss2d, ln, lin2, channels: c }
    }
}

/// Spatial branch: merge(Concat(VSS(LN(x)), x)) with a 2C -> C pointwise
/// projection after the concatenation.
#[derive(Debug, Clone)]
pub struct SpatialBranchIds {
    pub ln: LayerNormIds,
    pub vss: VssIds,
    pub merge: LinearIds,
}

impl SpatialBranchIds {
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, c: usize, state: usize, rng: &mut R) -> Self {
        SpatialBranchIds {
            ln: LayerNormIds::init(ps, &format!("{prefix}.ln"), c),
            vss: VssIds::init(ps, &format!("{prefix}.vss"), c, state, rng),
            merge: LinearIds::init(ps, &format!("{prefix}.merge"), 2 * c, c, rng),
        }
    }
}

/// Frequency branch: Haar decomposition, one shared VSS-with-LN plus
/// 2C -> C merge applied to each sub-band, exact reconstruction.
#[derive(Debug, Clone)]
pub struct FreqBranchIds {
    pub ln: LayerNormIds,
    pub vss: VssIds,
    pub merge: LinearIds,
}

impl FreqBranchIds {
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, c: usize, state: usize, rng: &mut R) -> Self {
        FreqBranchIds {
            ln: LayerNormIds::init(ps, &format!("{prefix}.ln"), c),
            vss: VssIds::init(ps, &format!("{prefix}.vss"), c, state, rng),
            merge: LinearIds::init(ps, &format!("{prefix}.merge"), 2 * c, c, rng),
        }
    }
}

/// Mamba block over (L, D) sequences: Lin(SiLU(Lin(x)) + S6(SiLU(DWConv1d(Lin(x))))).
#[derive(Debug, Clone)]
pub struct MambaIds {
    pub gate: LinearIds,
    pub inp: LinearIds,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub s6: SelectiveIds,
    pub out: LinearIds,
    pub d_model: usize,
    pub d_inner: usize,
}

impl MambaIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        expand: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let d_inner = d_model * expand;
        MambaIds {
            gate: LinearIds::init(ps, &format!("{prefix}.gate"), d_model, d_inner, rng),
            inp: LinearIds::init(ps, &format!("{prefix}.in"), d_model, d_inner, rng),
            dw_w: ps.alloc_fan_in(format!("{prefix}.dw.w"), vec![d_inner, 3], 3, rng),
            dw_b: ps.alloc(format!("{prefix}.dw.b"), TensorF::zeros(vec![d_inner])),
            s6: SelectiveIds::init(ps, &format!("{prefix}.s6"), d_inner, state, rng),
            out: LinearIds::init(ps, &format!("{prefix}.out"), d_inner, d_model, rng),
            d_model,
            d_inner,
        }
    }
}

/// Spectral branch: pointwise expansion C -> C·G, per-pixel grouping into G
/// spectral sequences of length C (feature width 1), one shared Mamba block
/// over all groups, and a pointwise C·G -> C restoration.
#[derive(Debug, Clone)]
pub struct SpectralBranchIds {
    pub expand: LinearIds,
    pub mamba: MambaIds,
    pub restore: LinearIds,
    pub groups: usize,
}

impl SpectralBranchIds {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        c: usize,
        groups: usize,
        expand: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        SpectralBranchIds {
            expand: LinearIds::init(ps, &format!("{prefix}.expand"), c, c * groups, rng),
            mamba: MambaIds::init(ps, &format!("{prefix}.mamba"), 1, expand, state, rng),
            restore: LinearIds::init(ps, &format!("{prefix}.restore"), c * groups, c, rng),
            groups,
        }
    }
}

/// Learned fusion scalars, present only for enabled branches.
#[derive(Debug, Clone)]
pub struct FusionIds {
    pub spatial: Option<ParamId>,
    pub frequency: Option<ParamId>,
    pub spectral: Option<ParamId>,
}

/// All parameters of one multi-perceptual fusion block.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub spatial: Option<SpatialBranchIds>,
    pub frequency: Option<FreqBranchIds>,
    pub spectral: Option<SpectralBranchIds>,
    pub fusion: FusionIds,
    pub channels: usize,
}

impl BlockIds {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        c: usize,
        state: usize,
        groups: usize,
        expand: usize,
        branches: BranchSet,
        rng: &mut R,
    ) -> Self {
        let spatial = branches
            .spatial
            .then(|| SpatialBranchIds::init(ps, &format!("{prefix}.spatial"), c, state, rng));
        let frequency = branches
            .frequency
            .then(|| FreqBranchIds::init(ps, &format!("{prefix}.frequency"), c, state, rng));
        let spectral = branches.spectral.then(|| {
            SpectralBranchIds::init(ps, &format!("{prefix}.spectral"), c, groups, expand, state, rng)
        });
        // Fusion weights are randomly initialized in [0, 1) and trained.
        let mut omega = |name: &str, enabled: bool, rng: &mut R| {
            enabled.then(|| {
                ps.alloc(format!("{prefix}.fusion.{name}"), TensorF::scalar(rng.gen_range(0.0..1.0)))
            })
        };
        let fusion = FusionIds {
            spatial: omega("spatial", branches.spatial, rng),
            frequency: omega("frequency", branches.frequency, rng),
            spectral: omega("spectral", branches.spectral, rng),
        };
        BlockIds { spatial, frequency, spectral, fusion, channels: c }
    }
}

// ---------------------------------------------------------------------------
// Forward builders on a tape context.
// ---------------------------------------------------------------------------

/// Selective scan over `batch` sequences of length `len` laid out as
/// (batch*len, D): projects dt/B/C from the tokens and runs the fused scan.
pub fn s6_tape(ctx: &mut Ctx, x: VarId, p: &SelectiveIds, batch: usize, len: usize) -> Result<VarId> {
    let (w_dt, b_dt) = (ctx.p(p.w_dt), ctx.p(p.b_dt));
    let (w_b, b_b) = (ctx.p(p.w_b), ctx.p(p.b_b));
    let (w_c, b_c) = (ctx.p(p.w_c), ctx.p(p.b_c));
    let (a, d_skip) = (ctx.p(p.a), ctx.p(p.d_skip));
    let dt_raw = ctx.tape.linear(x, w_dt, b_dt)?;
    let dt = ctx.tape.softplus(dt_raw);
    let bs = ctx.tape.linear(x, w_b, b_b)?;
    let cs = ctx.tape.linear(x, w_c, b_c)?;
    ctx.tape.scan(x, dt, bs, cs, a, Some(d_skip), batch, len)
}

/// Four directional scans of a (C, H, W) map, summed in direction order.
pub fn ss2d_tape(ctx: &mut Ctx, x: VarId, dirs: &[SelectiveIds; 4]) -> Result<VarId> {
    let shape = ctx.tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let l = h * w;
    let mut acc: Option<VarId> = None;
    for (dir, sp) in DIRECTIONS.iter().zip(dirs) {
        let fwd = flatten_perm(c, h, w, *dir);
        let seq = ctx.tape.permute(x, fwd, vec![l, c])?;
        let scanned = s6_tape(ctx, seq, sp, 1, l)?;
        let back_perm = unflatten_perm(c, h, w, *dir);
        let back = ctx.tape.permute(scanned, back_perm, vec![c, h, w])?;
        acc = Some(match acc {
            None => back,
            Some(prev) => ctx.tape.add(prev, back)?,
        });
    }
    Ok(acc.expect("four directions"))
}

pub fn vss_tape(ctx: &mut Ctx, x: VarId, p: &VssIds) -> Result<VarId> {
    let (w1, b1) = (ctx.p(p.lin1.w), ctx.p(p.lin1.b));
    let lin1 = ctx.tape.pointwise(x, w1, b1)?;
    let (dw, db) = (ctx.p(p.dw_w), ctx.p(p.dw_b));
    let conv = ctx.tape.dwconv3x3(lin1, dw, db)?;
    let act = ctx.tape.silu(conv);
    let scanned = ss2d_tape(ctx, act, &p.ss2d)?;
    let (g, be) = (ctx.p(p.ln.gamma), ctx.p(p.ln.beta));
    let normed = ctx.tape.layer_norm_chw(scanned, g, be)?;
    let (w2, b2) = (ctx.p(p.lin2.w), ctx.p(p.lin2.b));
    ctx.tape.pointwise(normed, w2, b2)
}

pub fn spatial_branch_tape(ctx: &mut Ctx, x: VarId, p: &SpatialBranchIds) -> Result<VarId> {
    let (g, b) = (ctx.p(p.ln.gamma), ctx.p(p.ln.beta));
    let normed = ctx.tape.layer_norm_chw(x, g, b)?;
    let vss = vss_tape(ctx, normed, &p.vss)?;
    let cat = ctx.tape.concat_first(&[vss, x])?;
    let (mw, mb) = (ctx.p(p.merge.w), ctx.p(p.merge.b));
    ctx.tape.pointwise(cat, mw, mb)
}

pub fn frequency_branch_tape(ctx: &mut Ctx, x: VarId, p: &FreqBranchIds) -> Result<VarId> {
    let shape = ctx.tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    // The decomposition needs even extents; odd maps are zero-padded by one
    // row/column and cropped back after reconstruction.
    let (ph, pw) = (h + h % 2, w + w % 2);
    let padded = if (ph, pw) != (h, w) { ctx.tape.pad_hw(x, ph, pw)? } else { x };
    let stacked = ctx.tape.dwt2(padded)?;
    let plane = (ph / 2) * (pw / 2);
    let mut processed = Vec::with_capacity(4);
    for band in 0..4 {
        let sb = ctx.tape.narrow(stacked, band * c * plane, vec![c, ph / 2, pw / 2])?;
        let (g, b) = (ctx.p(p.ln.gamma), ctx.p(p.ln.beta));
        let normed = ctx.tape.layer_norm_chw(sb, g, b)?;
        let vss = vss_tape(ctx, normed, &p.vss)?;
        let cat = ctx.tape.concat_first(&[vss, sb])?;
        let (mw, mb) = (ctx.p(p.merge.w), ctx.p(p.merge.b));
        processed.push(ctx.tape.pointwise(cat, mw, mb)?);
    }
    let restacked = ctx.tape.concat_first(&processed)?;
    let recon = ctx.tape.idwt2(restacked)?;
    if (ph, pw) != (h, w) {
        ctx.tape.crop_hw(recon, h, w)
    } else {
        Ok(recon)
    }
}

/// Mamba block over `batch` sequences of length `len`, model width
/// `p.d_model`.
pub fn mamba_tape(ctx: &mut Ctx, x: VarId, p: &MambaIds, batch: usize, len: usize) -> Result<VarId> {
    let (gw, gb) = (ctx.p(p.gate.w), ctx.p(p.gate.b));
    let gate_lin = ctx.tape.linear(x, gw, gb)?;
    let gate = ctx.tape.silu(gate_lin);
    let (iw, ib) = (ctx.p(p.inp.w), ctx.p(p.inp.b));
    let inp = ctx.tape.linear(x, iw, ib)?;
    let (dw, db) = (ctx.p(p.dw_w), ctx.p(p.dw_b));
    let conv = ctx.tape.dwconv1d_causal(inp, dw, db, batch, len)?;
    let act = ctx.tape.silu(conv);
    let scanned = s6_tape(ctx, act, &p.s6, batch, len)?;
    let summed = ctx.tape.add(gate, scanned)?;
    let (ow, ob) = (ctx.p(p.out.w), ctx.p(p.out.b));
    ctx.tape.linear(summed, ow, ob)
}

/// Gather table taking the expanded (C·G, H, W) map to per-pixel spectral
/// sequences: row (p·G + g) holds the length-C sequence of group g at pixel
/// p, feature width 1. Group g owns the contiguous channel block [g·C, (g+1)·C).
fn spectral_seq_perm(c: usize, groups: usize, plane: usize) -> Rc<Vec<u32>> {
    let mut perm = Vec::with_capacity(c * groups * plane);
    for p in 0..plane {
        for g in 0..groups {
            for ch in 0..c {
                perm.push(((g * c + ch) * plane + p) as u32);
            }
        }
    }
    Rc::new(perm)
}

fn spectral_seq_perm_inv(c: usize, groups: usize, plane: usize) -> Rc<Vec<u32>> {
    let mut perm = vec![0u32; c * groups * plane];
    for p in 0..plane {
        for g in 0..groups {
            for ch in 0..c {
                perm[(g * c + ch) * plane + p] = ((p * groups + g) * c + ch) as u32;
            }
        }
    }
    Rc::new(perm)
}

pub fn spectral_branch_tape(ctx: &mut Ctx, x: VarId, p: &SpectralBranchIds) -> Result<VarId> {
    if p.groups < 1 {
        return Err(Error::Config("spectral branch needs at least one group".into()));
    }
    let shape = ctx.tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let (ew, eb) = (ctx.p(p.expand.w), ctx.p(p.expand.b));
    let expanded = ctx.tape.pointwise(x, ew, eb)?;
    let fwd = spectral_seq_perm(c, p.groups, plane);
    let rows = plane * p.groups * c;
    let seq = ctx.tape.permute(expanded, fwd, vec![rows, 1])?;
    let scanned = mamba_tape(ctx, seq, &p.mamba, plane * p.groups, c)?;
    let inv = spectral_seq_perm_inv(c, p.groups, plane);
    let back = ctx.tape.permute(scanned, inv, vec![c * p.groups, h, w])?;
    let (rw, rb) = (ctx.p(p.restore.w), ctx.p(p.restore.b));
    ctx.tape.pointwise(back, rw, rb)
}

/// F_out = ω_a·F²_a + ω_f·F²_f + ω_e·F²_e + F_in over the enabled branches.
pub fn mpf_tape(ctx: &mut Ctx, x: VarId, p: &BlockIds) -> Result<VarId> {
    let mut out = x;
    if let (Some(branch), Some(omega)) = (&p.spatial, p.fusion.spatial) {
        let fa = spatial_branch_tape(ctx, x, branch)?;
        let om = ctx.p(omega);
        let term = ctx.tape.scale(fa, om)?;
        out = ctx.tape.add(out, term)?;
    }
    if let (Some(branch), Some(omega)) = (&p.frequency, p.fusion.frequency) {
        let ff = frequency_branch_tape(ctx, x, branch)?;
        let om = ctx.p(omega);
        let term = ctx.tape.scale(ff, om)?;
        out = ctx.tape.add(out, term)?;
    }
    if let (Some(branch), Some(omega)) = (&p.spectral, p.fusion.spectral) {
        let fe = spectral_branch_tape(ctx, x, branch)?;
        let om = ctx.p(omega);
        let term = ctx.tape.scale(fe, om)?;
        out = ctx.tape.add(out, term)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Functional wrappers: forward one block on its own tape.
// ---------------------------------------------------------------------------

fn run_chw<F>(ps: &ParamSet, x: &FeatureMap, f: F) -> Result<FeatureMap>
where
    F: FnOnce(&mut Ctx, VarId) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.tensor().clone());
    let mut ctx = Ctx::new(&mut tape, ps);
    let y = f(&mut ctx, xid)?;
    FeatureMap::new(tape.value(y).clone())
}

pub fn vss_block(ps: &ParamSet, p: &VssIds, x: &FeatureMap) -> Result<FeatureMap> {
    run_chw(ps, x, |ctx, xid| vss_tape(ctx, xid, p))
}

pub fn spatial_branch(ps: &ParamSet, p: &SpatialBranchIds, x: &FeatureMap) -> Result<FeatureMap> {
    run_chw(ps, x, |ctx, xid| spatial_branch_tape(ctx, xid, p))
}

pub fn frequency_branch(ps: &ParamSet, p: &FreqBranchIds, x: &FeatureMap) -> Result<FeatureMap> {
    run_chw(ps, x, |ctx, xid| frequency_branch_tape(ctx, xid, p))
}

pub fn spectral_branch(ps: &ParamSet, p: &SpectralBranchIds, x: &FeatureMap) -> Result<FeatureMap> {
    run_chw(ps, x, |ctx, xid| spectral_branch_tape(ctx, xid, p))
}

pub fn mpf_block(ps: &ParamSet, p: &BlockIds, x: &FeatureMap) -> Result<FeatureMap> {
    run_chw(ps, x, |ctx, xid| mpf_tape(ctx, xid, p))
}

/// Mamba block on a single (L, D) sequence.
pub fn mamba_block(ps: &ParamSet, p: &MambaIds, x: &TensorF) -> Result<TensorF> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != p.d_model {
        return Err(Error::Shape(format!(
            "mamba block expects (L, {}), got {shape:?}",
            p.d_model
        )));
    }
    let len = shape[0];
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let mut ctx = Ctx::new(&mut tape, ps);
    let y = mamba_tape(&mut ctx, xid, p, 1, len)?;
    Ok(tape.value(y).clone())
}
