//! The three-scale encoder-decoder built from multi-perceptual fusion
//! blocks, its ablation variants, analytic parameter/FLOP accounting, and
//! the checkpoint container format.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{mpf_tape, BlockIds, BranchSet, LinearIds};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamSet};
use crate::tape::{Tape, VarId};
use crate::tensor::{FeatureMap, TensorF};

/// Full architecture hyperparameters. Scale widths are
/// (base_width, 2·base_width, 4·base_width).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub state_dim: usize,
    pub groups: usize,
    pub mamba_expand: usize,
    pub branches: BranchSet,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            out_channels: 31,
            base_width: 16,
            blocks_per_stage: 1,
            state_dim: 8,
            groups: 4,
            mamba_expand: 2,
            branches: BranchSet::ALL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels < 1 {
            return Err(Error::Config("out_channels must be at least 1".into()));
        }
        if self.in_channels < 1 || self.base_width < 1 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.groups < 1 {
            return Err(Error::Config("group count must be at least 1".into()));
        }
        if self.blocks_per_stage < 1 || self.state_dim < 1 || self.mamba_expand < 1 {
            return Err(Error::Config(
                "blocks_per_stage, state_dim and mamba_expand must be at least 1".into(),
            ));
        }
        if !self.branches.spatial && !self.branches.frequency && !self.branches.spectral {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        Ok(())
    }
}

/// Ablation variants: V1 removes the spatial branch, V2 the frequency
/// branch, V3 the spectral branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    V1,
    V2,
    V3,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "V1" | "v1" => Ok(Variant::V1),
            "V2" | "v2" => Ok(Variant::V2),
            "V3" | "v3" => Ok(Variant::V3),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}, expected full, V1, V2 or V3"
            ))),
        }
    }

    pub fn branches(self, base: BranchSet) -> BranchSet {
        match self {
            Variant::Full => base,
            Variant::V1 => BranchSet { spatial: false, ..base },
            Variant::V2 => BranchSet { frequency: false, ..base },
            Variant::V3 => BranchSet { spectral: false, ..base },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

impl ConvIds {
    fn init(
        ps: &mut ParamSet,
        prefix: &str,
        co: usize,
        ci: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvIds {
            w: ps.alloc_fan_in(format!("{prefix}.w"), vec![co, ci, 3, 3], ci * 9, rng),
            b: ps.alloc(format!("{prefix}.b"), TensorF::zeros(vec![co])),
        }
    }
}

struct EncStage {
    blocks: Vec<BlockIds>,
    down: ConvIds,
}

struct DecStage {
    up: ConvIds,
    skip_merge: LinearIds,
    blocks: Vec<BlockIds>,
}

struct Arch {
    embed: ConvIds,
    enc: Vec<EncStage>,
    bottleneck: Vec<BlockIds>,
    dec: Vec<DecStage>,
    head: ConvIds,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    arch: Arch,
}

/// Builds the three-scale model; all weights are drawn deterministically
/// from cfg.seed, and disabled branches allocate no parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    let [c0, c1, c2] = cfg.widths();
    let bps = cfg.blocks_per_stage;

    let block = |ps: &mut ParamSet, prefix: &str, c: usize, rng: &mut ChaCha8Rng| {
        BlockIds::init(ps, prefix, c, cfg.state_dim, cfg.groups, cfg.mamba_expand, cfg.branches, rng)
    };

    let embed = ConvIds::init(&mut ps, "embed", c0, cfg.in_channels, &mut rng);
    let mut enc = Vec::new();
    for (stage, (&ci, &co)) in [c0, c1].iter().zip(&[c1, c2]).enumerate() {
        let blocks = (0..bps)
            .map(|k| block(&mut ps, &format!("enc{stage}.block{k}"), ci, &mut rng))
            .collect();
        let down = ConvIds::init(&mut ps, &format!("enc{stage}.down"), co, ci, &mut rng);
        enc.push(EncStage { blocks, down });
    }
    let bottleneck = (0..bps)
        .map(|k| block(&mut ps, &format!("bottleneck.block{k}"), c2, &mut rng))
        .collect();
    let mut dec = Vec::new();
    for (stage, (&ci, &co)) in [c2, c1].iter().zip(&[c1, c0]).enumerate() {
        let scale = 1 - stage; // dec stage index by target scale (1 then 0)
        let up = ConvIds::init(&mut ps, &format!("dec{scale}.up"), co, ci, &mut rng);
        let skip_merge = {
            let w = ps.alloc_fan_in(
                format!("dec{scale}.skip_merge.w"),
                vec![co, 2 * co],
                2 * co,
                &mut rng,
            );
            let b = ps.alloc(format!("dec{scale}.skip_merge.b"), TensorF::zeros(vec![co]));
            LinearIds { w, b }
        };
        let blocks = (0..bps)
            .map(|k| block(&mut ps, &format!("dec{scale}.block{k}"), co, &mut rng))
            .collect();
        dec.push(DecStage { up, skip_merge, blocks });
    }
    let head = ConvIds::init(&mut ps, "head", cfg.out_channels, c0, &mut rng);

    Ok(Model { cfg: *cfg, params: ps, arch: Arch { embed, enc, bottleneck, dec, head } })
}

/// Builds an ablation variant of the configuration.
pub fn build_variant(cfg: &ModelConfig, v: Variant) -> Result<Model> {
    let mut varied = *cfg;
    varied.branches = v.branches(cfg.branches);
    build_model(&varied)
}

impl Model {
    /// Records the full forward pass on a tape. The input must be
    /// (in_channels, H, W) with H and W divisible by 4 (two downsamplings
    /// plus wavelet evenness at the upper scales).
    pub fn forward_tape(&self, ctx: &mut Ctx, x: VarId) -> Result<VarId> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected ({}, H, W) input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by 4; pad or crop the image first"
            )));
        }
        let (ew, eb) = (ctx.p(self.arch.embed.w), ctx.p(self.arch.embed.b));
        let mut cur = ctx.tape.conv3x3(x, ew, eb, 1)?;
        let mut skips = Vec::new();
        for stage in &self.arch.enc {
            for b in &stage.blocks {
                cur = mpf_tape(ctx, cur, b)?;
            }
            skips.push(cur);
            let (dw, db) = (ctx.p(stage.down.w), ctx.p(stage.down.b));
            cur = ctx.tape.conv3x3(cur, dw, db, 2)?;
        }
        for b in &self.arch.bottleneck {
            cur = mpf_tape(ctx, cur, b)?;
        }
        for (i, stage) in self.arch.dec.iter().enumerate() {
            let (uw, ub) = (ctx.p(stage.up.w), ctx.p(stage.up.b));
            cur = ctx.tape.tconv3x3(cur, uw, ub)?;
            let skip = skips[self.arch.dec.len() - 1 - i];
            let cat = ctx.tape.concat_first(&[cur, skip])?;
            let (mw, mb) = (ctx.p(stage.skip_merge.w), ctx.p(stage.skip_merge.b));
            cur = ctx.tape.pointwise(cat, mw, mb)?;
            for b in &stage.blocks {
                cur = mpf_tape(ctx, cur, b)?;
            }
        }
        let (hw, hb) = (ctx.p(self.arch.head.w), ctx.p(self.arch.head.b));
        ctx.tape.conv3x3(cur, hw, hb, 1)
    }

    /// One inference pass on a private tape.
    pub fn forward(&self, rgb: &FeatureMap) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let x = tape.leaf_const(rgb.tensor().clone());
        let mut ctx = Ctx::new(&mut tape, &self.params);
        let y = self.forward_tape(&mut ctx, x)?;
        let out = tape.value(y).clone();
        out.check_finite("model output")?;
        FeatureMap::new(out)
    }
}

// ---------------------------------------------------------------------------
// Analytic cost accounting.
// ---------------------------------------------------------------------------

/// Exact parameter count and analytic FLOPs for one forward pass.
/// Conventions: one multiply-accumulate = 2 FLOPs; biases and elementwise
/// ops are counted individually (SiLU/softplus 4 FLOPs per element, layer
/// norm 8 per element, wavelet transforms 5 per element, one scan element
/// = 12 FLOPs); permutations are free.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub parameter_count: u64,
    pub flops: u64,
    pub per_layer: Vec<LayerCost>,
}

#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

struct CostAcc {
    layers: Vec<LayerCost>,
}

impl CostAcc {
    fn add(&mut self, name: impl Into<String>, params: u64, flops: u64) {
        self.layers.push(LayerCost { name: name.into(), params, flops });
    }
}

fn conv_cost(acc: &mut CostAcc, name: &str, ci: u64, co: u64, hw_out: u64) {
    acc.add(name, co * ci * 9 + co, 2 * co * ci * 9 * hw_out + co * hw_out);
}

fn pointwise_cost(acc: &mut CostAcc, name: &str, ci: u64, co: u64, hw: u64) {
    acc.add(name, co * ci + co, 2 * co * ci * hw + co * hw);
}

fn linear_cost(acc: &mut CostAcc, name: &str, t: u64, din: u64, dout: u64) {
    acc.add(name, dout * din + dout, 2 * t * din * dout + t * dout);
}

fn ln_cost(acc: &mut CostAcc, name: &str, c: u64, hw: u64) {
    acc.add(name, 2 * c, 8 * c * hw);
}

fn selective_cost(acc: &mut CostAcc, name: &str, t: u64, d: u64, n: u64) {
    // dt projection (D->D), B and C projections (D->N), softplus, the scan
    // recurrence itself and the skip term.
    linear_cost(acc, &format!("{name}.dt_proj"), t, d, d);
    acc.add(format!("{name}.softplus"), 0, 4 * t * d);
    linear_cost(acc, &format!("{name}.b_proj"), t, d, n);
    linear_cost(acc, &format!("{name}.c_proj"), t, d, n);
    acc.add(format!("{name}.recurrence"), d * n + d, 12 * t * d * n + 2 * t * d);
}

fn vss_cost(acc: &mut CostAcc, name: &str, c: u64, n: u64, hw: u64) {
    pointwise_cost(acc, &format!("{name}.lin1"), c, c, hw);
    acc.add(format!("{name}.dwconv"), c * 9 + c, 2 * 9 * c * hw + c * hw);
    acc.add(format!("{name}.silu"), 0, 4 * c * hw);
    for dir in 0..4 {
        selective_cost(acc, &format!("{name}.ss2d.dir{dir}"), hw, c, n);
    }
    ln_cost(acc, &format!("{name}.ln"), c, hw);
    pointwise_cost(acc, &format!("{name}.lin2"), c, c, hw);
}

fn mamba_cost(acc: &mut CostAcc, name: &str, t: u64, dm: u64, di: u64, n: u64) {
    linear_cost(acc, &format!("{name}.gate"), t, dm, di);
    acc.add(format!("{name}.gate_silu"), 0, 4 * t * di);
    linear_cost(acc, &format!("{name}.in"), t, dm, di);
    acc.add(format!("{name}.dwconv1d"), di * 3 + di, 2 * 3 * di * t + di * t);
    acc.add(format!("{name}.silu"), 0, 4 * t * di);
    selective_cost(acc, &format!("{name}.s6"), t, di, n);
    acc.add(format!("{name}.sum"), 0, t * di);
    linear_cost(acc, &format!("{name}.out"), t, di, dm);
}

fn mpf_cost(acc: &mut CostAcc, name: &str, cfg: &ModelConfig, c: u64, h: u64, w: u64) {
    let hw = h * w;
    let n = cfg.state_dim as u64;
    if cfg.branches.spatial {
        ln_cost(acc, &format!("{name}.spatial.ln"), c, hw);
        vss_cost(acc, &format!("{name}.spatial.vss"), c, n, hw);
        pointwise_cost(acc, &format!("{name}.spatial.merge"), 2 * c, c, hw);
    }
    if cfg.branches.frequency {
        // four half-resolution sub-bands through shared weights: parameters
        // once, compute four times
        acc.add(format!("{name}.frequency.dwt"), 0, 5 * c * hw);
        let mut sub = CostAcc { layers: Vec::new() };
        ln_cost(&mut sub, &format!("{name}.frequency.ln"), c, hw / 4);
        vss_cost(&mut sub, &format!("{name}.frequency.vss"), c, n, hw / 4);
        pointwise_cost(&mut sub, &format!("{name}.frequency.merge"), 2 * c, c, hw / 4);
        for l in sub.layers {
            acc.add(l.name, l.params, 4 * l.flops);
        }
        acc.add(format!("{name}.frequency.idwt"), 0, 5 * c * hw);
    }
    if cfg.branches.spectral {
        let g = cfg.groups as u64;
        let e = cfg.mamba_expand as u64;
        pointwise_cost(acc, &format!("{name}.spectral.expand"), c, c * g, hw);
        mamba_cost(acc, &format!("{name}.spectral.mamba"), hw * g * c, 1, e, n);
        pointwise_cost(acc, &format!("{name}.spectral.restore"), c * g, c, hw);
    }
    let enabled = [cfg.branches.spatial, cfg.branches.frequency, cfg.branches.spectral]
        .iter()
        .filter(|&&b| b)
        .count() as u64;
    // one learned scalar per enabled branch; scale + accumulate per element
    acc.add(format!("{name}.fusion"), enabled, (2 * enabled + 1) * c * hw);
}

/// Analytic cost of one forward pass at the given input size.
pub fn count_params_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} not divisible by 4; pad or crop the image first"
        )));
    }
    let [c0, c1, c2] = cfg.widths();
    let (c0, c1, c2) = (c0 as u64, c1 as u64, c2 as u64);
    let (h, w) = (h as u64, w as u64);
    let bps = cfg.blocks_per_stage;
    let mut acc = CostAcc { layers: Vec::new() };

    conv_cost(&mut acc, "embed", cfg.in_channels as u64, c0, h * w);
    let dims = [(c0, h, w), (c1, h / 2, w / 2), (c2, h / 4, w / 4)];
    for stage in 0..2 {
        let (c, sh, sw) = dims[stage];
        for k in 0..bps {
            mpf_cost(&mut acc, &format!("enc{stage}.block{k}"), cfg, c, sh, sw);
        }
        let (cn, nh, nw) = dims[stage + 1];
        conv_cost(&mut acc, &format!("enc{stage}.down"), c, cn, nh * nw);
    }
    for k in 0..bps {
        let (c, sh, sw) = dims[2];
        mpf_cost(&mut acc, &format!("bottleneck.block{k}"), cfg, c, sh, sw);
    }
    for stage in [1usize, 0] {
        let (ci, ih, iw) = dims[stage + 1];
        let (co, oh, ow) = dims[stage];
        acc.add(
            format!("dec{stage}.up"),
            co * ci * 9 + co,
            2 * co * ci * 9 * ih * iw + co * oh * ow,
        );
        pointwise_cost(&mut acc, &format!("dec{stage}.skip_merge"), 2 * co, co, oh * ow);
        for k in 0..bps {
            mpf_cost(&mut acc, &format!("dec{stage}.block{k}"), cfg, co, oh, ow);
        }
    }
    conv_cost(&mut acc, "head", c0, cfg.out_channels as u64, h * w);

    let parameter_count = acc.layers.iter().map(|l| l.params).sum();
    let flops = acc.layers.iter().map(|l| l.flops).sum();
    Ok(CostReport { parameter_count, flops, per_layer: acc.layers })
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "M3CK", u32 version, config text block, named
// f32 parameter tensors, trailing CRC32 of everything after the version.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"M3CK";
const CKPT_VERSION: u32 = 1;

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc = table[((crc ^ byte as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn config_to_text(cfg: &ModelConfig) -> String {
    format!(
        "in_channels={}\nout_channels={}\nbase_width={}\nblocks_per_stage={}\nstate_dim={}\n\
         groups={}\nmamba_expand={}\nspatial={}\nfrequency={}\nspectral={}\nseed={}\n",
        cfg.in_channels,
        cfg.out_channels,
        cfg.base_width,
        cfg.blocks_per_stage,
        cfg.state_dim,
        cfg.groups,
        cfg.mamba_expand,
        cfg.branches.spatial,
        cfg.branches.frequency,
        cfg.branches.spectral,
        cfg.seed
    )
}

fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line {line:?}")))?;
        let parse_usize = || -> Result<usize> {
            value.parse().map_err(|_| Error::Checkpoint(format!("bad value in {line:?}")))
        };
        let parse_bool = || -> Result<bool> {
            value.parse().map_err(|_| Error::Checkpoint(format!("bad value in {line:?}")))
        };
        match key {
            "in_channels" => cfg.in_channels = parse_usize()?,
            "out_channels" => cfg.out_channels = parse_usize()?,
            "base_width" => cfg.base_width = parse_usize()?,
            "blocks_per_stage" => cfg.blocks_per_stage = parse_usize()?,
            "state_dim" => cfg.state_dim = parse_usize()?,
            "groups" => cfg.groups = parse_usize()?,
            "mamba_expand" => cfg.mamba_expand = parse_usize()?,
            "spatial" => cfg.branches.spatial = parse_bool()?,
            "frequency" => cfg.branches.frequency = parse_bool()?,
            "spectral" => cfg.branches.spectral = parse_bool()?,
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value in {line:?}")))?
            }
            other => return Err(Error::Checkpoint(format!("unknown config key {other:?}"))),
        }
    }
    Ok(cfg)
}

/// Serializes config plus named parameter tensors (little-endian f32).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    let text = config_to_text(&model.cfg);
    body.extend_from_slice(&(text.len() as u32).to_le_bytes());
    body.extend_from_slice(text.as_bytes());
    body.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for id in model.params.ids() {
        let name = model.params.name(id);
        let t = model.params.get(id);
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&body)?;
    file.write_all(&crc32(&body).to_le_bytes())?;
    Ok(())
}

/// Rebuilds the model from a checkpoint: the stored config rebuilds the
/// architecture, then every named tensor overwrites its parameter.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &raw[0..4] != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let body = &raw[8..raw.len() - 4];
    let stored_crc = u32::from_le_bytes(raw[raw.len() - 4..].try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut cursor = 0usize;
    let take_u32 = |cursor: &mut usize| -> Result<u32> {
        if *cursor + 4 > body.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let v = u32::from_le_bytes(body[*cursor..*cursor + 4].try_into().unwrap());
        *cursor += 4;
        Ok(v)
    };
    let text_len = take_u32(&mut cursor)? as usize;
    if cursor + text_len > body.len() {
        return Err(Error::Checkpoint("config block out of bounds".into()));
    }
    let text = std::str::from_utf8(&body[cursor..cursor + text_len])
        .map_err(|_| Error::Checkpoint("config block is not utf-8".into()))?;
    cursor += text_len;
    let cfg = config_from_text(text)?;
    let mut model = build_model(&cfg)?;

    let count = take_u32(&mut cursor)? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {count}, architecture wants {}",
            model.params.len()
        )));
    }
    for id in model.params.ids() {
        let name_len = take_u32(&mut cursor)? as usize;
        if cursor + name_len > body.len() {
            return Err(Error::Checkpoint("name out of bounds".into()));
        }
        let name = std::str::from_utf8(&body[cursor..cursor + name_len])
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        cursor += name_len;
        if name != model.params.name(id) {
            return Err(Error::Checkpoint(format!(
                "parameter name mismatch: file has {name:?}, architecture wants {:?}",
                model.params.name(id)
            )));
        }
        let rank = take_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut cursor)? as usize);
        }
        if shape != model.params.get(id).shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for {name:?}")));
        }
        let n: usize = shape.iter().product();
        if cursor + 4 * n > body.len() {
            return Err(Error::Checkpoint(format!("data out of bounds for {name:?}")));
        }
        let dst = model.params.get_mut(id).data_mut();
        for (i, v) in dst.iter_mut().enumerate().take(n) {
            *v = f32::from_le_bytes(body[cursor + 4 * i..cursor + 4 * i + 4].try_into().unwrap())
                as f64;
        }
        cursor += 4 * n;
    }
    if cursor != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_count_matches_allocated_parameters() {
        // Two independent routes: closed-form accounting vs actually
        // allocated tensors.
        for cfg in [
            ModelConfig::default(),
            ModelConfig { base_width: 4, state_dim: 4, groups: 2, seed: 3, ..ModelConfig::default() },
            ModelConfig { blocks_per_stage: 2, ..ModelConfig::default() },
        ] {
            let model = build_model(&cfg).unwrap();
            let report = count_params_flops(&cfg, 64, 64).unwrap();
            assert_eq!(
                report.parameter_count,
                model.params.total_scalars() as u64,
                "cfg {cfg:?}"
            );
        }
    }

    #[test]
    fn variant_counts_and_analytic_agreement() {
        let cfg = ModelConfig { base_width: 4, state_dim: 4, groups: 2, ..ModelConfig::default() };
        let full = build_model(&cfg).unwrap().params.total_scalars();
        for v in [Variant::V1, Variant::V2, Variant::V3] {
            let m = build_variant(&cfg, v).unwrap();
            assert!(m.params.total_scalars() < full, "{v:?}");
            let mut vc = cfg;
            vc.branches = v.branches(cfg.branches);
            let report = count_params_flops(&vc, 8, 8).unwrap();
            assert_eq!(report.parameter_count, m.params.total_scalars() as u64);
        }
    }

    #[test]
    fn single_linear_layer_parameter_arithmetic() {
        // in=4, out=8 with bias: 4*8 + 8 = 40.
        let mut acc = CostAcc { layers: Vec::new() };
        linear_cost(&mut acc, "probe", 10, 4, 8);
        assert_eq!(acc.layers[0].params, 40);
        assert_eq!(acc.layers[0].flops, 2 * 10 * 4 * 8 + 10 * 8);
    }

    #[test]
    fn doubling_height_doubles_conv_flops() {
        let cfg = ModelConfig::default();
        let a = count_params_flops(&cfg, 32, 32).unwrap();
        let b = count_params_flops(&cfg, 64, 32).unwrap();
        assert_eq!(a.parameter_count, b.parameter_count);
        let conv_flops = |r: &CostReport, name: &str| {
            r.per_layer.iter().find(|l| l.name == name).unwrap().flops
        };
        for layer in ["embed", "head", "enc0.down", "enc1.down"] {
            assert_eq!(2 * conv_flops(&a, layer), conv_flops(&b, layer), "{layer}");
        }
    }

    #[test]
    fn flops_strictly_increase_with_groups() {
        let base = ModelConfig::default();
        let mut last = 0u64;
        for g in [2usize, 4, 8, 16] {
            let cfg = ModelConfig { groups: g, ..base };
            let r = count_params_flops(&cfg, 64, 64).unwrap();
            assert!(r.flops > last, "G={g}: {} !> {last}", r.flops);
            last = r.flops;
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = ModelConfig { out_channels: 0, ..ModelConfig::default() };
        assert!(matches!(build_model(&bad), Err(Error::Config(_))));
        let bad = ModelConfig { groups: 0, ..ModelConfig::default() };
        assert!(matches!(build_model(&bad), Err(Error::Config(_))));
        let bad = ModelConfig {
            branches: BranchSet { spatial: false, frequency: false, spectral: false },
            ..ModelConfig::default()
        };
        assert!(matches!(build_model(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::parse("full").unwrap(), Variant::Full);
        assert_eq!(Variant::parse("V2").unwrap(), Variant::V2);
        assert!(Variant::parse("V9").is_err());
    }
}
