//! The frozen RGB foundation tracker: patch embedding with learned
//! positional tables, an L-layer pre-norm transformer encoder over the
//! concatenated [exemplar; search] token sequence, and a center-based box
//! head over the search tokens.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tuner::{Init, ParamGroup, ParamSpec, ParamStore};

/// Architecture hyperparameters of the foundation tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct FoundationConfig {
    /// Token dimension D.
    pub dim: usize,
    /// Encoder layer count L.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Patch side in pixels.
    pub patch: usize,
    /// Template (exemplar) crop side in pixels.
    pub template_size: usize,
    /// Search crop side in pixels.
    pub search_size: usize,
    pub ln_eps: f64,
}

impl FoundationConfig {
    pub const IN_CHANNELS: usize = 3;

    /// Reference-scale preset: 64 exemplar + 256 search tokens at D=768.
    pub fn reference() -> Self {
        FoundationConfig {
            dim: 768,
            layers: 12,
            heads: 12,
            ffn_dim: 3072,
            patch: 16,
            template_size: 128,
            search_size: 256,
            ln_eps: 1e-6,
        }
    }

    /// Desk-scale preset used for training experiments.
    pub fn toy() -> Self {
        FoundationConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            patch: 8,
            template_size: 32,
            search_size: 64,
            ln_eps: 1e-6,
        }
    }

    /// Smallest preset; cheap enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        FoundationConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
            patch: 8,
            template_size: 16,
            search_size: 32,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("foundation dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by 4 (box head halves channels twice)",
                self.dim
            )));
        }
        if self.template_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "template {} / search {} must be divisible by patch {}",
                self.template_size, self.search_size, self.patch
            )));
        }
        Ok(())
    }

    /// Exemplar token count N_z.
    pub fn n_z(&self) -> usize {
        let s = self.template_size / self.patch;
        s * s
    }

    /// Search token count N_x.
    pub fn n_x(&self) -> usize {
        let s = self.search_size / self.patch;
        s * s
    }

    /// Search grid side S (the box head operates on an S×S map).
    pub fn grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.n_z() + self.n_x()
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            n_z: self.n_z(),
            n_x: self.n_x(),
            side_z: self.template_size / self.patch,
            side_x: self.search_size / self.patch,
        }
    }
}

/// Split record of a token sequence. The concatenation order is always
/// [exemplar; search].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_z: usize,
    pub n_x: usize,
    /// Exemplar grid side (n_z = side_z²).
    pub side_z: usize,
    /// Search grid side (n_x = side_x²).
    pub side_x: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.n_z + self.n_x
    }
}

/// A token sequence with its layout; the value-level counterpart of the
/// `Var` the forward passes carry.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub tokens: Tensor,
    pub layout: TokenLayout,
}

// ── gather tables ───────────────────────────────────────────────────

/// Precomputed index tables for patch extraction and the box-head
/// convolutions; pure functions of the config.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub layout: TokenLayout,
    pub patch: usize,
    /// [n_z, 3p²] gather over a [3, t, t] image.
    pub patch_z: Arc<Vec<i64>>,
    /// [n_x, 3p²] gather over a [3, s, s] image.
    pub patch_x: Arc<Vec<i64>>,
    /// im2col tables (kernel 3, same padding) on the S×S grid, for channel
    /// counts D, D/2 and D/4.
    pub head_cols: [Arc<Vec<i64>>; 3],
    pub head_channels: [usize; 3],
}

impl Geometry {
    pub fn new(cfg: &FoundationConfig) -> Self {
        let layout = cfg.layout();
        let s = cfg.grid();
        let d = cfg.dim;
        Geometry {
            layout,
            patch: cfg.patch,
            patch_z: Arc::new(patch_table(cfg.template_size, cfg.patch)),
            patch_x: Arc::new(patch_table(cfg.search_size, cfg.patch)),
            head_cols: [
                Arc::new(im2col3_table(d, s)),
                Arc::new(im2col3_table(d / 2, s)),
                Arc::new(im2col3_table(d / 4, s)),
            ],
            head_channels: [d, d / 2, d / 4],
        }
    }
}

/// Rows = patches in raster order, cols = channel-major flattened patch
/// pixels: col c·p² + dy·p + dx reads image[c, py·p+dy, px·p+dx].
fn patch_table(image_side: usize, patch: usize) -> Vec<i64> {
    let side = image_side / patch;
    let mut idx = Vec::with_capacity(side * side * 3 * patch * patch);
    for py in 0..side {
        for px in 0..side {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        idx.push((c * image_side * image_side + y * image_side + x) as i64);
                    }
                }
            }
        }
    }
    idx
}

/// Rows = grid cells in raster order, cols = c·9 + ky·3 + kx over a 3×3
/// window with zero padding.
fn im2col3_table(channels: usize, grid: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(grid * grid * channels * 9);
    for y in 0..grid {
        for x in 0..grid {
            for c in 0..channels {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let yy = y as i64 + ky as i64 - 1;
                        let xx = x as i64 + kx as i64 - 1;
                        if yy < 0 || xx < 0 || yy >= grid as i64 || xx >= grid as i64 {
                            idx.push(-1);
                        } else {
                            idx.push((c * grid * grid) as i64 + yy * grid as i64 + xx);
                        }
                    }
                }
            }
        }
    }
    idx
}

// ── parameter manifest ──────────────────────────────────────────────

/// Shape specs for every foundation parameter, in a fixed order.
pub fn foundation_manifest(cfg: &FoundationConfig) -> Vec<ParamSpec> {
    use Init::*;
    use ParamGroup::Foundation;
    let d = cfg.dim;
    let p2 = FoundationConfig::IN_CHANNELS * cfg.patch * cfg.patch;
    let mut specs = vec![
        ParamSpec::new("foundation.embed.weight", vec![p2, d], Foundation, XavierUniform),
        ParamSpec::new("foundation.embed.bias", vec![d], Foundation, Zeros),
        ParamSpec::new("foundation.pos_z", vec![cfg.n_z(), d], Foundation, Uniform(0.02)),
        ParamSpec::new("foundation.pos_x", vec![cfg.n_x(), d], Foundation, Uniform(0.02)),
    ];
    for l in 1..=cfg.layers {
        let pre = format!("foundation.layers.{l}");
        specs.push(ParamSpec::new(format!("{pre}.ln1.gamma"), vec![d], Foundation, Ones));
        specs.push(ParamSpec::new(format!("{pre}.ln1.beta"), vec![d], Foundation, Zeros));
        specs.push(ParamSpec::new(format!("{pre}.attn.qkv.weight"), vec![d, 3 * d], Foundation, XavierUniform));
        specs.push(ParamSpec::new(format!("{pre}.attn.qkv.bias"), vec![3 * d], Foundation, Zeros));
        specs.push(ParamSpec::new(format!("{pre}.attn.proj.weight"), vec![d, d], Foundation, XavierUniform));
        specs.push(ParamSpec::new(format!("{pre}.attn.proj.bias"), vec![d], Foundation, Zeros));
        specs.push(ParamSpec::new(format!("{pre}.ln2.gamma"), vec![d], Foundation, Ones));
        specs.push(ParamSpec::new(format!("{pre}.ln2.beta"), vec![d], Foundation, Zeros));
        specs.push(ParamSpec::new(format!("{pre}.ffn.fc1.weight"), vec![d, cfg.ffn_dim], Foundation, XavierUniform));
        specs.push(ParamSpec::new(format!("{pre}.ffn.fc1.bias"), vec![cfg.ffn_dim], Foundation, Zeros));
        specs.push(ParamSpec::new(format!("{pre}.ffn.fc2.weight"), vec![cfg.ffn_dim, d], Foundation, XavierUniform));
        specs.push(ParamSpec::new(format!("{pre}.ffn.fc2.bias"), vec![d], Foundation, Zeros));
    }
    specs.push(ParamSpec::new("foundation.norm.gamma", vec![d], Foundation, Ones));
    specs.push(ParamSpec::new("foundation.norm.beta", vec![d], Foundation, Zeros));
    for branch in ["cls", "offset", "size"] {
        let out = if branch == "cls" { 1 } else { 2 };
        let chain = [(d, d / 2), (d / 2, d / 4), (d / 4, out)];
        for (k, (c_in, c_out)) in chain.iter().enumerate() {
            let pre = format!("foundation.head.{branch}.conv{}", k + 1);
            specs.push(ParamSpec::new(format!("{pre}.weight"), vec![c_in * 9, *c_out], Foundation, XavierUniform));
            specs.push(ParamSpec::new(format!("{pre}.bias"), vec![*c_out], Foundation, Zeros));
        }
    }
    specs
}

// ── resolved parameter indices ──────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Debug)]
pub struct BranchIds {
    pub conv: [(usize, usize); 3],
}

#[derive(Clone, Debug)]
pub struct FoundationIds {
    pub embed_w: usize,
    pub embed_b: usize,
    pub pos_z: usize,
    pub pos_x: usize,
    pub layers: Vec<LayerIds>,
    pub norm_gamma: usize,
    pub norm_beta: usize,
    pub cls: BranchIds,
    pub offset: BranchIds,
    pub size: BranchIds,
}

impl FoundationIds {
    pub fn resolve(store: &ParamStore, cfg: &FoundationConfig) -> Result<Self> {
        let branch = |name: &str| -> Result<BranchIds> {
            let mut conv = [(0, 0); 3];
            for (k, slot) in conv.iter_mut().enumerate() {
                slot.0 = store.index_of(&format!("foundation.head.{name}.conv{}.weight", k + 1))?;
                slot.1 = store.index_of(&format!("foundation.head.{name}.conv{}.bias", k + 1))?;
            }
            Ok(BranchIds { conv })
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let pre = format!("foundation.layers.{l}");
            layers.push(LayerIds {
                ln1_gamma: store.index_of(&format!("{pre}.ln1.gamma"))?,
                ln1_beta: store.index_of(&format!("{pre}.ln1.beta"))?,
                qkv_w: store.index_of(&format!("{pre}.attn.qkv.weight"))?,
                qkv_b: store.index_of(&format!("{pre}.attn.qkv.bias"))?,
                proj_w: store.index_of(&format!("{pre}.attn.proj.weight"))?,
                proj_b: store.index_of(&format!("{pre}.attn.proj.bias"))?,
                ln2_gamma: store.index_of(&format!("{pre}.ln2.gamma"))?,
                ln2_beta: store.index_of(&format!("{pre}.ln2.beta"))?,
                fc1_w: store.index_of(&format!("{pre}.ffn.fc1.weight"))?,
                fc1_b: store.index_of(&format!("{pre}.ffn.fc1.bias"))?,
                fc2_w: store.index_of(&format!("{pre}.ffn.fc2.weight"))?,
                fc2_b: store.index_of(&format!("{pre}.ffn.fc2.bias"))?,
            });
        }
        Ok(FoundationIds {
            embed_w: store.index_of("foundation.embed.weight")?,
            embed_b: store.index_of("foundation.embed.bias")?,
            pos_z: store.index_of("foundation.pos_z")?,
            pos_x: store.index_of("foundation.pos_x")?,
            layers,
            norm_gamma: store.index_of("foundation.norm.gamma")?,
            norm_beta: store.index_of("foundation.norm.beta")?,
            cls: branch("cls")?,
            offset: branch("offset")?,
            size: branch("size")?,
        })
    }
}

// ── tape-level forward pieces ───────────────────────────────────────

/// Patchify + shared affine map for one image already on the tape.
pub fn patch_embed_t(
    tape: &mut Tape,
    image: Var,
    table: &Arc<Vec<i64>>,
    n_patches: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let cols = tape.shape(weight)[0];
    let patches = tape.gather(image, table.clone(), &[n_patches, cols])?;
    tape.linear(patches, weight, bias)
}

/// Embed a (template, search) image pair with a shared affine; returns the
/// two token fragments without positional terms.
pub fn embed_pair_raw_t(
    tape: &mut Tape,
    geom: &Geometry,
    z_img: &Tensor,
    x_img: &Tensor,
    weight: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let expect_z = geom.layout.side_z * geom.patch;
    let expect_x = geom.layout.side_x * geom.patch;
    if z_img.shape() != [3, expect_z, expect_z] {
        return Err(Error::ShapeMismatch {
            op: "embed template",
            lhs: z_img.shape().to_vec(),
            rhs: vec![3, expect_z, expect_z],
        });
    }
    if x_img.shape() != [3, expect_x, expect_x] {
        return Err(Error::ShapeMismatch {
            op: "embed search",
            lhs: x_img.shape().to_vec(),
            rhs: vec![3, expect_x, expect_x],
        });
    }
    let z = tape.constant(z_img);
    let x = tape.constant(x_img);
    let z_tok = patch_embed_t(tape, z, &geom.patch_z, geom.layout.n_z, weight, bias)?;
    let x_tok = patch_embed_t(tape, x, &geom.patch_x, geom.layout.n_x, weight, bias)?;
    Ok((z_tok, x_tok))
}

/// Embed a (template, search) image pair, add positional tables, and
/// concatenate to the [exemplar; search] sequence.
pub fn embed_pair_t(
    tape: &mut Tape,
    geom: &Geometry,
    z_img: &Tensor,
    x_img: &Tensor,
    weight: Var,
    bias: Var,
    pos_z: Var,
    pos_x: Var,
) -> Result<Var> {
    let (z_tok, x_tok) = embed_pair_raw_t(tape, geom, z_img, x_img, weight, bias)?;
    let z_pos = tape.add(z_tok, pos_z)?;
    let x_pos = tape.add(x_tok, pos_x)?;
    tape.concat_rows(z_pos, x_pos)
}

/// Scaled dot-product multi-head self-attention with fused QKV projection.
pub fn attention_t(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = tape.linear(x, qkv_w, qkv_b)?;
    let mut ctx: Option<Var> = None;
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.affine(scores, scale, 0.0);
        let attn = tape.softmax(scaled, 1)?;
        let head_out = tape.matmul(attn, v)?;
        ctx = Some(match ctx {
            None => head_out,
            Some(acc) => tape.concat_cols(acc, head_out)?,
        });
    }
    tape.linear(ctx.expect("heads >= 1"), proj_w, proj_b)
}

/// Pre-norm encoder layer: `x + MSA(LN(x))`, then `+ FFN(LN(·))`.
pub fn encoder_layer_t(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    eps: f64,
    vars: &[Var],
    ids: &LayerIds,
) -> Result<Var> {
    let normed = tape.layer_norm(x, vars[ids.ln1_gamma], vars[ids.ln1_beta], eps)?;
    let attn = attention_t(
        tape,
        normed,
        heads,
        vars[ids.qkv_w],
        vars[ids.qkv_b],
        vars[ids.proj_w],
        vars[ids.proj_b],
    )?;
    let x1 = tape.add(x, attn)?;
    let normed2 = tape.layer_norm(x1, vars[ids.ln2_gamma], vars[ids.ln2_beta], eps)?;
    let hidden = tape.linear(normed2, vars[ids.fc1_w], vars[ids.fc1_b])?;
    let act = tape.gelu(hidden);
    let ffn = tape.linear(act, vars[ids.fc2_w], vars[ids.fc2_b])?;
    tape.add(x1, ffn)
}

/// Classification, offset and size maps over the search grid.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps {
    pub cls: Var,
    pub offset: Var,
    pub size: Var,
    pub grid: usize,
}

fn conv3x3_t(
    tape: &mut Tape,
    x: Var,
    table: &Arc<Vec<i64>>,
    grid: usize,
    c_in: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let cols = tape.gather(x, table.clone(), &[grid * grid, c_in * 9])?;
    let y = tape.linear(cols, weight, bias)?;
    let c_out = tape.shape(y)[1];
    let yt = tape.transpose(y)?;
    tape.reshape(yt, &[c_out, grid, grid])
}

fn head_branch_t(
    tape: &mut Tape,
    grid_tokens: Var,
    geom: &Geometry,
    vars: &[Var],
    ids: &BranchIds,
) -> Result<Var> {
    let grid = geom.layout.side_x;
    let mut x = grid_tokens;
    for (k, (w, b)) in ids.conv.iter().enumerate() {
        x = conv3x3_t(tape, x, &geom.head_cols[k], grid, geom.head_channels[k], vars[*w], vars[*b])?;
        if k < 2 {
            x = tape.relu(x);
        }
    }
    Ok(tape.sigmoid(x))
}

/// Box head over the search tokens; requires `n_x` to be a perfect square.
/// Reshapes tokens to the [D, S, S] grid, then runs the three conv stacks.
pub fn box_head_t(
    tape: &mut Tape,
    search_tokens: Var,
    geom: &Geometry,
    vars: &[Var],
    ids: &FoundationIds,
) -> Result<HeadMaps> {
    let n_x = tape.shape(search_tokens)[0];
    let grid = geom.layout.side_x;
    if grid * grid != n_x {
        return Err(Error::InvalidArgument(format!(
            "search token count {n_x} is not a perfect square"
        )));
    }
    let d = tape.shape(search_tokens)[1];
    let t = tape.transpose(search_tokens)?;
    let grid_tokens = tape.reshape(t, &[d, grid, grid])?;
    let cls = head_branch_t(tape, grid_tokens, geom, vars, &ids.cls)?;
    let offset = head_branch_t(tape, grid_tokens, geom, vars, &ids.offset)?;
    let size = head_branch_t(tape, grid_tokens, geom, vars, &ids.size)?;
    Ok(HeadMaps {
        cls,
        offset,
        size,
        grid,
    })
}

/// Output of the foundation forward pass: final tokens plus head maps.
#[derive(Clone, Copy, Debug)]
pub struct FoundationOut {
    pub tokens: Var,
    pub maps: HeadMaps,
}

/// Full forward: embed both crops, run the encoder, final layer norm, and
/// decode head maps from the search tokens.
pub fn forward_foundation_t(
    tape: &mut Tape,
    cfg: &FoundationConfig,
    geom: &Geometry,
    vars: &[Var],
    ids: &FoundationIds,
    z_img: &Tensor,
    x_img: &Tensor,
) -> Result<FoundationOut> {
    let embedded = embed_pair_t(
        tape,
        geom,
        z_img,
        x_img,
        vars[ids.embed_w],
        vars[ids.embed_b],
        vars[ids.pos_z],
        vars[ids.pos_x],
    )?;
    encode_and_head_t(tape, cfg, geom, vars, ids, embedded)
}

/// Encoder + head over an already-embedded token sequence.
pub fn encode_and_head_t(
    tape: &mut Tape,
    cfg: &FoundationConfig,
    geom: &Geometry,
    vars: &[Var],
    ids: &FoundationIds,
    embedded: Var,
) -> Result<FoundationOut> {
    let mut h = embedded;
    for layer in &ids.layers {
        h = encoder_layer_t(tape, h, cfg.heads, cfg.ln_eps, vars, layer)?;
    }
    let normed = tape.layer_norm(h, vars[ids.norm_gamma], vars[ids.norm_beta], cfg.ln_eps)?;
    let maps = head_from_tokens_t(tape, geom, vars, ids, normed)?;
    Ok(FoundationOut { tokens: normed, maps })
}

pub fn head_from_tokens_t(
    tape: &mut Tape,
    geom: &Geometry,
    vars: &[Var],
    ids: &FoundationIds,
    tokens: Var,
) -> Result<HeadMaps> {
    let search = tape.slice_rows(tokens, geom.layout.n_z, geom.layout.n_x)?;
    box_head_t(tape, search, geom, vars, ids)
}

// ── box decoding ────────────────────────────────────────────────────

/// Head maps plus the box decoded at the classification argmax, in
/// normalized search-region coordinates.
#[derive(Clone, Debug)]
pub struct BoxPrediction {
    pub cls_map: Tensor,
    pub offset_map: Tensor,
    pub size_map: Tensor,
    /// (cx, cy, w, h), each in [0, 1].
    pub box_cxcywh: [f64; 4],
}

/// Argmax cell of a [1, S, S] map; ties break to the lowest flat index.
pub fn peak_cell(cls_map: &Tensor) -> (usize, usize) {
    let s = cls_map.shape()[1];
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in cls_map.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    (best / s, best % s)
}

/// Decode a box at a given cell: center = (cell + offset) / S, size read
/// directly. All outputs clamped to [0, 1].
pub fn decode_at(cls: &Tensor, offset: &Tensor, size: &Tensor, cell: (usize, usize)) -> [f64; 4] {
    let s = cls.shape()[1];
    let (i, j) = cell;
    let off_x = offset.at(&[0, i, j]);
    let off_y = offset.at(&[1, i, j]);
    let w = size.at(&[0, i, j]);
    let h = size.at(&[1, i, j]);
    [
        ((j as f64 + off_x) / s as f64).clamp(0.0, 1.0),
        ((i as f64 + off_y) / s as f64).clamp(0.0, 1.0),
        w.clamp(0.0, 1.0),
        h.clamp(0.0, 1.0),
    ]
}

/// Value-level decode of tape head maps（argmax cell).
pub fn decode_maps(tape: &Tape, maps: &HeadMaps) -> BoxPrediction {
    let cls = tape.tensor(maps.cls);
    let offset = tape.tensor(maps.offset);
    let size = tape.tensor(maps.size);
    let cell = peak_cell(&cls);
    let box_cxcywh = decode_at(&cls, &offset, &size, cell);
    BoxPrediction {
        cls_map: cls,
        offset_map: offset,
        size_map: size,
        box_cxcywh,
    }
}

/// Train-time decode on the tape at a fixed cell (the ground-truth peak):
/// returns a [4] tensor (cx, cy, w, h) with gradients into the maps.
pub fn box_at_cell_t(tape: &mut Tape, maps: &HeadMaps, cell: (usize, usize)) -> Result<Var> {
    let s = maps.grid;
    let (i, j) = cell;
    let flat = (i * s + j) as i64;
    let cell_of = |c: usize| Arc::new(vec![(c * s * s) as i64 + flat]);
    let off_x = tape.gather(maps.offset, cell_of(0), &[1])?;
    let off_y = tape.gather(maps.offset, cell_of(1), &[1])?;
    let w = tape.gather(maps.size, cell_of(0), &[1])?;
    let h = tape.gather(maps.size, cell_of(1), &[1])?;
    let cx = tape.affine(off_x, 1.0 / s as f64, j as f64 / s as f64);
    let cy = tape.affine(off_y, 1.0 / s as f64, i as f64 / s as f64);
    let cxy = tape.concat_rows(cx, cy)?;
    let wh = tape.concat_rows(w, h)?;
    tape.concat_rows(cxy, wh)
}

// ── value-level wrappers ────────────────────────────────────────────

/// Patch embedding of one `[3, H, W]` image: each non-overlapping patch is
/// flattened channel-major and mapped by a shared affine to `dim` channels.
pub fn patch_embed(image: &Tensor, weight: &Tensor, bias: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!(
            "patch_embed expects [3, H, W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % patch != 0 || w % patch != 0 || h != w {
        return Err(Error::InvalidArgument(format!(
            "image {h}×{w} not divisible into {patch}×{patch} patches"
        )));
    }
    let n = (h / patch) * (w / patch);
    let table = Arc::new(patch_table(h, patch));
    let mut tape = Tape::new();
    let img = tape.constant(image);
    let wv = tape.constant(weight);
    let bv = tape.constant(bias);
    let out = patch_embed_t(&mut tape, img, &table, n, wv, bv)?;
    Ok(tape.tensor(out))
}

/// Value-level multi-head self-attention (see [`attention_t`]).
pub fn multi_head_attention(
    x: &Tensor,
    heads: usize,
    qkv_w: &Tensor,
    qkv_b: &Tensor,
    proj_w: &Tensor,
    proj_b: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let a = tape.constant(qkv_w);
    let b = tape.constant(qkv_b);
    let c = tape.constant(proj_w);
    let d = tape.constant(proj_b);
    let out = attention_t(&mut tape, xv, heads, a, b, c, d)?;
    Ok(tape.tensor(out))
}
