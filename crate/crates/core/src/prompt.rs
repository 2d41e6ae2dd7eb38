//! Modality-complementary prompting.
//!
//! A second, pixel-aligned input flow (depth / thermal / event imagery) is
//! embedded by its own trainable patch embedding and distilled into
//! residual prompts by small prompter blocks inserted between encoder
//! stages. Each block projects both flows into a low-dimensional latent
//! space, sharpens the foundation flow with a spatial fovea mask, fuses the
//! two by addition, and projects back up to the token dimension. The frozen
//! foundation consumes `tokens + prompt` and never changes.

use crate::error::{Error, Result};
use crate::foundation::{
    embed_pair_raw_t, embed_pair_t, encoder_layer_t, FoundationConfig, FoundationIds,
    FoundationOut, Geometry, TokenLayout,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::tuner::{Init, ParamGroup, ParamSpec, ParamStore};

/// Prompting variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// Prompter blocks at the configured placement layers.
    Vipt,
    /// Auxiliary embedding added once at the input; no prompter blocks.
    VptSumShallow,
    /// As shallow, plus a trainable token table added before every layer.
    VptSumDeep,
}

/// Prompt-side architecture: variant, block placement and latent width.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// 1-based encoder layers that receive a prompter block (Vipt only).
    pub placement: Vec<usize>,
    /// Latent channel count d inside each block.
    pub latent_dim: usize,
}

impl PromptConfig {
    /// Blocks every `interval` layers starting at layer 1.
    pub fn vipt_interval(interval: usize, layers: usize, latent_dim: usize) -> Self {
        PromptConfig {
            mode: PromptMode::Vipt,
            placement: placement_from_interval(interval, layers),
            latent_dim,
        }
    }

    /// One block per layer.
    pub fn vipt_deep(layers: usize, latent_dim: usize) -> Self {
        Self::vipt_interval(1, layers, latent_dim)
    }

    /// A single block at layer 1.
    pub fn vipt_shallow(layers: usize, latent_dim: usize) -> Self {
        Self::vipt_interval(layers, layers, latent_dim)
    }

    pub fn vpt_sum(deep: bool) -> Self {
        PromptConfig {
            mode: if deep { PromptMode::VptSumDeep } else { PromptMode::VptSumShallow },
            placement: Vec::new(),
            latent_dim: 0,
        }
    }

    pub fn validate(&self, foundation: &FoundationConfig) -> Result<()> {
        match self.mode {
            PromptMode::Vipt => {
                if self.placement.is_empty() {
                    return Err(Error::Config("vipt mode needs at least one prompter block".into()));
                }
                if self
                    .placement
                    .iter()
                    .any(|&l| l == 0 || l > foundation.layers)
                {
                    return Err(Error::Config(format!(
                        "placement {:?} outside layers 1..={}",
                        self.placement, foundation.layers
                    )));
                }
                if self.latent_dim == 0 || self.latent_dim > foundation.dim {
                    return Err(Error::Config(format!(
                        "latent dim {} must be in 1..={}",
                        self.latent_dim, foundation.dim
                    )));
                }
            }
            PromptMode::VptSumShallow | PromptMode::VptSumDeep => {}
        }
        Ok(())
    }
}

/// `{1, 1+k, 1+2k, ...} ∩ {1..layers}`.
pub fn placement_from_interval(interval: usize, layers: usize) -> Vec<usize> {
    assert!(interval >= 1, "interval must be >= 1");
    (1..=layers).step_by(interval).collect()
}

// ── parameter manifest ──────────────────────────────────────────────

/// Shape specs for the trainable prompt side: the auxiliary patch embedding
/// plus, depending on the variant, prompter blocks or per-layer tables.
/// The auxiliary embedding is the affine map alone, with no positional
/// term, so its trainable budget is exactly `in_ch·patch²·D + D`.
pub fn prompt_manifest(f: &FoundationConfig, p: &PromptConfig) -> Vec<ParamSpec> {
    use Init::*;
    let d = f.dim;
    let p2 = FoundationConfig::IN_CHANNELS * f.patch * f.patch;
    let mut specs = vec![
        ParamSpec::new("aux_embed.weight", vec![p2, d], ParamGroup::AuxEmbed, XavierUniform),
        ParamSpec::new("aux_embed.bias", vec![d], ParamGroup::AuxEmbed, Zeros),
    ];
    match p.mode {
        PromptMode::Vipt => {
            let latent = p.latent_dim;
            for &l in &p.placement {
                let pre = format!("prompt.mcp.{l}");
                specs.push(ParamSpec::new(format!("{pre}.g1.weight"), vec![d, latent], ParamGroup::Prompt, XavierUniform));
                specs.push(ParamSpec::new(format!("{pre}.g1.bias"), vec![latent], ParamGroup::Prompt, Zeros));
                specs.push(ParamSpec::new(format!("{pre}.g2.weight"), vec![d, latent], ParamGroup::Prompt, XavierUniform));
                specs.push(ParamSpec::new(format!("{pre}.g2.bias"), vec![latent], ParamGroup::Prompt, Zeros));
                specs.push(ParamSpec::new(format!("{pre}.g3.weight"), vec![latent, d], ParamGroup::Prompt, XavierUniform));
                specs.push(ParamSpec::new(format!("{pre}.g3.bias"), vec![d], ParamGroup::Prompt, Zeros));
                specs.push(ParamSpec::new(format!("{pre}.lambda"), vec![1], ParamGroup::Prompt, Constant(1.0)));
            }
        }
        PromptMode::VptSumShallow => {}
        PromptMode::VptSumDeep => {
            for l in 1..=f.layers {
                specs.push(ParamSpec::new(
                    format!("prompt.vpt.table.{l}"),
                    vec![f.tokens(), d],
                    ParamGroup::Prompt,
                    Uniform(0.02),
                ));
            }
        }
    }
    specs
}

// ── resolved indices ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct McpIds {
    pub layer: usize,
    pub g1_w: usize,
    pub g1_b: usize,
    pub g2_w: usize,
    pub g2_b: usize,
    pub g3_w: usize,
    pub g3_b: usize,
    pub lambda: usize,
}

#[derive(Clone, Debug)]
pub struct PromptIds {
    pub aux_w: usize,
    pub aux_b: usize,
    pub mcp: Vec<McpIds>,
    /// Per-layer token tables (VptSumDeep), index l−1.
    pub tables: Vec<usize>,
}

impl PromptIds {
    pub fn resolve(store: &ParamStore, f: &FoundationConfig, p: &PromptConfig) -> Result<Self> {
        let mut mcp = Vec::new();
        let mut tables = Vec::new();
        match p.mode {
            PromptMode::Vipt => {
                for &l in &p.placement {
                    let pre = format!("prompt.mcp.{l}");
                    mcp.push(McpIds {
                        layer: l,
                        g1_w: store.index_of(&format!("{pre}.g1.weight"))?,
                        g1_b: store.index_of(&format!("{pre}.g1.bias"))?,
                        g2_w: store.index_of(&format!("{pre}.g2.weight"))?,
                        g2_b: store.index_of(&format!("{pre}.g2.bias"))?,
                        g3_w: store.index_of(&format!("{pre}.g3.weight"))?,
                        g3_b: store.index_of(&format!("{pre}.g3.bias"))?,
                        lambda: store.index_of(&format!("{pre}.lambda"))?,
                    });
                }
            }
            PromptMode::VptSumShallow => {}
            PromptMode::VptSumDeep => {
                for l in 1..=f.layers {
                    tables.push(store.index_of(&format!("prompt.vpt.table.{l}"))?);
                }
            }
        }
        Ok(PromptIds {
            aux_w: store.index_of("aux_embed.weight")?,
            aux_b: store.index_of("aux_embed.bias")?,
            mcp,
            tables,
        })
    }
}

// ── fovea ───────────────────────────────────────────────────────────

/// λ-scaled spatial softmax mask of a `[d, Hs, Ws]` feature map: per
/// channel, `mask[c, i, j] = λ · softmax over (i, j) of M[c, ·, ·]`.
pub fn fovea_mask(m: &Tensor, lambda: f64) -> Result<Tensor> {
    if m.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "fovea expects [d, H, W], got {:?}",
            m.shape()
        )));
    }
    let (d, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let flat = Tensor::new(vec![d, h * w], m.data().to_vec())?;
    let sm = crate::tensor::softmax(&flat, 1)?;
    Tensor::new(
        vec![d, h, w],
        sm.data().iter().map(|&v| lambda * v).collect(),
    )
}

/// Fovea operation: the input map modulated by its own attention-like mask,
/// `M ⊙ fovea_mask(M)`.
pub fn fovea(m: &Tensor, lambda: f64) -> Result<Tensor> {
    let mask = fovea_mask(m, lambda)?;
    Tensor::new(
        m.shape().to_vec(),
        m.data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &b)| a * b)
            .collect(),
    )
}

/// Tape fovea over one token group laid out `[N_g, d]` (rows are spatial
/// positions): softmax over rows per channel, λ scale, elementwise product.
fn fovea_group_t(tape: &mut Tape, m_group: Var, lambda: Var) -> Result<Var> {
    let sm = tape.softmax(m_group, 0)?;
    let mask = tape.scale_var(sm, lambda)?;
    tape.mul(m_group, mask)
}

// ── MCP block ───────────────────────────────────────────────────────

/// One prompter block: project both flows to the latent space, fovea the
/// foundation flow per token group, fuse by addition, project back up.
pub fn mcp_block_t(
    tape: &mut Tape,
    h_prev: Var,
    p_prev: Var,
    layout: &TokenLayout,
    vars: &[Var],
    ids: &McpIds,
) -> Result<Var> {
    let m_rgb = tape.linear(h_prev, vars[ids.g1_w], vars[ids.g1_b])?;
    let m_aux = tape.linear(p_prev, vars[ids.g2_w], vars[ids.g2_b])?;
    let m_z = tape.slice_rows(m_rgb, 0, layout.n_z)?;
    let m_x = tape.slice_rows(m_rgb, layout.n_z, layout.n_x)?;
    let e_z = fovea_group_t(tape, m_z, vars[ids.lambda])?;
    let e_x = fovea_group_t(tape, m_x, vars[ids.lambda])?;
    let enhanced = tape.concat_rows(e_z, e_x)?;
    let mixed = tape.add(enhanced, m_aux)?;
    tape.linear(mixed, vars[ids.g3_w], vars[ids.g3_b])
}

/// Residual prompt injection: `tokens + prompt`, elementwise.
pub fn inject(h: &Tensor, p: &Tensor) -> Result<Tensor> {
    if h.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            op: "inject",
            lhs: h.shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    Tensor::new(
        h.shape().to_vec(),
        h.data().iter().zip(p.data()).map(|(&a, &b)| a + b).collect(),
    )
}

// ── prompted forward ────────────────────────────────────────────────

/// Embed the auxiliary pair with the trainable affine. Spatial identity
/// comes from token order alone; the positional tables stay on the RGB
/// flow, so the trainable budget here is the affine map and nothing else.
pub fn patch_embed_aux_t(
    tape: &mut Tape,
    geom: &Geometry,
    z_aux: &Tensor,
    x_aux: &Tensor,
    vars: &[Var],
    p_ids: &PromptIds,
) -> Result<Var> {
    let (z_tok, x_tok) =
        embed_pair_raw_t(tape, geom, z_aux, x_aux, vars[p_ids.aux_w], vars[p_ids.aux_b])?;
    tape.concat_rows(z_tok, x_tok)
}

/// Dual-flow forward pass. Stage l first derives the prompt from the
/// previous stage's unprompted output and the carried prompt stream, injects
/// it, then runs the frozen encoder layer. At layers without a block the
/// prompt stream is carried forward unchanged.
#[allow(clippy::too_many_arguments)]
pub fn forward_prompted_t(
    tape: &mut Tape,
    f_cfg: &FoundationConfig,
    p_cfg: &PromptConfig,
    geom: &Geometry,
    vars: &[Var],
    f_ids: &FoundationIds,
    p_ids: &PromptIds,
    z_rgb: &Tensor,
    x_rgb: &Tensor,
    z_aux: &Tensor,
    x_aux: &Tensor,
) -> Result<FoundationOut> {
    if z_aux.shape() != z_rgb.shape() || x_aux.shape() != x_rgb.shape() {
        return Err(Error::ShapeMismatch {
            op: "aux flow geometry",
            lhs: z_aux.shape().to_vec(),
            rhs: z_rgb.shape().to_vec(),
        });
    }
    let mut h = embed_pair_t(
        tape,
        geom,
        z_rgb,
        x_rgb,
        vars[f_ids.embed_w],
        vars[f_ids.embed_b],
        vars[f_ids.pos_z],
        vars[f_ids.pos_x],
    )?;
    let aux = patch_embed_aux_t(tape, geom, z_aux, x_aux, vars, p_ids)?;

    match p_cfg.mode {
        PromptMode::Vipt => {
            let mut prompt = aux;
            let mut blocks = p_ids.mcp.iter().peekable();
            for l in 1..=f_cfg.layers {
                if blocks.peek().is_some_and(|b| b.layer == l) {
                    let block = blocks.next().expect("peeked");
                    prompt = mcp_block_t(tape, h, prompt, &geom.layout, vars, block)?;
                    h = tape.add(h, prompt)?;
                }
                h = encoder_layer_t(tape, h, f_cfg.heads, f_cfg.ln_eps, vars, &f_ids.layers[l - 1])?;
            }
        }
        PromptMode::VptSumShallow => {
            h = tape.add(h, aux)?;
            for l in 1..=f_cfg.layers {
                h = encoder_layer_t(tape, h, f_cfg.heads, f_cfg.ln_eps, vars, &f_ids.layers[l - 1])?;
            }
        }
        PromptMode::VptSumDeep => {
            h = tape.add(h, aux)?;
            for l in 1..=f_cfg.layers {
                h = tape.add(h, vars[p_ids.tables[l - 1]])?;
                h = encoder_layer_t(tape, h, f_cfg.heads, f_cfg.ln_eps, vars, &f_ids.layers[l - 1])?;
            }
        }
    }

    let normed = tape.layer_norm(h, vars[f_ids.norm_gamma], vars[f_ids.norm_beta], f_cfg.ln_eps)?;
    let maps = crate::foundation::head_from_tokens_t(tape, geom, vars, f_ids, normed)?;
    Ok(FoundationOut { tokens: normed, maps })
}

/// Silence a prompted model: zero the up-projections (Vipt) or the
/// auxiliary embedding and tables (VPT variants), making every injected
/// prompt exactly zero.
pub fn silence_prompts(store: &mut ParamStore, p_cfg: &PromptConfig) -> Result<()> {
    let mut names = Vec::new();
    match p_cfg.mode {
        PromptMode::Vipt => {
            for &l in &p_cfg.placement {
                names.push(format!("prompt.mcp.{l}.g3.weight"));
                names.push(format!("prompt.mcp.{l}.g3.bias"));
            }
        }
        PromptMode::VptSumShallow | PromptMode::VptSumDeep => {
            names.push("aux_embed.weight".into());
            names.push("aux_embed.bias".into());
            for e in store.entries() {
                if e.name.starts_with("prompt.vpt.table.") {
                    names.push(e.name.clone());
                }
            }
        }
    }
    for name in names {
        let entry = store.get_mut(&name)?;
        let shape = entry.values.shape().to_vec();
        entry.values = Tensor::zeros(&shape);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::{
        forward_foundation_t, foundation_manifest, patch_embed,
    };
    use crate::tensor::{bits_equal, grad_check};
    use crate::tuner::{count_specs, ParamFilter, TuneMode};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn full_manifest(f: &FoundationConfig, p: &PromptConfig) -> Vec<ParamSpec> {
        let mut specs = foundation_manifest(f);
        specs.extend(prompt_manifest(f, p));
        specs
    }

    fn build(f: &FoundationConfig, p: &PromptConfig, seed: u64) -> (ParamStore, Geometry, FoundationIds, PromptIds) {
        let store = ParamStore::from_specs(&full_manifest(f, p), seed);
        let geom = Geometry::new(f);
        let f_ids = FoundationIds::resolve(&store, f).unwrap();
        let p_ids = PromptIds::resolve(&store, f, p).unwrap();
        (store, geom, f_ids, p_ids)
    }

    #[test]
    fn placement_intervals() {
        assert_eq!(placement_from_interval(1, 4), vec![1, 2, 3, 4]);
        assert_eq!(placement_from_interval(2, 12), vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(placement_from_interval(12, 12), vec![1]);
        assert_eq!(PromptConfig::vipt_shallow(12, 8).placement, vec![1]);
    }

    #[test]
    fn aux_embed_zero_params_zero_tokens() {
        let img = Tensor::zeros(&[3, 16, 16]);
        let w = Tensor::zeros(&[3 * 64, 8]);
        let b = Tensor::zeros(&[8]);
        let tok = patch_embed(&img, &w, &b, 8).unwrap();
        assert!(tok.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aux_affine_count_at_reference_scale() {
        let f = FoundationConfig::reference();
        let p = PromptConfig::vpt_sum(false);
        let specs = prompt_manifest(&f, &p);
        let aux: usize = specs.iter().map(ParamSpec::numel).sum();
        assert_eq!(aux, 590_592); // in_ch·patch²·D + D = 3·16²·768 + 768
    }

    /// The closed forms hold for arbitrary dims, not just the presets.
    #[test]
    fn count_closed_forms_hold_for_fuzzed_dims() {
        let mut rng = crate::rng::stream(36, "count-fuzz");
        for _ in 0..25 {
            let mut f = FoundationConfig::tiny();
            f.dim = 4 * rng.gen_range(1..9);
            f.heads = 1;
            f.patch = [4, 8][rng.gen_range(0..2)];
            f.template_size = f.patch * rng.gen_range(1..4);
            f.search_size = f.patch * rng.gen_range(1..5);
            let latent = rng.gen_range(1..=f.dim);
            let p = PromptConfig::vipt_deep(f.layers, latent);
            let specs = prompt_manifest(&f, &p);
            let aux: usize = specs
                .iter()
                .filter(|s| s.group == ParamGroup::AuxEmbed)
                .map(ParamSpec::numel)
                .sum();
            assert_eq!(aux, 3 * f.patch * f.patch * f.dim + f.dim);
            let block: usize = specs
                .iter()
                .filter(|s| s.name.starts_with("prompt.mcp.1."))
                .map(ParamSpec::numel)
                .sum();
            assert_eq!(block, 2 * (f.dim * latent + latent) + (latent * f.dim + f.dim) + 1);
        }
    }

    #[test]
    fn per_block_count_at_reference_scale() {
        let f = FoundationConfig::reference();
        let p = PromptConfig::vipt_shallow(f.layers, 8);
        let specs = prompt_manifest(&f, &p);
        let block: usize = specs
            .iter()
            .filter(|s| s.name.starts_with("prompt.mcp.1."))
            .map(ParamSpec::numel)
            .sum();
        assert_eq!(block, 19_217); // 2(768·8+8) + (8·768+768) + 1
    }

    #[test]
    fn vpt_deep_table_count_at_reference_scale() {
        let f = FoundationConfig::reference();
        let p = PromptConfig::vpt_sum(true);
        let specs = prompt_manifest(&f, &p);
        let tables: usize = specs
            .iter()
            .filter(|s| s.name.starts_with("prompt.vpt."))
            .map(ParamSpec::numel)
            .sum();
        assert_eq!(tables, 12 * 320 * 768);
        let trainable = count_specs(&specs, TuneMode::PromptTune, ParamFilter::Trainable);
        assert_eq!(trainable, 590_592 + 2_949_120);
    }

    #[test]
    fn fovea_closed_forms() {
        // Zero map: uniform mask λ/(H·W), output zero.
        let m = Tensor::zeros(&[2, 2, 3]);
        let mask = fovea_mask(&m, 1.5).unwrap();
        for &v in mask.data() {
            assert!((v - 1.5 / 6.0).abs() < 1e-15);
        }
        assert!(fovea(&m, 1.5).unwrap().data().iter().all(|&v| v == 0.0));

        // Single position: mask = λ, output = λ·M.
        let m = Tensor::new(vec![1, 1, 1], vec![0.7]).unwrap();
        let mask = fovea_mask(&m, 2.5).unwrap();
        assert!((mask.data()[0] - 2.5).abs() < 1e-15);
        assert!((fovea(&m, 2.5).unwrap().data()[0] - 2.5 * 0.7).abs() < 1e-15);

        // 1×2 grid [0, ln 3], λ=2 → mask [0.5, 1.5], output [0, 1.5·ln 3].
        let m = Tensor::new(vec![1, 1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let mask = fovea_mask(&m, 2.0).unwrap();
        assert!((mask.data()[0] - 0.5).abs() < 1e-12);
        assert!((mask.data()[1] - 1.5).abs() < 1e-12);
        let out = fovea(&m, 2.0).unwrap();
        assert!(out.data()[0].abs() < 1e-15);
        assert!((out.data()[1] - 1.5 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fovea_mask_sums_to_lambda_per_channel() {
        let mut rng = crate::rng::stream(31, "fovea-fuzz");
        for _ in 0..200 {
            let d = rng.gen_range(1..5);
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let lambda = rng.gen_range(0.1..4.0);
            let m = Tensor::from_fn(&[d, h, w], |_| rng.gen_range(-20.0..20.0));
            let mask = fovea_mask(&m, lambda).unwrap();
            for c in 0..d {
                let sum: f64 = (0..h * w).map(|k| mask.data()[c * h * w + k]).sum();
                assert!((sum - lambda).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_fovea_matches_value_level() {
        let mut rng = crate::rng::stream(32, "fovea-consistency");
        let (n_g, d) = (6, 3);
        // Tokens [N_g, d] correspond to a [d, N_g] map: same channel lanes.
        let tokens = rand_tensor(&[n_g, d], &mut rng);
        let lambda = 1.7;
        let mut tape = Tape::new();
        let t = tape.constant(&tokens);
        let lv = tape.constant(&Tensor::scalar(lambda));
        let out = fovea_group_t(&mut tape, t, lv).unwrap();
        let got = tape.tensor(out);

        let map = Tensor::from_fn(&[d, 1, n_g], |i| tokens.at(&[i % n_g, i / n_g]));
        let expect = fovea(&map, lambda).unwrap();
        for c in 0..d {
            for p in 0..n_g {
                let a = got.at(&[p, c]);
                let e = expect.at(&[c, 0, p]);
                assert!((a - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mcp_zero_g3_suppresses_prompt() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let (mut store, geom, _f_ids, p_ids) = build(&f, &p, 41);
        silence_prompts(&mut store, &p).unwrap();
        let mut rng = crate::rng::stream(42, "mcp-zero");
        let h = rand_tensor(&[f.tokens(), f.dim], &mut rng);
        let pin = rand_tensor(&[f.tokens(), f.dim], &mut rng);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let hv = tape.constant(&h);
        let pv = tape.constant(&pin);
        let out = mcp_block_t(&mut tape, hv, pv, &geom.layout, &vars, &p_ids.mcp[0]).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mcp_zero_foundation_flow_reduces_to_aux_path() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let (store, geom, _f_ids, p_ids) = build(&f, &p, 43);
        let mut rng = crate::rng::stream(44, "mcp-aux-only");
        let h = Tensor::zeros(&[f.tokens(), f.dim]);
        let pin = rand_tensor(&[f.tokens(), f.dim], &mut rng);
        let ids = &p_ids.mcp[0];
        // g1 bias is zero-initialized, so the fovea input is exactly zero
        // and the block reduces to g3(g2(P)).
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let hv = tape.constant(&h);
        let pv = tape.constant(&pin);
        let out = mcp_block_t(&mut tape, hv, pv, &geom.layout, &vars, ids).unwrap();
        let g2p = tape.linear(pv, vars[ids.g2_w], vars[ids.g2_b]).unwrap();
        let expect = tape.linear(g2p, vars[ids.g3_w], vars[ids.g3_b]).unwrap();
        let (a, e) = (tape.tensor(out), tape.tensor(expect));
        for (x, y) in a.data().iter().zip(e.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    /// Independent step-by-step evaluation of one block with plain loops.
    #[test]
    fn mcp_matches_step_by_step_oracle() {
        let f = FoundationConfig::tiny(); // N_z=4, N_x=16, D=16
        let latent = 4;
        let p = PromptConfig::vipt_deep(f.layers, latent);
        let (store, geom, _f_ids, p_ids) = build(&f, &p, 45);
        let mut rng = crate::rng::stream(46, "mcp-oracle");
        let h = rand_tensor(&[f.tokens(), f.dim], &mut rng);
        let pin = rand_tensor(&[f.tokens(), f.dim], &mut rng);
        let ids = &p_ids.mcp[0];

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let hv = tape.constant(&h);
        let pv = tape.constant(&pin);
        let out = mcp_block_t(&mut tape, hv, pv, &geom.layout, &vars, ids).unwrap();
        let got = tape.tensor(out);

        let affine = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let (n, ci, co) = (x.shape()[0], w.shape()[0], w.shape()[1]);
            Tensor::from_fn(&[n, co], |k| {
                let (r, c) = (k / co, k % co);
                let mut acc = b.at(&[c]);
                for i in 0..ci {
                    acc += x.at(&[r, i]) * w.at(&[i, c]);
                }
                acc
            })
        };
        let entry = |idx: usize| store.entries()[idx].values.clone();
        let m_rgb = affine(&h, &entry(ids.g1_w), &entry(ids.g1_b));
        let m_aux = affine(&pin, &entry(ids.g2_w), &entry(ids.g2_b));
        let lambda = entry(ids.lambda).data()[0];
        // Fovea per token group: softmax over the group's positions, per channel.
        let mut enhanced = Tensor::zeros(&[f.tokens(), latent]);
        for (start, len) in [(0, geom.layout.n_z), (geom.layout.n_z, geom.layout.n_x)] {
            for c in 0..latent {
                let vals: Vec<f64> = (0..len).map(|r| m_rgb.at(&[start + r, c])).collect();
                let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = vals.iter().map(|&v| (v - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for r in 0..len {
                    let mask = lambda * exps[r] / sum;
                    enhanced.data_mut()[(start + r) * latent + c] = vals[r] * mask;
                }
            }
        }
        let mixed = Tensor::from_fn(&[f.tokens(), latent], |k| enhanced.data()[k] + m_aux.data()[k]);
        let expect = affine(&mixed, &entry(ids.g3_w), &entry(ids.g3_b));
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn inject_cases() {
        let mut rng = crate::rng::stream(47, "inject");
        let h = rand_tensor(&[5, 3], &mut rng);
        let z = Tensor::zeros(&[5, 3]);
        assert!(bits_equal(&inject(&h, &z).unwrap(), &h));
        assert!(bits_equal(&inject(&z, &h).unwrap(), &h));
        let p = rand_tensor(&[5, 3], &mut rng);
        let sum = inject(&h, &p).unwrap();
        for i in 0..15 {
            assert_eq!(sum.data()[i], h.data()[i] + p.data()[i]);
        }
        assert!(inject(&h, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn zero_prompts_reduce_to_foundation_bitwise() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let (mut store, geom, f_ids, p_ids) = build(&f, &p, 48);
        silence_prompts(&mut store, &p).unwrap();
        // Foundation-only store from the same seed holds identical values.
        let foundation_store = ParamStore::from_specs(&foundation_manifest(&f), 48);
        let fo_ids = FoundationIds::resolve(&foundation_store, &f).unwrap();

        let mut rng = crate::rng::stream(49, "zero-prompt");
        for _ in 0..10 {
            let z_rgb = rand_tensor(&[3, 16, 16], &mut rng);
            let x_rgb = rand_tensor(&[3, 32, 32], &mut rng);
            let z_aux = rand_tensor(&[3, 16, 16], &mut rng);
            let x_aux = rand_tensor(&[3, 32, 32], &mut rng);

            let mut t1 = Tape::new();
            let vars1 = store.bind(&mut t1);
            let prompted = forward_prompted_t(
                &mut t1, &f, &p, &geom, &vars1, &f_ids, &p_ids,
                &z_rgb, &x_rgb, &z_aux, &x_aux,
            )
            .unwrap();

            let mut t2 = Tape::new();
            let vars2 = foundation_store.bind(&mut t2);
            let base = forward_foundation_t(&mut t2, &f, &geom, &vars2, &fo_ids, &z_rgb, &x_rgb).unwrap();

            assert!(bits_equal(&t1.tensor(prompted.tokens), &t2.tensor(base.tokens)));
            assert!(bits_equal(&t1.tensor(prompted.maps.cls), &t2.tensor(base.maps.cls)));
            assert!(bits_equal(&t1.tensor(prompted.maps.offset), &t2.tensor(base.maps.offset)));
            assert!(bits_equal(&t1.tensor(prompted.maps.size), &t2.tensor(base.maps.size)));
        }
    }

    #[test]
    fn shallow_and_deep_placements_differ() {
        let f = FoundationConfig::tiny();
        let deep = PromptConfig::vipt_deep(f.layers, 4);
        let shallow = PromptConfig::vipt_shallow(f.layers, 4);
        let mut rng = crate::rng::stream(50, "variants-differ");
        let z_rgb = rand_tensor(&[3, 16, 16], &mut rng);
        let x_rgb = rand_tensor(&[3, 32, 32], &mut rng);
        let z_aux = rand_tensor(&[3, 16, 16], &mut rng);
        let x_aux = rand_tensor(&[3, 32, 32], &mut rng);

        let run = |p: &PromptConfig| {
            let (store, geom, f_ids, p_ids) = build(&f, p, 51);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let out = forward_prompted_t(
                &mut tape, &f, p, &geom, &vars, &f_ids, &p_ids,
                &z_rgb, &x_rgb, &z_aux, &x_aux,
            )
            .unwrap();
            tape.tensor(out.tokens)
        };
        let a = run(&deep);
        let b = run(&shallow);
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-9, "deep and shallow collapsed: {max_diff}");
    }

    #[test]
    fn vpt_shallow_with_zero_aux_embedding_equals_foundation() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vpt_sum(false);
        let (mut store, geom, f_ids, p_ids) = build(&f, &p, 52);
        silence_prompts(&mut store, &p).unwrap();
        let mut rng = crate::rng::stream(53, "vpt-zero");
        let z_rgb = rand_tensor(&[3, 16, 16], &mut rng);
        let x_rgb = rand_tensor(&[3, 32, 32], &mut rng);
        let z_aux = rand_tensor(&[3, 16, 16], &mut rng);
        let x_aux = rand_tensor(&[3, 32, 32], &mut rng);

        let mut t1 = Tape::new();
        let vars1 = store.bind(&mut t1);
        let prompted = forward_prompted_t(
            &mut t1, &f, &p, &geom, &vars1, &f_ids, &p_ids,
            &z_rgb, &x_rgb, &z_aux, &x_aux,
        )
        .unwrap();
        let foundation_store = ParamStore::from_specs(&foundation_manifest(&f), 52);
        let fo_ids = FoundationIds::resolve(&foundation_store, &f).unwrap();
        let mut t2 = Tape::new();
        let vars2 = foundation_store.bind(&mut t2);
        let base = forward_foundation_t(&mut t2, &f, &geom, &vars2, &fo_ids, &z_rgb, &x_rgb).unwrap();
        assert!(bits_equal(&t1.tensor(prompted.tokens), &t2.tensor(base.tokens)));
    }

    #[test]
    fn gradients_reach_every_trainable_parameter() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let (mut store, geom, f_ids, p_ids) = build(&f, &p, 54);
        store.partition(TuneMode::PromptTune);
        store.zero_grads();
        let mut rng = crate::rng::stream(55, "grad-flow");
        let z_rgb = rand_tensor(&[3, 16, 16], &mut rng);
        let x_rgb = rand_tensor(&[3, 32, 32], &mut rng);
        let z_aux = rand_tensor(&[3, 16, 16], &mut rng);
        let x_aux = rand_tensor(&[3, 32, 32], &mut rng);

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let out = forward_prompted_t(
            &mut tape, &f, &p, &geom, &vars, &f_ids, &p_ids,
            &z_rgb, &x_rgb, &z_aux, &x_aux,
        )
        .unwrap();
        // Pool all three head maps so every output path contributes.
        let a = tape.sum(out.maps.cls);
        let b = tape.sum(out.maps.offset);
        let c = tape.sum(out.maps.size);
        let ab = tape.add(a, b).unwrap();
        let loss = tape.add(ab, c).unwrap();
        tape.backward(loss).unwrap();
        store.accumulate_from_tape(&tape, 1.0);

        for e in store.entries() {
            if e.trainable {
                let g = e.grad.as_ref().unwrap();
                assert!(
                    g.iter().any(|&v| v != 0.0),
                    "no gradient reached {}",
                    e.name
                );
            } else {
                assert!(e.grad.is_none());
            }
        }
    }

    #[test]
    fn mcp_block_passes_gradient_check_on_8_tokens() {
        // A small stand-alone layout (8 = 4 + 4 tokens).
        let layout = TokenLayout { n_z: 4, n_x: 4, side_z: 2, side_x: 2 };
        let d = 6;
        let latent = 3;
        let mut rng = crate::rng::stream(56, "mcp-gradcheck");
        let h = rand_tensor(&[8, d], &mut rng);
        let pin = rand_tensor(&[8, d], &mut rng);
        let g1w = rand_tensor(&[d, latent], &mut rng);
        let g1b = rand_tensor(&[latent], &mut rng);
        let g2w = rand_tensor(&[d, latent], &mut rng);
        let g2b = rand_tensor(&[latent], &mut rng);
        let g3w = rand_tensor(&[latent, d], &mut rng);
        let g3b = rand_tensor(&[d], &mut rng);

        // Gradient w.r.t. the incoming foundation tokens through the block.
        let err = grad_check(
            |t, v| {
                let p = t.constant(&pin);
                let m_rgb = {
                    let w = t.constant(&g1w);
                    let b = t.constant(&g1b);
                    t.linear(v, w, b)?
                };
                let m_aux = {
                    let w = t.constant(&g2w);
                    let b = t.constant(&g2b);
                    t.linear(p, w, b)?
                };
                let lam = t.constant(&Tensor::scalar(1.3));
                let m_z = t.slice_rows(m_rgb, 0, layout.n_z)?;
                let m_x = t.slice_rows(m_rgb, layout.n_z, layout.n_x)?;
                let e_z = fovea_group_t(t, m_z, lam)?;
                let e_x = fovea_group_t(t, m_x, lam)?;
                let e = t.concat_rows(e_z, e_x)?;
                let mixed = t.add(e, m_aux)?;
                let out = {
                    let w = t.constant(&g3w);
                    let b = t.constant(&g3b);
                    t.linear(mixed, w, b)?
                };
                Ok(t.sum(out))
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "mcp grad err {err}");
    }
}
