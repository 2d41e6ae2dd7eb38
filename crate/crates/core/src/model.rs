//! Assembled tracker: configs, parameter store, precomputed geometry and
//! resolved parameter indices, with forward passes over sample pairs.

use crate::error::{Error, Result};
use crate::foundation::{
    decode_maps, forward_foundation_t, foundation_manifest, BoxPrediction, FoundationConfig,
    FoundationIds, FoundationOut, Geometry, TokenSeq,
};
use crate::objective::{total_loss_t, GtTarget, LossParts, LossWeights};
use crate::prompt::{forward_prompted_t, prompt_manifest, PromptConfig, PromptIds};
use crate::synthdata::SamplePair;
use crate::tensor::{Tape, Tensor};
use crate::tuner::{ParamSpec, ParamStore};

/// A foundation tracker, optionally with a prompt side.
#[derive(Clone, Debug)]
pub struct Model {
    pub foundation: FoundationConfig,
    pub prompt: Option<PromptConfig>,
    pub geom: Geometry,
    pub store: ParamStore,
    f_ids: FoundationIds,
    p_ids: Option<PromptIds>,
}

/// Combined manifest for a foundation + optional prompt side.
pub fn model_manifest(f: &FoundationConfig, p: Option<&PromptConfig>) -> Vec<ParamSpec> {
    let mut specs = foundation_manifest(f);
    if let Some(p_cfg) = p {
        specs.extend(prompt_manifest(f, p_cfg));
    }
    specs
}

impl Model {
    /// Fresh model with seed-initialized parameters (all frozen; call
    /// `store.partition` to pick the trainable set).
    pub fn new(
        foundation: FoundationConfig,
        prompt: Option<PromptConfig>,
        seed: u64,
    ) -> Result<Self> {
        foundation.validate()?;
        if let Some(p) = &prompt {
            p.validate(&foundation)?;
        }
        let specs = model_manifest(&foundation, prompt.as_ref());
        let store = ParamStore::from_specs(&specs, seed);
        Self::from_store(foundation, prompt, store)
    }

    /// Wrap an existing store (e.g. a loaded checkpoint); shapes are
    /// validated against the config's manifest.
    pub fn from_store(
        foundation: FoundationConfig,
        prompt: Option<PromptConfig>,
        store: ParamStore,
    ) -> Result<Self> {
        foundation.validate()?;
        if let Some(p) = &prompt {
            p.validate(&foundation)?;
        }
        let specs = model_manifest(&foundation, prompt.as_ref());
        crate::tuner::checkpoint::validate_against(&store, &specs)?;
        let geom = Geometry::new(&foundation);
        let f_ids = FoundationIds::resolve(&store, &foundation)?;
        let p_ids = match &prompt {
            Some(p) => Some(PromptIds::resolve(&store, &foundation, p)?),
            None => None,
        };
        Ok(Model {
            foundation,
            prompt,
            geom,
            store,
            f_ids,
            p_ids,
        })
    }

    /// Forward one sample on a fresh tape: prompted when the model has a
    /// prompt side, plain foundation otherwise.
    pub fn forward_pair(&self, tape: &mut Tape, pair: &SamplePair) -> Result<FoundationOut> {
        let vars = self.store.bind(tape);
        match (&self.prompt, &self.p_ids) {
            (Some(p_cfg), Some(p_ids)) => forward_prompted_t(
                tape,
                &self.foundation,
                p_cfg,
                &self.geom,
                &vars,
                &self.f_ids,
                p_ids,
                &pair.template_rgb,
                &pair.search_rgb,
                &pair.template_aux,
                &pair.search_aux,
            ),
            _ => forward_foundation_t(
                tape,
                &self.foundation,
                &self.geom,
                &vars,
                &self.f_ids,
                &pair.template_rgb,
                &pair.search_rgb,
            ),
        }
    }

    /// RGB-only forward with the same frozen foundation weights, ignoring
    /// any prompt parameters.
    pub fn forward_pair_foundation(
        &self,
        tape: &mut Tape,
        pair: &SamplePair,
    ) -> Result<FoundationOut> {
        let vars = self.store.bind(tape);
        forward_foundation_t(
            tape,
            &self.foundation,
            &self.geom,
            &vars,
            &self.f_ids,
            &pair.template_rgb,
            &pair.search_rgb,
        )
    }

    /// Forward + objective for one training sample.
    pub fn loss_on_pair(
        &self,
        tape: &mut Tape,
        pair: &SamplePair,
        weights: &LossWeights,
    ) -> Result<LossParts> {
        let out = self.forward_pair(tape, pair)?;
        let gt = GtTarget::new(pair.gt_box, self.foundation.grid())?;
        total_loss_t(tape, &out.maps, &gt, weights)
    }

    /// Value-level forward: the final token sequence and the decoded box
    /// prediction (argmax-cell decode).
    pub fn forward_values(
        &self,
        pair: &SamplePair,
        prompted: bool,
    ) -> Result<(TokenSeq, BoxPrediction)> {
        let mut tape = Tape::new();
        let out = if prompted {
            self.forward_pair(&mut tape, pair)?
        } else {
            self.forward_pair_foundation(&mut tape, pair)?
        };
        Ok((
            TokenSeq {
                tokens: tape.tensor(out.tokens),
                layout: self.geom.layout,
            },
            decode_maps(&tape, &out.maps),
        ))
    }

    /// Decoded prediction and its confidence (peak classification score).
    pub fn predict_pair(&self, pair: &SamplePair, prompted: bool) -> Result<(BoxPrediction, f64)> {
        let mut tape = Tape::new();
        let out = if prompted {
            self.forward_pair(&mut tape, pair)?
        } else {
            self.forward_pair_foundation(&mut tape, pair)?
        };
        let pred = decode_maps(&tape, &out.maps);
        let conf = pred
            .cls_map
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((pred, conf))
    }

    /// Arbitrary-image prediction (tracking-time entry point).
    pub fn predict_images(
        &self,
        z_rgb: &Tensor,
        x_rgb: &Tensor,
        z_aux: &Tensor,
        x_aux: &Tensor,
        prompted: bool,
    ) -> Result<(BoxPrediction, f64)> {
        let pair = SamplePair {
            template_rgb: z_rgb.clone(),
            template_aux: z_aux.clone(),
            search_rgb: x_rgb.clone(),
            search_aux: x_aux.clone(),
            gt_box: [0.5, 0.5, 0.1, 0.1],
            padded: false,
        };
        self.predict_pair(&pair, prompted)
    }

    pub fn manifest(&self) -> Vec<ParamSpec> {
        model_manifest(&self.foundation, self.prompt.as_ref())
    }
}

/// Outcome of a whole-model finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct ModelGradCheck {
    /// Max of `|a−n| / max(|a|, |n|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Structurally gradient-free coordinates, verified analytically ≈ 0
    /// instead of against finite differences.
    pub coords_dead: usize,
}

/// Coordinates of `name` with no gradient by construction: the key third of
/// each fused QKV bias. Attention scores see a key bias as a per-query
/// constant shift, which the softmax removes exactly, so these coordinates
/// cannot influence the loss; finite differences on them return pure
/// rounding noise.
fn dead_coordinates(name: &str, dim: usize) -> Option<std::ops::Range<usize>> {
    name.ends_with(".attn.qkv.bias").then(|| dim..2 * dim)
}

/// Compare analytic gradients of the sample objective against central
/// differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every coordinate of
/// every trainable entry. Dead coordinates must have analytic gradient
/// within 1e-10 of zero and are excluded from the finite-difference sweep.
pub fn model_grad_check(
    model: &Model,
    pair: &SamplePair,
    weights: &LossWeights,
    h: f64,
) -> Result<ModelGradCheck> {
    let mut tape = Tape::new();
    let parts = model.loss_on_pair(&mut tape, pair, weights)?;
    if !tape.data(parts.total)[0].is_finite() {
        return Err(Error::NonFinite("objective at the gradcheck point".into()));
    }
    tape.backward(parts.total)?;
    let mut work = model.clone();
    work.store.zero_grads();
    work.store.accumulate_from_tape(&tape, 1.0);

    let dim = model.foundation.dim;
    let mut outcome = ModelGradCheck {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_dead: 0,
    };
    let trainable = model.store.trainable_indices();
    for &idx in &trainable {
        let entry = &work.store.entries()[idx];
        let name = entry.name.clone();
        let analytic = entry.grad.clone().unwrap_or_default();
        let values = entry.values.clone();
        let dead = dead_coordinates(&name, dim).unwrap_or(0..0);

        let numeric = crate::tensor::central_diff(
            |probe| {
                let mut m = model.clone();
                m.store.entries_mut()[idx].values = probe.clone();
                let mut t = Tape::new();
                let p = m.loss_on_pair(&mut t, pair, weights)?;
                Ok(t.data(p.total)[0])
            },
            &values,
            h,
        )?;
        for (k, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            if dead.contains(&k) {
                if a.abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "`{name}`[{k}] should carry no gradient but has {a:e}"
                    )));
                }
                outcome.coords_dead += 1;
            } else {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                outcome.max_rel_error = outcome.max_rel_error.max(err);
                outcome.coords_checked += 1;
            }
        }
    }
    Ok(outcome)
}

fn cxcywh_to_xywh(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[2], b[3]]
}

/// Mean IoU of the decoded boxes over a pair set, prompted or RGB-only.
pub fn mean_iou_on_pairs(model: &Model, pairs: &[SamplePair], prompted: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation pairs".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let (pred, _) = model.predict_pair(pair, prompted)?;
        total += crate::metrics::iou(
            cxcywh_to_xywh(pred.box_cxcywh),
            cxcywh_to_xywh(pair.gt_box),
        );
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptConfig;
    use crate::synthdata::{gen_sequence, pairs_from_sequence, PairOptions, SceneSpec};
    use crate::tuner::TuneMode;

    fn tiny_pairs() -> Vec<SamplePair> {
        let seq = gen_sequence(&SceneSpec {
            seed: 5,
            num_frames: 4,
            canvas: (48, 48),
            ..SceneSpec::default()
        })
        .unwrap();
        pairs_from_sequence(
            &seq,
            &PairOptions { template_size: 16, search_size: 32, max_jitter: 3.0 },
            2,
        )
        .unwrap()
    }

    #[test]
    fn model_builds_and_scores_a_pair() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let mut model = Model::new(f, Some(p), 7).unwrap();
        model.store.partition(TuneMode::PromptTune);
        let pairs = tiny_pairs();
        let mut tape = Tape::new();
        let parts = model
            .loss_on_pair(&mut tape, &pairs[0], &LossWeights::default())
            .unwrap();
        let loss = tape.data(parts.total)[0];
        assert!(loss.is_finite() && loss > 0.0);
        tape.backward(parts.total).unwrap();
        model.store.zero_grads();
        model.store.accumulate_from_tape(&tape, 1.0);
    }

    #[test]
    fn mean_iou_is_in_unit_range() {
        let f = FoundationConfig::tiny();
        let model = Model::new(f, None, 9).unwrap();
        let pairs = tiny_pairs();
        let v = mean_iou_on_pairs(&model, &pairs, false).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn forward_values_carries_layout_and_box() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let model = Model::new(f.clone(), Some(p), 13).unwrap();
        let pairs = tiny_pairs();
        let (tokens, pred) = model.forward_values(&pairs[0], true).unwrap();
        assert_eq!(tokens.tokens.shape(), &[f.tokens(), f.dim]);
        assert_eq!(tokens.layout.n_z + tokens.layout.n_x, f.tokens());
        assert_eq!(pred.cls_map.shape(), &[1, f.grid(), f.grid()]);
        for v in pred.box_cxcywh {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn aux_geometry_mismatch_is_rejected() {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let model = Model::new(f, Some(p), 13).unwrap();
        let mut pair = tiny_pairs().remove(0);
        pair.template_aux = crate::tensor::Tensor::zeros(&[3, 8, 8]);
        let mut tape = Tape::new();
        assert!(model.forward_pair(&mut tape, &pair).is_err());
    }

    #[test]
    fn from_store_rejects_wrong_shapes() {
        let f = FoundationConfig::tiny();
        let model = Model::new(f.clone(), None, 3).unwrap();
        let mut other = FoundationConfig::tiny();
        other.ffn_dim = 64;
        assert!(Model::from_store(other, None, model.store).is_err());
    }
}
