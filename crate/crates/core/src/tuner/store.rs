//! Named parameter registry with a frozen/trainable partition.
//!
//! Entry names are hierarchical and carry their role: everything under
//! `foundation.` belongs to the frozen tracker, `aux_embed.` is the
//! auxiliary-modality patch embedding, and `prompt.` holds prompter-block
//! parameters. Weight-decay eligibility is a naming convention too: only
//! entries ending in `.weight` decay.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which part of the model a parameter belongs to; drives the partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Foundation,
    AuxEmbed,
    Prompt,
}

/// Initialization rule for one entry.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(−a, a) with a = sqrt(6 / (fan_in + fan_out)) from a rank-2 shape.
    XavierUniform,
    Zeros,
    Ones,
    /// U(−a, a).
    Uniform(f64),
    Constant(f64),
}

/// Shape-level description of one parameter; enough to count and to build.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, group: ParamGroup, init: Init) -> Self {
        let name = name.into();
        debug_assert_eq!(infer_group(&name), group, "group prefix mismatch for {name}");
        ParamSpec { name, shape, group, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn infer_group(name: &str) -> ParamGroup {
    if name.starts_with("aux_embed.") {
        ParamGroup::AuxEmbed
    } else if name.starts_with("prompt.") {
        ParamGroup::Prompt
    } else {
        ParamGroup::Foundation
    }
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Which parameters receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneMode {
    /// Only the auxiliary embedding and prompter blocks train.
    PromptTune,
    /// Everything trains.
    FullTune,
    /// Nothing trains (inference).
    FoundationOnly,
}

impl TuneMode {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            TuneMode::PromptTune => group != ParamGroup::Foundation,
            TuneMode::FullTune => true,
            TuneMode::FoundationOnly => false,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompt_tune" => Ok(TuneMode::PromptTune),
            "full_tune" => Ok(TuneMode::FullTune),
            "foundation_only" => Ok(TuneMode::FoundationOnly),
            other => Err(Error::Config(format!(
                "unknown tune mode `{other}` (expected prompt_tune | full_tune | foundation_only)"
            ))),
        }
    }
}

/// Count filter for parameter audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    Trainable,
    Frozen,
    All,
}

/// Scalar-parameter count over shape specs, without allocating any values.
pub fn count_specs(specs: &[ParamSpec], mode: TuneMode, filter: ParamFilter) -> usize {
    specs
        .iter()
        .filter(|s| match filter {
            ParamFilter::All => true,
            ParamFilter::Trainable => mode.trains(s.group),
            ParamFilter::Frozen => !mode.trains(s.group),
        })
        .map(ParamSpec::numel)
        .sum()
}

/// One named parameter with its values, gradient buffer and optimizer state.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub values: Tensor,
    pub trainable: bool,
    pub decay: bool,
    pub grad: Option<Vec<f64>>,
    pub adam_m: Option<Vec<f64>>,
    pub adam_v: Option<Vec<f64>>,
}

/// Ordered, name-indexed parameter registry.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Build and initialize from specs. Each entry draws from its own RNG
    /// stream derived from (seed, name), so values do not depend on
    /// enumeration order. Everything starts frozen; see [`ParamStore::partition`].
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut store = ParamStore::new();
        for spec in specs {
            let values = init_tensor(spec, seed);
            store.insert(ParamEntry {
                name: spec.name.clone(),
                group: spec.group,
                values,
                trainable: false,
                decay: decays(&spec.name),
                grad: None,
                adam_m: None,
                adam_v: None,
            });
        }
        store
    }

    pub fn insert(&mut self, entry: ParamEntry) {
        debug_assert!(!self.index.contains_key(&entry.name), "duplicate {}", entry.name);
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        Ok(&self.entries[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i])
    }

    /// Set the frozen/trainable split. Frozen entries lose their gradient
    /// buffers and optimizer state; they hold nothing but values from here on.
    pub fn partition(&mut self, mode: TuneMode) {
        for e in &mut self.entries {
            e.trainable = mode.trains(e.group);
            if !e.trainable {
                e.grad = None;
                e.adam_m = None;
                e.adam_v = None;
            }
        }
    }

    pub fn count(&self, filter: ParamFilter) -> usize {
        self.entries
            .iter()
            .filter(|e| match filter {
                ParamFilter::All => true,
                ParamFilter::Trainable => e.trainable,
                ParamFilter::Frozen => !e.trainable,
            })
            .map(|e| e.values.numel())
            .sum()
    }

    /// Zero (allocating if needed) the gradient buffers of trainable entries.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if e.trainable {
                match &mut e.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                    None => e.grad = Some(vec![0.0; e.values.numel()]),
                }
            }
        }
    }

    /// Register every entry on a tape, in store order. Trainable entries are
    /// tracked; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| tape.leaf_param(i, &e.values, e.trainable))
            .collect()
    }

    /// Pull `scale ×` the tape's leaf gradients into the store buffers.
    pub fn accumulate_from_tape(&mut self, tape: &Tape, scale: f64) {
        for (idx, g) in tape.param_grads() {
            let entry = &mut self.entries[idx];
            if !entry.trainable {
                continue;
            }
            let buf = entry
                .grad
                .get_or_insert_with(|| vec![0.0; g.len()]);
            for (o, &v) in buf.iter_mut().zip(g) {
                *o += scale * v;
            }
        }
    }

    /// Sum `scale ×` a dense per-trainable-entry gradient list (as produced
    /// by a worker) into the store buffers. `grads` is aligned with
    /// [`ParamStore::trainable_indices`].
    pub fn accumulate_dense(&mut self, indices: &[usize], grads: &[Vec<f64>], scale: f64) {
        debug_assert_eq!(indices.len(), grads.len());
        for (&idx, g) in indices.iter().zip(grads) {
            let entry = &mut self.entries[idx];
            let buf = entry.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (o, &v) in buf.iter_mut().zip(g) {
                *o += scale * v;
            }
        }
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| i)
            .collect()
    }
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let mut rng = crate::rng::stream(seed, &spec.name);
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::filled(&spec.shape, 1.0),
        Init::Constant(c) => Tensor::filled(&spec.shape, c),
        Init::Uniform(a) => Tensor::from_fn(&spec.shape, |_| rng.gen_range(-a..a)),
        Init::XavierUniform => {
            debug_assert!(spec.shape.len() == 2, "xavier needs rank 2: {}", spec.name);
            let (fan_in, fan_out) = (spec.shape[0] as f64, spec.shape[1] as f64);
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            Tensor::from_fn(&spec.shape, |_| rng.gen_range(-a..a))
        }
    }
}
