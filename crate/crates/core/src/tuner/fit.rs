//! The prompt-tuning loop: epoch-shuffled batches, per-sample
//! forward/backward on parallel workers, deterministic gradient reduction
//! in sample order, AdamW updates and a step-level loss log.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::LossWeights;
use crate::synthdata::SamplePair;
use crate::tensor::Tape;
use crate::tuner::optim::{adamw_step, AdamW};
use crate::tuner::ParamFilter;

/// Optimization schedule. The learning rate is constant per epoch and drops
/// once by `decay_factor` at `decay_epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSchedule {
    /// Reference-scale recipe (60 epochs of 6e4 samples at batch 64).
    pub fn reference() -> Self {
        TrainSchedule {
            epochs: 60,
            steps_per_epoch: 60_000 / 64,
            base_lr: 4e-5,
            weight_decay: 1e-4,
            decay_epoch: 48,
            decay_factor: 10.0,
            batch_size: 64,
            seed: 0,
        }
    }

    /// Desk-scale recipe for the synthetic task.
    pub fn toy() -> Self {
        TrainSchedule {
            epochs: 20,
            steps_per_epoch: 100,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            decay_epoch: 16,
            decay_factor: 10.0,
            batch_size: 4,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("schedule counts must be positive".into()));
        }
        if self.decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "decay epoch {} beyond {} epochs",
                self.decay_epoch, self.epochs
            )));
        }
        if self.decay_factor <= 0.0 || self.base_lr < 0.0 {
            return Err(Error::Config("bad learning-rate parameters".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Learning rate in force during `epoch` (0-based).
pub fn lr_at(schedule: &TrainSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.epochs
        )));
    }
    Ok(if epoch < schedule.decay_epoch {
        schedule.base_lr
    } else {
        schedule.base_lr / schedule.decay_factor
    })
}

/// One logged optimization step (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitResult {
    pub log: Vec<StepRecord>,
}

impl FitResult {
    /// CSV serialization of the loss log.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss,cls,iou,l1\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.lr, r.loss, r.cls, r.iou, r.l1
            ));
        }
        out
    }
}

struct SampleOutcome {
    grads: Vec<Vec<f64>>,
    loss: f64,
    cls: f64,
    iou: f64,
    l1: f64,
}

fn run_sample(
    model: &Model,
    pair: &SamplePair,
    weights: &LossWeights,
    trainable: &[usize],
) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let parts = model.loss_on_pair(&mut tape, pair, weights)?;
    tape.backward(parts.total)?;
    let mut by_index = vec![Vec::new(); trainable.len()];
    let mut slots = std::collections::HashMap::new();
    for (k, &idx) in trainable.iter().enumerate() {
        slots.insert(idx, k);
    }
    for (idx, g) in tape.param_grads() {
        if let Some(&k) = slots.get(&idx) {
            by_index[k] = g.to_vec();
        }
    }
    for (k, g) in by_index.iter_mut().enumerate() {
        if g.is_empty() {
            g.resize(model.store.entries()[trainable[k]].values.numel(), 0.0);
        }
    }
    Ok(SampleOutcome {
        grads: by_index,
        loss: tape.data(parts.total)[0],
        cls: tape.data(parts.cls)[0],
        iou: tape.data(parts.iou)[0],
        l1: tape.data(parts.l1)[0],
    })
}

/// Worker-count cap: `VIPT_THREADS` when set, otherwise rayon's default.
fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VIPT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("VIPT_THREADS=`{v}` is not a count")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Train in place. Batches are drawn from an epoch-shuffled deck; each batch
/// gradient is the mean of per-sample gradients accumulated in sample order,
/// so the result is independent of the worker count.
pub fn fit(
    model: &mut Model,
    pairs: &[SamplePair],
    schedule: &TrainSchedule,
    weights: &LossWeights,
) -> Result<FitResult> {
    schedule.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if model.store.count(ParamFilter::Trainable) == 0 {
        return Err(Error::InvalidArgument(
            "nothing is trainable; partition the store first".into(),
        ));
    }
    let trainable = model.store.trainable_indices();
    let pool = worker_pool()?;
    let mut deck_rng = crate::rng::stream(schedule.seed, "batch-deck");
    let mut deck: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(schedule.total_steps());

    for step in 0..schedule.total_steps() {
        let epoch = step / schedule.steps_per_epoch;
        let lr = lr_at(schedule, epoch)?;

        let mut batch = Vec::with_capacity(schedule.batch_size);
        while batch.len() < schedule.batch_size {
            if deck.is_empty() {
                deck = (0..pairs.len()).collect();
                deck.shuffle(&mut deck_rng);
            }
            batch.push(deck.pop().expect("refilled"));
        }
        // Accumulation order is canonical (ascending index), so the batch
        // gradient depends only on which samples were drawn.
        batch.sort_unstable();

        let outcomes: Vec<Result<SampleOutcome>> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| run_sample(model, &pairs[i], weights, &trainable))
                .collect()
        });

        model.store.zero_grads();
        let scale = 1.0 / schedule.batch_size as f64;
        let (mut loss, mut cls, mut iou, mut l1) = (0.0, 0.0, 0.0, 0.0);
        for outcome in outcomes {
            let o = outcome?;
            model.store.accumulate_dense(&trainable, &o.grads, scale);
            loss += o.loss * scale;
            cls += o.cls * scale;
            iou += o.iou * scale;
            l1 += o.l1 * scale;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        adamw_step(&mut model.store, lr, schedule.weight_decay, AdamW::default(), step as u64 + 1)?;
        log.push(StepRecord { step, epoch, lr, loss, cls, iou, l1 });
    }
    Ok(FitResult { log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::FoundationConfig;
    use crate::prompt::PromptConfig;
    use crate::synthdata::{gen_sequence, pairs_from_sequence, PairOptions, SceneSpec};
    use crate::tuner::checkpoint::save_to_vec;
    use crate::tuner::TuneMode;

    fn tiny_setup(seed: u64) -> (Model, Vec<SamplePair>) {
        let f = FoundationConfig::tiny();
        let p = PromptConfig::vipt_deep(f.layers, 4);
        let mut model = Model::new(f, Some(p), seed).unwrap();
        model.store.partition(TuneMode::PromptTune);
        let seq = gen_sequence(&SceneSpec {
            seed: 30,
            num_frames: 6,
            canvas: (48, 48),
            rgb_corruption_rate: 0.5,
            ..SceneSpec::default()
        })
        .unwrap();
        let pairs = pairs_from_sequence(
            &seq,
            &PairOptions { template_size: 16, search_size: 32, max_jitter: 2.0 },
            3,
        )
        .unwrap();
        (model, pairs)
    }

    fn tiny_schedule(steps: usize) -> TrainSchedule {
        TrainSchedule {
            epochs: 1,
            steps_per_epoch: steps,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            decay_epoch: 1,
            decay_factor: 10.0,
            batch_size: 2,
            seed: 11,
        }
    }

    #[test]
    fn lr_schedule_cases() {
        let s = TrainSchedule::reference();
        assert_eq!(lr_at(&s, 0).unwrap(), 4e-5);
        assert_eq!(lr_at(&s, 47).unwrap(), 4e-5);
        assert!((lr_at(&s, 48).unwrap() - 4e-6).abs() < 1e-20);
        assert!(lr_at(&s, 60).is_err());

        let constant = TrainSchedule { decay_epoch: 60, ..TrainSchedule::reference() };
        assert_eq!(lr_at(&constant, 59).unwrap(), 4e-5);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_flat_loss() {
        let (mut model, pairs) = tiny_setup(21);
        let before: Vec<Vec<u64>> = model
            .store
            .entries()
            .iter()
            .map(|e| e.values.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        // Full-batch steps make every step see the same data.
        let schedule = TrainSchedule {
            base_lr: 0.0,
            batch_size: pairs.len(),
            ..tiny_schedule(4)
        };
        let result = fit(&mut model, &pairs, &schedule, &LossWeights::default()).unwrap();
        for (e, bits) in model.store.entries().iter().zip(&before) {
            let now: Vec<u64> = e.values.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "{} changed under lr=0", e.name);
        }
        let first = result.log[0].loss;
        for r in &result.log {
            assert_eq!(r.loss, first);
        }
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let (mut m1, pairs) = tiny_setup(22);
        let (mut m2, _) = tiny_setup(22);
        let schedule = tiny_schedule(6);
        let r1 = fit(&mut m1, &pairs, &schedule, &LossWeights::default()).unwrap();
        let r2 = fit(&mut m2, &pairs, &schedule, &LossWeights::default()).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(save_to_vec(&m1.store), save_to_vec(&m2.store));
    }

    #[test]
    fn nothing_trainable_is_rejected() {
        let (mut model, pairs) = tiny_setup(23);
        model.store.partition(TuneMode::FoundationOnly);
        let err = fit(&mut model, &pairs, &tiny_schedule(2), &LossWeights::default());
        assert!(err.is_err());
    }

    #[test]
    fn frozen_entries_never_move_and_trainables_do() {
        let (mut model, pairs) = tiny_setup(24);
        let before: Vec<(String, bool, Vec<u64>)> = model
            .store
            .entries()
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.trainable,
                    e.values.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        fit(&mut model, &pairs, &tiny_schedule(10), &LossWeights::default()).unwrap();
        for ((name, trainable, bits), e) in before.into_iter().zip(model.store.entries()) {
            let now: Vec<u64> = e.values.data().iter().map(|v| v.to_bits()).collect();
            if trainable {
                assert_ne!(now, bits, "trainable {name} did not move");
            } else {
                assert_eq!(now, bits, "frozen {name} moved");
            }
        }
    }
}
