//! Acceptance suite. Each test prints one pass/fail line (visible with
//! `cargo test --test acceptance -- --nocapture`); a failed criterion
//! panics, so a printed PASS line is backed by its assertions.
//!
//! The training-based criteria share one fixture run; its reference numbers
//! were frozen from the first verified run of this exact configuration.

use std::sync::OnceLock;

use vipt_core::audit::variant_counts;
use vipt_core::error::{CheckpointError, Error};
use vipt_core::foundation::{
    forward_foundation_t, foundation_manifest, FoundationConfig, FoundationIds,
};
use vipt_core::metrics::f_score;
use vipt_core::model::{mean_iou_on_pairs, model_grad_check, model_manifest, Model};
use vipt_core::objective::LossWeights;
use vipt_core::prompt::{fovea_mask, forward_prompted_t, silence_prompts, PromptConfig, PromptIds};
use vipt_core::synthdata::{gen_sequence, pairs_from_sequence, PairOptions, SamplePair, SceneSpec};
use vipt_core::tensor::{bits_equal, Tape, Tensor};
use vipt_core::tuner::checkpoint::{load_from_bytes, save_to_vec, validate_against};
use vipt_core::tuner::{count_specs, fit, ParamFilter, ParamStore, TrainSchedule, TuneMode};

use rand::Rng;

fn pass(criterion: &str, details: &str) {
    println!("criterion {criterion}: PASS — {details}");
}

// ── criterion 1: parameter budget ───────────────────────────────────

#[test]
fn criterion_1_parameter_budget() {
    let f = FoundationConfig::reference();
    let v = variant_counts(&f, 8);
    let within = |count: usize, published: f64| (count as f64 - published).abs() <= 0.05 * published;
    assert!(within(v.vipt_deep, 840_000.0), "vipt-deep {} vs 0.84M", v.vipt_deep);
    assert!(within(v.vipt_shallow, 610_000.0), "vipt-shallow {} vs 0.61M", v.vipt_shallow);
    assert!(within(v.vpt_shallow, 590_000.0), "vpt-shallow {} vs 0.59M", v.vpt_shallow);

    let p = PromptConfig::vipt_deep(f.layers, 8);
    let specs = model_manifest(&f, Some(&p));
    let total = count_specs(&specs, TuneMode::PromptTune, ParamFilter::All);
    let trainable = count_specs(&specs, TuneMode::PromptTune, ParamFilter::Trainable);
    let ratio = trainable as f64 / total as f64;
    assert!(ratio < 0.01, "trainable ratio {ratio}");
    pass(
        "1 (parameter budget)",
        &format!(
            "vipt-deep {} | vipt-shallow {} | vpt-shallow {} | ratio {:.4}%",
            v.vipt_deep,
            v.vipt_shallow,
            v.vpt_shallow,
            100.0 * ratio
        ),
    );
}

// ── criterion 2: zero-prompt reduction ──────────────────────────────

#[test]
fn criterion_2_zero_prompt_reduction() {
    let f = FoundationConfig::tiny();
    let p = PromptConfig::vipt_deep(f.layers, 4);
    let mut prompted = Model::new(f.clone(), Some(p.clone()), 123).unwrap();
    silence_prompts(&mut prompted.store, &p).unwrap();
    let foundation_store = ParamStore::from_specs(&foundation_manifest(&f), 123);
    let f_ids = FoundationIds::resolve(&foundation_store, &f).unwrap();
    let p_f_ids = FoundationIds::resolve(&prompted.store, &f).unwrap();
    let p_ids = PromptIds::resolve(&prompted.store, &f, &p).unwrap();
    let geom = prompted.geom.clone();

    let mut rng = vipt_core::rng::stream(2024, "criterion2");
    for trial in 0..100 {
        let z_rgb = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let x_rgb = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let z_aux = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let x_aux = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(-1.0..1.0));

        let mut t1 = Tape::new();
        let vars1 = prompted.store.bind(&mut t1);
        let a = forward_prompted_t(
            &mut t1, &f, &p, &geom, &vars1, &p_f_ids, &p_ids, &z_rgb, &x_rgb, &z_aux, &x_aux,
        )
        .unwrap();
        let mut t2 = Tape::new();
        let vars2 = foundation_store.bind(&mut t2);
        let b = forward_foundation_t(&mut t2, &f, &geom, &vars2, &f_ids, &z_rgb, &x_rgb).unwrap();

        assert!(bits_equal(&t1.tensor(a.tokens), &t2.tensor(b.tokens)), "tokens differ at trial {trial}");
        assert!(bits_equal(&t1.tensor(a.maps.cls), &t2.tensor(b.maps.cls)), "cls differs at trial {trial}");
        assert!(bits_equal(&t1.tensor(a.maps.offset), &t2.tensor(b.maps.offset)), "offset differs at trial {trial}");
        assert!(bits_equal(&t1.tensor(a.maps.size), &t2.tensor(b.maps.size)), "size differs at trial {trial}");
    }
    pass("2 (zero-prompt reduction)", "100 random inputs bitwise identical");
}

// ── criterion 3: gradient correctness ───────────────────────────────

#[test]
fn criterion_3_gradient_correctness() {
    // D=16, L=2, d=4, patch 8, template 16, search 32.
    let f = FoundationConfig::tiny();
    let p = PromptConfig::vipt_deep(f.layers, 4);
    let mut model = Model::new(f, Some(p), 7).unwrap();
    model.store.partition(TuneMode::FullTune);

    let seq = gen_sequence(&SceneSpec {
        seed: 12345,
        num_frames: 2,
        canvas: (64, 64),
        rgb_corruption_rate: 0.5,
        ..SceneSpec::default()
    })
    .unwrap();
    let pair = vipt_core::synthdata::make_pair(
        &seq,
        0,
        1,
        &PairOptions { template_size: 16, search_size: 32, max_jitter: 0.0 },
        (2.0, -1.5),
    )
    .unwrap();

    let outcome = model_grad_check(&model, &pair, &LossWeights::default(), 1e-5).unwrap();
    assert!(
        outcome.max_rel_error < 1e-4,
        "max rel error {}",
        outcome.max_rel_error
    );
    pass(
        "3 (gradient correctness)",
        &format!(
            "{} coordinates at max rel err {:.3e} ({} structurally gradient-free verified analytically)",
            outcome.coords_checked, outcome.max_rel_error, outcome.coords_dead
        ),
    );
}

// ── criteria 4, 7, 8 share data builders ────────────────────────────

fn toy_dataset(seed0: u64, sequences: usize, frames: usize) -> Vec<SamplePair> {
    let opts = PairOptions { template_size: 32, search_size: 64, max_jitter: 6.0 };
    let mut pairs = Vec::new();
    for i in 0..sequences {
        let seq = gen_sequence(&SceneSpec {
            seed: seed0 + 1000 * i as u64,
            num_frames: frames,
            canvas: (96, 96),
            rgb_corruption_rate: 0.5,
            ..SceneSpec::default()
        })
        .unwrap();
        pairs.extend(pairs_from_sequence(&seq, &opts, seed0 ^ (i as u64)).unwrap());
    }
    pairs
}

// ── criterion 4: freezing contract ──────────────────────────────────

#[test]
fn criterion_4_freezing_contract() {
    let f = FoundationConfig::tiny();
    let p = PromptConfig::vipt_deep(f.layers, 4);
    let mut model = Model::new(f, Some(p), 31).unwrap();
    model.store.partition(TuneMode::PromptTune);

    let opts = PairOptions { template_size: 16, search_size: 32, max_jitter: 4.0 };
    let seq = gen_sequence(&SceneSpec {
        seed: 77,
        num_frames: 12,
        canvas: (64, 64),
        rgb_corruption_rate: 0.5,
        ..SceneSpec::default()
    })
    .unwrap();
    let pairs = pairs_from_sequence(&seq, &opts, 4).unwrap();

    let before: Vec<(bool, Vec<u64>)> = model
        .store
        .entries()
        .iter()
        .map(|e| (e.trainable, e.values.data().iter().map(|v| v.to_bits()).collect()))
        .collect();

    let schedule = TrainSchedule {
        epochs: 1,
        steps_per_epoch: 100,
        base_lr: 1e-3,
        weight_decay: 1e-4,
        decay_epoch: 1,
        decay_factor: 10.0,
        batch_size: 2,
        seed: 5,
    };
    fit(&mut model, &pairs, &schedule, &LossWeights::default()).unwrap();

    let mut frozen = 0usize;
    let mut moved = 0usize;
    for ((trainable, bits), e) in before.into_iter().zip(model.store.entries()) {
        let now: Vec<u64> = e.values.data().iter().map(|v| v.to_bits()).collect();
        if trainable {
            assert_ne!(now, bits, "trainable `{}` never changed", e.name);
            moved += 1;
        } else {
            assert_eq!(now, bits, "frozen `{}` changed", e.name);
            frozen += 1;
        }
    }
    pass(
        "4 (freezing contract)",
        &format!("100 steps: {frozen} frozen entries bitwise intact, {moved} trainable entries moved"),
    );
}

// ── criterion 5: fovea normalization ────────────────────────────────

#[test]
fn criterion_5_fovea_normalization() {
    let mut rng = vipt_core::rng::stream(55, "criterion5");
    for _ in 0..1000 {
        let d = rng.gen_range(1..6);
        let h = rng.gen_range(1..8);
        let w = rng.gen_range(1..8);
        let lambda = rng.gen_range(0.05..5.0);
        let m = Tensor::from_fn(&[d, h, w], |_| rng.gen_range(-25.0..25.0));
        let mask = fovea_mask(&m, lambda).unwrap();
        for c in 0..d {
            let sum: f64 = (0..h * w).map(|k| mask.data()[c * h * w + k]).sum();
            assert!(
                (sum - lambda).abs() < 1e-12,
                "channel sum {sum} vs λ {lambda} on shape [{d},{h},{w}]"
            );
        }
    }
    pass("5 (fovea normalization)", "1000 fuzzed shapes, per-channel mask sums within 1e-12 of λ");
}

// ── criterion 6: metric fidelity ────────────────────────────────────

#[test]
fn criterion_6_metric_fidelity() {
    let f1 = f_score(0.592, 0.596);
    assert!((f1 - 0.594).abs() <= 1e-3, "F {f1}");
    let f2 = f_score(0.560, 0.506);
    assert!((f2 - 0.532).abs() <= 1e-3, "F {f2}");
    pass(
        "6 (metric fidelity)",
        &format!("(Re .596, Pr .592) → F {f1:.4}; (Re .506, Pr .560) → F {f2:.4}"),
    );
}

// ── criteria 7 & 8: learning behavior and determinism ───────────────

struct TrainingRun {
    csv: String,
    checkpoint: Vec<u8>,
    first_loss: f64,
    last_loss: f64,
    foundation_iou: f64,
    prompted_iou: f64,
}

fn criterion_7_schedule() -> TrainSchedule {
    TrainSchedule {
        epochs: 10,
        steps_per_epoch: 200,
        base_lr: 1e-3,
        weight_decay: 1e-4,
        decay_epoch: 8,
        decay_factor: 10.0,
        batch_size: 4,
        seed: 7,
    }
}

/// One full training run of the criterion-7 configuration: toy preset
/// (D=64, L=4), prompter block at every layer, 2000 steps on corrupted
/// synthetic data.
fn run_criterion_7() -> TrainingRun {
    let f = FoundationConfig::toy();
    let p = PromptConfig::vipt_deep(f.layers, 8);
    let mut model = Model::new(f, Some(p), 42).unwrap();
    model.store.partition(TuneMode::PromptTune);

    let train = toy_dataset(100, 8, 40);
    let held_out = toy_dataset(900_000, 4, 25);
    let foundation_iou = mean_iou_on_pairs(&model, &held_out, false).unwrap();

    let result = fit(&mut model, &train, &criterion_7_schedule(), &LossWeights::default()).unwrap();
    let prompted_iou = mean_iou_on_pairs(&model, &held_out, true).unwrap();
    TrainingRun {
        csv: result.to_csv(),
        checkpoint: save_to_vec(&model.store),
        first_loss: result.log[0].loss,
        last_loss: result.log.last().unwrap().loss,
        foundation_iou,
        prompted_iou,
    }
}

fn shared_run() -> &'static TrainingRun {
    static RUN: OnceLock<TrainingRun> = OnceLock::new();
    RUN.get_or_init(run_criterion_7)
}

#[test]
fn criterion_7_learning_behavior() {
    let run = shared_run();
    // (a) ≥ 50% training-loss reduction from step 0.
    assert!(
        run.last_loss < 0.5 * run.first_loss,
        "loss {} -> {} is less than a 50% reduction",
        run.first_loss,
        run.last_loss
    );
    // (b) strictly higher held-out mean IoU than the frozen RGB-only
    // foundation; the margin of the first verified run (+0.8622) is frozen
    // as a regression threshold (slack only for cross-platform libm drift).
    let margin = run.prompted_iou - run.foundation_iou;
    assert!(margin > 0.0, "prompted {} vs foundation {}", run.prompted_iou, run.foundation_iou);
    assert!(margin >= 0.80, "margin {margin} regressed below the frozen 0.80 threshold");
    pass(
        "7 (learning behavior)",
        &format!(
            "loss {:.4} → {:.4} ({:.1}% reduction); held-out IoU {:.4} vs foundation {:.4} (margin +{:.4})",
            run.first_loss,
            run.last_loss,
            100.0 * (1.0 - run.last_loss / run.first_loss),
            run.prompted_iou,
            run.foundation_iou,
            margin
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let first = shared_run();
    let second = run_criterion_7();
    assert_eq!(first.csv, second.csv, "loss CSVs differ between identical runs");
    assert_eq!(
        first.checkpoint, second.checkpoint,
        "final checkpoints differ between identical runs"
    );
    pass(
        "8 (determinism)",
        &format!(
            "two runs byte-identical: {}-byte CSV, {}-byte checkpoint",
            first.csv.len(),
            first.checkpoint.len()
        ),
    );
}

// ── criterion 9: checkpoint round trip ──────────────────────────────

#[test]
fn criterion_9_checkpoint_round_trip() {
    let f = FoundationConfig::tiny();
    let p = PromptConfig::vipt_deep(f.layers, 4);
    let mut model = Model::new(f.clone(), Some(p.clone()), 99).unwrap();
    model.store.partition(TuneMode::PromptTune);

    let first = save_to_vec(&model.store);
    let loaded = load_from_bytes(&first).unwrap();
    let second = save_to_vec(&loaded);
    assert_eq!(first, second, "save→load→save not byte-identical");

    let mut bad_magic = first.clone();
    bad_magic[3] ^= 0x40;
    assert!(matches!(
        load_from_bytes(&bad_magic),
        Err(Error::Checkpoint(CheckpointError::BadMagic))
    ));

    let mut bad_version = first.clone();
    bad_version[9] = 0x7f;
    assert!(matches!(
        load_from_bytes(&bad_version),
        Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(_)))
    ));

    let truncated = &first[..first.len() - 5];
    assert!(matches!(
        load_from_bytes(truncated),
        Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
    ));

    let mut wrong = FoundationConfig::tiny();
    wrong.ffn_dim *= 2;
    let wrong_specs = model_manifest(&wrong, Some(&p));
    assert!(matches!(
        validate_against(&loaded, &wrong_specs),
        Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
    ));

    pass(
        "9 (checkpoint round trip)",
        "byte-identical resave; bad magic / bad version / truncation / shape mismatch all rejected distinctly",
    );
}

// ── non-gating exploratory check ────────────────────────────────────

/// Prompter-count trend: held-out IoU per placement interval, reported but
/// not asserted (desk-scale monotonicity is not guaranteed).
#[test]
fn exploratory_prompter_count_trend() {
    let f = FoundationConfig::toy();
    let train = toy_dataset(100, 8, 40);
    let held_out = toy_dataset(900_000, 4, 25);
    let schedule = TrainSchedule {
        epochs: 4,
        steps_per_epoch: 150,
        base_lr: 1e-3,
        weight_decay: 1e-4,
        decay_epoch: 4,
        decay_factor: 10.0,
        batch_size: 4,
        seed: 7,
    };
    let mut line = String::from("exploratory (prompter-count trend, non-gating): held-out IoU");
    for interval in [4usize, 2, 1] {
        let p = PromptConfig::vipt_interval(interval, f.layers, 8);
        let blocks = p.placement.len();
        let mut model = Model::new(f.clone(), Some(p), 42).unwrap();
        model.store.partition(TuneMode::PromptTune);
        fit(&mut model, &train, &schedule, &LossWeights::default()).unwrap();
        let iou = mean_iou_on_pairs(&model, &held_out, true).unwrap();
        line.push_str(&format!(" | {blocks} block(s): {iou:.4}"));
    }
    println!("{line}");
}
