//! Subcommand implementations.

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use vipt_core::audit::audit_report;
use vipt_core::config::{GenSpec, ViptConfig};
use vipt_core::error::{Error, Result};
use vipt_core::metrics::{self, FrameResult};
use vipt_core::model::Model;
use vipt_core::synthdata::{
    self, crop_modality, crop_window, gen_sequence, pairs_from_sequence, read_dataset,
    PairOptions, SamplePair, SceneSequence,
};
use vipt_core::tuner::{self, checkpoint, count_specs, ParamFilter, TuneMode};

fn ensure_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn gen(spec_path: &Path, out: &Path, force: bool) -> Result<ExitCode> {
    let spec = GenSpec::load(spec_path)?;
    ensure_out_dir(out, force)?;
    let scenes = spec.scene_specs()?;
    let mut seqs = Vec::with_capacity(scenes.len());
    let mut frames = 0usize;
    for scene in &scenes {
        let seq = gen_sequence(scene)?;
        frames += seq.frames.len();
        seqs.push(seq);
    }
    synthdata::write_dataset(&seqs, out)?;
    fs::write(out.join("effective_spec.toml"), spec.to_toml())?;
    println!("wrote {} sequences, {frames} frames to {}", seqs.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_run_config(path: &Path, mode_override: Option<&str>) -> Result<ViptConfig> {
    let mut cfg = ViptConfig::load(path)?;
    if let Some(mode) = mode_override {
        cfg.train.mode = mode.to_string();
    }
    TuneMode::parse(&cfg.train.mode)?;
    Ok(cfg)
}

fn materialize_pairs(cfg: &ViptConfig, data_dir: &Path) -> Result<Vec<SamplePair>> {
    let seqs = read_dataset(data_dir)?;
    let opts = PairOptions {
        template_size: cfg.foundation.template_size,
        search_size: cfg.foundation.search_size,
        max_jitter: cfg.train.jitter,
    };
    let mut pairs = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        pairs.extend(pairs_from_sequence(seq, &opts, cfg.schedule.seed ^ (i as u64) << 7)?);
    }
    Ok(pairs)
}

fn resolve_data_dir(flag: Option<&Path>, from_config: &str, what: &str) -> Result<std::path::PathBuf> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None if !from_config.is_empty() => Ok(from_config.into()),
        None => Err(Error::Config(format!(
            "no {what} dataset given (pass --data or set it in the config)"
        ))),
    }
}

pub fn train(
    config_path: &Path,
    data: Option<&Path>,
    out: &Path,
    mode_override: Option<&str>,
    dry_run: bool,
    force: bool,
) -> Result<ExitCode> {
    let cfg = load_run_config(config_path, mode_override)?;
    let mode = cfg.tune_mode()?;
    let foundation = cfg.foundation_config();
    let prompt = cfg.prompt_config()?;

    let specs = vipt_core::model::model_manifest(&foundation, prompt.as_ref());
    let trainable = count_specs(&specs, mode, ParamFilter::Trainable);
    let total = count_specs(&specs, mode, ParamFilter::All);
    if trainable == 0 {
        return Err(Error::Config(format!(
            "mode `{}` leaves nothing trainable; training refused",
            cfg.train.mode
        )));
    }
    if dry_run {
        println!(
            "trainable {trainable} of {total} ({:.4}%)",
            100.0 * trainable as f64 / total as f64
        );
        return Ok(ExitCode::SUCCESS);
    }

    let data_dir = resolve_data_dir(data, &cfg.data.train, "training")?;
    ensure_out_dir(out, force)?;
    let pairs = materialize_pairs(&cfg, &data_dir)?;
    let mut model = Model::new(foundation.clone(), prompt.clone(), cfg.schedule.seed)?;
    model.store.partition(mode);
    let schedule = cfg.schedule();
    let result = tuner::fit(&mut model, &pairs, &schedule, &cfg.weights())?;

    fs::write(out.join("loss.csv"), result.to_csv())?;
    checkpoint::save(&model.store, &out.join("checkpoint.vipt"))?;
    fs::write(
        out.join("audit.txt"),
        audit_report(&foundation, prompt.as_ref(), mode, cfg.prompt.latent_dim),
    )?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml())?;
    let last = result.log.last().expect("at least one step");
    println!(
        "trained {} steps; loss {:.4} -> {:.4}; wrote {}",
        result.log.len(),
        result.log[0].loss,
        last.loss,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Per-frame predicted boxes (pixels) and confidences for one sequence.
type TrackOutput = (Vec<Option<[f64; 4]>>, Vec<f64>);

/// One-pass tracking over a sequence: template from frame 0 ground truth,
/// search crop centered on the previous prediction.
fn track_sequence(
    model: &Model,
    seq: &SceneSequence,
    cfg: &ViptConfig,
    oracle: bool,
) -> Result<TrackOutput> {
    let (h, w) = seq.canvas;
    let t_side = cfg.foundation.template_size;
    let s_side = cfg.foundation.search_size;
    let first = &seq.frames[0];
    let (t_rgb, _) = crop_modality(&first.rgb, 3, seq.canvas, first.gt.center(), t_side);
    let (t_aux, _) = crop_modality(&first.aux, 1, seq.canvas, first.gt.center(), t_side);
    let prompted = model.prompt.is_some();

    let mut center = first.gt.center();
    let mut boxes = Vec::with_capacity(seq.frames.len());
    let mut confidences = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        if oracle {
            boxes.push(Some([frame.gt.x, frame.gt.y, frame.gt.w, frame.gt.h]));
            confidences.push(1.0);
            center = frame.gt.center();
            continue;
        }
        let (s_rgb, _) = crop_modality(&frame.rgb, 3, seq.canvas, center, s_side);
        let (s_aux, _) = crop_modality(&frame.aux, 1, seq.canvas, center, s_side);
        let (pred, conf) = model.predict_images(&t_rgb, &s_rgb, &t_aux, &s_aux, prompted)?;
        let (ox, oy) = crop_window(center, s_side);
        let side = s_side as f64;
        let [cx, cy, bw, bh] = pred.box_cxcywh;
        let px = ox as f64 + (cx - bw / 2.0) * side;
        let py = oy as f64 + (cy - bh / 2.0) * side;
        boxes.push(Some([px, py, bw * side, bh * side]));
        confidences.push(conf);
        center = (
            (ox as f64 + cx * side).clamp(0.0, w as f64),
            (oy as f64 + cy * side).clamp(0.0, h as f64),
        );
    }
    Ok((boxes, confidences))
}

pub fn eval(
    config_path: &Path,
    checkpoint_path: &Path,
    data: Option<&Path>,
    out: &Path,
    oracle: bool,
    force: bool,
) -> Result<ExitCode> {
    let cfg = load_run_config(config_path, None)?;
    let foundation = cfg.foundation_config();
    let prompt = cfg.prompt_config()?;
    let store = checkpoint::load(checkpoint_path)?;
    let model = Model::from_store(foundation, prompt, store)?;

    let data_dir = resolve_data_dir(data, &cfg.data.eval, "evaluation")?;
    let seqs = read_dataset(&data_dir)?;
    ensure_out_dir(out, force)?;
    let results_dir = out.join("results");
    fs::create_dir_all(&results_dir)?;

    let mut frames: Vec<FrameResult> = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let (boxes, confidences) = track_sequence(&model, seq, &cfg, oracle)?;
        metrics::write_boxes(&boxes, &results_dir.join(format!("{i:03}.txt")))?;
        metrics::write_confidences(&confidences, &results_dir.join(format!("{i:03}_confidence.txt")))?;
        for (f, b) in boxes.iter().enumerate() {
            let gt = seq.frames[f].gt;
            frames.push(FrameResult {
                pred: *b,
                gt: Some([gt.x, gt.y, gt.w, gt.h]),
                confidence: Some(confidences[f]),
            });
        }
    }

    let report = metrics::evaluate(&frames)?;
    let mut text = String::new();
    text.push_str(&format!("frames {}\n", frames.len()));
    text.push_str(&format!("precision_at_20 {}\n", report.precision_at_20));
    text.push_str(&format!("success_auc {}\n", report.success_auc));
    text.push_str(&format!("f_score {}\n", report.f_score));
    text.push_str(&format!("pr {}\n", report.pr));
    text.push_str(&format!("re {}\n", report.re));
    fs::write(out.join("report.txt"), &text)?;
    let curve_csv = |curve: &[f64]| -> String {
        let mut s = String::from("threshold_index,value\n");
        for (i, v) in curve.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    };
    fs::write(out.join("precision_curve.csv"), curve_csv(&report.precision_curve))?;
    fs::write(out.join("success_curve.csv"), curve_csv(&report.success_curve))?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml())?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

const GRADCHECK_PARAM_LIMIT: usize = 100_000;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(config_path: &Path) -> Result<ExitCode> {
    let cfg = load_run_config(config_path, None)?;
    let foundation = cfg.foundation_config();
    let prompt = cfg.prompt_config()?;
    let specs = vipt_core::model::model_manifest(&foundation, prompt.as_ref());
    let total = count_specs(&specs, TuneMode::FullTune, ParamFilter::All);
    if total > GRADCHECK_PARAM_LIMIT {
        return Err(Error::Config(format!(
            "config has {total} parameters; gradcheck is limited to {GRADCHECK_PARAM_LIMIT}"
        )));
    }

    let mut model = Model::new(foundation.clone(), prompt, cfg.schedule.seed)?;
    model.store.partition(TuneMode::FullTune);
    let pair = gradcheck_pair(&cfg)?;
    let outcome = vipt_core::model::model_grad_check(&model, &pair, &cfg.weights(), 1e-5)?;
    let pass = outcome.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "gradcheck over {} coordinates ({} structurally gradient-free): max relative error {:.3e} -> {}",
        outcome.coords_checked,
        outcome.coords_dead,
        outcome.max_rel_error,
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

/// Deterministic single sample at the config's crop geometry.
fn gradcheck_pair(cfg: &ViptConfig) -> Result<SamplePair> {
    let canvas = (cfg.foundation.search_size * 2).max(48);
    let seq = gen_sequence(&synthdata::SceneSpec {
        seed: 12345,
        num_frames: 2,
        canvas: (canvas, canvas),
        rgb_corruption_rate: 0.5,
        ..synthdata::SceneSpec::default()
    })?;
    synthdata::make_pair(
        &seq,
        0,
        1,
        &PairOptions {
            template_size: cfg.foundation.template_size,
            search_size: cfg.foundation.search_size,
            max_jitter: 0.0,
        },
        (2.0, -1.5),
    )
}

pub fn audit(config_path: &Path) -> Result<ExitCode> {
    let cfg = load_run_config(config_path, None)?;
    let foundation = cfg.foundation_config();
    let prompt = cfg.prompt_config()?;
    let mode = cfg.tune_mode()?;
    print!("{}", audit_report(&foundation, prompt.as_ref(), mode, cfg.prompt.latent_dim));
    Ok(ExitCode::SUCCESS)
}
