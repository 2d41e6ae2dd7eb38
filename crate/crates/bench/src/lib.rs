//! Shared fixtures for the criterion benches.

use vipt_core::foundation::FoundationConfig;
use vipt_core::model::Model;
use vipt_core::prompt::PromptConfig;
use vipt_core::synthdata::{gen_sequence, pairs_from_sequence, PairOptions, SamplePair, SceneSpec};
use vipt_core::tuner::TuneMode;

/// Desk-scale prompted model in prompt-tune mode.
pub fn toy_model() -> Model {
    let f = FoundationConfig::toy();
    let p = PromptConfig::vipt_deep(f.layers, 8);
    let mut model = Model::new(f, Some(p), 42).expect("toy model");
    model.store.partition(TuneMode::PromptTune);
    model
}

/// A handful of training pairs at the toy crop geometry.
pub fn toy_pairs(n: usize) -> Vec<SamplePair> {
    let seq = gen_sequence(&SceneSpec {
        seed: 11,
        num_frames: n,
        canvas: (96, 96),
        rgb_corruption_rate: 0.5,
        ..SceneSpec::default()
    })
    .expect("sequence");
    pairs_from_sequence(
        &seq,
        &PairOptions { template_size: 32, search_size: 64, max_jitter: 6.0 },
        3,
    )
    .expect("pairs")
}
