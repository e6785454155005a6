//! Fixtures shared by the benchmarks.

use dynshift::dynshift::{
    BandwidthBank, FeatureNorm, IterationSchedule, ShiftModel, DEFAULT_CANDIDATES, DEFAULT_ITERATIONS,
};
use dynshift::synth::{gen_scene, Frame, SynthConfig, FEATURE_WIDTH};

/// Default synthetic frame `index`.
pub fn frame(index: u64) -> Frame {
    gen_scene(&SynthConfig::default(), index)
        .expect("default config generates")
        .into()
}

/// Randomly initialised model of the default architecture.
pub fn model() -> ShiftModel {
    ShiftModel::init(
        BandwidthBank::new(DEFAULT_CANDIDATES.to_vec()).expect("default candidates"),
        IterationSchedule::uniform(DEFAULT_ITERATIONS).expect("default schedule"),
        FeatureNorm::identity(FEATURE_WIDTH),
        &[64, 64],
        0,
    )
    .expect("default model")
}
