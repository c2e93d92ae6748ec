//! Fixtures shared by the criterion benches: a synthetic DoS stream and a
//! lowered model calibrated (untrained) on it. Inference cost does not
//! depend on the weight values, so training is skipped.

use canids_core::attacks::{synthesize, AttackSpec, TrafficProfile};
use canids_core::ingest::{AttackKind, CanFrame, DEFAULT_WINDOW, FEATURES_PER_FRAME};
use canids_core::int_model::{lower, IntMlp};
use canids_core::model::{FakeQuantMlp, DEFAULT_BITS, DEFAULT_HIDDEN};
use canids_core::train::Samples;

pub const SEED: u64 = 42;

pub fn stream(seconds: f64) -> Vec<CanFrame> {
    let profile = TrafficProfile::vehicle(seconds);
    synthesize(
        &profile,
        &AttackSpec::default_for(AttackKind::Dos, seconds),
        SEED,
    )
    .expect("synthetic stream")
    .frames
}

pub fn default_model(frames: &[CanFrame]) -> IntMlp {
    let mut dims = vec![DEFAULT_WINDOW * FEATURES_PER_FRAME];
    dims.extend_from_slice(&DEFAULT_HIDDEN);
    dims.push(2);
    let mut model =
        FakeQuantMlp::new(&dims, DEFAULT_BITS, DEFAULT_BITS, SEED).expect("default dims");
    let samples = Samples::from_frames(frames, DEFAULT_WINDOW).expect("windows");
    model
        .calibrate_scales(&samples.inputs)
        .expect("calibration");
    lower(&model).expect("lowering")
}
