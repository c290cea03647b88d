//! Pose-error metrics, recall aggregation, synthetic scenes and dataset IO.

pub mod bop;
pub mod metrics;
pub mod synth;

pub use metrics::{
    average_recall, mspd, mspd_thresholds, mssd, mssd_thresholds, ContinuousSymmetry, InstanceErrors, RecallReport,
    SymmetrySet, CONTINUOUS_STEP_DEG,
};
pub use synth::{GroundTruthInstance, SceneSynthesizer, SynthNoise, SynthScene};
