//! Quantised-MLP intrusion detection for CAN traffic.
//!
//! The crate covers the whole software path: parsing Car Hacking style logs,
//! FIFO windowing and feature encoding ([`ingest`]), quantisation-aware
//! training of a small MLP ([`model`], [`train`]), lowering to an
//! integer-only threshold-activation model ([`int_model`]), synthetic attack
//! traffic ([`attacks`]), accuracy and latency evaluation ([`eval`]) and a
//! two-stage streaming replay ([`pipeline`]).

pub mod attacks;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod int_model;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod reference;
pub mod train;

pub use attacks::{AttackSpec, Traffic, TrafficProfile};
pub use error::{Error, Result};
pub use eval::{BenchResult, ConfusionMatrix, EvalReport, Metrics};
pub use ingest::{AttackKind, CanFrame, FeatureVector, FrameWindow, Label, WindowBuffer};
pub use int_model::{
    lower, verify_equivalence, AccumulatorBound, EquivalenceReport, IntMlp, LoweredModel,
};
pub use model::{FakeQuantMlp, TrainingMetadata};
pub use pipeline::{replay, ReplayConfig, ReplayReport};
pub use quant::QuantSpec;
pub use train::{dse_sweep, train, DseRow, Samples, TrainConfig, TrainOutcome};
