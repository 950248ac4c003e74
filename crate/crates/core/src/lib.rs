//! Stage-wise federated learning toolkit.
//!
//! A server pretrains a small patch-token backbone with masked-patch
//! reconstruction, serves it to clients stage by stage, averages their
//! fine-tuned backbones weighted by example count, and can refuse an
//! aggregated candidate that fails a paired t-test against a control arm.

pub mod harness;
pub mod mim;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod transport;
pub mod trust;

mod serde_float;

pub use model::{
    attach_head, evaluate, forward, gradient, init_model, train_sgd, Image, LabeledDataset,
    ModelArchitecture, ModelError, ModelKind, ParameterSet, SgdConfig, TensorLayout,
};
pub use protocol::{aggregate, ClientRequest, ClientUpdate, ServerState, StageRecord};
pub use trust::{gate, GateConfig, GateDecision, PairedSample, TTestReport, Verdict};
