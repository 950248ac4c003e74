//! End-to-end experiment driver.
//!
//! Pretrains a base backbone, then walks the configured stages. Every client
//! fine-tunes from the original pretrained base (control arm) and, from
//! stage 2 on, also from the server's rolling base (experiment arm). The
//! experiment-arm updates feed the server; stage-1 control updates seed it.

mod config;
mod published;
mod report;
mod run;

use thiserror::Error;

use crate::protocol::ProtocolError;

pub use config::{demo_scenario, ClientConfig, PretrainConfig, ScenarioConfig, StageConfig};
pub use published::{published_rows, replay_paper_stats, PUBLISHED_CONTROL, PUBLISHED_EXPERIMENT};
pub use report::{
    emit_gain_curve, gain_curve, gain_curve_csv, ClientRow, GainPoint, PretrainSummary, RunReport,
    StageSummary, SCHEMA_VERSION,
};
pub use run::{execute, pretrain_base, pretrain_scenario, run_scenario, ScenarioRun};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no paired stages to build a gain curve from")]
    EmptySeries,
    #[error("{context}: {source}")]
    Step {
        context: String,
        #[source]
        source: ProtocolError,
    },
}

impl HarnessError {
    pub(crate) fn at<E: Into<ProtocolError>>(context: impl Into<String>) -> impl FnOnce(E) -> Self {
        let context = context.into();
        move |e| HarnessError::Step { context, source: e.into() }
    }
}
