//! Server/client stage protocol.
//!
//! A client asks for a model sized to its class count and receives the
//! current base backbone with a fresh linear head. After local fine-tuning it
//! returns only the backbone plus its training-example count. Once `K`
//! updates are pending the stage ends: the updates are averaged weighted by
//! example count, optionally gated, and the result becomes the base served in
//! the next stage.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    attach_head, has_head, strip_head, train_sgd, LabeledDataset, ModelError, ParameterSet,
    SgdConfig,
};
use crate::rng;
use crate::trust::{self, GateConfig, GateDecision, PairedSample, StatsError, Verdict};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("client `{0}` already active in this stage")]
    DuplicateClient(String),
    #[error("incompatible update: {0}")]
    IncompatibleUpdate(String),
    #[error("stage already holds {0} updates")]
    StageOverflow(usize),
    #[error("stage has {have} of {need} updates")]
    StageIncomplete { have: usize, need: usize },
    #[error("no updates to aggregate")]
    EmptyStage,
    #[error("arithmetic overflow: {0}")]
    Arithmetic(String),
    #[error("client `{client}` was served in stage {served}, current stage is {current}")]
    StaleStage { client: String, served: u64, current: u64 },
    #[error("client `{0}` never requested a model")]
    NotServed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl ProtocolError {
    /// Stable short name used on the wire and in exit messages.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidRequest(_) => "invalid-request",
            Self::DuplicateClient(_) => "duplicate-client",
            Self::IncompatibleUpdate(_) => "incompatible-update",
            Self::StageOverflow(_) => "stage-overflow",
            Self::StageIncomplete { .. } => "stage-incomplete",
            Self::EmptyStage => "empty-stage",
            Self::Arithmetic(_) => "arithmetic",
            Self::StaleStage { .. } => "stale-stage",
            Self::NotServed(_) => "not-served",
            Self::Model(_) => "model",
            Self::Stats(_) => "stats",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientRequest {
    pub client_id: String,
    pub num_classes: usize,
}

/// What a client sends back: fine-tuned backbone and its example count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    client_id: String,
    backbone: ParameterSet,
    num_examples: u64,
}

impl ClientUpdate {
    pub fn new(
        client_id: impl Into<String>,
        backbone: ParameterSet,
        num_examples: u64,
    ) -> Result<Self, ProtocolError> {
        if has_head(backbone.layout()) {
            return Err(ProtocolError::IncompatibleUpdate(
                "updates must not carry classification-head entries".into(),
            ));
        }
        if num_examples == 0 {
            return Err(ProtocolError::InvalidRequest("num_examples must be ≥ 1".into()));
        }
        Ok(Self { client_id: client_id.into(), backbone, num_examples })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn backbone(&self) -> &ParameterSet {
        &self.backbone
    }

    pub fn num_examples(&self) -> u64 {
        self.num_examples
    }
}

/// Elementwise `Σ Z_i·M_i / Σ M_i`, accumulated in slice order.
///
/// Each output coordinate is clamped to the inputs' range at that
/// coordinate, absorbing last-ulp rounding so the result stays a convex
/// combination.
pub fn weighted_average(updates: &[(&ParameterSet, u64)]) -> Result<ParameterSet, ProtocolError> {
    let (first, _) = updates.first().ok_or(ProtocolError::EmptyStage)?;
    let layout = first.layout();
    if let Some((p, _)) = updates.iter().find(|(p, _)| !p.layout().is_compatible(layout)) {
        return Err(ProtocolError::IncompatibleUpdate(format!(
            "layout with {} values does not match {}",
            p.len(),
            first.len()
        )));
    }
    let total = updates.iter().try_fold(0u64, |acc, (_, m)| acc.checked_add(*m)).ok_or_else(
        || ProtocolError::Arithmetic("sum of example counts overflows u64".into()),
    )?;
    if total == 0 {
        return Err(ProtocolError::InvalidRequest("example counts sum to zero".into()));
    }
    let mut acc = vec![0.0; first.len()];
    let mut lo = first.values().to_vec();
    let mut hi = lo.clone();
    for (p, m) in updates {
        let w = *m as f64;
        for (j, &z) in p.values().iter().enumerate() {
            acc[j] += z * w;
            lo[j] = lo[j].min(z);
            hi[j] = hi[j].max(z);
        }
    }
    let total = total as f64;
    let values = acc
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(a, (l, h))| (a / total).clamp(*l, *h))
        .collect();
    Ok(ParameterSet::new(layout.clone(), values)?)
}

/// Weighted average of client updates, summed in `client_id` order so the
/// result does not depend on arrival order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParameterSet, ProtocolError> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(ProtocolError::DuplicateClient(w[0].client_id.clone()));
    }
    let pairs: Vec<(&ParameterSet, u64)> =
        sorted.iter().map(|u| (&u.backbone, u.num_examples)).collect();
    weighted_average(&pairs)
}

/// Result of one local fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRun {
    pub update: ClientUpdate,
    /// Fine-tuned model including the head; stays with the client.
    pub fine_tuned: ParameterSet,
    pub loss_history: Vec<f64>,
}

/// Fine-tunes the served model on local data and strips the head.
pub fn client_run(
    client_id: &str,
    model_with_head: &ParameterSet,
    local_data: &LabeledDataset,
    config: &SgdConfig,
) -> Result<ClientRun, ProtocolError> {
    let (fine_tuned, loss_history) = train_sgd(model_with_head, local_data, config)?;
    let backbone = strip_head(&fine_tuned)?;
    let update = ClientUpdate::new(client_id, backbone, local_data.len() as u64)?;
    Ok(ClientRun { update, fine_tuned, loss_history })
}

/// Accuracies gathered for the trust gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInput {
    pub sample: PairedSample,
    pub config: GateConfig,
}

/// Ledger entry for one completed stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage_index: u64,
    pub client_ids: Vec<String>,
    pub num_examples: Vec<u64>,
    pub candidate: ParameterSet,
    pub gate: Option<GateDecision>,
    pub adopted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    base: ParameterSet,
    stage_index: u64,
    pending: Vec<ClientUpdate>,
    clients_per_stage: usize,
    gate_every: u64,
    head_seed_root: u64,
    served: BTreeMap<String, u64>,
    history: Vec<StageRecord>,
}

impl ServerState {
    /// Starts at stage 1 with `base` (backbone only) and `K` clients per
    /// stage. The gate is scheduled every 4 stages unless changed.
    pub fn new(base: ParameterSet, clients_per_stage: usize) -> Result<Self, ProtocolError> {
        if clients_per_stage == 0 {
            return Err(ProtocolError::InvalidRequest("clients_per_stage must be ≥ 1".into()));
        }
        if has_head(base.layout()) {
            return Err(ProtocolError::InvalidRequest("server base must be backbone-only".into()));
        }
        Ok(Self {
            base,
            stage_index: 1,
            pending: Vec::new(),
            clients_per_stage,
            gate_every: GateConfig::default().gate_every,
            head_seed_root: 0,
            served: BTreeMap::new(),
            history: Vec::new(),
        })
    }

    pub fn with_gate_every(mut self, every: u64) -> Self {
        self.gate_every = every.max(1);
        self
    }

    /// Root seed from which [`ServerState::head_seed_for`] derives head seeds.
    pub fn with_head_seed_root(mut self, seed: u64) -> Self {
        self.head_seed_root = seed;
        self
    }

    pub fn base(&self) -> &ParameterSet {
        &self.base
    }

    pub fn stage_index(&self) -> u64 {
        self.stage_index
    }

    pub fn pending(&self) -> &[ClientUpdate] {
        &self.pending
    }

    pub fn clients_per_stage(&self) -> usize {
        self.clients_per_stage
    }

    pub fn gate_every(&self) -> u64 {
        self.gate_every
    }

    pub fn history(&self) -> &[StageRecord] {
        &self.history
    }

    pub fn gate_scheduled(&self) -> bool {
        self.stage_index.is_multiple_of(self.gate_every)
    }

    /// Head seed for `client_id` in the current stage.
    pub fn head_seed_for(&self, client_id: &str) -> u64 {
        rng::derive_str(rng::derive(self.head_seed_root, self.stage_index), client_id)
    }

    /// Serves the current stage's base with a fresh head.
    ///
    /// Registers the client for this stage so that its update can later be
    /// matched to the base it was served; base and pending updates are never
    /// touched.
    pub fn handle_request(
        &mut self,
        req: &ClientRequest,
        head_seed: u64,
    ) -> Result<ParameterSet, ProtocolError> {
        if req.client_id.is_empty() {
            return Err(ProtocolError::InvalidRequest("empty client_id".into()));
        }
        if req.num_classes < 2 {
            return Err(ProtocolError::InvalidRequest(format!(
                "num_classes must be ≥ 2, got {}",
                req.num_classes
            )));
        }
        if self.served.get(&req.client_id) == Some(&self.stage_index)
            || self.pending.iter().any(|u| u.client_id == req.client_id)
        {
            return Err(ProtocolError::DuplicateClient(req.client_id.clone()));
        }
        let model = attach_head(&self.base, req.num_classes, head_seed)?;
        self.served.insert(req.client_id.clone(), self.stage_index);
        Ok(model)
    }

    pub fn submit_update(&mut self, update: ClientUpdate) -> Result<(), ProtocolError> {
        if !update.backbone.layout().is_compatible(self.base.layout()) {
            return Err(ProtocolError::IncompatibleUpdate(format!(
                "update from `{}` does not match the base layout",
                update.client_id
            )));
        }
        match self.served.get(&update.client_id) {
            None => return Err(ProtocolError::NotServed(update.client_id)),
            Some(&s) if s != self.stage_index => {
                return Err(ProtocolError::StaleStage {
                    client: update.client_id,
                    served: s,
                    current: self.stage_index,
                })
            }
            Some(_) => {}
        }
        if self.pending.len() >= self.clients_per_stage {
            return Err(ProtocolError::StageOverflow(self.pending.len()));
        }
        if self.pending.iter().any(|u| u.client_id == update.client_id) {
            return Err(ProtocolError::DuplicateClient(update.client_id));
        }
        self.pending.push(update);
        Ok(())
    }

    pub fn is_stage_full(&self) -> bool {
        self.pending.len() == self.clients_per_stage
    }

    /// Closes a full stage: aggregates, gates when scheduled and an input is
    /// supplied, and advances the stage index.
    pub fn end_stage(&mut self, gate: Option<&GateInput>) -> Result<StageRecord, ProtocolError> {
        if self.pending.len() != self.clients_per_stage {
            return Err(ProtocolError::StageIncomplete {
                have: self.pending.len(),
                need: self.clients_per_stage,
            });
        }
        let candidate = aggregate(&self.pending)?;
        let decision = match gate {
            Some(input) if self.gate_scheduled() => Some(trust::gate(&input.sample, &input.config)?),
            _ => None,
        };
        let adopted = decision.as_ref().is_none_or(|d| d.verdict == Verdict::RetainCandidate);
        let mut ids: Vec<(String, u64)> =
            self.pending.iter().map(|u| (u.client_id.clone(), u.num_examples)).collect();
        ids.sort();
        let record = StageRecord {
            stage_index: self.stage_index,
            client_ids: ids.iter().map(|(c, _)| c.clone()).collect(),
            num_examples: ids.iter().map(|(_, m)| *m).collect(),
            candidate: candidate.clone(),
            gate: decision,
            adopted,
        };
        if adopted {
            self.base = candidate;
        }
        self.pending.clear();
        self.stage_index += 1;
        self.history.push(record.clone());
        Ok(record)
    }
}
