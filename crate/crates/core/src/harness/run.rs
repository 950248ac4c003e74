use rayon::prelude::*;

use crate::mim::{pretrain, PretrainOutcome};
use crate::model::{attach_head, evaluate, ParameterSet};
use crate::protocol::{client_run, ClientRequest, ClientUpdate, GateInput, ServerState};
use crate::synth::{generate, unlabeled};
use crate::trust::{gate, PairedSample};

use super::report::{gain_curve, ClientRow, PretrainSummary, RunReport, StageSummary, SCHEMA_VERSION};
use super::{ClientConfig, HarnessError, PretrainConfig, ScenarioConfig};

/// Everything a run produces, including the weights the report omits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub report: RunReport,
    pub pretrained: ParameterSet,
    pub final_base: ParameterSet,
}

/// Pools unlabeled images from the pretext domains and runs masked-patch
/// pretraining. Seeds are used as given.
pub fn pretrain_base(config: &PretrainConfig) -> Result<(PretrainOutcome, usize), HarnessError> {
    let mut images = Vec::new();
    for d in &config.domains {
        let imgs = unlabeled(d, config.images_per_domain)
            .map_err(HarnessError::at(format!("pretext domain `{}`", d.domain_id)))?;
        images.extend(imgs);
    }
    let outcome =
        pretrain(&images, &config.arch, &config.mim).map_err(HarnessError::at("pretraining"))?;
    Ok((outcome, images.len()))
}

/// [`pretrain_base`] with the scenario's seeds mixed with its global seed,
/// exactly as [`execute`] does.
pub fn pretrain_scenario(config: &ScenarioConfig) -> Result<(PretrainOutcome, usize), HarnessError> {
    config.validate()?;
    pretrain_base(&config.resolved().pretrain)
}

struct ClientOutcome {
    control_accuracy: f64,
    control_update: ClientUpdate,
    experiment: Option<(f64, ClientUpdate)>,
}

fn run_client(
    c: &ClientConfig,
    stage: u64,
    original: &ParameterSet,
    experiment_start: Option<&ParameterSet>,
) -> Result<ClientOutcome, HarnessError> {
    let at = |what: &str| format!("stage {stage}, client `{}`: {what}", c.client_id);
    let (train, test) =
        generate(&c.domain, c.n_train, c.n_test).map_err(HarnessError::at(at("data")))?;
    let sgd = c.sgd();
    let control_model = attach_head(original, train.num_classes(), c.head_seed)
        .map_err(HarnessError::at(at("control model")))?;
    let control = client_run(&c.client_id, &control_model, &train, &sgd)
        .map_err(HarnessError::at(at("control arm")))?;
    let control_accuracy =
        100.0 * evaluate(&control.fine_tuned, &test).map_err(HarnessError::at(at("control eval")))?;
    let experiment = match experiment_start {
        Some(model) => {
            let run = client_run(&c.client_id, model, &train, &sgd)
                .map_err(HarnessError::at(at("experiment arm")))?;
            let acc = 100.0
                * evaluate(&run.fine_tuned, &test).map_err(HarnessError::at(at("experiment eval")))?;
            Some((acc, run.update))
        }
        None => None,
    };
    Ok(ClientOutcome { control_accuracy, control_update: control.update, experiment })
}

pub fn execute(config: &ScenarioConfig) -> Result<ScenarioRun, HarnessError> {
    config.validate()?;
    let cfg = config.resolved();
    let (pre, num_images) = pretrain_base(&cfg.pretrain)?;
    let original = pre.encoder;
    let mut server = ServerState::new(original.clone(), cfg.clients_per_stage())
        .map_err(HarnessError::at("server init"))?
        .with_gate_every(cfg.gate.gate_every)
        .with_head_seed_root(cfg.global_seed);

    let mut rows = Vec::new();
    let mut stages = Vec::new();
    let (mut controls, mut experiments) = (Vec::new(), Vec::new());
    for (s, stage) in cfg.stages.iter().enumerate() {
        let stage_no = s as u64 + 1;
        let first = stage_no == 1;
        let server_stage = first || cfg.run_experiment_arm;

        // Registration mutates the server, so it happens in client order
        // before the parallel fine-tuning.
        let mut starts = Vec::with_capacity(stage.clients.len());
        for c in &stage.clients {
            if !server_stage {
                starts.push(None);
                continue;
            }
            let req = ClientRequest {
                client_id: c.client_id.clone(),
                num_classes: c.domain.num_classes,
            };
            let served = server
                .handle_request(&req, c.head_seed)
                .map_err(HarnessError::at(format!("stage {stage_no}, client `{}`", c.client_id)))?;
            starts.push(match (first, cfg.rolling_base) {
                (true, _) => None,
                (false, true) => Some(served),
                (false, false) => Some(
                    attach_head(&original, c.domain.num_classes, c.head_seed)
                        .map_err(HarnessError::at("experiment model"))?,
                ),
            });
        }
        let outcomes = stage
            .clients
            .par_iter()
            .zip(starts.par_iter())
            .map(|(c, start)| run_client(c, stage_no, &original, start.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;

        for (c, o) in stage.clients.iter().zip(&outcomes) {
            rows.push(ClientRow {
                stage: stage_no,
                client_id: c.client_id.clone(),
                control_accuracy: o.control_accuracy,
                experiment_accuracy: o.experiment.as_ref().map(|(a, _)| *a),
            });
            if let Some((a, _)) = &o.experiment {
                controls.push(o.control_accuracy);
                experiments.push(*a);
            }
        }

        let mut summary = StageSummary {
            stage: stage_no,
            client_ids: stage.clients.iter().map(|c| c.client_id.clone()).collect(),
            server_stage,
            adopted: None,
            gate: None,
        };
        if server_stage {
            for o in outcomes {
                let update = match o.experiment {
                    Some((_, u)) => u,
                    None => o.control_update,
                };
                server
                    .submit_update(update)
                    .map_err(HarnessError::at(format!("stage {stage_no} submit")))?;
            }
            let gate_input = if server.gate_scheduled() && controls.len() >= 2 {
                let sample = PairedSample::new(controls.clone(), experiments.clone())
                    .map_err(HarnessError::at(format!("stage {stage_no} gate sample")))?;
                Some(GateInput { sample, config: cfg.gate })
            } else {
                None
            };
            let record = server
                .end_stage(gate_input.as_ref())
                .map_err(HarnessError::at(format!("stage {stage_no} end")))?;
            summary.adopted = Some(record.adopted);
            summary.gate = record.gate;
        }
        stages.push(summary);
    }

    let final_test = if controls.len() >= 2 {
        let sample = PairedSample::new(controls, experiments).map_err(HarnessError::at("final test"))?;
        Some(gate(&sample, &cfg.gate).map_err(HarnessError::at("final test"))?)
    } else {
        None
    };
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        global_seed: config.global_seed,
        config: config.clone(),
        pretrain: PretrainSummary { num_images, loss_history: pre.loss_history },
        gain_curve: gain_curve(&rows),
        rows,
        stages,
        final_test,
    };
    Ok(ScenarioRun { report, pretrained: original, final_base: server.base().clone() })
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport, HarnessError> {
    execute(config).map(|r| r.report)
}
