use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::mim::MimConfig;
use crate::model::{ModelArchitecture, ModelKind, SgdConfig};
use crate::rng;
use crate::synth::{DomainSpec, Motif};
use crate::trust::GateConfig;

use super::HarnessError;

fn default_true() -> bool {
    true
}

fn default_batch_size() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub arch: ModelArchitecture,
    pub mim: MimConfig,
    /// Unlabeled images are drawn from each of these domains.
    pub domains: Vec<DomainSpec>,
    pub images_per_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub client_id: String,
    pub domain: DomainSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub head_seed: u64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub clients: Vec<ClientConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub pretrain: PretrainConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub gate: GateConfig,
    pub global_seed: u64,
    /// Set to false to run the control arm alone.
    #[serde(default = "default_true")]
    pub run_experiment_arm: bool,
    /// When false the experiment arm always starts from the pretrained base.
    #[serde(default = "default_true")]
    pub rolling_base: bool,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clients_per_stage(&self) -> usize {
        self.stages.first().map_or(0, |s| s.clients.len())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let arch = &self.pretrain.arch;
        if arch.kind != ModelKind::BackboneOnly {
            return bad("pretrain.arch must be backbone-only".into());
        }
        arch.validate().map_err(|e| HarnessError::Config(format!("pretrain.arch: {e}")))?;
        self.pretrain.mim.validate().map_err(|e| HarnessError::Config(format!("pretrain.mim: {e}")))?;
        self.gate.validate().map_err(|e| HarnessError::Config(format!("gate: {e}")))?;
        if self.pretrain.domains.is_empty() || self.pretrain.images_per_domain == 0 {
            return bad("pretraining needs at least one domain and one image".into());
        }
        let check_domain = |d: &DomainSpec, at: &str| -> Result<(), HarnessError> {
            d.validate().map_err(|e| HarnessError::Config(format!("{at}: {e}")))?;
            if d.image_side != arch.image_side {
                return Err(HarnessError::Config(format!(
                    "{at}: image_side {} differs from the model's {}",
                    d.image_side, arch.image_side
                )));
            }
            Ok(())
        };
        for d in &self.pretrain.domains {
            check_domain(d, &format!("pretrain domain `{}`", d.domain_id))?;
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let k = self.clients_per_stage();
        let mut ids = BTreeSet::new();
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.clients.is_empty() || stage.clients.len() != k {
                return bad(format!(
                    "stage {} has {} clients; every stage needs the same non-zero count ({k})",
                    s + 1,
                    stage.clients.len()
                ));
            }
            for c in &stage.clients {
                let at = format!("client `{}`", c.client_id);
                if !ids.insert(c.client_id.as_str()) {
                    return bad(format!("{at}: ids must be unique"));
                }
                c.validate()?;
                check_domain(&c.domain, &at)?;
            }
        }
        Ok(())
    }

    /// Copy with every seed replaced by its mix with `global_seed`, so a
    /// single override changes all randomness while configs stay readable.
    pub(crate) fn resolved(&self) -> ScenarioConfig {
        let g = self.global_seed;
        let mut out = self.clone();
        out.pretrain.mim.seed = rng::derive(g, self.pretrain.mim.seed);
        for d in &mut out.pretrain.domains {
            d.seed = rng::derive(g, d.seed);
        }
        for c in out.stages.iter_mut().flat_map(|s| s.clients.iter_mut()) {
            *c = c.resolved(g);
        }
        out
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let at = format!("client `{}`", self.client_id);
        let bad = |msg: &str| Err(HarnessError::Config(format!("{at}: {msg}")));
        if self.client_id.is_empty() {
            return bad("empty client_id");
        }
        self.domain.validate().map_err(|e| HarnessError::Config(format!("{at}: {e}")))?;
        if self.n_train == 0 || self.n_test == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("n_train, n_test, epochs and batch_size must be ≥ 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and ≥ 0");
        }
        Ok(())
    }

    /// Copy with the data, head and training seeds mixed with `global_seed`.
    pub fn resolved(&self, global_seed: u64) -> ClientConfig {
        let mut c = self.clone();
        c.domain.seed = rng::derive(global_seed, self.domain.seed);
        c.head_seed = rng::derive(global_seed, self.head_seed);
        c.train_seed = rng::derive(global_seed, self.train_seed);
        c
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.train_seed,
            freeze_backbone: false,
        }
    }
}

fn demo_domain(id: &str, classes: usize, motif: Motif, shift: f64, rot: i32, seed: u64) -> DomainSpec {
    DomainSpec {
        domain_id: id.into(),
        num_classes: classes,
        image_side: 16,
        motif,
        class_separation: 0.8,
        noise_sd: 0.05,
        intensity_shift: shift,
        rotation_steps: rot,
        seed,
    }
}

/// Small 4-stage, 2-clients-per-stage scenario with eight shifted domains.
/// Per-client epochs are the published study's per-task epochs halved.
pub fn demo_scenario(global_seed: u64) -> ScenarioConfig {
    let arch = ModelArchitecture::backbone(4, 16, 16, 32).expect("valid demo architecture");
    let tasks: [(&str, usize, Motif, f64, i32, usize); 8] = [
        ("tumor-mri", 4, Motif::Blobs, 0.0, 0, 5),
        ("blood-cells", 5, Motif::Rings, 0.05, 1, 5),
        ("idc", 2, Motif::Checker, -0.05, 0, 5),
        ("crc-tissue", 9, Motif::Stripes, 0.1, 2, 8),
        ("covid-xray", 4, Motif::Blobs, -0.1, 3, 25),
        ("breast-us", 3, Motif::Rings, 0.0, 2, 50),
        ("fundus", 2, Motif::Stripes, 0.05, 3, 50),
        ("breast-ct", 2, Motif::Checker, 0.1, 1, 40),
    ];
    let stages = tasks
        .chunks(2)
        .enumerate()
        .map(|(s, pair)| StageConfig {
            clients: pair
                .iter()
                .enumerate()
                .map(|(i, &(id, classes, motif, shift, rot, epochs))| {
                    let n = (10 * s + i) as u64;
                    ClientConfig {
                        client_id: id.into(),
                        domain: demo_domain(id, classes, motif, shift, rot, 100 + n),
                        n_train: 40,
                        n_test: 20,
                        epochs,
                        lr: 0.2,
                        batch_size: 8,
                        head_seed: 200 + n,
                        train_seed: 300 + n,
                    }
                })
                .collect(),
        })
        .collect();
    ScenarioConfig {
        pretrain: PretrainConfig {
            arch,
            mim: MimConfig {
                visible_fraction: 0.25,
                epochs: 30,
                lr: 0.05,
                batch_size: 4,
                seed: 7,
                decoder_hidden: 32,
            },
            domains: vec![
                demo_domain("pretext-checker", 3, Motif::Checker, 0.0, 0, 1),
                demo_domain("pretext-stripes", 3, Motif::Stripes, 0.0, 0, 2),
                demo_domain("pretext-rings", 3, Motif::Rings, 0.0, 0, 3),
                demo_domain("pretext-blobs", 3, Motif::Blobs, 0.0, 0, 4),
            ],
            images_per_domain: 16,
        },
        stages,
        gate: GateConfig::default(),
        global_seed,
        run_experiment_arm: true,
        rolling_base: true,
    }
}
