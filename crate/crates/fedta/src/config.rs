//! Experiment configuration: strict TOML in, validated settings out.
//!
//! Every section rejects unknown keys so a typo fails loudly instead of
//! silently falling back to a default. Presets cover the desk-scale setup
//! used by the test suite plus the larger published layouts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::anchor::{MixRuleKind, StageTwoHyper};
use crate::datagen::PartitionSpec;
use crate::encoder::FrozenEncoderSpec;
use crate::enhancement::StageOneHyper;
use crate::error::{Error, Result};
use crate::federation::client::{InferenceRule, UnfreezePolicy};
use crate::federation::server::ServerConfig;
use crate::federation::Method;

/// Where the raw samples come from.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs around unit-sphere class means, drawn from the run seed.
    Synthetic {
        num_classes: u32,
        per_class: usize,
        raw_dim: usize,
        sigma: f64,
    },
    /// Precomputed embeddings from a `sample_id,label,e_1..e_d` CSV. The
    /// encoder becomes a lookup: features are the rows themselves.
    EmbeddingCsv { path: PathBuf },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// Backbone seed. Deliberately not derived from the run seed: the frozen
    /// encoder is the same pretrained model in every run.
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_base_tokens: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            seed: 7,
            embed_dim: 32,
            hidden_dim: 64,
            num_base_tokens: 2,
        }
    }
}

impl EncoderSection {
    pub fn spec(&self, input_dim: usize) -> FrozenEncoderSpec {
        FrozenEncoderSpec {
            seed: self.seed,
            input_dim,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_base_tokens: self.num_base_tokens,
        }
    }
}

/// Stage-1 settings: the per-task knowledge-base update.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub lambda1: f64,
    pub n_select: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Knowledge-base entries per client (M).
    pub base_size: usize,
    pub tokens_per_ie: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            n_select: 2,
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 16,
            base_size: 10,
            tokens_per_ie: 2,
        }
    }
}

impl Stage1Section {
    pub fn hyper(&self) -> StageOneHyper {
        StageOneHyper {
            lambda1: self.lambda1,
            n_select: self.n_select,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

/// Stage-2 settings: tail-anchor training after the base is frozen.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub mix_alpha: f64,
    pub mix_rule: MixRuleKind,
    pub mask_seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Anchor pool size per client (m).
    pub anchor_pool: usize,
    pub unfreeze: UnfreezePolicy,
    /// Restrict the stage-2 softmax to the current task's classes.
    pub task_local_ce: bool,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            lambda2: 1.0,
            lambda3: 0.5,
            tau: 0.1,
            mix_alpha: 0.5,
            mix_rule: MixRuleKind::Convex,
            mask_seed: 0,
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 16,
            anchor_pool: 40,
            unfreeze: UnfreezePolicy::KeepFixed,
            task_local_ce: false,
        }
    }
}

impl Stage2Section {
    pub fn hyper(&self) -> StageTwoHyper {
        StageTwoHyper {
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            tau: self.tau,
            mix_alpha: self.mix_alpha,
            mix_rule: self.mix_rule,
            mask_seed: self.mask_seed,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            task_local_ce: self.task_local_ce,
        }
    }
}

/// Server-side settings: fusion schedule and prototype election.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub thr: f64,
    /// Surrogate samples reserved per class (k). Zero disables fusion and
    /// falls back to plain base averaging.
    pub surrogate_per_class: usize,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    pub key_pull: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        let s = ServerConfig::default();
        Self {
            thr: s.thr,
            surrogate_per_class: 2,
            distill_steps: s.distill_steps,
            distill_lr: s.distill_lr,
            distill_batch: s.distill_batch,
            key_pull: s.key_pull,
        }
    }
}

impl ServerSection {
    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            thr: self.thr,
            distill_steps: self.distill_steps,
            distill_lr: self.distill_lr,
            distill_batch: self.distill_batch,
            key_pull: self.key_pull,
        }
    }
}

fn default_rounds_per_task() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![42, 1999, 2024]
}

/// A full experiment description. `validate` runs all cross-field checks up
/// front so a bad file fails before any work starts.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_rounds_per_task")]
    pub rounds_per_task: usize,
    #[serde(default)]
    pub inference: InferenceRule,
    /// Output root; the CLI and FEDTA_OUTPUT_ROOT can override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub server: ServerSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The inference rule actually used: baselines carry their own.
    pub fn effective_rule(&self) -> InferenceRule {
        self.method.forced_rule().unwrap_or(self.inference)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &'static str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be positive".into(),
                });
            }
            Ok(())
        }
        fn finite_nonneg(name: &'static str, v: f64) -> Result<()> {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam {
                    name,
                    reason: format!("must be finite and nonnegative, got {v}"),
                });
            }
            Ok(())
        }

        if self.name.is_empty() {
            return Err(Error::InvalidParam {
                name: "name",
                reason: "must not be empty".into(),
            });
        }
        if self
            .name
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(Error::InvalidParam {
                name: "name",
                reason: "use only ASCII letters, digits, '-' and '_' (it names a directory)"
                    .into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::EmptyInput("seeds"));
        }
        {
            let mut seen = std::collections::BTreeSet::new();
            for &s in &self.seeds {
                if !seen.insert(s) {
                    return Err(Error::InvalidParam {
                        name: "seeds",
                        reason: format!("duplicate seed {s}"),
                    });
                }
            }
        }
        positive("rounds_per_task", self.rounds_per_task)?;

        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                per_class,
                raw_dim,
                sigma,
            } => {
                if *num_classes == 0 {
                    return Err(Error::InvalidParam {
                        name: "dataset.num_classes",
                        reason: "must be positive".into(),
                    });
                }
                positive("dataset.per_class", *per_class)?;
                positive("dataset.raw_dim", *raw_dim)?;
                finite_nonneg("dataset.sigma", *sigma)?;
            }
            DatasetConfig::EmbeddingCsv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::InvalidParam {
                        name: "dataset.path",
                        reason: "must not be empty".into(),
                    });
                }
            }
        }

        let p = &self.partition;
        positive("partition.clients", p.clients)?;
        positive("partition.tasks_per_client", p.tasks_per_client)?;
        positive("partition.classes_per_task", p.classes_per_task)?;
        if !(p.dirichlet_alpha > 0.0) {
            return Err(Error::InvalidParam {
                name: "partition.dirichlet_alpha",
                reason: format!("must be positive, got {}", p.dirichlet_alpha),
            });
        }
        if !(0.0 < p.test_fraction && p.test_fraction < 1.0) {
            return Err(Error::InvalidParam {
                name: "partition.test_fraction",
                reason: format!("must be in (0, 1), got {}", p.test_fraction),
            });
        }
        let needed = p.clients * p.private_per_client + p.public_total;
        if let DatasetConfig::Synthetic { num_classes, .. } = &self.dataset {
            if (*num_classes as usize) < needed {
                return Err(Error::Infeasible(format!(
                    "partition needs {needed} classes ({} clients x {} private + {} public), dataset has {num_classes}",
                    p.clients, p.private_per_client, p.public_total
                )));
            }
        }
        if p.classes_per_task > p.private_per_client + p.public_total {
            return Err(Error::Infeasible(format!(
                "classes_per_task {} exceeds the {} classes visible to a client",
                p.classes_per_task,
                p.private_per_client + p.public_total
            )));
        }

        positive("encoder.embed_dim", self.encoder.embed_dim)?;
        positive("encoder.hidden_dim", self.encoder.hidden_dim)?;
        positive("encoder.num_base_tokens", self.encoder.num_base_tokens)?;
        if let DatasetConfig::EmbeddingCsv { .. } = &self.dataset {
            // Lookup features pass through untouched; the configured width
            // must agree with whatever the CSV holds, checked at load time.
        }

        positive("stage1.base_size", self.stage1.base_size)?;
        positive("stage1.tokens_per_ie", self.stage1.tokens_per_ie)?;
        positive("stage1.epochs", self.stage1.epochs)?;
        positive("stage1.batch_size", self.stage1.batch_size)?;
        finite_nonneg("stage1.lambda1", self.stage1.lambda1)?;
        if !(self.stage1.learning_rate > 0.0) {
            return Err(Error::InvalidParam {
                name: "stage1.learning_rate",
                reason: "must be positive".into(),
            });
        }
        if self.stage1.n_select == 0 || self.stage1.n_select > self.stage1.base_size {
            return Err(Error::InvalidParam {
                name: "stage1.n_select",
                reason: format!(
                    "need 1 <= n_select <= base_size ({}), got {}",
                    self.stage1.base_size, self.stage1.n_select
                ),
            });
        }

        positive("stage2.anchor_pool", self.stage2.anchor_pool)?;
        positive("stage2.epochs", self.stage2.epochs)?;
        positive("stage2.batch_size", self.stage2.batch_size)?;
        finite_nonneg("stage2.lambda2", self.stage2.lambda2)?;
        finite_nonneg("stage2.lambda3", self.stage2.lambda3)?;
        if !(self.stage2.tau > 0.0) {
            return Err(Error::InvalidParam {
                name: "stage2.tau",
                reason: "must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.stage2.mix_alpha) {
            return Err(Error::InvalidParam {
                name: "stage2.mix_alpha",
                reason: format!("must be in [0, 1], got {}", self.stage2.mix_alpha),
            });
        }
        if !(self.stage2.learning_rate > 0.0) {
            return Err(Error::InvalidParam {
                name: "stage2.learning_rate",
                reason: "must be positive".into(),
            });
        }

        if !(0.0..=1.0).contains(&self.server.thr) {
            return Err(Error::InvalidParam {
                name: "server.thr",
                reason: format!("must be in [0, 1], got {}", self.server.thr),
            });
        }
        positive("server.distill_steps", self.server.distill_steps)?;
        positive("server.distill_batch", self.server.distill_batch)?;
        if !(self.server.distill_lr > 0.0) {
            return Err(Error::InvalidParam {
                name: "server.distill_lr",
                reason: "must be positive".into(),
            });
        }
        finite_nonneg("server.key_pull", self.server.key_pull)?;

        Ok(())
    }

    /// Small synthetic setup sized so a three-seed comparison run finishes in
    /// seconds. This is the layout the integration tests assert trends on.
    /// The shape was tuned so raw features of distinct classes separate well
    /// under the frozen encoder; two base tokens matter most (longer pooled
    /// sequences push every feature into a common cone).
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            method: Method::Fedta,
            seeds: default_seeds(),
            rounds_per_task: 1,
            inference: InferenceRule::NearestPrototype,
            output_dir: None,
            dataset: DatasetConfig::Synthetic {
                num_classes: 40,
                per_class: 40,
                raw_dim: 32,
                sigma: 0.05,
            },
            partition: PartitionSpec {
                dirichlet_alpha: 10.0,
                ..PartitionSpec::default()
            },
            encoder: EncoderSection::default(),
            stage1: Stage1Section {
                learning_rate: 0.1,
                tokens_per_ie: 1,
                ..Stage1Section::default()
            },
            stage2: Stage2Section {
                mix_alpha: 0.35,
                learning_rate: 0.3,
                epochs: 10,
                ..Stage2Section::default()
            },
            server: ServerSection {
                thr: 0.5,
                distill_batch: 8,
                ..ServerSection::default()
            },
        }
    }

    /// 100-class layout: 5 clients, 15 private + 25 public classes, 5 tasks
    /// of 8 classes, 20 surrogate samples per class.
    pub fn cifar() -> Self {
        Self {
            name: "cifar".into(),
            method: Method::Fedta,
            seeds: default_seeds(),
            rounds_per_task: 1,
            inference: InferenceRule::NearestPrototype,
            output_dir: None,
            dataset: DatasetConfig::Synthetic {
                num_classes: 100,
                per_class: 60,
                raw_dim: 64,
                sigma: 0.15,
            },
            partition: PartitionSpec {
                clients: 5,
                tasks_per_client: 5,
                private_per_client: 15,
                public_total: 25,
                classes_per_task: 8,
                dirichlet_alpha: 0.5,
                test_fraction: 0.25,
            },
            encoder: EncoderSection {
                seed: 7,
                embed_dim: 32,
                hidden_dim: 64,
                num_base_tokens: 4,
            },
            stage1: Stage1Section::default(),
            stage2: Stage2Section {
                anchor_pool: 100,
                ..Stage2Section::default()
            },
            server: ServerSection {
                surrogate_per_class: 20,
                ..ServerSection::default()
            },
        }
    }

    /// 200-class layout: 40 private classes per client, none shared, 5 tasks
    /// of 8 classes, 5 surrogate samples per class.
    pub fn imagenet_r() -> Self {
        Self {
            name: "imagenet-r".into(),
            method: Method::Fedta,
            seeds: default_seeds(),
            rounds_per_task: 1,
            inference: InferenceRule::NearestPrototype,
            output_dir: None,
            dataset: DatasetConfig::Synthetic {
                num_classes: 200,
                per_class: 30,
                raw_dim: 64,
                sigma: 0.15,
            },
            partition: PartitionSpec {
                clients: 5,
                tasks_per_client: 5,
                private_per_client: 40,
                public_total: 0,
                classes_per_task: 8,
                dirichlet_alpha: 0.5,
                test_fraction: 0.25,
            },
            encoder: EncoderSection {
                seed: 7,
                embed_dim: 32,
                hidden_dim: 64,
                num_base_tokens: 4,
            },
            stage1: Stage1Section::default(),
            stage2: Stage2Section {
                anchor_pool: 100,
                ..Stage2Section::default()
            },
            server: ServerSection {
                surrogate_per_class: 5,
                ..ServerSection::default()
            },
        }
    }

    /// Full published geometry: 768-dim features, 10 base entries of 10
    /// tokens, 100 anchors. Hours of compute; not exercised by tests.
    pub fn paper_scale() -> Self {
        Self {
            name: "paper-scale".into(),
            method: Method::Fedta,
            seeds: default_seeds(),
            rounds_per_task: 1,
            inference: InferenceRule::NearestPrototype,
            output_dir: None,
            dataset: DatasetConfig::Synthetic {
                num_classes: 100,
                per_class: 100,
                raw_dim: 256,
                sigma: 0.15,
            },
            partition: PartitionSpec {
                clients: 5,
                tasks_per_client: 5,
                private_per_client: 15,
                public_total: 25,
                classes_per_task: 8,
                dirichlet_alpha: 0.5,
                test_fraction: 0.25,
            },
            encoder: EncoderSection {
                seed: 7,
                embed_dim: 768,
                hidden_dim: 1024,
                num_base_tokens: 8,
            },
            stage1: Stage1Section {
                base_size: 10,
                tokens_per_ie: 10,
                ..Stage1Section::default()
            },
            stage2: Stage2Section {
                anchor_pool: 100,
                ..Stage2Section::default()
            },
            server: ServerSection {
                surrogate_per_class: 20,
                ..ServerSection::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "cifar" => Ok(Self::cifar()),
            "imagenet-r" => Ok(Self::imagenet_r()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::InvalidParam {
                name: "preset",
                reason: format!(
                    "unknown preset '{other}' (have: desk, cifar, imagenet-r, paper-scale)"
                ),
            }),
        }
    }

    pub const PRESETS: &'static [&'static str] = &["desk", "cifar", "imagenet-r", "paper-scale"];
}
