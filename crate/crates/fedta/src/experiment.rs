//! End-to-end runs: build a world from a config, drive it round by round,
//! and write logs, summaries, comparisons, and sweeps to disk.
//!
//! All output is deterministic for a given config: repeated runs produce
//! byte-identical `rounds.jsonl` files.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchor::StageTwoHyper;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::datagen::{
    load_embedding_csv, make_surrogate, partition, synth_gaussian_dataset, Dataset, SurrogateSet,
    TaskPartition,
};
use crate::encoder::{Encoder, FrozenEncoder, LookupEncoder};
use crate::enhancement::StageOneHyper;
use crate::error::{Error, Result};
use crate::federation::client::{ClientParams, ClientState, InferenceRule};
use crate::federation::round::{run_round, RoundContext, RoundLog};
use crate::federation::server::{ServerConfig, ServerState};
use crate::federation::Method;
use crate::metrics::{export_features, AccuracyTable, FeatureRow};
use crate::seeding::subseed;

/// Output-root precedence: explicit flag, then the config file, then the
/// FEDTA_OUTPUT_ROOT environment variable, then ./runs.
pub fn resolve_output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    if let Ok(v) = std::env::var("FEDTA_OUTPUT_ROOT") {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("runs")
}

/// One seeded run: the full client/server world plus its accuracy history.
pub struct Simulation {
    cfg: ExperimentConfig,
    run_seed: u64,
    dataset: Dataset,
    partition: TaskPartition,
    surrogate: SurrogateSet,
    encoder: Box<dyn Encoder>,
    s1: StageOneHyper,
    s2: StageTwoHyper,
    server_cfg: ServerConfig,
    rule: InferenceRule,
    clients: Vec<ClientState>,
    server: ServerState,
    table: AccuracyTable,
    logs: Vec<RoundLog>,
    round: usize,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (dataset, encoder): (Dataset, Box<dyn Encoder>) = match &cfg.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                per_class,
                raw_dim,
                sigma,
            } => {
                let ds = synth_gaussian_dataset(
                    *num_classes,
                    *per_class,
                    *raw_dim,
                    *sigma,
                    subseed(run_seed, 10),
                )?;
                let enc = FrozenEncoder::new(cfg.encoder.spec(*raw_dim))?;
                (ds, Box::new(enc))
            }
            DatasetConfig::EmbeddingCsv { path } => {
                let ds = load_embedding_csv(path)?;
                let enc = LookupEncoder::new(ds.feature_dim())?;
                (ds, Box::new(enc))
            }
        };
        let part = partition(&dataset, &cfg.partition, subseed(run_seed, 11))?;
        let surrogate = make_surrogate(
            &dataset,
            cfg.server.surrogate_per_class,
            subseed(run_seed, 12),
            &part,
        )?;
        let params = ClientParams {
            kb_entries: cfg.stage1.base_size,
            tokens_per_ie: cfg.stage1.tokens_per_ie,
            anchors: cfg.stage2.anchor_pool,
            num_classes: dataset.num_classes(),
            feature_dim: encoder.embed_dim(),
            n_select: cfg.stage1.n_select,
            use_enhancement: cfg.method.uses_enhancement(),
            use_anchor: cfg.method.uses_anchor(),
            unfreeze: cfg.stage2.unfreeze,
        };
        // every client starts from the same broadcast initialization, as in
        // standard federated training
        let init_seed = subseed(run_seed, 1000);
        let clients = (0..cfg.partition.clients)
            .map(|i| ClientState::new(i, &params, init_seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            run_seed,
            dataset,
            partition: part,
            surrogate,
            encoder,
            s1: cfg.stage1.hyper(),
            s2: cfg.stage2.hyper(),
            server_cfg: cfg.server.server_config(),
            rule: cfg.effective_rule(),
            clients,
            server: ServerState::new(),
            table: AccuracyTable::new(),
            logs: Vec::new(),
            round: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn total_rounds(&self) -> usize {
        self.cfg.partition.tasks_per_client * self.cfg.rounds_per_task
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Run the next communication round.
    pub fn step(&mut self) -> Result<RoundLog> {
        if self.round >= self.total_rounds() {
            return Err(Error::InvalidParam {
                name: "round",
                reason: format!("all {} rounds already run", self.total_rounds()),
            });
        }
        let ctx = RoundContext {
            dataset: &self.dataset,
            partition: &self.partition,
            surrogate: &self.surrogate,
            encoder: self.encoder.as_ref(),
            s1: &self.s1,
            s2: &self.s2,
            server_cfg: &self.server_cfg,
            method: self.cfg.method,
            rule: self.rule,
            n_select: self.cfg.stage1.n_select,
            rounds_per_task: self.cfg.rounds_per_task,
            run_seed: self.run_seed,
        };
        let log = run_round(
            self.round,
            &mut self.clients,
            &mut self.server,
            &mut self.table,
            &ctx,
        )?;
        self.round += 1;
        self.logs.push(log.clone());
        Ok(log)
    }

    /// Run all remaining rounds.
    pub fn run(&mut self) -> Result<()> {
        while self.round < self.total_rounds() {
            self.step()?;
        }
        Ok(())
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn partition(&self) -> &TaskPartition {
        &self.partition
    }

    pub fn surrogate(&self) -> &SurrogateSet {
        &self.surrogate
    }

    pub fn table(&self) -> &AccuracyTable {
        &self.table
    }

    pub fn stage2(&self) -> &StageTwoHyper {
        &self.s2
    }

    /// Serialize the per-round logs as JSON lines.
    pub fn logs_jsonl(&self) -> Result<String> {
        let mut text = String::new();
        for log in &self.logs {
            text.push_str(&serde_json::to_string(log)?);
            text.push('\n');
        }
        Ok(text)
    }
}

/// Seed-averaged figures for one round.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSummary {
    pub round: usize,
    pub local_acc: f64,
    pub global_acc: f64,
    pub kr_t: f64,
    pub kr_s: f64,
}

/// Seed-averaged results for one experiment (one method, several seeds).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSummary {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub rounds: Vec<RoundSummary>,
    /// Mean temporal retention over rounds 1.., where it is not trivially 1.
    pub mean_kr_t: f64,
    /// Mean spatial retention over all rounds.
    pub mean_kr_s: f64,
    pub final_kr_t: f64,
    pub final_kr_s: f64,
    pub final_global_acc: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn summarize(cfg: &ExperimentConfig, per_seed: &[Vec<RoundLog>]) -> Result<ExperimentSummary> {
    let rounds = per_seed
        .first()
        .map(|l| l.len())
        .ok_or(Error::EmptyInput("per-seed logs"))?;
    if per_seed.iter().any(|l| l.len() != rounds) || rounds == 0 {
        return Err(Error::Infeasible(
            "seed runs produced differing round counts".into(),
        ));
    }
    let mut summaries = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let local = mean(
            per_seed
                .iter()
                .flat_map(|l| l[r].per_client_local_acc.iter().copied()),
        );
        let global = mean(
            per_seed
                .iter()
                .flat_map(|l| l[r].global_acc_per_client.iter().copied()),
        );
        let kr_t = mean(per_seed.iter().map(|l| l[r].kr_t));
        let kr_s = mean(per_seed.iter().map(|l| l[r].kr_s));
        summaries.push(RoundSummary {
            round: r,
            local_acc: local,
            global_acc: global,
            kr_t,
            kr_s,
        });
    }
    let mean_kr_t = if rounds > 1 {
        mean(summaries.iter().skip(1).map(|s| s.kr_t))
    } else {
        summaries[0].kr_t
    };
    let mean_kr_s = mean(summaries.iter().map(|s| s.kr_s));
    let last = summaries.last().unwrap();
    Ok(ExperimentSummary {
        name: cfg.name.clone(),
        method: cfg.method,
        seeds: cfg.seeds.clone(),
        mean_kr_t,
        mean_kr_s,
        final_kr_t: last.kr_t,
        final_kr_s: last.kr_s,
        final_global_acc: last.global_acc,
        rounds: summaries,
    })
}

/// Run every seed in the config and write per-seed `rounds.jsonl` files plus
/// a seed-averaged `summary.json` under `<root>/<name>/<method>/`.
pub fn run_experiment(cfg: &ExperimentConfig, output_root: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let method_dir = output_root.join(&cfg.name).join(cfg.method.name());
    fs::create_dir_all(&method_dir)?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut sim = Simulation::new(cfg, seed)?;
        sim.run()?;
        let seed_dir = method_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        fs::write(seed_dir.join("rounds.jsonl"), sim.logs_jsonl()?)?;
        per_seed.push(sim.logs().to_vec());
    }
    let summary = summarize(cfg, &per_seed)?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(method_dir.join("summary.json"), text)?;
    Ok(summary)
}

fn csv_header() -> &'static str {
    "method,mean_kr_t,mean_kr_s,final_kr_t,final_kr_s,final_global_acc"
}

fn csv_row(s: &ExperimentSummary) -> String {
    format!(
        "{},{},{},{},{},{}",
        s.method.name(),
        s.mean_kr_t,
        s.mean_kr_s,
        s.final_kr_t,
        s.final_kr_s,
        s.final_global_acc
    )
}

/// Run several methods on the same data layout and rank them by mean
/// temporal retention. Writes `compare.csv` next to the per-method output.
pub fn compare(
    cfg: &ExperimentConfig,
    methods: &[Method],
    output_root: &Path,
) -> Result<Vec<ExperimentSummary>> {
    let methods: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        let mut seen = BTreeSet::new();
        for m in methods {
            if !seen.insert(m.name()) {
                return Err(Error::InvalidParam {
                    name: "methods",
                    reason: format!("method {} listed twice", m.name()),
                });
            }
        }
        methods.to_vec()
    };
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let mut c = cfg.clone();
        c.method = m;
        rows.push(run_experiment(&c, output_root)?);
    }
    rows.sort_by(|a, b| {
        b.mean_kr_t
            .partial_cmp(&a.mean_kr_t)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.method.name().cmp(b.method.name()))
    });
    let mut text = String::from(csv_header());
    text.push('\n');
    for row in &rows {
        text.push_str(&csv_row(row));
        text.push('\n');
    }
    fs::write(output_root.join(&cfg.name).join("compare.csv"), text)?;
    Ok(rows)
}

/// Which knob a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Anchor pool size m.
    AnchorPool,
    /// Knowledge-base size M.
    BaseSize,
    /// Prototype fixing threshold.
    Thr,
    /// Contrastive weight.
    Lambda2,
    /// Contrastive temperature.
    Tau,
    /// Feature/anchor mixing weight.
    MixAlpha,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "anchor-pool" | "m" => Ok(Self::AnchorPool),
            "base-size" | "M" => Ok(Self::BaseSize),
            "thr" => Ok(Self::Thr),
            "lambda2" => Ok(Self::Lambda2),
            "tau" => Ok(Self::Tau),
            "mix-alpha" => Ok(Self::MixAlpha),
            other => Err(Error::InvalidParam {
                name: "sweep param",
                reason: format!(
                    "unknown '{other}' (have: anchor-pool, base-size, thr, lambda2, tau, mix-alpha)"
                ),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AnchorPool => "anchor-pool",
            Self::BaseSize => "base-size",
            Self::Thr => "thr",
            Self::Lambda2 => "lambda2",
            Self::Tau => "tau",
            Self::MixAlpha => "mix-alpha",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
                return Err(Error::InvalidParam {
                    name: "sweep value",
                    reason: format!("{} needs a positive integer, got {v}", self.name()),
                });
            }
            Ok(v as usize)
        };
        match self {
            Self::AnchorPool => cfg.stage2.anchor_pool = as_count(value)?,
            Self::BaseSize => cfg.stage1.base_size = as_count(value)?,
            Self::Thr => cfg.server.thr = value,
            Self::Lambda2 => cfg.stage2.lambda2 = value,
            Self::Tau => cfg.stage2.tau = value,
            Self::MixAlpha => cfg.stage2.mix_alpha = value,
        }
        Ok(())
    }
}

/// One sweep setting and its seed-averaged results.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub summary: ExperimentSummary,
}

fn value_dir_name(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "neg")
}

/// Rerun the experiment at each value of one knob. Output lands under
/// `<root>/<name>-sweep-<param>/<value>/` with a combined `sweep.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    output_root: &Path,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("sweep values"));
    }
    {
        let mut seen = BTreeSet::new();
        for &v in values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "sweep value",
                });
            }
            if !seen.insert(v.to_bits()) {
                return Err(Error::InvalidParam {
                    name: "sweep values",
                    reason: format!("value {v} listed twice"),
                });
            }
        }
    }
    let sweep_root = output_root.join(format!("{}-sweep-{}", cfg.name, param.name()));
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        param.apply(&mut c, v)?;
        c.name = value_dir_name(v);
        c.validate()?;
        let summary = run_experiment(&c, &sweep_root)?;
        points.push(SweepPoint { value: v, summary });
    }
    let mut text = format!("{},{}\n", param.name(), csv_header());
    for p in &points {
        text.push_str(&format!("{},{}\n", p.value, csv_row(&p.summary)));
    }
    fs::write(sweep_root.join("sweep.csv"), text)?;
    Ok(points)
}

/// Run one seed to completion, then dump one client's features for every
/// sample in its tasks (train and test) under the final local state.
pub fn export_client_features<W: Write>(
    cfg: &ExperimentConfig,
    seed: u64,
    client_id: usize,
    out: W,
) -> Result<usize> {
    let mut sim = Simulation::new(cfg, seed)?;
    sim.run()?;
    let client = sim
        .clients()
        .get(client_id)
        .ok_or(Error::IndexOutOfRange {
            index: client_id,
            len: sim.clients().len(),
        })?;
    let round = sim.total_rounds() - 1;
    let mut indices = BTreeSet::new();
    for task in &sim.partition().clients[client_id].tasks {
        indices.extend(task.train_indices.iter().copied());
        indices.extend(task.test_indices.iter().copied());
    }
    let mut rows = Vec::with_capacity(indices.len());
    for i in indices {
        let s = sim.dataset().sample(i);
        let feature = client.feature(&s.features, client.kb(), sim.encoder(), sim.stage2())?;
        rows.push(FeatureRow {
            sample_id: s.sample_id,
            label: s.label,
            round,
            feature,
        });
    }
    export_features(out, sim.encoder().embed_dim(), &rows)?;
    Ok(rows.len())
}
