//! Synthetic datasets, non-IID task partitions, surrogate sets, and the
//! precomputed-embedding loader.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Vector;
use crate::seeding::subseed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: u64,
    pub label: u32,
    pub features: Vector,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    num_classes: u32,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let feature_dim = samples[0].features.dim();
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.features.dim() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: s.features.dim(),
                });
            }
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label as usize,
                    num_classes: num_classes as usize,
                });
            }
            if !seen.insert(s.sample_id) {
                return Err(Error::InvalidParam {
                    name: "sample_id",
                    reason: format!("duplicate id {}", s.sample_id),
                });
            }
        }
        Ok(Self {
            samples,
            num_classes,
            feature_dim,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &LabeledSample {
        &self.samples[index]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Sample indices grouped by class, ascending.
    pub fn indices_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }
}

/// Gaussian blobs around class means drawn on the unit sphere.
pub fn synth_gaussian_dataset(
    num_classes: u32,
    per_class: usize,
    raw_dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || raw_dim == 0 {
        return Err(Error::InvalidParam {
            name: "synth_gaussian_dataset",
            reason: "num_classes, per_class, and raw_dim must be positive".into(),
        });
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParam {
            name: "sigma",
            reason: format!("must be nonnegative, got {sigma}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_classes as usize * per_class);
    let mut next_id = 0u64;
    for class in 0..num_classes {
        let mean = loop {
            let raw: Vec<f64> = (0..raw_dim).map(|_| rng.sample(StandardNormal)).collect();
            let v = Vector::new(raw)?;
            let n = v.norm();
            if n > 1e-12 {
                break v.scaled(1.0 / n);
            }
        };
        for _ in 0..per_class {
            let data: Vec<f64> = mean
                .as_slice()
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(LabeledSample {
                sample_id: next_id,
                label: class,
                features: Vector::new(data)?,
            });
            next_id += 1;
        }
    }
    Dataset::new(samples, num_classes)
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    pub clients: usize,
    pub tasks_per_client: usize,
    pub private_per_client: usize,
    pub public_total: usize,
    pub classes_per_task: usize,
    pub dirichlet_alpha: f64,
    pub test_fraction: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            clients: 5,
            tasks_per_client: 5,
            private_per_client: 5,
            public_total: 15,
            classes_per_task: 4,
            dirichlet_alpha: 0.5,
            test_fraction: 0.25,
        }
    }
}

/// One client-task: its classes and the train/test sample indices into the
/// source dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: Vec<u32>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub private_classes: Vec<u32>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskPartition {
    pub clients: Vec<ClientPartition>,
    pub public_classes: Vec<u32>,
}

impl TaskPartition {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Union of every client's train indices.
    pub fn all_train_indices(&self) -> BTreeSet<usize> {
        let mut set = BTreeSet::new();
        for c in &self.clients {
            for t in &c.tasks {
                set.extend(t.train_indices.iter().copied());
            }
        }
        set
    }
}

/// Largest-remainder allocation of `n` items to `weights`-proportioned bins;
/// ties go to the lowest index. Every item is allocated.
fn largest_remainder_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Split the dataset into disjoint client/task class sequences.
///
/// Private classes are owned wholly by one client; every public class is
/// shared by all clients with Dirichlet-proportioned disjoint sample shares.
/// Each client's class set is shuffled and sliced into
/// `tasks_per_client` tasks of `classes_per_task` classes, and each class
/// share is split train/test by `test_fraction`.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<TaskPartition> {
    if spec.clients == 0 || spec.tasks_per_client == 0 || spec.classes_per_task == 0 {
        return Err(Error::InvalidParam {
            name: "partition",
            reason: "clients, tasks_per_client, classes_per_task must be positive".into(),
        });
    }
    if !(spec.dirichlet_alpha > 0.0) {
        return Err(Error::InvalidParam {
            name: "dirichlet_alpha",
            reason: format!("must be positive, got {}", spec.dirichlet_alpha),
        });
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::InvalidParam {
            name: "test_fraction",
            reason: format!("must be in [0, 1), got {}", spec.test_fraction),
        });
    }
    let total_classes = dataset.num_classes() as usize;
    let needed = spec.clients * spec.private_per_client + spec.public_total;
    if needed > total_classes {
        return Err(Error::Infeasible(format!(
            "{} private + {} public classes exceed the {total_classes} available",
            spec.clients * spec.private_per_client,
            spec.public_total
        )));
    }
    let per_client = spec.private_per_client + spec.public_total;
    if per_client != spec.tasks_per_client * spec.classes_per_task {
        return Err(Error::Infeasible(format!(
            "{per_client} classes per client do not slice into {} tasks of {}",
            spec.tasks_per_client, spec.classes_per_task
        )));
    }

    let mut class_rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0));
    let mut classes: Vec<u32> = (0..dataset.num_classes()).collect();
    classes.shuffle(&mut class_rng);
    let private_slice = &classes[..spec.clients * spec.private_per_client];
    let public_classes: Vec<u32> = classes
        [spec.clients * spec.private_per_client..spec.clients * spec.private_per_client + spec.public_total]
        .to_vec();

    let by_class = dataset.indices_by_class();
    let class_indices = |c: u32| -> Result<Vec<usize>> {
        by_class
            .get(&c)
            .cloned()
            .ok_or_else(|| Error::Infeasible(format!("class {c} has no samples")))
    };

    // Each class keeps a held-out test pool, shared by every client that has
    // the class; only the remainder is handed out as training data. This also
    // leaves spare samples per class for the server's surrogate draw.
    let mut test_pools: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let carve = |idx: &mut Vec<usize>| -> Vec<usize> {
        let n_test = (spec.test_fraction * idx.len() as f64).floor() as usize;
        let split = idx.len() - n_test;
        let mut test = idx.split_off(split);
        test.sort_unstable();
        test
    };

    // per client, class -> allocated training sample indices
    let mut shares: Vec<BTreeMap<u32, Vec<usize>>> = vec![BTreeMap::new(); spec.clients];
    for (client, chunk) in private_slice.chunks(spec.private_per_client).enumerate() {
        for &c in chunk {
            let mut idx = class_indices(c)?;
            idx.shuffle(&mut class_rng);
            test_pools.insert(c, carve(&mut idx));
            shares[client].insert(c, idx);
        }
    }
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0).map_err(|e| Error::InvalidParam {
        name: "dirichlet_alpha",
        reason: e.to_string(),
    })?;
    for &c in &public_classes {
        let mut idx = class_indices(c)?;
        idx.shuffle(&mut class_rng);
        test_pools.insert(c, carve(&mut idx));
        // Dirichlet proportions via normalized Gamma draws
        let mut weights: Vec<f64> = (0..spec.clients)
            .map(|_| gamma.sample(&mut class_rng))
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = vec![1.0; spec.clients];
        }
        let counts = largest_remainder_counts(&weights, idx.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shares[client].insert(c, idx[cursor..cursor + count].to_vec());
            cursor += count;
        }
    }

    let mut clients = Vec::with_capacity(spec.clients);
    for client in 0..spec.clients {
        let mut private_classes: Vec<u32> = private_slice
            [client * spec.private_per_client..(client + 1) * spec.private_per_client]
            .to_vec();
        private_classes.sort_unstable();

        let mut class_list: Vec<u32> = shares[client].keys().copied().collect();
        let mut task_rng = ChaCha8Rng::seed_from_u64(subseed(seed, 1 + client as u64));
        class_list.shuffle(&mut task_rng);

        let mut tasks = Vec::with_capacity(spec.tasks_per_client);
        for chunk in class_list.chunks(spec.classes_per_task) {
            let mut task_classes = chunk.to_vec();
            task_classes.sort_unstable();
            let mut train_indices = Vec::new();
            let mut test_indices = Vec::new();
            for &c in &task_classes {
                train_indices.extend_from_slice(&shares[client][&c]);
                test_indices.extend_from_slice(&test_pools[&c]);
            }
            train_indices.sort_unstable();
            test_indices.sort_unstable();
            tasks.push(TaskSpec {
                classes: task_classes,
                train_indices,
                test_indices,
            });
        }
        clients.push(ClientPartition {
            client_id: client,
            private_classes,
            tasks,
        });
    }

    let mut public_sorted = public_classes;
    public_sorted.sort_unstable();
    Ok(TaskPartition {
        clients,
        public_classes: public_sorted,
    })
}

/// Server-side distillation pool: `k` samples per class, disjoint from every
/// client's training data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurrogateSet {
    per_class: BTreeMap<u32, Vec<usize>>,
}

impl SurrogateSet {
    pub fn is_empty(&self) -> bool {
        self.per_class.values().all(|v| v.is_empty())
    }

    pub fn per_class(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.per_class
    }

    /// Flat list of member indices, class-ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.per_class.values().flatten().copied().collect()
    }
}

pub fn make_surrogate(
    dataset: &Dataset,
    k: usize,
    seed: u64,
    partition: &TaskPartition,
) -> Result<SurrogateSet> {
    let mut per_class = BTreeMap::new();
    if k == 0 {
        return Ok(SurrogateSet { per_class });
    }
    let train = partition.all_train_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, indices) in dataset.indices_by_class() {
        let mut eligible: Vec<usize> = indices
            .into_iter()
            .filter(|i| !train.contains(i))
            .collect();
        if eligible.len() < k {
            return Err(Error::Infeasible(format!(
                "class {class} has {} samples outside training assignments, need {k}",
                eligible.len()
            )));
        }
        eligible.shuffle(&mut rng);
        let mut chosen: Vec<usize> = eligible.into_iter().take(k).collect();
        chosen.sort_unstable();
        per_class.insert(class, chosen);
    }
    Ok(SurrogateSet { per_class })
}

/// Load `sample_id,label,e_1..e_d` rows as a dataset of precomputed
/// embeddings. Malformed rows fail with their line number.
pub fn load_embedding_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::MalformedRow {
        path: display.clone(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
        return Err(Error::MalformedRow {
            path: display,
            line: 1,
            reason: "header must be sample_id,label,e_1..e_d".into(),
        });
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("e_{}", i + 1) {
            return Err(Error::MalformedRow {
                path: display.clone(),
                line: 1,
                reason: format!("expected column e_{}, got {c}", i + 1),
            });
        }
    }
    let dim = cols.len() - 2;

    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    let mut max_label = 0u32;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::MalformedRow {
                path: display.clone(),
                line: lineno,
                reason: format!("expected {} fields, got {}", dim + 2, fields.len()),
            });
        }
        let bad = |reason: String| Error::MalformedRow {
            path: display.clone(),
            line: lineno,
            reason,
        };
        let sample_id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad sample_id {:?}", fields[0])))?;
        if !seen.insert(sample_id) {
            return Err(bad(format!("duplicate sample_id {sample_id}")));
        }
        let label: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", fields[1])))?;
        let mut data = Vec::with_capacity(dim);
        for f in &fields[2..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad value {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        max_label = max_label.max(label);
        samples.push(LabeledSample {
            sample_id,
            label,
            features: Vector::new(data)?,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("embedding csv"));
    }
    Dataset::new(samples, max_label + 1)
}
