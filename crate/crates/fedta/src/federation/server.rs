//! Server-side aggregation: distilling the clients' knowledge bases into one
//! fused base, and electing one global prototype per class from the uploaded
//! local prototypes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SurrogateSet};
use crate::encoder::{Encoder, TokenSequence};
use crate::enhancement::{enhance, query_ie, EntryGrads, KnowledgeBase};
use crate::error::{Error, Result};
use crate::federation::messages::{ClientUpdate, GlobalPrototype, GlobalPrototypeTable};
use crate::numkit::{cosine_distance, cosine_distance_grad, cosine_similarity, Matrix, Vector};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    /// Row-mean similarity below which an elected prototype is fixed for good.
    pub thr: f64,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    /// Weight of the term pulling fused keys toward the surrogate query keys.
    pub key_pull: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            thr: 0.3,
            distill_steps: 10,
            distill_lr: 0.05,
            distill_batch: 4,
            key_pull: 0.5,
        }
    }
}

/// Mutable server-side state carried across rounds.
#[derive(Clone, Debug, Default)]
pub struct ServerState {
    pub kb: Option<KnowledgeBase>,
    pub prototypes: GlobalPrototypeTable,
}

impl ServerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Entrywise mean of all bases' tokens and keys. The fallback aggregation
/// when distillation is disabled or no surrogate data exists.
pub fn average_bases(bases: &[KnowledgeBase]) -> Result<KnowledgeBase> {
    let first = bases.first().ok_or(Error::EmptyInput("knowledge bases"))?;
    let mut fused = first.clone();
    for base in &bases[1..] {
        if base.len() != first.len()
            || base.tokens_per_ie() != first.tokens_per_ie()
            || base.dim() != first.dim()
        {
            return Err(Error::Infeasible(
                "knowledge bases disagree in shape, cannot average".into(),
            ));
        }
        for (i, entry) in base.entries().iter().enumerate() {
            let slot = fused.entry_mut(i)?;
            slot.key.add_scaled(&entry.key, 1.0)?;
            slot.tokens.add_scaled(&entry.tokens, 1.0)?;
        }
    }
    let scale = 1.0 / bases.len() as f64;
    for i in 0..fused.len() {
        let slot = fused.entry_mut(i)?;
        slot.key = slot.key.scaled(scale);
        slot.tokens = slot.tokens.scaled(scale);
        slot.frozen = true;
    }
    Ok(fused)
}

pub struct DistillGrads {
    /// Gradients per touched entry of the fused base.
    pub entries: BTreeMap<usize, EntryGrads>,
    /// The feature-matching part of the loss, before the key-pull term.
    pub kd: f64,
}

/// One surrogate sample's distillation loss against a set of teacher
/// features, with gradients for the fused base's selected entries. The
/// selection is taken as given; only tokens (through the encoder) and the
/// selected keys (pulled toward the query key) receive gradients.
///
/// loss = mean_j MSE(encode(enhanced), teacher_j)
///      + key_pull * sum_selected cosine_distance(query_key, key)
pub fn distillation_loss_and_grads(
    kb_g: &KnowledgeBase,
    base: &TokenSequence,
    query_key: &Vector,
    selection: &[usize],
    teachers: &[Vector],
    encoder: &dyn Encoder,
    key_pull: f64,
) -> Result<(f64, DistillGrads)> {
    if teachers.is_empty() {
        return Err(Error::EmptyInput("teacher features"));
    }
    let enhanced = enhance(base, kb_g, selection)?;
    let feature = encoder.encode(&enhanced)?;
    let d = feature.dim();

    let mut kd = 0.0;
    let mut cotangent = Vector::zeros(d);
    let t_scale = 1.0 / teachers.len() as f64;
    for teacher in teachers {
        if teacher.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: teacher.dim(),
            });
        }
        let mut sq = 0.0;
        for (a, b) in feature.as_slice().iter().zip(teacher.as_slice()) {
            sq += (a - b) * (a - b);
        }
        kd += t_scale * sq / d as f64;
        let mut diff = feature.clone();
        diff.add_scaled(teacher, -1.0)?;
        cotangent.add_scaled(&diff, t_scale * 2.0 / d as f64)?;
    }

    let tpi = kb_g.tokens_per_ie();
    let mut entries: BTreeMap<usize, EntryGrads> = BTreeMap::new();
    if encoder.supports_vjp() && kd != 0.0 {
        let slots: Vec<usize> = (0..selection.len() * tpi).collect();
        let token_grads = encoder.encode_vjp(&enhanced, &cotangent, &slots)?;
        for (pos, &entry_idx) in selection.iter().enumerate() {
            let slot = entries
                .entry(entry_idx)
                .or_insert_with(|| EntryGrads::zeros(tpi, d));
            for t in 0..tpi {
                let g = &token_grads[pos * tpi + t];
                for (dst, src) in slot.tokens.row_mut(t).iter_mut().zip(g.as_slice()) {
                    *dst += src;
                }
            }
        }
    }

    let mut loss = kd;
    if key_pull != 0.0 {
        for &entry_idx in selection {
            let key = &kb_g.entry(entry_idx)?.key;
            loss += key_pull * cosine_distance(query_key, key)?;
            let g = cosine_distance_grad(query_key, key)?;
            let slot = entries
                .entry(entry_idx)
                .or_insert_with(|| EntryGrads::zeros(tpi, d));
            slot.key.add_scaled(&g, key_pull)?;
        }
    }

    Ok((loss, DistillGrads { entries, kd }))
}

/// Fuse the clients' bases by distilling their enhanced features into one
/// randomly chosen target base over a surrogate dataset. A single base is
/// returned unchanged; otherwise the surrogate must be nonempty.
pub fn selective_input_knowledge_fusion(
    bases: &[KnowledgeBase],
    dataset: &Dataset,
    surrogate: &SurrogateSet,
    encoder: &dyn Encoder,
    n_select: usize,
    cfg: &ServerConfig,
    seed: u64,
) -> Result<KnowledgeBase> {
    if bases.is_empty() {
        return Err(Error::EmptyInput("knowledge bases"));
    }
    if bases.len() == 1 {
        let mut only = bases[0].clone();
        only.set_frozen(true);
        return Ok(only);
    }
    if surrogate.is_empty() {
        return Err(Error::EmptyInput("surrogate set"));
    }
    if cfg.distill_batch == 0 {
        return Err(Error::InvalidParam {
            name: "distill_batch",
            reason: "must be positive".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(0..bases.len());
    let mut kb_g = bases[target].clone();
    kb_g.set_frozen(false);

    // Teachers are frozen, so every per-sample quantity that does not touch
    // the fused base is computed once.
    let pool = surrogate.indices();
    let mut cached = Vec::with_capacity(pool.len());
    for &idx in &pool {
        let base = encoder.embed(&dataset.sample(idx).features)?;
        let query_key = encoder.encode(&base)?;
        let mut teachers = Vec::with_capacity(bases.len() - 1);
        for (j, kb_j) in bases.iter().enumerate() {
            if j == target {
                continue;
            }
            let sel = query_ie(&query_key, kb_j, n_select)?;
            let enhanced = enhance(&base, kb_j, &sel)?;
            teachers.push(encoder.encode(&enhanced)?);
        }
        cached.push((base, query_key, teachers));
    }

    for _ in 0..cfg.distill_steps {
        let batch: Vec<usize> = (0..cfg.distill_batch)
            .map(|_| rng.gen_range(0..cached.len()))
            .collect();
        let scale = 1.0 / batch.len() as f64;

        let mut acc: BTreeMap<usize, EntryGrads> = BTreeMap::new();
        let mut batch_kd = 0.0;
        for &ci in &batch {
            let (base, query_key, teachers) = &cached[ci];
            let selection = query_ie(query_key, &kb_g, n_select)?;
            let (_, grads) = distillation_loss_and_grads(
                &kb_g,
                base,
                query_key,
                &selection,
                teachers,
                encoder,
                cfg.key_pull,
            )?;
            batch_kd += scale * grads.kd;
            for (idx, g) in grads.entries {
                let slot = acc
                    .entry(idx)
                    .or_insert_with(|| EntryGrads::zeros(kb_g.tokens_per_ie(), kb_g.dim()));
                slot.tokens.add_scaled(&g.tokens, scale)?;
                slot.key.add_scaled(&g.key, scale)?;
            }
        }
        // Nothing to match: leave the target untouched rather than letting
        // the key pull walk it away from an already-agreed optimum.
        if batch_kd == 0.0 {
            continue;
        }
        for (idx, g) in &acc {
            kb_g.apply_entry_grads(*idx, g, cfg.distill_lr)?;
        }
    }

    kb_g.set_frozen(true);
    Ok(kb_g)
}

/// Pairwise cosine similarities of all uploaded prototypes, rows ordered by
/// (class, client) so each class occupies a contiguous block. Same-class
/// entries are pinned to 1.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub entries: Matrix,
    /// (class, client_id) per row, in row order.
    pub labels: Vec<(u32, usize)>,
    pub vectors: Vec<Vector>,
    /// class -> half-open row range [lo, hi).
    pub ranges: BTreeMap<u32, (usize, usize)>,
}

pub fn build_similarity_matrix(uploads: &[ClientUpdate]) -> Result<SimilarityMatrix> {
    let mut rows: Vec<(u32, usize, Vector)> = Vec::new();
    for up in uploads {
        for (class, v) in up.local_prototypes.iter() {
            rows.push((*class, up.client_id, v.clone()));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("uploaded prototypes"));
    }
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let n = rows.len();
    let mut entries = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let value = if rows[i].0 == rows[j].0 {
                1.0
            } else {
                cosine_similarity(&rows[i].2, &rows[j].2)?
            };
            entries.row_mut(i)[j] = value;
        }
    }

    let mut ranges: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let slot = ranges.entry(row.0).or_insert((i, i));
        slot.1 = i + 1;
    }

    Ok(SimilarityMatrix {
        entries,
        labels: rows.iter().map(|r| (r.0, r.1)).collect(),
        vectors: rows.into_iter().map(|r| r.2).collect(),
        ranges,
    })
}

/// Elect per class the uploaded prototype with the lowest mean similarity to
/// all uploads (ties to the lowest row). An elected prototype whose mean is
/// below `thr` is fixed permanently; already-fixed classes are untouched, and
/// classes absent from this round keep their previous prototype.
pub fn select_global_prototypes(
    matrix: &SimilarityMatrix,
    prior: &GlobalPrototypeTable,
    thr: f64,
) -> Result<GlobalPrototypeTable> {
    let mut out = prior.clone();
    let n = matrix.labels.len();
    for (&class, &(lo, hi)) in &matrix.ranges {
        if prior.is_fixed(class) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in lo..hi {
            let mean = matrix.entries.row(i).iter().sum::<f64>() / n as f64;
            if best.map_or(true, |(_, m)| mean < m) {
                best = Some((i, mean));
            }
        }
        let (winner, mean) = best.expect("class range is never empty");
        out.insert(
            class,
            GlobalPrototype {
                vector: matrix.vectors[winner].clone(),
                fixed: mean < thr,
            },
        )?;
    }
    Ok(out)
}

/// Per-class arithmetic mean of the uploaded prototypes, never fixed. The
/// election-free aggregation path.
pub fn average_prototypes(
    uploads: &[ClientUpdate],
    prior: &GlobalPrototypeTable,
) -> Result<GlobalPrototypeTable> {
    let mut sums: BTreeMap<u32, (Vector, usize)> = BTreeMap::new();
    for up in uploads {
        for (class, v) in up.local_prototypes.iter() {
            match sums.get_mut(class) {
                Some((sum, count)) => {
                    sum.add_scaled(v, 1.0)?;
                    *count += 1;
                }
                None => {
                    sums.insert(*class, (v.clone(), 1));
                }
            }
        }
    }
    if sums.is_empty() {
        return Err(Error::EmptyInput("uploaded prototypes"));
    }
    let mut out = prior.clone();
    for (class, (sum, count)) in sums {
        out.insert(
            class,
            GlobalPrototype {
                vector: sum.scaled(1.0 / count as f64),
                fixed: false,
            },
        )?;
    }
    Ok(out)
}
