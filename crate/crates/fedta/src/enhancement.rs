//! Input enhancement: a small pool of key-addressed token blocks that get
//! prepended to a sample's embedding before encoding. Stage-1 training moves
//! the selected blocks and their keys; everything is frozen afterwards so
//! later stages see a fixed input pathway.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::numkit::{
    cosine_distance, cosine_distance_grad, head_cross_entropy, HeadGrads, LinearHead, Matrix,
    Vector,
};

/// One addressable enhancement block: a query key and `tokens_per_ie` token
/// rows that get prepended when the block is selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputEnhancementEntry {
    pub key: Vector,
    pub tokens: Matrix,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct KbRecord {
    m: usize,
    tokens_per_ie: usize,
    d: usize,
    entries: Vec<InputEnhancementEntry>,
}

/// Pool of input-enhancement entries shared through the federation rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KbRecord", into = "KbRecord")]
pub struct KnowledgeBase {
    tokens_per_ie: usize,
    d: usize,
    entries: Vec<InputEnhancementEntry>,
}

impl TryFrom<KbRecord> for KnowledgeBase {
    type Error = Error;

    fn try_from(rec: KbRecord) -> Result<Self> {
        if rec.m != rec.entries.len() {
            return Err(Error::InvalidParam {
                name: "m",
                reason: format!("declared {} entries, found {}", rec.m, rec.entries.len()),
            });
        }
        let kb = KnowledgeBase {
            tokens_per_ie: rec.tokens_per_ie,
            d: rec.d,
            entries: rec.entries,
        };
        kb.validate()?;
        Ok(kb)
    }
}

impl From<KnowledgeBase> for KbRecord {
    fn from(kb: KnowledgeBase) -> Self {
        KbRecord {
            m: kb.entries.len(),
            tokens_per_ie: kb.tokens_per_ie,
            d: kb.d,
            entries: kb.entries,
        }
    }
}

impl KnowledgeBase {
    /// Seeded initialization: unit-normalized Gaussian keys, token entries
    /// Gaussian scaled by 0.02. Entries start unfrozen.
    pub fn init(m: usize, tokens_per_ie: usize, d: usize, seed: u64) -> Result<Self> {
        if tokens_per_ie == 0 || d == 0 {
            return Err(Error::InvalidParam {
                name: "knowledge base shape",
                reason: "tokens_per_ie and d must be positive".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(m);
        for _ in 0..m {
            let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let key = Vector::new(raw)?;
            let norm = key.norm();
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    context: "knowledge base key init",
                });
            }
            let key = key.scaled(1.0 / norm);
            let tokens = Matrix::new(
                tokens_per_ie,
                d,
                (0..tokens_per_ie * d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.02)
                    .collect(),
            )?;
            entries.push(InputEnhancementEntry {
                key,
                tokens,
                frozen: false,
            });
        }
        Ok(Self {
            tokens_per_ie,
            d,
            entries,
        })
    }

    pub fn empty(tokens_per_ie: usize, d: usize) -> Self {
        Self {
            tokens_per_ie,
            d,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens_per_ie(&self) -> usize {
        self.tokens_per_ie
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, i: usize) -> Result<&InputEnhancementEntry> {
        self.entries.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.entries.len(),
        })
    }

    pub fn entries(&self) -> &[InputEnhancementEntry] {
        &self.entries
    }

    /// Direct mutable access, for fusion on the server and for gradient
    /// probes in tests. Invariants are re-checked at serialization.
    pub fn entry_mut(&mut self, i: usize) -> Result<&mut InputEnhancementEntry> {
        let len = self.entries.len();
        self.entries
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for e in &mut self.entries {
            e.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.entries.iter().all(|e| e.frozen)
    }

    /// SGD step on one entry. Fails on frozen entries so training loops
    /// cannot silently move what a previous stage pinned down.
    pub fn apply_entry_grads(&mut self, index: usize, grads: &EntryGrads, lr: f64) -> Result<()> {
        let tokens_ok = grads.tokens.rows() == self.tokens_per_ie && grads.tokens.cols() == self.d;
        if !tokens_ok || grads.key.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.tokens_per_ie * self.d,
                got: grads.tokens.rows() * grads.tokens.cols(),
            });
        }
        let len = self.entries.len();
        let entry = self
            .entries
            .get_mut(index)
            .ok_or(Error::IndexOutOfRange { index, len })?;
        if entry.frozen {
            return Err(Error::Frozen {
                what: "input enhancement entry",
            });
        }
        entry.tokens.add_scaled(&grads.tokens, -lr)?;
        entry.key.add_scaled(&grads.key, -lr)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.key.validate()?;
            e.tokens.validate()?;
            if e.key.dim() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: e.key.dim(),
                });
            }
            if e.tokens.rows() != self.tokens_per_ie || e.tokens.cols() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.tokens_per_ie * self.d,
                    got: e.tokens.rows() * e.tokens.cols(),
                });
            }
            if e.key.norm() == 0.0 {
                return Err(Error::ZeroNorm {
                    context: "knowledge base key",
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StageOneHyper {
    pub lambda1: f64,
    /// How many entries each query selects (N).
    pub n_select: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for StageOneHyper {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            n_select: 2,
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 16,
        }
    }
}

/// Indices of the `n` entries nearest to `query_key` by cosine distance,
/// sorted ascending, ties broken by lowest index.
pub fn query_ie(query_key: &Vector, kb: &KnowledgeBase, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > kb.len() {
        return Err(Error::InvalidParam {
            name: "n_select",
            reason: format!("need 1 <= n <= {}, got {n}", kb.len()),
        });
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(kb.len());
    for (i, e) in kb.entries().iter().enumerate() {
        scored.push((cosine_distance(query_key, &e.key)?, i));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, i)| i).collect())
}

/// Prepend the selected entries' token blocks, in selection order, to the
/// base embedding. An empty selection returns the base sequence unchanged.
pub fn enhance(base: &TokenSequence, kb: &KnowledgeBase, selection: &[usize]) -> Result<TokenSequence> {
    let mut prefix = Vec::with_capacity(selection.len() * kb.tokens_per_ie());
    for &idx in selection {
        let entry = kb.entry(idx)?;
        for r in 0..entry.tokens.rows() {
            prefix.push(entry.tokens.row_vector(r)?);
        }
    }
    TokenSequence::with_prefix(prefix, base)
}

/// Gradient of one entry's parameters.
#[derive(Clone, Debug)]
pub struct EntryGrads {
    pub tokens: Matrix,
    pub key: Vector,
}

impl EntryGrads {
    pub fn zeros(tokens_per_ie: usize, d: usize) -> Self {
        Self {
            tokens: Matrix::zeros(tokens_per_ie, d),
            key: Vector::zeros(d),
        }
    }
}

#[derive(Debug)]
pub struct Stage1Grads {
    /// Selected entry indices, ascending by query distance.
    pub selected: Vec<usize>,
    /// Per selected entry, aligned with `selected`.
    pub entry_grads: Vec<EntryGrads>,
    pub head: HeadGrads,
    pub query_key: Vector,
}

/// One-sample stage-1 loss and gradients: cross-entropy of the head on the
/// enhanced feature, plus lambda1 times the summed cosine distance between
/// the query key and each selected key. The query key is a constant.
///
/// Token gradients flow through the encoder VJP; under an encoder without
/// VJP support the feature does not depend on the prepended tokens, so their
/// gradient is exactly zero.
pub fn stage1_loss_and_grads(
    sample: &Vector,
    label: u32,
    kb: &KnowledgeBase,
    head: &LinearHead,
    encoder: &dyn Encoder,
    hyper: &StageOneHyper,
) -> Result<(f64, Stage1Grads)> {
    let base = encoder.embed(sample)?;
    let query_key = encoder.encode(&base)?;
    stage1_with_cached_embedding(&base, &query_key, label, kb, head, encoder, hyper)
}

/// Same computation with the embedding and query key precomputed; training
/// loops cache both since neither depends on trainable state.
pub(crate) fn stage1_with_cached_embedding(
    base: &TokenSequence,
    query_key: &Vector,
    label: u32,
    kb: &KnowledgeBase,
    head: &LinearHead,
    encoder: &dyn Encoder,
    hyper: &StageOneHyper,
) -> Result<(f64, Stage1Grads)> {
    let selected = query_ie(query_key, kb, hyper.n_select)?;
    for &idx in &selected {
        if kb.entry(idx)?.frozen {
            return Err(Error::Frozen {
                what: "input enhancement entry",
            });
        }
    }
    let enhanced = enhance(base, kb, &selected)?;
    let feature = encoder.encode(&enhanced)?;
    let (ce, head_grads, dfeature) = head_cross_entropy(head, &feature, label as usize)?;

    let mut loss = ce;
    let tpi = kb.tokens_per_ie();
    let mut entry_grads = Vec::with_capacity(selected.len());

    let token_grads = if encoder.supports_vjp() {
        let slots: Vec<usize> = (0..selected.len() * tpi).collect();
        Some(encoder.encode_vjp(&enhanced, &dfeature, &slots)?)
    } else {
        None
    };

    for (pos, &idx) in selected.iter().enumerate() {
        let entry = kb.entry(idx)?;
        let mut grads = EntryGrads::zeros(tpi, kb.dim());
        if let Some(tg) = &token_grads {
            for r in 0..tpi {
                grads.tokens.row_mut(r).copy_from_slice(tg[pos * tpi + r].as_slice());
            }
        }
        let dist = cosine_distance(query_key, &entry.key)?;
        loss += hyper.lambda1 * dist;
        if hyper.lambda1 != 0.0 {
            let kg = cosine_distance_grad(query_key, &entry.key)?;
            grads.key.add_scaled(&kg, hyper.lambda1)?;
        }
        entry_grads.push(grads);
    }

    Ok((
        loss,
        Stage1Grads {
            selected,
            entry_grads,
            head: head_grads,
            query_key: query_key.clone(),
        },
    ))
}

/// Runs stage-1 training over the task data and freezes every entry at the
/// end, epochs or not. Batch gradients are averaged; sample order is
/// reshuffled each epoch from the given seed.
pub fn train_input_enhancement(
    samples: &[(&Vector, u32)],
    kb: &mut KnowledgeBase,
    head: &mut LinearHead,
    encoder: &dyn Encoder,
    hyper: &StageOneHyper,
    seed: u64,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stage-1 task data"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidParam {
            name: "batch_size",
            reason: "must be positive".into(),
        });
    }
    if !(hyper.learning_rate >= 0.0) {
        return Err(Error::InvalidParam {
            name: "learning_rate",
            reason: format!("must be nonnegative, got {}", hyper.learning_rate),
        });
    }
    if kb.entries().iter().any(|e| e.frozen) {
        return Err(Error::Frozen {
            what: "input enhancement entry at stage-1 start",
        });
    }

    // Embeddings and query keys never change during the stage.
    let mut cached = Vec::with_capacity(samples.len());
    for (x, y) in samples {
        let base = encoder.embed(x)?;
        let key = encoder.encode(&base)?;
        cached.push((base, key, *y));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cached.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let mut acc: BTreeMap<usize, EntryGrads> = BTreeMap::new();
            let mut head_acc = HeadGrads::zeros(head.num_classes(), head.input_dim());
            let scale = 1.0 / batch.len() as f64;
            for &si in batch {
                let (base, key, y) = &cached[si];
                let (_, grads) =
                    stage1_with_cached_embedding(base, key, *y, kb, head, encoder, hyper)?;
                for (pos, idx) in grads.selected.iter().enumerate() {
                    let slot = acc
                        .entry(*idx)
                        .or_insert_with(|| EntryGrads::zeros(kb.tokens_per_ie(), kb.dim()));
                    slot.tokens.add_scaled(&grads.entry_grads[pos].tokens, scale)?;
                    slot.key.add_scaled(&grads.entry_grads[pos].key, scale)?;
                }
                head_acc.accumulate(&grads.head, scale)?;
            }
            for (idx, grads) in &acc {
                kb.apply_entry_grads(*idx, grads, hyper.learning_rate)?;
            }
            head.apply_grads(&head_acc, hyper.learning_rate)?;
        }
    }

    kb.set_frozen(true);
    Ok(())
}
