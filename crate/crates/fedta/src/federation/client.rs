//! Client state machine: two-stage local training per task, prototype
//! bookkeeping, and the two inference paths (own state vs. received global
//! state).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{
    compute_local_prototypes, enhanced_feature, mix_with_rule, prototype_table_from_features,
    query_ta, stage2_core, AnchorGrads, PrototypeTable, StageTwoHyper, TailAnchorSet,
};
use crate::datagen::{Dataset, TaskSpec};
use crate::encoder::Encoder;
use crate::enhancement::{train_input_enhancement, KnowledgeBase, StageOneHyper};
use crate::error::{Error, Result};
use crate::federation::messages::{ClientUpdate, GlobalPrototypeTable, GlobalState};
use crate::numkit::{
    cosine_similarity, head_cross_entropy_over, task_class_set, HeadGrads, LinearHead, Vector,
};
use crate::seeding::subseed;

/// What happens to anchors at the start of a task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnfreezePolicy {
    /// Unfreeze everything except anchors whose tagged class has a fixed
    /// global prototype; those stay frozen for the rest of the run.
    #[default]
    KeepFixed,
    /// Unfreeze the whole pool every task.
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceRule {
    #[default]
    NearestPrototype,
    HeadLogits,
}

/// Per-run construction parameters shared by every client.
#[derive(Clone, Debug)]
pub struct ClientParams {
    pub kb_entries: usize,
    pub tokens_per_ie: usize,
    pub anchors: usize,
    pub num_classes: u32,
    pub feature_dim: usize,
    pub n_select: usize,
    pub use_enhancement: bool,
    pub use_anchor: bool,
    pub unfreeze: UnfreezePolicy,
}

pub struct ClientState {
    pub client_id: usize,
    params: ClientParams,
    kb: KnowledgeBase,
    ta: TailAnchorSet,
    head_e: LinearHead,
    head_ta: LinearHead,
    /// Every class prototype this client has ever computed, latest wins.
    memory: PrototypeTable,
    /// Prototypes of the most recent task only, as uploaded.
    last_local: PrototypeTable,
    globals: GlobalPrototypeTable,
    /// anchor entry -> majority class among samples that chose it.
    anchor_class: BTreeMap<usize, u32>,
    /// Anchors locked for good because their tagged class was fixed.
    locked: BTreeSet<usize>,
    task_cursor: usize,
}

impl ClientState {
    pub fn new(client_id: usize, params: &ClientParams, seed: u64) -> Result<Self> {
        let mut kb = KnowledgeBase::init(
            params.kb_entries,
            params.tokens_per_ie,
            params.feature_dim,
            subseed(seed, 0),
        )?;
        let mut ta = TailAnchorSet::init(params.anchors, params.feature_dim, subseed(seed, 1))?;
        if !params.use_enhancement {
            kb.set_frozen(true);
        }
        if !params.use_anchor {
            ta.set_frozen(true);
        }
        Ok(Self {
            client_id,
            params: params.clone(),
            kb,
            ta,
            head_e: LinearHead::zeros(params.num_classes as usize, params.feature_dim),
            head_ta: LinearHead::zeros(params.num_classes as usize, params.feature_dim),
            memory: PrototypeTable::new(),
            last_local: PrototypeTable::new(),
            globals: GlobalPrototypeTable::new(),
            anchor_class: BTreeMap::new(),
            locked: BTreeSet::new(),
            task_cursor: 0,
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn anchors(&self) -> &TailAnchorSet {
        &self.ta
    }

    pub fn head(&self) -> &LinearHead {
        &self.head_ta
    }

    pub fn set_head(&mut self, head: LinearHead) {
        self.head_ta = head;
    }

    pub fn memory(&self) -> &PrototypeTable {
        &self.memory
    }

    pub fn globals(&self) -> &GlobalPrototypeTable {
        &self.globals
    }

    pub fn locked_anchors(&self) -> &BTreeSet<usize> {
        &self.locked
    }

    pub fn task_cursor(&self) -> usize {
        self.task_cursor
    }

    /// The sample's feature under a given knowledge base and this client's
    /// anchors, honoring the enhancement/anchor switches.
    pub fn feature(
        &self,
        x: &Vector,
        kb: &KnowledgeBase,
        encoder: &dyn Encoder,
        s2: &StageTwoHyper,
    ) -> Result<Vector> {
        let f_out = if self.params.use_enhancement {
            enhanced_feature(x, kb, encoder, self.params.n_select)?
        } else {
            let base = encoder.embed(x)?;
            encoder.encode(&base)?
        };
        if !self.params.use_anchor {
            return Ok(f_out);
        }
        let chosen = query_ta(&f_out, &self.ta)?;
        let (f_ta, _) = mix_with_rule(&f_out, &self.ta.entry(chosen)?.anchor, chosen, s2)?;
        Ok(f_ta)
    }

    /// Train both stages on one task and produce the upload message. A
    /// resumed round keeps the knowledge base frozen and reruns only the
    /// anchor stage, so the contrastive term sees the globals elected by the
    /// earlier rounds of the same task.
    pub fn train_task(
        &mut self,
        dataset: &Dataset,
        task: &TaskSpec,
        encoder: &dyn Encoder,
        s1: &StageOneHyper,
        s2: &StageTwoHyper,
        round: usize,
        resume: bool,
        seed: u64,
    ) -> Result<ClientUpdate> {
        if task.train_indices.is_empty() {
            return Err(Error::EmptyInput("task training data"));
        }
        let samples: Vec<(&Vector, u32)> = task
            .train_indices
            .iter()
            .map(|&i| {
                let s = dataset.sample(i);
                (&s.features, s.label)
            })
            .collect();

        if self.params.use_enhancement && !resume {
            self.kb.set_frozen(false);
            train_input_enhancement(
                &samples,
                &mut self.kb,
                &mut self.head_e,
                encoder,
                s1,
                subseed(seed, 0),
            )?;
        }

        // The base stays frozen from here on, so every sample's pre-anchor
        // feature is a constant.
        let mut feats = Vec::with_capacity(samples.len());
        for (x, _) in &samples {
            let f = if self.params.use_enhancement {
                enhanced_feature(x, &self.kb, encoder, self.params.n_select)?
            } else {
                let base = encoder.embed(x)?;
                encoder.encode(&base)?
            };
            feats.push(f);
        }
        let labels: Vec<u32> = samples.iter().map(|(_, y)| *y).collect();

        if self.params.use_anchor {
            self.unfreeze_anchors();
            self.train_anchor_stage(&feats, &labels, s2, subseed(seed, 1))?;
            self.ta.set_frozen(true);
            let local = compute_local_prototypes(
                &samples,
                &self.kb,
                &self.ta,
                encoder,
                s2,
                self.params.n_select,
            )?;
            self.retag_anchors(&feats, &labels)?;
            self.absorb_prototypes(&local)?;
        } else {
            let active = if s2.task_local_ce {
                Some(task_class_set(&labels))
            } else {
                None
            };
            train_head_on_features(
                &mut self.head_ta,
                &feats,
                &labels,
                s2.learning_rate,
                s2.epochs,
                s2.batch_size,
                subseed(seed, 1),
                active.as_deref(),
            )?;
            let rows: Vec<(u32, Vector)> = labels
                .iter()
                .zip(&feats)
                .map(|(y, f)| (*y, f.clone()))
                .collect();
            let local = prototype_table_from_features(&rows)?;
            self.absorb_prototypes(&local)?;
        }

        self.task_cursor += 1;
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            kb: self.kb.clone(),
            local_prototypes: self.last_local.clone(),
        })
    }

    /// Upload message for a communication round with no fresh training.
    pub fn make_update(&self, round: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: self.client_id,
            round,
            kb: self.kb.clone(),
            local_prototypes: self.last_local.clone(),
        }
    }

    /// Adopt the fused base and global prototypes, then lock anchors whose
    /// tagged class just became fixed.
    pub fn install_global(&mut self, msg: &GlobalState) -> Result<()> {
        if !msg.kb.all_frozen() {
            return Err(Error::NotFrozen {
                what: "distributed knowledge base",
            });
        }
        if self.params.use_enhancement {
            self.kb = msg.kb.clone();
        }
        self.globals = msg.prototypes.clone();
        for (entry, class) in &self.anchor_class {
            if self.globals.is_fixed(*class) {
                self.locked.insert(*entry);
            }
        }
        Ok(())
    }

    pub fn predict_local(
        &self,
        x: &Vector,
        encoder: &dyn Encoder,
        s2: &StageTwoHyper,
        rule: InferenceRule,
    ) -> Result<u32> {
        let f = self.feature(x, &self.kb, encoder, s2)?;
        match rule {
            InferenceRule::HeadLogits => argmax_class(&self.head_ta.logits(&f)?),
            InferenceRule::NearestPrototype => {
                nearest_class(&f, self.memory.iter().map(|(c, v)| (*c, v)))
            }
        }
    }

    pub fn predict_global(
        &self,
        x: &Vector,
        kb_g: &KnowledgeBase,
        globals: &GlobalPrototypeTable,
        encoder: &dyn Encoder,
        s2: &StageTwoHyper,
        rule: InferenceRule,
    ) -> Result<u32> {
        if globals.is_empty() {
            return Err(Error::EmptyInput("global prototypes"));
        }
        let f = self.feature(x, kb_g, encoder, s2)?;
        match rule {
            InferenceRule::HeadLogits => argmax_class(&self.head_ta.logits(&f)?),
            InferenceRule::NearestPrototype => {
                nearest_class(&f, globals.iter().map(|(c, p)| (*c, &p.vector)))
            }
        }
    }

    fn unfreeze_anchors(&mut self) {
        match self.params.unfreeze {
            UnfreezePolicy::All => self.ta.set_frozen(false),
            UnfreezePolicy::KeepFixed => {
                for i in 0..self.ta.len() {
                    if !self.locked.contains(&i) {
                        self.ta.entry_mut(i).expect("index in range").frozen = false;
                    }
                }
            }
        }
    }

    fn train_anchor_stage(
        &mut self,
        feats: &[Vector],
        labels: &[u32],
        s2: &StageTwoHyper,
        seed: u64,
    ) -> Result<()> {
        if s2.batch_size == 0 {
            return Err(Error::InvalidParam {
                name: "batch_size",
                reason: "must be positive".into(),
            });
        }
        let globals = self.globals.vectors()?;
        let d = self.params.feature_dim;
        let active = if s2.task_local_ce {
            Some(task_class_set(labels))
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for _ in 0..s2.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(s2.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let mut anchor_acc: BTreeMap<usize, AnchorGrads> = BTreeMap::new();
                let mut head_acc =
                    HeadGrads::zeros(self.head_ta.num_classes(), self.head_ta.input_dim());
                for &si in batch {
                    let (_, grads) = stage2_core(
                        &feats[si],
                        labels[si],
                        &self.ta,
                        &self.head_ta,
                        &globals,
                        s2,
                        active.as_deref(),
                    )?;
                    head_acc.accumulate(&grads.head, scale)?;
                    if !self.ta.entry(grads.chosen)?.frozen {
                        let slot = anchor_acc.entry(grads.chosen).or_insert_with(|| AnchorGrads {
                            anchor: Vector::zeros(d),
                            key: Vector::zeros(d),
                        });
                        slot.anchor.add_scaled(&grads.anchor.anchor, scale)?;
                        slot.key.add_scaled(&grads.anchor.key, scale)?;
                    }
                }
                self.head_ta.apply_grads(&head_acc, s2.learning_rate)?;
                for (idx, g) in &anchor_acc {
                    self.ta.apply_grads(*idx, g, s2.learning_rate)?;
                }
            }
        }
        Ok(())
    }

    /// Tag each touched anchor with the majority class of the samples that
    /// selected it (ties to the lowest class). Locked anchors keep their tag.
    fn retag_anchors(&mut self, feats: &[Vector], labels: &[u32]) -> Result<()> {
        let mut votes: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
        for (f, y) in feats.iter().zip(labels) {
            let chosen = query_ta(f, &self.ta)?;
            *votes.entry(chosen).or_default().entry(*y).or_default() += 1;
        }
        for (entry, tally) in votes {
            if self.locked.contains(&entry) {
                continue;
            }
            let (class, _) = tally
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("tally is nonempty");
            self.anchor_class.insert(entry, *class);
        }
        Ok(())
    }

    fn absorb_prototypes(&mut self, local: &PrototypeTable) -> Result<()> {
        for (class, v) in local.iter() {
            self.memory.insert(*class, v.clone())?;
        }
        self.last_local = local.clone();
        Ok(())
    }
}

/// Plain cross-entropy training of a linear head on fixed features. When
/// `active` is given the softmax is restricted to those classes.
pub fn train_head_on_features(
    head: &mut LinearHead,
    feats: &[Vector],
    labels: &[u32],
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    active: Option<&[usize]>,
) -> Result<()> {
    if feats.is_empty() {
        return Err(Error::EmptyInput("head training data"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParam {
            name: "batch_size",
            reason: "must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc = HeadGrads::zeros(head.num_classes(), head.input_dim());
            for &si in batch {
                let (_, grads, _) =
                    head_cross_entropy_over(head, &feats[si], labels[si] as usize, active)?;
                acc.accumulate(&grads, scale)?;
            }
            head.apply_grads(&acc, learning_rate)?;
        }
    }
    Ok(())
}

/// Highest logit wins, ties to the lowest class index.
pub fn argmax_class(logits: &Vector) -> Result<u32> {
    let mut best = 0usize;
    for (i, v) in logits.as_slice().iter().enumerate() {
        if *v > logits.as_slice()[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Most cosine-similar candidate wins, ties to the lowest class index.
pub fn nearest_class<'a, I>(feature: &Vector, candidates: I) -> Result<u32>
where
    I: Iterator<Item = (u32, &'a Vector)>,
{
    let mut best: Option<(u32, f64)> = None;
    for (class, v) in candidates {
        let s = cosine_similarity(feature, v)?;
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((class, s));
        }
    }
    best.map(|(c, _)| c)
        .ok_or(Error::EmptyInput("prototype candidates"))
}
