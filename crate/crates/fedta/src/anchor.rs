//! Tail anchors: trainable vectors mixed into the frozen feature so that each
//! class's representation converges to a stable position. Stage-2 trains the
//! chosen anchor, its key, and the stage-2 head; the frozen result supplies
//! class prototypes.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::enhancement::{enhance, query_ie, KnowledgeBase};
use crate::error::{Error, Result};
use crate::numkit::{
    cosine_distance, cosine_distance_grad, head_cross_entropy_over, softmax_cross_entropy,
    HeadGrads, LinearHead, Vector,
};
use crate::seeding::subseed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailAnchorEntry {
    pub key: Vector,
    pub anchor: Vector,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct TaRecord {
    m: usize,
    d: usize,
    entries: Vec<TailAnchorEntry>,
}

/// Client-local pool of tail anchors. Never leaves the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaRecord", into = "TaRecord")]
pub struct TailAnchorSet {
    d: usize,
    entries: Vec<TailAnchorEntry>,
}

impl TryFrom<TaRecord> for TailAnchorSet {
    type Error = Error;

    fn try_from(rec: TaRecord) -> Result<Self> {
        if rec.m != rec.entries.len() {
            return Err(Error::InvalidParam {
                name: "m",
                reason: format!("declared {} entries, found {}", rec.m, rec.entries.len()),
            });
        }
        let set = TailAnchorSet {
            d: rec.d,
            entries: rec.entries,
        };
        set.validate()?;
        Ok(set)
    }
}

impl From<TailAnchorSet> for TaRecord {
    fn from(set: TailAnchorSet) -> Self {
        TaRecord {
            m: set.entries.len(),
            d: set.d,
            entries: set.entries,
        }
    }
}

impl TailAnchorSet {
    /// Seeded initialization: unit-normalized Gaussian keys; anchors start
    /// near zero (Gaussian scaled by 1e-3) so early mixed features stay close
    /// to the frozen feature.
    pub fn init(m: usize, d: usize, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidParam {
                name: "tail anchor shape",
                reason: "m and d must be positive".into(),
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
                    context: "tail anchor key init",
                });
            }
            let anchor = Vector::new(
                (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 1e-3)
                    .collect(),
            )?;
            entries.push(TailAnchorEntry {
                key: key.scaled(1.0 / norm),
                anchor,
                frozen: false,
            });
        }
        Ok(Self { d, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, i: usize) -> Result<&TailAnchorEntry> {
        self.entries.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.entries.len(),
        })
    }

    pub fn entries(&self) -> &[TailAnchorEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> Result<&mut TailAnchorEntry> {
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

    pub fn apply_grads(&mut self, index: usize, grads: &AnchorGrads, lr: f64) -> Result<()> {
        if grads.anchor.dim() != self.d || grads.key.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: grads.anchor.dim(),
            });
        }
        let len = self.entries.len();
        let entry = self
            .entries
            .get_mut(index)
            .ok_or(Error::IndexOutOfRange { index, len })?;
        if entry.frozen {
            return Err(Error::Frozen {
                what: "tail anchor entry",
            });
        }
        entry.anchor.add_scaled(&grads.anchor, -lr)?;
        entry.key.add_scaled(&grads.key, -lr)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.key.validate()?;
            e.anchor.validate()?;
            if e.key.dim() != self.d || e.anchor.dim() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: e.key.dim(),
                });
            }
            if e.key.norm() == 0.0 {
                return Err(Error::ZeroNorm {
                    context: "tail anchor key",
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

/// How the frozen feature and the anchor are combined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixRuleKind {
    /// alpha * F_out + (1 - alpha) * TA
    Convex,
    /// Per-coordinate coin flip, fixed per entry by `mask_seed`: heads takes
    /// the coordinate from F_out, tails from the anchor.
    RandomMask,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StageTwoHyper {
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub mix_alpha: f64,
    pub mix_rule: MixRuleKind,
    pub mask_seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// When true, the stage-2 cross-entropy softmax runs over the current
    /// task's classes only, so head rows of finished tasks stop receiving
    /// gradient once their task ends.
    pub task_local_ce: bool,
}

impl Default for StageTwoHyper {
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
            task_local_ce: false,
        }
    }
}

/// Per-class feature prototypes. Keys are global class labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrototypeTable(BTreeMap<u32, Vector>);

impl PrototypeTable {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, class: u32, prototype: Vector) -> Result<()> {
        prototype.validate()?;
        if prototype.norm() == 0.0 {
            return Err(Error::ZeroNorm {
                context: "prototype",
            });
        }
        if let Some((_, existing)) = self.0.iter().next() {
            if existing.dim() != prototype.dim() {
                return Err(Error::DimensionMismatch {
                    expected: existing.dim(),
                    got: prototype.dim(),
                });
            }
        }
        self.0.insert(class, prototype);
        Ok(())
    }

    pub fn get(&self, class: u32) -> Option<&Vector> {
        self.0.get(&class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Vector)> {
        self.0.iter()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.keys().copied()
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = None;
        for v in self.0.values() {
            v.validate()?;
            if v.norm() == 0.0 {
                return Err(Error::ZeroNorm {
                    context: "prototype",
                });
            }
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: v.dim(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Index of the anchor whose key is nearest to the frozen feature by cosine
/// distance; ties go to the lowest index.
pub fn query_ta(f_out: &Vector, ta: &TailAnchorSet) -> Result<usize> {
    if ta.is_empty() {
        return Err(Error::EmptyInput("tail anchor set"));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, e) in ta.entries().iter().enumerate() {
        let d = cosine_distance(f_out, &e.key)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// alpha * F_out + (1 - alpha) * TA.
pub fn mix(f_out: &Vector, ta: &Vector, alpha: f64) -> Result<Vector> {
    if f_out.dim() != ta.dim() {
        return Err(Error::DimensionMismatch {
            expected: f_out.dim(),
            got: ta.dim(),
        });
    }
    let mut out = f_out.scaled(alpha);
    out.add_scaled(ta, 1.0 - alpha)?;
    Ok(out)
}

/// Coordinate ownership mask for the random-mask rule: true means the
/// coordinate comes from F_out. Fixed per (seed, entry index).
pub fn mask_for_entry(seed: u64, entry_index: usize, dim: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, entry_index as u64));
    (0..dim).map(|_| rng.gen_bool(0.5)).collect()
}

/// Mixed feature plus the diagonal of dF_TA/dTA for the active rule.
pub(crate) fn mix_with_rule(
    f_out: &Vector,
    anchor: &Vector,
    entry_index: usize,
    hyper: &StageTwoHyper,
) -> Result<(Vector, Vec<f64>)> {
    match hyper.mix_rule {
        MixRuleKind::Convex => {
            let mixed = mix(f_out, anchor, hyper.mix_alpha)?;
            Ok((mixed, vec![1.0 - hyper.mix_alpha; f_out.dim()]))
        }
        MixRuleKind::RandomMask => {
            if f_out.dim() != anchor.dim() {
                return Err(Error::DimensionMismatch {
                    expected: f_out.dim(),
                    got: anchor.dim(),
                });
            }
            let mask = mask_for_entry(hyper.mask_seed, entry_index, f_out.dim());
            let mut data = Vec::with_capacity(f_out.dim());
            let mut jac = Vec::with_capacity(f_out.dim());
            for i in 0..f_out.dim() {
                if mask[i] {
                    data.push(f_out.as_slice()[i]);
                    jac.push(0.0);
                } else {
                    data.push(anchor.as_slice()[i]);
                    jac.push(1.0);
                }
            }
            Ok((Vector::new(data)?, jac))
        }
    }
}

/// Prototype-contrastive loss against the global prototypes, temperature
/// tau. Returns the loss and its gradient with respect to the feature;
/// prototypes are constants.
pub fn contrastive_loss(
    feature: &Vector,
    label: u32,
    globals: &PrototypeTable,
    tau: f64,
) -> Result<(f64, Vector)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParam {
            name: "tau",
            reason: format!("must be positive, got {tau}"),
        });
    }
    if globals.get(label).is_none() {
        return Err(Error::MissingClass { class: label });
    }
    let classes: Vec<u32> = globals.classes().collect();
    let label_pos = classes.iter().position(|c| *c == label).unwrap();
    let mut logits = Vec::with_capacity(classes.len());
    for c in &classes {
        logits.push(feature.dot(globals.get(*c).unwrap())? / tau);
    }
    let (loss, glogits) = softmax_cross_entropy(&Vector::new(logits)?, label_pos)?;
    let mut grad = Vector::zeros(feature.dim());
    for (gl, c) in glogits.as_slice().iter().zip(&classes) {
        grad.add_scaled(globals.get(*c).unwrap(), gl / tau)?;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct AnchorGrads {
    pub anchor: Vector,
    pub key: Vector,
}

#[derive(Debug)]
pub struct Stage2Grads {
    pub chosen: usize,
    pub anchor: AnchorGrads,
    pub head: HeadGrads,
    pub f_ta: Vector,
}

/// Stage-2 loss on a precomputed frozen feature. The feature is a constant;
/// gradients flow to the chosen anchor through the mix, to the chosen key
/// through the lambda3 term only, and to the head through cross-entropy.
/// Samples whose label has no global prototype skip the contrastive term.
pub(crate) fn stage2_core(
    f_out: &Vector,
    label: u32,
    ta: &TailAnchorSet,
    head: &LinearHead,
    globals: &PrototypeTable,
    hyper: &StageTwoHyper,
    active: Option<&[usize]>,
) -> Result<(f64, Stage2Grads)> {
    let chosen = query_ta(f_out, ta)?;
    let entry = ta.entry(chosen)?;
    let (f_ta, jac) = mix_with_rule(f_out, &entry.anchor, chosen, hyper)?;

    let (ce, head_grads, dfeature) = head_cross_entropy_over(head, &f_ta, label as usize, active)?;
    let mut loss = ce;
    let mut g_f = dfeature;

    if hyper.lambda2 != 0.0 && globals.get(label).is_some() {
        let (cons, gcons) = contrastive_loss(&f_ta, label, globals, hyper.tau)?;
        loss += hyper.lambda2 * cons;
        g_f.add_scaled(&gcons, hyper.lambda2)?;
    }

    let mut key_grad = Vector::zeros(f_out.dim());
    if hyper.lambda3 != 0.0 {
        let dist = cosine_distance(&f_ta, &entry.key)?;
        loss += hyper.lambda3 * dist;
        let g_dist_f = cosine_distance_grad(&entry.key, &f_ta)?;
        g_f.add_scaled(&g_dist_f, hyper.lambda3)?;
        let g_dist_k = cosine_distance_grad(&f_ta, &entry.key)?;
        key_grad.add_scaled(&g_dist_k, hyper.lambda3)?;
    }

    let mut anchor_grad = Vector::zeros(f_out.dim());
    for i in 0..f_out.dim() {
        anchor_grad.as_mut_slice()[i] = jac[i] * g_f.as_slice()[i];
    }

    Ok((
        loss,
        Stage2Grads {
            chosen,
            anchor: AnchorGrads {
                anchor: anchor_grad,
                key: key_grad,
            },
            head: head_grads,
            f_ta,
        },
    ))
}

/// Frozen pathway from a raw sample to its stage-2 feature F_out: embed,
/// query the knowledge base, enhance, encode.
pub fn enhanced_feature(
    sample: &Vector,
    kb: &KnowledgeBase,
    encoder: &dyn Encoder,
    n_select: usize,
) -> Result<Vector> {
    let base = encoder.embed(sample)?;
    let query_key = encoder.encode(&base)?;
    let selected = query_ie(&query_key, kb, n_select)?;
    let enhanced = enhance(&base, kb, &selected)?;
    encoder.encode(&enhanced)
}

/// Full stage-2 op from a raw sample. Requires the knowledge base frozen and
/// the chosen anchor unfrozen.
pub fn stage2_loss_and_grads(
    sample: &Vector,
    label: u32,
    kb: &KnowledgeBase,
    ta: &TailAnchorSet,
    head: &LinearHead,
    encoder: &dyn Encoder,
    globals: &PrototypeTable,
    hyper: &StageTwoHyper,
    n_select: usize,
) -> Result<(f64, Stage2Grads)> {
    if !kb.all_frozen() {
        return Err(Error::NotFrozen {
            what: "knowledge base",
        });
    }
    let f_out = enhanced_feature(sample, kb, encoder, n_select)?;
    let (loss, grads) = stage2_core(&f_out, label, ta, head, globals, hyper, None)?;
    if ta.entry(grads.chosen)?.frozen {
        return Err(Error::Frozen {
            what: "tail anchor entry",
        });
    }
    Ok((loss, grads))
}

/// Class means of the mixed features over the task data, through the frozen
/// knowledge base and frozen anchors.
pub fn compute_local_prototypes(
    samples: &[(&Vector, u32)],
    kb: &KnowledgeBase,
    ta: &TailAnchorSet,
    encoder: &dyn Encoder,
    hyper: &StageTwoHyper,
    n_select: usize,
) -> Result<PrototypeTable> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("prototype task data"));
    }
    if !kb.all_frozen() {
        return Err(Error::NotFrozen {
            what: "knowledge base",
        });
    }
    if !ta.all_frozen() {
        return Err(Error::NotFrozen {
            what: "tail anchor set",
        });
    }
    let mut features = Vec::with_capacity(samples.len());
    for (x, y) in samples {
        let f_out = enhanced_feature(x, kb, encoder, n_select)?;
        let chosen = query_ta(&f_out, ta)?;
        let (f_ta, _) = mix_with_rule(&f_out, &ta.entry(chosen)?.anchor, chosen, hyper)?;
        features.push((*y, f_ta));
    }
    prototype_table_from_features(&features)
}

/// Per-class mean of already-computed features.
pub fn prototype_table_from_features(features: &[(u32, Vector)]) -> Result<PrototypeTable> {
    if features.is_empty() {
        return Err(Error::EmptyInput("prototype features"));
    }
    let mut sums: BTreeMap<u32, (Vector, usize)> = BTreeMap::new();
    for (y, f) in features {
        match sums.get_mut(y) {
            Some((sum, count)) => {
                sum.add_scaled(f, 1.0)?;
                *count += 1;
            }
            None => {
                sums.insert(*y, (f.clone(), 1));
            }
        }
    }
    let mut table = PrototypeTable::new();
    for (y, (sum, count)) in sums {
        table.insert(y, sum.scaled(1.0 / count as f64))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{FrozenEncoder, FrozenEncoderSpec};
    use crate::numkit::{finite_difference_check, head_cross_entropy};

    fn encoder() -> FrozenEncoder {
        FrozenEncoder::new(FrozenEncoderSpec {
            seed: 9,
            input_dim: 6,
            embed_dim: 4,
            hidden_dim: 5,
            num_base_tokens: 2,
        })
        .unwrap()
    }

    fn sample(dim: usize, shift: f64) -> Vector {
        Vector::new((0..dim).map(|i| ((i as f64) * 0.53 + shift).sin()).collect()).unwrap()
    }

    fn frozen_kb(seed: u64) -> KnowledgeBase {
        let mut kb = KnowledgeBase::init(4, 2, 4, seed).unwrap();
        kb.set_frozen(true);
        kb
    }

    fn hyper() -> StageTwoHyper {
        StageTwoHyper {
            lambda2: 1.0,
            lambda3: 0.5,
            tau: 0.5,
            mix_alpha: 0.5,
            mix_rule: MixRuleKind::Convex,
            mask_seed: 3,
            learning_rate: 0.1,
            epochs: 2,
            batch_size: 4,
        }
    }

    fn globals_for(dim: usize) -> PrototypeTable {
        let mut t = PrototypeTable::new();
        t.insert(0, sample(dim, 0.3)).unwrap();
        t.insert(1, sample(dim, 1.3)).unwrap();
        t.insert(2, sample(dim, 2.3)).unwrap();
        t
    }

    #[test]
    fn query_ta_matches_exhaustive_argmin() {
        let ta = TailAnchorSet::init(9, 4, 17).unwrap();
        let f = sample(4, 0.9);
        let got = query_ta(&f, &ta).unwrap();
        let expected = ta
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine_distance(&f, &e.key).unwrap(), i))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .unwrap()
            .1;
        assert_eq!(got, expected);
    }

    #[test]
    fn query_ta_ties_prefer_lowest_index() {
        let mut ta = TailAnchorSet::init(3, 4, 5).unwrap();
        let f = sample(4, 0.2);
        let aligned = f.scaled(1.0 / f.norm());
        ta.entry_mut(1).unwrap().key = aligned.clone();
        ta.entry_mut(2).unwrap().key = aligned;
        assert_eq!(query_ta(&f, &ta).unwrap(), 1);
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let f = sample(4, 0.1);
        let a = sample(4, 2.0);
        assert_eq!(mix(&f, &a, 1.0).unwrap().as_slice(), f.scaled(1.0).as_slice());
        assert_eq!(mix(&f, &a, 0.0).unwrap().as_slice(), a.scaled(1.0).as_slice());
        let mid = mix(&f, &a, 0.5).unwrap();
        for i in 0..4 {
            let want = 0.5 * f.as_slice()[i] + 0.5 * a.as_slice()[i];
            assert_eq!(mid.as_slice()[i], want);
        }
    }

    #[test]
    fn random_mask_mix_takes_each_coordinate_from_one_source() {
        let f = sample(16, 0.1);
        let a = sample(16, 2.0);
        let mut h = hyper();
        h.mix_rule = MixRuleKind::RandomMask;
        let (m1, jac) = mix_with_rule(&f, &a, 7, &h).unwrap();
        let (m2, _) = mix_with_rule(&f, &a, 7, &h).unwrap();
        assert_eq!(m1.bits(), m2.bits(), "mask must be fixed per entry");
        let mut from_f = 0;
        for i in 0..16 {
            let v = m1.as_slice()[i];
            assert!(v == f.as_slice()[i] || v == a.as_slice()[i]);
            if jac[i] == 0.0 {
                assert_eq!(v, f.as_slice()[i]);
                from_f += 1;
            } else {
                assert_eq!(v, a.as_slice()[i]);
            }
        }
        assert!(from_f > 0 && from_f < 16, "degenerate mask");
        let (m3, _) = mix_with_rule(&f, &a, 8, &h).unwrap();
        assert_ne!(m1.bits(), m3.bits(), "different entries get different masks");
    }

    #[test]
    fn contrastive_loss_hand_worked_two_prototype_case() {
        // G0 = e0, G1 = e1, feature = e0, tau = 1:
        // logits (1, 0), loss = ln(1 + e^-1), grad = (p0 - 1) G0 + p1 G1
        let mut globals = PrototypeTable::new();
        globals.insert(0, Vector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        globals.insert(1, Vector::new(vec![0.0, 1.0]).unwrap()).unwrap();
        let f = Vector::new(vec![1.0, 0.0]).unwrap();
        let (loss, grad) = contrastive_loss(&f, 0, &globals, 1.0).unwrap();
        assert!((loss - 0.3132616875182228).abs() < 1e-12);
        let p1 = 1.0 / (1.0 + 1.0f64.exp());
        assert!((grad.as_slice()[0] - (-p1)).abs() < 1e-12);
        assert!((grad.as_slice()[1] - p1).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_single_class_is_zero() {
        let mut globals = PrototypeTable::new();
        globals.insert(4, sample(4, 0.4)).unwrap();
        let f = sample(4, 1.0);
        let (loss, grad) = contrastive_loss(&f, 4, &globals, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn contrastive_loss_missing_class_errors() {
        let globals = globals_for(4);
        let f = sample(4, 1.0);
        assert!(matches!(
            contrastive_loss(&f, 9, &globals, 0.1),
            Err(Error::MissingClass { class: 9 })
        ));
    }

    #[test]
    fn contrastive_loss_rejects_bad_tau() {
        let globals = globals_for(4);
        let f = sample(4, 1.0);
        assert!(contrastive_loss(&f, 0, &globals, 0.0).is_err());
        assert!(contrastive_loss(&f, 0, &globals, -1.0).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let globals = globals_for(4);
        let f = sample(4, 1.7);
        let (_, grad) = contrastive_loss(&f, 1, &globals, 0.3).unwrap();
        let err = finite_difference_check(
            |x| contrastive_loss(x, 1, &globals, 0.3).map(|(l, _)| l),
            &f,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn stage2_without_regularizers_is_head_cross_entropy() {
        let enc = encoder();
        let kb = frozen_kb(23);
        let ta = TailAnchorSet::init(5, 4, 41).unwrap();
        let head = LinearHead::zeros(3, 4);
        let mut h = hyper();
        h.lambda2 = 0.0;
        h.lambda3 = 0.0;
        let x = sample(6, 0.6);
        let (loss, grads) =
            stage2_loss_and_grads(&x, 1, &kb, &ta, &head, &enc, &PrototypeTable::new(), &h, 2)
                .unwrap();
        let (ce, _, df) = head_cross_entropy(&head, &grads.f_ta, 1).unwrap();
        assert_eq!(loss, ce);
        for i in 0..4 {
            let want = (1.0 - h.mix_alpha) * df.as_slice()[i];
            assert!((grads.anchor.anchor.as_slice()[i] - want).abs() < 1e-15);
        }
        assert!(grads.anchor.key.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stage2_skips_contrastive_when_label_unavailable() {
        let enc = encoder();
        let kb = frozen_kb(29);
        let ta = TailAnchorSet::init(5, 4, 43).unwrap();
        let head = LinearHead::zeros(4, 4);
        let h = hyper();
        let x = sample(6, 0.6);
        // label 3 has no prototype in globals_for (classes 0..3)
        let (with_missing, _) =
            stage2_loss_and_grads(&x, 3, &kb, &ta, &head, &enc, &globals_for(4), &h, 2).unwrap();
        let mut h0 = h.clone();
        h0.lambda2 = 0.0;
        let (without_term, _) =
            stage2_loss_and_grads(&x, 3, &kb, &ta, &head, &enc, &globals_for(4), &h0, 2).unwrap();
        assert_eq!(with_missing, without_term);
    }

    #[test]
    fn stage2_requires_frozen_knowledge_base() {
        let enc = encoder();
        let mut kb = frozen_kb(23);
        kb.set_frozen(false);
        let ta = TailAnchorSet::init(5, 4, 41).unwrap();
        let head = LinearHead::zeros(3, 4);
        let r = stage2_loss_and_grads(
            &sample(6, 0.1),
            0,
            &kb,
            &ta,
            &head,
            &enc,
            &PrototypeTable::new(),
            &hyper(),
            2,
        );
        assert!(matches!(r, Err(Error::NotFrozen { .. })));
    }

    #[test]
    fn stage2_rejects_frozen_chosen_anchor() {
        let enc = encoder();
        let kb = frozen_kb(23);
        let mut ta = TailAnchorSet::init(5, 4, 41).unwrap();
        ta.set_frozen(true);
        let head = LinearHead::zeros(3, 4);
        let r = stage2_loss_and_grads(
            &sample(6, 0.1),
            0,
            &kb,
            &ta,
            &head,
            &enc,
            &PrototypeTable::new(),
            &hyper(),
            2,
        );
        assert!(matches!(r, Err(Error::Frozen { .. })));
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        for rule in [MixRuleKind::Convex, MixRuleKind::RandomMask] {
            let enc = encoder();
            let kb = frozen_kb(31);
            let mut ta = TailAnchorSet::init(6, 4, 47).unwrap();
            // init draws tiny anchors; scale to O(1) so the finite-difference
            // step is small relative to every coordinate
            for i in 0..ta.len() {
                let scaled = ta.entry(i).unwrap().anchor.scaled(700.0);
                ta.entry_mut(i).unwrap().anchor = scaled;
            }
            let mut head = LinearHead::zeros(3, 4);
            for (i, v) in head.weight.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.41).cos() * 0.3;
            }
            let mut h = hyper();
            h.mix_rule = rule;
            let globals = globals_for(4);
            let x = sample(6, 1.2);
            let (_, grads) =
                stage2_loss_and_grads(&x, 2, &kb, &ta, &head, &enc, &globals, &h, 2).unwrap();
            let chosen = grads.chosen;

            let anchor0 = ta.entry(chosen).unwrap().anchor.clone();
            let err_a = finite_difference_check(
                |a| {
                    let mut ta2 = ta.clone();
                    ta2.entry_mut(chosen).unwrap().anchor = a.clone();
                    stage2_loss_and_grads(&x, 2, &kb, &ta2, &head, &enc, &globals, &h, 2)
                        .map(|(l, _)| l)
                },
                &anchor0,
                &grads.anchor.anchor,
                1e-5,
            )
            .unwrap();
            assert!(err_a < 1e-6, "anchor grad error {err_a} ({rule:?})");

            let key0 = ta.entry(chosen).unwrap().key.clone();
            let err_k = finite_difference_check(
                |k| {
                    let mut ta2 = ta.clone();
                    ta2.entry_mut(chosen).unwrap().key = k.clone();
                    stage2_loss_and_grads(&x, 2, &kb, &ta2, &head, &enc, &globals, &h, 2)
                        .map(|(l, _)| l)
                },
                &key0,
                &grads.anchor.key,
                1e-5,
            )
            .unwrap();
            assert!(err_k < 1e-6, "key grad error {err_k} ({rule:?})");
        }
    }

    #[test]
    fn local_prototypes_are_class_means() {
        let enc = encoder();
        let kb = frozen_kb(37);
        let mut ta = TailAnchorSet::init(5, 4, 53).unwrap();
        ta.set_frozen(true);
        let h = hyper();
        let xs: Vec<Vector> = (0..6).map(|i| sample(6, i as f64 * 0.4)).collect();
        let data: Vec<(&Vector, u32)> =
            xs.iter().enumerate().map(|(i, x)| (x, (i % 2) as u32)).collect();
        let table = compute_local_prototypes(&data, &kb, &ta, &enc, &h, 2).unwrap();
        assert_eq!(table.len(), 2);

        // independent mean over the same frozen pathway
        for class in [0u32, 1u32] {
            let mut sum = Vector::zeros(4);
            let mut count = 0;
            for (x, y) in &data {
                if *y != class {
                    continue;
                }
                let f_out = enhanced_feature(x, &kb, &enc, 2).unwrap();
                let chosen = query_ta(&f_out, &ta).unwrap();
                let (f_ta, _) =
                    mix_with_rule(&f_out, &ta.entry(chosen).unwrap().anchor, chosen, &h).unwrap();
                sum.add_scaled(&f_ta, 1.0).unwrap();
                count += 1;
            }
            let mean = sum.scaled(1.0 / count as f64);
            assert_eq!(table.get(class).unwrap().bits(), mean.bits());
        }
    }

    #[test]
    fn local_prototypes_require_frozen_state() {
        let enc = encoder();
        let kb = frozen_kb(37);
        let ta = TailAnchorSet::init(5, 4, 53).unwrap();
        let x = sample(6, 0.0);
        let data = vec![(&x, 0u32)];
        let r = compute_local_prototypes(&data, &kb, &ta, &enc, &hyper(), 2);
        assert!(matches!(r, Err(Error::NotFrozen { .. })));
    }

    #[test]
    fn anchor_init_shapes_and_norms() {
        let ta = TailAnchorSet::init(8, 5, 71).unwrap();
        assert_eq!(ta.len(), 8);
        for e in ta.entries() {
            assert!((e.key.norm() - 1.0).abs() < 1e-12);
            assert!(e.anchor.norm() < 0.01, "anchor init should be tiny");
            assert!(!e.frozen);
        }
    }

    #[test]
    fn tail_anchor_set_json_round_trips_bitwise() {
        let mut ta = TailAnchorSet::init(4, 3, 83).unwrap();
        ta.entry_mut(1).unwrap().frozen = true;
        let json = ta.to_json().unwrap();
        let back = TailAnchorSet::from_json(&json).unwrap();
        for (a, b) in ta.entries().iter().zip(back.entries()) {
            assert_eq!(a.frozen, b.frozen);
            assert_eq!(a.key.bits(), b.key.bits());
            assert_eq!(a.anchor.bits(), b.anchor.bits());
        }
    }

    #[test]
    fn prototype_table_round_trips_and_rejects_zero() {
        let mut t = PrototypeTable::new();
        t.insert(3, sample(4, 0.5)).unwrap();
        t.insert(1, sample(4, 1.5)).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: PrototypeTable = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.get(3).unwrap().bits(), t.get(3).unwrap().bits());
        assert!(t.insert(0, Vector::zeros(4)).is_err());
    }
}
