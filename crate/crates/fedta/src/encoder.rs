//! Frozen feature encoders. The reference encoder is a seeded random-feature
//! network standing in for a pre-trained transformer backbone: none of its
//! weights ever train, so two encoders built from the same spec are
//! interchangeable bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};

/// Ordered token sequence with a uniform per-token dimension.
///
/// `base_offset` marks where the original embedding tokens start; everything
/// before it was prepended by enhancement. The reference encoder pools over
/// the whole sequence, while lookup encoders read only the base tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<Vector>,
    base_offset: usize,
}

impl TokenSequence {
    pub fn from_base(tokens: Vec<Vector>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        let dim = tokens[0].dim();
        for t in &tokens {
            if t.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.dim(),
                });
            }
        }
        Ok(Self {
            tokens,
            base_offset: 0,
        })
    }

    /// Prepend `prefix` to `base`, keeping both orders intact.
    pub fn with_prefix(prefix: Vec<Vector>, base: &TokenSequence) -> Result<Self> {
        let dim = base.dim();
        for t in &prefix {
            if t.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.dim(),
                });
            }
        }
        let base_offset = prefix.len() + base.base_offset;
        let mut tokens = prefix;
        tokens.extend(base.tokens.iter().cloned());
        Ok(Self {
            tokens,
            base_offset,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].dim()
    }

    pub fn token(&self, i: usize) -> &Vector {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[Vector] {
        &self.tokens
    }

    pub fn base_offset(&self) -> usize {
        self.base_offset
    }
}

/// Everything needed to rebuild a frozen encoder exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenEncoderSpec {
    pub seed: u64,
    /// Raw sample dimension accepted by `embed`.
    pub input_dim: usize,
    /// Token and feature dimension d.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_base_tokens: usize,
}

pub trait Encoder {
    /// Raw sample -> base token sequence.
    fn embed(&self, sample: &Vector) -> Result<TokenSequence>;

    /// Token sequence -> feature vector of dimension `embed_dim`.
    fn encode(&self, tokens: &TokenSequence) -> Result<Vector>;

    /// Gradient of cotangent . encode(tokens) with respect to each requested
    /// token slot, returned in the order the slots were given.
    fn encode_vjp(
        &self,
        tokens: &TokenSequence,
        cotangent: &Vector,
        trainable_slots: &[usize],
    ) -> Result<Vec<Vector>>;

    fn supports_vjp(&self) -> bool;

    fn embed_dim(&self) -> usize;

    fn input_dim(&self) -> usize;
}

/// Seeded random-feature encoder: a fixed linear map per base-token slot,
/// then a shared per-token map + tanh, mean pooling, and a fixed two-layer
/// tanh readout with a nonzero final bias (so no nonzero input can encode to
/// the zero vector).
///
/// Weights are drawn from ChaCha8(seed) in a fixed order: slot maps first,
/// then the shared token map, then the readout layers, then the bias. Entry
/// order is row-major. Slot maps use scale 1/sqrt(input_dim) and the output
/// layer 1/sqrt(hidden_dim); the token map and the first readout layer use
/// gain 4/sqrt(d) so pre-activations land in the curved part of tanh, which
/// keeps features of unrelated inputs decorrelated instead of letting them
/// collapse toward the shared output bias (scaled by 0.1). That order and
/// those scales are part of the contract; the oracle test rebuilds them
/// independently.
pub struct FrozenEncoder {
    spec: FrozenEncoderSpec,
    slot_maps: Vec<Matrix>,
    token_map: Matrix,
    w1: Matrix,
    w2: Matrix,
    b2: Vector,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draw")
}

impl FrozenEncoder {
    pub fn new(spec: FrozenEncoderSpec) -> Result<Self> {
        for (name, v) in [
            ("input_dim", spec.input_dim),
            ("embed_dim", spec.embed_dim),
            ("hidden_dim", spec.hidden_dim),
            ("num_base_tokens", spec.num_base_tokens),
        ] {
            if v == 0 {
                return Err(Error::InvalidParam {
                    name,
                    reason: "must be positive".into(),
                });
            }
        }
        let d = spec.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let slot_scale = 1.0 / (spec.input_dim as f64).sqrt();
        let slot_maps = (0..spec.num_base_tokens)
            .map(|_| gaussian_matrix(&mut rng, d, spec.input_dim, slot_scale))
            .collect();
        let d_scale = 4.0 / (d as f64).sqrt();
        let token_map = gaussian_matrix(&mut rng, d, d, d_scale);
        let w1 = gaussian_matrix(&mut rng, spec.hidden_dim, d, d_scale);
        let w2 = gaussian_matrix(
            &mut rng,
            d,
            spec.hidden_dim,
            1.0 / (spec.hidden_dim as f64).sqrt(),
        );
        let b2 = {
            let data = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1)
                .collect();
            Vector::new(data).expect("finite gaussian draw")
        };
        Ok(Self {
            spec,
            slot_maps,
            token_map,
            w1,
            w2,
            b2,
        })
    }

    pub fn spec(&self) -> &FrozenEncoderSpec {
        &self.spec
    }

    /// Pooled pre-readout activation: mean over tanh(token_map @ t_j).
    fn pool(&self, tokens: &TokenSequence) -> Result<Vector> {
        if tokens.dim() != self.spec.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.embed_dim,
                got: tokens.dim(),
            });
        }
        let mut pooled = Vector::zeros(self.spec.embed_dim);
        for t in tokens.tokens() {
            let mut mapped = self.token_map.matvec(t)?;
            for v in mapped.as_mut_slice() {
                *v = v.tanh();
            }
            pooled.add_scaled(&mapped, 1.0)?;
        }
        Ok(pooled.scaled(1.0 / tokens.len() as f64))
    }
}

impl Encoder for FrozenEncoder {
    fn embed(&self, sample: &Vector) -> Result<TokenSequence> {
        if sample.dim() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: sample.dim(),
            });
        }
        let tokens = self
            .slot_maps
            .iter()
            .map(|m| m.matvec(sample))
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::from_base(tokens)
    }

    fn encode(&self, tokens: &TokenSequence) -> Result<Vector> {
        let pooled = self.pool(tokens)?;
        let mut h = self.w1.matvec(&pooled)?;
        for v in h.as_mut_slice() {
            *v = v.tanh();
        }
        let mut out = self.w2.matvec(&h)?;
        out.add_scaled(&self.b2, 1.0)?;
        Ok(out)
    }

    fn encode_vjp(
        &self,
        tokens: &TokenSequence,
        cotangent: &Vector,
        trainable_slots: &[usize],
    ) -> Result<Vec<Vector>> {
        if cotangent.dim() != self.spec.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.embed_dim,
                got: cotangent.dim(),
            });
        }
        let pooled = self.pool(tokens)?;
        let u = self.w1.matvec(&pooled)?;
        let h: Vec<f64> = u.as_slice().iter().map(|v| v.tanh()).collect();
        // back through y = w2 h + b2 and h = tanh(u)
        let mut g_u = self.w2.matvec_t(cotangent)?;
        for (g, hv) in g_u.as_mut_slice().iter_mut().zip(&h) {
            *g *= 1.0 - hv * hv;
        }
        let g_pool = self.w1.matvec_t(&g_u)?;
        let inv_len = 1.0 / tokens.len() as f64;
        let mut out = Vec::with_capacity(trainable_slots.len());
        for &slot in trainable_slots {
            if slot >= tokens.len() {
                return Err(Error::IndexOutOfRange {
                    index: slot,
                    len: tokens.len(),
                });
            }
            let mapped = self.token_map.matvec(tokens.token(slot))?;
            let mut g_mapped = g_pool.scaled(inv_len);
            for (g, m) in g_mapped.as_mut_slice().iter_mut().zip(mapped.as_slice()) {
                let th = m.tanh();
                *g *= 1.0 - th * th;
            }
            out.push(self.token_map.matvec_t(&g_mapped)?);
        }
        Ok(out)
    }

    fn supports_vjp(&self) -> bool {
        true
    }

    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }
}

/// Encoder for datasets of precomputed embeddings: `embed` wraps the stored
/// embedding as a single token and `encode` mean-pools the base tokens only,
/// so prepended enhancement tokens do not alter the feature. It does not
/// support `encode_vjp`; stage-1 training updates nothing but keys and head
/// under this encoder.
pub struct LookupEncoder {
    dim: usize,
}

impl LookupEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam {
                name: "dim",
                reason: "must be positive".into(),
            });
        }
        Ok(Self { dim })
    }
}

impl Encoder for LookupEncoder {
    fn embed(&self, sample: &Vector) -> Result<TokenSequence> {
        if sample.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: sample.dim(),
            });
        }
        TokenSequence::from_base(vec![sample.clone()])
    }

    fn encode(&self, tokens: &TokenSequence) -> Result<Vector> {
        if tokens.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: tokens.dim(),
            });
        }
        let base = &tokens.tokens()[tokens.base_offset()..];
        if base.is_empty() {
            return Err(Error::EmptyInput("base tokens"));
        }
        let mut out = Vector::zeros(self.dim);
        for t in base {
            out.add_scaled(t, 1.0)?;
        }
        Ok(out.scaled(1.0 / base.len() as f64))
    }

    fn encode_vjp(
        &self,
        _tokens: &TokenSequence,
        _cotangent: &Vector,
        _trainable_slots: &[usize],
    ) -> Result<Vec<Vector>> {
        Err(Error::Unsupported("LookupEncoder does not differentiate"))
    }

    fn supports_vjp(&self) -> bool {
        false
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_difference_check;

    fn spec() -> FrozenEncoderSpec {
        FrozenEncoderSpec {
            seed: 11,
            input_dim: 8,
            embed_dim: 5,
            hidden_dim: 7,
            num_base_tokens: 3,
        }
    }

    fn sample(dim: usize, shift: f64) -> Vector {
        Vector::new((0..dim).map(|i| ((i as f64) * 0.37 + shift).sin()).collect()).unwrap()
    }

    #[test]
    fn same_spec_is_bitwise_identical() {
        let a = FrozenEncoder::new(spec()).unwrap();
        let b = FrozenEncoder::new(spec()).unwrap();
        let x = sample(8, 0.2);
        let fa = a.encode(&a.embed(&x).unwrap()).unwrap();
        let fb = b.encode(&b.embed(&x).unwrap()).unwrap();
        assert_eq!(fa.bits(), fb.bits());
    }

    #[test]
    fn different_seeds_differ() {
        let a = FrozenEncoder::new(spec()).unwrap();
        let mut s = spec();
        s.seed = 12;
        let b = FrozenEncoder::new(s).unwrap();
        let x = sample(8, 0.2);
        let fa = a.encode(&a.embed(&x).unwrap()).unwrap();
        let fb = b.encode(&b.embed(&x).unwrap()).unwrap();
        assert_ne!(fa.bits(), fb.bits());
    }

    #[test]
    fn zero_sample_embeds_to_zero_tokens_but_encodes_nonzero() {
        let enc = FrozenEncoder::new(spec()).unwrap();
        let zero = Vector::zeros(8);
        let tokens = enc.embed(&zero).unwrap();
        for t in tokens.tokens() {
            assert!(t.as_slice().iter().all(|v| *v == 0.0));
        }
        // encode of all-zero tokens is exactly the readout bias
        let f = enc.encode(&tokens).unwrap();
        assert!(f.norm() > 0.0);
    }

    #[test]
    fn nonzero_input_has_nonzero_feature() {
        let enc = FrozenEncoder::new(spec()).unwrap();
        for shift in [0.0, 0.5, 1.0, 2.5] {
            let f = enc.encode(&enc.embed(&sample(8, shift)).unwrap()).unwrap();
            assert!(f.norm() > 0.0);
        }
    }

    #[test]
    fn mean_pooling_is_order_invariant() {
        let enc = FrozenEncoder::new(spec()).unwrap();
        let a = sample(5, 0.1);
        let b = sample(5, 0.9);
        let c = sample(5, 1.7);
        let s1 = TokenSequence::from_base(vec![a.clone(), b.clone(), c.clone()]).unwrap();
        let s2 = TokenSequence::from_base(vec![c, a, b]).unwrap();
        let f1 = enc.encode(&s1).unwrap();
        let f2 = enc.encode(&s2).unwrap();
        for (x, y) in f1.as_slice().iter().zip(f2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // From-scratch rebuild of the seeded pipeline: regenerates every weight
    // with raw rand calls in the documented order and runs the forward pass
    // with plain loops. Keeps the generation order an explicit contract.
    #[test]
    fn forward_matches_independent_reimplementation() {
        use rand::Rng;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;

        let sp = spec();
        let (din, d, hid, nt) = (sp.input_dim, sp.embed_dim, sp.hidden_dim, sp.num_base_tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);
        let mut draw = |rows: usize, cols: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                        .collect()
                })
                .collect()
        };
        let slot_maps: Vec<Vec<Vec<f64>>> = (0..nt)
            .map(|_| draw(d, din, 1.0 / (din as f64).sqrt()))
            .collect();
        let token_map = draw(d, d, 4.0 / (d as f64).sqrt());
        let w1 = draw(hid, d, 4.0 / (d as f64).sqrt());
        let w2 = draw(d, hid, 1.0 / (hid as f64).sqrt());
        let b2: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1)
            .collect();

        let x = sample(din, 0.4);
        let matmul = |m: &Vec<Vec<f64>>, v: &[f64]| -> Vec<f64> {
            m.iter()
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        // two-token input: embed slots 0 and 2
        let t0 = matmul(&slot_maps[0], x.as_slice());
        let t2 = matmul(&slot_maps[2], x.as_slice());
        let mut pooled = vec![0.0; d];
        for t in [&t0, &t2] {
            let mapped = matmul(&token_map, t);
            for (p, m) in pooled.iter_mut().zip(&mapped) {
                *p += m.tanh();
            }
        }
        for p in pooled.iter_mut() {
            *p /= 2.0;
        }
        let h: Vec<f64> = matmul(&w1, &pooled).iter().map(|v| v.tanh()).collect();
        let mut expected = matmul(&w2, &h);
        for (e, b) in expected.iter_mut().zip(&b2) {
            *e += b;
        }

        let enc = FrozenEncoder::new(sp).unwrap();
        let full = enc.embed(&x).unwrap();
        let two = TokenSequence::from_base(vec![full.token(0).clone(), full.token(2).clone()])
            .unwrap();
        let got = enc.encode(&two).unwrap();
        for (g, e) in got.as_slice().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let enc = FrozenEncoder::new(spec()).unwrap();
        let base = enc.embed(&sample(8, 0.3)).unwrap();
        let prefix = vec![sample(5, 1.1), sample(5, 2.2)];
        let seq = TokenSequence::with_prefix(prefix, &base).unwrap();
        let cot = sample(5, 0.7);
        let slots = [0usize, 1];
        let grads = enc.encode_vjp(&seq, &cot, &slots).unwrap();

        for (gi, &slot) in grads.iter().zip(&slots) {
            let err = finite_difference_check(
                |t| {
                    let mut toks: Vec<Vector> = seq.tokens().to_vec();
                    toks[slot] = t.clone();
                    let perturbed = TokenSequence::from_base(toks).unwrap();
                    Ok(enc.encode(&perturbed)?.dot(&cot)?)
                },
                seq.token(slot),
                gi,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-7, "slot {slot} relative error {err}");
        }
    }

    #[test]
    fn vjp_rejects_out_of_range_slot() {
        let enc = FrozenEncoder::new(spec()).unwrap();
        let seq = enc.embed(&sample(8, 0.3)).unwrap();
        let cot = sample(5, 0.7);
        assert!(matches!(
            enc.encode_vjp(&seq, &cot, &[99]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn embed_rejects_wrong_input_dim() {
        let enc = FrozenEncoder::new(spec()).unwrap();
        assert!(matches!(
            enc.embed(&sample(9, 0.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn token_sequence_rejects_mixed_dims() {
        let r = TokenSequence::from_base(vec![sample(4, 0.0), sample(5, 0.0)]);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lookup_encoder_ignores_prefix_tokens() {
        let enc = LookupEncoder::new(5).unwrap();
        let x = sample(5, 0.6);
        let base = enc.embed(&x).unwrap();
        let plain = enc.encode(&base).unwrap();
        assert_eq!(plain.bits(), x.bits());
        let enhanced = TokenSequence::with_prefix(vec![sample(5, 3.0)], &base).unwrap();
        let same = enc.encode(&enhanced).unwrap();
        assert_eq!(same.bits(), x.bits());
        assert!(!enc.supports_vjp());
        assert!(enc.encode_vjp(&enhanced, &x, &[0]).is_err());
    }
}
