//! Dense vector/matrix kernels, similarity functions, and the differentiable
//! losses shared by every training path.
//!
//! All scalars are f64. Entries are validated finite at construction and at
//! deserialization boundaries; zero-norm vectors are rejected wherever a
//! similarity is taken.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-dimension dense vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "vector" });
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::EmptyInput("vector"));
        }
        if !self.0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "vector" });
        }
        Ok(())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Vector, scale: f64) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> Vector {
        Self(self.0.iter().map(|v| v * scale).collect())
    }

    pub fn bits(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "matrix" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> Result<Vector> {
        if i >= self.rows {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.rows,
            });
        }
        Vector::new(self.row(i).to_vec())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: self.data.len(),
            });
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "matrix" });
        }
        Ok(())
    }

    /// A @ x
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        check_dims(self.cols, x.dim())?;
        let mut out = vec![0.0; self.rows];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self
                .row(i)
                .iter()
                .zip(x.as_slice())
                .map(|(a, b)| a * b)
                .sum();
        }
        Ok(Vector(out))
    }

    /// A^T @ x
    pub fn matvec_t(&self, x: &Vector) -> Result<Vector> {
        check_dims(self.rows, x.dim())?;
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.as_slice().iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.row(i)[j] * xi;
            }
        }
        Ok(Vector(out))
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * scale).collect(),
        }
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn checked_norms(a: &Vector, b: &Vector, context: &'static str) -> Result<(f64, f64)> {
    check_dims(a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { context });
    }
    Ok((na, nb))
}

/// a.b / (|a| |b|), in [-1, 1] up to rounding.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    let (na, nb) = checked_norms(a, b, "cosine_similarity")?;
    Ok(a.dot(b)? / (na * nb))
}

/// 1 - cosine_similarity, in [0, 2]. The only distance used anywhere.
pub fn cosine_distance(a: &Vector, b: &Vector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Gradient of cosine_distance(fixed, var) with respect to `var`.
pub fn cosine_distance_grad(fixed: &Vector, var: &Vector) -> Result<Vector> {
    let (nf, nv) = checked_norms(fixed, var, "cosine_distance_grad")?;
    let dot = fixed.dot(var)?;
    let mut out = var.scaled(dot / (nf * nv * nv * nv));
    out.add_scaled(fixed, -1.0 / (nf * nv))?;
    Ok(out)
}

/// Max-shifted softmax cross-entropy. Returns (loss, grad wrt logits);
/// the gradient is softmax(logits) - onehot(label).
pub fn softmax_cross_entropy(logits: &Vector, label: usize) -> Result<(f64, Vector)> {
    if label >= logits.dim() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.dim(),
        });
    }
    let max = logits
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.as_slice().iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits.as_slice()[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, Vector(grad)))
}

/// Softmax cross-entropy restricted to a subset of logit indices. The
/// returned gradient has the full dimension with zeros outside `active`.
/// `active` must be strictly increasing, in range, and contain `label`.
pub fn softmax_cross_entropy_over(
    logits: &Vector,
    label: usize,
    active: &[usize],
) -> Result<(f64, Vector)> {
    if active.is_empty() {
        return Err(Error::EmptyInput("active class set"));
    }
    if !active.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidParam {
            name: "active",
            reason: "class indices must be strictly increasing".into(),
        });
    }
    if *active.last().unwrap() >= logits.dim() {
        return Err(Error::LabelOutOfRange {
            label: *active.last().unwrap(),
            num_classes: logits.dim(),
        });
    }
    let Some(label_pos) = active.iter().position(|&c| c == label) else {
        return Err(Error::InvalidParam {
            name: "label",
            reason: format!("class {label} is not in the active set"),
        });
    };
    let sub: Vec<f64> = active.iter().map(|&c| logits.as_slice()[c]).collect();
    let (loss, g_sub) = softmax_cross_entropy(&Vector(sub), label_pos)?;
    let mut grad = Vector::zeros(logits.dim());
    for (gi, &c) in g_sub.as_slice().iter().zip(active) {
        grad.as_mut_slice()[c] = *gi;
    }
    Ok((loss, grad))
}

/// Sorted, deduplicated class indices of a label slice.
pub fn task_class_set(labels: &[u32]) -> Vec<usize> {
    let mut cs: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Trainable linear classifier, logits = W f + b. Zero-initialized so runs
/// are deterministic without an extra seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vector,
}

impl LinearHead {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(num_classes, dim),
            bias: Vector::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Vector) -> Result<Vector> {
        let mut out = self.weight.matvec(features)?;
        out.add_scaled(&self.bias, 1.0)?;
        Ok(out)
    }

    pub fn apply_grads(&mut self, grads: &HeadGrads, lr: f64) -> Result<()> {
        self.weight.add_scaled(&grads.weight, -lr)?;
        self.bias.add_scaled(&grads.bias, -lr)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub weight: Matrix,
    pub bias: Vector,
}

impl HeadGrads {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(num_classes, dim),
            bias: Vector::zeros(num_classes),
        }
    }

    pub fn accumulate(&mut self, other: &HeadGrads, scale: f64) -> Result<()> {
        self.weight.add_scaled(&other.weight, scale)?;
        self.bias.add_scaled(&other.bias, scale)?;
        Ok(())
    }
}

/// Cross-entropy through a linear head. Returns the loss, the head gradients,
/// and the gradient with respect to the input features.
pub fn head_cross_entropy(
    head: &LinearHead,
    features: &Vector,
    label: usize,
) -> Result<(f64, HeadGrads, Vector)> {
    head_cross_entropy_over(head, features, label, None)
}

/// Like head_cross_entropy, but when `active` is given the softmax runs over
/// that class subset only; rows outside it receive zero gradient.
pub fn head_cross_entropy_over(
    head: &LinearHead,
    features: &Vector,
    label: usize,
    active: Option<&[usize]>,
) -> Result<(f64, HeadGrads, Vector)> {
    let logits = head.logits(features)?;
    let (loss, g) = match active {
        Some(set) => softmax_cross_entropy_over(&logits, label, set)?,
        None => softmax_cross_entropy(&logits, label)?,
    };
    let mut dw = Matrix::zeros(head.num_classes(), head.input_dim());
    for c in 0..head.num_classes() {
        let gc = g.as_slice()[c];
        for (j, f) in features.as_slice().iter().enumerate() {
            dw.row_mut(c)[j] = gc * f;
        }
    }
    let dfeatures = head.weight.matvec_t(&g)?;
    Ok((
        loss,
        HeadGrads {
            weight: dw,
            bias: g,
        },
        dfeatures,
    ))
}

/// Central-difference gradient check. Returns the maximum relative error over
/// all coordinates, where the relative error divides by
/// max(|numeric|, |analytic|, 1e-8).
pub fn finite_difference_check<F>(f: F, x: &Vector, analytic: &Vector, eps: f64) -> Result<f64>
where
    F: Fn(&Vector) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidParam {
            name: "eps",
            reason: format!("must be positive, got {eps}"),
        });
    }
    check_dims(x.dim(), analytic.dim())?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.dim() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.as_mut_slice()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_difference_check objective",
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let g = analytic.as_slice()[i];
        let rel = (numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec64(data: &[f64]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_similarity_small_example() {
        // dot = 32, norms sqrt(14) and sqrt(77); 32 / sqrt(1078) by hand.
        let a = vec64(&[1.0, 2.0, 3.0]);
        let b = vec64(&[4.0, 5.0, 6.0]);
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - 0.9746318461970762).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn cosine_distance_of_orthogonal_unit_vectors_is_one() {
        let a = vec64(&[1.0, 0.0]);
        let b = vec64(&[0.0, 1.0]);
        assert_eq!(cosine_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn cosine_distance_forty_five_degrees() {
        // 1 - 1/sqrt(2)
        let a = vec64(&[1.0, 0.0]);
        let b = vec64(&[1.0, 1.0]);
        let got = cosine_distance(&a, &b).unwrap();
        assert!((got - 0.29289321881345254).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let a = vec64(&[0.0, 0.0]);
        let b = vec64(&[1.0, 1.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn cosine_rejects_dimension_mismatch() {
        let a = vec64(&[1.0, 2.0]);
        let b = vec64(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(matches!(
            Vector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn cosine_distance_grad_matches_finite_differences() {
        let q = vec64(&[0.3, -1.2, 0.7, 2.0]);
        let k = vec64(&[1.1, 0.4, -0.5, 0.9]);
        let grad = cosine_distance_grad(&q, &k).unwrap();
        let err = finite_difference_check(|x| cosine_distance(&q, x), &k, &grad, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let logits = Vector::zeros(4);
        let (loss, grad) = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        // softmax is uniform, so the gradient is 1/4 everywhere except the label
        for (i, g) in grad.as_slice().iter().enumerate() {
            let want = if i == 2 { 0.25 - 1.0 } else { 0.25 };
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_hand_worked_case() {
        // logits [2, 0, 1], label 0: loss = ln(e^2 + 1 + e) - 2
        let logits = vec64(&[2.0, 0.0, 1.0]);
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        let by_hand = (2.0f64.exp() + 1.0 + 1.0f64.exp()).ln() - 2.0;
        assert!((loss - by_hand).abs() < 1e-12);
        assert!((loss - 0.40760596444438013).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_label() {
        let logits = Vector::zeros(3);
        assert!(matches!(
            softmax_cross_entropy(&logits, 3),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let logits = vec64(&[0.2, -1.3, 2.1, 0.5]);
        let (_, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        let err = finite_difference_check(
            |x| softmax_cross_entropy(x, 1).map(|(l, _)| l),
            &logits,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn head_cross_entropy_gradients_match_finite_differences() {
        let mut head = LinearHead::zeros(3, 4);
        for (i, v) in head.weight.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.13).sin();
        }
        for (i, v) in head.bias.as_mut_slice().iter_mut().enumerate() {
            *v = 0.1 * i as f64;
        }
        let features = vec64(&[0.4, -0.2, 1.5, 0.8]);
        let (_, grads, dfeat) = head_cross_entropy(&head, &features, 2).unwrap();

        let err_f = finite_difference_check(
            |x| head_cross_entropy(&head, x, 2).map(|(l, _, _)| l),
            &features,
            &dfeat,
            1e-6,
        )
        .unwrap();
        assert!(err_f < 1e-7, "feature grad error {err_f}");

        // flatten the weights and check those too
        let w0 = Vector::new(head.weight.data().to_vec()).unwrap();
        let gw = Vector::new(grads.weight.data().to_vec()).unwrap();
        let err_w = finite_difference_check(
            |x| {
                let mut h = head.clone();
                h.weight.data_mut().copy_from_slice(x.as_slice());
                head_cross_entropy(&h, &features, 2).map(|(l, _, _)| l)
            },
            &w0,
            &gw,
            1e-6,
        )
        .unwrap();
        assert!(err_w < 1e-7, "weight grad error {err_w}");
    }

    #[test]
    fn finite_difference_check_accepts_exact_gradient() {
        // f(x) = sum x^2, grad = 2x
        let x = vec64(&[0.5, -1.0, 2.0]);
        let grad = x.scaled(2.0);
        let err = finite_difference_check(
            |v| Ok(v.as_slice().iter().map(|a| a * a).sum()),
            &x,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn finite_difference_check_flags_scaled_gradient() {
        // Deliberately doubled analytic gradient: with the
        // max(|numeric|, |analytic|, 1e-8) denominator the reported error
        // is 0.5, far above any passing tolerance.
        let x = vec64(&[0.5, -1.0, 2.0]);
        let grad = x.scaled(4.0);
        let err = finite_difference_check(
            |v| Ok(v.as_slice().iter().map(|a| a * a).sum()),
            &x,
            &grad,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4, "detector failed to fire: {err}");
    }

    #[test]
    fn finite_difference_check_rejects_nonpositive_eps() {
        let x = vec64(&[1.0]);
        let g = vec64(&[2.0]);
        assert!(finite_difference_check(|_| Ok(0.0), &x, &g, 0.0).is_err());
    }

    #[test]
    fn matvec_and_transpose_agree_with_hand_example() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = vec64(&[1.0, 0.0, -1.0]);
        assert_eq!(m.matvec(&x).unwrap().as_slice(), &[-2.0, -2.0]);
        let y = vec64(&[1.0, -1.0]);
        assert_eq!(m.matvec_t(&y).unwrap().as_slice(), &[-3.0, -3.0, -3.0]);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn bounded_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-100.0f64..100.0, dim)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn cosine_similarity_bounded(a in bounded_vec(6), b in bounded_vec(6)) {
                let va = Vector::new(a).unwrap();
                let vb = Vector::new(b).unwrap();
                if va.norm() > 1e-6 && vb.norm() > 1e-6 {
                    let s = cosine_similarity(&va, &vb).unwrap();
                    prop_assert!(s >= -1.0 - 1e-12 && s <= 1.0 + 1e-12);
                }
            }

            #[test]
            fn cosine_self_similarity_is_one(a in bounded_vec(5)) {
                let va = Vector::new(a).unwrap();
                if va.norm() > 1e-6 {
                    let s = cosine_similarity(&va, &va).unwrap();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn softmax_grad_sums_to_zero(logits in bounded_vec(5), label in 0usize..5) {
                let v = Vector::new(logits).unwrap();
                let (loss, grad) = softmax_cross_entropy(&v, label).unwrap();
                prop_assert!(loss >= 0.0);
                let sum: f64 = grad.as_slice().iter().sum();
                prop_assert!(sum.abs() < 1e-12);
            }
        }
    }
}
