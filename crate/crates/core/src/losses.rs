//! Distribution distillation objective.
//!
//! * KL term: `Σ_k λ₁·KL(P⁺‖Q⁺_k) + λ₂·KL(P⁻‖Q⁻_k)` between the teacher
//!   histograms `P` and each student's `Q_k`. Gradients reach both sides.
//! * order term: `-λ₃ Σ_{(i,j)} (E[S⁺_i] - E[S⁻_j])` over ordered pairs of
//!   distinct distributions (or all pairs, see [`OrderPairs`]).
//! * angular-margin softmax over every sample of the batch.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::distribution::{default_gamma, estimate_histogram, expectation, SoftHistogram, DEFAULT_BINS, MASS_FLOOR};
use crate::error::{DdlError, Result};
use crate::pairing::{SimilarityPairSets, SimilaritySet};

/// Allowed overshoot of a raw cosine past ±1 before it is treated as a bug.
const COSINE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdlWeights {
    pub lambda_kl_pos: f64,
    pub lambda_kl_neg: f64,
    pub lambda_order: f64,
    pub margin_scale: f64,
    pub margin: f64,
}

impl Default for DdlWeights {
    fn default() -> Self {
        Self {
            lambda_kl_pos: 0.1,
            lambda_kl_neg: 0.02,
            lambda_order: 0.5,
            margin_scale: 64.0,
            margin: 0.5,
        }
    }
}

impl DdlWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_kl_pos", self.lambda_kl_pos),
            ("lambda_kl_neg", self.lambda_kl_neg),
            ("lambda_order", self.lambda_order),
            ("margin_scale", self.margin_scale),
            ("margin", self.margin),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DdlError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn uses_kl(&self) -> bool {
        self.lambda_kl_pos != 0.0 || self.lambda_kl_neg != 0.0
    }

    pub fn uses_order(&self) -> bool {
        self.lambda_order != 0.0
    }
}

/// Which (positive, negative) distribution pairs enter the order term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPairs {
    /// Ordered pairs of distinct distributions: 2 distances at K = 1.
    #[default]
    Cross,
    /// Every ordered pair, including a distribution with itself.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: DdlWeights,
    pub bins: usize,
    pub gamma: f64,
    pub order_pairs: OrderPairs,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: DdlWeights::default(),
            bins: DEFAULT_BINS,
            gamma: default_gamma(DEFAULT_BINS),
            order_pairs: OrderPairs::Cross,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlDivergence {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_q: Vec<f64>,
}

/// `Σ_r P_r log(P_r/Q_r)` on floored masses, with gradients for both inputs.
pub fn kl_divergence(p: &SoftHistogram, q: &SoftHistogram) -> Result<KlDivergence> {
    if p.bins() != q.bins() {
        return Err(DdlError::BinMismatch {
            left: p.bins(),
            right: q.bins(),
        });
    }
    if p.nodes != q.nodes {
        return Err(DdlError::Contract("histograms have different nodes".into()));
    }
    let mut value = 0.0;
    let mut grad_p = Vec::with_capacity(p.bins());
    let mut grad_q = Vec::with_capacity(p.bins());
    for (&pr, &qr) in p.masses.iter().zip(&q.masses) {
        let (pf, qf) = (pr + MASS_FLOOR, qr + MASS_FLOOR);
        let log_ratio = (pf / qf).ln();
        value += pf * log_ratio;
        grad_p.push(log_ratio + 1.0);
        grad_q.push(-pf / qf);
    }
    Ok(KlDivergence { value, grad_p, grad_q })
}

/// Gradient of a loss with respect to the similarity values of one block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SetGrads {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl SetGrads {
    fn zeros_for(set: &SimilarityPairSets) -> Self {
        Self {
            positive: vec![0.0; set.positive.len()],
            negative: vec![0.0; set.negative.len()],
        }
    }

    fn add(&mut self, other: &SetGrads) {
        for (a, b) in self.positive.iter_mut().zip(&other.positive) {
            *a += b;
        }
        for (a, b) in self.negative.iter_mut().zip(&other.negative) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlLoss {
    /// `λ₁·KL(P⁺‖Q⁺_k)` per student.
    pub pos_terms: Vec<f64>,
    /// `λ₂·KL(P⁻‖Q⁻_k)` per student.
    pub neg_terms: Vec<f64>,
    pub value: f64,
    /// Index 0 is the teacher, `k` the k-th student.
    pub grads: Vec<SetGrads>,
}

fn kl_side(
    teacher: &[f64],
    students: &[&[f64]],
    lambda: f64,
    bins: usize,
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    if lambda == 0.0 {
        return Ok((
            vec![0.0; students.len()],
            vec![0.0; teacher.len()],
            students.iter().map(|s| vec![0.0; s.len()]).collect(),
        ));
    }
    let p = estimate_histogram(teacher, bins, gamma)?;
    let mut teacher_up = vec![0.0; bins];
    let mut terms = Vec::with_capacity(students.len());
    let mut student_grads = Vec::with_capacity(students.len());
    for s in students {
        let q = estimate_histogram(s, bins, gamma)?;
        let kl = kl_divergence(&p.histogram, &q.histogram)?;
        terms.push(lambda * kl.value);
        for (acc, g) in teacher_up.iter_mut().zip(&kl.grad_p) {
            *acc += lambda * g;
        }
        let up: Vec<f64> = kl.grad_q.iter().map(|g| lambda * g).collect();
        student_grads.push(q.backprop(&up)?);
    }
    Ok((terms, p.backprop(&teacher_up)?, student_grads))
}

/// KL term of the objective, summed over students.
pub fn kl_loss(
    teacher: &SimilarityPairSets,
    students: &[SimilarityPairSets],
    weights: &DdlWeights,
    bins: usize,
    gamma: f64,
) -> Result<KlLoss> {
    if students.is_empty() {
        return Err(DdlError::InvalidConfig("KL loss needs at least one student".into()));
    }
    let pos: Vec<&[f64]> = students.iter().map(|s| s.positive.values.as_slice()).collect();
    let neg: Vec<&[f64]> = students.iter().map(|s| s.negative.values.as_slice()).collect();
    let (pos_terms, tp, sp) = kl_side(&teacher.positive.values, &pos, weights.lambda_kl_pos, bins, gamma)?;
    let (neg_terms, tn, sn) = kl_side(&teacher.negative.values, &neg, weights.lambda_kl_neg, bins, gamma)?;
    let value = pos_terms.iter().sum::<f64>() + neg_terms.iter().sum::<f64>();
    let mut grads = vec![SetGrads {
        positive: tp,
        negative: tn,
    }];
    grads.extend(sp.into_iter().zip(sn).map(|(positive, negative)| SetGrads { positive, negative }));
    Ok(KlLoss {
        pos_terms,
        neg_terms,
        value,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderLoss {
    pub value: f64,
    pub grads: Vec<SetGrads>,
}

/// Order term over the teacher (index 0) and student sets.
pub fn order_loss(sets: &[SimilarityPairSets], lambda: f64, pairs: OrderPairs) -> Result<OrderLoss> {
    if sets.is_empty() {
        return Err(DdlError::EmptyInput("order loss over no distributions".into()));
    }
    let pos: Vec<f64> = sets.iter().map(|s| expectation(&s.positive.values)).collect::<Result<_>>()?;
    let neg: Vec<f64> = sets.iter().map(|s| expectation(&s.negative.values)).collect::<Result<_>>()?;
    let d = sets.len();
    let mut sum = 0.0;
    let mut pos_count = vec![0usize; d];
    let mut neg_count = vec![0usize; d];
    for i in 0..d {
        for j in 0..d {
            if i == j && pairs == OrderPairs::Cross {
                continue;
            }
            sum += pos[i] - neg[j];
            pos_count[i] += 1;
            neg_count[j] += 1;
        }
    }
    let grads = sets
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let gp = -lambda * pos_count[k] as f64 / s.positive.len() as f64;
            let gn = lambda * neg_count[k] as f64 / s.negative.len() as f64;
            SetGrads {
                positive: vec![gp; s.positive.len()],
                negative: vec![gn; s.negative.len()],
            }
        })
        .collect();
    Ok(OrderLoss {
        value: -lambda * sum,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginLoss {
    pub value: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_head: Array2<f64>,
}

/// Additive angular margin softmax: per sample
/// `-log softmax(s·cos(θ_y + m) ; s·cos θ_j)`, averaged over the batch.
///
/// When `θ_y + m` would pass π the target logit falls back to
/// `s·(cos θ_y - m·sin m)`, keeping it monotone in `cos θ_y`.
pub fn margin_softmax_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    head: ArrayView2<f64>,
    scale: f64,
    margin: f64,
) -> Result<MarginLoss> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(DdlError::EmptyInput("margin loss over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(DdlError::ShapeMismatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    if embeddings.ncols() != head.ncols() {
        return Err(DdlError::ShapeMismatch(format!(
            "embedding dim {} vs head dim {}",
            embeddings.ncols(),
            head.ncols()
        )));
    }
    let classes = head.nrows();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(DdlError::InvalidLabel { label, classes });
    }
    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    let threshold = (std::f64::consts::PI - margin).cos();
    let fallback_shift = margin * sin_m;

    let raw = embeddings.dot(&head.t());
    if let Some(c) = raw.iter().find(|c| c.abs() > 1.0 + COSINE_SLACK || !c.is_finite()) {
        return Err(DdlError::Contract(format!("cosine {c} outside [-1, 1]; inputs must be unit-norm")));
    }
    let mut value = 0.0;
    // dL/dcos
    let mut g = Array2::<f64>::zeros((n, classes));
    let mut logits = vec![0.0; classes];
    for i in 0..n {
        let y = labels[i];
        let cy = raw[[i, y]].clamp(-1.0, 1.0);
        let (phi, dphi) = if cy > threshold {
            let sin_t = (1.0 - cy * cy).max(0.0).sqrt();
            (cy * cos_m - sin_t * sin_m, cos_m + sin_m * cy / sin_t.max(1e-8))
        } else {
            (cy - fallback_shift, 1.0)
        };
        for j in 0..classes {
            logits[j] = scale * if j == y { phi } else { raw[[i, j]].clamp(-1.0, 1.0) };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - logits[y];
        for j in 0..classes {
            let p = (logits[j] - lse).exp();
            let dz = if j == y { p - 1.0 } else { p };
            g[[i, j]] = scale * dz * if j == y { dphi } else { 1.0 } / n as f64;
        }
    }
    Ok(MarginLoss {
        value: value / n as f64,
        grad_embeddings: g.dot(&head),
        grad_head: g.t().dot(&embeddings),
    })
}

/// Scalar terms of one evaluation of the total objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossTerms {
    /// Weighted positive-pair KL per student.
    pub kl_pos: Vec<f64>,
    /// Weighted negative-pair KL per student.
    pub kl_neg: Vec<f64>,
    pub order: f64,
    pub margin: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    /// One row per batch embedding.
    pub grad_embeddings: Array2<f64>,
    /// One row per head class.
    pub grad_head: Array2<f64>,
}

fn route(set: &SimilaritySet, grads: &[f64], embeddings: ArrayView2<f64>, out: &mut Array2<f64>) {
    for (&(a, b), &g) in set.pairs.iter().zip(grads) {
        if g == 0.0 {
            continue;
        }
        out.row_mut(a).scaled_add(g, &embeddings.row(b));
        out.row_mut(b).scaled_add(g, &embeddings.row(a));
    }
}

/// Total objective: KL + order + angular margin over every batch sample.
/// `sets[0]` is the teacher; an empty `sets` is only valid when the KL and
/// order weights are zero.
pub fn ddl_total(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    head: ArrayView2<f64>,
    sets: &[SimilarityPairSets],
    config: &LossConfig,
) -> Result<LossReport> {
    let w = &config.weights;
    w.validate()?;
    let students = sets.len().saturating_sub(1);
    let mut terms = LossTerms {
        kl_pos: vec![0.0; students],
        kl_neg: vec![0.0; students],
        ..LossTerms::default()
    };
    let mut set_grads: Vec<SetGrads> = sets.iter().map(SetGrads::zeros_for).collect();

    if (w.uses_kl() || w.uses_order()) && sets.len() < 2 {
        return Err(DdlError::InvalidConfig(
            "distillation terms need a teacher and at least one student".into(),
        ));
    }
    if w.uses_kl() {
        let kl = kl_loss(&sets[0], &sets[1..], w, config.bins, config.gamma)?;
        terms.kl_pos = kl.pos_terms;
        terms.kl_neg = kl.neg_terms;
        for (acc, g) in set_grads.iter_mut().zip(&kl.grads) {
            acc.add(g);
        }
    }
    if w.uses_order() {
        let order = order_loss(sets, w.lambda_order, config.order_pairs)?;
        terms.order = order.value;
        for (acc, g) in set_grads.iter_mut().zip(&order.grads) {
            acc.add(g);
        }
    }
    let margin = margin_softmax_loss(embeddings, labels, head, w.margin_scale, w.margin)?;
    terms.margin = margin.value;
    terms.total = terms.kl_pos.iter().sum::<f64>() + terms.kl_neg.iter().sum::<f64>() + terms.order + terms.margin;

    let mut grad_embeddings = margin.grad_embeddings;
    for (set, g) in sets.iter().zip(&set_grads) {
        route(&set.positive, &g.positive, embeddings, &mut grad_embeddings);
        route(&set.negative, &g.negative, embeddings, &mut grad_embeddings);
    }
    Ok(LossReport {
        terms,
        grad_embeddings,
        grad_head: margin.grad_head,
    })
}

/// Expectation margins `E[S⁺] - E[S⁻]` of each distribution.
pub fn expectation_margins(sets: &[SimilarityPairSets]) -> Result<Vec<f64>> {
    sets.iter()
        .map(|s| Ok(expectation(&s.positive.values)? - expectation(&s.negative.values)?))
        .collect()
}

/// Sum of squared row norms, handy for gradient diagnostics.
pub fn gradient_norm(g: &Array2<f64>) -> f64 {
    g.map_axis(Axis(1), |r| r.dot(&r)).sum().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::histogram_nodes;
    use crate::tensor::linalg::normalize_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hist(masses: Vec<f64>) -> SoftHistogram {
        SoftHistogram {
            nodes: histogram_nodes(masses.len()).unwrap(),
            masses,
            gamma: 1.0,
        }
    }

    fn set(values: &[f64]) -> SimilaritySet {
        SimilaritySet {
            values: values.to_vec(),
            pairs: (0..values.len()).map(|i| (2 * i, 2 * i + 1)).collect(),
        }
    }

    fn pair_sets(pos: &[f64], neg: &[f64]) -> SimilarityPairSets {
        SimilarityPairSets {
            positive: set(pos),
            negative: set(neg),
        }
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = hist(vec![0.1, 0.6, 0.3]);
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
    }

    #[test]
    fn kl_two_bin_hand_value() {
        let want = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&hist(vec![0.5, 0.5]), &hist(vec![0.25, 0.75])).unwrap();
        assert!((got.value - want).abs() < 1e-9);
        assert!((got.grad_q[0] + 2.0).abs() < 1e-9);
        assert!((got.grad_p[0] - (2.0f64.ln() + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_bin_mismatch() {
        assert!(matches!(
            kl_divergence(&hist(vec![0.5, 0.5]), &hist(vec![0.2, 0.3, 0.5])),
            Err(DdlError::BinMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(a in proptest::collection::vec(0.0f64..1.0, 8), b in proptest::collection::vec(0.0f64..1.0, 8)) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum::<f64>() + 1e-9;
                v.into_iter().map(|x| (x + 1e-9 / 8.0) / s).collect::<Vec<_>>()
            };
            let kl = kl_divergence(&hist(norm(a)), &hist(norm(b))).unwrap();
            prop_assert!(kl.value >= -1e-15);
        }

        #[test]
        fn order_ignores_sample_order(mut pos in proptest::collection::vec(0.0f64..1.0, 2..10), neg in proptest::collection::vec(-1.0f64..1.0, 2..10)) {
            let sets = vec![pair_sets(&pos, &neg), pair_sets(&neg, &pos)];
            let a = order_loss(&sets, 0.5, OrderPairs::Cross).unwrap().value;
            pos.reverse();
            let sets = vec![pair_sets(&pos, &neg), pair_sets(&neg, &pos)];
            let b = order_loss(&sets, 0.5, OrderPairs::Cross).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_loss_zero_for_identical_students() {
        let t = pair_sets(&[0.8, 0.7, 0.9], &[0.1, 0.3, 0.2]);
        let kl = kl_loss(&t, &[t.clone(), t.clone()], &DdlWeights::default(), 20, 40.0).unwrap();
        assert_eq!(kl.value, 0.0);
    }

    #[test]
    fn kl_loss_zero_weights() {
        let t = pair_sets(&[0.8, 0.7], &[0.1, 0.3]);
        let s = pair_sets(&[0.2, 0.1], &[0.5, 0.6]);
        let w = DdlWeights {
            lambda_kl_pos: 0.0,
            lambda_kl_neg: 0.0,
            ..DdlWeights::default()
        };
        let kl = kl_loss(&t, &[s], &w, 20, 40.0).unwrap();
        assert_eq!(kl.value, 0.0);
        assert!(kl.grads.iter().all(|g| g.positive.iter().chain(&g.negative).all(|&x| x == 0.0)));
    }

    #[test]
    fn kl_loss_is_additive_over_students() {
        let t = pair_sets(&[0.8, 0.7, 0.95], &[0.1, 0.3]);
        let s1 = pair_sets(&[0.2, 0.1], &[0.5, 0.6, 0.4]);
        let s2 = pair_sets(&[0.5, 0.45, 0.3], &[0.2, 0.25]);
        let w = DdlWeights::default();
        let both = kl_loss(&t, &[s1.clone(), s2.clone()], &w, 30, 50.0).unwrap().value;
        let one = kl_loss(&t, &[s1], &w, 30, 50.0).unwrap().value;
        let two = kl_loss(&t, &[s2], &w, 30, 50.0).unwrap().value;
        assert!((both - (one + two)).abs() < 1e-14);
    }

    #[test]
    fn order_hand_value() {
        // (teacher+, teacher-, student+, student-) = (0.9, 0.1, 0.6, 0.4)
        let sets = [pair_sets(&[0.9], &[0.1]), pair_sets(&[0.6], &[0.4])];
        let lambda = 0.5;
        let got = order_loss(&sets, lambda, OrderPairs::Cross).unwrap().value;
        assert!((got - (-lambda * ((0.9 - 0.4) + (0.6 - 0.1)))).abs() < 1e-15);
        // all-pairs variant adds the two within-distribution margins
        let all = order_loss(&sets, lambda, OrderPairs::All).unwrap().value;
        assert!((all - (-lambda * (1.0 + 0.8 + 0.2))).abs() < 1e-15);
    }

    #[test]
    fn order_zero_when_expectations_match() {
        let sets = [pair_sets(&[0.3, 0.5], &[0.4]), pair_sets(&[0.4], &[0.2, 0.6])];
        assert!(order_loss(&sets, 0.5, OrderPairs::Cross).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn order_decreases_with_positive_expectation() {
        let base = order_loss(&[pair_sets(&[0.5], &[0.1]), pair_sets(&[0.3], &[0.2])], 0.5, OrderPairs::Cross)
            .unwrap()
            .value;
        let up = order_loss(&[pair_sets(&[0.5], &[0.1]), pair_sets(&[0.35], &[0.2])], 0.5, OrderPairs::Cross)
            .unwrap()
            .value;
        assert!(up < base);
    }

    #[test]
    fn order_rejects_empty_set() {
        assert!(order_loss(&[pair_sets(&[], &[0.1]), pair_sets(&[0.2], &[0.1])], 0.5, OrderPairs::Cross).is_err());
    }

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        normalize_rows(&mut m).unwrap();
        m
    }

    #[test]
    fn zero_margin_unit_scale_is_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = unit_rows(4, 3, &mut rng);
        let w = unit_rows(5, 3, &mut rng);
        let labels = [0, 3, 4, 1];
        let got = margin_softmax_loss(e.view(), &labels, w.view(), 1.0, 0.0).unwrap().value;
        let logits = e.dot(&w.t());
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            want += -(logits[[i, y]].exp() / z).ln();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn aligned_embedding_with_large_scale_has_vanishing_loss() {
        let head = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let e = ndarray::array![[1.0, 0.0]];
        let l = margin_softmax_loss(e.view(), &[0], head.view(), 64.0, 0.0).unwrap();
        assert!(l.value < 1e-20);
    }

    #[test]
    fn invalid_label_rejected() {
        let head = ndarray::array![[1.0, 0.0]];
        let e = ndarray::array![[1.0, 0.0]];
        assert!(matches!(
            margin_softmax_loss(e.view(), &[1], head.view(), 1.0, 0.1),
            Err(DdlError::InvalidLabel { .. })
        ));
        let bad = ndarray::array![[2.0, 0.0]];
        assert!(matches!(
            margin_softmax_loss(bad.view(), &[0], head.view(), 1.0, 0.1),
            Err(DdlError::Contract(_))
        ));
    }

    #[test]
    fn margin_gradients_match_central_differences() {
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let e = unit_rows(5, 4, &mut rng);
            let w = unit_rows(3, 4, &mut rng);
            let labels: Vec<usize> = (0..5).map(|i| (i + trial) % 3).collect();
            let (s, m) = (8.0, 0.35);
            let l = margin_softmax_loss(e.view(), &labels, w.view(), s, m).unwrap();
            let f = |e: &Array2<f64>, w: &Array2<f64>| margin_softmax_loss(e.view(), &labels, w.view(), s, m).unwrap().value;
            for idx in 0..e.len() {
                let (i, j) = (idx / 4, idx % 4);
                let mut p = e.clone();
                p[[i, j]] += h;
                let mut q = e.clone();
                q[[i, j]] -= h;
                let fd = (f(&p, &w) - f(&q, &w)) / (2.0 * h);
                let a = l.grad_embeddings[[i, j]];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5, "e {i},{j}: {a} {fd}");
            }
            for idx in 0..w.len() {
                let (i, j) = (idx / 4, idx % 4);
                let mut p = w.clone();
                p[[i, j]] += h;
                let mut q = w.clone();
                q[[i, j]] -= h;
                let fd = (f(&e, &p) - f(&e, &q)) / (2.0 * h);
                let a = l.grad_head[[i, j]];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5, "w {i},{j}: {a} {fd}");
            }
        }
    }

    fn toy_batch(rng: &mut ChaCha8Rng, b: usize, k: usize, d: usize) -> (Array2<f64>, Vec<SimilarityPairSets>) {
        // block layout: b pairs then b singles, 3b rows per block
        let e = unit_rows(3 * b * (k + 1), d, rng);
        let sets = (0..=k)
            .map(|blk| {
                let off = 3 * b * blk;
                let pos: Vec<(usize, usize)> = (0..b).map(|i| (off + 2 * i, off + 2 * i + 1)).collect();
                let neg: Vec<(usize, usize)> = (0..b).map(|i| (off + 2 * b + i, off + 2 * b + (i + 1) % b)).collect();
                let val = |p: &[(usize, usize)]| p.iter().map(|&(x, y)| e.row(x).dot(&e.row(y))).collect::<Vec<_>>();
                SimilarityPairSets {
                    positive: SimilaritySet { values: val(&pos), pairs: pos },
                    negative: SimilaritySet { values: val(&neg), pairs: neg },
                }
            })
            .collect();
        (e, sets)
    }

    #[test]
    fn total_equals_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (e, sets) = toy_batch(&mut rng, 4, 2, 5);
        let head = unit_rows(6, 5, &mut rng);
        let labels: Vec<usize> = (0..e.nrows()).map(|i| i % 6).collect();
        let r = ddl_total(e.view(), &labels, head.view(), &sets, &LossConfig { bins: 10, gamma: 20.0, ..LossConfig::default() }).unwrap();
        let t = &r.terms;
        let sum = t.kl_pos.iter().sum::<f64>() + t.kl_neg.iter().sum::<f64>() + t.order + t.margin;
        assert!((t.total - sum).abs() <= 1e-12);
        assert_eq!(r.grad_embeddings.dim(), e.dim());
    }

    #[test]
    fn zero_lambdas_reduce_to_margin_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (e, sets) = toy_batch(&mut rng, 3, 1, 4);
        let head = unit_rows(3, 4, &mut rng);
        let labels: Vec<usize> = (0..e.nrows()).map(|i| i % 3).collect();
        let cfg = LossConfig {
            weights: DdlWeights {
                lambda_kl_pos: 0.0,
                lambda_kl_neg: 0.0,
                lambda_order: 0.0,
                ..DdlWeights::default()
            },
            ..LossConfig::default()
        };
        let r = ddl_total(e.view(), &labels, head.view(), &sets, &cfg).unwrap();
        let m = margin_softmax_loss(e.view(), &labels, head.view(), 64.0, 0.5).unwrap();
        assert_eq!(r.terms.total, m.value);
        assert_eq!(r.grad_embeddings, m.grad_embeddings);
    }

    #[test]
    fn duplicated_teacher_gives_zero_kl_and_doubled_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (e, sets) = toy_batch(&mut rng, 4, 1, 6);
        let teacher = sets[0].clone();
        let dup = vec![teacher.clone(), teacher.clone()];
        let head = unit_rows(2, 6, &mut rng);
        let labels: Vec<usize> = (0..e.nrows()).map(|i| i % 2).collect();
        let cfg = LossConfig::default();
        let r = ddl_total(e.view(), &labels, head.view(), &dup, &cfg).unwrap();
        assert_eq!(r.terms.kl_pos, vec![0.0]);
        assert_eq!(r.terms.kl_neg, vec![0.0]);
        let ep = expectation(&teacher.positive.values).unwrap();
        let en = expectation(&teacher.negative.values).unwrap();
        assert!((r.terms.order - (-0.5 * 2.0 * (ep - en))).abs() < 1e-14);
    }

    /// Loss as a function of the embeddings only; similarities recomputed
    /// from the fixed pair provenance.
    fn loss_of(e: &Array2<f64>, template: &[SimilarityPairSets], labels: &[usize], head: &Array2<f64>, cfg: &LossConfig) -> f64 {
        let sets: Vec<SimilarityPairSets> = template
            .iter()
            .map(|s| {
                let re = |set: &SimilaritySet| SimilaritySet {
                    values: set.pairs.iter().map(|&(a, b)| e.row(a).dot(&e.row(b))).collect(),
                    pairs: set.pairs.clone(),
                };
                SimilarityPairSets {
                    positive: re(&s.positive),
                    negative: re(&s.negative),
                }
            })
            .collect();
        ddl_total(e.view(), labels, head.view(), &sets, cfg).unwrap().terms.total
    }

    #[test]
    fn embedding_gradients_match_central_differences() {
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..6 {
            let (bins, b, k) = [(10, 4, 1), (50, 8, 2), (100, 4, 2)][trial % 3];
            let (e, sets) = toy_batch(&mut rng, b, k, 5);
            let head = unit_rows(4, 5, &mut rng);
            let labels: Vec<usize> = (0..e.nrows()).map(|i| i % 4).collect();
            let cfg = LossConfig {
                bins,
                gamma: default_gamma(bins),
                weights: DdlWeights {
                    margin_scale: 4.0,
                    ..DdlWeights::default()
                },
                order_pairs: if trial % 2 == 0 { OrderPairs::Cross } else { OrderPairs::All },
            };
            let r = ddl_total(e.view(), &labels, head.view(), &sets, &cfg).unwrap();
            for _ in 0..30 {
                let i = rng.random_range(0..e.nrows());
                let j = rng.random_range(0..e.ncols());
                let mut p = e.clone();
                p[[i, j]] += h;
                let mut q = e.clone();
                q[[i, j]] -= h;
                let fd = (loss_of(&p, &sets, &labels, &head, &cfg) - loss_of(&q, &sets, &labels, &head, &cfg)) / (2.0 * h);
                let a = r.grad_embeddings[[i, j]];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5, "trial {trial} ({i},{j}): {a} vs {fd}");
            }
        }
    }

    #[test]
    fn kl_descent_step_reduces_divergence() {
        // frozen teacher, gradient step on the student positive similarities
        let teacher = pair_sets(&[0.85, 0.9, 0.8, 0.95], &[0.1, 0.2]);
        let mut student = pair_sets(&[0.3, 0.5, 0.4, 0.6], &[0.1, 0.2]);
        let w = DdlWeights {
            lambda_kl_pos: 1.0,
            lambda_kl_neg: 0.0,
            lambda_order: 0.0,
            ..DdlWeights::default()
        };
        let (bins, gamma) = (20, default_gamma(20));
        let before = kl_loss(&teacher, &[student.clone()], &w, bins, gamma).unwrap();
        for (v, g) in student.positive.values.iter_mut().zip(&before.grads[1].positive) {
            *v -= 1e-3 * g;
        }
        let after = kl_loss(&teacher, &[student], &w, bins, gamma).unwrap();
        assert!(after.value < before.value);
    }
}
