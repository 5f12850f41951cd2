//! Soft histograms of similarity values on `[-1, 1]`.
//!
//! Each similarity `s` spreads a Gaussian weight `δ_r = exp(-γ(s - t_r)²)`
//! over `R` uniformly spaced nodes `t_1 = -1 … t_R = 1`. The raw bin value is
//! the mean weight over the set; masses are the raw values rescaled to sum
//! to one, so KL and intersection see a proper probability vector.
//!
//! For the raw values, `∂raw_r/∂s = -2γ·δ_r·(s - t_r)/|S|`. Normalisation by
//! `Z = Σ_q raw_q` composes with the quotient rule:
//! `∂h_r/∂s = (∂raw_r/∂s - h_r·Σ_q ∂raw_q/∂s) / Z`.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DdlError, Result};
use crate::tensor::checkpoint::format_f64;

pub const DEFAULT_BINS: usize = 100;

/// Floor added to masses before they enter a logarithm.
pub const MASS_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftHistogram {
    pub nodes: Vec<f64>,
    pub masses: Vec<f64>,
    pub gamma: f64,
}

impl SoftHistogram {
    pub fn bins(&self) -> usize {
        self.nodes.len()
    }

    /// Writes `node,mass` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "node,mass")?;
        for (t, h) in self.nodes.iter().zip(&self.masses) {
            writeln!(w, "{},{}", format_f64(*t), format_f64(*h))?;
        }
        Ok(())
    }
}

pub fn histogram_nodes(bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(DdlError::InvalidConfig(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let span = (bins - 1) as f64;
    Ok((0..bins).map(|r| -1.0 + 2.0 * r as f64 / span).collect())
}

/// Kernel sharpness giving a standard deviation of one bin step:
/// `γ = 1/(2Δ²)` with `Δ = 2/(R-1)`.
pub fn default_gamma(bins: usize) -> f64 {
    let step = 2.0 / (bins as f64 - 1.0);
    1.0 / (2.0 * step * step)
}

/// A histogram together with the kernel evaluations needed for its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramEstimate {
    pub histogram: SoftHistogram,
    samples: Vec<f64>,
    /// `|S| x R` kernel weights.
    kernel: Array2<f64>,
    /// Un-normalised bin values (mean kernel weight).
    raw: Vec<f64>,
    total: f64,
}

pub fn estimate_histogram(similarities: &[f64], bins: usize, gamma: f64) -> Result<HistogramEstimate> {
    if similarities.is_empty() {
        return Err(DdlError::EmptyInput("histogram of an empty similarity set".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(DdlError::InvalidConfig(format!("kernel sharpness must be positive, got {gamma}")));
    }
    if let Some(s) = similarities.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
        return Err(DdlError::Contract(format!("similarity {s} outside [-1, 1]")));
    }
    let nodes = histogram_nodes(bins)?;
    let n = similarities.len() as f64;
    let kernel = Array2::from_shape_fn((similarities.len(), bins), |(i, r)| {
        let d = similarities[i] - nodes[r];
        (-gamma * d * d).exp()
    });
    let raw: Vec<f64> = (0..bins).map(|r| kernel.column(r).sum() / n).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(DdlError::DegenerateDistribution(
            "all kernel weights underflowed; lower the kernel sharpness".into(),
        ));
    }
    let masses = raw.iter().map(|v| v / total).collect();
    Ok(HistogramEstimate {
        histogram: SoftHistogram { nodes, masses, gamma },
        samples: similarities.to_vec(),
        kernel,
        raw,
        total,
    })
}

impl HistogramEstimate {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Kernel weight `δ` of sample `i` at bin `r`.
    pub fn kernel(&self, i: usize, r: usize) -> f64 {
        self.kernel[[i, r]]
    }

    /// `R x |S|` matrix of `∂raw_r/∂s_i = -2γ·δ_{i,r}(s_i - t_r)/|S|`.
    pub fn raw_gradient(&self) -> Array2<f64> {
        let h = &self.histogram;
        let n = self.samples.len() as f64;
        Array2::from_shape_fn((h.bins(), self.samples.len()), |(r, i)| {
            -2.0 * h.gamma * self.kernel[[i, r]] * (self.samples[i] - h.nodes[r]) / n
        })
    }

    /// `R x |S|` Jacobian of the normalised masses.
    pub fn mass_gradient(&self) -> Array2<f64> {
        let raw_grad = self.raw_gradient();
        let col_sums = raw_grad.sum_axis(ndarray::Axis(0));
        let h = &self.histogram.masses;
        Array2::from_shape_fn(raw_grad.raw_dim(), |(r, i)| (raw_grad[[r, i]] - h[r] * col_sums[i]) / self.total)
    }

    /// Vector-Jacobian product: given `∂L/∂h`, returns `∂L/∂s` per sample.
    pub fn backprop(&self, grad_masses: &[f64]) -> Result<Vec<f64>> {
        let hist = &self.histogram;
        if grad_masses.len() != hist.bins() {
            return Err(DdlError::BinMismatch {
                left: grad_masses.len(),
                right: hist.bins(),
            });
        }
        let n = self.samples.len() as f64;
        let weighted: f64 = grad_masses.iter().zip(&hist.masses).map(|(g, h)| g * h).sum();
        Ok(self
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (mut dot, mut sum) = (0.0, 0.0);
                for r in 0..hist.bins() {
                    let d = -2.0 * hist.gamma * self.kernel[[i, r]] * (s - hist.nodes[r]) / n;
                    dot += grad_masses[r] * d;
                    sum += d;
                }
                (dot - weighted * sum) / self.total
            })
            .collect())
    }
}

/// Jacobian of the normalised masses for the similarity set behind `estimate`.
pub fn histogram_gradient(estimate: &HistogramEstimate, similarities: &[f64]) -> Result<Array2<f64>> {
    let same = estimate.samples.len() == similarities.len()
        && estimate.samples.iter().zip(similarities).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(DdlError::Contract(
            "histogram cache was built from a different similarity set".into(),
        ));
    }
    Ok(estimate.mass_gradient())
}

pub fn expectation(similarities: &[f64]) -> Result<f64> {
    if similarities.is_empty() {
        return Err(DdlError::EmptyInput("expectation of an empty set".into()));
    }
    Ok(similarities.iter().sum::<f64>() / similarities.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nodes_small_cases() {
        assert_eq!(histogram_nodes(2).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(histogram_nodes(3).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(histogram_nodes(5).unwrap(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(histogram_nodes(1).is_err());
        let n = histogram_nodes(100).unwrap();
        assert_eq!((n[0], n[99]), (-1.0, 1.0));
    }

    #[test]
    fn sharp_kernel_concentrates_mass() {
        let h = estimate_histogram(&[0.0], 3, 1e4).unwrap().histogram;
        assert_eq!(h.masses, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn unit_gamma_single_zero() {
        // raw = (e^-1, 1, e^-1); normalised by 1 + 2/e
        let h = estimate_histogram(&[0.0], 3, 1.0).unwrap();
        let e1 = (-1.0f64).exp();
        let z = 1.0 + 2.0 * e1;
        let want = [e1 / z, 1.0 / z, e1 / z];
        for (a, b) in h.histogram.masses.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((h.raw()[0] - e1).abs() < 1e-15);
        assert!((h.histogram.masses[1] - 0.576_116_884_765_829_1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(estimate_histogram(&[], 10, 1.0), Err(DdlError::EmptyInput(_))));
        assert!(estimate_histogram(&[0.1], 10, 0.0).is_err());
        assert!(estimate_histogram(&[0.1], 10, -2.0).is_err());
        assert!(estimate_histogram(&[1.5], 10, 1.0).is_err());
    }

    #[test]
    fn derivative_vanishes_on_node() {
        let est = estimate_histogram(&[0.5, -0.2], 5, 3.0).unwrap();
        let g = est.raw_gradient();
        // sample 0 sits exactly on node 3
        assert_eq!(g[[3, 0]], 0.0);
    }

    #[test]
    fn normalised_gradient_columns_sum_to_zero() {
        let est = estimate_histogram(&[0.3, -0.7, 0.95, 0.0], 10, 4.0).unwrap();
        let g = est.mass_gradient();
        for col in g.columns() {
            assert!(col.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn mass_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..20 {
            let s: Vec<f64> = (0..7).map(|_| rng.random_range(-0.95..0.95)).collect();
            let est = estimate_histogram(&s, 10, 4.0).unwrap();
            let g = histogram_gradient(&est, &s).unwrap();
            for i in 0..s.len() {
                let mut p = s.clone();
                p[i] += h;
                let mut m = s.clone();
                m[i] -= h;
                let hp = estimate_histogram(&p, 10, 4.0).unwrap().histogram.masses;
                let hm = estimate_histogram(&m, 10, 4.0).unwrap().histogram.masses;
                for r in 0..10 {
                    let fd = (hp[r] - hm[r]) / (2.0 * h);
                    let a = g[[r, i]];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                    assert!(rel < 1e-6, "bin {r} sample {i}: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn backprop_equals_jacobian_product() {
        let s = [0.1, 0.4, -0.3, 0.8];
        let est = estimate_histogram(&s, 6, 2.5).unwrap();
        let up = [0.3, -1.0, 0.2, 0.7, 0.0, 1.5];
        let jac = est.mass_gradient();
        let want: Vec<f64> = (0..4).map(|i| (0..6).map(|r| up[r] * jac[[r, i]]).sum()).collect();
        let got = est.backprop(&up).unwrap();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(est.backprop(&up[..5]).is_err());
    }

    #[test]
    fn gradient_rejects_mismatched_cache() {
        let est = estimate_histogram(&[0.1, 0.2], 4, 1.0).unwrap();
        assert!(histogram_gradient(&est, &[0.1, 0.3]).is_err());
        assert!(histogram_gradient(&est, &[0.1]).is_err());
    }

    #[test]
    fn expectation_cases() {
        assert_eq!(expectation(&[0.5]).unwrap(), 0.5);
        assert_eq!(expectation(&[-1.0, 1.0]).unwrap(), 0.0);
        assert!(expectation(&[]).is_err());
        let pos = [0.42, 0.52, 0.62];
        let neg = [0.21, 0.31, 0.41];
        let margin = expectation(&pos).unwrap() - expectation(&neg).unwrap();
        assert!((margin - 0.21).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let est = estimate_histogram(&[0.2], 7, default_gamma(7)).unwrap();
        let mut buf = Vec::new();
        est.histogram.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.starts_with("node,mass\n"));
    }

    #[test]
    fn default_gamma_is_one_step_sigma() {
        // R = 5: step 0.5, gamma = 1 / (2 * 0.25)
        assert_eq!(default_gamma(5), 2.0);
    }

    proptest! {
        #[test]
        fn masses_sum_to_one_and_ignore_order(
            s in proptest::collection::vec(-1.0f64..=1.0, 1..40),
            bins in 2usize..120,
            gamma in 0.1f64..2000.0,
            rot in 0usize..40,
        ) {
            let est = estimate_histogram(&s, bins, gamma).unwrap();
            let sum: f64 = est.histogram.masses.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(est.histogram.masses.iter().all(|&m| m >= 0.0));
            let mut rotated = s.clone();
            let k = rot % s.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let other = estimate_histogram(&rotated, bins, gamma).unwrap();
            for (a, b) in est.histogram.masses.iter().zip(&other.histogram.masses) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn perturbation_is_bounded(
            s in proptest::collection::vec(-0.99f64..=0.99, 2..20),
            idx in 0usize..20,
            eps in 1e-7f64..1e-3,
        ) {
            let (bins, gamma) = (20, default_gamma(20));
            let i = idx % s.len();
            let base = estimate_histogram(&s, bins, gamma).unwrap();
            let mut moved = s.clone();
            moved[i] = (moved[i] + eps).min(1.0);
            let eps = moved[i] - s[i];
            let other = estimate_histogram(&moved, bins, gamma).unwrap();
            // |∂raw/∂s| <= sqrt(2γ/e)/|S| per bin; normalisation at most
            // doubles it and divides by Z, which is >= the smallest raw total
            let z_min = base.total.min(other.total);
            let c = 2.0 * (2.0 * gamma / std::f64::consts::E).sqrt() * bins as f64 / (s.len() as f64 * z_min);
            for (a, b) in base.histogram.masses.iter().zip(&other.histogram.masses) {
                prop_assert!((a - b).abs() <= c * eps + 1e-15);
            }
        }
    }
}
