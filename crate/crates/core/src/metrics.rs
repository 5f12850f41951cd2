//! Evaluation statistics: expectation margin, histogram intersection,
//! verification accuracy / TAR@FAR and rank-1 identification.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::distribution::{expectation, SoftHistogram};
use crate::error::{DdlError, Result};
use crate::tensor::checkpoint::format_f64;

pub const DEFAULT_FAR_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];

pub fn expectation_margin(positive: &[f64], negative: &[f64]) -> Result<f64> {
    Ok(expectation(positive)? - expectation(negative)?)
}

/// `Σ_r min(h⁺_r, h⁻_r)`.
pub fn histogram_intersection(a: &SoftHistogram, b: &SoftHistogram) -> Result<f64> {
    if a.bins() != b.bins() {
        return Err(DdlError::BinMismatch {
            left: a.bins(),
            right: b.bins(),
        });
    }
    if a.nodes != b.nodes {
        return Err(DdlError::Contract("histograms have different nodes".into()));
    }
    Ok(a.masses.iter().zip(&b.masses).map(|(x, y)| x.min(*y)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub threshold: f64,
    pub tar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub accuracy: f64,
    /// Scores `>=` this are accepted.
    pub threshold: f64,
    pub tar_at_far: Vec<TarAtFar>,
}

/// Linear-interpolated quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Accuracy at the best acceptance threshold (lowest threshold on ties) and
/// TAR at each FAR, thresholding at the `1 - FAR` impostor quantile.
pub fn verification_metrics(genuine: &[f64], impostor: &[f64], far_grid: &[f64]) -> Result<Verification> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(DdlError::EmptyInput("verification needs genuine and impostor scores".into()));
    }
    if let Some(f) = far_grid.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(DdlError::InvalidConfig(format!("FAR {f} outside [0, 1]")));
    }
    let mut scored: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = scored.len() as f64;

    // threshold = smallest score: everything accepted
    let (mut tp, mut tn) = (genuine.len(), 0usize);
    let mut best = (tp + tn, scored[0].0);
    let mut i = 0;
    while i < scored.len() {
        let v = scored[i].0;
        while i < scored.len() && scored[i].0 == v {
            if scored[i].1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let next = if i < scored.len() { scored[i].0 } else { f64::INFINITY };
        if tp + tn > best.0 {
            best = (tp + tn, next);
        }
    }

    let mut imp = impostor.to_vec();
    imp.sort_by(f64::total_cmp);
    let tar_at_far = far_grid
        .iter()
        .map(|&far| {
            let threshold = quantile_sorted(&imp, 1.0 - far);
            let tar = genuine.iter().filter(|&&g| g > threshold).count() as f64 / genuine.len() as f64;
            TarAtFar { far, threshold, tar }
        })
        .collect();
    Ok(Verification {
        accuracy: best.0 as f64 / total,
        threshold: best.1,
        tar_at_far,
    })
}

/// Fraction of probes whose most similar gallery row carries their id.
/// Rows are expected to be unit-norm; ties go to the lowest gallery index.
pub fn rank1_identification(
    gallery: ArrayView2<f64>,
    gallery_ids: &[u32],
    probes: ArrayView2<f64>,
    probe_ids: &[u32],
) -> Result<f64> {
    if gallery.nrows() == 0 || probes.nrows() == 0 {
        return Err(DdlError::EmptyInput("rank-1 needs a non-empty gallery and probe set".into()));
    }
    if gallery.nrows() != gallery_ids.len() || probes.nrows() != probe_ids.len() {
        return Err(DdlError::ShapeMismatch("ids do not match row counts".into()));
    }
    if gallery.ncols() != probes.ncols() {
        return Err(DdlError::ShapeMismatch(format!(
            "gallery dim {} vs probe dim {}",
            gallery.ncols(),
            probes.ncols()
        )));
    }
    if gallery_ids.iter().collect::<BTreeSet<_>>().len() != gallery_ids.len() {
        return Err(DdlError::Contract("gallery ids must be unique".into()));
    }
    let sims = probes.dot(&gallery.t());
    let correct = sims
        .rows()
        .into_iter()
        .zip(probe_ids)
        .filter(|(row, &id)| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            gallery_ids[best] == id
        })
        .count();
    Ok(correct as f64 / probes.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub expectation_margin: f64,
    pub histogram_intersection: f64,
    pub verification_accuracy: f64,
    pub tar_at_far: Vec<TarAtFar>,
    pub rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: Vec<DomainReport>,
}

impl EvalReport {
    pub fn domain(&self, name: &str) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = Vec::new();
        for d in &self.domains {
            let p = &d.domain;
            cols.push(format!("{p}_margin"));
            cols.push(format!("{p}_intersection"));
            cols.push(format!("{p}_accuracy"));
            for t in &d.tar_at_far {
                cols.push(format!("{p}_tar@far={}", t.far));
            }
            cols.push(format!("{p}_rank1"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut out = String::new();
        for d in &self.domains {
            let mut vals = vec![d.expectation_margin, d.histogram_intersection, d.verification_accuracy];
            vals.extend(d.tar_at_far.iter().map(|t| t.tar));
            vals.push(d.rank1);
            for v in vals {
                if !out.is_empty() {
                    out.push(',');
                }
                write!(out, "{}", format_f64(v)).unwrap();
            }
        }
        out
    }
}

/// Sample Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
