//! Training loop and evaluation protocol.
//!
//! Every random choice inside [`train`] is drawn from ChaCha8 generators
//! keyed by [`derive_seed`]`(seed, iteration, attempt)`, so a run is a pure
//! function of its config, data and initial parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{default_gamma, estimate_histogram, DEFAULT_BINS};
use crate::error::{DdlError, Result};
use crate::losses::{ddl_total, DdlWeights, LossConfig, LossTerms, OrderPairs};
use crate::metrics::{
    expectation_margin, histogram_intersection, rank1_identification, verification_metrics, DomainReport, EvalReport,
    DEFAULT_FAR_GRID,
};
use crate::pairing::{batch_similarities, build_minibatch, hard_negative_similarities, Mining, Pool};
use crate::synth::{feature_matrix, Domain, LabeledSample};
use crate::tensor::linalg::{clamped_dot, normalize_rows};
use crate::tensor::{sgd_step, EncoderNet, OptimizerState, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    FinetunePlain,
    Ddl,
    DdlRandomMining,
    DdlMixture,
    KlOnly,
    OrderOnly,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Baseline,
        Mode::FinetunePlain,
        Mode::Ddl,
        Mode::DdlRandomMining,
        Mode::DdlMixture,
        Mode::KlOnly,
        Mode::OrderOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::FinetunePlain => "finetune-plain",
            Mode::Ddl => "ddl",
            Mode::DdlRandomMining => "ddl-random-mining",
            Mode::DdlMixture => "ddl-mixture",
            Mode::KlOnly => "kl-only",
            Mode::OrderOnly => "order-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DdlError::InvalidConfig(format!("unknown mode `{s}`")))
    }

    /// Loss weights actually used by this mode.
    pub fn effective_weights(self, w: &DdlWeights) -> DdlWeights {
        let mut w = *w;
        match self {
            Mode::Baseline | Mode::FinetunePlain => {
                w.lambda_kl_pos = 0.0;
                w.lambda_kl_neg = 0.0;
                w.lambda_order = 0.0;
            }
            Mode::KlOnly => w.lambda_order = 0.0,
            Mode::OrderOnly => {
                w.lambda_kl_pos = 0.0;
                w.lambda_kl_neg = 0.0;
            }
            Mode::Ddl | Mode::DdlRandomMining | Mode::DdlMixture => {}
        }
        w
    }

    pub fn mining(self) -> Mining {
        if self == Mode::DdlRandomMining {
            Mining::Random
        } else {
            Mining::Hard
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Positive pairs (and singles) per distribution block.
    pub b: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: DdlWeights,
    pub bins: usize,
    pub gamma: f64,
    pub order_pairs: OrderPairs,
    pub seed: u64,
    /// Evaluate every `ceil(eval_fraction * iterations)` iterations and at the end.
    pub eval_fraction: f64,
    pub max_retries: usize,
    pub far_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            mode: Mode::Ddl,
            b: 16,
            iterations: 1000,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            weights: DdlWeights::default(),
            bins: DEFAULT_BINS,
            gamma: default_gamma(DEFAULT_BINS),
            order_pairs: OrderPairs::Cross,
            seed: 0,
            eval_fraction: 0.1,
            max_retries: 3,
            far_grid: DEFAULT_FAR_GRID.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DdlError::InvalidConfig(m));
        if self.b < 2 {
            return bad(format!("b must be at least 2, got {}", self.b));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.bins < 2 {
            return bad("bins must be at least 2".into());
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be > 0".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad("eval_fraction must lie in (0, 1]".into());
        }
        self.weights.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.mode.effective_weights(&self.weights),
            bins: self.bins,
            gamma: self.gamma,
            order_pairs: self.order_pairs,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            bins: self.bins,
            gamma: self.gamma,
            far_grid: self.far_grid.clone(),
        }
    }

    /// First (0-based) iteration that runs at the reduced learning rate.
    pub fn lr_drop_iteration(&self) -> usize {
        self.iterations.div_ceil(2)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_drop_iteration() {
            self.lr
        } else {
            self.lr / 10.0
        }
    }

    pub fn eval_interval(&self) -> usize {
        ((self.eval_fraction * self.iterations as f64).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bins: usize,
    pub gamma: f64,
    pub far_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        TrainConfig::default().eval_config()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    /// Batches drawn, including degenerate ones that were resampled.
    pub attempts: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCheckpoint {
    /// Number of completed iterations when the report was taken.
    pub iteration: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub seed: u64,
    pub iterations: Vec<IterationLog>,
    pub evals: Vec<EvalCheckpoint>,
    /// Not part of the serialised log so logs stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine<'a> {
    Config { seed: u64, config: &'a TrainConfig },
    Iteration(&'a IterationLog),
    Eval(&'a EvalCheckpoint),
}

impl TrainLog {
    /// One JSON object per line: a config record, then iteration and eval
    /// records in the order they happened.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut put = |line: &LogLine| -> Result<()> {
            serde_json::to_writer(&mut w, line).map_err(|e| DdlError::Parse(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        put(&LogLine::Config {
            seed: self.seed,
            config: &self.config,
        })?;
        let mut evals = self.evals.iter().peekable();
        for it in &self.iterations {
            put(&LogLine::Iteration(it))?;
            while let Some(e) = evals.next_if(|e| e.iteration == it.iteration + 1) {
                put(&LogLine::Eval(e))?;
            }
        }
        for e in evals {
            put(&LogLine::Eval(e))?;
        }
        Ok(())
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|e| &e.report)
    }
}

/// SplitMix64 finaliser over `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps identities to dense class indices in ascending identity order.
pub fn class_map(samples: &[LabeledSample]) -> BTreeMap<u32, usize> {
    samples
        .iter()
        .map(|s| s.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect()
}

/// Hard domains present in `samples`, in severity order.
pub fn hard_domains(samples: &[LabeledSample]) -> Vec<Domain> {
    samples
        .iter()
        .map(|s| s.domain)
        .filter(|d| *d != Domain::Easy)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Teacher pool followed by the student pools the mode trains against.
pub fn pools_for(mode: Mode, samples: &[LabeledSample]) -> Result<Vec<Pool>> {
    let hard = hard_domains(samples);
    if hard.is_empty() {
        return Err(DdlError::InsufficientSamples("training data has no hard domain".into()));
    }
    let mut pools = vec![Pool::new(samples, &[Domain::Easy])];
    if mode == Mode::DdlMixture {
        if hard.len() < 2 {
            return Err(DdlError::InvalidConfig("mixture mode needs at least two hard domains".into()));
        }
        pools.push(Pool::new(samples, &hard));
    } else {
        pools.extend(hard.iter().map(|d| Pool::new(samples, &[*d])));
    }
    Ok(pools)
}

pub fn train(
    config: &TrainConfig,
    samples: &[LabeledSample],
    eval_samples: Option<&[LabeledSample]>,
    initial: EncoderNet,
) -> Result<(EncoderNet, TrainLog)> {
    train_with_callback(config, samples, eval_samples, initial, |_, _| Ok(()))
}

/// Like [`train`], calling `on_eval(net, checkpoint)` after every evaluation.
pub fn train_with_callback<F>(
    config: &TrainConfig,
    samples: &[LabeledSample],
    eval_samples: Option<&[LabeledSample]>,
    initial: EncoderNet,
    mut on_eval: F,
) -> Result<(EncoderNet, TrainLog)>
where
    F: FnMut(&EncoderNet, &EvalCheckpoint) -> Result<()>,
{
    config.validate()?;
    let start = Instant::now();
    let mut net = initial;
    let mut log = TrainLog {
        config: config.clone(),
        seed: config.seed,
        iterations: Vec::with_capacity(config.iterations),
        evals: Vec::new(),
        wall_time_secs: 0.0,
    };
    if config.iterations == 0 {
        return Ok((net, log));
    }
    let classes = class_map(samples);
    if net.classes() != classes.len() {
        return Err(DdlError::ShapeMismatch(format!(
            "head has {} classes, training data {} identities",
            net.classes(),
            classes.len()
        )));
    }
    let pools = pools_for(config.mode, samples)?;
    let loss_cfg = config.loss_config();
    let distill = loss_cfg.weights.uses_kl() || loss_cfg.weights.uses_order();
    let mining = config.mode.mining();
    let eval_cfg = config.eval_config();
    let interval = config.eval_interval();
    let dim = net.input_dim();
    let mut opt = OptimizerState::new(
        &net,
        SgdConfig {
            lr: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
    )?;

    for t in 0..config.iterations {
        let lr = config.lr_at(t);
        opt.set_lr(lr)?;
        let mut attempt = 0;
        let (report, cache) = loop {
            let batch_seed = derive_seed(config.seed, t as u64, attempt as u64);
            let batch = build_minibatch(&pools, config.b, batch_seed)?;
            let rows = batch.sample_indices();
            let x = feature_matrix(rows.iter().map(|&i| &samples[i]), dim);
            let labels: Vec<usize> = rows.iter().map(|&i| classes[&samples[i].identity]).collect();
            let cache = net.forward(x.view())?;
            let sets = if distill {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed, u64::MAX, 1));
                match batch_similarities(&batch, cache.embeddings().view(), mining, &mut rng) {
                    Ok(s) => s,
                    Err(DdlError::DegenerateDistribution(msg)) => {
                        attempt += 1;
                        if attempt > config.max_retries {
                            return Err(DdlError::DegenerateDistribution(format!(
                                "iteration {t}: {msg} (gave up after {} resamples)",
                                config.max_retries
                            )));
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                Vec::new()
            };
            let report = ddl_total(cache.embeddings().view(), &labels, net.head.view(), &sets, &loss_cfg)?;
            break (report, cache);
        };
        let mut grads = net.backward(&cache, report.grad_embeddings.view())?;
        grads.head = report.grad_head;
        sgd_step(&mut net, &grads, &mut opt)?;
        log.iterations.push(IterationLog {
            iteration: t,
            lr,
            attempts: attempt + 1,
            terms: report.terms,
        });

        let done = t + 1;
        if let Some(eval) = eval_samples {
            if done % interval == 0 || done == config.iterations {
                let checkpoint = EvalCheckpoint {
                    iteration: done,
                    report: evaluate(&net, eval, &eval_cfg)?,
                };
                on_eval(&net, &checkpoint)?;
                log.evals.push(checkpoint);
            }
        }
    }
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((net, log))
}

fn mean_unit(rows: &[Array1<f64>]) -> Result<Array1<f64>> {
    let mut acc = Array1::<f64>::zeros(rows[0].len());
    for r in rows {
        acc += r;
    }
    crate::tensor::l2_normalize(acc.view())
}

/// Per-domain statistics on an identity-disjoint evaluation set.
///
/// * `S⁺`: every same-identity pair within the domain (no outlier filter).
/// * `S⁻`: hard-mined over one single (the first sample) per identity.
/// * verification: `S⁺` against every cross-identity pair of singles.
/// * rank-1: gallery = normalised mean of the first half (rounded up) of each
///   identity's easy samples; probes = all samples of a hard domain, or the
///   remaining easy samples for the easy domain.
pub fn evaluate(net: &EncoderNet, samples: &[LabeledSample], config: &EvalConfig) -> Result<EvalReport> {
    let dim = net.input_dim();
    let mut groups: BTreeMap<Domain, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.domain).or_default().entry(s.identity).or_default().push(i);
    }
    let easy = groups
        .get(&Domain::Easy)
        .ok_or_else(|| DdlError::InsufficientSamples("evaluation set has no easy samples".into()))?;
    if easy.len() < 2 {
        return Err(DdlError::InsufficientSamples(format!(
            "evaluation needs at least 2 identities, got {}",
            easy.len()
        )));
    }
    if let Some((id, v)) = easy.iter().find(|(_, v)| v.len() < 2) {
        return Err(DdlError::InsufficientSamples(format!(
            "identity {id} has {} easy samples; evaluation needs 2",
            v.len()
        )));
    }

    let mut all = Array2::<f64>::zeros((samples.len(), net.embedding_dim()));
    // embed in moderate chunks to bound memory
    for (c, chunk) in samples.chunks(512).enumerate() {
        let x = feature_matrix(chunk.iter(), dim);
        let e = net.embed(x.view())?;
        all.slice_mut(ndarray::s![c * 512..c * 512 + chunk.len(), ..]).assign(&e);
    }

    let mut gallery_ids = Vec::new();
    let mut gallery_rows = Vec::new();
    let mut easy_probes = Vec::new();
    for (&id, idx) in easy {
        let half = idx.len().div_ceil(2);
        let rows: Vec<Array1<f64>> = idx[..half].iter().map(|&i| all.row(i).to_owned()).collect();
        gallery_rows.push(mean_unit(&rows)?);
        gallery_ids.push(id);
        easy_probes.extend(idx[half..].iter().copied());
    }
    let gallery_views: Vec<_> = gallery_rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    let mut gallery = ndarray::concatenate(Axis(0), &gallery_views).expect("uniform width");
    normalize_rows(&mut gallery)?;

    let mut domains = Vec::new();
    for (domain, ids) in &groups {
        let mut genuine = Vec::new();
        for idx in ids.values() {
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    genuine.push(clamped_dot(all.row(idx[a]), all.row(idx[b])));
                }
            }
        }
        if genuine.is_empty() {
            return Err(DdlError::InsufficientSamples(format!("domain {domain} has no positive pairs")));
        }
        let singles: Vec<usize> = ids.values().map(|v| v[0]).collect();
        let mined = hard_negative_similarities(all.view(), &singles)?;
        let mut impostor = Vec::with_capacity(singles.len() * (singles.len() - 1) / 2);
        for a in 0..singles.len() {
            for b in a + 1..singles.len() {
                impostor.push(clamped_dot(all.row(singles[a]), all.row(singles[b])));
            }
        }
        let hp = estimate_histogram(&genuine, config.bins, config.gamma)?;
        let hn = estimate_histogram(&mined.values, config.bins, config.gamma)?;
        let verification = verification_metrics(&genuine, &impostor, &config.far_grid)?;

        let probe_idx: Vec<usize> = if *domain == Domain::Easy {
            easy_probes.clone()
        } else {
            ids.values().flatten().copied().collect()
        };
        let probe_rows: Vec<_> = probe_idx.iter().map(|&i| all.row(i).insert_axis(Axis(0))).collect();
        let probes = ndarray::concatenate(Axis(0), &probe_rows).expect("uniform width");
        let probe_ids: Vec<u32> = probe_idx.iter().map(|&i| samples[i].identity).collect();

        domains.push(DomainReport {
            domain: domain.to_string(),
            expectation_margin: expectation_margin(&genuine, &mined.values)?,
            histogram_intersection: histogram_intersection(&hp.histogram, &hn.histogram)?,
            verification_accuracy: verification.accuracy,
            tar_at_far: verification.tar_at_far,
            rank1: rank1_identification(gallery.view(), &gallery_ids, probes.view(), &probe_ids)?,
        });
    }
    Ok(EvalReport { domains })
}

/// Soft histograms of the evaluation `S⁺` and `S⁻` per domain, for export.
pub fn evaluation_histograms(
    net: &EncoderNet,
    samples: &[LabeledSample],
    config: &EvalConfig,
) -> Result<Vec<(String, crate::distribution::SoftHistogram, crate::distribution::SoftHistogram)>> {
    let dim = net.input_dim();
    let mut groups: BTreeMap<Domain, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.domain).or_default().entry(s.identity).or_default().push(i);
    }
    let x = feature_matrix(samples.iter(), dim);
    let all = net.embed(x.view())?;
    let mut out = Vec::new();
    for (domain, ids) in &groups {
        let mut genuine = Vec::new();
        for idx in ids.values() {
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    genuine.push(clamped_dot(all.row(idx[a]), all.row(idx[b])));
                }
            }
        }
        let singles: Vec<usize> = ids.values().map(|v| v[0]).collect();
        let mined = hard_negative_similarities(all.view(), &singles)?;
        let hp = estimate_histogram(&genuine, config.bins, config.gamma)?;
        let hn = estimate_histogram(&mined.values, config.bins, config.gamma)?;
        out.push((domain.to_string(), hp.histogram, hn.histogram));
    }
    Ok(out)
}
