//! Seeded generator of labelled identity data with one easy domain and a
//! ladder of hard domains.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed with
//! `seed_from_u64(seed)`; independent purposes use separate ChaCha streams:
//!
//! | stream | purpose |
//! |--------|---------|
//! | 0 | identity prototypes |
//! | 1 | hard-domain projections |
//! | 2 + d | sample noise for domain `d` (0 = easy, k = hard-k) |
//!
//! Gaussian draws use `rand_distr::StandardNormal` (ziggurat).
//!
//! * easy sample: `normalize(prototype + σ_e·z)`
//! * hard-k sample: `normalize(P_kᵀ P_k (prototype + σ_h(k)·z) + c_k·N_kᵀ w)`,
//!   where `P_k` (`r(k)` rows) and `N_k` (`nuisance_rank` rows) are
//!   orthonormal and drawn once per domain from stream 1, `w ~ N(0, I)` is
//!   drawn per sample after `z`, and `c_k` is `hard_nuisance[k]` (0 if unset).
//!
//! Prototypes are `normalize(B u)` with `u ~ N(0, I)` in `prototype_rank`
//! dimensions and `B` a fixed orthonormal basis; with the default rank equal
//! to the ambient dimension this is simply a uniform direction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DdlError, Result};
use crate::tensor::checkpoint::format_f64;
use crate::tensor::linalg::l2_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Easy,
    /// 1-based severity index.
    Hard(u8),
}

impl Domain {
    /// 0 for easy, k for hard-k.
    pub fn index(self) -> usize {
        match self {
            Domain::Easy => 0,
            Domain::Hard(k) => k as usize,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Easy => write!(f, "easy"),
            Domain::Hard(k) => write!(f, "hard-{k}"),
        }
    }
}

impl FromStr for Domain {
    type Err = DdlError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "easy" {
            return Ok(Domain::Easy);
        }
        s.strip_prefix("hard-")
            .and_then(|k| k.parse::<u8>().ok())
            .filter(|&k| k >= 1)
            .map(Domain::Hard)
            .ok_or_else(|| DdlError::Parse(format!("unknown domain tag `{s}`")))
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPrototype {
    pub identity: u32,
    pub prototype: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Array1<f64>,
    pub identity: u32,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub ambient_dim: usize,
    /// Dimension of the subspace prototypes are drawn from.
    pub prototype_rank: usize,
    pub easy_noise: f64,
    /// One entry per hard domain, in severity order.
    pub hard_noise: Vec<f64>,
    pub hard_rank: Vec<usize>,
    /// Scale of per-sample nuisance drawn inside a fixed low-rank subspace of
    /// each hard domain. Empty means none.
    #[serde(default)]
    pub hard_nuisance: Vec<f64>,
    #[serde(default = "default_nuisance_rank")]
    pub nuisance_rank: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 200,
            samples_per_identity: 6,
            ambient_dim: 32,
            prototype_rank: 32,
            easy_noise: 0.05,
            hard_noise: vec![0.2, 0.3],
            hard_rank: vec![16, 12],
            hard_nuisance: Vec::new(),
            nuisance_rank: default_nuisance_rank(),
            seed: 7,
        }
    }
}

fn default_nuisance_rank() -> usize {
    4
}

impl SynthConfig {
    pub fn hard_domains(&self) -> usize {
        self.hard_noise.len()
    }

    pub fn domains(&self) -> Vec<Domain> {
        std::iter::once(Domain::Easy)
            .chain((1..=self.hard_domains()).map(|k| Domain::Hard(k as u8)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DdlError::InvalidConfig(m));
        if self.identities == 0 {
            return bad("identities must be positive".into());
        }
        if self.samples_per_identity == 0 {
            return bad("samples_per_identity must be positive".into());
        }
        if self.ambient_dim < 2 {
            return bad("ambient_dim must be at least 2".into());
        }
        if self.prototype_rank == 0 || self.prototype_rank > self.ambient_dim {
            return bad(format!("prototype_rank must lie in 1..={}", self.ambient_dim));
        }
        if self.hard_noise.len() != self.hard_rank.len() {
            return bad(format!(
                "hard_noise has {} entries but hard_rank has {}",
                self.hard_noise.len(),
                self.hard_rank.len()
            ));
        }
        if !self.hard_nuisance.is_empty() && self.hard_nuisance.len() != self.hard_noise.len() {
            return bad(format!(
                "hard_nuisance has {} entries but there are {} hard domains",
                self.hard_nuisance.len(),
                self.hard_noise.len()
            ));
        }
        if let Some(c) = self.hard_nuisance.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return bad(format!("hard_nuisance entries must be finite and non-negative, got {c}"));
        }
        if self.nuisance_rank == 0 || self.nuisance_rank > self.ambient_dim {
            return bad(format!("nuisance_rank must lie in 1..={}", self.ambient_dim));
        }
        if self.hard_noise.len() > u8::MAX as usize {
            return bad("too many hard domains".into());
        }
        if !(self.easy_noise >= 0.0 && self.easy_noise.is_finite()) {
            return bad("easy_noise must be finite and non-negative".into());
        }
        for (k, (&s, &r)) in self.hard_noise.iter().zip(&self.hard_rank).enumerate() {
            if !(s.is_finite() && s > self.easy_noise) {
                return bad(format!("hard_noise[{k}] = {s} must exceed easy_noise {}", self.easy_noise));
            }
            if r == 0 || r >= self.ambient_dim {
                return bad(format!("hard_rank[{k}] = {r} must lie in 1..{}", self.ambient_dim));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub prototypes: Vec<IdentityPrototype>,
    pub samples: Vec<LabeledSample>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `rows` orthonormal rows in `dim` dimensions (Gram-Schmidt on Gaussian draws).
fn orthonormal_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((rows, dim));
    let mut filled = 0;
    let mut attempts = 0;
    while filled < rows {
        attempts += 1;
        if attempts > rows * 10 + 10 {
            return Err(DdlError::Contract("could not draw an orthonormal basis".into()));
        }
        let mut v = Array1::from_shape_fn(dim, |_| gaussian(rng));
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for j in 0..filled {
                let q = out.row(j);
                let c = q.dot(&v);
                v.scaled_add(-c, &q);
            }
        }
        if let Ok(u) = l2_normalize(v.view()) {
            if v.dot(&v).sqrt() > 1e-8 {
                out.row_mut(filled).assign(&u);
                filled += 1;
            }
        }
    }
    Ok(out)
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let dim = config.ambient_dim;

    let mut proto_rng = stream_rng(config.seed, 0);
    let basis = orthonormal_rows(config.prototype_rank, dim, &mut proto_rng)?;
    let mut prototypes = Vec::with_capacity(config.identities);
    for id in 0..config.identities {
        let u = Array1::from_shape_fn(config.prototype_rank, |_| gaussian(&mut proto_rng));
        let p = l2_normalize(basis.t().dot(&u).view())?;
        prototypes.push(IdentityPrototype {
            identity: id as u32,
            prototype: p,
        });
    }

    let mut proj_rng = stream_rng(config.seed, 1);
    let projections: Vec<Array2<f64>> = config
        .hard_rank
        .iter()
        .map(|&r| orthonormal_rows(r, dim, &mut proj_rng))
        .collect::<Result<_>>()?;
    let nuisance: Vec<Array2<f64>> = (0..config.hard_domains())
        .map(|k| {
            let c = config.hard_nuisance.get(k).copied().unwrap_or(0.0);
            orthonormal_rows(config.nuisance_rank, dim, &mut proj_rng).map(|n| n * c)
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(config.identities * config.samples_per_identity * (1 + config.hard_domains()));
    for domain in config.domains() {
        let mut rng = stream_rng(config.seed, 2 + domain.index() as u64);
        let (sigma, proj) = match domain {
            Domain::Easy => (config.easy_noise, None),
            Domain::Hard(k) => {
                let k = k as usize - 1;
                (config.hard_noise[k], Some((&projections[k], &nuisance[k])))
            }
        };
        for proto in &prototypes {
            for _ in 0..config.samples_per_identity {
                let noisy = &proto.prototype + &Array1::from_shape_fn(dim, |_| sigma * gaussian(&mut rng));
                let x = match proj {
                    None => noisy,
                    Some((p, n)) => {
                        let w = Array1::from_shape_fn(n.nrows(), |_| gaussian(&mut rng));
                        p.t().dot(&p.dot(&noisy)) + n.t().dot(&w)
                    }
                };
                samples.push(LabeledSample {
                    features: l2_normalize(x.view())?,
                    identity: proto.identity,
                    domain,
                });
            }
        }
    }
    Ok(Dataset { prototypes, samples })
}

/// Splits samples into identity-disjoint train and eval sets. The first
/// `round(fraction * n)` identities of a seeded shuffle go to training.
pub fn split_train_eval(
    samples: &[LabeledSample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DdlError::InvalidConfig(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut ids: Vec<u32> = samples.iter().map(|s| s.identity).collect::<BTreeSet<_>>().into_iter().collect();
    let n_train = (fraction * ids.len() as f64).round() as usize;
    if n_train == 0 || n_train == ids.len() {
        return Err(DdlError::InsufficientSamples(format!(
            "cannot split {} identities with fraction {fraction}",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_ids: BTreeSet<u32> = ids[..n_train].iter().copied().collect();
    let (train, eval): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| train_ids.contains(&s.identity));
    Ok((train, eval))
}

/// Mean pairwise cosine over same-identity sample pairs in `domain`.
pub fn mean_intra_identity_cosine(samples: &[LabeledSample], domain: Domain) -> Option<f64> {
    let mut by_id: BTreeMap<u32, Vec<&Array1<f64>>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.domain == domain) {
        by_id.entry(s.identity).or_default().push(&s.features);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for feats in by_id.values() {
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                sum += feats[i].dot(feats[j]);
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Stacks sample features into a matrix, one row per sample.
pub fn feature_matrix<'a, I>(samples: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let rows: Vec<_> = samples.into_iter().map(|s| s.features.view().insert_axis(Axis(0))).collect();
    if rows.is_empty() {
        return Array2::zeros((0, dim));
    }
    ndarray::concatenate(Axis(0), &rows).expect("uniform feature width")
}

/// Writes samples as CSV: `sample,identity,domain,f0,…,f{d-1}` with a header
/// row and 17-significant-digit floats.
pub fn write_samples<W: Write>(samples: &[LabeledSample], w: W) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["sample".to_string(), "identity".into(), "domain".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != dim {
            return Err(DdlError::ShapeMismatch(format!("sample {i} has {} features, expected {dim}", s.features.len())));
        }
        let mut rec = vec![i.to_string(), s.identity.to_string(), s.domain.to_string()];
        rec.extend(s.features.iter().map(|&x| format_f64(x)));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<LabeledSample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.len() < 4 || &headers[0] != "sample" || &headers[1] != "identity" || &headers[2] != "domain" {
        return Err(DdlError::Parse("dataset header must start with sample,identity,domain".into()));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let perr = |m: String| DdlError::Parse(format!("dataset row {}: {m}", row + 1));
        let identity = rec[1].parse::<u32>().map_err(|e| perr(e.to_string()))?;
        let domain: Domain = rec[2].parse()?;
        let features = rec
            .iter()
            .skip(3)
            .map(|t| t.parse::<f64>().map_err(|e| perr(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(LabeledSample {
            features: Array1::from_vec(features),
            identity,
            domain,
        });
    }
    Ok(out)
}

/// Writes `path` and a `<path>.config.json` sidecar echoing the generator config.
pub fn save_dataset(samples: &[LabeledSample], config: &SynthConfig, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_samples(samples, std::io::BufWriter::new(f))?;
    let echo = serde_json::to_string_pretty(config).map_err(|e| DdlError::Parse(e.to_string()))?;
    std::fs::write(sidecar_path(path), echo + "\n")?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    read_samples(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    s.into()
}

fn csv_err(e: csv::Error) -> DdlError {
    DdlError::Parse(format!("csv: {e}"))
}
