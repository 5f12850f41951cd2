//! Mini-batch assembly and per-block similarity sets.
//!
//! A mini-batch holds one teacher block (easy domain) followed by K student
//! blocks. Each block contributes `b` positive pairs and `b` singles of
//! pairwise-distinct identities, so a batch has `3b(K+1)` samples. Inside the
//! batch embedding matrix block `k` occupies rows `3bk .. 3b(k+1)`: pair `i`
//! sits at rows `3bk + 2i` and `3bk + 2i + 1`, single `j` at `3bk + 2b + j`.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::seq::{IndexedRandom, IteratorRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdlError, Result};
use crate::synth::{Domain, LabeledSample};
use crate::tensor::linalg::clamped_dot;

/// Sample indices of one or more domains grouped by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub label: String,
    pub domains: Vec<Domain>,
    by_identity: BTreeMap<u32, Vec<usize>>,
}

impl Pool {
    /// Collects the samples whose domain is in `domains`; indices refer to `samples`.
    pub fn new(samples: &[LabeledSample], domains: &[Domain]) -> Self {
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if domains.contains(&s.domain) {
                by_identity.entry(s.identity).or_default().push(i);
            }
        }
        let label = domains.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("+");
        Self {
            label,
            domains: domains.to_vec(),
            by_identity,
        }
    }

    pub fn identity_count(&self) -> usize {
        self.by_identity.len()
    }

    pub fn sample_count(&self) -> usize {
        self.by_identity.values().map(Vec::len).sum()
    }

    pub fn identities(&self) -> impl Iterator<Item = (&u32, &Vec<usize>)> {
        self.by_identity.iter()
    }
}

/// `b` positive pairs plus `b` singles drawn from one pool. Entries are
/// indices into the dataset the pool was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionBlock {
    pub label: String,
    pub positives: Vec<(usize, usize)>,
    pub singles: Vec<usize>,
}

impl DistributionBlock {
    pub fn b(&self) -> usize {
        self.singles.len()
    }

    pub fn sample_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.positives
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .chain(self.singles.iter().copied())
    }
}

/// Row indices of one block inside the batch embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRows {
    pub pairs: Vec<(usize, usize)>,
    pub singles: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    /// `blocks[0]` is the teacher; the rest are students.
    pub blocks: Vec<DistributionBlock>,
}

impl MiniBatch {
    pub fn b(&self) -> usize {
        self.blocks[0].b()
    }

    pub fn students(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|bl| 2 * bl.positives.len() + bl.singles.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset indices in batch row order.
    pub fn sample_indices(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|bl| bl.sample_indices()).collect()
    }

    pub fn block_rows(&self, k: usize) -> BlockRows {
        let offset: usize = self.blocks[..k].iter().map(|bl| 2 * bl.positives.len() + bl.singles.len()).sum();
        let bl = &self.blocks[k];
        let np = bl.positives.len();
        BlockRows {
            pairs: (0..np).map(|i| (offset + 2 * i, offset + 2 * i + 1)).collect(),
            singles: (0..bl.singles.len()).map(|j| offset + 2 * np + j).collect(),
        }
    }
}

pub fn build_positive_pairs_with<R: Rng>(pool: &Pool, b: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<&Vec<usize>> = pool.by_identity.values().filter(|v| v.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(DdlError::InsufficientSamples(format!(
            "pool `{}` has no identity with two or more samples",
            pool.label
        )));
    }
    let chosen: Vec<&Vec<usize>> = if eligible.len() >= b {
        let mut picked: Vec<usize> = (0..eligible.len()).choose_multiple(rng, b);
        picked.sort_unstable();
        picked.into_iter().map(|i| eligible[i]).collect()
    } else {
        (0..b).map(|_| *eligible.choose(rng).expect("non-empty")).collect()
    };
    Ok(chosen
        .into_iter()
        .map(|members| {
            let two: Vec<usize> = members.choose_multiple(rng, 2).copied().collect();
            (two[0].min(two[1]), two[0].max(two[1]))
        })
        .collect())
}

/// `b` positive pairs (two distinct samples of one identity, same pool).
/// Identities are drawn without replacement when the pool has at least `b`
/// eligible identities.
pub fn build_positive_pairs(pool: &Pool, b: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    build_positive_pairs_with(pool, b, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn build_singles<R: Rng>(pool: &Pool, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool.identity_count() < b {
        return Err(DdlError::InsufficientSamples(format!(
            "pool `{}` has {} identities, {b} distinct singles requested",
            pool.label,
            pool.identity_count()
        )));
    }
    let ids: Vec<&Vec<usize>> = pool.by_identity.values().collect();
    let mut picked = (0..ids.len()).choose_multiple(rng, b);
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| *ids[i].choose(rng).expect("identity has samples"))
        .collect())
}

/// Builds a teacher block from `pools[0]` and one student block from each
/// remaining pool.
pub fn build_minibatch(pools: &[Pool], b: usize, seed: u64) -> Result<MiniBatch> {
    if pools.len() < 2 {
        return Err(DdlError::InvalidConfig("a mini-batch needs a teacher pool and at least one student pool".into()));
    }
    if b < 2 {
        return Err(DdlError::InvalidConfig(format!("b must be at least 2, got {b}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = pools
        .iter()
        .map(|pool| {
            Ok(DistributionBlock {
                label: pool.label.clone(),
                positives: build_positive_pairs_with(pool, b, &mut rng)?,
                singles: build_singles(pool, b, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiniBatch { blocks })
}

/// Similarities with the embedding rows that produced them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilaritySet {
    pub values: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
}

impl SimilaritySet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Positive (`S⁺`) and negative (`S⁻`) similarity sets of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPairSets {
    pub positive: SimilaritySet,
    pub negative: SimilaritySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    #[default]
    Hard,
    Random,
}

/// Positive-pair similarities with negative values dropped as outliers.
pub fn positive_similarities(embeddings: ArrayView2<f64>, pairs: &[(usize, usize)]) -> Result<SimilaritySet> {
    let mut out = SimilaritySet::default();
    for &(a, b) in pairs {
        let s = clamped_dot(embeddings.row(a), embeddings.row(b));
        if s >= 0.0 {
            out.values.push(s);
            out.pairs.push((a, b));
        }
    }
    if out.is_empty() {
        return Err(DdlError::DegenerateDistribution(format!(
            "all {} positive pairs have negative similarity",
            pairs.len()
        )));
    }
    Ok(out)
}

/// For every single `i`, the largest similarity to another single `j != i`
/// (ties go to the smallest `j`).
pub fn hard_negative_similarities(embeddings: ArrayView2<f64>, singles: &[usize]) -> Result<SimilaritySet> {
    if singles.len() < 2 {
        return Err(DdlError::InsufficientSamples(format!(
            "negative mining needs at least 2 singles, got {}",
            singles.len()
        )));
    }
    let mut out = SimilaritySet::default();
    for (i, &ri) in singles.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for (j, &rj) in singles.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = clamped_dot(embeddings.row(ri), embeddings.row(rj));
            if s > best {
                best = s;
                best_j = rj;
            }
        }
        out.values.push(best);
        out.pairs.push((ri, best_j));
    }
    Ok(out)
}

pub fn random_negative_similarities_with<R: Rng>(
    embeddings: ArrayView2<f64>,
    singles: &[usize],
    rng: &mut R,
) -> Result<SimilaritySet> {
    let n = singles.len();
    if n < 2 {
        return Err(DdlError::InsufficientSamples(format!("negative mining needs at least 2 singles, got {n}")));
    }
    let mut out = SimilaritySet::default();
    for (i, &ri) in singles.iter().enumerate() {
        let r = rng.random_range(0..n - 1);
        let j = if r < i { r } else { r + 1 };
        let rj = singles[j];
        out.values.push(clamped_dot(embeddings.row(ri), embeddings.row(rj)));
        out.pairs.push((ri, rj));
    }
    Ok(out)
}

/// Like [`hard_negative_similarities`] but each partner is drawn uniformly.
pub fn random_negative_similarities(embeddings: ArrayView2<f64>, singles: &[usize], seed: u64) -> Result<SimilaritySet> {
    random_negative_similarities_with(embeddings, singles, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// S⁺ and S⁻ for every block of a batch.
pub fn batch_similarities<R: Rng>(
    batch: &MiniBatch,
    embeddings: ArrayView2<f64>,
    mining: Mining,
    rng: &mut R,
) -> Result<Vec<SimilarityPairSets>> {
    (0..batch.blocks.len())
        .map(|k| {
            let rows = batch.block_rows(k);
            let positive = positive_similarities(embeddings, &rows.pairs)?;
            let negative = match mining {
                Mining::Hard => hard_negative_similarities(embeddings, &rows.singles)?,
                Mining::Random => random_negative_similarities_with(embeddings, &rows.singles, rng)?,
            };
            Ok(SimilarityPairSets { positive, negative })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use ndarray::{array, Array1, Array2};
    use std::collections::BTreeSet;

    fn sample(identity: u32, domain: Domain) -> LabeledSample {
        LabeledSample {
            features: Array1::from_vec(vec![1.0, 0.0]),
            identity,
            domain,
        }
    }

    fn dataset() -> Vec<LabeledSample> {
        generate(&SynthConfig {
            identities: 40,
            samples_per_identity: 3,
            ambient_dim: 8,
            prototype_rank: 8,
            easy_noise: 0.05,
            hard_noise: vec![0.3, 0.4, 0.5],
            hard_rank: vec![4, 3, 2],
            hard_nuisance: Vec::new(),
            nuisance_rank: 4,
            seed: 1,
        })
        .unwrap()
        .samples
    }

    fn pools(samples: &[LabeledSample], k: usize) -> Vec<Pool> {
        std::iter::once(Domain::Easy)
            .chain((1..=k).map(|i| Domain::Hard(i as u8)))
            .map(|d| Pool::new(samples, &[d]))
            .collect()
    }

    #[test]
    fn single_sample_identities_cannot_pair() {
        let samples: Vec<_> = (0..5).map(|i| sample(i, Domain::Easy)).collect();
        let pool = Pool::new(&samples, &[Domain::Easy]);
        assert!(matches!(
            build_positive_pairs(&pool, 2, 0),
            Err(DdlError::InsufficientSamples(_))
        ));
    }

    #[test]
    fn forced_unique_pair() {
        let samples = vec![sample(3, Domain::Easy), sample(9, Domain::Easy), sample(3, Domain::Easy)];
        let pool = Pool::new(&samples, &[Domain::Easy]);
        for seed in 0..5 {
            assert_eq!(build_positive_pairs(&pool, 1, seed).unwrap(), vec![(0, 2)]);
        }
    }

    #[test]
    fn pairs_are_deterministic_and_valid() {
        let data = dataset();
        let pool = Pool::new(&data, &[Domain::Hard(2)]);
        let a = build_positive_pairs(&pool, 16, 5).unwrap();
        assert_eq!(a, build_positive_pairs(&pool, 16, 5).unwrap());
        assert_eq!(a.len(), 16);
        for (x, y) in a {
            assert_ne!(x, y);
            assert_eq!(data[x].identity, data[y].identity);
            assert_eq!(data[x].domain, Domain::Hard(2));
            assert_eq!(data[y].domain, Domain::Hard(2));
        }
    }

    #[test]
    fn batch_sizes_follow_formula() {
        let data = dataset();
        for b in [8, 16, 32] {
            for k in 1..=3 {
                let batch = build_minibatch(&pools(&data, k), b, 11).unwrap();
                assert_eq!(batch.len(), 3 * b * (k + 1));
                assert_eq!(batch.sample_indices().len(), batch.len());
            }
        }
    }

    #[test]
    fn blocks_respect_invariants() {
        let data = dataset();
        let batch = build_minibatch(&pools(&data, 2), 16, 2).unwrap();
        for (k, bl) in batch.blocks.iter().enumerate() {
            let dom = if k == 0 { Domain::Easy } else { Domain::Hard(k as u8) };
            assert_eq!(bl.positives.len(), 16);
            let ids: BTreeSet<_> = bl.singles.iter().map(|&i| data[i].identity).collect();
            assert_eq!(ids.len(), 16);
            assert!(bl.sample_indices().all(|i| data[i].domain == dom));
        }
        let rows = batch.block_rows(1);
        assert_eq!(rows.pairs[0], (48, 49));
        assert_eq!(rows.singles[0], 48 + 32);
        let order = batch.sample_indices();
        assert_eq!(order[rows.pairs[3].1], batch.blocks[1].positives[3].1);
        assert_eq!(order[rows.singles[5]], batch.blocks[1].singles[5]);
    }

    #[test]
    fn too_few_identities_for_singles() {
        let data = dataset();
        assert!(matches!(
            build_minibatch(&pools(&data, 1), 41, 0),
            Err(DdlError::InsufficientSamples(_))
        ));
    }

    #[test]
    fn positive_filter_drops_negative_similarities() {
        let s = |x: f64| [x, (1.0 - x * x).sqrt()];
        let e1 = [1.0, 0.0];
        let rows = [e1, s(0.9), e1, s(-0.1), e1, s(0.4)];
        let emb = Array2::from_shape_fn((6, 2), |(i, j)| rows[i][j]);
        let out = positive_similarities(emb.view(), &[(0, 1), (2, 3), (4, 5)]).unwrap();
        assert_eq!(out.pairs, vec![(0, 1), (4, 5)]);
        assert!((out.values[0] - 0.9).abs() < 1e-15);
        assert!((out.values[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn identical_pair_contributes_one() {
        let emb = array![[0.6, 0.8], [0.6, 0.8]];
        assert_eq!(positive_similarities(emb.view(), &[(0, 1)]).unwrap().values, vec![1.0]);
    }

    #[test]
    fn all_filtered_is_degenerate() {
        let emb = array![[1.0, 0.0], [-1.0, 0.0]];
        assert!(matches!(
            positive_similarities(emb.view(), &[(0, 1)]),
            Err(DdlError::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn two_singles_share_their_similarity() {
        let emb = array![[1.0, 0.0], [0.6, 0.8]];
        let hard = hard_negative_similarities(emb.view(), &[0, 1]).unwrap();
        assert_eq!(hard.values, vec![0.6, 0.6]);
        let rand = random_negative_similarities(emb.view(), &[0, 1], 3).unwrap();
        assert_eq!(rand, hard);
    }

    #[test]
    fn orthogonal_singles_mine_zero() {
        let emb = Array2::<f64>::eye(4);
        let hard = hard_negative_similarities(emb.view(), &[0, 1, 2, 3]).unwrap();
        assert_eq!(hard.values, vec![0.0; 4]);
        // ties resolve to the smallest partner index
        assert_eq!(hard.pairs, vec![(0, 1), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn mining_needs_two_singles() {
        let emb = array![[1.0, 0.0]];
        assert!(hard_negative_similarities(emb.view(), &[0]).is_err());
        assert!(random_negative_similarities(emb.view(), &[0], 0).is_err());
    }

    #[test]
    fn random_mining_is_seeded_and_from_pairwise_set() {
        let data = dataset();
        let emb = crate::synth::feature_matrix(data.iter().take(10), 8);
        let singles: Vec<usize> = (0..10).collect();
        let a = random_negative_similarities(emb.view(), &singles, 4).unwrap();
        assert_eq!(a, random_negative_similarities(emb.view(), &singles, 4).unwrap());
        for (&v, &(i, j)) in a.values.iter().zip(&a.pairs) {
            assert_ne!(i, j);
            assert_eq!(v, clamped_dot(emb.row(i), emb.row(j)));
        }
    }
}
