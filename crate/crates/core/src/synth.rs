//! Seeded synthetic pools with planted structure.
//!
//! Queries come from `C` clusters with Gaussian centroids in the embedding
//! space. Each expert succeeds on a query with a per-(cluster, expert)
//! probability, and its descriptor is planted as the competence-weighted sum of
//! per-cluster directions plus a little expert-specific jitter, so the experts
//! that solve a cluster sit close to each other on the sphere. Probe data whose
//! fingerprints reproduce the planted descriptors is generated alongside, so the
//! descriptor pipeline can be run end to end as well.
//!
//! The default fixture has 4 clusters and 12 experts in three cost tiers. Cheap
//! experts are specialists, mid-tier experts cover two clusters and the
//! expensive tier covers everything.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DescriptorKind, Expert, ExpertPool, LogitProbeTensor, PerplexityTable, QueryRecord, Split};
use crate::descriptors::{Descriptor, TokenBasis};
use crate::error::{Error, Result};
use crate::linalg::normalized;

/// Weight of the expert-specific jitter in a planted descriptor.
const JITTER: f64 = 0.3;
/// First token id of the synthetic logit vocabulary.
const TOKEN_OFFSET: u32 = 100;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub n_experts: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub embed_dim: usize,
    pub descriptor_dim: usize,
    pub noise_sigma: f64,
    /// Raw cost per expert.
    pub costs: Vec<f64>,
    /// Success probability, `competence[cluster][expert]`.
    pub competence: Vec<Vec<f64>>,
    pub descriptor_kind: DescriptorKind,
    /// Probe prompts and decoding steps of the generated logit tensor.
    pub n_probes: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::tiered(4, 12, &[1.0, 4.0, 16.0], false)
    }
}

impl SynthConfig {
    /// Experts split evenly over the cost tiers. Tier `t` covers
    /// `1 + t·(C−1)/(T−1)` consecutive clusters (wrapping), succeeding there
    /// with probability 0.95 and elsewhere with 0.05. With `anti_correlated`
    /// the tier costs are reversed, making the generalists cheapest.
    pub fn tiered(n_clusters: usize, n_experts: usize, tier_costs: &[f64], anti_correlated: bool) -> Self {
        let tiers = tier_costs.len().max(1);
        let tier_of = |e: usize| e * tiers / n_experts.max(1);
        let span = |t: usize| if tiers == 1 { n_clusters } else { 1 + t * n_clusters.saturating_sub(1) / (tiers - 1) };
        let per_tier = |t: usize| (0..n_experts).filter(|&e| tier_of(e) == t).count().max(1);
        let first_of = |t: usize| (0..n_experts).position(|e| tier_of(e) == t).unwrap_or(0);
        let competence = (0..n_clusters)
            .map(|c| {
                (0..n_experts)
                    .map(|e| {
                        let t = tier_of(e);
                        let start = (e - first_of(t)) * n_clusters / per_tier(t);
                        let covered = (0..span(t)).any(|s| (start + s) % n_clusters.max(1) == c);
                        if covered { 0.95 } else { 0.05 }
                    })
                    .collect()
            })
            .collect();
        let costs = (0..n_experts)
            .map(|e| {
                let t = tier_of(e);
                let cost_tier = if anti_correlated { tiers - 1 - t } else { t };
                tier_costs.get(cost_tier).copied().unwrap_or(1.0)
            })
            .collect();
        Self {
            n_clusters,
            n_experts,
            n_train: 3000,
            n_test: 1000,
            embed_dim: 32,
            descriptor_dim: 16,
            noise_sigma: 1.0,
            costs,
            competence,
            descriptor_kind: DescriptorKind::Logit,
            n_probes: 16,
            n_steps: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_clusters == 0 || self.n_experts == 0 {
            return bad("need at least one cluster and one expert".into());
        }
        if self.n_train + self.n_test == 0 {
            return bad("need at least one query".into());
        }
        if self.embed_dim == 0 || self.n_probes == 0 || self.n_steps == 0 {
            return bad("embed_dim, n_probes and n_steps must be positive".into());
        }
        if self.descriptor_dim < self.n_clusters.max(2) {
            return bad(format!("descriptor_dim must be at least max(2, n_clusters) = {}", self.n_clusters.max(2)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0".into());
        }
        if self.costs.len() != self.n_experts {
            return bad(format!("{} costs for {} experts", self.costs.len(), self.n_experts));
        }
        if self.competence.len() != self.n_clusters || self.competence.iter().any(|r| r.len() != self.n_experts) {
            return bad("competence must be n_clusters x n_experts".into());
        }
        if self.competence.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("competence entries must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthProbes {
    Logit { tensor: LogitProbeTensor, basis: TokenBasis },
    Perplexity(PerplexityTable),
}

/// What the generator knows that a router has to learn.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// Cluster of every query, in output order.
    pub cluster: Vec<usize>,
    /// Cheapest expert with competence ≥ 0.5 per cluster (ties to the lower index).
    pub cheapest_competent: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub pool: ExpertPool,
    pub descriptors: Vec<Descriptor>,
    /// Training queries first, then test queries.
    pub queries: Vec<QueryRecord>,
    pub truth: PlantedTruth,
    pub probes: SynthProbes,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    normalized(v).unwrap_or_else(|| {
        let mut e = alloc::vec![0.0; v.len()];
        e[0] = 1.0;
        e
    })
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Cluster directions and jitter in the geometry each descriptor kind can express:
/// non-negative disjoint blocks for logit footprints, zero-mean vectors for perplexity.
fn planted_vectors(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = cfg.descriptor_dim;
    let directions: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|c| match cfg.descriptor_kind {
            DescriptorKind::Logit => {
                let width = d / cfg.n_clusters;
                (0..d).map(|i| if i / width == c { 1.0 } else { 0.0 }).collect::<Vec<_>>()
            }
            DescriptorKind::Perplexity => centered(&gaussian(rng, d)),
        })
        .map(|v| unit(&v))
        .collect();
    (0..cfg.n_experts)
        .map(|e| {
            let g = gaussian(rng, d);
            let jitter = match cfg.descriptor_kind {
                DescriptorKind::Logit => unit(&g.iter().map(|x| libm::fabs(*x)).collect::<Vec<_>>()),
                DescriptorKind::Perplexity => unit(&centered(&g)),
            };
            let mut v: Vec<f64> = jitter.iter().map(|j| JITTER * j).collect();
            for (c, dir) in directions.iter().enumerate() {
                for (vi, di) in v.iter_mut().zip(dir) {
                    *vi += cfg.competence[c][e] * di;
                }
            }
            v
        })
        .collect()
}

fn logit_probes(cfg: &SynthConfig, ids: &[String], targets: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<SynthProbes> {
    let v = cfg.descriptor_dim;
    let mut probs = Vec::with_capacity(cfg.n_experts * cfg.n_probes * cfg.n_steps * v);
    for target in targets {
        let scale = 0.8 / target.iter().sum::<f64>();
        for _ in 0..cfg.n_probes * cfg.n_steps {
            for &t in target {
                probs.push(t * scale * rng.random_range(0.9..1.1));
            }
        }
    }
    let tokens: Vec<u32> = (0..v as u32).map(|t| TOKEN_OFFSET + t).collect();
    let tensor = LogitProbeTensor::new(ids.to_vec(), tokens.clone(), cfg.n_probes, cfg.n_steps, probs)?;
    Ok(SynthProbes::Logit { tensor, basis: TokenBasis::new(tokens)? })
}

fn perplexity_probes(cfg: &SynthConfig, ids: &[String], targets: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<SynthProbes> {
    let mut scores = Vec::with_capacity(cfg.n_experts * cfg.descriptor_dim);
    for target in targets {
        for &t in target {
            scores.push(2.0 + 0.5 * t + 0.01 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(SynthProbes::Perplexity(PerplexityTable::new(ids.to_vec(), cfg.descriptor_dim, scores)?))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let ids: Vec<String> = (0..cfg.n_experts).map(|e| format!("e{e:02}")).collect();
    let pool = ExpertPool::new(
        ids.iter()
            .zip(&cfg.costs)
            .map(|(id, &cost)| Expert { id: id.clone(), cost, kind: cfg.descriptor_kind })
            .collect(),
    )?;

    let raw = planted_vectors(cfg, &mut rng);
    let descriptors = ids
        .iter()
        .zip(&raw)
        .map(|(id, v)| Descriptor::from_raw(id.clone(), cfg.descriptor_kind, v))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = descriptors.iter().map(|d| d.vector.clone()).collect();

    let centroids: Vec<Vec<f64>> = (0..cfg.n_clusters).map(|_| gaussian(&mut rng, cfg.embed_dim)).collect();
    let total = cfg.n_train + cfg.n_test;
    let mut queries = Vec::with_capacity(total);
    let mut cluster = Vec::with_capacity(total);
    for i in 0..total {
        let c = rng.random_range(0..cfg.n_clusters);
        let embedding = centroids[c]
            .iter()
            .map(|&mu| mu + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let quality = (0..cfg.n_experts)
            .map(|e| if rng.random::<f64>() < cfg.competence[c][e] { 1.0 } else { 0.0 })
            .collect();
        let split = if i < cfg.n_train { Split::Train } else { Split::Test };
        queries.push(QueryRecord { id: format!("q{i:05}"), split, embedding, quality });
        cluster.push(c);
    }

    let cheapest_competent = (0..cfg.n_clusters)
        .map(|c| {
            (0..cfg.n_experts)
                .filter(|&e| cfg.competence[c][e] >= 0.5)
                .min_by(|&a, &b| cfg.costs[a].total_cmp(&cfg.costs[b]).then(a.cmp(&b)))
        })
        .collect();

    let probes = match cfg.descriptor_kind {
        DescriptorKind::Logit => logit_probes(cfg, &ids, &targets, &mut rng)?,
        DescriptorKind::Perplexity => perplexity_probes(cfg, &ids, &targets, &mut rng)?,
    };

    Ok(SynthData { pool, descriptors, queries, truth: PlantedTruth { cluster, cheapest_competent }, probes })
}
