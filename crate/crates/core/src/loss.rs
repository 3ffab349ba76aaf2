//! Cost-spectrum InfoNCE and its vanilla special case.
//!
//! For a query `q` with positives `P`, bands `B_k` with temperatures `τ_k` and
//! normalized costs `c`:
//!
//! ```text
//! ℓ = −(1/|K|) Σ_{k∈K} log [ Σ_{m∈P∩B_k} exp(qᵀe_m/τ_k) / Σ_{m'} exp((qᵀe_m' − γ c_m')/τ_k) ]
//! ```
//!
//! where `K` holds the bands containing at least one positive. The cost penalty
//! only enters the denominator. Exponentials are shifted by the per-band maximum
//! over numerator and denominator terms.

use alloc::vec::Vec;

use crate::cost::BandPartition;
use crate::data::QueryRecord;
use crate::error::{Error, Result};
use crate::index::FlatIndex;

/// Rule deciding which experts count as correct for a query.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", content = "value", rename_all = "lowercase"))]
pub enum Threshold {
    /// Correct iff `quality ≥ θ`.
    Absolute(f64),
    /// Correct iff `quality ≥ f · max(quality row)`; rows with maximum 0 have no
    /// correct expert.
    Relative(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Absolute(0.5)
    }
}

impl Threshold {
    pub fn validate(self) -> Result<Self> {
        let v = match self {
            Threshold::Absolute(v) | Threshold::Relative(v) => v,
        };
        if (0.0..=1.0).contains(&v) {
            Ok(self)
        } else {
            Err(Error::OutOfRange { context: "positive threshold".into(), value: v })
        }
    }

    /// The minimum quality counted as correct for this row, if any expert can be.
    pub fn cutoff(self, quality: &[f64]) -> Option<f64> {
        match self {
            Threshold::Absolute(t) => Some(t),
            Threshold::Relative(f) => {
                let max = quality.iter().copied().fold(0.0, f64::max);
                (max > 0.0).then_some(f * max)
            }
        }
    }

    pub fn is_correct(self, quality: &[f64], expert: usize) -> bool {
        self.cutoff(quality).is_some_and(|c| quality[expert] >= c)
    }
}

/// Correct experts per query, with the queries that have none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    pub sets: Vec<Vec<usize>>,
    /// Queries with an empty positive set; they contribute nothing to the loss.
    pub excluded: Vec<usize>,
}

impl PositiveSets {
    /// `P(i) ∩ B_k` for each band `k`.
    pub fn by_band(&self, query: usize, bands: &BandPartition) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); bands.num_bands()];
        for &m in &self.sets[query] {
            out[bands.band_of[m]].push(m);
        }
        out
    }

    pub fn is_excluded(&self, query: usize) -> bool {
        self.sets[query].is_empty()
    }
}

pub fn build_positives(queries: &[QueryRecord], threshold: Threshold) -> PositiveSets {
    let sets: Vec<Vec<usize>> = queries
        .iter()
        .map(|r| (0..r.quality.len()).filter(|&m| threshold.is_correct(&r.quality, m)).collect())
        .collect();
    let excluded = sets.iter().enumerate().filter(|(_, s)| s.is_empty()).map(|(i, _)| i).collect();
    PositiveSets { sets, excluded }
}

/// Per-query loss; adds `∂ℓ/∂q · scale` into `grad` when given.
fn query_term(
    q: &[f64],
    positives: &[usize],
    keys: &FlatIndex,
    costs: &[f64],
    bands: &BandPartition,
    gamma: f64,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let sims = keys.similarities(q).expect("query dimension checked by caller");
    let m_total = sims.len();
    let mut in_band: Vec<Vec<usize>> = alloc::vec![Vec::new(); bands.num_bands()];
    for &m in positives {
        in_band[bands.band_of[m]].push(m);
    }
    let active = in_band.iter().filter(|p| !p.is_empty()).count() as f64;

    let mut loss = 0.0;
    let mut d_sim = alloc::vec![0.0; m_total];
    let mut num_w = alloc::vec![0.0; m_total];
    let mut den_w = alloc::vec![0.0; m_total];
    for (k, pos) in in_band.iter().enumerate().filter(|(_, p)| !p.is_empty()) {
        let tau = bands.temperature[k];
        let shift = sims
            .iter()
            .zip(costs)
            .map(|(s, c)| (s - gamma * c) / tau)
            .chain(pos.iter().map(|&m| sims[m] / tau))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        for &m in pos {
            num_w[m] = libm::exp(sims[m] / tau - shift);
            num += num_w[m];
        }
        let mut den = 0.0;
        for m in 0..m_total {
            den_w[m] = libm::exp((sims[m] - gamma * costs[m]) / tau - shift);
            den += den_w[m];
        }
        loss -= libm::log(num) - libm::log(den);

        if grad.is_some() {
            let scale = 1.0 / (active * tau);
            for &m in pos {
                d_sim[m] -= scale * num_w[m] / num;
            }
            for m in 0..m_total {
                d_sim[m] += scale * den_w[m] / den;
            }
        }
    }
    if let Some((g, s)) = grad.as_mut() {
        for (m, ds) in d_sim.iter().enumerate() {
            if *ds != 0.0 {
                for (gj, kj) in g.iter_mut().zip(keys.key(m)) {
                    *gj += *s * ds * kj;
                }
            }
        }
    }
    loss / active
}

fn check_inputs<Q: AsRef<[f64]>>(
    queries: &[Q],
    positives: &[&[usize]],
    keys: &FlatIndex,
    costs: &[f64],
) -> Result<()> {
    if queries.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            context: "positive sets per batch",
            expected: queries.len(),
            found: positives.len(),
        });
    }
    if costs.len() != keys.len() {
        return Err(Error::DimensionMismatch { context: "costs per key", expected: keys.len(), found: costs.len() });
    }
    for (i, (q, p)) in queries.iter().zip(positives).enumerate() {
        if q.as_ref().len() != keys.dim() {
            return Err(Error::DimensionMismatch {
                context: "query vector",
                expected: keys.dim(),
                found: q.as_ref().len(),
            });
        }
        if p.is_empty() {
            return Err(Error::EmptyPositives { query: i });
        }
        if let Some(&m) = p.iter().find(|&&m| m >= keys.len()) {
            return Err(Error::InvalidK { k: m, len: keys.len() });
        }
    }
    Ok(())
}

/// Mean cost-spectrum InfoNCE over a batch of unit query vectors.
pub fn cs_infonce_loss<Q: AsRef<[f64]>>(
    queries: &[Q],
    positives: &[&[usize]],
    keys: &FlatIndex,
    costs: &[f64],
    bands: &BandPartition,
    gamma: f64,
) -> Result<f64> {
    check_inputs(queries, positives, keys, costs)?;
    let total: f64 = queries
        .iter()
        .zip(positives)
        .map(|(q, p)| query_term(q.as_ref(), p, keys, costs, bands, gamma, None))
        .sum();
    Ok(total / queries.len() as f64)
}

/// Batch loss together with `∂L/∂q_i` for every query in the batch.
pub fn cs_infonce_loss_and_grad<Q: AsRef<[f64]>>(
    queries: &[Q],
    positives: &[&[usize]],
    keys: &FlatIndex,
    costs: &[f64],
    bands: &BandPartition,
    gamma: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_inputs(queries, positives, keys, costs)?;
    let scale = 1.0 / queries.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(queries.len());
    for (q, p) in queries.iter().zip(positives) {
        let mut g = alloc::vec![0.0; keys.dim()];
        total += query_term(q.as_ref(), p, keys, costs, bands, gamma, Some((&mut g, scale)));
        grads.push(g);
    }
    Ok((total * scale, grads))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(values.map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Classic multi-positive InfoNCE with one temperature and no cost terms.
pub fn vanilla_infonce_loss<Q: AsRef<[f64]>>(
    queries: &[Q],
    positives: &[&[usize]],
    keys: &FlatIndex,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let costs = alloc::vec![0.0; keys.len()];
    check_inputs(queries, positives, keys, &costs)?;
    let mut total = 0.0;
    for (q, p) in queries.iter().zip(positives) {
        let logits: Vec<f64> = keys.similarities(q.as_ref())?.iter().map(|s| s / tau).collect();
        let pos = log_sum_exp(p.iter().map(|&m| logits[m]));
        let all = log_sum_exp(logits.iter().copied());
        total += all - pos;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{partition_bands, CostModel};
    use crate::data::{DescriptorKind, Split};
    use crate::descriptors::Descriptor;
    use alloc::string::String;
    use alloc::vec;

    fn record(quality: Vec<f64>) -> QueryRecord {
        QueryRecord { id: String::from("q"), split: Split::Train, embedding: vec![], quality }
    }

    #[test]
    fn positives_by_threshold() {
        let qs = [record(vec![1.0, 0.0, 1.0]), record(vec![0.0, 0.0, 0.0]), record(vec![0.9, 0.4, 0.95])];
        let p = build_positives(&qs[..2], Threshold::Absolute(0.5));
        assert_eq!(p.sets, [vec![0, 2], vec![]]);
        assert_eq!(p.excluded, [1]);
        let p = build_positives(&qs[2..], Threshold::Absolute(0.85));
        assert_eq!(p.sets, [vec![0, 2]]);
        // relative: 0.9 × 0.95 = 0.855
        let p = build_positives(&qs[1..], Threshold::Relative(0.9));
        assert_eq!(p.sets, [vec![], vec![0, 2]]);
    }

    #[test]
    fn band_positive_sets_partition_p() {
        let costs = CostModel::from_raw(&[1.0, 2.0, 3.0, 4.0]);
        let bands = partition_bands(&costs, 2, 0.05, 0.25).unwrap();
        let p = build_positives(&[record(vec![1.0, 0.0, 1.0, 1.0])], Threshold::Absolute(0.5));
        assert_eq!(p.by_band(0, &bands), [vec![0], vec![2, 3]]);
    }

    fn axis_keys(m: usize) -> FlatIndex {
        let descs: Vec<Descriptor> = (0..m)
            .map(|i| {
                let mut v = vec![0.0; m];
                v[i] = 1.0;
                Descriptor::new(alloc::format!("e{i}"), DescriptorKind::Logit, v).unwrap()
            })
            .collect();
        FlatIndex::build(&descs).unwrap()
    }

    #[test]
    fn uniform_similarities_give_log_m() {
        // q orthogonal to every key: all similarities equal (zero).
        let m = 5;
        let keys = {
            let descs: Vec<Descriptor> = (0..m)
                .map(|i| {
                    let mut v = vec![0.0; m + 1];
                    v[i] = 1.0;
                    Descriptor::new(alloc::format!("e{i}"), DescriptorKind::Logit, v).unwrap()
                })
                .collect();
            FlatIndex::build(&descs).unwrap()
        };
        let mut q = vec![0.0; m + 1];
        q[m] = 1.0;
        let costs = CostModel::from_raw(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let bands = partition_bands(&costs, 1, 0.1, 0.0).unwrap();
        let loss = cs_infonce_loss(&[q], &[&[2]], &keys, &costs.cost, &bands, 0.0).unwrap();
        assert!((loss - libm::log(m as f64)).abs() < 1e-14);
    }

    #[test]
    fn empty_positive_set_is_rejected() {
        let keys = axis_keys(3);
        let costs = [0.0, 0.5, 1.0];
        let bands = partition_bands(&CostModel::from_raw(&costs), 1, 0.1, 0.0).unwrap();
        let q = vec![1.0, 0.0, 0.0];
        assert_eq!(
            cs_infonce_loss(&[q], &[&[]], &keys, &costs, &bands, 0.2).unwrap_err(),
            Error::EmptyPositives { query: 0 }
        );
    }

    #[test]
    fn vanilla_decreases_with_positive_similarity() {
        let keys = axis_keys(3);
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let a = step as f64 / 10.0;
            let q = vec![a, libm::sqrt(1.0 - a * a) * 0.6, libm::sqrt(1.0 - a * a) * 0.8];
            let loss = vanilla_infonce_loss(&[q], &[&[0]], &keys, 0.1).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn large_temperature_flattens_band_term() {
        // One band, τ → ∞: the term tends to −log(|P|/M).
        let keys = axis_keys(4);
        let costs = [0.0, 0.2, 0.6, 1.0];
        let bands = partition_bands(&CostModel::from_raw(&costs), 1, 1e6, 0.0).unwrap();
        let q = vec![0.5, 0.5, 0.5, 0.5];
        let loss = cs_infonce_loss(&[q], &[&[1, 3]], &keys, &costs, &bands, 0.2).unwrap();
        assert!((loss + libm::log(2.0 / 4.0)).abs() < 1e-3);
    }
}
