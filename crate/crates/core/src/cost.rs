//! Cost normalization and quantile cost bands.
//!
//! Raw costs are min-max scaled into `[0, 1]`. Bands are cut at the `k/K`
//! empirical quantiles of the normalized costs; expert `m` belongs to the band
//! whose half-open interval `[β_k, β_{k+1})` contains its cost, with the top band
//! closed at 1. Ties can leave bands empty; those are folded into their lower
//! neighbour so every surviving band has at least one expert. Each band gets a
//! temperature `τ_k = τ_min + α·c̄_k` from its mean cost.

use alloc::vec::Vec;

use crate::data::ExpertPool;
use crate::error::{Error, Result};

/// Normalized costs, one per pool expert.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostModel {
    pub cost: Vec<f64>,
    pub raw_min: f64,
    pub raw_max: f64,
}

impl CostModel {
    /// Min-max scaling of `raw`. A constant vector maps to all zeros.
    pub fn from_raw(raw: &[f64]) -> Self {
        let raw_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let raw_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = raw_max - raw_min;
        let cost = raw
            .iter()
            .map(|&c| if span > 0.0 { (c - raw_min) / span } else { 0.0 })
            .collect();
        Self { cost, raw_min, raw_max }
    }

    pub fn len(&self) -> usize {
        self.cost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cost.is_empty()
    }

    /// Largest normalized cost: 1, or 0 for a constant-cost pool.
    pub fn max(&self) -> f64 {
        self.cost.iter().copied().fold(0.0, f64::max)
    }

    /// Maps a normalized cost back to raw units.
    pub fn to_raw(&self, normalized: f64) -> f64 {
        self.raw_min + normalized * (self.raw_max - self.raw_min)
    }
}

pub fn normalize_costs(pool: &ExpertPool) -> CostModel {
    CostModel::from_raw(&pool.raw_costs())
}

/// Quantile cost bands with per-band temperatures.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BandPartition {
    /// `β_0 = 0 < … < β_K = 1` after compaction (interior edges may coincide with 1).
    pub edges: Vec<f64>,
    /// Band index per expert, in pool order.
    pub band_of: Vec<usize>,
    pub mean_cost: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl BandPartition {
    pub fn num_bands(&self) -> usize {
        self.mean_cost.len()
    }

    /// Experts of band `k`, in pool order.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.band_of.iter().enumerate().filter(|(_, &b)| b == k).map(|(m, _)| m).collect()
    }
}

/// Index into the sorted costs used as the `k/K` band edge.
///
/// The lower empirical quantile at rank `⌊k·M/K⌋`, which makes a cost vector
/// without ties split into chunks of `M/K` experts.
fn quantile_rank(k: usize, bands: usize, m: usize) -> usize {
    (k * m / bands).min(m - 1)
}

pub fn partition_bands(costs: &CostModel, bands: usize, tau_min: f64, alpha: f64) -> Result<BandPartition> {
    let m = costs.len();
    if bands == 0 {
        return Err(Error::InvalidConfig("number of cost bands must be at least 1".into()));
    }
    if bands > m {
        return Err(Error::TooManyBands { bands, experts: m });
    }
    if !(tau_min >= 0.0 && alpha >= 0.0 && tau_min.is_finite() && alpha.is_finite()) {
        return Err(Error::InvalidConfig("tau_min and alpha must be finite and >= 0".into()));
    }

    let mut sorted = costs.cost.clone();
    sorted.sort_by(f64::total_cmp);
    let mut raw_edges = Vec::with_capacity(bands + 1);
    raw_edges.push(0.0);
    for k in 1..bands {
        raw_edges.push(sorted[quantile_rank(k, bands, m)]);
    }
    raw_edges.push(1.0);

    // Largest k with β_k ≤ c: the half-open band containing c, or the top band at c = 1.
    let raw_band = |c: f64| (0..bands).rev().find(|&k| raw_edges[k] <= c).unwrap_or(0);
    let raw_of: Vec<usize> = costs.cost.iter().map(|&c| raw_band(c)).collect();

    let mut occupied = alloc::vec![false; bands];
    for &b in &raw_of {
        occupied[b] = true;
    }
    let mut compact = alloc::vec![usize::MAX; bands];
    let mut edges = alloc::vec![0.0];
    let mut next = 0;
    for k in 0..bands {
        if occupied[k] {
            if next > 0 {
                edges.push(raw_edges[k]);
            }
            compact[k] = next;
            next += 1;
        }
    }
    edges.push(1.0);

    let band_of: Vec<usize> = raw_of.iter().map(|&b| compact[b]).collect();
    let mut sum = alloc::vec![0.0; next];
    let mut count = alloc::vec![0usize; next];
    for (&b, &c) in band_of.iter().zip(&costs.cost) {
        sum[b] += c;
        count[b] += 1;
    }
    let mean_cost: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let temperature: Vec<f64> = mean_cost.iter().map(|c| tau_min + alpha * c).collect();
    if let Some(t) = temperature.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidConfig(alloc::format!(
            "band temperature {t} is not positive; raise tau_min"
        )));
    }
    Ok(BandPartition { edges, band_of, mean_cost, temperature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn min_max_fixtures() {
        assert_eq!(CostModel::from_raw(&[2.0, 7.0]).cost, [0.0, 1.0]);
        assert_eq!(CostModel::from_raw(&[5.0, 5.0, 5.0]).cost, [0.0, 0.0, 0.0]);
        let c = CostModel::from_raw(&[1.0, 2.0, 4.0]).cost;
        assert_eq!(c[0], 0.0);
        assert!((c[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[2], 1.0);
    }

    #[test]
    fn single_band() {
        let p = partition_bands(&CostModel::from_raw(&[0.0, 1.0]), 1, 0.05, 0.25).unwrap();
        assert_eq!(p.edges, [0.0, 1.0]);
        assert_eq!(p.band_of, [0, 0]);
        assert_eq!(p.mean_cost, [0.5]);
        assert_eq!(p.temperature, [0.05 + 0.5 * 0.25]);
    }

    #[test]
    fn default_temperature() {
        // τ_min = 0.05, α = 0.25 and a band mean of 0.5
        let p = partition_bands(&CostModel::from_raw(&[0.0, 1.0]), 1, 0.05, 0.25).unwrap();
        assert!((p.temperature[0] - 0.175).abs() < 1e-15);
    }

    #[test]
    fn quintiles_match_sort_and_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 10.0).collect();
        let costs = CostModel::from_raw(&raw);
        let p = partition_bands(&costs, 5, 0.05, 0.25).unwrap();

        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| costs.cost[a].total_cmp(&costs.cost[b]));
        for (chunk, members) in order.chunks(4).enumerate() {
            let mut expected = members.to_vec();
            expected.sort_unstable();
            assert_eq!(p.members(chunk), expected);
            let mean = members.iter().map(|&m| costs.cost[m]).sum::<f64>() / 4.0;
            assert!((p.mean_cost[chunk] - mean).abs() < 1e-15);
        }
        assert!(p.mean_cost.windows(2).all(|w| w[0] < w[1]));
        assert!(p.temperature.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_leave_no_empty_band() {
        // Ranks 1 and 2 of the sorted costs are both 1.0, so raw band 1 is empty.
        let p = partition_bands(&CostModel::from_raw(&[0.0, 1.0, 1.0]), 3, 0.05, 0.25).unwrap();
        assert_eq!(p.num_bands(), 2);
        assert_eq!(p.band_of, [0, 1, 1]);
        assert_eq!(p.edges, [0.0, 1.0, 1.0]);

        let flat = partition_bands(&CostModel::from_raw(&[3.0, 3.0, 3.0, 3.0]), 4, 0.05, 0.25).unwrap();
        assert_eq!(flat.num_bands(), 1);
        assert_eq!(flat.band_of, [0, 0, 0, 0]);
        assert_eq!(flat.temperature, [0.05]);
    }

    #[test]
    fn errors() {
        let c = CostModel::from_raw(&[0.0, 1.0]);
        assert_eq!(partition_bands(&c, 3, 0.05, 0.25).unwrap_err(), Error::TooManyBands { bands: 3, experts: 2 });
        assert!(matches!(partition_bands(&c, 2, 0.0, 0.25), Err(Error::InvalidConfig(_))));
    }

    proptest::proptest! {
        #[test]
        fn partition_invariants(raw in proptest::collection::vec(0.0f64..100.0, 1..40), k in 1usize..8, alpha in 0.0f64..1.0) {
            let costs = CostModel::from_raw(&raw);
            let k = k.min(raw.len());
            let p = partition_bands(&costs, k, 0.05, alpha).unwrap();
            let again = partition_bands(&costs, k, 0.05, alpha).unwrap();
            proptest::prop_assert_eq!(&p, &again);
            proptest::prop_assert_eq!(p.edges.len(), p.num_bands() + 1);
            for b in 0..p.num_bands() {
                proptest::prop_assert!(!p.members(b).is_empty());
                proptest::prop_assert_eq!(p.temperature[b], 0.05 + alpha * p.mean_cost[b]);
            }
            proptest::prop_assert!(p.mean_cost.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(p.temperature.windows(2).all(|w| w[0] <= w[1]));
            for (m, &b) in p.band_of.iter().enumerate() {
                let c = costs.cost[m];
                let top = b + 1 == p.num_bands();
                proptest::prop_assert!(p.edges[b] <= c && (c < p.edges[b + 1] || top));
            }
            if k == 1 {
                proptest::prop_assert_eq!(p.num_bands(), 1);
            }
        }
    }

    #[test]
    fn normalized_order_matches_raw_order() {
        let raw = vec![3.0, 1.0, 2.0];
        let c = CostModel::from_raw(&raw);
        assert!(c.cost[1] < c.cost[2] && c.cost[2] < c.cost[0]);
        assert_eq!(c.max(), 1.0);
        assert_eq!(c.to_raw(0.5), 2.0);
    }
}
