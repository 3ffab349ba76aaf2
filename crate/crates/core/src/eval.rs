//! Deferral curves, their summary metrics and paired significance tests.
//!
//! A sweep routes every test query once per λ and records the mean normalized
//! cost and mean quality at each λ. AUDC integrates quality over the cost axis
//! rescaled by `C_max`, the normalized cost of always calling the most expensive
//! expert (1, or 0 for a constant-cost pool). The curve is extended flat to both
//! ends of `[0, 1]`, so a curve with a single distinct cost has AUDC equal to its
//! quality.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::linspace;
use crate::loss::Threshold;
use crate::router::{PolicyKind, RoutingDecision, RoutingPolicy};

pub const DEFAULT_GRID_POINTS: usize = 50;
pub const DEFAULT_LAMBDA_MAX: f64 = 2.0;
pub const MIN_RESAMPLES: usize = 100;

/// `points` evenly spaced values over `[0, lambda_max]`.
pub fn lambda_grid(points: usize, lambda_max: f64) -> Vec<f64> {
    linspace(0.0, lambda_max, points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurvePoint {
    pub lambda: f64,
    pub mean_cost: f64,
    pub mean_quality: f64,
}

/// One point per swept λ, in grid order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeferralCurve {
    pub points: Vec<CurvePoint>,
}

impl DeferralCurve {
    /// `(cost, quality)` sorted by cost with duplicate costs collapsed to their best quality.
    pub fn frontier(&self) -> Vec<(f64, f64)> {
        dedup_max(self.points.iter().map(|p| (p.mean_cost, p.mean_quality)).collect())
    }

    pub fn audc(&self, c_max: f64) -> f64 {
        audc(&self.points.iter().map(|p| (p.mean_cost, p.mean_quality)).collect::<Vec<_>>(), c_max)
    }

    pub fn peak(&self) -> f64 {
        peak(&self.points.iter().map(|p| p.mean_quality).collect::<Vec<_>>())
    }
}

fn dedup_max(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, kept| later.0 == kept.0);
    pts
}

/// Area under `(cost, quality)` points over the cost axis rescaled by `c_max`.
///
/// Costs are divided by `c_max` (left alone when it is 0) and clipped to
/// `[0, 1]`; duplicate costs keep their best quality; the curve is held flat
/// out to both ends before the trapezoid rule is applied. Order of the input
/// does not matter. An empty curve has area 0.
pub fn audc(points: &[(f64, f64)], c_max: f64) -> f64 {
    let scale = if c_max > 0.0 { c_max } else { 1.0 };
    let pts = dedup_max(points.iter().map(|&(c, q)| ((c / scale).clamp(0.0, 1.0), q)).collect());
    let (Some(&first), Some(&last)) = (pts.first(), pts.last()) else {
        return 0.0;
    };
    if pts.len() == 1 {
        return first.1;
    }
    let mut area = first.0 * first.1 + (1.0 - last.0) * last.1;
    for w in pts.windows(2) {
        area += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    area
}

pub fn peak(qualities: &[f64]) -> f64 {
    qualities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Mean test quality and normalized cost of one expert used for every query.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertStats {
    pub mean_quality: f64,
    pub cost: f64,
}

pub fn pool_stats(quality: &[&[f64]], costs: &[f64]) -> Result<Vec<ExpertStats>> {
    if quality.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok((0..costs.len())
        .map(|m| ExpertStats {
            mean_quality: quality.iter().map(|row| row[m]).sum::<f64>() / quality.len() as f64,
            cost: costs[m],
        })
        .collect())
}

/// The best single expert: highest mean quality, ties to the cheaper, then lower index.
pub fn best_single(stats: &[ExpertStats]) -> Option<usize> {
    (0..stats.len()).max_by(|&a, &b| {
        stats[a]
            .mean_quality
            .total_cmp(&stats[b].mean_quality)
            .then(stats[b].cost.total_cmp(&stats[a].cost))
            .then(b.cmp(&a))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum QncFlag {
    Matched,
    /// The curve never reaches the best single expert's quality.
    Unmatched,
    /// The best single expert is free, so relative cost is undefined.
    DegenerateCost,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qnc {
    /// Infinite when flagged [`QncFlag::DegenerateCost`].
    pub value: f64,
    pub flag: QncFlag,
}

/// Absolute slack when comparing mean qualities against the best single expert.
const QUALITY_MATCH_EPS: f64 = 1e-12;

/// Smallest curve cost, relative to the best single expert's, that reaches that
/// expert's quality. Unmatched curves report `c_max / c*`.
pub fn qnc(points: &[(f64, f64)], stats: &[ExpertStats], c_max: f64) -> Qnc {
    let Some(best) = best_single(stats) else {
        return Qnc { value: f64::INFINITY, flag: QncFlag::DegenerateCost };
    };
    let (q_star, c_star) = (stats[best].mean_quality, stats[best].cost);
    if !(c_star > 0.0) {
        return Qnc { value: f64::INFINITY, flag: QncFlag::DegenerateCost };
    }
    let matched = points
        .iter()
        .filter(|p| p.1 >= q_star - QUALITY_MATCH_EPS)
        .map(|p| p.0)
        .fold(f64::INFINITY, f64::min);
    if matched.is_finite() {
        Qnc { value: matched / c_star, flag: QncFlag::Matched }
    } else {
        Qnc { value: c_max / c_star, flag: QncFlag::Unmatched }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub decision: RoutingDecision,
    pub quality: f64,
    pub correct: bool,
}

/// Every decision of a sweep, indexed `[λ][query]`, plus the curve they trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub policy: PolicyKind,
    pub lambdas: Vec<f64>,
    pub outcomes: Vec<Vec<Outcome>>,
    pub curve: DeferralCurve,
}

impl SweepResult {
    pub fn num_queries(&self) -> usize {
        self.outcomes.first().map_or(0, Vec::len)
    }

    fn cost_at(&self, l: usize, q: usize) -> f64 {
        self.outcomes[l][q].decision.cost
    }

    fn quality_at(&self, l: usize, q: usize) -> f64 {
        self.outcomes[l][q].quality
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("lambda grid must be finite, >= 0 and strictly increasing".into()));
    }
    Ok(())
}

/// Routes every query at every λ; online policies see each outcome before the
/// next query.
pub fn sweep<P: RoutingPolicy + ?Sized>(
    policy: &mut P,
    quality: &[&[f64]],
    threshold: Threshold,
    grid: &[f64],
) -> Result<SweepResult> {
    if quality.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    check_grid(grid)?;
    let n = quality.len() as f64;
    let mut outcomes = Vec::with_capacity(grid.len());
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in grid {
        policy.begin_pass(lambda);
        let mut row = Vec::with_capacity(quality.len());
        for (q, qrow) in quality.iter().enumerate() {
            let decision = policy.route(q, lambda);
            let observed = qrow[decision.expert];
            policy.observe(&decision, qrow);
            row.push(Outcome { decision, quality: observed, correct: threshold.is_correct(qrow, decision.expert) });
        }
        points.push(CurvePoint {
            lambda,
            mean_cost: row.iter().map(|o| o.decision.cost).sum::<f64>() / n,
            mean_quality: row.iter().map(|o| o.quality).sum::<f64>() / n,
        });
        outcomes.push(row);
    }
    Ok(SweepResult { policy: policy.kind(), lambdas: grid.to_vec(), outcomes, curve: DeferralCurve { points } })
}

/// AUDC of a sweep re-aggregated with per-query multiplicities.
fn weighted_audc(s: &SweepResult, counts: &[u32], total: f64, c_max: f64) -> f64 {
    let pts: Vec<(f64, f64)> = (0..s.lambdas.len())
        .map(|l| {
            let (mut c, mut q) = (0.0, 0.0);
            for (i, &w) in counts.iter().enumerate() {
                if w > 0 {
                    c += w as f64 * s.cost_at(l, i);
                    q += w as f64 * s.quality_at(l, i);
                }
            }
            (c / total, q / total)
        })
        .collect();
    audc(&pts, c_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// `AUDC(A) − AUDC(B)` on the full test set.
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// One-sided p-value for `Δ > 0`, counting resampled ties as half.
    pub p_one_sided: f64,
    pub resampled: Vec<f64>,
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_pair(a: &SweepResult, b: &SweepResult) -> Result<()> {
    if a.num_queries() == 0 {
        return Err(Error::EmptyTestSet);
    }
    if a.num_queries() != b.num_queries() {
        return Err(Error::DimensionMismatch {
            context: "paired test queries",
            expected: a.num_queries(),
            found: b.num_queries(),
        });
    }
    if a.lambdas != b.lambdas {
        return Err(Error::InvalidConfig("paired sweeps must share one lambda grid".into()));
    }
    Ok(())
}

/// Bootstrap over caller-supplied resamples of query indices.
pub fn paired_bootstrap_from_indices(
    a: &SweepResult,
    b: &SweepResult,
    c_max: f64,
    resamples: &[Vec<usize>],
) -> Result<BootstrapResult> {
    check_pair(a, b)?;
    if resamples.len() < MIN_RESAMPLES {
        return Err(Error::TooFewResamples(resamples.len()));
    }
    let n = a.num_queries();
    let delta = a.curve.audc(c_max) - b.curve.audc(c_max);
    let mut counts = alloc::vec![0u32; n];
    let mut resampled = Vec::with_capacity(resamples.len());
    for idx in resamples {
        counts.iter_mut().for_each(|c| *c = 0);
        for &i in idx {
            counts[i] += 1;
        }
        let total = idx.len() as f64;
        resampled.push(weighted_audc(a, &counts, total, c_max) - weighted_audc(b, &counts, total, c_max));
    }
    let below = resampled.iter().filter(|d| **d < 0.0).count() as f64;
    let ties = resampled.iter().filter(|d| **d == 0.0).count() as f64;
    let p_one_sided = (below + 0.5 * ties) / resampled.len() as f64;
    let mut sorted = resampled.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        delta,
        ci_low: percentile(&sorted, 0.025),
        ci_high: percentile(&sorted, 0.975),
        p_one_sided,
        resampled,
    })
}

/// The query indices drawn for resample `r` under `seed`.
pub fn resample_indices(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Paired bootstrap of the AUDC difference with `n_resamples` seeded resamples.
pub fn paired_bootstrap_audc(
    a: &SweepResult,
    b: &SweepResult,
    c_max: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::TooFewResamples(n_resamples));
    }
    check_pair(a, b)?;
    let n = a.num_queries();
    let resamples: Vec<Vec<usize>> = (0..n_resamples).map(|r| resample_indices(n, seed, r)).collect();
    paired_bootstrap_from_indices(a, b, c_max, &resamples)
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail_half(n: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_choose = |i: u64| libm::lgamma(n as f64 + 1.0) - libm::lgamma(i as f64 + 1.0) - libm::lgamma((n - i) as f64 + 1.0);
    let logs: Vec<f64> = (k..=n).map(ln_choose).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| libm::exp(l - top)).sum();
    libm::exp(top + libm::log(sum) - n as f64 * core::f64::consts::LN_2).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McNemar {
    pub budget: f64,
    /// Grid positions of each policy's operating point.
    pub point_a: usize,
    pub point_b: usize,
    /// A correct, B wrong.
    pub n10: u64,
    /// B correct, A wrong.
    pub n01: u64,
    pub p_exact: f64,
    /// No discordant pairs; `p_exact` is reported as 1.
    pub undefined: bool,
}

/// Exact one-sided McNemar p-value from discordant counts.
pub fn mcnemar_exact(n10: u64, n01: u64) -> (f64, bool) {
    if n10 + n01 == 0 {
        (1.0, true)
    } else {
        (binomial_upper_tail_half(n10 + n01, n10), false)
    }
}

/// Median of both curves' cost values together.
pub fn median_combined_cost(a: &DeferralCurve, b: &DeferralCurve) -> f64 {
    let mut all: Vec<f64> = a.points.iter().chain(&b.points).map(|p| p.mean_cost).collect();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    }
}

/// Grid position whose mean cost is nearest `budget`, ties toward cheaper.
pub fn operating_point(curve: &DeferralCurve, budget: f64) -> usize {
    (0..curve.points.len())
        .min_by(|&i, &j| {
            let (pi, pj) = (&curve.points[i], &curve.points[j]);
            libm::fabs(pi.mean_cost - budget)
                .total_cmp(&libm::fabs(pj.mean_cost - budget))
                .then(pi.mean_cost.total_cmp(&pj.mean_cost))
                .then(i.cmp(&j))
        })
        .expect("empty curve")
}

/// McNemar's test between two policies at one matched budget, by default the
/// median of the combined cost grids.
pub fn mcnemar_matched_budget(a: &SweepResult, b: &SweepResult, budget: Option<f64>) -> Result<McNemar> {
    check_pair(a, b)?;
    let budget = budget.unwrap_or_else(|| median_combined_cost(&a.curve, &b.curve));
    let (pa, pb) = (operating_point(&a.curve, budget), operating_point(&b.curve, budget));
    let (mut n10, mut n01) = (0, 0);
    for (oa, ob) in a.outcomes[pa].iter().zip(&b.outcomes[pb]) {
        match (oa.correct, ob.correct) {
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
            _ => {}
        }
    }
    let (p_exact, undefined) = mcnemar_exact(n10, n01);
    Ok(McNemar { budget, point_a: pa, point_b: pb, n10, n01, p_exact, undefined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{OraclePolicy, RandomPolicy, SinglePolicy};
    use alloc::vec;

    #[test]
    fn audc_fixtures() {
        assert!((audc(&[(0.0, 0.5), (1.0, 1.0)], 1.0) - 0.75).abs() < 1e-12);
        assert!((audc(&[(0.3, 0.7)], 1.0) - 0.7).abs() < 1e-12);
        assert!((audc(&[(0.0, 0.7), (0.4, 0.7), (1.0, 0.7)], 1.0) - 0.7).abs() < 1e-12);
        // Flat extension both ways: 0.2·0.4 + 0.5·0.6·(0.4+0.8) + 0.2·0.8
        assert!((audc(&[(0.2, 0.4), (0.8, 0.8)], 1.0) - 0.6).abs() < 1e-12);
        // Clipping above c_max.
        assert!((audc(&[(0.0, 0.5), (0.5, 1.0), (0.9, 1.0)], 0.5) - 0.75).abs() < 1e-12);
        assert_eq!(audc(&[], 1.0), 0.0);
    }

    #[test]
    fn audc_dedups_duplicate_costs() {
        // Keeps (0.5, 0.9) over (0.5, 0.3).
        let pts = [(0.5, 0.3), (0.0, 0.2), (0.5, 0.9), (1.0, 0.6)];
        let by_hand = 0.5 * 0.5 * (0.2 + 0.9) + 0.5 * 0.5 * (0.9 + 0.6);
        assert!((audc(&pts, 1.0) - by_hand).abs() < 1e-12);
        let mut rev = pts;
        rev.reverse();
        assert_eq!(audc(&rev, 1.0), audc(&pts, 1.0));
    }

    #[test]
    fn qnc_fixtures() {
        let stats = [ExpertStats { mean_quality: 0.6, cost: 0.5 }, ExpertStats { mean_quality: 0.8, cost: 2.0 }];
        let q = qnc(&[(0.4, 0.7), (1.0, 0.8), (1.5, 0.85)], &stats, 2.0);
        assert_eq!(q, Qnc { value: 0.5, flag: QncFlag::Matched });
        let q = qnc(&[(0.6, 0.8)], &stats, 2.0);
        assert!((q.value - 0.3).abs() < 1e-15);
        assert_eq!(qnc(&[(0.4, 0.7)], &stats, 2.0), Qnc { value: 1.0, flag: QncFlag::Unmatched });
        let free = [ExpertStats { mean_quality: 0.9, cost: 0.0 }];
        assert_eq!(qnc(&[(0.0, 0.9)], &free, 1.0).flag, QncFlag::DegenerateCost);
    }

    #[test]
    fn peak_scan() {
        assert_eq!(peak(&[0.4, 0.6]), 0.6);
        assert_eq!(peak(&[0.3, 0.3, 0.3]), 0.3);
    }

    #[test]
    fn mcnemar_tails() {
        assert!((mcnemar_exact(5, 5).0 - 0.623046875).abs() < 1e-12);
        assert!((mcnemar_exact(3, 0).0 - 0.125).abs() < 1e-14);
        assert_eq!(mcnemar_exact(0, 0), (1.0, true));
        assert_eq!(binomial_upper_tail_half(4, 0), 1.0);
    }

    fn rows() -> Vec<Vec<f64>> {
        (0..40).map(|i| if i % 3 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect()
    }

    #[test]
    fn oracle_sweep_is_flat() {
        let rows = rows();
        let quality: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let costs = [0.0, 1.0];
        let mut p = OraclePolicy { quality: quality.clone(), costs: &costs, threshold: Threshold::default() };
        let s = sweep(&mut p, &quality, Threshold::default(), &lambda_grid(5, 2.0)).unwrap();
        assert_eq!(s.curve.frontier().len(), 1);
        assert_eq!(s.curve.peak(), 1.0);
        assert!(sweep(&mut p, &[], Threshold::default(), &[0.0]).is_err());
        assert!(sweep(&mut p, &quality, Threshold::default(), &[0.5, 0.5]).is_err());
    }

    #[test]
    fn best_single_policy_has_unit_qnc() {
        let rows = rows();
        let quality: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let costs = [0.25, 1.0];
        let stats = pool_stats(&quality, &costs).unwrap();
        let best = best_single(&stats).unwrap();
        assert_eq!(best, 1);
        let mut p = SinglePolicy { expert: best, costs: &costs };
        let s = sweep(&mut p, &quality, Threshold::default(), &[0.0, 1.0]).unwrap();
        let pts = s.curve.frontier();
        assert_eq!(qnc(&pts, &stats, 1.0), Qnc { value: 1.0, flag: QncFlag::Matched });
    }

    #[test]
    fn identical_policies_bootstrap_to_zero() {
        let rows = rows();
        let quality: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let costs = [0.0, 1.0];
        let grid = lambda_grid(3, 1.0);
        let a = sweep(&mut RandomPolicy::new(&costs, 1), &quality, Threshold::default(), &grid).unwrap();
        let r = paired_bootstrap_audc(&a, &a, 1.0, 200, 9).unwrap();
        assert_eq!((r.delta, r.ci_low, r.ci_high, r.p_one_sided), (0.0, 0.0, 0.0, 0.5));
        assert_eq!(paired_bootstrap_audc(&a, &a, 1.0, 99, 9).unwrap_err(), Error::TooFewResamples(99));
        assert_eq!(r, paired_bootstrap_audc(&a, &a, 1.0, 200, 9).unwrap());
    }

    #[test]
    fn matched_budget_picks_nearest_cheaper_point() {
        let c = |costs: &[f64]| DeferralCurve {
            points: costs.iter().map(|&mean_cost| CurvePoint { lambda: 0.0, mean_cost, mean_quality: 0.0 }).collect(),
        };
        assert_eq!(operating_point(&c(&[0.8, 0.4, 0.6]), 0.5), 1);
        assert_eq!(median_combined_cost(&c(&[0.1, 0.9]), &c(&[0.2, 0.3])), 0.25);
    }
}
