//! Routing policies.
//!
//! CSCR retrieves the `k` nearest expert descriptors and picks the one with the
//! best `similarity − λ·cost`. The baselines share the [`RoutingPolicy`]
//! interface so the evaluation harness can sweep any of them over a λ grid.
//! Costs are always the normalized ones.

use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::encoder::MlpHead;
use crate::error::{Error, Result};
use crate::index::{FlatIndex, Neighbor};
use crate::loss::Threshold;

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PolicyKind {
    Cscr,
    Oracle,
    Random,
    ParetoRandom,
    Thompson,
    /// Always the same expert; used for per-expert pool statistics.
    Single,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Cscr => "cscr",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Random => "random",
            PolicyKind::ParetoRandom => "pareto_random",
            PolicyKind::Thompson => "thompson",
            PolicyKind::Single => "single",
        }
    }
}

/// How CSCR scores its retrieved candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScoreRule {
    /// `argmax(similarity − λ·cost)`.
    #[default]
    Penalized,
    /// `argmin(similarity + λ·cost)`, kept only for comparison. It prefers the
    /// least similar candidate and is not a sensible router.
    LiteralArgmin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingDecision {
    /// Pool index of the chosen expert.
    pub expert: usize,
    /// Query-descriptor similarity, for policies that look at it.
    pub similarity: Option<f64>,
    pub cost: f64,
    /// The value the policy optimized when choosing.
    pub score: f64,
    pub policy: PolicyKind,
}

/// Lower cost first, then lower pool index.
fn cheaper(costs: &[f64], a: usize, b: usize) -> Ordering {
    costs[a].total_cmp(&costs[b]).then(a.cmp(&b))
}

/// Picks among retrieved candidates. `neighbors` must be non-empty.
pub fn select_among(neighbors: &[Neighbor], costs: &[f64], lambda: f64, rule: ScoreRule) -> RoutingDecision {
    let score = |n: &Neighbor| match rule {
        ScoreRule::Penalized => n.similarity - lambda * costs[n.index],
        ScoreRule::LiteralArgmin => n.similarity + lambda * costs[n.index],
    };
    let better = |a: &Neighbor, b: &Neighbor| {
        let by_score = match rule {
            ScoreRule::Penalized => score(a).total_cmp(&score(b)),
            ScoreRule::LiteralArgmin => score(b).total_cmp(&score(a)),
        };
        by_score.then_with(|| cheaper(costs, b.index, a.index))
    };
    let best = neighbors.iter().max_by(|a, b| better(a, b)).expect("no candidates");
    RoutingDecision {
        expert: best.index,
        similarity: Some(best.similarity),
        cost: costs[best.index],
        score: score(best),
        policy: PolicyKind::Cscr,
    }
}

/// Full CSCR inference for one query embedding.
pub fn route_cscr(
    index: &FlatIndex,
    head: &MlpHead,
    x: &[f64],
    costs: &[f64],
    lambda: f64,
    k: usize,
    rule: ScoreRule,
) -> Result<RoutingDecision> {
    if costs.len() != index.len() {
        return Err(Error::DimensionMismatch { context: "costs per key", expected: index.len(), found: costs.len() });
    }
    let q = head.forward(x)?;
    let neighbors = index.top_k(q.as_slice(), k)?;
    Ok(select_among(&neighbors, costs, lambda, rule))
}

/// Cheapest correct expert in hindsight; when none is correct, the cheapest of
/// those with the highest quality.
pub fn route_oracle(quality: &[f64], costs: &[f64], threshold: Threshold) -> RoutingDecision {
    let correct = (0..quality.len()).filter(|&m| threshold.is_correct(quality, m));
    let expert = correct.min_by(|&a, &b| cheaper(costs, a, b)).unwrap_or_else(|| {
        let best = quality.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..quality.len())
            .filter(|&m| quality[m] == best)
            .min_by(|&a, &b| cheaper(costs, a, b))
            .expect("empty quality row")
    });
    RoutingDecision { expert, similarity: None, cost: costs[expert], score: -costs[expert], policy: PolicyKind::Oracle }
}

pub fn route_random<R: Rng + ?Sized>(costs: &[f64], rng: &mut R) -> RoutingDecision {
    let expert = rng.random_range(0..costs.len());
    RoutingDecision { expert, similarity: None, cost: costs[expert], score: 0.0, policy: PolicyKind::Random }
}

/// Experts not dominated in (lower cost, higher mean quality), sorted by cost
/// then index. Exact duplicates are all kept.
pub fn pareto_frontier(costs: &[f64], mean_quality: &[f64]) -> Vec<usize> {
    let dominated = |m: usize| {
        (0..costs.len()).any(|o| {
            costs[o] <= costs[m]
                && mean_quality[o] >= mean_quality[m]
                && (costs[o] < costs[m] || mean_quality[o] > mean_quality[m])
        })
    };
    let mut front: Vec<usize> = (0..costs.len()).filter(|&m| !dominated(m)).collect();
    front.sort_by(|&a, &b| cheaper(costs, a, b));
    front
}

/// Uniform choice over the cost-budgeted Pareto frontier.
///
/// λ maps linearly onto a budget: `λ = 0` admits the whole frontier and
/// `λ ≥ lambda_max` admits only its cheapest member.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRandom {
    frontier: Vec<usize>,
    lambda_max: f64,
}

impl ParetoRandom {
    pub fn new(costs: &[f64], mean_train_quality: &[f64], lambda_max: f64) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::EmptyPool);
        }
        if costs.len() != mean_train_quality.len() {
            return Err(Error::DimensionMismatch {
                context: "mean quality per expert",
                expected: costs.len(),
                found: mean_train_quality.len(),
            });
        }
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(Error::OutOfRange { context: "lambda_max".into(), value: lambda_max });
        }
        Ok(Self { frontier: pareto_frontier(costs, mean_train_quality), lambda_max })
    }

    pub fn frontier(&self) -> &[usize] {
        &self.frontier
    }

    pub fn budget(&self, costs: &[f64], lambda: f64) -> f64 {
        let lo = costs[self.frontier[0]];
        let hi = costs[*self.frontier.last().unwrap()];
        let t = (lambda / self.lambda_max).clamp(0.0, 1.0);
        hi - t * (hi - lo)
    }

    pub fn route<R: Rng + ?Sized>(&self, costs: &[f64], lambda: f64, rng: &mut R) -> RoutingDecision {
        let budget = self.budget(costs, lambda);
        let admitted = self.frontier.iter().take_while(|&&m| costs[m] <= budget).count().max(1);
        let expert = self.frontier[rng.random_range(0..admitted)];
        RoutingDecision { expert, similarity: None, cost: costs[expert], score: 0.0, policy: PolicyKind::ParetoRandom }
    }
}

/// Beta-Bernoulli posterior per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ThompsonState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ThompsonState {
    /// Beta(1, 1) for every arm.
    pub fn uniform(experts: usize) -> Self {
        Self { alpha: alloc::vec![1.0; experts], beta: alloc::vec![1.0; experts] }
    }

    /// Samples θ per arm and picks `argmax(θ − λ·cost)`.
    pub fn route<R: Rng + ?Sized>(&self, costs: &[f64], lambda: f64, rng: &mut R) -> RoutingDecision {
        let mut best: Option<(usize, f64)> = None;
        for m in 0..costs.len() {
            let theta = Beta::new(self.alpha[m], self.beta[m]).expect("positive Beta parameters").sample(rng);
            let score = theta - lambda * costs[m];
            let wins = match best {
                None => true,
                Some((b, s)) => score.total_cmp(&s).then_with(|| cheaper(costs, b, m)) == Ordering::Greater,
            };
            if wins {
                best = Some((m, score));
            }
        }
        let (expert, score) = best.expect("empty pool");
        RoutingDecision { expert, similarity: None, cost: costs[expert], score, policy: PolicyKind::Thompson }
    }

    pub fn update(&mut self, expert: usize, success: bool) {
        if success {
            self.alpha[expert] += 1.0;
        } else {
            self.beta[expert] += 1.0;
        }
    }
}

/// A policy swept over the test set, one pass per λ.
///
/// Queries are addressed by their position in the test set and visited in order.
pub trait RoutingPolicy {
    fn kind(&self) -> PolicyKind;

    /// Called before routing the test set at a new λ.
    fn begin_pass(&mut self, _lambda: f64) {}

    fn route(&mut self, query: usize, lambda: f64) -> RoutingDecision;

    /// Feedback after each decision, for online policies: the query's full quality row.
    fn observe(&mut self, _decision: &RoutingDecision, _quality: &[f64]) {}
}

/// CSCR with neighbour lists precomputed per test query (they do not depend on λ).
pub struct CscrPolicy<'a> {
    neighbors: Vec<Vec<Neighbor>>,
    costs: &'a [f64],
    rule: ScoreRule,
}

impl<'a> CscrPolicy<'a> {
    pub fn new<X: AsRef<[f64]>>(
        index: &FlatIndex,
        head: &MlpHead,
        embeddings: &[X],
        costs: &'a [f64],
        k: usize,
        rule: ScoreRule,
    ) -> Result<Self> {
        if costs.len() != index.len() {
            return Err(Error::DimensionMismatch { context: "costs per key", expected: index.len(), found: costs.len() });
        }
        let neighbors = embeddings
            .iter()
            .map(|x| index.top_k(head.forward(x.as_ref())?.as_slice(), k))
            .collect::<Result<_>>()?;
        Ok(Self { neighbors, costs, rule })
    }

    pub fn neighbors(&self, query: usize) -> &[Neighbor] {
        &self.neighbors[query]
    }
}

impl RoutingPolicy for CscrPolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Cscr
    }

    fn route(&mut self, query: usize, lambda: f64) -> RoutingDecision {
        select_among(&self.neighbors[query], self.costs, lambda, self.rule)
    }
}

pub struct OraclePolicy<'a> {
    pub quality: Vec<&'a [f64]>,
    pub costs: &'a [f64],
    pub threshold: Threshold,
}

impl RoutingPolicy for OraclePolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Oracle
    }

    fn route(&mut self, query: usize, _lambda: f64) -> RoutingDecision {
        route_oracle(self.quality[query], self.costs, self.threshold)
    }
}

/// Uniform choice; the stream restarts from `seed` on every pass.
pub struct RandomPolicy<'a> {
    costs: &'a [f64],
    seed: u64,
    rng: ChaCha8Rng,
}

impl<'a> RandomPolicy<'a> {
    pub fn new(costs: &'a [f64], seed: u64) -> Self {
        Self { costs, seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl RoutingPolicy for RandomPolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Random
    }

    fn begin_pass(&mut self, _lambda: f64) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn route(&mut self, _query: usize, _lambda: f64) -> RoutingDecision {
        route_random(self.costs, &mut self.rng)
    }
}

pub struct ParetoRandomPolicy<'a> {
    inner: ParetoRandom,
    costs: &'a [f64],
    seed: u64,
    rng: ChaCha8Rng,
}

impl<'a> ParetoRandomPolicy<'a> {
    pub fn new(inner: ParetoRandom, costs: &'a [f64], seed: u64) -> Self {
        Self { inner, costs, seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl RoutingPolicy for ParetoRandomPolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::ParetoRandom
    }

    fn begin_pass(&mut self, _lambda: f64) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn route(&mut self, _query: usize, lambda: f64) -> RoutingDecision {
        self.inner.route(self.costs, lambda, &mut self.rng)
    }
}

/// Online Thompson sampling over the test stream, restarted from the uniform
/// prior and the same seed at every λ.
pub struct ThompsonPolicy<'a> {
    costs: &'a [f64],
    threshold: Threshold,
    seed: u64,
    state: ThompsonState,
    rng: ChaCha8Rng,
}

impl<'a> ThompsonPolicy<'a> {
    /// `threshold` turns observed quality into a Bernoulli reward.
    pub fn new(costs: &'a [f64], threshold: Threshold, seed: u64) -> Self {
        Self {
            costs,
            threshold,
            seed,
            state: ThompsonState::uniform(costs.len()),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> &ThompsonState {
        &self.state
    }
}

impl RoutingPolicy for ThompsonPolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Thompson
    }

    fn begin_pass(&mut self, _lambda: f64) {
        self.state = ThompsonState::uniform(self.costs.len());
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn route(&mut self, _query: usize, lambda: f64) -> RoutingDecision {
        self.state.route(self.costs, lambda, &mut self.rng)
    }

    fn observe(&mut self, decision: &RoutingDecision, quality: &[f64]) {
        self.state.update(decision.expert, self.threshold.is_correct(quality, decision.expert));
    }
}

pub struct SinglePolicy<'a> {
    pub expert: usize,
    pub costs: &'a [f64],
}

impl RoutingPolicy for SinglePolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Single
    }

    fn route(&mut self, _query: usize, _lambda: f64) -> RoutingDecision {
        RoutingDecision {
            expert: self.expert,
            similarity: None,
            cost: self.costs[self.expert],
            score: 0.0,
            policy: PolicyKind::Single,
        }
    }
}
