//! Policy construction, sweeps and the JSON/CSV artifacts they produce.

use serde::Serialize;

use cscr_core::eval::{self, lambda_grid, pool_stats, ExpertStats, QncFlag, SweepResult};
use cscr_core::router::{
    CscrPolicy, OraclePolicy, ParetoRandom, ParetoRandomPolicy, RandomPolicy, RoutingPolicy, SinglePolicy,
    ThompsonPolicy,
};
use cscr_core::{CostModel, ExpertPool, FlatIndex, MlpHead, PolicyKind, QueryRecord, Split};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// A trained head with the index it routes over.
pub struct Router<'a> {
    pub index: &'a FlatIndex,
    pub head: &'a MlpHead,
}

/// Everything a sweep needs, restricted to one split.
pub struct EvalSet<'a> {
    pub pool: &'a ExpertPool,
    pub costs: &'a CostModel,
    pub queries: Vec<&'a QueryRecord>,
    /// Per-expert mean quality over the training split, for Pareto-random.
    pub train_quality: Vec<f64>,
}

impl<'a> EvalSet<'a> {
    pub fn new(pool: &'a ExpertPool, costs: &'a CostModel, records: &'a [QueryRecord], split: Split) -> Result<Self> {
        let queries: Vec<&QueryRecord> = records.iter().filter(|r| r.split == split).collect();
        if queries.is_empty() {
            return Err(cscr_core::Error::EmptyTestSet.into());
        }
        let train: Vec<&[f64]> =
            records.iter().filter(|r| r.split == Split::Train).map(|r| r.quality.as_slice()).collect();
        let train_quality = if train.is_empty() {
            vec![]
        } else {
            pool_stats(&train, &costs.cost)?.iter().map(|s| s.mean_quality).collect()
        };
        Ok(Self { pool, costs, queries, train_quality })
    }

    pub fn quality(&self) -> Vec<&'a [f64]> {
        self.queries.iter().map(|q| q.quality.as_slice()).collect()
    }

    pub fn stats(&self) -> Result<Vec<ExpertStats>> {
        Ok(pool_stats(&self.quality(), &self.costs.cost)?)
    }
}

pub fn grid(cfg: &RunConfig) -> Vec<f64> {
    lambda_grid(cfg.eval.grid_points, cfg.eval.lambda_max)
}

/// Sweeps `kind` over the configured λ grid.
pub fn run_policy(kind: PolicyKind, cfg: &RunConfig, set: &EvalSet<'_>, router: Option<&Router<'_>>) -> Result<SweepResult> {
    run_policy_on(kind, cfg, set, router, &grid(cfg))
}

pub fn run_policy_on(
    kind: PolicyKind,
    cfg: &RunConfig,
    set: &EvalSet<'_>,
    router: Option<&Router<'_>>,
    lambdas: &[f64],
) -> Result<SweepResult> {
    let quality = set.quality();
    let costs = set.costs.cost.as_slice();
    let mut policy: Box<dyn RoutingPolicy + '_> = match kind {
        PolicyKind::Cscr => {
            let r = router.ok_or_else(|| CliError::Usage("the cscr policy needs --descriptors and --checkpoint".into()))?;
            let emb: Vec<&[f64]> = set.queries.iter().map(|q| q.embedding.as_slice()).collect();
            Box::new(CscrPolicy::new(r.index, r.head, &emb, costs, cfg.route.k, cfg.route.rule)?)
        }
        PolicyKind::Oracle => {
            Box::new(OraclePolicy { quality: quality.clone(), costs, threshold: cfg.train.threshold })
        }
        PolicyKind::Random => Box::new(RandomPolicy::new(costs, cfg.route.seed)),
        PolicyKind::ParetoRandom => {
            if set.train_quality.is_empty() {
                return Err(CliError::Invalid("pareto_random needs training queries for its frontier".into()));
            }
            let inner = ParetoRandom::new(costs, &set.train_quality, cfg.eval.lambda_max)?;
            Box::new(ParetoRandomPolicy::new(inner, costs, cfg.route.seed))
        }
        PolicyKind::Thompson => Box::new(ThompsonPolicy::new(costs, cfg.train.threshold, cfg.route.seed)),
        PolicyKind::Single => {
            let best = eval::best_single(&set.stats()?).expect("non-empty pool");
            Box::new(SinglePolicy { expert: best, costs })
        }
    };
    Ok(eval::sweep(policy.as_mut(), &quality, cfg.train.threshold, lambdas)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CostAxis {
    /// Cost of always calling the most expensive expert, in normalized units.
    pub c_max: f64,
    pub raw_min: f64,
    pub raw_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestSingle {
    pub expert_id: String,
    pub mean_quality: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub policy: PolicyKind,
    pub audc: f64,
    /// Absent when the best single expert is free.
    pub qnc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qnc_flag: Option<QncFlag>,
    pub peak: f64,
    /// Cheapest curve cost reaching `peak`.
    pub cost_at_peak: f64,
    pub config_hash: String,
    pub cost_axis: CostAxis,
    pub best_single: BestSingle,
    pub n_queries: usize,
    pub lambda_grid: Vec<f64>,
}

pub fn report(sweep: &SweepResult, set: &EvalSet<'_>, config_hash: &str) -> Result<Report> {
    let c_max = set.costs.max();
    let stats = set.stats()?;
    let best = eval::best_single(&stats).expect("non-empty pool");
    let points: Vec<(f64, f64)> = sweep.curve.points.iter().map(|p| (p.mean_cost, p.mean_quality)).collect();
    let q = eval::qnc(&points, &stats, c_max);
    let peak = sweep.curve.peak();
    let cost_at_peak = points.iter().filter(|p| p.1 == peak).map(|p| p.0).fold(f64::INFINITY, f64::min);
    Ok(Report {
        policy: sweep.policy,
        audc: sweep.curve.audc(c_max),
        qnc: q.value.is_finite().then_some(q.value),
        qnc_flag: (q.flag != QncFlag::Matched).then_some(q.flag),
        peak,
        cost_at_peak,
        config_hash: config_hash.to_string(),
        cost_axis: CostAxis { c_max, raw_min: set.costs.raw_min, raw_max: set.costs.raw_max },
        best_single: BestSingle {
            expert_id: set.pool.experts()[best].id.clone(),
            mean_quality: stats[best].mean_quality,
            cost: stats[best].cost,
        },
        n_queries: set.queries.len(),
        lambda_grid: sweep.lambdas.clone(),
    })
}

pub const CURVE_HEADER: &str = "lambda,mean_cost,mean_quality";
pub const DECISIONS_HEADER: &str = "query_id,policy,lambda,expert_id,similarity,cost,quality";

pub fn curve_rows(sweep: &SweepResult) -> impl Iterator<Item = String> + '_ {
    sweep.curve.points.iter().map(|p| format!("{},{},{}", p.lambda, p.mean_cost, p.mean_quality))
}

pub fn decision_rows<'s>(sweep: &'s SweepResult, set: &'s EvalSet<'_>) -> impl Iterator<Item = String> + 's {
    sweep.lambdas.iter().zip(&sweep.outcomes).flat_map(move |(lambda, row)| {
        row.iter().zip(&set.queries).map(move |(o, q)| {
            let d = &o.decision;
            format!(
                "{},{},{},{},{},{},{}",
                q.id,
                d.policy.as_str(),
                lambda,
                set.pool.experts()[d.expert].id,
                d.similarity.map(|s| s.to_string()).unwrap_or_default(),
                d.cost,
                o.quality
            )
        })
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Significance {
    pub policy_a: PolicyKind,
    pub policy_b: PolicyKind,
    pub delta_audc: f64,
    pub ci: [f64; 2],
    pub p_bootstrap: f64,
    pub n_resamples: usize,
    pub n10: u64,
    pub n01: u64,
    pub p_mcnemar: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub mcnemar_undefined: bool,
    pub budget: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub config_hash: String,
}

pub fn significance(a: &SweepResult, b: &SweepResult, cfg: &RunConfig, c_max: f64, config_hash: &str) -> Result<Significance> {
    let boot = eval::paired_bootstrap_audc(a, b, c_max, cfg.eval.bootstrap_resamples, cfg.eval.bootstrap_seed)?;
    let mc = eval::mcnemar_matched_budget(a, b, cfg.eval.budget)?;
    Ok(Significance {
        policy_a: a.policy,
        policy_b: b.policy,
        delta_audc: boot.delta,
        ci: [boot.ci_low, boot.ci_high],
        p_bootstrap: boot.p_one_sided,
        n_resamples: cfg.eval.bootstrap_resamples,
        n10: mc.n10,
        n01: mc.n01,
        p_mcnemar: mc.p_exact,
        mcnemar_undefined: mc.undefined,
        budget: mc.budget,
        lambda_a: a.lambdas[mc.point_a],
        lambda_b: b.lambdas[mc.point_b],
        config_hash: config_hash.to_string(),
    })
}
