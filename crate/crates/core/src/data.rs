//! Validated in-memory records: the expert pool, query records and probe data.
//!
//! Pool order is canonical. Every per-expert vector downstream (costs, quality
//! columns, descriptors, index rows) is indexed in the order the pool was built.
//! Probe tensors and tables are re-keyed to that order by expert id.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// How an expert's fingerprint is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DescriptorKind {
    /// Averaged top-token probabilities of an open-weights model.
    Logit,
    /// Standardized per-probe cross-entropies of a black-box model.
    Perplexity,
}

impl DescriptorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorKind::Logit => "logit",
            DescriptorKind::Perplexity => "perplexity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Expert {
    pub id: String,
    /// Raw cost in user units (parameter count, USD, ...).
    pub cost: f64,
    pub kind: DescriptorKind,
}

/// The routable expert roster.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool {
    experts: Vec<Expert>,
}

impl ExpertPool {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut seen = BTreeSet::new();
        for (row, e) in experts.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::EmptyExpertId { row });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateExpertId(e.id.clone()));
            }
            if !(e.cost.is_finite() && e.cost >= 0.0) {
                return Err(Error::InvalidCost { id: e.id.clone(), cost: e.cost });
            }
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn get(&self, index: usize) -> Option<&Expert> {
        self.experts.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.experts.iter().map(|e| e.id.as_str())
    }

    pub fn raw_costs(&self) -> Vec<f64> {
        self.experts.iter().map(|e| e.cost).collect()
    }

    pub fn has_kind(&self, kind: DescriptorKind) -> bool {
        self.experts.iter().any(|e| e.kind == kind)
    }

    /// Ids of the experts of `kind`, in pool order.
    pub fn ids_of_kind(&self, kind: DescriptorKind) -> Vec<&str> {
        self.experts.iter().filter(|e| e.kind == kind).map(|e| e.id.as_str()).collect()
    }

    /// The pool without `id`. Removing the last expert is an error.
    pub fn without(&self, id: &str) -> Result<Self> {
        if self.index_of(id).is_none() {
            return Err(Error::MissingExpert(id.into()));
        }
        Self::new(self.experts.iter().filter(|e| e.id != id).cloned().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A prompt's frozen-backbone embedding and the per-expert quality it earned.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub split: Split,
    pub embedding: Vec<f64>,
    /// Quality per expert, in pool order, each in `[0, 1]`.
    pub quality: Vec<f64>,
}

/// Checks a query set against a pool of `experts` experts and returns the shared
/// embedding dimension.
pub fn validate_queries(records: &[QueryRecord], experts: usize) -> Result<usize> {
    let dim = records.first().map_or(0, |r| r.embedding.len());
    for r in records {
        if r.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "query embedding",
                expected: dim,
                found: r.embedding.len(),
            });
        }
        if r.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: format!("embedding of query \"{}\"", r.id) });
        }
        if r.quality.len() != experts {
            return Err(Error::DimensionMismatch {
                context: "quality vector",
                expected: experts,
                found: r.quality.len(),
            });
        }
        for &q in &r.quality {
            if !q.is_finite() {
                return Err(Error::NonFinite { context: format!("quality of query \"{}\"", r.id) });
            }
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::OutOfRange {
                    context: format!("quality of query \"{}\"", r.id),
                    value: q,
                });
            }
        }
    }
    Ok(dim)
}

/// Re-orders `values` (one row of `row_len` per id in `ids`) to follow `wanted`.
/// Rows for ids not in `wanted` are dropped.
fn rekey(ids: &[String], values: &[f64], row_len: usize, wanted: &[&str]) -> Result<Vec<f64>> {
    let position: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(wanted.len() * row_len);
    for id in wanted {
        let row = *position.get(id).ok_or_else(|| Error::MissingExpert((*id).into()))?;
        out.extend_from_slice(&values[row * row_len..(row + 1) * row_len]);
    }
    Ok(out)
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateExpertId(id.clone()));
        }
    }
    Ok(())
}

/// Top-slice next-token probabilities, indexed `(expert, probe, step, token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitProbeTensor {
    expert_ids: Vec<String>,
    token_ids: Vec<u32>,
    n_probes: usize,
    n_steps: usize,
    probs: Vec<f64>,
}

/// Slack on the per-row mass bound; payloads are stored as `f32`.
const MASS_SLACK: f64 = 1e-5;

impl LogitProbeTensor {
    pub fn new(
        expert_ids: Vec<String>,
        token_ids: Vec<u32>,
        n_probes: usize,
        n_steps: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        check_unique_ids(&expert_ids)?;
        let mut seen = BTreeSet::new();
        for &t in &token_ids {
            if !seen.insert(t) {
                return Err(Error::DuplicateToken(t));
            }
        }
        let expected = expert_ids.len() * n_probes * n_steps * token_ids.len();
        if probs.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "logit probe payload",
                expected,
                found: probs.len(),
            });
        }
        let v = token_ids.len().max(1);
        for (r, row) in probs.chunks(v).enumerate() {
            let mut mass = 0.0;
            for &p in row {
                if !p.is_finite() {
                    return Err(Error::NonFinite { context: "logit probe probability".into() });
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::OutOfRange { context: "logit probe probability".into(), value: p });
                }
                mass += p;
            }
            if mass > 1.0 + MASS_SLACK {
                let e = r / (n_probes * n_steps).max(1);
                return Err(Error::OutOfRange {
                    context: format!("probability mass of expert \"{}\" row {r}", expert_ids[e]),
                    value: mass,
                });
            }
        }
        Ok(Self { expert_ids, token_ids, n_probes, n_steps, probs })
    }

    pub fn expert_ids(&self) -> &[String] {
        &self.expert_ids
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn n_probes(&self) -> usize {
        self.n_probes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// `(experts, probes, steps, tokens)`.
    pub fn shape(&self) -> [usize; 4] {
        [self.expert_ids.len(), self.n_probes, self.n_steps, self.token_ids.len()]
    }

    /// Row-major payload.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn expert_index(&self, id: &str) -> Option<usize> {
        self.expert_ids.iter().position(|e| e == id)
    }

    /// Probabilities over the token axis for one `(expert, probe, step)`.
    pub fn row(&self, expert: usize, probe: usize, step: usize) -> &[f64] {
        let v = self.token_ids.len();
        let start = ((expert * self.n_probes + probe) * self.n_steps + step) * v;
        &self.probs[start..start + v]
    }

    /// Restricts the tensor to the pool's logit experts, in pool order.
    pub fn align_to_pool(&self, pool: &ExpertPool) -> Result<Self> {
        let wanted = pool.ids_of_kind(DescriptorKind::Logit);
        let row_len = self.n_probes * self.n_steps * self.token_ids.len();
        let probs = rekey(&self.expert_ids, &self.probs, row_len, &wanted)?;
        Ok(Self {
            expert_ids: wanted.into_iter().map(String::from).collect(),
            token_ids: self.token_ids.clone(),
            n_probes: self.n_probes,
            n_steps: self.n_steps,
            probs,
        })
    }
}

/// Per-prompt mean negative log-likelihood (nats/token), indexed `(expert, probe)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityTable {
    expert_ids: Vec<String>,
    n_probes: usize,
    scores: Vec<f64>,
}

impl PerplexityTable {
    pub fn new(expert_ids: Vec<String>, n_probes: usize, scores: Vec<f64>) -> Result<Self> {
        check_unique_ids(&expert_ids)?;
        let expected = expert_ids.len() * n_probes;
        if scores.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "perplexity payload",
                expected,
                found: scores.len(),
            });
        }
        for (i, &s) in scores.iter().enumerate() {
            let expert = &expert_ids[i / n_probes.max(1)];
            if !s.is_finite() {
                return Err(Error::NonFinite { context: format!("perplexity score of expert \"{expert}\"") });
            }
            if s < 0.0 {
                return Err(Error::OutOfRange {
                    context: format!("perplexity score of expert \"{expert}\""),
                    value: s,
                });
            }
        }
        Ok(Self { expert_ids, n_probes, scores })
    }

    pub fn expert_ids(&self) -> &[String] {
        &self.expert_ids
    }

    pub fn n_probes(&self) -> usize {
        self.n_probes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn expert_index(&self, id: &str) -> Option<usize> {
        self.expert_ids.iter().position(|e| e == id)
    }

    pub fn row(&self, expert: usize) -> &[f64] {
        &self.scores[expert * self.n_probes..(expert + 1) * self.n_probes]
    }

    /// Restricts the table to the pool's perplexity experts, in pool order.
    pub fn align_to_pool(&self, pool: &ExpertPool) -> Result<Self> {
        let wanted = pool.ids_of_kind(DescriptorKind::Perplexity);
        let scores = rekey(&self.expert_ids, &self.scores, self.n_probes, &wanted)?;
        Ok(Self {
            expert_ids: wanted.into_iter().map(String::from).collect(),
            n_probes: self.n_probes,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn expert(id: &str, cost: f64) -> Expert {
        Expert { id: id.into(), cost, kind: DescriptorKind::Logit }
    }

    #[test]
    fn pool_keeps_file_order() {
        let pool = ExpertPool::new(vec![expert("a", 0.5), expert("b", 2.0), expert("c", 7.0)]).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(pool.raw_costs(), [0.5, 2.0, 7.0]);
    }

    #[test]
    fn pool_rejects_duplicates_and_bad_costs() {
        let err = ExpertPool::new(vec![expert("a", 1.0), expert("a", 2.0)]).unwrap_err();
        assert_eq!(err, Error::DuplicateExpertId("a".into()));
        assert!(err.to_string().contains("\"a\""));
        assert!(matches!(ExpertPool::new(vec![expert("a", -1.0)]), Err(Error::InvalidCost { .. })));
        assert!(matches!(ExpertPool::new(vec![expert("", 1.0)]), Err(Error::EmptyExpertId { row: 0 })));
        assert_eq!(ExpertPool::new(vec![]).unwrap_err().to_string(), "empty pool");
    }

    #[test]
    fn query_validation() {
        let rec = |emb: Vec<f64>, q: Vec<f64>| QueryRecord {
            id: "q".into(),
            split: Split::Train,
            embedding: emb,
            quality: q,
        };
        let ok = vec![rec(vec![0.0; 32], vec![1.0, 0.0]), rec(vec![1.0; 32], vec![0.5, 0.25])];
        assert_eq!(validate_queries(&ok, 2).unwrap(), 32);

        let ragged = vec![rec(vec![0.0; 32], vec![1.0, 0.0]), rec(vec![0.0; 31], vec![1.0, 0.0])];
        assert!(matches!(
            validate_queries(&ragged, 2),
            Err(Error::DimensionMismatch { expected: 32, found: 31, .. })
        ));
        let high = vec![rec(vec![0.0; 4], vec![1.5, 0.0])];
        assert!(matches!(validate_queries(&high, 2), Err(Error::OutOfRange { value, .. }) if value == 1.5));
    }

    #[test]
    fn probe_tensor_validation_and_alignment() {
        let ids = vec!["b".to_string(), "a".to_string()];
        // expert b: rows (0.2, 0.3); expert a: rows (0.6, 0.1)
        let t = LogitProbeTensor::new(ids.clone(), vec![7, 9], 1, 1, vec![0.2, 0.3, 0.6, 0.1]).unwrap();
        let pool = ExpertPool::new(vec![expert("a", 1.0), expert("b", 2.0)]).unwrap();
        let aligned = t.align_to_pool(&pool).unwrap();
        assert_eq!(aligned.expert_ids(), ["a", "b"]);
        assert_eq!(aligned.row(0, 0, 0), [0.6, 0.1]);

        let missing = ExpertPool::new(vec![expert("a", 1.0), expert("b", 2.0), expert("c", 3.0)]).unwrap();
        assert_eq!(t.align_to_pool(&missing).unwrap_err(), Error::MissingExpert("c".into()));

        assert!(matches!(
            LogitProbeTensor::new(ids.clone(), vec![7, 9], 1, 1, vec![0.2, 1.3, 0.6, 0.1]),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            LogitProbeTensor::new(ids, vec![7, 9], 1, 1, vec![0.7, 0.5, 0.6, 0.1]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn perplexity_table_rejects_nan() {
        let err = PerplexityTable::new(vec!["a".into()], 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
