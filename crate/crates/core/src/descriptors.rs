//! Expert fingerprints: the unit-norm keys of the shared metric space.
//!
//! Open-weights experts are described by a logit footprint, the mean probability
//! each basis token receives across probes and decoding steps. Black-box experts
//! are described by a perplexity fingerprint, the standardized vector of
//! per-probe cross-entropies. Both end on the unit sphere, so a pool can mix the
//! two as long as the basis size equals the probe count.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::{DescriptorKind, ExpertPool, LogitProbeTensor, PerplexityTable};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, normalized};

/// Tolerance on ‖v‖₂ = 1 for anything used as a key.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// The `K` vocabulary tokens a logit footprint is measured on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBasis {
    token_ids: Vec<u32>,
}

impl TokenBasis {
    pub fn new(token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::InvalidConfig("token basis must hold at least one token".into()));
        }
        let mut sorted = token_ids.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateToken(w[0]));
        }
        Ok(Self { token_ids })
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// A unit-norm expert fingerprint.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Descriptor {
    #[cfg_attr(feature = "serde", serde(rename = "id"))]
    pub expert_id: String,
    pub kind: DescriptorKind,
    pub vector: Vec<f64>,
}

impl Descriptor {
    /// Wraps an existing vector, checking it is unit norm.
    pub fn new(expert_id: impl Into<String>, kind: DescriptorKind, vector: Vec<f64>) -> Result<Self> {
        let n = norm(&vector);
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::NonUnitKey { index: 0, norm: n });
        }
        Ok(Self { expert_id: expert_id.into(), kind, vector })
    }

    /// Normalizes `raw` onto the unit sphere.
    pub fn from_raw(expert_id: impl Into<String>, kind: DescriptorKind, raw: &[f64]) -> Result<Self> {
        let expert_id = expert_id.into();
        let vector = normalized(raw).ok_or_else(|| Error::ZeroVector {
            context: format!("{} descriptor of expert \"{expert_id}\"", kind.as_str()),
        })?;
        Ok(Self { expert_id, kind, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Picks the `k` tokens carrying the most probability mass summed over all
/// experts, probes and steps. Ties go to the smaller token id.
pub fn select_token_basis(probes: &LogitProbeTensor, k: usize) -> Result<TokenBasis> {
    let v = probes.token_ids().len();
    if k == 0 || k > v {
        return Err(Error::BasisTooLarge { requested: k, available: v });
    }
    let mut mass = alloc::vec![0.0f64; v];
    for row in probes.probs().chunks(v) {
        for (m, p) in mass.iter_mut().zip(row) {
            *m += p;
        }
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        mass[b]
            .partial_cmp(&mass[a])
            .unwrap_or(Ordering::Equal)
            .then(probes.token_ids()[a].cmp(&probes.token_ids()[b]))
    });
    TokenBasis::new(order[..k].iter().map(|&c| probes.token_ids()[c]).collect())
}

/// Mean basis-token probability over all probes and steps, ℓ2-normalized.
pub fn logit_footprint(probes: &LogitProbeTensor, basis: &TokenBasis, expert: &str) -> Result<Descriptor> {
    let e = probes.expert_index(expert).ok_or_else(|| Error::MissingExpert(expert.into()))?;
    let column: BTreeMap<u32, usize> = probes.token_ids().iter().enumerate().map(|(c, &t)| (t, c)).collect();
    let cols = basis
        .token_ids()
        .iter()
        .map(|t| column.get(t).copied().ok_or(Error::UnknownToken(*t)))
        .collect::<Result<Vec<_>>>()?;

    let mut acc = alloc::vec![0.0f64; cols.len()];
    for i in 0..probes.n_probes() {
        for t in 0..probes.n_steps() {
            let row = probes.row(e, i, t);
            for (a, &c) in acc.iter_mut().zip(&cols) {
                *a += row[c];
            }
        }
    }
    let count = (probes.n_probes() * probes.n_steps()) as f64;
    for a in &mut acc {
        *a /= count;
    }
    Descriptor::from_raw(expert, DescriptorKind::Logit, &acc)
}

/// Mean-centers `scores` and divides by the population standard deviation.
///
/// This is the fingerprint before ℓ2 projection: mean 0, variance 1.
pub fn standardize(expert: &str, scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "perplexity fingerprint of \"{expert}\" needs at least 2 probes, got {}",
            scores.len()
        )));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::ZeroVariance { expert: expert.into() });
    }
    Ok(scores.iter().map(|s| (s - mean) / std).collect())
}

/// Standardized per-probe scores, ℓ2-normalized.
pub fn perplexity_fingerprint(table: &PerplexityTable, expert: &str) -> Result<Descriptor> {
    let e = table.expert_index(expert).ok_or_else(|| Error::MissingExpert(expert.into()))?;
    let z = standardize(expert, table.row(e))?;
    Descriptor::from_raw(expert, DescriptorKind::Perplexity, &z)
}

/// Probe inputs for [`pool_descriptors`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeInputs<'a> {
    pub logit: Option<(&'a LogitProbeTensor, &'a TokenBasis)>,
    pub perplexity: Option<&'a PerplexityTable>,
}

/// One descriptor per pool expert, in pool order, each computed from the probe
/// data matching the expert's kind.
///
/// When both kinds are present the basis size must equal the probe count so
/// that every key lives on the same sphere.
pub fn pool_descriptors(pool: &ExpertPool, inputs: ProbeInputs<'_>) -> Result<Vec<Descriptor>> {
    let mixed = pool.has_kind(DescriptorKind::Logit) && pool.has_kind(DescriptorKind::Perplexity);
    if mixed {
        if let (Some((_, basis)), Some(table)) = (inputs.logit, inputs.perplexity) {
            if basis.len() != table.n_probes() {
                return Err(Error::DimensionMismatch {
                    context: "mixed pool (basis size vs perplexity probe count)",
                    expected: table.n_probes(),
                    found: basis.len(),
                });
            }
        }
    }
    pool.experts()
        .iter()
        .map(|e| match e.kind {
            DescriptorKind::Logit => {
                let (tensor, basis) = inputs
                    .logit
                    .ok_or_else(|| Error::InvalidConfig("pool has logit experts but no logit probes".into()))?;
                logit_footprint(tensor, basis, &e.id)
            }
            DescriptorKind::Perplexity => {
                let table = inputs.perplexity.ok_or_else(|| {
                    Error::InvalidConfig("pool has perplexity experts but no perplexity table".into())
                })?;
                perplexity_fingerprint(table, &e.id)
            }
        })
        .collect()
}

/// Square matrix of pairwise inner products (cosine similarities).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn descriptor_similarity_matrix(descs: &[Descriptor]) -> Result<SimilarityMatrix> {
    let dim = descs.first().map_or(0, Descriptor::dim);
    if let Some(d) = descs.iter().find(|d| d.dim() != dim) {
        return Err(Error::DimensionMismatch { context: "descriptor", expected: dim, found: d.dim() });
    }
    let n = descs.len();
    let mut data = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = dot(&descs[i].vector, &descs[j].vector);
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(experts: usize, n: usize, t: usize, tokens: Vec<u32>, probs: Vec<f64>) -> LogitProbeTensor {
        let ids = (0..experts).map(|e| alloc::format!("e{e}")).collect();
        LogitProbeTensor::new(ids, tokens, n, t, probs).unwrap()
    }

    /// Random top-slice tensor whose rows each sum to at most 1.
    fn random_tensor(rng: &mut ChaCha8Rng, experts: usize, n: usize, t: usize, v: usize) -> LogitProbeTensor {
        let mut probs = Vec::with_capacity(experts * n * t * v);
        for _ in 0..experts * n * t {
            let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum::<f64>() * 1.25;
            probs.extend(raw.iter().map(|x| x / total));
        }
        tensor(experts, n, t, (0..v as u32).map(|x| 1000 + x).collect(), probs)
    }

    #[test]
    fn basis_argmax_and_tie_break() {
        // token 4 total mass 0.5, token 2 total mass 0.3
        let t = tensor(1, 1, 1, vec![4, 2], vec![0.5, 0.3]);
        assert_eq!(select_token_basis(&t, 1).unwrap().token_ids(), [4]);
        let tie = tensor(1, 1, 1, vec![9, 3], vec![0.2, 0.2]);
        assert_eq!(select_token_basis(&tie, 1).unwrap().token_ids(), [3]);
        assert_eq!(
            select_token_basis(&tie, 3).unwrap_err(),
            Error::BasisTooLarge { requested: 3, available: 2 }
        );
    }

    #[test]
    fn basis_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probes = random_tensor(&mut rng, 2, 3, 2, 300);
        let basis = select_token_basis(&probes, 256).unwrap();

        // Oracle: total mass per token via explicit index arithmetic, full sort, truncate.
        let [experts, n, t, v] = probes.shape();
        let mut totals: Vec<(f64, u32)> = (0..v)
            .map(|c| {
                let mut m = 0.0;
                for e in 0..experts {
                    for i in 0..n {
                        for s in 0..t {
                            m += probes.probs()[((e * n + i) * t + s) * v + c];
                        }
                    }
                }
                (m, probes.token_ids()[c])
            })
            .collect();
        totals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<u32> = totals[..256].iter().map(|x| x.1).collect();
        assert_eq!(basis.token_ids(), expected.as_slice());
    }

    #[test]
    fn footprint_fixtures() {
        let t = tensor(1, 1, 1, vec![1, 2], vec![0.6, 0.8 * 0.5]);
        let basis = TokenBasis::new(vec![1, 2]).unwrap();
        let d = logit_footprint(&t, &basis, "e0").unwrap();
        // (0.6, 0.4) normalized
        let n = libm::sqrt(0.36 + 0.16);
        assert!((d.vector[0] - 0.6 / n).abs() < 1e-15 && (d.vector[1] - 0.4 / n).abs() < 1e-15);

        let sym = tensor(1, 2, 1, vec![1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let d = logit_footprint(&sym, &basis, "e0").unwrap();
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert!((d.vector[0] - h).abs() < 1e-15 && (d.vector[1] - h).abs() < 1e-15);

        let zero = tensor(1, 1, 1, vec![1, 2, 3], vec![0.0, 0.0, 0.9]);
        assert!(matches!(logit_footprint(&zero, &basis, "e0"), Err(Error::ZeroVector { .. })));
        assert_eq!(logit_footprint(&zero, &basis, "zz").unwrap_err(), Error::MissingExpert("zz".into()));
    }

    #[test]
    fn footprint_direction_survives_scaling() {
        // (0.6, 0.8) itself would carry mass 1.4; the same direction at mass 0.84.
        let t = tensor(1, 1, 1, vec![5, 6], vec![0.36, 0.48]);
        let d = logit_footprint(&t, &TokenBasis::new(vec![5, 6]).unwrap(), "e0").unwrap();
        assert!((d.vector[0] - 0.6).abs() < 1e-12 && (d.vector[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn footprint_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probes = random_tensor(&mut rng, 3, 4, 3, 8);
        let basis = select_token_basis(&probes, 8).unwrap();
        for e in 0..3 {
            let id = probes.expert_ids()[e].clone();
            let d = logit_footprint(&probes, &basis, &id).unwrap();
            let mut raw = [0.0; 8];
            for (k, tok) in basis.token_ids().iter().enumerate() {
                let c = probes.token_ids().iter().position(|x| x == tok).unwrap();
                let mut s = 0.0;
                for i in 0..4 {
                    for t in 0..3 {
                        s += probes.probs()[((e * 4 + i) * 3 + t) * 8 + c];
                    }
                }
                raw[k] = s / 12.0;
            }
            let n = libm::sqrt(raw.iter().map(|x| x * x).sum::<f64>());
            for k in 0..8 {
                assert!((d.vector[k] - raw[k] / n).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn perplexity_fixtures() {
        let table = PerplexityTable::new(vec!["a".into(), "b".into(), "c".into()], 2, vec![1.0, 3.0, 2.0, 2.0, 0.0, 5.0])
            .unwrap();
        let d = perplexity_fingerprint(&table, "a").unwrap();
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert!((d.vector[0] + h).abs() < 1e-15 && (d.vector[1] - h).abs() < 1e-15);
        assert_eq!(perplexity_fingerprint(&table, "b").unwrap_err(), Error::ZeroVariance { expert: "b".into() });

        let constant = PerplexityTable::new(vec!["x".into()], 3, vec![2.0, 2.0, 2.0]).unwrap();
        assert!(matches!(perplexity_fingerprint(&constant, "x"), Err(Error::ZeroVariance { .. })));
    }

    #[test]
    fn perplexity_matches_hand_standardization() {
        // scores (1,2,3,4): mean 2.5, population variance 1.25
        let table = PerplexityTable::new(vec!["a".into()], 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = perplexity_fingerprint(&table, "a").unwrap();
        let sd = libm::sqrt(1.25);
        let z: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|s| (s - 2.5) / sd).collect();
        let zn = libm::sqrt(z.iter().map(|x| x * x).sum::<f64>());
        for (got, want) in d.vector.iter().zip(&z) {
            assert!((got - want / zn).abs() <= 1e-12);
        }
    }

    #[test]
    fn similarity_matrix_fixtures() {
        let a = Descriptor::new("a", DescriptorKind::Logit, vec![1.0, 0.0]).unwrap();
        let b = Descriptor::new("b", DescriptorKind::Logit, vec![0.0, 1.0]).unwrap();
        let m = descriptor_similarity_matrix(&[a.clone(), a.clone()]).unwrap();
        assert!(m.row(0).iter().chain(m.row(1)).all(|&x| x == 1.0));
        let m = descriptor_similarity_matrix(&[a.clone(), b]).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        let c = Descriptor::new("c", DescriptorKind::Logit, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(descriptor_similarity_matrix(&[a, c]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn similarity_matrix_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let descs: Vec<Descriptor> = (0..5)
            .map(|i| {
                let raw: Vec<f64> = (0..7).map(|_| rng.random::<f64>() - 0.5).collect();
                Descriptor::from_raw(i.to_string(), DescriptorKind::Perplexity, &raw).unwrap()
            })
            .collect();
        let m = descriptor_similarity_matrix(&descs).unwrap();
        for i in 0..5 {
            assert!((m.get(i, i) - 1.0).abs() <= 1e-9);
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += descs[i].vector[k] * descs[j].vector[k];
                }
                assert_eq!(m.get(i, j), m.get(j, i));
                assert!((m.get(i, j) - s).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn mixed_pool_requires_matching_dimensions() {
        use crate::data::Expert;
        let pool = ExpertPool::new(vec![
            Expert { id: "l".into(), cost: 1.0, kind: DescriptorKind::Logit },
            Expert { id: "p".into(), cost: 2.0, kind: DescriptorKind::Perplexity },
        ])
        .unwrap();
        let t = tensor(1, 1, 1, vec![1, 2, 3], vec![0.2, 0.3, 0.1]);
        let t = LogitProbeTensor::new(vec!["l".into()], t.token_ids().to_vec(), 1, 1, t.probs().to_vec()).unwrap();
        let table = PerplexityTable::new(vec!["p".into()], 3, vec![1.0, 2.0, 4.0]).unwrap();

        let basis3 = select_token_basis(&t, 3).unwrap();
        let inputs = ProbeInputs { logit: Some((&t, &basis3)), perplexity: Some(&table) };
        let descs = pool_descriptors(&pool, inputs).unwrap();
        assert_eq!(descs.iter().map(|d| d.dim()).collect::<Vec<_>>(), [3, 3]);
        assert_eq!(descs[1].kind, DescriptorKind::Perplexity);

        let basis2 = select_token_basis(&t, 2).unwrap();
        let inputs = ProbeInputs { logit: Some((&t, &basis2)), perplexity: Some(&table) };
        assert!(matches!(pool_descriptors(&pool, inputs), Err(Error::DimensionMismatch { .. })));
    }
}
