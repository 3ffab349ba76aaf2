//! Training the projection head against the cost-spectrum objective.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{partition_bands, BandPartition, CostModel};
use crate::data::{QueryRecord, Split};
use crate::encoder::{Activation, MlpHead};
use crate::error::{Error, Result};
use crate::index::FlatIndex;
use crate::loss::{build_positives, cs_infonce_loss_and_grad, Threshold};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Negative cost penalty γ.
    pub gamma: f64,
    pub num_bands: usize,
    pub alpha: f64,
    pub tau_min: f64,
    pub seed: u64,
    pub threshold: Threshold,
    /// Hidden width as a multiple of the embedding dimension.
    pub hidden_multiplier: usize,
    pub activation: Activation,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 512,
            learning_rate: 5e-4,
            gamma: 0.2,
            num_bands: 5,
            alpha: 0.25,
            tau_min: 0.05,
            seed: 0,
            threshold: Threshold::Absolute(0.5),
            hidden_multiplier: 1,
            activation: Activation::Tanh,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if self.num_bands == 0 {
            return bad("num_bands must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.hidden_multiplier == 0 {
            return bad("hidden_multiplier must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        self.threshold.validate()?;
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(params: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            m: alloc::vec![0.0; params],
            v: alloc::vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / c1) / (libm::sqrt(*v / c2) + self.eps);
            *p -= self.lr * (update + self.weight_decay * *p);
        }
    }
}

/// Mean loss of `head` on a batch and its gradient with respect to every head parameter.
pub fn batch_objective(
    head: &MlpHead,
    embeddings: &[&[f64]],
    positives: &[&[usize]],
    keys: &FlatIndex,
    costs: &[f64],
    bands: &BandPartition,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let caches = embeddings.iter().map(|x| head.forward_cached(x)).collect::<Result<Vec<_>>>()?;
    let queries: Vec<&[f64]> = caches.iter().map(|c| c.query.as_slice()).collect();
    let (loss, d_queries) = cs_infonce_loss_and_grad(&queries, positives, keys, costs, bands, gamma)?;
    let mut grads = alloc::vec![0.0; head.params().len()];
    for ((x, cache), dq) in embeddings.iter().zip(&caches).zip(&d_queries) {
        head.backward(x, cache, dq, &mut grads);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean pre-update batch loss over the epoch's queries.
    pub loss: f64,
    pub excluded_queries: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: MlpHead,
    pub bands: BandPartition,
    pub epochs: Vec<EpochLog>,
    /// Training queries without a positive expert, skipped by the loss.
    pub excluded: Vec<String>,
    pub train_queries: usize,
}

/// Seeded minibatch AdamW over the `train` split of `records`.
pub fn train(records: &[QueryRecord], costs: &CostModel, keys: &FlatIndex, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if costs.len() != keys.len() {
        return Err(Error::DimensionMismatch { context: "costs per key", expected: keys.len(), found: costs.len() });
    }
    let train_set: Vec<&QueryRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let dim = train_set.first().map(|r| r.embedding.len()).ok_or_else(|| {
        Error::InvalidConfig("no training queries".into())
    })?;
    let bands = partition_bands(costs, cfg.num_bands, cfg.tau_min, cfg.alpha)?;
    let owned: Vec<QueryRecord> = train_set.iter().map(|r| (*r).clone()).collect();
    let positives = build_positives(&owned, cfg.threshold);
    let excluded: Vec<String> = positives.excluded.iter().map(|&i| owned[i].id.clone()).collect();
    let mut usable: Vec<usize> = (0..owned.len()).filter(|&i| !positives.is_excluded(i)).collect();
    if usable.is_empty() {
        return Err(Error::InvalidConfig("no training query has a positive expert".into()));
    }

    let mut head = MlpHead::init(dim, dim * cfg.hidden_multiplier, keys.dim(), cfg.activation, cfg.seed)?;
    let mut opt = AdamW::new(head.params().len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        usable.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in usable.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| owned[i].embedding.as_slice()).collect();
            let ps: Vec<&[usize]> = batch.iter().map(|&i| positives.sets[i].as_slice()).collect();
            let (loss, grads) = batch_objective(&head, &xs, &ps, keys, &costs.cost, &bands, cfg.gamma)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { queries: batch.iter().map(|&i| owned[i].id.clone()).collect() });
            }
            weighted += loss * batch.len() as f64;
            opt.step(head.params_mut(), &grads);
        }
        epochs.push(EpochLog {
            epoch,
            loss: weighted / usable.len() as f64,
            excluded_queries: excluded.len(),
        });
    }
    Ok(TrainOutcome { head, bands, epochs, excluded, train_queries: owned.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DescriptorKind;
    use crate::descriptors::Descriptor;
    use alloc::vec;

    fn fixture() -> (Vec<QueryRecord>, CostModel, FlatIndex) {
        let q = |id: &str, emb: Vec<f64>, quality: Vec<f64>| QueryRecord {
            id: id.into(),
            split: Split::Train,
            embedding: emb,
            quality,
        };
        let records = vec![q("a", vec![1.0, 0.2], vec![1.0, 0.0]), q("b", vec![-0.3, 1.0], vec![0.0, 1.0])];
        let keys = FlatIndex::build(&[
            Descriptor::new("x", DescriptorKind::Perplexity, vec![1.0, 0.0]).unwrap(),
            Descriptor::new("y", DescriptorKind::Perplexity, vec![0.0, 1.0]).unwrap(),
        ])
        .unwrap();
        (records, CostModel::from_raw(&[1.0, 3.0]), keys)
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 5, batch_size: 2, learning_rate: 0.01, num_bands: 2, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn separable_fixture_loss_strictly_decreases() {
        let (records, costs, keys) = fixture();
        let out = train(&records, &costs, &keys, &cfg()).unwrap();
        assert_eq!(out.epochs.len(), 5);
        for w in out.epochs.windows(2) {
            assert!(w[1].loss < w[0].loss, "{:?}", out.epochs);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (records, costs, keys) = fixture();
        let a = train(&records, &costs, &keys, &cfg()).unwrap();
        let b = train(&records, &costs, &keys, &cfg()).unwrap();
        assert_eq!(a.head.params(), b.head.params());
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (records, costs, keys) = fixture();
        let c = TrainConfig { learning_rate: 0.0, ..cfg() };
        let out = train(&records, &costs, &keys, &c).unwrap();
        let init = MlpHead::init(2, 2, 2, c.activation, c.seed).unwrap();
        assert_eq!(out.head.params(), init.params());
        assert!(out.epochs.iter().all(|e| e.loss == out.epochs[0].loss));
    }

    #[test]
    fn queries_without_positives_are_excluded() {
        let (mut records, costs, keys) = fixture();
        records.push(QueryRecord { id: "none".into(), split: Split::Train, embedding: vec![0.5, 0.5], quality: vec![0.0, 0.0] });
        records.push(QueryRecord { id: "held".into(), split: Split::Test, embedding: vec![0.5, 0.5], quality: vec![1.0, 1.0] });
        let out = train(&records, &costs, &keys, &cfg()).unwrap();
        assert_eq!(out.excluded, ["none"]);
        assert_eq!(out.train_queries, 3);
        assert!(out.epochs.iter().all(|e| e.excluded_queries == 1));
    }

    #[test]
    fn invalid_configs() {
        let (records, costs, keys) = fixture();
        for bad in [
            TrainConfig { gamma: -0.1, ..cfg() },
            TrainConfig { batch_size: 0, ..cfg() },
            TrainConfig { num_bands: 0, ..cfg() },
            TrainConfig { threshold: Threshold::Absolute(1.5), ..cfg() },
        ] {
            assert!(train(&records, &costs, &keys, &bad).is_err());
        }
        assert!(matches!(
            train(&records, &costs, &keys, &TrainConfig { num_bands: 3, ..cfg() }),
            Err(Error::TooManyBands { .. })
        ));
    }

    #[test]
    fn adamw_decays_without_gradient() {
        let c = TrainConfig { learning_rate: 0.1, weight_decay: 0.5, ..TrainConfig::default() };
        let mut opt = AdamW::new(1, &c);
        let mut p = [2.0];
        opt.step(&mut p, &[0.0]);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
