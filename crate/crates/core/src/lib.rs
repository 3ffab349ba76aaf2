//! Cost-spectrum contrastive routing.
//!
//! Queries and experts share one unit-sphere metric space. Experts are keyed by
//! compact fingerprints ([`descriptors`]), a small projection head ([`encoder`])
//! maps frozen query embeddings onto the same sphere, and routing is an exact
//! top-k inner-product lookup ([`index`]) followed by a cost-penalized pick
//! ([`router`]). The head is trained with a banded, cost-aware InfoNCE objective
//! ([`loss`], [`train`]) over quantile cost bands ([`cost`]). [`eval`] traces
//! deferral curves and runs paired significance tests; [`synth`] generates
//! seeded fixtures with planted structure.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, configuration and
//! the command-line driver live in the companion `cscr` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is deliberate: it rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cost;
pub mod data;
pub mod descriptors;
pub mod encoder;
mod error;
pub mod eval;
pub mod index;
pub mod linalg;
pub mod loss;
pub mod router;
pub mod synth;
pub mod train;

pub use cost::{normalize_costs, partition_bands, BandPartition, CostModel};
pub use data::{DescriptorKind, Expert, ExpertPool, LogitProbeTensor, PerplexityTable, QueryRecord, Split};
pub use descriptors::{Descriptor, TokenBasis};
pub use encoder::{Activation, MlpHead, QueryVector};
pub use error::{Error, Result};
pub use index::{FlatIndex, Neighbor};
pub use loss::{PositiveSets, Threshold};
pub use router::{PolicyKind, RoutingDecision, ScoreRule};
pub use train::TrainConfig;
