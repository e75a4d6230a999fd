//! Inductive link prediction on heterogeneous hypergraphs for zero-shot
//! product attribute-value extraction.

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod model;
pub mod split;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use graph::{HyperedgeKind, Hypergraph, HypergraphBuilder, NodeId, NodeKind};
pub use ingest::FeatureStore;
pub use metrics::EvalReport;
pub use model::{FusionWeights, ModelConfig, ModelParams};
pub use split::{CandidateLink, SplitBundle, SplitConfig};
pub use train::{TrainConfig, TrainOutcome};
