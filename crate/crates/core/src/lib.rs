//! Hierarchical memory-bank anomaly detection for multi-class feature archives.
//!
//! Semantic embeddings are clustered into pseudo-classes, each cluster gets its
//! own coreset memory bank of patch features, and test images are scored
//! against the bank of the cluster they route to.

pub mod clustering;
pub mod coreset;
pub mod error;
pub mod feature_store;
pub mod harness;
pub mod memory_bank;
pub mod metrics;
pub mod patch_features;
pub mod resample;
pub mod scalar;
pub mod scoring;

pub use clustering::{
    adjusted_rand_index, assign, cluster_semantic, finch, first_neighbor_graph, select_level,
    silhouette, ClusterModel, FinchConfig, FinchHierarchy, Partition,
};
pub use coreset::{kcenter_greedy, Coreset, CoresetConfig};
pub use error::{Error, ErrorKind, Result};
pub use harness::{run_scenario, EvalReport, Scenario};
pub use feature_store::{
    read_archive, synth_generate, write_archive, FeatureArchive, GtLabel, ImageRecord, PatchGrid,
    Split, SynthClass, SynthSpec,
};
pub use memory_bank::{BankConfig, BankMode, HierMemoryBank};
pub use metrics::{evaluate, Grouping, MetricReport};
pub use patch_features::{local_patches, LayerMap, PatchTensor, Window};
pub use scalar::Scalar;
pub use scoring::{score_batch, score_record, AnomalyResult, ScoreCounters, ScoreOptions};

pub type ClusterModel32 = ClusterModel<f32>;
pub type ClusterModel64 = ClusterModel<f64>;
pub type Coreset32 = Coreset<f32>;
pub type Coreset64 = Coreset<f64>;
pub type HierMemoryBank32 = HierMemoryBank<f32>;
pub type HierMemoryBank64 = HierMemoryBank<f64>;
pub type AnomalyResult32 = AnomalyResult<f32>;
pub type AnomalyResult64 = AnomalyResult<f64>;
