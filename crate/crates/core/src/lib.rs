//! Depth pruning for decoder-only transformers.
//!
//! Layers are scored from the residual-stream states around them: cosine
//! dissimilarity between a layer's input and output, and the magnitude of the
//! update it applies (mean squared or mean absolute). The two are fused with a
//! weight `alpha`, which can be chosen by ternary search on perplexity, and
//! the lowest-scoring layers are removed.

pub mod alphasearch;
pub mod boundary;
pub mod cli;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod scoring;
pub mod tensor;
pub mod toymodel;

pub use alphasearch::{search_alpha, search_alpha_for_model, ternary_search, SearchConfig, SearchTrace};
pub use boundary::BoundarySet;
pub use error::{Error, Result};
pub use metrics::{cosine_dissimilarity, layer_raw_metrics, masd, mssd, MetricKind, RawLayerMetrics};
pub use scoring::{build_plan, LayerScore, PruningPlan};
pub use tensor::{flatten_tokens, row_dot, row_l2norm, TensorF, TokenMatrix};
pub use toymodel::{init_model, CalibrationSet, ToyConfig, ToyModel};
