//! Gallery indexing, composed-query retrieval and the metric suite.

mod index;
mod metrics;
mod report;

pub use index::{build_index, retrieve, GalleryIndex, QuerySpec, RankedEntry, RankedList};
pub use metrics::{
    average_precision_at_k, calinski_harabasz, evaluate, recall_at_k, subset_recall_at_k, target_cluster_score,
    EvalKs, MetricsReport,
};
pub use report::{
    compose_loaded, compose_queries, export_features, import_features, render_table, write_reports, FeatureRow,
};
