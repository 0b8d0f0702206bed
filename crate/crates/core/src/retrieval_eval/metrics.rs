use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

use super::index::{retrieve, GalleryIndex, QuerySpec, RankedList};

/// 1 when a ground truth is among the first `k` ids.
pub fn recall_at_k(ranked: &[&str], ground_truth: &[String], k: usize) -> bool {
    ranked.iter().take(k).any(|id| ground_truth.iter().any(|g| g == id))
}

/// Recall@K after restricting retrieval to the query's subset.
pub fn subset_recall_at_k(query_feature: &[f32], index: &GalleryIndex, query: &QuerySpec, k: usize) -> Result<bool> {
    let subset = query
        .subset_ids
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("query {} has no subset", query.id)))?;
    for gt in &query.ground_truth_ids {
        if !subset.contains(gt) {
            return Err(Error::Contract(format!("query {}: ground truth {gt} outside its subset", query.id)));
        }
    }
    let ranked = retrieve(query_feature, index, k, Some(subset))?;
    Ok(recall_at_k(&ranked.ids(), &query.ground_truth_ids, k))
}

/// Average precision over the first `k` results, normalized by
/// `min(|GT|, k)`.
pub fn average_precision_at_k(ranked: &[&str], ground_truth: &[String], k: usize) -> f64 {
    let gts: HashSet<&str> = ground_truth.iter().map(String::as_str).collect();
    if gts.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if gts.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / gts.len().min(k) as f64
}

/// Calinski–Harabasz index of labelled points.
pub fn calinski_harabasz(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let m = features.len();
    if m != labels.len() {
        return Err(Error::Contract(format!("{m} points, {} labels", labels.len())));
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    let k = clusters.len();
    if k < 2 || m <= k {
        return Err(Error::Contract(format!("{m} points in {k} clusters")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Contract("ragged feature rows".into()));
    }
    let mean = |rows: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for &r in rows {
            for (a, b) in c.iter_mut().zip(&features[r]) {
                *a += b;
            }
        }
        c.iter_mut().for_each(|x| *x /= rows.len() as f64);
        c
    };
    let all: Vec<usize> = (0..m).collect();
    let global = mean(&all);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut between = 0.0;
    let mut within = 0.0;
    for rows in clusters.values() {
        let c = mean(rows);
        between += rows.len() as f64 * sq(&c, &global);
        within += rows.iter().map(|&r| sq(&features[r], &c)).sum::<f64>();
    }
    if within < 1e-12 {
        return Err(Error::Contract(format!("degenerate clusters: within-scatter trace {within:e}")));
    }
    Ok((between / (k - 1) as f64) / (within / (m - k) as f64))
}

/// Cut-offs reported by [`evaluate`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalKs {
    pub recall: Vec<usize>,
    pub subset_recall: Vec<usize>,
    pub map: Vec<usize>,
    pub per_query_recall: Vec<usize>,
}

impl Default for EvalKs {
    fn default() -> Self {
        Self {
            recall: vec![1, 5, 10, 50],
            subset_recall: vec![1, 2, 3],
            map: vec![5, 10, 25, 50],
            per_query_recall: vec![1, 2, 3],
        }
    }
}

/// Aggregated metrics of one system over a query set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub queries: usize,
    pub config_fingerprint: String,
    /// Metric name (`recall@5`, `subset_recall@1`, `map@5`, ...) to value.
    pub metrics: BTreeMap<String, f64>,
    pub calinski_harabasz: Option<f64>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Runs every metric for precomputed composed features (one row per query).
pub fn evaluate(
    system: &str,
    queries: &[QuerySpec],
    query_features: &[Vec<f32>],
    index: &GalleryIndex,
    ks: &EvalKs,
    config_fingerprint: &str,
) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("query set".into()));
    }
    if queries.len() != query_features.len() {
        return Err(Error::Contract(format!(
            "{} queries, {} feature rows",
            queries.len(),
            query_features.len()
        )));
    }
    let max_k = ks.recall.iter().chain(&ks.map).copied().max().unwrap_or(1).max(1);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut add = |name: String, v: f64| *sums.entry(name).or_insert(0.0) += v;
    for (q, f) in queries.iter().zip(query_features) {
        q.validate(index)?;
        let ranked: RankedList = retrieve(f, index, max_k, None)?;
        let ids = ranked.ids();
        for &k in &ks.recall {
            add(format!("recall@{k}"), f64::from(u8::from(recall_at_k(&ids, &q.ground_truth_ids, k))));
        }
        for &k in &ks.map {
            add(format!("map@{k}"), average_precision_at_k(&ids, &q.ground_truth_ids, k));
        }
        if q.subset_ids.is_some() {
            for &k in &ks.subset_recall {
                add(format!("subset_recall@{k}"), f64::from(u8::from(subset_recall_at_k(f, index, q, k)?)));
            }
        }
        if let Some(list) = &q.per_query_gallery_ids {
            let k_max = ks.per_query_recall.iter().copied().max().unwrap_or(1);
            let r = retrieve(f, index, k_max, Some(list))?;
            for &k in &ks.per_query_recall {
                add(format!("per_query_recall@{k}"), f64::from(u8::from(recall_at_k(&r.ids(), &q.ground_truth_ids, k))));
            }
        }
    }
    let n = queries.len() as f64;
    let metrics = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
    Ok(MetricsReport {
        system: system.to_string(),
        queries: queries.len(),
        config_fingerprint: config_fingerprint.to_string(),
        metrics,
        calinski_harabasz: None,
    })
}

/// CH index of query features grouped by target, over the `top` targets
/// with the most queries (ties by target text).
pub fn target_cluster_score(queries: &[QuerySpec], query_features: &[Vec<f32>], top: usize) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry(q.target.as_str()).or_default().push(i);
    }
    let mut ordered: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    ordered.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(b.0)));
    ordered.truncate(top);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (label, (_, rows)) in ordered.iter().enumerate() {
        for &r in rows {
            feats.push(query_features[r].iter().map(|&x| x as f64).collect());
            labels.push(label);
        }
    }
    calinski_harabasz(&feats, &labels)
}
