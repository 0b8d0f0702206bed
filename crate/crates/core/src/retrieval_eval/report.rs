use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{ImageTensor, Vocabulary};
use crate::error::{io_err, Error, Result};
use crate::prompt_tuning::{composed_sequence, encode_composed_batch, Frozen, PromptState};

use super::index::{load_images, QuerySpec};
use super::metrics::MetricsReport;

/// One exported feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub label: Option<String>,
    pub features: Vec<f32>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Ingestion {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Writes `id,label,f0..f{d-1}`. Floats use the shortest round-trip form.
pub fn export_features(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.features.len());
    if rows.iter().any(|r| r.features.len() != d) {
        return Err(Error::Contract("ragged feature rows".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.label.clone().unwrap_or_default()];
        rec.extend(r.features.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn import_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |m: String| Error::Ingestion {
            path: path.to_path_buf(),
            line: i + 2,
            message: m,
        };
        if rec.len() < 2 {
            return Err(bad("row lacks id and label columns".into()));
        }
        let features = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f32>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            id: rec[0].to_string(),
            label: (!rec[1].is_empty()).then(|| rec[1].to_string()),
            features,
        });
    }
    Ok(rows)
}

/// Composed query features `f_c`, one row per query, read from `base_dir`.
pub fn compose_queries(
    frozen: Frozen<'_, f32>,
    vocab: &Vocabulary,
    state: Option<&PromptState<f32>>,
    queries: &[QuerySpec],
    base_dir: &Path,
) -> Result<Vec<Vec<f32>>> {
    let images = load_images(queries.iter().map(|q| q.image.as_str()), base_dir)?;
    compose_loaded(frozen, vocab, state, queries, &images)
}

/// Same as [`compose_queries`] with reference images already in memory.
pub fn compose_loaded(
    frozen: Frozen<'_, f32>,
    vocab: &Vocabulary,
    state: Option<&PromptState<f32>>,
    queries: &[QuerySpec],
    images: &[ImageTensor],
) -> Result<Vec<Vec<f32>>> {
    let max_len = frozen.encoder.config().max_len;
    let seqs = queries
        .iter()
        .map(|q| composed_sequence(vocab, &q.modification, max_len))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let fc = encode_composed_batch(frozen, state, &refs, &seqs)?;
    Ok((0..queries.len()).map(|i| fc.row(i).to_vec()).collect())
}

/// Aligned plain-text table, one column per system.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        for k in r.metrics.keys() {
            if !names.contains(&k.as_str()) {
                names.push(k);
            }
        }
    }
    let key_order = |n: &str| {
        let (family, k) = n.split_once('@').unwrap_or((n, "0"));
        let rank = ["recall", "subset_recall", "per_query_recall", "map"]
            .iter()
            .position(|f| *f == family)
            .unwrap_or(9);
        (rank, k.parse::<usize>().unwrap_or(0))
    };
    names.sort_by_key(|n| key_order(n));
    let width = names.iter().map(|n| n.len()).max().unwrap_or(6).max(18);
    let cols: Vec<usize> = reports.iter().map(|r| r.system.len().max(8)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "metric");
    for (r, w) in reports.iter().zip(&cols) {
        let _ = write!(out, "  {:>w$}", r.system);
    }
    out.push('\n');
    let rows = names
        .iter()
        .map(|n| (n.to_string(), reports.iter().map(|r| r.get(n)).collect::<Vec<_>>()))
        .chain(std::iter::once((
            "calinski_harabasz".to_string(),
            reports.iter().map(|r| r.calinski_harabasz).collect(),
        )))
        .chain(std::iter::once((
            "queries".to_string(),
            reports.iter().map(|r| Some(r.queries as f64)).collect(),
        )));
    for (name, values) in rows {
        if values.iter().all(Option::is_none) {
            continue;
        }
        let _ = write!(out, "{name:<width$}");
        for (v, w) in values.iter().zip(&cols) {
            match v {
                Some(x) if name == "queries" => {
                    let _ = write!(out, "  {:>w$}", *x as usize);
                }
                Some(x) => {
                    let _ = write!(out, "  {x:>w$.4}");
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt`.
pub fn write_reports(reports: &[MetricsReport], stem: &Path) -> Result<()> {
    let json = stem.with_extension("json");
    std::fs::write(&json, serde_json::to_string_pretty(reports)?).map_err(io_err(&json))?;
    let txt = stem.with_extension("txt");
    std::fs::write(&txt, render_table(reports)).map_err(io_err(&txt))
}
