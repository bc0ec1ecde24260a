//! User embedding export and 2-D principal-component projection.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::detect::Detector;
use crate::error::{Result, SegaError};
use crate::graph::{Label, Split};
use crate::pipeline::Prepared;
use crate::prefs::{preference_summary, Emotion, PreferenceCache, PreferenceProfile, Topic};

/// Selects users by label, split, or the topic/emotion of their majority pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExportFilter {
    #[default]
    All,
    Label(Label),
    Split(Split),
    Topic(Topic),
    Emotion(Emotion),
}

impl ExportFilter {
    /// Parses `field=value`, e.g. `emotion=anger` or `label=troll`.
    pub fn parse(s: &str) -> Result<Self> {
        let (field, value) = s
            .split_once('=')
            .ok_or_else(|| SegaError::Config(format!("filter `{s}` is not of the form field=value")))?;
        let value = value.trim();
        let bad = |what: &str| SegaError::Config(format!("unknown {what} `{value}` in filter"));
        Ok(match field.trim() {
            "label" => ExportFilter::Label(Label::parse(value).ok_or_else(|| bad("label"))?),
            "split" => ExportFilter::Split(Split::parse(value).ok_or_else(|| bad("split"))?),
            "topic" => ExportFilter::Topic(
                Topic::ALL
                    .into_iter()
                    .find(|t| t.as_str().eq_ignore_ascii_case(value))
                    .ok_or_else(|| bad("topic"))?,
            ),
            "emotion" => ExportFilter::Emotion(
                Emotion::ALL
                    .into_iter()
                    .find(|e| e.as_str().eq_ignore_ascii_case(value))
                    .ok_or_else(|| bad("emotion"))?,
            ),
            other => {
                return Err(SegaError::Config(format!(
                    "unknown filter field `{other}`; expected label, split, topic or emotion"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportRow {
    pub id: String,
    pub label: Option<Label>,
    pub embedding: Vec<f32>,
}

/// Eval-mode user embeddings, filtered and ordered by user id.
pub fn export_rows(detector: &Detector, prep: &Prepared, prefs: Option<&PreferenceCache>, filter: ExportFilter) -> Result<Vec<ExportRow>> {
    let needs_prefs = matches!(filter, ExportFilter::Topic(_) | ExportFilter::Emotion(_));
    if needs_prefs && prefs.is_none() {
        return Err(SegaError::Config("topic and emotion filters need a preference cache".into()));
    }
    let z = detector.user_embeddings(&prep.inputs, &prep.index)?;
    let mut rows = Vec::new();
    for (u, embedding) in prep.graph.users().iter().zip(z) {
        let majority = match prefs.and_then(|c| c.get(&u.id)) {
            Some(pairs) if needs_prefs => {
                let p = PreferenceProfile::from_pairs(&u.id, pairs);
                if p.is_empty() {
                    None
                } else {
                    Some(preference_summary(&p)?.max)
                }
            }
            _ => None,
        };
        let keep = match filter {
            ExportFilter::All => true,
            ExportFilter::Label(l) => u.label == Some(l),
            ExportFilter::Split(s) => u.split == Some(s),
            ExportFilter::Topic(t) => majority.is_some_and(|m| m.0 == t),
            ExportFilter::Emotion(e) => majority.is_some_and(|m| m.1 == e),
        };
        if keep {
            rows.push(ExportRow {
                id: u.id.clone(),
                label: u.label,
                embedding,
            });
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(rows)
}

/// Projection onto the two leading principal components of the centered
/// data. Each axis is signed so its largest-magnitude loading is positive.
pub fn pca2(data: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = data.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d) {
        return Err(SegaError::Invalid("rows of unequal width".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).clone_owned();
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut out = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                out[k] = row.iter().zip(axis.iter()).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect())
}

fn label_str(label: Option<Label>) -> &'static str {
    label.map_or("", Label::as_str)
}

/// `user_id,label,e0..e{d-1}`.
pub fn write_embeddings_csv(path: &Path, rows: &[ExportRow]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.embedding.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| SegaError::io(path, e.into()))?;
    let mut header = vec!["user_id".to_string(), "label".to_string()];
    header.extend((0..width).map(|k| format!("e{k}")));
    let io = |e: csv::Error| SegaError::io(path, e.into());
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), label_str(r.label).to_string()];
        rec.extend(r.embedding.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| SegaError::io(path, e))
}

/// `user_id,label,pc1,pc2`.
pub fn write_pca_csv(path: &Path, rows: &[ExportRow]) -> Result<()> {
    let data: Vec<Vec<f64>> = rows.iter().map(|r| r.embedding.iter().map(|&v| f64::from(v)).collect()).collect();
    let points = pca2(&data)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| SegaError::io(path, e.into()))?;
    let io = |e: csv::Error| SegaError::io(path, e.into());
    w.write_record(["user_id", "label", "pc1", "pc2"]).map_err(io)?;
    for (r, p) in rows.iter().zip(points) {
        w.write_record([r.id.clone(), label_str(r.label).to_string(), p[0].to_string(), p[1].to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| SegaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_parsing() {
        assert_eq!(ExportFilter::parse("emotion=Anger").unwrap(), ExportFilter::Emotion(Emotion::Anger));
        assert_eq!(ExportFilter::parse("label=troll").unwrap(), ExportFilter::Label(Label::Troll));
        assert!(ExportFilter::parse("colour=red").is_err());
        assert!(ExportFilter::parse("emotion").is_err());
        assert!(ExportFilter::parse("topic=cooking").is_err());
    }

    #[test]
    fn pca_of_a_line() {
        let data: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let p = pca2(&data).unwrap();
        let s5 = 5f64.sqrt();
        for (i, q) in p.iter().enumerate() {
            assert!((q[0] - (i as f64 - 2.0) * s5).abs() < 1e-9);
            assert!(q[1].abs() < 1e-9);
        }
    }
}
