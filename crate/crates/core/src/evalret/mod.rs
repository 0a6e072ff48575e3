//! Retrieval evaluation: similarity matrices, ranked galleries, Rank-K
//! accuracy, mean average precision and report files.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{similarity_rows_from_bytes, similarity_rows_to_bytes, EncodedItem};
use crate::error::{Error, Result};
use crate::numerics::cosine;

/// Query-by-gallery cosine similarities of global features.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows x cols`.
    pub values: Vec<f32>,
    pub query_ids: Vec<u32>,
    pub gallery_ids: Vec<u32>,
}

impl SimilarityMatrix {
    pub fn new(values: Vec<f32>, query_ids: Vec<u32>, gallery_ids: Vec<u32>) -> Result<Self> {
        let (rows, cols) = (query_ids.len(), gallery_ids.len());
        if rows == 0 || cols == 0 {
            return Err(Error::Input("similarity matrix needs queries and gallery items".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows} x {cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(SimilarityMatrix {
            rows,
            cols,
            values,
            query_ids,
            gallery_ids,
        })
    }

    /// Cosine similarity between every query global and every gallery global.
    pub fn from_items(queries: &[EncodedItem<f32>], gallery: &[EncodedItem<f32>]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = queries
            .par_iter()
            .map(|q| {
                gallery
                    .iter()
                    .map(|g| cosine(q.global_feat.data(), g.global_feat.data()))
                    .collect::<Result<Vec<f32>>>()
            })
            .collect::<Result<_>>()?;
        SimilarityMatrix::new(
            rows.concat(),
            queries.iter().map(|q| q.identity_id).collect(),
            gallery.iter().map(|g| g.identity_id).collect(),
        )
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.values[q * self.cols..(q + 1) * self.cols]
    }

    /// Bank-format export with modality tag 2.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        similarity_rows_to_bytes(&self.query_ids, self.cols, &self.values)
    }

    /// Reads rows written by [`SimilarityMatrix::to_bytes`]; gallery
    /// identities are not stored in that layout and must be supplied.
    pub fn from_bytes(buf: &[u8], gallery_ids: Vec<u32>) -> Result<Self> {
        let (ids, cols, values) = similarity_rows_from_bytes(buf)?;
        if cols != gallery_ids.len() {
            return Err(Error::Shape(format!(
                "file has {cols} columns, {} gallery identities given",
                gallery_ids.len()
            )));
        }
        SimilarityMatrix::new(values, ids, gallery_ids)
    }
}

/// Per query, gallery positions by descending similarity; ties by index.
pub fn rank_gallery(sim: &SimilarityMatrix) -> Vec<Vec<usize>> {
    (0..sim.rows)
        .into_par_iter()
        .map(|q| rank_row(sim.row(q)))
        .collect()
}

pub fn rank_row(row: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// Percentage of queries whose identity appears in the top `k`.
pub fn rank_k_accuracy(
    ranked: &[Vec<usize>],
    query_ids: &[u32],
    gallery_ids: &[u32],
    k: usize,
) -> Result<f64> {
    if k == 0 || k > gallery_ids.len() {
        return Err(Error::Input(format!(
            "K = {k} must lie in 1..={}",
            gallery_ids.len()
        )));
    }
    check_ranked(ranked, query_ids)?;
    let hits = ranked
        .iter()
        .zip(query_ids)
        .filter(|(order, &qid)| order[..k].iter().any(|&g| gallery_ids[g] == qid))
        .count();
    Ok(100.0 * hits as f64 / ranked.len() as f64)
}

/// Average precision of one ranked list in `[0, 1]`.
pub fn average_precision(order: &[usize], relevant: impl Fn(usize) -> bool) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &g) in order.iter().enumerate() {
        if relevant(g) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

/// Mean over queries of average precision, as a percentage.
pub fn mean_average_precision(ranked: &[Vec<usize>], query_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    check_ranked(ranked, query_ids)?;
    let mut total = 0.0;
    for (q, (order, &qid)) in ranked.iter().zip(query_ids).enumerate() {
        let ap = average_precision(order, |g| gallery_ids[g] == qid).ok_or_else(|| {
            Error::Input(format!("query {q} (identity {qid}) has no relevant gallery item"))
        })?;
        total += ap;
    }
    Ok(100.0 * total / ranked.len() as f64)
}

fn check_ranked(ranked: &[Vec<usize>], query_ids: &[u32]) -> Result<()> {
    if ranked.is_empty() || ranked.len() != query_ids.len() {
        return Err(Error::Input(format!(
            "{} rankings for {} queries",
            ranked.len(),
            query_ids.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Gallery identities in ranked order, one list per query.
    pub ranked_ids: Vec<Vec<u32>>,
    pub fingerprint: String,
    pub seed: u64,
}

impl RetrievalReport {
    /// Scores a similarity matrix. Rank-K for K beyond the gallery size is
    /// reported as the full-gallery hit rate.
    pub fn from_similarity(sim: &SimilarityMatrix, fingerprint: String, seed: u64) -> Result<Self> {
        let ranked = rank_gallery(sim);
        let at = |k: usize| rank_k_accuracy(&ranked, &sim.query_ids, &sim.gallery_ids, k.min(sim.cols));
        let report = RetrievalReport {
            rank1: at(1)?,
            rank5: at(5)?,
            rank10: at(10)?,
            map: mean_average_precision(&ranked, &sim.query_ids, &sim.gallery_ids)?,
            ranked_ids: ranked
                .iter()
                .map(|o| o.iter().map(|&g| sim.gallery_ids[g]).collect())
                .collect(),
            fingerprint,
            seed,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.rank1
            && self.rank1 <= self.rank5
            && self.rank5 <= self.rank10
            && self.rank10 <= 100.0
            && (0.0..=100.0).contains(&self.map);
        if !ok {
            return Err(Error::Input(format!(
                "inconsistent report: rank1 {} rank5 {} rank10 {} map {}",
                self.rank1, self.rank5, self.rank10, self.map
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Tsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "tsv" => Ok(ReportFormat::Tsv),
            _ => Err(Error::Input(format!("unknown report format `{s}`"))),
        }
    }
}

pub const TSV_HEADER: &str = "rank1\trank5\trank10\tmap";

/// Serializes a report. TSV carries the metric row under [`TSV_HEADER`]
/// followed by a `#` line with fingerprint and seed.
pub fn render_report(report: &RetrievalReport, format: ReportFormat) -> Result<String> {
    report.validate()?;
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Tsv => {
            let mut s = String::new();
            let _ = writeln!(s, "{TSV_HEADER}");
            let _ = writeln!(
                s,
                "{:.4}\t{:.4}\t{:.4}\t{:.4}",
                report.rank1, report.rank5, report.rank10, report.map
            );
            let _ = writeln!(s, "# fingerprint={} seed={}", report.fingerprint, report.seed);
            s
        }
    })
}

pub fn emit_report(report: &RetrievalReport, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn fingerprint<S: Serialize>(value: &S) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}
