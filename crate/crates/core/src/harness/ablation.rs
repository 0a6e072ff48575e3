//! Toggle ablations and the frequent-noun masking probe.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::train::{evaluate, evaluate_captions, train, LossWeights, Toggles, TrainConfig};
use crate::encoders::{Caption, Pos, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::evalret::{fingerprint, RetrievalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    /// Replaces the base loss weights for this row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
}

impl AblationRow {
    pub fn new(name: &str, imr_t: bool, imr_v: bool, cmr: bool, dcc: bool) -> Self {
        AblationRow {
            name: name.into(),
            toggles: Toggles {
                imr_t,
                imr_v,
                cmr,
                dcc,
                global_align: true,
            },
            weights: None,
        }
    }
}

/// The nine rows of the component table: baseline, the four single
/// pathways, both intra-modal paths, those plus refinement or correction,
/// and everything.
pub fn table_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("0", false, false, false, false),
        AblationRow::new("I", true, false, false, false),
        AblationRow::new("II", false, true, false, false),
        AblationRow::new("III", false, false, true, false),
        AblationRow::new("IV", false, false, false, true),
        AblationRow::new("V", true, true, false, false),
        AblationRow::new("VI", true, true, true, false),
        AblationRow::new("VII", true, true, false, true),
        AblationRow::new("VIII", true, true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Shared settings; each row overrides only the toggles.
    pub base: TrainConfig,
    #[serde(default = "table_rows")]
    pub rows: Vec<AblationRow>,
    /// When set, every row is also scored on captions with this many
    /// frequent nouns masked.
    #[serde(default)]
    pub mask_k: Option<usize>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Input("ablation grid has no rows".into()));
        }
        let names: BTreeSet<&str> = self.rows.iter().map(|r| r.name.as_str()).collect();
        if names.len() != self.rows.len() {
            return Err(Error::Input("ablation row names must be unique".into()));
        }
        if self.mask_k == Some(0) {
            return Err(Error::Input("mask_k must be at least 1".into()));
        }
        self.base.validate()
    }

    pub fn row_config(&self, row: &AblationRow) -> TrainConfig {
        TrainConfig {
            toggles: row.toggles,
            weights: row.weights.clone().unwrap_or_else(|| self.base.weights.clone()),
            ..self.base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub toggles: Toggles,
    pub report: RetrievalReport,
    pub masked: Option<RetrievalReport>,
}

/// Trains and scores every row from the same seed and initial weights.
pub fn run_ablation(grid: &AblationGrid, train_data: &Dataset, test_data: &Dataset) -> Result<Vec<AblationResult>> {
    grid.validate()?;
    let masked_caps = grid.mask_k.map(|k| mask_topk_nouns(&test_data.captions, k).captions);
    let mut out = Vec::with_capacity(grid.rows.len());
    for row in &grid.rows {
        let cfg = grid.row_config(row);
        let fp = fingerprint(&cfg)?;
        log::info!("ablation row {} ({fp})", row.name);
        let outcome = train(&cfg, train_data, None)?;
        let report = evaluate(&outcome.model, test_data, fp.clone(), cfg.seed)?;
        let masked = match &masked_caps {
            Some(caps) => Some(evaluate_captions(&outcome.model, &test_data.images, caps, fp, cfg.seed)?),
            None => None,
        };
        out.push(AblationResult {
            name: row.name.clone(),
            toggles: row.toggles,
            report,
            masked,
        });
    }
    Ok(out)
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

/// One line per row: toggles then Rank-1/5/10 and mAP, plus masked Rank-1
/// and mAP when the probe ran.
pub fn ablation_tsv(results: &[AblationResult]) -> String {
    let masked = results.iter().any(|r| r.masked.is_some());
    let mut s = String::from("row\timr_t\timr_v\tcmr\tdcc\trank1\trank5\trank10\tmap");
    if masked {
        s.push_str("\tmasked_rank1\tmasked_map");
    }
    s.push('\n');
    for r in results {
        let t = &r.toggles;
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.name,
            mark(t.imr_t),
            mark(t.imr_v),
            mark(t.cmr),
            mark(t.dcc),
            r.report.rank1,
            r.report.rank5,
            r.report.rank10,
            r.report.map
        );
        if masked {
            match &r.masked {
                Some(m) => {
                    let _ = write!(s, "\t{:.4}\t{:.4}", m.rank1, m.map);
                }
                None => s.push_str("\t-\t-"),
            }
        }
        s.push('\n');
    }
    s
}

/// The `k` most frequent NOUN tokens, ties in lexicographic order.
pub fn top_nouns(captions: &[Caption], k: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in captions {
        for (t, p) in c.tokens.iter().zip(&c.pos_tags) {
            if *p == Pos::Noun {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if ranked.len() < k {
        log::warn!("only {} distinct nouns, fewer than {k}; masking all", ranked.len());
    }
    ranked.into_iter().take(k).map(|(w, _)| w.to_string()).collect()
}

/// Replaces every occurrence of `words` with the unknown token.
pub fn mask_words(captions: &[Caption], words: &[String]) -> Vec<Caption> {
    captions
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for (t, p) in c.tokens.iter_mut().zip(c.pos_tags.iter_mut()) {
                if words.contains(t) {
                    *t = UNK_TOKEN.to_string();
                    *p = Pos::Other;
                }
            }
            c
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCaptions {
    pub captions: Vec<Caption>,
    pub masked_words: Vec<String>,
}

pub fn mask_topk_nouns(captions: &[Caption], k: usize) -> MaskedCaptions {
    let masked_words = top_nouns(captions, k);
    MaskedCaptions {
        captions: mask_words(captions, &masked_words),
        masked_words,
    }
}
