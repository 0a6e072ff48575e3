//! Discriminative clue correction: pick secondarily relevant words as a cue
//! and contrast the cue against pooled image features.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoders::{Caption, EncodedItem};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DccParams {
    /// Cue words per caption.
    pub k: usize,
    /// Lower edge of the relevance band, as a percentile rank.
    pub band_lo: f64,
    /// Upper edge (exclusive) of the relevance band.
    pub band_hi: f64,
    pub tau: f64,
}

impl Default for DccParams {
    fn default() -> Self {
        DccParams {
            k: 5,
            band_lo: 40.0,
            band_hi: 80.0,
            tau: 0.07,
        }
    }
}

impl DccParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Input("cue size k must be at least 1".into()));
        }
        if !(0.0 <= self.band_lo && self.band_lo < self.band_hi && self.band_hi <= 100.0) {
            return Err(Error::Input(format!(
                "band must satisfy 0 <= lo < hi <= 100, got {}..{}",
                self.band_lo, self.band_hi
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Input(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `(token index, relevance)` pairs, most relevant first.
pub type RelevanceProfile = Vec<(usize, f64)>;

/// Relevance of token `j` is `max_i cos(v_i, t_j)`; sorted descending with
/// ties in index order.
pub fn word_relevance_profile<T: Real>(
    text_item: &EncodedItem<T>,
    image_item: &EncodedItem<T>,
) -> Result<RelevanceProfile> {
    relevance_from_rows(&text_item.locals, &image_item.locals)
}

pub fn relevance_from_rows<T: Real>(tokens: &Tensor<T>, regions: &Tensor<T>) -> Result<RelevanceProfile> {
    if tokens.cols() != regions.cols() {
        return Err(Error::dim("relevance", tokens.shape(), regions.shape()));
    }
    let mut profile = Vec::with_capacity(tokens.rows());
    for j in 0..tokens.rows() {
        let mut best = f64::NEG_INFINITY;
        for i in 0..regions.rows() {
            best = best.max(cosine(regions.row(i), tokens.row(j))?.as_f64());
        }
        profile.push((j, best));
    }
    sort_profile(&mut profile);
    Ok(profile)
}

pub fn sort_profile(profile: &mut RelevanceProfile) {
    profile.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Percentile rank of every entry: 100 x (entries strictly more relevant) / M.
pub fn percentile_ranks(profile: &RelevanceProfile) -> Vec<f64> {
    let m = profile.len() as f64;
    profile
        .iter()
        .map(|&(_, r)| 100.0 * profile.iter().filter(|&&(_, o)| o > r).count() as f64 / m)
        .collect()
}

/// Selected token positions and whether the fallback was used.
pub fn cue_indices(profile: &RelevanceProfile, params: &DccParams) -> Result<(Vec<usize>, bool)> {
    if profile.is_empty() {
        return Err(Error::Input("relevance profile is empty".into()));
    }
    let ranks = percentile_ranks(profile);
    let band: Vec<usize> = profile
        .iter()
        .zip(&ranks)
        .filter(|(_, &p)| params.band_lo <= p && p < params.band_hi)
        .map(|(&(j, _), _)| j)
        .take(params.k)
        .collect();
    if !band.is_empty() {
        return Ok((band, false));
    }
    let start = if profile.len() > 1 { 1 } else { 0 };
    let fallback = profile[start..]
        .iter()
        .take(params.k)
        .map(|&(j, _)| j)
        .collect();
    Ok((fallback, true))
}

/// Pooled cue over secondarily relevant words.
#[derive(Clone, Debug, PartialEq)]
pub struct CueState<T> {
    pub word_indices: Vec<usize>,
    /// Mean of the selected token features.
    pub cue_embedding: Tensor<T>,
    pub similarity_band: (f64, f64),
    /// The band was empty and ranks 2..K+1 were used instead.
    pub fallback: bool,
}

pub fn build_cue_state<T: Real>(
    profile: &RelevanceProfile,
    token_feats: &Tensor<T>,
    params: &DccParams,
) -> Result<CueState<T>> {
    params.validate()?;
    if profile.len() != token_feats.rows() {
        return Err(Error::Shape(format!(
            "profile covers {} tokens, features have {} rows",
            profile.len(),
            token_feats.rows()
        )));
    }
    let (word_indices, fallback) = cue_indices(profile, params)?;
    let d = token_feats.cols();
    let mut r = vec![T::zero(); d];
    for &j in &word_indices {
        for (acc, &v) in r.iter_mut().zip(token_feats.row(j)) {
            *acc = *acc + v;
        }
    }
    let scale = T::one() / T::of(word_indices.len() as f64);
    r.iter_mut().for_each(|x| *x = *x * scale);
    if !(r.iter().map(|&x| x * x).sum::<T>() > T::zero()) {
        return Err(Error::Degenerate {
            op: "build_cue_state",
            reason: "cue embedding has zero norm".into(),
        });
    }
    Ok(CueState {
        word_indices,
        cue_embedding: Tensor::vector(r)?,
        similarity_band: (params.band_lo, params.band_hi),
        fallback,
    })
}

/// Cue embedding on a tape: mean of the selected rows of `token_feats`.
pub fn cue_on_tape<T: Real>(tape: &mut Tape<T>, token_feats: Var, indices: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(token_feats, indices)?;
    Ok(tape.mean_rows(rows))
}

/// `-sum_i log softmax_j(cos(R_i, v_j) / tau)[i]` for cues `[N x D]` and
/// pooled image features `[N x D]`.
pub fn loss_ditc<T: Real>(tape: &mut Tape<T>, cues: Var, pooled_images: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(cues)[0];
    if n < 2 || tape.shape(pooled_images)[0] != n {
        return Err(Error::Input(format!(
            "cue contrast needs N >= 2 matched rows, got {} cues and {} images",
            n,
            tape.shape(pooled_images)[0]
        )));
    }
    let s = tape.cosine_matrix(cues, pooled_images)?;
    let log_p = tape.log_softmax_rows(s, T::of(tau))?;
    let eye: Vec<T> = (0..n * n)
        .map(|k| if k / n == k % n { T::one() } else { T::zero() })
        .collect();
    let eye = tape.constant(Tensor::matrix(n, n, eye)?);
    let diag = tape.mul(log_p, eye)?;
    let total = tape.sum(diag);
    Ok(tape.neg(total))
}

/// Per-token relevance table with header `token\tpos_tag\trelevance`, in
/// caption order.
pub fn profile_tsv(caption: &Caption, profile: &RelevanceProfile) -> String {
    let mut by_index = profile.clone();
    by_index.sort_by_key(|&(j, _)| j);
    let mut out = String::from("token\tpos_tag\trelevance\n");
    for (j, r) in by_index {
        let _ = writeln!(
            out,
            "{}\t{}\t{r:.6}",
            caption.tokens[j],
            caption.pos_tags[j].as_str()
        );
    }
    out
}
