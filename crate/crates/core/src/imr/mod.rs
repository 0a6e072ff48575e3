//! Intra-modal reasoning: hard text and image negatives and the separation
//! and contrastive losses over them.

mod perturb;

pub use perturb::{
    differing_positions, perturb, perturb_tier1_noun_swap, perturb_tier2_substitute,
    perturb_tier3_mask_fill, perturb_with_fallback, read_word_list, sample_fill, CorpusStats,
    Lexicon, Tier,
};

use serde::{Deserialize, Serialize};

use crate::encoders::{Caption, EmbeddingBank, EncodedItem, Modality};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImrLossParams {
    /// Hinge margin.
    pub alpha: f64,
    /// Scale inside the contrastive softplus.
    pub gamma: f64,
    /// Visual negatives per anchor.
    pub k: usize,
    /// Use raw cosine similarity as `D` instead of cosine distance.
    pub d_as_similarity: bool,
}

impl Default for ImrLossParams {
    fn default() -> Self {
        ImrLossParams {
            alpha: 0.2,
            gamma: 8.0,
            k: 5,
            d_as_similarity: false,
        }
    }
}

impl ImrLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::Input(format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Input(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NegativeItem {
    Text(Caption),
    /// Gallery position of a mined image.
    Visual {
        index: usize,
        identity_id: u32,
        similarity: f32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Negative {
    pub item: NegativeItem,
    pub tier: Tier,
    /// Rule that produced the item, e.g. a fallback from a requested tier.
    pub provenance: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NegativeSet {
    /// Position of the anchor in its batch or gallery.
    pub anchor_ref: usize,
    pub negatives: Vec<Negative>,
    /// Fewer negatives were available than requested.
    pub shortfall: bool,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negatives.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &Caption> {
        self.negatives.iter().filter_map(|n| match &n.item {
            NegativeItem::Text(c) => Some(c),
            _ => None,
        })
    }

    pub fn visual_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.negatives.iter().filter_map(|n| match n.item {
            NegativeItem::Visual { index, .. } => Some(index),
            _ => None,
        })
    }
}

/// One negative per text tier, each falling back to later tiers when its
/// own rule does not apply. Tier `t` uses seed `seed + t`.
pub fn text_negatives(
    anchor_ref: usize,
    cap: &Caption,
    lexicon: &Lexicon,
    stats: &CorpusStats,
    seed: u64,
) -> NegativeSet {
    let mut set = NegativeSet {
        anchor_ref,
        ..NegativeSet::default()
    };
    for (i, &tier) in Tier::TEXT.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        match perturb_with_fallback(cap, tier, lexicon, stats, s) {
            Some((used, c)) => {
                let provenance = if used == tier {
                    format!("tier{}", i + 1)
                } else {
                    format!("tier{} via tier{}", i + 1, used.number().unwrap_or(0))
                };
                set.negatives.push(Negative {
                    item: NegativeItem::Text(c),
                    tier: used,
                    provenance,
                });
            }
            None => set.shortfall = true,
        }
    }
    set
}

/// Top-`k` gallery items of other identities by global cosine similarity to
/// `anchor`; ties go to the lower gallery index.
pub fn mine_visual_negatives(
    anchor: &EncodedItem<f32>,
    gallery: &EmbeddingBank,
    k: usize,
) -> Result<NegativeSet> {
    if gallery.modality() != Modality::Image {
        return Err(Error::Input("visual negatives need an image gallery".into()));
    }
    let globals: Vec<&[f32]> = gallery.items().iter().map(|it| it.global_feat.data()).collect();
    let ids = gallery.identities();
    mine_from_globals(anchor.global_feat.data(), anchor.identity_id, &globals, &ids, k, None)
}

/// Mining over raw global vectors. `skip` excludes one extra position.
pub fn mine_from_globals(
    anchor: &[f32],
    anchor_id: u32,
    globals: &[&[f32]],
    ids: &[u32],
    k: usize,
    skip: Option<usize>,
) -> Result<NegativeSet> {
    if globals.len() != ids.len() {
        return Err(Error::Shape(format!(
            "{} gallery vectors but {} identities",
            globals.len(),
            ids.len()
        )));
    }
    let mut scored = Vec::new();
    for (i, g) in globals.iter().enumerate() {
        if ids[i] == anchor_id || Some(i) == skip {
            continue;
        }
        scored.push((i, cosine(anchor, g)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let shortfall = scored.len() < k;
    if shortfall {
        log::warn!(
            "only {} gallery items of other identities, {k} requested",
            scored.len()
        );
    }
    let negatives = scored
        .into_iter()
        .take(k)
        .map(|(index, similarity)| Negative {
            item: NegativeItem::Visual {
                index,
                identity_id: ids[index],
                similarity,
            },
            tier: Tier::Visual,
            provenance: "top-k visual".into(),
        })
        .collect();
    Ok(NegativeSet {
        anchor_ref: 0,
        negatives,
        shortfall,
    })
}

/// `D` between vector `a` and each row of `b` (`[k x D]` or `[D]`), as a
/// `[k]` vector.
fn distances<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, p: &ImrLossParams) -> Result<Var> {
    let c = tape.cosine_matrix(a, b)?;
    let k = tape.shape(c)[1];
    let c = tape.reshape(c, vec![k])?;
    Ok(if p.d_as_similarity {
        c
    } else {
        let n = tape.neg(c);
        tape.add_const(n, T::one())
    })
}

/// `max(0, alpha + D(a, p) - D(a, n))`.
pub fn loss_imr<T: Real>(
    tape: &mut Tape<T>,
    f_a: Var,
    f_p: Var,
    f_n: Var,
    p: &ImrLossParams,
) -> Result<Var> {
    let dp = distances(tape, f_a, f_p, p)?;
    let dn = distances(tape, f_a, f_n, p)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_const(diff, T::of(p.alpha));
    Ok(tape.relu(shifted))
}

/// Batch form of [`loss_imr`]: mean over anchors of the mean hinge over
/// each anchor's negatives (`negatives[i]` is `[k_i x D]`).
pub fn loss_imr_batch<T: Real>(
    tape: &mut Tape<T>,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
    p: &ImrLossParams,
) -> Result<Var> {
    check_batch(anchors, positives, negatives)?;
    let mut terms = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let dp = distances(tape, anchors[i], positives[i], p)?;
        let dn = distances(tape, anchors[i], negatives[i], p)?;
        let dp = tape.add_const(dp, T::of(p.alpha));
        let neg = tape.neg(dn);
        let diff = tape.add(neg, dp)?;
        let h = tape.relu(diff);
        terms.push(tape.mean(h));
    }
    mean_of(tape, &terms)
}

/// `(1/N) sum_i log(1 + exp(gamma (D(a_i, p_i) - min_n D(a_i, n))))`.
pub fn loss_imc<T: Real>(
    tape: &mut Tape<T>,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Var],
    p: &ImrLossParams,
) -> Result<Var> {
    check_batch(anchors, positives, negatives)?;
    let mut terms = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let dp = distances(tape, anchors[i], positives[i], p)?;
        let dn = distances(tape, anchors[i], negatives[i], p)?;
        let closest = tape.min(dn);
        let diff = tape.sub(dp, closest)?;
        let scaled = tape.scale(diff, T::of(p.gamma));
        terms.push(tape.softplus(scaled));
    }
    mean_of(tape, &terms)
}

fn check_batch(anchors: &[Var], positives: &[Var], negatives: &[Var]) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::Input("empty anchor batch".into()));
    }
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Input(format!(
            "{} anchors, {} positives, {} negative sets",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    Ok(())
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let all = tape.concat_rows(terms)?;
    Ok(tape.mean(all))
}

/// Stacks per-anchor negative vectors into `[k x D]`; an empty set is an
/// input error.
pub fn stack_negatives<T: Real>(tape: &mut Tape<T>, negs: &[Var], anchor: usize) -> Result<Var> {
    if negs.is_empty() {
        return Err(Error::Input(format!("anchor {anchor} has an empty negative set")));
    }
    tape.concat_rows(negs)
}
