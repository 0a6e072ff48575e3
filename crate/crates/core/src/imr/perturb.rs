//! Seeded caption perturbations used as hard text negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Caption, Pos};
use crate::error::{Error, Result};
use crate::harness::Catalog;

/// Which rule produced a negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Two nouns exchange positions.
    #[serde(rename = "1")]
    NounSwap,
    /// One verb or adjective replaced from the lexicon.
    #[serde(rename = "2")]
    Substitute,
    /// One content word masked and refilled from corpus statistics.
    #[serde(rename = "3")]
    MaskFill,
    /// Top-k similar image of another identity.
    Visual,
}

impl Tier {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Tier::NounSwap),
            2 => Ok(Tier::Substitute),
            3 => Ok(Tier::MaskFill),
            _ => Err(Error::Input(format!("text tier must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> Option<u8> {
        match self {
            Tier::NounSwap => Some(1),
            Tier::Substitute => Some(2),
            Tier::MaskFill => Some(3),
            Tier::Visual => None,
        }
    }

    pub const TEXT: [Tier; 3] = [Tier::NounSwap, Tier::Substitute, Tier::MaskFill];
}

/// Same-POS replacement words for verbs and adjectives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub adjectives: Vec<String>,
    pub verbs: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::from_catalog(&Catalog::default())
    }
}

impl Lexicon {
    pub fn from_catalog(c: &Catalog) -> Self {
        Lexicon {
            adjectives: c.adjective_words().map(str::to_string).collect(),
            verbs: c.verb_words().map(str::to_string).collect(),
        }
    }

    /// Reads two word-per-line files.
    pub fn from_files(adjectives: &Path, verbs: &Path) -> Result<Self> {
        Ok(Lexicon {
            adjectives: read_word_list(adjectives)?,
            verbs: read_word_list(verbs)?,
        })
    }

    pub fn words(&self, pos: Pos) -> &[String] {
        match pos {
            Pos::Adj => &self.adjectives,
            Pos::Verb => &self.verbs,
            _ => &[],
        }
    }
}

/// Word-per-line list; blank lines and `#` comments are skipped.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

/// Unigram counts of content words per POS.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    counts: BTreeMap<Pos, BTreeMap<String, u64>>,
    #[serde(default)]
    stopwords: BTreeSet<String>,
}

impl CorpusStats {
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a Caption>) -> Self {
        let mut s = CorpusStats::default();
        for c in captions {
            for (t, &p) in c.tokens.iter().zip(&c.pos_tags) {
                if p.is_content() {
                    s.add(p, t, 1);
                }
            }
        }
        s
    }

    pub fn add(&mut self, pos: Pos, word: &str, count: u64) {
        *self
            .counts
            .entry(pos)
            .or_default()
            .entry(word.to_string())
            .or_default() += count;
    }

    /// Words that are never masked.
    pub fn with_stopwords(mut self, words: impl IntoIterator<Item = String>) -> Self {
        self.stopwords.extend(words);
        self
    }

    pub fn is_stopword(&self, w: &str) -> bool {
        self.stopwords.contains(w)
    }

    pub fn count(&self, pos: Pos, word: &str) -> u64 {
        self.counts
            .get(&pos)
            .and_then(|m| m.get(word))
            .copied()
            .unwrap_or(0)
    }

    /// Same-POS candidates other than `exclude`, in lexicographic order.
    pub fn pool(&self, pos: Pos, exclude: &str) -> Vec<(&str, u64)> {
        self.counts
            .get(&pos)
            .map(|m| {
                m.iter()
                    .filter(|(w, &c)| w.as_str() != exclude && c > 0 && !self.stopwords.contains(*w))
                    .map(|(w, &c)| (w.as_str(), c))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Words of `pos` ordered by descending count, ties lexicographic.
    pub fn most_frequent(&self, pos: Pos) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self
            .counts
            .get(&pos)
            .map(|m| m.iter().map(|(w, &c)| (w.as_str(), c)).collect())
            .unwrap_or_default();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Swaps the first noun with the last noun whose word differs from it.
/// `None` when the caption has fewer than two distinct nouns.
pub fn perturb_tier1_noun_swap(cap: &Caption, _seed: u64) -> Option<Caption> {
    let nouns = cap.positions_of(|p| p == Pos::Noun);
    let &first = nouns.first()?;
    let &last = nouns
        .iter()
        .rev()
        .find(|&&i| cap.tokens[i] != cap.tokens[first])?;
    let mut out = cap.clone();
    out.tokens.swap(first, last);
    Some(out)
}

/// Replaces one seeded VERB/ADJ with a different lexicon word of the same
/// POS. `None` when no such token has an alternative.
pub fn perturb_tier2_substitute(cap: &Caption, lexicon: &Lexicon, seed: u64) -> Option<Caption> {
    let candidates: Vec<usize> = cap
        .positions_of(|p| matches!(p, Pos::Verb | Pos::Adj))
        .into_iter()
        .filter(|&i| {
            lexicon
                .words(cap.pos_tags[i])
                .iter()
                .any(|w| *w != cap.tokens[i])
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut rng = rng_for(seed);
    let pos = candidates[rng.gen_range(0..candidates.len())];
    let original = &cap.tokens[pos];
    let mut choices: Vec<&String> = lexicon
        .words(cap.pos_tags[pos])
        .iter()
        .filter(|w| *w != original)
        .collect();
    choices.sort();
    choices.dedup();
    let pick = choices[rng.gen_range(0..choices.len())].clone();
    let mut out = cap.clone();
    out.tokens[pos] = pick;
    Some(out)
}

/// Masks one seeded content word and refills it by sampling the corpus
/// unigram distribution of its POS, excluding the original word. `None`
/// when every content word has an empty candidate pool.
pub fn perturb_tier3_mask_fill(cap: &Caption, stats: &CorpusStats, seed: u64) -> Option<Caption> {
    let candidates: Vec<usize> = cap
        .positions_of(Pos::is_content)
        .into_iter()
        .filter(|&i| !stats.is_stopword(&cap.tokens[i]))
        .filter(|&i| !stats.pool(cap.pos_tags[i], &cap.tokens[i]).is_empty())
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut rng = rng_for(seed);
    let pos = candidates[rng.gen_range(0..candidates.len())];
    let fill = sample_fill(stats, cap.pos_tags[pos], &cap.tokens[pos], &mut rng)?;
    let mut out = cap.clone();
    out.tokens[pos] = fill;
    Some(out)
}

/// One categorical draw from the same-POS pool.
pub fn sample_fill<R: Rng>(stats: &CorpusStats, pos: Pos, exclude: &str, rng: &mut R) -> Option<String> {
    let pool = stats.pool(pos, exclude);
    if pool.is_empty() {
        return None;
    }
    let dist = WeightedIndex::new(pool.iter().map(|(_, c)| *c)).ok()?;
    Some(pool[dist.sample(rng)].0.to_string())
}

/// Applies one text tier.
pub fn perturb(
    cap: &Caption,
    tier: Tier,
    lexicon: &Lexicon,
    stats: &CorpusStats,
    seed: u64,
) -> Option<Caption> {
    match tier {
        Tier::NounSwap => perturb_tier1_noun_swap(cap, seed),
        Tier::Substitute => perturb_tier2_substitute(cap, lexicon, seed),
        Tier::MaskFill => perturb_tier3_mask_fill(cap, stats, seed),
        Tier::Visual => None,
    }
}

/// Tries `tier`, then each later text tier, returning the first that applies.
pub fn perturb_with_fallback(
    cap: &Caption,
    tier: Tier,
    lexicon: &Lexicon,
    stats: &CorpusStats,
    seed: u64,
) -> Option<(Tier, Caption)> {
    Tier::TEXT
        .iter()
        .filter(|&&t| t >= tier)
        .find_map(|&t| perturb(cap, t, lexicon, stats, seed).map(|c| (t, c)))
}

/// Positions where two equal-length captions differ.
pub fn differing_positions(a: &Caption, b: &Caption) -> Vec<usize> {
    a.tokens
        .iter()
        .zip(&b.tokens)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i)
        .collect()
}
