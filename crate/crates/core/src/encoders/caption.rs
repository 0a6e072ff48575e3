use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "[UNK]";
pub const DEFAULT_MAX_TOKENS: usize = 77;

/// Coarse part-of-speech tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Det,
    Conj,
    Prep,
    Other,
}

impl Pos {
    pub fn is_content(self) -> bool {
        matches!(self, Pos::Noun | Pos::Verb | Pos::Adj)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Noun => "NOUN",
            Pos::Verb => "VERB",
            Pos::Adj => "ADJ",
            Pos::Det => "DET",
            Pos::Conj => "CONJ",
            Pos::Prep => "PREP",
            Pos::Other => "OTHER",
        }
    }
}

/// Tagged token sequence describing one person.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<String>,
    pub pos_tags: Vec<Pos>,
    pub identity_id: u32,
    /// Image this caption was written for, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_index: Option<usize>,
}

impl Caption {
    pub fn new(tokens: Vec<String>, pos_tags: Vec<Pos>, identity_id: u32) -> Result<Self> {
        let c = Caption {
            tokens,
            pos_tags,
            identity_id,
            image_index: None,
        };
        c.validate()?;
        Ok(c)
    }

    /// Tags `text` with the built-in closed-class tagger.
    pub fn from_text(text: &str, identity_id: u32) -> Result<Self> {
        let tokens = tokenize(text);
        let tags = Tagger::default().tag(&tokens);
        Caption::new(tokens, tags, identity_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Input("caption has no tokens".into()));
        }
        if self.tokens.len() != self.pos_tags.len() {
            return Err(Error::Input(format!(
                "caption has {} tokens but {} tags",
                self.tokens.len(),
                self.pos_tags.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn positions_of(&self, pred: impl Fn(Pos) -> bool) -> Vec<usize> {
        self.pos_tags
            .iter()
            .enumerate()
            .filter(|(_, &p)| pred(p))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Lowercases and splits on whitespace, detaching trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let w = raw.to_lowercase();
        let trimmed = w.trim_end_matches(|c: char| ",.;:!?".contains(c));
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for c in w[trimmed.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "their", "its", "some",
    "each", "every", "another",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "nor", "while", "yet", "so"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "with", "of", "over", "under", "by", "from", "to", "into", "near",
    "behind", "beside", "across", "along", "through", "without", "for",
];
const FUNCTION_WORDS: &[&str] = &[
    "is", "are", "was", "were", "be", "he", "she", "it", "they", "who", "wearing", "has",
    "have", ",", ".", ";", ":", "!", "?",
];

/// Closed-class lexicon tagger: function-word lists, an adjective lexicon,
/// an action lexicon, and NOUN for everything else.
#[derive(Clone, Debug)]
pub struct Tagger {
    adjectives: HashSet<String>,
    verbs: HashSet<String>,
}

impl Default for Tagger {
    fn default() -> Self {
        let catalog = crate::harness::Catalog::default();
        Tagger::new(
            catalog.adjective_words().map(str::to_string),
            catalog.verb_words().map(str::to_string),
        )
    }
}

impl Tagger {
    pub fn new(
        adjectives: impl IntoIterator<Item = String>,
        verbs: impl IntoIterator<Item = String>,
    ) -> Self {
        Tagger {
            adjectives: adjectives.into_iter().collect(),
            verbs: verbs.into_iter().collect(),
        }
    }

    pub fn tag_word(&self, w: &str) -> Pos {
        if DETERMINERS.contains(&w) {
            Pos::Det
        } else if CONJUNCTIONS.contains(&w) {
            Pos::Conj
        } else if PREPOSITIONS.contains(&w) {
            Pos::Prep
        } else if FUNCTION_WORDS.contains(&w) || w == UNK_TOKEN {
            Pos::Other
        } else if self.adjectives.contains(w) {
            Pos::Adj
        } else if self.verbs.contains(w) {
            Pos::Verb
        } else {
            Pos::Noun
        }
    }

    pub fn tag(&self, tokens: &[String]) -> Vec<Pos> {
        tokens.iter().map(|t| self.tag_word(t)).collect()
    }
}

/// Token-to-id table; id 0 is reserved for unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_words(f.words)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { words: v.words }
    }
}

/// Result of mapping a caption onto vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<u32>,
    /// Set when the caption exceeded `max_tokens` and was cut.
    pub truncated: bool,
}

impl Vocab {
    /// Builds a sorted vocabulary over `words`, with `[UNK]` at id 0.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = words.into_iter().filter(|w| *w != UNK_TOKEN).collect();
        let mut all = vec![UNK_TOKEN.to_string()];
        all.extend(set.into_iter().map(str::to_string));
        Vocab::from_words(all)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, caption: &Caption, max_tokens: usize) -> Result<TokenIds> {
        caption.validate()?;
        let truncated = caption.len() > max_tokens;
        if truncated {
            log::warn!(
                "caption with {} tokens truncated to {max_tokens}",
                caption.len()
            );
        }
        let ids = caption
            .tokens
            .iter()
            .take(max_tokens)
            .map(|t| self.id(t))
            .collect();
        Ok(TokenIds { ids, truncated })
    }
}

pub fn read_captions_jsonl(path: &Path) -> Result<Vec<Caption>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Caption = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        c.validate()
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_captions_jsonl(path: &Path, captions: &[Caption]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in captions {
        serde_json::to_writer(&mut f, c)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
