//! Textual granularities: the concatenated global text, the three local
//! sentences and a color-type prompt built by extract, vote and template.
//! Also the hashed bag-of-words featurizer feeding the text encoder.

use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{OmgError, Result};

pub const DEFAULT_COLORS: &str = "\
black
white
gray
grey=gray
silver
red
blue
green
brown
maroon
gold
yellow
orange
purple
";

pub const DEFAULT_TYPES: &str = "\
sedan
SUV
truck
pickup
pickup truck
van
minivan
wagon
hatchback
coupe
jeep
bus
cargo truck
";

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Phrase table mapping (possibly multi-word) surface forms to canonical
/// lowercase tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconTable {
    /// (phrase tokens, canonical), longest phrases first
    phrases: Vec<(Vec<String>, String)>,
    /// canonical -> written form used in prompts
    display: HashMap<String, String>,
    /// canonical entries in file order
    canonical: Vec<String>,
}

impl LexiconTable {
    /// Parses one entry per line; `alias=canonical` maps an alias. Blank lines
    /// and `#` comments are skipped. The written case of a canonical entry is
    /// kept for display ("SUV"); matching is case-insensitive.
    pub fn parse(source: &str) -> Result<Self> {
        let mut phrases = Vec::new();
        let mut display = HashMap::new();
        let mut canonical = Vec::new();
        let mut aliases = Vec::new();
        for (lineno, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, target) = match line.split_once('=') {
                Some((alias, target)) => (alias.trim(), Some(target.trim())),
                None => (line, None),
            };
            let tokens = tokenize(surface);
            if tokens.is_empty() {
                return Err(OmgError::InvalidArgument(format!(
                    "lexicon line {}: empty entry",
                    lineno + 1
                )));
            }
            match target {
                Some(target) => aliases.push((tokens, tokenize(target).join(" "))),
                None => {
                    let key = tokens.join(" ");
                    if !display.contains_key(&key) {
                        display.insert(
                            key.clone(),
                            surface.split_whitespace().collect::<Vec<_>>().join(" "),
                        );
                        canonical.push(key.clone());
                    }
                    phrases.push((tokens, key));
                }
            }
        }
        for (tokens, target) in aliases {
            if !display.contains_key(&target) {
                return Err(OmgError::InvalidArgument(format!(
                    "lexicon alias {} points at unknown entry {target:?}",
                    tokens.join(" ")
                )));
            }
            phrases.push((tokens, target));
        }
        phrases.sort_by_key(|p| std::cmp::Reverse(p.0.len()));
        Ok(Self {
            phrases,
            display,
            canonical,
        })
    }

    /// Canonical form of the leftmost phrase in `tokens`, longest match first.
    pub fn first_match(&self, tokens: &[String]) -> Option<&str> {
        (0..tokens.len()).find_map(|start| {
            self.phrases
                .iter()
                .find(|(phrase, _)| tokens[start..].starts_with(phrase))
                .map(|(_, canonical)| canonical.as_str())
        })
    }

    pub fn display<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.display
            .get(canonical)
            .map_or(canonical, String::as_str)
    }

    pub fn contains(&self, canonical: &str) -> bool {
        self.display.contains_key(canonical)
    }

    pub fn canonical_entries(&self) -> &[String] {
        &self.canonical
    }
}

/// Color and vehicle-type vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub colors: LexiconTable,
    pub types: LexiconTable,
}

impl Lexicon {
    pub fn parse(colors: &str, types: &str) -> Result<Self> {
        Ok(Self {
            colors: LexiconTable::parse(colors)?,
            types: LexiconTable::parse(types)?,
        })
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_COLORS, DEFAULT_TYPES).expect("embedded lexicons parse")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributePair {
    pub color: Option<String>,
    pub vtype: Option<String>,
}

impl AttributePair {
    pub fn new(color: Option<&str>, vtype: Option<&str>) -> Self {
        Self {
            color: color.map(str::to_owned),
            vtype: vtype.map(str::to_owned),
        }
    }
}

/// Leftmost color and leftmost vehicle type mentioned in a sentence.
pub fn extract_color_type(sentence: &str, lexicon: &Lexicon) -> AttributePair {
    let tokens = tokenize(sentence);
    AttributePair::new(
        lexicon.colors.first_match(&tokens),
        lexicon.types.first_match(&tokens),
    )
}

fn vote_field<'a>(values: impl Iterator<Item = Option<&'a String>>) -> Option<String> {
    // (value, count) in order of first appearance
    let mut tally: Vec<(&String, usize)> = Vec::new();
    for v in values.flatten() {
        match tally.iter_mut().find(|(seen, _)| *seen == v) {
            Some(entry) => entry.1 += 1,
            None => tally.push((v, 1)),
        }
    }
    let mut best: Option<(&String, usize)> = None;
    for (v, n) in tally {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((v, n));
        }
    }
    best.map(|(v, _)| v.clone())
}

/// Per-field majority over the three sentence extractions; ties go to the
/// value seen first.
pub fn vote_attributes(pairs: &[AttributePair; 3]) -> AttributePair {
    AttributePair {
        color: vote_field(pairs.iter().map(|p| p.color.as_ref())),
        vtype: vote_field(pairs.iter().map(|p| p.vtype.as_ref())),
    }
}

/// `"This is a [COLOR] [TYPE]"`; a missing color is dropped and a missing
/// type becomes "vehicle".
pub fn generate_prompt(attrs: &AttributePair, lexicon: &Lexicon) -> String {
    let vtype = attrs
        .vtype
        .as_deref()
        .map_or("vehicle", |t| lexicon.types.display(t));
    match attrs.color.as_deref() {
        Some(color) => format!("This is a {} {vtype}", lexicon.colors.display(color)),
        None => format!("This is a {vtype}"),
    }
}

/// Joins the sentences with single spaces, giving each a closing period.
pub fn build_global_text(sentences: &[String; 3]) -> String {
    sentences
        .iter()
        .map(|s| {
            let s = s.trim();
            if s.ends_with(['.', '!', '?']) {
                s.to_owned()
            } else {
                format!("{s}.")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// The five text inputs of one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTexts {
    pub global_text: String,
    pub local_texts: [String; 3],
    pub prompt_text: String,
    pub attributes: AttributePair,
}

impl QueryTexts {
    pub fn from_sentences(sentences: &[String; 3], lexicon: &Lexicon) -> Self {
        let pairs = [
            extract_color_type(&sentences[0], lexicon),
            extract_color_type(&sentences[1], lexicon),
            extract_color_type(&sentences[2], lexicon),
        ];
        let attributes = vote_attributes(&pairs);
        Self {
            global_text: build_global_text(sentences),
            local_texts: sentences.clone(),
            prompt_text: generate_prompt(&attributes, lexicon),
            attributes,
        }
    }
}

/// Stable 64-bit FNV-1a hash of a token.
pub fn token_hash(token: &str) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(token.as_bytes());
    hasher.finish()
}

/// Signed hashed bag of words, L2-normalized. The bucket is the hash modulo
/// `dim` and the sign comes from the top hash bit. Text without tokens maps
/// to the zero vector.
pub fn featurize_text(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(OmgError::InvalidArgument(
            "feature dimension must be at least 1".into(),
        ));
    }
    let mut v = vec![0.0f64; dim];
    for token in tokenize(text) {
        let h = token_hash(&token);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}
