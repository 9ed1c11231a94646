// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Padding token id.
pub const PAD: TokenId = 0;
/// Blank marker for auto-encoding queries.
pub const MASK: TokenId = 1;
/// End-of-sequence marker, used as the auto-regressive baseline token.
pub const EOS: TokenId = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<mask>", "<eos>"];

/// Template placeholder for the head entity.
pub const HEAD_SLOT: &str = "HEAD";
/// Template placeholder for the answer.
pub const BLANK_SLOT: &str = "BLANK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    /// Masked prediction with bidirectional attention.
    #[serde(rename = "ae")]
    AutoEncoding,
    /// Next-token prediction with causal attention.
    #[serde(rename = "ar")]
    AutoRegressive,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::AutoEncoding, Architecture::AutoRegressive];

    pub fn tag(self) -> &'static str {
        match self {
            Self::AutoEncoding => "ae",
            Self::AutoRegressive => "ar",
        }
    }

    /// Token that replaces a word in an attribution baseline sentence.
    pub fn baseline_token(self) -> TokenId {
        match self {
            Self::AutoEncoding => MASK,
            Self::AutoRegressive => EOS,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" | "auto-encoding" => Ok(Self::AutoEncoding),
            "ar" | "auto-regressive" => Ok(Self::AutoRegressive),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// A `(head, relation, tail)` triple over entity symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub id: String,
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Surface realisation of the corpus in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lang_id: String,
    /// relation -> token pattern containing `HEAD` and `BLANK`.
    pub templates: BTreeMap<String, Vec<String>>,
    /// Entity surface forms. Entities absent here render as `<lang>:<symbol>`.
    #[serde(default)]
    pub lexicon: BTreeMap<String, Vec<String>>,
}

impl LanguageSpec {
    pub fn new(lang_id: impl Into<String>) -> Self {
        Self { lang_id: lang_id.into(), templates: BTreeMap::new(), lexicon: BTreeMap::new() }
    }

    pub fn with_template(mut self, relation: &str, pattern: &str) -> Self {
        self.templates.insert(relation.to_string(), pattern.split_whitespace().map(str::to_string).collect());
        self
    }

    pub fn with_word(mut self, entity: &str, surface: &str) -> Self {
        self.lexicon.insert(entity.to_string(), surface.split_whitespace().map(str::to_string).collect());
        self
    }

    pub fn template(&self, relation: &str) -> Result<&[String]> {
        self.templates
            .get(relation)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingTemplate { relation: relation.to_string(), lang: self.lang_id.clone() })
    }

    pub fn template_id(&self, relation: &str) -> String {
        format!("{}/{}", self.lang_id, relation)
    }

    pub fn surface(&self, entity: &str) -> Vec<String> {
        match self.lexicon.get(entity) {
            Some(tokens) => tokens.clone(),
            None => vec![format!("{}:{}", self.lang_id, entity)],
        }
    }

    /// Template words (placeholders excluded) in first-seen order.
    pub fn template_words(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for pattern in self.templates.values() {
            for tok in pattern {
                if tok != HEAD_SLOT && tok != BLANK_SLOT && seen.insert(tok.clone()) {
                    out.push(tok.clone());
                }
            }
        }
        out
    }
}

/// Symbol table over specials and every language's tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Corpus("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds the vocabulary from template words and entity surfaces, in a
    /// deterministic order: specials, then per language its template words
    /// followed by the surfaces of `entities`.
    pub fn build(languages: &[LanguageSpec], entities: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for lang in languages {
            let words = lang.template_words();
            let surfaces = entities.iter().flat_map(|e| lang.surface(e));
            for tok in words.into_iter().chain(surfaces) {
                if seen.insert(tok.clone()) {
                    tokens.push(tok);
                }
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("<?>")).collect()
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindexed(self) -> Result<Self> {
        Self::from_tokens(self.tokens)
    }
}

/// A fill-in-the-blank prompt for one fact, language and architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeQuery {
    pub id: String,
    pub fact_id: String,
    pub lang_id: String,
    pub relation: String,
    pub architecture: Architecture,
    pub tokens: Vec<TokenId>,
    /// Index of the answer slot. For auto-regressive queries this is
    /// `tokens.len()`, one past the prompt.
    pub blank_position: usize,
    pub gold_token: TokenId,
}

impl ClozeQuery {
    pub fn make_id(fact_id: &str, lang_id: &str, arch: Architecture) -> String {
        format!("{fact_id}/{lang_id}/{}", arch.tag())
    }

    /// Position whose output distribution predicts the answer.
    pub fn prediction_position(&self) -> usize {
        match self.architecture {
            Architecture::AutoEncoding => self.blank_position,
            Architecture::AutoRegressive => self.tokens.len() - 1,
        }
    }

    /// Word positions eligible for baseline substitution.
    pub fn word_positions(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| !(self.architecture == Architecture::AutoEncoding && i == self.blank_position))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An incorrect answer for a fact, drawn from another fact of the same relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrongFact {
    pub fact_id: String,
    pub lang_id: String,
    pub wrong_token: TokenId,
    /// Fact whose tail supplied the wrong answer.
    pub provenance: String,
}

/// Facts plus the languages and vocabulary they are rendered with.
#[derive(Debug, Clone)]
pub struct FactSet {
    pub facts: Vec<FactTriple>,
    pub languages: Vec<LanguageSpec>,
    pub vocab: Vocab,
}

impl FactSet {
    pub fn fact(&self, id: &str) -> Option<&FactTriple> {
        self.facts.iter().find(|f| f.id == id)
    }

    pub fn language(&self, lang_id: &str) -> Option<&LanguageSpec> {
        self.languages.iter().find(|l| l.lang_id == lang_id)
    }

    pub fn relations(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.facts.iter().map(|f| f.relation.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Head and tail symbols in fact order, deduplicated.
    pub fn entities(&self) -> Vec<String> {
        entity_list(&self.facts)
    }
}

pub(crate) fn entity_list(facts: &[FactTriple]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for f in facts {
        for e in [&f.head, &f.tail] {
            if seen.insert(e.clone()) {
                out.push(e.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_rejects_missing_specials() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn default_surface_is_language_prefixed() {
        let l = LanguageSpec::new("xx");
        assert_eq!(l.surface("e1"), vec!["xx:e1".to_string()]);
    }

    #[test]
    fn architecture_parses_both_spellings() {
        assert_eq!("ae".parse::<Architecture>().unwrap(), Architecture::AutoEncoding);
        assert_eq!("auto-regressive".parse::<Architecture>().unwrap(), Architecture::AutoRegressive);
        assert!("rnn".parse::<Architecture>().is_err());
    }
}
