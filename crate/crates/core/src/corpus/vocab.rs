use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{tokenize, Label};
use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

/// Label words read at the template's mask slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verbalizer {
    pub positive: String,
    pub negative: String,
}

impl Default for Verbalizer {
    fn default() -> Self {
        Self {
            positive: "great".into(),
            negative: "bad".into(),
        }
    }
}

impl Verbalizer {
    pub fn word(&self, label: Label) -> &str {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }

    fn validate(&self) -> Result<()> {
        for label in Label::ALL {
            let w = self.word(label);
            if SPECIAL_TOKENS.contains(&w) {
                return Err(Error::Vocab(format!(
                    "verbalizer word `{w}` collides with a special token"
                )));
            }
            if tokenize(w) != [w.to_string()] {
                return Err(Error::Vocab(format!(
                    "verbalizer word `{w}` is not a single normalized token"
                )));
            }
        }
        if self.positive == self.negative {
            return Err(Error::Vocab("verbalizer words must differ per label".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabOptions {
    /// Corpus tokens seen fewer times than this map to `[UNK]`.
    pub min_frequency: usize,
    /// Always included regardless of frequency (e.g. template words).
    pub reserved: Vec<String>,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self {
            min_frequency: 1,
            reserved: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: BTreeMap<String, usize>,
    verbalizer: Verbalizer,
    verbalizer_ids: [usize; 2],
}

/// Specials, then verbalizer words, reserved words, and corpus tokens with
/// `count >= min_frequency` in lexical order.
pub fn build_vocab<'a, I>(texts: I, verbalizer: &Verbalizer, options: &VocabOptions) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    verbalizer.validate()?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut push = |t: &str, tokens: &mut Vec<String>| {
        if seen.insert(t.to_string()) {
            tokens.push(t.to_string());
        }
    };
    push(&verbalizer.positive, &mut tokens);
    push(&verbalizer.negative, &mut tokens);
    for r in &options.reserved {
        push(r, &mut tokens);
    }
    for (tok, &c) in &counts {
        if c >= options.min_frequency.max(1) {
            push(tok, &mut tokens);
        }
    }
    Vocabulary::from_tokens(tokens, counts, verbalizer.clone())
}

impl Vocabulary {
    fn from_tokens(
        id_to_token: Vec<String>,
        counts: BTreeMap<String, usize>,
        verbalizer: Verbalizer,
    ) -> Result<Self> {
        verbalizer.validate()?;
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocab(format!("special token {s} must have id {i}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let lookup = |w: &str| {
            token_to_id
                .get(w)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("verbalizer word `{w}` missing from vocabulary")))
        };
        let verbalizer_ids = [lookup(&verbalizer.positive)?, lookup(&verbalizer.negative)?];
        Ok(Self {
            token_to_id,
            id_to_token,
            counts,
            verbalizer,
            verbalizer_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Corpus frequency of each token seen while building.
    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    pub fn verbalizer(&self) -> &Verbalizer {
        &self.verbalizer
    }

    /// Token ids indexed by [`Label::index`].
    pub fn verbalizer_ids(&self) -> [usize; 2] {
        self.verbalizer_ids
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect();
        toks.join(" ")
    }

    /// `{token: id}` JSON object.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("map serializes")
    }

    /// Parses a `{token: id}` object; ids must be exactly `0..n`.
    pub fn from_json(text: &str, verbalizer: &Verbalizer) -> Result<Self> {
        let map: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| Error::Vocab(e.to_string()))?;
        let n = map.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        for (tok, id) in map {
            let slot = slots
                .get_mut(id)
                .ok_or_else(|| Error::Vocab(format!("id {id} out of range for {n} tokens")))?;
            if slot.is_some() {
                return Err(Error::Vocab(format!("id {id} assigned twice")));
            }
            *slot = Some(tok);
        }
        let tokens = slots.into_iter().map(|s| s.expect("dense ids")).collect();
        Self::from_tokens(tokens, BTreeMap::new(), verbalizer.clone())
    }
}
