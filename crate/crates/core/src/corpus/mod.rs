//! Examples, JSONL ingestion, tokenization, vocabulary, synthetic corpora
//! and train/validation splitting.

mod jsonl;
mod split;
pub mod synthetic;
mod tokenize;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use jsonl::{load_jsonl, parse_jsonl, to_jsonl, write_jsonl};
pub use split::{combine_sources, split, SplitDataset, VALIDATION_FRACTION};
pub use synthetic::{generate_synthetic, DomainBanks, DomainCorpus, SyntheticSpec};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{
    build_vocab, Verbalizer, VocabOptions, Vocabulary, CLS, MASK, PAD, SEP, SPECIAL_TOKENS, UNK,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Positive, Label::Negative];

    /// Position in label-distribution vectors.
    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Negative => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// One sentence with an optional gold label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: Option<Label>,
    pub domain: String,
}

impl Example {
    pub fn labeled(text: impl Into<String>, label: Label, domain: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: Some(label),
            domain: domain.into(),
        }
    }

    pub fn unlabeled(text: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: None,
            domain: domain.into(),
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Unlabeled copies of `examples`.
pub fn strip_labels(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| Example::unlabeled(e.text.clone(), e.domain.clone()))
        .collect()
}
