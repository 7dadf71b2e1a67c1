//! Controlled domain-shift corpora.
//!
//! Every sentence is neutral filler plus one or more sentiment words that all
//! share the sentence's polarity. Each sentiment word is drawn from the
//! sentence's own domain-aware bank with probability `p_aware`, otherwise
//! from the invariant bank shared by all domains. Filler words come from a
//! neutral bank shared by all domains plus the domain's own neutral words.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Label};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBanks {
    pub name: String,
    pub aware_positive: Vec<String>,
    pub aware_negative: Vec<String>,
    /// Domain-specific filler, used alongside the shared neutral bank.
    #[serde(default)]
    pub neutral: Vec<String>,
}

impl DomainBanks {
    /// Pseudo-word banks named after the domain.
    pub fn generated(name: &str, sentiment_words: usize, neutral_words: usize) -> Self {
        let stem = name.to_lowercase();
        let bank = |kind: &str, n: usize| (0..n).map(|i| format!("{stem}{kind}{i}")).collect();
        Self {
            name: name.to_string(),
            aware_positive: bank("pos", sentiment_words),
            aware_negative: bank("neg", sentiment_words),
            neutral: bank("w", neutral_words),
        }
    }

    pub fn aware(&self, label: Label) -> &[String] {
        match label {
            Label::Positive => &self.aware_positive,
            Label::Negative => &self.aware_negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainBanks>,
    pub invariant_positive: Vec<String>,
    pub invariant_negative: Vec<String>,
    /// Filler shared by all domains.
    pub neutral: Vec<String>,
    /// Inclusive sentence length range in words.
    pub sentence_length: [usize; 2],
    /// Inclusive range for the number of sentiment words per sentence.
    pub sentiment_words: [usize; 2],
    pub p_aware: f64,
    pub labeled_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_domains(&["A", "B"])
    }
}

impl SyntheticSpec {
    pub fn with_domains(names: &[&str]) -> Self {
        Self {
            domains: names.iter().map(|n| DomainBanks::generated(n, 8, 0)).collect(),
            invariant_positive: (0..8).map(|i| format!("ipos{i}")).collect(),
            invariant_negative: (0..8).map(|i| format!("ineg{i}")).collect(),
            neutral: (0..60).map(|i| format!("w{i}")).collect(),
            sentence_length: [5, 12],
            sentiment_words: [1, 3],
            p_aware: 0.7,
            labeled_per_domain: 2000,
            unlabeled_per_domain: 4000,
            seed: 0,
        }
    }

    pub fn invariant(&self, label: Label) -> &[String] {
        match label {
            Label::Positive => &self.invariant_positive,
            Label::Negative => &self.invariant_negative,
        }
    }

    pub fn domain(&self, name: &str) -> Option<&DomainBanks> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::SyntheticSpec(m));
        if !(0.0..=1.0).contains(&self.p_aware) {
            return err(format!("p_aware {} outside [0, 1]", self.p_aware));
        }
        let [lo, hi] = self.sentence_length;
        if lo == 0 || lo > hi {
            return err(format!("invalid sentence length range {lo}..={hi}"));
        }
        let [slo, shi] = self.sentiment_words;
        if slo == 0 || slo > shi {
            return err(format!("invalid sentiment word range {slo}..={shi}"));
        }
        if slo > lo {
            return err("sentences shorter than the minimum sentiment word count".into());
        }
        if self.domains.is_empty() {
            return err("no domains".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return err(format!("duplicate domain `{}`", d.name));
            }
        }

        let mut owner: BTreeMap<&str, String> = BTreeMap::new();
        let mut banks: Vec<(String, &[String])> = vec![
            ("invariant_positive".into(), &self.invariant_positive),
            ("invariant_negative".into(), &self.invariant_negative),
            ("neutral".into(), &self.neutral),
        ];
        for d in &self.domains {
            banks.push((format!("{}.aware_positive", d.name), &d.aware_positive));
            banks.push((format!("{}.aware_negative", d.name), &d.aware_negative));
            banks.push((format!("{}.neutral", d.name), &d.neutral));
        }
        for (bank, words) in &banks {
            for w in words.iter() {
                if super::tokenize(w) != [w.clone()] {
                    return err(format!("word `{w}` in {bank} is not a single normalized token"));
                }
                if let Some(prev) = owner.insert(w, bank.clone()) {
                    return err(format!("word `{w}` appears in both {prev} and {bank}"));
                }
            }
        }

        let needs_invariant = self.p_aware < 1.0;
        let needs_aware = self.p_aware > 0.0;
        for label in Label::ALL {
            if needs_invariant && self.invariant(label).is_empty() {
                return err(format!("invariant {label} bank is empty but p_aware < 1"));
            }
        }
        for d in &self.domains {
            for label in Label::ALL {
                if needs_aware && d.aware(label).is_empty() {
                    return err(format!("{}.aware_{label} bank is empty but p_aware > 0", d.name));
                }
            }
            if hi > slo && d.neutral.is_empty() && self.neutral.is_empty() {
                return err(format!("no neutral words available for {}", d.name));
            }
        }
        Ok(())
    }

    /// Polarity of a word according to the banks, if it carries one.
    pub fn polarity(&self, word: &str) -> Option<Label> {
        for label in Label::ALL {
            if self.invariant(label).iter().any(|w| w == word)
                || self.domains.iter().any(|d| d.aware(label).iter().any(|w| w == word))
            {
                return Some(label);
            }
        }
        None
    }

    /// Whether `word` is in any domain-aware bank.
    pub fn is_aware(&self, word: &str) -> bool {
        self.domains.iter().any(|d| {
            d.aware_positive.iter().chain(&d.aware_negative).any(|w| w == word)
        })
    }

    /// One sentence of `domain` with polarity `label`. `aware_only` forces
    /// every sentiment word to come from the domain-aware bank.
    pub fn sentence<R: Rng>(
        &self,
        domain: &DomainBanks,
        label: Label,
        slots: usize,
        aware_only: bool,
        rng: &mut R,
    ) -> String {
        let [lo, hi] = self.sentence_length;
        let len = rng.random_range(lo..=hi).max(slots);
        let sentiment: BTreeSet<usize> = index::sample(rng, len, slots).into_iter().collect();
        let mut words = Vec::with_capacity(len);
        for pos in 0..len {
            let bank = if sentiment.contains(&pos) {
                if aware_only || rng.random_bool(self.p_aware) {
                    domain.aware(label)
                } else {
                    self.invariant(label)
                }
            } else {
                let k = rng.random_range(0..self.neutral.len() + domain.neutral.len());
                words.push(self.neutral.get(k).unwrap_or_else(|| &domain.neutral[k - self.neutral.len()]).as_str());
                continue;
            };
            words.push(bank.choose(rng).expect("validated non-empty").as_str());
        }
        words.join(" ")
    }

    fn slot_count<R: Rng>(&self, rng: &mut R) -> usize {
        let [slo, shi] = self.sentiment_words;
        rng.random_range(slo..=shi)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DomainCorpus {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
}

/// Labeled sets are exactly balanced (positives take the extra one when
/// the count is odd) and shuffled; unlabeled sentences have random polarity.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<BTreeMap<String, DomainCorpus>> {
    spec.validate()?;
    let mut out = BTreeMap::new();
    for domain in &spec.domains {
        let mut rng = rng::stream(spec.seed, &format!("synthetic/{}", domain.name));
        let n = spec.labeled_per_domain;
        let mut labeled: Vec<Example> = (0..n)
            .map(|i| {
                let label = if i < n.div_ceil(2) {
                    Label::Positive
                } else {
                    Label::Negative
                };
                let slots = spec.slot_count(&mut rng);
                let text = spec.sentence(domain, label, slots, false, &mut rng);
                Example::labeled(text, label, domain.name.clone())
            })
            .collect();
        labeled.shuffle(&mut rng);
        let unlabeled = (0..spec.unlabeled_per_domain)
            .map(|_| {
                let label = if rng.random_bool(0.5) {
                    Label::Positive
                } else {
                    Label::Negative
                };
                let slots = spec.slot_count(&mut rng);
                Example::unlabeled(
                    spec.sentence(domain, label, slots, false, &mut rng),
                    domain.name.clone(),
                )
            })
            .collect();
        out.insert(domain.name.clone(), DomainCorpus { labeled, unlabeled });
    }
    Ok(out)
}

/// Sentence whose only sentiment-bearing word is domain-aware.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditSentence {
    pub text: String,
    pub label: Label,
    pub aware_word: String,
}

pub fn audit_sentences<R: Rng>(
    spec: &SyntheticSpec,
    domain: &str,
    count: usize,
    rng: &mut R,
) -> Result<Vec<AuditSentence>> {
    spec.validate()?;
    let banks = spec
        .domain(domain)
        .ok_or_else(|| Error::SyntheticSpec(format!("unknown domain `{domain}`")))?;
    if banks.aware_positive.is_empty() || banks.aware_negative.is_empty() {
        return Err(Error::SyntheticSpec(format!("{domain} has no domain-aware words")));
    }
    Ok((0..count)
        .map(|i| {
            let label = Label::ALL[i % 2];
            let text = spec.sentence(banks, label, 1, true, rng);
            let aware_word = text
                .split(' ')
                .find(|w| spec.is_aware(w))
                .expect("one aware word planted")
                .to_string();
            AuditSentence {
                text,
                label,
                aware_word,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p_aware: f64) -> SyntheticSpec {
        SyntheticSpec {
            p_aware,
            labeled_per_domain: 200,
            unlabeled_per_domain: 100,
            seed: 3,
            ..Default::default()
        }
    }

    fn sentiment_words<'a>(spec: &SyntheticSpec, text: &'a str) -> Vec<&'a str> {
        text.split(' ').filter(|w| spec.polarity(w).is_some()).collect()
    }

    #[test]
    fn default_matches_documented_shape() {
        let s = SyntheticSpec::default();
        assert_eq!(s.domains.len(), 2);
        assert_eq!(s.neutral.len(), 60);
        assert!(s.domains[0].neutral.is_empty());
        assert_eq!(s.invariant_positive.len(), 8);
        assert_eq!(s.domains[1].aware_negative.len(), 8);
        assert_eq!(s.sentence_length, [5, 12]);
        assert_eq!(s.p_aware, 0.7);
        assert_eq!((s.labeled_per_domain, s.unlabeled_per_domain), (2000, 4000));
        s.validate().unwrap();
    }

    #[test]
    fn p_aware_zero_never_uses_aware_words() {
        let spec = small(0.0);
        for c in generate_synthetic(&spec).unwrap().values() {
            for e in c.labeled.iter().chain(&c.unlabeled) {
                assert!(e.text.split(' ').all(|w| !spec.is_aware(w)));
            }
        }
    }

    #[test]
    fn p_aware_one_uses_only_aware_words() {
        let spec = small(1.0);
        for c in generate_synthetic(&spec).unwrap().values() {
            for e in &c.labeled {
                let ws = sentiment_words(&spec, &e.text);
                assert!(!ws.is_empty());
                assert!(ws.iter().all(|w| spec.is_aware(w)));
            }
        }
    }

    #[test]
    fn aware_words_belong_to_own_domain() {
        let spec = small(0.7);
        for (name, c) in generate_synthetic(&spec).unwrap() {
            let own = spec.domain(&name).unwrap();
            for e in &c.labeled {
                for w in sentiment_words(&spec, &e.text) {
                    if spec.is_aware(w) {
                        assert!(own.aware_positive.iter().chain(&own.aware_negative).any(|x| x == w));
                    }
                }
            }
        }
    }

    #[test]
    fn labeled_sets_are_balanced() {
        let c = generate_synthetic(&small(0.5)).unwrap();
        for dc in c.values() {
            let pos = dc.labeled.iter().filter(|e| e.label == Some(Label::Positive)).count();
            assert_eq!(pos, 100);
            assert!(dc.unlabeled.iter().all(|e| e.label.is_none()));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = small(0.7);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 4, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn empty_aware_bank_rejected_when_needed() {
        let mut spec = small(0.5);
        spec.domains[0].aware_positive.clear();
        assert!(matches!(spec.validate(), Err(Error::SyntheticSpec(_))));
        spec.p_aware = 0.0;
        spec.validate().unwrap();
    }

    #[test]
    fn overlapping_banks_rejected() {
        let mut spec = small(0.5);
        spec.domains[1].neutral.push("ipos0".into());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn invalid_probability_rejected() {
        assert!(small(1.5).validate().is_err());
    }

    #[test]
    fn audit_sentences_plant_one_aware_word() {
        let spec = small(0.7);
        let mut r = rng::seeded(1);
        let s = audit_sentences(&spec, "B", 20, &mut r).unwrap();
        for a in &s {
            let ws = sentiment_words(&spec, &a.text);
            assert_eq!(ws, vec![a.aware_word.as_str()]);
            assert_eq!(spec.polarity(&a.aware_word), Some(a.label));
        }
    }
}
