//! Cloze prompts and their masked counterparts.
//!
//! Layout: `[CLS] <sentence> . it is [MASK] . [SEP]`. The sentence body is
//! the only region masked for the masked-LM objective.

use rand::seq::index;
use rand::Rng;

use crate::corpus::{Vocabulary, CLS, MASK, SEP};
use crate::error::{Error, Result};

/// Template words that must be present in any vocabulary used for prompts.
pub const TEMPLATE_WORDS: [&str; 3] = [".", "it", "is"];
/// Tokens in the frame around the sentence body.
pub const FRAME_TOKENS: usize = 7;
/// Masking rate used by both auxiliary objectives.
pub const DEFAULT_MASK_RATE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub ids: Vec<usize>,
    pub mask_slot: usize,
}

impl Prompt {
    pub fn body_len(&self) -> usize {
        self.ids.len() - FRAME_TOKENS
    }

    /// Positions of the sentence body.
    pub fn body(&self) -> std::ops::Range<usize> {
        1..1 + self.body_len()
    }

    pub fn body_ids(&self) -> &[usize] {
        &self.ids[self.body()]
    }
}

/// Original and masked prompt for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub original_ids: Vec<usize>,
    pub masked_ids: Vec<usize>,
    pub mask_slot: usize,
    /// Sorted body positions replaced by `[MASK]`.
    pub mlm_positions: Vec<usize>,
    pub mlm_gold_ids: Vec<usize>,
}

impl PromptPair {
    pub fn masked_prompt(&self) -> Prompt {
        Prompt {
            ids: self.masked_ids.clone(),
            mask_slot: self.mask_slot,
        }
    }
}

/// Frame token ids, `[period, it, is]`.
fn template_ids(vocab: &Vocabulary) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for (slot, word) in out.iter_mut().zip(TEMPLATE_WORDS) {
        *slot = vocab
            .id(word)
            .ok_or_else(|| Error::Prompt(format!("template word `{word}` missing from vocabulary")))?;
    }
    Ok(out)
}

/// Wraps a sentence in the cloze template, truncating the sentence from the
/// right so the whole prompt fits in `max_len`.
pub fn build_prompt(sentence_ids: &[usize], vocab: &Vocabulary, max_len: usize) -> Result<Prompt> {
    if sentence_ids.is_empty() {
        return Err(Error::Prompt("empty sentence".into()));
    }
    if max_len < FRAME_TOKENS + 1 {
        return Err(Error::Prompt(format!(
            "max length {max_len} cannot hold the {FRAME_TOKENS}-token frame and one sentence token"
        )));
    }
    let [period, it, is] = template_ids(vocab)?;
    let keep = sentence_ids.len().min(max_len - FRAME_TOKENS);
    let mut ids = Vec::with_capacity(keep + FRAME_TOKENS);
    ids.push(CLS);
    ids.extend_from_slice(&sentence_ids[..keep]);
    ids.extend_from_slice(&[period, it, is]);
    let mask_slot = ids.len();
    ids.extend_from_slice(&[MASK, period, SEP]);
    Ok(Prompt { ids, mask_slot })
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// `max(1, round(rate · body_len))` for positive rates, capped at the body.
pub fn mask_count(rate: f64, body_len: usize) -> usize {
    if rate <= 0.0 || body_len == 0 {
        return 0;
    }
    round_half_up(rate * body_len as f64).clamp(1, body_len)
}

/// Replaces a uniformly chosen subset of body tokens with `[MASK]`.
pub fn mask_sentence<R: Rng>(prompt: &Prompt, rate: f64, rng: &mut R) -> PromptPair {
    debug_assert!((0.0..=1.0).contains(&rate));
    let body = prompt.body();
    let k = mask_count(rate, body.len());
    let mut positions: Vec<usize> = index::sample(rng, body.len(), k)
        .into_iter()
        .map(|i| body.start + i)
        .collect();
    positions.sort_unstable();
    let mut masked = prompt.ids.clone();
    let gold = positions
        .iter()
        .map(|&p| std::mem::replace(&mut masked[p], MASK))
        .collect();
    PromptPair {
        original_ids: prompt.ids.clone(),
        masked_ids: masked,
        mask_slot: prompt.mask_slot,
        mlm_positions: positions,
        mlm_gold_ids: gold,
    }
}

/// Fraction of body tokens masked over `trials` passes of `prompts`.
pub fn expected_mask_rate_audit<R: Rng>(prompts: &[Prompt], rate: f64, trials: usize, rng: &mut R) -> f64 {
    let mut masked = 0usize;
    let mut total = 0usize;
    for _ in 0..trials {
        for p in prompts {
            masked += mask_sentence(p, rate, rng).mlm_positions.len();
            total += p.body_len();
        }
    }
    if total == 0 {
        0.0
    } else {
        masked as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Verbalizer, VocabOptions};
    use crate::rng;

    fn vocab() -> Vocabulary {
        let opts = VocabOptions {
            reserved: TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        build_vocab(["great movie w0 w1 w2"], &Verbalizer::default(), &opts).unwrap()
    }

    #[test]
    fn layout_matches_template() {
        let v = vocab();
        let p = build_prompt(&v.encode("great movie"), &v, 64).unwrap();
        assert_eq!(v.decode(&p.ids), "[CLS] great movie . it is [MASK] . [SEP]");
        assert_eq!(p.ids[p.mask_slot], MASK);
        assert_eq!(p.body_len(), 2);
    }

    #[test]
    fn single_token_fits_minimum_length() {
        let v = vocab();
        let p = build_prompt(&v.encode("great"), &v, 8).unwrap();
        assert_eq!(p.ids.len(), 8);
        assert!(build_prompt(&v.encode("great"), &v, 7).is_err());
    }

    #[test]
    fn long_sentence_truncated_from_right() {
        let v = vocab();
        let ids: Vec<usize> = (0..600).map(|i| 7 + i % 3).collect();
        let p = build_prompt(&ids, &v, 512).unwrap();
        assert_eq!(p.ids.len(), 512);
        assert_eq!(p.body_len(), 505);
        assert_eq!(p.body_ids(), &ids[..505]);
    }

    #[test]
    fn empty_sentence_rejected() {
        let v = vocab();
        assert!(build_prompt(&[], &v, 16).is_err());
    }

    #[test]
    fn missing_template_word_rejected() {
        let v = build_vocab(["x"], &Verbalizer::default(), &VocabOptions::default()).unwrap();
        assert!(matches!(build_prompt(&[5], &v, 16), Err(Error::Prompt(_))));
    }

    fn body_prompt(len: usize) -> Prompt {
        let v = vocab();
        let ids: Vec<usize> = (0..len).map(|i| 10 + i % 3).collect();
        build_prompt(&ids, &v, 64).unwrap()
    }

    #[test]
    fn rate_zero_masks_nothing() {
        let p = body_prompt(9);
        let pair = mask_sentence(&p, 0.0, &mut rng::seeded(0));
        assert_eq!(pair.masked_ids, pair.original_ids);
        assert!(pair.mlm_positions.is_empty());
    }

    #[test]
    fn rate_one_masks_whole_body() {
        let p = body_prompt(9);
        let pair = mask_sentence(&p, 1.0, &mut rng::seeded(0));
        assert_eq!(pair.mlm_positions, (1..10).collect::<Vec<_>>());
    }

    #[test]
    fn thirty_percent_of_ten_is_three() {
        let p = body_prompt(10);
        let pair = mask_sentence(&p, 0.3, &mut rng::seeded(2));
        assert_eq!(pair.mlm_positions.len(), 3);
    }

    #[test]
    fn count_rule() {
        assert_eq!(mask_count(0.3, 1), 1);
        assert_eq!(mask_count(0.3, 5), 2); // 1.5 rounds up
        assert_eq!(mask_count(0.3, 12), 4);
        assert_eq!(mask_count(0.0, 12), 0);
        assert_eq!(mask_count(0.01, 3), 1);
    }

    #[test]
    fn audit_edge_rates() {
        let prompts: Vec<Prompt> = (5..=12).map(body_prompt).collect();
        let mut r = rng::seeded(4);
        assert_eq!(expected_mask_rate_audit(&prompts, 0.0, 3, &mut r), 0.0);
        assert_eq!(expected_mask_rate_audit(&prompts, 1.0, 3, &mut r), 1.0);
    }
}
