//! Gradient saliency over input token embeddings.

use serde::{Deserialize, Serialize};
use xdomain_numerics::Tape;

use crate::corpus::{Label, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Readout};
use crate::prompting::build_prompt;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    /// Position in the full prompt.
    pub position: usize,
    pub raw: f64,
    /// `raw` divided by the sentence maximum.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub checkpoint: String,
    pub predicted: Label,
    /// Body tokens only, in sentence order.
    pub tokens: Vec<TokenScore>,
}

impl SaliencyReport {
    /// 1-based rank of each body token by raw score, highest first. Ties
    /// share the better rank.
    pub fn ranks(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| 1 + self.tokens.iter().filter(|o| o.raw > t.raw).count())
            .collect()
    }

    /// Plain-text bars, one line per token.
    pub fn render(&self) -> String {
        const WIDTH: usize = 30;
        let pad = self.tokens.iter().map(|t| t.token.len()).max().unwrap_or(0);
        let mut out = format!("{} (predicted {})\n", self.checkpoint, self.predicted);
        for t in &self.tokens {
            let n = (t.normalized * WIDTH as f64).round() as usize;
            out.push_str(&format!("{:<pad$} {:<WIDTH$} {:.3}\n", t.token, "#".repeat(n), t.normalized));
        }
        out
    }
}

/// Scores each body token by the L2 norm of the gradient of the predicted
/// label's logit with respect to that token's embedding row.
pub fn token_saliency(
    params: &ModelParams,
    sentence: &str,
    vocab: &Vocabulary,
    readout: Readout,
    checkpoint: &str,
) -> Result<SaliencyReport> {
    let ids = vocab.encode(sentence);
    if ids.is_empty() {
        return Err(Error::Saliency("empty sentence".into()));
    }
    let prompt = build_prompt(&ids, vocab, params.config.max_positions)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let enc = bound.encode::<Rng>(&mut tape, &prompt.ids, None)?;
    let logits = bound.label_logits(&mut tape, enc.hidden, prompt.mask_slot, readout, vocab.verbalizer_ids())?;
    let l = tape.value(logits).data();
    let predicted = if l[0] >= l[1] { Label::Positive } else { Label::Negative };
    let chosen = tape.select_cols(logits, &[predicted.index()])?;
    let grads = tape.backward(chosen)?;
    let g = grads
        .wrt(enc.token_embeddings)
        .ok_or_else(|| Error::Saliency("no gradient reached the token embeddings".into()))?;
    let raw: Vec<f64> = prompt
        .body()
        .map(|p| g.row(p).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let tokens = prompt
        .body()
        .zip(raw)
        .map(|(position, raw)| TokenScore {
            token: vocab.token(prompt.ids[position]).unwrap_or("[UNK]").to_string(),
            position,
            raw,
            normalized: if max > 0.0 { raw / max } else { 0.0 },
        })
        .collect();
    Ok(SaliencyReport {
        checkpoint: checkpoint.to_string(),
        predicted,
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenComparison {
    pub token: String,
    pub position: usize,
    pub raw_delta: f64,
    pub normalized_delta: f64,
    pub rank_a: usize,
    pub rank_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceComparison {
    pub sentence: String,
    pub a: SaliencyReport,
    pub b: SaliencyReport,
    pub tokens: Vec<TokenComparison>,
}

impl SentenceComparison {
    /// Mean rank of the selected tokens in `a` and `b`; `None` if none match.
    pub fn mean_ranks(&self, select: impl Fn(&str) -> bool) -> Option<(f64, f64)> {
        let picked: Vec<&TokenComparison> = self.tokens.iter().filter(|t| select(&t.token)).collect();
        if picked.is_empty() {
            return None;
        }
        let n = picked.len() as f64;
        Some((
            picked.iter().map(|t| t.rank_a as f64).sum::<f64>() / n,
            picked.iter().map(|t| t.rank_b as f64).sum::<f64>() / n,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sentences: Vec<SentenceComparison>,
    /// Mean over sentences containing selected tokens of
    /// `mean_rank_a - mean_rank_b`; positive means `b` ranks them higher.
    pub mean_rank_improvement: f64,
    /// Fraction of those sentences where the selected tokens rank strictly
    /// higher under `b`.
    pub improved_fraction: f64,
}

/// Paired saliency of two checkpoints over the same sentences. `select`
/// picks the tokens whose rank shift is summarized.
pub fn compare_checkpoints(
    a: (&ModelParams, &str),
    b: (&ModelParams, &str),
    sentences: &[String],
    vocab: &Vocabulary,
    readout: Readout,
    select: impl Fn(&str) -> bool,
) -> Result<Comparison> {
    b.0.config.ensure_matches(&a.0.config)?;
    let mut out = Vec::with_capacity(sentences.len());
    let mut shifts = Vec::new();
    for s in sentences {
        let ra = token_saliency(a.0, s, vocab, readout, a.1)?;
        let rb = token_saliency(b.0, s, vocab, readout, b.1)?;
        let (ranks_a, ranks_b) = (ra.ranks(), rb.ranks());
        let tokens = ra
            .tokens
            .iter()
            .zip(&rb.tokens)
            .enumerate()
            .map(|(i, (ta, tb))| TokenComparison {
                token: ta.token.clone(),
                position: ta.position,
                raw_delta: tb.raw - ta.raw,
                normalized_delta: tb.normalized - ta.normalized,
                rank_a: ranks_a[i],
                rank_b: ranks_b[i],
            })
            .collect();
        let cmp = SentenceComparison {
            sentence: s.clone(),
            a: ra,
            b: rb,
            tokens,
        };
        if let Some((ma, mb)) = cmp.mean_ranks(&select) {
            shifts.push(ma - mb);
        }
        out.push(cmp);
    }
    let n = shifts.len().max(1) as f64;
    Ok(Comparison {
        sentences: out,
        mean_rank_improvement: shifts.iter().sum::<f64>() / n,
        improved_fraction: shifts.iter().filter(|&&d| d > 0.0).count() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Verbalizer, VocabOptions};
    use crate::model::ModelConfig;
    use crate::prompting::TEMPLATE_WORDS;
    use crate::rng;

    fn setup() -> (ModelParams, Vocabulary) {
        let opts = VocabOptions {
            reserved: TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        let vocab = build_vocab(["the screen is sharp and fast"], &Verbalizer::default(), &opts).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_positions: 20,
            vocab_size: vocab.len(),
            ..Default::default()
        };
        (ModelParams::init(&cfg, &mut rng::seeded(3)).unwrap(), vocab)
    }

    #[test]
    fn one_score_per_body_token() {
        let (p, v) = setup();
        let r = token_saliency(&p, "sharp screen sharp", &v, Readout::Verbalizer, "x").unwrap();
        let words: Vec<&str> = r.tokens.iter().map(|t| t.token.as_str()).collect();
        assert_eq!(words, ["sharp", "screen", "sharp"]);
        assert!(r.tokens.iter().all(|t| t.raw >= 0.0));
        assert_ne!(r.tokens[0].raw, r.tokens[2].raw);
        assert!(r.tokens.iter().any(|t| t.normalized == 1.0));
        assert!(!words.contains(&"fast"));
    }

    #[test]
    fn empty_sentence_rejected() {
        let (p, v) = setup();
        assert!(token_saliency(&p, "   ", &v, Readout::Verbalizer, "x").is_err());
    }

    #[test]
    fn identical_checkpoints_have_zero_deltas() {
        let (p, v) = setup();
        let s = vec!["the screen is fast".to_string(), "sharp".to_string()];
        let c = compare_checkpoints((&p, "a"), (&p, "b"), &s, &v, Readout::Verbalizer, |w| w == "fast").unwrap();
        assert!(c.sentences.iter().flat_map(|s| &s.tokens).all(|t| t.raw_delta == 0.0 && t.rank_a == t.rank_b));
        assert_eq!(c.mean_rank_improvement, 0.0);
    }

    #[test]
    fn ranks_order_by_score() {
        let r = SaliencyReport {
            checkpoint: "x".into(),
            predicted: Label::Positive,
            tokens: [0.2, 0.9, 0.5]
                .iter()
                .enumerate()
                .map(|(i, &raw)| TokenScore {
                    token: format!("t{i}"),
                    position: i + 1,
                    raw,
                    normalized: raw / 0.9,
                })
                .collect(),
        };
        assert_eq!(r.ranks(), [3, 1, 2]);
        assert_eq!(r.render().lines().count(), 4);
    }
}
