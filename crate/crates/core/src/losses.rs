//! Prompt-tuning cross-entropy, masked-LM loss, self-supervised distillation
//! and their per-stage weighting.

use std::fmt;

use serde::{Deserialize, Serialize};
use xdomain_numerics::{Tape, Tensor, Var};

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the classification loss.
    pub alpha: f64,
    /// Weight on the auxiliary (masked-LM and distillation) losses.
    pub beta: f64,
}

impl LossWeights {
    pub const STAGE1: LossWeights = LossWeights { alpha: 1.0, beta: 0.6 };
    pub const STAGE2: LossWeights = LossWeights { alpha: 0.5, beta: 0.5 };

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::One => Self::STAGE1,
            Stage::Two => Self::STAGE2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Loss(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Options for the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsdOptions {
    /// Softens both distributions as `softmax(log p / T)`.
    pub temperature: f64,
    /// Computes `KL(original || masked)` instead of `KL(masked || original)`.
    pub swapped: bool,
}

impl Default for SsdOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            swapped: false,
        }
    }
}

fn check_dist(tape: &Tape, p: Var, what: &str) -> Result<()> {
    let t = tape.value(p);
    if t.shape() != [1, 2] {
        return Err(Error::Loss(format!(
            "{what} must be a 1 x 2 label distribution, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Mean over the batch of `-log p(gold)`.
pub fn pmt_loss(tape: &mut Tape, label_probs: &[Var], gold: &[Label]) -> Result<Var> {
    if label_probs.is_empty() || label_probs.len() != gold.len() {
        return Err(Error::Loss(format!(
            "{} label distributions for {} gold labels",
            label_probs.len(),
            gold.len()
        )));
    }
    let mut terms = Vec::with_capacity(gold.len());
    for (&p, &y) in label_probs.iter().zip(gold) {
        check_dist(tape, p, "label distribution")?;
        let logp = tape.log(p)?;
        terms.push(tape.select_cols(logp, &[y.index()])?);
    }
    let total = tape.add_all(&terms)?;
    let total = tape.sum(total)?;
    Ok(tape.scale(total, -1.0 / gold.len() as f64)?)
}

/// Sum over sentences of the mean `-log p(gold)` across that sentence's
/// masked positions. `token_dists[i]` is `k_i × V`.
pub fn mlm_loss(tape: &mut Tape, token_dists: &[Var], gold_ids: &[Vec<usize>]) -> Result<Var> {
    if token_dists.is_empty() || token_dists.len() != gold_ids.len() {
        return Err(Error::Loss(format!(
            "{} token distributions for {} gold sequences",
            token_dists.len(),
            gold_ids.len()
        )));
    }
    let mut per_sentence = Vec::with_capacity(gold_ids.len());
    for (&dist, gold) in token_dists.iter().zip(gold_ids) {
        let shape = tape.value(dist).shape().to_vec();
        let [k, v] = shape[..] else {
            return Err(Error::Loss(format!("token distribution shape {shape:?} is not 2-d")));
        };
        if k != gold.len() || k == 0 {
            return Err(Error::Loss(format!("{k} masked positions but {} gold ids", gold.len())));
        }
        let mut pick = vec![0.0; k * v];
        for (r, &g) in gold.iter().enumerate() {
            if g >= v {
                return Err(Error::TokenOutOfRange { id: g, vocab_size: v });
            }
            pick[r * v + g] = 1.0;
        }
        let pick = tape.constant(Tensor::matrix(k, v, pick)?)?;
        let logp = tape.log(dist)?;
        let chosen = tape.mul(logp, pick)?;
        let s = tape.sum(chosen)?;
        per_sentence.push(tape.scale(s, -1.0 / k as f64)?);
    }
    Ok(tape.add_all(&per_sentence)?)
}

fn soften(tape: &mut Tape, p: Var, temperature: f64) -> Result<Var> {
    if temperature == 1.0 {
        return Ok(p);
    }
    let logp = tape.log(p)?;
    let scaled = tape.scale(logp, 1.0 / temperature)?;
    Ok(tape.softmax(scaled)?)
}

/// `Σ_batch KL(p(y|x_pm) || p(y|x_p))`. The original-prompt distributions are
/// detached here, so callers may pass live nodes.
pub fn ssd_loss(tape: &mut Tape, masked: &[Var], original: &[Var], opts: SsdOptions) -> Result<Var> {
    if masked.is_empty() || masked.len() != original.len() {
        return Err(Error::Loss(format!(
            "{} masked distributions for {} original distributions",
            masked.len(),
            original.len()
        )));
    }
    if !(opts.temperature.is_finite() && opts.temperature > 0.0) {
        return Err(Error::Loss(format!("temperature {} must be positive", opts.temperature)));
    }
    let mut terms = Vec::with_capacity(masked.len());
    for (&pm, &po) in masked.iter().zip(original) {
        check_dist(tape, pm, "masked distribution")?;
        check_dist(tape, po, "original distribution")?;
        let teacher = tape.detach(po)?;
        let student = soften(tape, pm, opts.temperature)?;
        let teacher = soften(tape, teacher, opts.temperature)?;
        let (p, q) = if opts.swapped {
            (teacher, student)
        } else {
            (student, teacher)
        };
        let logp = tape.log(p)?;
        let logq = tape.log(q)?;
        let diff = tape.sub(logp, logq)?;
        let weighted = tape.mul(p, diff)?;
        terms.push(tape.sum(weighted)?);
    }
    Ok(tape.add_all(&terms)?)
}

/// Unweighted loss values for one batch; `None` where not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub pmt: Option<f64>,
    pub mlm: Option<f64>,
    pub ssd: Option<f64>,
}

/// Which auxiliary terms a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxTerms {
    pub mlm: bool,
    pub ssd: bool,
}

impl Default for AuxTerms {
    fn default() -> Self {
        Self { mlm: true, ssd: true }
    }
}

impl AuxTerms {
    /// The distillation term only exists in Stage 2.
    pub fn for_stage(self, stage: Stage) -> Self {
        match stage {
            Stage::One => Self { ssd: false, ..self },
            Stage::Two => self,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pmt: f64,
    pub mlm: f64,
    pub ssd: f64,
    /// `alpha · pmt`.
    pub weighted_classification: f64,
    /// `beta · mlm` in Stage 1, `beta · (mlm + ssd)` in Stage 2.
    pub weighted_auxiliary: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.weighted_classification + self.weighted_auxiliary
    }
}

/// Weights the components for `stage`. Terms switched off in `terms`
/// contribute zero and need not be present.
pub fn stage_losses(stage: Stage, c: &LossComponents, weights: LossWeights, terms: AuxTerms) -> Result<LossBreakdown> {
    weights.validate()?;
    let terms = terms.for_stage(stage);
    let need = |v: Option<f64>, name: &str, on: bool| -> Result<f64> {
        if !on {
            return Ok(0.0);
        }
        let v = v.ok_or_else(|| Error::Loss(format!("stage {stage} requires the {name} loss")))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Loss(format!("{name} loss {v} is not a finite non-negative value")));
        }
        Ok(v)
    };
    let pmt = need(c.pmt, "pmt", true)?;
    let mlm = need(c.mlm, "mlm", terms.mlm)?;
    let ssd = need(c.ssd, "ssd", terms.ssd)?;
    let aux = match stage {
        Stage::One => mlm,
        Stage::Two => mlm + ssd,
    };
    Ok(LossBreakdown {
        pmt,
        mlm,
        ssd,
        weighted_classification: weights.alpha * pmt,
        weighted_auxiliary: weights.beta * aux,
    })
}
