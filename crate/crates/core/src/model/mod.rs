//! Pre-layernorm transformer encoder with a masked-LM head.
//!
//! Labels are read either from the masked-LM logits at the template's mask
//! slot restricted to the verbalizer words, or from a linear head on the
//! `[CLS]` position.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use xdomain_numerics::{ParamSet, Tape, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Manifest, StorageDtype};
pub use config::ModelConfig;

use crate::corpus::PAD;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e9;

/// How the label distribution is read off the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Masked-LM logits at the mask slot, restricted to verbalizer ids.
    Verbalizer,
    /// Linear head over the `[CLS]` hidden state.
    ClsHead,
}

/// A readout together with the verbalizer ids it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelReadout {
    pub readout: Readout,
    pub verbalizer_ids: [usize; 2],
}

/// All trainable weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn layer_name(i: usize, rest: &str) -> String {
    format!("layers.{i}.{rest}")
}

/// Parameter names and shapes implied by `config`.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.model_dim;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![config.vocab_size, d]),
        ("embeddings.position".to_string(), vec![config.max_positions, d]),
    ];
    for i in 0..config.layers {
        for ln in ["ln1", "ln2"] {
            out.push((layer_name(i, &format!("{ln}.gamma")), vec![d]));
            out.push((layer_name(i, &format!("{ln}.beta")), vec![d]));
        }
        for proj in ["query", "key", "value", "output"] {
            out.push((layer_name(i, &format!("attn.{proj}.weight")), vec![d, d]));
            out.push((layer_name(i, &format!("attn.{proj}.bias")), vec![d]));
        }
        out.push((layer_name(i, "ffn.in.weight"), vec![d, config.ff_dim]));
        out.push((layer_name(i, "ffn.in.bias"), vec![config.ff_dim]));
        out.push((layer_name(i, "ffn.out.weight"), vec![config.ff_dim, d]));
        out.push((layer_name(i, "ffn.out.bias"), vec![d]));
    }
    out.push(("final_ln.gamma".into(), vec![d]));
    out.push(("final_ln.beta".into(), vec![d]));
    if !config.tie_output_embeddings {
        out.push(("mlm.weight".into(), vec![d, config.vocab_size]));
    }
    out.push(("mlm.bias".into(), vec![config.vocab_size]));
    out.push(("classifier.weight".into(), vec![d, 2]));
    out.push(("classifier.bias".into(), vec![2]));
    out
}

impl ModelParams {
    /// Normal(0, 0.02) weights, zero biases, unit layernorm gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamSet::new();
        for (name, shape) in parameter_layout(config) {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())?
            };
            params.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Checks names and shapes against the layout for `self.config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = parameter_layout(&self.config);
        if layout.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for (name, shape) in layout {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self.params.bind(tape)?;
        let out_proj = if self.config.tie_output_embeddings {
            tape.transpose(vars["embeddings.token"])?
        } else {
            vars["mlm.weight"]
        };
        Ok(Bound {
            config: self.config.clone(),
            vars,
            out_proj,
        })
    }
}

/// Parameters registered on one tape.
#[derive(Debug)]
pub struct Bound {
    config: ModelConfig,
    vars: BTreeMap<String, Var>,
    /// `D × V`; a transposed view of the token embedding when tied.
    out_proj: Var,
}

/// Encoder outputs for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `n × D` after the final layernorm.
    pub hidden: Var,
    /// `n × D` token-embedding rows before positions are added.
    pub token_embeddings: Var,
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?)?;
    Ok(tape.mul(x, m)?)
}

impl Bound {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn maybe_dropout<R: Rng>(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut R>) -> Result<Var> {
        match rng {
            Some(r) => dropout(tape, x, self.config.dropout, *r),
            None => Ok(x),
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = tape.matmul(x, self.var(&format!("{prefix}.weight")))?;
        Ok(tape.add_bias(h, self.var(&format!("{prefix}.bias")))?)
    }

    /// Runs the encoder. `train_rng` enables dropout. `[PAD]` keys are
    /// never attended to.
    pub fn encode<R: Rng>(&self, tape: &mut Tape, ids: &[usize], mut train_rng: Option<&mut R>) -> Result<Encoded> {
        let cfg = &self.config;
        let n = ids.len();
        if n == 0 {
            return Err(Error::Prompt("empty input sequence".into()));
        }
        if n > cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: n,
                max: cfg.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let token_embeddings = tape.embedding(self.var("embeddings.token"), ids)?;
        let positions = tape.slice_rows(self.var("embeddings.position"), 0, n)?;
        let mut x = tape.add(token_embeddings, positions)?;
        x = self.maybe_dropout(tape, x, &mut train_rng)?;

        let key_mask = if ids.contains(&PAD) {
            let row: Vec<f64> = ids
                .iter()
                .map(|&id| if id == PAD { MASKED_SCORE } else { 0.0 })
                .collect();
            let data = row.iter().copied().cycle().take(n * n).collect();
            Some(tape.constant(Tensor::matrix(n, n, data)?)?)
        } else {
            None
        };

        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for i in 0..cfg.layers {
            let p = |rest: &str| layer_name(i, rest);
            let h = tape.layernorm(x, self.var(&p("ln1.gamma")), self.var(&p("ln1.beta")))?;
            let q = self.linear(tape, h, &p("attn.query"))?;
            let k = self.linear(tape, h, &p("attn.key"))?;
            let v = self.linear(tape, h, &p("attn.value"))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let (lo, hi) = (head * dh, (head + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let mut scores = tape.scale(scores, inv_sqrt)?;
                if let Some(m) = key_mask {
                    scores = tape.add(scores, m)?;
                }
                let attn = tape.softmax(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let joined = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let attn_out = self.linear(tape, joined, &p("attn.output"))?;
            let attn_out = self.maybe_dropout(tape, attn_out, &mut train_rng)?;
            x = tape.add(x, attn_out)?;

            let h = tape.layernorm(x, self.var(&p("ln2.gamma")), self.var(&p("ln2.beta")))?;
            let f = self.linear(tape, h, &p("ffn.in"))?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, f, &p("ffn.out"))?;
            let f = self.maybe_dropout(tape, f, &mut train_rng)?;
            x = tape.add(x, f)?;
        }
        let hidden = tape.layernorm(x, self.var("final_ln.gamma"), self.var("final_ln.beta"))?;
        Ok(Encoded {
            hidden,
            token_embeddings,
        })
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn project(&self, tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.select_rows(hidden, rows)?;
        let logits = tape.matmul(h, self.out_proj)?;
        Ok(tape.add_bias(logits, self.var("mlm.bias"))?)
    }

    /// `1 × 2` label logits in [`crate::corpus::Label::index`] order.
    pub fn label_logits(
        &self,
        tape: &mut Tape,
        hidden: Var,
        mask_slot: usize,
        readout: Readout,
        verbalizer_ids: [usize; 2],
    ) -> Result<Var> {
        match readout {
            Readout::Verbalizer => {
                let logits = self.project(tape, hidden, &[mask_slot])?;
                Ok(tape.select_cols(logits, &verbalizer_ids)?)
            }
            Readout::ClsHead => {
                let cls = tape.select_rows(hidden, &[0])?;
                self.linear(tape, cls, "classifier")
            }
        }
    }

    /// Label probabilities (`1 × 2`) for a [`LabelReadout`].
    pub fn read_labels(&self, tape: &mut Tape, hidden: Var, mask_slot: usize, head: LabelReadout) -> Result<Var> {
        self.label_probs(tape, hidden, mask_slot, head.readout, head.verbalizer_ids)
    }

    /// Label probabilities (`1 × 2`).
    pub fn label_probs(
        &self,
        tape: &mut Tape,
        hidden: Var,
        mask_slot: usize,
        readout: Readout,
        verbalizer_ids: [usize; 2],
    ) -> Result<Var> {
        let logits = self.label_logits(tape, hidden, mask_slot, readout, verbalizer_ids)?;
        Ok(tape.softmax(logits)?)
    }

    /// Full-vocabulary distributions at `positions` (`k × V`).
    pub fn token_probs(&self, tape: &mut Tape, hidden: Var, positions: &[usize]) -> Result<Var> {
        let logits = self.project(tape, hidden, positions)?;
        Ok(tape.softmax(logits)?)
    }
}

type NoRng = rand_chacha::ChaCha8Rng;

/// Evaluation-mode logits over the vocabulary for every position (`n × V`).
pub fn forward_tokens(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let enc = bound.encode::<NoRng>(&mut tape, ids, None)?;
    let rows: Vec<usize> = (0..ids.len()).collect();
    let logits = bound.project(&mut tape, enc.hidden, &rows)?;
    Ok(tape.value(logits).clone())
}

/// Evaluation-mode `p(label | prompt)`.
pub fn label_distribution(
    params: &ModelParams,
    ids: &[usize],
    mask_slot: usize,
    readout: Readout,
    verbalizer_ids: [usize; 2],
) -> Result<[f64; 2]> {
    if mask_slot >= ids.len() {
        return Err(Error::Prompt(format!(
            "mask slot {mask_slot} outside sequence of {}",
            ids.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let enc = bound.encode::<NoRng>(&mut tape, ids, None)?;
    let p = bound.label_probs(&mut tape, enc.hidden, mask_slot, readout, verbalizer_ids)?;
    let d = tape.value(p).data();
    Ok([d[0], d[1]])
}

/// Evaluation-mode full-vocabulary distributions at `positions`.
pub fn mlm_token_distribution(params: &ModelParams, ids: &[usize], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
        return Err(Error::Prompt(format!("position {p} outside sequence of {}", ids.len())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let enc = bound.encode::<NoRng>(&mut tape, ids, None)?;
    let probs = bound.token_probs(&mut tape, enc.hidden, positions)?;
    let t = tape.value(probs);
    Ok((0..positions.len()).map(|r| t.row(r).to_vec()).collect())
}
