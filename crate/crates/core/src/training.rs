//! The two-stage alternating optimization loops, learning-rate schedule,
//! early stopping and epoch-wise target resampling.

use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use xdomain_numerics::{clip_global_norm, AdamW, AdamWConfig, Tape, Var};

use crate::corpus::{Example, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{mlm_loss, pmt_loss, ssd_loss, stage_losses, AuxTerms, LossBreakdown, LossComponents, LossWeights, SsdOptions, Stage};
use crate::model::{label_distribution, Bound, LabelReadout, ModelParams};
use crate::prompting::{build_prompt, mask_sentence, Prompt, PromptPair, DEFAULT_MASK_RATE};
use crate::rng::{self, Rng};

/// A prompt with its gold label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPrompt {
    pub prompt: Prompt,
    pub label: Label,
}

/// Encodes labeled examples; fails on any unlabeled one.
pub fn encode_labeled(examples: &[Example], vocab: &Vocabulary, max_len: usize) -> Result<Vec<LabeledPrompt>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let label = e
                .label
                .ok_or_else(|| Error::Training(format!("example {i} in domain `{}` has no label", e.domain)))?;
            Ok(LabeledPrompt {
                prompt: build_prompt(&vocab.encode(&e.text), vocab, max_len)?,
                label,
            })
        })
        .collect()
}

/// Encodes text only. Labels, if any, are dropped here.
pub fn encode_unlabeled(examples: &[Example], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Prompt>> {
    examples
        .iter()
        .map(|e| build_prompt(&vocab.encode(&e.text), vocab, max_len))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStopMetric {
    /// Source validation accuracy; higher is better.
    ValidationAccuracy,
    /// Source validation classification loss plus target validation
    /// masked-LM loss; lower is better.
    ValidationMixedLoss,
}

impl EarlyStopMetric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, EarlyStopMetric::ValidationAccuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// Halve the learning rate every this many epochs.
    pub lr_halving_period: Option<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub mask_rate: f64,
    pub seed: u64,
    pub terms: AuxTerms,
    pub ssd: SsdOptions,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Give step (b) its own AdamW moments instead of sharing step (a)'s.
    pub separate_step_moments: bool,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            weights: LossWeights::STAGE1,
            learning_rate: 1e-5,
            lr_halving_period: Some(3),
            max_epochs: 10,
            batch_size: 4,
            patience: 3,
            early_stop_metric: EarlyStopMetric::ValidationAccuracy,
            mask_rate: DEFAULT_MASK_RATE,
            seed: 0,
            terms: AuxTerms { mlm: true, ssd: false },
            ssd: SsdOptions::default(),
            weight_decay: AdamWConfig::default().weight_decay,
            grad_clip: None,
            separate_step_moments: false,
        }
    }

    pub fn stage2() -> Self {
        Self {
            weights: LossWeights::STAGE2,
            learning_rate: 1e-6,
            lr_halving_period: None,
            early_stop_metric: EarlyStopMetric::ValidationMixedLoss,
            terms: AuxTerms::default(),
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Training(m));
        self.weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.lr_halving_period == Some(0) {
            return err("lr_halving_period must be at least 1".into());
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return err("max_epochs, batch_size and patience must be at least 1".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return err(format!("mask_rate {} outside (0, 1]", self.mask_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return err(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_halving_period {
            Some(period) => self.learning_rate * 0.5f64.powi((epoch / period) as i32),
            None => self.learning_rate,
        }
    }
}

/// Patience-based early stopping with a retained best value.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    best_epoch: usize,
    since_improvement: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self {
            patience,
            higher_is_better,
            best: None,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Records the metric for a 0-based epoch. Improvement is strict.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(b) if self.higher_is_better => metric > b,
            Some(b) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.since_improvement >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn since_improvement(&self) -> usize {
        self.since_improvement
    }
}

/// Per-epoch record, also the metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 0-based.
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub val_metric: f64,
    pub stopped: bool,
}

/// Mutable training context for one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamW,
    /// Present when step (b) keeps separate moments.
    pub aux_optimizer: Option<AdamW>,
    pub epoch: usize,
    pub stopper: EarlyStopper,
    pub best_params: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams, config: &StageConfig) -> Self {
        let optimizer = AdamW::new(AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Self {
            best_params: params.clone(),
            params,
            aux_optimizer: config.separate_step_moments.then(|| optimizer.clone()),
            optimizer,
            epoch: 0,
            stopper: EarlyStopper::new(config.patience, config.early_stop_metric.higher_is_better()),
            history: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.set_learning_rate(lr);
        if let Some(aux) = &mut self.aux_optimizer {
            aux.set_learning_rate(lr);
        }
    }

    /// Updates applied by both steps.
    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.steps() + self.aux_optimizer.as_ref().map_or(0, AdamW::steps)
    }
}

/// Random streams used while training one stage.
#[derive(Debug, Clone)]
pub struct StageRngs {
    pub shuffle: Rng,
    pub dropout: Rng,
    pub mask: Rng,
    pub sample: Rng,
}

impl StageRngs {
    pub fn new(seed: u64, stage: Stage) -> Self {
        let s = |name: &str| rng::stream(seed, &format!("stage{stage}/{name}"));
        Self {
            shuffle: s("shuffle"),
            dropout: s("dropout"),
            mask: s("mask"),
            sample: s("sample"),
        }
    }
}

/// Datasets seen by a stage. Target data carries no labels.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub source_train: &'a [LabeledPrompt],
    pub source_validation: &'a [LabeledPrompt],
    pub target_pool: &'a [Prompt],
    pub target_validation: &'a [Prompt],
}

fn training_error(stage: Stage, epoch: usize, e: Error) -> Error {
    match e {
        Error::Numerics(n) => Error::Training(format!("stage {stage}, epoch {epoch}: {n}")),
        other => other,
    }
}

/// Builds a loss on a fresh tape, backpropagates and applies one optimizer
/// update.
fn apply_step<F>(state: &mut TrainState, config: &StageConfig, auxiliary: bool, build: F) -> Result<()>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape)?;
    let loss = build(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?.by_name();
    if let Some(max) = config.grad_clip {
        clip_global_norm(&mut grads, max);
    }
    let optimizer = match (&mut state.aux_optimizer, auxiliary) {
        (Some(aux), true) => aux,
        _ => &mut state.optimizer,
    };
    optimizer.step(&mut state.params.params, &grads)?;
    Ok(())
}

fn label_probs_train(tape: &mut Tape, bound: &Bound, ids: &[usize], mask_slot: usize, head: LabelReadout, dropout: &mut Rng) -> Result<Var> {
    let enc = bound.encode(tape, ids, Some(dropout))?;
    bound.read_labels(tape, enc.hidden, mask_slot, head)
}

/// Step (a): `alpha · L_pmt` on a labeled batch. Returns the unweighted loss.
/// Skipped when `alpha` is zero, so a zero weight leaves parameters intact.
pub fn classification_step(
    state: &mut TrainState,
    batch: &[&LabeledPrompt],
    config: &StageConfig,
    head: LabelReadout,
    rngs: &mut StageRngs,
) -> Result<f64> {
    let alpha = config.weights.alpha;
    let mut value = 0.0;
    let mut run = |tape: &mut Tape, bound: &Bound| -> Result<Var> {
        let mut probs = Vec::with_capacity(batch.len());
        for ex in batch {
            probs.push(label_probs_train(tape, bound, &ex.prompt.ids, ex.prompt.mask_slot, head, &mut rngs.dropout)?);
        }
        let gold: Vec<Label> = batch.iter().map(|e| e.label).collect();
        let loss = pmt_loss(tape, &probs, &gold)?;
        value = tape.value(loss).item();
        Ok(tape.scale(loss, alpha)?)
    };
    if alpha == 0.0 {
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape)?;
        run(&mut tape, &bound)?;
    } else {
        apply_step(state, config, false, run)?;
    }
    Ok(value)
}

/// Step (b) of Stage 1: re-mask the batch and apply `beta · L_mlm`.
pub fn stage1_auxiliary_step(
    state: &mut TrainState,
    batch: &[&LabeledPrompt],
    config: &StageConfig,
    rngs: &mut StageRngs,
) -> Result<f64> {
    let pairs: Vec<PromptPair> = batch
        .iter()
        .map(|e| mask_sentence(&e.prompt, config.mask_rate, &mut rngs.mask))
        .collect();
    mlm_step(state, &pairs, config, &mut rngs.dropout)
}

fn mlm_step(state: &mut TrainState, pairs: &[PromptPair], config: &StageConfig, dropout: &mut Rng) -> Result<f64> {
    let beta = config.weights.beta;
    if !config.terms.mlm || beta == 0.0 {
        return Ok(0.0);
    }
    let mut value = 0.0;
    apply_step(state, config, true, |tape, bound| {
        let mut dists = Vec::with_capacity(pairs.len());
        for p in pairs {
            let enc = bound.encode(tape, &p.masked_ids, Some(&mut *dropout))?;
            dists.push(bound.token_probs(tape, enc.hidden, &p.mlm_positions)?);
        }
        let gold: Vec<Vec<usize>> = pairs.iter().map(|p| p.mlm_gold_ids.clone()).collect();
        let loss = mlm_loss(tape, &dists, &gold)?;
        value = tape.value(loss).item();
        Ok(tape.scale(loss, beta)?)
    })?;
    Ok(value)
}

/// Step (b) of Stage 2: detached teacher on the original target prompts,
/// then `beta · (L_mlm + L_ssd)` on their masked versions. Returns the
/// unweighted `(mlm, ssd)`.
pub fn stage2_auxiliary_step(
    state: &mut TrainState,
    batch: &[&Prompt],
    config: &StageConfig,
    head: LabelReadout,
    rngs: &mut StageRngs,
) -> Result<(f64, f64)> {
    let beta = config.weights.beta;
    let terms = config.terms;
    if beta == 0.0 || !(terms.mlm || terms.ssd) {
        return Ok((0.0, 0.0));
    }
    let teachers = if terms.ssd {
        batch
            .iter()
            .map(|p| label_distribution(&state.params, &p.ids, p.mask_slot, head.readout, head.verbalizer_ids))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let pairs: Vec<PromptPair> = batch
        .iter()
        .map(|p| mask_sentence(p, config.mask_rate, &mut rngs.mask))
        .collect();
    let (mut mlm_value, mut ssd_value) = (0.0, 0.0);
    let dropout = &mut rngs.dropout;
    apply_step(state, config, true, |tape, bound| {
        let mut dists = Vec::with_capacity(pairs.len());
        let mut students = Vec::with_capacity(pairs.len());
        let mut teacher_vars = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let enc = bound.encode(tape, &p.masked_ids, Some(&mut *dropout))?;
            if terms.mlm {
                dists.push(bound.token_probs(tape, enc.hidden, &p.mlm_positions)?);
            }
            if terms.ssd {
                students.push(bound.read_labels(tape, enc.hidden, p.mask_slot, head)?);
                let t = xdomain_numerics::Tensor::matrix(1, 2, teachers[i].to_vec())?;
                teacher_vars.push(tape.constant(t)?);
            }
        }
        let mut parts = Vec::new();
        if terms.mlm {
            let gold: Vec<Vec<usize>> = pairs.iter().map(|p| p.mlm_gold_ids.clone()).collect();
            let l = mlm_loss(tape, &dists, &gold)?;
            mlm_value = tape.value(l).item();
            parts.push(l);
        }
        if terms.ssd {
            let l = ssd_loss(tape, &students, &teacher_vars, config.ssd)?;
            ssd_value = tape.value(l).item();
            parts.push(l);
        }
        let total = tape.add_all(&parts)?;
        Ok(tape.scale(total, beta)?)
    })?;
    Ok((mlm_value, ssd_value))
}

fn batches<'a, T>(items: &'a [T], order: &[usize], size: usize) -> Vec<Vec<&'a T>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| &items[i]).collect())
        .collect()
}

#[derive(Default)]
struct LossTotals {
    pmt: f64,
    mlm: f64,
    ssd: f64,
    batches: usize,
}

impl LossTotals {
    fn components(&self) -> LossComponents {
        let n = self.batches.max(1) as f64;
        LossComponents {
            pmt: Some(self.pmt / n),
            mlm: Some(self.mlm / n),
            ssd: Some(self.ssd / n),
        }
    }
}

/// One Stage 1 epoch: two optimizer updates per batch. Returns the mean
/// per-batch losses.
pub fn stage1_epoch(
    state: &mut TrainState,
    source_train: &[LabeledPrompt],
    config: &StageConfig,
    head: LabelReadout,
    rngs: &mut StageRngs,
) -> Result<LossBreakdown> {
    if source_train.is_empty() {
        return Err(Error::Training("empty source training set".into()));
    }
    let mut order: Vec<usize> = (0..source_train.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let mut totals = LossTotals::default();
    for batch in batches(source_train, &order, config.batch_size) {
        totals.pmt += classification_step(state, &batch, config, head, rngs)?;
        totals.mlm += stage1_auxiliary_step(state, &batch, config, rngs)?;
        totals.batches += 1;
    }
    stage_losses(Stage::One, &totals.components(), config.weights, config.terms)
}

/// Draws `n` target prompts: without replacement when the pool allows,
/// otherwise with replacement and a warning.
pub fn sample_target(pool_len: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if pool_len == 0 {
        return Err(Error::Training("empty target pool".into()));
    }
    if pool_len >= n {
        Ok(index::sample(rng, pool_len, n).into_vec())
    } else {
        log::warn!("target pool of {pool_len} is smaller than the source set of {n}; sampling with replacement");
        Ok((0..n).map(|_| rng.random_range(0..pool_len)).collect())
    }
}

/// One Stage 2 epoch over paired source and freshly resampled target batches.
pub fn stage2_epoch(
    state: &mut TrainState,
    source_train: &[LabeledPrompt],
    target_pool: &[Prompt],
    config: &StageConfig,
    head: LabelReadout,
    rngs: &mut StageRngs,
) -> Result<LossBreakdown> {
    if source_train.is_empty() {
        return Err(Error::Training("empty source training set".into()));
    }
    let mut order: Vec<usize> = (0..source_train.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let target_order = sample_target(target_pool.len(), source_train.len(), &mut rngs.sample)?;
    let source_batches = batches(source_train, &order, config.batch_size);
    let target_batches = batches(target_pool, &target_order, config.batch_size);
    if source_batches.len() != target_batches.len() {
        log::warn!(
            "pairing {} source batches with {} target batches; truncating to the shorter",
            source_batches.len(),
            target_batches.len()
        );
    }
    let mut totals = LossTotals::default();
    for (sb, tb) in source_batches.iter().zip(&target_batches) {
        totals.pmt += classification_step(state, sb, config, head, rngs)?;
        let (mlm, ssd) = stage2_auxiliary_step(state, tb, config, head, rngs)?;
        totals.mlm += mlm;
        totals.ssd += ssd;
        totals.batches += 1;
    }
    stage_losses(Stage::Two, &totals.components(), config.weights, config.terms)
}

/// Evaluation-mode accuracy of `params` on labeled prompts.
pub fn accuracy(params: &ModelParams, data: &[LabeledPrompt], head: LabelReadout) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Training("accuracy over an empty set".into()));
    }
    let mut correct = 0usize;
    for ex in data {
        let p = label_distribution(params, &ex.prompt.ids, ex.prompt.mask_slot, head.readout, head.verbalizer_ids)?;
        let predicted = if p[0] >= p[1] { Label::Positive } else { Label::Negative };
        if predicted == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean evaluation-mode classification loss on source validation plus mean
/// per-sentence masked-LM loss on target validation, with masks drawn from
/// a fixed stream so every epoch sees the same masks.
pub fn validation_mixed_loss(
    params: &ModelParams,
    source_validation: &[LabeledPrompt],
    target_validation: &[Prompt],
    head: LabelReadout,
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    if source_validation.is_empty() || target_validation.is_empty() {
        return Err(Error::Training("mixed validation loss needs source and target validation data".into()));
    }
    let mut pmt = 0.0;
    for ex in source_validation {
        let p = label_distribution(params, &ex.prompt.ids, ex.prompt.mask_slot, head.readout, head.verbalizer_ids)?;
        pmt -= p[ex.label.index()].max(1e-12).ln();
    }
    pmt /= source_validation.len() as f64;

    let mut mask_rng = rng::stream(seed, "stage2/validation-mask");
    let mut mlm = 0.0;
    for prompt in target_validation {
        let pair = mask_sentence(prompt, mask_rate, &mut mask_rng);
        let dists = crate::model::mlm_token_distribution(params, &pair.masked_ids, &pair.mlm_positions)?;
        let k = pair.mlm_positions.len() as f64;
        mlm -= dists
            .iter()
            .zip(&pair.mlm_gold_ids)
            .map(|(d, &g)| d[g].max(1e-12).ln())
            .sum::<f64>()
            / k;
    }
    mlm /= target_validation.len() as f64;
    Ok(pmt + mlm)
}

fn validation_metric(stage: Stage, params: &ModelParams, data: &StageData<'_>, config: &StageConfig, head: LabelReadout) -> Result<f64> {
    match config.early_stop_metric {
        EarlyStopMetric::ValidationAccuracy => accuracy(params, data.source_validation, head),
        EarlyStopMetric::ValidationMixedLoss => {
            if stage == Stage::One && data.target_validation.is_empty() {
                return Err(Error::Training("mixed-loss stopping needs target validation data".into()));
            }
            validation_mixed_loss(params, data.source_validation, data.target_validation, head, config.mask_rate, config.seed)
        }
    }
}

/// Result of running one stage to completion.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
    pub optimizer_steps: u64,
    pub stopped_early: bool,
}

/// Runs `stage` from `init` with shuffling, schedule and early stopping.
/// The best parameters by the stage's validation metric are returned.
pub fn run_stage(stage: Stage, data: StageData<'_>, config: &StageConfig, head: LabelReadout, init: ModelParams) -> Result<StageOutcome> {
    config.validate()?;
    if data.source_validation.is_empty() {
        return Err(Error::Training("empty source validation set".into()));
    }
    if stage == Stage::Two && data.target_pool.is_empty() {
        return Err(Error::Training("stage 2 needs unlabeled target data".into()));
    }
    let mut state = TrainState::new(init, config);
    let mut rngs = StageRngs::new(config.seed, stage);
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let lr = config.learning_rate_at(epoch);
        state.set_learning_rate(lr);
        let losses = match stage {
            Stage::One => stage1_epoch(&mut state, data.source_train, config, head, &mut rngs),
            Stage::Two => stage2_epoch(&mut state, data.source_train, data.target_pool, config, head, &mut rngs),
        }
        .map_err(|e| training_error(stage, epoch, e))?;
        let metric = validation_metric(stage, &state.params, &data, config, head)?;
        let decision = state.stopper.observe(epoch, metric);
        if decision.improved {
            state.best_params = state.params.clone();
        }
        log::info!("stage {stage} epoch {epoch}: lr {lr:.3e}, loss {:.4}, val {metric:.4}", losses.total());
        state.history.push(EpochRecord {
            stage,
            epoch,
            lr,
            losses,
            val_metric: metric,
            stopped: decision.stop,
        });
        state.epoch = epoch + 1;
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    let optimizer_steps = state.optimizer_steps();
    Ok(StageOutcome {
        best_metric: state.stopper.best().unwrap_or(f64::NAN),
        best_epoch: state.stopper.best_epoch(),
        best: state.best_params,
        history: state.history,
        optimizer_steps,
        stopped_early,
    })
}

/// Settings for the optional masked-LM warmup on pooled unlabeled text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 8,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }
}

/// Plain masked-LM training, one update per batch.
pub fn mlm_warmup(init: ModelParams, prompts: &[Prompt], config: &WarmupConfig, seed: u64) -> Result<ModelParams> {
    if prompts.is_empty() || config.epochs == 0 {
        return Ok(init);
    }
    let stage_cfg = StageConfig {
        weights: LossWeights { alpha: 0.0, beta: 1.0 },
        learning_rate: config.learning_rate,
        lr_halving_period: None,
        batch_size: config.batch_size.max(1),
        mask_rate: config.mask_rate,
        ..StageConfig::stage1()
    };
    stage_cfg.validate()?;
    let mut state = TrainState::new(init, &stage_cfg);
    let mut shuffle = rng::stream(seed, "warmup/shuffle");
    let mut mask = rng::stream(seed, "warmup/mask");
    let mut dropout = rng::stream(seed, "warmup/dropout");
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..prompts.len()).collect();
        order.shuffle(&mut shuffle);
        for batch in batches(prompts, &order, stage_cfg.batch_size) {
            let pairs: Vec<PromptPair> = batch.iter().map(|p| mask_sentence(p, stage_cfg.mask_rate, &mut mask)).collect();
            mlm_step(&mut state, &pairs, &stage_cfg, &mut dropout)?;
        }
    }
    Ok(state.params)
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    run_id: &'a str,
    stage: u8,
    epoch: usize,
    lr: f64,
    pmt: f64,
    mlm: f64,
    ssd: f64,
    val_metric: f64,
    stopped: bool,
}

/// Appends epoch records to a metrics CSV, writing the header for a new file.
pub fn append_metrics_csv(path: &Path, run_id: &str, records: &[EpochRecord]) -> Result<()> {
    let exists = path.exists() && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in records {
        w.serialize(MetricsRow {
            run_id,
            stage: r.stage.number(),
            epoch: r.epoch,
            lr: r.lr,
            pmt: r.losses.pmt,
            mlm: r.losses.mlm,
            ssd: r.losses.ssd,
            val_metric: r.val_metric,
            stopped: r.stopped,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage1_schedule_halves_every_three_epochs() {
        let c = StageConfig::stage1();
        let want = [1e-5, 1e-5, 1e-5, 5e-6, 5e-6, 5e-6, 2.5e-6, 2.5e-6, 2.5e-6, 1.25e-6];
        for (e, w) in want.iter().enumerate() {
            assert_eq!(c.learning_rate_at(e), *w);
        }
        let c2 = StageConfig::stage2();
        assert!((0..10).all(|e| c2.learning_rate_at(e) == 1e-6));
    }

    #[test]
    fn patience_step_through() {
        let mut s = EarlyStopper::new(3, true);
        let metrics = [0.8, 0.81, 0.81, 0.81, 0.81];
        let stops: Vec<bool> = metrics.iter().enumerate().map(|(e, &m)| s.observe(e, m).stop).collect();
        assert_eq!(stops, [false, false, false, false, true]);
        assert_eq!(s.best_epoch(), 1);
        assert_eq!(s.best(), Some(0.81));
    }

    #[test]
    fn monotone_run_never_stops() {
        let mut s = EarlyStopper::new(3, false);
        assert!((0..10).all(|e| !s.observe(e, 10.0 - e as f64).stop));
    }

    #[test]
    fn patience_one_stops_immediately() {
        let mut s = EarlyStopper::new(1, true);
        assert!(!s.observe(0, 0.5).stop);
        assert!(s.observe(1, 0.5).stop);
    }

    #[test]
    fn since_improvement_resets_only_on_improvement() {
        let mut s = EarlyStopper::new(5, true);
        s.observe(0, 0.5);
        s.observe(1, 0.4);
        assert_eq!(s.since_improvement(), 1);
        s.observe(2, 0.6);
        assert_eq!(s.since_improvement(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(StageConfig::stage1().validate().is_ok());
        let bad = StageConfig {
            patience: 0,
            ..StageConfig::stage1()
        };
        assert!(bad.validate().is_err());
        let bad = StageConfig {
            mask_rate: 0.0,
            ..StageConfig::stage2()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_sizes() {
        let mut r = rng::seeded(0);
        let a = sample_target(4000, 1600, &mut r).unwrap();
        assert_eq!(a.len(), 1600);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 1600);
        let b = sample_target(4000, 1600, &mut r).unwrap();
        assert_ne!(a, b);
        assert_eq!(sample_target(10, 25, &mut r).unwrap().len(), 25);
        assert!(sample_target(0, 5, &mut r).is_err());
    }
}
