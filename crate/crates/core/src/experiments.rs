//! Task matrix orchestration: method variants, ablations, multi-seed runs
//! and aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, combine_sources, split, strip_labels, DomainCorpus, Example, Verbalizer, VocabOptions, Vocabulary,
    VALIDATION_FRACTION,
};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::model::{LabelReadout, ModelConfig, ModelParams, Readout};
use crate::prompting::{Prompt, TEMPLATE_WORDS};
use crate::rng;
use crate::training::{
    accuracy, encode_labeled, encode_unlabeled, mlm_warmup, run_stage, EpochRecord, LabeledPrompt, StageConfig,
    StageData, StageOutcome, WarmupConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// `[CLS]` classification head, classification loss only.
    #[serde(rename = "FT")]
    Ft,
    /// Prompt tuning, classification loss only.
    #[serde(rename = "PT")]
    Pt,
    /// Prompt tuning with the masked-LM term.
    #[serde(rename = "MEPT")]
    Mept,
    /// MEPT followed by target adaptation.
    #[serde(rename = "TamePT")]
    TamePt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ft, Method::Pt, Method::Mept, Method::TamePt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::Pt => "PT",
            Method::Mept => "MEPT",
            Method::TamePt => "TamePT",
        }
    }

    pub fn readout(self) -> Readout {
        match self {
            Method::Ft => Readout::ClsHead,
            _ => Readout::Verbalizer,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Experiment(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoStage2,
    Stage1NoMlm,
    Stage2NoMlm,
    Stage2NoSsd,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoStage2,
        Ablation::Stage1NoMlm,
        Ablation::Stage2NoMlm,
        Ablation::Stage2NoSsd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoStage2 => "no-stage2",
            Ablation::Stage1NoMlm => "stage1-no-mlm",
            Ablation::Stage2NoMlm => "stage2-no-mlm",
            Ablation::Stage2NoSsd => "stage2-no-ssd",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Experiment(format!("unknown ablation `{s}`")))
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub source_domains: Vec<String>,
    pub target_domain: String,
    pub method: Method,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Forces target adaptation on or off regardless of method.
    #[serde(default)]
    pub adapt: Option<bool>,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

/// Stage recipe implied by a method and ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Recipe {
    pub readout: Readout,
    pub stage1_mlm: bool,
    pub stage2: bool,
    pub stage2_mlm: bool,
    pub stage2_ssd: bool,
}

impl TaskSpec {
    pub fn new(sources: &[&str], target: &str, method: Method) -> Self {
        Self {
            source_domains: sources.iter().map(|s| s.to_string()).collect(),
            target_domain: target.to_string(),
            method,
            ablation: Ablation::None,
            seeds: default_seeds(),
            adapt: None,
        }
    }

    /// Source names joined, then the target: `BDE->K`.
    pub fn task_name(&self) -> String {
        format!("{}->{}", self.source_domains.concat(), self.target_domain)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Experiment(m));
        if self.source_domains.is_empty() {
            return err("at least one source domain is required".into());
        }
        let unique: BTreeSet<&String> = self.source_domains.iter().collect();
        if unique.len() != self.source_domains.len() {
            return err(format!("duplicate source domains in {:?}", self.source_domains));
        }
        if unique.contains(&self.target_domain) {
            return err(format!("target `{}` is also a source domain", self.target_domain));
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required".into());
        }
        let stage2_ablation = matches!(
            self.ablation,
            Ablation::NoStage2 | Ablation::Stage2NoMlm | Ablation::Stage2NoSsd
        );
        if stage2_ablation && self.method != Method::TamePt {
            return err(format!("ablation {} requires TamePT", self.ablation));
        }
        if self.ablation == Ablation::Stage1NoMlm && !matches!(self.method, Method::Mept | Method::TamePt) {
            return err(format!("ablation {} requires MEPT or TamePT", self.ablation));
        }
        Ok(())
    }

    pub fn recipe(&self) -> Recipe {
        let stage1_mlm = matches!(self.method, Method::Mept | Method::TamePt) && self.ablation != Ablation::Stage1NoMlm;
        let default_stage2 = self.method == Method::TamePt && self.ablation != Ablation::NoStage2;
        Recipe {
            readout: self.method.readout(),
            stage1_mlm,
            stage2: self.adapt.unwrap_or(default_stage2),
            stage2_mlm: self.ablation != Ablation::Stage2NoMlm,
            stage2_ssd: self.ablation != Ablation::Stage2NoSsd,
        }
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}/{}/{}/seed{seed}", self.task_name(), self.method, self.ablation)
    }
}

/// TamePT expanded over every ablation variant.
pub fn ablation_matrix(base: &TaskSpec) -> Result<Vec<TaskSpec>> {
    if base.method != Method::TamePt {
        return Err(Error::Experiment("ablation matrix requires TamePT".into()));
    }
    Ok(Ablation::ALL
        .into_iter()
        .map(|ablation| TaskSpec {
            ablation,
            adapt: None,
            ..base.clone()
        })
        .collect())
}

/// Everything a run needs besides the task itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub warmup: Option<WarmupConfig>,
    pub max_len: usize,
    pub verbalizer: Verbalizer,
    pub min_frequency: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            warmup: None,
            max_len: ModelConfig::default().max_positions,
            verbalizer: Verbalizer::default(),
            min_frequency: 1,
        }
    }
}

/// Labeled and unlabeled examples for every domain.
pub type Domains = BTreeMap<String, DomainCorpus>;

/// Vocabulary from source labeled text and target unlabeled text, with the
/// template words reserved.
pub fn task_vocab(sources: &[&[Example]], target_unlabeled: &[Example], settings: &Settings) -> Result<Vocabulary> {
    let opts = VocabOptions {
        min_frequency: settings.min_frequency,
        reserved: TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect(),
    };
    let texts = sources
        .iter()
        .flat_map(|s| s.iter())
        .chain(target_unlabeled)
        .map(|e| e.text.as_str());
    build_vocab(texts, &settings.verbalizer, &opts)
}

/// Data, vocabulary and initial weights for one (task, seed).
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub seed: u64,
    pub vocab: Vocabulary,
    pub source_train: Vec<LabeledPrompt>,
    pub source_validation: Vec<LabeledPrompt>,
    pub target_pool: Vec<Prompt>,
    pub target_validation: Vec<Prompt>,
    pub target_test: Vec<LabeledPrompt>,
    pub init: ModelParams,
}

fn domain<'a>(domains: &'a Domains, name: &str) -> Result<&'a DomainCorpus> {
    domains
        .get(name)
        .ok_or_else(|| Error::Experiment(format!("no data for domain `{name}`")))
}

/// Splits, encodes and initializes. Stage 2 only ever sees label-stripped
/// copies of the target data; target labels are encoded separately for the
/// final test.
pub fn prepare_run(spec: &TaskSpec, seed: u64, domains: &Domains, settings: &Settings) -> Result<PreparedRun> {
    spec.validate()?;
    let sources: Vec<&DomainCorpus> = spec
        .source_domains
        .iter()
        .map(|s| domain(domains, s))
        .collect::<Result<_>>()?;
    let target = domain(domains, &spec.target_domain)?;
    if target.labeled.is_empty() {
        return Err(Error::Experiment(format!("target `{}` has no labeled test data", spec.target_domain)));
    }

    let parts: Vec<&[Example]> = sources.iter().map(|d| d.labeled.as_slice()).collect();
    let source = combine_sources(&parts, rng::stream_seed(seed, "data/combine"));
    let source_split = split(&source, VALIDATION_FRACTION, rng::stream_seed(seed, "data/source-split"))?;
    let target_text = strip_labels(&target.unlabeled);
    let target_split = split(&target_text, VALIDATION_FRACTION, rng::stream_seed(seed, "data/target-split"))?;

    let vocab = task_vocab(&parts, &target_text, settings)?;
    let max_len = settings.max_len.min(settings.model.max_positions);
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..settings.model.clone()
    };
    let mut init_rng = rng::stream(seed, "model/init");
    let mut init = ModelParams::init(&model, &mut init_rng)?;

    let source_train = encode_labeled(&source_split.train, &vocab, max_len)?;
    let source_validation = encode_labeled(&source_split.validation, &vocab, max_len)?;
    let target_pool = encode_unlabeled(&target_split.train, &vocab, max_len)?;
    let target_validation = encode_unlabeled(&target_split.validation, &vocab, max_len)?;
    let target_test = encode_labeled(&target.labeled, &vocab, max_len)?;

    if let Some(w) = &settings.warmup {
        let mut pooled: Vec<_> = source_train.iter().map(|e| e.prompt.clone()).collect();
        pooled.extend(target_pool.iter().cloned());
        init = mlm_warmup(init, &pooled, w, rng::stream_seed(seed, "warmup"))?;
    }
    Ok(PreparedRun {
        seed,
        vocab,
        source_train,
        source_validation,
        target_pool,
        target_validation,
        target_test,
        init,
    })
}

impl PreparedRun {
    pub fn head(&self, readout: Readout) -> LabelReadout {
        LabelReadout {
            readout,
            verbalizer_ids: self.vocab.verbalizer_ids(),
        }
    }

    fn data(&self) -> StageData<'_> {
        StageData {
            source_train: &self.source_train,
            source_validation: &self.source_validation,
            target_pool: &self.target_pool,
            target_validation: &self.target_validation,
        }
    }

    pub fn run_stage1(&self, recipe: &Recipe, settings: &Settings) -> Result<StageOutcome> {
        let mut cfg = settings.stage1.clone();
        cfg.terms.mlm = recipe.stage1_mlm;
        cfg.terms.ssd = false;
        cfg.seed = rng::stream_seed(self.seed, "stage1");
        run_stage(Stage::One, self.data(), &cfg, self.head(recipe.readout), self.init.clone())
    }

    pub fn run_stage2(&self, recipe: &Recipe, settings: &Settings, init: ModelParams) -> Result<StageOutcome> {
        let mut cfg = settings.stage2.clone();
        cfg.terms.mlm = recipe.stage2_mlm;
        cfg.terms.ssd = recipe.stage2_ssd;
        cfg.seed = rng::stream_seed(self.seed, "stage2");
        run_stage(Stage::Two, self.data(), &cfg, self.head(recipe.readout), init)
    }
}

/// Outcome of one (task, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ReportRow,
    pub vocab: Vocabulary,
    pub readout: Readout,
    pub stage1: StageOutcome,
    pub stage2: Option<StageOutcome>,
}

impl RunOutcome {
    /// The parameters that were evaluated.
    pub fn final_params(&self) -> &ModelParams {
        match &self.stage2 {
            Some(s) => &s.best,
            None => &self.stage1.best,
        }
    }

    pub fn history(&self) -> Vec<EpochRecord> {
        let mut h = self.stage1.history.clone();
        if let Some(s) = &self.stage2 {
            h.extend(s.history.iter().cloned());
        }
        h
    }
}

/// Accuracy on labeled examples in evaluation mode, no masking.
pub fn evaluate_accuracy(
    params: &ModelParams,
    examples: &[Example],
    vocab: &Vocabulary,
    readout: Readout,
    max_len: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Experiment("cannot evaluate on an empty set".into()));
    }
    let data = encode_labeled(examples, vocab, max_len.min(params.config.max_positions))?;
    let head = LabelReadout {
        readout,
        verbalizer_ids: vocab.verbalizer_ids(),
    };
    accuracy(params, &data, head)
}

fn finish(
    spec: &TaskSpec,
    prep: &PreparedRun,
    recipe: &Recipe,
    stage1: StageOutcome,
    stage2: Option<StageOutcome>,
    started: Instant,
) -> Result<RunOutcome> {
    let params = stage2.as_ref().map(|s| &s.best).unwrap_or(&stage1.best);
    let acc = accuracy(params, &prep.target_test, prep.head(recipe.readout))?;
    let epochs_ran = stage1.history.len() + stage2.as_ref().map_or(0, |s| s.history.len());
    Ok(RunOutcome {
        row: ReportRow {
            run_id: spec.run_id(prep.seed),
            task: spec.task_name(),
            method: spec.method,
            ablation: spec.ablation,
            seed: prep.seed,
            accuracy: acc,
            epochs_ran,
            wall_time: started.elapsed().as_secs_f64(),
        },
        vocab: prep.vocab.clone(),
        readout: recipe.readout,
        stage1,
        stage2,
    })
}

/// Runs one seed of a task end to end.
pub fn run_seed(spec: &TaskSpec, seed: u64, domains: &Domains, settings: &Settings) -> Result<RunOutcome> {
    let started = Instant::now();
    let prep = prepare_run(spec, seed, domains, settings)?;
    let recipe = spec.recipe();
    let s1 = prep.run_stage1(&recipe, settings)?;
    let s2 = if recipe.stage2 {
        Some(prep.run_stage2(&recipe, settings, s1.best.clone())?)
    } else {
        None
    };
    finish(spec, &prep, &recipe, s1, s2, started)
}

/// Runs every seed of `spec`.
pub fn run_task(spec: &TaskSpec, domains: &Domains, settings: &Settings, jobs: usize) -> Result<Vec<RunOutcome>> {
    spec.validate()?;
    for name in spec.source_domains.iter().chain([&spec.target_domain]) {
        domain(domains, name)?;
    }
    parallel_map(&spec.seeds, jobs, |&seed| run_seed(spec, seed, domains, settings))
}

/// Runs several specs that differ only in ablation on one seed, sharing
/// Stage 1 between variants with the same Stage 1 recipe.
pub fn run_variants_for_seed(specs: &[TaskSpec], seed: u64, domains: &Domains, settings: &Settings) -> Result<Vec<RunOutcome>> {
    let Some(first) = specs.first() else {
        return Ok(Vec::new());
    };
    for s in specs {
        s.validate()?;
        if s.source_domains != first.source_domains || s.target_domain != first.target_domain {
            return Err(Error::Experiment("variants must share their task".into()));
        }
    }
    let prep = prepare_run(first, seed, domains, settings)?;
    let mut stage1_cache: Vec<((Readout, bool), StageOutcome)> = Vec::new();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let started = Instant::now();
        let recipe = spec.recipe();
        let key = (recipe.readout, recipe.stage1_mlm);
        let s1 = match stage1_cache.iter().find(|(k, _)| *k == key) {
            Some((_, s)) => s.clone(),
            None => {
                let s = prep.run_stage1(&recipe, settings)?;
                stage1_cache.push((key, s.clone()));
                s
            }
        };
        let s2 = if recipe.stage2 {
            Some(prep.run_stage2(&recipe, settings, s1.best.clone())?)
        } else {
            None
        };
        out.push(finish(spec, &prep, &recipe, s1, s2, started)?);
    }
    Ok(out)
}

/// Full ablation grid over the base spec's seeds.
pub fn run_ablation(base: &TaskSpec, domains: &Domains, settings: &Settings, jobs: usize) -> Result<Vec<RunOutcome>> {
    let specs = ablation_matrix(base)?;
    let per_seed = parallel_map(&base.seeds, jobs, |&seed| run_variants_for_seed(&specs, seed, domains, settings))?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Order-preserving map over `items` on up to `jobs` threads.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("work counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("results")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// One accuracy record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub task: String,
    pub method: Method,
    pub ablation: Ablation,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs_ran: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task: String,
    pub method: Method,
    pub ablation: Ablation,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero when `n < 2`.
    pub stderr: f64,
}

/// Mean and standard error of `values`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt() / (n as f64).sqrt())
}

/// Accuracy rows with unique run ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    /// Appends a row; a repeated run id is an error.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if self.rows.iter().any(|r| r.run_id == row.run_id) {
            return Err(Error::Experiment(format!("duplicate run id `{}`", row.run_id)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(String, Method, Ablation), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.task.clone(), r.method, r.ablation))
                .or_default()
                .push(r.accuracy);
        }
        groups
            .into_iter()
            .map(|((task, method, ablation), v)| {
                let (mean, stderr) = mean_stderr(&v);
                Aggregate {
                    task,
                    method,
                    ablation,
                    n: v.len(),
                    mean,
                    stderr,
                }
            })
            .collect()
    }

    /// Mean accuracy per (method, ablation) over every row, across tasks.
    pub fn pooled(&self) -> Vec<(Method, Ablation, f64)> {
        let mut groups: BTreeMap<(Method, Ablation), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.method, r.ablation)).or_default().push(r.accuracy);
        }
        groups
            .into_iter()
            .map(|((m, a), v)| (m, a, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut report = Self::new();
        let mut r = csv::Reader::from_path(path)?;
        for row in r.deserialize() {
            report.push(row?)?;
        }
        Ok(report)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let pooled: Vec<serde_json::Value> = self
            .pooled()
            .into_iter()
            .map(|(m, a, mean)| serde_json::json!({"method": m, "ablation": a, "mean": mean}))
            .collect();
        serde_json::json!({
            "runs": self.rows.len(),
            "aggregates": self.aggregate(),
            "pooled": pooled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stderr_of_two() {
        let (m, s) = mean_stderr(&[0.9, 0.94]);
        assert!((m - 0.92).abs() < 1e-12);
        assert!((s - 0.02).abs() < 1e-12);
        assert_eq!(mean_stderr(&[0.7; 5]).1, 0.0);
    }

    #[test]
    fn no_stage2_is_mept() {
        let mut t = TaskSpec::new(&["A"], "B", Method::TamePt);
        t.ablation = Ablation::NoStage2;
        let mept = TaskSpec::new(&["A"], "B", Method::Mept);
        assert_eq!(t.recipe(), mept.recipe());
    }

    #[test]
    fn recipes() {
        let ft = TaskSpec::new(&["A"], "B", Method::Ft).recipe();
        assert_eq!(ft.readout, Readout::ClsHead);
        assert!(!ft.stage1_mlm && !ft.stage2);
        let pt = TaskSpec::new(&["A"], "B", Method::Pt).recipe();
        assert!(!pt.stage1_mlm && !pt.stage2);
        let mut t = TaskSpec::new(&["A"], "B", Method::TamePt);
        t.ablation = Ablation::Stage2NoSsd;
        let r = t.recipe();
        assert!(r.stage1_mlm && r.stage2 && r.stage2_mlm && !r.stage2_ssd);
        let mut pt2 = TaskSpec::new(&["A"], "B", Method::Pt);
        pt2.adapt = Some(true);
        assert!(pt2.recipe().stage2);
    }

    #[test]
    fn validation_rules() {
        assert!(TaskSpec::new(&["A"], "A", Method::Pt).validate().is_err());
        let mut t = TaskSpec::new(&["A"], "B", Method::Mept);
        t.ablation = Ablation::Stage2NoSsd;
        assert!(t.validate().is_err());
        assert!(TaskSpec::new(&["B", "D", "E"], "K", Method::TamePt).validate().is_ok());
    }

    #[test]
    fn multi_source_task_name() {
        assert_eq!(TaskSpec::new(&["B", "D", "E"], "K", Method::TamePt).task_name(), "BDE->K");
    }

    #[test]
    fn grid_has_five_variants_per_seed() {
        let base = TaskSpec::new(&["A"], "B", Method::TamePt);
        let grid = ablation_matrix(&base).unwrap();
        assert_eq!(grid.len() * base.seeds.len(), 25);
        assert!(ablation_matrix(&TaskSpec::new(&["A"], "B", Method::Pt)).is_err());
    }

    #[test]
    fn duplicate_run_ids_rejected() {
        let row = ReportRow {
            run_id: "x".into(),
            task: "A->B".into(),
            method: Method::Pt,
            ablation: Ablation::None,
            seed: 1,
            accuracy: 0.5,
            epochs_ran: 1,
            wall_time: 0.0,
        };
        let mut r = ExperimentReport::new();
        r.push(row.clone()).unwrap();
        assert!(r.push(row).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..20).collect();
        let out = parallel_map(&items, 3, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
