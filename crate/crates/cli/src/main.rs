use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use xdomain_core::config::RunConfig;
use xdomain_core::corpus::{load_jsonl, write_jsonl, SyntheticSpec, Vocabulary};
use xdomain_core::experiments::{evaluate_accuracy, prepare_run, run_ablation, ExperimentReport, Method};
use xdomain_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams, Readout, StorageDtype};
use xdomain_core::saliency::{compare_checkpoints, token_saliency};
use xdomain_core::training::append_metrics_csv;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] xdomain_core::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(xdomain_core::Error::Config(_)) => 1,
            CliError::Run(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(xdomain_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Parser)]
#[command(name = "xdomain", version, about = "Cross-domain prompt tuning experiments")]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, env = "XDOMAIN_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as JSONL files.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train one seed of the configured task.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Stage-1 checkpoint to adapt from with `--stage 2`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Accuracy of a checkpoint on a labeled JSONL file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `vocab.json` next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Where to write the JSON record; defaults to `<checkpoint>.eval.json`.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Every ablation variant over every configured seed.
    Ablate {
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Token saliency for one checkpoint, or the shift from a baseline.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// One sentence per line.
        #[arg(long)]
        sentences: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json("{}")?,
    };
    if let Some(root) = &cli.output_root {
        cfg.output_dir = root.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { out, seed, force } => gen_data(&cfg, out, seed, force),
        Command::Train {
            stage,
            init,
            seed,
            run_id,
            force,
        } => train(cfg, stage, init, seed, run_id, force),
        Command::Evaluate {
            checkpoint,
            data,
            vocab,
            json,
        } => evaluate(&cfg, &checkpoint, &data, vocab, json),
        Command::Ablate { jobs, run_id } => ablate(cfg, jobs, run_id),
        Command::Saliency {
            checkpoint,
            baseline,
            sentences,
            vocab,
            format,
        } => saliency(&cfg, &checkpoint, baseline.as_deref(), &sentences, vocab, format),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>, seed: Option<u64>, force: bool) -> Result<()> {
    let mut spec: SyntheticSpec = cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| CliError::Usage("gen-data needs a `data.synthetic` spec".into()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.output_dir.join("data"));
    let domains = xdomain_core::corpus::generate_synthetic(&spec)?;
    let mut files = vec![out.join("manifest.json")];
    for name in domains.keys() {
        files.push(out.join(format!("{name}.labeled.jsonl")));
        files.push(out.join(format!("{name}.unlabeled.jsonl")));
    }
    if !force {
        if let Some(existing) = files.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!(
                "{} exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let mut counts = serde_json::Map::new();
    for (name, corpus) in &domains {
        write_jsonl(out.join(format!("{name}.labeled.jsonl")), &corpus.labeled)?;
        write_jsonl(out.join(format!("{name}.unlabeled.jsonl")), &corpus.unlabeled)?;
        counts.insert(
            name.clone(),
            json!({"labeled": corpus.labeled.len(), "unlabeled": corpus.unlabeled.len()}),
        );
    }
    let manifest = json!({"seed": spec.seed, "counts": counts, "spec": spec});
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("json"))?;
    println!("wrote {} domains to {}", domains.len(), out.display());
    Ok(())
}

fn checkpoint_extras(run_id: &str, stage: u8, seed: u64, method: Method) -> serde_json::Value {
    json!({"run_id": run_id, "stage": stage, "seed": seed, "method": method})
}

fn train(
    mut cfg: RunConfig,
    stage: StageArg,
    init: Option<PathBuf>,
    seed: Option<u64>,
    run_id: Option<String>,
    force: bool,
) -> Result<()> {
    if run_id.is_some() {
        cfg.run_id = run_id;
        cfg.validate()?;
    }
    let task = cfg.task();
    let seed = seed.unwrap_or(task.seeds[0]);
    let recipe = task.recipe();
    let (do1, do2) = match stage {
        StageArg::One => (true, false),
        StageArg::Two => (false, true),
        StageArg::Both => (true, recipe.stage2),
    };
    if matches!(stage, StageArg::Two) {
        if init.is_none() {
            return Err(CliError::Usage("--stage 2 needs a stage-1 checkpoint via --init".into()));
        }
        if !recipe.stage2 {
            return Err(CliError::Usage(format!("{} has no stage 2", task.method)));
        }
    }
    let dir = cfg.run_dir().join(format!("seed{seed}"));
    let run_id = format!("{}/seed{seed}", cfg.run_id());
    let outputs: Vec<PathBuf> = [(do1, "stage1.ckpt"), (do2, "stage2.ckpt")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, f)| dir.join(f))
        .collect();
    if let Some(p) = outputs.iter().find(|p| p.exists()) {
        if !force {
            return Err(CliError::Usage(format!(
                "run `{run_id}` already has {}; pass --force or pick another run id",
                p.display()
            )));
        }
    }
    let metrics = dir.join("metrics.csv");
    if do1 && metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| io(&metrics, e))?;
    }
    write_text(&dir.join("config.json"), &cfg.to_json_pretty())?;

    let settings = cfg.settings();
    let domains = cfg.data.load()?;
    let prep = prepare_run(&task, seed, &domains, &settings)?;
    write_text(&dir.join("vocab.json"), &prep.vocab.to_json())?;

    let mut current = match &init {
        Some(p) if !do1 => load_checkpoint(p, Some(&prep.init.config))?.model,
        _ => prep.init.clone(),
    };
    let mut final_metric = None;
    if do1 {
        let out = prep.run_stage1(&recipe, &settings)?;
        append_metrics_csv(&metrics, &run_id, &out.history)?;
        current = out.best;
        final_metric = Some(("stage 1 validation accuracy", out.best_metric));
        let ckpt = Checkpoint {
            model: current.clone(),
            extras: checkpoint_extras(&run_id, 1, seed, task.method),
        };
        save_checkpoint(&dir.join("stage1.ckpt"), &ckpt, StorageDtype::F64)?;
    }
    if do2 {
        let out = prep.run_stage2(&recipe, &settings, current)?;
        append_metrics_csv(&metrics, &run_id, &out.history)?;
        final_metric = Some(("stage 2 validation mixed loss", out.best_metric));
        let ckpt = Checkpoint {
            model: out.best,
            extras: checkpoint_extras(&run_id, 2, seed, task.method),
        };
        save_checkpoint(&dir.join("stage2.ckpt"), &ckpt, StorageDtype::F64)?;
    }
    if let Some((name, v)) = final_metric {
        println!("{run_id}: {name} {v:.6}");
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, vocab: Option<PathBuf>) -> Result<(ModelParams, Vocabulary, Readout)> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let vocab_path = vocab.unwrap_or_else(|| checkpoint.with_file_name("vocab.json"));
    let text = fs::read_to_string(&vocab_path).map_err(|e| io(&vocab_path, e))?;
    let vocab = Vocabulary::from_json(&text, &cfg.verbalizer)?;
    if vocab.len() != ckpt.model.config.vocab_size {
        return Err(CliError::Usage(format!(
            "{} has {} tokens but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            ckpt.model.config.vocab_size
        )));
    }
    let method = match ckpt.extras.get("method") {
        Some(m) => serde_json::from_value::<Method>(m.clone()).map_err(xdomain_core::Error::from)?,
        None => cfg.experiment.method,
    };
    Ok((ckpt.model, vocab, method.readout()))
}

fn evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, vocab: Option<PathBuf>, json_out: Option<PathBuf>) -> Result<()> {
    let (params, vocab, readout) = load_model(cfg, checkpoint, vocab)?;
    let examples = load_jsonl(data)?;
    let max_len = cfg.max_len.min(params.config.max_positions);
    let accuracy = evaluate_accuracy(&params, &examples, &vocab, readout, max_len)?;
    println!("accuracy {accuracy:.6}");
    let record = json!({
        "checkpoint": checkpoint,
        "dataset": data,
        "examples": examples.len(),
        "accuracy": accuracy,
    });
    let out = json_out.unwrap_or_else(|| checkpoint.with_extension("eval.json"));
    write_text(&out, &serde_json::to_string_pretty(&record).expect("json"))
}

fn ablate(mut cfg: RunConfig, jobs: usize, run_id: Option<String>) -> Result<()> {
    if run_id.is_some() {
        cfg.run_id = run_id;
        cfg.validate()?;
    }
    let mut task = cfg.task();
    task.method = Method::TamePt;
    let dir = cfg.run_dir();
    let results = dir.join("results.csv");
    if results.exists() {
        return Err(CliError::Usage(format!("{} exists; pick another run id", results.display())));
    }
    write_text(&dir.join("config.json"), &cfg.to_json_pretty())?;
    let domains = cfg.data.load()?;
    let outcomes = run_ablation(&task, &domains, &cfg.settings(), jobs)?;
    let mut report = ExperimentReport::new();
    for o in &outcomes {
        report.push(o.row.clone())?;
        append_metrics_csv(&dir.join("metrics.csv"), &o.row.run_id, &o.history())?;
    }
    report.write_csv(&results)?;
    let summary = report.summary_json();
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    for a in report.aggregate() {
        println!(
            "{} {} {:<16} n={} accuracy {:.4} ± {:.4}",
            a.task, a.method, a.ablation, a.n, a.mean, a.stderr
        );
    }
    Ok(())
}

fn saliency(
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    sentences: &Path,
    vocab: Option<PathBuf>,
    format: Format,
) -> Result<()> {
    let text = fs::read_to_string(sentences).map_err(|e| io(sentences, e))?;
    let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let vocab_path = vocab.unwrap_or_else(|| checkpoint.with_file_name("vocab.json"));
    let (params, vocab, readout) = load_model(cfg, checkpoint, Some(vocab_path.clone()))?;
    let name = checkpoint.display().to_string();
    match baseline {
        None => {
            let reports = lines
                .iter()
                .map(|s| token_saliency(&params, s, &vocab, readout, &name))
                .collect::<xdomain_core::Result<Vec<_>>>()?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&reports).expect("json")),
                Format::Text => reports.iter().for_each(|r| println!("{}", r.render())),
            }
        }
        Some(base) => {
            let (base_params, _, _) = load_model(cfg, base, Some(vocab_path))?;
            let spec = cfg.data.synthetic.clone();
            let aware = |w: &str| spec.as_ref().is_some_and(|s| s.is_aware(w));
            let base_name = base.display().to_string();
            let cmp = compare_checkpoints(
                (&base_params, &base_name),
                (&params, &name),
                &lines,
                &vocab,
                readout,
                aware,
            )?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&cmp).expect("json")),
                Format::Text => {
                    for s in &cmp.sentences {
                        println!("{}{}", s.a.render(), s.b.render());
                    }
                    println!(
                        "domain-aware mean rank improvement {:.3} (improved in {:.1}% of sentences)",
                        cmp.mean_rank_improvement,
                        100.0 * cmp.improved_fraction
                    );
                }
            }
        }
    }
    Ok(())
}
