use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idcontrast::config::ScheduleEnd;
use idcontrast::data::{LoadedSplit, Pool};
use idcontrast::eval::{class_cohesion, EmbeddingBank};
use idcontrast::harness::{
    self, descriptor, parse_override, ExperimentSpec, PretrainOptions, RunResult, SweepCell, CHECKPOINT_FILE,
    RESULT_FILE,
};
use idcontrast::training::{Checkpoint, Objective};
use idcontrast::{Error, Result};

#[derive(Parser)]
#[command(name = "idcontrast", version, about = "Contrastive pre-training with labeled queue positives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long, allow_negative_numbers = true)]
    temperature: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    momentum: Option<f64>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Epoch at which the in-distribution term is off, or `none`.
    #[arg(long)]
    t_end: Option<ScheduleEnd>,
    #[arg(long)]
    total_epochs: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    base_lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    optimizer_momentum: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    ghost_subbatches: Option<usize>,
    #[arg(long)]
    monitor_every: Option<u32>,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; defaults to the file's `output_dir`, then
    /// `$IDCONTRAST_OUTPUT/<name>`, then `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any document key, e.g. `--set eval.linear_probe=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Clone)]
struct Target {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; defaults to every seed's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pool to classify; defaults to the file's `eval.query_pool`.
    #[arg(long)]
    pool: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the split and write its descriptor.
    PrepareData(Common),
    /// Pre-train one seed (or every seed of the experiment).
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a checkpoint after every N-th epoch.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Train the plain instance-discrimination baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Weighted k-NN accuracy against the labeled pool.
    EvalKnn {
        #[command(flatten)]
        target: Target,
        #[arg(long = "k")]
        ks: Vec<usize>,
    },
    /// Linear probe on the frozen backbone.
    EvalLinear(Target),
    /// Fine-tune the backbone with a softmax head.
    Finetune(Target),
    /// Write the embeddings of one pool as an embedding-bank file.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: String,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run the α × t_end grid and write the accuracy matrix.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Only this cell, as `ALPHA,T_END` (e.g. `2,100` or `2,none`), or `moco`.
        #[arg(long = "cell")]
        cells: Vec<String>,
    },
    /// Aggregate result files below a directory into mean (std) tables.
    Report {
        dir: PathBuf,
        /// Also draw loss and k-NN curves for every run.
        #[arg(long)]
        plots: bool,
    },
}

fn overrides(common: &Common) -> Result<Vec<(String, toml::Value)>> {
    let t = &common.train;
    let mut flags: Vec<String> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push(format!("{k}={v}"));
        }
    };
    push("temperature", t.temperature.map(|v| format!("{v:?}")));
    push("momentum", t.momentum.map(|v| format!("{v:?}")));
    push("queue_size", t.queue_size.map(|v| v.to_string()));
    push("batch_size", t.batch_size.map(|v| v.to_string()));
    push("alpha", t.alpha.map(|v| format!("{v:?}")));
    push("t_end", t.t_end.map(|v| match v.0 {
        Some(e) => e.to_string(),
        None => "\"none\"".to_string(),
    }));
    push("total_epochs", t.total_epochs.map(|v| v.to_string()));
    push("base_lr", t.base_lr.map(|v| format!("{v:?}")));
    push("optimizer_momentum", t.optimizer_momentum.map(|v| format!("{v:?}")));
    push("embedding_dim", t.embedding_dim.map(|v| v.to_string()));
    push("ghost_subbatches", t.ghost_subbatches.map(|v| v.to_string()));
    push("monitor_every", t.monitor_every.map(|v| v.to_string()));
    common.sets.iter().chain(&flags).map(|s| parse_override(s)).collect()
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::read(&common.config, &overrides(common)?)?;
    if let Some(out) = &common.out {
        spec.output_dir = out.clone();
    }
    Ok(spec)
}

fn load_data(spec: &ExperimentSpec) -> Result<LoadedSplit> {
    spec.load_split(&descriptor(spec)?)
}

fn checkpoints(spec: &ExperimentSpec, explicit: &Option<PathBuf>) -> Result<Vec<PathBuf>> {
    let paths = match explicit {
        Some(p) => vec![p.clone()],
        None => spec.seeds.iter().map(|&s| spec.seed_dir(s).join(CHECKPOINT_FILE)).collect(),
    };
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Error::Misuse(format!("checkpoint {} not found; run pretrain first", missing.display())));
    }
    Ok(paths)
}

/// Adds `scores` to the result file next to `ck_path`.
fn record_scores(
    spec: &ExperimentSpec,
    ck_path: &Path,
    ck: &Checkpoint,
    scores: BTreeMap<String, f64>,
    cohesion: Option<(f64, f64)>,
) -> Result<()> {
    let path = ck_path.with_file_name(RESULT_FILE);
    let mut result = if path.exists() {
        RunResult::read(&path)?
    } else {
        RunResult {
            name: spec.name.clone(),
            seed: ck.config.seed,
            alpha: ck.config.alpha,
            t_end: ck.config.t_end,
            objective: ck.objective,
            scores: BTreeMap::new(),
            intra: None,
            inter: None,
        }
    };
    result.scores.extend(scores);
    if let Some((intra, inter)) = cohesion {
        result.intra = Some(intra);
        result.inter = Some(inter);
    }
    result.write(&path)
}

fn pool_of(spec: &ExperimentSpec, text: &Option<String>) -> Result<Pool> {
    text.as_deref().map_or(Ok(spec.eval.query_pool), str::parse)
}

fn parse_cell(text: &str) -> Result<SweepCell> {
    if text == "moco" {
        return Ok(SweepCell { alpha: None, t_end: ScheduleEnd::NONE });
    }
    let (a, t) = text.split_once(',').ok_or_else(|| Error::Parse(format!("cell {text:?} is not ALPHA,T_END")))?;
    let alpha = a.trim().parse::<f64>().map_err(|e| Error::Parse(format!("cell alpha {a:?}: {e}")))?;
    Ok(SweepCell { alpha: Some(alpha), t_end: t.trim().parse()? })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(common) => {
            let spec = load_spec(&common)?;
            let split = harness::prepare_data(&spec)?;
            println!(
                "{}: labeled {}, unlabeled {}, validation {}, test {}",
                spec.split_path().display(),
                split.labeled().len(),
                split.unlabeled_len(),
                split.validation().len(),
                split.test().len()
            );
        }
        Command::Pretrain { common, seed, resume, checkpoint_every, baseline } => {
            let spec = load_spec(&common)?;
            let data = load_data(&spec)?;
            let objective = if baseline { Objective::MocoBaseline } else { Objective::Combined };
            let resume = resume.map(|p| Checkpoint::read(&p)).transpose()?;
            let seeds = match (&resume, seed) {
                (Some(ck), _) => vec![ck.config.seed],
                (None, Some(s)) => vec![s],
                (None, None) => spec.seeds.clone(),
            };
            for s in seeds {
                let config = idcontrast::TrainConfig { seed: s, ..spec.train.clone() };
                let dir = spec.seed_dir(s);
                let options = PretrainOptions { resume: resume.clone(), checkpoint_every, objective };
                let outcome = harness::pretrain_into(config, &spec, &data, &dir, options)?;
                let last = outcome.metrics.last().map_or("no epochs".to_string(), |r| format!("final loss {:.4}", r.loss_total));
                println!("seed {s}: {} ({last})", dir.join(CHECKPOINT_FILE).display());
            }
        }
        Command::EvalKnn { target, ks } => {
            let spec = load_spec(&target.common)?;
            let data = load_data(&spec)?;
            let pool = pool_of(&spec, &target.pool)?;
            let ks = if ks.is_empty() { spec.eval.knn.clone() } else { ks };
            for path in checkpoints(&spec, &target.checkpoint)? {
                let ck = Checkpoint::read(&path)?;
                let pair = ck.pair()?;
                let scores = harness::knn_scores(&pair, &data, pool, &ks)?;
                let line: Vec<String> = scores.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                println!("{}: {}", path.display(), line.join(", "));
                let cohesion = class_cohesion(&EmbeddingBank::from_encoder(&pair, &data.labeled)?).ok();
                record_scores(&spec, &path, &ck, scores, cohesion)?;
            }
        }
        Command::EvalLinear(target) => probe_command(&target, false)?,
        Command::Finetune(target) => probe_command(&target, true)?,
        Command::ExportEmbeddings { common, checkpoint, pool, output } => {
            let spec = load_spec(&common)?;
            let pool: Pool = pool.parse()?;
            let data = load_data(&spec)?;
            let bank = harness::export_embeddings(&Checkpoint::read(&checkpoint)?, &data, pool, &output)?;
            println!("{}: {} rows of dimension {}", output.display(), bank.len(), bank.dim());
        }
        Command::Sweep { common, cells } => {
            let spec = load_spec(&common)?;
            let data = load_data(&spec)?;
            let chosen = cells.iter().map(|c| parse_cell(c)).collect::<Result<Vec<_>>>()?;
            let matrix = harness::run_sweep(&spec, &data, if chosen.is_empty() { None } else { Some(&chosen) })?;
            print!("{matrix}");
        }
        Command::Report { dir, plots } => {
            let results: Vec<RunResult> = harness::collect_results(&dir)?.into_iter().map(|(_, r)| r).collect();
            let table = harness::report_table(&results)?;
            std::fs::write(dir.join("report.csv"), &table)?;
            print!("{table}");
            if plots {
                plot_all(&dir)?;
            }
        }
    }
    Ok(())
}

#[cfg(feature = "plots")]
fn plot_all(dir: &Path) -> Result<()> {
    for run_dir in harness::metric_dirs(dir)? {
        for file in harness::plot_run(&run_dir)? {
            println!("wrote {}", file.display());
        }
    }
    Ok(())
}

#[cfg(not(feature = "plots"))]
fn plot_all(_: &Path) -> Result<()> {
    Err(Error::Misuse("this build has no plotting support".into()))
}

fn probe_command(target: &Target, finetune: bool) -> Result<()> {
    let mut spec = load_spec(&target.common)?;
    spec.eval.query_pool = pool_of(&spec, &target.pool)?;
    let data = load_data(&spec)?;
    for path in checkpoints(&spec, &target.checkpoint)? {
        let ck = Checkpoint::read(&path)?;
        let pair = ck.pair()?;
        let (name, acc) = if finetune {
            ("fine_tune", harness::fine_tune_score(&spec, &pair, &data, ck.config.seed)?)
        } else {
            ("linear_probe", harness::linear_probe_score(&spec, &pair, &data, ck.config.seed)?)
        };
        println!("{}: {name} {acc:.4}", path.display());
        record_scores(&spec, &path, &ck, BTreeMap::from([(name.to_string(), acc)]), None)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
