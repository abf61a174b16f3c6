//! `march`: dataset statistics, rollouts, toy training and evaluation.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 data,
//! 4 backend.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use march_core::datamodel::{dataset_stats, load_dataset, save_dataset, RagSample};
use march_core::evalharness::{evaluate, GoldMatchJudge, Judge, LlmJudge};
use march_core::llmgateway::{build_backend, Backend, BackendSpec, GatewayMetrics, HttpConfig, UreqTransport};
use march_core::pipeline::{Dialect, Pipeline, PipelineError, RolloutSink, TextDialect};
use march_core::prompting::TemplateSet;
use march_core::reward::{RewardFunction, ScalarVariant, ZeroClaimPolicy};
use march_core::toyworld::{toy_dataset, warm_start, ToyDialect};
use march_core::trainer::{checkpoint_path, train, Checkpoint, TrainError, TrainOutputs, Trainer};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "march", version, about = "Solver/Proposer/Checker rollouts, toy training and evaluation")]
struct Cli {
    /// TOML or JSON run configuration (a run manifest works too). Flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics.
    Stats {
        dataset: PathBuf,
    },
    /// Run Solver, Proposer and Checker over a dataset and score each rollout.
    Rollout(RolloutArgs),
    /// Warm-start and train the toy policy.
    Train(TrainArgs),
    /// Sample n responses per query, judge each, and report the consistency rate.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DataArgs {
    /// JSONL dataset.
    #[arg(required_unless_present = "toy")]
    dataset: Option<PathBuf>,
    /// Use N generated toy tasks instead of a dataset file.
    #[arg(long, value_name = "N", conflicts_with = "dataset")]
    toy: Option<usize>,
}

#[derive(Args)]
struct BackendArgs {
    /// `scripted:PATH`, `toy:CHECKPOINT` or `http:BASE_URL`.
    #[arg(long)]
    backend: Option<String>,
    /// Model name for an `http:` backend.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Ask the Proposer for at least K questions.
    #[arg(long, value_name = "K")]
    min_questions: Option<usize>,
    /// Independent Checker audits per rollout.
    #[arg(long, value_name = "M")]
    checker_samples: Option<usize>,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    /// `-1/0` (penalty) or `0/1` (incentive).
    #[arg(long, value_parser = parse_scalar, allow_hyphen_values = true)]
    scalar: Option<ScalarVariant>,
    /// Reward of a rollout that proposes no claims.
    #[arg(long, value_enum)]
    zero_claims: Option<ZeroClaimsArg>,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Number of updates.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Start from a checkpoint instead of a warm start.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Generations per query.
    #[arg(long)]
    n: Option<usize>,
    /// Evaluate only the first N samples.
    #[arg(long, value_name = "N")]
    first: Option<usize>,
    /// `gold` (offline), `scripted:PATH`, `toy:CHECKPOINT` or `http:BASE_URL`.
    #[arg(long)]
    judge: Option<String>,
    #[arg(long)]
    judge_model: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Ztr,
    Err,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZeroClaimsArg {
    Success,
    Failure,
}

fn parse_scalar(s: &str) -> Result<ScalarVariant, String> {
    match s {
        "-1/0" | "penalty" => Ok(ScalarVariant::PenaltyBased),
        "0/1" | "incentive" => Ok(ScalarVariant::IncentiveBased),
        _ => Err(format!("expected -1/0 or 0/1, got {s:?}")),
    }
}

fn parse_backend(s: &str, model: Option<&str>) -> Result<BackendSpec, String> {
    let (kind, rest) = s.split_once(':').ok_or_else(|| format!("backend {s:?}: expected KIND:VALUE"))?;
    match kind {
        "scripted" => Ok(BackendSpec::Scripted { script: rest.into() }),
        "toy" => Ok(BackendSpec::Toy { checkpoint: rest.into() }),
        "http" => {
            let model = model.ok_or("an http backend needs a model name")?;
            Ok(BackendSpec::Http(HttpConfig::new(rest, model)))
        }
        _ => Err(format!("unknown backend kind {kind:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Other = 1,
    Config = 2,
    Data = 3,
    Backend = 4,
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

trait Classify<T> {
    fn or_kind(self, kind: Kind) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_kind(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind,
            error: e.into(),
        })
    }
}

fn fail<T>(kind: Kind, msg: impl fmt::Display) -> Result<T, Failure> {
    Err(Failure {
        kind,
        error: anyhow!("{msg}"),
    })
}

fn apply_pipeline_args(cfg: &mut RunConfig, a: &PipelineArgs) {
    let p = &mut cfg.pipeline;
    if let Some(k) = a.min_questions {
        p.prompt.min_questions = Some(k);
    }
    if let Some(m) = a.checker_samples {
        p.checker_samples = m;
    }
    if let Some(r) = a.reward {
        p.reward.function = match r {
            RewardArg::Ztr => RewardFunction::Ztr,
            RewardArg::Err => RewardFunction::Err,
        };
    }
    if let Some(s) = a.scalar {
        p.reward.scalar_variant = s;
    }
    if let Some(z) = a.zero_claims {
        p.reward.n0_policy = match z {
            ZeroClaimsArg::Success => ZeroClaimPolicy::Success,
            ZeroClaimsArg::Failure => ZeroClaimPolicy::Failure,
        };
    }
}

fn apply_backend_args(cfg: &mut RunConfig, a: &BackendArgs) -> Result<(), Failure> {
    if let Some(b) = &a.backend {
        cfg.backend = Some(parse_backend(b, a.model.as_deref()).or_else(|e| fail(Kind::Config, e))?);
    }
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).or_else(|e| fail(Kind::Config, e))?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    match &cli.command {
        Command::Stats { .. } => {}
        Command::Rollout(a) => {
            apply_backend_args(&mut cfg, &a.backend)?;
            apply_pipeline_args(&mut cfg, &a.pipeline);
        }
        Command::Train(a) => {
            apply_pipeline_args(&mut cfg, &a.pipeline);
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if a.init.is_some() {
                cfg.init_checkpoint = a.init.clone();
            }
        }
        Command::Eval(a) => {
            apply_backend_args(&mut cfg, &a.backend)?;
            if let Some(n) = a.n {
                cfg.eval.n = n;
            }
            if a.first.is_some() {
                cfg.eval.first = a.first;
            }
            match a.judge.as_deref() {
                None => {}
                Some("gold") => cfg.judge = None,
                Some(j) => {
                    cfg.judge = Some(parse_backend(j, a.judge_model.as_deref()).or_else(|e| fail(Kind::Config, e))?)
                }
            }
        }
    }
    cfg.derive_seeds();
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Stats { .. } => "stats",
        Command::Rollout(_) => "rollout",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).or_kind(Kind::Other)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .or_kind(Kind::Other)
}

fn write_manifest(cfg: &RunConfig, command: &str, templates: &TemplateSet) -> Result<(), Failure> {
    let versions: serde_json::Map<String, serde_json::Value> = templates
        .versions()
        .into_iter()
        .map(|(name, v)| (name, json!(v)))
        .collect();
    let manifest = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "code_version": env!("CARGO_PKG_VERSION"),
        "seeds": {
            "run": cfg.seed,
            "train": cfg.train.seed,
            "base": cfg.base.seed,
            "pipeline": cfg.pipeline.seed,
            "eval": cfg.eval.seed,
        },
        "templates": versions,
        "run_config": cfg,
    });
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

fn load_samples(cfg: &RunConfig, data: &DataArgs) -> Result<Vec<RagSample>, Failure> {
    match (&data.dataset, data.toy) {
        (_, Some(n)) => {
            let samples: Vec<RagSample> = toy_dataset(cfg.seed, cfg.difficulty, n)
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            save_dataset(cfg.out.join("toy_dataset.jsonl"), &samples).or_kind(Kind::Data)?;
            Ok(samples)
        }
        (Some(p), None) => load_dataset(p).or_kind(Kind::Data),
        (None, None) => fail(Kind::Config, "no dataset given"),
    }
}

fn open_backend(spec: &BackendSpec) -> Result<Arc<dyn Backend>, Failure> {
    build_backend(spec, Arc::new(UreqTransport::default()), Arc::new(GatewayMetrics::default())).or_kind(Kind::Backend)
}

fn dialect_for(spec: &BackendSpec, templates: &TemplateSet) -> Box<dyn Dialect> {
    match spec {
        BackendSpec::Toy { .. } => Box::new(ToyDialect),
        _ => Box::new(TextDialect::new(templates.clone())),
    }
}

fn cmd_stats(dataset: &Path) -> Result<(), Failure> {
    let samples = load_dataset(dataset).or_kind(Kind::Data)?;
    let s = dataset_stats(&samples).or_kind(Kind::Data)?;
    println!("samples               {}", s.n_samples);
    println!("avg query length      {:.2} words", s.avg_query_len);
    println!(
        "docs per query        avg {:.2}  min {}  max {}",
        s.docs_per_query.avg, s.docs_per_query.min, s.docs_per_query.max
    );
    println!(
        "total doc length      avg {:.1}  min {}  max {} words",
        s.total_doc_len.avg, s.total_doc_len.min, s.total_doc_len.max
    );
    match s.irrelevant_doc_ratio {
        Some(r) => println!("irrelevant doc ratio  {r:.4}"),
        None => println!("irrelevant doc ratio  n/a"),
    }
    Ok(())
}

fn cmd_rollout(cfg: &RunConfig, data: &DataArgs, templates: &TemplateSet) -> Result<(), Failure> {
    let Some(spec) = &cfg.backend else {
        return fail(Kind::Config, "rollout needs --backend or a [backend] section");
    };
    let samples = load_samples(cfg, data)?;
    let backend = open_backend(spec)?;
    let dialect = dialect_for(spec, templates);
    let sink = RolloutSink::create(&cfg.out.join("rollouts.jsonl")).or_kind(Kind::Other)?;
    let results = Pipeline::new(backend.as_ref(), dialect.as_ref(), &cfg.pipeline).run_batch(&samples, Some(&sink));
    let mut rewards = Vec::new();
    let mut claims = 0usize;
    let mut first_err: Option<PipelineError> = None;
    for r in results {
        match r {
            Ok(rec) => {
                rewards.push(rec.reward.value);
                claims += rec.claims.len();
            }
            Err(e) => {
                log::warn!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let failed = samples.len() - rewards.len();
    if rewards.is_empty() {
        let e = first_err.expect("no samples succeeded");
        let kind = match e {
            PipelineError::Backend { .. } | PipelineError::ShortReply { .. } => Kind::Backend,
            PipelineError::Config(_) => Kind::Config,
            PipelineError::Prompt { .. } => Kind::Data,
            _ => Kind::Other,
        };
        return Err(e).or_kind(kind);
    }
    let n = rewards.len() as f64;
    println!(
        "rollouts {}  failed {failed}  mean reward {:.4}  mean claims {:.2}",
        rewards.len(),
        rewards.iter().sum::<f64>() / n,
        claims as f64 / n
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let ckpt_dir = cfg.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).or_kind(Kind::Other)?;
    let snapshot = serde_json::to_value(cfg).or_kind(Kind::Other)?;
    let initial = match &cfg.init_checkpoint {
        Some(p) => Checkpoint::load(p).or_kind(Kind::Data)?.policy,
        None => {
            log::info!("warm start: {} steps", cfg.base.steps);
            let p = warm_start(&cfg.base);
            Checkpoint {
                step: 0,
                policy: p.clone(),
                config: snapshot.clone(),
            }
            .save(&checkpoint_path(&ckpt_dir, 0))
            .or_kind(Kind::Other)?;
            p
        }
    };
    let mut trainer = Trainer::new(initial, cfg.train.clone(), cfg.pipeline.clone(), cfg.difficulty).map_err(|e| {
        let kind = if matches!(e, TrainError::Config(_)) { Kind::Config } else { Kind::Other };
        Failure { kind, error: e.into() }
    })?;
    let outputs = TrainOutputs {
        metrics_csv: Some(cfg.out.join("metrics.csv")),
        checkpoint_dir: Some(ckpt_dir),
        config_snapshot: snapshot,
    };
    let every = cfg.train.checkpoint_every;
    let metrics = train(&mut trainer, &outputs, |m| {
        if m.step % every == 0 {
            eprintln!(
                "step {:>5}  reward {:+.3}  questions {:.2}  checker {:.3}  kl {:.4}",
                m.step, m.mean_reward, m.mean_questions_proposed, m.checker_accuracy_vs_oracle, m.mean_kl
            );
        }
    })
    .map_err(|e| {
        let kind = match e {
            TrainError::NoRollouts(_) => Kind::Backend,
            TrainError::Config(_) => Kind::Config,
            _ => Kind::Other,
        };
        Failure { kind, error: e.into() }
    })?;
    if let Some(last) = metrics.last() {
        println!(
            "trained {} steps  final reward {:+.4}  questions {:.2}",
            last.step, last.mean_reward, last.mean_questions_proposed
        );
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, data: &DataArgs, templates: &TemplateSet) -> Result<(), Failure> {
    let Some(spec) = &cfg.backend else {
        return fail(Kind::Config, "eval needs --backend or a [backend] section");
    };
    if cfg.eval.n == 0 {
        return fail(Kind::Config, "--n must be at least 1");
    }
    let samples = load_samples(cfg, data)?;
    let subject = open_backend(spec)?;
    let dialect = dialect_for(spec, templates);
    let judge_backend = cfg.judge.as_ref().map(open_backend).transpose()?;
    let llm_judge;
    let gold_judge = GoldMatchJudge {
        policy: cfg.pipeline.reward.match_policy,
    };
    let judge: &dyn Judge = match &judge_backend {
        Some(b) => {
            llm_judge = LlmJudge {
                backend: b.as_ref(),
                templates,
                sampling: cfg.eval.judge_sampling,
            };
            &llm_judge
        }
        None => &gold_judge,
    };
    let snapshot = serde_json::to_value(cfg).or_kind(Kind::Other)?;
    let report = evaluate(&samples, subject.as_ref(), dialect.as_ref(), judge, &cfg.eval, snapshot).or_kind(Kind::Config)?;
    write_json(&cfg.out.join("eval_report.json"), &report)?;
    if report.n_samples == 0 && report.n_failed > 0 {
        return fail(Kind::Backend, format!("all {} samples failed", report.n_failed));
    }
    let consistent = report.per_sample.iter().filter(|v| v.final_verdict).count();
    println!(
        "consistency_rate {:.6}  ({consistent}/{} samples, {} failed)",
        report.consistency_rate, report.n_samples, report.n_failed
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Stats { dataset } = &cli.command {
        return cmd_stats(dataset);
    }
    let cfg = resolve(&cli)?;
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .or_kind(Kind::Other)?;
    }
    let templates = TemplateSet::load(&cfg.pipeline.prompt).or_kind(Kind::Config)?;
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| anyhow!("{}: {e}", cfg.out.display()))
        .or_kind(Kind::Other)?;
    write_manifest(&cfg, command_name(&cli.command), &templates)?;
    match &cli.command {
        Command::Stats { .. } => unreachable!("handled above"),
        Command::Rollout(a) => cmd_rollout(&cfg, &a.data, &templates),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(a) => cmd_eval(&cfg, &a.data, &templates),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}
