//! `dash` — one binary driving every pipeline stage: base training,
//! profiling, calibration, scorer training, inference, benchmarks, and the
//! exhaustive path oracle.
//!
//! Configuration lives in a single TOML file (`--config`); every section is
//! optional and falls back to the pinned defaults below. A handful of flags
//! (`--seed`, `--out`, `--mode`, `--target-ratio`) override the config for
//! the common sweeps. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure. Every artifact embeds the model-config hash and the seed that
//! produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dash_core::calibration::compute_scale_table;
use dash_core::checkpoint::{config_hash, Checkpoint};
use dash_core::experiments::{bench_rows_to_csv, bench_table, calibrate_beta, ExperimentInputs};
use dash_core::model::{path_to_string, LayerState, ModelConfig, ToyModel};
use dash_core::oracle::{evaluate_all_paths, pareto_frontier};
use dash_core::policy::{Conditioning, PoolKind, ScorerConfig, ScorerParams, StateSet};
use dash_core::profiler::{
    adjacent_similarity_profile, io_similarity_profile, static_skip_sweep, sweep_to_csv,
};
use dash_core::rewards::{train_scorer, PplSignMode, RewardConfig, TrainMode, TrainScorerConfig};
use dash_core::runtime::{evaluate_policy, run_async, run_sync, PipelineReport};
use dash_core::task::TaskSpec;
use dash_core::train::train_base_model;

// ── Errors and exit codes ──────────────────────────────────────────────

/// Failure carrying its process exit code (1 usage, 2 runtime).
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<dash_core::DashError> for Failure {
    fn from(err: dash_core::DashError) -> Self {
        Failure::runtime(err.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::runtime(err.to_string())
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

// ── Command line ───────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "dash",
    about = "Dynamic layer-skipping runtime for a toy transformer",
    version
)]
struct Cli {
    /// Path to the run-config TOML; missing file means built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the stage-relevant seed (training, sampling, or eval).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train the base model and write the `dash-ckpt-v1` checkpoint.
    TrainBase,
    /// Emit similarity profiles and the static skip sweep as CSV.
    Profile(CkptArg),
    /// Compute the per-layer scale table and write a calibrated checkpoint.
    Calibrate(CkptArg),
    /// Train the decision scorer; optionally budget-controlled.
    TrainScorer(TrainScorerArgs),
    /// Run one input through the dynamic pipeline and print the run report.
    Infer(InferArgs),
    /// Produce the methods-by-speedups benchmark table and oracle frontier.
    Bench(CkptArg),
    /// Enumerate all admissible paths and write the Pareto frontier.
    Oracle(CkptArg),
}

#[derive(Debug, Args)]
struct CkptArg {
    /// Checkpoint to load (defaults to the stage's expected artifact).
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainScorerArgs {
    #[command(flatten)]
    ckpt: CkptArg,

    /// Engage the budget controller to hit this speedup target.
    #[arg(long, value_name = "R")]
    target_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    ckpt: CkptArg,

    /// Decision scheduling: inline (sync) or overlapped (async).
    #[arg(long, value_enum, default_value = "sync")]
    mode: ModeArg,

    /// Comma-separated token ids; omitted means one sampled episode.
    #[arg(long, value_name = "T0,T1,...")]
    tokens: Option<String>,
}

// ── Run configuration (TOML) ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelSection,
    task: TaskSection,
    scorer: ScorerSection,
    reward: RewardSection,
    scorer_train: ScorerTrainSection,
    seeds: SeedSection,
    eval: EvalSection,
    bench: BenchSection,
    /// Target speedups for budget sweeps and the benchmark table.
    targets: Vec<f64>,
    paths: PathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            task: TaskSection::default(),
            scorer: ScorerSection::default(),
            reward: RewardSection::default(),
            scorer_train: ScorerTrainSection::default(),
            seeds: SeedSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            targets: vec![1.33, 1.67, 2.0],
            paths: PathSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    vocab_size: usize,
    max_seq_len: usize,
    seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        // Pinned base shape: trains past the 0.95 floor in seconds and its
        // lookup circuit spans the middle layers (see the profiler sweep).
        Self {
            n_layers: 6,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: dash_core::task::VOCAB_SIZE,
            max_seq_len: dash_core::task::LOOKUP_SEQ_LEN,
            seed: 17,
        }
    }
}

impl ModelSection {
    fn to_config(&self, seed_override: Option<u64>) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            seed: seed_override.unwrap_or(self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum TaskKindName {
    Lookup,
    Markov,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TaskSection {
    kind: TaskKindName,
    train_seed: Option<u64>,
    val_seed: Option<u64>,
    val_size: Option<usize>,
    accuracy_floor: Option<f64>,
    max_steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    eval_every: Option<usize>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKindName::Lookup,
            train_seed: None,
            val_seed: None,
            val_size: None,
            accuracy_floor: None,
            max_steps: None,
            batch_size: None,
            learning_rate: None,
            eval_every: None,
        }
    }
}

impl TaskSection {
    fn to_spec(&self) -> TaskSpec {
        let mut spec = match self.kind {
            TaskKindName::Lookup => TaskSpec::lookup_default(),
            TaskKindName::Markov => TaskSpec::markov_default(),
        };
        if let Some(v) = self.train_seed {
            spec.train_seed = v;
        }
        if let Some(v) = self.val_seed {
            spec.val_seed = v;
        }
        if let Some(v) = self.val_size {
            spec.val_size = v;
        }
        if let Some(v) = self.accuracy_floor {
            spec.accuracy_floor = v;
        }
        if let Some(v) = self.max_steps {
            spec.max_steps = v;
        }
        if let Some(v) = self.batch_size {
            spec.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            spec.learning_rate = v;
        }
        if let Some(v) = self.eval_every {
            spec.eval_every = v;
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ConditioningName {
    PerCandidate,
    SingleOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PoolName {
    LastToken,
    MeanPool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScorerSection {
    d_l: usize,
    d_1: usize,
    d_2: usize,
    alpha_penalty: f64,
    seed: u64,
    conditioning: ConditioningName,
    pool: PoolName,
    /// Allowed state codes; must include 4 (full precision).
    allowed: Vec<u8>,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            d_l: 8,
            d_1: 24,
            d_2: 24,
            alpha_penalty: 0.05,
            seed: 71,
            conditioning: ConditioningName::PerCandidate,
            pool: PoolName::LastToken,
            allowed: vec![0, 1, 2, 4],
        }
    }
}

impl ScorerSection {
    fn to_config(&self, seed_override: Option<u64>) -> CmdResult<ScorerConfig> {
        let states: Vec<LayerState> = self
            .allowed
            .iter()
            .map(|&code| LayerState::from_code(code))
            .collect::<dash_core::Result<_>>()
            .map_err(|e| Failure::usage(format!("scorer.allowed: {e}")))?;
        let allowed = StateSet::from_states(&states)
            .map_err(|e| Failure::usage(format!("scorer.allowed: {e}")))?;
        Ok(ScorerConfig {
            d_l: self.d_l,
            d_1: self.d_1,
            d_2: self.d_2,
            alpha_penalty: self.alpha_penalty,
            seed: seed_override.unwrap_or(self.seed),
            conditioning: match self.conditioning {
                ConditioningName::PerCandidate => Conditioning::PerCandidate,
                ConditioningName::SingleOutput => Conditioning::SingleOutput,
            },
            pool: match self.pool {
                PoolName::LastToken => PoolKind::LastToken,
                PoolName::MeanPool => PoolKind::MeanPool,
            },
            allowed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PplSignName {
    Difference,
    PaperLiteral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RewardSection {
    beta: f64,
    lambda: f64,
    epsilon: f64,
    ppl_sign_mode: PplSignName,
}

impl Default for RewardSection {
    fn default() -> Self {
        let base = RewardConfig::default();
        Self {
            beta: base.beta,
            lambda: base.lambda,
            epsilon: base.epsilon,
            ppl_sign_mode: PplSignName::Difference,
        }
    }
}

impl RewardSection {
    fn to_config(&self) -> RewardConfig {
        RewardConfig {
            beta: self.beta,
            lambda: self.lambda,
            epsilon: self.epsilon,
            ppl_sign_mode: match self.ppl_sign_mode {
                PplSignName::Difference => PplSignMode::Difference,
                PplSignName::PaperLiteral => PplSignMode::PaperLiteral,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScorerTrainSection {
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    tau0: f64,
    alpha_decay: f64,
    episode_seed: u64,
    sample_seed: u64,
    baseline: bool,
    log_every: usize,
    /// Present means co-train the base model at this learning rate.
    co_train_lr: Option<f64>,
}

impl Default for ScorerTrainSection {
    fn default() -> Self {
        let base = TrainScorerConfig::default();
        Self {
            steps: base.steps,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            tau0: base.tau0,
            alpha_decay: base.alpha_decay,
            episode_seed: base.episode_seed,
            sample_seed: base.sample_seed,
            baseline: base.baseline,
            log_every: base.log_every,
            co_train_lr: None,
        }
    }
}

impl ScorerTrainSection {
    fn to_config(&self) -> TrainScorerConfig {
        TrainScorerConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            tau0: self.tau0,
            alpha_decay: self.alpha_decay,
            episode_seed: self.episode_seed,
            sample_seed: self.sample_seed,
            baseline: self.baseline,
            mode: match self.co_train_lr {
                Some(lr) => TrainMode::CoTrain { model_lr: lr },
                None => TrainMode::FrozenBase,
            },
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SeedSection {
    /// Calibration-set sampling seed.
    calib: u64,
    /// Evaluation-episode sampling seed.
    eval: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { calib: 333, eval: 777 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    /// Evaluation episodes for profiles, policies, and benchmarks.
    episodes: usize,
    /// Calibration sample count (scale-table estimation).
    calib_episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 96, calib_episodes: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchSection {
    /// Per-seed policy trainings behind each benchmark row.
    seeds: Vec<u64>,
    /// RandomSkip Monte-Carlo trials per target.
    trials: usize,
    baseline_seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5], trials: 64, baseline_seed: 4242 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PathSection {
    out_dir: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs") }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> CmdResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Failure::usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    Failure::usage(format!("invalid config {}: {e}", p.display()))
                })
            }
        }
    }
}

// ── Shared plumbing ────────────────────────────────────────────────────

struct Ctx {
    cfg: RunConfig,
    seed_override: Option<u64>,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> CmdResult<Self> {
        let cfg = RunConfig::load(cli.config.as_deref())?;
        let out_dir = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
        Ok(Self { cfg, seed_override: cli.seed, out_dir })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> CmdResult<()> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    fn load_checkpoint(&self, explicit: &Option<PathBuf>, default_name: &str) -> CmdResult<Checkpoint> {
        let path = explicit.clone().unwrap_or_else(|| self.out_path(default_name));
        if !path.exists() {
            return Err(Failure::runtime(format!(
                "checkpoint {} not found (run the earlier stages or pass --ckpt)",
                path.display()
            )));
        }
        Ok(Checkpoint::load(&path)?)
    }

    /// Provenance header embedded at the top of every CSV artifact.
    fn provenance(&self, hash: &str, seed: u64) -> String {
        format!("# config={hash} seed={seed}\n")
    }

    fn write_text(&self, name: &str, contents: &str) -> CmdResult<PathBuf> {
        self.ensure_out_dir()?;
        let path = self.out_path(name);
        fs::write(&path, contents)?;
        Ok(path)
    }
}

fn model_from_checkpoint(ckpt: &Checkpoint) -> CmdResult<ToyModel> {
    Ok(ToyModel::from_params(ckpt.config.clone(), ckpt.params.clone())?)
}

// ── Subcommands ────────────────────────────────────────────────────────

fn cmd_train_base(ctx: &Ctx) -> CmdResult<()> {
    let cfg = ctx.cfg.model.to_config(ctx.seed_override);
    let task = ctx.cfg.task.to_spec();
    let (model, log) = train_base_model(&cfg, &task)?;
    let hash = config_hash(&cfg);
    let seed = cfg.seed;

    let mut csv = ctx.provenance(&hash, seed);
    csv.push_str("step,train_loss,val_metric\n");
    for row in &log {
        let _ = writeln!(csv, "{},{},{}", row.step, row.train_loss, row.val_metric);
    }
    ctx.write_text("train_log.csv", &csv)?;

    ctx.ensure_out_dir()?;
    let ckpt_path = ctx.out_path("base.ckpt");
    Checkpoint::new(cfg, seed, model.params.clone()).save(&ckpt_path)?;

    let last = log.last().expect("training log is never empty");
    println!(
        "RESULT train-base steps={} val={:.4} config={} seed={} ckpt={}",
        last.step,
        last.val_metric,
        hash,
        seed,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_profile(ctx: &Ctx, args: &CkptArg) -> CmdResult<()> {
    let ckpt = ctx.load_checkpoint(&args.ckpt, "base.ckpt")?;
    let hash = ckpt.config_hash.clone();
    let model = model_from_checkpoint(&ckpt)?;
    let task = ctx.cfg.task.to_spec();
    let eval_seed = ctx.seed_override.unwrap_or(ctx.cfg.seeds.eval);
    let episodes = task.episode_batch(ctx.cfg.eval.episodes, eval_seed);
    let sequences: Vec<Vec<usize>> = episodes.iter().map(|e| e.tokens.clone()).collect();

    let head = ctx.provenance(&hash, eval_seed);
    let io = io_similarity_profile(&model, &sequences)?;
    let io_path = ctx.write_text("io_similarity.csv", &format!("{head}{}", io.to_csv()))?;
    let adj = adjacent_similarity_profile(&model, &sequences)?;
    ctx.write_text("adjacent_similarity.csv", &format!("{head}{}", adj.to_csv()))?;

    let max_skips = model.config.n_layers - 2;
    let sweep = static_skip_sweep(&model, &episodes, task.kind, max_skips)?;
    ctx.write_text("static_sweep.csv", &format!("{head}{}", sweep_to_csv(&sweep)))?;

    println!(
        "RESULT profile layers={} samples={} sweep_k={} config={} seed={} io={}",
        io.n_layers(),
        sequences.len(),
        max_skips,
        hash,
        eval_seed,
        io_path.display()
    );
    Ok(())
}

fn cmd_calibrate(ctx: &Ctx, args: &CkptArg) -> CmdResult<()> {
    let ckpt = ctx.load_checkpoint(&args.ckpt, "base.ckpt")?;
    let hash = ckpt.config_hash.clone();
    let model = model_from_checkpoint(&ckpt)?;
    let task = ctx.cfg.task.to_spec();
    let calib_seed = ctx.seed_override.unwrap_or(ctx.cfg.seeds.calib);
    let calib = task.episode_batch(ctx.cfg.eval.calib_episodes, calib_seed);
    let table = compute_scale_table(&model, &calib)?;
    let scales = table.scales.clone();

    ctx.ensure_out_dir()?;
    let out_path = ctx.out_path("calibrated.ckpt");
    ckpt.with_scale_table(table).save(&out_path)?;

    let rendered: Vec<String> = scales.iter().map(|s| format!("{s:.4}")).collect();
    println!(
        "RESULT calibrate n={} scales=[{}] config={} seed={} ckpt={}",
        ctx.cfg.eval.calib_episodes,
        rendered.join(","),
        hash,
        calib_seed,
        out_path.display()
    );
    Ok(())
}

fn cmd_train_scorer(ctx: &Ctx, args: &TrainScorerArgs) -> CmdResult<()> {
    let ckpt = ctx.load_checkpoint(&args.ckpt.ckpt, "calibrated.ckpt")?;
    let hash = ckpt.config_hash.clone();
    let scales = ckpt.scale_table.clone().ok_or_else(|| {
        Failure::runtime("checkpoint has no scale table; run `dash calibrate` first")
    })?;
    let model = model_from_checkpoint(&ckpt)?;
    let task = ctx.cfg.task.to_spec();
    let scorer_cfg = ctx.cfg.scorer.to_config(ctx.seed_override)?;
    let mut reward_cfg = ctx.cfg.reward.to_config();
    let train_cfg = ctx.cfg.scorer_train.to_config();

    // Budget-controlled mode searches beta for the requested speedup.
    if let Some(target) = args.target_ratio {
        let inputs = ExperimentInputs {
            model: &model,
            task: &task,
            calibrated: &scales,
            scorer_cfg: scorer_cfg.clone(),
            reward_cfg,
            train_cfg: train_cfg.clone(),
            eval_episodes: ctx.cfg.eval.episodes,
            eval_seed: ctx.cfg.seeds.eval,
        };
        let row = calibrate_beta(&inputs, &scales, scorer_cfg.allowed, target)?;
        reward_cfg.beta = row.beta;
    }

    let init = ScorerParams::init(&model.config, &scorer_cfg);
    let outcome = train_scorer(&model, &task, init, &scales, &reward_cfg, &train_cfg)?;

    let mut csv = ctx.provenance(&hash, scorer_cfg.seed);
    csv.push_str("step,loss_ce,loss_rl,mean_cost_ratio,accuracy,tau\n");
    for row in &outcome.log {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            row.step, row.loss_ce, row.loss_rl, row.mean_cost_ratio, row.accuracy, row.tau
        );
    }
    ctx.write_text("scorer_log.csv", &csv)?;

    let eval = task.episode_batch(ctx.cfg.eval.episodes, ctx.cfg.seeds.eval);
    let pe = evaluate_policy(&outcome.model, &outcome.scorer, &scales, &eval, task.kind)?;

    ctx.ensure_out_dir()?;
    let out_path = ctx.out_path("scorer.ckpt");
    ckpt.with_scorer(outcome.scorer).save(&out_path)?;

    println!(
        "RESULT train-scorer beta={:.4} ratio={:.4} quality={:.4} config={} seed={} ckpt={}",
        reward_cfg.beta,
        pe.mean_cost_ratio,
        pe.quality,
        hash,
        scorer_cfg.seed,
        out_path.display()
    );
    Ok(())
}

/// Structured run report for one inference: provenance, the decision trace
/// rendered as a state string, and the full pipeline telemetry.
#[derive(Debug, Serialize)]
struct RunReportDoc {
    config_hash: String,
    seed: u64,
    trace: String,
    next_token: usize,
    report: PipelineReport,
}

fn cmd_infer(ctx: &Ctx, args: &InferArgs) -> CmdResult<()> {
    let ckpt = ctx.load_checkpoint(&args.ckpt.ckpt, "scorer.ckpt")?;
    let hash = ckpt.config_hash.clone();
    let scales = ckpt.scale_table.clone().ok_or_else(|| {
        Failure::runtime("checkpoint has no scale table; run `dash calibrate` first")
    })?;
    let scorer = ckpt
        .scorer
        .clone()
        .ok_or_else(|| {
            Failure::runtime("checkpoint has no scorer; run `dash train-scorer` first")
        })?
        .params;
    let model = model_from_checkpoint(&ckpt)?;
    let task = ctx.cfg.task.to_spec();
    let seed = ctx.seed_override.unwrap_or(ctx.cfg.seeds.eval);

    let tokens: Vec<usize> = match &args.tokens {
        Some(list) => list
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|_| {
                    Failure::usage(format!("--tokens: `{t}` is not a token id"))
                })
            })
            .collect::<CmdResult<_>>()?,
        None => task.episode_batch(1, seed).remove(0).tokens,
    };

    let (logits, report) = match args.mode {
        ModeArg::Sync => run_sync(&model, &scorer, &scales, &tokens)?,
        ModeArg::Async => run_async(&model, &scorer, &scales, &tokens)?,
    };
    let last = logits.rows - 1;
    let next_token = argmax(logits.row(last));

    let doc = RunReportDoc {
        config_hash: hash,
        seed,
        trace: path_to_string(&report.trace.states),
        next_token,
        report,
    };
    let rendered = serde_json::to_string_pretty(&doc)
        .map_err(|e| Failure::runtime(format!("serializing run report: {e}")))?;
    ctx.write_text("infer_report.json", &rendered)?;
    println!("{rendered}");
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn frontier_csv(head: &str, evals: &[dash_core::PathEvaluation]) -> String {
    let mut csv = format!("{head}cost,quality,path\n");
    for e in evals {
        let _ = writeln!(csv, "{},{},{}", e.cost, e.quality, e.path_string());
    }
    csv
}

fn cmd_bench(ctx: &Ctx, args: &CkptArg) -> CmdResult<()> {
    let ckpt = ctx.load_checkpoint(&args.ckpt, "calibrated.ckpt")?;
    let hash = ckpt.config_hash.clone();
    let scales = ckpt.scale_table.clone().ok_or_else(|| {
        Failure::runtime("checkpoint has no scale table; run `dash calibrate` first")
    })?;
    let model = model_from_checkpoint(&ckpt)?;
    let task = ctx.cfg.task.to_spec();
    let eval_seed = ctx.seed_override.unwrap_or(ctx.cfg.seeds.eval);
    let scorer_cfg = ctx.cfg.scorer.to_config(None)?;

    let inputs = ExperimentInputs {
        model: &model,
        task: &task,
        calibrated: &scales,
        scorer_cfg,
        reward_cfg: ctx.cfg.reward.to_config(),
        train_cfg: ctx.cfg.scorer_train.to_config(),
        eval_episodes: ctx.cfg.eval.episodes,
        eval_seed,
    };
    let rows = bench_table(
        &inputs,
        &ctx.cfg.targets,
        &ctx.cfg.bench.seeds,
        ctx.cfg.bench.trials,
        ctx.cfg.bench.baseline_seed,
    )?;
    let head = ctx.provenance(&hash, eval_seed);
    let bench_path = ctx.write_text("bench.csv", &format!("{head}{}", bench_rows_to_csv(&rows)))?;

    let eval = task.episode_batch(ctx.cfg.eval.episodes, eval_seed);
    let evals = evaluate_all_paths(&model, &scales, &eval, task.kind)?;
    let frontier = pareto_frontier(&evals)?;
    let frontier_path = ctx.write_text("frontier.csv", &frontier_csv(&head, &frontier))?;

    println!(
        "RESULT bench rows={} frontier={} config={} seed={} csv={} frontier_csv={}",
        rows.len(),
        frontier.len(),
        hash,
        eval_seed,
        bench_path.display(),
        frontier_path.display()
    );
    Ok(())
}

fn cmd_oracle(ctx: &Ctx, args: &CkptArg) -> CmdResult<()> {
    let ckpt = ctx.load_checkpoint(&args.ckpt, "calibrated.ckpt")?;
    let hash = ckpt.config_hash.clone();
    let scales = ckpt.scale_table.clone().ok_or_else(|| {
        Failure::runtime("checkpoint has no scale table; run `dash calibrate` first")
    })?;
    let model = model_from_checkpoint(&ckpt)?;
    let task = ctx.cfg.task.to_spec();
    let eval_seed = ctx.seed_override.unwrap_or(ctx.cfg.seeds.eval);
    let eval = task.episode_batch(ctx.cfg.eval.episodes, eval_seed);

    let evals = evaluate_all_paths(&model, &scales, &eval, task.kind)?;
    let frontier = pareto_frontier(&evals)?;
    let head = ctx.provenance(&hash, eval_seed);
    let path = ctx.write_text("frontier.csv", &frontier_csv(&head, &frontier))?;

    println!(
        "RESULT oracle paths={} frontier={} config={} seed={} csv={}",
        evals.len(),
        frontier.len(),
        hash,
        eval_seed,
        path.display()
    );
    Ok(())
}

// ── Entry point ────────────────────────────────────────────────────────

fn run(cli: Cli) -> CmdResult<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.cmd {
        Cmd::TrainBase => cmd_train_base(&ctx),
        Cmd::Profile(args) => cmd_profile(&ctx, args),
        Cmd::Calibrate(args) => cmd_calibrate(&ctx, args),
        Cmd::TrainScorer(args) => cmd_train_scorer(&ctx, args),
        Cmd::Infer(args) => cmd_infer(&ctx, args),
        Cmd::Bench(args) => cmd_bench(&ctx, args),
        Cmd::Oracle(args) => cmd_oracle(&ctx, args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here too; they exit 0 via use_stderr().
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(failure) = run(cli) {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}
