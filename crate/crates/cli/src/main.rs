mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use spoofscope_core::annotator::{
    self, check_provenance, load_manifest, prepare_image, run_pipeline, verify, HintSynonyms,
    PipelineConfig, Sample, VerifyRules,
};
use spoofscope_core::expert::{
    guidance_text, predict, train_expert, ExpertModel, ExpertSet, TrainConfig,
};
use spoofscope_core::imaging::{encode_png, load_image, resize_bilinear, Raster};
use spoofscope_core::metrics::{evaluate, read_scores};
use spoofscope_core::mllm_client::{BackendProvider, HttpClient, ScriptBook};
use spoofscope_core::reward::{batch_advantages, st_grpo_reward, total_reward, ClampMode};
use spoofscope_core::trajectory::{read_trajectories, Cls};
use spoofscope_core::vistools::{dispatch, ToolCall, ToolId};

use config::AppConfig;

/// Tool-augmented face anti-spoofing: visual tools, annotation, rewards,
/// expert scorers and metrics.
#[derive(Debug, Parser)]
#[command(name = "spoofscope", version)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Increase log verbosity (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a visual tool on an image.
    #[command(subcommand)]
    Tool(ToolCmd),
    /// Build and check annotated trajectories.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Score trajectories and normalize rewards.
    #[command(subcommand)]
    Reward(RewardCmd),
    /// Train and query per-tool expert scorers.
    #[command(subcommand)]
    Expert(ExpertCmd),
    /// Evaluate scored samples.
    #[command(subcommand)]
    Metrics(MetricsCmd),
}

#[derive(Debug, Subcommand)]
enum ToolCmd {
    /// Apply one tool and write the rendering as PNG.
    Apply(ToolApply),
}

#[derive(Debug, Args)]
struct ToolApply {
    /// Tool name, e.g. LBPTool or FFTTool.
    #[arg(long)]
    tool: ToolId,
    /// Input image (PNG, PGM or PPM).
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Output PNG path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Normalized zoom box x0,y0,x1,y1 (ZoomInTool only).
    #[arg(long, value_delimiter = ',', value_name = "X0,Y0,X1,Y1")]
    bbox: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
enum AnnotateCmd {
    /// Annotate every sample of a manifest.
    Run(AnnotateRun),
    /// Re-run the automated checks on a trajectory file.
    Verify(AnnotateVerify),
}

#[derive(Debug, Args)]
struct AnnotateRun {
    /// Sample manifest (JSONL of {id, image, label, spoof_type}).
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Output directory for accepted, review and badcase sets, journal and stats.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Concurrent annotation workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Maximum reasoning turns per sample.
    #[arg(long)]
    l_max: Option<usize>,
    /// Send automatically accepted samples to review.jsonl.
    #[arg(long)]
    manual_gate: bool,
    /// Directory holding one <ToolName>.json expert model per tool.
    #[arg(long, value_name = "DIR", conflicts_with = "neutral_experts")]
    experts: Option<PathBuf>,
    /// Use constant 50% experts instead of trained models.
    #[arg(long)]
    neutral_experts: bool,
    /// Replay completions from a script file instead of calling the model endpoint.
    #[arg(long, value_name = "PATH")]
    mock: Option<PathBuf>,
    /// Hint synonym list replacing the shipped one.
    #[arg(long, value_name = "PATH")]
    synonyms: Option<PathBuf>,
    /// Also write every tool rendering under <out>/renders.
    #[arg(long)]
    save_renders: bool,
    /// Base sampling seed for the model endpoint; attempt n uses seed + n - 1.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AnnotateVerify {
    /// Trajectory JSONL file.
    #[arg(long, value_name = "PATH")]
    traj: PathBuf,
    /// Manifest the trajectories were produced from.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Maximum reasoning turns per sample.
    #[arg(long)]
    l_max: Option<usize>,
    /// Report passing samples as needing manual review.
    #[arg(long)]
    manual_gate: bool,
    /// Hint synonym list replacing the shipped one.
    #[arg(long, value_name = "PATH")]
    synonyms: Option<PathBuf>,
    /// Recompute every tool rendering and compare its hash.
    #[arg(long)]
    check_renders: bool,
}

#[derive(Debug, Subcommand)]
enum RewardCmd {
    /// Score every trajectory of a file, one JSON line per trajectory.
    Score(RewardScore),
    /// Group-normalize rewards into advantages.
    Advantages(RewardAdvantages),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RewardMode {
    /// Diverse-tool reward: fast answer, reasoning and tool diversity.
    Dt,
    /// Single-tool baseline reward.
    St,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClampArg {
    CappedMin,
    LiteralMax,
}

#[derive(Debug, Args)]
struct RewardScore {
    /// Trajectory JSONL file.
    #[arg(long, value_name = "PATH")]
    traj: PathBuf,
    /// Reward definition to apply.
    #[arg(long, value_enum, default_value = "dt")]
    mode: RewardMode,
    /// How per-tool call counts enter the diversity term.
    #[arg(long, value_enum)]
    clamp: Option<ClampArg>,
    /// Reasoning-turn budget; 0 disables the limit.
    #[arg(long)]
    max_turns: Option<usize>,
    /// Write scores here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RewardAdvantages {
    /// JSONL of rewards: bare numbers or objects with a "total" field.
    #[arg(long, value_name = "PATH")]
    rewards: PathBuf,
    /// Rollouts per group.
    #[arg(long)]
    group_size: Option<usize>,
    /// Standard deviation below which a group gets zero advantages.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum ExpertCmd {
    /// Fit an expert on <data>/real and <data>/spoof images.
    Train(ExpertTrain),
    /// Spoof probability and guidance sentence for one image.
    Predict(ExpertPredict),
}

#[derive(Debug, Args)]
struct ExpertTrain {
    /// Tool the expert reads; every tool except ZoomInTool.
    #[arg(long)]
    tool: ToolId,
    /// Directory with real/ and spoof/ image subdirectories.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output model JSON.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Passes over the training set.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Examples per gradient step.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Shuffling seed; equal seeds and data give identical models.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images already are tool renderings; skip resizing and the tool.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Args)]
struct ExpertPredict {
    /// Model JSON written by `expert train`.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Input image.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Input already is a tool rendering; skip resizing and the tool.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    /// FAR, FRR, HTER and AUC for a JSONL of {id, score, label}.
    Eval(MetricsEval),
}

#[derive(Debug, Args)]
struct MetricsEval {
    /// JSONL of {id, score, label}; higher scores mean more likely Real.
    #[arg(long, value_name = "PATH")]
    scores: PathBuf,
    /// Fixed decision threshold; scores at or above it count as Real.
    #[arg(long, conflicts_with = "eer", default_value_t = 0.5)]
    threshold: f64,
    /// Use the equal-error-rate threshold instead of --threshold.
    #[arg(long)]
    eer: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Tool(ToolCmd::Apply(a)) => tool_apply(a),
        Command::Annotate(AnnotateCmd::Run(a)) => annotate_run(a, &cfg),
        Command::Annotate(AnnotateCmd::Verify(a)) => annotate_verify(a, &cfg),
        Command::Reward(RewardCmd::Score(a)) => reward_score(a, &cfg),
        Command::Reward(RewardCmd::Advantages(a)) => reward_advantages(a, &cfg),
        Command::Expert(ExpertCmd::Train(a)) => expert_train(a),
        Command::Expert(ExpertCmd::Predict(a)) => expert_predict(a),
        Command::Metrics(MetricsCmd::Eval(a)) => metrics_eval(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn print_json(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn tool_apply(a: ToolApply) -> Result<()> {
    let img = load_image(&a.input)?;
    let call = match (a.tool, a.bbox) {
        (ToolId::ZoomIn, Some(b)) => match b[..] {
            [x0, y0, x1, y1] => ToolCall::zoom([x0, y0, x1, y1]),
            _ => bail!("--bbox takes exactly four numbers, got {}", b.len()),
        },
        (ToolId::ZoomIn, None) => bail!("ZoomInTool needs --bbox x0,y0,x1,y1"),
        (_, Some(_)) => bail!("--bbox only applies to ZoomInTool"),
        (t, None) => ToolCall::new(t),
    };
    let out = dispatch(&call, &img)?;
    encode_png(&out, &a.out)?;
    log::info!("{} -> {}", a.input.display(), a.out.display());
    Ok(())
}

fn verify_rules(synonyms: Option<&Path>, cfg: &AppConfig, manual_gate: bool, l_max: usize) -> Result<VerifyRules> {
    let synonyms = match synonyms.or(cfg.annotate.hint_synonyms.as_deref()) {
        Some(p) => HintSynonyms::from_file(p)?,
        None => HintSynonyms::shipped(),
    };
    Ok(VerifyRules {
        synonyms,
        manual_gate: manual_gate || cfg.annotate.manual_gate,
        l_max,
    })
}

fn annotate_run(a: AnnotateRun, cfg: &AppConfig) -> Result<()> {
    let out = a
        .out
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set paths.out"))?;
    let l_max = a.l_max.unwrap_or(cfg.annotate.l_max);
    if l_max == 0 {
        bail!("--l-max must be positive");
    }
    let workers = a.workers.unwrap_or(cfg.annotate.workers).max(1);

    let samples = load_manifest(&a.manifest)?;
    let experts = if a.neutral_experts {
        ExpertSet::neutral()
    } else {
        let dir = a
            .experts
            .or_else(|| cfg.paths.experts.clone())
            .ok_or_else(|| anyhow!("no experts: pass --experts DIR or --neutral-experts"))?;
        ExpertSet::load_dir(&dir)?
    };
    let provider: Box<dyn BackendProvider> = match (&a.mock, &cfg.client) {
        (Some(script), _) => Box::new(ScriptBook::from_json_file(script)?),
        (None, Some(client)) => {
            let mut client = client.clone();
            if a.seed.is_some() {
                client.seed = a.seed;
            }
            Box::new(HttpClient::new(client)?)
        }
        (None, None) => bail!("no model backend: pass --mock SCRIPT or configure `client`"),
    };

    let mut pcfg = PipelineConfig {
        rules: verify_rules(a.synonyms.as_deref(), cfg, a.manual_gate, l_max)?,
        workers,
        ..PipelineConfig::default()
    };
    pcfg.annotate.l_max = l_max;
    if a.save_renders {
        pcfg.annotate.render_dir = Some(out.join("renders"));
    }
    let stats = run_pipeline(&samples, provider.as_ref(), &experts, &pcfg, &out)?;
    print_json(&serde_json::to_value(&stats)?)
}

fn annotate_verify(a: AnnotateVerify, cfg: &AppConfig) -> Result<()> {
    let samples = load_manifest(&a.manifest)?;
    let by_id: std::collections::HashMap<&str, &Sample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let rules = verify_rules(
        a.synonyms.as_deref(),
        cfg,
        a.manual_gate,
        a.l_max.unwrap_or(cfg.annotate.l_max),
    )?;
    let trajs = read_trajectories(open(&a.traj)?).with_context(|| a.traj.display().to_string())?;
    let mut failed = 0usize;
    let mut out = std::io::stdout().lock();
    for t in &trajs {
        let sample = by_id
            .get(t.sample_id.as_str())
            .ok_or_else(|| anyhow!("trajectory {:?} is not in the manifest", t.sample_id))?;
        let report = verify(t, sample, &rules);
        let mut line = serde_json::to_value(&report)?;
        let mut ok = report.passed();
        if a.check_renders {
            let provenance = prepare_image(&sample.image)
                .map_err(|e| e.to_string())
                .and_then(|img| check_provenance(t, &img));
            line["provenance"] = json!(provenance.as_ref().err());
            ok &= provenance.is_ok();
        }
        failed += usize::from(!ok);
        writeln!(out, "{line}")?;
    }
    if failed > 0 {
        bail!("{failed} of {} trajectories failed verification", trajs.len());
    }
    Ok(())
}

fn reward_score(a: RewardScore, cfg: &AppConfig) -> Result<()> {
    let mut rcfg = cfg.reward.clone();
    if let Some(c) = a.clamp {
        rcfg.clamp_mode = match c {
            ClampArg::CappedMin => ClampMode::CappedMin,
            ClampArg::LiteralMax => ClampMode::LiteralMax,
        };
    }
    if let Some(m) = a.max_turns {
        rcfg.max_turns = (m > 0).then_some(m);
    }
    rcfg.validate()?;
    let trajs = read_trajectories(open(&a.traj)?).with_context(|| a.traj.display().to_string())?;
    let lines: Vec<Value> = trajs
        .iter()
        .map(|t| match a.mode {
            RewardMode::Dt => {
                let b = total_reward(t, t.label, &rcfg);
                json!({"sample_id": t.sample_id, "mode": "dt", "total": b.total, "breakdown": b})
            }
            RewardMode::St => {
                json!({"sample_id": t.sample_id, "mode": "st", "total": st_grpo_reward(t, t.label, &rcfg)})
            }
        })
        .collect();
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    for l in &lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_rewards(path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        let r = v
            .as_f64()
            .or_else(|| v.get("total").and_then(Value::as_f64))
            .ok_or_else(|| anyhow!("{}: line {}: expected a number or an object with \"total\"", path.display(), i + 1))?;
        out.push(r);
    }
    Ok(out)
}

fn reward_advantages(a: RewardAdvantages, cfg: &AppConfig) -> Result<()> {
    let rewards = read_rewards(&a.rewards)?;
    let g = a.group_size.unwrap_or(cfg.reward.group_size);
    let eps = a.epsilon.unwrap_or(cfg.reward.std_epsilon);
    let adv = batch_advantages(&rewards, g, eps)?;
    let mut out = std::io::stdout().lock();
    for (i, (r, adv)) in rewards.iter().zip(&adv).enumerate() {
        writeln!(out, "{}", json!({"index": i, "group": i / g, "reward": r, "advantage": adv}))?;
    }
    Ok(())
}

/// Resizes to the annotation resolution and renders `tool`, matching what the
/// expert sees during annotation.
fn expert_input(path: &Path, tool: ToolId, raw: bool) -> Result<Raster> {
    let img = load_image(path)?;
    if raw {
        return Ok(spoofscope_core::imaging::to_grayscale(&img));
    }
    let side = annotator::ANNOTATION_SIDE;
    let img = resize_bilinear(&img, side, side);
    Ok(dispatch(&ToolCall::new(tool), &img)?)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn expert_train(a: ExpertTrain) -> Result<()> {
    if a.tool == ToolId::ZoomIn {
        bail!("ZoomInTool has no expert");
    }
    let mut data = Vec::new();
    for (sub, cls) in [("real", Cls::Real), ("spoof", Cls::Spoof)] {
        for p in image_files(&a.data.join(sub))? {
            let img = expert_input(&p, a.tool, a.raw).with_context(|| p.display().to_string())?;
            data.push((img, cls));
        }
    }
    let tcfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let report = train_expert(a.tool, &data, &tcfg)?;
    report.model.save(&a.out)?;
    print_json(&json!({
        "tool": a.tool,
        "examples": data.len(),
        "train_accuracy": report.train_accuracy,
        "initial_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "model": a.out,
    }))
}

fn expert_predict(a: ExpertPredict) -> Result<()> {
    let model = ExpertModel::load(&a.model)?;
    let img = expert_input(&a.input, model.tool, a.raw)?;
    let p = predict(&model, &img)?;
    print_json(&json!({
        "tool": model.tool,
        "p": p,
        "guidance": guidance_text(model.tool, p)?,
    }))
}

fn metrics_eval(a: MetricsEval) -> Result<()> {
    let samples = read_scores(open(&a.scores)?).with_context(|| a.scores.display().to_string())?;
    let report = evaluate(&samples, (!a.eer).then_some(a.threshold))?;
    print_json(&serde_json::to_value(report)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
