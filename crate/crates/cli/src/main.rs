//! `rlrf`: reward scoring, SFT, GRPO training, evaluation and dataset curation.

mod manifest;

use clap::{Parser, Subcommand};
use rlrf::checkpoint::{Checkpoint, CheckpointError, Stage};
use rlrf::config::{RunConfig, Stream};
use rlrf::curation::{filter_dataset, stratified_sample, CurationRecord};
use rlrf::optim::AdamW;
use rlrf::policy::{encode_svg, PolicyParams, Target, PARAM_COUNT};
use rlrf::raster::{RasterImage, Rasterizer, RenderSpec, ResvgRasterizer};
use rlrf::reward::{RewardContext, RewardError, RolloutInput};
use rlrf::runlog::RunLog;
use rlrf::semantic::SemanticClient;
use rlrf::svg::SvgSource;
use rlrf::train::{evaluate_best_of_n, run_sft, Experiment, Prepared, TrainError};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "rlrf",
    version,
    about = "Reinforcement learning from rendering feedback for SVG generation"
)]
struct Cli {
    /// TOML run configuration laid over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the render canvas width.
    #[arg(long, global = true)]
    ref_width: Option<usize>,
    /// Overrides the render canvas height.
    #[arg(long, global = true)]
    ref_height: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Scores one SVG against a reference PNG and prints the breakdown as JSON.
    Reward {
        svg: PathBuf,
        image: PathBuf,
        /// Ground-truth length in lexer tokens; the length component is skipped without it.
        #[arg(long)]
        gt_len: Option<usize>,
        /// Treat the rollout as text-conditioned with this prompt.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Supervised fine-tuning on synthetic targets.
    Sft {
        /// Directory for `sft.ckpt` and `sft.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the checkpoint in `out`.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 50)]
        save_every: usize,
    },
    /// GRPO on rendering rewards, starting from an SFT checkpoint.
    TrainGrpo {
        /// Starting (and reference) policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for `grpo.ckpt` and `grpo.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Start from random parameters when no checkpoint is given.
        #[arg(long)]
        allow_cold_start: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 50)]
        save_every: usize,
    },
    /// Best-of-n evaluation; prints {mse, ssim, code_efficiency, n} as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL manifest of targets whose SVGs use the policy's grammar.
        /// Without it the run's fixed synthetic targets are used.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Filters a directory of SVGs or a JSONL manifest, optionally followed by stratified sampling.
    Curate {
        input: PathBuf,
        /// JSONL manifest of the retained records.
        #[arg(long)]
        output: PathBuf,
        /// JSON report; defaults to `<output>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        min_tokens: Option<usize>,
        /// Keep only this many of the retained records.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Config(m),
            TrainError::Io(e) => Failure::Data(e.to_string()),
            TrainError::Reward(e) => e.into(),
            e @ (TrainError::NonFinite(_)
            | TrainError::Policy(_)
            | TrainError::Grpo(_)
            | TrainError::Metric(_)) => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<RewardError> for Failure {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::InvalidSpec(_) | RewardError::Render(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn data<E: std::fmt::Display>(ctx: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", ctx.display()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            RunConfig::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.ref_width {
        cfg.render.ref_width = w;
    }
    if let Some(h) = cli.ref_height {
        cfg.render.ref_height = h;
    }
    Ok(cfg)
}

fn validated(cfg: RunConfig) -> Result<RunConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(|e| Failure::Numeric(e.to_string()))?
    );
    Ok(())
}

fn cmd_reward(
    cli: &Cli,
    svg: &Path,
    image: &Path,
    gt_len: Option<usize>,
    prompt: Option<&str>,
) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    let text = std::fs::read_to_string(svg).map_err(data(svg))?;
    let img = RasterImage::load_png(image).map_err(data(image))?;
    // The canvas follows the reference image unless a flag says otherwise.
    cfg.render.ref_width = cli.ref_width.unwrap_or(img.width());
    cfg.render.ref_height = cli.ref_height.unwrap_or(img.height());
    let cfg = validated(cfg)?;
    let semantic =
        SemanticClient::new(cfg.semantic.clone()).map_err(|e| Failure::Config(e.to_string()))?;
    let ctx = RewardContext {
        semantic,
        ..RewardContext::default()
    };
    let input = RolloutInput {
        image: Some(&img),
        prompt,
    };
    let breakdown = ctx.reward_rollout(
        input,
        &SvgSource::new(text),
        gt_len,
        &cfg.rewards,
        &cfg.render,
    )?;
    print_json(&breakdown)
}

/// Loads `path` and checks it was written by `stage`.
fn load_stage(path: &Path, stage: Stage) -> Result<Checkpoint, Failure> {
    let ck = Checkpoint::load(path).map_err(data(path))?;
    if ck.header.stage != stage {
        return Err(Failure::Data(format!(
            "{}: expected a {stage:?} checkpoint, found {:?}",
            path.display(),
            ck.header.stage
        )));
    }
    Ok(ck)
}

/// Refuses to overwrite a previous run unless resuming.
fn prepare_out(out: &Path, ckpt: &Path, resume: bool) -> Result<bool, Failure> {
    std::fs::create_dir_all(out).map_err(data(out))?;
    match (ckpt.exists(), resume) {
        (true, true) => Ok(true),
        (true, false) => Err(Failure::Config(format!(
            "{} exists; pass --resume to continue it",
            ckpt.display()
        ))),
        (false, _) => Ok(false),
    }
}

fn cmd_sft(
    cli: &Cli,
    out: &Path,
    steps: Option<usize>,
    resume: bool,
    save_every: usize,
) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = steps {
        cfg.policy.sft.steps = s;
    }
    let ckpt_path = out.join("sft.ckpt");
    let resuming = prepare_out(out, &ckpt_path, resume)?;
    let exp = Experiment::new(validated(cfg)?)?;
    let (mut params, mut opt, start) = if resuming {
        let ck = load_stage(&ckpt_path, Stage::Sft)?;
        if ck.header.seed != exp.cfg.seed {
            return Err(Failure::Config(format!(
                "checkpoint was written with seed {}, config has {}",
                ck.header.seed, exp.cfg.seed
            )));
        }
        (ck.params, ck.optimizer, ck.header.step)
    } else {
        (
            exp.init_params(),
            AdamW::new(PARAM_COUNT, exp.cfg.policy.sft.adam()),
            0,
        )
    };
    let sft_data = exp.sft_data();
    let log_path = out.join("sft.jsonl");
    let mut log = RunLog::append(&log_path).map_err(data(&log_path))?;
    let total = exp.cfg.policy.sft.steps;
    let mut chunk = exp.cfg.policy.sft.clone();
    let mut at = start;
    while at < total {
        chunk.steps = (at + save_every.max(1)).min(total);
        run_sft(
            &mut params,
            &mut opt,
            &sft_data,
            &chunk,
            exp.cfg.seed_for(Stream::Sft),
            at,
            &mut |r| log.write(r),
        )?;
        at = chunk.steps;
        Checkpoint::new(Stage::Sft, at, exp.cfg.seed, params.clone(), opt.clone())
            .save(&ckpt_path)?;
    }
    eprintln!(
        "sft: {} steps done, checkpoint {}",
        exp.cfg.policy.sft.steps,
        ckpt_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_grpo(
    cli: &Cli,
    checkpoint: Option<&Path>,
    out: &Path,
    allow_cold_start: bool,
    steps: Option<usize>,
    resume: bool,
    save_every: usize,
) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = steps {
        cfg.grpo.steps = s;
    }
    let cfg = validated(cfg)?;
    let base = match (checkpoint, allow_cold_start) {
        (Some(p), _) => Some(Checkpoint::load(p).map_err(data(p))?.params),
        (None, true) => None,
        (None, false) => {
            return Err(Failure::Config(
                "GRPO needs a supervised checkpoint (--checkpoint); pass --allow-cold-start to train from random parameters".into(),
            ))
        }
    };
    let ckpt_path = out.join("grpo.ckpt");
    let resuming = prepare_out(out, &ckpt_path, resume)?;
    let exp = Experiment::new(cfg)?;
    let reference = base.clone().unwrap_or_else(|| exp.init_params());
    let (mut params, mut opt, start) = if resuming {
        let ck = load_stage(&ckpt_path, Stage::Grpo)?;
        (ck.params, ck.optimizer, ck.header.step)
    } else {
        (
            reference.clone(),
            AdamW::new(PARAM_COUNT, exp.cfg.grpo.adam()),
            0,
        )
    };
    let log_path = out.join("grpo.jsonl");
    let mut log = RunLog::append(&log_path).map_err(data(&log_path))?;
    let total = exp.cfg.grpo.steps;
    let reference = (exp.cfg.grpo.kl_beta > 0.0).then_some(&reference);
    let mut exp = exp;
    let mut at = start;
    while at < total {
        exp.cfg.grpo.steps = (at + save_every.max(1)).min(total);
        exp.grpo(&mut params, &mut opt, at, reference, &mut |r| log.write(r))?;
        at = exp.cfg.grpo.steps;
        Checkpoint::new(Stage::Grpo, at, exp.cfg.seed, params.clone(), opt.clone())
            .save(&ckpt_path)?;
    }
    eprintln!(
        "train-grpo: {total} steps done, checkpoint {}",
        ckpt_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    dataset: String,
    mse: f64,
    ssim: f64,
    code_efficiency: f64,
    n: usize,
    targets: usize,
}

fn manifest_targets(path: &Path, render: &RenderSpec) -> Result<Vec<Prepared>, Failure> {
    let entries = manifest::read(path).map_err(Failure::Data)?;
    if entries.is_empty() {
        return Err(Failure::Data(format!("{}: no targets", path.display())));
    }
    entries
        .into_iter()
        .map(|e| {
            let svg =
                SvgSource::new(std::fs::read_to_string(&e.svg_path).map_err(data(&e.svg_path))?);
            let tokens =
                encode_svg(&svg).map_err(|err| Failure::Data(format!("{}: {err}", e.id)))?;
            let image = match &e.png_path {
                Some(p) => RasterImage::load_png(p).map_err(data(p))?,
                None => ResvgRasterizer
                    .render(&svg, render)
                    .map_err(|err| Failure::Data(format!("{}: {err}", e.id)))?,
            };
            Ok(Prepared::new(Target { svg, tokens, image }))
        })
        .collect()
}

fn cmd_eval(
    cli: &Cli,
    checkpoint: &Path,
    manifest: Option<&Path>,
    n: Option<usize>,
) -> Result<(), Failure> {
    let cfg = validated(load_config(cli)?)?;
    let params: PolicyParams = Checkpoint::load(checkpoint)
        .map_err(data(checkpoint))?
        .params;
    let n = n.unwrap_or(cfg.policy.eval.best_of);
    if n == 0 {
        return Err(Failure::Config("n must be at least 1".into()));
    }
    let e = &cfg.policy.eval;
    let sample = rlrf::policy::SampleConfig {
        temperature: e.temperature,
        top_p: e.top_p,
        max_len: 0,
        seed: cfg.seed_for(Stream::Eval),
    };
    let (dataset, report) = match manifest {
        Some(m) => {
            let targets = manifest_targets(m, &cfg.render)?;
            (
                m.display().to_string(),
                evaluate_best_of_n(
                    &params,
                    &targets,
                    n,
                    &sample,
                    cfg.grpo.dyn_len_threshold,
                    &cfg.render,
                )?,
            )
        }
        None => (
            "synthetic".to_string(),
            Experiment::new(cfg)?.best_of_n(&params, n)?,
        ),
    };
    if !(report.mse.is_finite() && report.ssim.is_finite()) {
        return Err(Failure::Numeric("non-finite metric".into()));
    }
    print_json(&EvalReport {
        dataset,
        mse: report.mse,
        ssim: report.ssim,
        code_efficiency: report.code_efficiency,
        n: report.n,
        targets: report.targets,
    })
}

#[derive(Debug, Serialize)]
struct CurateReport {
    #[serde(flatten)]
    filter: rlrf::curation::FilterReport,
    sampled: Option<usize>,
}

fn cmd_curate(
    cli: &Cli,
    input: &Path,
    output: &Path,
    report: Option<&Path>,
    min_tokens: Option<usize>,
    sample: Option<usize>,
    clusters: usize,
) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    if let Some(m) = min_tokens {
        cfg.curation.min_tokens = m;
    }
    if let Some(w) = cli.ref_width {
        cfg.curation.render.ref_width = w;
    }
    if let Some(h) = cli.ref_height {
        cfg.curation.render.ref_height = h;
    }
    let cfg = validated(cfg)?;
    let entries = manifest::load(input).map_err(Failure::Data)?;
    let records = entries
        .iter()
        .map(|e| {
            Ok(CurationRecord {
                id: e.id.clone(),
                svg: SvgSource::new(
                    std::fs::read_to_string(&e.svg_path).map_err(data(&e.svg_path))?,
                ),
                image: e
                    .png_path
                    .as_ref()
                    .map(|p| RasterImage::load_png(p).map_err(data(p)))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let (mut kept, filter) = filter_dataset(&records, &cfg.curation, &ResvgRasterizer)
        .map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(k) = sample {
        let images: Vec<RasterImage> = kept
            .iter()
            .map(|&i| match &records[i].image {
                Some(img) => img.clone(),
                None => ResvgRasterizer
                    .render(&records[i].svg, &cfg.curation.render)
                    .expect("kept records render"),
            })
            .collect();
        let picked = stratified_sample(&images, k, clusters, cfg.seed_for(Stream::Curation))
            .map_err(|e| Failure::Data(e.to_string()))?;
        kept = picked.into_iter().map(|j| kept[j]).collect();
    }
    let mut lines = String::new();
    for &i in &kept {
        lines.push_str(&serde_json::to_string(&entries[i]).expect("plain struct"));
        lines.push('\n');
    }
    std::fs::write(output, lines).map_err(data(output))?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| output.with_extension("report.json"));
    let body = CurateReport {
        filter,
        sampled: sample.map(|_| kept.len()),
    };
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&body).expect("plain struct"),
    )
    .map_err(data(&report_path))?;
    print_json(&body)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Reward {
            svg,
            image,
            gt_len,
            prompt,
        } => cmd_reward(cli, svg, image, *gt_len, prompt.as_deref()),
        Cmd::Sft {
            out,
            steps,
            resume,
            save_every,
        } => cmd_sft(cli, out, *steps, *resume, *save_every),
        Cmd::TrainGrpo {
            checkpoint,
            out,
            allow_cold_start,
            steps,
            resume,
            save_every,
        } => cmd_train_grpo(
            cli,
            checkpoint.as_deref(),
            out,
            *allow_cold_start,
            *steps,
            *resume,
            *save_every,
        ),
        Cmd::Eval {
            checkpoint,
            manifest,
            n,
        } => cmd_eval(cli, checkpoint, manifest.as_deref(), *n),
        Cmd::Curate {
            input,
            output,
            report,
            min_tokens,
            sample,
            clusters,
        } => cmd_curate(
            cli,
            input,
            output,
            report.as_deref(),
            *min_tokens,
            *sample,
            *clusters,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rlrf: {f}");
            ExitCode::from(f.code())
        }
    }
}
