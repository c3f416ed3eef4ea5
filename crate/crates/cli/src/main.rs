mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vidbench::eval::{self, EvalContext, TaskInput};
use vidbench::io::{self, read_jsonl, write_atomic, write_json_pretty, write_jsonl, Schema};
use vidbench::judge::{ChatClient, ResponseCache};
use vidbench::mcqbuild::{self, MCQItem};
use vidbench::overlay::{self, BoxTrack};
use vidbench::protocol::Task;
use vidbench::ranker::{self, RelevanceModel, SegmentEvidence, Thresholds};
use vidbench::scaling;
use vidbench::segmenter::{self, FeatureSeries, SegmentProposal, ShotBoundaryList};
use vidbench::tiling;

use crate::config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "vidbench", version, about = "Video benchmark metrics and data tooling")]
struct Cli {
    /// TOML config file
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Propose temporal segments from per-second features
    Segment(SegmentArgs),
    /// Filter segment proposals by evidence scores
    Rank(RankArgs),
    /// Tile plans and frame sampling
    #[command(subcommand)]
    Tile(TileCmd),
    /// Score predictions for one benchmark task, or every task in the config
    Eval(EvalArgs),
    /// Write canonical answers reproducing a ground-truth file
    Oracle(OracleArgs),
    /// Power-law fits of error vs. compute
    #[command(subcommand)]
    Scaling(ScalingCmd),
    /// Multiple-choice benchmark construction
    #[command(subcommand)]
    Mcq(McqCmd),
    /// Draw region boxes on sampled frames
    Overlay(OverlayArgs),
    /// Check a dataset file against a schema
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    shots: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    evidence: PathBuf,
    /// Relevance classifier weights (JSON)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Cutoff as NAME=VALUE; overrides the [rank] config section
    #[arg(long = "threshold", value_name = "NAME=VALUE")]
    thresholds: Vec<String>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand, Debug)]
enum TileCmd {
    /// Grid and token count for one image
    Plan {
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long, default_value_t = 36)]
        max_tiles: u32,
    },
    /// Uniformly sampled frame indices
    Frames {
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 32)]
        k: usize,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Task to score; omit to run every [[tasks]] entry of the config
    task: Option<Task>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    task: Task,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ScalingCmd {
    /// Fit every group of a runpoints CSV
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Fit all points instead of the Pareto frontier
        #[arg(long)]
        all_points: bool,
        /// Reference error line as GROUP=VALUE
        #[arg(long = "baseline", value_name = "GROUP=VALUE")]
        baselines: Vec<String>,
    },
}

#[derive(Subcommand, Debug)]
enum McqCmd {
    /// Decompose MCQ items into binary probes
    Expand {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Drop items a text-only model answers correctly
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Per-item blind answers
        #[arg(long)]
        audit: PathBuf,
    },
    /// Undersample question-type/domain cells
    Balance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        slack: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
struct OverlayArgs {
    /// Directory holding one sub-directory of frames per video
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    video_id: String,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = overlay::DEFAULT_THICKNESS)]
    thickness: u32,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    schema: Schema,
    path: PathBuf,
}

fn parse_pairs(items: &[String]) -> Result<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("expected NAME=VALUE, got {s:?}"))?;
            let v: f64 = v.trim().parse().with_context(|| format!("bad number in {s:?}"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn cmd_segment(cfg: &FileConfig, a: &SegmentArgs) -> Result<()> {
    let series: Vec<FeatureSeries> = read_jsonl(&a.features)?;
    let shots: BTreeMap<String, ShotBoundaryList> = match &a.shots {
        Some(p) => read_jsonl::<ShotBoundaryList>(p)?
            .into_iter()
            .map(|s| (s.video_id.clone(), s))
            .collect(),
        None => BTreeMap::new(),
    };
    let mut out = Vec::new();
    for fs in series {
        let fs = fs.normalized()?;
        if let Some(s) = shots.get(&fs.video_id) {
            s.validate(Some(fs.duration_s()))?;
        }
        let segs = segmenter::propose_segments(&fs, shots.get(&fs.video_id), &cfg.segment)
            .with_context(|| format!("segmenting {}", fs.video_id))?;
        out.extend(segs);
    }
    write_jsonl(&a.output, &out)?;
    eprintln!("{} segments -> {}", out.len(), a.output.display());
    Ok(())
}

fn evidence_key(video_id: &str, start: f64, end: f64) -> (String, u64, u64) {
    (video_id.to_string(), start.to_bits(), end.to_bits())
}

fn cmd_rank(cfg: &FileConfig, a: &RankArgs) -> Result<()> {
    let mut names = cfg.rank.clone();
    names.extend(parse_pairs(&a.thresholds)?);
    let thresholds = Thresholds::from_map(&names)?;
    let model: Option<RelevanceModel> = match &a.model {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let segments: Vec<SegmentProposal> = read_jsonl(&a.segments)?;
    let evidence: Vec<SegmentEvidence> = read_jsonl(&a.evidence)?;
    let by_key: BTreeMap<_, _> = evidence
        .into_iter()
        .map(|e| (evidence_key(&e.video_id, e.start_s, e.end_s), e))
        .collect();
    let items: Vec<(SegmentProposal, SegmentEvidence)> = segments
        .into_iter()
        .map(|s| {
            let ev = by_key
                .get(&evidence_key(&s.video_id, s.start_s, s.end_s))
                .cloned()
                .unwrap_or_else(|| SegmentEvidence {
                    video_id: s.video_id.clone(),
                    start_s: s.start_s,
                    end_s: s.end_s,
                    ..Default::default()
                });
            (s, ev)
        })
        .collect();
    let outcome = ranker::filter_segments(&items, &thresholds, model.as_ref())?;
    write_jsonl(&a.output, &outcome.kept)?;
    write_jsonl(&a.report, &outcome.report)?;
    eprintln!("kept {} of {} segments", outcome.kept.len(), items.len());
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn cmd_tile(c: &TileCmd) -> Result<()> {
    match c {
        TileCmd::Plan {
            width,
            height,
            max_tiles,
        } => print_json(&tiling::plan_image_tiles(*width, *height, *max_tiles)?),
        TileCmd::Frames { total, k } => {
            if *total == 0 || *k == 0 {
                bail!("--total and --k must be positive");
            }
            print_json(&tiling::sample_frames_uniform(*total, *k))
        }
    }
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn cmd_eval(cfg: &FileConfig, a: &EvalArgs) -> Result<ExitCode> {
    let seed = cfg.seed(a.seed)?;
    let tasks = match a.task {
        Some(task) => {
            let from_cfg = cfg.tasks.iter().find(|t| t.task == task);
            let ground_truth =
                a.gt.clone()
                    .or_else(|| from_cfg.map(|t| t.ground_truth.clone()))
                    .with_context(|| format!("{task}: pass --gt or add a [[tasks]] entry"))?;
            let predictions = a
                .predictions
                .clone()
                .or_else(|| from_cfg.and_then(|t| t.predictions.clone()));
            vec![TaskInput {
                task,
                ground_truth,
                predictions,
            }]
        }
        None => cfg.tasks.clone(),
    };
    let run = cfg.run_config(seed, tasks);
    run.validate()?;
    let ctx = EvalContext::from_config(&run)?;
    let report = eval::run_eval(&run, &ctx)?;

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_atomic(&a.out_dir.join("report.json"), report.to_json().as_bytes())?;
    let table = eval::render_table(&report);
    write_atomic(&a.out_dir.join("report.txt"), table.as_bytes())?;
    write_json_pretty(
        &a.out_dir.join("report.run.json"),
        &json!({ "config_hash": report.meta.config_hash, "finished_unix_s": unix_time() }),
    )?;
    print!("{table}");
    let failures = report.transport_failures();
    if failures > 0 {
        eprintln!("{failures} item(s) failed after retries; see report.json");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(cfg: &FileConfig, a: &OracleArgs) -> Result<()> {
    let seed = cfg.seed(a.seed)?;
    let n_frames = cfg.n_frames.unwrap_or(vidbench::protocol::DEFAULT_FRAMES);
    let preds = eval::oracle_predictions(a.task, &a.gt, seed, n_frames)?;
    write_jsonl(&a.output, &preds)?;
    Ok(())
}

fn cmd_scaling(cfg: &FileConfig, c: &ScalingCmd) -> Result<()> {
    let ScalingCmd::Fit {
        input,
        out_dir,
        all_points,
        baselines,
    } = c;
    let file = std::fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let points = scaling::read_runpoints_csv(file)?;
    if points.is_empty() {
        bail!("{}: no run points", input.display());
    }
    let mut base = cfg.scaling.baselines.clone();
    base.extend(parse_pairs(baselines)?);
    let report = scaling::analyze(&points, *all_points || cfg.scaling.fit_all_points, &base);
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_json_pretty(&out_dir.join("scaling_report.json"), &report)?;
    let groups = scaling::group_points(&points);
    for g in &report.groups {
        let svg = scaling::render_svg(&groups[&g.group], g);
        let name: String = g
            .group
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        write_atomic(&out_dir.join(format!("{name}.svg")), svg.as_bytes())?;
    }
    for r in &report.ranking {
        println!(
            "{:>3}  {:<24} alpha={:+.4} beta={:.4e} rmse_log={:.4} n={}",
            r.rank, r.group, r.fit.alpha, r.fit.beta, r.fit.rmse_log, r.fit.n_points
        );
    }
    for g in report.groups.iter().filter(|g| g.error.is_some()) {
        eprintln!("{}: {}", g.group, g.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn cmd_mcq(cfg: &FileConfig, c: &McqCmd) -> Result<()> {
    match c {
        McqCmd::Expand { input, seed, output } => {
            let seed = cfg.seed(*seed)?;
            let items: Vec<MCQItem> = read_jsonl(input)?;
            let mut probes = Vec::new();
            for it in &items {
                probes.extend(mcqbuild::expand_binary(it, seed)?);
            }
            write_jsonl(output, &probes)?;
            eprintln!("{} items -> {} probes", items.len(), probes.len());
        }
        McqCmd::Filter { input, output, audit } => {
            let endpoint = cfg.endpoint.clone().context("mcq filter needs an [endpoint] section")?;
            let cache = match &cfg.cache {
                Some(p) => ResponseCache::open(p)?,
                None => ResponseCache::in_memory(),
            };
            let client = Arc::new(ChatClient::http(endpoint, cache)?);
            let items: Vec<MCQItem> = read_jsonl(input)?;
            let out = mcqbuild::blind_filter(&items, &client)?;
            write_jsonl(output, &out.kept)?;
            write_jsonl(audit, &out.records)?;
            eprintln!("kept {} of {} items", out.kept.len(), items.len());
        }
        McqCmd::Balance {
            input,
            seed,
            slack,
            output,
        } => {
            let seed = cfg.seed(*seed)?;
            let items: Vec<MCQItem> = read_jsonl(input)?;
            let kept = mcqbuild::balance(&items, seed, slack.unwrap_or(cfg.mcq.slack))?;
            write_jsonl(output, &kept)?;
            eprintln!("kept {} of {} items", kept.len(), items.len());
        }
    }
    Ok(())
}

fn cmd_overlay(a: &OverlayArgs) -> Result<()> {
    let tracks: Vec<BoxTrack> = read_jsonl(&a.tracks)?;
    let tracks: Vec<BoxTrack> = tracks
        .into_iter()
        .filter(|t| t.video_id.as_deref().is_none_or(|v| v == a.video_id))
        .collect();
    let loaded = overlay::load_frames(&a.frames.join(&a.video_id))?;
    for (pos, (idx, _)) in loaded.iter().enumerate() {
        if *idx != pos {
            bail!("frames of {} are not numbered 0..n (missing {pos:05})", a.video_id);
        }
    }
    let frames: Vec<_> = loaded.into_iter().map(|(_, f)| f).collect();
    if frames.is_empty() {
        bail!("no frames found for {}", a.video_id);
    }
    let rendered = overlay::select_and_render(&frames, &tracks, a.k, a.thickness)?;
    for (idx, img) in &rendered {
        overlay::save_frame(&overlay::frame_path(&a.out_dir, &a.video_id, *idx, "png"), img)?;
    }
    eprintln!("wrote {} frames", rendered.len());
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<ExitCode> {
    let violations = io::validate_dataset(&a.path, a.schema)?;
    if violations.is_empty() {
        println!("ok");
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("{}: {v}", a.path.display());
    }
    println!("{} violation(s)", violations.len());
    Ok(ExitCode::FAILURE)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = FileConfig::load(cli.config.as_deref().map(Path::new))?;
    match &cli.command {
        Command::Segment(a) => cmd_segment(&cfg, a)?,
        Command::Rank(a) => cmd_rank(&cfg, a)?,
        Command::Tile(c) => cmd_tile(c)?,
        Command::Eval(a) => return cmd_eval(&cfg, a),
        Command::Oracle(a) => cmd_oracle(&cfg, a)?,
        Command::Scaling(c) => cmd_scaling(&cfg, c)?,
        Command::Mcq(c) => cmd_mcq(&cfg, c)?,
        Command::Overlay(a) => cmd_overlay(a)?,
        Command::Validate(a) => return cmd_validate(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
