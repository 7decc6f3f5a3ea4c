//! `hieraprune`: hierarchical video token pruning from the command line.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hieraprune_core::budget::{BudgetError, SegmentRatios};
use hieraprune_core::cost::{pipeline_flops, CostError, ModelDims};
use hieraprune_core::dpp::{prune_tokens, DppError};
use hieraprune_core::io::{
    read_tensor_file, to_json_bytes, write_atomic, write_tensor_file, FormatError,
};
use hieraprune_core::merge::{apply_merge, plan_merge, MergeError, MergeStats};
use hieraprune_core::pipeline::{
    compare_methods, run_pipeline, EmbeddingProvider, FileProvider, PipelineError,
    SyntheticProvider,
};
use hieraprune_core::segmentation::{
    global_topk_mask, segment, similarity_stack, SegmentMap, SegmentationError, DEFAULT_BETA,
};
use hieraprune_core::synth::{gen_synthetic, SynthError, SyntheticConfig, DEFAULT_NOISE};
use hieraprune_core::tensor::{InstructionEmbedding, TensorError, VideoTokens};

use config::{ProviderKind, RunConfig};

const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "hieraprune",
    version,
    about = "Hierarchical video token pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video with planted segment boundaries
    Gen {
        #[arg(long)]
        frames: usize,
        /// Token grid as HxW
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NOISE)]
        noise: f64,
        /// Receives video.hvtk, instr.hvtk and planted.json
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Split a video into segments by inter-frame overlap
    Segment {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        merge_ratio: f64,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge temporally static tokens
    Merge {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        merge_ratio: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Per-segment DPP selection
    Prune {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        instr: PathBuf,
        /// Segment map JSON as written by `segment`
        #[arg(long)]
        segments: PathBuf,
        /// Prune ratios: a JSON array, {"ratios": [...]}, or one number for all segments
        #[arg(long)]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full staged pipeline
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        instr: PathBuf,
        /// Directory of per-stage hidden states (provider = "file")
        #[arg(long)]
        hidden_states: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Include wall-clock timings in the report
        #[arg(long)]
        timings: bool,
    },
    /// Prefill FLOPs of a staged token schedule
    Flops {
        /// Model dims as L,d,m
        #[arg(long, value_parser = parse_dims)]
        dims: ModelDims,
        /// Tokens per stage, JSON array
        #[arg(long)]
        counts: String,
        /// First layer of each stage, JSON array
        #[arg(long)]
        boundaries: String,
        /// Unpruned token count (defaults to the first stage count)
        #[arg(long)]
        baseline_count: Option<u64>,
        #[arg(long, default_value_t = 0)]
        text_tokens: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pipeline against random and relevance-only selection at equal budget
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        instr: PathBuf,
        #[arg(long)]
        hidden_states: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A flag value that failed validation.
#[derive(Debug)]
pub struct UsageError {
    pub flag: &'static str,
    pub message: String,
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "--{}: {}", self.flag, self.message)
    }
}

impl std::error::Error for UsageError {}

fn usage(flag: &'static str, message: impl Into<String>) -> anyhow::Error {
    UsageError {
        flag,
        message: message.into(),
    }
    .into()
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_dims(s: &str) -> Result<ModelDims, String> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [l, d, m] => ModelDims::new(l, d, m).map_err(|e| e.to_string()),
        _ => Err(format!("expected L,d,m, got {s:?}")),
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(flag: &'static str, text: &str) -> anyhow::Result<T> {
    serde_json::from_str(text).map_err(|e| usage(flag, format!("invalid JSON: {e}")))
}

fn read_video(path: &Path) -> anyhow::Result<VideoTokens> {
    Ok(read_tensor_file(path)?.into_video()?)
}

fn read_instruction(path: &Path) -> anyhow::Result<InstructionEmbedding> {
    Ok(read_tensor_file(path)?.into_vector()?)
}

fn check_ratio(flag: &'static str, r: f64) -> anyhow::Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(usage(flag, format!("{r} outside [0, 1)")))
    }
}

#[derive(Deserialize)]
struct SegmentsFile {
    boundaries: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RatiosArg {
    Uniform(f64),
    List(Vec<f64>),
    Object { ratios: Vec<f64> },
}

#[derive(Serialize)]
struct MergeReport<'a> {
    merge_ratio: f64,
    stats: MergeStats,
    dropped: &'a [usize],
}

#[derive(Serialize)]
struct FlopsSummary {
    total: u128,
    baseline: u128,
    ratio: f64,
}

fn provider(
    config: &RunConfig,
    dim: usize,
    stages: usize,
    hidden_states: Option<&Path>,
) -> anyhow::Result<Box<dyn EmbeddingProvider>> {
    Ok(match config.provider {
        ProviderKind::Synthetic => Box::new(SyntheticProvider::new(dim, stages, config.seed)),
        ProviderKind::File => {
            let dir = hidden_states
                .ok_or_else(|| usage("hidden-states", "required when provider = \"file\""))?;
            Box::new(FileProvider::new(dir, dim))
        }
    })
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen {
            frames,
            grid: (height, width),
            dim,
            blocks,
            seed,
            noise,
            out_dir,
        } => {
            let cfg = SyntheticConfig {
                noise,
                ..SyntheticConfig::new(frames, height, width, dim, blocks, seed)
            };
            let synth = gen_synthetic(&cfg)?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            write_tensor_file(&synth.video.into(), out_dir.join("video.hvtk"))?;
            write_tensor_file(&synth.instruction.into(), out_dir.join("instr.hvtk"))?;
            write_atomic(out_dir.join("planted.json"), &to_json_bytes(&synth.planted))?;
        }
        Command::Segment {
            video,
            merge_ratio,
            beta,
            out,
        } => {
            check_ratio("merge-ratio", merge_ratio)?;
            if !(0.0..=1.0).contains(&beta) {
                return Err(usage("beta", format!("{beta} outside [0, 1]")));
            }
            let video = read_video(&video)?;
            let mask = global_topk_mask(&similarity_stack(&video)?, merge_ratio)?;
            let segmap = segment(&video, &mask, beta)?;
            write_atomic(out, &to_json_bytes(&segmap))?;
        }
        Command::Merge {
            video,
            merge_ratio,
            out,
            report,
        } => {
            check_ratio("merge-ratio", merge_ratio)?;
            let video = read_video(&video)?;
            let mask = global_topk_mask(&similarity_stack(&video)?, merge_ratio)?;
            let plan = plan_merge(&video, &mask)?;
            let merged = apply_merge(&video, &plan)?;
            let summary = MergeReport {
                merge_ratio,
                stats: plan.stats(),
                dropped: plan.dropped(),
            };
            write_tensor_file(&merged.into(), out)?;
            write_atomic(report, &to_json_bytes(&summary))?;
        }
        Command::Prune {
            video,
            instr,
            segments,
            ratios,
            out,
        } => {
            let text = std::fs::read_to_string(&segments).map_err(|e| {
                usage(
                    "segments",
                    format!("cannot read {}: {e}", segments.display()),
                )
            })?;
            let segfile: SegmentsFile = parse_json("segments", &text)?;
            let ratios: RatiosArg = parse_json("ratios", &ratios)?;
            let video = read_video(&video)?;
            let instruction = read_instruction(&instr)?;
            let segmap = SegmentMap::from_boundaries(&video, &segfile.boundaries)?;
            let ratios = match ratios {
                RatiosArg::Uniform(r) => vec![r; segmap.len()],
                RatiosArg::List(r) | RatiosArg::Object { ratios: r } => r,
            };
            if ratios.len() != segmap.len() {
                return Err(usage(
                    "ratios",
                    format!("{} ratios for {} segments", ratios.len(), segmap.len()),
                ));
            }
            for &r in &ratios {
                if !(0.0..=1.0).contains(&r) {
                    return Err(usage("ratios", format!("{r} outside [0, 1]")));
                }
            }
            let counts = segmap.token_counts();
            let mut ratios = SegmentRatios {
                base: 0.0,
                deviation: 0.0,
                ratios,
            };
            ratios.base = ratios.weighted_mean(&counts);
            let selection =
                prune_tokens(&video.alive_embeddings(), &instruction, &segmap, &ratios)?;
            write_atomic(out, &to_json_bytes(&selection))?;
        }
        Command::Pipeline {
            config,
            video,
            instr,
            hidden_states,
            out,
            timings,
        } => {
            let config = RunConfig::load(&config)?;
            let schedule = config.schedule().map_err(|m| usage("config", m))?;
            let video = read_video(&video)?;
            let instruction = read_instruction(&instr)?;
            let provider = provider(
                &config,
                video.dim(),
                schedule.n_stages,
                hidden_states.as_deref(),
            )?;
            let report = run_pipeline(&video, &instruction, &schedule, provider.as_ref())?;
            write_atomic(out, &report.to_json(timings))?;
        }
        Command::Flops {
            dims,
            counts,
            boundaries,
            baseline_count,
            text_tokens,
            out,
        } => {
            let counts: Vec<u64> = parse_json("counts", &counts)?;
            let boundaries: Vec<usize> = parse_json("boundaries", &boundaries)?;
            let baseline = match baseline_count.or(counts.first().copied()) {
                Some(b) => b,
                None => return Err(usage("counts", "at least one stage count is required")),
            };
            let report = pipeline_flops(&counts, &boundaries, &dims, baseline, text_tokens)?;
            let json = to_json_bytes(&FlopsSummary {
                total: report.total,
                baseline: report.baseline,
                ratio: report.ratio,
            });
            if let Some(out) = out {
                write_atomic(out, &json)?;
            }
            print!("{}", String::from_utf8(json).expect("JSON is UTF-8"));
        }
        Command::Compare {
            config,
            video,
            instr,
            hidden_states,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            let schedule = config.schedule().map_err(|m| usage("config", m))?;
            let video = read_video(&video)?;
            let instruction = read_instruction(&instr)?;
            let provider = provider(
                &config,
                video.dim(),
                schedule.n_stages,
                hidden_states.as_deref(),
            )?;
            let report = compare_methods(
                &video,
                &instruction,
                &schedule,
                provider.as_ref(),
                config.seed,
            )?;
            write_atomic(out, &to_json_bytes(&report))?;
        }
    }
    Ok(())
}

/// Exit code per error family; 2 is reserved for flag and config validation.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        return EXIT_USAGE;
    }
    if let Some(e) = err.downcast_ref::<PipelineError>() {
        return match e {
            PipelineError::ScheduleInvalid(_) => EXIT_USAGE,
            PipelineError::Format(_) => 3,
            PipelineError::Segmentation(_) => 4,
            PipelineError::Merge(_) => 5,
            PipelineError::Budget(_) => 6,
            PipelineError::Dpp(_) => 7,
            PipelineError::Cost(_) => 8,
            PipelineError::Tensor(_) => 10,
            PipelineError::Provider(_) => 11,
        };
    }
    if err.is::<FormatError>() {
        3
    } else if err.is::<SegmentationError>() {
        4
    } else if err.is::<MergeError>() {
        5
    } else if err.is::<BudgetError>() {
        6
    } else if err.is::<DppError>() {
        7
    } else if err.is::<CostError>() {
        8
    } else if err.is::<SynthError>() {
        9
    } else if err.is::<TensorError>() {
        10
    } else {
        1
    }
}

fn missing_flag(err: &clap::Error) -> Option<String> {
    if err.kind() != ErrorKind::MissingRequiredArgument {
        return None;
    }
    match err.get(ContextKind::InvalidArg) {
        Some(ContextValue::Strings(args)) => args
            .first()
            .and_then(|a| a.split_whitespace().next())
            .map(str::to_string),
        _ => None,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("HIERAPRUNE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HIERAPRUNE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if let Some(flag) = missing_flag(&err) {
                eprintln!("error: missing required flag {flag}");
                return ExitCode::from(EXIT_USAGE);
            }
            err.exit();
        }
    };
    if let Err(message) = init_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
