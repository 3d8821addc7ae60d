use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use lbt_css::dsp::{read_wav, write_wav};
use lbt_css::harness::{evaluate, load_config, train, EvalConfig, EvalMode, Estimator, JsonLog, TrainConfig};
use lbt_css::model::{Checkpoint, CheckpointKind, ModelProfile, Separator, SeparatorConfig};
use lbt_css::pipeline::{separate_stream, PipelineConfig};
use lbt_css::spatialsim::{build_dataset, build_meetings, DatasetConfig, MeetingConfig};
use lbt_css::Error;

#[derive(Parser)]
#[command(name = "lbt-css", version, about = "Multi-channel continuous speech separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    Mixtures,
    Meetings,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Unprocessed,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of mixtures or long meetings.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "mixtures")]
        kind: SimKind,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a separator or speaker counter.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Separate a multichannel recording into two speaker streams.
    Separate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Speaker-counter checkpoint enabling residual suppression.
        #[arg(long)]
        counter: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint or a baseline on a manifest by SI-SNR.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
        #[arg(long)]
        counter: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Write the full report here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the trainable parameter count of a profile or checkpoint.
    CountParams {
        #[arg(long, value_enum, default_value = "paper")]
        profile: Profile,
        #[arg(long, conflicts_with = "profile")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Utterance,
    Continuous,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Paper,
    Toy,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SeparateFile {
    pipeline: PipelineConfig,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvaluateFile {
    eval: EvalConfig,
    pipeline: PipelineConfig,
}

fn cfg_path(c: &ConfigArgs) -> Option<&Path> {
    c.config.as_deref()
}

fn load_counter(path: &Option<PathBuf>) -> lbt_css::Result<Option<(lbt_css::model::SpeakerCounter<f32>, Checkpoint)>> {
    match path {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Ok(Some((ck.counter()?, ck)))
        }
        None => Ok(None),
    }
}

fn run(cmd: Command, log: &mut JsonLog) -> lbt_css::Result<()> {
    match cmd {
        Command::Simulate { cfg, kind, out_dir } => {
            let manifest = match kind {
                SimKind::Mixtures => {
                    let c: DatasetConfig = load_config(cfg_path(&cfg), &cfg.overrides)?;
                    log.record(json!({"event": "simulate", "kind": "mixtures", "count": c.count, "seed": c.seed}));
                    build_dataset(&out_dir, &c)?
                }
                SimKind::Meetings => {
                    let c: MeetingConfig = load_config(cfg_path(&cfg), &cfg.overrides)?;
                    log.record(json!({"event": "simulate", "kind": "meetings", "count": c.count, "seed": c.seed}));
                    build_meetings(&out_dir, &c)?
                }
            };
            println!("{}", json!({"manifest": manifest}));
        }
        Command::Train { cfg } => {
            let c: TrainConfig = load_config(cfg_path(&cfg), &cfg.overrides)?;
            if c.checkpoint.is_none() {
                return Err(Error::Config("train needs `checkpoint` set to an output path".into()));
            }
            let mut file_log = JsonLog::new(c.log.as_deref(), true)?;
            let out = train(&c, &mut file_log)?;
            println!(
                "{}",
                json!({
                    "checkpoint": c.checkpoint,
                    "final_train_loss": out.final_train_loss,
                    "final_valid_loss": out.final_valid_loss,
                })
            );
        }
        Command::Separate {
            cfg,
            checkpoint,
            counter,
            input,
            out_dir,
        } => {
            let p = load_config::<SeparateFile>(cfg_path(&cfg), &cfg.overrides)?.pipeline;
            let ck = Checkpoint::load(&checkpoint)?;
            let sep = ck.separator()?;
            let counter = load_counter(&counter)?;
            let wave = read_wav(&input)?;
            let out = separate_stream(&wave, &sep, &ck.stats, counter.as_ref().map(|(c, k)| (c, &k.stats)), &p)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            write_wav(&out_dir.join("stream1.wav"), &out.streams[0])?;
            write_wav(&out_dir.join("stream2.wav"), &out.streams[1])?;
            let trace = json!({"segments": out.trace, "counter_classes": out.frame_classes});
            let tp = out_dir.join("trace.json");
            std::fs::write(&tp, serde_json::to_vec_pretty(&trace)?).map_err(|e| Error::Io { path: tp, source: e })?;
            log.record(json!({"event": "separate", "segments": out.trace.len(), "samples": wave.len()}));
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            baseline,
            counter,
            manifest,
            mode,
            report,
        } => {
            let mut f: EvaluateFile = load_config(cfg_path(&cfg), &cfg.overrides)?;
            if let Some(m) = mode {
                f.eval.mode = match m {
                    Mode::Utterance => EvalMode::Utterance,
                    Mode::Continuous => EvalMode::Continuous,
                };
            }
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let sep = ck.as_ref().map(|c| c.separator()).transpose()?;
            let counter = load_counter(&counter)?;
            let curve: Vec<f64> = ck
                .as_ref()
                .and_then(|c| serde_json::from_value(c.extra["loss_curve"].clone()).ok())
                .unwrap_or_default();
            let est = match (&sep, baseline) {
                (Some(s), _) => Estimator::Model {
                    separator: s,
                    stats: &ck.as_ref().expect("checkpoint loaded").stats,
                    counter: counter.as_ref().map(|(c, k)| (c, &k.stats)),
                    pipeline: f.pipeline.clone(),
                },
                (None, Some(Baseline::Oracle)) => Estimator::Oracle,
                (None, _) => Estimator::Unprocessed,
            };
            let r = evaluate(&est, &manifest, &f.eval, curve)?;
            for (cond, s) in &r.conditions {
                log.record(json!({"event": "condition", "condition": cond, "count": s.count, "mean": s.mean, "std": s.std}));
            }
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_vec_pretty(&r)?).map_err(|e| Error::Io { path: p, source: e })?;
            }
            println!("{}", json!({"mode": r.mode, "overall": r.overall, "conditions": r.conditions}));
        }
        Command::CountParams { profile, checkpoint } => {
            let (n, kind) = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    let kind = match ck.kind {
                        CheckpointKind::Separator => "separator",
                        CheckpointKind::Counter => "counter",
                    };
                    (ck.num_params(), kind)
                }
                None => {
                    let cfg = SeparatorConfig::for_profile(match profile {
                        Profile::Paper => ModelProfile::Paper,
                        Profile::Toy => ModelProfile::Toy,
                    });
                    (Separator::<f32>::expected_params(&cfg), "separator")
                }
            };
            println!("{}", json!({"kind": kind, "params": n}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut log = JsonLog::new(None, true).expect("stderr log");
    match run(cli.command, &mut log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
            log.record(json!({"event": "error", "kind": if code == 1 { "usage" } else { "runtime" }, "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
