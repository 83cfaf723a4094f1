//! Command-line interface. Exit codes: 0 success, 1 usage error (bad flags
//! or a missing config file), 2 runtime error.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{analyze_decisions, evaluate, run_greedy_episode, sweep_threshold, GateMode};
use crate::policy::{ExpertPool, HighLevelPolicy, LowLevelExpert};
use crate::render::{render_trace, summary_csv};
use crate::trace::{read_trace, TraceWriter};
use crate::train::{
    expert_checkpoint_name, train_expert, train_gate, TrainedManifest, MANIFEST_NAME,
};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(
    name = "lanegate",
    about = "Loop-road driving simulator with a lane-selection gate over per-lane driving experts",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration TOML; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for training, spawning and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to runs/<timestamp>-<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the driving expert for one target lane.
    TrainExpert {
        #[arg(long)]
        lane: usize,
    },
    /// Train the lane-selection gate over expert checkpoints in the out dir.
    TrainGate,
    /// Greedy evaluation of a trained manifest over the configured seeds.
    Evaluate {
        /// manifest.json (or the directory containing it).
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train one gate per safety threshold over shared experts, evaluate
    /// each, and emit the threshold,avg,std,best CSV.
    SweepThreshold {
        /// Directory with expert checkpoints; they are trained if omitted.
        #[arg(long)]
        experts: Option<PathBuf>,
    },
    /// Decision-consistency statistics for a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Consistency window override; config value when omitted.
        #[arg(long)]
        window: Option<usize>,
    },
    /// One seeded greedy rollout written as a JSON-lines trace.
    Rollout {
        /// Trained manifest; untrained seed-derived policies when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Steps to roll; defaults to the sim episode cap.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print the observation layouts as JSON.
    Schema,
    /// Render a trace into SVG frames and a per-step summary CSV.
    Render {
        #[arg(long)]
        trace: PathBuf,
        /// Render every N-th step.
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
}

/// println! that tolerates a closed stdout (e.g. piping into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn cmd_slug(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::TrainExpert { .. } => "train-expert",
        Cmd::TrainGate => "train-gate",
        Cmd::Evaluate { .. } => "evaluate",
        Cmd::SweepThreshold { .. } => "sweep-threshold",
        Cmd::Analyze { .. } => "analyze",
        Cmd::Rollout { .. } => "rollout",
        Cmd::Schema => "schema",
        Cmd::Render { .. } => "render",
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("{stamp}-{}", cmd_slug(&cli.cmd)))
    })
}

fn manifest_locations(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(MANIFEST_NAME), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

/// Untrained but fully deterministic policies derived from the seed alone.
fn seed_policies(run: &RunConfig, seed: u64) -> Result<(HighLevelPolicy, ExpertPool)> {
    let n_lanes = run.map.n_lanes;
    let bounds = [
        [run.sim.v_min, run.sim.v_max],
        [run.sim.delta_min, run.sim.delta_max],
    ];
    let hl = HighLevelPolicy::new(n_lanes, seed.wrapping_mul(0x9E3779B97F4A7C15))?;
    let experts = (0..n_lanes)
        .map(|lane| {
            LowLevelExpert::new(
                lane,
                bounds,
                seed.wrapping_mul(0xBF58476D1CE4E5B9).wrapping_add(lane as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((hl, ExpertPool::new(experts)?))
}

fn schema_document() -> Result<String> {
    let layout: serde_json::Value = serde_json::from_str(&crate::obs::schema_json())?;
    let doc = serde_json::json!({
        "hl_length": crate::obs::HL_LEN,
        "ll_length": crate::obs::LL_LEN,
        "schema_hash": crate::obs::schema_hash(),
        "layout": layout,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

fn dispatch(cli: &Cli, run: &RunConfig) -> Result<()> {
    let out = out_dir(cli);
    match &cli.cmd {
        Cmd::TrainExpert { lane } => {
            let path = train_expert(run, *lane, cli.seed, &out)?;
            say!("expert checkpoint: {}", path.display());
        }
        Cmd::TrainGate => {
            train_gate(run, cli.seed, &out)?;
            say!("manifest: {}", out.join(MANIFEST_NAME).display());
        }
        Cmd::Evaluate { manifest } => {
            let (mpath, mdir) = manifest_locations(manifest);
            let m = TrainedManifest::load(&mpath)?;
            let report = evaluate(run, &m, &mdir, &out)?;
            for s in &report.per_seed {
                say!(
                    "seed {}: {} collisions ({} agent-agent, {} boundary)",
                    s.seed, s.total, s.agent_agent, s.boundary
                );
            }
            say!(
                "avg {:.3} std {:.3} best {} over {} seeds x {} steps",
                report.avg,
                report.std,
                report.best,
                report.seeds.len(),
                report.steps
            );
            say!("report: {}", out.join("eval_report.json").display());
        }
        Cmd::SweepThreshold { experts } => {
            std::fs::create_dir_all(&out)?;
            let expert_dir = match experts {
                Some(dir) => dir.clone(),
                None => {
                    let dir = out.join("experts");
                    for lane in 0..run.map.n_lanes {
                        train_expert(run, lane, cli.seed, &dir)?;
                    }
                    dir
                }
            };
            let mut entries = Vec::new();
            for &threshold in &run.eval.sweep_thresholds {
                let tdir = out.join(format!("gate_threshold_{threshold}"));
                std::fs::create_dir_all(&tdir)?;
                for lane in 0..run.map.n_lanes {
                    let name = expert_checkpoint_name(lane);
                    let src = expert_dir.join(&name);
                    if !src.exists() {
                        return Err(Error::Config(format!(
                            "expert checkpoint {} not found",
                            src.display()
                        )));
                    }
                    std::fs::copy(&src, tdir.join(&name))?;
                }
                let mut run_t = run.clone();
                run_t.hl_reward.safety_threshold = threshold;
                train_gate(&run_t, cli.seed, &tdir)?;
                entries.push((threshold, tdir));
            }
            let (csv, _) = sweep_threshold(run, &entries, &out)?;
            say!("{}", csv.trim_end_matches('\n'));
            say!("sweep table: {}", out.join("sweep.csv").display());
        }
        Cmd::Analyze { trace, window } => {
            let steps = read_trace(trace)?;
            let window = window.unwrap_or(run.eval.consistency_window);
            let (events, summary) = analyze_decisions(&steps, window)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("lane_change_events.json"),
                serde_json::to_string_pretty(&events)?,
            )?;
            say!(
                "{} decision changes: {} completed, {} hesitations, {} aborted (window {window})",
                summary.events, summary.completed, summary.hesitations, summary.aborted
            );
            say!("events: {}", out.join("lane_change_events.json").display());
        }
        Cmd::Rollout { manifest, steps } => {
            let (hl, pool, map) = match manifest {
                Some(path) => {
                    let (mpath, mdir) = manifest_locations(path);
                    let m = TrainedManifest::load(&mpath)?;
                    let (hl, pool) = m.load_policies(&mdir)?;
                    (hl, pool, m.map.build()?)
                }
                None => {
                    let (hl, pool) = seed_policies(run, cli.seed)?;
                    (hl, pool, run.map.build()?)
                }
            };
            let steps = steps.unwrap_or(run.sim.max_steps as usize);
            let result = run_greedy_episode(
                &map,
                &run.sim,
                run,
                GateMode::Learned(&hl),
                &pool,
                steps,
                cli.seed,
            )?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("trace.jsonl");
            let mut writer = TraceWriter::create(&path)?;
            for step in &result.trace {
                writer.write_step(step)?;
            }
            writer.finish()?;
            say!(
                "trace: {} ({} steps, {} agent-agent, {} boundary collisions)",
                path.display(),
                steps,
                result.agent_agent,
                result.boundary
            );
        }
        Cmd::Schema => {
            say!("{}", schema_document()?);
        }
        Cmd::Render { trace, every } => {
            let steps = read_trace(trace)?;
            let map = run.map.build()?;
            let n = render_trace(&map, &run.sim, &steps, &out, *every)?;
            std::fs::write(out.join("summary.csv"), summary_csv(&steps))?;
            say!("{n} frames + summary.csv in {}", out.display());
        }
    }
    Ok(())
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the same channel.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let run_cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                eprintln!("error: config file {} not found", path.display());
                eprintln!("usage: lanegate <COMMAND> [--config PATH] [--seed N] [--out DIR]");
                return 1;
            }
            match RunConfig::load(path) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            }
        }
        None => RunConfig::default(),
    };
    match dispatch(&cli, &run_cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
