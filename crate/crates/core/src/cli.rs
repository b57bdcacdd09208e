//! Command-line entry point.
//!
//! Exit status: 0 on success, 1 on a runtime failure (with a one-line JSON
//! error record on stderr), 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, strip_heads};
use crate::config::{Invocation, RunConfig};
use crate::connectome::{build_graph, default_edge_budget, pearson_connectivity, EdgeSelection};
use crate::dataset::{list_series_files, load_dataset, read_labels, read_time_series, save, write_time_series_binary, Dataset};
use crate::error::{Error, Result};
use crate::evalharness::{probe, scaling_run, transfer_eval, ProbeMode, ProbeReport};
use crate::report::{render_report, render_scaling};
use crate::synthgen::{cohort_to_dataset, generate_cohort, oracle_accuracy};
use crate::trainer::{latest_checkpoint, pretrain, resume, Objective};
use crate::verify::run_checks;

#[derive(Debug, Parser)]
#[command(name = "hfmca", version, about = "Self-supervised pretraining and probing of brain connectivity graph encoders")]
struct Cli {
    /// Seed for every random stream of the run (overrides config seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force the deterministic execution path.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (default: runs/<name>).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. --set train.epochs=10 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labelled cohort as a dataset directory.
    Synth {
        /// Also write each subject's time series under `series/`.
        #[arg(long)]
        write_series: bool,
    },
    /// Build graphs from a directory of ROI time series.
    BuildGraphs {
        #[arg(long)]
        input: PathBuf,
        /// Edges per graph, or `auto` for n^2/400.
        #[arg(long)]
        edge_budget: Option<String>,
        /// `raw` or `absolute`.
        #[arg(long)]
        selection: Option<EdgeSelection>,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint up to `train.epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probing under nested cross-validation.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<ProbeMode>,
        /// Method label used in reports.
        #[arg(long)]
        method: Option<String>,
    },
    /// Probing on a dataset excluded from pretraining.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<ProbeMode>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Pretrain on growing pool unions and probe each downstream task.
    Scaling {
        #[arg(long, num_args = 1.., required = true)]
        pools: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        tasks: Vec<PathBuf>,
    },
    /// Render tables and figures from probe report JSON files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run the fast invariant suite.
    Verify,
}

fn method_label(objective: Option<Objective>, mode: ProbeMode) -> String {
    let base = match objective {
        Some(Objective::Hfmca) => "HFMCA",
        Some(Objective::Simclr) => "SimCLR",
        Some(Objective::BarlowTwins) => "BarlowTwins",
        Some(Objective::Vicreg) => "VICReg",
        Some(Objective::None) | None => "Baseline",
    };
    let suffix = match mode {
        ProbeMode::Frozen => "F",
        ProbeMode::Unfrozen => "U",
    };
    format!("{base}_{suffix}")
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    invocation: Invocation,
}

impl Ctx {
    fn arg(&mut self, key: &str, value: impl Into<String>) {
        self.invocation.arguments.insert(key.into(), value.into());
    }

    fn freeze(&self) -> Result<()> {
        self.cfg.write_resolved(&self.out, self.invocation.clone())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_reports(paths: &[PathBuf]) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        if v.is_array() {
            out.extend(serde_json::from_value::<Vec<ProbeReport>>(v)?);
        } else {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}

fn checkpoint_at(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest_checkpoint(path)
    } else {
        Ok(path.to_path_buf())
    }
}

fn run_probe(ctx: &mut Ctx, checkpoint: &Path, data: &Path, mode: Option<ProbeMode>, method: Option<String>, transfer: bool) -> Result<()> {
    let ckpt_path = checkpoint_at(checkpoint)?;
    ctx.arg("checkpoint", path_arg(&ckpt_path));
    ctx.arg("data", path_arg(data));
    if let Some(m) = mode {
        ctx.cfg.probe.mode = m;
    }
    ctx.cfg.probe.validate()?;
    let ckpt = strip_heads(&load_checkpoint(&ckpt_path)?);
    let dataset = load_dataset(data)?;
    let label = method.unwrap_or_else(|| method_label(ckpt.train_config.as_ref().map(|c| c.objective), ctx.cfg.probe.mode));
    ctx.arg("method", label.clone());
    ctx.freeze()?;
    let report = if transfer {
        transfer_eval(&ckpt, &dataset, &ctx.cfg.probe)?
    } else {
        probe(&ckpt, &dataset, &ctx.cfg.probe)?
    }
    .with_method(label.clone());
    let eval = ctx.out.join("eval");
    let stem = format!("{}-{}{}", report.task, label, if transfer { "-transfer" } else { "" });
    write_json(&eval.join(format!("{stem}.json")), &report)?;
    render_report(std::slice::from_ref(&report), &eval.join(&stem))?;
    println!(
        "{} {} {}: {:.2} ± {:.2} (majority {:.2})",
        report.task, label, if transfer { "transfer" } else { "probe" }, report.accuracy_mean, report.accuracy_std, report.majority_class_accuracy
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.synth.rng_seed = seed;
        cfg.train.seed = seed;
        cfg.probe.seed = seed;
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    let out = cli.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let command = match &cli.command {
        Command::Synth { .. } => "synth",
        Command::BuildGraphs { .. } => "build-graphs",
        Command::Pretrain { .. } => "pretrain",
        Command::Probe { .. } => "probe",
        Command::Transfer { .. } => "transfer",
        Command::Scaling { .. } => "scaling",
        Command::Report { .. } => "report",
        Command::Verify => "verify",
    };
    let mut ctx = Ctx {
        cfg,
        out,
        invocation: Invocation {
            command: command.into(),
            arguments: BTreeMap::new(),
        },
    };

    match cli.command {
        Command::Synth { write_series } => {
            ctx.freeze()?;
            let cohort = generate_cohort(&ctx.cfg.synth)?;
            let n = ctx.cfg.synth.n_regions;
            let budget = ctx.cfg.graphs.edge_budget.unwrap_or_else(|| default_edge_budget(n));
            let mut ds = cohort_to_dataset(&cohort, &ctx.cfg.name, budget, ctx.cfg.graphs.selection, ctx.cfg.synth.rng_seed)?;
            ds.manifest.provenance = format!("synthetic cohort, class_effect {}", ctx.cfg.synth.class_effect);
            save(&ds, &ctx.out)?;
            if write_series {
                let dir = ctx.out.join("series");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for ts in &cohort.series {
                    write_time_series_binary(ts, &dir.join(format!("{}.rts", ts.subject_id)))?;
                }
                let mut csv = String::from("subject_id,label\n");
                for (ts, l) in cohort.series.iter().zip(&cohort.labels) {
                    csv.push_str(&format!("{},{l}\n", ts.subject_id));
                }
                let p = dir.join("labels.csv");
                fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            }
            println!(
                "wrote {} subjects to {} (oracle accuracy {:.4})",
                ds.len(),
                ctx.out.display(),
                oracle_accuracy(&cohort)?
            );
        }
        Command::BuildGraphs { input, edge_budget, selection } => {
            ctx.arg("input", path_arg(&input));
            match edge_budget.as_deref() {
                None => {}
                Some("auto") => ctx.cfg.graphs.edge_budget = None,
                Some(s) => {
                    ctx.cfg.graphs.edge_budget = Some(
                        s.parse()
                            .map_err(|_| Error::InvalidConfig(format!("--edge-budget must be an integer or `auto`, got `{s}`")))?,
                    )
                }
            }
            if let Some(s) = selection {
                ctx.cfg.graphs.selection = s;
            }
            ctx.freeze()?;
            let labels = if input.join("labels.csv").exists() {
                read_labels(&input)?
            } else {
                BTreeMap::new()
            };
            let mut graphs = Vec::new();
            let mut clamped = 0;
            for f in list_series_files(&input)? {
                let ts = read_time_series(&f)?;
                let conn = pearson_connectivity(&ts)?;
                let n = conn.matrix.n_regions();
                let budget = ctx.cfg.graphs.edge_budget.unwrap_or_else(|| default_edge_budget(n));
                let built = build_graph(&conn.matrix, budget, ctx.cfg.graphs.selection);
                clamped += usize::from(built.clamped);
                let mut g = built.graph;
                g.label = labels.get(&g.subject_id).copied();
                graphs.push(g);
            }
            if graphs.is_empty() {
                return Err(Error::InvalidInput(format!("no time-series files in {}", input.display())));
            }
            if clamped > 0 {
                log::warn!("edge budget exceeded the available pairs for {clamped} subjects");
            }
            let mut ds = Dataset::new(ctx.cfg.name.clone(), graphs, ctx.cfg.synth.rng_seed);
            ds.manifest.provenance = format!("built from {}", input.display());
            save(&ds, &ctx.out)?;
            println!("wrote {} graphs to {}", ds.len(), ctx.out.display());
        }
        Command::Pretrain { data, resume: from } => {
            ctx.arg("data", path_arg(&data));
            if let Some(p) = &from {
                ctx.arg("resume", path_arg(p));
            }
            ctx.freeze()?;
            let dataset = load_dataset(&data)?;
            let ckpt = match from {
                Some(p) => resume(load_checkpoint(&checkpoint_at(&p)?)?, &dataset, &ctx.cfg.train, Some(&ctx.out))?,
                None => pretrain(&dataset, &ctx.cfg.train, Some(&ctx.out))?,
            };
            println!(
                "trained {} epochs; final loss {}; checkpoint {}",
                ckpt.epoch,
                ckpt.metrics.epoch_losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}")),
                crate::trainer::checkpoint_path(&ctx.out, ckpt.epoch).display()
            );
        }
        Command::Probe { checkpoint, data, mode, method } => run_probe(&mut ctx, &checkpoint, &data, mode, method, false)?,
        Command::Transfer { checkpoint, data, mode, method } => run_probe(&mut ctx, &checkpoint, &data, mode, method, true)?,
        Command::Scaling { pools, tasks } => {
            ctx.arg("pools", pools.iter().map(|p| path_arg(p)).collect::<Vec<_>>().join(","));
            ctx.arg("tasks", tasks.iter().map(|p| path_arg(p)).collect::<Vec<_>>().join(","));
            ctx.freeze()?;
            let pools = pools.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
            let tasks = tasks.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
            let dir = ctx.out.join("scaling");
            let report = scaling_run(&pools, &tasks, &ctx.cfg.train, &ctx.cfg.probe, Some(&dir))?;
            render_scaling(&report, &ctx.out.join("eval"))?;
            for p in &report.points {
                for r in &p.reports {
                    println!("{} subjects, {}: {:.2} ± {:.2}", p.n_subjects, r.task, r.accuracy_mean, r.accuracy_std);
                }
            }
        }
        Command::Report { inputs } => {
            ctx.arg("inputs", inputs.iter().map(|p| path_arg(p)).collect::<Vec<_>>().join(","));
            ctx.freeze()?;
            let reports = read_reports(&inputs)?;
            for f in render_report(&reports, &ctx.out.join("eval"))? {
                println!("{}", f.display());
            }
        }
        Command::Verify => {
            let checks = run_checks(ctx.cfg.train.seed);
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                println!("{} {} ({:.2}s): {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
            }
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            1
        }
    }
}
