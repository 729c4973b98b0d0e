use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use expalign_cli::commands::{cmd_demo, cmd_gibbs, cmd_gradcheck, cmd_heatmap, cmd_loss, cmd_mil, cmd_verify};
use expalign_cli::config::{Fault, ReportFormat, RunConfig};
use expalign_cli::render::{json, Text};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "expalign", version, about = "Expectation alignment losses, property suites and the synthetic demo")]
struct Cli {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the JSON report instead of the text summary.
    #[arg(long, global = true)]
    json: bool,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Hyper {
    #[arg(long, global = true)]
    tau_t: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    lambda_sem: Option<f64>,
    #[arg(long, global = true)]
    lambda_geo: Option<f64>,
    #[arg(long, global = true)]
    clip: Option<f64>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    topk_percent: Option<f64>,
    /// Comma-separated demo seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    signal: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the objective on a scene.
    Loss {
        /// Scene JSON; the benchmark scene for --seed when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Run every property suite.
    Verify {
        /// Deliberately break the loss to check that the suites notice.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Closed-form Gibbs minimizer against mirror descent on random problems.
    Gibbs {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Multiple-instance equivalence on random instances.
    Mil {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on the synthetic benchmark scenes.
    Demo {
        /// Write trained heatmaps of each seed's first image here.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Write heatmaps of a scene's fine-scale maps.
    Heatmap {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        dir: PathBuf,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let h = &self.hyper;
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = h.$field.clone() { cfg.$field = v; })*};
        }
        set!(tau_t, tau, lambda_sem, lambda_geo, clip, eps, topk_percent, seeds, steps, lr, signal);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.json {
            cfg.format = ReportFormat::Json;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        let (name, count) = match &self.command {
            Command::Loss { scene } | Command::Heatmap { scene, .. } => {
                if scene.is_some() {
                    cfg.scene = scene.clone();
                }
                (if matches!(self.command, Command::Loss { .. }) { "loss" } else { "heatmap" }, None)
            }
            Command::Verify { inject_fault } => {
                if inject_fault.is_some() {
                    cfg.fault = *inject_fault;
                }
                ("verify", None)
            }
            Command::Gibbs { count } => ("gibbs", *count),
            Command::Mil { count } => ("mil", *count),
            Command::Gradcheck { count } => ("gradcheck", *count),
            Command::Demo { heatmap } => {
                if heatmap.is_some() {
                    cfg.heatmap_dir = heatmap.clone();
                }
                ("demo", None)
            }
        };
        if let Command::Heatmap { dir, .. } = &self.command {
            cfg.heatmap_dir = Some(dir.clone());
        }
        if count.is_some() {
            cfg.count = count;
        }
        cfg.command = name.to_string();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit<R: Serialize + Text>(cfg: &RunConfig, report: &R) -> Result<()> {
    let body = json(report)?;
    if let Some(path) = &cfg.out {
        std::fs::write(path, &body).with_context(|| format!("writing report {}", path.display()))?;
    }
    match cfg.format {
        ReportFormat::Json => print!("{body}"),
        ReportFormat::Text => print!("{}", report.text()),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = cli.run_config()?;
    match cli.command {
        Command::Loss { .. } => emit(&cfg, &cmd_loss(&cfg)?).map(|_| true),
        Command::Verify { .. } => {
            let r = cmd_verify(&cfg)?;
            emit(&cfg, &r)?;
            Ok(r.passed)
        }
        Command::Gibbs { .. } => {
            let r = cmd_gibbs(&cfg)?;
            emit(&cfg, &r)?;
            Ok(r.passed)
        }
        Command::Mil { .. } => {
            let r = cmd_mil(&cfg)?;
            emit(&cfg, &r)?;
            Ok(r.passed)
        }
        Command::Gradcheck { .. } => {
            let r = cmd_gradcheck(&cfg)?;
            emit(&cfg, &r)?;
            Ok(r.passed)
        }
        Command::Demo { .. } => emit(&cfg, &cmd_demo(&cfg)?).map(|_| true),
        Command::Heatmap { .. } => emit(&cfg, &cmd_heatmap(&cfg)?).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
