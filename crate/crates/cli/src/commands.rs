//! One function per subcommand. Each returns a serializable report; nothing
//! here prints, and reports carry no timings or absolute paths so that
//! identical inputs give identical bytes.

use std::path::Path;

use anyhow::{Context, Result};
use expalign::gradients::forward;
use expalign::synth::{demo_train_batch, PRNG_NAME};
use expalign::{DemoReport, LossBreakdown, SceneSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigEcho, RunConfig};
use crate::heatmap::write_heatmaps;
use crate::scene::load_batch;
use crate::suites::{gibbs_suite, gradient_suite, run_suite, GibbsRow, GradcheckRow, SuiteParams, SuiteReport, SUITES};
use crate::SCHEMA_VERSION;

/// Suite pool sized by `EXPALIGN_THREADS` (unset or 0 = one thread per core).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("EXPALIGN_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse::<usize>().with_context(|| format!("EXPALIGN_THREADS must be a count, got `{v}`"))?
        }
        _ => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageLoss {
    pub pooled_logits: Vec<f64>,
    pub k: usize,
    /// Per prompt, flat indices into the coarse fused map, best first.
    pub topk_indices: Vec<Vec<usize>>,
    pub semantic_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub losses: LossBreakdown,
    pub images: Vec<ImageLoss>,
}

pub fn cmd_loss(cfg: &RunConfig) -> Result<LossReport> {
    cfg.validate()?;
    let batch = load_batch(cfg.scene.as_deref(), cfg.seed, cfg.signal)?;
    let fwd = forward(&batch, &cfg.objective(), None).context("evaluating the objective")?;
    let images = fwd
        .images
        .iter()
        .map(|im| ImageLoss {
            pooled_logits: im.semantic.logits.values().to_vec(),
            k: im.semantic.selections.first().map_or(0, |s| s.k()),
            topk_indices: im.semantic.selections.iter().map(|s| s.indices().to_vec()).collect(),
            semantic_loss: im.semantic.loss,
        })
        .collect();
    Ok(LossReport { schema_version: SCHEMA_VERSION, command: "loss".into(), config: cfg.echo(), losses: fwd.losses, images })
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

fn suite_params(cfg: &RunConfig) -> SuiteParams {
    SuiteParams::new(cfg.seed, cfg.fault)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let params = suite_params(cfg);
    let suites: Vec<SuiteReport> = thread_pool()?.install(|| (0..SUITES.len()).into_par_iter().map(|i| run_suite(i, &params)).collect());
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        command: "verify".into(),
        config: cfg.echo(),
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GibbsReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub passed: bool,
    pub suite: SuiteReport,
    pub problems: Vec<GibbsRow>,
}

pub fn cmd_gibbs(cfg: &RunConfig) -> Result<GibbsReport> {
    let params = SuiteParams { gibbs_problems: cfg.count.unwrap_or(100), ..suite_params(cfg) };
    let (suite, problems) = gibbs_suite(&params);
    Ok(GibbsReport {
        schema_version: SCHEMA_VERSION,
        command: "gibbs".into(),
        config: cfg.echo(),
        passed: suite.passed,
        suite,
        problems,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MilReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub passed: bool,
    pub suite: SuiteReport,
}

pub fn cmd_mil(cfg: &RunConfig) -> Result<MilReport> {
    let params = SuiteParams { mil_instances: cfg.count.unwrap_or(200), ..suite_params(cfg) };
    let suite = run_suite(4, &params);
    Ok(MilReport { schema_version: SCHEMA_VERSION, command: "mil".into(), config: cfg.echo(), passed: suite.passed, suite })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub passed: bool,
    pub suite: SuiteReport,
    pub cases: Vec<GradcheckRow>,
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let params = SuiteParams { gradcheck_configs: cfg.count.unwrap_or(20), ..suite_params(cfg) };
    let (suite, cases) = gradient_suite(&params);
    Ok(GradcheckReport {
        schema_version: SCHEMA_VERSION,
        command: "gradcheck".into(),
        config: cfg.echo(),
        passed: suite.passed,
        suite,
        cases,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub prng: String,
    pub mean_accuracy_before: f64,
    pub mean_accuracy_after: f64,
    /// Seeds whose final semantic loss is below the initial one.
    pub sem_decreased: usize,
    pub diverged: usize,
    /// Heatmap file names, relative to the heatmap directory.
    pub heatmaps: Vec<String>,
    pub runs: Vec<DemoReport>,
}

/// Trains on the benchmark scene of every seed. With a heatmap directory,
/// writes the trained fine-scale maps of each seed's first image.
pub fn cmd_demo(cfg: &RunConfig) -> Result<DemoSummary> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        anyhow::bail!("the demo needs at least one seed");
    }
    let demo = cfg.demo();
    let results: Vec<Result<_>> = thread_pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let spec = SceneSpec::benchmark(seed, cfg.signal);
                let (report, batch) = demo_train_batch(&spec, demo).with_context(|| format!("demo seed {seed}"))?;
                Ok((report, batch))
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    let mut heatmaps = Vec::new();
    for r in results {
        let (report, batch) = r?;
        if let Some(dir) = &cfg.heatmap_dir {
            if report.diverged_at.is_none() {
                let fwd = forward(&batch[..1], &demo.objective, None)?;
                heatmaps.extend(write_maps(dir, &format!("seed{}_image0", report.seed), 0, &fwd.images[0].fused_up)?);
            }
        }
        runs.push(report);
    }
    let n = runs.len() as f64;
    let sem_decreased = runs
        .iter()
        .filter(|r| matches!((r.losses.first(), &r.final_losses), (Some(a), Some(b)) if b.sem < a.sem))
        .count();
    Ok(DemoSummary {
        schema_version: SCHEMA_VERSION,
        command: "demo".into(),
        config: cfg.echo(),
        prng: PRNG_NAME.into(),
        mean_accuracy_before: runs.iter().map(|r| r.accuracy_before).sum::<f64>() / n,
        mean_accuracy_after: runs.iter().map(|r| r.accuracy_after).sum::<f64>() / n,
        sem_decreased,
        diverged: runs.iter().filter(|r| r.diverged_at.is_some()).count(),
        heatmaps,
        runs,
    })
}

fn write_maps(dir: &Path, stem: &str, image: usize, map: &expalign::AlignmentMap) -> Result<Vec<String>> {
    let written = write_heatmaps(dir, stem, image, map)?;
    Ok(written.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ConfigEcho,
    pub files: Vec<String>,
}

/// Fine-scale fused maps of every image of the scene, before any training.
pub fn cmd_heatmap(cfg: &RunConfig) -> Result<HeatmapReport> {
    cfg.validate()?;
    let dir = cfg.heatmap_dir.as_deref().context("heatmap needs an output directory (--dir)")?;
    let batch = load_batch(cfg.scene.as_deref(), cfg.seed, cfg.signal)?;
    let fwd = forward(&batch, &cfg.objective(), None).context("evaluating the objective")?;
    let mut files = Vec::new();
    for (b, im) in fwd.images.iter().enumerate() {
        files.extend(write_maps(dir, &format!("image{b}"), b, &im.fused_up)?);
    }
    Ok(HeatmapReport { schema_version: SCHEMA_VERSION, command: "heatmap".into(), config: cfg.echo(), files })
}
