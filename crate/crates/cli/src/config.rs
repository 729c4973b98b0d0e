//! Run configuration: JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use expalign::synth::{BENCHMARK_LEARNING_RATE, BENCHMARK_SEEDS, BENCHMARK_SIGNAL, BENCHMARK_STEPS};
use expalign::{DemoConfig, GacoConfig, ObjectiveConfig};
use serde::{Deserialize, Serialize};

/// Deliberate mutation used to check that the verify suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negate the geometry loss value seen by the verify suites.
    GeoSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Scene document; the synthetic benchmark scene for `seed` when absent.
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub heatmap_dir: Option<PathBuf>,
    pub format: ReportFormat,
    pub seed: u64,
    pub tau_t: f64,
    pub tau: f64,
    pub lambda_sem: f64,
    pub lambda_geo: f64,
    pub clip: f64,
    pub eps: f64,
    pub topk_percent: f64,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lr: f64,
    pub signal: f64,
    /// Number of random instances for `gibbs`, `mil` and `gradcheck`.
    pub count: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let obj = ObjectiveConfig::default();
        Self {
            command: String::new(),
            scene: None,
            out: None,
            heatmap_dir: None,
            format: ReportFormat::Text,
            seed: 0,
            tau_t: obj.tau_t,
            tau: obj.tau,
            lambda_sem: obj.lambda_sem,
            lambda_geo: obj.lambda_geo,
            clip: obj.gaco.clip,
            eps: obj.gaco.eps,
            topk_percent: obj.topk_percent,
            seeds: BENCHMARK_SEEDS.to_vec(),
            steps: BENCHMARK_STEPS,
            lr: BENCHMARK_LEARNING_RATE,
            signal: BENCHMARK_SIGNAL,
            count: None,
            fault: None,
        }
    }
}

/// Hyperparameters as they were used, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub command: String,
    pub seed: u64,
    pub tau_t: f64,
    pub tau: f64,
    pub lambda_sem: f64,
    pub lambda_geo: f64,
    pub clip: f64,
    pub eps: f64,
    pub topk_percent: f64,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lr: f64,
    pub signal: f64,
    pub count: Option<usize>,
    pub fault: Option<Fault>,
}

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            anyhow!("{origin}: field `{field}`: {}", e.into_inner())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_sem: self.lambda_sem,
            lambda_geo: self.lambda_geo,
            tau_t: self.tau_t,
            tau: self.tau,
            topk_percent: self.topk_percent,
            gaco: GacoConfig { clip: self.clip, eps: self.eps, ..GacoConfig::default() },
        }
    }

    pub fn demo(&self) -> DemoConfig {
        DemoConfig { steps: self.steps, learning_rate: self.lr, objective: self.objective() }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate().context("invalid hyperparameters")?;
        if !(self.signal >= 0.0) || !self.signal.is_finite() {
            bail!("signal must be finite and nonnegative, got {}", self.signal);
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!("lr must be finite and nonnegative, got {}", self.lr);
        }
        if self.steps == 0 {
            bail!("steps must be at least 1");
        }
        if self.count == Some(0) {
            bail!("count must be at least 1");
        }
        Ok(())
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            command: self.command.clone(),
            seed: self.seed,
            tau_t: self.tau_t,
            tau: self.tau,
            lambda_sem: self.lambda_sem,
            lambda_geo: self.lambda_geo,
            clip: self.clip,
            eps: self.eps,
            topk_percent: self.topk_percent,
            seeds: self.seeds.clone(),
            steps: self.steps,
            lr: self.lr,
            signal: self.signal,
            count: self.count,
            fault: self.fault,
        }
    }
}
