//! Report rendering: pretty JSON, or a short text summary for the terminal.

use std::fmt::Write as _;

use serde::Serialize;

use crate::commands::{DemoSummary, GibbsReport, GradcheckReport, HeatmapReport, LossReport, MilReport, VerifyReport};
use crate::suites::SuiteReport;

/// Pretty-printed JSON with a trailing newline.
pub fn json<R: Serialize>(report: &R) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn suite_table(out: &mut String, suite: &SuiteReport) {
    for p in &suite.properties {
        let _ = writeln!(
            out,
            "{:<10} {:<36} {:>12.3e} <= {:<9.1e} {}",
            suite.name,
            p.name,
            p.residual,
            p.tolerance,
            verdict(p.passed)
        );
    }
}

pub trait Text {
    fn text(&self) -> String;
}

impl Text for LossReport {
    fn text(&self) -> String {
        let mut out = format!(
            "L_sem {:.6}  L_geo {:.6}  total {:.6}\n",
            self.losses.sem, self.losses.geo, self.losses.total
        );
        for (b, im) in self.images.iter().enumerate() {
            let logits: Vec<String> = im.pooled_logits.iter().map(|l| format!("{l:.4}")).collect();
            let _ = writeln!(out, "image {b}: k={} pooled [{}]", im.k, logits.join(", "));
        }
        out
    }
}

impl Text for VerifyReport {
    fn text(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            suite_table(&mut out, s);
        }
        let failed = self.suites.iter().flat_map(|s| &s.properties).filter(|p| !p.passed).count();
        let _ = writeln!(out, "{}: {failed} failed", verdict(self.passed));
        out
    }
}

impl Text for GibbsReport {
    fn text(&self) -> String {
        let mut out = format!("{} random problems\n", self.problems.len());
        suite_table(&mut out, &self.suite);
        let _ = writeln!(out, "{}", verdict(self.passed));
        out
    }
}

impl Text for MilReport {
    fn text(&self) -> String {
        let mut out = String::new();
        suite_table(&mut out, &self.suite);
        let _ = writeln!(out, "{}", verdict(self.passed));
        out
    }
}

impl Text for GradcheckReport {
    fn text(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.cases.iter().enumerate() {
            let _ = writeln!(
                out,
                "case {i:>2}: draws {:>3}  coords {:>4}  margin {:.3e}  max rel err {:.3e}",
                c.draws, c.coordinates, c.margin, c.max_relative_error
            );
        }
        suite_table(&mut out, &self.suite);
        let _ = writeln!(out, "{}", verdict(self.passed));
        out
    }
}

impl Text for DemoSummary {
    fn text(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            let _ = writeln!(
                out,
                "seed {:>3}: accuracy {:.3} -> {:.3}{}",
                r.seed,
                r.accuracy_before,
                r.accuracy_after,
                r.diverged_at.map_or(String::new(), |s| format!("  (diverged at step {s})"))
            );
        }
        let _ = writeln!(
            out,
            "mean accuracy {:.3} -> {:.3}; L_sem decreased on {}/{} seeds",
            self.mean_accuracy_before,
            self.mean_accuracy_after,
            self.sem_decreased,
            self.runs.len()
        );
        if !self.heatmaps.is_empty() {
            let _ = writeln!(out, "{} heatmap files written", self.heatmaps.len());
        }
        out
    }
}

impl Text for HeatmapReport {
    fn text(&self) -> String {
        let mut out = String::new();
        for f in &self.files {
            let _ = writeln!(out, "{f}");
        }
        out
    }
}
