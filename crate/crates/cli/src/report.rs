//! Tables and figures over a directory of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fork_core::algorithms::Variant;
use fork_core::harness::{
    emit_plot, load_records, load_summary, EvalRecord, ExperimentSummary, PlotStyle, SampleComplexity, Series,
    SUMMARY_FILE,
};
use serde::Serialize;

pub const STATS_FILE: &str = "stats.json";

struct Run {
    dir_name: String,
    summary: ExperimentSummary,
    records: Vec<EvalRecord>,
}

/// Every run directory directly under `dir`, or `dir` itself if it is one,
/// in name order.
fn discover(dir: &Path) -> Result<Vec<Run>> {
    let mut dirs = Vec::new();
    if dir.join(SUMMARY_FILE).is_file() {
        dirs.push(dir.to_path_buf());
    } else {
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.join(SUMMARY_FILE).is_file() {
                dirs.push(path);
            }
        }
    }
    dirs.sort();
    dirs.into_iter()
        .map(|d| {
            Ok(Run {
                dir_name: d.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                summary: load_summary(&d).with_context(|| format!("loading {}", d.display()))?,
                records: load_records(&d).with_context(|| format!("loading {}", d.display()))?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct RunRow {
    pub run: String,
    pub env: String,
    pub variant: String,
    pub instances: usize,
    pub best_average: f64,
    pub best_average_step: u64,
    pub std_at_best: f64,
    pub best_instance: f64,
}

#[derive(Debug, Serialize)]
pub struct ComplexityRow {
    pub env: String,
    #[serde(flatten)]
    pub comparison: SampleComplexity,
    pub ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Tables {
    pub runs: Vec<RunRow>,
    pub sample_complexity: Vec<ComplexityRow>,
}

pub fn collect(dir: &Path, baseline: Variant) -> Result<Tables> {
    let runs = discover(dir)?;
    let rows = runs
        .iter()
        .map(|r| RunRow {
            run: r.dir_name.clone(),
            env: r.summary.env.clone(),
            variant: r.summary.variant.name().to_string(),
            instances: r.summary.seeds.len(),
            best_average: r.summary.stats.best_average,
            best_average_step: r.summary.stats.best_average_step,
            std_at_best: r.summary.stats.std_at_best,
            best_instance: r.summary.stats.best_instance,
        })
        .collect();

    let mut complexity = Vec::new();
    for (env, group) in by_env(&runs) {
        let Some(base) = group.iter().find(|r| r.summary.variant == baseline) else {
            continue;
        };
        for cand in group.iter().filter(|r| r.dir_name != base.dir_name) {
            let comparison = SampleComplexity::compare(&base.dir_name, &base.records, &cand.dir_name, &cand.records)?;
            complexity.push(ComplexityRow {
                env: env.clone(),
                ratio: comparison.ratio(),
                comparison,
            });
        }
    }
    Ok(Tables {
        runs: rows,
        sample_complexity: complexity,
    })
}

fn by_env(runs: &[Run]) -> BTreeMap<String, Vec<&Run>> {
    let mut map: BTreeMap<String, Vec<&Run>> = BTreeMap::new();
    for r in runs {
        map.entry(r.summary.env.clone()).or_default().push(r);
    }
    map
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl Tables {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:<16} {:<10} {:>4} {:>14} {:>10} {:>12} {:>14}",
            "run", "env", "variant", "M", "best average", "at step", "std", "best instance"
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<28} {:<16} {:<10} {:>4} {:>14.4} {:>10} {:>12.4} {:>14.4}",
                r.run, r.env, r.variant, r.instances, r.best_average, r.best_average_step, r.std_at_best, r.best_instance
            );
        }
        if !self.sample_complexity.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<16} {:<28} {:<28} {:>12} {:>10} {:>12} {:>12} {:>8}",
                "env", "baseline", "candidate", "reference", "at step", "reached at", "inst median", "ratio"
            );
            for c in &self.sample_complexity {
                let s = &c.comparison;
                let _ = writeln!(
                    out,
                    "{:<16} {:<28} {:<28} {:>12.4} {:>10} {:>12} {:>12} {:>8}",
                    c.env,
                    s.baseline,
                    s.candidate,
                    s.reference,
                    s.baseline_steps,
                    opt(s.candidate_mean_curve_steps),
                    opt(s.candidate_median_steps),
                    c.ratio.map_or_else(|| "-".to_string(), |r| format!("{r:.3}")),
                );
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(STATS_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// One figure per environment under `out`, one curve per run.
pub fn plot(dir: &Path, out: &Path, window: usize) -> Result<Vec<PathBuf>> {
    let runs = discover(dir)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let style = PlotStyle {
        window,
        ..Default::default()
    };
    let mut written = Vec::new();
    for (env, group) in by_env(&runs) {
        let series: Vec<Series> = group
            .iter()
            .map(|r| Series {
                label: r.dir_name.clone(),
                records: r.records.clone(),
            })
            .collect();
        if let Some(p) = emit_plot(&env, &series, &style, &out.join(format!("{env}.svg")))? {
            written.push(p);
        }
    }
    Ok(written)
}
