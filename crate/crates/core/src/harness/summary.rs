use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::preset::{PresetName, PresetPlan};
use crate::tasks::Family;
use crate::trainer::{first_reach, moving_average, read_metrics, EvalReport, StepMetrics};
use crate::Result;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "fig5.csv";

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (!v.is_empty()).then(|| quantile(&v, 0.5))
}

pub fn iqr(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (!v.is_empty()).then(|| quantile(&v, 0.75) - quantile(&v, 0.25))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub arm: String,
    pub train_family: Family,
    pub eval_family: Family,
    pub seeds: Vec<u64>,
    /// Per-seed answer accuracy; `None` where the eval file is missing.
    pub accuracies: Vec<Option<f64>>,
    pub format_accuracies: Vec<Option<f64>>,
    pub median: Option<f64>,
    pub iqr: Option<f64>,
    pub format_median: Option<f64>,
    pub sources: Vec<PathBuf>,
}

impl SummaryRow {
    pub fn is_complete(&self) -> bool {
        self.accuracies.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub preset: PresetName,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn missing_cells(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.accuracies.iter().filter(|a| a.is_none()).count())
            .sum()
    }

    pub fn row(&self, arm: &str, train: Family, eval: Family) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.train_family == train && r.eval_family == eval)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arm,train_family,eval_family,seeds,accuracies,median,iqr,format_median,sources\n",
        );
        let opt = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let join = |xs: Vec<String>| xs.join(";");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.arm,
                r.train_family,
                r.eval_family,
                join(r.seeds.iter().map(u64::to_string).collect()),
                join(r.accuracies.iter().map(|a| opt(*a)).collect()),
                opt(r.median),
                opt(r.iqr),
                opt(r.format_median),
                join(r.sources.iter().map(|p| p.display().to_string()).collect()),
            );
        }
        out
    }
}

/// Aggregates the eval reports named by a preset plan.
pub fn summarize(root: &Path) -> Result<SummaryTable> {
    let plan = PresetPlan::load(root)?;
    let mut rows: Vec<SummaryRow> = Vec::new();
    for cell in &plan.cells {
        let report = EvalReport::load(&root.join(&cell.source)).ok();
        let idx = match rows.iter().position(|r| {
            r.arm == cell.arm
                && r.train_family == cell.train_family
                && r.eval_family == cell.eval_family
        }) {
            Some(i) => i,
            None => {
                rows.push(SummaryRow {
                    arm: cell.arm.clone(),
                    train_family: cell.train_family,
                    eval_family: cell.eval_family,
                    seeds: Vec::new(),
                    accuracies: Vec::new(),
                    format_accuracies: Vec::new(),
                    median: None,
                    iqr: None,
                    format_median: None,
                    sources: Vec::new(),
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        row.seeds.push(cell.seed);
        row.accuracies
            .push(report.as_ref().map(|r| r.answer_accuracy));
        row.format_accuracies
            .push(report.as_ref().map(|r| r.format_accuracy));
        row.sources.push(cell.source.clone());
    }
    for row in &mut rows {
        let acc: Vec<f64> = row.accuracies.iter().flatten().copied().collect();
        let fmt: Vec<f64> = row.format_accuracies.iter().flatten().copied().collect();
        row.median = median(&acc);
        row.iqr = iqr(&acc);
        row.format_median = median(&fmt);
    }
    let table = SummaryTable {
        preset: plan.name,
        rows,
    };
    fs::write(root.join(SUMMARY_FILE), table.to_csv())?;
    if plan.name == PresetName::Fig5Curves {
        write_curves(root, &plan)?;
    }
    Ok(table)
}

/// When format and accuracy rewards settle, per run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveStats {
    pub format_final: f64,
    pub acc_final: f64,
    pub format_reach: Option<usize>,
    pub acc_reach: Option<usize>,
}

impl CurveStats {
    /// Format reward settles strictly before accuracy does.
    pub fn format_first(&self) -> bool {
        match (self.format_reach, self.acc_reach) {
            (Some(f), Some(a)) => f < a,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

pub const CURVE_WINDOW: usize = 10;

/// Final value = mean of the last `CURVE_WINDOW` steps; reach step = first
/// step where the trailing `CURVE_WINDOW`-step average hits 90% of it.
pub fn curve_stats(metrics: &[StepMetrics]) -> CurveStats {
    let fmt: Vec<f64> = metrics.iter().map(|m| m.reward_format_mean).collect();
    let acc: Vec<f64> = metrics.iter().map(|m| m.reward_acc_mean).collect();
    let tail = |xs: &[f64]| {
        let k = xs.len().clamp(1, CURVE_WINDOW);
        xs[xs.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    };
    let format_final = tail(&fmt);
    let acc_final = tail(&acc);
    CurveStats {
        format_final,
        acc_final,
        format_reach: first_reach(&moving_average(&fmt, CURVE_WINDOW), format_final, 0.9),
        acc_reach: first_reach(&moving_average(&acc, CURVE_WINDOW), acc_final, 0.9),
    }
}

fn write_curves(root: &Path, plan: &PresetPlan) -> Result<()> {
    let mut out =
        String::from("seed,format_final,acc_final,format_reach_step,acc_reach_step,format_first\n");
    let opt = |x: Option<usize>| x.map_or("NA".to_string(), |v| v.to_string());
    for run in &plan.runs {
        let Ok(metrics) = read_metrics(&run.config.output_dir.join("metrics.jsonl")) else {
            let _ = writeln!(out, "{},NA,NA,NA,NA,NA", run.seed);
            continue;
        };
        let s = curve_stats(&metrics);
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{},{},{}",
            run.seed,
            s.format_final,
            s.acc_final,
            opt(s.format_reach),
            opt(s.acc_reach),
            s.format_first()
        );
    }
    fs::write(root.join(CURVES_FILE), out)?;
    Ok(())
}
