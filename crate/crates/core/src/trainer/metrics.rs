use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::reward::RewardBreakdown;
use crate::{LabError, Result};

/// One training step's record in `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: u64,
    pub beta: f64,
    pub reward_total_mean: f64,
    pub reward_total_std: f64,
    pub reward_acc_mean: f64,
    pub reward_acc_std: f64,
    pub reward_format_mean: f64,
    pub reward_format_std: f64,
    pub kl_mean: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub wall_clock_ms: u64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.beta,
            self.reward_total_mean,
            self.reward_total_std,
            self.reward_acc_mean,
            self.reward_acc_std,
            self.reward_format_mean,
            self.reward_format_std,
            self.kl_mean,
            self.loss,
            self.clip_fraction,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Mean and population std of each reward component.
pub fn reward_stats(rewards: &[RewardBreakdown]) -> [(f64, f64); 3] {
    let stat = |f: fn(&RewardBreakdown) -> f64| {
        let n = rewards.len() as f64;
        let mean = rewards.iter().map(f).sum::<f64>() / n;
        let var = rewards.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    [stat(|r| r.total), stat(|r| r.acc), stat(|r| r.format)]
}

/// Appends step records in step order.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path` for a run that starts at `first_step`, keeping earlier
    /// records from an interrupted run and dropping later ones.
    pub fn open(path: &Path, first_step: u64) -> Result<Self> {
        // Surviving lines are copied verbatim so a resumed file is byte-identical.
        let mut kept = Vec::new();
        if first_step > 0 && path.exists() {
            let text = fs::read_to_string(path)?;
            for (line, m) in text.lines().zip(read_metrics(path)?) {
                if m.step < first_step {
                    kept.push(line.to_string());
                }
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        for line in &kept {
            writeln!(out, "{line}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(m)?)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| LabError::MalformedFile {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// First index at which `series` reaches `frac` of `target`.
pub fn first_reach(series: &[f64], target: f64, frac: f64) -> Option<usize> {
    series.iter().position(|&x| x >= frac * target)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(series: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= w {
            sum -= series[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
