//! Line-delimited JSON run reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsutil::append_line_atomic;

/// Analytic cost per instance, in GFLOPs (one FLOP = one multiply-accumulate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GflopsSummary {
    /// Blocks plus selector and approximator overhead plus embed/head.
    pub mean_total: f64,
    pub blocks: f64,
    pub overhead: f64,
    pub embed_head: f64,
    pub baseline_blocks: f64,
    pub baseline_total: f64,
    /// Budget the model was trained for, if any.
    pub target: Option<f64>,
}

/// Tokens kept at stage `s` that were frozen at stage `s - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseStats {
    /// 1-based stage.
    pub stage: usize,
    pub mean_remaining: f64,
    pub mean_reused: f64,
    /// Reused over remaining, pooled over instances.
    pub ratio: f64,
    /// Fraction of instances with at least one reused token.
    pub instances_with_reuse: f64,
}

/// Timing is indicative only and excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_ms: f64,
    pub per_image_ms: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub mode: Option<String>,
    pub samples: usize,
    /// Top-1, percent.
    pub accuracy: Option<f64>,
    /// Mean kept fraction of patch tokens per stage.
    pub keep_ratios: Vec<f64>,
    pub gflops: Option<GflopsSummary>,
    pub reused: Vec<ReuseStats>,
    /// Free-form, deterministic per-command details.
    pub details: serde_json::Value,
    pub artifacts: Vec<String>,
    pub wall_clock: WallClock,
}

impl RunReport {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            mode: None,
            samples: 0,
            accuracy: None,
            keep_ratios: Vec::new(),
            gflops: None,
            reused: Vec::new(),
            details: serde_json::Value::Null,
            artifacts: Vec::new(),
            wall_clock: WallClock::default(),
        }
    }

    /// Copy with the timing fields cleared, for comparisons.
    pub fn without_wall_clock(&self) -> Self {
        Self {
            wall_clock: WallClock::default(),
            ..self.clone()
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        append_line_atomic(path, &self.to_line())
    }
}

/// Parses every line of a report file.
pub fn read_reports(text: &str) -> std::result::Result<Vec<RunReport>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
