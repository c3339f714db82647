//! On-disk formats: CSV for points, tokens, and histogram grids; binary PPM
//! renders of sample histograms; JSON manifests and evaluation metrics.
//!
//! All writers are deterministic byte-for-byte given equal inputs: floats
//! print in Rust's shortest round-trip form and JSON objects keep sorted
//! key order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaddError};
use crate::eval::Histogram2D;
use crate::masking::{Token, TokenSequence};

pub fn write_points_csv(path: &Path, points: &[[f64; 2]]) -> Result<()> {
    let mut out = String::from("x,y\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_tokens_csv(path: &Path, tokens: &[TokenSequence]) -> Result<()> {
    if tokens.is_empty() {
        return Err(VaddError::Usage("refusing to write an empty token file".into()));
    }
    let width = tokens[0].len();
    let header: Vec<String> = (0..width).map(|j| format!("tok{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for seq in tokens {
        let row: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tokens_csv(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| VaddError::Usage(format!("{} is empty", path.display())))?;
    let width = header.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let seq: std::result::Result<TokenSequence, _> =
            line.split(',').map(|f| f.parse::<Token>()).collect();
        let seq = seq.map_err(|e| {
            VaddError::Usage(format!("{} line {}: {e}", path.display(), i + 2))
        })?;
        if seq.len() != width {
            return Err(VaddError::Usage(format!(
                "{} line {}: expected {width} fields, got {}",
                path.display(),
                i + 2,
                seq.len()
            )));
        }
        out.push(seq);
    }
    if out.is_empty() {
        return Err(VaddError::Usage(format!("{} holds no rows", path.display())));
    }
    Ok(out)
}

/// Count grid as CSV: one line per first-coordinate bin, second coordinate
/// across the columns.
pub fn write_histogram_csv(path: &Path, hist: &Histogram2D) -> Result<()> {
    let side = hist.side();
    let mut out = String::new();
    for x in 0..side {
        let row: Vec<String> = (0..side).map(|y| hist.count(x, y).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Binary grayscale render (P6): the busiest bin is white, empty bins are
/// black. Image rows run top to bottom over decreasing second coordinate,
/// so the plot reads like a conventional x/y scatter.
pub fn write_histogram_ppm(path: &Path, hist: &Histogram2D) -> Result<()> {
    let side = hist.side();
    let max = hist.max_count();
    let mut bytes = format!("P6\n{side} {side}\n255\n").into_bytes();
    for row in 0..side {
        let y = side - 1 - row;
        for x in 0..side {
            let level = if max == 0 {
                0u8
            } else {
                ((hist.count(x, y) as f64 / max as f64) * 255.0).round() as u8
            };
            bytes.extend_from_slice(&[level, level, level]);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Provenance of a generated dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub board: usize,
    pub bin_width: f64,
    pub vocab: usize,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| VaddError::Usage(format!("manifest {} is not valid: {e}", path.display())))
}

/// Evaluation summary written next to a run's checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Jensen–Shannon divergence (nats) against the ground-truth pool,
    /// keyed by the sampling step count.
    pub js: BTreeMap<String, f64>,
    /// K-sample negative log-likelihood (nats per sequence).
    pub nll: f64,
    pub k: usize,
    pub n_time_pairs: usize,
    pub n_sequences: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_metrics(path: &Path, metrics: &EvalMetrics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}
