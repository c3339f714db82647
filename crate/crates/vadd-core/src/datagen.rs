//! Deterministic generators for the three 2-D toy densities, plus
//! discretization into V = 100 bins per dimension.
//!
//! Every point is produced from an RNG child derived from the data stream
//! and the point's index, so generation is a pure function of
//! (name, n, seed) and chunk-parallel generation would consume identical
//! randomness. Rescaling uses fixed analytic bounding boxes rather than
//! empirical extrema, keeping the map independent of n and seed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaddError};
use crate::masking::{Token, TokenSequence};
use crate::rng::{Rng, STREAM_DATA};

/// Vocabulary size per dimension (bins of width 0.01 over [0,1)).
pub const VOCAB: usize = 100;
/// Sequence length: one token per coordinate.
pub const N_POSITIONS: usize = 2;
/// Discretization bin width.
pub const BIN_WIDTH: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Checkerboard,
    Swissroll,
    Circles,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(DatasetName::Checkerboard),
            "swissroll" => Ok(DatasetName::Swissroll),
            "circles" => Ok(DatasetName::Circles),
            other => Err(VaddError::Usage(format!(
                "unknown dataset '{other}' (expected checkerboard, swissroll, or circles)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Checkerboard => "checkerboard",
            DatasetName::Swissroll => "swissroll",
            DatasetName::Circles => "circles",
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A generated pool: continuous points in [0,1)^2 and their tokenizations.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: DatasetName,
    pub points: Vec<[f64; 2]>,
    pub tokens: Vec<TokenSequence>,
    pub seed: u64,
    /// Checkerboard cells per side (even; ignored by the other densities).
    pub board: usize,
}

impl Dataset {
    /// Generate `n` points of the named density from the data RNG stream of
    /// `seed`. `board` controls the checkerboard resolution (cells per side).
    pub fn generate(name: DatasetName, n: usize, seed: u64, board: usize) -> Result<Dataset> {
        if n < 1 {
            return Err(VaddError::Usage("need at least one data point".into()));
        }
        let rng = Rng::new(seed, STREAM_DATA);
        let points = match name {
            DatasetName::Checkerboard => gen_checkerboard_board(n, board, &rng)?,
            DatasetName::Swissroll => gen_swissroll(n, &rng),
            DatasetName::Circles => gen_circles(n, &rng),
        };
        let tokens = discretize(&points, BIN_WIDTH)?;
        Ok(Dataset { name, points, tokens, seed, board })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }
}

/// On-cells of an m-per-side checkerboard: cells whose (row + col) is even,
/// in row-major order. Exactly half the cells for even m.
fn on_cells(board: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for r in 0..board {
        for c in 0..board {
            if (r + c) % 2 == 0 {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Uniform over the on-cells of a 2x2 board — quadrants (0,0) and (1,1),
/// total support area 1/2.
pub fn gen_checkerboard(n: usize, rng: &Rng) -> Vec<[f64; 2]> {
    gen_checkerboard_board(n, 2, rng).expect("board 2 is always valid")
}

/// Checkerboard with a configurable (even) number of cells per side. The
/// support area stays 1/2 for every even board size, so the true density's
/// entropy is invariant to the knob.
pub fn gen_checkerboard_board(n: usize, board: usize, rng: &Rng) -> Result<Vec<[f64; 2]>> {
    if board < 2 || board % 2 != 0 {
        return Err(VaddError::Usage(format!("board size must be even and >= 2, got {board}")));
    }
    let cells = on_cells(board);
    let m = board as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.derive(i as u64);
        let (row, col) = cells[r.next_below(cells.len() as u64) as usize];
        let x = (col as f64 + r.next_f64()) / m;
        let y = (row as f64 + r.next_f64()) / m;
        out.push([x, y]);
    }
    Ok(out)
}

/// Noise-free spiral point at parameter `u` in [0,1]:
/// radius r = 1.5*pi*(1 + 2u) at angle r, so the curve satisfies r(theta) = theta.
pub fn swissroll_spiral(u: f64) -> [f64; 2] {
    let r = 1.5 * PI * (1.0 + 2.0 * u);
    [r * r.cos(), r * r.sin()]
}

const SWISSROLL_HALF_EXTENT: f64 = 4.5 * PI + 0.8;
const CIRCBOX_HALF_EXTENT: f64 = 1.08;

/// Affine map from [-half, half] to [0, 1), clamped at the edges so noise
/// tails never escape the unit square.
fn rescale(x: f64, half: f64) -> f64 {
    ((x + half) / (2.0 * half)).clamp(0.0, 1.0 - 1e-9)
}

/// Spiral with parameter u ~ Uniform(0,1) and isotropic N(0, 0.2^2) noise,
/// rescaled from the fixed box [-4.5*pi - 0.8, 4.5*pi + 0.8]^2.
pub fn gen_swissroll(n: usize, rng: &Rng) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.derive(i as u64);
        let raw = swissroll_spiral(r.next_f64());
        let x = raw[0] + 0.2 * r.next_normal();
        let y = raw[1] + 0.2 * r.next_normal();
        out.push([rescale(x, SWISSROLL_HALF_EXTENT), rescale(y, SWISSROLL_HALF_EXTENT)]);
    }
    out
}

/// Two concentric circles of radius 1.0 and 0.5 (picked with a fair coin),
/// angle uniform, isotropic N(0, 0.02^2) noise, rescaled from [-1.08, 1.08]^2.
pub fn gen_circles(n: usize, rng: &Rng) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.derive(i as u64);
        let radius = if r.next_f64() < 0.5 { 1.0 } else { 0.5 };
        let theta = r.uniform(0.0, 2.0 * PI);
        let x = radius * theta.cos() + 0.02 * r.next_normal();
        let y = radius * theta.sin() + 0.02 * r.next_normal();
        out.push([rescale(x, CIRCBOX_HALF_EXTENT), rescale(y, CIRCBOX_HALF_EXTENT)]);
    }
    out
}

/// Tokenize points: `token = floor(coordinate / bin_width)`, clamped to the
/// last bin. Coordinates must lie in [0, 1).
pub fn discretize(points: &[[f64; 2]], bin_width: f64) -> Result<Vec<TokenSequence>> {
    let v = (1.0 / bin_width).round() as usize;
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut seq = Vec::with_capacity(2);
        for &c in p {
            if !(0.0..1.0).contains(&c) {
                return Err(VaddError::Usage(format!(
                    "point {i} coordinate {c} outside [0,1)"
                )));
            }
            seq.push(((c / bin_width).floor() as usize).min(v - 1) as Token);
        }
        out.push(seq);
    }
    Ok(out)
}
