//! Mistake scores comparing a completed trajectory with the recorded one.
//! Every function follows one polarity: higher means more mistake-like.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{GazePoint, GazeTrajectory, HeatmapStack};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("trajectory lengths differ: {gt} vs {pred}")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("no valid frames to score")]
    NoValidFrames,
    #[error("heatmap stack has {frames} frames, trajectory needs {needed}")]
    IndexOutOfRange { frames: usize, needed: usize },
    #[error("frame {frame} sums to {sum}, not 1")]
    Unnormalized { frame: usize, sum: f64 },
    #[error("score streams misaligned at position {index}: timestep {a} vs {b}")]
    Misaligned { index: usize, a: usize, b: usize },
    #[error("non-finite score")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, ScoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    Euclidean,
    Dtw,
    #[default]
    Heatmap,
    Entropy,
}

impl ScoreFunction {
    pub const ALL: [ScoreFunction; 4] = [
        ScoreFunction::Entropy,
        ScoreFunction::Euclidean,
        ScoreFunction::Dtw,
        ScoreFunction::Heatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFunction::Euclidean => "euclidean",
            ScoreFunction::Dtw => "dtw",
            ScoreFunction::Heatmap => "heatmap",
            ScoreFunction::Entropy => "entropy",
        }
    }
}

impl std::str::FromStr for ScoreFunction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ScoreFunction::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown scoring function `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub timestep: usize,
    pub score: f64,
    pub function: ScoreFunction,
    pub frames_used: usize,
    /// Raw summed likelihood, heatmap scoring only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<f64>,
}

fn last_timestep(t: &GazeTrajectory) -> usize {
    (t.frame_offset + t.len()).saturating_sub(1)
}

fn record(function: ScoreFunction, timestep: usize, score: f64, frames_used: usize) -> Result<ScoreRecord> {
    if !score.is_finite() {
        return Err(ScoreError::NonFinite);
    }
    Ok(ScoreRecord {
        timestep,
        score,
        function,
        frames_used,
        likelihood: None,
    })
}

/// Sum of point distances over frames valid in both trajectories.
pub fn score_euclidean(gt: &GazeTrajectory, pred: &GazeTrajectory) -> Result<ScoreRecord> {
    if gt.len() != pred.len() {
        return Err(ScoreError::LengthMismatch {
            gt: gt.len(),
            pred: pred.len(),
        });
    }
    let mut total = 0.0;
    let mut used = 0;
    for (a, b) in gt.points.iter().zip(&pred.points) {
        if a.valid && b.valid {
            total += a.distance(b);
            used += 1;
        }
    }
    if used == 0 {
        return Err(ScoreError::NoValidFrames);
    }
    record(ScoreFunction::Euclidean, last_timestep(gt), total, used)
}

/// Exact DTW cost with steps {match, insertion, deletion} and Euclidean
/// point distance.
pub fn dtw_cost(a: &[GazePoint], b: &[GazePoint]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = a[i - 1].distance(&b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

pub fn score_dtw(gt: &GazeTrajectory, pred: &GazeTrajectory) -> Result<ScoreRecord> {
    let a: Vec<GazePoint> = gt.points.iter().copied().filter(|p| p.valid).collect();
    let b: Vec<GazePoint> = pred.points.iter().copied().filter(|p| p.valid).collect();
    if a.is_empty() || b.is_empty() {
        return Err(ScoreError::NoValidFrames);
    }
    record(ScoreFunction::Dtw, last_timestep(gt), dtw_cost(&a, &b), a.len())
}

/// Negated likelihood of the recorded fixations under `qhat`, whose frames
/// align one-to-one with `gt`.
pub fn score_heatmap(gt: &GazeTrajectory, qhat: &HeatmapStack) -> Result<ScoreRecord> {
    if qhat.frames() != gt.len() {
        return Err(ScoreError::IndexOutOfRange {
            frames: qhat.frames(),
            needed: gt.len(),
        });
    }
    let (h, w) = (qhat.height(), qhat.width());
    let mut likelihood = 0.0;
    let mut used = 0;
    for (i, p) in gt.points.iter().enumerate() {
        if p.valid {
            let (r, c) = p.cell(h, w);
            likelihood += qhat.at(i, r, c);
            used += 1;
        }
    }
    if used == 0 {
        return Err(ScoreError::NoValidFrames);
    }
    let mut rec = record(ScoreFunction::Heatmap, last_timestep(gt), -likelihood, used)?;
    rec.likelihood = Some(likelihood);
    Ok(rec)
}

/// Mean Shannon entropy in bits of the frames of `qhat`. Needs no recorded
/// gaze; the timestep is left at 0 for the caller to set.
pub fn score_entropy(qhat: &HeatmapStack) -> Result<ScoreRecord> {
    if qhat.frames() == 0 {
        return Err(ScoreError::NoValidFrames);
    }
    let mut total = 0.0;
    for f in 0..qhat.frames() {
        let frame = qhat.frame(f);
        let sum: f64 = frame.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(ScoreError::Unnormalized { frame: f, sum });
        }
        total -= frame
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.log2())
            .sum::<f64>();
    }
    record(ScoreFunction::Entropy, 0, total / qhat.frames() as f64, qhat.frames())
}

/// Min-max normalisation to [0, 1]; a zero-range input maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub timestep: usize,
    pub score: f64,
}

/// Averages two min-max normalised streams that share their timesteps.
pub fn late_fuse(a: &[ScoreRecord], b: &[ScoreRecord]) -> Result<Vec<FusedScore>> {
    if a.len() != b.len() {
        return Err(ScoreError::LengthMismatch {
            gt: a.len(),
            pred: b.len(),
        });
    }
    if let Some(i) = a.iter().zip(b).position(|(x, y)| x.timestep != y.timestep) {
        return Err(ScoreError::Misaligned {
            index: i,
            a: a[i].timestep,
            b: b[i].timestep,
        });
    }
    let na = minmax_normalize(&a.iter().map(|r| r.score).collect::<Vec<_>>());
    let nb = minmax_normalize(&b.iter().map(|r| r.score).collect::<Vec<_>>());
    Ok(a
        .iter()
        .zip(na.iter().zip(&nb))
        .map(|(r, (x, y))| FusedScore {
            timestep: r.timestep,
            score: 0.5 * (x + y),
        })
        .collect())
}
