//! Conversion between gaze fixations and per-frame probability heatmaps.
//!
//! Grid convention: a normalized coordinate `c` falls in cell
//! `floor(c * dim)`, with `c == 1.0` clamped into the last cell. A cell is
//! represented by its center `(index + 0.5) / dim`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{kl_value, KlDirection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("gaze point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("gaze point {index} at ({x}, {y}) lies outside the unit square")]
    OutOfRange { index: usize, x: f64, y: f64 },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("heatmap grid must be at least 2x2, got {height}x{width}")]
    GridTooSmall { height: usize, width: usize },
    #[error("heatmap stacks differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("heatmap values must be finite and nonnegative")]
    BadValues,
    #[error("heatmap data length {got} does not match {frames}x{height}x{width}")]
    DataLength {
        frames: usize,
        height: usize,
        width: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

impl GazePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, valid: true }
    }

    /// A frame where the tracker reported nothing.
    pub fn missing() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            valid: false,
        }
    }

    pub fn distance(&self, other: &GazePoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// `(row, col)` of the cell containing this point.
    pub fn cell(&self, height: usize, width: usize) -> (usize, usize) {
        (cell_index(self.y, height), cell_index(self.x, width))
    }
}

pub fn cell_index(coord: f64, dim: usize) -> usize {
    ((coord * dim as f64).floor().max(0.0) as usize).min(dim - 1)
}

pub fn cell_center(index: usize, dim: usize) -> f64 {
    (index as f64 + 0.5) / dim as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeTrajectory {
    pub points: Vec<GazePoint>,
    /// Absolute frame index of the first point.
    pub frame_offset: usize,
}

impl GazeTrajectory {
    pub fn new(points: Vec<GazePoint>, frame_offset: usize) -> Self {
        Self {
            points,
            frame_offset,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.valid).count()
    }

    /// Frames `start..end` relative to this trajectory.
    pub fn slice(&self, start: usize, end: usize) -> GazeTrajectory {
        GazeTrajectory {
            points: self.points[start..end].to_vec(),
            frame_offset: self.frame_offset + start,
        }
    }

    /// Checks every valid point is finite and inside the unit square.
    pub fn validate(&self) -> Result<(), CodecError> {
        for (index, p) in self.points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(CodecError::NonFinite { index });
            }
            if p.valid && !((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)) {
                return Err(CodecError::OutOfRange { index, x: p.x, y: p.y });
            }
        }
        Ok(())
    }
}

/// F frames of H×W probability grids, row-major per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStack {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl HeatmapStack {
    /// Wraps raw values. Normalisation is not enforced here; see
    /// [`HeatmapStack::max_normalization_error`].
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self, CodecError> {
        if values.len() != frames * height * width {
            return Err(CodecError::DataLength {
                frames,
                height,
                width,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CodecError::BadValues);
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
        })
    }

    pub fn uniform(frames: usize, height: usize, width: usize) -> Self {
        let cell = 1.0 / (height * width) as f64;
        Self {
            frames,
            height,
            width,
            values: vec![cell; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.values[f * n..(f + 1) * n]
    }

    pub fn at(&self, f: usize, row: usize, col: usize) -> f64 {
        self.values[(f * self.height + row) * self.width + col]
    }

    /// Frames `start..end`.
    pub fn slice_frames(&self, start: usize, end: usize) -> HeatmapStack {
        let n = self.height * self.width;
        HeatmapStack {
            frames: end - start,
            height: self.height,
            width: self.width,
            values: self.values[start * n..end * n].to_vec(),
        }
    }

    /// Largest |sum - 1| over frames.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.frames)
            .map(|f| (self.frame(f).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Encodes each point as a discrete isotropic Gaussian (σ in grid cells)
/// centered on the point's cell and normalized to sum to one. Missing points
/// become uniform frames.
pub fn encode_gaussian(
    traj: &GazeTrajectory,
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<HeatmapStack, CodecError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CodecError::BadSigma(sigma));
    }
    if height < 2 || width < 2 {
        return Err(CodecError::GridTooSmall { height, width });
    }
    traj.validate()?;
    let n = height * width;
    let mut stack = HeatmapStack::uniform(traj.len(), height, width);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (f, p) in traj.points.iter().enumerate() {
        if !p.valid {
            continue;
        }
        let (r0, c0) = p.cell(height, width);
        let frame = stack.frame_mut(f);
        let mut total = 0.0;
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
                let v = (-d2 * inv).exp();
                frame[r * width + c] = v;
                total += v;
            }
        }
        for v in frame.iter_mut().take(n) {
            *v /= total;
        }
    }
    Ok(stack)
}

/// Global maximum of each frame, mapped back to the cell center. Ties go to
/// the lowest row-major index.
pub fn decode_peak(stack: &HeatmapStack) -> GazeTrajectory {
    let points = (0..stack.frames())
        .map(|f| {
            let (mut best, mut best_v) = (0, f64::NEG_INFINITY);
            for (i, &v) in stack.frame(f).iter().enumerate() {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            let (r, c) = (best / stack.width(), best % stack.width());
            GazePoint::new(cell_center(c, stack.width()), cell_center(r, stack.height()))
        })
        .collect();
    GazeTrajectory::new(points, 0)
}

/// Summed per-frame KL divergence between two heatmap stacks, with both
/// sides floored at [`crate::graph::KL_EPS`] inside the logarithm.
pub fn kl_loss(
    predicted: &HeatmapStack,
    target: &HeatmapStack,
    direction: KlDirection,
) -> Result<f64, CodecError> {
    if predicted.dims() != target.dims() {
        return Err(CodecError::ShapeMismatch {
            left: predicted.dims(),
            right: target.dims(),
        });
    }
    Ok(kl_value(predicted.values(), target.values(), direction))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64, y: f64) -> GazeTrajectory {
        GazeTrajectory::new(vec![GazePoint::new(x, y)], 0)
    }

    #[test]
    fn centered_point_peaks_in_center_cell() {
        let s = encode_gaussian(&single(0.5, 0.5), 1.0, 9, 9).unwrap();
        let (mut best, mut bv) = (0, 0.0);
        for (i, &v) in s.frame(0).iter().enumerate() {
            if v > bv {
                best = i;
                bv = v;
            }
        }
        assert_eq!((best / 9, best % 9), (4, 4));
        assert!((s.frame(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_point_is_uniform() {
        let t = GazeTrajectory::new(vec![GazePoint::missing()], 0);
        let s = encode_gaussian(&t, 2.0, 4, 5).unwrap();
        assert!(s.frame(0).iter().all(|&v| v == 1.0 / 20.0));
    }

    #[test]
    fn direct_evaluation_oracle() {
        let s = encode_gaussian(&single(0.25, 0.75), 2.0, 8, 8).unwrap();
        // cell (6, 2); evaluate exp(-d²/2σ²) on every cell and normalize
        let mut raw = [0.0; 64];
        for r in 0..8 {
            for c in 0..8 {
                let d2 = ((r as f64) - 6.0).powi(2) + ((c as f64) - 2.0).powi(2);
                raw[r * 8 + c] = (-d2 / 8.0).exp();
            }
        }
        let total: f64 = raw.iter().sum();
        for (a, b) in s.frame(0).iter().zip(raw.iter()) {
            assert!((a - b / total).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_decodes_to_cell_center() {
        let mut v = vec![0.0; 64];
        v[2 * 8 + 3] = 1.0;
        let s = HeatmapStack::new(1, 8, 8, v).unwrap();
        let t = decode_peak(&s);
        assert_eq!(t.points[0], GazePoint::new(3.5 / 8.0, 2.5 / 8.0));
    }

    #[test]
    fn uniform_decodes_to_first_cell() {
        let t = decode_peak(&HeatmapStack::uniform(1, 8, 8));
        assert_eq!(t.points[0], GazePoint::new(0.5 / 8.0, 0.5 / 8.0));
    }

    #[test]
    fn coordinate_one_clamps_to_last_cell() {
        assert_eq!(GazePoint::new(1.0, 1.0).cell(4, 4), (3, 3));
        assert_eq!(GazePoint::new(0.0, 0.999).cell(4, 4), (3, 0));
    }

    #[test]
    fn encode_errors() {
        assert_eq!(
            encode_gaussian(&single(f64::NAN, 0.1), 1.0, 4, 4).unwrap_err(),
            CodecError::NonFinite { index: 0 }
        );
        assert!(matches!(
            encode_gaussian(&single(1.5, 0.1), 1.0, 4, 4),
            Err(CodecError::OutOfRange { .. })
        ));
        assert_eq!(
            encode_gaussian(&single(0.1, 0.1), 0.0, 4, 4).unwrap_err(),
            CodecError::BadSigma(0.0)
        );
        assert!(matches!(
            encode_gaussian(&single(0.1, 0.1), 1.0, 1, 4),
            Err(CodecError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn kl_of_uniform_against_one_hot() {
        let p = HeatmapStack::uniform(1, 2, 2);
        let q = HeatmapStack::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // Σ 0.25·ln(0.25/q), q floored at 1e-8
        let expected = 0.25 * (0.25f64).ln() + 3.0 * 0.25 * (0.25f64 / 1e-8).ln();
        let got = kl_loss(&p, &q, KlDirection::PredictedFirst).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(kl_loss(&q, &q, KlDirection::PredictedFirst).unwrap(), 0.0);
        assert!(kl_loss(&p, &HeatmapStack::uniform(2, 2, 2), KlDirection::PredictedFirst).is_err());
    }
}
