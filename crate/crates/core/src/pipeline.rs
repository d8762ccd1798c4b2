//! Per-timestep mistake detection over a session.
//!
//! A window ending at frame `t` (0-based) covers frames `t+1-F ..= t`; its
//! score is attached to `t` and paired with `labels[t]`. Frames before the
//! first full window get no score.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{GazePoint, GazeTrajectory};
use crate::model::{ClipWindow, CompletionModel, ModelError};
use crate::scoring::{
    score_dtw, score_entropy, score_euclidean, score_heatmap, ScoreError, ScoreFunction, ScoreRecord,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid session `{id}`: {msg}")]
    Session { id: String, msg: String },
    #[error("invalid window settings: {0}")]
    Settings(String),
    #[error("model expects {expected}, session `{id}` has {got}")]
    ConfigMismatch { id: String, expected: String, got: String },
    #[error("stream for `{stream}` applied to session `{session}`")]
    WrongSession { stream: String, session: String },
    #[error("timestep {0} has no label")]
    MissingLabel(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// One C×H×W grid per frame, channel-major, row-major within a channel.
    pub frames: Vec<Arc<[f32]>>,
    pub gaze: GazeTrajectory,
    pub labels: Vec<bool>,
    pub metadata: BTreeMap<String, String>,
}

impl SessionRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(PipelineError::Session {
                id: self.session_id.clone(),
                msg,
            })
        };
        if self.gaze.len() != self.len() || self.labels.len() != self.len() {
            return fail(format!(
                "{} frames, {} gaze points, {} labels",
                self.len(),
                self.gaze.len(),
                self.labels.len()
            ));
        }
        let per_frame = self.channels * self.height * self.width;
        if let Some(i) = self.frames.iter().position(|f| f.len() != per_frame) {
            return fail(format!("frame {i} holds {} values, expected {per_frame}", self.frames[i].len()));
        }
        if let Err(e) = self.gaze.validate() {
            return fail(e.to_string());
        }
        Ok(())
    }

    /// Label density over all frames.
    pub fn mistake_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct Windows {
    pub windows: Vec<ClipWindow>,
    /// Set when the session is shorter than one window.
    pub too_short: bool,
}

/// Number of windows a session of `len` frames yields.
pub fn window_count(len: usize, frames: usize, stride: usize) -> usize {
    if len < frames || stride == 0 {
        0
    } else {
        (len - frames) / stride + 1
    }
}

fn check_window_settings(frames: usize, stride: usize) -> Result<()> {
    if frames < 2 || frames % 2 != 0 {
        return Err(PipelineError::Settings(format!("F must be even and >= 2, got {frames}")));
    }
    if stride == 0 {
        return Err(PipelineError::Settings("stride must be positive".into()));
    }
    Ok(())
}

fn window_at(session: &SessionRecord, frames: usize, end: usize) -> ClipWindow {
    let start = end + 1 - frames;
    let half = frames / 2;
    ClipWindow {
        frames: session.frames[start..=end].to_vec(),
        channels: session.channels,
        height: session.height,
        width: session.width,
        partial_traj: session.gaze.slice(start, start + half),
        target_traj: Some(session.gaze.slice(start + half, end + 1)),
        window_end: end,
    }
}

/// Windows ending at `F-1`, `F-1+stride`, ... up to the last frame.
pub fn extract_windows(session: &SessionRecord, frames: usize, stride: usize) -> Result<Windows> {
    check_window_settings(frames, stride)?;
    session.validate()?;
    if session.len() < frames {
        log::warn!(
            "session `{}` has {} frames, shorter than a {frames}-frame window",
            session.session_id,
            session.len()
        );
        return Ok(Windows {
            windows: Vec::new(),
            too_short: true,
        });
    }
    let windows = (frames - 1..session.len())
        .step_by(stride)
        .map(|end| window_at(session, frames, end))
        .collect();
    Ok(Windows {
        windows,
        too_short: false,
    })
}

/// How a score is matched with a ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelAggregation {
    /// Label of the window's last frame.
    #[default]
    LastFrame,
    /// Majority over the predicted half, ties counted as mistakes.
    MajorityPredictedHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub frames: usize,
    pub stride: usize,
    pub function: ScoreFunction,
    pub aggregation: LabelAggregation,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            stride: 1,
            function: ScoreFunction::Heatmap,
            aggregation: LabelAggregation::LastFrame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStream {
    pub session_id: String,
    pub function: ScoreFunction,
    pub records: Vec<ScoreRecord>,
    /// Window ends whose recorded half held no valid gaze.
    pub absent: Vec<usize>,
    pub config: DetectConfig,
}

/// All four scores of one window, from a single completion.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub timestep: usize,
    /// Indexed like [`ScoreFunction::ALL`]; `None` when the recorded half has
    /// no valid frame.
    pub records: [Option<ScoreRecord>; 4],
}

impl WindowScores {
    pub fn get(&self, function: ScoreFunction) -> Option<&ScoreRecord> {
        let i = ScoreFunction::ALL.iter().position(|&f| f == function).expect("listed");
        self.records[i].as_ref()
    }
}

pub fn score_window(model: &CompletionModel, clip: &ClipWindow) -> Result<WindowScores> {
    let (pred, qhat) = model.complete(clip)?;
    let cfg = model.config();
    let half = qhat.slice_frames(cfg.observed(), cfg.frames);
    let gt = clip
        .target_traj
        .as_ref()
        .ok_or_else(|| PipelineError::Settings("window without recorded gaze".into()))?;
    let t = clip.window_end;
    if gt.valid_count() == 0 {
        return Ok(WindowScores {
            timestep: t,
            records: [None, None, None, None],
        });
    }
    let mut records = [None, None, None, None];
    for (slot, f) in records.iter_mut().zip(ScoreFunction::ALL) {
        let mut r = match f {
            ScoreFunction::Euclidean => score_euclidean(gt, &pred),
            ScoreFunction::Dtw => score_dtw(gt, &pred),
            ScoreFunction::Heatmap => score_heatmap(gt, &half),
            ScoreFunction::Entropy => score_entropy(&half),
        }?;
        r.timestep = t;
        *slot = Some(r);
    }
    Ok(WindowScores { timestep: t, records })
}

fn check_model(session: &SessionRecord, model: &CompletionModel) -> Result<()> {
    let c = model.config();
    let expected = (c.channels, c.height, c.width);
    let got = (session.channels, session.height, session.width);
    if expected != got {
        return Err(PipelineError::ConfigMismatch {
            id: session.session_id.clone(),
            expected: format!("{}x{}x{} grids", expected.0, expected.1, expected.2),
            got: format!("{}x{}x{}", got.0, got.1, got.2),
        });
    }
    Ok(())
}

/// Scores every window of a session with all four functions. Windows run in
/// parallel; the output is in timestep order.
pub fn detect_windows(session: &SessionRecord, model: &CompletionModel, stride: usize) -> Result<Vec<WindowScores>> {
    check_model(session, model)?;
    let windows = extract_windows(session, model.config().frames, stride)?;
    windows
        .windows
        .par_iter()
        .map(|w| score_window(model, w))
        .collect()
}

/// Assembles the stream of one function from per-window scores.
pub fn stream_from_windows(session_id: &str, scores: &[WindowScores], config: &DetectConfig) -> ScoreStream {
    let mut records = Vec::with_capacity(scores.len());
    let mut absent = Vec::new();
    for w in scores {
        match w.get(config.function) {
            Some(r) => records.push(r.clone()),
            None => absent.push(w.timestep),
        }
    }
    ScoreStream {
        session_id: session_id.to_string(),
        function: config.function,
        records,
        absent,
        config: config.clone(),
    }
}

pub fn detect(session: &SessionRecord, model: &CompletionModel, config: &DetectConfig) -> Result<ScoreStream> {
    if config.frames != model.config().frames {
        return Err(PipelineError::ConfigMismatch {
            id: session.session_id.clone(),
            expected: format!("F={}", model.config().frames),
            got: format!("F={}", config.frames),
        });
    }
    let scores = detect_windows(session, model, config.stride)?;
    Ok(stream_from_windows(&session.session_id, &scores, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub timestep: usize,
    pub score: f64,
    pub label: bool,
}

pub fn label_stream(session: &SessionRecord, stream: &ScoreStream) -> Result<Vec<LabeledScore>> {
    if stream.session_id != session.session_id {
        return Err(PipelineError::WrongSession {
            stream: stream.session_id.clone(),
            session: session.session_id.clone(),
        });
    }
    let half = stream.config.frames / 2;
    stream
        .records
        .iter()
        .map(|r| {
            let t = r.timestep;
            let label = match stream.config.aggregation {
                LabelAggregation::LastFrame => *session.labels.get(t).ok_or(PipelineError::MissingLabel(t))?,
                LabelAggregation::MajorityPredictedHalf => {
                    if t + 1 < half || t >= session.labels.len() {
                        return Err(PipelineError::MissingLabel(t));
                    }
                    let span = &session.labels[t + 1 - half..=t];
                    2 * span.iter().filter(|&&l| l).count() >= span.len()
                }
            };
            Ok(LabeledScore {
                timestep: t,
                score: r.score,
                label,
            })
        })
        .collect()
}

/// Frame-by-frame detector with the same output as [`detect_windows`].
pub struct StreamingDetector<'m> {
    model: &'m CompletionModel,
    stride: usize,
    buffer: VecDeque<(Arc<[f32]>, GazePoint)>,
    next: usize,
}

impl<'m> StreamingDetector<'m> {
    pub fn new(model: &'m CompletionModel, stride: usize) -> Result<Self> {
        check_window_settings(model.config().frames, stride)?;
        Ok(Self {
            model,
            stride,
            buffer: VecDeque::with_capacity(model.config().frames),
            next: 0,
        })
    }

    /// Feeds frame `t` and returns the window ending there, if one is due.
    pub fn push(&mut self, frame: Arc<[f32]>, gaze: GazePoint) -> Result<Option<WindowScores>> {
        let cfg = self.model.config();
        let f = cfg.frames;
        let t = self.next;
        self.next += 1;
        if self.buffer.len() == f {
            self.buffer.pop_front();
        }
        self.buffer.push_back((frame, gaze));
        if t + 1 < f || (t + 1 - f) % self.stride != 0 {
            return Ok(None);
        }
        let start = t + 1 - f;
        let half = f / 2;
        let points: Vec<GazePoint> = self.buffer.iter().map(|(_, g)| *g).collect();
        let clip = ClipWindow {
            frames: self.buffer.iter().map(|(fr, _)| fr.clone()).collect(),
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
            partial_traj: GazeTrajectory::new(points[..half].to_vec(), start),
            target_traj: Some(GazeTrajectory::new(points[half..].to_vec(), start + half)),
            window_end: t,
        };
        score_window(self.model, &clip).map(Some)
    }
}
