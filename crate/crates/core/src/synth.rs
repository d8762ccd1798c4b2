//! Scripted desk-scale sessions with injected attention mistakes.
//!
//! A workspace is a handful of objects on the unit square, each rendered as a
//! Gaussian presence blob in its own channel. A script is a sequence of
//! object visits. Gaze dwells on each scripted object with small jitter and
//! moves between objects by short linear saccades. A corrupted step keeps its
//! frame budget but replaces the content:
//!
//! - shuffle: the whole step visits a different object;
//! - erratic: rapid jumps between random objects with inflated jitter;
//! - overshoot: a wrong object first, then the scripted one.
//!
//! Frames are labelled 1 exactly when the gaze target deviates from the
//! script; saccade frames take the label of the fixation they lead into.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{cell_center, GazePoint, GazeTrajectory};
use crate::pipeline::SessionRecord;
use crate::seed::derive_rng;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("script step {step} refers to object {object}, workspace has {count}")]
    UnknownObject { step: usize, object: usize, count: usize },
    #[error("invalid generator setting: {0}")]
    Config(String),
    #[error(
        "benchmark is not separable: mean gaze displacement {mistake:.4} on mistake frames \
         vs {correct:.4} on correct frames"
    )]
    Unseparable { mistake: f64, correct: f64 },
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const ACTION_TYPES: [&str; 4] = ["pick", "place", "operate", "inspect"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceObject {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub objects: Vec<WorkspaceObject>,
    pub height: usize,
    pub width: usize,
}

impl Workspace {
    /// Objects placed uniformly in [0.12, 0.88]² with a minimum spacing.
    pub fn random(objects: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if objects < 2 {
            return Err(SynthError::Config("a workspace needs at least 2 objects".into()));
        }
        let mut spacing = 0.3;
        let mut placed: Vec<WorkspaceObject> = Vec::with_capacity(objects);
        let mut attempts = 0;
        while placed.len() < objects {
            attempts += 1;
            if attempts % 200 == 0 {
                spacing *= 0.9;
            }
            let x = rng.random_range(0.12..0.88);
            let y = rng.random_range(0.12..0.88);
            if placed.iter().all(|o| ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt() >= spacing) {
                let radius = rng.random_range(0.06..0.1);
                placed.push(WorkspaceObject {
                    id: placed.len(),
                    x,
                    y,
                    radius,
                });
            }
        }
        Ok(Self {
            objects: placed,
            height,
            width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(SynthError::Config("a workspace needs at least 2 objects".into()));
        }
        for o in &self.objects {
            if !(0.0..=1.0).contains(&o.x) || !(0.0..=1.0).contains(&o.y) || !(o.radius > 0.0) {
                return Err(SynthError::Config(format!("object {} is out of range", o.id)));
            }
        }
        if self.height < 2 || self.width < 2 {
            return Err(SynthError::Config("grid must be at least 2x2".into()));
        }
        Ok(())
    }

    /// One presence channel per object, sampled at cell centres.
    pub fn render(&self) -> Arc<[f32]> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.objects.len() * h * w);
        for o in &self.objects {
            for r in 0..h {
                let y = cell_center(r, h);
                for c in 0..w {
                    let x = cell_center(c, w);
                    let d2 = (x - o.x).powi(2) + (y - o.y).powi(2);
                    out.push((-d2 / (2.0 * o.radius * o.radius)).exp() as f32);
                }
            }
        }
        out.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScript {
    pub name: String,
    pub steps: Vec<usize>,
    /// Inclusive range of fixation frames per step.
    pub dwell: (usize, usize),
    /// Inclusive range of saccade frames between fixations.
    pub saccade: (usize, usize),
    pub gaze_sigma: f64,
}

impl ActionScript {
    pub fn validate(&self, ws: &Workspace) -> Result<()> {
        if self.steps.is_empty() {
            return Err(SynthError::Config(format!("script `{}` has no steps", self.name)));
        }
        if self.dwell.0 == 0 || self.dwell.0 > self.dwell.1 || self.saccade.0 == 0 || self.saccade.0 > self.saccade.1 {
            return Err(SynthError::Config(format!("script `{}` has an empty duration range", self.name)));
        }
        if !(self.gaze_sigma >= 0.0) {
            return Err(SynthError::Config("gaze sigma must be nonnegative".into()));
        }
        for (step, &object) in self.steps.iter().enumerate() {
            if object >= ws.objects.len() {
                return Err(SynthError::UnknownObject {
                    step,
                    object,
                    count: ws.objects.len(),
                });
            }
        }
        Ok(())
    }
}

/// `count` scripts of 3 to 6 steps over `objects` objects, never revisiting
/// the same object twice in a row.
pub fn standard_scripts(
    objects: usize,
    count: usize,
    dwell: (usize, usize),
    saccade: (usize, usize),
    gaze_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ActionScript> {
    (0..count)
        .map(|i| {
            let len = rng.random_range(3..=6);
            let mut steps: Vec<usize> = Vec::with_capacity(len);
            while steps.len() < len {
                let o = rng.random_range(0..objects);
                if steps.last() != Some(&o) {
                    steps.push(o);
                }
            }
            ActionScript {
                name: format!("script-{i}"),
                steps,
                dwell,
                saccade,
                gaze_sigma,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Shuffle,
    Erratic,
    Overshoot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistakeSpec {
    /// Probability that a step is corrupted.
    pub rate: f64,
    /// Relative frequency of each corruption kind.
    pub kinds: Vec<(CorruptionKind, f64)>,
    /// Jitter multiplier during erratic spans.
    pub erratic_jitter: f64,
    /// Inclusive range of frames per erratic fixation.
    pub erratic_hold: (usize, usize),
}

impl Default for MistakeSpec {
    fn default() -> Self {
        Self {
            rate: 0.0,
            kinds: vec![
                (CorruptionKind::Erratic, 0.5),
                (CorruptionKind::Overshoot, 0.25),
                (CorruptionKind::Shuffle, 0.25),
            ],
            erratic_jitter: 3.0,
            erratic_hold: (1, 3),
        }
    }
}

impl MistakeSpec {
    pub fn with_rate(rate: f64) -> Self {
        Self {
            rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(SynthError::Config(format!("mistake rate {} outside [0, 1]", self.rate)));
        }
        if self.kinds.is_empty() || self.kinds.iter().any(|k| !(k.1 >= 0.0)) || self.kinds.iter().all(|k| k.1 == 0.0) {
            return Err(SynthError::Config("corruption weights must be nonnegative, not all zero".into()));
        }
        if self.erratic_hold.0 == 0 || self.erratic_hold.0 > self.erratic_hold.1 {
            return Err(SynthError::Config("empty erratic hold range".into()));
        }
        Ok(())
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> CorruptionKind {
        let total: f64 = self.kinds.iter().map(|k| k.1).sum();
        let mut u = rng.random::<f64>() * total;
        for &(kind, w) in &self.kinds {
            if u < w {
                return kind;
            }
            u -= w;
        }
        self.kinds.iter().rev().find(|k| k.1 > 0.0).expect("validated").0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Saccade,
    Fixation,
    Erratic,
}

/// What the generator intended for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub step: usize,
    pub scripted: usize,
    pub target: usize,
    pub phase: Phase,
    pub corruption: Option<CorruptionKind>,
}

impl FrameEvent {
    pub fn deviates(&self) -> bool {
        self.phase == Phase::Erratic || self.target != self.scripted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSession {
    pub record: SessionRecord,
    pub events: Vec<FrameEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub length: usize,
    /// Probability of a frame losing its gaze sample.
    pub dropout: f64,
}

struct GazeWriter<'a> {
    ws: &'a Workspace,
    rng: &'a mut ChaCha8Rng,
    sigma: f64,
    pos: (f64, f64),
    points: Vec<GazePoint>,
    events: Vec<FrameEvent>,
    budget: usize,
}

impl GazeWriter<'_> {
    fn full(&self) -> bool {
        self.points.len() >= self.budget
    }

    fn emit(&mut self, x: f64, y: f64, event: FrameEvent) {
        if self.full() {
            return;
        }
        self.pos = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
        self.points.push(GazePoint::new(self.pos.0, self.pos.1));
        self.events.push(event);
    }

    fn jittered(&mut self, object: usize, scale: f64) -> (f64, f64) {
        let o = self.ws.objects[object];
        let s = self.sigma * scale;
        if s == 0.0 {
            return (o.x, o.y);
        }
        let n = Normal::new(0.0, s).expect("positive sigma");
        (o.x + n.sample(self.rng), o.y + n.sample(self.rng))
    }

    /// Linear move to `object` over `frames` frames, the last frame landing on
    /// the (jittered) target.
    fn saccade(&mut self, object: usize, frames: usize, event: FrameEvent) {
        let (x0, y0) = self.pos;
        let (x1, y1) = self.jittered(object, 1.0);
        for k in 1..=frames {
            let a = k as f64 / (frames + 1) as f64;
            self.emit(x0 + a * (x1 - x0), y0 + a * (y1 - y0), FrameEvent { phase: Phase::Saccade, ..event });
        }
    }

    fn fixate(&mut self, object: usize, frames: usize, scale: f64, event: FrameEvent) {
        for _ in 0..frames {
            let (x, y) = self.jittered(object, scale);
            self.emit(x, y, event);
        }
    }
}

/// Generates one session. The workspace layout is constant over time, so all
/// frames share one feature grid.
pub fn generate_session(
    ws: &Workspace,
    script: &ActionScript,
    mistakes: &MistakeSpec,
    params: SessionParams,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedSession> {
    ws.validate()?;
    script.validate(ws)?;
    mistakes.validate()?;
    if !(0.0..=1.0).contains(&params.dropout) {
        return Err(SynthError::Config(format!("dropout {} outside [0, 1]", params.dropout)));
    }
    let n_obj = ws.objects.len();
    let first = script.steps[0];
    let start = ws.objects[first];
    let mut w = GazeWriter {
        ws,
        rng,
        sigma: script.gaze_sigma,
        pos: (start.x, start.y),
        points: Vec::with_capacity(params.length),
        events: Vec::with_capacity(params.length),
        budget: params.length,
    };
    let mut step = 0usize;
    let mut current = first;
    while !w.full() {
        let scripted = script.steps[step % script.steps.len()];
        let saccade = if step == 0 { 0 } else { w.rng.random_range(script.saccade.0..=script.saccade.1) };
        let dwell = w.rng.random_range(script.dwell.0..=script.dwell.1);
        let budget = saccade + dwell;
        let corruption = (step > 0 && w.rng.random::<f64>() < mistakes.rate).then(|| mistakes.pick(w.rng));
        let base = FrameEvent {
            step,
            scripted,
            target: scripted,
            phase: Phase::Fixation,
            corruption,
        };
        let other = |rng: &mut ChaCha8Rng, avoid: &[usize]| -> usize {
            let choices: Vec<usize> = (0..n_obj).filter(|o| !avoid.contains(o)).collect();
            *choices.choose(rng).unwrap_or(&scripted)
        };
        match corruption {
            None => {
                w.saccade(scripted, saccade, base);
                w.fixate(scripted, dwell, 1.0, base);
                current = scripted;
            }
            Some(CorruptionKind::Shuffle) => {
                let wrong = other(w.rng, &[scripted, current]);
                let ev = FrameEvent { target: wrong, ..base };
                w.saccade(wrong, saccade, ev);
                w.fixate(wrong, dwell, 1.0, ev);
                current = wrong;
            }
            Some(CorruptionKind::Overshoot) => {
                let wrong = other(w.rng, &[scripted, current]);
                let ev = FrameEvent { target: wrong, ..base };
                let wrong_dwell = (dwell / 2).max(1);
                let back = script.saccade.0.min(budget - saccade - wrong_dwell);
                w.saccade(wrong, saccade, ev);
                w.fixate(wrong, wrong_dwell, 1.0, ev);
                w.saccade(scripted, back, base);
                w.fixate(scripted, dwell - wrong_dwell - back, 1.0, base);
                current = scripted;
            }
            Some(CorruptionKind::Erratic) => {
                let mut left = budget;
                let mut at = current;
                while left > 0 {
                    let hold = w
                        .rng
                        .random_range(mistakes.erratic_hold.0..=mistakes.erratic_hold.1)
                        .min(left);
                    at = other(w.rng, &[at]);
                    let ev = FrameEvent {
                        target: at,
                        phase: Phase::Erratic,
                        ..base
                    };
                    w.fixate(at, hold, mistakes.erratic_jitter, ev);
                    left -= hold;
                }
                current = at;
            }
        }
        step += 1;
    }
    let GazeWriter { mut points, events, rng, .. } = w;
    if params.dropout > 0.0 {
        for p in points.iter_mut() {
            if rng.random::<f64>() < params.dropout {
                *p = GazePoint::missing();
            }
        }
    }
    let labels = events.iter().map(FrameEvent::deviates).collect();
    let grid = ws.render();
    let record = SessionRecord {
        session_id: String::new(),
        height: ws.height,
        width: ws.width,
        channels: n_obj,
        frames: vec![grid; params.length],
        gaze: GazeTrajectory::new(points, 0),
        labels,
        metadata: BTreeMap::new(),
    };
    Ok(GeneratedSession { record, events })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// Training sessions contain no mistakes.
    #[default]
    OneClass,
    /// Every split has the same mistake rate.
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub sessions: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub session_length: usize,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub scripts: usize,
    pub mode: SupervisionMode,
    pub mistake_rate: f64,
    /// Per-session rate is scaled by a factor in [1-e, 1+e] that grows with
    /// the session's difficulty rating.
    pub difficulty_effect: f64,
    pub dropout: f64,
    pub dwell: (usize, usize),
    pub saccade: (usize, usize),
    pub gaze_sigma: f64,
    pub mistakes: MistakeSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sessions: 100,
            split: [0.6, 0.15, 0.25],
            session_length: 150,
            height: 8,
            width: 8,
            objects: 5,
            scripts: 8,
            mode: SupervisionMode::OneClass,
            mistake_rate: 0.28,
            difficulty_effect: 0.4,
            dropout: 0.0,
            dwell: (8, 20),
            saccade: (2, 4),
            gaze_sigma: 0.012,
            mistakes: MistakeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub session_id: String,
    pub split: Split,
    pub index: usize,
    pub script: usize,
    pub action_type: String,
    pub difficulty: f64,
    pub confidence: u8,
    pub mistake_rate: f64,
    pub label_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: BenchmarkConfig,
    pub scripts: Vec<ActionScript>,
    pub sessions: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Vec<SessionRecord>,
    pub val: Vec<SessionRecord>,
    pub test: Vec<SessionRecord>,
    pub manifest: Manifest,
}

impl Benchmark {
    pub fn split(&self, s: Split) -> &[SessionRecord] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn split_sizes(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let sum: f64 = fractions.iter().sum();
    let train = (total as f64 * fractions[0] / sum).round() as usize;
    let val = ((total as f64 * fractions[1] / sum).round() as usize).min(total - train);
    [train, val, total - train - val]
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sessions == 0 || self.session_length == 0 {
            return Err(SynthError::Config("need at least one session of nonzero length".into()));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || self.split.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::Config("split fractions must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty_effect) {
            return Err(SynthError::Config("difficulty effect outside [0, 1]".into()));
        }
        if self.scripts == 0 {
            return Err(SynthError::Config("need at least one script".into()));
        }
        if self.objects < 2 {
            return Err(SynthError::Config("a workspace needs at least 2 objects".into()));
        }
        MistakeSpec {
            rate: self.mistake_rate,
            ..self.mistakes.clone()
        }
        .validate()
    }

    fn rate_for(&self, split: Split) -> f64 {
        match (self.mode, split) {
            (SupervisionMode::OneClass, Split::Train) => 0.0,
            _ => self.mistake_rate,
        }
    }
}

fn session_in_split(
    config: &BenchmarkConfig,
    scripts: &[ActionScript],
    split: Split,
    index: usize,
) -> Result<(GeneratedSession, ManifestEntry)> {
    let mut rng = derive_rng(config.seed, &format!("session/{}", split.name()), index as u64);
    let ws = Workspace::random(config.objects, config.height, config.width, &mut rng)?;
    let script_index = rng.random_range(0..scripts.len());
    let difficulty: f64 = rng.random_range(1.0..5.0);
    let confidence: u8 = rng.random_range(1..=5);
    let factor = 1.0 + config.difficulty_effect * (difficulty - 3.0) / 2.0;
    let rate = (config.rate_for(split) * factor).clamp(0.0, 1.0);
    let mistakes = MistakeSpec {
        rate,
        ..config.mistakes.clone()
    };
    let params = SessionParams {
        length: config.session_length,
        dropout: config.dropout,
    };
    let mut generated = generate_session(&ws, &scripts[script_index], &mistakes, params, &mut rng)?;
    let id = format!("{}-{index:04}", split.name());
    let action_type = ACTION_TYPES[script_index % ACTION_TYPES.len()].to_string();
    let record = &mut generated.record;
    record.session_id = id.clone();
    let meta = &mut record.metadata;
    meta.insert("activity".into(), scripts[script_index].name.clone());
    meta.insert("action_type".into(), action_type.clone());
    meta.insert("difficulty".into(), format!("{difficulty:.4}"));
    meta.insert("confidence".into(), confidence.to_string());
    meta.insert("split".into(), split.name().into());
    let entry = ManifestEntry {
        session_id: id,
        split,
        index,
        script: script_index,
        action_type,
        difficulty,
        confidence,
        mistake_rate: rate,
        label_density: record.mistake_fraction(),
    };
    Ok((generated, entry))
}

/// Mean frame-to-frame gaze displacement on (mistake, correct) frames.
pub fn displacement_by_label(sessions: &[SessionRecord]) -> (f64, f64) {
    let (mut sum, mut count) = ([0.0; 2], [0usize; 2]);
    for s in sessions {
        for t in 1..s.len() {
            let (a, b) = (s.gaze.points[t - 1], s.gaze.points[t]);
            if a.valid && b.valid {
                let k = usize::from(!s.labels[t]);
                sum[k] += a.distance(&b);
                count[k] += 1;
            }
        }
    }
    let mean = |k: usize| if count[k] == 0 { 0.0 } else { sum[k] / count[k] as f64 };
    (mean(0), mean(1))
}

/// Generates all three splits. Every session draws from its own seed, so
/// the result does not depend on generation order or session count changes
/// elsewhere.
pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    config.validate()?;
    let mut script_rng = derive_rng(config.seed, "scripts", 0);
    let scripts = standard_scripts(
        config.objects,
        config.scripts,
        config.dwell,
        config.saccade,
        config.gaze_sigma,
        &mut script_rng,
    );
    let sizes = split_sizes(config.sessions, config.split);
    let mut out: [Vec<SessionRecord>; 3] = Default::default();
    let mut entries = Vec::with_capacity(config.sessions);
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let generated: Vec<(GeneratedSession, ManifestEntry)> = (0..sizes[k])
            .into_par_iter()
            .map(|i| session_in_split(config, &scripts, split, i))
            .collect::<Result<_>>()?;
        for (g, e) in generated {
            out[k].push(g.record);
            entries.push(e);
        }
    }
    let all: Vec<SessionRecord> = out.iter().flatten().cloned().collect();
    if all.iter().any(|s| s.labels.iter().any(|&l| l)) {
        let (mistake, correct) = displacement_by_label(&all);
        if !(mistake > correct) {
            return Err(SynthError::Unseparable { mistake, correct });
        }
    }
    let [train, val, test] = out;
    Ok(Benchmark {
        train,
        val,
        test,
        manifest: Manifest {
            config: config.clone(),
            scripts,
            sessions: entries,
        },
    })
}

/// Regenerates a benchmark from its manifest.
pub fn replay(manifest: &Manifest) -> Result<Benchmark> {
    generate_benchmark(&manifest.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (Workspace, ActionScript) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws = Workspace::random(5, 8, 8, &mut rng).unwrap();
        let script = ActionScript {
            name: "t".into(),
            steps: vec![0, 1, 0, 2],
            dwell: (6, 10),
            saccade: (2, 4),
            gaze_sigma: 0.01,
        };
        (ws, script)
    }

    fn params(length: usize) -> SessionParams {
        SessionParams { length, dropout: 0.0 }
    }

    #[test]
    fn clean_sessions_have_no_labels() {
        let (ws, script) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = generate_session(&ws, &script, &MistakeSpec::with_rate(0.0), params(200), &mut rng).unwrap();
        assert_eq!(g.record.len(), 200);
        assert!(g.record.labels.iter().all(|&l| !l));
        assert!(g.events.iter().all(|e| e.corruption.is_none()));
    }

    #[test]
    fn full_rate_corrupts_every_step_after_the_first() {
        let (ws, script) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = generate_session(&ws, &script, &MistakeSpec::with_rate(1.0), params(300), &mut rng).unwrap();
        assert!(g.events.iter().all(|e| (e.step == 0) == e.corruption.is_none()));
        let labelled = g.record.labels.iter().filter(|&&l| l).count();
        let deviating = g.events.iter().filter(|e| e.deviates()).count();
        assert_eq!(labelled, deviating);
    }

    #[test]
    fn unknown_object_is_rejected() {
        let (ws, mut script) = setup();
        script.steps.push(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = generate_session(&ws, &script, &MistakeSpec::default(), params(10), &mut rng).unwrap_err();
        assert_eq!(err, SynthError::UnknownObject { step: 4, object: 9, count: 5 });
    }

    #[test]
    fn render_peaks_at_object_cells() {
        let (ws, _) = setup();
        let grid = ws.render();
        for (k, o) in ws.objects.iter().enumerate() {
            let ch = &grid[k * 64..(k + 1) * 64];
            let peak = ch
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let p = GazePoint::new(o.x, o.y);
            let (r, c) = p.cell(8, 8);
            assert_eq!(peak, r * 8 + c);
        }
    }

    #[test]
    fn dropout_marks_points_invalid() {
        let (ws, script) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SessionParams { length: 400, dropout: 0.5 };
        let g = generate_session(&ws, &script, &MistakeSpec::default(), p, &mut rng).unwrap();
        let missing = g.record.gaze.points.iter().filter(|p| !p.valid).count();
        assert!((150..250).contains(&missing), "{missing}");
    }

    #[test]
    fn split_sizes_sum() {
        assert_eq!(split_sizes(100, [0.6, 0.15, 0.25]), [60, 15, 25]);
        assert_eq!(split_sizes(7, [0.6, 0.15, 0.25]), [4, 1, 2]);
    }
}
