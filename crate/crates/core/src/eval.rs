//! Detection metrics and association statistics.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CompletionModel, FusionMode};
use crate::pipeline::{detect_windows, label_stream, stream_from_windows, DetectConfig, LabeledScore, PipelineError, WindowScores};
use crate::pipeline::SessionRecord;
use crate::scoring::ScoreFunction;
use crate::seed::derive_rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("no scored samples")]
    Empty,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn class_counts(pairs: &[(f64, bool)]) -> (usize, usize) {
    let pos = pairs.iter().filter(|p| p.1).count();
    (pos, pairs.len() - pos)
}

/// Indices sorted by descending score.
fn descending(pairs: &[(f64, bool)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| pairs[b].0.total_cmp(&pairs[a].0));
    idx
}

/// ROC points from the strictest to the loosest threshold, one per group of
/// tied scores, starting at (0, 0).
pub fn roc_curve(pairs: &[(f64, bool)]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(pairs);
    if pos == 0 || neg == 0 {
        return Err(EvalError::Undefined(format!(
            "ROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let order = descending(pairs);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = pairs[order[i]].0;
        while i < order.len() && pairs[order[i]].0 == s {
            if pairs[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve; tied scores form one diagonal
/// segment, which counts each tied pair as one half.
pub fn roc_auc(pairs: &[(f64, bool)]) -> Result<f64> {
    let pts = roc_curve(pairs)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub best_f1: f64,
    pub precision_at_best_f1: f64,
    pub recall_at_best_f1: f64,
    pub best_threshold: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    /// F1 against threshold, thresholds ascending.
    pub curve: Vec<SweepPoint>,
}

fn f1_of(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Evaluates the rule `score > θ` at θ just below the minimum and at every
/// distinct score.
pub fn threshold_sweep(pairs: &[(f64, bool)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let (pos, neg) = class_counts(pairs);
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = Vec::new();
    let push = |curve: &mut Vec<SweepPoint>, threshold: f64, tp: usize, fp: usize| {
        let (precision, recall, f1) = f1_of(tp, fp, pos - tp);
        curve.push(SweepPoint {
            threshold,
            precision,
            recall,
            f1,
        });
    };
    // everything above the threshold is predicted positive
    let (mut tp, mut fp) = (pos, neg);
    push(&mut curve, sorted[0].0.next_down(), tp, fp);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        push(&mut curve, s, tp, fp);
    }
    let best = curve
        .iter()
        .copied()
        .reduce(|b, p| {
            let better = p.f1 > b.f1 || (p.f1 == b.f1 && p.precision > b.precision);
            if better {
                p
            } else {
                b
            }
        })
        .expect("nonempty curve");
    Ok(MetricsReport {
        auc: roc_auc(pairs).ok(),
        best_f1: best.f1,
        precision_at_best_f1: best.precision,
        recall_at_best_f1: best.recall,
        best_threshold: best.threshold,
        n_positive: pos,
        n_negative: neg,
        curve,
    })
}

/// F1 of the rule `score > threshold`.
pub fn f1_at(pairs: &[(f64, bool)], threshold: f64) -> f64 {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for &(s, l) in pairs {
        match (s > threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_of(tp, fp, fn_).2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatRegion {
    pub lo: f64,
    pub hi: f64,
    /// Width of [lo, hi] over the score range.
    pub coverage: f64,
}

/// Widest contiguous threshold interval on which F1 stays at or above
/// `fraction` of the best F1. F1 is constant between consecutive curve
/// thresholds, so a run of points extends to the next threshold.
pub fn flat_region(report: &MetricsReport, fraction: f64) -> Option<FlatRegion> {
    let curve = &report.curve;
    if curve.len() < 2 {
        return None;
    }
    let min = curve[1].threshold;
    let max = curve.last().expect("nonempty").threshold;
    let range = max - min;
    if range <= 0.0 {
        return None;
    }
    let bar = fraction * report.best_f1;
    let mut best: Option<FlatRegion> = None;
    let mut i = 0;
    while i < curve.len() {
        if curve[i].f1 < bar {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < curve.len() && curve[j + 1].f1 >= bar {
            j += 1;
        }
        let lo = curve[i].threshold.max(min);
        let hi = curve.get(j + 1).map_or(max, |p| p.threshold);
        let coverage = (hi - lo) / range;
        if best.is_none_or(|b| coverage > b.coverage) {
            best = Some(FlatRegion { lo, hi, coverage });
        }
        i = j + 1;
    }
    best
}

/// Correlation between a continuous variable and a binary one, using the
/// population standard deviation.
pub fn point_biserial(continuous: &[f64], binary: &[bool]) -> Result<f64> {
    if continuous.len() != binary.len() {
        return Err(EvalError::LengthMismatch(continuous.len(), binary.len()));
    }
    let n = continuous.len() as f64;
    let n1 = binary.iter().filter(|&&b| b).count() as f64;
    let n0 = n - n1;
    if n1 == 0.0 || n0 == 0.0 {
        return Err(EvalError::Undefined("point-biserial needs both classes".into()));
    }
    let mean = continuous.iter().sum::<f64>() / n;
    let sd = (continuous.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(EvalError::Undefined("continuous variable has zero variance".into()));
    }
    let (mut s1, mut s0) = (0.0, 0.0);
    for (&x, &b) in continuous.iter().zip(binary) {
        if b {
            s1 += x;
        } else {
            s0 += x;
        }
    }
    let (m1, m0) = (s1 / n1, s0 / n0);
    Ok((m1 - m0) / sd * (n1 / n * n0 / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != cols) {
            return Err(EvalError::Undefined("ragged contingency table".into()));
        }
        Ok(Self { counts })
    }

    /// Cross-tabulates two category assignments.
    pub fn from_assignments(rows: &[usize], cols: &[usize]) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(EvalError::LengthMismatch(rows.len(), cols.len()));
        }
        let r = rows.iter().max().map_or(0, |m| m + 1);
        let c = cols.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in rows.iter().zip(cols) {
            counts[i][j] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Pearson chi-squared statistic; errors on a zero marginal.
pub fn chi_squared(table: &ContingencyTable) -> Result<f64> {
    let t = &table.counts;
    let n = table.total() as f64;
    if n == 0.0 {
        return Err(EvalError::Undefined("empty contingency table".into()));
    }
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    if rows.iter().chain(&cols).any(|&m| m == 0.0) {
        return Err(EvalError::Undefined("contingency table has a zero marginal".into()));
    }
    let mut chi = 0.0;
    for (i, row) in t.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            chi += (o as f64 - e).powi(2) / e;
        }
    }
    Ok(chi)
}

pub fn cramers_v(table: &ContingencyTable) -> Result<f64> {
    let r = table.counts.len();
    let c = table.counts.first().map_or(0, Vec::len);
    if r.min(c) < 2 {
        return Err(EvalError::Undefined(format!("{r}x{c} table is too small")));
    }
    let chi = chi_squared(table)?;
    let n = table.total() as f64;
    Ok((chi / (n * (r.min(c) - 1) as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatTest {
    pub statistic: f64,
    /// Two-sided permutation p-value, (1 + extreme) / (1 + shuffles).
    pub p_value: f64,
    pub shuffles: usize,
}

pub const MIN_SHUFFLES: usize = 10_000;

fn permutation_p<T: Clone>(
    labels: &[T],
    observed: f64,
    shuffles: usize,
    seed: u64,
    tag: &str,
    stat: impl Fn(&[T]) -> Result<f64>,
) -> Result<StatTest> {
    let shuffles = shuffles.max(MIN_SHUFFLES);
    let mut rng = derive_rng(seed, tag, 0);
    let mut perm = labels.to_vec();
    let mut extreme = 0usize;
    for _ in 0..shuffles {
        perm.shuffle(&mut rng);
        if stat(&perm)?.abs() >= observed.abs() - 1e-12 {
            extreme += 1;
        }
    }
    Ok(StatTest {
        statistic: observed,
        p_value: (1 + extreme) as f64 / (1 + shuffles) as f64,
        shuffles,
    })
}

pub fn point_biserial_test(continuous: &[f64], binary: &[bool], shuffles: usize, seed: u64) -> Result<StatTest> {
    let observed = point_biserial(continuous, binary)?;
    permutation_p(binary, observed, shuffles, seed, "point-biserial", |b| point_biserial(continuous, b))
}

pub fn cramers_v_test(rows: &[usize], cols: &[usize], shuffles: usize, seed: u64) -> Result<StatTest> {
    let observed = cramers_v(&ContingencyTable::from_assignments(rows, cols)?)?;
    permutation_p(cols, observed, shuffles, seed, "cramers-v", |c| {
        cramers_v(&ContingencyTable::from_assignments(rows, c)?)
    })
}

/// Per-window scores of every test session under one model.
#[derive(Debug, Clone)]
pub struct SessionScores {
    pub session: usize,
    pub windows: Vec<WindowScores>,
}

pub fn score_sessions(
    sessions: &[SessionRecord],
    model: &CompletionModel,
    stride: usize,
) -> Result<Vec<SessionScores>> {
    sessions
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SessionScores {
                session: i,
                windows: detect_windows(s, model, stride)?,
            })
        })
        .collect()
}

/// Pooled (score, label) pairs of one function across sessions.
pub fn pooled_pairs(
    sessions: &[SessionRecord],
    scores: &[SessionScores],
    config: &DetectConfig,
) -> Result<Vec<LabeledScore>> {
    let mut out = Vec::new();
    for s in scores {
        let session = &sessions[s.session];
        let stream = stream_from_windows(&session.session_id, &s.windows, config);
        out.extend(label_stream(session, &stream)?);
    }
    Ok(out)
}

pub fn as_pairs(labeled: &[LabeledScore]) -> Vec<(f64, bool)> {
    labeled.iter().map(|l| (l.score, l.label)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// Fusion variant, absent for the random baseline.
    pub fusion: Option<FusionMode>,
    /// Scoring function, absent for the random baseline.
    pub function: Option<ScoreFunction>,
    pub report: MetricsReport,
}

impl AblationCell {
    pub fn label(&self) -> String {
        match (self.fusion, self.function) {
            (Some(f), Some(s)) => format!("{}/{}", f.label(), s.name()),
            _ => "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn get(&self, fusion: FusionMode, function: ScoreFunction) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.fusion == Some(fusion) && c.function == Some(function))
    }

    pub fn random(&self) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.fusion.is_none())
    }
}

/// Uniform random scores on the given labels.
pub fn random_baseline(labels: &[bool], seed: u64) -> Result<MetricsReport> {
    let mut rng = derive_rng(seed, "random-baseline", 0);
    let pairs: Vec<(f64, bool)> = labels.iter().map(|&l| (rng.random::<f64>(), l)).collect();
    threshold_sweep(&pairs)
}

/// One report per (fusion variant, scoring function) on `sessions`, plus a
/// random-score row on the same labels.
pub fn ablation_grid(
    sessions: &[SessionRecord],
    models: &[(FusionMode, &CompletionModel)],
    functions: &[ScoreFunction],
    config: &DetectConfig,
    seed: u64,
) -> Result<AblationGrid> {
    let mut cells = Vec::new();
    let mut labels: Option<Vec<bool>> = None;
    for &(fusion, model) in models {
        let scores = score_sessions(sessions, model, config.stride)?;
        for &function in functions {
            let cfg = DetectConfig {
                function,
                ..config.clone()
            };
            let pairs = as_pairs(&pooled_pairs(sessions, &scores, &cfg)?);
            if labels.is_none() {
                labels = Some(pairs.iter().map(|p| p.1).collect());
            }
            cells.push(AblationCell {
                fusion: Some(fusion),
                function: Some(function),
                report: threshold_sweep(&pairs)?,
            });
        }
    }
    if let Some(labels) = labels {
        cells.push(AblationCell {
            fusion: None,
            function: None,
            report: random_baseline(&labels, seed)?,
        });
    }
    Ok(AblationGrid { cells })
}
