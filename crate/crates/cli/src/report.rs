//! `report`: CSV tables, SVG plots and summary statistics for one model.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use gazemd_core::config::RunConfig;
use gazemd_core::eval::{cramers_v_test, point_biserial_test, roc_curve, StatTest, MIN_SHUFFLES};
use gazemd_core::io::Artifact;
use gazemd_core::pipeline::{LabeledScore, SessionRecord};
use gazemd_core::seed::derive_seed;

use crate::svg::{self, Series};
use crate::{EvalSummary, Outputs};

const BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub fpr: f64,
    pub tpr: f64,
}

/// Fraction of each class falling in [lo, hi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub lo: f64,
    pub hi: f64,
    pub correct: f64,
    pub mistake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTypeRow {
    pub action_type: String,
    pub timesteps: usize,
    pub mistakes: usize,
    /// Fraction of timesteps classified correctly at the best-F1 threshold.
    pub success_rate: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    /// Threshold defining per-timestep success.
    pub threshold: f64,
    /// Point-biserial correlation of session difficulty with success.
    pub difficulty_vs_success: Option<StatTest>,
    /// Cramér's V between action type and success.
    pub action_type_vs_success: Option<StatTest>,
    /// Why a statistic is missing, if one is.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportData {
    pub metrics: EvalSummary,
    pub stats: StatsSummary,
    pub action_types: Vec<ActionTypeRow>,
}

pub(crate) fn histogram(labeled: &[(usize, LabeledScore)]) -> Vec<HistogramRow> {
    let (lo, hi) = labeled
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, l)| (a.min(l.score), b.max(l.score)));
    if !lo.is_finite() {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
    let mut counts = vec![[0usize; 2]; BINS];
    let mut totals = [0usize; 2];
    for (_, l) in labeled {
        let b = (((l.score - lo) / width) as usize).min(BINS - 1);
        counts[b][l.label as usize] += 1;
        totals[l.label as usize] += 1;
    }
    let frac = |c: usize, t: usize| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    counts
        .iter()
        .enumerate()
        .map(|(b, c)| HistogramRow {
            lo: lo + b as f64 * width,
            hi: if b + 1 == BINS { lo + BINS as f64 * width } else { lo + (b + 1) as f64 * width },
            correct: frac(c[0], totals[0]),
            mistake: frac(c[1], totals[1]),
        })
        .collect()
}

pub(crate) fn build(
    run: &RunConfig,
    sessions: &[SessionRecord],
    labeled: &[(usize, LabeledScore)],
    summary: &EvalSummary,
    dir: &Path,
    o: &mut Outputs,
) -> Result<()> {
    let r = &summary.report;
    let title = format!("{} / {}", summary.fusion.label(), summary.function.name());

    o.csv(dir.join("f1_threshold.csv"), &r.curve)?;
    let pts = |f: fn(&gazemd_core::eval::SweepPoint) -> f64| r.curve.iter().map(|p| (p.threshold, f(p))).collect();
    o.bytes(
        dir.join("f1_threshold.svg"),
        svg::line_chart(
            &format!("F1 vs threshold ({title})"),
            "threshold",
            "score",
            &[
                Series { name: "F1", points: pts(|p| p.f1) },
                Series { name: "precision", points: pts(|p| p.precision) },
                Series { name: "recall", points: pts(|p| p.recall) },
            ],
            Some((0.0, 1.0)),
        )
        .into_bytes(),
    );

    let pairs: Vec<(f64, bool)> = labeled.iter().map(|(_, l)| (l.score, l.label)).collect();
    let roc: Vec<RocRow> = match roc_curve(&pairs) {
        Ok(c) => c.into_iter().map(|(fpr, tpr)| RocRow { fpr, tpr }).collect(),
        Err(_) => Vec::new(),
    };
    o.csv(dir.join("roc.csv"), &roc)?;
    o.bytes(
        dir.join("roc.svg"),
        svg::line_chart(
            &format!("ROC ({title}), AUC {}", r.auc.map_or("n/a".into(), |a| format!("{a:.3}"))),
            "false positive rate",
            "true positive rate",
            &[
                Series { name: "model", points: roc.iter().map(|p| (p.fpr, p.tpr)).collect() },
                Series { name: "chance", points: vec![(0.0, 0.0), (1.0, 1.0)] },
            ],
            Some((0.0, 1.0)),
        )
        .into_bytes(),
    );

    let hist = histogram(labeled);
    o.csv(dir.join("score_histogram.csv"), &hist)?;
    let mut edges: Vec<f64> = hist.iter().map(|h| h.lo).collect();
    edges.extend(hist.last().map(|h| h.hi));
    if edges.len() >= 2 {
        o.bytes(
            dir.join("score_histogram.svg"),
            svg::histogram(
                &format!("Score distribution by label ({title})"),
                "score",
                &edges,
                &[
                    ("correct", hist.iter().map(|h| h.correct).collect()),
                    ("mistake", hist.iter().map(|h| h.mistake).collect()),
                ],
            )
            .into_bytes(),
        );
    }

    // Per-timestep success at the best-F1 threshold.
    let success: Vec<bool> = labeled
        .iter()
        .map(|(_, l)| (l.score > r.best_threshold) == l.label)
        .collect();
    let meta = |i: usize, key: &str| sessions[i].metadata.get(key).cloned().unwrap_or_default();
    let mut by_type: BTreeMap<String, (usize, usize, usize, f64)> = BTreeMap::new();
    for ((i, l), &ok) in labeled.iter().zip(&success) {
        let e = by_type.entry(meta(*i, "action_type")).or_default();
        e.0 += 1;
        e.1 += l.label as usize;
        e.2 += ok as usize;
        e.3 += l.score;
    }
    let action_types: Vec<ActionTypeRow> = by_type
        .iter()
        .map(|(k, &(n, m, ok, s))| ActionTypeRow {
            action_type: k.clone(),
            timesteps: n,
            mistakes: m,
            success_rate: ok as f64 / n as f64,
            mean_score: s / n as f64,
        })
        .collect();
    o.csv(dir.join("action_types.csv"), &action_types)?;
    let categories: Vec<String> = action_types.iter().map(|a| a.action_type.clone()).collect();
    o.bytes(
        dir.join("action_types.svg"),
        svg::bar_chart(
            &format!("Success by action type ({title})"),
            "fraction",
            &categories,
            &[
                ("success rate", action_types.iter().map(|a| a.success_rate).collect()),
                (
                    "mistake density",
                    action_types.iter().map(|a| a.mistakes as f64 / a.timesteps as f64).collect(),
                ),
            ],
        )
        .into_bytes(),
    );

    let mut notes = Vec::new();
    let seed = derive_seed(run.seed, "report-stats", 0);
    let difficulty: Vec<f64> = labeled
        .iter()
        .map(|(i, _)| meta(*i, "difficulty").parse().unwrap_or(f64::NAN))
        .collect();
    let difficulty_vs_success = if difficulty.iter().all(|d| d.is_finite()) {
        point_biserial_test(&difficulty, &success, MIN_SHUFFLES, seed)
            .map_err(|e| notes.push(format!("difficulty vs success: {e}")))
            .ok()
    } else {
        notes.push("difficulty vs success: missing difficulty metadata".into());
        None
    };
    let rows: Vec<usize> = labeled
        .iter()
        .map(|(i, _)| categories.iter().position(|c| *c == meta(*i, "action_type")).expect("listed"))
        .collect();
    let cols: Vec<usize> = success.iter().map(|&s| s as usize).collect();
    let action_type_vs_success = cramers_v_test(&rows, &cols, MIN_SHUFFLES, seed)
        .map_err(|e| notes.push(format!("action type vs success: {e}")))
        .ok();
    let data = ReportData {
        metrics: summary.clone(),
        stats: StatsSummary {
            threshold: r.best_threshold,
            difficulty_vs_success,
            action_type_vs_success,
            notes,
        },
        action_types,
    };
    o.json(dir.join("report.json"), &Artifact::new(run.clone(), data))?;
    Ok(())
}
