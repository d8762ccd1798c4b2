//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::gradcheck;
use gazemd_cli::{EvalSummary, ReportData};
use gazemd_core::config::RunConfig;
use gazemd_core::eval::{cramers_v, point_biserial, roc_auc, AblationGrid, ContingencyTable, SweepPoint};
use gazemd_core::heatmap::{cell_center, decode_peak, encode_gaussian};
use gazemd_core::io::Artifact;
use gazemd_core::model::{CompletionModel, FusionMode, SupervisedFrames};
use gazemd_core::scoring::{
    late_fuse, score_dtw, score_entropy, score_euclidean, score_heatmap, ScoreFunction, ScoreRecord,
};
use gazemd_core::{GazePoint, GazeTrajectory, HeatmapStack};
use gazemd_oracles::{auc_paircount, dtw_bruteforce, pearson};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Property criteria
// ---------------------------------------------------------------------------

fn gradients() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(11);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        for kind in 0..gradcheck::KINDS {
            let (name, inputs, build) = gradcheck::case(kind, &mut rng);
            let err = gradcheck::check(&inputs, &*build, &mut rng);
            ensure(err < gradcheck::TOL, || format!("{name}: relative error {err:.3e}"))?;
            worst = worst.max(err);
            cases += 1;
        }
    }
    for (i, mode) in FusionMode::ALL.into_iter().enumerate() {
        for supervised in [SupervisedFrames::UnobservedHalf, SupervisedFrames::All] {
            let err = gradcheck::model_gradient_error(mode, supervised, 100 + i as u64);
            ensure(err < gradcheck::TOL, || format!("model {mode:?}/{supervised:?}: {err:.3e}"))?;
            worst = worst.max(err);
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(cases >= 100, || format!("only {cases} cases"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} cases, worst rel err {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = common::rng(21);
    for i in 0..500 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let b: Vec<(f64, f64)> = (0..m).map(|_| (rng.random(), rng.random())).collect();
        let t = |v: &[(f64, f64)]| GazeTrajectory::new(v.iter().map(|&(x, y)| GazePoint::new(x, y)).collect(), 0);
        let got = score_dtw(&t(&a), &t(&b)).map_err(|e| e.to_string())?.score;
        let oracle = dtw_bruteforce(&a, &b).map_err(|e| e.to_string())?.value;
        ensure(got == oracle, || format!("DTW pair {i}: {got} vs {oracle}"))?;
    }
    let mut sets = 0;
    while sets < 200 {
        let n = rng.random_range(2..120);
        let levels = rng.random_range(2..50);
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random()))
            .collect();
        if !(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1)) {
            continue;
        }
        let (s, l): (Vec<f64>, Vec<bool>) = pairs.iter().copied().unzip();
        let got = roc_auc(&pairs).map_err(|e| e.to_string())?;
        let oracle = auc_paircount(&s, &l).map_err(|e| e.to_string())?.value;
        ensure((got - oracle).abs() < 1e-12, || format!("AUC set {sets}: {got} vs {oracle}"))?;
        sets += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("500 DTW pairs exact, 200 AUC sets within 1e-12, {:.2}s", elapsed.as_secs_f64()))
}

fn codec() -> Check {
    let mut rng = common::rng(31);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let p = GazePoint::new(rng.random(), rng.random());
        let stack = encode_gaussian(&GazeTrajectory::new(vec![p], 0), rng.random_range(0.3..4.0), h, w)
            .map_err(|e| e.to_string())?;
        worst = worst.max(stack.max_normalization_error());
        let q = decode_peak(&stack).points[0];
        let (r, c) = p.cell(h, w);
        ensure((q.x, q.y) == (cell_center(c, w), cell_center(r, h)), || format!("roundtrip of {p:?} gave {q:?}"))?;
    }
    for mode in FusionMode::ALL {
        let cfg = common::small_config(mode);
        let model = CompletionModel::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let q = model.forward(&common::random_clip(&cfg, &mut rng)).map_err(|e| e.to_string())?;
            worst = worst.max(q.max_normalization_error());
        }
    }
    ensure(worst <= 1e-6, || format!("frame sum off by {worst:.2e}"))?;
    Ok(format!("200 roundtrips exact, worst frame-sum error {worst:.1e}"))
}

fn scoring_fixtures() -> Check {
    let traj = |pts: &[(f64, f64)]| GazeTrajectory::new(pts.iter().map(|&(x, y)| GazePoint::new(x, y)).collect(), 0);
    let gt = traj(&[(0.1, 0.2), (0.4, 0.4), (0.9, 0.1), (0.6, 0.7)]);
    let e = |r: Result<ScoreRecord, _>| r.map_err(|e: gazemd_core::scoring::ScoreError| e.to_string());
    ensure(e(score_euclidean(&gt, &gt))?.score == 0.0, || "identical Euclidean".into())?;
    ensure(e(score_dtw(&gt, &gt))?.score == 0.0, || "identical DTW".into())?;
    let a = traj(&[(0.0, 0.0), (0.0, 0.0)]);
    let b = traj(&[(0.0, 0.0), (0.3, 0.4)]);
    ensure(e(score_euclidean(&a, &b))?.score == 0.5, || "3-4-5 triangle".into())?;

    let mut one_hot = vec![0.0; 4 * 16];
    for (f, p) in gt.points.iter().enumerate() {
        let (r, c) = p.cell(4, 4);
        one_hot[f * 16 + r * 4 + c] = 1.0;
    }
    let one_hot = HeatmapStack::new(4, 4, 4, one_hot).map_err(|e| e.to_string())?;
    let hit = e(score_heatmap(&gt, &one_hot))?;
    ensure(hit.likelihood == Some(4.0) && hit.score == -4.0, || format!("one-hot likelihood {hit:?}"))?;
    let uniform = HeatmapStack::uniform(4, 4, 4);
    let u = e(score_heatmap(&gt, &uniform))?;
    ensure(u.likelihood == Some(0.25) && u.score == -0.25, || format!("uniform likelihood {u:?}"))?;
    for (f, h, w) in [(4, 8, 8), (3, 5, 7)] {
        let g = GazeTrajectory::new(vec![GazePoint::new(0.3, 0.6); f], 0);
        let r = e(score_heatmap(&g, &HeatmapStack::uniform(f, h, w)))?;
        ensure(r.likelihood == Some(f as f64 / (h * w) as f64), || format!("uniform {f}x{h}x{w}"))?;
    }
    ensure(e(score_entropy(&uniform))?.score == 4.0, || "uniform entropy".into())?;
    ensure(e(score_entropy(&one_hot))?.score == 0.0, || "one-hot entropy".into())?;
    let mixed = HeatmapStack::new(1, 2, 2, vec![0.5, 0.5, 0.0, 0.0]).map_err(|e| e.to_string())?;
    ensure(e(score_entropy(&mixed))?.score == 1.0, || "binary entropy".into())?;

    let rec = |t: usize, s: f64| ScoreRecord {
        timestep: t,
        score: s,
        function: ScoreFunction::Dtw,
        frames_used: 1,
        likelihood: None,
    };
    let stream: Vec<ScoreRecord> = [0.3, 0.9, 0.1, 0.5].iter().enumerate().map(|(t, &s)| rec(t, s)).collect();
    let labels = [false, true, false, true];
    let scores = |v: Vec<f64>| -> Vec<(f64, bool)> { v.into_iter().zip(labels).collect() };
    let base: Vec<f64> = stream.iter().map(|r| r.score).collect();
    let fused: Vec<f64> = late_fuse(&stream, &stream).map_err(|e| e.to_string())?.iter().map(|f| f.score).collect();
    let auc = |v: &[f64]| roc_auc(&scores(v.to_vec())).map_err(|e| e.to_string());
    ensure(auc(&fused)? == auc(&base)?, || "self-fusion changed AUC".into())?;
    let constant: Vec<ScoreRecord> = (0..4).map(|t| rec(t, 2.0)).collect();
    let fused: Vec<f64> = late_fuse(&stream, &constant).map_err(|e| e.to_string())?.iter().map(|f| f.score).collect();
    let order = |v: &[f64]| {
        let mut i: Vec<usize> = (0..v.len()).collect();
        i.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        i
    };
    ensure(order(&fused) == order(&base), || "constant stream changed the ranking".into())?;
    Ok("all fixtures exact".into())
}

fn overfit() -> Check {
    let r = common::overfit(200);
    let crossed = r.crossed.ok_or_else(|| format!("loss {:.4} -> {:.4} in 200 steps", r.initial, r.last))?;
    ensure(r.hits >= 3, || format!("{}/4 decoded points in the target cells", r.hits))?;
    Ok(format!(
        "loss {:.3} under 10% at step {crossed}, {:.4} after 200; {}/4 cells hit",
        r.initial, r.last, r.hits
    ))
}

fn statistics() -> Check {
    let mut rng = common::rng(25);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(3..80);
        let binary: Vec<bool> = (0..n).map(|i| i == 0 || (i != 1 && rng.random())).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = binary.iter().map(|&b| f64::from(u8::from(b))).collect();
        let r = point_biserial(&x, &binary).map_err(|e| e.to_string())?;
        worst = worst.max((r - pearson(&x, &y)).abs());
    }
    ensure(worst < 1e-12, || format!("point-biserial off Pearson by {worst:.2e}"))?;
    let v = |c: Vec<Vec<u64>>| cramers_v(&ContingencyTable::new(c).map_err(|e| e.to_string())?).map_err(|e| e.to_string());
    ensure(v(vec![vec![10, 0], vec![0, 10]])? == 1.0, || "diagonal table".into())?;
    ensure(v(vec![vec![5, 5], vec![5, 5]])? == 0.0, || "independent table".into())?;
    ensure(v(vec![vec![4, 8], vec![6, 12]])? == 0.0, || "proportional table".into())?;
    Ok(format!("max |r_pb - pearson| {worst:.1e}; fixtures exact"))
}

// ---------------------------------------------------------------------------
// Benchmark criteria, driven through the command-line tool
// ---------------------------------------------------------------------------

fn gazemd(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gazemd"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("gazemd {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_artifact<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Artifact<RunConfig, T>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Outputs of the one-class sweep and the unsupervised run on the default
/// benchmark.
struct Bench {
    one_class: PathBuf,
    unsupervised: PathBuf,
    sweep_time: Duration,
}

fn run_benchmark(root: &Path) -> Result<Bench, String> {
    // Only the two variants the gate compares, at the default window length.
    let mut run = RunConfig::benchmark();
    run.sweep.fusion_modes = vec![FusionMode::None, FusionMode::Both];
    run.sweep.prediction_frames = vec![run.model.frames];
    let config = root.join("run.json");
    std::fs::write(&config, serde_json::to_vec_pretty(&run).expect("serialisable")).map_err(|e| e.to_string())?;

    let one_class = root.join("one-class");
    let start = Instant::now();
    gazemd(&["--config", s(&config), "--out", s(&one_class), "generate"])?;
    gazemd(&["--config", s(&config), "--out", s(&one_class), "sweep"])?;
    let sweep_time = start.elapsed();

    let unsupervised = root.join("unsupervised");
    let common = ["--config", s(&config), "--supervision", "unsupervised", "--out", s(&unsupervised)];
    gazemd(&[&common[..], &["generate"]].concat())?;
    gazemd(&[&common[..], &["train"]].concat())?;
    let test_data = one_class.join("benchmark");
    gazemd(&[&common[..], &["eval", "--data", s(&test_data)]].concat())?;

    let ckpt = one_class.join("models").join("ch+corr.ckpt");
    gazemd(&["--config", s(&config), "--out", s(&one_class), "report", "--checkpoint", s(&ckpt)])?;
    Ok(Bench {
        one_class,
        unsupervised,
        sweep_time,
    })
}

fn detection_gate(b: &Bench) -> Check {
    let grid: AblationGrid = read_artifact(&b.one_class.join("ablation.json"))?.data;
    let auc = |f: FusionMode| {
        grid.get(f, ScoreFunction::Heatmap)
            .and_then(|c| c.report.auc)
            .ok_or_else(|| format!("no {} cell", f.label()))
    };
    let both = auc(FusionMode::Both)?;
    let none = auc(FusionMode::None)?;
    let random = grid.random().and_then(|c| c.report.auc).ok_or("no random cell")?;
    let detail = format!(
        "ch+corr {both:.3}, none {none:.3}, random {random:.3}, generate+sweep {:.0}s",
        b.sweep_time.as_secs_f64()
    );
    ensure(both >= 0.65, || format!("ch+corr AUC below 0.65: {detail}"))?;
    ensure(both - none >= 0.03, || format!("margin over none below 0.03: {detail}"))?;
    ensure((random - 0.5).abs() <= 0.05 && both > random, || format!("random baseline: {detail}"))?;
    ensure(b.sweep_time < Duration::from_secs(15 * 60), || format!("over budget: {detail}"))?;
    Ok(detail)
}

fn supervision_robustness(b: &Bench) -> Check {
    let grid: AblationGrid = read_artifact(&b.one_class.join("ablation.json"))?.data;
    let one_class = grid
        .get(FusionMode::Both, ScoreFunction::Heatmap)
        .and_then(|c| c.report.auc)
        .ok_or("no ch+corr cell")?;
    let unsup: Artifact<RunConfig, EvalSummary> = read_artifact(&b.unsupervised.join("metrics.json"))?;
    let unsup_auc = unsup.data.report.auc.ok_or("unsupervised AUC undefined")?;
    let loss = one_class - unsup_auc;
    let detail = format!("one-class {one_class:.3}, unsupervised {unsup_auc:.3}, loss {loss:+.3}");
    ensure(loss <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn threshold_stability(b: &Bench) -> Check {
    let path = b.one_class.join("report").join("f1_threshold.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| e.to_string())?;
    let curve: Vec<SweepPoint> = reader.deserialize().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(curve.len() >= 3, || "curve too short".into())?;
    // The rule is `score > θ`: F1 holds from one curve threshold up to the
    // next. Sample θ densely over the score range and find the longest run
    // within 10% of the best F1.
    let best = curve.iter().map(|p| p.f1).fold(0.0, f64::max);
    let (lo, hi) = (curve[1].threshold, curve[curve.len() - 1].threshold);
    let n = 200_000;
    let (mut run, mut longest, mut k) = (0usize, 0usize, 0usize);
    for j in 0..=n {
        let theta = lo + (hi - lo) * j as f64 / n as f64;
        while k + 1 < curve.len() && curve[k + 1].threshold <= theta {
            k += 1;
        }
        if curve[k].f1 >= 0.9 * best {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    let coverage = longest as f64 / n as f64;
    let report: Artifact<RunConfig, ReportData> = read_artifact(&b.one_class.join("report").join("report.json"))?;
    let reported = report.data.metrics.flat_region.map_or(0.0, |f| f.coverage);
    let detail = format!("best F1 {best:.3}, flat coverage {coverage:.3} (report says {reported:.3})");
    ensure((coverage - reported).abs() < 1e-3, || format!("disagrees with report: {detail}"))?;
    ensure(coverage >= 0.2, || detail.clone())?;
    Ok(detail)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir").flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn tiny_pipeline(out: &Path, config: Option<&Path>) -> Result<(), String> {
    let mut base = vec!["--out", s(out)];
    match config {
        Some(c) => base.extend(["--config", s(c)]),
        None => base.extend(["--preset", "tiny"]),
    }
    for cmd in [&["generate"][..], &["train"], &["score"], &["eval"], &["report"], &["sweep"]] {
        gazemd(&[&base[..], cmd].concat())?;
    }
    Ok(())
}

fn determinism(root: &Path) -> Check {
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    tiny_pipeline(&a, None)?;
    tiny_pipeline(&b, None)?;
    let (ta, tb) = (tree(&a), tree(&b));
    ensure(ta.keys().eq(tb.keys()), || "different file sets".into())?;
    for (k, v) in &ta {
        ensure(tb[k] == *v, || format!("{} differs between runs", k.display()))?;
    }
    for needed in ["model.ckpt", "scores", "report/report.json", "metrics.json"] {
        ensure(ta.keys().any(|k| k.starts_with(needed)), || format!("missing {needed}"))?;
    }
    // replay from the configuration embedded in an artifact
    tiny_pipeline(&c, Some(&a.join("metrics.json")))?;
    let tc = tree(&c);
    ensure(ta == tc, || "replay from the embedded config differs".into())?;
    Ok(format!("{} files bit-identical across two runs and a replay", ta.len()))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let bench = std::sync::OnceLock::new();
    let bench_result = || bench.get_or_init(|| run_benchmark(root.path()));
    let with_bench = |f: fn(&Bench) -> Check| move || bench_result().as_ref().map_err(Clone::clone).and_then(f);

    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("codec invariants", Box::new(codec)),
        ("scoring fixtures", Box::new(scoring_fixtures)),
        ("overfit sanity", Box::new(overfit)),
        ("end-to-end detection gate", Box::new(with_bench(detection_gate))),
        ("supervision-mode robustness", Box::new(with_bench(supervision_robustness))),
        ("statistics", Box::new(statistics)),
        ("determinism and replay", Box::new(|| determinism(&root.path().join("tiny")))),
        ("threshold-sweep stability", Box::new(with_bench(threshold_stability))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match guarded(check) {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
