//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run.

use super::{minimal_config, random_clip, random_tensor, rng};
use gazemd_core::graph::{Graph, KlDirection, Var};
use gazemd_core::model::{CompletionModel, FusionMode, SupervisedFrames};
use gazemd_core::tensor::Tensor;
use gazemd_oracles::{finite_difference_gradient, max_relative_error};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-4;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Scalar probe: Σ out ⊙ weights, with fixed random weights.
pub fn probe(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w).unwrap();
    g.sum(m).unwrap()
}

pub fn flatten(inputs: &[Tensor]) -> Vec<f64> {
    inputs.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten(like: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec()).unwrap();
            at += n;
            out
        })
        .collect()
}

/// Returns the worst relative error of the analytic gradient.
pub fn check(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        random_tensor(rng, g.value(out).shape(), 1.0)
    };
    let eval = |xs: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let root = probe(&mut g, out, &weights);
        (g, vars, root)
    };
    let (g, vars, root) = eval(inputs);
    let grads = g.backward(root).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| {
            grads
                .get(v)
                .map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec())
        })
        .collect();
    let numeric = finite_difference_gradient(
        |x| {
            let (g, _, root) = eval(&unflatten(inputs, x));
            g.value(root).data()[0]
        },
        &flatten(inputs),
        STEP,
    )
    .unwrap()
    .value;
    max_relative_error(&analytic, &numeric, FLOOR)
}

pub fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

pub fn distribution_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let raw = Tensor::from_fn(&[rows, cols], |_| rng.random_range(0.05..1.0));
    let mut data = raw.into_data();
    for r in data.chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// One randomized case per call: (op name, inputs, graph builder).
pub fn case(kind: usize, rng: &mut ChaCha8Rng) -> (&'static str, Vec<Tensor>, Box<Build>) {
    let (m, k, n) = dims(rng);
    let r = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape, 1.0);
    match kind {
        0 => (
            "matmul",
            vec![r(rng, &[m, k]), r(rng, &[k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        ),
        1 => (
            "matmul_t",
            vec![r(rng, &[m, k]), r(rng, &[n, k])],
            Box::new(|g, v| g.matmul_t(v[0], v[1]).unwrap()),
        ),
        2 => ("add", vec![r(rng, &[m, n]), r(rng, &[m, n])], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        3 => (
            "add_row",
            vec![r(rng, &[m, n]), r(rng, &[1, n])],
            Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
        ),
        4 => ("mul", vec![r(rng, &[m, n]), r(rng, &[m, n])], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        5 => {
            let f = rng.random_range(-2.0..2.0);
            ("scale", vec![r(rng, &[m, n])], Box::new(move |g, v| g.scale(v[0], f).unwrap()))
        }
        6 => ("gelu", vec![random_tensor(rng, &[m, n], 3.0)], Box::new(|g, v| g.gelu(v[0]).unwrap())),
        7 => {
            let axis = rng.random_range(0..2);
            (
                "softmax",
                vec![random_tensor(rng, &[m, n + 1], 3.0)],
                Box::new(move |g, v| g.softmax(v[0], axis).unwrap()),
            )
        }
        8 => (
            "layer_norm",
            vec![random_tensor(rng, &[m, n + 1], 2.0), r(rng, &[n + 1]), r(rng, &[n + 1])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        9 => ("transpose", vec![r(rng, &[m, n])], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        10 => {
            let a = rng.random_range(0..n);
            let b = rng.random_range(a + 1..=n);
            ("slice_cols", vec![r(rng, &[m, n])], Box::new(move |g, v| g.slice_cols(v[0], a, b).unwrap()))
        }
        11 => (
            "concat_cols",
            vec![r(rng, &[m, k]), r(rng, &[m, n])],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        12 => {
            let a = rng.random_range(0..m);
            let b = rng.random_range(a + 1..=m);
            ("slice_rows", vec![r(rng, &[m, n])], Box::new(move |g, v| g.slice_rows(v[0], a, b).unwrap()))
        }
        13 => (
            "concat_rows",
            vec![r(rng, &[k, n]), r(rng, &[m, n])],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        14 => (
            "reshape",
            vec![r(rng, &[m, n])],
            Box::new(move |g, v| g.reshape(v[0], &[n, m]).unwrap()),
        ),
        15 => ("mean_rows", vec![r(rng, &[m, n])], Box::new(|g, v| g.mean_rows(v[0]).unwrap())),
        16 => ("sum", vec![r(rng, &[m, n])], Box::new(|g, v| g.sum(v[0]).unwrap())),
        _ => {
            let direction = if rng.random::<bool>() {
                KlDirection::PredictedFirst
            } else {
                KlDirection::TargetFirst
            };
            let target = distribution_rows(rng, m, n + 1);
            (
                "kl_div",
                vec![random_tensor(rng, &[m, n + 1], 2.0)],
                Box::new(move |g, v| {
                    let p = g.softmax(v[0], 1).unwrap();
                    g.kl_div(p, &target, direction).unwrap()
                }),
            )
        }
    }
}

pub const KINDS: usize = 18;

pub fn model_gradient_error(mode: FusionMode, supervised: SupervisedFrames, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let cfg = gazemd_core::ModelConfig {
        supervised_frames: supervised,
        ..minimal_config(mode)
    };
    let model = CompletionModel::new(cfg.clone(), seed).unwrap();
    let clip = random_clip(&cfg, &mut rng);
    let (_, grads) = model.loss_and_gradients(&clip).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let shapes: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let numeric = finite_difference_gradient(
        |x| {
            let mut m = model.clone();
            for (name, t) in names.iter().zip(unflatten(&shapes, x)) {
                m.param_mut(name).unwrap().value = t;
            }
            m.loss(&clip).unwrap()
        },
        &flatten(&shapes),
        STEP,
    )
    .unwrap()
    .value;
    max_relative_error(&analytic, &numeric, FLOOR)
}
