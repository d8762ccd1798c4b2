#![allow(dead_code)]

pub mod gradcheck;

use std::sync::Arc;

use gazemd_core::model::{ClipWindow, FusionMode, ModelConfig};
use gazemd_core::tensor::Tensor;
use gazemd_core::{GazePoint, GazeTrajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn random_point(rng: &mut ChaCha8Rng) -> GazePoint {
    GazePoint::new(rng.random::<f64>(), rng.random::<f64>())
}

/// F=2, 2×2 grid, one channel, d=4, one layer each.
pub fn minimal_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        frames: 2,
        height: 2,
        width: 2,
        channels: 1,
        embed_dim: 4,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 6,
        sigma: 1.0,
        fusion_mode: mode,
        ..ModelConfig::default()
    }
}

/// F=8, 4×4 grid, two channels.
pub fn small_config(mode: FusionMode) -> ModelConfig {
    ModelConfig {
        frames: 8,
        height: 4,
        width: 4,
        channels: 2,
        embed_dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 16,
        sigma: 1.0,
        fusion_mode: mode,
        ..ModelConfig::default()
    }
}

pub fn random_clip(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ClipWindow {
    let n = cfg.channels * cfg.height * cfg.width;
    let frames = (0..cfg.frames)
        .map(|_| (0..n).map(|_| rng.random::<f32>()).collect::<Vec<f32>>().into())
        .collect();
    let half = cfg.frames / 2;
    let partial = (0..half).map(|_| random_point(rng)).collect();
    let target = (0..cfg.frames - half).map(|_| random_point(rng)).collect();
    ClipWindow {
        frames,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        partial_traj: GazeTrajectory::new(partial, 0),
        target_traj: Some(GazeTrajectory::new(target, half)),
        window_end: cfg.frames - 1,
    }
}

/// Frames shared by every clip of a session-like fixture.
pub fn constant_frames(cfg: &ModelConfig, value: f32) -> Vec<Arc<[f32]>> {
    let n = cfg.channels * cfg.height * cfg.width;
    vec![vec![value; n].into(); cfg.frames]
}

/// Config of the single-clip overfit check.
pub fn overfit_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        ffn_dim: 32,
        ..small_config(FusionMode::Both)
    }
}

pub struct Overfit {
    pub initial: f64,
    pub last: f64,
    /// First step after which the loss was under 10% of the initial value.
    pub crossed: Option<usize>,
    /// Decoded points of the trained model inside the target cells.
    pub hits: usize,
}

/// Trains on one repeated clip for `steps` AdamW steps.
pub fn overfit(steps: usize) -> Overfit {
    use gazemd_core::model::{CompletionModel, Trainer};
    use gazemd_core::optim::AdamWConfig;
    let cfg = overfit_config();
    let clip = random_clip(&cfg, &mut rng(12));
    let model = CompletionModel::new(cfg.clone(), 12).unwrap();
    let initial = model.loss(&clip).unwrap();
    let opt = AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut trainer = Trainer::new(model, opt);
    let mut crossed = None;
    let mut last = initial;
    for step in 1..=steps {
        trainer.step(&[&clip]).unwrap();
        last = trainer.model.loss(&clip).unwrap();
        if crossed.is_none() && last < 0.1 * initial {
            crossed = Some(step);
        }
    }
    let (pred, _) = trainer.model.complete(&clip).unwrap();
    let target = clip.target_traj.as_ref().unwrap();
    let hits = pred
        .points
        .iter()
        .zip(&target.points)
        .filter(|(p, t)| p.cell(cfg.height, cfg.width) == t.cell(cfg.height, cfg.width))
        .count();
    Overfit {
        initial,
        last,
        crossed,
        hits,
    }
}
