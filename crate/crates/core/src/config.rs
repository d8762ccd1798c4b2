//! Run configuration: every tunable of a run in one serialisable value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KlDirection;
use crate::model::{FusionMode, ModelConfig, SupervisedFrames, TrainConfig};
use crate::optim::AdamWConfig;
use crate::pipeline::{DetectConfig, LabelAggregation};
use crate::scoring::ScoreFunction;
use crate::seed::derive_seed;
use crate::synth::{BenchmarkConfig, SupervisionMode};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Step between consecutive training windows.
    pub stride: usize,
    pub max_steps: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            stride: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub fusion_modes: Vec<FusionMode>,
    pub functions: Vec<ScoreFunction>,
    /// Window lengths F for the prediction-length ablation.
    pub prediction_frames: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            fusion_modes: FusionMode::ALL.to_vec(),
            functions: ScoreFunction::ALL.to_vec(),
            prediction_frames: vec![4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub detect: DetectConfig,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl RunConfig {
    /// The default synthetic benchmark run.
    pub fn benchmark() -> Self {
        let benchmark = BenchmarkConfig {
            height: 6,
            width: 6,
            ..BenchmarkConfig::default()
        };
        let model = ModelConfig {
            frames: 8,
            height: benchmark.height,
            width: benchmark.width,
            channels: benchmark.objects,
            embed_dim: 16,
            heads: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 32,
            sigma: 1.0,
            fusion_mode: FusionMode::Both,
            supervised_frames: SupervisedFrames::UnobservedHalf,
            positional_encoding: true,
            kl_direction: KlDirection::PredictedFirst,
        };
        Self {
            seed: 2024,
            benchmark,
            model,
            train: TrainSettings {
                epochs: 2,
                batch_size: 4,
                optimizer: AdamWConfig {
                    lr: 2e-3,
                    ..AdamWConfig::default()
                },
                stride: 1,
                max_steps: None,
            },
            detect: DetectConfig {
                frames: 8,
                stride: 1,
                function: ScoreFunction::Heatmap,
                aggregation: LabelAggregation::LastFrame,
            },
            sweep: SweepSettings::default(),
        }
    }

    /// A few seconds end to end; used by smoke tests.
    pub fn tiny() -> Self {
        let mut c = Self::benchmark();
        c.benchmark.sessions = 12;
        c.benchmark.session_length = 60;
        c.benchmark.split = [0.5, 0.17, 0.33];
        c.benchmark.height = 4;
        c.benchmark.width = 4;
        c.benchmark.objects = 3;
        c.benchmark.scripts = 2;
        c.model.height = 4;
        c.model.width = 4;
        c.model.channels = 3;
        c.model.frames = 4;
        c.model.embed_dim = 8;
        c.model.ffn_dim = 8;
        c.detect.frames = 4;
        c.train.epochs = 1;
        c.train.stride = 4;
        c.sweep.prediction_frames = vec![2, 4];
        c.sweep.fusion_modes = vec![FusionMode::None, FusionMode::Both];
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Inconsistent(m));
        let (b, m) = (&self.benchmark, &self.model);
        if (m.height, m.width, m.channels) != (b.height, b.width, b.objects) {
            return bad(format!(
                "model grid {}x{}x{} does not match benchmark grid {}x{}x{}",
                m.channels, m.height, m.width, b.objects, b.height, b.width
            ));
        }
        if self.detect.frames != m.frames {
            return bad(format!("detect F={} but model F={}", self.detect.frames, m.frames));
        }
        if self.detect.stride == 0 || self.train.stride == 0 {
            return bad("strides must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if let Err(e) = m.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = b.validate() {
            return bad(e.to_string());
        }
        Ok(())
    }

    /// Benchmark settings with the seed fanned out from the root seed.
    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            seed: derive_seed(self.seed, "benchmark", 0),
            ..self.benchmark.clone()
        }
    }

    /// Training settings for one model variant.
    pub fn train_config(&self, variant: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            seed: derive_seed(self.seed, &format!("train/{variant}"), 0),
            max_steps: self.train.max_steps,
        }
    }

    pub fn with_fusion(&self, fusion: FusionMode) -> Self {
        let mut c = self.clone();
        c.model.fusion_mode = fusion;
        c
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        let mut c = self.clone();
        c.model.frames = frames;
        c.detect.frames = frames;
        c
    }

    pub fn with_supervision(&self, mode: SupervisionMode) -> Self {
        let mut c = self.clone();
        c.benchmark.mode = mode;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        RunConfig::benchmark().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::tiny();
        let s = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let mut c = RunConfig::tiny();
        c.model.height = 5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::tiny();
        c.detect.frames = 8;
        assert!(c.validate().is_err());
    }
}
