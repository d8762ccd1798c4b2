//! The gaze completion network.
//!
//! A window of F feature grids plus the gaze observed on its first F/2 frames
//! goes in; F predicted heatmaps come out. The pipeline is
//!
//! 1. token embedding: one visual token per (frame, row, col) cell via a
//!    per-cell linear map (a 1×1 convolution), and one trajectory token from
//!    the time-averaged first-half heatmaps;
//! 2. channel fusion (optional): first-half heatmaps appended as an extra
//!    input channel, zeros on the second half;
//! 3. a pre-norm transformer encoder over all visual tokens plus the
//!    trajectory token;
//! 4. correlation fusion (optional): every visual token cross-attends to the
//!    trajectory token, result added residually;
//! 5. a cross-attention decoder with one learned query per output cell,
//!    followed by a scalar head and a per-frame softmax.
//!
//! Without correlation fusion the trajectory token is the bias of its
//! projection only, so the sequence length stays F·H·W + 1 while the output
//! ignores the partial trajectory entirely when no fusion is active.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, KlDirection, Var};
use crate::heatmap::{decode_peak, encode_gaussian, CodecError, GazeTrajectory, HeatmapStack};
use crate::optim::{AdamW, AdamWConfig, OptimError, Parameter};
use crate::seed::derive_seed;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("clip does not match the model config: {0}")]
    Dimension(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("parameter `{name}`: {msg}")]
    Parameter { name: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Channel,
    Correlation,
    #[default]
    Both,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::Channel,
        FusionMode::Correlation,
        FusionMode::Both,
    ];

    pub fn channel(self) -> bool {
        matches!(self, FusionMode::Channel | FusionMode::Both)
    }

    pub fn correlation(self) -> bool {
        matches!(self, FusionMode::Correlation | FusionMode::Both)
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Channel => "ch",
            FusionMode::Correlation => "corr",
            FusionMode::Both => "ch+corr",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(FusionMode::None),
            "channel" | "ch" => Ok(FusionMode::Channel),
            "correlation" | "corr" => Ok(FusionMode::Correlation),
            "both" | "ch+corr" => Ok(FusionMode::Both),
            other => Err(format!("unknown fusion mode `{other}`")),
        }
    }
}

/// Which output frames the loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedFrames {
    #[default]
    UnobservedHalf,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Gaussian width of the input heatmaps, in grid cells.
    pub sigma: f64,
    pub fusion_mode: FusionMode,
    pub supervised_frames: SupervisedFrames,
    pub positional_encoding: bool,
    pub kl_direction: KlDirection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 5,
            embed_dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            sigma: 2.0,
            fusion_mode: FusionMode::Both,
            supervised_frames: SupervisedFrames::UnobservedHalf,
            positional_encoding: true,
            kl_direction: KlDirection::PredictedFirst,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.frames < 2 || self.frames % 2 != 0 {
            return fail(format!("frames must be even and at least 2, got {}", self.frames));
        }
        if self.height < 2 || self.width < 2 {
            return fail(format!("grid must be at least 2x2, got {}x{}", self.height, self.width));
        }
        if self.channels == 0 {
            return fail("at least one input channel is required".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim < 2 || self.ffn_dim == 0 {
            return fail("embed_dim and ffn_dim must be positive".into());
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.cells()
    }

    pub fn observed(&self) -> usize {
        self.frames / 2
    }

    fn input_channels(&self) -> usize {
        self.channels + usize::from(self.fusion_mode.channel())
    }
}

/// One sliding window: F feature grids, the observed first half of the gaze
/// and (for training) the second half.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindow {
    /// One C×H×W grid per frame, channel-major.
    pub frames: Vec<Arc<[f32]>>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub partial_traj: GazeTrajectory,
    pub target_traj: Option<GazeTrajectory>,
    /// Absolute index of the window's last frame.
    pub window_end: usize,
}

impl ClipWindow {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let dim = |m: String| Err(ModelError::Dimension(m));
        if self.frames.len() != cfg.frames {
            return dim(format!("{} frames, config expects {}", self.frames.len(), cfg.frames));
        }
        if (self.channels, self.height, self.width) != (cfg.channels, cfg.height, cfg.width) {
            return dim(format!(
                "grid {}x{}x{}, config expects {}x{}x{}",
                self.channels, self.height, self.width, cfg.channels, cfg.height, cfg.width
            ));
        }
        let per_frame = cfg.channels * cfg.cells();
        if let Some(bad) = self.frames.iter().position(|f| f.len() != per_frame) {
            return dim(format!("frame {bad} holds {} values, expected {per_frame}", self.frames[bad].len()));
        }
        if self.partial_traj.len() != cfg.observed() {
            return dim(format!(
                "partial trajectory has {} points, expected {}",
                self.partial_traj.len(),
                cfg.observed()
            ));
        }
        if let Some(t) = &self.target_traj {
            if t.len() != cfg.frames - cfg.observed() {
                return dim(format!("target trajectory has {} points", t.len()));
            }
        }
        Ok(())
    }
}

/// Appends the first-half heatmaps as an extra channel. Input and output are
/// frame-major, channel-major grids; frames past the heatmap stack get a zero
/// channel.
pub fn channel_fuse(
    frames: &[Arc<[f32]>],
    channels: usize,
    heatmaps: &HeatmapStack,
) -> Result<Vec<Vec<f64>>> {
    let cells = heatmaps.height() * heatmaps.width();
    if heatmaps.frames() > frames.len() {
        return Err(ModelError::Dimension(format!(
            "{} heatmaps for {} frames",
            heatmaps.frames(),
            frames.len()
        )));
    }
    frames
        .iter()
        .enumerate()
        .map(|(f, grid)| {
            if grid.len() != channels * cells {
                return Err(ModelError::Dimension(format!(
                    "frame {f} has {} values, heatmap grid implies {}",
                    grid.len(),
                    channels * cells
                )));
            }
            let mut out: Vec<f64> = grid.iter().map(|&v| v as f64).collect();
            if f < heatmaps.frames() {
                out.extend_from_slice(heatmaps.frame(f));
            } else {
                out.extend(std::iter::repeat_n(0.0, cells));
            }
            Ok(out)
        })
        .collect()
}

/// Fixed sinusoidal encodings over (frame, row, col), one row per token.
pub fn positional_table(frames: usize, height: usize, width: usize, dim: usize) -> Tensor {
    let part = (dim / 3) & !1;
    let spans = [(0, part), (part, part), (2 * part, dim - 2 * part)];
    let n = frames * height * width;
    let mut data = vec![0.0; n * dim];
    for f in 0..frames {
        for r in 0..height {
            for c in 0..width {
                let row = &mut data[((f * height + r) * width + c) * dim..][..dim];
                for (&(start, len), pos) in spans.iter().zip([f, r, c]) {
                    for i in 0..len {
                        let freq = 64f64.powf(-((i / 2 * 2) as f64) / len.max(1) as f64);
                        let angle = pos as f64 * freq;
                        row[start + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, dim], data)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct Correlation {
    norm_visual: Norm,
    norm_gaze: Norm,
    attn: Attention,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm_query: Norm,
    norm_memory: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    visual: Linear,
    traj_w: Option<usize>,
    traj_b: usize,
    encoder: Vec<EncoderLayer>,
    correlation: Option<Correlation>,
    queries: usize,
    decoder: Vec<DecoderLayer>,
    head_norm: Norm,
    head: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
            }
        };
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: Option<f64>) -> Linear {
        let std = std.unwrap_or(1.0 / (fan_in as f64).sqrt());
        Linear {
            w: self.add(format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(std)),
            b: self.add(format!("{name}.bias"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.gamma"), &[dim], Init::Ones),
            b: self.add(format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize, out_std: f64) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, None),
            k: self.linear(&format!("{name}.k"), d, d, None),
            v: self.linear(&format!("{name}.v"), d, d, None),
            o: self.linear(&format!("{name}.o"), d, d, Some(out_std)),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize, out_std: f64) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, hidden, None),
            down: self.linear(&format!("{name}.down"), hidden, d, Some(out_std)),
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig, b: &mut Builder) -> Layout {
        let d = cfg.embed_dim;
        let depth = (cfg.encoder_layers + cfg.decoder_layers + 1) as f64;
        let out_std = 1.0 / (d as f64).sqrt() / (2.0 * depth).sqrt();
        let ffn_out_std = 1.0 / (cfg.ffn_dim as f64).sqrt() / (2.0 * depth).sqrt();
        let visual = b.linear("embed.visual", cfg.input_channels(), d, None);
        let (traj_w, traj_b) = if cfg.fusion_mode.correlation() {
            let l = b.linear("embed.trajectory", cfg.cells(), d, Some(1.0));
            (Some(l.w), l.b)
        } else {
            (None, b.add("embed.trajectory.bias".into(), &[d], Init::Zeros))
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|l| EncoderLayer {
                norm_attn: b.norm(&format!("encoder.{l}.norm_attn"), d),
                attn: b.attention(&format!("encoder.{l}.attn"), d, out_std),
                norm_ffn: b.norm(&format!("encoder.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("encoder.{l}.ffn"), d, cfg.ffn_dim, ffn_out_std),
            })
            .collect();
        let correlation = cfg.fusion_mode.correlation().then(|| Correlation {
            norm_visual: b.norm("correlation.norm_visual", d),
            norm_gaze: b.norm("correlation.norm_gaze", d),
            attn: b.attention("correlation.attn", d, out_std),
        });
        let queries = b.add("decoder.queries".into(), &[cfg.tokens(), d], Init::Normal(0.1));
        let decoder = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer {
                norm_query: b.norm(&format!("decoder.{l}.norm_query"), d),
                norm_memory: b.norm(&format!("decoder.{l}.norm_memory"), d),
                attn: b.attention(&format!("decoder.{l}.attn"), d, out_std),
                norm_ffn: b.norm(&format!("decoder.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("decoder.{l}.ffn"), d, cfg.ffn_dim, ffn_out_std),
            })
            .collect();
        let head_norm = b.norm("head.norm", d);
        let head = b.linear("head.out", d, 1, Some(0.02));
        Layout {
            visual,
            traj_w,
            traj_b,
            encoder,
            correlation,
            queries,
            decoder,
            head_norm,
            head,
        }
    }
}

/// Parameters of one forward pass placed on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything the forward pass produced, kept on one graph.
pub struct ForwardTrace {
    pub graph: Graph,
    pub bound: Bound,
    /// F × (H·W) predicted distributions.
    pub qhat: Var,
}

#[derive(Debug, Clone)]
pub struct CompletionModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    layout: Layout,
    positions: Option<Tensor>,
}

impl PartialEq for CompletionModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl CompletionModel {
    /// Seeded initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut builder = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let layout = Layout::build(&config, &mut builder);
        let positions = config
            .positional_encoding
            .then(|| positional_table(config.frames, config.height, config.width, config.embed_dim));
        Ok(Self {
            config,
            params: builder.params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model from stored parameter values, checked against the
    /// names and shapes the config implies.
    pub fn from_parameters(config: ModelConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if values.len() != model.params.len() {
            return Err(ModelError::Parameter {
                name: "*".into(),
                msg: format!("expected {} parameters, got {}", model.params.len(), values.len()),
            });
        }
        for (p, (name, value)) in model.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(ModelError::Parameter {
                    name,
                    msg: format!("expected `{}` with shape {:?}", p.name, p.value.shape()),
                });
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Turns positional encodings on or off without touching parameters.
    pub fn set_positional_encoding(&mut self, enabled: bool) {
        self.config.positional_encoding = enabled;
        let c = &self.config;
        self.positions = enabled.then(|| positional_table(c.frames, c.height, c.width, c.embed_dim));
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, g: &mut Graph, b: &Bound, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, b.var(l.w))?;
        Ok(g.add_row(y, b.var(l.b))?)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, x: Var, n: Norm) -> Result<Var> {
        Ok(g.layer_norm(x, b.var(n.g), b.var(n.b))?)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, x: Var, f: Ffn) -> Result<Var> {
        let h = self.linear(g, b, x, f.up)?;
        let h = g.gelu(h)?;
        self.linear(g, b, h, f.down)
    }

    /// Multi-head attention of `queries` over `context`. Returns the output
    /// and the per-head attention weight matrices.
    fn attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        queries: Var,
        context: Var,
        a: Attention,
    ) -> Result<(Var, Vec<Var>)> {
        let heads = self.config.heads;
        let dh = self.config.embed_dim / heads;
        let q = self.linear(g, b, queries, a.q)?;
        let k = self.linear(g, b, context, a.k)?;
        let v = self.linear(g, b, context, a.v)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.scale(logits, scale)?;
            let w = g.softmax(logits, 1)?;
            weights.push(w);
            outs.push(g.matmul(w, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.linear(g, b, merged, a.o)?, weights))
    }

    /// First-half heatmaps of the clip's partial trajectory.
    pub fn partial_heatmaps(&self, clip: &ClipWindow) -> Result<HeatmapStack> {
        Ok(encode_gaussian(
            &clip.partial_traj,
            self.config.sigma,
            self.config.height,
            self.config.width,
        )?)
    }

    /// Visual tokens (F·H·W × d) and the trajectory token (1 × d).
    pub fn token_embed(
        &self,
        g: &mut Graph,
        b: &Bound,
        clip: &ClipWindow,
        heatmaps: &HeatmapStack,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        clip.check(cfg)?;
        let cells = cfg.cells();
        let cin = cfg.input_channels();
        let grids: Vec<Vec<f64>> = if cfg.fusion_mode.channel() {
            channel_fuse(&clip.frames, cfg.channels, heatmaps)?
        } else {
            clip.frames
                .iter()
                .map(|f| f.iter().map(|&v| v as f64).collect())
                .collect()
        };
        // rows are (frame, cell), columns are channels
        let mut input = vec![0.0; cfg.tokens() * cin];
        for (f, grid) in grids.iter().enumerate() {
            for ch in 0..cin {
                for cell in 0..cells {
                    input[(f * cells + cell) * cin + ch] = grid[ch * cells + cell];
                }
            }
        }
        let x = g.constant(Tensor::new(vec![cfg.tokens(), cin], input)?);
        let mut visual = self.linear(g, b, x, self.layout.visual)?;
        if let Some(pos) = &self.positions {
            let p = g.constant(pos.clone());
            visual = g.add(visual, p)?;
        }
        let traj = match self.layout.traj_w {
            Some(w) => {
                let q = g.constant(Tensor::new(
                    vec![heatmaps.frames(), cells],
                    heatmaps.values().to_vec(),
                )?);
                let pooled = g.mean_rows(q)?;
                let t = g.matmul(pooled, b.var(w))?;
                g.add_row(t, b.var(self.layout.traj_b))?
            }
            None => g.reshape(b.var(self.layout.traj_b), &[1, cfg.embed_dim])?,
        };
        Ok((visual, traj))
    }

    /// Encoder stack over the visual tokens followed by the trajectory token.
    pub fn encode(&self, g: &mut Graph, b: &Bound, visual: Var, traj: Var) -> Result<Var> {
        let mut x = g.concat_rows(&[visual, traj])?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, b, x, layer.norm_attn)?;
            let (a, _) = self.attention(g, b, h, h, layer.attn)?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, x, layer.norm_ffn)?;
            let f = self.ffn(g, b, h, layer.ffn)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Each visual token attends to the single gaze token; the result is
    /// added back to the visual token. Returns the enriched tokens and the
    /// per-head attention weights (visual tokens × 1).
    pub fn correlation_fuse(
        &self,
        g: &mut Graph,
        b: &Bound,
        gaze_token: Var,
        visual: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let Some(c) = self.layout.correlation else {
            return Ok((visual, Vec::new()));
        };
        let qv = self.norm(g, b, visual, c.norm_visual)?;
        let kg = self.norm(g, b, gaze_token, c.norm_gaze)?;
        let (a, weights) = self.attention(g, b, qv, kg, c.attn)?;
        Ok((g.add(visual, a)?, weights))
    }

    /// Decoder plus head: F × (H·W) per-frame distributions.
    pub fn decode(&self, g: &mut Graph, b: &Bound, memory: Var) -> Result<Var> {
        let cfg = &self.config;
        let mut x = b.var(self.layout.queries);
        if let Some(pos) = &self.positions {
            let p = g.constant(pos.clone());
            x = g.add(x, p)?;
        }
        for layer in &self.layout.decoder {
            let h = self.norm(g, b, x, layer.norm_query)?;
            let m = self.norm(g, b, memory, layer.norm_memory)?;
            let (a, _) = self.attention(g, b, h, m, layer.attn)?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, x, layer.norm_ffn)?;
            let f = self.ffn(g, b, h, layer.ffn)?;
            x = g.add(x, f)?;
        }
        let h = self.norm(g, b, x, self.layout.head_norm)?;
        let logits = self.linear(g, b, h, self.layout.head)?;
        let logits = g.reshape(logits, &[cfg.frames, cfg.cells()])?;
        Ok(g.softmax(logits, 1)?)
    }

    /// Builds the whole forward pass on a fresh graph.
    pub fn trace(&self, clip: &ClipWindow, trainable: bool) -> Result<ForwardTrace> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, trainable);
        let qhat = self.trace_on(&mut graph, &bound, clip)?;
        Ok(ForwardTrace { graph, bound, qhat })
    }

    fn trace_on(&self, g: &mut Graph, b: &Bound, clip: &ClipWindow) -> Result<Var> {
        let heatmaps = self.partial_heatmaps(clip)?;
        let (visual, traj) = self.token_embed(g, b, clip, &heatmaps)?;
        let encoded = self.encode(g, b, visual, traj)?;
        let n = self.config.tokens();
        let visual_enc = g.slice_rows(encoded, 0, n)?;
        let traj_enc = g.slice_rows(encoded, n, n + 1)?;
        let (enriched, _) = self.correlation_fuse(g, b, traj_enc, visual_enc)?;
        self.decode(g, b, enriched)
    }

    /// Predicted heatmap stack Q̂ with F frames.
    pub fn forward(&self, clip: &ClipWindow) -> Result<HeatmapStack> {
        let trace = self.trace(clip, false)?;
        let q = trace.graph.value(trace.qhat);
        let cfg = &self.config;
        Ok(HeatmapStack::new(cfg.frames, cfg.height, cfg.width, q.data().to_vec())?)
    }

    /// Predicted trajectory over the unobserved half plus the full Q̂.
    pub fn complete(&self, clip: &ClipWindow) -> Result<(GazeTrajectory, HeatmapStack)> {
        let qhat = self.forward(clip)?;
        let half = self.config.observed();
        let mut traj = decode_peak(&qhat.slice_frames(half, self.config.frames));
        traj.frame_offset = clip.partial_traj.frame_offset + half;
        Ok((traj, qhat))
    }

    /// Target heatmaps and the output frames they supervise. Frames with no
    /// valid gaze are left out.
    fn supervision(&self, clip: &ClipWindow) -> Result<(Vec<usize>, Tensor)> {
        let cfg = &self.config;
        let target = clip
            .target_traj
            .as_ref()
            .ok_or_else(|| ModelError::Dimension("clip has no target trajectory".into()))?;
        let (offset, traj) = match cfg.supervised_frames {
            SupervisedFrames::UnobservedHalf => (cfg.observed(), target.clone()),
            SupervisedFrames::All => {
                let mut points = clip.partial_traj.points.clone();
                points.extend_from_slice(&target.points);
                (0, GazeTrajectory::new(points, clip.partial_traj.frame_offset))
            }
        };
        let stack = encode_gaussian(&traj, cfg.sigma, cfg.height, cfg.width)?;
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for (i, p) in traj.points.iter().enumerate() {
            if p.valid {
                rows.push(offset + i);
                data.extend_from_slice(stack.frame(i));
            }
        }
        let t = Tensor::new(vec![rows.len(), cfg.cells()], data)?;
        Ok((rows, t))
    }

    /// Appends the KL loss for `clip` to a traced forward pass. `None` when
    /// the clip has no valid supervised frame.
    pub fn loss_on(&self, trace: &mut ForwardTrace, clip: &ClipWindow) -> Result<Option<Var>> {
        let (rows, target) = self.supervision(clip)?;
        if rows.is_empty() {
            return Ok(None);
        }
        let g = &mut trace.graph;
        let mut picked = Vec::with_capacity(rows.len());
        let mut i = 0;
        while i < rows.len() {
            let mut j = i + 1;
            while j < rows.len() && rows[j] == rows[j - 1] + 1 {
                j += 1;
            }
            picked.push(g.slice_rows(trace.qhat, rows[i], rows[j - 1] + 1)?);
            i = j;
        }
        let pred = if picked.len() == 1 { picked[0] } else { g.concat_rows(&picked)? };
        Ok(Some(g.kl_div(pred, &target, self.config.kl_direction)?))
    }

    /// KL loss on one clip and its gradient for every parameter, in
    /// declaration order.
    pub fn loss_and_gradients(&self, clip: &ClipWindow) -> Result<(f64, Vec<Tensor>)> {
        let mut trace = self.trace(clip, true)?;
        let Some(loss) = self.loss_on(&mut trace, clip)? else {
            let zeros = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            return Ok((0.0, zeros));
        };
        let value = trace.graph.value(loss).data()[0];
        let mut grads = trace.graph.backward(loss)?;
        let out = trace
            .bound
            .vars()
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        Ok((value, out))
    }

    /// KL loss of one clip without building gradients.
    pub fn loss(&self, clip: &ClipWindow) -> Result<f64> {
        let mut trace = self.trace(clip, false)?;
        Ok(match self.loss_on(&mut trace, clip)? {
            Some(l) => trace.graph.value(l).data()[0],
            None => 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Mean per-clip loss of every epoch.
    pub epochs: Vec<f64>,
    /// Mean per-clip loss of every optimizer step.
    pub steps: Vec<f64>,
}

/// Stateful optimisation loop over mini-batches.
pub struct Trainer {
    pub model: CompletionModel,
    optimizer: AdamW,
}

impl Trainer {
    pub fn new(model: CompletionModel, optimizer: AdamWConfig) -> Self {
        let optimizer = AdamW::new(optimizer, model.params());
        Self { model, optimizer }
    }

    /// One AdamW step on the mean loss of `batch`. Per-clip gradients are
    /// computed in parallel and summed in batch order, so the result does not
    /// depend on the thread count.
    pub fn step(&mut self, batch: &[&ClipWindow]) -> Result<f64> {
        let model = &self.model;
        let results: Vec<(f64, Vec<Tensor>)> = batch
            .par_iter()
            .map(|clip| model.loss_and_gradients(clip))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for p in self.model.params_mut() {
            p.zero_grad();
        }
        for (loss, grads) in &results {
            total += loss;
            for (p, g) in self.model.params_mut().iter_mut().zip(grads) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b * scale;
                }
            }
        }
        self.optimizer.step(self.model.params_mut())?;
        Ok(total * scale)
    }
}

/// Trains a freshly initialised model. Deterministic for a given seed: the
/// initialisation and each epoch's shuffle come from seeds derived from
/// `train.seed`.
pub fn train(
    dataset: &[ClipWindow],
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<(CompletionModel, LossCurve)> {
    train_with_progress(dataset, config, train, |_, _| {})
}

pub fn train_with_progress(
    dataset: &[ClipWindow],
    config: &ModelConfig,
    train: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(CompletionModel, LossCurve)> {
    use rand::seq::SliceRandom;

    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let model = CompletionModel::new(config.clone(), derive_seed(train.seed, "model-init", 0))?;
    let mut trainer = Trainer::new(model, train.optimizer);
    let mut curve = LossCurve::default();
    let batch = train.batch_size.max(1);
    let mut steps = 0usize;
    'epochs: for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(batch) {
            if train.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let clips: Vec<&ClipWindow> = chunk.iter().map(|&i| &dataset[i]).collect();
            let loss = match trainer.step(&clips) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(ModelError::Diverged { epoch })
                }
                Err(ModelError::Optim(OptimError::NonFiniteGradient { .. })) => {
                    return Err(ModelError::Diverged { epoch })
                }
                Err(e) => return Err(e),
            };
            curve.steps.push(loss);
            epoch_total += loss;
            epoch_batches += 1;
            steps += 1;
        }
        if epoch_batches > 0 {
            let mean = epoch_total / epoch_batches as f64;
            curve.epochs.push(mean);
            progress(epoch, mean);
            log::info!("epoch {epoch}: mean loss {mean:.5} over {epoch_batches} steps");
        }
        if train.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    Ok((trainer.model, curve))
}
