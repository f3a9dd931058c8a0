//! Temporal-aware vector-quantized frame tokenizer.
//!
//! Per-frame strided convolutions downsample by 8 to a grid of C-dimensional
//! features. A residual self-attention over time (one independent sequence
//! per spatial site) runs before and after quantization. Quantization picks
//! the nearest codebook row; gradients reach the encoder through the
//! straight-through estimator.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::formats::{Checkpoint, MetricsRecord};
use crate::nn::{self, TrainState};
use crate::numerics::{
    adamw_step, AdamWConfig, AttentionGroup, AttentionLayout, Graph, GroupMask, ParamStore, Real, Rng, Tensor, Var,
};
use crate::world::Raster;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Widths of the first two convolution stages; the third emits `code_dim`.
    pub widths: (usize, usize),
    pub code_dim: usize,
    pub codebook_size: usize,
    pub commitment: f64,
    /// Weights of (charbonnier, gradient-difference, quantization) terms.
    pub lambdas: (f64, f64, f64),
    pub charbonnier_eps: f64,
    pub lr: f64,
    pub clip_len: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub batch_frames: usize,
    pub batch_clips: usize,
    /// Codes unused for this many steps are re-seeded from batch features.
    pub dead_code_steps: u64,
    pub log_every: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            channels: 1,
            widths: (32, 64),
            code_dim: 16,
            codebook_size: 256,
            commitment: 0.25,
            lambdas: (3.0, 1.0, 1.0),
            charbonnier_eps: 1e-3,
            lr: 3e-3,
            clip_len: 8,
            stage1_steps: 1500,
            stage2_steps: 500,
            batch_frames: 16,
            batch_clips: 2,
            dead_code_steps: 2000,
            log_every: 50,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "raster {}x{} is not divisible by the downsample factor {DOWNSAMPLE}",
                self.height, self.width
            )));
        }
        if self.codebook_size < 2 || self.code_dim == 0 || self.channels == 0 {
            return Err(Error::Config("codebook needs K >= 2 and C >= 1".into()));
        }
        if self.clip_len == 0 || self.batch_frames == 0 || self.batch_clips == 0 {
            return Err(Error::Config("clip length and batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / DOWNSAMPLE, self.width / DOWNSAMPLE)
    }

    pub fn sites(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// Per-frame token indices on the downsampled grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
}

/// Index of the nearest codebook row (squared distance, lowest index wins
/// ties).
pub fn nearest_code(codebook: &[f32], code_dim: usize, feature: &[f32]) -> usize {
    let mut best = (0usize, f32::INFINITY);
    for (k, e) in codebook.chunks_exact(code_dim).enumerate() {
        let d: f32 = e.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Quantizes each `code_dim`-wide row of `features`.
pub fn quantize_rows(codebook: &[f32], code_dim: usize, features: &[f32]) -> Vec<usize> {
    features.chunks_exact(code_dim).map(|f| nearest_code(codebook, code_dim, f)).collect()
}

fn quantize_rows_generic<F: Real>(codebook: &[F], code_dim: usize, features: &[F]) -> Vec<usize> {
    features
        .chunks_exact(code_dim)
        .map(|f| {
            let mut best = (0usize, F::infinity());
            for (k, e) in codebook.chunks_exact(code_dim).enumerate() {
                let mut d = F::zero();
                for (a, b) in e.iter().zip(f) {
                    d += (*a - *b) * (*a - *b);
                }
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// How the temporal attention layers are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Frames are treated as independent (attention skipped).
    Bypass,
    /// Consecutive runs of `clip_len` frames form clips.
    Clips(usize),
}

/// Graph outputs of a full tokenizer pass.
pub struct ForwardOut {
    pub recon: Var,
    pub tokens: Vec<usize>,
    pub pre_quant: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore<f32>,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, 11);
        let params = Self::init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    fn init_params<F: Real>(c: &TokenizerConfig, rng: &mut Rng) -> ParamStore<F> {
        let mut s = ParamStore::new();
        let kk = KERNEL * KERNEL;
        let chans = [c.channels, c.widths.0, c.widths.1, c.code_dim];
        for i in 0..3 {
            let (cin, cout) = (chans[i], chans[i + 1]);
            s.normal(&format!("enc{i}.w"), &[cout, cin * kk], (2.0 / (cin * kk) as f64).sqrt(), rng);
            s.zeros(&format!("enc{i}.b"), &[cout]);
        }
        for i in 0..3 {
            let (cin, cout) = (chans[3 - i], chans[2 - i]);
            // each output pixel of a stride-2 transpose sees cin * kk / 4 taps
            s.normal(&format!("dec{i}.w"), &[cin, cout * kk], (2.0 / (cin * kk / 4) as f64).sqrt(), rng);
            s.zeros(&format!("dec{i}.b"), &[cout]);
        }
        let d = c.code_dim;
        for pre in ["tpre", "tpost"] {
            for p in ["q", "k", "v"] {
                nn::add_linear(&mut s, rng, &format!("{pre}.{p}"), d, d, 1.0 / (d as f64).sqrt());
            }
            nn::add_linear(&mut s, rng, &format!("{pre}.o"), d, d, 0.0);
        }
        s.normal("codebook", &[c.codebook_size, d], 1.0, rng);
        s
    }

    pub fn codebook(&self) -> &[f32] {
        self.params.by_name("codebook").unwrap().data()
    }

    /// Frames to a `[B, C, H, W]` tensor in [0, 1].
    pub fn frames_tensor<F: Real>(&self, frames: &[Raster]) -> Result<Tensor<F>> {
        let c = &self.config;
        let mut data = Vec::with_capacity(frames.len() * c.height * c.width * c.channels);
        for f in frames {
            if (f.height, f.width, f.channels) != (c.height, c.width, c.channels) {
                return shape_err(format!(
                    "frame is {}x{}x{}, tokenizer expects {}x{}x{}",
                    f.height, f.width, f.channels, c.height, c.width, c.channels
                ));
            }
            data.extend(f.to_unit_planar().into_iter().map(|v| F::from_f64c(v as f64)));
        }
        Tensor::new(vec![frames.len(), c.channels, c.height, c.width], data)
    }

    /// Convolutional encoder: `[B, Cin, H, W]` to feature rows `[B*h*w, C]`
    /// ordered by (frame, site).
    pub fn encoder_graph<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            let w = g.param_by_name(store, &format!("enc{i}.w"));
            let b = g.param_by_name(store, &format!("enc{i}.b"));
            h = g.conv2d(h, w, Some(b), KERNEL, STRIDE, PAD)?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        let bsz = g.shape(h)[0];
        let p = g.permute(h, &[0, 2, 3, 1])?;
        g.reshape(p, &[bsz * self.config.sites(), self.config.code_dim])
    }

    /// Residual temporal self-attention; `rows` is `[B*h*w, C]`.
    pub fn temporal_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        prefix: &str,
        rows: Var,
        mode: TemporalMode,
    ) -> Result<Var> {
        let TemporalMode::Clips(t) = mode else { return Ok(rows) };
        let sites = self.config.sites();
        let n = g.shape(rows)[0];
        let frames = n / sites;
        let layout = Rc::new(temporal_layout(frames, sites, t)?);
        let q = nn::linear(g, store, &format!("{prefix}.q"), rows)?;
        let k = nn::linear(g, store, &format!("{prefix}.k"), rows)?;
        let v = nn::linear(g, store, &format!("{prefix}.v"), rows)?;
        let d = self.config.code_dim;
        let a = g.attention(q, k, v, 1, F::from_f64c(1.0 / (d as f64).sqrt()), layout)?;
        let o = nn::linear(g, store, &format!("{prefix}.o"), a)?;
        g.add(rows, o)
    }

    /// Decoder: feature rows `[B*h*w, C]` to `[B, Cin, H, W]`.
    pub fn decoder_graph<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, rows: Var) -> Result<Var> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let bsz = g.shape(rows)[0] / (gh * gw);
        let r = g.reshape(rows, &[bsz, gh, gw, c.code_dim])?;
        let mut h = g.permute(r, &[0, 3, 1, 2])?;
        let outs = [c.widths.1, c.widths.0, c.channels];
        for (i, &cout) in outs.iter().enumerate() {
            let w = g.param_by_name(store, &format!("dec{i}.w"));
            let b = g.param_by_name(store, &format!("dec{i}.b"));
            h = g.conv_transpose2d(h, w, Some(b), cout, KERNEL, STRIDE, PAD)?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    /// Encode, quantize and decode `x: [B, Cin, H, W]`.
    pub fn forward_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: TemporalMode,
    ) -> Result<ForwardOut> {
        let f = self.encoder_graph(g, store, x)?;
        let h = self.temporal_graph(g, store, "tpre", f, mode)?;
        let cb = g.param_by_name(store, "codebook");
        let tokens = quantize_rows_generic(g.value(cb).data(), self.config.code_dim, g.value(h).data());
        let idx = Rc::new(tokens.clone());
        let e = g.gather(cb, idx)?;
        let zq = g.straight_through(h, g.value(e).clone())?;
        let h_sg = g.detach(h);
        let e_sg = g.detach(e);
        let codebook_loss = nn::mse(g, e, h_sg)?;
        let commitment_loss = nn::mse(g, h, e_sg)?;
        let z = self.temporal_graph(g, store, "tpost", zq, mode)?;
        let recon = self.decoder_graph(g, store, z)?;
        Ok(ForwardOut { recon, tokens, pre_quant: h, codebook_loss, commitment_loss })
    }

    /// Weighted reconstruction + quantization objective.
    pub fn loss_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: TemporalMode,
    ) -> Result<(Var, ForwardOut)> {
        let out = self.forward_graph(g, store, x, mode)?;
        let quant = g.scale(out.commitment_loss, F::from_f64c(self.config.commitment));
        let quant = g.add(out.codebook_loss, quant)?;
        let loss = vqvae_loss(g, out.recon, x, quant, self.config.lambdas, self.config.charbonnier_eps)?;
        Ok((loss, out))
    }

    fn clip_mode(&self, n: usize) -> TemporalMode {
        TemporalMode::Clips(self.config.clip_len.min(n.max(1)))
    }

    /// Per-frame encoder features, each `[h, w, C]`.
    pub fn encode(&self, frames: &[Raster]) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::inference();
        let x = g.constant(self.frames_tensor(frames)?);
        let f = self.encoder_graph(&mut g, &self.params, x)?;
        Ok(split_rows(g.value(f), frames.len(), self.config.grid()))
    }

    /// Pre-quantization temporal attention over `features` taken as clips of
    /// at most `clip_len` frames.
    pub fn temporal_attend(&self, features: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.attend_rows("tpre", features)
    }

    fn attend_rows(&self, prefix: &str, features: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::inference();
        let rows = g.constant(stack_rows(features, self.config.code_dim)?);
        let mode = self.clip_mode(features.len());
        let out = self.temporal_graph(&mut g, &self.params, prefix, rows, mode)?;
        Ok(split_rows(g.value(out), features.len(), self.config.grid()))
    }

    /// Frames to token grids (encoder, temporal attention, nearest code).
    pub fn tokenize(&self, frames: &[Raster]) -> Result<Vec<TokenGrid>> {
        if frames.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::inference();
        let x = g.constant(self.frames_tensor(frames)?);
        let f = self.encoder_graph(&mut g, &self.params, x)?;
        let h = self.temporal_graph(&mut g, &self.params, "tpre", f, self.clip_mode(frames.len()))?;
        let tokens = quantize_rows(self.codebook(), self.config.code_dim, g.value(h).data());
        Ok(self.grids(tokens, frames.len()))
    }

    fn grids(&self, tokens: Vec<usize>, n: usize) -> Vec<TokenGrid> {
        let (h, w) = self.config.grid();
        (0..n).map(|i| TokenGrid { height: h, width: w, tokens: tokens[i * h * w..(i + 1) * h * w].to_vec() }).collect()
    }

    /// Codebook rows for each token, `[B*h*w, C]`.
    pub fn lookup(&self, tokens: &[TokenGrid]) -> Result<Tensor<f32>> {
        let c = &self.config;
        let mut data = Vec::with_capacity(tokens.len() * c.sites() * c.code_dim);
        let cb = self.codebook();
        for grid in tokens {
            if grid.tokens.len() != c.sites() {
                return shape_err(format!("token grid has {} entries, expected {}", grid.tokens.len(), c.sites()));
            }
            for &t in &grid.tokens {
                if t >= c.codebook_size {
                    return Err(Error::OutOfRange(format!("token {t} outside codebook of {}", c.codebook_size)));
                }
                data.extend_from_slice(&cb[t * c.code_dim..(t + 1) * c.code_dim]);
            }
        }
        Tensor::new(vec![tokens.len() * c.sites(), c.code_dim], data)
    }

    /// Token grids to rasters; frames are decoded together as clips of at
    /// most `clip_len`.
    pub fn decode(&self, tokens: &[TokenGrid]) -> Result<Vec<Raster>> {
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(self.config.clip_len.max(1)) {
            out.extend(self.decode_clip(chunk)?);
        }
        Ok(out)
    }

    /// Decodes `tokens` as a single clip.
    pub fn decode_clip(&self, tokens: &[TokenGrid]) -> Result<Vec<Raster>> {
        if tokens.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::inference();
        let z = g.constant(self.lookup(tokens)?);
        let z = self.temporal_graph(&mut g, &self.params, "tpost", z, TemporalMode::Clips(tokens.len()))?;
        let y = self.decoder_graph(&mut g, &self.params, z)?;
        Ok(self.to_rasters(g.value(y)))
    }

    fn to_rasters(&self, y: &Tensor<f32>) -> Vec<Raster> {
        let c = &self.config;
        let per = c.channels * c.height * c.width;
        y.data().chunks_exact(per).map(|d| Raster::from_unit_planar(c.height, c.width, c.channels, d)).collect()
    }

    /// Full encode/quantize/decode round trip of a clip.
    pub fn reconstruct(&self, frames: &[Raster]) -> Result<Vec<Raster>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(self.config.clip_len.max(1)) {
            let toks = self.tokenize(chunk)?;
            out.extend(self.decode_clip(&toks)?);
        }
        Ok(out)
    }

    /// Tokenizes a long frame sequence clip by clip.
    pub fn tokenize_episode(&self, frames: &[Raster]) -> Result<Vec<TokenGrid>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(self.config.clip_len.max(1)) {
            out.extend(self.tokenize(chunk)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, train: Option<&TrainState>) -> Result<Checkpoint> {
        let mut js = serde_json::json!({ "kind": "tokenizer", "config": self.config });
        if let Some(t) = train {
            js["train"] = t.to_json();
        }
        let mut ck = Checkpoint::new(serde_json::to_string(&js)?);
        ck.push_store("tok.", &self.params);
        if let Some(t) = train {
            t.push_moments(&mut ck, "tok.", &self.params);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<TrainState>)> {
        let js: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        if js["kind"] != "tokenizer" {
            return Err(Error::Format { format: "DWCK", msg: "checkpoint is not a tokenizer".into() });
        }
        let config: TokenizerConfig = serde_json::from_value(js["config"].clone())?;
        let mut tok = Self::new(config, 0)?;
        ck.load_store("tok.", &mut tok.params)?;
        let train = TrainState::restore(js.get("train"), ck, "tok.", &tok.params)?;
        Ok((tok, train))
    }
}

/// Attention layout of the temporal layers: one bidirectional group per
/// (clip, site). Rows are ordered (frame, site) and frames are cut into
/// consecutive clips of `clip_len` (the last may be shorter).
pub fn temporal_layout(frames: usize, sites: usize, clip_len: usize) -> Result<AttentionLayout> {
    let clip_len = clip_len.max(1);
    let mut groups = Vec::new();
    let mut start = 0;
    while start < frames {
        let len = clip_len.min(frames - start);
        for s in 0..sites {
            let toks = (0..len).map(|t| (start + t) * sites + s).collect();
            groups.push(AttentionGroup::self_attend(toks, GroupMask::Full, None));
        }
        start += len;
    }
    AttentionLayout::self_attention(frames * sites, groups)
}

/// `lambda1 * charbonnier + lambda2 * gradient-difference + lambda3 * quant`.
pub fn vqvae_loss<F: Real>(
    g: &mut Graph<F>,
    recon: Var,
    target: Var,
    quant: Var,
    lambdas: (f64, f64, f64),
    eps: f64,
) -> Result<Var> {
    let ch = g.charbonnier(recon, target, F::from_f64c(eps))?;
    let gd = g.grad_diff_mse(recon, target)?;
    let a = g.scale(ch, F::from_f64c(lambdas.0));
    let b = g.scale(gd, F::from_f64c(lambdas.1));
    let c = g.scale(quant, F::from_f64c(lambdas.2));
    let s = g.add(a, b)?;
    g.add(s, c)
}

fn stack_rows(features: &[Tensor<f32>], c: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    for f in features {
        if f.shape().last() != Some(&c) {
            return shape_err(format!("feature grid {:?} does not end in C={c}", f.shape()));
        }
        data.extend_from_slice(f.data());
    }
    let n = data.len() / c;
    Tensor::new(vec![n, c], data)
}

fn split_rows(t: &Tensor<f32>, frames: usize, (h, w): (usize, usize)) -> Vec<Tensor<f32>> {
    let c = t.cols();
    let per = h * w * c;
    (0..frames).map(|i| Tensor::new(vec![h, w, c], t.data()[i * per..(i + 1) * per].to_vec()).unwrap()).collect()
}

/// Resumable tokenizer training: stage 1 on single frames (temporal layers
/// bypassed), stage 2 on clips of `clip_len` consecutive frames.
pub struct TokenizerTrainer {
    pub tokenizer: Tokenizer,
    pub state: TrainState,
    pub metrics: MetricsRecord,
    last_used: Vec<u64>,
    codebook_seeded: bool,
}

impl TokenizerTrainer {
    pub fn new(tokenizer: Tokenizer, seed: u64) -> Self {
        let state = TrainState::new(&tokenizer.params, Rng::with_stream(seed, 12));
        let k = tokenizer.config.codebook_size;
        Self { tokenizer, state, metrics: MetricsRecord::default(), last_used: vec![0; k], codebook_seeded: false }
    }

    /// Continues a run saved with [`TokenizerTrainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (tokenizer, state) = Tokenizer::from_checkpoint(ck)?;
        let state =
            state.ok_or_else(|| Error::Format { format: "DWCK", msg: "checkpoint has no training state".into() })?;
        let js: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        let k = tokenizer.config.codebook_size;
        let last_used: Vec<u64> = match js.get("codes_last_used") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => vec![state.step; k],
        };
        if last_used.len() != k {
            return Err(Error::Format { format: "DWCK", msg: "code usage table has wrong length".into() });
        }
        let codebook_seeded = state.step > 0;
        Ok(Self { tokenizer, state, metrics: MetricsRecord::default(), last_used, codebook_seeded })
    }

    pub fn total_steps(&self) -> u64 {
        self.tokenizer.config.stage1_steps + self.tokenizer.config.stage2_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn sample_batch(&mut self, episodes: &[Vec<Raster>]) -> Result<(Vec<Raster>, TemporalMode)> {
        let c = &self.tokenizer.config;
        let rng = &mut self.state.rng;
        if self.state.step < c.stage1_steps {
            let nonempty: Vec<&Vec<Raster>> = episodes.iter().filter(|e| !e.is_empty()).collect();
            let frames = (0..c.batch_frames)
                .map(|_| {
                    let ep = nonempty[rng.below(nonempty.len())];
                    ep[rng.below(ep.len())].clone()
                })
                .collect();
            return Ok((frames, TemporalMode::Bypass));
        }
        let eligible: Vec<&Vec<Raster>> = episodes.iter().filter(|e| e.len() >= c.clip_len).collect();
        if eligible.is_empty() {
            return Err(Error::Empty(format!("no episode has {} frames for clip training", c.clip_len)));
        }
        let mut frames = Vec::with_capacity(c.batch_clips * c.clip_len);
        for _ in 0..c.batch_clips {
            let ep = eligible[rng.below(eligible.len())];
            let start = rng.below(ep.len() - c.clip_len + 1);
            frames.extend_from_slice(&ep[start..start + c.clip_len]);
        }
        Ok((frames, TemporalMode::Clips(c.clip_len)))
    }

    /// Runs one optimization step; returns the loss.
    pub fn step(&mut self, episodes: &[Vec<Raster>]) -> Result<f64> {
        if episodes.iter().all(|e| e.is_empty()) {
            return Err(Error::Empty("tokenizer training set has no frames".into()));
        }
        let (frames, mode) = self.sample_batch(episodes)?;
        let tok = &self.tokenizer;
        let x_t = tok.frames_tensor::<f32>(&frames)?;
        if !self.codebook_seeded {
            self.seed_codebook(&x_t)?;
        }
        let tok = &self.tokenizer;
        let mut g = Graph::new();
        let x = g.constant(x_t);
        let (loss, out) = tok.loss_graph(&mut g, &tok.params, x, mode)?;
        let lv = g.scalar(loss) as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("tokenizer loss at step {}", self.state.step)));
        }
        g.backward(loss)?;
        let grads = g.param_grads(tok.params.len());
        let pre = g.value(out.pre_quant).clone();
        let tokens = out.tokens;
        drop(g);
        let cfg = AdamWConfig::with_lr(self.tokenizer.config.lr);
        adamw_step(&mut self.tokenizer.params, &grads, &mut self.state.opt, &cfg)?;
        self.state.step += 1;
        let step = self.state.step;
        for &t in &tokens {
            self.last_used[t] = step;
        }
        self.reinit_dead_codes(&pre)?;
        let c = &self.tokenizer.config;
        if step % c.log_every.max(1) == 0 || step == 1 || step == self.total_steps() {
            self.metrics.push("tokenizer/loss", step, lv, None)?;
        }
        Ok(lv)
    }

    /// Codebook rows drawn from encoder features of the first batch.
    fn seed_codebook(&mut self, x: &Tensor<f32>) -> Result<()> {
        let tok = &self.tokenizer;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let f = tok.encoder_graph(&mut g, &tok.params, xv)?;
        let feats = g.value(f).clone();
        drop(g);
        self.assign_codes_from(&feats, &(0..self.tokenizer.config.codebook_size).collect::<Vec<_>>());
        self.codebook_seeded = true;
        Ok(())
    }

    fn assign_codes_from(&mut self, feats: &Tensor<f32>, codes: &[usize]) {
        let c = self.tokenizer.config.code_dim;
        let n = feats.rows();
        let id = self.tokenizer.params.id("codebook").unwrap();
        for &k in codes {
            let r = self.state.rng.below(n);
            let noise: Vec<f32> = (0..c).map(|_| (self.state.rng.normal() * 1e-3) as f32).collect();
            let cb = self.tokenizer.params.get_mut(id).data_mut();
            for j in 0..c {
                cb[k * c + j] = feats.row(r)[j] + noise[j];
            }
            self.state.opt.first_moment[id][k * c..(k + 1) * c].fill(0.0);
            self.state.opt.second_moment[id][k * c..(k + 1) * c].fill(0.0);
        }
    }

    fn reinit_dead_codes(&mut self, pre_quant: &Tensor<f32>) -> Result<()> {
        let horizon = self.tokenizer.config.dead_code_steps;
        if horizon == 0 {
            return Ok(());
        }
        let step = self.state.step;
        let dead: Vec<usize> =
            (0..self.last_used.len()).filter(|&k| step.saturating_sub(self.last_used[k]) >= horizon).collect();
        if dead.is_empty() {
            return Ok(());
        }
        self.assign_codes_from(pre_quant, &dead);
        for k in dead {
            self.last_used[k] = step;
        }
        Ok(())
    }

    /// Trains until the configured number of steps.
    pub fn run(&mut self, episodes: &[Vec<Raster>]) -> Result<()> {
        while !self.is_done() {
            self.step(episodes)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.tokenizer.to_checkpoint(Some(&self.state))?;
        let mut js: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        js["codes_last_used"] = serde_json::to_value(&self.last_used)?;
        ck.config_json = serde_json::to_string(&js)?;
        Ok(ck)
    }
}

/// Trains a tokenizer from scratch on the frames of `episodes`.
pub fn train_tokenizer(
    episodes: &[Vec<Raster>],
    config: TokenizerConfig,
    seed: u64,
) -> Result<(Tokenizer, MetricsRecord)> {
    let mut trainer = TokenizerTrainer::new(Tokenizer::new(config, seed)?, seed);
    trainer.run(episodes)?;
    Ok((trainer.tokenizer, trainer.metrics))
}

/// Mean over frames of the PSNR between reconstructions and originals, and
/// of a baseline that predicts the dataset's mean pixel value everywhere.
pub fn reconstruction_psnr(tok: &Tokenizer, episodes: &[Vec<Raster>]) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        for f in ep {
            sum += f.pixels.iter().map(|&p| p as f64).sum::<f64>();
            count += f.pixels.len();
        }
    }
    if count == 0 {
        return Err(Error::Empty("no frames to evaluate".into()));
    }
    let mean = (sum / count as f64).round() as u8;
    let (mut model, mut base, mut n) = (0.0, 0.0, 0usize);
    for ep in episodes {
        let rec = tok.reconstruct(ep)?;
        for (r, f) in rec.iter().zip(ep) {
            model += crate::world::psnr(r, f);
            base += crate::world::psnr(&Raster::filled(f.height, f.width, f.channels, mean), f);
            n += 1;
        }
    }
    Ok((model / n as f64, base / n as f64))
}

/// Fraction of codebook entries used when tokenizing `episodes`.
pub fn codebook_usage(tok: &Tokenizer, episodes: &[Vec<Raster>]) -> Result<f64> {
    let mut used = vec![false; tok.config.codebook_size];
    for ep in episodes {
        for grid in tok.tokenize_episode(ep)? {
            for t in grid.tokens {
                used[t] = true;
            }
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}
