//! Decoupled spatio-temporal GPT over per-frame state tokens, and a flat
//! 1D GPT baseline sharing the same vocabularies.
//!
//! A state is `S = 2 + H*W` tokens: orientation `phi`, location `v`, then the
//! image tokens in zig-zag order. The decoupled model stacks N pairs of
//! (temporal causal layer, intra-frame bidirectional layer) over the context
//! frames, then an internal autoregressive stack emits the next frame's
//! tokens one at a time. All rows of a batch live in one `[B*T*S, d]` matrix
//! ordered (sequence, frame, position); layers differ only in their
//! attention layout and rotary positions.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{Checkpoint, MetricsRecord};
use crate::nn::{self, TrainState};
use crate::numerics::{
    adamw_step, AdamWConfig, AttentionGroup, AttentionLayout, Graph, GridPos, GroupMask, ParamStore, Real, Rng,
    RopeAngles, Tensor, Var,
};
use crate::pose_codec::{PoseBinning, PoseTokens};
use crate::tokenizer::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Decoupled,
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub enabled: bool,
    pub p_token: f64,
    pub p_seq: f64,
    /// Draw replacements uniformly from the whole image vocabulary instead
    /// of from the tokens of the same frame.
    pub full_vocab: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { enabled: true, p_token: 0.5, p_seq: 0.3, full_vocab: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancedAttention {
    pub enabled: bool,
    pub w_phi: f64,
    pub w_v: f64,
}

impl Default for BalancedAttention {
    fn default() -> Self {
        Self { enabled: true, w_phi: 0.4, w_v: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    /// Number of (temporal, multimodal) block pairs.
    pub n_pairs: usize,
    pub ar_layers: usize,
    /// Context frames `T_ctx`.
    pub ctx_frames: usize,
    pub ffn_mult: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub image_vocab: usize,
    pub binning: PoseBinning,
    pub balanced: BalancedAttention,
    pub masking: MaskingConfig,
    /// Token-by-token decoding inside a frame; off predicts all positions
    /// of the next frame at once from the fused features.
    pub internal_ar: bool,
    pub qk_norm: bool,
    pub rope_base: f64,
    pub init_std: f64,
    pub zero_init_heads: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub log_every: u64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Decoupled,
            d_model: 128,
            heads: 4,
            n_pairs: 2,
            ar_layers: 2,
            ctx_frames: 8,
            ffn_mult: 4,
            grid_height: 4,
            grid_width: 8,
            image_vocab: 256,
            binning: PoseBinning::default(),
            balanced: BalancedAttention::default(),
            masking: MaskingConfig::default(),
            internal_ar: true,
            qk_norm: true,
            rope_base: 10000.0,
            init_std: 0.02,
            zero_init_heads: true,
            lr: 1e-4,
            batch_size: 8,
            steps: 10_000,
            log_every: 50,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model == 0 || self.d_model % (4 * self.heads) != 0 {
            return bad(format!("d_model {} must be a positive multiple of 4 * heads ({})", self.d_model, self.heads));
        }
        if self.grid_height == 0 || self.grid_width == 0 {
            return bad("token grid must be non-empty".into());
        }
        if self.image_vocab < 2 {
            return bad("image vocabulary needs at least 2 entries".into());
        }
        if self.ctx_frames == 0 {
            return bad("context needs at least one frame".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        for (name, p) in [("p_token", self.masking.p_token), ("p_seq", self.masking.p_seq)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        self.binning.validate()
    }

    /// Tokens per state, `2 + H*W`.
    pub fn state_len(&self) -> usize {
        2 + self.grid_height * self.grid_width
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn phi_vocab(&self) -> usize {
        self.binning.phi_vocab()
    }

    pub fn v_vocab(&self) -> usize {
        self.binning.v_vocab()
    }

    /// Vocabulary of position `j` of a state.
    pub fn vocab_at(&self, j: usize) -> usize {
        match j {
            0 => self.phi_vocab(),
            1 => self.v_vocab(),
            _ => self.image_vocab,
        }
    }

    /// Row offset of position `j`'s vocabulary in the combined embedding
    /// table (phi rows, then v rows, then image rows, then `[sos]`).
    pub fn embed_offset(&self, j: usize) -> usize {
        match j {
            0 => 0,
            1 => self.phi_vocab(),
            _ => self.phi_vocab() + self.v_vocab(),
        }
    }

    /// Row of the `[sos]` embedding in the combined table.
    pub fn sos_row(&self) -> usize {
        self.phi_vocab() + self.v_vocab() + self.image_vocab
    }

    /// Blocks in the vanilla stack; equal to the decoupled model's total.
    pub fn vanilla_layers(&self) -> usize {
        2 * self.n_pairs + self.ar_layers
    }

    /// Longest flat stream the vanilla model accepts: `[sos]`, `T_ctx`
    /// context frames and all but the last token of the predicted frame.
    pub fn vanilla_max_len(&self) -> usize {
        (self.ctx_frames + 1) * self.state_len()
    }

    fn key_bias(&self) -> Option<Vec<f64>> {
        if self.balanced.enabled {
            Some(balanced_logit_bias(self.state_len(), self.balanced.w_phi, self.balanced.w_v).unwrap())
        } else {
            None
        }
    }
}

/// Visiting order of the token grid: row by row, alternating direction.
pub fn zigzag_order(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        if r % 2 == 0 {
            out.extend((0..width).map(|c| (r, c)));
        } else {
            out.extend((0..width).rev().map(|c| (r, c)));
        }
    }
    out
}

/// One frame's discrete state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateTokens {
    pub phi: usize,
    pub v: usize,
    /// Image tokens in zig-zag order.
    pub q: Vec<usize>,
}

impl StateTokens {
    pub fn from_grid(pose: PoseTokens, grid: &TokenGrid) -> Self {
        let q =
            zigzag_order(grid.height, grid.width).into_iter().map(|(r, c)| grid.tokens[r * grid.width + c]).collect();
        Self { phi: pose.phi, v: pose.v, q }
    }

    pub fn to_grid(&self, height: usize, width: usize) -> TokenGrid {
        let mut tokens = vec![0; height * width];
        for (&t, (r, c)) in self.q.iter().zip(zigzag_order(height, width)) {
            tokens[r * width + c] = t;
        }
        TokenGrid { height, width, tokens }
    }

    pub fn pose(&self) -> PoseTokens {
        PoseTokens { phi: self.phi, v: self.v }
    }

    pub fn len(&self) -> usize {
        2 + self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token at position `j` of the `(phi, v, q...)` order.
    pub fn get(&self, j: usize) -> usize {
        match j {
            0 => self.phi,
            1 => self.v,
            _ => self.q[j - 2],
        }
    }

    pub fn set(&mut self, j: usize, t: usize) {
        match j {
            0 => self.phi = t,
            1 => self.v = t,
            _ => self.q[j - 2] = t,
        }
    }

    pub fn flat(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.phi);
        out.push(self.v);
        out.extend_from_slice(&self.q);
        out
    }

    pub fn from_flat(tokens: &[usize]) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Shape(format!("state needs at least 2 tokens, got {}", tokens.len())));
        }
        Ok(Self { phi: tokens[0], v: tokens[1], q: tokens[2..].to_vec() })
    }

    pub fn validate(&self, cfg: &WorldModelConfig) -> Result<()> {
        if self.len() != cfg.state_len() {
            return Err(Error::Shape(format!("state has {} tokens, model expects {}", self.len(), cfg.state_len())));
        }
        for j in 0..self.len() {
            let t = self.get(j);
            if t >= cfg.vocab_at(j) {
                return Err(Error::OutOfRange(format!(
                    "token {t} at position {j} outside vocabulary {}",
                    cfg.vocab_at(j)
                )));
            }
        }
        Ok(())
    }
}

/// Pre-softmax key bias favouring the two pose tokens of a state.
pub fn balanced_logit_bias(s: usize, w_phi: f64, w_v: f64) -> Result<Vec<f64>> {
    if s < 2 {
        return Err(Error::Config(format!("state length {s} has no room for both pose tokens")));
    }
    let mut b = vec![0.0; s];
    b[0] = w_phi;
    b[1] = w_v;
    Ok(b)
}

/// Per-call corruption counts of [`apply_random_masking`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskingStats {
    /// Whether the sequence was chosen for corruption.
    pub touched: bool,
    /// Image tokens that were candidates (all of them when touched).
    pub considered: u64,
    /// Image tokens selected for replacement.
    pub selected: u64,
}

/// Corrupts the image tokens of a conditioning sequence. With probability
/// `p_seq` the sequence is touched; then every image token is independently
/// replaced with probability `p_token` by a token drawn from the same
/// frame's image tokens (or uniformly from `full_vocab` codes when given).
/// Pose tokens are left alone.
pub fn apply_random_masking(
    frames: &[StateTokens],
    p_token: f64,
    p_seq: f64,
    full_vocab: Option<usize>,
    rng: &mut Rng,
) -> (Vec<StateTokens>, MaskingStats) {
    let mut out = frames.to_vec();
    let mut stats = MaskingStats::default();
    if !rng.bernoulli(p_seq) {
        return (out, stats);
    }
    stats.touched = true;
    for (dst, src) in out.iter_mut().zip(frames) {
        if src.q.is_empty() {
            continue;
        }
        for i in 0..src.q.len() {
            stats.considered += 1;
            if rng.bernoulli(p_token) {
                stats.selected += 1;
                dst.q[i] = match full_vocab {
                    Some(k) => rng.below(k),
                    None => src.q[rng.below(src.q.len())],
                };
            }
        }
    }
    (out, stats)
}

/// Rotary grid position of state position `j`.
pub fn grid_position(cfg: &WorldModelConfig, j: usize) -> GridPos {
    match j {
        0 => (-1, 0),
        1 => (-1, 1),
        _ => {
            let (r, c) = zigzag_order(cfg.grid_height, cfg.grid_width)[j - 2];
            (r as i64, c as i64)
        }
    }
}

/// Temporal layers: one causal group per (sequence, position) over frames.
pub fn temporal_layout(batch: usize, frames: usize, s: usize) -> Result<AttentionLayout> {
    let mut groups = Vec::with_capacity(batch * s);
    for b in 0..batch {
        for j in 0..s {
            let rows = (0..frames).map(|t| (b * frames + t) * s + j).collect();
            groups.push(AttentionGroup::self_attend(rows, GroupMask::Causal, None));
        }
    }
    AttentionLayout::self_attention(batch * frames * s, groups)
}

/// One group per frame of `s` consecutive rows.
pub fn frame_layout(frames: usize, s: usize, mask: GroupMask, bias: Option<Vec<f64>>) -> Result<AttentionLayout> {
    let groups = (0..frames)
        .map(|f| AttentionGroup::self_attend((f * s..(f + 1) * s).collect(), mask.clone(), bias.clone()))
        .collect();
    AttentionLayout::self_attention(frames * s, groups)
}

/// Flat causal attention over `batch` streams of `len` tokens.
pub fn vanilla_layout(batch: usize, len: usize) -> Result<AttentionLayout> {
    frame_layout(batch, len, GroupMask::Causal, None)
}

/// Teacher-forced logits of a batch, split by output head. Rows of `phi`
/// and `v` are ordered (sequence, target frame); rows of `q` are
/// (sequence, target frame, image position).
pub struct Logits {
    pub phi: Var,
    pub v: Var,
    pub q: Var,
    pub phi_targets: Vec<usize>,
    pub v_targets: Vec<usize>,
    pub q_targets: Vec<usize>,
}

/// Summed cross-entropies of one batch.
pub struct LossOut {
    /// Mean cross-entropy over every target token; the training objective.
    pub total: Var,
    pub phi_sum: Var,
    pub v_sum: Var,
    pub q_sum: Var,
    pub phi_count: usize,
    pub v_count: usize,
    pub q_count: usize,
    pub masking: Vec<MaskingStats>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub params: ParamStore<f32>,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, 21);
        let params = Self::init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    fn init_params(c: &WorldModelConfig, rng: &mut Rng) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let d = c.d_model;
        let std = c.init_std;
        s.normal("emb", &[c.sos_row() + 1, d], std, rng);
        let blocks: Vec<String> = match c.variant {
            Variant::Decoupled => (0..c.n_pairs)
                .flat_map(|i| [format!("t{i}"), format!("m{i}")])
                .chain((0..c.ar_layers).map(|i| format!("ar{i}")))
                .collect(),
            Variant::Vanilla => (0..c.vanilla_layers()).map(|i| format!("b{i}")).collect(),
        };
        if c.variant == Variant::Vanilla {
            s.normal("pos", &[c.vanilla_max_len(), d], std, rng);
        }
        for b in &blocks {
            nn::add_layer_norm(&mut s, &format!("{b}.ln1"), d);
            for p in ["q", "k", "v", "o"] {
                nn::add_linear(&mut s, rng, &format!("{b}.{p}"), d, d, std);
            }
            if c.qk_norm {
                s.filled(&format!("{b}.tau"), &[1], (c.head_dim() as f64).sqrt());
            }
            nn::add_layer_norm(&mut s, &format!("{b}.ln2"), d);
            nn::add_linear(&mut s, rng, &format!("{b}.fc1"), d, c.ffn_mult * d, std);
            nn::add_linear(&mut s, rng, &format!("{b}.fc2"), c.ffn_mult * d, d, std);
        }
        if c.variant == Variant::Decoupled {
            nn::add_layer_norm(&mut s, "lnf", d);
        }
        nn::add_layer_norm(&mut s, "lnout", d);
        let head_std = if c.zero_init_heads { 0.0 } else { std };
        nn::add_linear(&mut s, rng, "head.phi", d, c.phi_vocab(), head_std);
        nn::add_linear(&mut s, rng, "head.v", d, c.v_vocab(), head_std);
        nn::add_linear(&mut s, rng, "head.q", d, c.image_vocab, head_std);
        s
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    fn block<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        name: &str,
        x: Var,
        angles: Option<&Rc<RopeAngles>>,
        layout: &Rc<AttentionLayout>,
    ) -> Result<Var> {
        let c = &self.config;
        let h = nn::layer_norm(g, store, &format!("{name}.ln1"), x)?;
        let mut q = nn::linear(g, store, &format!("{name}.q"), h)?;
        let mut k = nn::linear(g, store, &format!("{name}.k"), h)?;
        let v = nn::linear(g, store, &format!("{name}.v"), h)?;
        if let Some(a) = angles {
            q = g.rope(q, a.clone())?;
            k = g.rope(k, a.clone())?;
        }
        let scale = if c.qk_norm {
            q = g.l2_norm_heads(q, c.heads)?;
            k = g.l2_norm_heads(k, c.heads)?;
            let tau = g.param_by_name(store, &format!("{name}.tau"));
            q = g.scale_by(q, tau)?;
            F::one()
        } else {
            F::from_f64c(1.0 / (c.head_dim() as f64).sqrt())
        };
        let a = g.attention(q, k, v, c.heads, scale, layout.clone())?;
        let o = nn::linear(g, store, &format!("{name}.o"), a)?;
        let x = g.add(x, o)?;
        let h = nn::layer_norm(g, store, &format!("{name}.ln2"), x)?;
        let f = nn::linear(g, store, &format!("{name}.fc1"), h)?;
        let f = g.gelu(f);
        let f = nn::linear(g, store, &format!("{name}.fc2"), f)?;
        g.add(x, f)
    }

    fn check_frames(&self, frames: &[StateTokens]) -> Result<()> {
        for f in frames {
            f.validate(&self.config)?;
        }
        Ok(())
    }

    fn spatial_angles(&self, frames: usize) -> Result<Rc<RopeAngles>> {
        let c = &self.config;
        let s = c.state_len();
        let pos: Vec<GridPos> = (0..frames * s).map(|r| grid_position(c, r % s)).collect();
        Ok(Rc::new(RopeAngles::new(c.head_dim(), &pos, c.rope_base)?))
    }

    /// Pre-rotary embeddings of one state, `[S, d]`.
    pub fn embed_state(&self, state: &StateTokens) -> Result<Tensor<f32>> {
        state.validate(&self.config)?;
        let c = &self.config;
        let ids: Vec<usize> = (0..state.len()).map(|j| c.embed_offset(j) + state.get(j)).collect();
        let mut g = Graph::inference();
        let emb = g.param_by_name(&self.params, "emb");
        let x = g.gather(emb, Rc::new(ids))?;
        Ok(g.value(x).clone())
    }

    /// Temporal block `layer` applied to `[batch*frames*S, d]` rows.
    pub fn temporal_layer<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        layer: usize,
        x: Var,
        batch: usize,
        frames: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let s = c.state_len();
        let pos: Vec<GridPos> = (0..batch * frames * s)
            .map(|r| {
                let t = ((r / s) % frames) as i64;
                (t, t)
            })
            .collect();
        let angles = Rc::new(RopeAngles::new(c.head_dim(), &pos, c.rope_base)?);
        let layout = Rc::new(temporal_layout(batch, frames, s)?);
        self.block(g, store, &format!("t{layer}"), x, Some(&angles), &layout)
    }

    /// Multimodal block `layer` applied to `[frames*S, d]` rows.
    pub fn multimodal_layer<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        layer: usize,
        x: Var,
        frames: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let angles = self.spatial_angles(frames)?;
        let layout = Rc::new(frame_layout(frames, c.state_len(), GroupMask::Full, c.key_bias())?);
        self.block(g, store, &format!("m{layer}"), x, Some(&angles), &layout)
    }

    /// Fusion stack over `batch` sequences of `frames` states each
    /// (`inputs` is sequence-major). Returns the normalized fused features
    /// `[batch*frames*S, d]`.
    pub fn fusion_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        inputs: &[StateTokens],
        batch: usize,
        frames: usize,
    ) -> Result<Var> {
        let c = &self.config;
        if c.variant != Variant::Decoupled {
            return Err(Error::Config("fusion stack exists only in the decoupled variant".into()));
        }
        if inputs.len() != batch * frames || frames == 0 {
            return Err(Error::Shape(format!("{} states for {batch} x {frames}", inputs.len())));
        }
        self.check_frames(inputs)?;
        let s = c.state_len();
        let ids: Vec<usize> = inputs.iter().flat_map(|f| (0..s).map(move |j| c.embed_offset(j) + f.get(j))).collect();
        let emb = g.param_by_name(store, "emb");
        let mut x = g.gather(emb, Rc::new(ids))?;
        for i in 0..c.n_pairs {
            x = self.temporal_layer(g, store, i, x, batch, frames)?;
            x = self.multimodal_layer(g, store, i, x, batch * frames)?;
        }
        nn::layer_norm(g, store, "lnf", x)
    }

    /// Internal autoregressive stack over `n` frames of fused features.
    /// `prefixes[f]` holds the already known tokens of the frame being
    /// predicted from fused frame `f`; slot `j` receives the embedding of
    /// token `j - 1` (or `[sos]` at slot 0) plus fused feature `j`. Returns
    /// the final hidden states `[n*slots, d]` before the heads.
    fn ar_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        fused: Var,
        prefixes: &[&[usize]],
        slots: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let s = c.state_len();
        let n = prefixes.len();
        let mut ids = Vec::with_capacity(n * slots);
        for p in prefixes {
            for j in 0..slots {
                if c.internal_ar && j > 0 {
                    let t = p[j - 1];
                    if t >= c.vocab_at(j - 1) {
                        return Err(Error::OutOfRange(format!("prefix token {t} at position {}", j - 1)));
                    }
                    ids.push(c.embed_offset(j - 1) + t);
                } else {
                    ids.push(c.sos_row());
                }
            }
        }
        let emb = g.param_by_name(store, "emb");
        let e = g.gather(emb, Rc::new(ids))?;
        let h = if slots == s {
            fused
        } else {
            let rows: Vec<usize> = (0..n).flat_map(|f| (0..slots).map(move |j| f * s + j)).collect();
            g.gather(fused, Rc::new(rows))?
        };
        let mut x = g.add(e, h)?;
        let mask = if c.internal_ar { GroupMask::Causal } else { GroupMask::Full };
        let bias = c.key_bias().map(|b| b[..slots].to_vec());
        let layout = Rc::new(frame_layout(n, slots, mask, bias)?);
        let angles = self.spatial_angles(n)?;
        let angles = if slots == s {
            angles
        } else {
            let pos: Vec<GridPos> = (0..n * slots).map(|r| grid_position(c, r % slots)).collect();
            Rc::new(RopeAngles::new(c.head_dim(), &pos, c.rope_base)?)
        };
        for i in 0..c.ar_layers {
            x = self.block(g, store, &format!("ar{i}"), x, Some(&angles), &layout)?;
        }
        nn::layer_norm(g, store, "lnout", x)
    }

    fn heads<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        hidden: Var,
        phi_rows: Vec<usize>,
        v_rows: Vec<usize>,
        q_rows: Vec<usize>,
    ) -> Result<(Var, Var, Var)> {
        let hp = g.gather(hidden, Rc::new(phi_rows))?;
        let hv = g.gather(hidden, Rc::new(v_rows))?;
        let hq = g.gather(hidden, Rc::new(q_rows))?;
        let lp = nn::linear(g, store, "head.phi", hp)?;
        let lv = nn::linear(g, store, "head.v", hv)?;
        let lq = nn::linear(g, store, "head.q", hq)?;
        Ok((lp, lv, lq))
    }

    /// Teacher-forced logits for every frame after the first of each
    /// sequence. `conditioning` replaces the context frames (used for
    /// masking); targets always come from `seqs`.
    pub fn logits_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        seqs: &[Vec<StateTokens>],
        conditioning: Option<&[Vec<StateTokens>]>,
    ) -> Result<Logits> {
        let c = &self.config;
        let batch = seqs.len();
        if batch == 0 {
            return Err(Error::Empty("empty batch".into()));
        }
        let len = seqs[0].len();
        if len < 2 || seqs.iter().any(|q| q.len() != len) {
            return Err(Error::Shape("sequences need equal lengths of at least 2 frames".into()));
        }
        if len - 1 > c.ctx_frames {
            return Err(Error::Shape(format!("{} context frames exceed T_ctx = {}", len - 1, c.ctx_frames)));
        }
        for q in seqs {
            self.check_frames(q)?;
        }
        let cond = conditioning.unwrap_or(seqs);
        let s = c.state_len();
        let frames = len - 1;
        let mut targets: Vec<usize> = Vec::with_capacity(batch * frames * s);
        for q in seqs {
            for f in &q[1..] {
                targets.extend(f.flat());
            }
        }
        let (hidden, rows_per_frame) = match c.variant {
            Variant::Decoupled => {
                let inputs: Vec<StateTokens> = cond.iter().flat_map(|q| q[..frames].iter().cloned()).collect();
                let fused = self.fusion_graph(g, store, &inputs, batch, frames)?;
                let prefixes: Vec<&[usize]> = targets.chunks(s).collect();
                (self.ar_graph(g, store, fused, &prefixes, s)?, s)
            }
            Variant::Vanilla => {
                let l = len * s;
                if l > c.vanilla_max_len() {
                    return Err(Error::Shape(format!("stream of {l} exceeds {}", c.vanilla_max_len())));
                }
                let mut streams = Vec::with_capacity(batch);
                for (q, cq) in seqs.iter().zip(cond) {
                    let mut st = Vec::with_capacity(l + 1);
                    st.push(c.sos_row());
                    for f in cq[..frames].iter().chain(std::iter::once(&q[frames])) {
                        st.extend((0..s).map(|j| c.embed_offset(j) + f.get(j)));
                    }
                    st.pop();
                    streams.push(st);
                }
                let h = self.vanilla_hidden(g, store, &streams)?;
                (h, s)
            }
        };
        let (mut pr, mut vr, mut qr) = (Vec::new(), Vec::new(), Vec::new());
        let (mut pt, mut vt, mut qt) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..batch {
            for t in 0..frames {
                for j in 0..s {
                    let tgt = targets[(b * frames + t) * s + j];
                    let row = match c.variant {
                        Variant::Decoupled => (b * frames + t) * rows_per_frame + j,
                        // stream position p predicts token p + 1; target frame t + 1 starts at 1 + (t + 1) * s
                        Variant::Vanilla => b * len * s + (t + 1) * s + j,
                    };
                    match j {
                        0 => {
                            pr.push(row);
                            pt.push(tgt)
                        }
                        1 => {
                            vr.push(row);
                            vt.push(tgt)
                        }
                        _ => {
                            qr.push(row);
                            qt.push(tgt)
                        }
                    }
                }
            }
        }
        let (phi, v, q) = self.heads(g, store, hidden, pr, vr, qr)?;
        Ok(Logits { phi, v, q, phi_targets: pt, v_targets: vt, q_targets: qt })
    }

    /// Hidden states of the flat baseline for equal-length embedding-row
    /// streams.
    fn vanilla_hidden<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, streams: &[Vec<usize>]) -> Result<Var> {
        let c = &self.config;
        let batch = streams.len();
        let l = streams[0].len();
        if l == 0 || l > c.vanilla_max_len() {
            return Err(Error::Shape(format!("stream length {l} outside 1..={}", c.vanilla_max_len())));
        }
        let ids: Vec<usize> = streams.iter().flatten().copied().collect();
        let emb = g.param_by_name(store, "emb");
        let e = g.gather(emb, Rc::new(ids))?;
        let pos = g.param_by_name(store, "pos");
        let pidx: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
        let p = g.gather(pos, Rc::new(pidx))?;
        let mut x = g.add(e, p)?;
        let layout = Rc::new(vanilla_layout(batch, l)?);
        for i in 0..c.vanilla_layers() {
            x = self.block(g, store, &format!("b{i}"), x, None, &layout)?;
        }
        nn::layer_norm(g, store, "lnout", x)
    }

    /// Next-state cross-entropy of a batch. With `rng`, conditioning frames
    /// are corrupted per the masking config; targets stay clean.
    pub fn loss_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        seqs: &[Vec<StateTokens>],
        rng: Option<&mut Rng>,
    ) -> Result<LossOut> {
        let c = &self.config;
        let mut stats = Vec::new();
        let cond: Option<Vec<Vec<StateTokens>>> = match rng {
            Some(rng) if c.masking.enabled => {
                let full = c.masking.full_vocab.then_some(c.image_vocab);
                Some(
                    seqs.iter()
                        .map(|q| {
                            let ctx = q.len() - 1;
                            let (mut m, st) =
                                apply_random_masking(&q[..ctx], c.masking.p_token, c.masking.p_seq, full, rng);
                            stats.push(st);
                            m.push(q[ctx].clone());
                            m
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        let lg = self.logits_graph(g, store, seqs, cond.as_deref())?;
        let phi_sum = g.cross_entropy(lg.phi, Rc::new(lg.phi_targets.clone()), F::one())?;
        let v_sum = g.cross_entropy(lg.v, Rc::new(lg.v_targets.clone()), F::one())?;
        let q_sum = g.cross_entropy(lg.q, Rc::new(lg.q_targets.clone()), F::one())?;
        let n = lg.phi_targets.len() + lg.v_targets.len() + lg.q_targets.len();
        let pv = g.add(phi_sum, v_sum)?;
        let all = g.add(pv, q_sum)?;
        let total = g.scale(all, F::from_f64c(1.0 / n as f64));
        Ok(LossOut {
            total,
            phi_sum,
            v_sum,
            q_sum,
            phi_count: lg.phi_targets.len(),
            v_count: lg.v_targets.len(),
            q_count: lg.q_targets.len(),
            masking: stats,
        })
    }

    /// Fused features of every frame of a history, `[T*S, d]`.
    pub fn fused_states<F: Real>(&self, store: &ParamStore<F>, history: &[StateTokens]) -> Result<Tensor<F>> {
        let mut g = Graph::inference();
        let v = self.fusion_graph(&mut g, store, history, 1, history.len())?;
        Ok(g.value(v).clone())
    }

    /// Logits of the internal autoregressive stack for the frame following
    /// the fused frame `fused_last` (`[S, d]`), given the already known
    /// prefix of that frame. Returns one row per position
    /// `0..=prefix.len()` (at most `S` rows), each sized to its vocabulary.
    pub fn internal_ar_logits<F: Real>(
        &self,
        store: &ParamStore<F>,
        fused_last: &Tensor<F>,
        prefix: &[usize],
    ) -> Result<Vec<Vec<F>>> {
        let c = &self.config;
        let s = c.state_len();
        if prefix.len() > s {
            return Err(Error::Shape(format!("prefix of {} tokens for a {s}-token state", prefix.len())));
        }
        if fused_last.shape() != [s, c.d_model] {
            return Err(Error::Shape(format!(
                "fused features {:?}, expected [{s}, {}]",
                fused_last.shape(),
                c.d_model
            )));
        }
        let slots = if c.internal_ar { (prefix.len() + 1).min(s) } else { s };
        let mut padded = prefix.to_vec();
        padded.resize(s, 0);
        let mut g = Graph::inference();
        let fused = g.constant(fused_last.clone());
        let h = self.ar_graph(&mut g, store, fused, &[&padded[..]], slots)?;
        let n = (prefix.len() + 1).min(s);
        let (lp, lv, lq) = self.heads(&mut g, store, h, vec![0], vec![1.min(slots - 1)], (0..slots).collect())?;
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            out.push(match j {
                0 => g.value(lp).data().to_vec(),
                1 => g.value(lv).data().to_vec(),
                _ => g.value(lq).row(j).to_vec(),
            });
        }
        Ok(out)
    }

    /// Next-token logits of the flat baseline after `[sos]`, the history
    /// and the known prefix of the next frame.
    pub fn vanilla_next_logits<F: Real>(
        &self,
        store: &ParamStore<F>,
        history: &[StateTokens],
        prefix: &[usize],
    ) -> Result<Vec<F>> {
        let c = &self.config;
        let s = c.state_len();
        if prefix.len() >= s {
            return Err(Error::Shape(format!("prefix of {} tokens leaves nothing to predict", prefix.len())));
        }
        self.check_frames(history)?;
        let mut st = vec![c.sos_row()];
        for f in history {
            st.extend((0..s).map(|j| c.embed_offset(j) + f.get(j)));
        }
        for (j, &t) in prefix.iter().enumerate() {
            if t >= c.vocab_at(j) {
                return Err(Error::OutOfRange(format!("prefix token {t} at position {j}")));
            }
            st.push(c.embed_offset(j) + t);
        }
        let l = st.len();
        let mut g = Graph::inference();
        let h = self.vanilla_hidden(&mut g, store, &[st])?;
        let j = prefix.len();
        let head = match j {
            0 => "head.phi",
            1 => "head.v",
            _ => "head.q",
        };
        let last = g.gather(h, Rc::new(vec![l - 1]))?;
        let lo = nn::linear(&mut g, store, head, last)?;
        Ok(g.value(lo).data().to_vec())
    }

    pub fn to_checkpoint(&self, train: Option<&TrainState>) -> Result<Checkpoint> {
        let mut js = serde_json::json!({ "kind": "world", "config": self.config });
        if let Some(t) = train {
            js["train"] = t.to_json();
        }
        let mut ck = Checkpoint::new(serde_json::to_string(&js)?);
        ck.push_store("wm.", &self.params);
        if let Some(t) = train {
            t.push_moments(&mut ck, "wm.", &self.params);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<TrainState>)> {
        let js: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        if js["kind"] != "world" {
            return Err(Error::Format { format: "DWCK", msg: "checkpoint is not a world model".into() });
        }
        let config: WorldModelConfig = serde_json::from_value(js["config"].clone())?;
        let mut m = Self::new(config, 0)?;
        ck.load_store("wm.", &mut m.params)?;
        let train = TrainState::restore(js.get("train"), ck, "wm.", &m.params)?;
        Ok((m, train))
    }
}

/// Token-level episode for world-model training.
pub type TokenEpisode = Vec<StateTokens>;

/// Draws `batch` windows of `window` consecutive states.
pub fn sample_windows(
    episodes: &[TokenEpisode],
    batch: usize,
    window: usize,
    rng: &mut Rng,
) -> Result<Vec<TokenEpisode>> {
    let eligible: Vec<&TokenEpisode> = episodes.iter().filter(|e| e.len() >= window).collect();
    if eligible.is_empty() {
        return Err(Error::Empty(format!("no episode has {window} states")));
    }
    Ok((0..batch)
        .map(|_| {
            let ep = eligible[rng.below(eligible.len())];
            let start = rng.below(ep.len() - window + 1);
            ep[start..start + window].to_vec()
        })
        .collect())
}

/// Training window length: `T_ctx + 1` states, shortened to the longest
/// episode when needed.
pub fn training_window(cfg: &WorldModelConfig, episodes: &[TokenEpisode]) -> Result<usize> {
    let longest = episodes.iter().map(Vec::len).max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::Empty("world-model training needs episodes of at least 2 states".into()));
    }
    Ok((cfg.ctx_frames + 1).min(longest))
}

/// Resumable world-model training with fixed-learning-rate AdamW.
pub struct WorldTrainer {
    pub model: WorldModel,
    pub state: TrainState,
    pub metrics: MetricsRecord,
}

impl WorldTrainer {
    pub fn new(model: WorldModel, seed: u64) -> Self {
        let state = TrainState::new(&model.params, Rng::with_stream(seed, 22));
        Self { model, state, metrics: MetricsRecord::default() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, state) = WorldModel::from_checkpoint(ck)?;
        let state =
            state.ok_or_else(|| Error::Format { format: "DWCK", msg: "checkpoint has no training state".into() })?;
        Ok(Self { model, state, metrics: MetricsRecord::default() })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.model.config.steps
    }

    /// One optimization step on a freshly sampled batch; returns the mean
    /// per-token loss.
    pub fn step(&mut self, episodes: &[TokenEpisode]) -> Result<f64> {
        let c = &self.model.config;
        let window = training_window(c, episodes)?;
        let batch = sample_windows(episodes, c.batch_size, window, &mut self.state.rng)?;
        self.step_on(&batch)
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, batch: &[TokenEpisode]) -> Result<f64> {
        let m = &self.model;
        let mut g = Graph::new();
        let out = m.loss_graph(&mut g, &m.params, batch, Some(&mut self.state.rng))?;
        let lv = g.scalar(out.total) as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("world-model loss at step {}", self.state.step)));
        }
        let q_loss = g.scalar(out.q_sum) as f64 / out.q_count.max(1) as f64;
        g.backward(out.total)?;
        let grads = g.param_grads(m.params.len());
        drop(g);
        let cfg = AdamWConfig::with_lr(self.model.config.lr);
        adamw_step(&mut self.model.params, &grads, &mut self.state.opt, &cfg)?;
        self.state.step += 1;
        let step = self.state.step;
        let c = &self.model.config;
        if step % c.log_every.max(1) == 0 || step == 1 || step == c.steps {
            self.metrics.push("world/loss", step, lv, None)?;
            self.metrics.push("world/image_loss", step, q_loss, None)?;
        }
        Ok(lv)
    }

    pub fn run(&mut self, episodes: &[TokenEpisode]) -> Result<()> {
        while !self.is_done() {
            self.step(episodes)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        self.model.to_checkpoint(Some(&self.state))
    }
}

/// Mean teacher-forced cross-entropies per target token, by modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedLoss {
    pub phi: f64,
    pub v: f64,
    pub image: f64,
    pub total: f64,
}

/// Teacher-forced losses (no masking) over the given windows.
pub fn teacher_forced_loss(model: &WorldModel, windows: &[TokenEpisode]) -> Result<TeacherForcedLoss> {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for chunk in windows.chunks(model.config.batch_size.max(1)) {
        let mut g = Graph::inference();
        let out = model.loss_graph(&mut g, &model.params, chunk, None)?;
        for (i, (v, n)) in
            [(out.phi_sum, out.phi_count), (out.v_sum, out.v_count), (out.q_sum, out.q_count)].into_iter().enumerate()
        {
            sums[i] += g.scalar(v) as f64;
            counts[i] += n;
        }
    }
    let per = |i: usize| sums[i] / counts[i].max(1) as f64;
    Ok(TeacherForcedLoss {
        phi: per(0),
        v: per(1),
        image: per(2),
        total: sums.iter().sum::<f64>() / counts.iter().sum::<usize>().max(1) as f64,
    })
}
