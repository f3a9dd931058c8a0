//! Next-state sampling, sliding-window rollouts with pose control, drift
//! metrics and attention-cost accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    frame_layout, temporal_layout, vanilla_layout, StateTokens, TokenEpisode, Variant, WorldModel, WorldModelConfig,
};
use crate::numerics::{AttentionLayout, GroupMask, Rng, Tensor};
use crate::pose_codec::{
    accumulate_trajectory, detokenize_pose, relative_poses, tokenize_pose, Pose, PoseBinning, PoseTokens, RelativePose,
};
use crate::tokenizer::Tokenizer;
use crate::world::{psnr, render_frame, Raster, Scene, WorldParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub image: Sampling,
    /// Used for pose tokens that are not commanded.
    pub pose: Sampling,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self { image: Sampling::TopK { k: 50, temperature: 1.0 }, pose: Sampling::Greedy }
    }
}

impl SamplingPolicy {
    pub fn greedy() -> Self {
        Self { image: Sampling::Greedy, pose: Sampling::Greedy }
    }
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

pub fn sample_token(logits: &[f32], sampling: Sampling, rng: &mut Rng) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("no logits to sample from".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    match sampling {
        Sampling::Greedy => Ok(argmax(logits)),
        Sampling::TopK { k, temperature } => {
            if k == 0 || !(temperature > 0.0) {
                return Err(Error::Config(format!("top-k sampling with k={k}, temperature={temperature}")));
            }
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k.min(logits.len()));
            let top = logits[idx[0]] as f64;
            let w: Vec<f64> = idx.iter().map(|&i| ((logits[i] as f64 - top) / temperature).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.uniform() * total;
            for (&i, &wi) in idx.iter().zip(&w) {
                if u < wi {
                    return Ok(i);
                }
                u -= wi;
            }
            Ok(*idx.last().unwrap())
        }
    }
}

/// Per-frame context prepared once for decoding one next state.
enum DecodeContext<'a> {
    Decoupled { fused_last: Tensor<f32> },
    Simultaneous { logits: Vec<Vec<f32>> },
    Vanilla { history: &'a [StateTokens] },
}

impl<'a> DecodeContext<'a> {
    fn new(model: &WorldModel, history: &'a [StateTokens]) -> Result<Self> {
        let c = &model.config;
        match c.variant {
            Variant::Vanilla => Ok(Self::Vanilla { history }),
            Variant::Decoupled => {
                let fused = model.fused_states(&model.params, history)?;
                let s = c.state_len();
                let d = c.d_model;
                let start = (history.len() - 1) * s * d;
                let fused_last = Tensor::new(vec![s, d], fused.data()[start..].to_vec())?;
                if c.internal_ar {
                    Ok(Self::Decoupled { fused_last })
                } else {
                    let logits = model.internal_ar_logits(&model.params, &fused_last, &vec![0; s - 1])?;
                    Ok(Self::Simultaneous { logits })
                }
            }
        }
    }

    fn logits(&self, model: &WorldModel, prefix: &[usize]) -> Result<Vec<f32>> {
        let j = prefix.len();
        match self {
            Self::Decoupled { fused_last } => {
                Ok(model.internal_ar_logits(&model.params, fused_last, prefix)?.swap_remove(j))
            }
            Self::Simultaneous { logits } => Ok(logits[j].clone()),
            Self::Vanilla { history } => model.vanilla_next_logits(&model.params, history, prefix),
        }
    }
}

/// Samples the state following `history` (at most `T_ctx` frames). A
/// `control` forces the two pose tokens instead of sampling them.
pub fn predict_next_state(
    model: &WorldModel,
    history: &[StateTokens],
    control: Option<PoseTokens>,
    policy: &SamplingPolicy,
    rng: &mut Rng,
) -> Result<StateTokens> {
    if history.len() > model.config.ctx_frames {
        return Err(Error::Shape(format!(
            "{} history frames exceed T_ctx = {}",
            history.len(),
            model.config.ctx_frames
        )));
    }
    predict_any_length(model, history, control, policy, rng)
}

fn predict_any_length(
    model: &WorldModel,
    history: &[StateTokens],
    control: Option<PoseTokens>,
    policy: &SamplingPolicy,
    rng: &mut Rng,
) -> Result<StateTokens> {
    let c = &model.config;
    if history.is_empty() {
        return Err(Error::Empty("prediction needs at least one history frame".into()));
    }
    if let Some(p) = control {
        if p.phi >= c.phi_vocab() || p.v >= c.v_vocab() {
            return Err(Error::OutOfRange(format!("commanded pose tokens {p:?}")));
        }
    }
    let ctx = DecodeContext::new(model, history)?;
    let s = c.state_len();
    let mut prefix = Vec::with_capacity(s);
    for j in 0..s {
        let forced = match (j, control) {
            (0, Some(p)) => Some(p.phi),
            (1, Some(p)) => Some(p.v),
            _ => None,
        };
        let t = match forced {
            Some(t) => t,
            None => {
                let lg = ctx.logits(model, &prefix)?;
                sample_token(&lg, if j < 2 { policy.pose } else { policy.image }, rng)?
            }
        };
        prefix.push(t);
    }
    StateTokens::from_flat(&prefix)
}

/// Per-step commanded pose tokens (`None` leaves the step uncontrolled).
pub type RolloutControl = Vec<Option<PoseTokens>>;

/// Converts continuous per-step relative poses into commanded tokens.
pub fn controls_from_deltas(deltas: &[RelativePose], bins: &PoseBinning) -> Result<RolloutControl> {
    deltas.iter().map(|d| tokenize_pose(d, bins).map(Some)).collect()
}

/// Generates `n_steps` states after `seed_states`, keeping at most `T_ctx`
/// frames of context (oldest dropped first).
pub fn rollout_states(
    model: &WorldModel,
    seed_states: &[StateTokens],
    n_steps: usize,
    controls: &[Option<PoseTokens>],
    policy: &SamplingPolicy,
    rng: &mut Rng,
) -> Result<Vec<StateTokens>> {
    rollout_states_with_window(model, seed_states, n_steps, controls, policy, rng, Some(model.config.ctx_frames))
}

/// [`rollout_states`] with an explicit context window; `None` lets the
/// context grow without bound (decoupled variant only, since the flat
/// baseline has a fixed position table).
pub fn rollout_states_with_window(
    model: &WorldModel,
    seed_states: &[StateTokens],
    n_steps: usize,
    controls: &[Option<PoseTokens>],
    policy: &SamplingPolicy,
    rng: &mut Rng,
    window: Option<usize>,
) -> Result<Vec<StateTokens>> {
    if seed_states.is_empty() {
        return Err(Error::Empty("rollout needs at least one seed state".into()));
    }
    let mut context: Vec<StateTokens> = seed_states.to_vec();
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let start = match window {
            Some(w) => context.len().saturating_sub(w.max(1)),
            None => 0,
        };
        let control = controls.get(step).copied().flatten();
        let next = predict_any_length(model, &context[start..], control, policy, rng)?;
        context.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// Relative poses decoded from the pose tokens of a state sequence.
pub fn decode_deltas(states: &[StateTokens], bins: &PoseBinning) -> Result<Vec<RelativePose>> {
    states.iter().map(|s| detokenize_pose(&s.pose(), bins)).collect()
}

/// A rollout decoded back to rasters and absolute poses.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedRollout {
    pub states: Vec<StateTokens>,
    pub poses: Vec<Pose>,
    pub frames: Vec<Raster>,
}

/// Decodes generated states: images through the tokenizer, poses by
/// accumulating the detokenized deltas from `initial`.
pub fn decode_rollout(
    tokenizer: &Tokenizer,
    bins: &PoseBinning,
    initial: &Pose,
    states: Vec<StateTokens>,
) -> Result<DecodedRollout> {
    let (h, w) = tokenizer.config.grid();
    let grids: Vec<_> = states.iter().map(|s| s.to_grid(h, w)).collect();
    let frames = if grids.is_empty() { Vec::new() } else { tokenizer.decode(&grids)? };
    let poses = accumulate_trajectory(initial, &decode_deltas(&states, bins)?);
    Ok(DecodedRollout { states, poses, frames })
}

/// Tokenizes an episode into world-model states; the first pose delta is
/// zero.
pub fn encode_episode(
    tokenizer: &Tokenizer,
    bins: &PoseBinning,
    frames: &[Raster],
    poses: &[Pose],
) -> Result<TokenEpisode> {
    if frames.len() != poses.len() {
        return Err(Error::Shape(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    let grids = tokenizer.tokenize_episode(frames)?;
    let deltas = relative_poses(poses);
    grids.iter().zip(&deltas).map(|(g, d)| Ok(StateTokens::from_grid(tokenize_pose(d, bins)?, g))).collect()
}

/// Per-step image-token accuracy and raster PSNR of a rollout against a
/// reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub accuracy: Vec<f64>,
    pub psnr: Vec<f64>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
}

/// Reporting horizons for drift curves.
pub const DRIFT_HORIZONS: [usize; 3] = [10, 25, 40];

impl DriftReport {
    /// Accuracy at 1-based step `h`.
    pub fn accuracy_at(&self, h: usize) -> Option<f64> {
        h.checked_sub(1).and_then(|i| self.accuracy.get(i)).copied()
    }

    pub fn psnr_at(&self, h: usize) -> Option<f64> {
        h.checked_sub(1).and_then(|i| self.psnr.get(i)).copied()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len().max(1) as f64
    }

    /// `(h, accuracy at h)` for each of [`DRIFT_HORIZONS`] within the horizon.
    pub fn horizon_accuracy(&self) -> Vec<(usize, f64)> {
        DRIFT_HORIZONS.iter().filter_map(|&h| self.accuracy_at(h).map(|a| (h, a))).collect()
    }

    /// Step-wise mean of several equally long reports.
    pub fn average(reports: &[DriftReport]) -> Result<DriftReport> {
        let first = reports.first().ok_or_else(|| Error::Empty("no drift reports".into()))?;
        if reports.iter().any(|r| r.horizon != first.horizon) {
            return Err(Error::Shape("drift reports of different horizons".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&DriftReport) -> &Vec<f64>| -> Vec<f64> {
            (0..first.horizon).map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n).collect()
        };
        Ok(DriftReport {
            accuracy: mean(&|r| &r.accuracy),
            psnr: mean(&|r| &r.psnr),
            horizon: first.horizon,
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        })
    }
}

/// Compares generated states and decoded frames with reference ones.
pub fn drift_metric(
    generated: &[StateTokens],
    reference: &[StateTokens],
    generated_frames: &[Raster],
    reference_frames: &[Raster],
    seeds: Vec<u64>,
) -> Result<DriftReport> {
    if generated.len() != reference.len() || generated_frames.len() != reference_frames.len() {
        return Err(Error::Shape(format!(
            "generated {} states / {} frames vs reference {} states / {} frames",
            generated.len(),
            generated_frames.len(),
            reference.len(),
            reference_frames.len()
        )));
    }
    if !generated_frames.is_empty() && generated_frames.len() != generated.len() {
        return Err(Error::Shape("frame count differs from state count".into()));
    }
    let mut accuracy = Vec::with_capacity(generated.len());
    for (g, r) in generated.iter().zip(reference) {
        if g.q.len() != r.q.len() {
            return Err(Error::Shape(format!("{} vs {} image tokens", g.q.len(), r.q.len())));
        }
        let hits = g.q.iter().zip(&r.q).filter(|(a, b)| a == b).count();
        accuracy.push(hits as f64 / g.q.len().max(1) as f64);
    }
    let psnr = generated_frames.iter().zip(reference_frames).map(|(a, b)| psnr(a, b)).collect();
    Ok(DriftReport { accuracy, psnr, horizon: generated.len(), seeds })
}

/// Reference for a rollout: the scene of `world_seed` re-rendered along the
/// generated pose sequence and tokenized with the same tokenizer.
pub fn reference_under_controls(
    tokenizer: &Tokenizer,
    world_seed: u64,
    params: &WorldParams,
    poses: &[Pose],
    generated: &[StateTokens],
) -> Result<(Vec<StateTokens>, Vec<Raster>)> {
    let scene = Scene::generate(world_seed, params);
    let frames: Vec<Raster> = poses.iter().map(|p| render_frame(&scene, p, params)).collect();
    let grids = tokenizer.tokenize_episode(&frames)?;
    let states = grids.iter().zip(generated).map(|(g, s)| StateTokens::from_grid(s.pose(), g)).collect();
    Ok((states, frames))
}

/// Held-out next-frame prediction quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextFrameEval {
    /// Fraction of image tokens of the predicted frame equal to the truth.
    pub image_accuracy: f64,
    pub samples: usize,
}

/// A held-out prediction target: episode index and target frame index.
pub type EvalTarget = (usize, usize);

/// Draws `n` targets whose frame index is at least `min_history`.
pub fn eval_targets(episodes: &[TokenEpisode], n: usize, min_history: usize, rng: &mut Rng) -> Result<Vec<EvalTarget>> {
    let eligible: Vec<usize> = (0..episodes.len()).filter(|&i| episodes[i].len() > min_history).collect();
    if eligible.is_empty() {
        return Err(Error::Empty(format!("no episode longer than {min_history} states")));
    }
    Ok((0..n)
        .map(|_| {
            let e = eligible[rng.below(eligible.len())];
            (e, min_history + rng.below(episodes[e].len() - min_history))
        })
        .collect())
}

/// Greedy next-frame image-token accuracy with the true pose tokens of the
/// target frame commanded, using the model's own context length.
pub fn next_frame_accuracy(
    model: &WorldModel,
    episodes: &[TokenEpisode],
    targets: &[EvalTarget],
) -> Result<NextFrameEval> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut rng = Rng::new(0);
    for &(e, t) in targets {
        let ep = episodes.get(e).ok_or_else(|| Error::OutOfRange(format!("episode {e}")))?;
        if t == 0 || t >= ep.len() {
            return Err(Error::OutOfRange(format!("target frame {t} of episode {e}")));
        }
        let start = t.saturating_sub(model.config.ctx_frames);
        let truth = &ep[t];
        let pred = predict_next_state(model, &ep[start..t], Some(truth.pose()), &SamplingPolicy::greedy(), &mut rng)?;
        hits += pred.q.iter().zip(&truth.q).filter(|(a, b)| a == b).count();
        total += truth.q.len();
    }
    Ok(NextFrameEval { image_accuracy: hits as f64 / total.max(1) as f64, samples: targets.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFamily {
    Temporal,
    Multimodal,
    InternalAr,
    Vanilla,
}

/// Attended pairs of one layer family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCost {
    pub family: LayerFamily,
    /// Unmasked (query, key) pairs of one layer and one head.
    pub pairs_per_layer: u64,
    pub layers: u64,
    pub heads: u64,
    /// `pairs_per_layer * layers * heads`.
    pub total_pairs: u64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionCostReport {
    pub variant: Variant,
    pub frames: u64,
    pub state_len: u64,
    pub families: Vec<FamilyCost>,
    pub total_pairs: u64,
    /// Stored keys, values and attention scores of all layers of one
    /// forward pass, at 4 bytes per element.
    pub peak_activation_bytes: u64,
}

impl AttentionCostReport {
    pub fn family(&self, f: LayerFamily) -> Option<&FamilyCost> {
        self.families.iter().find(|c| c.family == f)
    }
}

/// Exact attended-pair counts for `frames` context frames. The internal
/// autoregressive family is counted for one generated frame.
pub fn attention_cost(config: &WorldModelConfig, frames: usize, variant: Variant) -> Result<AttentionCostReport> {
    if frames == 0 {
        return Err(Error::Config("attention cost needs at least one frame".into()));
    }
    let t = frames as u64;
    let s = config.state_len() as u64;
    let heads = config.heads as u64;
    let d = config.d_model as u64;
    let fam = |family, pairs: u64, layers: u64, tokens: u64| FamilyCost {
        family,
        pairs_per_layer: pairs,
        layers,
        heads,
        total_pairs: pairs * layers * heads,
        tokens,
    };
    let families = match variant {
        Variant::Vanilla => {
            let l = t * s + 1;
            vec![fam(LayerFamily::Vanilla, l * (l + 1) / 2, config.vanilla_layers() as u64, l)]
        }
        Variant::Decoupled => vec![
            fam(LayerFamily::Temporal, s * t * (t + 1) / 2, config.n_pairs as u64, t * s),
            fam(LayerFamily::Multimodal, t * s * s, config.n_pairs as u64, t * s),
            fam(LayerFamily::InternalAr, s * (s + 1) / 2, config.ar_layers as u64, s),
        ],
    };
    let total_pairs = families.iter().map(|f| f.total_pairs).sum();
    let peak_elems: u64 = families.iter().map(|f| f.layers * (2 * f.tokens * d + f.pairs_per_layer * heads)).sum();
    Ok(AttentionCostReport {
        variant,
        frames: t,
        state_len: s,
        families,
        total_pairs,
        peak_activation_bytes: 4 * peak_elems,
    })
}

/// The attention layouts the model actually builds for one sequence of
/// `frames` frames of `s` tokens, by family.
pub fn model_layouts(frames: usize, s: usize, variant: Variant) -> Result<Vec<(LayerFamily, AttentionLayout)>> {
    Ok(match variant {
        Variant::Vanilla => vec![(LayerFamily::Vanilla, vanilla_layout(1, frames * s + 1)?)],
        Variant::Decoupled => vec![
            (LayerFamily::Temporal, temporal_layout(1, frames, s)?),
            (LayerFamily::Multimodal, frame_layout(frames, s, GroupMask::Full, None)?),
            (LayerFamily::InternalAr, frame_layout(1, s, GroupMask::Causal, None)?),
        ],
    })
}

/// Materializes the dense `n_queries x n_keys` boolean mask of a layout.
pub fn dense_mask(layout: &AttentionLayout) -> Vec<bool> {
    let nk = layout.n_keys;
    let mut m = vec![false; layout.n_queries * nk];
    for g in &layout.groups {
        let lk = g.keys.len();
        for (qi, &q) in g.queries.iter().enumerate() {
            for (ki, &k) in g.keys.iter().enumerate() {
                if g.mask.allows(lk, qi, ki) {
                    m[q * nk + k] = true;
                }
            }
        }
    }
    m
}

/// Realized motion of a generated frame: the candidate relative pose whose
/// render from `prev` best matches `frame` (squared pixel error),
/// found by a coarse lattice scan followed by hill climbing from the four
/// best coarse cells. Returns the tokens of
/// the best candidate.
pub fn realized_pose_tokens(
    scene: &Scene,
    params: &WorldParams,
    bins: &PoseBinning,
    prev: &Pose,
    frame: &Raster,
) -> Result<PoseTokens> {
    let (a, b, c) = (bins.alpha as i64, bins.beta as i64, bins.gamma as i64);
    let err = |phi: i64, ix: i64, iy: i64| -> Result<f64> {
        let t = PoseTokens { phi: phi as usize, v: (ix * c + iy) as usize };
        let d = detokenize_pose(&t, bins)?;
        let r = render_frame(scene, &crate::pose_codec::compose(prev, &d), params);
        Ok(r.pixels.iter().zip(&frame.pixels).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>())
    };
    let coarse = 4;
    let mut best = (f64::INFINITY, 0, 0, 0);
    let mut coarse_best = Vec::new();
    for phi in (coarse / 2..a).step_by(coarse as usize) {
        for ix in (coarse / 2..b).step_by(coarse as usize) {
            for iy in (coarse / 2..c).step_by(coarse as usize) {
                coarse_best.push((err(phi, ix, iy)?, phi, ix, iy));
            }
        }
    }
    let mut seeds = coarse_best;
    seeds.sort_by(|l, r| l.0.total_cmp(&r.0));
    seeds.truncate(4);
    for &(mut cur) in &seeds {
        loop {
            let mut next = cur;
            for phi in (cur.1 - 1).max(0)..=(cur.1 + 1).min(a - 1) {
                for ix in (cur.2 - 1).max(0)..=(cur.2 + 1).min(b - 1) {
                    for iy in (cur.3 - 1).max(0)..=(cur.3 + 1).min(c - 1) {
                        let e = err(phi, ix, iy)?;
                        if e < next.0 {
                            next = (e, phi, ix, iy);
                        }
                    }
                }
            }
            if next.1 == cur.1 && next.2 == cur.2 && next.3 == cur.3 {
                break;
            }
            cur = next;
        }
        if cur.0 < best.0 {
            best = cur;
        }
    }
    Ok(PoseTokens { phi: best.1 as usize, v: (best.2 * c + best.3) as usize })
}

/// L1 distance between two pose-token pairs in bin units
/// (`|dphi| + |dx bin| + |dy bin|`).
pub fn pose_token_gap(a: &PoseTokens, b: &PoseTokens, bins: &PoseBinning) -> usize {
    let (ax, ay) = bins.split_v(a.v);
    let (bx, by) = bins.split_v(b.v);
    a.phi.abs_diff(b.phi) + ax.abs_diff(bx) + ay.abs_diff(by)
}
