use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stworld::formats::{read_dwep, write_dwep, Checkpoint, EpisodeData, MetricsRecord};
use stworld::model::{
    sample_windows, teacher_forced_loss, TeacherForcedLoss, TokenEpisode, Variant, WorldModel, WorldTrainer,
};
use stworld::numerics::Rng;
use stworld::pose_codec::RelativePose;
use stworld::rollout::{
    attention_cost, decode_rollout, drift_metric, encode_episode, eval_targets, next_frame_accuracy,
    reference_under_controls, rollout_states, AttentionCostReport, DecodedRollout, DriftReport, NextFrameEval,
};
use stworld::tokenizer::{reconstruction_psnr, Tokenizer, TokenizerTrainer};
use stworld::world::{episode_seed, generate_episode};

use crate::config::{check_model_fits_tokenizer, RunConfig};

pub fn episode_file_name(seed: u64, index: usize) -> String {
    format!("ep_{seed}_{index}.dwep")
}

/// Parses `ep_{seed}_{index}.dwep` back into its parts.
pub fn parse_episode_file_name(path: &Path) -> Option<(u64, u64)> {
    let stem = path.file_name()?.to_str()?.strip_suffix(".dwep")?.strip_prefix("ep_")?;
    let (s, i) = stem.split_once('_')?;
    Some((s.parse().ok()?, i.parse().ok()?))
}

pub fn gen_data(cfg: &RunConfig, seed: u64, count: usize, length: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let ep = generate_episode(episode_seed(seed, i as u64), length, &cfg.world);
        let path = out_dir.join(episode_file_name(seed, i));
        write_dwep(&path, &ep.poses, &ep.frames).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// Every `.dwep` file of `dir`, in file-name order.
pub fn load_episodes(dir: &Path) -> Result<Vec<(PathBuf, EpisodeData)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dwep"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .dwep episodes in {}", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let ep = read_dwep(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok((p, ep))
        })
        .collect()
}

fn data_dir<'a>(arg: Option<&'a Path>, cfg: &'a RunConfig) -> Result<&'a Path> {
    arg.or(cfg.data_dir.as_deref()).ok_or_else(|| anyhow!("no data directory given (--data or data_dir in the config)"))
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    if !path.exists() {
        bail!("tokenizer checkpoint {} not found; run train-tokenizer first", path.display());
    }
    let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Tokenizer::from_checkpoint(&ck).with_context(|| format!("loading tokenizer from {}", path.display()))?.0)
}

pub fn load_world(path: &Path) -> Result<WorldModel> {
    if !path.exists() {
        bail!("world-model checkpoint {} not found; run train-world first", path.display());
    }
    let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(WorldModel::from_checkpoint(&ck).with_context(|| format!("loading world model from {}", path.display()))?.0)
}

/// Errors naming the first raster dimension of `ep` the tokenizer does not
/// accept.
pub fn check_episode_fits_tokenizer(ep: &EpisodeData, tok: &Tokenizer) -> Result<()> {
    let f = &ep.frames[0];
    let c = &tok.config;
    for (name, got, want) in
        [("height", f.height, c.height), ("width", f.width, c.width), ("channels", f.channels, c.channels)]
    {
        if got != want {
            bail!("episode raster {name} {got} does not match tokenizer {name} {want}");
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    pub metrics: PathBuf,
    pub resume: bool,
    /// Stop after this many steps in this invocation.
    pub max_steps: Option<u64>,
    /// Write the checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Ablation flags as typed, stored in the checkpoint config.
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub step: u64,
    pub total_steps: u64,
    pub last_loss: Option<f64>,
}

fn load_metrics(path: &Path, resume: bool) -> Result<MetricsRecord> {
    if resume && path.exists() {
        let text = std::fs::read_to_string(path)?;
        return MetricsRecord::from_json(&text).with_context(|| format!("parsing metrics {}", path.display()));
    }
    Ok(MetricsRecord::default())
}

/// Moves new points of `fresh` into `all`, stamping wall-clock seconds.
fn merge_metrics(all: &mut MetricsRecord, fresh: &mut MetricsRecord, wall: f64) -> Result<()> {
    for (name, points) in std::mem::take(&mut fresh.series) {
        for p in points {
            all.push(&name, p.step, p.value, Some(p.wall.unwrap_or(wall)))?;
        }
    }
    Ok(())
}

fn with_flags(mut ck: Checkpoint, flags: &[String]) -> Result<Checkpoint> {
    let mut js: Value = serde_json::from_str(&ck.config_json)?;
    js["cli_flags"] = serde_json::to_value(flags)?;
    ck.config_json = serde_json::to_string(&js)?;
    Ok(ck)
}

fn stored_flags(ck: &Checkpoint) -> Result<Vec<String>> {
    let js: Value = serde_json::from_str(&ck.config_json)?;
    Ok(match js.get("cli_flags") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Vec::new(),
    })
}

/// Shared step loop of both trainers. `step` returns `None` once training
/// is complete; `save` drains the trainer's new metric points into its
/// argument and returns the checkpoint.
fn train_loop<T>(
    opts: &TrainOptions,
    trainer: &mut T,
    mut step: impl FnMut(&mut T) -> Result<Option<f64>>,
    mut save: impl FnMut(&mut T, &mut MetricsRecord) -> Result<Checkpoint>,
    flags: &[String],
) -> Result<Option<f64>> {
    let start = Instant::now();
    let mut metrics = load_metrics(&opts.metrics, opts.resume)?;
    let mut write = |trainer: &mut T, metrics: &mut MetricsRecord| -> Result<()> {
        let mut fresh = MetricsRecord::default();
        let ck = with_flags(save(trainer, &mut fresh)?, flags)?;
        merge_metrics(metrics, &mut fresh, start.elapsed().as_secs_f64())?;
        ck.write(&opts.out).with_context(|| format!("writing {}", opts.out.display()))?;
        std::fs::write(&opts.metrics, metrics.to_json()?)
            .with_context(|| format!("writing {}", opts.metrics.display()))?;
        Ok(())
    };
    let mut done = 0u64;
    let mut last = None;
    while opts.max_steps.map_or(true, |m| done < m) {
        match step(trainer)? {
            Some(l) => last = Some(l),
            None => break,
        }
        done += 1;
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
            write(trainer, &mut metrics)?;
        }
    }
    write(trainer, &mut metrics)?;
    Ok(last)
}

pub fn train_tokenizer(cfg: &RunConfig, seed: u64, data: Option<&Path>, opts: &TrainOptions) -> Result<TrainSummary> {
    let episodes: Vec<Vec<_>> = load_episodes(data_dir(data, cfg)?)?.into_iter().map(|(_, e)| e.frames).collect();
    let (mut trainer, flags) = if opts.resume && opts.out.exists() {
        let ck = Checkpoint::read(&opts.out)?;
        let flags = stored_flags(&ck)?;
        (TokenizerTrainer::from_checkpoint(&ck).context("resuming tokenizer training")?, flags)
    } else {
        (TokenizerTrainer::new(Tokenizer::new(cfg.tokenizer.clone(), seed)?, seed), opts.flags.clone())
    };
    let first = &episodes[0][0];
    let c = &trainer.tokenizer.config;
    if (first.height, first.width, first.channels) != (c.height, c.width, c.channels) {
        bail!(
            "episode rasters are {}x{}x{} but the tokenizer expects {}x{}x{}",
            first.height,
            first.width,
            first.channels,
            c.height,
            c.width,
            c.channels
        );
    }
    let last = train_loop(
        opts,
        &mut trainer,
        |t| if t.is_done() { Ok(None) } else { Ok(Some(t.step(&episodes)?)) },
        |t, fresh| {
            *fresh = std::mem::take(&mut t.metrics);
            Ok(t.to_checkpoint()?)
        },
        &flags,
    )?;
    Ok(TrainSummary { step: trainer.state.step, total_steps: trainer.total_steps(), last_loss: last })
}

/// Tokenizes every episode of `dir` with `tok`.
pub fn tokenize_dir(
    dir: &Path,
    tok: &Tokenizer,
    cfg: &stworld::model::WorldModelConfig,
) -> Result<Vec<(PathBuf, TokenEpisode)>> {
    check_model_fits_tokenizer(cfg, &tok.config)?;
    load_episodes(dir)?
        .into_iter()
        .map(|(p, ep)| {
            check_episode_fits_tokenizer(&ep, tok).with_context(|| p.display().to_string())?;
            Ok((p, encode_episode(tok, &cfg.binning, &ep.frames, &ep.poses)?))
        })
        .collect()
}

pub fn train_world(
    cfg: &RunConfig,
    seed: u64,
    data: Option<&Path>,
    tokenizer: Option<&Path>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let tok_path = tokenizer.or(cfg.tokenizer_checkpoint.as_deref()).ok_or_else(|| {
        anyhow!("world-model training needs a tokenizer checkpoint (--tokenizer or tokenizer_checkpoint)")
    })?;
    let tok = load_tokenizer(tok_path)?;
    let (mut trainer, flags) = if opts.resume && opts.out.exists() {
        let ck = Checkpoint::read(&opts.out)?;
        let flags = stored_flags(&ck)?;
        (WorldTrainer::from_checkpoint(&ck).context("resuming world-model training")?, flags)
    } else {
        (WorldTrainer::new(WorldModel::new(cfg.model.clone(), seed)?, seed), opts.flags.clone())
    };
    let episodes: Vec<TokenEpisode> =
        tokenize_dir(data_dir(data, cfg)?, &tok, &trainer.model.config)?.into_iter().map(|(_, e)| e).collect();
    let last = train_loop(
        opts,
        &mut trainer,
        |t| if t.is_done() { Ok(None) } else { Ok(Some(t.step(&episodes)?)) },
        |t, fresh| {
            *fresh = std::mem::take(&mut t.metrics);
            Ok(t.to_checkpoint()?)
        },
        &flags,
    )?;
    Ok(TrainSummary { step: trainer.state.step, total_steps: trainer.model.config.steps, last_loss: last })
}

/// One control of a controls file: `[dtheta, dx, dy]`, an object with
/// those keys, or `null` for an uncontrolled step.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ControlSpec {
    Triple(f64, f64, f64),
    Named { dtheta: f64, dx: f64, dy: f64 },
}

impl ControlSpec {
    pub fn delta(&self) -> RelativePose {
        match *self {
            Self::Triple(t, x, y) | Self::Named { dtheta: t, dx: x, dy: y } => RelativePose::new(t, x, y),
        }
    }
}

pub fn parse_controls(text: &str) -> Result<Vec<Option<RelativePose>>> {
    let specs: Vec<Option<ControlSpec>> =
        serde_json::from_str(text).context("controls must be a JSON list of [dtheta, dx, dy]")?;
    Ok(specs.into_iter().map(|c| c.map(|c| c.delta())).collect())
}

#[derive(Clone, Debug, Default)]
pub struct RolloutArgs {
    pub episode: PathBuf,
    pub steps: usize,
    pub controls: Option<PathBuf>,
    /// Frames of the episode used as context (default: up to `T_ctx`).
    pub seed_frames: Option<usize>,
    /// Scene seed for the re-rendered reference; derived from the episode
    /// file name when it follows the `ep_{seed}_{index}.dwep` pattern.
    pub scene_seed: Option<u64>,
    pub out: PathBuf,
    pub report: Option<PathBuf>,
}

pub struct RolloutOutcome {
    pub decoded: DecodedRollout,
    pub report: Option<DriftReport>,
}

pub fn rollout(
    cfg: &RunConfig,
    seed: u64,
    tok: &Tokenizer,
    model: &WorldModel,
    args: &RolloutArgs,
) -> Result<RolloutOutcome> {
    check_model_fits_tokenizer(&model.config, &tok.config)?;
    let ep = read_dwep(&args.episode).with_context(|| format!("reading {}", args.episode.display()))?;
    check_episode_fits_tokenizer(&ep, tok)?;
    let n = ep.frames.len();
    let k = args.seed_frames.unwrap_or(model.config.ctx_frames.min(n));
    if k == 0 || k > n {
        bail!("seed_frames {k} must be between 1 and the episode length {n}");
    }
    let deltas = match &args.controls {
        Some(p) => parse_controls(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Vec::new(),
    };
    if deltas.len() > args.steps {
        bail!("controls file has {} entries for {} steps", deltas.len(), args.steps);
    }
    let bins = &model.config.binning;
    let controls = deltas
        .iter()
        .map(|d| d.map(|d| stworld::pose_codec::tokenize_pose(&d, bins)).transpose())
        .collect::<stworld::Result<Vec<_>>>()?;
    let seed_states = encode_episode(tok, bins, &ep.frames[..k], &ep.poses[..k])?;
    let start = k.saturating_sub(model.config.ctx_frames);
    let mut rng = Rng::new(seed);
    let states = rollout_states(model, &seed_states[start..], args.steps, &controls, &cfg.sampling, &mut rng)?;
    let decoded = decode_rollout(tok, bins, &ep.poses[k - 1], states)?;
    if !decoded.frames.is_empty() {
        write_dwep(&args.out, &decoded.poses, &decoded.frames)
            .with_context(|| format!("writing {}", args.out.display()))?;
    } else {
        log::warn!("zero-step rollout; no episode written");
    }
    let scene = args.scene_seed.or_else(|| parse_episode_file_name(&args.episode).map(|(s, i)| episode_seed(s, i)));
    let report = if decoded.states.is_empty() {
        None
    } else if let Some(scene) = scene {
        let (ref_states, ref_frames) =
            reference_under_controls(tok, scene, &cfg.world.sanitized(), &decoded.poses, &decoded.states)?;
        Some(drift_metric(&decoded.states, &ref_states, &decoded.frames, &ref_frames, vec![seed])?)
    } else if n >= k + args.steps && deltas.is_empty() {
        let frames = &ep.frames[k..k + args.steps];
        let truth = encode_episode(tok, bins, frames, &ep.poses[k..k + args.steps])?;
        Some(drift_metric(&decoded.states, &truth, &decoded.frames, frames, vec![seed])?)
    } else {
        log::warn!("no reference available for {}; drift report skipped", args.episode.display());
        None
    };
    if let (Some(path), Some(r)) = (&args.report, &report) {
        std::fs::write(path, serde_json::to_string_pretty(r)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(RolloutOutcome { decoded, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub teacher_forced: TeacherForcedLoss,
    pub next_frame: NextFrameEval,
    /// Tokenizer reconstruction PSNR and the mean-pixel baseline.
    pub reconstruction_psnr: (f64, f64),
}

pub fn eval(
    cfg: &RunConfig,
    seed: u64,
    tok: &Tokenizer,
    model: &WorldModel,
    data: Option<&Path>,
    targets: usize,
) -> Result<EvalReport> {
    let dir = data_dir(data, cfg)?;
    let episodes: Vec<TokenEpisode> = tokenize_dir(dir, tok, &model.config)?.into_iter().map(|(_, e)| e).collect();
    let frames: Vec<_> = load_episodes(dir)?.into_iter().map(|(_, e)| e.frames).collect();
    let mut rng = Rng::new(seed);
    let window = stworld::model::training_window(&model.config, &episodes)?;
    let windows = sample_windows(&episodes, targets.max(1), window, &mut rng)?;
    let teacher_forced = teacher_forced_loss(model, &windows)?;
    let min_history = model.config.ctx_frames.min(episodes.iter().map(Vec::len).max().unwrap_or(1) - 1);
    let picks = eval_targets(&episodes, targets.max(1), min_history, &mut rng)?;
    let next_frame = next_frame_accuracy(model, &episodes, &picks)?;
    Ok(EvalReport {
        episodes: episodes.len(),
        teacher_forced,
        next_frame,
        reconstruction_psnr: reconstruction_psnr(tok, &frames)?,
    })
}

/// One bench entry: the analytic report, optionally with the measured
/// growth of the process peak resident set during one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    #[serde(flatten)]
    pub report: AttentionCostReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_peak_rss_growth_bytes: Option<u64>,
}

/// Peak resident set size of this process (Linux only).
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub fn bench(cfg: &RunConfig, frames: &[usize], measure: bool) -> Result<Vec<BenchEntry>> {
    let mut out = Vec::with_capacity(2 * frames.len());
    for variant in [Variant::Vanilla, Variant::Decoupled] {
        for &t in frames {
            let mut model_cfg = cfg.model.clone();
            model_cfg.variant = variant;
            model_cfg.ctx_frames = model_cfg.ctx_frames.max(t);
            let report = attention_cost(&model_cfg, t, variant)?;
            let measured = if measure { measure_forward(&model_cfg, t)? } else { None };
            out.push(BenchEntry { report, measured_peak_rss_growth_bytes: measured });
        }
    }
    Ok(out)
}

fn measure_forward(model_cfg: &stworld::model::WorldModelConfig, frames: usize) -> Result<Option<u64>> {
    let Some(before) = peak_rss_bytes() else {
        return Ok(None);
    };
    let model = WorldModel::new(model_cfg.clone(), 0)?;
    let s = model.config.state_len();
    let mut rng = Rng::new(0);
    let seq: Vec<_> = (0..frames + 1)
        .map(|_| {
            let flat: Vec<usize> = (0..s).map(|j| rng.below(model.config.vocab_at(j))).collect();
            stworld::model::StateTokens::from_flat(&flat)
        })
        .collect::<stworld::Result<_>>()?;
    let mut g = stworld::numerics::Graph::inference();
    model.logits_graph(&mut g, &model.params, &[seq], None)?;
    drop(g);
    Ok(peak_rss_bytes().map(|after| after.saturating_sub(before)))
}
