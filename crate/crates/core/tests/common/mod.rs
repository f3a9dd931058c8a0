#![allow(dead_code)]

use stworld::model::{Logits, StateTokens, WorldModel, WorldModelConfig};
use stworld::numerics::{Graph, ParamStore, Rng};
use stworld::pose_codec::PoseBinning;

/// Two-frame, six-token world model small enough for exhaustive probes.
pub fn toy_config() -> WorldModelConfig {
    WorldModelConfig {
        d_model: 8,
        heads: 2,
        n_pairs: 2,
        ar_layers: 2,
        ctx_frames: 4,
        grid_height: 1,
        grid_width: 4,
        image_vocab: 8,
        binning: PoseBinning { alpha: 4, beta: 2, gamma: 2, ..PoseBinning::default() },
        init_std: 0.3,
        zero_init_heads: false,
        batch_size: 2,
        ..WorldModelConfig::default()
    }
}

pub fn random_state(cfg: &WorldModelConfig, rng: &mut Rng) -> StateTokens {
    StateTokens {
        phi: rng.below(cfg.phi_vocab()),
        v: rng.below(cfg.v_vocab()),
        q: (0..cfg.grid_height * cfg.grid_width).map(|_| rng.below(cfg.image_vocab)).collect(),
    }
}

pub fn random_seq(cfg: &WorldModelConfig, frames: usize, rng: &mut Rng) -> Vec<StateTokens> {
    (0..frames).map(|_| random_state(cfg, rng)).collect()
}

/// A different token at position `j` of the state.
pub fn bump(cfg: &WorldModelConfig, s: &mut StateTokens, j: usize) {
    let v = cfg.vocab_at(j);
    s.set(j, (s.get(j) + 1) % v);
}

/// Teacher-forced logits of one sequence, as `[target frame][position]`
/// rows.
pub fn logit_rows(model: &WorldModel, store: &ParamStore<f64>, seq: &[StateTokens]) -> Vec<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let s = cfg.state_len();
    let mut g = Graph::<f64>::inference();
    let lg: Logits = model.logits_graph(&mut g, store, &[seq.to_vec()], None).unwrap();
    let frames = seq.len() - 1;
    (0..frames)
        .map(|t| {
            (0..s)
                .map(|j| match j {
                    0 => g.value(lg.phi).row(t).to_vec(),
                    1 => g.value(lg.v).row(t).to_vec(),
                    _ => g.value(lg.q).row(t * (s - 2) + j - 2).to_vec(),
                })
                .collect()
        })
        .collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
