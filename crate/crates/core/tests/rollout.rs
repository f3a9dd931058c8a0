mod common;

use common::random_seq;
use stworld::model::{StateTokens, Variant, WorldModel, WorldModelConfig};
use stworld::numerics::{Rng, Tensor};
use stworld::pose_codec::{tokenize_pose, Pose, PoseBinning, PoseTokens, RelativePose};
use stworld::rollout::{
    attention_cost, controls_from_deltas, decode_rollout, dense_mask, drift_metric, encode_episode, model_layouts,
    pose_token_gap, predict_next_state, realized_pose_tokens, rollout_states, rollout_states_with_window, sample_token,
    DriftReport, LayerFamily, Sampling, SamplingPolicy,
};
use stworld::tokenizer::{Tokenizer, TokenizerConfig};
use stworld::world::{arc_step, generate_episode, render_frame, Scene, WorldParams};

fn small_model(variant: Variant, internal_ar: bool) -> WorldModel {
    let cfg = WorldModelConfig {
        variant,
        internal_ar,
        d_model: 16,
        heads: 2,
        n_pairs: 1,
        ar_layers: 1,
        ctx_frames: 3,
        image_vocab: 32,
        init_std: 0.5,
        zero_init_heads: false,
        ..WorldModelConfig::default()
    };
    WorldModel::new(cfg, 17).unwrap()
}

fn small_tokenizer() -> Tokenizer {
    let cfg = TokenizerConfig { widths: (4, 8), code_dim: 4, codebook_size: 32, ..TokenizerConfig::default() };
    Tokenizer::new(cfg, 2).unwrap()
}

#[test]
fn control_forces_pose_tokens() {
    let m = small_model(Variant::Decoupled, true);
    let mut rng = Rng::new(1);
    let hist = random_seq(&m.config, 2, &mut rng);
    let ctl = PoseTokens { phi: 5, v: 7 };
    let out = predict_next_state(&m, &hist, Some(ctl), &SamplingPolicy::default(), &mut rng).unwrap();
    assert_eq!((out.phi, out.v), (5, 7));
    let bad = PoseTokens { phi: m.config.phi_vocab(), v: 0 };
    assert!(predict_next_state(&m, &hist, Some(bad), &SamplingPolicy::default(), &mut rng).is_err());
    assert!(predict_next_state(&m, &[], None, &SamplingPolicy::default(), &mut rng).is_err());
    let long = random_seq(&m.config, 4, &mut rng);
    assert!(predict_next_state(&m, &long, None, &SamplingPolicy::default(), &mut rng).is_err());
}

#[test]
fn sampling_is_deterministic_per_seed() {
    for variant in [Variant::Decoupled, Variant::Vanilla] {
        let m = small_model(variant, true);
        let hist = random_seq(&m.config, 2, &mut Rng::new(2));
        let greedy = SamplingPolicy::greedy();
        let a = predict_next_state(&m, &hist, None, &greedy, &mut Rng::new(3)).unwrap();
        let b = predict_next_state(&m, &hist, None, &greedy, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let topk = SamplingPolicy::default();
        let c = predict_next_state(&m, &hist, None, &topk, &mut Rng::new(5)).unwrap();
        let d = predict_next_state(&m, &hist, None, &topk, &mut Rng::new(5)).unwrap();
        assert_eq!(c, d);
    }
}

#[test]
fn greedy_output_replays_as_argmax_of_internal_logits() {
    let m = small_model(Variant::Decoupled, true);
    let c = &m.config;
    let hist = random_seq(c, 3, &mut Rng::new(6));
    let out = predict_next_state(&m, &hist, None, &SamplingPolicy::greedy(), &mut Rng::new(0)).unwrap();
    let fused = m.fused_states(&m.params, &hist).unwrap();
    let s = c.state_len();
    let last = Tensor::new(vec![s, c.d_model], fused.data()[2 * s * c.d_model..].to_vec()).unwrap();
    let flat = out.flat();
    for j in 0..s {
        let rows = m.internal_ar_logits(&m.params, &last, &flat[..j]).unwrap();
        assert_eq!(stworld::rollout::argmax(&rows[j]), flat[j], "position {j}");
    }
}

#[test]
fn top_k_sampling_properties() {
    let logits = [0.1f32, 2.0, -1.0, 1.5, 1.9];
    let mut rng = Rng::new(7);
    assert_eq!(sample_token(&logits, Sampling::TopK { k: 1, temperature: 1.0 }, &mut rng).unwrap(), 1);
    for _ in 0..200 {
        let t = sample_token(&logits, Sampling::TopK { k: 3, temperature: 1.0 }, &mut rng).unwrap();
        assert!([1, 3, 4].contains(&t));
    }
    assert!(sample_token(&logits, Sampling::TopK { k: 0, temperature: 1.0 }, &mut rng).is_err());
    assert!(sample_token(&logits, Sampling::TopK { k: 2, temperature: 0.0 }, &mut rng).is_err());
    assert!(sample_token(&[], Sampling::Greedy, &mut rng).is_err());
    assert!(sample_token(&[f32::NAN], Sampling::Greedy, &mut rng).is_err());
}

#[test]
fn single_step_rollout_equals_prediction() {
    let m = small_model(Variant::Decoupled, true);
    let seed = random_seq(&m.config, 2, &mut Rng::new(8));
    let p = SamplingPolicy::default();
    let a = rollout_states(&m, &seed, 1, &[], &p, &mut Rng::new(9)).unwrap();
    let b = predict_next_state(&m, &seed, None, &p, &mut Rng::new(9)).unwrap();
    assert_eq!(a, vec![b]);
}

#[test]
fn sliding_and_growing_windows_agree_until_context_is_full() {
    let m = small_model(Variant::Decoupled, true);
    let t = m.config.ctx_frames;
    let seed = random_seq(&m.config, 1, &mut Rng::new(10));
    let p = SamplingPolicy::greedy();
    let slide = rollout_states(&m, &seed, t + 3, &[], &p, &mut Rng::new(1)).unwrap();
    let grow = rollout_states_with_window(&m, &seed, t + 3, &[], &p, &mut Rng::new(1), None).unwrap();
    assert_eq!(slide[..t], grow[..t]);
}

#[test]
fn long_rollout_decodes_every_step_and_keeps_controls() {
    let m = small_model(Variant::Decoupled, true);
    let tok = small_tokenizer();
    let bins = m.config.binning.clone();
    let seed = random_seq(&m.config, 2, &mut Rng::new(11));
    let mut controls: Vec<Option<PoseTokens>> =
        (0..40).map(|i| if i % 3 == 0 { None } else { Some(PoseTokens { phi: i % 64, v: (7 * i) % 1024 }) }).collect();
    controls[5] = Some(PoseTokens { phi: 0, v: 0 });
    let states = rollout_states(&m, &seed, 40, &controls, &SamplingPolicy::default(), &mut Rng::new(2)).unwrap();
    for (s, c) in states.iter().zip(&controls) {
        if let Some(c) = c {
            assert_eq!(s.pose(), *c);
        }
    }
    let out = decode_rollout(&tok, &bins, &Pose::new(0.0, 0.0, 0.0), states).unwrap();
    assert_eq!(out.frames.len(), 40);
    assert_eq!(out.poses.len(), 40);
    assert_eq!((out.frames[0].height, out.frames[0].width), (32, 64));
}

#[test]
fn simultaneous_and_vanilla_variants_roll_out() {
    for (v, ar) in [(Variant::Decoupled, false), (Variant::Vanilla, true)] {
        let m = small_model(v, ar);
        let seed = random_seq(&m.config, 2, &mut Rng::new(12));
        let out = rollout_states(&m, &seed, 5, &[], &SamplingPolicy::default(), &mut Rng::new(3)).unwrap();
        assert_eq!(out.len(), 5);
        for s in &out {
            s.validate(&m.config).unwrap();
        }
    }
}

#[test]
fn straight_and_curved_controls_give_distinct_trajectories() {
    let m = small_model(Variant::Decoupled, true);
    let tok = small_tokenizer();
    let bins = m.config.binning.clone();
    let seed = random_seq(&m.config, 2, &mut Rng::new(13));
    let straight = controls_from_deltas(&vec![arc_step(1.0, 0.0); 10], &bins).unwrap();
    let curved = controls_from_deltas(&vec![arc_step(1.0, 0.2); 10], &bins).unwrap();
    let p = SamplingPolicy::default();
    let a = rollout_states(&m, &seed, 10, &straight, &p, &mut Rng::new(4)).unwrap();
    let b = rollout_states(&m, &seed, 10, &curved, &p, &mut Rng::new(4)).unwrap();
    let start = Pose::new(0.0, 0.0, 0.0);
    let da = decode_rollout(&tok, &bins, &start, a).unwrap();
    let db = decode_rollout(&tok, &bins, &start, b).unwrap();
    let (ya, yb) = (da.poses.last().unwrap().y, db.poses.last().unwrap().y);
    assert!(ya.abs() < 1e-9 + 10.0 * bins.y_bin_width());
    assert!(yb - ya > 3.0 * bins.y_bin_width(), "{ya} {yb}");
}

#[test]
fn drift_metric_identity_and_random_baseline() {
    let cfg = WorldModelConfig::default();
    let mut rng = Rng::new(14);
    let reference = random_seq(&cfg, 40, &mut rng);
    let frames = generate_episode(3, 40, &WorldParams::default()).frames;
    let same = drift_metric(&reference, &reference, &frames, &frames, vec![3]).unwrap();
    assert!(same.accuracy.iter().all(|&a| a == 1.0));
    assert!(same.psnr.iter().all(|&p| p == 100.0));
    assert_eq!(same.horizon_accuracy(), vec![(10, 1.0), (25, 1.0), (40, 1.0)]);
    let mut total = 0.0;
    let trials = 300;
    for _ in 0..trials {
        let gen = random_seq(&cfg, 40, &mut rng);
        total += drift_metric(&gen, &reference, &[], &[], vec![]).unwrap().mean_accuracy();
    }
    let mean = total / trials as f64;
    assert!((mean - 1.0 / 256.0).abs() < 0.001, "{mean}");
    assert!(drift_metric(&reference[..3], &reference, &[], &[], vec![]).is_err());
    let avg = DriftReport::average(&[same.clone(), same]).unwrap();
    assert_eq!(avg.seeds, vec![3, 3]);
    assert_eq!(avg.accuracy_at(40), Some(1.0));
    assert_eq!(avg.accuracy_at(41), None);
}

#[test]
fn attention_cost_small_example() {
    let cfg = WorldModelConfig {
        grid_height: 1,
        grid_width: 1,
        n_pairs: 1,
        ar_layers: 1,
        heads: 1,
        d_model: 4,
        ..WorldModelConfig::default()
    };
    assert_eq!(cfg.state_len(), 3);
    let van = attention_cost(&WorldModelConfig { n_pairs: 0, ..cfg.clone() }, 3, Variant::Vanilla).unwrap();
    // 9 tokens plus [sos]
    assert_eq!(van.total_pairs, 10 * 11 / 2);
    let dec = attention_cost(&cfg, 3, Variant::Decoupled).unwrap();
    assert_eq!(dec.family(LayerFamily::Temporal).unwrap().pairs_per_layer, 18);
    assert_eq!(dec.family(LayerFamily::Multimodal).unwrap().pairs_per_layer, 27);
    assert_eq!(dec.family(LayerFamily::InternalAr).unwrap().pairs_per_layer, 6);
    assert!(attention_cost(&cfg, 0, Variant::Decoupled).is_err());
}

#[test]
fn attention_cost_matches_mask_summation_sweep() {
    for s_img in 1..=32usize {
        let cfg = WorldModelConfig { grid_height: 1, grid_width: s_img, ..WorldModelConfig::default() };
        let s = cfg.state_len();
        for t in 1..=16usize {
            for variant in [Variant::Decoupled, Variant::Vanilla] {
                let report = attention_cost(&cfg, t, variant).unwrap();
                for (family, layout) in model_layouts(t, s, variant).unwrap() {
                    let counted = dense_mask(&layout).iter().filter(|&&b| b).count() as u64;
                    assert_eq!(
                        report.family(family).unwrap().pairs_per_layer,
                        counted,
                        "{variant:?} {family:?} T={t} S={s}"
                    );
                }
            }
        }
    }
}

#[test]
fn attention_cost_scaling_ratios() {
    let cfg = WorldModelConfig::default();
    let pairs = |t, v| attention_cost(&cfg, t, v).unwrap();
    let van = pairs(10, Variant::Vanilla).total_pairs as f64 / pairs(5, Variant::Vanilla).total_pairs as f64;
    assert!(van > 3.5, "{van}");
    let fusion = |t| {
        let r = pairs(t, Variant::Decoupled);
        (r.family(LayerFamily::Temporal).unwrap().pairs_per_layer
            + r.family(LayerFamily::Multimodal).unwrap().pairs_per_layer) as f64
    };
    let dec = fusion(10) / fusion(5);
    assert!(dec < 2.5, "{dec}");
    assert!(pairs(10, Variant::Vanilla).peak_activation_bytes > pairs(10, Variant::Decoupled).peak_activation_bytes);
}

#[test]
fn encode_episode_uses_zero_first_delta() {
    let tok = small_tokenizer();
    let bins = PoseBinning::default();
    let ep = generate_episode(5, 6, &WorldParams::default());
    let states = encode_episode(&tok, &bins, &ep.frames, &ep.poses).unwrap();
    assert_eq!(states.len(), 6);
    assert_eq!(states[0].pose(), tokenize_pose(&RelativePose::new(0.0, 0.0, 0.0), &bins).unwrap());
    assert_eq!(states[0].q.len(), 32);
    assert!(encode_episode(&tok, &bins, &ep.frames, &ep.poses[..5]).is_err());
}

#[test]
fn realized_pose_search_recovers_clean_motion() {
    let params = WorldParams::default();
    let bins = PoseBinning::default();
    let scene = Scene::generate(21, &params);
    let prev = Pose::new(0.3, 10.0, 6.0);
    for (dtheta, dx, dy) in [(0.0, 1.0, 0.0), (0.15, 1.2, 0.1), (-0.2, 0.5, -0.05)] {
        let tokens = tokenize_pose(&RelativePose::new(dtheta, dx, dy), &bins).unwrap();
        let delta = stworld::pose_codec::detokenize_pose(&tokens, &bins).unwrap();
        let frame = render_frame(&scene, &stworld::pose_codec::compose(&prev, &delta), &params);
        let found = realized_pose_tokens(&scene, &params, &bins, &prev, &frame).unwrap();
        assert!(pose_token_gap(&found, &tokens, &bins) <= 1, "{found:?} vs {tokens:?}");
    }
}

#[test]
fn state_tokens_round_trip_through_decode() {
    let tok = small_tokenizer();
    let cfg = WorldModelConfig { image_vocab: 32, ..WorldModelConfig::default() };
    let states = random_seq(&cfg, 3, &mut Rng::new(15));
    let out = decode_rollout(&tok, &cfg.binning, &Pose::new(0.0, 0.0, 0.0), states.clone()).unwrap();
    assert_eq!(out.states, states);
    let empty = decode_rollout(&tok, &cfg.binning, &Pose::new(0.0, 0.0, 0.0), Vec::<StateTokens>::new()).unwrap();
    assert!(empty.frames.is_empty());
}
