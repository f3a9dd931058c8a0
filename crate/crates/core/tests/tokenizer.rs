use stworld::numerics::{Graph, Rng, Tensor};
use stworld::tokenizer::{
    codebook_usage, nearest_code, quantize_rows, reconstruction_psnr, temporal_layout, vqvae_loss, TemporalMode,
    TokenGrid, Tokenizer, TokenizerConfig, TokenizerTrainer,
};
use stworld::world::{generate_episode, Raster, WorldParams};

fn small_config() -> TokenizerConfig {
    TokenizerConfig {
        widths: (8, 16),
        code_dim: 8,
        codebook_size: 32,
        clip_len: 3,
        stage1_steps: 30,
        stage2_steps: 10,
        batch_frames: 4,
        batch_clips: 1,
        dead_code_steps: 20,
        log_every: 10,
        ..Default::default()
    }
}

fn frames(seed: u64, n: usize) -> Vec<Raster> {
    generate_episode(seed, n, &WorldParams::default()).frames
}

#[test]
fn quantize_documented_cases() {
    let cb = [0.0f32, 0.0, 1.0, 1.0];
    assert_eq!(nearest_code(&cb, 2, &[0.2, 0.1]), 0);
    assert_eq!(nearest_code(&cb, 2, &[0.9, 0.8]), 1);
    assert_eq!(nearest_code(&cb, 2, &[0.5, 0.5]), 0);
}

#[test]
fn quantize_matches_brute_force_with_ties() {
    let mut rng = Rng::new(3);
    let (k, c) = (256, 16);
    // coarse values so that duplicate codes and exact ties occur
    let mut cb: Vec<f32> = (0..k * c).map(|_| (rng.below(5) as f32) * 0.5).collect();
    cb.copy_within(0..c, 7 * c);
    let feats: Vec<f32> = (0..1000 * c).map(|_| (rng.below(5) as f32) * 0.5).collect();
    let got = quantize_rows(&cb, c, &feats);
    for (i, f) in feats.chunks(c).enumerate() {
        let dists: Vec<f64> =
            cb.chunks(c).map(|e| e.iter().zip(f).map(|(a, b)| ((a - b) as f64).powi(2)).sum()).collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = dists.iter().position(|&d| d == min).unwrap();
        assert_eq!(got[i], first);
    }
}

#[test]
fn encoder_is_per_frame_with_expected_shape() {
    let tok = Tokenizer::new(TokenizerConfig::default(), 1).unwrap();
    let f = frames(1, 3);
    let feats = tok.encode(&f).unwrap();
    assert_eq!(feats[0].shape(), &[4, 8, 16]);
    let same = tok.encode(&[f[1].clone(), f[1].clone()]).unwrap();
    assert_eq!(same[0], same[1]);
    let perm = tok.encode(&[f[2].clone(), f[0].clone(), f[1].clone()]).unwrap();
    assert_eq!(perm[0], feats[2]);
    assert_eq!(perm[1], feats[0]);
}

fn randomize(tok: &mut Tokenizer, seed: u64) {
    let mut rng = Rng::new(seed);
    for id in 0..tok.params.len() {
        for v in tok.params.get_mut(id).data_mut() {
            *v += (rng.normal() * 0.3) as f32;
        }
    }
}

#[test]
fn single_frame_attention_is_value_projection() {
    let mut tok = Tokenizer::new(small_config(), 2).unwrap();
    randomize(&mut tok, 5);
    let mut rng = Rng::new(9);
    let feat = Tensor::new(vec![4, 8, 8], (0..256).map(|_| rng.normal() as f32).collect()).unwrap();
    let out = tok.temporal_attend(&[feat.clone()]).unwrap();
    let p = |n: &str| tok.params.by_name(n).unwrap().data().to_vec();
    let (wv, bv, wo, bo) = (p("tpre.v.w"), p("tpre.v.b"), p("tpre.o.w"), p("tpre.o.b"));
    for s in 0..32 {
        let x = &feat.data()[s * 8..(s + 1) * 8];
        let v: Vec<f64> =
            (0..8).map(|j| bv[j] as f64 + (0..8).map(|i| x[i] as f64 * wv[i * 8 + j] as f64).sum::<f64>()).collect();
        for j in 0..8 {
            let o = bo[j] as f64 + (0..8).map(|i| v[i] * wo[i * 8 + j] as f64).sum::<f64>();
            assert!((out[0].data()[s * 8 + j] as f64 - (x[j] as f64 + o)).abs() < 1e-4);
        }
    }
}

#[test]
fn temporal_attention_never_mixes_sites() {
    let mut tok = Tokenizer::new(small_config(), 2).unwrap();
    randomize(&mut tok, 6);
    let mut rng = Rng::new(10);
    let feats: Vec<Tensor<f32>> =
        (0..3).map(|_| Tensor::new(vec![4, 8, 8], (0..256).map(|_| rng.normal() as f32).collect()).unwrap()).collect();
    let base = tok.temporal_attend(&feats).unwrap();
    let mut pert = feats.clone();
    pert[1].data_mut()[0] += 1.0; // site (0,0) of frame 1
    let out = tok.temporal_attend(&pert).unwrap();
    for t in 0..3 {
        for i in 8..256 {
            assert_eq!(out[t].data()[i], base[t].data()[i]);
        }
    }
    assert_ne!(out[0].data()[0], base[0].data()[0]);

    // temporally constant input gives temporally constant output
    let same = vec![feats[0].clone(); 3];
    let o = tok.temporal_attend(&same).unwrap();
    assert_eq!(o[0], o[1]);
    assert_eq!(o[1], o[2]);
}

#[test]
fn per_site_gradients_are_zero_off_site() {
    let mut tok = Tokenizer::new(small_config(), 2).unwrap();
    randomize(&mut tok, 7);
    let store = tok.params.cast::<f64>();
    let mut rng = Rng::new(1);
    let x = Tensor::<f64>::new(vec![3 * 32, 8], (0..3 * 32 * 8).map(|_| rng.normal()).collect()).unwrap();
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::inference();
        let r = g.constant(x.clone());
        let o = tok.temporal_graph(&mut g, &store, "tpre", r, TemporalMode::Clips(3)).unwrap();
        g.value(o).data()[..8].iter().sum::<f64>() // outputs of site 0, frame 0
    };
    let f0 = eval(&x);
    for row in [1usize, 5, 33, 64 + 31] {
        let mut xp = x.clone();
        xp.data_mut()[row * 8 + 2] += 1e-3;
        assert_eq!(eval(&xp), f0, "row {row}");
    }
    let mut xp = x.clone();
    xp.data_mut()[32 * 8] += 1e-3; // same site, next frame
    assert_ne!(eval(&xp), f0);
    let layout = temporal_layout(3, 32, 3).unwrap();
    assert_eq!(layout.attended_pairs(), 32 * 9);
}

#[test]
fn straight_through_copies_gradient_to_features() {
    let tok = Tokenizer::new(small_config(), 4).unwrap();
    let store = tok.params.cast::<f64>();
    let f = frames(2, 2);
    let mut g0 = Graph::<f64>::inference();
    let x = g0.constant(tok.frames_tensor(&f).unwrap());
    let enc = tok.encoder_graph(&mut g0, &store, x).unwrap();
    let feats = g0.value(enc).clone();
    let cb = store.by_name("codebook").unwrap();
    let tokens: Vec<usize> = feats
        .data()
        .chunks(8)
        .map(|r| {
            let r32: Vec<f32> = r.iter().map(|&v| v as f32).collect();
            nearest_code(tok.codebook(), 8, &r32)
        })
        .collect();
    let rows: Vec<f64> = tokens.iter().flat_map(|&t| cb.row(t).to_vec()).collect();
    let quantized = Tensor::new(vec![tokens.len(), 8], rows).unwrap();

    // loss on the straight-through output, differentiated wrt the features
    let mut g = Graph::<f64>::new();
    let h = g.input(feats);
    let zq = g.straight_through(h, quantized.clone()).unwrap();
    let y = tok.decoder_graph(&mut g, &store, zq).unwrap();
    let loss = g.mean(y);
    g.backward(loss).unwrap();

    // same loss differentiated wrt the quantized features directly
    let mut g2 = Graph::<f64>::new();
    let z = g2.input(quantized);
    let y2 = tok.decoder_graph(&mut g2, &store, z).unwrap();
    let l2 = g2.mean(y2);
    g2.backward(l2).unwrap();
    assert_eq!(g.scalar(loss), g2.scalar(l2));
    assert_eq!(g.grad(h).unwrap(), g2.grad(z).unwrap());
}

#[test]
fn lookup_broadcasts_code_and_decode_shape() {
    let tok = Tokenizer::new(small_config(), 4).unwrap();
    let grid = TokenGrid { height: 4, width: 8, tokens: vec![5; 32] };
    let z = tok.lookup(std::slice::from_ref(&grid)).unwrap();
    let code = &tok.codebook()[5 * 8..6 * 8];
    for r in 0..32 {
        assert_eq!(z.row(r), code);
    }
    let out = tok.decode(&[grid.clone(), grid]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!((out[0].height, out[0].width, out[0].channels), (32, 64, 1));
    let bad = TokenGrid { height: 4, width: 8, tokens: vec![32; 32] };
    assert!(tok.decode(&[bad]).is_err());
}

#[test]
fn vqvae_loss_examples() {
    let mut g = Graph::<f64>::new();
    let img = Tensor::from_f64(vec![1, 1, 4, 4], &[0.3; 16]).unwrap();
    let a = g.constant(img.clone());
    let b = g.constant(img);
    let zero = g.constant(Tensor::scalar(0.0));
    let l = vqvae_loss(&mut g, a, b, zero, (3.0, 1.0, 1.0), 1e-3).unwrap();
    assert!((g.scalar(l) - 3e-3).abs() < 1e-12);

    let p = g.constant(Tensor::from_f64(vec![1], &[0.503]).unwrap());
    let q = g.constant(Tensor::from_f64(vec![1], &[0.5]).unwrap());
    let c = g.charbonnier(p, q, 1e-3).unwrap();
    assert!((g.scalar(c) - 1e-5f64.sqrt()).abs() < 1e-9);

    let quant = g.constant(Tensor::scalar(0.7));
    let a = g.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.9]).unwrap());
    let b = g.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[0.0, 0.5, 0.2, 0.4]).unwrap());
    let l1 = vqvae_loss(&mut g, a, b, quant, (3.0, 1.0, 1.0), 1e-3).unwrap();
    let l2 = vqvae_loss(&mut g, a, b, quant, (3.0, 1.0, 2.0), 1e-3).unwrap();
    assert!((g.scalar(l2) - g.scalar(l1) - 0.7).abs() < 1e-12);
}

#[test]
fn bypass_equals_single_frame_clips() {
    let mut tok = Tokenizer::new(small_config(), 4).unwrap();
    let f = frames(3, 2);
    let loss_of = |tok: &Tokenizer, mode| {
        let mut g = Graph::<f64>::inference();
        let store = tok.params.cast::<f64>();
        let x = g.constant(tok.frames_tensor(&f).unwrap());
        let (l, _) = tok.loss_graph(&mut g, &store, x, mode).unwrap();
        g.scalar(l)
    };
    // freshly initialised output projections are zero, so attention is an identity
    let a = loss_of(&tok, TemporalMode::Bypass);
    let b = loss_of(&tok, TemporalMode::Clips(1));
    assert!((a - b).abs() < 1e-6);
    // with T=1 attention reduces to a per-frame map, differing from bypass once trained
    randomize(&mut tok, 3);
    let c = loss_of(&tok, TemporalMode::Clips(1));
    let d = loss_of(&tok, TemporalMode::Clips(1));
    assert_eq!(c, d);
}

#[test]
fn training_reduces_held_out_loss_and_is_deterministic() {
    let train: Vec<Vec<Raster>> = (0..6).map(|s| frames(100 + s, 6)).collect();
    let held: Vec<Vec<Raster>> = (0..2).map(|s| frames(200 + s, 6)).collect();
    let cfg = small_config();
    let run = || {
        let mut t = TokenizerTrainer::new(Tokenizer::new(cfg.clone(), 8).unwrap(), 8);
        t.run(&train).unwrap();
        t
    };
    let init = Tokenizer::new(cfg.clone(), 8).unwrap();
    let held_loss = |tok: &Tokenizer| {
        let mut total = 0.0;
        for ep in &held {
            let mut g = Graph::<f32>::inference();
            let x = g.constant(tok.frames_tensor(ep).unwrap());
            let (l, _) = tok.loss_graph(&mut g, &tok.params, x, TemporalMode::Clips(3)).unwrap();
            total += g.scalar(l) as f64;
        }
        total
    };
    let a = run();
    let b = run();
    assert_eq!(a.to_checkpoint().unwrap().encode().unwrap(), b.to_checkpoint().unwrap().encode().unwrap());
    assert!(held_loss(&a.tokenizer) < held_loss(&init), "{} vs {}", held_loss(&a.tokenizer), held_loss(&init));
    let (model, _base) = reconstruction_psnr(&a.tokenizer, &held).unwrap();
    assert!(model.is_finite());
    let usage = codebook_usage(&a.tokenizer, &held).unwrap();
    assert!(usage > 0.0 && usage <= 1.0);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let train: Vec<Vec<Raster>> = (0..4).map(|s| frames(300 + s, 5)).collect();
    let cfg = small_config();
    let mut full = TokenizerTrainer::new(Tokenizer::new(cfg.clone(), 1).unwrap(), 1);
    full.run(&train).unwrap();

    let mut part = TokenizerTrainer::new(Tokenizer::new(cfg.clone(), 1).unwrap(), 1);
    for _ in 0..17 {
        part.step(&train).unwrap();
    }
    let bytes = part.to_checkpoint().unwrap().encode().unwrap();
    let ck = stworld::formats::Checkpoint::decode(&bytes).unwrap();
    let mut resumed = TokenizerTrainer::from_checkpoint(&ck).unwrap();
    resumed.run(&train).unwrap();
    assert_eq!(
        resumed.tokenizer.params.by_name("codebook").unwrap(),
        full.tokenizer.params.by_name("codebook").unwrap()
    );
    assert_eq!(resumed.tokenizer.params.by_name("dec2.w").unwrap(), full.tokenizer.params.by_name("dec2.w").unwrap());
}

#[test]
fn rejects_bad_shapes_and_empty_data() {
    let bad = TokenizerConfig { height: 30, ..Default::default() };
    assert!(Tokenizer::new(bad, 0).is_err());
    let tok = Tokenizer::new(TokenizerConfig::default(), 0).unwrap();
    assert!(tok.encode(&[Raster::filled(16, 16, 1, 0)]).is_err());
    let mut t = TokenizerTrainer::new(tok, 0);
    assert!(t.step(&[vec![]]).is_err());
}
