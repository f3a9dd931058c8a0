use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use serde_json::{json, Value};
use stworld::formats::{decode_dwep, encode_dwep, read_dwep, Checkpoint, MetricsRecord};
use stworld::pose_codec::{detokenize_pose, tokenize_pose, wrap_angle, PoseBinning, RelativePose};
use tempfile::TempDir;

fn stworld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stworld"))
        .args(args)
        .env_remove("DW_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config() -> Value {
    json!({
        "tokenizer": {
            "widths": [4, 8], "code_dim": 4, "codebook_size": 32, "clip_len": 4,
            "stage1_steps": 60, "stage2_steps": 40, "batch_frames": 4, "batch_clips": 1, "log_every": 10
        },
        "model": {
            "d_model": 16, "heads": 2, "n_pairs": 1, "ar_layers": 1, "ctx_frames": 4,
            "image_vocab": 32, "steps": 100, "batch_size": 2, "log_every": 10, "lr": 1e-3
        }
    })
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
    tokenizer: PathBuf,
    world: PathBuf,
}

/// Data, a 100-step tokenizer and a 100-step world model, built once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("run.json");
        std::fs::write(&config, small_config().to_string()).unwrap();
        let data = dir.path().join("data");
        ok(stworld(&[
            "gen-data",
            "--config",
            p(&config),
            "--seed",
            "3",
            "--count",
            "4",
            "--length",
            "24",
            "--out",
            p(&data),
        ]));
        let tokenizer = dir.path().join("tok.dwck");
        ok(stworld(&[
            "train-tokenizer",
            "--config",
            p(&config),
            "--data",
            p(&data),
            "--out",
            p(&tokenizer),
            "--metrics",
            p(&dir.path().join("tok_metrics.json")),
        ]));
        let world = dir.path().join("world.dwck");
        ok(stworld(&[
            "train-world",
            "--config",
            p(&config),
            "--data",
            p(&data),
            "--tokenizer",
            p(&tokenizer),
            "--out",
            p(&world),
            "--metrics",
            p(&dir.path().join("world_metrics.json")),
        ]));
        Fixture { dir, config, data, tokenizer, world }
    })
}

#[test]
fn gen_data_single_episode_round_trips() {
    let tmp = TempDir::new().unwrap();
    ok(stworld(&["gen-data", "--seed", "9", "--count", "1", "--length", "6", "--out", p(tmp.path())]));
    let files: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].file_name().unwrap(), "ep_9_0.dwep");
    let bytes = std::fs::read(&files[0]).unwrap();
    let ep = decode_dwep(&bytes).unwrap();
    assert_eq!(ep.frames.len(), 6);
    assert_eq!(encode_dwep(&ep.poses, &ep.frames).unwrap(), bytes);
}

#[test]
fn gen_data_is_reproducible_and_honors_env_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        ok(stworld(&["gen-data", "--seed", "4", "--count", "3", "--length", "5", "--out", p(d.path())]));
    }
    for i in 0..3 {
        let name = format!("ep_4_{i}.dwep");
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
    let c = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stworld"))
        .args(["gen-data", "--count", "1", "--length", "5", "--out", p(c.path())])
        .env("DW_SEED", "4")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(
        std::fs::read(c.path().join("ep_4_0.dwep")).unwrap(),
        std::fs::read(a.path().join("ep_4_0.dwep")).unwrap()
    );
}

#[test]
fn gen_data_hundred_long_episodes_within_budget() {
    let tmp = TempDir::new().unwrap();
    let t = Instant::now();
    ok(stworld(&["gen-data", "--seed", "1", "--count", "100", "--length", "64", "--out", p(tmp.path())]));
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 100);
    assert!(secs < 60.0, "{secs} s");
}

#[test]
fn training_smoke_runs_write_checkpoints_and_metrics() {
    let f = fixture();
    for (ck, metrics, series) in
        [(&f.tokenizer, "tok_metrics.json", "tokenizer/loss"), (&f.world, "world_metrics.json", "world/loss")]
    {
        Checkpoint::read(ck).unwrap();
        let text = std::fs::read_to_string(f.dir.path().join(metrics)).unwrap();
        let js: Value = serde_json::from_str(&text).unwrap();
        let pts = js["series"][series].as_array().unwrap();
        assert_eq!(pts.last().unwrap()["step"], 100);
        assert!(pts.iter().all(|p| p["value"].as_f64().unwrap().is_finite()));
        MetricsRecord::from_json(&text).unwrap();
    }
}

#[test]
fn world_training_requires_tokenizer() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.dwck");
    let out = stworld(&[
        "train-world",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--tokenizer",
        p(&missing),
        "--out",
        p(&tmp.path().join("w.dwck")),
        "--metrics",
        p(&tmp.path().join("m.json")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tokenizer checkpoint") && err.contains("not found"), "{err}");
}

#[test]
fn ablation_flag_is_recorded_in_checkpoint() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let ck = tmp.path().join("w.dwck");
    ok(stworld(&[
        "train-world",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--tokenizer",
        p(&f.tokenizer),
        "--out",
        p(&ck),
        "--metrics",
        p(&tmp.path().join("m.json")),
        "--no-masking",
        "--set",
        "model.steps=3",
    ]));
    let js: Value = serde_json::from_str(&Checkpoint::read(&ck).unwrap().config_json).unwrap();
    assert_eq!(js["cli_flags"], json!(["--no-masking"]));
    assert_eq!(js["config"]["masking"]["enabled"], json!(false));
}

#[test]
fn resumed_training_reproduces_uninterrupted_run() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let mut args = vec![
            "train-world",
            "--config",
            p(&f.config),
            "--data",
            p(&f.data),
            "--tokenizer",
            p(&f.tokenizer),
            "--set",
            "model.steps=12",
            "--set",
            "model.log_every=1",
            "--seed",
            "5",
        ];
        let out = tmp.path().join(format!("{name}.dwck"));
        let metrics = tmp.path().join(format!("{name}.json"));
        args.extend_from_slice(&["--out", p(&out), "--metrics", p(&metrics)]);
        let args: Vec<String> = args.iter().chain(extra).map(|s| s.to_string()).collect();
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(stworld(&args));
        (out, metrics)
    };
    let (full_ck, full_m) = run("full", &[]);
    run("split", &["--max-steps", "5"]);
    let (split_ck, split_m) = run("split", &["--resume"]);
    assert_eq!(std::fs::read(full_ck).unwrap(), std::fs::read(split_ck).unwrap());
    let trace = |path: &Path| -> Vec<(u64, f64)> {
        let m = MetricsRecord::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
        m.series["world/loss"].iter().map(|p| (p.step, p.value)).collect()
    };
    let full = trace(&full_m);
    assert_eq!(full.len(), 12);
    assert_eq!(full, trace(&split_m));
}

#[test]
fn tokenizer_training_resumes_bit_exactly() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let ck = tmp.path().join(format!("{name}.dwck"));
        let m = tmp.path().join(format!("{name}.json"));
        let mut args: Vec<&str> = vec![
            "train-tokenizer",
            "--config",
            p(&f.config),
            "--data",
            p(&f.data),
            "--set",
            "tokenizer.stage1_steps=4",
            "--set",
            "tokenizer.stage2_steps=4",
            "--out",
            p(&ck),
            "--metrics",
            p(&m),
        ];
        args.extend_from_slice(extra);
        ok(stworld(&args));
        ck
    };
    let full = run("full", &[]);
    run("split", &["--max-steps", "6"]);
    let split = run("split", &["--resume"]);
    assert_eq!(std::fs::read(full).unwrap(), std::fs::read(split).unwrap());
}

fn rollout_run(f: &Fixture, tmp: &Path, name: &str, controls: Option<&Value>, steps: usize) -> (PathBuf, PathBuf) {
    let ep = f.data.join("ep_3_0.dwep");
    let out = tmp.join(format!("{name}.dwep"));
    let report = tmp.join(format!("{name}.json"));
    let steps = steps.to_string();
    let mut args = vec![
        "rollout",
        "--config",
        p(&f.config),
        "--tokenizer",
        p(&f.tokenizer),
        "--world",
        p(&f.world),
        "--episode",
        p(&ep),
        "--steps",
        &steps,
        "--out",
        p(&out),
        "--report",
        p(&report),
        "--seed",
        "2",
    ];
    let cpath = tmp.join(format!("{name}_controls.json"));
    if let Some(c) = controls {
        std::fs::write(&cpath, c.to_string()).unwrap();
        args.extend_from_slice(&["--controls", p(&cpath)]);
    }
    ok(stworld(&args));
    (out, report)
}

#[test]
fn rollout_emits_episode_and_drift_report() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let (out, report) = rollout_run(f, tmp.path(), "free", Some(&json!([])), 6);
    let ep = read_dwep(&out).unwrap();
    assert_eq!(ep.frames.len(), 6);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["horizon"], 6);
    assert_eq!(r["accuracy"].as_array().unwrap().len(), 6);
    let schema: Value = serde_json::from_str(include_str!("../schemas/drift_report.schema.json")).unwrap();
    assert!(jsonschema::is_valid(&schema, &r));
    let (again, _) = rollout_run(f, tmp.path(), "free2", None, 6);
    assert_eq!(std::fs::read(out).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn straight_and_curved_controls_give_two_trajectories() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let straight = json!(vec![[0.0, 1.0, 0.0]; 8]);
    let curved: Vec<Value> = (0..8).map(|_| json!({"dtheta": 0.2, "dx": 0.99, "dy": 0.1})).collect();
    let (a, _) = rollout_run(f, tmp.path(), "straight", Some(&straight), 8);
    let (b, _) = rollout_run(f, tmp.path(), "curved", Some(&Value::Array(curved)), 8);
    let (ea, eb) = (read_dwep(&a).unwrap(), read_dwep(&b).unwrap());
    assert_eq!((ea.frames.len(), eb.frames.len()), (8, 8));
    let start = read_dwep(&f.data.join("ep_3_0.dwep")).unwrap().poses[3];
    let bins = PoseBinning::default();
    let turn =
        detokenize_pose(&tokenize_pose(&RelativePose::new(0.2, 0.99, 0.1), &bins).unwrap(), &bins).unwrap().dtheta;
    let heading = |ep: &stworld::formats::EpisodeData| wrap_angle(ep.poses.last().unwrap().theta - start.theta);
    assert!(heading(&ea).abs() < 1e-3);
    assert!((heading(&eb) - 8.0 * turn).abs() < 1e-3, "{}", heading(&eb));
    assert!(ea.poses != eb.poses);
}

#[test]
fn rollout_rejects_mismatched_raster() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("small");
    ok(stworld(&[
        "gen-data",
        "--set",
        "world.height=16",
        "--set",
        "tokenizer.height=16",
        "--set",
        "model.grid_height=2",
        "--count",
        "1",
        "--length",
        "4",
        "--out",
        p(&data),
    ]));
    let out = stworld(&[
        "rollout",
        "--config",
        p(&f.config),
        "--tokenizer",
        p(&f.tokenizer),
        "--world",
        p(&f.world),
        "--episode",
        p(&data.join("ep_0_0.dwep")),
        "--steps",
        "2",
        "--out",
        p(&tmp.path().join("o.dwep")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("height 16"), "{err}");
}

#[test]
fn eval_reports_losses_and_accuracy() {
    let f = fixture();
    let out = ok(stworld(&[
        "eval",
        "--config",
        p(&f.config),
        "--tokenizer",
        p(&f.tokenizer),
        "--world",
        p(&f.world),
        "--data",
        p(&f.data),
        "--targets",
        "4",
    ]));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["episodes"], 4);
    let acc = r["next_frame"]["image_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(r["teacher_forced"]["image"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_reports_both_variants_and_validates() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bench.json");
    ok(stworld(&["bench", "--frames", "5,10", "--out", p(&path), "--measure-memory"]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(include_str!("../schemas/attention_cost_report.schema.json")).unwrap();
    assert!(jsonschema::is_valid(&schema, &r));
    let reports = r.as_array().unwrap();
    assert_eq!(reports.len(), 4);
    let get = |variant: &str, t: u64| reports.iter().find(|x| x["variant"] == variant && x["frames"] == t).unwrap();
    let van = get("vanilla", 10)["total_pairs"].as_f64().unwrap() / get("vanilla", 5)["total_pairs"].as_f64().unwrap();
    assert!(van > 2.0 * 1.5, "{van}");
    let temporal = |t| {
        get("decoupled", t)["families"].as_array().unwrap().iter().find(|f| f["family"] == "temporal").unwrap()
            ["pairs_per_layer"]
            .as_f64()
            .unwrap()
    };
    // S * T (T + 1) / 2 with S fixed
    assert_eq!(temporal(10) / temporal(5), 55.0 / 15.0);
    let bad = json!([{"variant": "other"}]);
    assert!(!jsonschema::is_valid(&schema, &bad));
}

#[test]
fn bad_overrides_and_unknown_fields_are_rejected() {
    let tmp = TempDir::new().unwrap();
    for args in [
        vec!["bench", "--set", "model.heads"],
        vec!["bench", "--set", "model.no_such_field=1"],
        vec!["bench", "--set", "bogus=1"],
        vec!["bench", "--set", "model.d_model=30"],
    ] {
        let out = stworld(&args);
        assert!(!out.status.success(), "{args:?}");
    }
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"data_dir": "/definitely/missing"}"#).unwrap();
    let out = stworld(&["bench", "--config", p(&cfg)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}
