use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meshfuse::body_model::toy_asset;
use meshfuse::config::Config;
use meshfuse::model::Model;
use meshfuse::train::{checkpoint_archive, checkpoint_name};

const SMALL: &str = "[data]\ncount = 2\n\n[train]\nbatch_size = 2\n";

fn meshfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshfuse")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `--preset smoke --config <small> --out <dir>` plus extras.
fn run_small(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--preset", "smoke", "--config", s(cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    let o = meshfuse(&args);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&meshfuse(&["frobnicate"])), 1);
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = meshfuse(&["gen", "--preset", "huge", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad_value = write_config(dir.path(), "[contrast]\ntau = -1.0\n");
    assert_eq!(code(&meshfuse(&["gen", "--preset", "smoke", "--config", s(&bad_value), "--out", s(dir.path())])), 1);
    let unknown_key = write_config(dir.path(), "[model]\nwidgets = 3\n");
    assert_eq!(code(&meshfuse(&["gen", "--preset", "smoke", "--config", s(&unknown_key), "--out", s(dir.path())])), 1);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let missing = dir.path().join("nope.jtrk");
    let o = meshfuse(&["eval", "--preset", "smoke", "--config", s(&cfg), "--out", s(dir.path()), "--ckpt", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("loading checkpoint"));
}

#[test]
fn network_inference_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = meshfuse(&["infer", "--preset", "smoke", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_echo_round_trips_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("gen");
    run_small("gen", &cfg, &out, &["--seed", "1234"]);
    let echoed = Config::from_toml_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let mut want = Config::smoke();
    want.data.count = 2;
    want.train.batch_size = 2;
    want.seed = 1234;
    assert_eq!(echoed, want);
    assert!(out.join("manifest.txt").exists());
    assert!(out.join("shard0.jtrk").exists());
}

#[test]
fn zero_step_training_writes_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("train");
    run_small("train", &cfg, &out, &["--steps", "0"]);
    let written = fs::read(out.join(checkpoint_name(0))).unwrap();
    let echoed = Config::from_toml_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let fresh = Model::new(&echoed, toy_asset()).unwrap();
    assert_eq!(written, checkpoint_archive(&fresh).to_bytes().unwrap());
    assert_eq!(fs::read_to_string(out.join("train.log")).unwrap(), "");
}

#[test]
fn evaluation_of_a_checkpoint_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let train = dir.path().join("train");
    run_small("train", &cfg, &train, &["--steps", "2"]);
    let ckpt = train.join(checkpoint_name(2));
    assert!(ckpt.exists());
    assert!(!fs::read_to_string(train.join("train.log")).unwrap().is_empty());
    let reports: Vec<Vec<u8>> = ["e1", "e2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            run_small("eval", &cfg, &out, &["--ckpt", s(&ckpt)]);
            assert_eq!(fs::read_to_string(out.join("eval_records.txt")).unwrap().lines().count(), 2);
            fs::read(out.join("eval_report.txt")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let text = String::from_utf8(reports[0].clone()).unwrap();
    assert!(text.starts_with("samples 2\nmpjpe_mm "));

    let exp = dir.path().join("export");
    run_small("export", &cfg, &exp, &["--ckpt", s(&ckpt)]);
    for f in ["attention_s00000.jtrk", "attention_s00001.jtrk", "attention_split.txt", "embeddings.jtrk", "embedding_report.txt"] {
        assert!(exp.join(f).exists(), "{f} missing");
    }
}

#[test]
fn ground_truth_inference_without_noise_is_the_template() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\ncount = 2\npose_noise = 0.0\nshape_noise = 0.0\n\n[train]\nbatch_size = 2\n",
    );
    let out = dir.path().join("infer");
    run_small("infer", &cfg, &out, &["--mode", "gt"]);
    let asset = toy_asset();
    for id in ["s00000", "s00001"] {
        let text = fs::read_to_string(out.join(format!("{id}.mesh.txt"))).unwrap();
        let verts: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| l.starts_with("v "))
            .map(|l| l[2..].split(' ').map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(verts.len(), asset.num_vertices());
        for (r, v) in verts.iter().enumerate() {
            for a in 0..3 {
                assert!((v[a] - asset.template.get2(r, a)).abs() <= 5e-10);
            }
        }
        let faces = text.lines().filter(|l| l.starts_with("f ")).count();
        assert_eq!(faces, asset.faces.len());
    }
}
