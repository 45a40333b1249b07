mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gated::checkpoint::Checkpoint;
use gated::image::{load_image, save_image, ImageTensor};
use gated::synthetic::synthetic_pair;
use gated::{Model, ModelConfig};
use tempfile::tempdir;

fn gated(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gated"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Paired `low/` + `high/` PNGs of odd sizes.
fn paired_dir(root: &Path, n: usize, h: usize, w: usize) {
    for sub in ["low", "high"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    for i in 0..n {
        let pair = synthetic_pair(i as u64, h, w);
        save_image(&pair.low, root.join(format!("low/{i:02}.png"))).unwrap();
        save_image(pair.reference.as_ref().unwrap(), root.join(format!("high/{i:02}.png"))).unwrap();
    }
}

fn small_checkpoint(dir: &Path, tweak: impl FnOnce(&mut Model)) -> PathBuf {
    let mut model = Model::new(
        &ModelConfig {
            base_width: 8,
            cbam_reduction: 16,
        },
        0,
    )
    .unwrap();
    tweak(&mut model);
    let path = dir.join("small.ckpt");
    Checkpoint::new(model).save(&path).unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    let out = gated(&["--help"]);
    assert_eq!(code(&out), 0);
    for sub in ["train", "enhance", "evaluate", "inspect-gamma", "export-manifest"] {
        assert!(stdout(&out).contains(sub), "{sub}");
    }
    assert_eq!(code(&gated(&["frobnicate"])), 2);
    assert_eq!(code(&gated(&["evaluate", "--data", "."])), 2, "checkpoint or --identity required");
}

#[test]
fn train_without_a_dataset_root_names_the_key() {
    let out = gated(&["train"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("data.root"), "{}", stderr(&out));
    let out = gated(&["train", "--override", "data.root=/definitely/not/here"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("data.root"));
    let out = gated(&["train", "--override", "trainer.epochs=zero"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("trainer.epochs"), "{}", stderr(&out));
    let out = gated(&["train", "--override", "trainer.nonsense=1"]);
    assert_eq!(code(&out), 2);
}

fn loss_lines(log: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].clone())
        .collect()
}

#[test]
fn train_runs_one_epoch_deterministically() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    paired_dir(&data, 10, 40, 40);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "[trainer]\nepochs = 3\nbatch_size = 1\n\n[data]\nroot = {:?}\nheight = 32\nwidth = 32\n\n[model]\nbase_width = 8\n",
            s(&data)
        ),
    )
    .unwrap();
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.path().join(run);
        let out = gated(&[
            "train",
            "--config",
            s(&config),
            "--override",
            "trainer.epochs=1",
            "--override",
            &format!("trainer.checkpoint_dir={}", s(&ckpt)),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert_eq!(summary["epochs"], 1);
        assert_eq!(summary["steps"], 10);
        assert!(ckpt.join("last.ckpt").is_file() && ckpt.join("best.ckpt").is_file());
        logs.push(loss_lines(&ckpt.join("train_log.jsonl")));
    }
    assert_eq!(logs[0].len(), 10);
    assert_eq!(logs[0], logs[1]);

    // resume runs the remaining epochs of the file config
    let out = gated(&[
        "train",
        "--config",
        s(&config),
        "--override",
        &format!("trainer.checkpoint_dir={}", s(&dir.path().join("a"))),
        "--resume",
        s(&dir.path().join("a/last.ckpt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!((summary["epochs"].as_u64(), summary["steps"].as_u64()), (Some(3), Some(30)));
}

#[test]
fn enhance_writes_one_or_three_files_per_image_at_input_size() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("eval15");
    paired_dir(&data, 15, 20, 36);
    let ckpt = small_checkpoint(dir.path(), |_| {});
    let before: Vec<_> = std::fs::read_dir(data.join("low")).unwrap().map(|e| e.unwrap().path()).collect();

    let out_dir = dir.path().join("plain");
    let out = gated(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&data.join("low")), "--output", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 15);
    let img = load_image(out_dir.join("03_enhanced.png")).unwrap();
    assert_eq!((img.height(), img.width()), (20, 36));

    let out_dir = dir.path().join("full");
    let out = gated(&[
        "enhance",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&data.join("low")),
        "--output",
        s(&out_dir),
        "--save-intermediate",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 45);
    for suffix in ["enhanced", "stage1", "gamma"] {
        let img = load_image(out_dir.join(format!("14_{suffix}.png"))).unwrap();
        assert_eq!((img.height(), img.width()), (20, 36), "{suffix}");
    }
    let after: Vec<_> = std::fs::read_dir(data.join("low")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(before.len(), after.len(), "inputs are left alone");

    // a single file, resized first
    let out_dir = dir.path().join("one");
    let out = gated(&[
        "enhance",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&data.join("low/00.png")),
        "--output",
        s(&out_dir),
        "--size",
        "32x48",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let img = load_image(out_dir.join("00_enhanced.png")).unwrap();
    assert_eq!((img.height(), img.width()), (32, 48));
}

#[test]
fn gamma_of_one_and_a_quarter_renders_mid_grey() {
    let dir = tempdir().unwrap();
    // zero head weights and bias give sigmoid(0) = 0.5, so gamma = 1.25
    let ckpt = small_checkpoint(dir.path(), |m| {
        for name in ["agcm.head.weight", "agcm.head.bias"] {
            let id = m.params.id(name).unwrap();
            let t = m.params.tensor_mut(id);
            *t = t.zeros_like();
        }
    });
    let input = dir.path().join("x.png");
    save_image(&synthetic_pair(1, 24, 24).low, &input).unwrap();
    let out_dir = dir.path().join("out");
    let out = gated(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out_dir), "--save-intermediate"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let g = image::open(out_dir.join("x_gamma.png")).unwrap().to_rgb8();
    assert!(g.pixels().all(|p| p.0 == [128, 128, 128]));

    let vis = gated::cli::gamma_visualization(&gated_tensor::Tensor::full([3, 2, 2], 1.25));
    assert!(vis.data().iter().all(|&v| v == 0.5));

    let out = gated(&["inspect-gamma", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&dir.path().join("g.png"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().nth(1).unwrap().contains("1.2500"), "{text}");
    assert!(dir.path().join("g.png").is_file());
}

#[test]
fn evaluate_with_identity_matches_the_baseline() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    paired_dir(&data.join("test"), 3, 24, 24);
    paired_dir(&data.join("train"), 2, 24, 24);
    let out_dir = dir.path().join("report");
    let out = gated(&["evaluate", "--identity", "--data", s(&data), "--output", s(&out_dir), "--native"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = stdout(&out);
    for m in ["psnr", "ssim", "mae"] {
        assert!(table.contains(m));
    }
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["n"], 3);
    let mut expected = 0.0;
    for i in 0..3 {
        let low = load_image(data.join(format!("test/low/{i:02}.png"))).unwrap();
        let high = load_image(data.join(format!("test/high/{i:02}.png"))).unwrap();
        expected += gated::metrics::psnr(&low, &high, 1.0).unwrap() / 3.0;
    }
    assert!((agg["aggregate"]["psnr"].as_f64().unwrap() - expected).abs() < 1e-9);
    let csv = std::fs::read_to_string(out_dir.join("per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let ckpt = small_checkpoint(dir.path(), |_| {});
    let out = gated(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "train", "--size", "32x32"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn evaluate_unpaired_with_psnr_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("DICM");
    std::fs::create_dir_all(&data).unwrap();
    save_image(&ImageTensor::constant(16, 16, 0.2).unwrap(), data.join("a.png")).unwrap();
    let out = gated(&["evaluate", "--identity", "--data", s(&data), "--metrics", "psnr"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing reference"), "{}", stderr(&out));
    let out = gated(&["evaluate", "--identity", "--data", s(&data), "--metrics", "nope"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn export_manifest_to_file_and_stdout() {
    let dir = tempdir().unwrap();
    common::lolv1_tree(dir.path(), 485, 15);
    let out = gated(&["export-manifest", "--data", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 500);
    assert!(stderr(&out).contains("485 train / 15 test"));

    let file = dir.path().join("out/manifest.jsonl");
    let out = gated(&["export-manifest", "--data", s(dir.path()), "--layout", "lolv1", "--output", s(&file)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(&file).unwrap().lines().count(), 500);

    let out = gated(&["export-manifest", "--data", s(dir.path()), "--layout", "lolv9"]);
    assert_eq!(code(&out), 2);
    let empty = tempdir().unwrap();
    assert_eq!(code(&gated(&["export-manifest", "--data", s(empty.path())])), 2);
}

#[test]
fn io_failures_exit_four() {
    let dir = tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"hello").unwrap();
    let out = gated(&["enhance", "--checkpoint", s(&bogus), "--input", s(dir.path()), "--output", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let out = gated(&["enhance", "--checkpoint", s(&dir.path().join("absent.ckpt")), "--input", ".", "--output", "o"]);
    assert_eq!(code(&out), 4);
}
