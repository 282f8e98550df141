use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semfuse::checkpoint::Checkpoint;
use semfuse::data::{load_dataset, load_gray, Split};
use semfuse::{LabelPalette, TrainConfig};
use sha2::{Digest, Sha256};

const TINY: &str = "\
[model]
scales = 2
base_channels = 4
seg_width = 2

[train]
warm_start_epochs = 2
semantic_epochs = 2
batch_size = 2
crop = 0
seed = 3

[data]
size = 16
images = 6
val_images = 2
test_images = 2
";

/// The `[model]`/`[train]` part of `TINY` as a library config.
fn tiny_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    let mut section = "";
    for line in TINY.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(s) = line.strip_prefix('[') {
            section = s.trim_end_matches(']');
        } else if section != "data" {
            let (k, v) = line.split_once('=').unwrap();
            cfg.set(&format!("{section}.{}", k.trim()), v.trim())
                .unwrap();
        }
    }
    cfg
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_semfuse"));
    c.env_remove("SEMFUSE_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn digest_tree(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&path).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

fn checksum(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.config(), TINY).unwrap();
        let o = run(&["synth", "--config", p(&ws.config()), "--out", p(&ws.data())]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("run.cfg")
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (config, data, out) = (self.config(), self.data(), self.path(out));
        let mut args = vec![
            "train",
            "--config",
            p(&config),
            "--data",
            p(&data),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        bin().args(&args).output().unwrap()
    }
}

#[test]
fn synth_writes_the_split_layout_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "synth",
            "--images",
            "5",
            "--size",
            "16",
            "--seed",
            "7",
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("synth split=train images=5"));
    }
    for sub in ["ir", "vis", "labels"] {
        assert_eq!(fs::read_dir(a.join("train").join(sub)).unwrap().count(), 5);
    }
    let strip = |v: Vec<(String, String)>| {
        v.into_iter()
            .filter(|(n, _)| !n.ends_with(".manifest"))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(digest_tree(&a)), strip(digest_tree(&b)));
}

#[test]
fn synth_rejects_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--images", "0", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flags_and_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&run(&["synth", "--imagez", "3", "--out", p(dir.path())])),
        2
    );
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nlambda = 1\nlamda = 0\n").unwrap();
    let o = run(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    let o = run(&["synth", "--set", "train.nope=1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_path_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.cfg");
    fs::write(&cfg, "[data]\nimages = 3\nsize = 16\n").unwrap();
    let out = dir.path().join("d");
    let o = bin()
        .env("SEMFUSE_CONFIG", &cfg)
        .args(["synth", "--out", p(&out)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("train/ir")).unwrap().count(), 3);
}

#[test]
fn help_lists_every_flag() {
    for (cmd, flags) in [
        (
            "synth",
            &["--images", "--size", "--seed", "--out", "--config", "--set"][..],
        ),
        (
            "train",
            &[
                "--phase",
                "--init-from",
                "--out",
                "--config",
                "--set",
                "--data",
            ][..],
        ),
        (
            "fuse",
            &["--model", "--input-dir", "--out-dir", "--color"][..],
        ),
        (
            "eval",
            &["--fused-dir", "--dataset", "--seg-model", "--out"][..],
        ),
        ("ablate", &["--plan", "--out", "--config"][..]),
    ] {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert!(stdout(&run(&["train", "--help"])).contains("[default: both]"));
}

#[test]
fn semantic_phase_needs_a_warm_start() {
    let ws = Workspace::new();
    let o = ws.train("sem", &["--phase", "semantic"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("warm-start"), "{}", stderr(&o));

    let o = ws.train(
        "scratch",
        &["--phase", "semantic", "--set", "train.skip_warm_start=true"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ws.path("scratch/semantic_best.ck").is_file());
}

#[test]
fn both_phases_equal_warm_then_semantic() {
    let ws = Workspace::new();
    let o = ws.train("both", &["--phase", "both"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("warm epochs=2"), "{text}");
    assert!(text.contains("semantic epochs=2"), "{text}");

    let o = ws.train("w", &["--phase", "warm"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let theta = ws.path("w/warm.ck");
    let o = ws.train("s", &["--phase", "semantic", "--init-from", p(&theta)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    assert_eq!(checksum(&ws.path("both/warm.ck")), checksum(&theta));
    for f in ["semantic_last.ck", "semantic_best.ck"] {
        assert_eq!(
            checksum(&ws.path("both").join(f)),
            checksum(&ws.path("s").join(f)),
            "{f}"
        );
    }
    let log = fs::read_to_string(ws.path("both/train.log")).unwrap();
    assert!(log
        .lines()
        .any(|l| l.starts_with("step=") && l.contains("phase=semantic") && l.contains("reg=")));
}

#[test]
fn set_overrides_the_config_file() {
    let ws = Workspace::new();
    let o = ws.train("l0", &["--phase", "warm", "--set", "train.lambda=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = fs::read_to_string(ws.path("l0/config.txt")).unwrap();
    assert!(cfg.contains("lambda = 0\n"), "{cfg}");
}

#[test]
fn fuse_then_eval() {
    let ws = Workspace::new();
    let o = ws.train("w", &["--phase", "both"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = ws.path("w/semantic_best.ck");
    let input = ws.data().join("test");
    let fused = ws.path("fused");
    let o = run(&[
        "fuse",
        "--model",
        p(&model),
        "--input-dir",
        p(&input),
        "--out-dir",
        p(&fused),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("fuse written=2 failed=0"));
    let first = digest_tree(&fused);
    assert_eq!(first.len(), 2);

    // Each written pixel is round(255 · I_f).
    let ck = Checkpoint::load(&model).unwrap();
    let cfg = tiny_train_config();
    let (_, pairs) =
        load_dataset(&ws.data(), Split::Test, &LabelPalette::synthetic(), &cfg).unwrap();
    for pair in &pairs {
        let f = ck.fusion.forward(pair).unwrap();
        let png = load_gray(&fused.join(format!("{}.png", pair.id))).unwrap();
        let expected: Vec<u8> = f
            .pixels()
            .iter()
            .map(|v| (255.0 * v).round() as u8)
            .collect();
        assert_eq!(png.to_u8(), expected, "{}", pair.id);
    }
    let o = run(&[
        "fuse",
        "--model",
        p(&model),
        "--input-dir",
        p(&input),
        "--out-dir",
        p(&fused),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(digest_tree(&fused), first);

    let color = ws.path("color");
    let o = run(&[
        "fuse",
        "--model",
        p(&model),
        "--input-dir",
        p(&input),
        "--out-dir",
        p(&color),
        "--color",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Fusion metrics only.
    let report = ws.path("report");
    let o = run(&[
        "eval",
        "--config",
        p(&ws.config()),
        "--fused-dir",
        p(&fused),
        "--dataset",
        p(&input),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stdout(&o).contains("miou"));
    let curve = fs::read_to_string(report.join("sf_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);
    assert!(!report.join("classes.csv").exists());

    // Segmentation scores too.
    let o = run(&[
        "eval",
        "--config",
        p(&ws.config()),
        "--fused-dir",
        p(&fused),
        "--dataset",
        p(&input),
        "--seg-model",
        p(&model),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("miou = "), "{text}");
    assert!(report.join("classes.csv").is_file());

    // The reported mean SF is the mean of the per-image values.
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let per_image: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("image."))
        .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(per_image.len(), 2);
    let mean = per_image.iter().sum::<f64>() / 2.0;
    assert!((value("mean_sf") - mean).abs() < 2e-6);

    // A missing fused counterpart is an error.
    fs::remove_file(fused.join("00000.png")).unwrap();
    let o = run(&[
        "eval",
        "--config",
        p(&ws.config()),
        "--fused-dir",
        p(&fused),
        "--dataset",
        p(&input),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn fuse_lists_incomplete_pairs_and_fails() {
    let ws = Workspace::new();
    let o = ws.train("w", &["--phase", "warm"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let input = ws.data().join("val");
    fs::remove_file(input.join("vis/00001.png")).unwrap();
    let out = ws.path("f");
    let o = run(&[
        "fuse",
        "--model",
        p(&ws.path("w/warm.ck")),
        "--input-dir",
        p(&input),
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("failed 00001"));
    assert!(stdout(&o).contains("fuse written=1 failed=1"));
}

#[test]
fn ablate_writes_a_deterministic_table() {
    let ws = Workspace::new();
    let plan = ws.path("plan.txt");
    fs::write(
        &plan,
        "# two rows\nOurs (Ave-ST)\nw/o L_reg | train.lambda=0\n",
    )
    .unwrap();
    let mut tables = Vec::new();
    for out in ["a1", "a2"] {
        let o = bin()
            .args(["ablate", "--config", p(&ws.config()), "--plan", p(&plan)])
            .args(["--data", p(&ws.data()), "--out", p(&ws.path(out))])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        tables.push(fs::read_to_string(ws.path(out).join("ablation.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let rows: Vec<&str> = tables[0]
        .lines()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, ["row", "Ours (Ave-ST)", "w/o L_reg"]);

    fs::write(&plan, "bad | train.lambda\n").unwrap();
    let o = bin()
        .args(["ablate", "--config", p(&ws.config()), "--plan", p(&plan)])
        .args(["--data", p(&ws.data()), "--out", p(&ws.path("a3"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
