use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectral-adapt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// World and cache built through the binary.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["world", "--out", s(&root.join("world"))]);
        ok(&[
            "svd-cache",
            "--backbone",
            s(&root.join("world/backbone.json")),
            "--out",
            s(&root.join("cache")),
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    fn train(&self, task: &str, seed: &str, out: &str, extra: &[&str]) -> Output {
        let (world, cache) = (self.root.join("world"), self.root.join("cache"));
        let mut args = vec![
            "train",
            "--world",
            s(&world),
            "--cache",
            s(&cache),
            "--task",
            task,
            "--seed",
            seed,
            "--steps",
            "30",
            "--gaussian-init",
            "--out",
        ];
        let out = self.root.join(out);
        args.push(s(&out));
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn world_and_cache_artifacts() {
    let fx = Fixture::new();
    for f in [
        "world/world.json",
        "world/backbone.json",
        "world/resolved_config.json",
        "cache/manifest.json",
    ] {
        assert!(fx.path(f).exists(), "{f} missing");
    }
    let manifest = json(&fx.path("cache/manifest.json"));
    assert!(manifest.get("backbone_id").is_some());
    let resolved = json(&fx.path("cache/resolved_config.json"));
    assert_eq!(resolved["k"], 8);
}

#[test]
fn train_merge_pipeline() {
    let fx = Fixture::new();
    for (task, out) in [("task0", "a0"), ("task1", "a1")] {
        let o = fx.train(task, "5", out, &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for f in [
            "adapter.json",
            "trace.json",
            "scorecard.json",
            "resolved_config.json",
        ] {
            assert!(fx.path(out).join(f).exists(), "{out}/{f} missing");
        }
    }
    let trace = json(&fx.path("a0/trace.json"));
    assert_eq!(trace.as_array().unwrap().len(), 30);
    for key in ["step", "loss", "omega", "grad_norm", "lr"] {
        assert!(trace[0].get(key).is_some(), "trace lacks {key}");
    }
    let card = json(&fx.path("a0/scorecard.json"));
    assert!(card.is_object());

    ok(&[
        "merge",
        "--world",
        s(&fx.path("world")),
        "--cache",
        s(&fx.path("cache")),
        "--adapters",
        s(&fx.path("a0")),
        s(&fx.path("a1")),
        "--n-merge",
        "1",
        "--replicates",
        "100",
        "--out",
        s(&fx.path("merged")),
    ]);
    let report = json(&fx.path("merged/merge_report.json"));
    let summary = &report["summaries"][0];
    assert_eq!(summary["t"], 2);
    assert_eq!(summary["tau"], 0.9);
    assert!(fx.path("merged/merged_backbone.json").exists());
}

#[test]
fn train_is_reproducible_under_seed() {
    let fx = Fixture::new();
    fx.train("task0", "9", "x", &[]);
    fx.train("task0", "9", "y", &[]);
    for f in ["fc1.hipa", "fc2.hipa", "trace.json"] {
        assert_eq!(
            fs::read(fx.path("x").join(f)).unwrap(),
            fs::read(fx.path("y").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_config_file() {
    let fx = Fixture::new();
    let cfg = fx.path("train.json");
    fs::write(
        &cfg,
        r#"{"r": 2, "mode": "projlora", "train": {"steps": 5}}"#,
    )
    .unwrap();
    let out = fx.path("o");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--world",
        s(&fx.path("world")),
        "--cache",
        s(&fx.path("cache")),
        "--r",
        "3",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = json(&out.join("resolved_config.json"));
    assert_eq!(resolved["r"], 3);
    assert_eq!(resolved["mode"], "projlora");
    assert_eq!(resolved["train"]["steps"], 5);
    assert_eq!(resolved["train"]["lr"], 2e-4);
}

#[test]
fn probe_and_continual_reports() {
    let fx = Fixture::new();
    ok(&[
        "probe",
        "--world",
        s(&fx.path("world")),
        "--replicates",
        "200",
        "--out",
        s(&fx.path("probe")),
    ]);
    let probe = json(&fx.path("probe/probe_report.json"));
    assert!(probe.is_object());
    ok(&[
        "continual",
        "--world",
        s(&fx.path("world")),
        "--sequence",
        "task0,task1",
        "--steps",
        "10",
        "--out",
        s(&fx.path("cont")),
    ]);
    let cont = json(&fx.path("cont/continual_matrix.json"));
    assert!(cont.is_object());
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    // Missing input.
    let o = run(&[
        "svd-cache",
        "--backbone",
        s(&fx.path("nope.json")),
        "--out",
        s(&fx.path("c2")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    // Malformed config.
    let bad = fx.path("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        run(&["world", "--config", s(&bad), "--out", s(&fx.path("w2"))])
            .status
            .code(),
        Some(7)
    );
    // Unknown flag value.
    assert_eq!(
        fx.train("task0", "1", "z", &["--mode", "dora"])
            .status
            .code(),
        Some(7)
    );
    // Cache of a different backbone.
    ok(&["world", "--seed", "99", "--out", s(&fx.path("other"))]);
    ok(&[
        "svd-cache",
        "--backbone",
        s(&fx.path("other/backbone.json")),
        "--out",
        s(&fx.path("other_cache")),
    ]);
    let o = run(&[
        "train",
        "--world",
        s(&fx.path("world")),
        "--cache",
        s(&fx.path("other_cache")),
        "--steps",
        "2",
        "--out",
        s(&fx.path("t")),
    ]);
    assert_eq!(o.status.code(), Some(6));
    // Corrupted cache blob.
    let blob = fx.path("cache/fc1.hipc");
    let mut bytes = fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&blob, bytes).unwrap();
    let o = run(&[
        "train",
        "--world",
        s(&fx.path("world")),
        "--cache",
        s(&fx.path("cache")),
        "--steps",
        "2",
        "--out",
        s(&fx.path("t2")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn help_lists_defaults() {
    let o = ok(&["train", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for needle in [
        "--lambda-stab",
        "0.3",
        "--gamma",
        "2e-4",
        "--mode",
        "--steps",
    ] {
        assert!(text.contains(needle), "train help lacks {needle}");
    }
    let o = ok(&["bench", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for needle in [
        "--sequential",
        "--tau",
        "0.9",
        "--merge-rule",
        "--replicates",
        "10000",
    ] {
        assert!(text.contains(needle), "bench help lacks {needle}");
    }
}
