use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tractjoint::geometry::Tractogram;
use tractjoint::io::config::read_config;
use tractjoint::io::labels::read_labels;
use tractjoint::io::tck::read_tck;
use tractjoint::metrics;
use tractjoint::registration::tps::{apply_tps, TpsTransform};
use tractjoint::training::TrainState;
use tractjoint_autodiff::checkpoint::encode_checkpoint;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tractjoint"))
        .args(args)
        .output()
        .expect("binary runs")
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

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: TempDir::new().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    /// Two-bundle source, its warped copy and a small config.
    fn small(&self) -> (PathBuf, PathBuf) {
        let spec = self.write(
            "spec.txt",
            "bundle_count = 2\nstreamlines_per_bundle = 10\n",
        );
        let data = self.path("data");
        std::fs::create_dir_all(&data).unwrap();
        ok(&[
            "synth",
            "--spec",
            s(&spec),
            "--out",
            s(&data.join("a.tck")),
            "--labels",
            s(&self.path("a.labels")),
            "--seed",
            "3",
            "--warped-out",
            s(&data.join("b.tck")),
        ]);
        let cfg = self.write(
            "small.cfg",
            "preset = desk\nkeypoints = 6\nclusters = 2\nbatch_size = 8\npretrain_epochs = 3\njoint_epochs = 1\nseed = 2\n",
        );
        (data, cfg)
    }

    fn trained(&self) -> (PathBuf, PathBuf, PathBuf) {
        let (data, cfg) = self.small();
        let pre = self.path("pre.ckpt");
        let joint = self.path("joint.ckpt");
        ok(&[
            "pretrain",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&pre),
        ]);
        ok(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--init",
            s(&pre),
            "--out",
            s(&joint),
        ]);
        (data, cfg, joint)
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_defaults_are_readable_and_reproducible() {
    let w = Workspace::new();
    for name in ["a", "b"] {
        ok(&[
            "synth",
            "--out",
            s(&w.path(&format!("{name}.tck"))),
            "--labels",
            s(&w.path(&format!("{name}.labels"))),
            "--seed",
            "9",
        ]);
    }
    let t = read_tck(w.path("a.tck")).unwrap();
    assert!(!t.is_empty());
    assert_eq!(bytes(&w.path("a.tck")), bytes(&w.path("b.tck")));
    assert_eq!(bytes(&w.path("a.labels")), bytes(&w.path("b.labels")));
    assert_eq!(read_labels(w.path("a.labels")).unwrap().len(), t.len());
}

#[test]
fn synth_with_three_bundles_uses_labels_zero_to_two() {
    let w = Workspace::new();
    let spec = w.write("spec.txt", "bundle_count = 3\nstreamlines_per_bundle = 7\n");
    ok(&[
        "synth",
        "--spec",
        s(&spec),
        "--out",
        s(&w.path("t.tck")),
        "--labels",
        s(&w.path("t.labels")),
    ]);
    let mut labels = read_labels(w.path("t.labels")).unwrap();
    labels.sort();
    labels.dedup();
    assert_eq!(labels, vec![0, 1, 2]);
}

#[test]
fn user_errors_exit_one_without_partial_outputs() {
    let w = Workspace::new();
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--out", "x.tck"]), 1);
    assert_eq!(code(&["--threads", "0", "dump-config"]), 1);

    let bad = w.write("bad.txt", "bundle_count = 2\nshape = banana\n");
    let out = w.path("bad.tck");
    assert_eq!(
        code(&[
            "synth",
            "--spec",
            s(&bad),
            "--out",
            s(&out),
            "--labels",
            s(&w.path("l"))
        ]),
        1
    );
    assert!(!out.exists());

    let empty = w.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let ckpt = w.path("never.ckpt");
    assert_eq!(
        code(&["pretrain", "--data", s(&empty), "--out", s(&ckpt)]),
        1
    );
    assert!(!ckpt.exists());

    let (data, _) = w.small();
    let reg = w.path("reg.tck");
    let missing = w.path("missing.ckpt");
    let a = data.join("a.tck");
    assert_eq!(
        code(&[
            "register",
            "--source",
            s(&a),
            "--target",
            s(&a),
            "--ckpt",
            s(&missing),
            "--out",
            s(&reg)
        ]),
        1
    );
    assert!(!reg.exists());
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn zero_pretrain_epochs_write_the_fresh_initialization() {
    let w = Workspace::new();
    let (data, cfg) = w.small();
    let out = w.path("zero.ckpt");
    ok(&[
        "pretrain",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        "0",
    ]);
    let init = TrainState::init(&read_config(&cfg).unwrap());
    assert_eq!(bytes(&out), encode_checkpoint(&init.to_records()));
}

#[test]
fn training_is_byte_reproducible_and_ignores_thread_count() {
    let w = Workspace::new();
    let (data, cfg) = w.small();
    let outputs: Vec<(Vec<u8>, Vec<u8>)> = ["1", "1", "3"]
        .iter()
        .enumerate()
        .map(|(i, threads)| {
            let pre = w.path(&format!("pre{i}.ckpt"));
            let joint = w.path(&format!("joint{i}.ckpt"));
            let common = [
                "--threads",
                threads,
                "--data",
                s(&data),
                "--config",
                s(&cfg),
            ];
            ok(&[&["pretrain"][..], &common, &["--out", s(&pre)]].concat());
            ok(&[
                &["train"][..],
                &common,
                &["--init", s(&pre), "--out", s(&joint)],
            ]
            .concat());
            (bytes(&pre), bytes(&joint))
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    assert!(!bytes(&w.path("pre0.ckpt.losses.ndjson")).is_empty());

    // A different seed changes the result.
    let other = w.path("other.ckpt");
    ok(&[
        "pretrain",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&other),
        "--seed",
        "77",
    ]);
    assert_ne!(bytes(&other), outputs[0].0);
}

#[test]
fn resumed_pretraining_matches_a_straight_run() {
    let w = Workspace::new();
    let (data, cfg) = w.small();
    let common = ["--data", s(&data), "--config", s(&cfg)];
    let straight = w.path("straight.ckpt");
    let half = w.path("half.ckpt");
    let resumed = w.path("resumed.ckpt");
    ok(&[
        &["pretrain"][..],
        &common,
        &["--out", s(&straight), "--epochs", "4"],
    ]
    .concat());
    ok(&[
        &["pretrain"][..],
        &common,
        &["--out", s(&half), "--epochs", "2"],
    ]
    .concat());
    ok(&[
        &["pretrain"][..],
        &common,
        &["--out", s(&resumed), "--epochs", "4", "--resume", s(&half)],
    ]
    .concat());
    assert_eq!(bytes(&straight), bytes(&resumed));
}

#[test]
fn registering_a_tractogram_onto_itself_keeps_it_in_place() {
    let w = Workspace::new();
    let (data, _, ckpt) = w.trained();
    let a = data.join("a.tck");
    let out = w.path("self.tck");
    ok(&[
        "register",
        "--source",
        s(&a),
        "--target",
        s(&a),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
    ]);
    let t = read_tck(&a).unwrap();
    let r = read_tck(&out).unwrap();
    let before = metrics::abd(&t, &t).unwrap();
    let after = metrics::abd(&r, &t).unwrap();
    assert!((after - before).abs() < 1e-6, "{before} vs {after}");
}

fn max_point_gap(a: &Tractogram, b: &Tractogram) -> f64 {
    assert_eq!(a.len(), b.len());
    a.points()
        .zip(b.points())
        .map(|(p, q)| p.distance(q))
        .fold(0.0, f64::max)
}

#[test]
fn saved_transform_reproduces_the_registered_output() {
    let w = Workspace::new();
    let (data, _, ckpt) = w.trained();
    let (src, tgt) = (data.join("b.tck"), data.join("a.tck"));
    let (out, tps) = (w.path("reg.tck"), w.path("reg.tps"));
    ok(&[
        "register",
        "--source",
        s(&src),
        "--target",
        s(&tgt),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
        "--save-transform",
        s(&tps),
    ]);
    let transform = TpsTransform::from_text(&std::fs::read_to_string(&tps).unwrap()).unwrap();
    let reapplied = apply_tps(&transform, &read_tck(&src).unwrap()).unwrap();
    let written = read_tck(&out).unwrap();
    // Written coordinates are rounded to 32-bit floats.
    assert!(max_point_gap(&reapplied, &written) < 1e-4);
}

#[test]
fn cluster_threshold_extremes() {
    let w = Workspace::new();
    let (data, _, ckpt) = w.trained();
    let a = data.join("a.tck");
    let labels = w.path("c.labels");
    let summary = w.path("c.json");
    let cluster = |thr: &str| {
        ok(&[
            "cluster",
            "--input",
            s(&a),
            "--ckpt",
            s(&ckpt),
            "--out-labels",
            s(&labels),
            "--thr",
            thr,
            "--summary",
            s(&summary),
        ]);
        read_labels(&labels).unwrap()
    };
    let all = cluster("0");
    assert!(all.iter().all(|&l| l >= 0));
    let json: serde_json::Value = serde_json::from_slice(&bytes(&summary)).unwrap();
    assert_eq!(json["rejected_count"], 0);
    let sizes: u64 = json["sizes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(sizes as usize, all.len());

    let none = cluster("1.01");
    assert!(none.iter().all(|&l| l == -1));
    assert_eq!(none.len(), all.len());
}

#[test]
fn clustering_needs_a_jointly_trained_checkpoint() {
    let w = Workspace::new();
    let (data, cfg) = w.small();
    let pre = w.path("pre.ckpt");
    ok(&[
        "pretrain",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&pre),
        "--epochs",
        "0",
    ]);
    let labels = w.path("x.labels");
    assert_eq!(
        code(&[
            "cluster",
            "--input",
            s(&data.join("a.tck")),
            "--ckpt",
            s(&pre),
            "--out-labels",
            s(&labels)
        ]),
        1
    );
    assert!(!labels.exists());
}

#[test]
fn eval_report_matches_library_calls() {
    let w = Workspace::new();
    let (data, _) = w.small();
    let (a, b) = (data.join("a.tck"), data.join("b.tck"));
    let truth = w.path("a.labels");
    let report = w.path("report.json");
    ok(&[
        "eval",
        "--pred-labels",
        s(&truth),
        "--true-labels",
        s(&truth),
        "--tractograms",
        s(&a),
        "--registered",
        s(&b),
        "--targets",
        s(&a),
        "--report",
        s(&report),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&bytes(&report)).unwrap();
    for key in ["ari", "alpha", "rejection_rate", "wmpg", "abd", "wdice"] {
        let id = json[key]["definition_id"].as_str().unwrap_or_default();
        assert!(!id.is_empty(), "{key} lacks a definition id");
    }
    assert_eq!(json["ari"]["value"], 1.0);
    assert_eq!(json["rejection_rate"]["value"], 0.0);

    let (ta, tb) = (read_tck(&a).unwrap(), read_tck(&b).unwrap());
    let labels = read_labels(&truth).unwrap();
    let alpha = metrics::alpha_compactness(&ta, &labels).unwrap();
    assert_eq!(json["alpha"]["value"].as_f64().unwrap(), alpha);
    assert_eq!(
        json["abd"]["value"].as_f64().unwrap(),
        metrics::abd(&tb, &ta).unwrap()
    );
    let dice = metrics::wdice(&tb, &ta, metrics::DEFAULT_SPACING).unwrap();
    assert_eq!(json["wdice"]["value"].as_f64().unwrap(), dice);
}

#[test]
fn eval_needs_something_to_compute() {
    let w = Workspace::new();
    assert_eq!(code(&["eval", "--report", s(&w.path("r.json"))]), 1);
    assert!(!w.path("r.json").exists());
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let w = Workspace::new();
    let report = w.path("grad.json");
    ok(&["gradcheck", "--seed", "0", "--report", s(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&bytes(&report)).unwrap();
    assert_eq!(json["passed"], true);
    let losses = json["losses"].as_array().unwrap();
    assert!(losses.len() >= 5);
    for l in losses {
        assert!(l["max_relative_error"].as_f64().unwrap() < 1e-4, "{l}");
    }
    assert_eq!(
        code(&[
            "gradcheck",
            "--corrupt-gradients",
            "--report",
            s(&w.path("bad.json"))
        ]),
        2
    );
}

#[test]
fn dump_config_round_trips() {
    let w = Workspace::new();
    let cfg = w.write("c.cfg", "preset = desk\nclusters = 5\n");
    let first = ok(&["dump-config", "--config", s(&cfg)]).stdout;
    let dumped = w.write("d.cfg", std::str::from_utf8(&first).unwrap());
    let second = ok(&["dump-config", "--config", s(&dumped)]).stdout;
    assert_eq!(first, second);
    assert_eq!(read_config(&dumped).unwrap(), read_config(&cfg).unwrap());
}
