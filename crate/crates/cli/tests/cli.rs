use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynframe::data::{gen_synthetic, load_dataset, write_dataset};
use nalgebra::Vector3;
use tempfile::TempDir;

const TINY: &[&str] = &[
    "--set", "model.width=8",
    "--set", "model.heads=2",
    "--set", "model.blocks=1",
    "--set", "model.ffn_width=16",
    "--set", "pos.preset=lightweight",
    "--set", "train.epochs=3",
    "--set", "train.batch_size=8",
    "--set", "train.swa_epochs=1",
];

fn dynframe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynframe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(records: usize) -> Self {
        let dir = TempDir::new().unwrap();
        write_dataset(&dir.path().join("data.jsonl"), &gen_synthetic(records, 3).unwrap()).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let data = self.path("data.jsonl");
        let out = self.path(out);
        let mut args = vec!["train", "--data", p(&data), "--out", p(&out), "--seed", "5"];
        args.extend_from_slice(TINY);
        args.extend_from_slice(extra);
        dynframe(&args)
    }
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_artifacts_and_logs_every_epoch() {
    let ws = Workspace::new(32);
    assert_ok(&ws.train("run", &[]));
    for name in ["checkpoint.json", "checkpoint_swa.json", "train_log.csv", "split.json"] {
        assert!(ws.path("run").join(name).exists(), "{name} missing");
    }
    let log = text(&ws.path("run/train_log.csv"));
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,step,lr,train_mae,val_mae,seconds");
    assert_eq!(rows.len(), 1 + 3);
    for (k, row) in rows[1..].iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], k.to_string());
        assert!(cols[3].parse::<f64>().unwrap().is_finite());
    }
    let manifest: serde_json::Value = serde_json::from_str(&text(&ws.path("run/split.json"))).unwrap();
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|k| manifest[k].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes.iter().sum::<usize>(), 32);
}

#[test]
fn missing_data_flag_is_a_usage_error() {
    let o = dynframe(&["train", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dynframe(&["train", "--data", "/nonexistent.jsonl", "--out", "/tmp/unused-dynframe"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dynframe(&["predict", "--checkpoint", "x.json", "--data", "y.jsonl", "--set", "model.depth=3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_is_deterministic() {
    let ws = Workspace::new(16);
    assert_ok(&ws.train("a", &[]));
    assert_ok(&ws.train("b", &[]));
    for name in ["checkpoint.json", "checkpoint_swa.json", "split.json"] {
        assert_eq!(text(&ws.path("a").join(name)), text(&ws.path("b").join(name)), "{name}");
    }
}

#[test]
fn predictions_reproduce_the_reported_training_mae() {
    let ws = Workspace::new(12);
    assert_ok(&ws.train("run", &["--set", "split.train=1", "--set", "split.val=0", "--set", "split.test=0"]));
    let ck = ws.path("run/checkpoint.json");
    let data = ws.path("data.jsonl");
    let out = ws.path("pred.csv");
    assert_ok(&dynframe(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&out)]));

    let entries = load_dataset(&data).unwrap();
    let preds = text(&out);
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("id,prediction"));
    let mut abs = 0.0;
    for (line, e) in lines.zip(&entries) {
        let (id, y) = line.split_once(',').unwrap();
        assert_eq!(id, e.record.id);
        abs += (y.parse::<f64>().unwrap() - e.record.target).abs();
    }
    let mae = abs / entries.len() as f64;
    let log = text(&ws.path("run/train_log.csv"));
    let last = log.lines().last().unwrap();
    let reported: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!((mae - reported).abs() < 1e-9, "{mae} vs {reported}");

    let again = ws.path("pred2.csv");
    assert_ok(&dynframe(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&again)]));
    assert_eq!(preds, text(&again));
}

#[test]
fn empty_dataset_gives_header_only() {
    let ws = Workspace::new(8);
    assert_ok(&ws.train("run", &[]));
    let empty = ws.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = ws.path("pred.csv");
    let ck = ws.path("run/checkpoint.json");
    assert_ok(&dynframe(&["predict", "--checkpoint", p(&ck), "--data", p(&empty), "--out", p(&out)]));
    assert_eq!(text(&out), "id,prediction\n");
}

#[test]
fn config_mismatch_names_the_key() {
    let ws = Workspace::new(8);
    assert_ok(&ws.train("run", &[]));
    let cfg = ws.path("model.cfg");
    fs::write(&cfg, "model.width = 8\nmodel.heads = 2\nmodel.blocks = 2\nmodel.ffn_width = 16\npos.preset = lightweight\n").unwrap();
    let ck = ws.path("run/checkpoint.json");
    let data = ws.path("data.jsonl");
    let o = dynframe(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.blocks"));
}

fn check(extra: &[&str]) -> Output {
    let mut args = vec![
        "check", "--count", "6",
        "--set", "model.width=8", "--set", "model.heads=2", "--set", "model.blocks=2", "--set", "model.ffn_width=16",
    ];
    args.extend_from_slice(extra);
    dynframe(&args)
}

fn report_rows(o: &Output) -> Vec<Vec<String>> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn fresh_model_passes_the_invariance_suites() {
    for method in ["max", "weighted_pca"] {
        let set = format!("model.frame_method={method}");
        let o = check(&["--set", &set, "--suites", "rotation,translation,permutation,supercell,frames"]);
        assert_ok(&o);
        let rows = report_rows(&o);
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r[3] == "pass"), "{rows:?}");
    }
}

#[test]
fn truncation_suite_reports_a_measured_relative_change() {
    let o = check(&["--suites", "truncation"]);
    let rows = report_rows(&o);
    assert_eq!(rows.len(), 1);
    let deviation: f64 = rows[0][1].parse().unwrap();
    assert!(deviation.is_finite() && deviation > 0.0);
    // The status follows the numbers; a violation names a structure.
    match o.status.code() {
        Some(0) => assert_eq!(rows[0][3], "pass"),
        Some(4) => assert!(String::from_utf8_lossy(&o.stderr).contains("syn-")),
        other => panic!("unexpected exit {other:?}"),
    }
}

#[test]
fn corrupted_frames_are_a_violation() {
    let o = check(&["--suites", "frames,rotation", "--corrupt-frames"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("frames") && err.contains("syn-"), "{err}");
    assert!(report_rows(&o).iter().all(|r| r[3] == "FAIL"));
}

#[test]
fn conventional_pca_is_flagged_not_supercell_invariant() {
    let o = check(&["--set", "model.frame_method=pca", "--suites", "supercell"]);
    assert_ok(&o);
    let rows = report_rows(&o);
    assert_eq!(rows[0][0], "supercell");
    assert_eq!(rows[0][3], "not-invariant");
    assert!(rows[0][1].parse::<f64>().unwrap() > 1e-8);
}

#[test]
fn frame_dump_has_one_record_per_layer_head_atom() {
    let ws = Workspace::new(8);
    assert_ok(&ws.train("run", &["--set", "model.blocks=2"]));
    let data = ws.path("data.jsonl");
    let atoms = load_dataset(&data).unwrap()[1].structure.len();
    let ck = ws.path("run/checkpoint.json");
    let swa = ws.path("run/checkpoint_swa.json");
    let out = ws.path("frames.csv");
    assert_ok(&dynframe(&[
        "frames", "--checkpoint", p(&ck), "--checkpoint", p(&swa), "--data", p(&data), "--index", "1", "--out", p(&out),
    ]));
    let dump = text(&out);
    let mut lines = dump.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 17);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let per_checkpoint = 2 * 2 * atoms;
    assert_eq!(rows.len(), 2 * per_checkpoint);
    assert!(rows[..per_checkpoint].iter().all(|r| r[0] == "checkpoint.json"));
    assert!(rows[per_checkpoint..].iter().all(|r| r[0] == "checkpoint_swa.json"));
    for r in &rows {
        assert_eq!(r.len(), 17);
        let axes: Vec<Vector3<f64>> = (0..3)
            .map(|k| Vector3::from_fn(|c, _| r[8 + 3 * k + c].parse::<f64>().unwrap()))
            .collect();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((axes[a].dot(&axes[b]) - want).abs() < 1e-9);
            }
        }
        assert!((axes[0].cross(&axes[1]).dot(&axes[2]) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn perturbation_sweeps() {
    let ws = Workspace::new(8);
    assert_ok(&ws.train("run", &[]));
    let ck = ws.path("run/checkpoint.json");
    let data = ws.path("data.jsonl");
    let flat = ws.path("flat.csv");
    assert_ok(&dynframe(&[
        "perturb", "--checkpoint", p(&ck), "--data", p(&data), "--atom", "0", "--range", "0", "--steps", "3", "--out", p(&flat),
    ]));
    let pred = ws.path("pred.csv");
    assert_ok(&dynframe(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&pred)]));
    let first = text(&pred).lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    let flat_text = text(&flat);
    let ys: Vec<&str> = flat_text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(ys, vec![first.as_str(); 3]);

    let bad = dynframe(&[
        "perturb", "--checkpoint", p(&ck), "--data", p(&data), "--atom", "99", "--range", "0.1", "--steps", "3",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let one = dynframe(&[
        "perturb", "--checkpoint", p(&ck), "--data", p(&data), "--atom", "0", "--range", "0.1", "--steps", "1",
    ]);
    assert_eq!(one.status.code(), Some(1));
}

#[test]
fn generate_writes_loadable_records() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("syn.jsonl");
    assert_ok(&dynframe(&["generate", "--count", "5", "--seed", "9", "--out", p(&out)]));
    let entries = load_dataset(&out).unwrap();
    assert_eq!(entries.len(), 5);
    assert_eq!(entries[0].record, gen_synthetic(5, 9).unwrap()[0]);
}
