use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tcupgan_cli::dataset::Manifest;
use tcupgan_core::volume::{read_raw_labels, read_raw_volume};

fn tcupgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcupgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tcupgan(args);
    assert!(
        out.status.success(),
        "tcupgan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_RUN: &str = r#"{
  "generator": {"encoder_filters": [2, 3, 4, 5, 6], "decoder_up_channels": 2},
  "discriminator": {"filters": [2, 3, 4, 5]},
  "preprocess": {"target_hw": null},
  "train": {"epochs": 1, "batch_size": 1, "train_fraction": 1.0}
}"#;

fn tiny_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(TINY_RUN).unwrap();
    edit(&mut v);
    let p = dir.join("run.json");
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn phantoms(dir: &Path, n: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&["make-phantoms", "--n", &n.to_string(), "--dims", "8,32,32", "--seed", "3", "--out", s(&data)]);
    data
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn make_phantoms_writes_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["make-phantoms", "--n", "10", "--seed", "5", "--out", s(&a)]);
    ok(&["make-phantoms", "--n", "10", "--seed", "5", "--out", s(&b)]);
    let m = Manifest::read(&a).unwrap();
    assert_eq!(m.samples.len(), 10);
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
    // 10 image pairs and 10 label pairs, each a sidecar plus a blob
    assert_eq!(read_dir_sorted(&a).len(), 40 + 2);

    let c = tmp.path().join("c");
    ok(&["make-phantoms", "--n", "2", "--dims", "16,32,32", "--out", s(&c)]);
    for e in Manifest::read(&c).unwrap().samples {
        assert_eq!(read_raw_volume(&c.join(&e.images[0])).unwrap().dim(), (4, 16, 32, 32));
        assert_eq!(read_raw_labels(&c.join(e.labels.unwrap())).unwrap().dim(), (16, 32, 32));
    }
}

#[test]
fn desk_scale_smoke_run_finishes_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 2);
    let run = tmp.path().join("run");
    let start = Instant::now();
    ok(&[
        "train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--batch-size", "1", "--target-hw", "native",
    ]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "took {secs:.0} s");
    assert!(run.join("checkpoints/epoch_001.ckpt").exists());
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), tcupgan_core::training::LOSS_LOG_HEADER);
}

#[test]
fn default_epochs_write_thirty_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 1);
    let cfg = tiny_config(tmp.path(), |v| {
        v["train"]["epochs"] = serde_json::Value::from(30);
    });
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpts = fs::read_dir(run.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 30);
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 30);
}

#[test]
fn resolved_train_config_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 2);
    let cfg = tiny_config(tmp.path(), |v| {
        v["train"]["gamma"] = 7.5.into();
        v["train"]["epochs"] = 2.into();
    });
    let first = tmp.path().join("first");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&first)]);

    // no --data: the dataset path comes from the resolved file
    let second = tmp.path().join("second");
    ok(&["train", "--config", s(&first.join("train.config.json")), "--out", s(&second)]);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(second.join("train.config.json")).unwrap()).unwrap();
    assert_eq!(resolved["run"]["train"]["gamma"], 7.5);
    assert_eq!(
        fs::read(first.join("checkpoints/epoch_002.ckpt")).unwrap(),
        fs::read(second.join("checkpoints/epoch_002.ckpt")).unwrap()
    );
}

#[test]
fn transfer_uses_constant_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 2);
    let cfg = tiny_config(tmp.path(), |v| {
        v["train"]["epochs"] = serde_json::Value::from(6);
    });
    let base = tmp.path().join("base");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&base), "--epochs", "1"]);
    let ckpt = base.join("checkpoints/epoch_001.ckpt");
    let tuned = tmp.path().join("tuned");
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tuned), "--transfer", "--init-weights", s(&ckpt),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tuned.join("report.json")).unwrap()).unwrap();
    let epochs = report["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 6);
    for e in epochs {
        assert_eq!(e["lr_gen"].as_f64(), Some(1e-4));
        assert_eq!(e["lr_disc"].as_f64(), Some(1e-4));
    }
    let log = fs::read_to_string(tuned.join("loss_log.csv")).unwrap();
    for row in log.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[6].parse::<f64>().unwrap(), 1e-4);
    }
    // --transfer without weights is a configuration error
    let out = tcupgan(&["train", "--data", s(&data), "--out", s(&tmp.path().join("x")), "--transfer"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 2);
    let cfg = tiny_config(tmp.path(), |v| {
        v["train"]["epochs"] = serde_json::Value::from(3);
    });
    let full = tmp.path().join("full");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    let part = tmp.path().join("part");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&part), "--max-steps", "2"]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--resume",
        s(&part.join("checkpoints/epoch_001.ckpt")),
    ]);
    assert_eq!(
        fs::read(full.join("checkpoints/epoch_003.ckpt")).unwrap(),
        fs::read(part.join("checkpoints/epoch_003.ckpt")).unwrap()
    );
}

fn trained_checkpoint(tmp: &Path, data: &Path) -> PathBuf {
    let cfg = tiny_config(tmp, |_| {});
    let run = tmp.join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(data), "--out", s(&run)]);
    run.join("checkpoints/epoch_001.ckpt")
}

#[test]
fn predict_writes_valid_labels_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 2);
    let ckpt = trained_checkpoint(tmp.path(), &data);
    let pred = tmp.path().join("pred");
    let args = [
        "predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&pred), "--thresholds", "125,75,20",
    ];
    ok(&args);
    let first = read_dir_sorted(&pred);
    for e in Manifest::read(&pred).unwrap().samples {
        let l = read_raw_labels(&pred.join(e.labels.unwrap())).unwrap();
        assert!(l.data().iter().all(|&v| v <= 3));
        assert_eq!(e.classes.unwrap().len(), 3);
    }
    ok(&args);
    assert_eq!(read_dir_sorted(&pred), first);
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pred.join("predict.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["thresholds"]["a_thresh"], serde_json::json!([125.0, 75.0, 20.0]));

    // replaying the stored configuration reproduces the outputs
    let replay = tmp.path().join("replay");
    ok(&["predict", "--config", s(&pred.join("predict.config.json")), "--out", s(&replay)]);
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        v.into_iter().filter(|(n, _)| !n.ends_with(".config.json")).collect()
    };
    assert_eq!(strip(read_dir_sorted(&replay)), strip(first));

    let nifti = tmp.path().join("nifti");
    ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&nifti), "--format", "nifti", "--thresholds", "gli"]);
    assert!(nifti.join("phantom_000_labels.nii.gz").exists());
}

#[test]
fn predict_pads_sizes_that_are_not_multiples_of_32() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("odd");
    ok(&["make-phantoms", "--n", "1", "--dims", "8,40,36", "--out", s(&data)]);
    let small = phantoms(tmp.path(), 1);
    let ckpt = trained_checkpoint(tmp.path(), &small);
    let pred = tmp.path().join("pred");
    ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&pred)]);
    let l = read_raw_labels(&pred.join("phantom_000_labels.json")).unwrap();
    assert_eq!(l.dim(), (8, 40, 36));
}

fn prediction_set(dir: &Path, gt: &Path, empty: bool) {
    fs::create_dir_all(dir).unwrap();
    let mut m = Manifest::read(gt).unwrap();
    for e in &mut m.samples {
        let file = e.labels.clone().unwrap();
        let mut l = read_raw_labels(&gt.join(&file)).unwrap().into_data();
        if empty {
            l.fill(0);
        }
        let l = tcupgan_core::volume::LabelVolume::new(l).unwrap();
        tcupgan_core::volume::write_raw_labels(&dir.join(&file), &l).unwrap();
        e.images.clear();
    }
    m.write(dir).unwrap();
}

#[test]
fn evaluate_perfect_and_empty_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = phantoms(tmp.path(), 3);
    let perfect = tmp.path().join("perfect");
    prediction_set(&perfect, &gt, false);
    let out = tmp.path().join("eval_perfect");
    let stdout = ok(&["evaluate", "--pred", s(&perfect), "--gt", s(&gt), "--out", s(&out)]).stdout;
    let table = String::from_utf8(stdout).unwrap();
    assert!(table.contains("Mean") && table.contains("Median"));
    for cls in ["WT", "TC", "ET"] {
        assert!(table.lines().next_back().unwrap().len() > 0 && table.contains(cls));
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    for row in csv.lines().skip(1) {
        let c: Vec<&str> = row.split(',').collect();
        assert_eq!((c[2], c[3], c[5]), ("1", "0", "0"), "{row}");
    }
    for f in ["summary.csv", "summary.txt", "dice_histogram.csv", "hd95_histogram.csv", "evaluate.config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let empty = tmp.path().join("empty");
    prediction_set(&empty, &gt, true);
    let out = tmp.path().join("eval_empty");
    ok(&["evaluate", "--pred", s(&empty), "--gt", s(&gt), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let c: Vec<&str> = row.split(',').collect();
        assert_eq!((c[2], c[3]), ("0", "374"), "{row}");
    }
}

#[test]
fn evaluate_rejects_unmatched_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = phantoms(tmp.path(), 2);
    let pred = tmp.path().join("pred");
    prediction_set(&pred, &gt, false);
    let mut m = Manifest::read(&pred).unwrap();
    m.samples[0].id = "someone_else".into();
    m.write(&pred).unwrap();
    let out = tcupgan(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unmatched"));
}

#[test]
fn tune_thresholds_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 2);
    let ckpt = trained_checkpoint(tmp.path(), &data);
    let run = |out: &str, extra: &[&str]| -> serde_json::Value {
        let dir = tmp.path().join(out);
        let mut args = vec!["tune-thresholds", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dir)];
        args.extend_from_slice(extra);
        ok(&args);
        serde_json::from_str(&fs::read_to_string(dir.join("tuner_report.json")).unwrap()).unwrap()
    };
    let single = run("single", &["--grid", "42"]);
    assert_eq!(single["selected"]["a_thresh"], serde_json::json!([42.0, 42.0, 42.0]));
    let a = run("a", &["--iters", "30", "--seed", "9", "--min-span", "3"]);
    let b = run("b", &["--iters", "30", "--seed", "9", "--min-span", "3"]);
    assert_eq!(a, b);
    let candidates = a["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 30);
    assert!(candidates.iter().all(|c| c["mean_dice"].as_array().unwrap().len() == 3));
    assert!(tmp.path().join("a/thresholds.json").exists());
    // the selected thresholds feed straight into predict
    let pred = tmp.path().join("pred");
    ok(&[
        "predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&pred), "--thresholds",
        s(&tmp.path().join("a/tuner_report.json")),
    ]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(tmp.path(), 1);
    let out = tcupgan(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tcupgan(&["evaluate", "--pred", "/nonexistent/pred", "--gt", s(&data), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(4));
    let cfg = tiny_config(tmp.path(), |v| {
        v["train"]["gen_lr0"] = serde_json::Value::from(1e300);
        v["train"]["disc_lr0"] = serde_json::Value::from(1e300);
        v["train"]["lr_decay"] = serde_json::Value::from("constant");
        v["train"]["epochs"] = serde_json::Value::from(3);
    });
    let out = tcupgan(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = tcupgan(&["predict", "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = tcupgan(&["describe"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("2538667"));
}
