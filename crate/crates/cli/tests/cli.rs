use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "image_size=32",
    "patch=8",
    "d=8",
    "d_q=8",
    "M=4",
    "n=2",
    "train_size=12",
    "eval_size=6",
    "min_extent=6",
    "max_extent=12",
    "pretrain_steps=4",
    "pretrain_batch=2",
    "batch=2",
    "S=6",
    "burn_in=2",
    "checkpoint_every=3",
    "seeds=1,2",
];

fn slotadapt(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slotadapt"));
    cmd.args(args).arg("--out").arg(out);
    for s in SMALL {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = slotadapt(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn csv_row<'a>(text: &'a str, name: &str) -> Vec<&'a str> {
    text.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap_or_else(|| panic!("no {name} row in {text}")).split(',').collect()
}

#[test]
fn train_adapt_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");

    ok(&["gen-data"], &out);
    for split in ["source-train", "target-train", "target-eval", "source-eval"] {
        assert!(out.join("data").join(split).is_dir(), "{split} not exported");
    }
    let data = out.join("data");
    let data_s = data.to_str().unwrap();

    ok(&["pretrain", "--data", data_s], &out);
    let pre = out.join("pretrain").join("checkpoint.txt");
    assert!(fs::read_to_string(out.join("pretrain").join("trace.csv")).unwrap().lines().count() > 4);

    ok(&["adapt", "--from", pre.to_str().unwrap()], &out);
    let adapt = out.join("adapt");
    let final_bytes = fs::read(adapt.join("checkpoint.txt")).unwrap();
    let trace = fs::read_to_string(adapt.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 7);
    assert!(adapt.join("step_000003.txt").exists());

    // Re-scoring the saved student reproduces the logged training-split F1.
    let logged = fs::read_to_string(adapt.join("eval.csv")).unwrap();
    ok(&["eval", "--checkpoint", adapt.join("checkpoint.txt").to_str().unwrap()], &out);
    let fresh = fs::read_to_string(out.join("eval").join("target-train.csv")).unwrap();
    assert_eq!(csv_row(&logged, "target-train"), csv_row(&fresh, "target-train"));
    assert!(out.join("eval").join("target-train_detections.csv").exists());

    // Exported data scores the same as regenerated data.
    let other = dir.path().join("other");
    ok(&["eval", "--checkpoint", pre.to_str().unwrap(), "--split", "target-eval", "--data", data_s], &other);
    ok(&["eval", "--checkpoint", pre.to_str().unwrap(), "--split", "target-eval"], &out);
    assert_eq!(
        fs::read_to_string(other.join("eval").join("target-eval.csv")).unwrap(),
        fs::read_to_string(out.join("eval").join("target-eval.csv")).unwrap()
    );

    let mid = dir.path().join("mid.txt");
    fs::copy(adapt.join("step_000003.txt"), &mid).unwrap();
    fs::remove_dir_all(&adapt).unwrap();
    ok(&["adapt", "--resume", mid.to_str().unwrap()], &out);
    assert_eq!(fs::read(adapt.join("checkpoint.txt")).unwrap(), final_bytes);

    let masks = ok(&["viz-masks", "--checkpoint", adapt.join("checkpoint.txt").to_str().unwrap(), "--count", "2"], &out);
    assert!(masks.contains("wrote 6 images"), "{masks}");
    let ppm = fs::read(out.join("masks").join("scene_00001_fine.ppm")).unwrap();
    assert!(ppm.starts_with(b"P"));
}

#[test]
fn theory_passes_and_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["theory", "--cases", "50"], dir.path());
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let report = fs::read_to_string(dir.path().join("theory").join("report.txt")).unwrap();
    assert_eq!(report, stdout);
    let csv = fs::read_to_string(dir.path().join("theory").join("contraction.csv")).unwrap();
    assert!(csv.starts_with("step,eta,error\n"));
}

#[test]
fn ablation_summary_columns() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["ablate", "--grid", "methods,schedules"], dir.path());
    let csv = fs::read_to_string(dir.path().join("ablate").join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("grid,setting,seed,target_f1,target_map,precision,recall"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 3 + 2 * 4);
    assert!(rows.iter().all(|r| r.len() == 7));
    let methods: Vec<&str> = rows.iter().filter(|r| r[0] == "methods" && r[2] == "1").map(|r| r[1]).collect();
    assert_eq!(methods, ["source_only", "hsa", "hsa_cgsc"]);
    let schedules: Vec<&str> = rows.iter().filter(|r| r[0] == "schedules" && r[2] == "2").map(|r| r[1]).collect();
    assert_eq!(schedules, ["fixed", "cosine", "exponential", "sigmoid"]);
}

#[test]
fn errors_name_their_cause() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = slotadapt(&["eval", "--checkpoint", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nope.txt") && err.to_lowercase().contains("missing"), "{err}");

    let o = Command::new(env!("CARGO_BIN_EXE_slotadapt")).args(["pretrain", "--set", "bogus=1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let o = slotadapt(&["pretrain", "--data", dir.path().join("absent").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("source-train"));

    fs::write(&missing, "slotadapt-checkpoint 1\nkind pretrain\n").unwrap();
    let o = slotadapt(&["eval", "--checkpoint", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}
