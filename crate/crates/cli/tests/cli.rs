use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
filters=2,4
kernels=3
dense=4
k=2
batch=16
epochs=2
patience=1
folds=2
max_folds=1
synth_recordings=12
synth_windows=2
seed=4
";

fn qivc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qivc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qivc(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn trained(dir: &Path) {
    fs::write(dir.join("run.config"), TINY).unwrap();
    let c = ["--config", "run.config"];
    ok(dir, &[&["synth", "--out", "data"][..], &c].concat());
    ok(dir, &[&["preprocess", "--manifest", "data/manifest.csv", "--out", "data"][..], &c].concat());
    ok(dir, &[&["train", "--cache", "data/segments.bin", "--out", "runs"][..], &c].concat());
}

#[test]
fn train_eval_and_reports_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    for f in ["data/synth.config", "data/preprocess.config", "runs/train.config", "runs/metrics.csv", "runs/fold0/log.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(!dir.join("runs/fold1").exists());
    let resolved = fs::read_to_string(dir.join("runs/train.config")).unwrap();
    assert!(resolved.contains("seed=4\n") && resolved.contains("cache=data/segments.bin\n"));

    let ck = ["--checkpoint", "runs/fold0/checkpoint.qivc"];
    ok(dir, &[&["eval", "--out", "e1"][..], &ck].concat());
    ok(dir, &[&["eval", "--out", "e2"][..], &ck].concat());
    let e1 = fs::read(dir.join("e1/eval_metrics.csv")).unwrap();
    assert_eq!(e1, fs::read(dir.join("e2/eval_metrics.csv")).unwrap());
    assert!(String::from_utf8(e1).unwrap().starts_with("split,tp,fp,tn,fn,"));

    ok(dir, &[&["robustness", "--out", "rob", "--set", "snr_levels=20,5"][..], &ck].concat());
    let rob = fs::read_to_string(dir.join("rob/robustness.csv")).unwrap();
    assert_eq!(rob.lines().count(), 3);
    assert!(rob.lines().nth(1).unwrap().starts_with("20,"));

    ok(dir, &[&["calibrate", "--out", "cal"][..], &ck].concat());
    let rel = fs::read_to_string(dir.join("cal/reliability.csv")).unwrap();
    assert_eq!(rel.lines().count(), 11);
    assert!(fs::read_to_string(dir.join("cal/ece.csv")).unwrap().starts_with("ece,count\n"));

    ok(dir, &[&["export-latent", "--out", "lat"][..], &ck].concat());
    let lat = fs::read_to_string(dir.join("lat/latent.csv")).unwrap();
    assert_eq!(lat.lines().next(), Some("id,label,z0,z1,z2"));
    assert_eq!(lat.lines().count(), 1 + 12 * 2);
}

#[test]
fn noise_stats_rows_cover_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["noise-stats", "--out", "ns", "--set", "noise_trials=20", "--set", "noise_ks=1,3", "--set", "noise_ps=0,0.2"];
    ok(tmp.path(), &args);
    let csv = fs::read_to_string(tmp.path().join("ns/noise_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let again = tempfile::tempdir().unwrap();
    ok(again.path(), &args);
    assert_eq!(csv, fs::read_to_string(again.path().join("ns/noise_stats.csv")).unwrap());
}

#[test]
fn failures_exit_with_their_class_and_leave_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = qivc(dir, &["noise-stats", "--out", "bad", "--set", "noise_ks=500"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[config]: ") && err.lines().count() == 1, "{err}");
    assert!(!dir.join("bad").exists());

    let out = qivc(dir, &["train", "--cache", "missing.bin", "--out", "t"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[data]: "));
    assert!(!dir.join("t").exists());

    assert_eq!(qivc(dir, &["eval"]).status.code(), Some(2));
    assert_eq!(qivc(dir, &["train", "--set", "folds=1"]).status.code(), Some(2));
    assert_eq!(qivc(dir, &["train", "--set", "nonsense=1"]).status.code(), Some(2));
    assert_eq!(qivc(dir, &["frobnicate"]).status.code(), Some(2));

    // a manifest whose only recording is too short for one window
    fs::create_dir(dir.join("m")).unwrap();
    qivc::pcg::io::write_wav(&dir.join("m/a.wav"), &vec![0.1; 2000], 2000).unwrap();
    fs::write(dir.join("m/manifest.csv"), "recording_id,path,label\na,a.wav,normal\n").unwrap();
    let out = qivc(dir, &["preprocess", "--manifest", "m/manifest.csv", "--out", "p"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.join("p").exists());
}
