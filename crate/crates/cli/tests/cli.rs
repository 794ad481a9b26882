use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn srl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srl"))
        .args(args)
        .env_remove("SRL_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_error_line(o: &Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let text = stderr(o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    assert!(lines[0].starts_with(&format!("error: code={code} kind={kind} msg=\"")), "{text}");
}

const TINY: &[&str] = &[
    "--n-train", "60", "--n-test", "32", "--epochs", "2", "--milestones", "1", "--batch-size", "16",
    "--eval-samples", "8", "--steps", "3", "--train-steps", "2", "--attack-warmup", "0",
];

/// A two-epoch adversarially trained checkpoint shared by the analysis tests.
fn trained() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let out = dir.join("run");
        let mut args = vec!["train", "--objective", "sarwa", "--seed", "3", "--out", out.to_str().unwrap()];
        args.extend_from_slice(TINY);
        let o = srl(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    })
}

#[test]
fn gradcheck_reports_errors_below_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = srl(&["gradcheck", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("gradcheck.json"));
    let cases = report["cases"].as_array().unwrap();
    assert!(cases.len() > 20);
    for c in cases {
        assert!(c["max_rel_error"].as_f64().unwrap() < 1e-6, "{c}");
    }
    assert_eq!(read_json(&out.join("run.json"))["seed"], 1);
}

#[test]
fn unknown_subcommand_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = srl(&["distill", "--out", out.to_str().unwrap()]);
    assert_error_line(&o, 2, "usage");
    assert!(!out.exists());
}

#[test]
fn unknown_flag_exits_2() {
    let o = srl(&["gradcheck", "--sede", "1"]);
    assert_error_line(&o, 2, "usage");
}

#[test]
fn invalid_values_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    for args in [
        vec!["train", "--epsilon", "8/zero", "--out", out],
        vec!["train", "--metric", "l7", "--out", out],
        vec!["train", "--objective", "awp", "--out", out],
        vec!["train", "--n-train", "61", "--out", out],
        vec!["train", "--epsilon=-0.1", "--out", out],
        vec!["train", "--milestones", "5,3", "--out", out],
    ] {
        let o = srl(&args);
        assert_error_line(&o, 3, "invalid_config");
    }
    assert!(!Path::new(out).exists());
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("nope.ckpt");
    let o = srl(&["sweep", "--checkpoint", ck.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_error_line(&o, 4, "missing_checkpoint");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn analysis_without_checkpoint_is_a_config_error() {
    let o = srl(&["spectrum"]);
    assert_error_line(&o, 3, "invalid_config");
}

#[test]
fn train_writes_every_artifact() {
    let run = trained();
    for f in ["report.json", "epochs.csv", "best.ckpt", "final.ckpt", "wa.ckpt", "test.json", "run.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(run.join("epochs.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,loss,clean_acc,robust_acc,sar_term");
    assert_eq!(lines.len(), 3);
    let echo = read_json(&run.join("run.json"));
    assert_eq!(echo["command"], "train");
    assert_eq!(echo["objective"], "sarwa");
    assert_eq!(echo["epsilon"].as_f64().unwrap(), 8.0 / 255.0);
    let leftovers: Vec<_> = fs::read_dir(run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn run_json_regenerates_bit_identical_artifacts() {
    let run = trained();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    let o = srl(&["train", "--config", run.join("run.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["epochs.csv", "best.ckpt", "final.ckpt", "wa.ckpt", "test.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_written_for_another_command_is_rejected() {
    let run = trained();
    let o = srl(&["sweep", "--config", run.join("run.json").to_str().unwrap()]);
    assert_error_line(&o, 3, "invalid_config");
}

#[test]
fn sweep_csv_has_one_row_per_bandwidth() {
    let run = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let ck = run.join("best.ckpt");
    let mut args = vec!["sweep", "--checkpoint", ck.to_str().unwrap(), "--bandwidths", "4,8,16", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&["--n-test", "32", "--steps", "3"]);
    let o = srl(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "bandwidth,best");
    let json = read_json(&out.join("sweep.json"));
    assert!(json["curves"][0]["robust"].is_number());

    let atk = dir.path().join("attack");
    let o = srl(&["attack", "--checkpoint", ck.to_str().unwrap(), "--n-test", "32", "--steps", "3", "--out", atk.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = read_json(&atk.join("attack.json"));
    let identity = json["curves"][0]["accuracy"][2].as_f64().unwrap();
    assert_eq!(identity, a["clean_acc"].as_f64().unwrap());
    assert_eq!(json["curves"][0]["robust"], a["robust_acc"]);
}

#[test]
fn zero_bandwidth_perturbation_filter_gives_clean_accuracy() {
    let run = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let ck = run.join("best.ckpt");
    let o = srl(&[
        "attack", "--checkpoint", ck.to_str().unwrap(), "--bandwidth", "0", "--filter", "lpf", "--n-test", "32",
        "--steps", "3", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = read_json(&out.join("attack.json"));
    assert_eq!(a["filtered_acc"], a["clean_acc"]);
}

#[test]
fn aggressiveness_spectrum_and_heatmap_write_maps() {
    let run = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = run.join("best.ckpt");
    let ck = ck.to_str().unwrap();
    let ag = dir.path().join("ag");
    let o = srl(&["aggressiveness", "--checkpoint", ck, "--n-test", "32", "--steps", "3", "--out", ag.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ag.join("aggressiveness.csv")).unwrap();
    assert!(csv.starts_with("bandwidth,lpf,hpf\n"));
    assert_eq!(csv.lines().count(), 10);

    let sp = dir.path().join("sp");
    let o = srl(&["spectrum", "--checkpoint", ck, "--n-test", "32", "--samples", "32", "--steps", "3", "--out", sp.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = fs::read(sp.join("spectrum.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n65535\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n65535\n".len() + 2 * 256);
    let side = read_json(&sp.join("spectrum.json"));
    let r = side["low_frequency_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r));

    let hm = dir.path().join("hm");
    let o = srl(&[
        "heatmap", "--checkpoint", ck, "--n-test", "32", "--samples", "16", "--stride", "4", "--v", "0", "--out",
        hm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let side = read_json(&hm.join("heatmap.json"));
    assert_eq!(side["stride"], 4);
    assert!(hm.join("heatmap.pgm").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.toml");
    fs::write(&cfg, "seed = 5\nworkers = 2\n").unwrap();
    let out = dir.path().join("o");
    let o = srl(&["gradcheck", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = read_json(&out.join("run.json"));
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["workers"], 2);
}

#[test]
fn missing_config_file_exits_4() {
    let o = srl(&["gradcheck", "--config", "/nonexistent/srl.toml"]);
    assert_error_line(&o, 4, "missing_input");
}

fn cifar_fixture(dir: &Path) {
    let record = |i: usize| {
        let mut r = vec![(i % 10) as u8];
        r.extend((0..3072).map(|p| ((p * 7 + i * 13) % 256) as u8));
        r
    };
    for b in 1..=5 {
        let bytes: Vec<u8> = (0..20).flat_map(|i| record(b * 20 + i)).collect();
        fs::write(dir.join(format!("data_batch_{b}.bin")), bytes).unwrap();
    }
    let bytes: Vec<u8> = (0..10).flat_map(record).collect();
    fs::write(dir.join("test_batch.bin"), bytes).unwrap();
}

#[test]
fn cifar10_is_read_from_srl_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    fs::create_dir(&data).unwrap();
    cifar_fixture(&data);
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_srl"))
        .args([
            "train", "--dataset", "cifar10", "--objective", "natural", "--epochs", "1", "--milestones", "1",
            "--eval-samples", "5", "--steps", "1", "--out", out.to_str().unwrap(),
        ])
        .env("SRL_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = read_json(&out.join("run.json"));
    assert_eq!(echo["data_dir"], data.to_str().unwrap());

    let missing = srl(&["train", "--dataset", "cifar10", "--data-dir", dir.path().join("none").to_str().unwrap()]);
    assert_error_line(&missing, 4, "missing_input");
    let unset = srl(&["train", "--dataset", "cifar10"]);
    assert_error_line(&unset, 3, "invalid_config");
}
