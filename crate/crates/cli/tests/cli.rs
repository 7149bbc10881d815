//! End-to-end tests of the `netdelay` binary: exit codes, output contracts,
//! and the full generate/train/evaluate/predict loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn netdelay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netdelay"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("netdelay_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_gen_config(dir: &Path, scenarios: usize, seed: u64) -> PathBuf {
    let path = dir.join("gen.cfg");
    fs::write(
        &path,
        format!(
            "scenarios {scenarios}\ndevices 3 5\nflows 2 4\nduration_s 2\ncapture_window_s 1\nsplit 0.5 0.25 0.25\nseed {seed}\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = netdelay(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn missing_file_exits_1() {
    let out = netdelay(&["evaluate", "--model", "/nonexistent.ckpt", "--data", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn generate_is_byte_deterministic_across_jobs() {
    let dir = temp_dir("gen");
    let cfg = write_gen_config(&dir, 6, 42);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let r1 = netdelay(&["generate", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    assert!(r1.status.success(), "{}", String::from_utf8_lossy(&r1.stderr));
    let r2 = netdelay(&[
        "generate", "--config", cfg.to_str().unwrap(), "--out", out_b.to_str().unwrap(), "--jobs", "4",
    ]);
    assert!(r2.status.success());
    for entry in fs::read_dir(&out_a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(out_a.join(&name)).unwrap(),
            fs::read(out_b.join(&name)).unwrap(),
            "{name:?} differs between --jobs 1 and --jobs 4"
        );
    }
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = temp_dir("pipeline");
    let cfg = write_gen_config(&dir, 8, 7);
    let data = dir.join("data");
    assert!(netdelay(&["generate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status
        .success());

    let run = dir.join("run");
    let train_out = netdelay(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--epochs", "2", "--flow-embed", "6", "--linkport-embed", "6", "--device-embed", "3",
        "--t-max", "3", "--seed", "5", "--machine",
    ]);
    assert!(train_out.status.success(), "{}", String::from_utf8_lossy(&train_out.stderr));
    let train_text = stdout(&train_out);
    assert_eq!(train_text.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
    assert!(train_text.contains("event=train"));
    assert!(run.join("best.ckpt").exists());
    assert!(run.join("epochs.log").exists());

    let eval_out = netdelay(&[
        "evaluate", "--model", run.join("best.ckpt").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--split", "test", "--machine",
    ]);
    assert!(eval_out.status.success(), "{}", String::from_utf8_lossy(&eval_out.stderr));
    let eval_text = stdout(&eval_out);
    assert!(eval_text.contains("event=evaluate"), "{eval_text}");
    assert!(eval_text.contains("baseline_mape="), "{eval_text}");

    // predict on one scenario file prints one delay per flow
    let scenario = data.join("scenario_0000.scn");
    let predict_out = netdelay(&[
        "predict", "--model", run.join("best.ckpt").to_str().unwrap(),
        "--scenario", scenario.to_str().unwrap(), "--machine",
    ]);
    assert!(predict_out.status.success());
    let lines: Vec<String> = stdout(&predict_out)
        .lines()
        .filter(|l| l.starts_with("flow="))
        .map(String::from)
        .collect();
    assert!(!lines.is_empty());
    for line in &lines {
        let delay: f64 = line.split("delay_s=").nth(1).unwrap().parse().unwrap();
        assert!(delay > 0.0);
    }

    // identical invocation reproduces identical bytes
    let predict_again = netdelay(&[
        "predict", "--model", run.join("best.ckpt").to_str().unwrap(),
        "--scenario", scenario.to_str().unwrap(), "--machine",
    ]);
    assert_eq!(predict_out.stdout, predict_again.stdout);
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn evaluate_reports_zero_mape_on_perfect_fixture() {
    // train briefly, then overwrite labels with the model's own predictions
    let dir = temp_dir("perfect");
    let cfg = write_gen_config(&dir, 6, 9);
    let data = dir.join("data");
    assert!(netdelay(&["generate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status
        .success());
    let run = dir.join("run");
    assert!(netdelay(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--epochs", "1", "--flow-embed", "6", "--linkport-embed", "6", "--device-embed", "3",
        "--t-max", "3", "--seed", "5",
    ])
    .status
    .success());

    // rewrite every test-split scenario's labels to the model output
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    for line in manifest.lines() {
        let Some(name) = line.strip_prefix("test ") else {
            continue;
        };
        let file = data.join(name);
        let predict = netdelay(&[
            "predict", "--model", run.join("best.ckpt").to_str().unwrap(),
            "--scenario", file.to_str().unwrap(), "--machine",
        ]);
        assert!(predict.status.success());
        let mut scenario_text = fs::read_to_string(&file).unwrap();
        scenario_text = scenario_text
            .lines()
            .filter(|l| !l.starts_with("label "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        for line in stdout(&predict).lines() {
            let flow = line.split("flow=").nth(1).unwrap().split(' ').next().unwrap();
            let delay = line.split("delay_s=").nth(1).unwrap();
            scenario_text.push_str(&format!("label {flow} {delay}\n"));
        }
        fs::write(&file, scenario_text).unwrap();
    }

    let eval_out = netdelay(&[
        "evaluate", "--model", run.join("best.ckpt").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--split", "test",
    ]);
    assert!(eval_out.status.success(), "{}", String::from_utf8_lossy(&eval_out.stderr));
    let text = stdout(&eval_out);
    assert!(text.contains("model MAPE 0.00%"), "{text}");
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn gradcheck_passes_and_reports_error() {
    let out = netdelay(&["gradcheck", "--seed", "3", "--machine"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("event=gradcheck"), "{text}");
    assert!(text.contains("pass=true"), "{text}");
    let worst: f64 = text
        .split("worst=")
        .nth(1)
        .unwrap()
        .split(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-4);
}
