use std::path::Path;
use std::process::{Command, Output};

fn aspnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aspnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_defaults_write_2000_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let o = aspnn(&["simulate", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("frame")).count();
    assert_eq!(rows, 2000);
}

#[test]
fn noise_flag_changes_positions_only() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, noisy) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(aspnn(&["simulate", "--out", s(&clean)]).status.success());
    assert!(aspnn(&["simulate", "--out", s(&noisy), "--noise", "0.1"]).status.success());
    let a = std::fs::read_to_string(&clean).unwrap();
    let b = std::fs::read_to_string(&noisy).unwrap();
    assert_ne!(a, b);
    assert_eq!(a.lines().count(), b.lines().count());
}

#[test]
fn invalid_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let o = aspnn(&["simulate", "--out", s(&out), "--noise", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[simulate]\nn_cell = 3\n").unwrap();
    let o = aspnn(&["--config", s(&cfg), "simulate", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn config_file_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[simulate]\nn_cells = 4\nframes = 10\n").unwrap();
    let out = dir.path().join("sim.jsonl");
    let o = aspnn(&["--config", s(&cfg), "simulate", "--out", s(&out)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("cell_id")).count(), 40);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = aspnn(&[
        "train",
        "--data",
        s(&dir.path().join("nope.csv")),
        "--out",
        s(dir.path()),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn help_and_unknown_flags() {
    let o = aspnn(&["--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for cmd in ["simulate", "train", "rollout", "eval", "mitosis"] {
        assert!(help.contains(cmd));
    }
    let o = aspnn(&["train", "--help"]);
    let help = stdout(&o);
    for flag in ["--config", "--seed", "--epochs", "--lambda-d", "--teacher-forcing", "--dominance", "--out"] {
        assert!(help.contains(flag), "missing {flag}");
    }
    assert!(stdout(&aspnn(&["simulate", "--help"])).contains("--noise"));
    let o = aspnn(&["simulate", "--out", "x.csv", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_perfect_trajectory_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let mut text = String::from("frame,x_pred,y_pred,x_gt,y_gt\n");
    for k in 0..10 {
        let x = 0.5 * f64::from(k * k) + 3.0;
        let y = 0.1 * f64::from(k) + 1.0;
        text.push_str(&format!("{k},{x},{y},{x},{y}\n"));
    }
    std::fs::write(&path, text).unwrap();
    let o = aspnn(&["eval", "--trajectory", s(&path)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "acc_x=100.00% acc_y=100.00%");
}

#[test]
fn train_rollout_eval_round_trip_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sim.csv");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[simulate]\nn_cells = 4\nframes = 20\n").unwrap();
    assert!(aspnn(&["--config", s(&cfg), "simulate", "--out", s(&data), "--noise", "0.1"]).status.success());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = aspnn(&[
            "train",
            "--case",
            "insilico-noise",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--epochs",
            "3",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let ck = out.join("model.json");
        let o = aspnn(&["rollout", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let printed = stdout(&o);
        assert!(printed.contains("acc_x="));
        let o = aspnn(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
        assert!(o.status.success());
        let mean = stdout(&o).lines().last().unwrap().to_string();
        let o = aspnn(&["eval", "--trajectory", s(&out.join("cell0_trajectory.csv"))]);
        assert!(o.status.success());
        let cell0 = printed.lines().find(|l| l.starts_with("cell=0 ")).unwrap().to_string();
        assert!(cell0.ends_with(stdout(&o).trim()), "{cell0} vs {}", stdout(&o));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        (files, mean)
    };
    let (a, mean_a) = run("a");
    let (b, mean_b) = run("b");
    assert_eq!(a, b);
    assert_eq!(mean_a, mean_b);
    assert!(a.iter().any(|(n, _)| n == "history.csv"));
}

#[test]
fn mitosis_command_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("planted.csv");
    assert!(aspnn(&["simulate", "--planted-mitosis", "--out", s(&data)]).status.success());
    let out = dir.path().join("m");
    let o = aspnn(&["mitosis", "--data", s(&data), "--out", s(&out), "--epochs", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("precision=") && text.contains("fp_rate="));
    for f in ["mitosis_model.json", "mitosis_history.csv", "mitosis_predictions.csv", "mitosis_events.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
