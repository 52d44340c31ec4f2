use std::path::Path;
use std::process::{Command, Output};

fn incpl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incpl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["run", "--label-mode", "oracle"],
        &["run", "--mode", "sideways"],
        &["run", "--dataset", "test.jsonl"],
        &["run", "--n-context", "9"],
    ];
    for args in cases {
        let o = incpl(args, dir.path());
        assert_eq!(
            code(&o),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn synth_run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = [
        "synth",
        "--n-classes",
        "3",
        "--samples-per-class",
        "8",
        "--noise",
        "0.9",
        "--out",
        "task",
    ];
    let o = incpl(&synth, d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("task/test.jsonl").exists() && d.join("task/labeled.jsonl").exists());

    let run = [
        "run",
        "--dataset",
        "task/test.jsonl",
        "--labeled",
        "task/labeled.jsonl",
        "--n-context",
        "2",
        "--out",
        "out/report.json",
    ];
    let o = incpl(&run, d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("correct"), "{stdout}");

    let o = incpl(
        &[
            "report",
            "out/report.json",
            "--reproduce",
            "--format",
            "csv",
            "--out",
            "summary",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduced"));
    let csv = std::fs::read_to_string(d.join("summary/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("name,mode,objective"));
}

#[test]
fn tampered_report_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = incpl(
        &[
            "run",
            "--n-classes",
            "3",
            "--samples-per-class",
            "8",
            "--noise",
            "0.9",
            "--n-context",
            "2",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(d.join("report.json")).unwrap();
    let tampered = text.replacen("\"correct\": ", "\"correct\": 1", 1);
    std::fs::write(d.join("report.json"), tampered).unwrap();
    let o = incpl(&["report", "report.json"], d);
    assert_ne!(code(&o), 0);
}
