use std::process::Command;

fn aures(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aures"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn unknown_flags_are_usage_errors() {
    for args in [
        &["shapes", "--bogus"][..],
        &["pretrain"],
        &["frobnicate"],
        &["shapes", "--preset", "huge"],
    ] {
        let out = aures(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let out = aures(&["shapes", "--preset", "full", "--config", "desk"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    let out_dir = dir.path().join("out");
    let cases: [(&str, Vec<&str>); 4] = [
        (
            "pretrain",
            vec![
                "pretrain",
                "--manifest",
                missing.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
            ],
        ),
        (
            "report",
            vec!["report", "--scores", missing.to_str().unwrap()],
        ),
        ("shapes", vec!["shapes", "--config", "desk", "--reference"]),
        (
            "synth",
            vec![
                "synth",
                "--classes",
                "0",
                "--out",
                out_dir.to_str().unwrap(),
            ],
        ),
    ];
    for (stage, args) in cases {
        let out = aures(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with(&format!("error: {stage}: ")), "{err}");
    }
}

#[test]
fn flags_are_validated_before_work_starts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // Bad batch size is rejected before the manifest is read or anything is written.
    let out = aures(&[
        "pretrain",
        "--manifest",
        "/nonexistent/m.csv",
        "--batch",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("batch"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(!out_dir.exists());
}

#[test]
fn full_shapes_match_the_reference_table() {
    let out = aures(&["shapes", "--config", "full", "--reference"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("stem1             50x64     200x64"),
        "{text}"
    );
    assert!(text.contains("feature dim  1728"));
    assert!(text.contains("no differences"));
}

#[test]
fn report_writes_domain_means_and_overall() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let mut text = String::from("task,domain,score\n");
    for (i, t) in aures::eval::hares_tasks().iter().enumerate() {
        text.push_str(&format!("{},{},{}\n", t.name, t.domain.tag(), 50 + i));
    }
    std::fs::write(&csv, text).unwrap();
    let json = dir.path().join("r.json");
    let out = aures(&[
        "report",
        "--scores",
        csv.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(r["domains"].as_object().unwrap().len(), 3);
    assert!((r["overall"].as_f64().unwrap() - 55.5).abs() < 1e-12);
    // Environment tasks are the first four catalogue entries: 50..=53.
    assert!((r["domains"]["environment"].as_f64().unwrap() - 51.5).abs() < 1e-12);
}
