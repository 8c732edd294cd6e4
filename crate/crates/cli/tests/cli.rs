use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cnf-audit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_pairs(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn pair(id: usize, t: [f64; 2], st: [f64; 2], label: usize) -> String {
    format!(
        "{{\"id\":\"{id}\",\"teacher_logits\":[{},{}],\"student_logits\":[{},{}],\"label\":{label}}}",
        t[0], t[1], st[0], st[1]
    )
}

#[test]
fn audit_reports_a_holding_pair() {
    let dir = tempfile::tempdir().unwrap();
    // teacher confidence 0.5, student confidence 0.526: every delta is 0.026
    let x = (0.526f64 / 0.474).ln();
    let lines: Vec<_> = (0..10).map(|i| pair(i, [0.0, 0.0], [x, 0.0], 0)).collect();
    let input = write_pairs(dir.path(), "p.jsonl", &lines);
    let out = dir.path().join("report.json");
    let o = run(&[
        "audit",
        "--input",
        s(&input),
        "--kappa",
        "0.05",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out);
    assert_eq!(r["holds"], true);
    assert!((r["sigma"].as_f64().unwrap() - 0.026).abs() < 1e-12);
    assert_eq!(r["n_total"], 10);
    assert_eq!(r["split"], "train");

    let o = run(&["audit", "--input", s(&input), "--kappa", "0.02"]);
    assert_eq!(code(&o), 1);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["holds"], false);
}

#[test]
fn audit_of_identical_models() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<_> = (0..5)
        .map(|i| pair(i, [i as f64, 1.0], [i as f64, 1.0], i % 2))
        .collect();
    let input = write_pairs(dir.path(), "p.jsonl", &lines);
    let out = dir.path().join("r.json");
    let o = run(&[
        "audit",
        "--input",
        s(&input),
        "--out",
        s(&out),
        "--bot-policy",
        "exclude",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&out)["sigma"].as_f64().unwrap(), 0.0);

    // identical models also satisfy every step of the loss chain
    let o = run(&["bound", "--input", s(&input), "--loss", "auto"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["step1_holds", "step2_holds", "step3_holds"] {
        assert_eq!(r[k], true);
    }
}

#[test]
fn malformed_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pairs(
        dir.path(),
        "p.jsonl",
        &[pair(0, [1.0, 0.0], [1.0, 0.0], 0), "{oops".into()],
    );
    let o = run(&["audit", "--input", s(&input)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let o = run(&["audit", "--input", s(&dir.path().join("missing.jsonl"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["audit", "--input", s(&input), "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    let o = run(&["bound", "--input", s(&input), "--loss", "lots"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn understated_loss_fails_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pairs(dir.path(), "p.jsonl", &[pair(0, [2.0, 0.0], [1.0, 0.0], 0)]);
    let o = run(&["bound", "--input", s(&input), "--loss", "0.5"]);
    assert_eq!(code(&o), 1);
    let o = run(&["bound", "--input", s(&input), "--loss", "1.0"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn histogram_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pairs(
        dir.path(),
        "p.jsonl",
        &[
            pair(0, [2.0, 0.0], [1.0, 0.0], 0),
            pair(1, [2.0, 0.0], [0.0, 1.0], 0),
        ],
    );
    let prefix = dir.path().join("h");
    let o = run(&[
        "histogram",
        "--input",
        s(&input),
        "--bins",
        "10",
        "--out-prefix",
        s(&prefix),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("bot_count=1"));
    for name in ["teacher", "student", "delta"] {
        let text = fs::read_to_string(format!("{}_{name}.csv", s(&prefix))).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,count\n"));
        assert_eq!(text.lines().count(), 11);
    }
}

#[test]
fn help_lists_flags_and_defaults() {
    let o = run(&["audit", "--help"]);
    assert_eq!(code(&o), 0);
    let h = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--input",
        "--kappa",
        "--gamma",
        "--ece-bins",
        "--bot-policy",
        "--out",
    ] {
        assert!(h.contains(flag), "{flag} missing from:\n{h}");
    }
    assert!(h.contains("[default: 0.05]") && h.contains("[default: zero]"));
    for sub in [
        "histogram",
        "bound",
        "gen-data",
        "train-teacher",
        "distill",
        "tune",
    ] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
    }
    let h = String::from_utf8_lossy(&run(&["tune", "--help"]).stdout).to_string();
    assert!(h.contains("--max-acc-drop") && h.contains("[default: 0.01]"));
}

/// gen-data -> train-teacher -> distill -> audit / bound on blobs.
#[test]
fn full_chain_on_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let ok = |o: Output| assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ok(run(&[
        "gen-data",
        "--task",
        "blobs",
        "--n",
        "300",
        "--noise",
        "1.0",
        "--seed",
        "3",
        "--out",
        s(&p("data.jsonl")),
    ]));
    ok(run(&[
        "train-teacher",
        "--data",
        s(&p("data.jsonl")),
        "--dims",
        "2,64,64,64,2",
        "--out",
        s(&p("teacher.json")),
    ]));
    ok(run(&[
        "distill",
        "--teacher",
        s(&p("teacher.json")),
        "--data",
        s(&p("data.jsonl")),
        "--dims",
        "2,32,32,2",
        "--out",
        s(&p("student.json")),
        "--emit-pairs",
        s(&p("pairs.jsonl")),
    ]));
    ok(run(&[
        "audit",
        "--input",
        s(&p("pairs.jsonl")),
        "--out",
        s(&p("report.json")),
    ]));
    ok(run(&[
        "bound",
        "--input",
        s(&p("pairs.jsonl")),
        "--loss",
        "auto",
        "--out",
        s(&p("chain.json")),
    ]));
    let report = json(&p("report.json"));
    let chain = json(&p("chain.json"));
    let sigma = report["sigma"].as_f64().unwrap();
    // alpha = 0, gamma = 1: the theoretical kappa is sqrt(L_dist / n)
    assert!(sigma < chain["kappa_theoretical"].as_f64().unwrap());
    assert_eq!(chain["step3_holds"], true);

    // byte-identical outputs on a second run
    ok(run(&[
        "audit",
        "--input",
        s(&p("pairs.jsonl")),
        "--out",
        s(&p("report2.json")),
    ]));
    assert_eq!(
        fs::read(p("report.json")).unwrap(),
        fs::read(p("report2.json")).unwrap()
    );
}

#[test]
fn tune_reports_absence_when_nothing_holds() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let ok = |o: Output| assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ok(run(&[
        "gen-data",
        "--task",
        "moons",
        "--n",
        "600",
        "--noise",
        "0.2",
        "--seed",
        "7",
        "--out",
        s(&p("train.jsonl")),
        "--eval-out",
        s(&p("eval.jsonl")),
        "--eval-fraction",
        "0.25",
    ]));
    ok(run(&[
        "train-teacher",
        "--data",
        s(&p("train.jsonl")),
        "--out",
        s(&p("teacher.json")),
    ]));
    // a zero stage-2 learning rate leaves the pre-trained student untouched
    fs::write(
        p("grid.txt"),
        "lr_stg2 = 0\nbatch = 32\nepochs_stg2 = 2\nweight_decay = 0\n",
    )
    .unwrap();
    let o = run(&[
        "tune",
        "--teacher",
        s(&p("teacher.json")),
        "--data",
        s(&p("train.jsonl")),
        "--eval",
        s(&p("eval.jsonl")),
        "--dims",
        "2,8,2",
        "--grid",
        s(&p("grid.txt")),
        "--kappa",
        "0.05",
        "--max-acc-drop",
        "0.01",
        "--seed",
        "0",
        "--out",
        s(&p("outcome.json")),
        "--table",
        s(&p("table.txt")),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let outcome = json(&p("outcome.json"));
    assert_eq!(outcome["best_config"], "absent");
    assert!(outcome["baseline_sigma"].as_f64().unwrap() > 0.05);
    assert_eq!(outcome["trials"].as_array().unwrap().len(), 1);
    assert!(fs::read_to_string(p("table.txt"))
        .unwrap()
        .contains("fails"));
}

#[test]
fn config_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    assert_eq!(
        code(&run(&[
            "gen-data",
            "--task",
            "xor",
            "--n",
            "40",
            "--out",
            s(&p("d.jsonl"))
        ])),
        0
    );
    fs::write(p("bad.cfg"), "alpha = 2\n").unwrap();
    let o = run(&[
        "train-teacher",
        "--data",
        s(&p("d.jsonl")),
        "--config",
        s(&p("bad.cfg")),
        "--out",
        s(&p("t.json")),
    ]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "gen-data",
        "--task",
        "spiral",
        "--n",
        "40",
        "--out",
        s(&p("d.jsonl")),
    ]);
    assert_eq!(code(&o), 2);
}
