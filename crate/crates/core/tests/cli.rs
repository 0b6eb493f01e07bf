use std::path::Path;
use std::process::{Command, Output};

use vfm_core::data::{gen_synthetic, ingest_csv, DatasetSpec, IngestOptions};
use vfm_core::TaskKind;

fn vfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfm"))
        .args(args)
        .env_remove("VFM_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Rows of a result CSV as (method, epsilon, K, metric, mean, std).
fn rows(csv: &str) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "dataset,method,epsilon,K,metric,mean,std,seconds");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 8, "{l}");
            f[1..7].iter().map(|s| s.to_string()).collect()
        })
        .collect()
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.csv"), path(dir.path(), "b.csv"));
    for out in [&a, &b] {
        let o = vfm(&["gen", "--n", "200", "--d", "5", "--s", "0.5", "--seed", "3", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{a}.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["true_weights"].as_array().unwrap().len(), 5);
}

#[test]
fn gen_round_trips_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    for task in [TaskKind::Linear, TaskKind::Logistic] {
        let out = path(dir.path(), &format!("{task}.csv"));
        let o = vfm(&["gen", "--task", &task.to_string(), "--n", "150", "--d", "4", "--seed", "9", "--out", &out]);
        assert_eq!(code(&o), 0);
        let mut opts = IngestOptions::new("label", task);
        opts.normalize = false;
        let (loaded, _) = ingest_csv(Path::new(&out), &opts).unwrap();
        let (direct, _) = gen_synthetic(&DatasetSpec::new(150, 4, 1.0, 9), task).unwrap();
        assert_eq!(loaded, direct, "{task}");
    }
}

#[test]
fn invalid_inputs_exit_with_one() {
    assert_eq!(code(&vfm(&["gen", "--s", "0", "--out", "/dev/null"])), 1);
    assert_eq!(code(&vfm(&["run", "--replicates", "0"])), 1);
    assert_eq!(code(&vfm(&["run", "--no-such-flag"])), 1);
    assert_eq!(code(&vfm(&["run", "--epsilon", "-1"])), 1);
    assert_eq!(code(&vfm(&["frobnicate"])), 1);
    assert_eq!(code(&vfm(&["--help"])), 0);
}

#[test]
fn noise_off_fm_matches_nonprivate() {
    let o = vfm(&[
        "run", "--n", "400", "--d", "4", "--epsilon", "inf", "--methods", "fm,nonprivate", "--replicates", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 2);
    let fm = r.iter().find(|x| x[0] == "fm").unwrap();
    let np = r.iter().find(|x| x[0] == "nonprivate").unwrap();
    assert_eq!(fm[1], "inf");
    let (a, b): (f64, f64) = (fm[4].parse().unwrap(), np[4].parse().unwrap());
    assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
}

#[test]
fn fm_rows_do_not_depend_on_party_count() {
    let base = ["run", "--n", "300", "--d", "4", "--epsilon", "0.5,2", "--methods", "fm", "--replicates", "2"];
    let mut outs = Vec::new();
    for k in ["1", "4"] {
        let mut args = base.to_vec();
        args.extend(["--K", k, "--backend", "plaintext"]);
        let o = vfm(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(rows(&stdout(&o)));
    }
    assert_eq!(outs[0].len(), 2);
    for (a, b) in outs[0].iter().zip(&outs[1]) {
        assert_eq!(a[2], "1");
        assert_eq!(b[2], "4");
        assert_eq!((&a[0], &a[1], &a[3], &a[4], &a[5]), (&b[0], &b[1], &b[3], &b[4], &b[5]));
    }
}

#[test]
fn sweep_over_party_counts() {
    let o = vfm(&[
        "sweep", "--n", "200", "--d", "8", "--epsilon", "1", "--methods", "fm", "--replicates", "2",
        "--backend", "plaintext", "--Ks", "2,4,8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 3);
    let ks: Vec<&str> = r.iter().map(|x| x[2].as_str()).collect();
    assert_eq!(ks, ["2", "4", "8"]);
    assert!(r.iter().all(|x| x[4] == r[0][4] && x[5] == r[0][5]));
}

#[test]
fn audit_exit_codes() {
    let ok = vfm(&["audit", "--pairs", "200"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("audit: PASS"));

    let bad = vfm(&["audit", "--pairs", "50", "--inject-out-of-range", "3"]);
    assert_eq!(code(&bad), 2);
    let text = stdout(&bad);
    assert!(text.contains("Ingestion"), "{text}");
    assert!(text.contains("audit: FAIL"));

    let skip = vfm(&["audit", "--pairs", "20", "--skip-noise", "2"]);
    assert_eq!(code(&skip), 2);
    assert!(stdout(&skip).contains("finding:"));

    let logistic = vfm(&["audit", "--task", "logistic", "--d", "4", "--K", "2", "--pairs", "100"]);
    assert_eq!(code(&logistic), 0);
    assert!(stdout(&logistic).contains("P1: bound 7,"), "{}", stdout(&logistic));
}

#[test]
fn config_file_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let conf = path(dir.path(), "run.conf");
    std::fs::write(
        &conf,
        "# shared settings\nn = 250\nd = 3\nmethods = fm\nreplicates = 2\nepsilon = 1\nbackend = plaintext\n",
    )
    .unwrap();
    let from_file = vfm(&["--config", &conf, "run"]);
    assert_eq!(code(&from_file), 0, "{}", String::from_utf8_lossy(&from_file.stderr));
    let explicit = vfm(&[
        "run", "--n", "250", "--d", "3", "--methods", "fm", "--replicates", "2", "--epsilon", "1", "--backend",
        "plaintext",
    ]);
    assert_eq!(rows(&stdout(&from_file)), rows(&stdout(&explicit)));

    // Command-line flags win over the file.
    let overridden = vfm(&["--config", &conf, "run", "--epsilon", "5"]);
    assert_eq!(rows(&stdout(&overridden))[0][1], "5");

    let seeded = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_vfm"))
            .args(["--config", &conf, "run"])
            .env("VFM_SEED", seed)
            .output()
            .unwrap()
    };
    let (s1, s1b, s2) = (seeded("7"), seeded("7"), seeded("8"));
    assert_eq!(rows(&stdout(&s1)), rows(&stdout(&s1b)));
    assert_ne!(rows(&stdout(&s1))[0][4], rows(&stdout(&s2))[0][4]);
}

#[test]
fn output_files_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "res.csv");
    let tr = path(dir.path(), "t.jsonl");
    let o = vfm(&[
        "run", "--n", "200", "--d", "3", "--methods", "fm,dpsgd", "--replicates", "2", "--epsilon", "1",
        "--out", &out, "--transcript", &tr, "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(r.len(), 2);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{out}.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["replicate_seeds"].as_array().unwrap().len(), 2);
    assert_eq!(meta["config"]["seed"], 4);
    assert!(meta["dpsgd"].is_object());
    let transcript = std::fs::read_to_string(&tr).unwrap();
    assert!(transcript.lines().count() > 0);
    for line in transcript.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["digest"].is_string());
    }
}

#[test]
fn csv_input_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "d.csv");
    assert_eq!(code(&vfm(&["gen", "--task", "logistic", "--n", "300", "--d", "3", "--out", &data])), 0);
    let o = vfm(&[
        "run", "--task", "logistic", "--data", &data, "--methods", "fm,nonprivate", "--replicates", "2",
        "--scheme", "0,2;1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&stdout(&o));
    assert!(r.iter().all(|x| x[3] == "accuracy"));
}
