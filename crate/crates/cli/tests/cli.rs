use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xmodal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const QUICK: &str = "iterations = 200\ntrials = 3\n";

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["--help"])), 0);
    assert_eq!(code(&xmodal(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&xmodal(dir.path(), &["eval"])), 1, "missing --data");
    let o = xmodal(dir.path(), &["gradcheck", "--loss", "center"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage config"));
}

#[test]
fn step_by_step_chain_writes_outputs_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("quick.cfg"), QUICK).unwrap();
    let steps: [&[&str]; 4] = [
        &["synth", "--out", "data/set.emb", "--seed", "4"],
        &[
            "train",
            "--config",
            "quick.cfg",
            "--data",
            "data/set.emb",
            "--out-model",
            "m.json",
            "--out-history",
            "h.csv",
        ],
        &[
            "export",
            "--model",
            "m.json",
            "--data",
            "data/set.emb",
            "--out",
            "emb.csv",
        ],
        &[
            "eval",
            "--data",
            "emb.csv",
            "--mode",
            "indoor",
            "--shot",
            "multi",
            "--trials",
            "2",
            "--out",
            "r.json",
            "--cmc-csv",
            "cmc.csv",
        ],
    ];
    for args in steps {
        let o = xmodal(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    for f in [
        "data/set.emb.manifest.json",
        "m.json.manifest.json",
        "emb.csv.manifest.json",
        "r.json.manifest.json",
    ] {
        let m = json(&d.join(f));
        assert_eq!(m["tool"], "xmodal");
        assert!(!m["outputs"].as_array().unwrap().is_empty(), "{f}");
    }
    let history = fs::read_to_string(d.join("h.csv")).unwrap();
    assert!(history.starts_with("iteration,loss,hp,id\n"));
    assert_eq!(history.lines().count(), 201);
    assert!(fs::read_to_string(d.join("emb.csv"))
        .unwrap()
        .starts_with("identity,modality,camera,f0,f1\n"));
    let r = json(&d.join("r.json"));
    assert_eq!(r["mode"], "indoor");
    assert_eq!(r["shot_count"], 10);
    assert_eq!(r["per_trial"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(d.join("cmc.csv"))
        .unwrap()
        .starts_with("rank,rate\n"));

    // the train manifest records the digest of its input
    let m = json(&d.join("m.json.manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn pipeline_is_reproducible_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("quick.cfg"), QUICK).unwrap();
    for run in ["a", "b"] {
        let o = xmodal(
            d,
            &[
                "pipeline",
                "--config",
                "quick.cfg",
                "--seed",
                "11",
                "--out-dir",
                run,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("rank1"));
    }
    for f in [
        "report.json",
        "embeddings.emb",
        "model.json",
        "history.csv",
        "dataset.emb",
        "cmc.csv",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let r = json(&d.join("a/report.json"));
    let r1 = r["rank1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(d.join("a/manifest.json").exists());

    // re-evaluating the exported embeddings under the same root seed reproduces the report
    let o = xmodal(
        d,
        &[
            "eval",
            "--config",
            "quick.cfg",
            "--seed",
            "11",
            "--data",
            "a/embeddings.emb",
            "--out",
            "again.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(d.join("again.json")).unwrap(),
        fs::read(d.join("a/report.json")).unwrap()
    );
}

#[test]
fn pipeline_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "p = 1\n").unwrap();
    let o = xmodal(dir.path(), &["pipeline", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage sample"), "{}", stderr(&o));
    fs::write(dir.path().join("typo.cfg"), "itertions = 5\n").unwrap();
    assert_eq!(
        code(&xmodal(dir.path(), &["pipeline", "--config", "typo.cfg"])),
        1
    );
}

#[test]
fn mine_reports_hand_checked_pentaplets() {
    let dir = tempfile::tempdir().unwrap();
    // A_rgb, A_ir, B_rgb, B_ir on a line
    fs::write(
        dir.path().join("batch.csv"),
        "identity,modality,camera,f0\n0,RGB,1,0\n0,IR,3,1\n1,RGB,1,5\n1,IR,3,6\n",
    )
    .unwrap();
    let o = xmodal(
        dir.path(),
        &["mine", "--batch-file", "batch.csv", "--report", "p.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<String> = fs::read_to_string(dir.path().join("p.csv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(
        rows,
        [
            "anchor,gp,gn,cp,cn,d_gp,d_gn,d_cp,d_cn",
            "0,1,2,1,3,1,5,1,6",
            "1,0,2,0,2,1,4,1,4",
            "2,3,1,3,1,1,4,1,4",
            "3,2,1,2,0,1,5,1,6",
        ]
    );
    assert!(dir.path().join("p.csv.manifest.json").exists());

    fs::write(
        dir.path().join("broken.csv"),
        "identity,modality,camera,f0\n0,IR,3,1\n0,RGB,1,0\n",
    )
    .unwrap();
    let o = xmodal(dir.path(), &["mine", "--batch-file", "broken.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_every_target() {
    let dir = tempfile::tempdir().unwrap();
    for target in ["trip", "htrip", "hgt", "hct", "hp", "id", "hpi", "model"] {
        let o = xmodal(dir.path(), &["gradcheck", "--loss", target, "--seed", "5"]);
        assert_eq!(code(&o), 0, "{target}: {}", stderr(&o));
        assert!(stdout(&o).contains("max relative error"), "{target}");
    }
    let o = xmodal(
        dir.path(),
        &["gradcheck", "--loss", "hp", "--out", "g.json"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(json(&dir.path().join("g.json"))["target"], "hp");
}

#[test]
fn compare_losses_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("quick.cfg"), QUICK).unwrap();
    let o = xmodal(
        d,
        &["compare-losses", "--config", "quick.cfg", "--losses", "hpi"],
    );
    assert_eq!(code(&o), 1);
    let o = xmodal(
        d,
        &[
            "compare-losses",
            "--config",
            "quick.cfg",
            "--losses",
            "hp,hpi",
            "--out-dir",
            "cmp",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "loss,margin,rank1,map");
    assert!(lines[1].starts_with("hp,") && lines[2].starts_with("hpi,"));
    for line in &lines[1..] {
        let f: Vec<f64> = line
            .split(',')
            .skip(2)
            .map(|v| v.parse().unwrap())
            .collect();
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)), "{line}");
    }
    assert!(d.join("cmp/cmc_hpi.csv").exists() && d.join("cmp/manifest.json").exists());
}

#[test]
fn bad_inputs_exit_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.emb"), b"EMB1\x01").unwrap();
    let o = xmodal(dir.path(), &["eval", "--data", "junk.emb"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage load"));
    let o = xmodal(dir.path(), &["eval", "--data", "missing.emb"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&xmodal(d, &["synth", "--out", "d.emb"])), 0);
    fs::write(
        d.join("hot.cfg"),
        "learning_rate = 1e300\niterations = 20\n",
    )
    .unwrap();
    let o = xmodal(d, &["train", "--config", "hot.cfg", "--data", "d.emb"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage train"));
}
