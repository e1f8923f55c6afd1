use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ampc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ampc"))
        .args(args)
        .env_remove("AMPC_WORKERS")
        .env_remove("RUST_LOG")
        .output()
        .expect("run ampc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A short HJB run on the coarse grid.
fn quick_hjb(dir: &Path, seed: &str) -> Output {
    ampc(&[
        "--workers",
        "2",
        "run",
        "--setup",
        "horizontal",
        "--method",
        "hjb",
        "--grid",
        "8",
        "--seed",
        seed,
        "--max-solves",
        "200",
        "--set",
        "hjb.batch_size=4",
        "--set",
        "validation.hjb_every=1",
        "--out-dir",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn train_writes_a_metrics_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = ampc(&[
        "run",
        "--setup",
        "horizontal",
        "--method",
        "hjb",
        "--grid",
        "16",
        "--seed",
        "1",
        "--max-solves",
        "500",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# "));
    assert!(lines
        .next()
        .unwrap()
        .starts_with("iter,pde_solves,mean_val_J,val_J_0,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0,0,"));
    assert!(rows[1].starts_with("1,500,"));
    for f in [
        "config.toml",
        "validation.csv",
        "summary.json",
        "final.ckpt",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&quick_hjb(&a, "3")), 0);
    assert_eq!(code(&quick_hjb(&b, "3")), 0);
    let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn exit_codes() {
    assert_eq!(code(&ampc(&["--help"])), 0);
    assert_eq!(code(&ampc(&["--version"])), 0);
    assert_eq!(code(&ampc(&["run", "--method", "sarsa"])), 1);
    assert_eq!(code(&ampc(&["frobnicate"])), 1);

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bad");
    let out = ampc(&[
        "run",
        "--set",
        "hjb.no_such_key=1",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(!dir.exists());
    let out = ampc(&["run", "--grid", "1", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let missing = tmp.path().join("missing.ckpt");
    let out = ampc(&[
        "evaluate",
        "--grid",
        "8",
        "--policy",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn compare_reports_unreached_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&quick_hjb(&a, "1")), 0);
    assert_eq!(code(&quick_hjb(&b, "2")), 0);
    let table = tmp.path().join("cmp.csv");
    let out = ampc(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "-t",
        "0.000001",
        "-t",
        "100",
        "-o",
        table.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let header = rdr.headers().unwrap().clone();
    let low = header
        .iter()
        .position(|h| h == "solves_to_0.000001")
        .unwrap();
    let high = header.iter().position(|h| h == "solves_to_100").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(&r[low], "not reached");
        assert_eq!(&r[high], "0");
    }

    // a single run is a usage error
    assert_eq!(code(&ampc(&["compare", a.to_str().unwrap()])), 1);
}

#[test]
fn evaluate_and_dump_episode() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&quick_hjb(&run, "1")), 0);
    let ckpt = run.join("final.ckpt");

    let table = tmp.path().join("eval.csv");
    let out = ampc(&[
        "evaluate",
        "--grid",
        "8",
        "--policy",
        ckpt.to_str().unwrap(),
        "-o",
        table.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next().unwrap(), "index,y_x1,y_x2,y_v,J");
    assert_eq!(text.lines().count(), 11);

    let free = ampc(&["evaluate", "--grid", "8", "--policy", "uncontrolled"]);
    assert_eq!(code(&free), 0);
    assert_eq!(String::from_utf8_lossy(&free.stdout).lines().count(), 11);

    let episode = tmp.path().join("ep.csv");
    let snaps = tmp.path().join("ep.bin");
    let out = ampc(&[
        "dump-episode",
        "--grid",
        "8",
        "--policy",
        ckpt.to_str().unwrap(),
        "--params",
        "0.2,0.5",
        "-o",
        episode.to_str().unwrap(),
        "--snapshots",
        snaps.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = fs::read_to_string(&episode).unwrap();
    assert_eq!(rows.lines().count(), 1 + 26);
    assert!(fs::metadata(&snaps).unwrap().len() > 0);

    // a checkpoint trained on another grid is rejected
    let out = ampc(&[
        "dump-episode",
        "--grid",
        "16",
        "--policy",
        ckpt.to_str().unwrap(),
        "-o",
        episode.to_str().unwrap(),
    ]);
    assert_ne!(code(&out), 0);
    // wrong parameter count
    let out = ampc(&[
        "dump-episode",
        "--grid",
        "8",
        "--policy",
        "uncontrolled",
        "--params",
        "0.2",
        "-o",
        episode.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}
