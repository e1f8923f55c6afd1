//! Files read by the plotting tools, decoded here byte by byte without the
//! crate's own readers.

use std::fs;
use std::path::Path;

use ampc_core::env::{FemSystem, ProblemParams, SolveCounter};
use ampc_core::experiment::{self, ExperimentConfig, Method, Policy};

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as usize
}

fn u64_at(b: &[u8], at: usize) -> usize {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap()) as usize
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn quick_run(dir: &Path, method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        grid: 8,
        seed: 4,
        out_dir: dir.to_path_buf(),
        ..Default::default()
    };
    cfg.hjb.batch_size = 4;
    cfg.max_solves = Some(100);
    cfg.baseline.restarts = 0;
    cfg.validation.stride = 5;
    experiment::run(&cfg).unwrap();
    cfg
}

#[test]
fn run_directory_csv_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let hjb = tmp.path().join("hjb");
    quick_run(&hjb, Method::Hjb);
    let metrics = fs::read_to_string(hjb.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("# pde_solves counts"));
    assert_eq!(
        lines[1],
        "iter,pde_solves,mean_val_J,val_J_0,val_J_1,loss,train_J,residual,terminal_value,terminal_grad,grad_norm,lr"
    );
    let first: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(&first[..2], ["0", "0"]);
    assert!(
        first[5..].iter().all(|c| c.is_empty()),
        "iteration 0 has no losses"
    );
    let last: Vec<f64> = lines
        .last()
        .unwrap()
        .split(',')
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(last[1], 100.0);
    assert!((last[2] - (last[3] + last[4]) / 2.0).abs() < 1e-15);

    let validation = fs::read_to_string(hjb.join("validation.csv")).unwrap();
    let mut v = validation.lines();
    assert_eq!(v.next().unwrap(), "index,setup,y_x1,y_x2,y_v,grid,n_steps");
    assert_eq!(v.next().unwrap(), "0,horizontal,0.125,0.25,0.0,8,25");
    // `index` numbers the subset and matches the val_J_k columns
    let second = v.next().unwrap();
    assert!(second.starts_with("1,horizontal,") && second != "1,horizontal,0.125,0.4,0.0,8,25");
    assert!(v.next().is_none());

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(hjb.join("summary.json")).unwrap()).unwrap();
    for key in [
        "method",
        "setup",
        "seed",
        "pde_solves",
        "final_mean_val_j",
        "best_mean_val_j",
        "wall_time_s",
    ] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }

    let base = tmp.path().join("base");
    quick_run(&base, Method::Baseline);
    let table = fs::read_to_string(base.join("baseline.csv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "setup,y_x1,y_x2,y_v,grid,n_steps,J_star,iterations,grad_norm,wall_time_s,status"
    );
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn checkpoint_layout() {
    let tmp = tempfile::tempdir().unwrap();
    quick_run(tmp.path(), Method::Hjb);
    let b = fs::read(tmp.path().join("final.ckpt")).unwrap();
    assert_eq!(&b[..8], b"AMPCNET1");
    let meta_len = u32_at(&b, 8);
    let meta: serde_json::Value = serde_json::from_slice(&b[12..12 + meta_len]).unwrap();
    assert_eq!(meta["kind"], "value_network");
    assert_eq!(meta["shape"]["state_dim"], 65);
    let mut at = 12 + meta_len;
    let count = u32_at(&b, at);
    at += 4;
    let mut names = Vec::new();
    for _ in 0..count {
        let len = u32_at(&b, at);
        names.push(String::from_utf8(b[at + 4..at + 4 + len].to_vec()).unwrap());
        at += 4 + len;
        let rank = u32_at(&b, at);
        at += 4;
        let elems: usize = (0..rank).map(|k| u64_at(&b, at + 8 * k)).product();
        at += 8 * rank + 8 * elems;
    }
    assert_eq!(at, b.len());
    assert_eq!(names[0], "opening.weight");
}

#[test]
fn episode_dump_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        grid: 8,
        ..Default::default()
    };
    let env = cfg.env_config();
    let sys = FemSystem::assemble(&env, ProblemParams::horizontal(0.2, 0.5)).unwrap();
    let ep = Policy::Uncontrolled
        .rollout(&sys, &SolveCounter::new())
        .unwrap();
    let (csv_path, bin_path) = (tmp.path().join("ep.csv"), tmp.path().join("ep.bin"));
    experiment::dump_episode(&ep, 8, &csv_path, Some(&bin_path)).unwrap();

    let text = fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["step", "s", "alpha", "u1", "u2", "reward"]);
    assert_eq!(rows.len(), 1 + 26);
    assert_eq!(rows[1][..5], ["0", "0", "0.5", "0", "0"]);
    let terminal = &rows[26];
    assert_eq!((terminal[0], terminal[3], terminal[4]), ("25", "", ""));
    assert_eq!(terminal[5].parse::<f64>().unwrap(), ep.terminal_cost);

    let b = fs::read(&bin_path).unwrap();
    assert_eq!(&b[..8], b"AMPCGRD1");
    let (nx, ny, frames) = (u32_at(&b, 8), u32_at(&b, 12), u32_at(&b, 16));
    assert_eq!((nx, ny, frames), (8, 8, 26));
    assert_eq!(b.len(), 20 + frames * 8 * (1 + nx * ny));
    let frame = |k: usize| 20 + k * 8 * (1 + nx * ny);
    assert_eq!(f64_at(&b, frame(0)), 0.0);
    assert!((f64_at(&b, frame(25)) - 0.5).abs() < 1e-12);
    // row-major with rows along x₂: value (i along x₁, j along x₂) sits at j·nx + i
    let last = &ep.final_state().a;
    for (k, v) in last.iter().enumerate() {
        assert_eq!(f64_at(&b, frame(25) + 8 + 8 * k), *v);
    }
}
