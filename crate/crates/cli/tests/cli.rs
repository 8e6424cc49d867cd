use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qshape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qshape"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qshape")
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn theorem1_fifty_seeds_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t1");
    let o = qshape(&["run", "--experiment", "theorem1", "--seeds", "50", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let names = files(&out);
    assert_eq!(names.len(), 51);
    assert!(names.contains(&"theorem1_random_49.csv".to_string()));
    let verdict: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("theorem1_random_verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["pass"], true);
}

#[test]
fn adaptability_start_schedule_writes_per_seed_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ad");
    let o = qshape(&[
        "run", "--experiment", "adaptability", "--env", "pendulum", "--seeds", "0,1",
        "--schedule", "start", "--out", out.to_str().unwrap(),
    ]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    let names = files(&out);
    for seed in [0, 1] {
        for suffix in ["control", "start_q_heuristic", "start_reward_shaping"] {
            let name = format!("adaptability_pendulum_{seed}_{suffix}.csv");
            assert!(names.contains(&name), "missing {name} in {names:?}");
        }
    }
    let control = fs::read_to_string(out.join("adaptability_pendulum_0_control.csv")).unwrap();
    assert!(control.starts_with("step,mean_return\n"));
    assert!(control.lines().count() > 2);
}

#[test]
fn unusable_out_path_exits_2_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("taken");
    fs::write(&blocker, b"").unwrap();
    let out = blocker.join("nested");
    let o = qshape(&["run", "--experiment", "theorem1", "--seeds", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = qshape(&["run", "--experiment", "theorem1", "--seeds", "3", "--out", blocker.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(files(dir.path()), vec!["taken".to_string()]);
    assert_eq!(fs::read(&blocker).unwrap(), b"");
}

#[test]
fn identical_spec_gives_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, "experiment = \"efficiency\"\nseeds = [3, 4]\nbudget = 5000\neval_every = 1000\n").unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = qshape(&["run", "--config", cfg.to_str().unwrap(), "--env", "chain", "--out", out.to_str().unwrap()]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out);
    }
    let csvs: Vec<String> = files(&runs[0]).into_iter().filter(|n| n.ends_with(".csv")).collect();
    assert_eq!(csvs.len(), 3);
    for n in &csvs {
        assert_eq!(fs::read(runs[0].join(n)).unwrap(), fs::read(runs[1].join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "budget = \"lots\"\n").unwrap();
    for args in [
        vec!["run", "--experiment", "efficiency", "--config", bad.to_str().unwrap()],
        vec!["run", "--experiment", "nonsense"],
        vec!["run", "--experiment", "efficiency", "--env", "atlantis"],
        vec!["run", "--experiment", "theorem1", "--seeds", "1,1"],
        vec!["run", "--experiment", "adaptability", "--schedule", "sometimes"],
    ] {
        let mut a = args.clone();
        a.extend(["--out", out.to_str().unwrap()]);
        let o = qshape(&a);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.exists());
}

#[test]
fn nothing_to_do_exits_2() {
    assert_eq!(qshape(&[]).status.code(), Some(2));
}
