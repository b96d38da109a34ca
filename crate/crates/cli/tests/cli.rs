use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orbitforge_core::report::Checkpoint;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_orbitforge"));
    c.env("ORBITFORGE_THREADS", "2");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pendulum() -> PathBuf {
    configs().join("pendulum.toml")
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn validate_passes_on_the_pendulum() {
    let out = run_ok(&["validate", "--config", pendulum().to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["assumptions"]["a1"]["passed"], true);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // not a critical point
    let text = std::fs::read_to_string(pendulum()).unwrap().replace("x_plus = [3.141592653589793]", "x_plus = [2.0]");
    let bad_endpoint = dir.path().join("noncritical.toml");
    std::fs::write(&bad_endpoint, text).unwrap();
    let st = bin().args(["validate", "--config", bad_endpoint.to_str().unwrap()]).output().unwrap().status;
    assert_eq!(st.code(), Some(1));
    let out = dir.path().join("o");
    let st = bin()
        .args(["run", "--config", bad_endpoint.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(1));

    let malformed = dir.path().join("malformed.toml");
    std::fs::write(&malformed, "name = 3\n[model\n").unwrap();
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, std::fs::read_to_string(pendulum()).unwrap() + "\n[extra]\nx = 1\n").unwrap();
    for args in [
        vec!["validate", "--config", malformed.to_str().unwrap()],
        vec!["validate", "--config", unknown.to_str().unwrap()],
        vec!["validate", "--config", "/definitely/not/here.toml"],
        vec!["frobnicate"],
        vec!["run"],
    ] {
        let st = bin().args(&args).output().unwrap().status;
        assert_eq!(st.code(), Some(2), "{args:?}");
    }
    let st = bin()
        .env("ORBITFORGE_THREADS", "zero")
        .args(["validate", "--config", pendulum().to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(2));
}

#[test]
fn run_writes_hashed_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["run", "--config", pendulum().to_str().unwrap(), "--stages", "4", "--out", out.to_str().unwrap()]);
    }
    let manifest = read_json(&a.join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 4);
    let files: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap().to_string()).collect();
    for name in ["trajectory.csv", "certificates.json", "summary.json", "state.ckpt", "residuals.csv"] {
        assert!(files.iter().any(|f| f == name), "{name} missing from manifest");
    }
    for f in &files {
        let p = a.join(f);
        assert!(p.exists(), "{f}");
        if f.ends_with(".json") {
            assert_eq!(read_json(&p)["config_hash"], hash.as_str(), "{f}");
        } else if f.ends_with(".csv") {
            let text = std::fs::read_to_string(&p).unwrap();
            assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"), "{f}");
        } else if f.ends_with(".ckpt") {
            assert_eq!(Checkpoint::read(&p).unwrap().config_hash, hash, "{f}");
        }
    }
    // 17 significant digits in the trajectory
    let traj = std::fs::read_to_string(a.join("trajectory.csv")).unwrap();
    let row = traj.lines().nth(3).unwrap();
    let first = row.split(',').next().unwrap();
    assert_eq!(first.split('e').next().unwrap().trim_start_matches('-').replace('.', "").len(), 17);
    for f in ["trajectory.csv", "certificates.json", "summary.json", "state.ckpt", "window.csv", "gamma.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pendulum();
    let cfg = cfg.to_str().unwrap();
    let (full, part, rest) = (dir.path().join("full"), dir.path().join("part"), dir.path().join("rest"));
    run_ok(&["run", "--config", cfg, "--stages", "4", "--out", full.to_str().unwrap()]);
    run_ok(&["run", "--config", cfg, "--stages", "2", "--out", part.to_str().unwrap()]);
    let ckpt = part.join("state.ckpt");
    run_ok(&["run", "--config", cfg, "--stages", "2", "--resume", ckpt.to_str().unwrap(), "--out", rest.to_str().unwrap()]);
    for f in ["trajectory.csv", "summary.json", "state.ckpt"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(rest.join(f)).unwrap(), "{f} differs");
    }
    // a checkpoint from another problem is refused
    let other = configs().join("pendulum_loop.toml");
    let st = bin()
        .args(["run", "--config", other.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()])
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap()
        .status;
    assert_eq!(st.code(), Some(2));
}

#[test]
fn bounds_reproduces_a_stage_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    run_ok(&["run", "--config", pendulum().to_str().unwrap(), "--stages", "3", "--out", out.to_str().unwrap()]);
    let record = read_json(&out.join("stages/stage_001.json"));
    let xi_next = record["record"]["xi_next"].as_f64().unwrap();
    let state = out.join("stages/state_001.ckpt");
    let res = run_ok(&[
        "bounds",
        "--config",
        pendulum().to_str().unwrap(),
        "--state",
        state.to_str().unwrap(),
        "--xi-next",
        &format!("{xi_next:e}"),
    ]);
    let b: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(b["bounds"], record["record"]["bounds"]);
    assert_eq!(b["lipschitz"], record["record"]["lipschitz"]);
}

#[test]
fn sweep_runs_members_in_separate_directories() {
    let dir = tempfile::tempdir().unwrap();
    let list = format!(
        "{},{}",
        configs().join("pendulum.toml").display(),
        configs().join("pendulum_loop.toml").display()
    );
    run_ok(&["run", "--sweep", &list, "--stages", "2", "--out", dir.path().to_str().unwrap()]);
    for stem in ["pendulum", "pendulum_loop"] {
        let m = read_json(&dir.path().join(stem).join("manifest.json"));
        assert_eq!(m["stages"].as_array().unwrap().len(), 2, "{stem}");
    }
}
