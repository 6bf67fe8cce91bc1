use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dvbf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvbf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// A tiny DVBF config so the pipeline test runs in seconds.
fn tiny_config(dir: &Path) {
    let out = dvbf(&["show-preset", "pendulum-dvbf-smoke"], dir);
    let mut cfg: serde_json::Value = serde_json::from_str(&ok(&out)).unwrap();
    cfg["model"]["hidden"] = 16.into();
    cfg["model"]["transitions"] = 4.into();
    cfg["batch_size"] = 10.into();
    cfg["iterations"] = 6.into();
    cfg["checkpoint_every"] = 3.into();
    cfg["val_every"] = 3.into();
    fs::write(dir.join("cfg.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn help_documents_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&dvbf(&["--help"], dir.path()));
    for sub in ["generate-data", "train", "evaluate", "rollout", "export-figures", "show-preset"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
    let help = ok(&dvbf(&["train", "--help"], dir.path()));
    for flag in ["--config", "--preset", "--data", "--out", "--resume", "--seed", "--threads"] {
        assert!(help.contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn bad_usage_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["generate-data", "--env", "pendulum", "--out", "d", "--bogus"],
        vec!["generate-data", "--env", "cartpole", "--out", "d"],
        vec!["frobnicate"],
        vec!["train", "--data", "d", "--out", "r"],
    ] {
        let out = dvbf(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failure_is_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dvbf(
        &["evaluate", "--checkpoint", "missing", "--data", "missing", "--report", "r.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=io message=\""), "{err}");

    let out = dvbf(&["train", "--preset", "nope", "--data", "d", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=invalid_argument"));
}

#[test]
fn presets_print_as_loadable_configs() {
    let dir = tempfile::tempdir().unwrap();
    let names = ok(&dvbf(&["show-preset"], dir.path()));
    assert!(names.lines().any(|l| l == "pendulum-dvbf-reduced"));
    for name in names.lines() {
        let cfg = ok(&dvbf(&["show-preset", name], dir.path()));
        let v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
        assert!(v["iterations"].as_u64().unwrap() > 0);
    }
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let shipped: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let built: serde_json::Value = serde_json::from_str(&ok(&dvbf(&["show-preset", &name], dir.path()))).unwrap();
        assert_eq!(shipped, built, "{name}");
        seen += 1;
    }
    assert!(seen >= 7);
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dvbf(
        &["generate-data", "--env", "pendulum", "--out", "data", "--seed", "0", "--sequences", "20"],
        d,
    ));
    for split in ["train", "val", "test"] {
        assert!(d.join("data").join(split).join("manifest.json").exists());
    }
    tiny_config(d);

    let train = ["--threads", "1", "train", "--config", "cfg.json", "--data", "data", "--out", "run"];
    let msg = ok(&dvbf(&train, d));
    assert!(msg.contains("trained 6 iterations"), "{msg}");
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "iteration,c,recon,kl_w,kl_v,annealed_total,wall_clock_s");
    assert_eq!(metrics.lines().count(), 7);

    // Resume with a larger budget picks up at iteration 6.
    let mut more: Vec<&str> = train.to_vec();
    more.extend(["--resume", "--iterations", "9"]);
    ok(&dvbf(&more, d));
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 10);

    ok(&dvbf(&["evaluate", "--checkpoint", "run", "--data", "data", "--report", "r.json"], d));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    let entries = report["regression"]["entries"].as_array().unwrap();
    let targets: Vec<&str> = entries.iter().map(|e| e["target"].as_str().unwrap()).collect();
    assert_eq!(targets, ["sin_angle", "cos_angle", "angular_velocity"]);
    assert_eq!(report["step"], 9);
    let elbo = &report["elbo"];
    let gap = elbo["bound"].as_f64().unwrap() - (elbo["recon"].as_f64().unwrap() - elbo["kl"].as_f64().unwrap());
    assert!(gap.abs() < 1e-8);

    ok(&dvbf(
        &["rollout", "--checkpoint", "run/checkpoint", "--data", "data", "--horizon", "20", "--out", "roll", "--sequences", "0,2"],
        d,
    ));
    for f in ["seq0000.pgm", "seq0002.pgm", "rollouts.csv", "summary.json"] {
        assert!(d.join("roll").join(f).exists(), "{f}");
    }

    ok(&dvbf(&["export-figures", "--checkpoint", "run", "--data", "data", "--out", "fig", "--horizon", "15"], d));
    let latents = fs::read_to_string(d.join("fig/latents.csv")).unwrap();
    assert_eq!(latents.lines().count(), 1 + 20 * 15);
    assert!(d.join("fig/rollouts/seq0003.pgm").exists());
    assert!(d.join("fig/report.json").exists());

    // Exports regenerate bit-identically.
    ok(&dvbf(&["export-figures", "--checkpoint", "run", "--data", "data", "--out", "fig2", "--horizon", "15"], d));
    for f in ["latents.csv", "report.json", "rollouts/rollouts.csv", "rollouts/seq0001.pgm"] {
        assert_eq!(fs::read(d.join("fig").join(f)).unwrap(), fs::read(d.join("fig2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn identical_seeds_give_identical_training_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dvbf(&["generate-data", "--env", "pendulum", "--out", "data", "--sequences", "12"], d));
    tiny_config(d);
    for run in ["a", "b"] {
        ok(&dvbf(&["train", "--config", "cfg.json", "--data", "data", "--out", run, "--seed", "5"], d));
    }
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(d.join(p).join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip("a"), strip("b"));
    assert_eq!(
        fs::read(d.join("a/checkpoint/params.bin")).unwrap(),
        fs::read(d.join("b/checkpoint/params.bin")).unwrap()
    );
}

#[test]
fn evaluate_rejects_mismatched_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dvbf(&["generate-data", "--env", "pendulum", "--out", "pend", "--sequences", "12"], d));
    ok(&dvbf(&["generate-data", "--env", "ball", "--out", "ball", "--sequences", "12"], d));
    tiny_config(d);
    ok(&dvbf(&["train", "--config", "cfg.json", "--data", "pend", "--out", "run", "--iterations", "1"], d));
    let out = dvbf(&["evaluate", "--checkpoint", "run", "--data", "ball", "--report", "r.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=invalid_argument"));
}
