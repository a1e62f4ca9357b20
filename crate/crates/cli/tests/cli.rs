use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DFM_SEED")
        .output()
        .expect("spawn dfm")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        ok(&dfm(dir.path(), &["gen-data", "--shape", "rings", "--size", "3000", "--out", run]));
    }
    for file in ["rings.csv", "rings.pmf.csv", "manifest.json", "config.toml"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
    }
    let csv = fs::read_to_string(dir.path().join("a/rings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3001);
}

#[test]
fn invalid_shape_lists_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfm(dir.path(), &["gen-data", "--shape", "ringz"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["rings", "moons", "8gaussians", "2spirals", "checkerboard", "swissroll"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "schema_version = 1\n[sample]\nchainz = 4\n").unwrap();
    let out = dfm(dir.path(), &["--config", "c.toml", "sample"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn regularizer_without_target_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfm(dir.path(), &["fit", "guidance", "--size", "2000", "--lambda", "0.5", "--steps", "3"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn fit_posterior_writes_model_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfm(dir.path(), &["fit", "posterior", "--size", "2000", "--steps", "20", "--out", "p"]);
    ok(&out);
    let p = dir.path().join("p");
    let model = fs::read(p.join("posterior.dfmp")).unwrap();
    assert_eq!(&model[..4], b"DFMP");
    assert!(p.join("posterior.dfmp.json").exists());
    let curve = fs::read_to_string(p.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("step,loss"));
    let manifest = json(&p.join("manifest.json"));
    let files: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|o| o["file"].as_str().unwrap()).collect();
    assert!(files.contains(&"posterior.dfmp"));
}

#[test]
fn sample_eval_render_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--size", "4000", "--steps", "16", "--chains", "3000"];
    let mut args = vec!["sample", "--guidance", "posterior", "--init", "uniform", "--out", "s"];
    args.extend(common);
    ok(&dfm(dir.path(), &args));
    let samples = fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 3001);
    let calls = json(&dir.path().join("s/calls.json"));
    assert_eq!(calls["guidance_calls_per_step"], 1.0);
    assert_eq!(calls["expected_per_step"], 1);

    ok(&dfm(dir.path(), &["eval", "--samples", "s/samples.csv", "--size", "4000", "--out", "e"]));
    let metrics = json(&dir.path().join("e/metrics.json"));
    let tv = metrics["tv"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tv));
    assert!(metrics.get("kl").is_some());
    assert_eq!(metrics["call_count"], 1.0);

    let out = dfm(
        dir.path(),
        &["render", "--samples", "s/samples.csv", "s/samples.csv", "--columns", "3", "--with-target", "--size", "4000", "--out", "r"],
    );
    ok(&out);
    let pgm = fs::read(dir.path().join("r/panels.pgm")).unwrap();
    // Three 33x33 panels separated by 1-pixel gaps.
    assert!(pgm.starts_with(b"P5\n101 33\n65535\n"));
}

#[test]
fn exact_guidance_model_round_trips_through_sampling() {
    let dir = tempfile::tempdir().unwrap();
    ok(&dfm(dir.path(), &["fit", "guidance", "--exact", "--size", "3000", "--init", "masked", "--out", "g"]));
    let args = ["--size", "3000", "--steps", "12", "--chains", "500", "--init", "masked", "--guidance", "posterior"];
    let mut learned = vec!["sample", "--model", "g/guidance.dfmp", "--out", "a"];
    learned.extend(args);
    ok(&dfm(dir.path(), &learned));
    let mut exact = vec!["sample", "--out", "b"];
    exact.extend(args);
    ok(&dfm(dir.path(), &exact));
    // The masked-path table stores exact h, so both runs agree.
    assert_eq!(fs::read(dir.path().join("a/samples.csv")).unwrap(), fs::read(dir.path().join("b/samples.csv")).unwrap());
}

#[test]
fn seed_override_and_thread_independence() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["sample", "--size", "3000", "--steps", "8", "--chains", "1500"];
    let run = |out: &str, extra: &[&str], seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dfm"));
        cmd.args(base).args(["--out", out]).args(extra).current_dir(dir.path()).env_remove("DFM_SEED");
        if let Some(s) = seed {
            cmd.env("DFM_SEED", s);
        }
        let o = cmd.output().unwrap();
        ok(&o);
        fs::read(dir.path().join(out).join("samples.csv")).unwrap()
    };
    let one = run("t1", &["--threads", "1"], None);
    let two = run("t2", &["--threads", "2"], None);
    assert_eq!(one, two);
    let reseeded = run("s7", &[], Some("7"));
    assert_ne!(one, reseeded);
    let config = fs::read_to_string(dir.path().join("s7/config.toml")).unwrap();
    assert!(config.contains("seed = 7"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&dfm(dir.path(), &["grad-check", "--out", "gc"]));
    let report = json(&dir.path().join("gc/grad_check.json"));
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 10);
    assert!(checks.iter().all(|c| c["pass"] == true));
}
