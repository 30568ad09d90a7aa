use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn smoke() -> PathBuf {
    repo("config/smoke.json")
}

fn run(out: &Path, args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energy-storage"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(body).unwrap()).unwrap();
    p
}

fn smoke_with(patch: impl FnOnce(&mut Value)) -> Value {
    let mut v = json(&smoke());
    patch(&mut v);
    v
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (smoke_with(|v| v["grid"]["n_q"] = 1.into()), "grid.n_q"),
        (smoke_with(|v| v["model"] = serde_json::json!({ "sigma": -1.0 })), "model.sigma"),
        (smoke_with(|v| v["simulation"]["dt"] = "fast".into()), "simulation.dt"),
        (smoke_with(|v| v["colour"] = "blue".into()), "colour"),
    ];
    for (k, (body, field)) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{k}.json"), body);
        let out = run(tmp.path(), &["solve"], &cfg);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "case {k}: {err}");
        assert!(err.contains(field), "case {k}: {err:?} should name {field}");
    }
}

#[test]
fn zero_threads_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["solve", "--threads", "0"], &smoke());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn too_few_paths_are_raised_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "few.json", &smoke_with(|v| v["simulation"]["n_paths"] = 10.into()));
    let out = run(tmp.path(), &["evaluate"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("10 paths requested"));
    let report = json(&run_dir(&out).join("evaluation.json"));
    for s in report["starts"].as_array().unwrap() {
        assert_eq!(s["n_paths"], 100);
        assert!(s["grid_value"].is_number());
    }
}

#[test]
fn check_reports_positive_margins() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["check"], &smoke());
    assert!(out.status.success());
    let report = json(&run_dir(&out).join("check.json"));
    assert_eq!(report["passed"], true);
    assert!(report["mixed"]["min_margin"].as_f64().unwrap() > 0.0);
    assert!(report["parallel_min_margin"].as_f64().unwrap() > 0.0);
    let failing = std::fs::read_to_string(run_dir(&out).join("check_failing_nodes.csv")).unwrap();
    assert_eq!(failing.lines().count(), 1, "only the header");
}

#[test]
fn manifest_checksums_match_the_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["extract"], &smoke());
    assert!(out.status.success());
    let dir = run_dir(&out);
    let manifest = json(&dir.join("manifest.json"));
    assert_eq!(manifest["inputs"]["subcommand"], "extract");
    assert_eq!(manifest["inputs"]["config_sha256"], energy_storage::pipeline::sha256_file(&smoke()).unwrap());
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["name"].as_str().unwrap()).collect();
    for expected in ["barriers.csv", "smooth_levels.csv", "smooth_barriers.json", "extract.json"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    for f in files {
        let p = dir.join(f["name"].as_str().unwrap());
        assert_eq!(f["sha256"], energy_storage::pipeline::sha256_file(&p).unwrap());
        assert_eq!(f["bytes"], std::fs::metadata(&p).unwrap().len());
    }
}

#[test]
fn reloaded_field_evaluates_like_a_fresh_solve() {
    let tmp = tempfile::tempdir().unwrap();
    let solved = run(tmp.path(), &["solve", "--seed", "3"], &smoke());
    assert!(solved.status.success());
    let field = run_dir(&solved).join("field.bin");

    let fresh = run(tmp.path(), &["evaluate", "--seed", "3"], &smoke());
    let mut args = vec!["evaluate", "--seed", "3", "--field"];
    let field_arg = field.to_str().unwrap();
    args.push(field_arg);
    let reloaded = run(tmp.path(), &args, &smoke());
    assert!(fresh.status.success() && reloaded.status.success());
    let a = std::fs::read(run_dir(&fresh).join("evaluation.csv")).unwrap();
    let b = std::fs::read(run_dir(&reloaded).join("evaluation.csv")).unwrap();
    assert_eq!(a, b);
    assert!(json(&run_dir(&reloaded).join("manifest.json"))["inputs"]["field_sha256"].is_string());
}

#[test]
fn failed_admissibility_stops_all_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    // the smoke grid is too coarse for the default smoothing degrees
    let cfg = write_config(tmp.path(), "stiff.json", &smoke_with(|v| {
        v.as_object_mut().unwrap().remove("smoothing");
    }));
    let out = run(tmp.path(), &["all"], &cfg);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let diag = json(&dir.join("diagnostics.json"));
    assert_eq!(diag["subcommand"], "all");
    assert!(diag["error"].as_str().unwrap().contains("admissib"), "{diag}");
    assert_eq!(json(&dir.join("check.json"))["passed"], false);
    assert!(!dir.join("evaluation.csv").exists());
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn csv_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["all"], &smoke());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let header = |name: &str| std::fs::read_to_string(dir.join(name)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("value_policy.csv"), "s,q,nu1,t,V,mode,rate");
    assert_eq!(header("smooth_levels.csv"), "q,nu1,t,buy,sell");
    for name in ["barriers.csv", "filter_path_0.csv", "path_0_0.csv", "simulate_summary.csv", "evaluation.csv"] {
        assert!(!header(name).is_empty(), "{name}");
    }
}

#[test]
fn shipped_configs_load() {
    for name in ["default.json", "paper2016-explicit.json", "smoke.json"] {
        let cfg = energy_storage::config::RunConfig::from_json_file(&repo("config").join(name)).unwrap();
        cfg.validate().unwrap();
    }
    let default = energy_storage::config::RunConfig::from_json_file(&repo("config/default.json")).unwrap();
    let explicit = energy_storage::config::RunConfig::from_json_file(&repo("config/paper2016-explicit.json")).unwrap();
    assert_eq!(
        serde_json::to_value(default.params().unwrap()).unwrap(),
        serde_json::to_value(explicit.params().unwrap()).unwrap()
    );
}

/// Every key of the serialized default config is described by the schema, and
/// the schema lists nothing the config does not have.
#[test]
fn schema_matches_config_keys() {
    let schema = json(&repo("config/schema.json"));
    let default = serde_json::to_value(energy_storage::config::RunConfig::default()).unwrap();
    fn keys(v: &Value) -> Vec<String> {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    }
    let props = &schema["properties"];
    assert_eq!(keys(props), keys(&default));
    for section in ["grid", "solver", "simulation", "filter_demo", "output"] {
        assert_eq!(keys(&props[section]["properties"]), keys(&default[section]), "{section}");
    }
    let transform = &props["simulation"]["properties"]["transform"]["properties"];
    assert_eq!(keys(transform), keys(&default["simulation"]["transform"]));
    let mut model_keys = keys(&serde_json::to_value(energy_storage::ModelParams::paper2016()).unwrap());
    // optional and skipped when absent
    if !model_keys.iter().any(|k| k == "seasonality") {
        model_keys.push("seasonality".into());
        model_keys.sort();
    }
    assert_eq!(keys(&props["model"]["properties"]), model_keys);
}
