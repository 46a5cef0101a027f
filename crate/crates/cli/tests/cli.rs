use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "method": "ewc-dc",
  "seeds": [0],
  "model": {"hidden": 16, "time_dim": 8, "embed_dim": 4},
  "schedule": {"steps": 20},
  "sequence": {
    "tasks": [{"family": "ring", "radius": 1.5, "sigma": 0.08, "seed": 101}],
    "train_points": 40,
    "snapshot_points": 30
  },
  "pretrain": {"iterations": 30, "batch": 16, "points": 200, "prior_samples": 40},
  "train": {"iterations": 15},
  "metrics": {"dc_accuracy_trials": 4, "dc_accuracy_points": 10}
}"#;

fn dclab(args: &[&str], results: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dclab"))
        .args(args)
        .env("DCLAB_RESULTS", results)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn dry_run_prints_resolved_config_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let out = dclab(&["run", cfg.to_str().unwrap(), "--dry-run", "--method", "ewc"], &tmp.path().join("r"));
    assert!(out.status.success());
    let resolved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resolved["method"], "ewc");
    assert_eq!(resolved["ewc"]["iterations"], 3);
    assert_eq!(resolved["dsc"]["iterations"], 3);
    assert_eq!(resolved["dc"]["delta"], 0.5);
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("r");
    let unknown = write_config(tmp.path(), "u.json", r#"{"train": {"iterations": 5, "learning_rate": 1}}"#);
    let out = dclab(&["run", unknown.to_str().unwrap()], &results);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let cfg = write_config(tmp.path(), "c.json", TINY);
    let out = dclab(&["run", cfg.to_str().unwrap(), "--method", "no-such-method"], &results);
    assert_eq!(out.status.code(), Some(2));
    let out = dclab(&["run", tmp.path().join("missing.json").to_str().unwrap()], &results);
    assert_eq!(out.status.code(), Some(2));
    let bad_value = write_config(tmp.path(), "b.json", r#"{"dc": {"tau": -1.0}}"#);
    assert_eq!(dclab(&["run", bad_value.to_str().unwrap()], &results).status.code(), Some(2));
}

#[test]
fn one_task_run_then_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("r");
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let out = dclab(&["run", cfg.to_str().unwrap()], &results);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_run_dir(&results);
    for f in ["config.json", "metrics.csv", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let seed = run.join("seed-0");
    for f in ["checkpoint.json", "fisher.json", "snapshots.csv", "events.csv", "metrics.csv", "timings.json"] {
        assert!(seed.join(f).is_file(), "{f}");
    }
    let art = dclab::persist::read_seed(&seed).unwrap();
    assert_eq!(art.store.cells.len(), 1);
    assert!(art.report.final_value("a_mmd").is_some());
    art.log.check_order().unwrap();

    // A second, interrupted run directory is skipped with a warning.
    let broken = results.join("broken");
    fs::create_dir_all(&broken).unwrap();
    let cmp = tmp.path().join("cmp");
    let out = dclab(
        &["compare", run.to_str().unwrap(), run.to_str().unwrap(), broken.to_str().unwrap(), "--out", cmp.to_str().unwrap()],
        &results,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped 1 incomplete"));
    let table = fs::read_to_string(cmp.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 2);
    let header: Vec<&str> = rows[0].split(',').collect();
    let row: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(row[0], "ewc-dc");
    for (h, v) in header.iter().zip(&row) {
        if h.ends_with("_std") {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h}");
        }
    }
    // The table is recomputed from the snapshot CSV.
    let a = dclab::metrics::a_mmd(&art.store, 1).unwrap();
    assert_eq!(row[header.iter().position(|h| *h == "a_mmd_mean").unwrap()].parse::<f64>().unwrap(), a);
    assert!(cmp.join("a_mmd.svg").is_file());
    assert!(cmp.join("a_mmd-ewc-dc.svg").is_file());
}

#[test]
fn compare_with_no_complete_run_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dclab(&["compare", tmp.path().to_str().unwrap()], &tmp.path().join("r"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn parallel_seeds_match_serial_and_clora_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY
        .replace(r#""seeds": [0]"#, r#""seeds": [3, 4]"#)
        .replace(r#""method": "ewc-dc""#, r#""method": "clora""#)
        .replace(
            r#""tasks": [{"family": "ring", "radius": 1.5, "sigma": 0.08, "seed": 101}]"#,
            r#""tasks": [{"family": "ring", "radius": 1.5, "sigma": 0.08, "seed": 101},
                        {"family": "blob-mixture", "centers": [[1.5, 1.5]], "sigma": 0.1, "seed": 7}]"#,
        );
    let cfg = write_config(tmp.path(), "c.json", &text);
    let serial = tmp.path().join("serial");
    let parallel = tmp.path().join("parallel");
    assert!(dclab(&["run", cfg.to_str().unwrap(), "--out", serial.to_str().unwrap()], &tmp.path().join("x")).status.success());
    let out = dclab(&["run", cfg.to_str().unwrap(), "--jobs", "2"], &parallel);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (a, b) = (only_run_dir(&serial), only_run_dir(&parallel));
    assert_eq!(a.file_name(), b.file_name());
    for f in ["metrics.csv", "seed-3/snapshots.csv", "seed-4/events.csv", "seed-4/degeneracy.csv", "seed-3/checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cmp = tmp.path().join("cmp");
    assert!(dclab(&["compare", a.to_str().unwrap(), "--out", cmp.to_str().unwrap()], &serial).status.success());
    let stem = format!("degeneracy-{}-seed3", a.file_name().unwrap().to_string_lossy());
    assert!(cmp.join(format!("{stem}-forget.svg")).is_file());
    assert!(cmp.join(format!("{stem}-norms.svg")).is_file());
}

#[test]
fn compare_writes_one_curve_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("r");
    let cfg = write_config(tmp.path(), "c.json", TINY);
    for method in ["ewc", "ewc-dc"] {
        assert!(dclab(&["run", cfg.to_str().unwrap(), "--method", method], &results).status.success());
    }
    let runs: Vec<String> = fs::read_dir(&results).unwrap().map(|e| e.unwrap().path().to_string_lossy().into_owned()).collect();
    assert_eq!(runs.len(), 2);
    let cmp = tmp.path().join("cmp");
    let mut args = vec!["compare"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--out", cmp.to_str().unwrap()]);
    assert!(dclab(&args, &results).status.success());
    assert!(cmp.join("a_mmd-ewc.svg").is_file());
    assert!(cmp.join("a_mmd-ewc-dc.svg").is_file());
    let table = fs::read_to_string(cmp.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn seed_flag_overrides_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TINY);
    let out = dclab(&["run", cfg.to_str().unwrap(), "--seed", "9", "--dry-run"], &tmp.path().join("r"));
    let resolved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resolved["seeds"], serde_json::json!([9]));
}
