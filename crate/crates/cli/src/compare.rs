use crate::plot::{line_chart, Series};
use crate::run::{CONFIG_FILE, SUMMARY_FILE};
use crate::CliError;
use dclab::config::RunConfig;
use dclab::metrics::{a_mmd, bwt_mmd, f_mmd};
use dclab::persist::{self, read_seed};
use dclab::regularizers::DegeneracyRecord;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const TABLE_FILE: &str = "table.csv";
/// Metrics recomputed from the snapshot CSVs.
const SNAPSHOT_METRICS: [&str; 3] = ["a_mmd", "bwt_mmd", "f_mmd"];
/// Metrics that can only be read from the stored report.
const REPORT_METRICS: [&str; 1] = ["dc_accuracy_task1"];

struct SeedData {
    seed: u64,
    curves: BTreeMap<&'static str, Vec<(usize, f64)>>,
    finals: BTreeMap<&'static str, f64>,
    degeneracy: Vec<DegeneracyRecord>,
}

struct RunData {
    run_id: String,
    method: String,
    seeds: Vec<SeedData>,
}

fn load_run(dir: &Path) -> Result<RunData, String> {
    if !dir.join(SUMMARY_FILE).exists() {
        return Err("no summary.json (run incomplete)".into());
    }
    let cfg = RunConfig::from_json(&persist::load(&dir.join(CONFIG_FILE)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let art = read_seed(&crate::run::seed_dir(dir, seed)).map_err(|e| format!("seed {seed}: {e}"))?;
        let last = art.store.last_task();
        if last == 0 {
            return Err(format!("seed {seed}: no snapshots"));
        }
        let mut curves: BTreeMap<&'static str, Vec<(usize, f64)>> = BTreeMap::new();
        for n in 1..=last {
            let values = [a_mmd(&art.store, n), bwt_mmd(&art.store, n), f_mmd(&art.store, n)];
            for (metric, value) in SNAPSHOT_METRICS.into_iter().zip(values) {
                let value = value.map_err(|e| format!("seed {seed}: {e}"))?;
                if art.report.value(n, metric).is_some_and(|stored| stored != value) {
                    log::warn!("{}: stored {metric} at task {n} differs from the snapshots", dir.display());
                }
                curves.entry(metric).or_default().push((n, value));
            }
        }
        let mut finals: BTreeMap<&'static str, f64> = curves.iter().map(|(&m, c)| (m, c[c.len() - 1].1)).collect();
        for metric in REPORT_METRICS {
            if let Some(v) = art.report.final_value(metric) {
                finals.insert(metric, v);
            }
        }
        seeds.push(SeedData { seed, curves, finals, degeneracy: art.degeneracy });
    }
    let run_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| cfg.run_id());
    Ok(RunData { run_id, method: cfg.method.as_str().to_string(), seeds })
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn table(runs: &[RunData]) -> String {
    let metrics: Vec<&str> = SNAPSHOT_METRICS.into_iter().chain(REPORT_METRICS).collect();
    let mut out = String::from("method,runs,seeds");
    for m in &metrics {
        out.push_str(&format!(",{m}_mean,{m}_std"));
    }
    out.push('\n');
    let mut by_method: BTreeMap<&str, Vec<&RunData>> = BTreeMap::new();
    for r in runs {
        by_method.entry(&r.method).or_default().push(r);
    }
    for (method, group) in by_method {
        let seeds: Vec<&SeedData> = group.iter().flat_map(|r| &r.seeds).collect();
        out.push_str(&format!("{method},{},{}", group.len(), seeds.len()));
        for m in &metrics {
            let values: Vec<f64> = seeds.iter().filter_map(|s| s.finals.get(m).copied()).collect();
            if values.is_empty() {
                out.push_str(",,");
            } else {
                let (mean, std) = mean_std(&values);
                out.push_str(&format!(",{mean:?},{std:?}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Seed-mean A_MMD per task boundary for each method.
fn a_mmd_curves(runs: &[RunData]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut pooled: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        for s in &r.seeds {
            for &(n, v) in s.curves.get("a_mmd").into_iter().flatten() {
                pooled.entry(r.method.clone()).or_default().entry(n).or_default().push(v);
            }
        }
    }
    pooled
        .into_iter()
        .map(|(m, by_n)| (m, by_n.into_iter().map(|(n, vs)| (n as f64, mean_std(&vs).0)).collect()))
        .collect()
}

fn degeneracy_series(records: &[DegeneracyRecord]) -> (Series, Vec<Series>) {
    let forget = ("L_forget".to_string(), records.iter().enumerate().map(|(i, r)| (i as f64, r.forget)).collect());
    let width = records.iter().map(|r| r.norms.len()).max().unwrap_or(0);
    let norms = (0..width)
        .map(|k| {
            let pts = records.iter().enumerate().filter_map(|(i, r)| r.norms.get(k).map(|&v| (i as f64, v))).collect();
            (format!("||A{0}B{0}||_F", k + 1), pts)
        })
        .collect();
    (forget, norms)
}

pub fn compare(dirs: &[PathBuf], out: PathBuf) -> Result<(), CliError> {
    let mut runs = Vec::new();
    let mut skipped = 0usize;
    for dir in dirs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(why) => {
                log::warn!("skipping {}: {why}", dir.display());
                eprintln!("warning: skipping {}: {why}", dir.display());
                skipped += 1;
            }
        }
    }
    if runs.is_empty() {
        return Err(dclab::Error::Contract(format!("no completed runs to compare ({skipped} skipped)")).into());
    }
    std::fs::create_dir_all(&out).map_err(dclab::Error::from)?;
    let plot_err = |e: String| CliError::Runtime(dclab::Error::Contract(format!("plot: {e}")));

    let csv = table(&runs);
    persist::save(&out.join(TABLE_FILE), &csv)?;

    let curves = a_mmd_curves(&runs);
    let all: Vec<Series> = curves.iter().map(|(m, c)| (m.clone(), c.clone())).collect();
    line_chart(&out.join("a_mmd.svg"), "A_MMD per task boundary (seed mean)", "task", "A_MMD", &all).map_err(plot_err)?;
    for (method, mean) in &curves {
        let mut series: Vec<Series> = runs
            .iter()
            .filter(|r| &r.method == method)
            .flat_map(|r| &r.seeds)
            .map(|s| {
                let pts = s.curves.get("a_mmd").into_iter().flatten().map(|&(n, v)| (n as f64, v)).collect();
                (format!("seed {}", s.seed), pts)
            })
            .collect();
        series.push(("mean".into(), mean.clone()));
        line_chart(&out.join(format!("a_mmd-{method}.svg")), &format!("A_MMD per task boundary: {method}"), "task", "A_MMD", &series)
            .map_err(plot_err)?;
    }
    for r in &runs {
        for s in r.seeds.iter().filter(|s| !s.degeneracy.is_empty()) {
            let (forget, norms) = degeneracy_series(&s.degeneracy);
            let stem = format!("degeneracy-{}-seed{}", r.run_id, s.seed);
            line_chart(&out.join(format!("{stem}-forget.svg")), "C-LoRA forgetting penalty", "iteration", "L_forget", &[forget])
                .map_err(plot_err)?;
            line_chart(&out.join(format!("{stem}-norms.svg")), "C-LoRA adapter norms", "iteration", "Frobenius norm", &norms)
                .map_err(plot_err)?;
        }
    }

    let mut lines = csv.lines();
    lines.next();
    println!("{:<20} {:>5} {:>20} {:>20} {:>20}", "method", "seeds", "a_mmd", "bwt_mmd", "f_mmd");
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let cell = |i: usize| match (f[i].parse::<f64>(), f[i + 1].parse::<f64>()) {
            (Ok(m), Ok(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "-".into(),
        };
        println!("{:<20} {:>5} {:>20} {:>20} {:>20}", f[0], f[2], cell(3), cell(5), cell(7));
    }
    println!("compared {} run(s), skipped {skipped} incomplete; outputs in {}", runs.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_duplicates_has_zero_spread() {
        assert_eq!(mean_std(&[0.3, 0.3, 0.3]), (0.3, 0.0));
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
