use crate::{results_root, CliError};
use dclab::config::{MethodName, RunConfig};
use dclab::metrics::{MetricsReport, Timings};
use dclab::persist;
use dclab::workflow::{pretrain, run_sequence};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
/// Written last; its presence marks a run as complete.
pub const SUMMARY_FILE: &str = "summary.json";

pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<String>,
    pub dry_run: bool,
    pub jobs: usize,
}

fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(m) = &args.method {
        cfg.method = m.parse::<MethodName>().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let cfg = cfg.resolved();
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg).map_err(dclab::Error::from)?);
        return Ok(());
    }
    let root = args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(results_root);
    let dir = root.join(cfg.run_id());
    std::fs::create_dir_all(&dir).map_err(dclab::Error::from)?;
    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.exists() {
        std::fs::remove_file(&summary_path).map_err(dclab::Error::from)?;
    }
    persist::save(&dir.join(CONFIG_FILE), &serde_json::to_string_pretty(&cfg).map_err(dclab::Error::from)?)?;

    let results = run_seeds(&cfg, &dir, args.jobs);
    let mut report = MetricsReport::default();
    let mut timings = serde_json::Map::new();
    for (seed, outcome) in cfg.seeds.iter().zip(results) {
        let (r, t) = outcome?;
        report.records.extend(r.records);
        timings.insert(format!("seed-{seed}"), serde_json::to_value(t).map_err(dclab::Error::from)?);
    }
    persist::save(&dir.join(METRICS_FILE), &report.to_csv())?;
    let summary = serde_json::json!({
        "run_id": cfg.run_id(),
        "method": cfg.method.as_str(),
        "seeds": cfg.seeds,
        "metrics": report.summary(),
        "timings": timings,
    });
    persist::save(&summary_path, &serde_json::to_string_pretty(&summary).map_err(dclab::Error::from)?)?;
    for metric in ["a_mmd", "bwt_mmd", "f_mmd"] {
        let values: Vec<f64> = cfg
            .seeds
            .iter()
            .filter_map(|&s| report.records.iter().filter(|r| r.seed == s && r.metric == metric).max_by_key(|r| r.boundary_task))
            .map(|r| r.value)
            .collect();
        println!("{metric} {:.4}", values.iter().sum::<f64>() / values.len() as f64);
    }
    println!("results in {}", dir.display());
    Ok(())
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

type SeedResult = Result<(MetricsReport, Timings), dclab::Error>;

/// Trains each seed on a pool of `jobs` threads; results come back in seed order.
fn run_seeds(cfg: &RunConfig, dir: &Path, jobs: usize) -> Vec<SeedResult> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SeedResult>>> = cfg.seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cfg.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                log::info!("seed {seed}: start");
                let result = run_seed(cfg, seed, &seed_dir(dir, seed));
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every seed is claimed")).collect()
}

fn run_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> SeedResult {
    let base = pretrain(cfg, seed)?;
    let out = run_sequence(cfg, &base)?;
    persist::write_seed(dir, &out)?;
    Ok((out.report, out.timings))
}
