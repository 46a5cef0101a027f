//! Quadratic-kernel MMD, the continual-learning metric suite and two
//! diagnostics: DC training-set accuracy and FIM eigenvalues.

use crate::dcscores::classify;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::model::DenoiserModel;
use crate::regularizers::{ewc_gradients, FisherPass};
use crate::rng::LabRng;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Largest layer for which the dense FIM is materialized.
pub const MAX_FIM_PARAMS: usize = 256;

/// Weighted features of `(⟨x, y⟩ + 1)²`: `[1, x_i, x_i x_j (i ≤ j)]` with
/// weights `[1, 2, 1 or 2]`, so that `k(x, y) = Σ w · φ(x) · φ(y)`.
fn features<S: Scalar>(x: &[S]) -> Vec<S> {
    let mut f = Vec::with_capacity(1 + x.len() + x.len() * (x.len() + 1) / 2);
    f.push(S::one());
    f.extend_from_slice(x);
    for i in 0..x.len() {
        for j in i..x.len() {
            f.push(x[i] * x[j]);
        }
    }
    f
}

fn feature_weights<S: Scalar>(dim: usize) -> Vec<S> {
    let mut w = vec![S::one()];
    w.extend(std::iter::repeat_n(S::lit(2.0), dim));
    for i in 0..dim {
        for j in i..dim {
            w.push(if i == j { S::one() } else { S::lit(2.0) });
        }
    }
    w
}

fn feature_sum<S: Scalar>(points: &[S], dim: usize) -> Vec<S> {
    let mut acc: Vec<S> = Vec::new();
    for p in points.chunks(dim) {
        let f = features(p);
        if acc.is_empty() {
            acc = f;
        } else {
            acc.iter_mut().zip(&f).for_each(|(a, &v)| *a += v);
        }
    }
    acc
}

fn check_sets<S: Scalar>(x: &[S], y: &[S], dim: usize) -> Result<(usize, usize)> {
    if dim == 0 || x.len() % dim != 0 || y.len() % dim != 0 {
        return Err(Error::Dimension(format!("sample sets of {} and {} values are not {dim}-d", x.len(), y.len())));
    }
    if x.is_empty() || y.is_empty() {
        return Err(Error::Contract("mmd2 needs non-empty sample sets".into()));
    }
    Ok((x.len() / dim, y.len() / dim))
}

/// The kernel `(⟨x, y⟩ + 1)²`.
pub fn quadratic_kernel<S: Scalar>(x: &[S], y: &[S]) -> S {
    let dot: S = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    (dot + S::one()) * (dot + S::one())
}

/// Biased MMD² between two row-major sample sets of dimension `dim`.
///
/// Evaluated as the weighted distance between mean feature vectors of the
/// kernel, which is symmetric and non-negative by construction.
pub fn mmd2<S: Scalar>(x: &[S], y: &[S], dim: usize) -> Result<S> {
    let (m, n) = check_sets(x, y, dim)?;
    let w = feature_weights::<S>(dim);
    let mx = feature_sum(x, dim);
    let my = feature_sum(y, dim);
    let (m, n) = (S::from_usize(m).unwrap(), S::from_usize(n).unwrap());
    Ok(w.iter()
        .zip(mx.iter().zip(&my))
        .map(|(&w, (&a, &b))| {
            let d = a / m - b / n;
            w * d * d
        })
        .sum())
}

/// Unbiased MMD² (diagonal kernel terms removed); both sets need two or more points.
pub fn mmd2_unbiased<S: Scalar>(x: &[S], y: &[S], dim: usize) -> Result<S> {
    let (m, n) = check_sets(x, y, dim)?;
    if m < 2 || n < 2 {
        return Err(Error::Contract("unbiased mmd2 needs at least two points per set".into()));
    }
    let w = feature_weights::<S>(dim);
    let mx = feature_sum(x, dim);
    let my = feature_sum(y, dim);
    let wdot = |a: &[S], b: &[S]| -> S { w.iter().zip(a.iter().zip(b)).map(|(&w, (&p, &q))| w * p * q).sum() };
    let diag = |pts: &[S]| -> S { pts.chunks(dim).map(|p| quadratic_kernel(p, p)).sum() };
    let (mf, nf) = (S::from_usize(m).unwrap(), S::from_usize(n).unwrap());
    let xx = (wdot(&mx, &mx) - diag(x)) / (mf * (mf - S::one()));
    let yy = (wdot(&my, &my) - diag(y)) / (nf * (nf - S::one()));
    let xy = wdot(&mx, &my) / (mf * nf);
    Ok(xx + yy - S::lit(2.0) * xy)
}

/// Generated sample sets `X_{i,j}` (model after task `i`, concept `j`) and
/// target sets `X_{D,j}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnapshotStore {
    pub dim: usize,
    pub cells: BTreeMap<(usize, usize), Vec<f64>>,
    pub targets: BTreeMap<usize, Vec<f64>>,
}

impl SnapshotStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    /// Stores `X_{i,j}`; only concepts already learned (`1 ≤ j ≤ i`) are valid.
    pub fn insert(&mut self, i: usize, j: usize, points: Vec<f64>) -> Result<()> {
        if j == 0 || j > i {
            return Err(Error::Contract(format!("snapshot X_({i},{j}) needs 1 <= j <= i")));
        }
        if points.is_empty() || points.len() % self.dim != 0 {
            return Err(Error::Dimension(format!("snapshot of {} values is not {}-d", points.len(), self.dim)));
        }
        self.cells.insert((i, j), points);
        Ok(())
    }

    pub fn set_target(&mut self, j: usize, points: Vec<f64>) -> Result<()> {
        if points.is_empty() || points.len() % self.dim != 0 {
            return Err(Error::Dimension(format!("target of {} values is not {}-d", points.len(), self.dim)));
        }
        self.targets.insert(j, points);
        Ok(())
    }

    pub fn cell(&self, i: usize, j: usize) -> Result<&[f64]> {
        self.cells
            .get(&(i, j))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("missing snapshot X_({i},{j})")))
    }

    pub fn target(&self, j: usize) -> Result<&[f64]> {
        self.targets
            .get(&j)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("missing target set for concept {j}")))
    }

    /// Last task with a complete row of snapshots.
    pub fn last_task(&self) -> usize {
        self.cells.keys().map(|&(i, _)| i).max().unwrap_or(0)
    }

    /// `mmd2(X_{D,j}, X_{i,j})`.
    pub fn target_mmd(&self, i: usize, j: usize) -> Result<f64> {
        mmd2(self.target(j)?, self.cell(i, j)?, self.dim)
    }
}

/// `(1/N) Σ_{j ≤ N} mmd2(X_{D,j}, X_{N,j})`.
pub fn a_mmd(store: &SnapshotStore, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("a_mmd needs at least one task".into()));
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += store.target_mmd(n, j)?;
    }
    Ok(total / n as f64)
}

/// `(1/(N-1)) Σ_{j < N} mmd2(X_{j,j}, X_{N,j})`; zero for `N < 2`.
pub fn f_mmd(store: &SnapshotStore, n: usize) -> Result<f64> {
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 1..n {
        total += mmd2(store.cell(j, j)?, store.cell(n, j)?, store.dim)?;
    }
    Ok(total / (n - 1) as f64)
}

/// `(1/(N-1)) Σ_{j < N} [mmd2(X_{D,j}, X_{j,j}) - mmd2(X_{D,j}, X_{N,j})]`; zero for `N < 2`.
pub fn bwt_mmd(store: &SnapshotStore, n: usize) -> Result<f64> {
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 1..n {
        total += store.target_mmd(j, j)? - store.target_mmd(n, j)?;
    }
    Ok(total / (n - 1) as f64)
}

/// One metric value at a task boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub boundary_task: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub method: String,
}

/// Metric records of one or more runs. Wall-clock counters live in
/// [`Timings`] so that reports stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<MetricRecord>,
}

pub const CSV_HEADER: &str = "boundary_task,metric,value,seed,method";

impl MetricsReport {
    pub fn push(&mut self, boundary_task: usize, metric: &str, value: f64, seed: u64, method: &str) {
        self.records.push(MetricRecord {
            boundary_task,
            metric: metric.to_string(),
            value,
            seed,
            method: method.to_string(),
        });
    }

    /// Records the metric suite at boundary `n` from the store.
    pub fn push_boundary(&mut self, store: &SnapshotStore, n: usize, seed: u64, method: &str) -> Result<()> {
        self.push(n, "a_mmd", a_mmd(store, n)?, seed, method);
        self.push(n, "f_mmd", f_mmd(store, n)?, seed, method);
        self.push(n, "bwt_mmd", bwt_mmd(store, n)?, seed, method);
        Ok(())
    }

    pub fn value(&self, boundary_task: usize, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.boundary_task == boundary_task && r.metric == metric)
            .map(|r| r.value)
    }

    /// Value at the last boundary recorded for `metric`.
    pub fn final_value(&self, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .max_by_key(|r| r.boundary_task)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            // `{:?}` prints the shortest representation that round-trips exactly.
            out.push_str(&format!("{},{},{:?},{},{}\n", r.boundary_task, r.metric, r.value, r.seed, r.method));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Load("metrics csv header mismatch".into()));
        }
        let mut report = Self::default();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Load(format!("metrics csv line {}: {line:?}", no + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            report.records.push(MetricRecord {
                boundary_task: f[0].parse().map_err(|_| bad())?,
                metric: f[1].to_string(),
                value: f[2].parse().map_err(|_| bad())?,
                seed: f[3].parse().map_err(|_| bad())?,
                method: f[4].to_string(),
            });
        }
        Ok(report)
    }

    /// `{method: {metric: final value}}` plus the per-boundary series.
    pub fn summary(&self) -> serde_json::Value {
        let mut finals: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut series: BTreeMap<String, BTreeMap<String, Vec<(usize, f64)>>> = BTreeMap::new();
        for r in &self.records {
            let key = format!("{}/seed-{}", r.method, r.seed);
            series.entry(key.clone()).or_default().entry(r.metric.clone()).or_default().push((r.boundary_task, r.value));
            finals.entry(key).or_default().insert(r.metric.clone(), r.value);
        }
        serde_json::json!({ "final": finals, "per_boundary": series })
    }
}

/// Wall-clock seconds per phase, kept apart from the reproducible report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
    pub iterations: BTreeMap<String, usize>,
}

impl Timings {
    pub fn add(&mut self, phase: &str, seconds: f64, iterations: usize) {
        *self.seconds.entry(phase.to_string()).or_default() += seconds;
        *self.iterations.entry(phase.to_string()).or_default() += iterations;
    }
}

/// Fraction of points whose DC prediction over `concepts` is their own concept.
pub fn dc_accuracy(
    model: &DenoiserModel,
    datasets: &[(usize, &[f64])],
    concepts: &[usize],
    trials: usize,
    schedule: &Schedule,
    rng: &mut LabRng,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for &(concept, points) in datasets {
        let pred = classify(model, points, concepts, trials, schedule, rng)?;
        hits += pred.iter().filter(|&&p| p == concept).count();
        total += pred.len();
    }
    if total == 0 {
        return Err(Error::Contract("dc_accuracy on empty datasets".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Dense `mean_s g_s g_sᵀ` for flattened per-sample gradients.
pub fn empirical_fim<S: Scalar>(grads: &[Vec<S>]) -> Result<(Vec<S>, usize)> {
    let p = grads.first().map(Vec::len).ok_or_else(|| Error::Contract("no gradients".into()))?;
    if grads.iter().any(|g| g.len() != p) {
        return Err(Error::Dimension("per-sample gradients differ in length".into()));
    }
    let mut fim = vec![S::zero(); p * p];
    for g in grads {
        for i in 0..p {
            for j in 0..p {
                fim[i * p + j] += g[i] * g[j];
            }
        }
    }
    let n = S::from_usize(grads.len()).unwrap();
    fim.iter_mut().for_each(|v| *v /= n);
    Ok((fim, p))
}

/// The `k` largest eigenvalues of a dense symmetric matrix, descending.
pub fn topk_eigenvalues<S: Scalar>(matrix: &[S], dim: usize, k: usize) -> Result<Vec<S>> {
    let mut e = symmetric_eigenvalues(matrix, dim)?;
    e.truncate(k);
    Ok(e)
}

/// Which consolidation loss the FIM diagnostic differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FimVariant {
    WithDc,
    WithoutDc,
}

impl FimVariant {
    pub fn delta(self, delta: f64) -> f64 {
        match self {
            FimVariant::WithDc => delta,
            FimVariant::WithoutDc => 0.0,
        }
    }
}

/// Top-`k` eigenvalues of the dense empirical FIM of one parameter tensor,
/// built from one gradient of the consolidation loss per sample.
#[allow(clippy::too_many_arguments)]
pub fn fim_eigen_topk(
    model: &DenoiserModel,
    layer: &str,
    dataset: &[f64],
    n: usize,
    variant: FimVariant,
    pass: FisherPass,
    k: usize,
    schedule: &Schedule,
    rng: &mut LabRng,
) -> Result<Vec<f64>> {
    let size = model
        .param(layer)
        .ok_or_else(|| Error::Contract(format!("unknown layer {layer}")))?
        .tensor
        .len();
    if size > MAX_FIM_PARAMS {
        return Err(Error::Contract(format!("layer {layer} has {size} > {MAX_FIM_PARAMS} parameters")));
    }
    let pass = FisherPass { batch: 1, delta: variant.delta(pass.delta), ..pass };
    let mut grads = Vec::with_capacity(pass.iterations);
    ewc_gradients(model, &[layer.to_string()], dataset, n, pass, schedule, rng, |mut g| {
        grads.push(g.remove(layer).unwrap_or_else(|| vec![0.0; size]));
        Ok(())
    })?;
    let (fim, p) = empirical_fim(&grads)?;
    topk_eigenvalues(&fim, p, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_model_is_at_chance() {
        use crate::model::ModelConfig;
        use crate::rng::{normals, seeded};
        let mut rng = seeded(30);
        let mut model = DenoiserModel::new(ModelConfig { data_dim: 2, hidden: 16, time_dim: 8, embed_dim: 4 }, &mut rng);
        model.add_concept(&mut rng);
        model.add_concept(&mut rng);
        let schedule = crate::diffusion::make_schedule(20, 1e-3, 0.2).unwrap();
        let sets: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut rng, 200)).collect();
        let datasets: Vec<(usize, &[f64])> = sets.iter().enumerate().map(|(c, s)| (c, s.as_slice())).collect();
        let acc = dc_accuracy(&model, &datasets, &[0, 1, 2], 4, &schedule, &mut rng).unwrap();
        let sigma = (1.0 / 3.0 * 2.0 / 3.0 / 300.0f64).sqrt();
        assert!((acc - 1.0 / 3.0).abs() < 3.0 * sigma, "{acc}");
    }

    fn naive(x: &[f64], y: &[f64], d: usize) -> f64 {
        let mean = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for p in a.chunks(d) {
                for q in b.chunks(d) {
                    s += quadratic_kernel(p, q);
                }
            }
            s / ((a.len() / d) * (b.len() / d)) as f64
        };
        mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
    }

    #[test]
    fn mmd_hand_cases() {
        assert_eq!(mmd2(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap(), 6.0);
        let x = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(mmd2(&x, &x, 2).unwrap(), 0.0);
        let y = [1.0, 1.0, -0.5, 0.25, 0.0, 2.0];
        assert!((mmd2(&x, &y, 2).unwrap() - naive(&x, &y, 2)).abs() < 1e-12);
        assert_eq!(mmd2(&x, &y, 2).unwrap(), mmd2(&y, &x, 2).unwrap());
        assert!(mmd2(&x, &[1.0, 2.0, 3.0], 2).is_err());
        assert!(mmd2::<f64>(&[], &x, 2).is_err());
    }

    #[test]
    fn unbiased_matches_pair_sums() {
        let x = [0.3, -1.2, 2.0, 0.5, 0.1, 0.1];
        let y = [1.0, 1.0, -0.5, 0.25];
        let pairs = |a: &[f64], b: &[f64], skip_diag: bool| {
            let mut s = 0.0;
            let mut c = 0.0;
            for (i, p) in a.chunks(2).enumerate() {
                for (j, q) in b.chunks(2).enumerate() {
                    if !(skip_diag && i == j) {
                        s += quadratic_kernel(p, q);
                        c += 1.0;
                    }
                }
            }
            s / c
        };
        let oracle = pairs(&x, &x, true) + pairs(&y, &y, true) - 2.0 * pairs(&x, &y, false);
        assert!((mmd2_unbiased(&x, &y, 2).unwrap() - oracle).abs() < 1e-12);
        assert!(mmd2_unbiased(&[1.0, 0.0], &y, 2).is_err());
    }

    fn store_with(target_mmds: &[((usize, usize), f64)]) -> SnapshotStore {
        let mut s = SnapshotStore::new(1);
        for j in 1..=3 {
            s.set_target(j, vec![0.0]).unwrap();
        }
        for &((i, j), m) in target_mmds {
            // singletons {a} and {0} in 1-d: mmd2 = (a² + 1)² - 1
            let a = ((m + 1.0).sqrt() - 1.0).sqrt();
            s.insert(i, j, vec![a]).unwrap();
        }
        s
    }

    #[test]
    fn metric_suite_hand_cases() {
        let s = store_with(&[((2, 1), 0.2), ((2, 2), 0.4)]);
        assert!((a_mmd(&s, 2).unwrap() - 0.3).abs() < 1e-12);
        let s = store_with(&[((1, 1), 0.4), ((2, 1), 0.5), ((2, 2), 0.1)]);
        assert!((bwt_mmd(&s, 2).unwrap() + 0.1).abs() < 1e-12);
        let s = store_with(&[((1, 1), 0.5), ((2, 1), 0.4), ((2, 2), 0.1)]);
        assert!((bwt_mmd(&s, 2).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(f_mmd(&s, 1).unwrap(), 0.0);
        assert_eq!(bwt_mmd(&s, 1).unwrap(), 0.0);
        assert!(a_mmd(&s, 3).is_err());
    }

    #[test]
    fn snapshot_contracts() {
        let mut s = SnapshotStore::new(2);
        assert!(s.insert(1, 2, vec![0.0, 0.0]).is_err());
        assert!(s.insert(1, 0, vec![0.0, 0.0]).is_err());
        assert!(s.insert(1, 1, vec![0.0]).is_err());
        s.insert(2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(s.last_task(), 2);
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = MetricsReport::default();
        r.push(1, "a_mmd", 0.1 + 0.2, 7, "ewc-dc");
        r.push(2, "bwt_mmd", -1e-300, 7, "ewc-dc");
        assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
        assert_eq!(r.final_value("a_mmd"), Some(0.1 + 0.2));
        assert!(MetricsReport::from_csv("bad header\n").is_err());
    }

    #[test]
    fn fim_hand_case() {
        let (fim, p) = empirical_fim(&[vec![1.0f64, 2.0]]).unwrap();
        assert_eq!(fim, vec![1.0, 2.0, 2.0, 4.0]);
        let e = topk_eigenvalues(&fim, p, 2).unwrap();
        assert!((e[0] - 5.0).abs() < 1e-12 && e[1].abs() < 1e-12);
        let (zero, p) = empirical_fim(&[vec![0.0f64; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(topk_eigenvalues(&zero, p, 3).unwrap(), vec![0.0; 3]);
    }
}
