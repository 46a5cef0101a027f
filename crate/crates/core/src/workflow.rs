//! The continual-personalization loop: pretrain, then for every task train,
//! consolidate, update the Fisher and snapshot, for any of the methods.

use crate::config::{MethodName, RunConfig};
use crate::data::{generate, minibatch};
use crate::diffusion::{denoise_loss, sample, Schedule};
use crate::dsc::{run_dsc, DscRun};
use crate::error::{Error, Result};
use crate::metrics::{dc_accuracy, MetricsReport, SnapshotStore, Timings};
use crate::model::{merge_adapters, AdapterMode, ConceptEmbedding, DenoiserModel, LoraAdapter};
use crate::regularizers::{
    accumulate_fisher, adapter_norm, clora_forget_current, clora_forget_loss, fisher_penalty, CloraState,
    DegeneracyRecord, FisherPass, FisherState,
};
use crate::rng::{derive, seeded, LabRng};
use crate::Graph;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

// Purpose tags for derived random streams.
const PRETRAIN: u64 = 1;
const PRIOR_SAMPLES: u64 = 2;
const TASK: u64 = 3;
const SNAPSHOT: u64 = 4;
const TARGET: u64 = 5;
const ACCURACY: u64 = 6;
const INIT: u64 = 7;

/// Stages of one task, in the order they must occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Train,
    Dsc,
    Replace,
    FimUpdate,
    Snapshot,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Dsc => "dsc",
            Phase::Replace => "replace",
            Phase::FimUpdate => "fim-update",
            Phase::Snapshot => "snapshot",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Phase::Train, Phase::Dsc, Phase::Replace, Phase::FimUpdate, Phase::Snapshot]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Load(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub task: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub values: Vec<(String, f64)>,
}

/// Append-only record of everything a run did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, task: usize, phase: Phase, iteration: usize, values: &[(&str, f64)]) {
        let values = values.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self.events.push(Event { task, phase, iteration, values });
    }

    /// Phases of `task` with consecutive repeats collapsed.
    pub fn phases(&self, task: usize) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        for e in self.events.iter().filter(|e| e.task == task) {
            if out.last() != Some(&e.phase) {
                out.push(e.phase);
            }
        }
        out
    }

    pub fn count(&self, phase: Phase) -> usize {
        let mut tasks: Vec<usize> = self.events.iter().filter(|e| e.phase == phase).map(|e| e.task).collect();
        tasks.dedup();
        tasks.len()
    }

    /// Checks that tasks appear in order and each task's phases follow
    /// train, dsc, replace, fim-update, snapshot (any stage may be absent).
    pub fn check_order(&self) -> Result<()> {
        let mut last_task = 0;
        for e in &self.events {
            if e.task < last_task {
                return Err(Error::Contract(format!("task {} logged after task {last_task}", e.task)));
            }
            last_task = e.task;
        }
        let mut tasks: Vec<usize> = self.events.iter().map(|e| e.task).collect();
        tasks.dedup();
        for task in tasks {
            let phases = self.phases(task);
            if phases.first() != Some(&Phase::Train) || phases.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!("task {task} phases out of order: {phases:?}")));
            }
        }
        Ok(())
    }
}

/// The pretrained base model and the prior-preservation set drawn from it.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub seed: u64,
    pub model: DenoiserModel,
    pub prior_data: Vec<f64>,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains the base denoiser on prior-concept data. The prior row stays fixed;
/// trunk, head and the key/value projections become `W_init`.
pub fn pretrain(cfg: &RunConfig, seed: u64) -> Result<Pretrained> {
    let start = Instant::now();
    let schedule = cfg.schedule.build()?;
    let mut rng = seeded(derive(seed, &[PRETRAIN]));
    let mut model = DenoiserModel::new(cfg.model.clone(), &mut rng);
    let data = generate(&cfg.sequence.prior, cfg.pretrain.points, &mut rng)?;
    model.set_trainable(|name| !name.starts_with("concept."));
    let mut opt = cfg.pretrain.optimizer.build();
    let mut losses = Vec::with_capacity(cfg.pretrain.iterations);
    let d = cfg.model.data_dim;
    for _ in 0..cfg.pretrain.iterations {
        let x0 = minibatch(&data, d, cfg.pretrain.batch, &mut rng)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let loss = denoise_loss(&mut g, &model, &bound, &x0, 0, &schedule, &mut rng)?;
        let grads = g.backward(loss)?;
        model.accumulate_grads(&bound, &grads)?;
        opt.step(&mut model.params_mut());
        losses.push(g.scalar(loss)?);
    }
    model.set_trainable(|_| false);
    let prior_seed = derive(seed, &[PRIOR_SAMPLES]);
    let prior_data = sample(&model, 0, cfg.pretrain.prior_samples, &schedule, prior_seed, cfg.schedule.sample_stride)?;
    log::info!("pretrained seed {seed}: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(Pretrained { seed, model, prior_data, losses, seconds: start.elapsed().as_secs_f64() })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub method: MethodName,
    pub model: DenoiserModel,
    pub store: SnapshotStore,
    pub log: EventLog,
    pub report: MetricsReport,
    pub timings: Timings,
    pub fisher: Option<FisherState>,
    pub degeneracy: Vec<DegeneracyRecord>,
    /// Adapter in effect at the end of each task.
    pub task_adapters: Vec<LoraAdapter>,
    /// Training set of every task (index `n - 1`).
    pub datasets: Vec<Vec<f64>>,
}

struct RunState<'a> {
    cfg: &'a RunConfig,
    method: MethodName,
    seed: u64,
    schedule: Schedule,
    base: DenoiserModel,
    prior_data: &'a [f64],
    model: DenoiserModel,
    task_adapters: Vec<LoraAdapter>,
    fisher: Option<FisherState>,
    clora: Option<CloraState>,
    log: EventLog,
    timings: Timings,
}

/// Names of the parameters trained for task `n` under `method`.
fn trainable_names(model: &DenoiserModel, method: MethodName, n: usize) -> Vec<String> {
    let mut names = vec![ConceptEmbedding::row_name(n)];
    match method {
        MethodName::TiEmbeddingOnly => {}
        MethodName::KvFullSequential => {
            names.push(model.key.name.clone());
            names.push(model.value.name.clone());
        }
        _ => {
            if let Some(a) = model.active_adapter() {
                names.extend(a.params().iter().map(|p| p.name.clone()));
            }
        }
    }
    names
}

impl RunState<'_> {
    fn prepare_task(&mut self, n: usize, rng: &mut LabRng) -> Result<()> {
        let id = self.model.add_concept(rng);
        debug_assert_eq!(id, n);
        let (cfg, rank) = (&self.model.config.clone(), self.cfg.train.rank);
        match self.method {
            MethodName::TiEmbeddingOnly | MethodName::KvFullSequential => {}
            MethodName::LoraMerge => {
                let fresh = LoraAdapter::new("lora", n, rank, cfg, rng);
                self.model.attach_adapter(fresh, AdapterMode::ReplaceEffective)?;
            }
            MethodName::Clora => {
                let fresh = LoraAdapter::new(&format!("lora.{n}"), n, rank, cfg, rng);
                self.model.attach_adapter(fresh, AdapterMode::Stack)?;
            }
            _ => {
                if let Some(prev) = self.model.active_adapter_mut() {
                    prev.task_id = n;
                } else {
                    let fresh = LoraAdapter::new("lora", n, rank, cfg, rng);
                    self.model.attach_adapter(fresh, AdapterMode::ReplaceEffective)?;
                }
            }
        }
        let names = trainable_names(&self.model, self.method, n);
        self.model.set_trainable(|name| names.iter().any(|t| t == name));
        Ok(())
    }

    fn train_task(&mut self, n: usize, data: &[f64], rng: &mut LabRng) -> Result<()> {
        let start = Instant::now();
        let d = self.model.config.data_dim;
        let tc = &self.cfg.train;
        let mut opt = tc.optimizer.build();
        let use_fisher = self.method.uses_ewc() && n > 1;
        for it in 0..tc.iterations {
            let x0 = minibatch(data, d, tc.batch, rng)?;
            let prior = minibatch(self.prior_data, d, tc.batch, rng)?;
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g)?;
            let task_loss = denoise_loss(&mut g, &self.model, &bound, &x0, n, &self.schedule, rng)?;
            let prior_loss = denoise_loss(&mut g, &self.model, &bound, &prior, 0, &self.schedule, rng)?;
            let weighted_prior = g.scale(prior_loss, tc.prior_weight);
            let mut loss = g.add(task_loss, weighted_prior)?;
            let mut values = vec![("denoise", g.scalar(task_loss)?), ("prior", g.scalar(prior_loss)?)];
            if use_fisher {
                if let Some(penalty) = fisher_penalty(&mut g, self.fisher.as_ref().unwrap(), &self.model, &bound)? {
                    values.push(("ewc_penalty", g.scalar(penalty)?));
                    loss = g.add(loss, penalty)?;
                }
            }
            if let Some(state) = self.clora.as_mut() {
                let current = self.model.active_adapter().unwrap();
                let forget = clora_forget_current(state, current)?;
                state.log_degeneracy(it, n, current, forget);
                values.push(("forget", forget));
                values.push(("adapter_norm", adapter_norm(current)));
                if let Some(term) = clora_forget_loss(&mut g, state, &self.model, &bound)? {
                    let term = g.scale(term, self.cfg.clora.coefficient);
                    loss = g.add(loss, term)?;
                }
            }
            values.push(("loss", g.scalar(loss)?));
            let grads = g.backward(loss)?;
            self.model.accumulate_grads(&bound, &grads)?;
            opt.step(&mut self.model.params_mut());
            self.log.push(n, Phase::Train, it, &values);
        }
        self.model.embedding.freeze(n);
        self.model.set_trainable(|_| false);
        self.timings.add("train", start.elapsed().as_secs_f64(), tc.iterations);
        Ok(())
    }

    fn consolidate(&mut self, n: usize, data: &[f64], rng: &mut LabRng) -> Result<()> {
        let start = Instant::now();
        let previous: Vec<DenoiserModel> = self.task_adapters[..n - 1]
            .iter()
            .map(|a| {
                let mut m = self.model.clone_frozen();
                m.adapters = vec![a.clone()];
                m.set_trainable(|_| false);
                m
            })
            .collect();
        let iterations = self.cfg.dsc_iterations();
        let run = DscRun { cfg: &self.cfg.dsc, iterations, schedule: &self.schedule, rank: self.cfg.train.rank };
        let mut opt = self.cfg.train.optimizer.build();
        let out = run_dsc(&self.model, &previous, data, n, &run, opt.as_mut(), rng)?;
        for (it, (loss, j)) in out.losses.iter().zip(&out.second_teachers).enumerate() {
            self.log.push(n, Phase::Dsc, it, &[("loss", *loss), ("second_teacher", *j as f64)]);
        }
        self.model = out.student;
        self.model.set_trainable(|_| false);
        self.log.push(n, Phase::Replace, 0, &[("adapter_norm", adapter_norm(self.model.active_adapter().unwrap()))]);
        self.timings.add("dsc", start.elapsed().as_secs_f64(), iterations);
        Ok(())
    }

    fn update_fisher(&mut self, n: usize, data: &[f64], rng: &mut LabRng) -> Result<()> {
        let start = Instant::now();
        let dc = &self.cfg.dc;
        let pass = FisherPass {
            iterations: self.cfg.ewc_iterations(),
            batch: self.cfg.ewc.batch,
            k: dc.k,
            delta: if self.method.uses_dc_fisher() { dc.delta } else { 0.0 },
            tau: dc.tau,
        };
        let state = self.fisher.as_mut().unwrap();
        accumulate_fisher(state, &self.model, data, n, pass, &self.schedule, rng)?;
        let mass = state.total_mass();
        self.log.push(n, Phase::FimUpdate, 0, &[("fisher_mass", mass)]);
        self.timings.add("fim-update", start.elapsed().as_secs_f64(), pass.iterations);
        Ok(())
    }

    fn snapshot(&mut self, n: usize, store: &mut SnapshotStore) -> Result<()> {
        let start = Instant::now();
        let count = self.cfg.sequence.snapshot_points;
        for j in 1..=n {
            let seed = derive(self.seed, &[SNAPSHOT, n as u64, j as u64]);
            let points = sample(&self.model, j, count, &self.schedule, seed, self.cfg.schedule.sample_stride)?;
            store.insert(n, j, points)?;
            self.log.push(n, Phase::Snapshot, j, &[("target_mmd", store.target_mmd(n, j)?)]);
        }
        self.timings.add("snapshot", start.elapsed().as_secs_f64(), n);
        Ok(())
    }
}

/// Target sample set `X_{D,j}` for task `j` (drawn independently of the training set).
pub fn target_set(cfg: &RunConfig, j: usize) -> Result<Vec<f64>> {
    let spec = &cfg.sequence.tasks[j - 1];
    generate(spec, cfg.sequence.snapshot_points, &mut seeded(derive(spec.seed, &[TARGET])))
}

/// Runs the whole task sequence for one method and seed on top of `base`.
pub fn run_sequence(cfg: &RunConfig, base: &Pretrained) -> Result<RunOutput> {
    let seed = base.seed;
    let method = cfg.method;
    let schedule = cfg.schedule.build()?;
    let d = cfg.model.data_dim;
    let datasets: Vec<Vec<f64>> =
        cfg.sequence.tasks.iter().map(|s| s.dataset(cfg.sequence.train_points)).collect::<Result<_>>()?;
    let mut store = SnapshotStore::new(d);
    for j in 1..=cfg.sequence.tasks.len() {
        store.set_target(j, target_set(cfg, j)?)?;
    }
    let mut state = RunState {
        cfg,
        method,
        seed,
        schedule,
        base: base.model.clone(),
        prior_data: &base.prior_data,
        model: base.model.clone(),
        task_adapters: Vec::new(),
        fisher: if method.uses_ewc() { Some(FisherState::new(cfg.ewc.decay, cfg.ewc.rho)?) } else { None },
        clora: (method == MethodName::Clora).then(|| CloraState::new(cfg.clora.coefficient)),
        log: EventLog::default(),
        timings: Timings::default(),
    };
    state.timings.add("pretrain", base.seconds, cfg.pretrain.iterations);
    let mut report = MetricsReport::default();
    for (idx, data) in datasets.iter().enumerate() {
        let n = idx + 1;
        // Initialization and training streams are shared by all methods, so a
        // comparison between methods is not masked by seed-to-seed noise.
        let mut init_rng = seeded(derive(seed, &[INIT, n as u64]));
        let mut rng = seeded(derive(seed, &[TASK, n as u64]));
        if method == MethodName::LoraMerge {
            // every merged adapter is trained on its own from W_init
            let embedding = state.model.embedding.clone();
            state.model = state.base.clone();
            state.model.embedding = embedding;
        }
        state.prepare_task(n, &mut init_rng)?;
        state.train_task(n, data, &mut rng)?;
        if method.uses_dsc() && n >= 2 {
            state.consolidate(n, data, &mut rng)?;
        }
        if method == MethodName::LoraMerge {
            state.task_adapters.push(state.model.active_adapter().unwrap().clone());
            let weights = vec![1.0 / n as f64; n];
            let merged = merge_adapters(&state.task_adapters, &weights)?;
            state.model.adapters.clear();
            state.model.attach_adapter(merged, AdapterMode::ReplaceEffective)?;
            state.model.set_trainable(|_| false);
            state.log.push(n, Phase::Replace, 0, &[("merged_adapters", n as f64)]);
        } else if let Some(active) = state.model.active_adapter() {
            state.task_adapters.push(active.clone());
        }
        if let Some(clora) = state.clora.as_mut() {
            clora.adapters.push(state.model.active_adapter().unwrap().clone());
        }
        if method.uses_ewc() {
            state.update_fisher(n, data, &mut rng)?;
        }
        state.snapshot(n, &mut store)?;
        report.push_boundary(&store, n, seed, method.as_str())?;
        log::info!("{method} seed {seed}: task {n} a_mmd {:.4}", report.value(n, "a_mmd").unwrap_or(f64::NAN));
    }
    if cfg.metrics.dc_accuracy_points > 0 {
        let start = Instant::now();
        let last = datasets.len();
        let points = cfg.sequence.train_points.min(cfg.metrics.dc_accuracy_points);
        let concepts: Vec<usize> = (1..=last).collect();
        let mut rng = seeded(derive(seed, &[ACCURACY]));
        let acc = dc_accuracy(
            &state.model,
            &[(1, &datasets[0][..points * d])],
            &concepts,
            cfg.metrics.dc_accuracy_trials,
            &state.schedule,
            &mut rng,
        )?;
        report.push(last, "dc_accuracy_task1", acc, seed, method.as_str());
        state.timings.add("dc-accuracy", start.elapsed().as_secs_f64(), points);
    }
    let RunState { model, task_adapters, fisher, clora, log, timings, .. } = state;
    Ok(RunOutput {
        seed,
        method,
        model,
        store,
        log,
        report,
        timings,
        fisher,
        degeneracy: clora.map(|c| c.logs).unwrap_or_default(),
        task_adapters,
        datasets,
    })
}
