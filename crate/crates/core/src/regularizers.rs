//! Parameter-space consolidation: online EWC whose Fisher is estimated from a
//! DC-augmented loss, and the C-LoRA self-regularization baseline.

use crate::dcscores::{get_dcs, ConceptSubset};
use crate::diffusion::{NoiseDraw, Schedule};
use crate::error::{Error, Result};
use crate::model::{Bound, DenoiserModel, LoraAdapter};
use crate::rng::LabRng;
use crate::tensor::Var;
use crate::{Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// EWC consolidation loss for a batch of current-task points:
///
/// `Σ_{c_i ∈ subset} [ L_denoise(c_i) + δ · s_i · H(onehot(i), p) ]`
///
/// with `s_i = +1` for the current concept `n`, `-1` otherwise, averaged over
/// the batch. All concepts share one `(t, ε)` draw per row.
#[allow(clippy::too_many_arguments)]
pub fn ewc_loss(
    g: &mut Graph,
    model: &DenoiserModel,
    bound: &Bound,
    x0: &[f64],
    n: usize,
    subset: &ConceptSubset,
    schedule: &Schedule,
    delta: f64,
    draw: &NoiseDraw,
    tau: f64,
) -> Result<Var> {
    if delta < 0.0 {
        return Err(Error::Domain(format!("delta must be >= 0, got {delta}")));
    }
    let b = draw.t.len();
    let x_t = draw.noisy(x0, schedule)?;
    let dcs = get_dcs(g, model, bound, n, &draw.eps, &draw.t, &x_t, subset, tau)?;
    let denoise = g.sum(dcs.losses);
    let total = if delta > 0.0 {
        let signs: Vec<f64> = subset.ids.iter().map(|&c| if c == n { 1.0 } else { -1.0 }).collect();
        let signs = g.constant(b, subset.len(), signs.repeat(b))?;
        let ce = g.cross_entropy_rows(signs, dcs.probs)?;
        let dc = g.sum(ce);
        let dc = g.scale(dc, delta);
        g.add(denoise, dc)?
    } else {
        denoise
    };
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Task-shared diagonal Fisher and the anchor parameters it protects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherState {
    pub fisher: BTreeMap<String, Vec<f64>>,
    pub anchor: BTreeMap<String, Vec<f64>>,
    pub decay: f64,
    pub rho: f64,
}

impl FisherState {
    pub fn new(decay: f64, rho: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Domain(format!("fisher decay must be in (0, 1], got {decay}")));
        }
        Ok(Self { fisher: BTreeMap::new(), anchor: BTreeMap::new(), decay, rho })
    }

    /// Online update `F ← decay · F + F_new`; the anchor becomes `params`.
    pub fn absorb(&mut self, fresh: BTreeMap<String, Vec<f64>>, params: BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, f_new) in fresh {
            if f_new.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::Contract(format!("fisher for {name} must be finite and non-negative")));
            }
            match self.fisher.get_mut(&name) {
                Some(old) if old.len() == f_new.len() => {
                    old.iter_mut().zip(&f_new).for_each(|(o, &f)| *o = self.decay * *o + f);
                }
                Some(_) => return Err(Error::Dimension(format!("fisher for {name} changed size"))),
                None => {
                    self.fisher.insert(name, f_new);
                }
            }
        }
        for name in self.fisher.keys() {
            if !params.contains_key(name) {
                return Err(Error::Contract(format!("no anchor value for {name}")));
            }
        }
        self.anchor = params;
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.fisher.values().flatten().sum()
    }
}

/// Running mean of squared gradients.
#[derive(Debug, Clone, Default)]
pub struct FisherAccumulator {
    sums: BTreeMap<String, Vec<f64>>,
    count: usize,
}

impl FisherAccumulator {
    /// Adds one minibatch gradient, keyed by parameter name.
    pub fn add(&mut self, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads {
            let acc = self.sums.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v * v);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> BTreeMap<String, Vec<f64>> {
        let c = self.count.max(1) as f64;
        self.sums.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x / c).collect())).collect()
    }
}

/// Names covered by the Fisher: the active adapter and the current concept's row.
pub fn fisher_targets(model: &DenoiserModel, n: usize) -> Vec<String> {
    let mut names: Vec<String> = model
        .active_adapter()
        .map(|a| a.params().iter().map(|p| p.name.clone()).collect())
        .unwrap_or_default();
    if n < model.embedding.rows.len() {
        names.push(crate::model::ConceptEmbedding::row_name(n));
    }
    names
}

/// Settings for one Fisher estimation pass.
#[derive(Debug, Clone, Copy)]
pub struct FisherPass {
    pub iterations: usize,
    pub batch: usize,
    pub k: usize,
    pub delta: f64,
    pub tau: f64,
}

/// Per-minibatch gradients of the EWC loss with respect to `targets`.
///
/// The model is copied and only `targets` are made differentiable, so frozen
/// rows still receive a gradient without the real model being touched.
pub fn ewc_gradients(
    model: &DenoiserModel,
    targets: &[String],
    dataset: &[f64],
    n: usize,
    pass: FisherPass,
    schedule: &Schedule,
    rng: &mut LabRng,
    mut visit: impl FnMut(BTreeMap<String, Vec<f64>>) -> Result<()>,
) -> Result<()> {
    let d = model.config.data_dim;
    let points = dataset.len() / d;
    if points == 0 {
        return Err(Error::Contract("fisher estimation on an empty dataset".into()));
    }
    let mut scratch = model.clone();
    for p in scratch.params_mut() {
        p.tensor.requires_grad = targets.contains(&p.name);
        p.tensor.zero_grad();
    }
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..pass.iterations {
        let mut idx = Vec::with_capacity(pass.batch);
        while idx.len() < pass.batch {
            if order.is_empty() {
                order = (0..points).collect();
                order.shuffle(rng);
            }
            idx.push(order.pop().unwrap());
        }
        let x0: Vec<f64> = idx.iter().flat_map(|&i| dataset[i * d..(i + 1) * d].iter().copied()).collect();
        let subset = crate::dcscores::sample_subset(n, pass.k, rng)?;
        let draw = NoiseDraw::sample(idx.len(), d, schedule, rng);
        let mut g = Graph::new();
        let bound = scratch.bind(&mut g)?;
        let loss = ewc_loss(&mut g, &scratch, &bound, &x0, n, &subset, schedule, pass.delta, &draw, pass.tau)?;
        let grads = g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (i, p) in scratch.params().iter().enumerate() {
            if p.is_trainable() {
                let gv = grads.get(bound.param_var(i)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.len()]);
                out.insert(p.name.clone(), gv);
            }
        }
        visit(out)?;
    }
    Ok(())
}

/// Estimates `F_new` as the mean squared EWC-loss gradient over the pass,
/// folds it into `state`, and re-anchors at the model's current parameters.
pub fn accumulate_fisher(
    state: &mut FisherState,
    model: &DenoiserModel,
    dataset: &[f64],
    n: usize,
    pass: FisherPass,
    schedule: &Schedule,
    rng: &mut LabRng,
) -> Result<()> {
    let targets = fisher_targets(model, n);
    let mut acc = FisherAccumulator::default();
    ewc_gradients(model, &targets, dataset, n, pass, schedule, rng, |g| {
        acc.add(&g);
        Ok(())
    })?;
    let anchor = targets
        .iter()
        .filter_map(|name| model.param(name).map(|p| (name.clone(), p.values().to_vec())))
        .chain(state.fisher.keys().filter(|k| !targets.contains(k)).filter_map(|name| {
            model.param(name).map(|p| (name.clone(), p.values().to_vec()))
        }))
        .collect();
    state.absorb(acc.mean(), anchor)
}

/// `(ρ/2) Σ_p Σ_i F[p]_i (θ[p]_i - θ*[p]_i)²` over every parameter in the Fisher.
pub fn fisher_penalty(g: &mut Graph, state: &FisherState, model: &DenoiserModel, bound: &Bound) -> Result<Option<Var>> {
    let params = model.params();
    let mut total: Option<Var> = None;
    for (name, f) in &state.fisher {
        let anchor = state
            .anchor
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing anchor for {name}")))?;
        let i = params
            .iter()
            .position(|p| &p.name == name)
            .ok_or_else(|| Error::Contract(format!("fisher parameter {name} not in model")))?;
        let (r, c) = params[i].tensor.dims2();
        if anchor.len() != r * c || f.len() != r * c {
            return Err(Error::Dimension(format!("fisher/anchor for {name} do not match the parameter")));
        }
        let theta = bound.param_var(i);
        let star = g.constant(r, c, anchor.clone())?;
        let w = g.constant(r, c, f.clone())?;
        let diff = g.sub(theta, star)?;
        let sq = g.square(diff);
        let weighted = g.mul(sq, w)?;
        let s = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| g.scale(t, state.rho / 2.0)))
}

/// Value of the Fisher penalty without a graph.
pub fn fisher_penalty_value(state: &FisherState, params: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
    let mut total = 0.0;
    for (name, f) in &state.fisher {
        let anchor = state.anchor.get(name).ok_or_else(|| Error::Contract(format!("missing anchor for {name}")))?;
        let theta = params.get(name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        total += f.iter().zip(theta).zip(anchor).map(|((f, t), a)| f * (t - a) * (t - a)).sum::<f64>();
    }
    Ok(state.rho / 2.0 * total)
}

/// One row of the C-LoRA degeneracy trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyRecord {
    pub iteration: usize,
    pub task: usize,
    /// `‖A_i B_i‖_F` for every task adapter `i = 1..=task` (key and value layers stacked).
    pub norms: Vec<f64>,
    pub forget: f64,
}

/// Frozen per-task adapters and the self-regularization trace.
#[derive(Debug, Clone, Default)]
pub struct CloraState {
    pub adapters: Vec<LoraAdapter>,
    pub coefficient: f64,
    pub logs: Vec<DegeneracyRecord>,
}

impl CloraState {
    pub fn new(coefficient: f64) -> Self {
        Self { adapters: Vec::new(), coefficient, logs: Vec::new() }
    }

    /// `(|Σ A_i B_i|_K, |Σ A_i B_i|_V)` over the frozen adapters, if any.
    pub fn past_abs(&self) -> Option<(Tensor, Tensor)> {
        let first = self.adapters.first()?;
        let (mut k, mut v) = first.products();
        for a in &self.adapters[1..] {
            let (pk, pv) = a.products();
            k.values_mut().iter_mut().zip(pk.values()).for_each(|(x, y)| *x += y);
            v.values_mut().iter_mut().zip(pv.values()).for_each(|(x, y)| *x += y);
        }
        k.values_mut().iter_mut().for_each(|x| *x = x.abs());
        v.values_mut().iter_mut().for_each(|x| *x = x.abs());
        Some((k, v))
    }

    /// Appends one trace row.
    pub fn log_degeneracy(&mut self, iteration: usize, task: usize, current: &LoraAdapter, forget: f64) {
        let mut norms: Vec<f64> = self.adapters.iter().map(adapter_norm).collect();
        norms.push(adapter_norm(current));
        self.logs.push(DegeneracyRecord { iteration, task, norms, forget });
    }
}

/// Frobenius norm of the adapter's key and value products taken together.
pub fn adapter_norm(a: &LoraAdapter) -> f64 {
    let (k, v) = a.products();
    k.values().iter().chain(v.values()).map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖ |past| ⊙ current ‖²_F` for one layer.
pub fn clora_forget_value(past_abs: &Tensor, current: &Tensor) -> Result<f64> {
    if past_abs.shape() != current.shape() {
        return Err(Error::Dimension("forget loss operands differ in shape".into()));
    }
    Ok(past_abs.values().iter().zip(current.values()).map(|(p, c)| (p.abs() * c).powi(2)).sum())
}

/// Differentiable C-LoRA forget loss of the active adapter against every frozen
/// one, summed over the key and value layers. Zero when no adapter is frozen.
pub fn clora_forget_loss(g: &mut Graph, state: &CloraState, model: &DenoiserModel, bound: &Bound) -> Result<Option<Var>> {
    let Some((pk, pv)) = state.past_abs() else { return Ok(None) };
    let params = model.params();
    let active = model.active_adapter().ok_or_else(|| Error::Contract("no active adapter".into()))?;
    let idx = |name: &str| {
        params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("adapter parameter {name} not in model")))
    };
    let mut total = None;
    for (pair, past) in [(&active.key, &pk), (&active.value, &pv)] {
        let a = bound.param_var(idx(&pair.a.name)?);
        let b = bound.param_var(idx(&pair.b.name)?);
        let prod = g.matmul(a, b)?;
        let (r, c) = past.dims2();
        let mask = g.constant(r, c, past.values().to_vec())?;
        let masked = g.mul(mask, prod)?;
        let sq = g.square(masked);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total)
}

/// Current value of the forget loss (no graph).
pub fn clora_forget_current(state: &CloraState, current: &LoraAdapter) -> Result<f64> {
    let Some((pk, pv)) = state.past_abs() else { return Ok(0.0) };
    let (ck, cv) = current.products();
    Ok(clora_forget_value(&pk, &ck)? + clora_forget_value(&pv, &cv)?)
}
