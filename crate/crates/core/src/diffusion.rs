//! Noise schedule, forward corruption, denoising loss and ancestral sampling.

use crate::error::{Error, Result};
use crate::model::{Bound, DenoiserModel};
use crate::rng::{normals, substream, LabRng};
use crate::scalar::Scalar;
use crate::tensor::Var;
use crate::Graph;
use rand::Rng;

/// Variance schedule with timesteps `1..=T` stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    pub steps: usize,
    pub beta: Vec<S>,
    pub alpha: Vec<S>,
    pub alpha_bar: Vec<S>,
    /// `β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)` with `ᾱ_0 = 1`.
    pub posterior_var: Vec<S>,
}

pub type Schedule = NoiseSchedule<f64>;

/// Linear `β` schedule from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule<S: Scalar>(steps: usize, beta_start: S, beta_end: S) -> Result<NoiseSchedule<S>> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_start > S::zero() && beta_start <= beta_end && beta_end < S::one()) {
        return Err(Error::Domain(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta: Vec<S> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                let f = S::from_usize(i).unwrap() / S::from_usize(steps - 1).unwrap();
                beta_start + (beta_end - beta_start) * f
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn from_betas(beta: Vec<S>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > S::zero() && b < S::one())) {
            return Err(Error::Domain("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = S::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { S::one() } else { alpha_bar[i - 1] };
                beta[i] * (S::one() - prev) / (S::one() - alpha_bar[i])
            })
            .collect();
        Ok(Self { steps: beta.len(), beta, alpha, alpha_bar, posterior_var })
    }

    /// `ᾱ_t` for `t` in `0..=T` (`ᾱ_0 = 1`).
    pub fn alpha_bar_at(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// `x_t = sqrt(ᾱ_t) x_0 + sqrt(1 - ᾱ_t) ε`.
    pub fn forward_noise(&self, x0: &[S], t: usize, eps: &[S]) -> Result<Vec<S>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Dimension(format!("x0 has {} entries, eps {}", x0.len(), eps.len())));
        }
        let ab = self.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// Decreasing timesteps visited by a sampler that skips `stride - 1` steps at a time.
    pub fn respaced(&self, stride: usize) -> Result<Vec<usize>> {
        if stride == 0 || stride > self.steps {
            return Err(Error::Domain(format!("stride {stride} for a {}-step schedule", self.steps)));
        }
        Ok((1..=self.steps).rev().step_by(stride).collect())
    }
}

/// Anything that predicts noise for a batch of noisy points.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    /// `x_t` is row-major `[len(concepts) x data_dim]`.
    fn predict_noise(&self, x_t: &[f64], concepts: &[usize], t: &[usize]) -> Result<Vec<f64>>;
}

impl NoisePredictor for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_noise(&self, x_t: &[f64], concepts: &[usize], t: &[usize]) -> Result<Vec<f64>> {
        self.predict_batch(x_t, concepts, t)
    }
}

/// One Monte-Carlo draw per row: a timestep and a noise vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    /// `t ~ U[1, T]`, `ε ~ N(0, I)` for each of `rows` points.
    pub fn sample(rows: usize, dim: usize, schedule: &Schedule, rng: &mut LabRng) -> Self {
        let t = (0..rows).map(|_| rng.random_range(1..=schedule.steps)).collect();
        Self { t, eps: normals(rng, rows * dim) }
    }

    /// Noisy inputs for the row-major batch `x0`.
    pub fn noisy(&self, x0: &[f64], schedule: &Schedule) -> Result<Vec<f64>> {
        let d = self.eps.len() / self.t.len();
        let mut out = Vec::with_capacity(x0.len());
        for (i, &t) in self.t.iter().enumerate() {
            out.extend(schedule.forward_noise(&x0[i * d..(i + 1) * d], t, &self.eps[i * d..(i + 1) * d])?);
        }
        Ok(out)
    }
}

/// Per-row `‖ε - ε_θ(x_t, c, t)‖²` as a differentiable `[B x 1]` column.
pub fn denoise_losses(
    g: &mut Graph,
    model: &DenoiserModel,
    bound: &Bound,
    x0: &[f64],
    concepts: &[usize],
    draw: &NoiseDraw,
    schedule: &Schedule,
) -> Result<Var> {
    let d = model.config.data_dim;
    let b = concepts.len();
    if x0.len() != b * d || draw.t.len() != b {
        return Err(Error::Dimension(format!("denoise loss on {} values for {b} rows", x0.len())));
    }
    let x_t = g.constant(b, d, draw.noisy(x0, schedule)?)?;
    let eps = g.constant(b, d, draw.eps.clone())?;
    let pred = model.forward(g, bound, x_t, concepts, &draw.t)?;
    g.row_sq_dist(eps, pred)
}

/// Batch-mean denoising loss with a fresh `(t, ε)` draw, as a scalar node.
pub fn denoise_loss(
    g: &mut Graph,
    model: &DenoiserModel,
    bound: &Bound,
    x0: &[f64],
    concept: usize,
    schedule: &Schedule,
    rng: &mut LabRng,
) -> Result<Var> {
    let d = model.config.data_dim;
    let rows = x0.len() / d;
    let draw = NoiseDraw::sample(rows, d, schedule, rng);
    let per_row = denoise_losses(g, model, bound, x0, &vec![concept; rows], &draw, schedule)?;
    Ok(g.mean(per_row))
}

/// Non-differentiable per-row denoising losses for any predictor.
pub fn denoise_loss_values(
    predictor: &impl NoisePredictor,
    x0: &[f64],
    concepts: &[usize],
    draw: &NoiseDraw,
    schedule: &Schedule,
) -> Result<Vec<f64>> {
    let d = predictor.data_dim();
    let x_t = draw.noisy(x0, schedule)?;
    let pred = predictor.predict_noise(&x_t, concepts, &draw.t)?;
    Ok(pred
        .chunks(d)
        .zip(draw.eps.chunks(d))
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// Ancestral sampling of `n` points for one concept.
///
/// Trajectory `i` draws all of its noise from `substream(seed, i)`, so the
/// result does not depend on how trajectories are batched. With `stride > 1`
/// the reverse chain visits `T, T - stride, ...` using the respaced posterior
/// `β' = 1 - ᾱ_t / ᾱ_prev`.
pub fn sample(
    predictor: &impl NoisePredictor,
    concept: usize,
    n: usize,
    schedule: &Schedule,
    seed: u64,
    stride: usize,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Domain("sample count must be >= 1".into()));
    }
    let d = predictor.data_dim();
    let steps = schedule.respaced(stride)?;
    let mut rngs: Vec<LabRng> = (0..n as u64).map(|i| substream(seed, i)).collect();
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| normals(r, d)).collect();
    let concepts = vec![concept; n];
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        let ab_t = schedule.alpha_bar_at(t);
        let ab_prev = schedule.alpha_bar_at(prev);
        let beta = 1.0 - ab_t / ab_prev;
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let eps = predictor.predict_noise(&x, &concepts, &vec![t; n])?;
        for (row, rng) in rngs.iter_mut().enumerate() {
            let z = if prev > 0 { normals(rng, d) } else { vec![0.0; d] };
            for k in 0..d {
                let idx = row * d + k;
                let x0_hat = (x[idx] - (1.0 - ab_t).sqrt() * eps[idx]) / ab_t.sqrt();
                x[idx] = if prev == 0 { x0_hat } else { c_x0 * x0_hat + c_xt * x[idx] + var.sqrt() * z[k] };
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ancestral sampling".into()));
    }
    Ok(x)
}
