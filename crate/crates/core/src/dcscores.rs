//! Diffusion-classifier (DC) scores: class posteriors from the softmax of
//! negated class-conditional denoising losses.

use crate::diffusion::{denoise_loss_values, NoiseDraw, NoisePredictor, Schedule};
use crate::error::{Error, Result};
use crate::model::{Bound, DenoiserModel};
use crate::rng::LabRng;
use crate::tensor::{softmax, Var};
use crate::Graph;
use rand::seq::index;

/// Score assigned to concepts outside the evaluated subset.
pub const DUMMY_SCORE: f64 = 1e-10;

/// Concepts evaluated for one DC-score computation, sorted ascending.
/// Always holds the prior concept 0 and the current concept `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptSubset {
    pub ids: Vec<usize>,
    pub k: usize,
}

impl ConceptSubset {
    pub fn new(mut ids: Vec<usize>, k: usize) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::Contract("empty concept subset".into()));
        }
        Ok(Self { ids, k })
    }

    /// Every concept `0..=n`.
    pub fn all(n: usize) -> Self {
        Self { ids: (0..=n).collect(), k: n + 1 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&c| c == id)
    }
}

/// `{0, n}` plus `min(k - 2, n - 1)` distinct concepts drawn without replacement from `1..n`.
pub fn sample_subset(n: usize, k: usize, rng: &mut LabRng) -> Result<ConceptSubset> {
    if k < 2 {
        return Err(Error::Domain(format!("DC scores need k >= 2 concepts, got {k}")));
    }
    if n == 0 {
        return Err(Error::Domain("subset needs a current concept n >= 1".into()));
    }
    let previous = n - 1;
    let extra = (k - 2).min(previous);
    let mut ids = vec![0, n];
    ids.extend(index::sample(rng, previous, extra).into_iter().map(|i| i + 1));
    ConceptSubset::new(ids, k)
}

/// Dense DC scores over every seen concept `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DcScores {
    pub scores: Vec<f64>,
    pub sampled: ConceptSubset,
}

impl DcScores {
    /// Fills subset positions from `probs` (aligned with `subset.ids`) and the rest with [`DUMMY_SCORE`].
    pub fn from_subset(n: usize, subset: &ConceptSubset, probs: &[f64]) -> Result<Self> {
        if probs.len() != subset.len() {
            return Err(Error::Dimension(format!("{} scores for {} concepts", probs.len(), subset.len())));
        }
        let mut scores = vec![DUMMY_SCORE; n + 1];
        for (&c, &p) in subset.ids.iter().zip(probs) {
            *scores.get_mut(c).ok_or(Error::Lookup { id: c, seen: n })? = p;
        }
        Ok(Self { scores, sampled: subset.clone() })
    }

    pub fn argmax(&self) -> usize {
        self.sampled
            .ids
            .iter()
            .copied()
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if self.scores[b] >= self.scores[c] => Some(b),
                _ => Some(c),
            })
            .unwrap()
    }
}

/// DC scores from per-concept denoising losses (aligned with `subset.ids`).
pub fn dc_scores(n: usize, losses: &[f64], subset: &ConceptSubset, tau: f64) -> Result<DcScores> {
    if subset.is_empty() {
        return Err(Error::Contract("empty concept subset".into()));
    }
    let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
    DcScores::from_subset(n, subset, &softmax(&neg, tau)?)
}

/// Differentiable outputs of one DC-score computation over a batch of `B` rows.
#[derive(Debug, Clone)]
pub struct DcsOutput {
    /// `[B x k]` denoising losses, columns aligned with the subset.
    pub losses: Var,
    /// `[B x k]` DC scores (row-wise softmax of `-losses / tau`).
    pub probs: Var,
    /// `[k·B x d]` predictions, concept-major: rows `j·B..(j+1)·B` belong to `subset.ids[j]`.
    pub preds: Var,
}

/// Denoising losses, DC scores and noise predictions of `model` for every
/// concept in `subset`, all evaluated on the same `(x_t, t, eps)`.
#[allow(clippy::too_many_arguments)]
pub fn get_dcs(
    g: &mut Graph,
    model: &DenoiserModel,
    bound: &Bound,
    n: usize,
    eps: &[f64],
    t: &[usize],
    x_t: &[f64],
    subset: &ConceptSubset,
    tau: f64,
) -> Result<DcsOutput> {
    if subset.is_empty() {
        return Err(Error::Contract("empty concept subset".into()));
    }
    if let Some(&bad) = subset.ids.iter().find(|&&c| c > n) {
        return Err(Error::Lookup { id: bad, seen: n });
    }
    let d = model.config.data_dim;
    let b = t.len();
    if x_t.len() != b * d || eps.len() != b * d {
        return Err(Error::Dimension("get_dcs inputs disagree with the timestep count".into()));
    }
    let k = subset.len();
    let xs: Vec<f64> = x_t.iter().copied().cycle().take(k * b * d).collect();
    let es: Vec<f64> = eps.iter().copied().cycle().take(k * b * d).collect();
    let ts: Vec<usize> = t.iter().copied().cycle().take(k * b).collect();
    let cs: Vec<usize> = subset.ids.iter().flat_map(|&c| std::iter::repeat_n(c, b)).collect();
    let x = g.constant(k * b, d, xs)?;
    let e = g.constant(k * b, d, es)?;
    let preds = model.forward(g, bound, x, &cs, &ts)?;
    let col = g.row_sq_dist(e, preds)?;
    let by_concept = g.reshape(col, k, b)?;
    let losses = g.transpose(by_concept);
    let neg = g.neg(losses);
    let probs = g.softmax(neg, tau)?;
    Ok(DcsOutput { losses, probs, preds })
}

/// Predicts the concept of each row of `x0` as the argmin (over `concepts`)
/// of the denoising loss averaged over `trials` Monte-Carlo draws.
///
/// Within a trial every concept sees the same `(t, ε)` pair.
pub fn classify(
    predictor: &impl NoisePredictor,
    x0: &[f64],
    concepts: &[usize],
    trials: usize,
    schedule: &Schedule,
    rng: &mut LabRng,
) -> Result<Vec<usize>> {
    if trials == 0 {
        return Err(Error::Domain("classify needs at least one trial".into()));
    }
    if concepts.is_empty() {
        return Err(Error::Contract("classify over no concepts".into()));
    }
    let d = predictor.data_dim();
    let b = x0.len() / d;
    let k = concepts.len();
    let mut total = vec![0.0; b * k];
    for _ in 0..trials {
        let draw = NoiseDraw::sample(b, d, schedule, rng);
        let shared = NoiseDraw {
            t: draw.t.iter().copied().cycle().take(b * k).collect(),
            eps: draw.eps.iter().copied().cycle().take(b * k * d).collect(),
        };
        let xs: Vec<f64> = x0.iter().copied().cycle().take(b * k * d).collect();
        let cs: Vec<usize> = concepts.iter().flat_map(|&c| std::iter::repeat_n(c, b)).collect();
        let losses = denoise_loss_values(predictor, &xs, &cs, &shared, schedule)?;
        for (j, chunk) in losses.chunks(b).enumerate() {
            for (i, l) in chunk.iter().enumerate() {
                total[i * k + j] += l;
            }
        }
    }
    Ok(total
        .chunks(k)
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &l)| if l < row[best] { j } else { best });
            concepts[best]
        })
        .collect())
}
