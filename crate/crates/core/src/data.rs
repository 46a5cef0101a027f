//! Synthetic planar concepts standing in for personalization datasets.

use crate::error::{Error, Result};
use crate::metrics::mmd2;
use crate::rng::{normal, seeded, LabRng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Smallest biased MMD² allowed between any two concepts of one sequence.
pub const MIN_SEPARATION: f64 = 0.05;

/// Point counts used by the separability check.
pub const SEPARATION_POINTS: usize = 400;

/// Distribution family of a concept. Every family adds isotropic Gaussian
/// jitter `sigma` to its noiseless shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    Ring {
        radius: f64,
        #[serde(default)]
        center: [f64; 2],
        sigma: f64,
    },
    /// Archimedean arms `r = radius · s`, angle `2π · turns · s`, for `s ~ U[0, 1]`.
    Spiral {
        arms: usize,
        turns: f64,
        radius: f64,
        #[serde(default)]
        center: [f64; 2],
        sigma: f64,
    },
    /// Uniform choice among the nodes of a `rows × cols` lattice.
    Grid {
        rows: usize,
        cols: usize,
        spacing: f64,
        #[serde(default)]
        center: [f64; 2],
        sigma: f64,
    },
    /// Half circle of `radius`, rotated by `angle` radians.
    Moon {
        radius: f64,
        #[serde(default)]
        center: [f64; 2],
        #[serde(default)]
        angle: f64,
        sigma: f64,
    },
    /// Equal-weight Gaussian blobs.
    BlobMixture { centers: Vec<[f64; 2]>, sigma: f64 },
}

/// One concept: a family plus the seed of its training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
}

impl ConceptSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        Self { family, seed }
    }

    /// Parses a spec, reporting unknown families and fields as config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match &self.family {
            Family::Ring { radius, sigma, .. } | Family::Moon { radius, sigma, .. } => {
                if *radius <= 0.0 || *sigma < 0.0 {
                    return bad("radius must be > 0 and sigma >= 0");
                }
            }
            Family::Spiral { arms, radius, sigma, .. } => {
                if *arms == 0 || *radius <= 0.0 || *sigma < 0.0 {
                    return bad("spiral needs arms >= 1, radius > 0, sigma >= 0");
                }
            }
            Family::Grid { rows, cols, sigma, .. } => {
                if *rows == 0 || *cols == 0 || *sigma < 0.0 {
                    return bad("grid needs rows, cols >= 1 and sigma >= 0");
                }
            }
            Family::BlobMixture { centers, sigma } => {
                if centers.is_empty() || *sigma < 0.0 {
                    return bad("blob mixture needs at least one center and sigma >= 0");
                }
            }
        }
        Ok(())
    }

    /// The concept's dataset of `n` points drawn from its own seed.
    pub fn dataset(&self, n: usize) -> Result<Vec<f64>> {
        generate(self, n, &mut seeded(self.seed))
    }
}

/// `n` i.i.d. points, row-major `[n x 2]`.
pub fn generate(spec: &ConceptSpec, n: usize, rng: &mut LabRng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Domain("cannot generate an empty sample set".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let ([x, y], sigma) = match &spec.family {
            Family::Ring { radius, center, sigma } => {
                let a = rng.random::<f64>() * 2.0 * PI;
                ([center[0] + radius * a.cos(), center[1] + radius * a.sin()], *sigma)
            }
            Family::Spiral { arms, turns, radius, center, sigma } => {
                let arm = rng.random_range(0..*arms);
                let s = rng.random::<f64>();
                let a = 2.0 * PI * (turns * s + arm as f64 / *arms as f64);
                let r = radius * s;
                ([center[0] + r * a.cos(), center[1] + r * a.sin()], *sigma)
            }
            Family::Grid { rows, cols, spacing, center, sigma } => {
                let i = rng.random_range(0..*rows) as f64 - (*rows as f64 - 1.0) / 2.0;
                let j = rng.random_range(0..*cols) as f64 - (*cols as f64 - 1.0) / 2.0;
                ([center[0] + spacing * j, center[1] + spacing * i], *sigma)
            }
            Family::Moon { radius, center, angle, sigma } => {
                let a = rng.random::<f64>() * PI + angle;
                ([center[0] + radius * a.cos(), center[1] + radius * a.sin()], *sigma)
            }
            Family::BlobMixture { centers, sigma } => {
                let c = centers[rng.random_range(0..centers.len())];
                (c, *sigma)
            }
        };
        out.push(x + sigma * normal(rng));
        out.push(y + sigma * normal(rng));
    }
    Ok(out)
}

/// `batch` rows drawn uniformly with replacement from a row-major set.
pub fn minibatch(points: &[f64], dim: usize, batch: usize, rng: &mut LabRng) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::Contract("minibatch from an empty dataset".into()));
    }
    let mut out = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        let i = rng.random_range(0..n);
        out.extend_from_slice(&points[i * dim..(i + 1) * dim]);
    }
    Ok(out)
}

/// Checks that every pair of concepts is at least [`MIN_SEPARATION`] apart in MMD².
pub fn check_separable(specs: &[ConceptSpec]) -> Result<()> {
    let sets: Vec<Vec<f64>> = specs.iter().map(|s| s.dataset(SEPARATION_POINTS)).collect::<Result<_>>()?;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            let m = mmd2(&sets[i], &sets[j], 2)?;
            if m < MIN_SEPARATION {
                return Err(Error::Config(format!(
                    "concepts {i} and {j} are too similar (mmd2 {m:.4} < {MIN_SEPARATION})"
                )));
            }
        }
    }
    Ok(())
}
