//! Diffusion scores consolidation: double distillation of the current-task
//! teacher and a randomly drawn previous-task teacher into one student.

use crate::data::minibatch;
use crate::dcscores::{get_dcs, ConceptSubset};
use crate::diffusion::{denoise_losses, NoiseDraw, Schedule};
use crate::error::{Error, Result};
use crate::model::{Bound, DenoiserModel, LoraAdapter};
use crate::rng::LabRng;
use crate::tensor::{Optimizer, Var};
use crate::Graph;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DscConfig {
    /// Weight of the DC-distribution distillation terms.
    pub gamma: f64,
    /// Weight of the noise-prediction matching terms.
    pub lambda: f64,
    pub teacher_tau: f64,
    pub student_tau: f64,
    /// `None` resolves to a fifth of the training iterations.
    pub iterations: Option<usize>,
    pub batch: usize,
    /// Drop the denoising and noise-matching terms, keeping only DC distillation.
    pub dc_only: bool,
    /// Always use the previous task as the second teacher.
    pub fixed_second_teacher: bool,
    /// Start the student from a fresh adapter instead of the current one.
    pub random_student_init: bool,
}

impl Default for DscConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: 1.5,
            teacher_tau: 0.05,
            student_tau: 1.0,
            iterations: None,
            batch: 8,
            dc_only: false,
            fixed_second_teacher: false,
            random_student_init: false,
        }
    }
}

impl DscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("dsc gamma and lambda must be >= 0".into()));
        }
        if !(self.teacher_tau > 0.0 && self.student_tau > 0.0) {
            return Err(Error::Config("dsc temperatures must be > 0".into()));
        }
        Ok(())
    }
}

/// Values of the individual loss terms of one iteration (batch means).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DscTerms {
    pub denoise: f64,
    pub dc_current: f64,
    pub dc_previous: f64,
    pub mse_current: f64,
    pub mse_previous: f64,
}

/// A built DSC loss node plus its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct DscStep {
    pub loss: Var,
    pub second_teacher: usize,
    pub terms: DscTerms,
}

/// Draws the id of the second teacher for task `n`: uniform over `1..n`.
pub fn sample_second_teacher(n: usize, cfg: &DscConfig, rng: &mut LabRng) -> Result<usize> {
    if n < 2 {
        return Err(Error::Contract(format!("consolidation at task {n} has no previous task")));
    }
    Ok(if cfg.fixed_second_teacher { n - 1 } else { rng.random_range(1..n) })
}

struct TeacherView {
    probs: Vec<f64>,
    preds: Vec<f64>,
}

fn teacher_view(
    teacher: &DenoiserModel,
    n: usize,
    draw: &NoiseDraw,
    x_t: &[f64],
    subset: &ConceptSubset,
    tau: f64,
) -> Result<TeacherView> {
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g)?;
    let out = get_dcs(&mut g, teacher, &bound, n, &draw.eps, &draw.t, x_t, subset, tau)?;
    Ok(TeacherView { probs: g.value(out.probs).to_vec(), preds: g.value(out.preds).to_vec() })
}

/// Builds the DSC loss for one minibatch `x0` of task `n` against teacher
/// `j`. Teachers are evaluated outside `g`, so no gradient reaches them.
#[allow(clippy::too_many_arguments)]
pub fn dsc_loss(
    g: &mut Graph,
    student: &DenoiserModel,
    bound: &Bound,
    teacher_n: &DenoiserModel,
    teacher_j: &DenoiserModel,
    j: usize,
    x0: &[f64],
    n: usize,
    schedule: &Schedule,
    cfg: &DscConfig,
    rng: &mut LabRng,
) -> Result<DscStep> {
    if n < 2 || j == 0 || j >= n {
        return Err(Error::Contract(format!("second teacher {j} is not a previous task of {n}")));
    }
    let d = student.config.data_dim;
    let b = x0.len() / d;
    let bf = b as f64;

    let draw = NoiseDraw::sample(b, d, schedule, rng);
    let per_row = denoise_losses(g, student, bound, x0, &vec![n; b], &draw, schedule)?;
    let denoise = g.sum(per_row);
    let denoise = g.scale(denoise, 1.0 / bf);

    let draw2 = NoiseDraw::sample(b, d, schedule, rng);
    let x_t2 = draw2.noisy(x0, schedule)?;
    let subset = ConceptSubset::new(vec![0, j, n], 3)?;
    let student_out = get_dcs(g, student, bound, n, &draw2.eps, &draw2.t, &x_t2, &subset, cfg.student_tau)?;
    let t_n = teacher_view(teacher_n, n, &draw2, &x_t2, &subset, cfg.teacher_tau)?;
    let t_j = teacher_view(teacher_j, n, &draw2, &x_t2, &subset, cfg.teacher_tau)?;

    let mut dc = Vec::new();
    let mut mse = Vec::new();
    for view in [&t_n, &t_j] {
        let target = g.constant(b, subset.len(), view.probs.clone())?;
        let ce = g.cross_entropy_rows(target, student_out.probs)?;
        let ce = g.sum(ce);
        dc.push(g.scale(ce, 1.0 / bf));
        let preds = g.constant(subset.len() * b, d, view.preds.clone())?;
        let sq = g.mse(student_out.preds, preds)?;
        mse.push(g.scale(sq, 1.0 / bf));
    }
    let terms = DscTerms {
        denoise: g.scalar(denoise)?,
        dc_current: g.scalar(dc[0])?,
        dc_previous: g.scalar(dc[1])?,
        mse_current: g.scalar(mse[0])?,
        mse_previous: g.scalar(mse[1])?,
    };
    let dc_sum = g.add(dc[0], dc[1])?;
    let dc_term = g.scale(dc_sum, cfg.gamma);
    let loss = if cfg.dc_only {
        dc_term
    } else {
        let mse_sum = g.add(mse[0], mse[1])?;
        let mse_term = g.scale(mse_sum, cfg.lambda);
        let distill = g.add(dc_term, mse_term)?;
        g.add(denoise, distill)?
    };
    Ok(DscStep { loss, second_teacher: j, terms })
}

/// Result of a consolidation run.
#[derive(Debug, Clone)]
pub struct DscOutcome {
    pub student: DenoiserModel,
    /// Second-teacher id drawn at every iteration.
    pub second_teachers: Vec<usize>,
    pub losses: Vec<f64>,
    pub initial_terms: Option<DscTerms>,
}

/// Settings shared by every consolidation iteration.
pub struct DscRun<'a> {
    pub cfg: &'a DscConfig,
    pub iterations: usize,
    pub schedule: &'a Schedule,
    pub rank: usize,
}

/// Consolidates task `n`. `source` is the model after training task `n` (it
/// becomes teacher 1 and the student's starting point); `previous[j - 1]` is
/// the model of task `j`. Only the student's active adapter is trained.
pub fn run_dsc(
    source: &DenoiserModel,
    previous: &[DenoiserModel],
    dataset: &[f64],
    n: usize,
    run: &DscRun<'_>,
    optimizer: &mut dyn Optimizer<f64>,
    rng: &mut LabRng,
) -> Result<DscOutcome> {
    if n < 2 {
        return Err(Error::Contract(format!("consolidation at task {n} has no previous task")));
    }
    if previous.len() < n - 1 {
        return Err(Error::Contract(format!("{} previous teachers for task {n}", previous.len())));
    }
    let d = source.config.data_dim;
    if dataset.len() < d {
        return Err(Error::Contract("consolidation on an empty dataset".into()));
    }
    let teacher_n = source.clone_frozen();
    let mut student = source.clone();
    if run.cfg.random_student_init {
        let prefix = student
            .active_adapter()
            .map(|a| a.prefix.clone())
            .ok_or_else(|| Error::Contract("student has no adapter".into()))?;
        let fresh = LoraAdapter::new(&prefix, n, run.rank, &student.config, rng);
        *student.active_adapter_mut().unwrap() = fresh;
    }
    let trainable: Vec<String> = student
        .active_adapter()
        .ok_or_else(|| Error::Contract("student has no adapter".into()))?
        .params()
        .iter()
        .map(|p| p.name.clone())
        .collect();
    student.set_trainable(|name| trainable.iter().any(|t| t == name));

    let mut outcome = DscOutcome { student, second_teachers: Vec::new(), losses: Vec::new(), initial_terms: None };
    for _ in 0..run.iterations {
        let j = sample_second_teacher(n, run.cfg, rng)?;
        let x0 = minibatch(dataset, d, run.cfg.batch, rng)?;
        let student = &mut outcome.student;
        let mut g = Graph::new();
        let bound = student.bind(&mut g)?;
        let step = dsc_loss(&mut g, student, &bound, &teacher_n, &previous[j - 1], j, &x0, n, run.schedule, run.cfg, rng)?;
        let grads = g.backward(step.loss)?;
        student.accumulate_grads(&bound, &grads)?;
        optimizer.step(&mut student.params_mut());
        outcome.initial_terms.get_or_insert(step.terms);
        outcome.losses.push(g.scalar(step.loss)?);
        outcome.second_teachers.push(j);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::model::{AdapterMode, ModelConfig};
    use crate::rng::seeded;
    use crate::tensor::cross_entropy;

    fn small() -> ModelConfig {
        ModelConfig { data_dim: 2, hidden: 8, time_dim: 4, embed_dim: 3 }
    }

    fn values(m: &DenoiserModel, prefix: &str) -> Vec<Vec<f64>> {
        m.params().iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.values().to_vec()).collect()
    }

    fn setup() -> (DenoiserModel, Vec<DenoiserModel>) {
        let mut rng = seeded(5);
        let mut m = DenoiserModel::new(small(), &mut rng);
        m.add_concept(&mut rng);
        m.add_concept(&mut rng);
        let mut a = LoraAdapter::new("lora", 1, 2, &small(), &mut rng);
        a.key.b.tensor.values_mut().iter_mut().for_each(|v| *v = 0.3);
        m.attach_adapter(a, AdapterMode::ReplaceEffective).unwrap();
        let prev = m.clone_frozen();
        m.active_adapter_mut().unwrap().value.b.tensor.values_mut().iter_mut().for_each(|v| *v = -0.2);
        (m, vec![prev])
    }

    #[test]
    fn teacher_one_terms_at_start() {
        let (m, prev) = setup();
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = DscConfig::default();
        let mut g = Graph::new();
        let bound = m.bind(&mut g).unwrap();
        let x0 = vec![0.5, -0.5, 1.0, 0.0];
        let step = dsc_loss(&mut g, &m, &bound, &m.clone_frozen(), &prev[0], 1, &x0, 2, &schedule, &cfg, &mut seeded(1))
            .unwrap();
        assert_eq!(step.terms.mse_current, 0.0);
        assert!(step.terms.mse_previous > 0.0);
    }

    #[test]
    fn no_distillation_leaves_denoise() {
        let (m, prev) = setup();
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = DscConfig { gamma: 0.0, lambda: 0.0, ..DscConfig::default() };
        let mut g = Graph::new();
        let bound = m.bind(&mut g).unwrap();
        let x0 = vec![0.5, -0.5];
        let step =
            dsc_loss(&mut g, &m, &bound, &m.clone_frozen(), &prev[0], 1, &x0, 2, &schedule, &cfg, &mut seeded(2)).unwrap();
        assert_eq!(g.scalar(step.loss).unwrap(), step.terms.denoise);
    }

    #[test]
    fn sharpened_teacher_cross_entropy() {
        let h = cross_entropy(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn contracts() {
        let (m, prev) = setup();
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = DscConfig::default();
        let run = DscRun { cfg: &cfg, iterations: 1, schedule: &schedule, rank: 2 };
        let mut opt = crate::tensor::Sgd { lr: 0.1 };
        assert!(run_dsc(&m, &prev, &[0.0, 0.0], 1, &run, &mut opt, &mut seeded(0)).is_err());
        assert!(run_dsc(&m, &prev, &[], 2, &run, &mut opt, &mut seeded(0)).is_err());
        assert!(sample_second_teacher(1, &cfg, &mut seeded(0)).is_err());
        let fixed = DscConfig { fixed_second_teacher: true, ..cfg };
        assert_eq!(sample_second_teacher(5, &fixed, &mut seeded(0)).unwrap(), 4);
    }

    #[test]
    fn zero_iterations_return_source() {
        let (m, prev) = setup();
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = DscConfig::default();
        let run = DscRun { cfg: &cfg, iterations: 0, schedule: &schedule, rank: 2 };
        let mut opt = crate::tensor::Sgd { lr: 0.1 };
        let out = run_dsc(&m, &prev, &[0.0, 0.0], 2, &run, &mut opt, &mut seeded(0)).unwrap();
        assert_eq!(values(&out.student, ""), values(&m, ""));
        assert!(out.second_teachers.is_empty());
    }

    #[test]
    fn training_moves_only_the_adapter() {
        let (m, prev) = setup();
        let before = prev[0].clone();
        let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
        let cfg = DscConfig::default();
        let run = DscRun { cfg: &cfg, iterations: 3, schedule: &schedule, rank: 2 };
        let mut opt = crate::tensor::Sgd { lr: 0.05 };
        let out = run_dsc(&m, &prev, &[0.5, 0.5, -1.0, 0.2], 2, &run, &mut opt, &mut seeded(0)).unwrap();
        assert_eq!(prev[0], before);
        assert_eq!(out.second_teachers, vec![1, 1, 1]);
        assert_eq!(values(&out.student, "trunk"), values(&m, "trunk"));
        assert_eq!(values(&out.student, "concept"), values(&m, "concept"));
        assert_ne!(values(&out.student, "lora"), values(&m, "lora"));
    }
}
