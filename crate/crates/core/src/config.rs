//! Run configuration: every hyperparameter with its default, loaded from JSON.

use crate::data::{check_separable, ConceptSpec, Family};
use crate::diffusion::{make_schedule, Schedule};
use crate::dsc::DscConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::OptimizerKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Every method the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    TiEmbeddingOnly,
    KvFullSequential,
    LoraSequential,
    LoraMerge,
    Clora,
    Ewc,
    EwcDc,
    Dsc,
    DscEwc,
    DscEwcDc,
}

impl MethodName {
    pub const ALL: [MethodName; 10] = [
        MethodName::TiEmbeddingOnly,
        MethodName::KvFullSequential,
        MethodName::LoraSequential,
        MethodName::LoraMerge,
        MethodName::Clora,
        MethodName::Ewc,
        MethodName::EwcDc,
        MethodName::Dsc,
        MethodName::DscEwc,
        MethodName::DscEwcDc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::TiEmbeddingOnly => "ti-embedding-only",
            MethodName::KvFullSequential => "kv-full-sequential",
            MethodName::LoraSequential => "lora-sequential",
            MethodName::LoraMerge => "lora-merge",
            MethodName::Clora => "clora",
            MethodName::Ewc => "ewc",
            MethodName::EwcDc => "ewc-dc",
            MethodName::Dsc => "dsc",
            MethodName::DscEwc => "dsc-ewc",
            MethodName::DscEwcDc => "dsc-ewc-dc",
        }
    }

    pub fn uses_dsc(self) -> bool {
        matches!(self, MethodName::Dsc | MethodName::DscEwc | MethodName::DscEwcDc)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, MethodName::Ewc | MethodName::EwcDc | MethodName::DscEwc | MethodName::DscEwcDc)
    }

    /// Whether the Fisher is estimated with the DC term.
    pub fn uses_dc_fisher(self) -> bool {
        matches!(self, MethodName::EwcDc | MethodName::DscEwcDc)
    }

    /// Methods that train one LoRA per task, carried over between tasks.
    pub fn sequential_lora(self) -> bool {
        matches!(self, MethodName::LoraSequential) || self.uses_dsc() || self.uses_ewc()
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse-chain stride used when generating snapshots.
    pub sample_stride: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-3, beta_end: 0.2, sample_stride: 1 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub prior: ConceptSpec,
    pub tasks: Vec<ConceptSpec>,
    pub train_points: usize,
    pub snapshot_points: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        let blob = |centers: Vec<[f64; 2]>, sigma: f64, seed| ConceptSpec::new(Family::BlobMixture { centers, sigma }, seed);
        Self {
            prior: blob(vec![[0.0, 0.0]], 1.0, 100),
            tasks: vec![
                ConceptSpec::new(Family::Ring { radius: 1.5, center: [0.0, 0.0], sigma: 0.08 }, 101),
                ConceptSpec::new(Family::Moon { radius: 1.2, center: [0.5, -0.8], angle: 0.0, sigma: 0.08 }, 102),
                blob(vec![[-1.5, 1.5], [1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]], 0.15, 103),
                ConceptSpec::new(
                    Family::Spiral { arms: 2, turns: 0.75, radius: 2.0, center: [0.0, 0.0], sigma: 0.08 },
                    104,
                ),
            ],
            train_points: 200,
            snapshot_points: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub points: usize,
    pub optimizer: OptimizerKind,
    /// Number of c_0 samples generated by the pretrained model for prior preservation.
    pub prior_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 3000, batch: 64, points: 2000, optimizer: OptimizerKind::Adam { lr: 2e-3 }, prior_samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub rank: usize,
    /// Weight of the prior-preservation denoising loss on c_0.
    pub prior_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 500, batch: 8, optimizer: OptimizerKind::Adam { lr: 2e-2 }, rank: 4, prior_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcConfig {
    /// Cardinality of the sampled concept subset.
    pub k: usize,
    pub tau: f64,
    pub delta: f64,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self { k: 5, tau: 1.0, delta: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcConfig {
    pub rho: f64,
    pub decay: f64,
    /// Fisher estimation minibatches; `None` resolves to a fifth of the training iterations.
    pub iterations: Option<usize>,
    pub batch: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self { rho: 1e4, decay: 1.0, iterations: None, batch: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloraConfig {
    pub coefficient: f64,
}

impl Default for CloraConfig {
    fn default() -> Self {
        Self { coefficient: 1e8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub dc_accuracy_trials: usize,
    /// Points per concept used for the DC accuracy diagnostic (`0` disables it).
    pub dc_accuracy_points: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { dc_accuracy_trials: 64, dc_accuracy_points: 200 }
    }
}

/// Complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: MethodName,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sequence: SequenceConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub dc: DcConfig,
    pub ewc: EwcConfig,
    pub clora: CloraConfig,
    pub dsc: DscConfig,
    pub metrics: MetricsConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: MethodName::EwcDc,
            seeds: vec![0],
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sequence: SequenceConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            dc: DcConfig::default(),
            ewc: EwcConfig::default(),
            clora: CloraConfig::default(),
            dsc: DscConfig::default(),
            metrics: MetricsConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    /// Parses JSON; unknown keys and invalid values are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills every derived default so the dump shows all effective values.
    pub fn resolved(mut self) -> Self {
        let fifth = self.train.iterations / 5;
        self.ewc.iterations.get_or_insert(fifth);
        self.dsc.iterations.get_or_insert(fifth);
        self
    }

    pub fn ewc_iterations(&self) -> usize {
        self.ewc.iterations.unwrap_or(self.train.iterations / 5)
    }

    pub fn dsc_iterations(&self) -> usize {
        self.dsc.iterations.unwrap_or(self.train.iterations / 5)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.model.data_dim != 2 {
            return bad(format!("concept families are planar; data_dim must be 2, got {}", self.model.data_dim));
        }
        if self.model.time_dim % 2 != 0 || self.model.time_dim == 0 {
            return bad("time_dim must be a positive even number".into());
        }
        if self.model.hidden == 0 || self.model.embed_dim == 0 {
            return bad("hidden and embed_dim must be positive".into());
        }
        if self.sequence.tasks.is_empty() {
            return bad("the sequence needs at least one task".into());
        }
        if self.sequence.train_points == 0 || self.sequence.snapshot_points == 0 {
            return bad("train_points and snapshot_points must be positive".into());
        }
        if self.train.batch == 0 || self.pretrain.batch == 0 || self.ewc.batch == 0 || self.dsc.batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.train.rank == 0 {
            return bad("LoRA rank must be positive".into());
        }
        if self.pretrain.prior_samples == 0 || self.pretrain.points == 0 {
            return bad("pretraining needs prior data".into());
        }
        if self.dc.k < 2 {
            return bad(format!("dc.k must be >= 2, got {}", self.dc.k));
        }
        if !(self.dc.tau > 0.0) || self.dc.delta < 0.0 {
            return bad("dc.tau must be > 0 and dc.delta >= 0".into());
        }
        if !(self.ewc.decay > 0.0 && self.ewc.decay <= 1.0) || self.ewc.rho < 0.0 {
            return bad("ewc.decay must be in (0, 1] and ewc.rho >= 0".into());
        }
        if self.clora.coefficient < 0.0 {
            return bad("clora.coefficient must be >= 0".into());
        }
        if self.metrics.dc_accuracy_trials == 0 {
            return bad("metrics.dc_accuracy_trials must be >= 1".into());
        }
        if self.schedule.sample_stride == 0 {
            return bad("schedule.sample_stride must be >= 1".into());
        }
        self.dsc.validate()?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        for spec in std::iter::once(&self.sequence.prior).chain(&self.sequence.tasks) {
            spec.validate()?;
        }
        check_separable(&self.sequence.tasks)
    }

    /// Stable identifier used for the results directory: method, seeds and a
    /// digest of the remaining settings, so differently tuned runs never collide.
    pub fn run_id(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut keyed = self.clone().resolved();
        keyed.out = None;
        let json = serde_json::to_string(&keyed).unwrap_or_default();
        let hash: String = Sha256::digest(json.as_bytes()).iter().take(4).map(|b| format!("{b:02x}")).collect();
        format!("{}-seed{}-{hash}", self.method, seeds.join("_"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_resolve() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let r = cfg.resolved();
        assert_eq!(r.ewc.iterations, Some(100));
        assert_eq!(r.dsc.iterations, Some(100));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"methd": "ewc"}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"dc": {"kk": 3}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"method": "ewc-dcx"}"#), Err(Error::Config(_))));
        let cfg = RunConfig::from_json(r#"{"method": "clora", "seeds": [1, 2]}"#).unwrap();
        assert_eq!(cfg.method, MethodName::Clora);
        assert_eq!(cfg.train.iterations, 500);
    }

    #[test]
    fn resolved_dump_round_trips() {
        let r = RunConfig::default().resolved();
        let text = serde_json::to_string_pretty(&r).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), r);
    }

    #[test]
    fn method_names_parse() {
        for m in MethodName::ALL {
            assert_eq!(m.as_str().parse::<MethodName>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("sgd".parse::<MethodName>().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"dc": {"k": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dsc": {"teacher_tau": 0.0}}"#).is_err());
    }
}
