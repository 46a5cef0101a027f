//! Conditional noise predictor with a learned concept-embedding table and
//! low-rank adapters on the key/value conditioning projections.
//!
//! Layout of the denoiser:
//!
//! ```text
//! h1  = silu([x_t ‖ temb(t)] W1 + b1 + e_c W_K)
//! h2  = silu(h1 W2 + b2 + e_c W_V)
//! h3  = silu(h2 W3 + b3)
//! eps = h3 W_out + b_out
//! ```
//!
//! `W_K` and `W_V` are the only layers that accept adapters; their effective
//! weight is `W_init + Σ A_i B_i` over every attached adapter.

use crate::error::{Error, Result};
use crate::rng::{normals, LabRng};
use crate::tensor::Var;
use crate::{Gradients, Graph};
use crate::{Parameter, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { data_dim: 2, hidden: 128, time_dim: 32, embed_dim: 16 }
    }
}

/// Dense affine layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    fn init(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut LabRng) -> Self {
        let sd = gain / (fan_in as f64).sqrt();
        let w = normals(rng, fan_in * fan_out).into_iter().map(|v| v * sd).collect();
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w).unwrap()),
            bias: Parameter::new(format!("{name}.bias"), Tensor::matrix(1, fan_out, vec![0.0; fan_out]).unwrap()),
        }
    }
}

/// One learned vector per concept; row 0 is the prior concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub rows: Vec<Parameter>,
    pub frozen: Vec<bool>,
}

impl ConceptEmbedding {
    pub fn row_name(id: usize) -> String {
        format!("concept.{id}")
    }

    /// Number of concepts after the prior (`n` once task `n` has started).
    pub fn num_seen(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        self.rows
            .get(id)
            .map(|p| p.values())
            .ok_or(Error::Lookup { id, seen: self.num_seen() })
    }

    /// Permanently freezes a row. Frozen rows never become trainable again.
    pub fn freeze(&mut self, id: usize) {
        if let Some(p) = self.rows.get_mut(id) {
            p.tensor.requires_grad = false;
            p.tensor.zero_grad();
            self.frozen[id] = true;
        }
    }
}

/// Pair of low-rank factors for one targeted layer: `A [d1 x r]`, `B [r x d2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Parameter,
    pub b: Parameter,
}

impl LoraPair {
    pub fn product(&self) -> Tensor {
        crate::tensor::matmul(&self.a.tensor, &self.b.tensor).expect("adapter factor shapes")
    }

    fn dims(&self) -> (usize, usize, usize) {
        let (d1, r) = self.a.tensor.dims2();
        (d1, r, self.b.tensor.dims2().1)
    }
}

/// Low-rank residuals for the key and value projections of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub task_id: usize,
    pub rank: usize,
    pub prefix: String,
    pub key: LoraPair,
    pub value: LoraPair,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.01²)`, `B = 0`, so a fresh adapter is transparent.
    pub fn new(prefix: &str, task_id: usize, rank: usize, cfg: &ModelConfig, rng: &mut LabRng) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.hidden);
        let mut pair = |role: &str| {
            let a = normals(rng, e * rank).into_iter().map(|v| 0.01 * v).collect();
            LoraPair {
                a: Parameter::new(format!("{prefix}.{role}.a"), Tensor::matrix(e, rank, a).unwrap()),
                b: Parameter::new(format!("{prefix}.{role}.b"), Tensor::zeros(vec![rank, h])),
            }
        };
        let key = pair("key");
        let value = pair("value");
        Self { task_id, rank, prefix: prefix.to_string(), key, value }
    }

    pub fn from_factors(prefix: &str, task_id: usize, key: (Tensor, Tensor), value: (Tensor, Tensor)) -> Result<Self> {
        let rank = key.0.dims2().1;
        let mk = |role: &str, (a, b): (Tensor, Tensor)| LoraPair {
            a: Parameter::new(format!("{prefix}.{role}.a"), a),
            b: Parameter::new(format!("{prefix}.{role}.b"), b),
        };
        let adapter = Self { task_id, rank, prefix: prefix.to_string(), key: mk("key", key), value: mk("value", value) };
        for pair in [&adapter.key, &adapter.value] {
            let (_, r, _) = pair.dims();
            if pair.a.tensor.dims2().1 != pair.b.tensor.dims2().0 || r != rank {
                return Err(Error::Adapter("factor inner dimensions disagree".into()));
            }
        }
        Ok(adapter)
    }

    /// Same weights under a new parameter-name prefix.
    pub fn renamed(&self, prefix: &str) -> Self {
        let mut out = self.clone();
        out.prefix = prefix.to_string();
        for (role, pair) in [("key", &mut out.key), ("value", &mut out.value)] {
            pair.a.name = format!("{prefix}.{role}.a");
            pair.b.name = format!("{prefix}.{role}.b");
        }
        out
    }

    /// `(A_K B_K, A_V B_V)`.
    pub fn products(&self) -> (Tensor, Tensor) {
        (self.key.product(), self.value.product())
    }

    pub fn params(&self) -> [&Parameter; 4] {
        [&self.key.a, &self.key.b, &self.value.a, &self.value.b]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.key.a, &mut self.key.b, &mut self.value.a, &mut self.value.b]
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.tensor.requires_grad = on;
            p.tensor.zero_grad();
        }
    }
}

/// How an adapter joins the adapters already attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// Drop previously attached adapters; `W = W_init + A B`.
    ReplaceEffective,
    /// Freeze previously attached adapters and add this one; `W = W_init + Σ A_i B_i`.
    Stack,
}

/// Merges adapters into one whose product is `Σ w_i A_i B_i`.
///
/// The merged factors are the column concatenation `[w_1 A_1 | w_2 A_2 | ...]`
/// and the row concatenation `[B_1; B_2; ...]`, so the rank is `Σ r_i`.
pub fn merge_adapters(adapters: &[LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    let Some(first) = adapters.first() else {
        return Err(Error::Adapter("nothing to merge".into()));
    };
    if adapters.len() != weights.len() {
        return Err(Error::Adapter(format!("{} adapters but {} weights", adapters.len(), weights.len())));
    }
    let (d1, r, d2) = first.key.dims();
    let (vd1, _, vd2) = first.value.dims();
    if adapters.iter().any(|a| a.key.dims() != (d1, r, d2) || a.value.dims() != (vd1, r, vd2)) {
        return Err(Error::Adapter("merged adapters must share targets and rank".into()));
    }
    let total = r * adapters.len();
    let cat = |pick: fn(&LoraAdapter) -> &LoraPair, d1: usize, d2: usize| {
        let mut a = vec![0.0; d1 * total];
        let mut b = Vec::with_capacity(total * d2);
        for (k, (ad, &w)) in adapters.iter().zip(weights).enumerate() {
            let pair = pick(ad);
            for i in 0..d1 {
                for j in 0..r {
                    a[i * total + k * r + j] = w * pair.a.values()[i * r + j];
                }
            }
            b.extend_from_slice(pair.b.values());
        }
        (Tensor::matrix(d1, total, a).unwrap(), Tensor::matrix(total, d2, b).unwrap())
    };
    let key = cat(|a| &a.key, d1, d2);
    let value = cat(|a| &a.value, vd1, vd2);
    LoraAdapter::from_factors("lora", first.task_id.max(adapters.last().unwrap().task_id), key, value)
}

/// The conditional denoiser `eps_theta(x_t, c, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub trunk: [Dense; 3],
    pub head: Dense,
    /// `W_init^K`, `[embed_dim x hidden]`.
    pub key: Parameter,
    /// `W_init^V`, `[embed_dim x hidden]`.
    pub value: Parameter,
    pub embedding: ConceptEmbedding,
    pub adapters: Vec<LoraAdapter>,
}

/// Graph handles for one bound copy of the model.
#[derive(Debug, Clone)]
pub struct Bound {
    trunk: [(Var, Var); 3],
    head: (Var, Var),
    key_eff: Var,
    value_eff: Var,
    rows: Vec<Var>,
    params: Vec<Var>,
}

impl Bound {
    /// Graph handle of the `i`-th parameter in [`DenoiserModel::params`] order.
    pub fn param_var(&self, i: usize) -> Var {
        self.params[i]
    }
}

impl DenoiserModel {
    /// Random initialization with the prior-concept row in place.
    pub fn new(config: ModelConfig, rng: &mut LabRng) -> Self {
        let ModelConfig { data_dim, hidden, time_dim, embed_dim } = config;
        let trunk = [
            Dense::init("trunk.0", data_dim + time_dim, hidden, 1.0, rng),
            Dense::init("trunk.1", hidden, hidden, 1.0, rng),
            Dense::init("trunk.2", hidden, hidden, 1.0, rng),
        ];
        let head = Dense::init("head", hidden, data_dim, 0.5, rng);
        let proj = |name: &str, rng: &mut LabRng| {
            let sd = 1.0 / (embed_dim as f64).sqrt();
            let w = normals(rng, embed_dim * hidden).into_iter().map(|v| v * sd).collect();
            Parameter::new(name, Tensor::matrix(embed_dim, hidden, w).unwrap())
        };
        let key = proj("kv.key.weight", rng);
        let value = proj("kv.value.weight", rng);
        let row0 = normals(rng, embed_dim);
        let embedding = ConceptEmbedding {
            rows: vec![Parameter::frozen(ConceptEmbedding::row_name(0), Tensor::matrix(1, embed_dim, row0).unwrap())],
            frozen: vec![true],
        };
        Self { config, trunk, head, key, value, embedding, adapters: Vec::new() }
    }

    /// A model whose every weight is zero (the output is identically zero).
    pub fn zeros(config: ModelConfig, concepts: usize) -> Self {
        let mut rng = crate::rng::seeded(0);
        let mut m = Self::new(config, &mut rng);
        for _ in 0..concepts {
            m.add_concept(&mut rng);
        }
        for p in m.params_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    /// Appends a trainable embedding row for the next concept, initialized
    /// near the prior concept's vector. Returns the new concept id.
    pub fn add_concept(&mut self, rng: &mut LabRng) -> usize {
        let id = self.embedding.rows.len();
        let base = self.embedding.rows[0].values().to_vec();
        let noise = normals(rng, base.len());
        let row = base.iter().zip(noise).map(|(b, n)| b + 0.1 * n).collect();
        self.embedding.rows.push(Parameter::new(
            ConceptEmbedding::row_name(id),
            Tensor::matrix(1, self.config.embed_dim, row).unwrap(),
        ));
        self.embedding.frozen.push(false);
        id
    }

    pub fn num_seen(&self) -> usize {
        self.embedding.num_seen()
    }

    /// Every parameter in a fixed order (trunk, head, kv, embedding rows, adapters).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for d in &self.trunk {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out.push(&self.key);
        out.push(&self.value);
        out.extend(self.embedding.rows.iter());
        for a in &self.adapters {
            out.extend(a.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for d in &mut self.trunk {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out.push(&mut self.key);
        out.push(&mut self.value);
        out.extend(self.embedding.rows.iter_mut());
        for a in &mut self.adapters {
            out.extend(a.params_mut());
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params().into_iter().find(|p| p.name == name)
    }

    /// Sets `requires_grad` on every parameter from a name predicate.
    /// Frozen embedding rows stay frozen regardless of the predicate.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        let frozen: Vec<String> = self
            .embedding
            .frozen
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(i, _)| ConceptEmbedding::row_name(i))
            .collect();
        for p in self.params_mut() {
            p.tensor.requires_grad = pred(&p.name) && !frozen.contains(&p.name);
            p.tensor.zero_grad();
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Deep copy with every parameter frozen.
    pub fn clone_frozen(&self) -> Self {
        let mut m = self.clone();
        m.set_trainable(|_| false);
        m
    }

    pub fn attach_adapter(&mut self, mut adapter: LoraAdapter, mode: AdapterMode) -> Result<()> {
        let (e, h) = (self.config.embed_dim, self.config.hidden);
        for pair in [&adapter.key, &adapter.value] {
            let (d1, r, d2) = pair.dims();
            if d1 != e || d2 != h || pair.b.tensor.dims2().0 != r {
                return Err(Error::Adapter(format!(
                    "adapter factors {d1}x{r} · {}x{d2} do not fit a {e}x{h} projection",
                    pair.b.tensor.dims2().0
                )));
            }
        }
        match mode {
            AdapterMode::ReplaceEffective => self.adapters.clear(),
            AdapterMode::Stack => {
                if self.adapters.iter().any(|a| a.prefix == adapter.prefix) {
                    return Err(Error::Adapter(format!("adapter prefix {} already attached", adapter.prefix)));
                }
                self.adapters.iter_mut().for_each(|a| a.set_trainable(false));
            }
        }
        adapter.set_trainable(true);
        self.adapters.push(adapter);
        Ok(())
    }

    /// The adapter currently being trained (the last attached).
    pub fn active_adapter(&self) -> Option<&LoraAdapter> {
        self.adapters.last()
    }

    pub fn active_adapter_mut(&mut self) -> Option<&mut LoraAdapter> {
        self.adapters.last_mut()
    }

    /// Effective `(W_K, W_V)` including every attached adapter.
    pub fn effective_kv(&self) -> (Tensor, Tensor) {
        let mut k = self.key.tensor.clone();
        let mut v = self.value.tensor.clone();
        for a in &self.adapters {
            let (pk, pv) = a.products();
            k.values_mut().iter_mut().zip(pk.values()).for_each(|(w, d)| *w += d);
            v.values_mut().iter_mut().zip(pv.values()).for_each(|(w, d)| *w += d);
        }
        (k, v)
    }

    /// Records every parameter on `g` and builds the effective kv weights.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let params: Vec<Var> = self.params().into_iter().map(|p| g.param(p)).collect();
        let trunk = [(params[0], params[1]), (params[2], params[3]), (params[4], params[5])];
        let head = (params[6], params[7]);
        let mut key_eff = params[8];
        let mut value_eff = params[9];
        let nrows = self.embedding.rows.len();
        let rows = params[10..10 + nrows].to_vec();
        for (i, _) in self.adapters.iter().enumerate() {
            let base = 10 + nrows + 4 * i;
            let kp = g.matmul(params[base], params[base + 1])?;
            key_eff = g.add(key_eff, kp)?;
            let vp = g.matmul(params[base + 2], params[base + 3])?;
            value_eff = g.add(value_eff, vp)?;
        }
        Ok(Bound { trunk, head, key_eff, value_eff, rows, params })
    }

    /// Sinusoidal embedding of integer timesteps, `[len(t) x time_dim]`.
    pub fn time_embedding(&self, t: &[usize]) -> Vec<f64> {
        let half = self.config.time_dim / 2;
        let mut out = Vec::with_capacity(t.len() * self.config.time_dim);
        for &ti in t {
            for i in 0..half {
                let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
                out.push((ti as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
                out.push((ti as f64 * freq).cos());
            }
        }
        out
    }

    /// Batched forward pass: `x_t` is `[B x data_dim]`; returns `[B x data_dim]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x_t: Var, concepts: &[usize], t: &[usize]) -> Result<Var> {
        let (b, d) = g.dims(x_t);
        if d != self.config.data_dim || concepts.len() != b || t.len() != b {
            return Err(Error::Dimension(format!(
                "forward on {b}x{d} inputs with {} concept ids and {} timesteps",
                concepts.len(),
                t.len()
            )));
        }
        if let Some(&bad) = concepts.iter().find(|&&c| c >= bound.rows.len()) {
            return Err(Error::Lookup { id: bad, seen: bound.rows.len() - 1 });
        }
        if t.contains(&0) {
            return Err(Error::Domain("timesteps start at 1".into()));
        }
        let temb = g.constant(b, self.config.time_dim, self.time_embedding(t))?;
        let input = g.concat_cols(&[x_t, temb])?;
        let cond = g.gather_rows(&bound.rows, concepts)?;
        let k = g.matmul(cond, bound.key_eff)?;
        let v = g.matmul(cond, bound.value_eff)?;

        let (w, bias) = bound.trunk[0];
        let z = g.matmul(input, w)?;
        let z = g.add_row(z, bias)?;
        let z = g.add(z, k)?;
        let h = g.silu(z);

        let (w, bias) = bound.trunk[1];
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, bias)?;
        let z = g.add(z, v)?;
        let h = g.silu(z);

        let (w, bias) = bound.trunk[2];
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, bias)?;
        let h = g.silu(z);

        let (w, bias) = bound.head;
        let z = g.matmul(h, w)?;
        g.add_row(z, bias)
    }

    /// Forward pass without gradients on flat row-major inputs.
    pub fn predict_batch(&self, x_t: &[f64], concepts: &[usize], t: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let d = self.config.data_dim;
        let x = g.constant(x_t.len() / d, d, x_t.to_vec())?;
        let out = self.forward(&mut g, &bound, x, concepts, t)?;
        Ok(g.value(out).to_vec())
    }

    /// Single-point noise prediction.
    pub fn predict(&self, x_t: &[f64], concept: usize, t: usize) -> Result<Vec<f64>> {
        if x_t.len() != self.config.data_dim {
            return Err(Error::Dimension(format!("expected a {}-d point", self.config.data_dim)));
        }
        self.predict_batch(x_t, &[concept], &[t])
    }

    /// Adds gradients from a backward pass into every trainable parameter.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (i, p) in self.params_mut().into_iter().enumerate() {
            grads.accumulate_into(bound.params[i], p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> ModelConfig {
        ModelConfig { data_dim: 2, hidden: 8, time_dim: 4, embed_dim: 3 }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = DenoiserModel::zeros(small(), 1);
        assert_eq!(m.predict(&[0.3, -1.0], 1, 5).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_concepts() {
        let mut rng = seeded(1);
        let mut m = DenoiserModel::new(small(), &mut rng);
        m.add_concept(&mut rng);
        let a = m.predict(&[0.1, 0.2], 1, 3).unwrap();
        assert_eq!(a, m.predict(&[0.1, 0.2], 1, 3).unwrap());
        assert!(matches!(m.predict(&[0.1, 0.2], 2, 3), Err(Error::Lookup { id: 2, .. })));
    }

    #[test]
    fn distinct_rows_give_distinct_outputs() {
        let mut rng = seeded(2);
        let mut m = DenoiserModel::new(small(), &mut rng);
        m.add_concept(&mut rng);
        assert_ne!(m.embedding.row(0).unwrap(), m.embedding.row(1).unwrap());
        assert_ne!(m.predict(&[0.5, 0.5], 0, 4).unwrap(), m.predict(&[0.5, 0.5], 1, 4).unwrap());
    }

    #[test]
    fn zero_adapter_is_transparent() {
        let mut rng = seeded(3);
        let mut m = DenoiserModel::new(small(), &mut rng);
        m.add_concept(&mut rng);
        let before = m.predict_batch(&[0.1, 0.2, -0.3, 0.4], &[0, 1], &[2, 9]).unwrap();
        let ad = LoraAdapter::new("lora", 1, 2, &m.config, &mut rng);
        m.attach_adapter(ad, AdapterMode::ReplaceEffective).unwrap();
        let after = m.predict_batch(&[0.1, 0.2, -0.3, 0.4], &[0, 1], &[2, 9]).unwrap();
        assert_eq!(before, after);
    }

    fn random_adapter(prefix: &str, task: usize, cfg: &ModelConfig, rng: &mut LabRng) -> LoraAdapter {
        let mut ad = LoraAdapter::new(prefix, task, 2, cfg, rng);
        for p in ad.params_mut() {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&normals(rng, n));
        }
        ad
    }

    #[test]
    fn stacked_equals_replaced_sum() {
        let mut rng = seeded(4);
        let cfg = small();
        let mut m = DenoiserModel::new(cfg, &mut rng);
        m.add_concept(&mut rng);
        let a1 = random_adapter("c1", 1, &cfg, &mut rng);
        let a2 = random_adapter("c2", 2, &cfg, &mut rng);
        let mut stacked = m.clone();
        stacked.attach_adapter(a1.clone(), AdapterMode::Stack).unwrap();
        stacked.attach_adapter(a2.clone(), AdapterMode::Stack).unwrap();
        assert!(!stacked.adapters[0].key.a.is_trainable());
        let merged = merge_adapters(&[a1, a2], &[1.0, 1.0]).unwrap();
        let mut replaced = m.clone();
        replaced.attach_adapter(merged, AdapterMode::ReplaceEffective).unwrap();
        let x = [0.3, -0.2, 1.0, 0.5];
        let ys = stacked.predict_batch(&x, &[0, 1], &[1, 7]).unwrap();
        let yr = replaced.predict_batch(&x, &[0, 1], &[1, 7]).unwrap();
        for (a, b) in ys.iter().zip(&yr) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_dims_checked() {
        let mut rng = seeded(5);
        let mut m = DenoiserModel::new(small(), &mut rng);
        let wrong = LoraAdapter::new("lora", 1, 2, &ModelConfig { embed_dim: 4, ..small() }, &mut rng);
        assert!(matches!(m.attach_adapter(wrong, AdapterMode::Stack), Err(Error::Adapter(_))));
    }

    #[test]
    fn merge_weights() {
        let mut rng = seeded(6);
        let cfg = small();
        let a1 = random_adapter("a", 1, &cfg, &mut rng);
        let a2 = random_adapter("b", 2, &cfg, &mut rng);
        let single = merge_adapters(&[a1.clone()], &[1.0]).unwrap();
        assert_eq!(single.products().0.values(), a1.products().0.values());
        let avg = merge_adapters(&[a1.clone(), a2.clone()], &[0.5, 0.5]).unwrap();
        let (p1, p2, pm) = (a1.products().1, a2.products().1, avg.products().1);
        for i in 0..pm.len() {
            assert!((pm.values()[i] - 0.5 * (p1.values()[i] + p2.values()[i])).abs() < 1e-12);
        }
        let zero = merge_adapters(&[a1.clone(), a2], &[0.0, 0.0]).unwrap();
        assert!(zero.products().0.values().iter().all(|&v| v == 0.0));
        let other = random_adapter("c", 3, &ModelConfig { hidden: 5, ..cfg }, &mut rng);
        assert!(merge_adapters(&[a1.clone(), other], &[1.0, 1.0]).is_err());
        assert!(merge_adapters(&[a1], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn clone_frozen_is_isolated() {
        let mut rng = seeded(7);
        let mut m = DenoiserModel::new(small(), &mut rng);
        m.add_concept(&mut rng);
        let frozen = m.clone_frozen();
        assert!(frozen.params().iter().all(|p| !p.is_trainable()));
        let y0 = frozen.predict(&[0.2, 0.1], 1, 2).unwrap();
        assert_eq!(y0, m.predict(&[0.2, 0.1], 1, 2).unwrap());
        m.trunk[0].bias.tensor.values_mut()[0] += 1.0;
        assert_eq!(frozen.predict(&[0.2, 0.1], 1, 2).unwrap(), y0);
        assert_eq!(frozen.clone_frozen(), frozen);
    }

    #[test]
    fn frozen_rows_stay_frozen() {
        let mut rng = seeded(8);
        let mut m = DenoiserModel::new(small(), &mut rng);
        m.add_concept(&mut rng);
        m.embedding.freeze(1);
        m.set_trainable(|_| true);
        assert!(!m.embedding.rows[0].is_trainable());
        assert!(!m.embedding.rows[1].is_trainable());
        assert!(m.key.is_trainable());
    }
}
