//! Training loop: L1 regression on freshly sampled batches with Adam,
//! periodic in-distribution / held-out evaluation, checkpoints that resume
//! bit-identically.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskModel};
use crate::rng::{Rng, RngState};
use crate::task::{sample_batch, Batch, Combo, TaskConfig, TaskSpec};
use crate::tensor::{no_grad, ParamStore, Tensor};

/// Stream ids carved out of each run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TASK: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const ANALYSIS: u64 = 5;
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    64
}
fn default_steps() -> usize {
    30_000
}
fn default_eval_every() -> usize {
    1_000
}
fn default_eval_batches() -> usize {
    4
}
fn default_eval_batch_size() -> usize {
    256
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Optimizer updates per run.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            eval_every: default_eval_every(),
            eval_batches: default_eval_batches(),
            eval_batch_size: default_eval_batch_size(),
            grad_clip: None,
            seeds: default_seeds(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("batch_size", self.batch_size as f64),
            ("eval_every", self.eval_every as f64),
            ("eval_batches", self.eval_batches as f64),
            ("eval_batch_size", self.eval_batch_size as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("train.{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::contract(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.steps > 0 && self.steps < self.eval_every {
            return Err(Error::contract(format!(
                "train.steps ({}) must be at least train.eval_every ({})",
                self.steps, self.eval_every
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::contract("train.grad_clip must be positive"));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("train.seeds must list at least one seed"));
        }
        Ok(())
    }
}

/// Mean absolute error over every element.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("l1_loss", pred.shape(), target.shape()));
    }
    Ok(pred.sub(target)?.abs().mean())
}

/// Bias-corrected Adam over the trainable parameters of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub t: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Adam {
        let trainable: Vec<_> = store.trainable().collect();
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            names: trainable.iter().map(|p| p.name.clone()).collect(),
            m: trainable.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: trainable.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        let k = self.names.iter().position(|n| n == name)?;
        Some((&self.m[k], &self.v[k]))
    }

    /// One update from the gradients currently stored on the parameters
    /// (missing gradients count as zero). Rejects non-finite gradients
    /// before touching any parameter.
    pub fn step(&mut self, store: &ParamStore) -> Result<()> {
        let params: Vec<_> = store.trainable().collect();
        if params.len() != self.names.len() || params.iter().zip(&self.names).any(|(p, n)| &p.name != n) {
            return Err(Error::contract("optimizer state does not match the parameter store"));
        }
        for p in &params {
            if let Some(g) = p.tensor.grad_ref().as_ref() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: p.name.clone(),
                        index,
                    });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad_ref();
            let mut data = p.tensor.data_mut();
            for k in 0..m.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .trainable()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.into_iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.trainable() {
            p.tensor.scale_grad(s);
        }
    }
    norm
}

/// Anything the trainer can fit: per-token scalar predictions from a
/// `[B, N, width]` input.
pub trait Regressor {
    fn predict(&self, x: &Tensor, train_rng: Option<&mut Rng>) -> Result<Tensor>;
    fn params(&self) -> &ParamStore;
    /// Serialized architecture, stored in checkpoints and compared on resume.
    fn describe(&self) -> serde_json::Value;
}

impl Regressor for TaskModel {
    fn predict(&self, x: &Tensor, train_rng: Option<&mut Rng>) -> Result<Tensor> {
        Ok(self.forward(x, train_rng)?.0)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("model config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub step: usize,
    /// Mean training-batch loss since the previous evaluation (at step 0:
    /// the in-distribution evaluation loss, as nothing has been trained).
    pub train_loss: f64,
    pub in_dist_loss: f64,
    pub ood_loss: Option<f64>,
}

/// Combination-provenance counters for the OoD protocol.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hygiene {
    pub train_batches: u64,
    pub train_batches_with_held_out: u64,
    pub in_dist_eval_batches: u64,
    pub in_dist_eval_batches_with_held_out: u64,
    pub ood_eval_batches: u64,
    pub ood_eval_batches_with_train: u64,
}

impl Hygiene {
    pub fn clean(&self) -> bool {
        self.train_batches_with_held_out == 0
            && self.in_dist_eval_batches_with_held_out == 0
            && self.ood_eval_batches_with_train == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, loss: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub model: serde_json::Value,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub parameter_count: usize,
    pub metrics: Vec<Metric>,
    pub final_in_dist_loss: Option<f64>,
    pub final_ood_loss: Option<f64>,
    pub hygiene: Hygiene,
    pub status: RunStatus,
    pub wall_time_secs: f64,
}

/// Resumable training state for one seed.
pub struct Trainer<M: Regressor> {
    pub model: M,
    pub spec: TaskSpec,
    pub config: TrainConfig,
    pub seed: u64,
    pub adam: Adam,
    pub step: usize,
    batch_rng: Rng,
    eval_rng: Rng,
    dropout_rng: Rng,
    metrics: Vec<Metric>,
    loss_sum: f64,
    loss_count: usize,
    hygiene: Hygiene,
    status: RunStatus,
    train_set: HashSet<Combo>,
    test_set: HashSet<Combo>,
    wall_time: f64,
}

impl Trainer<TaskModel> {
    /// Builds the task (α and any OoD split drawn from the seed's task
    /// stream) and a freshly initialised model.
    pub fn for_task(model: &ModelConfig, task: &TaskConfig, config: &TrainConfig, seed: u64) -> Result<Self> {
        let spec = task.build(&mut Rng::with_stream(seed, streams::TASK))?;
        let model = TaskModel::new(model, spec.input_width(), &mut Rng::with_stream(seed, streams::INIT))?;
        Trainer::new(model, spec, config, seed)
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`],
    /// rebuilding the model from the stored configuration.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let config: ModelConfig = serde_json::from_value(ck.model.clone())
            .map_err(|e| Error::Incompatible(format!("model configuration: {e}")))?;
        let model = TaskModel::new(
            &config,
            ck.task.input_width(),
            &mut Rng::with_stream(ck.seed, streams::INIT),
        )?;
        Trainer::restore(model, ck)
    }
}

impl<M: Regressor> Trainer<M> {
    pub fn new(model: M, spec: TaskSpec, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let adam = Adam::new(model.params(), config);
        let (train_set, test_set) = match &spec.ood {
            Some(s) => (s.train.iter().cloned().collect(), s.test.iter().cloned().collect()),
            None => Default::default(),
        };
        Ok(Trainer {
            model,
            spec,
            config: config.clone(),
            seed,
            adam,
            step: 0,
            batch_rng: Rng::with_stream(seed, streams::BATCHES),
            eval_rng: Rng::with_stream(seed, streams::EVAL),
            dropout_rng: Rng::with_stream(seed, streams::DROPOUT),
            metrics: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            hygiene: Hygiene::default(),
            status: RunStatus::Completed,
            train_set,
            test_set,
            wall_time: 0.0,
        })
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    pub fn hygiene(&self) -> &Hygiene {
        &self.hygiene
    }

    pub fn status(&self) -> &RunStatus {
        &self.status
    }

    fn count_foreign(batch: &Batch, forbidden: &HashSet<Combo>) -> bool {
        !forbidden.is_empty() && batch.combos().any(|c| forbidden.contains(c))
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = sample_batch(
            &self.spec,
            &mut self.batch_rng,
            self.config.batch_size,
            self.spec.train_pool(),
        )?;
        self.hygiene.train_batches += 1;
        if Self::count_foreign(&batch, &self.test_set) {
            self.hygiene.train_batches_with_held_out += 1;
        }
        let store = self.model.params();
        store.zero_grad();
        let pred = self.model.predict(&batch.inputs, Some(&mut self.dropout_rng))?;
        let loss = l1_loss(&pred, &batch.targets)?;
        let value = loss.item()?;
        if !value.is_finite() || value > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step: self.step + 1,
                loss: value,
            });
        }
        loss.backward()?;
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(store, c);
        }
        self.adam.step(store)?;
        self.step += 1;
        self.loss_sum += value;
        self.loss_count += 1;
        Ok(value)
    }

    /// Mean L1 loss over `eval_batches` fresh batches from `pool`.
    fn eval_loss(&mut self, pool: Option<&[Combo]>, held_out: bool) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..self.config.eval_batches {
            let batch = sample_batch(&self.spec, &mut self.eval_rng, self.config.eval_batch_size, pool)?;
            if held_out {
                self.hygiene.ood_eval_batches += 1;
                if Self::count_foreign(&batch, &self.train_set) {
                    self.hygiene.ood_eval_batches_with_train += 1;
                }
            } else {
                self.hygiene.in_dist_eval_batches += 1;
                if Self::count_foreign(&batch, &self.test_set) {
                    self.hygiene.in_dist_eval_batches_with_held_out += 1;
                }
            }
            let loss = no_grad(|| l1_loss(&self.model.predict(&batch.inputs, None)?, &batch.targets))?;
            total += loss.item()?;
        }
        Ok(total / self.config.eval_batches as f64)
    }

    /// Evaluates at the current step and appends a metric row.
    pub fn evaluate(&mut self) -> Result<Metric> {
        let train_pool = self.spec.train_pool().map(<[Combo]>::to_vec);
        let test_pool = self.spec.test_pool().map(<[Combo]>::to_vec);
        let in_dist = self.eval_loss(train_pool.as_deref(), false)?;
        let ood = match &test_pool {
            Some(p) => Some(self.eval_loss(Some(p), true)?),
            None => None,
        };
        let train_loss = if self.loss_count == 0 {
            in_dist
        } else {
            self.loss_sum / self.loss_count as f64
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        let m = Metric {
            step: self.step,
            train_loss,
            in_dist_loss: in_dist,
            ood_loss: ood,
        };
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// Trains up to `until` updates (capped at `config.steps`), evaluating
    /// at step 0, every `eval_every` steps and at the final step. A
    /// diverging loss stops the run and is reported in the status.
    pub fn run_until(&mut self, until: usize) -> Result<&RunStatus> {
        let until = until.min(self.config.steps);
        let start = Instant::now();
        if self.metrics.is_empty() {
            self.evaluate()?;
        }
        while self.step < until {
            match self.train_step() {
                Ok(_) => {}
                Err(Error::Diverged { step, loss }) => {
                    self.status = RunStatus::Diverged { step, loss };
                    break;
                }
                Err(e) => return Err(e),
            }
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps {
                self.evaluate()?;
            }
        }
        self.wall_time += start.elapsed().as_secs_f64();
        Ok(&self.status)
    }

    pub fn run(&mut self) -> Result<&RunStatus> {
        self.run_until(self.config.steps)
    }

    pub fn record(&self) -> RunRecord {
        let last = self.metrics.last();
        RunRecord {
            seed: self.seed,
            model: self.model.describe(),
            task: self.spec.clone(),
            train: self.config.clone(),
            parameter_count: self.model.params().count().total,
            metrics: self.metrics.clone(),
            final_in_dist_loss: last.map(|m| m.in_dist_loss),
            final_ood_loss: last.and_then(|m| m.ood_loss),
            hygiene: self.hygiene.clone(),
            status: self.status.clone(),
            wall_time_secs: self.wall_time,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let encode = |v: &[f64]| B64.encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>());
        let params = self
            .model
            .params()
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: encode(&p.tensor.data()),
            })
            .collect();
        let moments = |which: &[Vec<f64>]| {
            self.adam
                .names
                .iter()
                .zip(which)
                .map(|(n, v)| StoredTensor {
                    name: n.clone(),
                    shape: vec![v.len()],
                    data: encode(v),
                })
                .collect()
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            step: self.step,
            model: self.model.describe(),
            task: self.spec.clone(),
            train: self.config.clone(),
            params,
            optimizer: StoredAdam {
                t: self.adam.t,
                m: moments(&self.adam.m),
                v: moments(&self.adam.v),
            },
            rng: StoredRngs {
                batches: self.batch_rng.state(),
                eval: self.eval_rng.state(),
                dropout: self.dropout_rng.state(),
            },
            progress: Progress {
                metrics: self.metrics.clone(),
                loss_sum: self.loss_sum,
                loss_count: self.loss_count,
                hygiene: self.hygiene.clone(),
                status: self.status.clone(),
            },
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.checkpoint())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Loads a checkpoint into a freshly built `model` of the same
    /// architecture and continues from the stored step and RNG positions.
    pub fn restore(model: M, ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.format, ck.version
            )));
        }
        if model.describe() != ck.model {
            return Err(Error::Incompatible(
                "model configuration differs from the checkpoint".into(),
            ));
        }
        let mut t = Trainer::new(model, ck.task.clone(), &ck.train, ck.seed)?;
        let store = t.model.params();
        if store.len() != ck.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                ck.params.len(),
                store.len()
            )));
        }
        for (p, stored) in store.iter().zip(&ck.params) {
            if p.name != stored.name || p.tensor.shape() != stored.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` {:?} does not match stored `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    stored.name,
                    stored.shape
                )));
            }
            let data = stored.decode()?;
            p.tensor.data_mut().copy_from_slice(&data);
        }
        let load_moments = |stored: &[StoredTensor], names: &[String], sizes: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            if stored.len() != names.len() {
                return Err(Error::Incompatible("optimizer state length mismatch".into()));
            }
            stored
                .iter()
                .zip(names.iter().zip(sizes))
                .map(|(s, (n, z))| {
                    if &s.name != n || s.shape != [z.len()] {
                        return Err(Error::Incompatible(format!(
                            "optimizer state for `{}` does not match",
                            s.name
                        )));
                    }
                    s.decode()
                })
                .collect()
        };
        t.adam.m = load_moments(&ck.optimizer.m, &t.adam.names, &t.adam.m)?;
        t.adam.v = load_moments(&ck.optimizer.v, &t.adam.names, &t.adam.v)?;
        t.adam.t = ck.optimizer.t;
        t.step = ck.step;
        t.batch_rng = Rng::from_state(ck.rng.batches);
        t.eval_rng = Rng::from_state(ck.rng.eval);
        t.dropout_rng = Rng::from_state(ck.rng.dropout);
        t.metrics = ck.progress.metrics;
        t.loss_sum = ck.progress.loss_sum;
        t.loss_count = ck.progress.loss_count;
        t.hygiene = ck.progress.hygiene;
        t.status = ck.progress.status;
        Ok(t)
    }
}

/// Losses above this (or non-finite) abort a run.
pub const DIVERGENCE_LOSS: f64 = 1e3;

pub const CHECKPOINT_FORMAT: &str = "comp-attn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of little-endian f64 values.
    pub data: String,
}

impl StoredTensor {
    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Incompatible(format!("payload of `{}`: {e}", self.name)))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 8 {
            return Err(Error::Incompatible(format!(
                "payload of `{}` holds {} bytes, shape {:?} needs {}",
                self.name,
                bytes.len(),
                self.shape,
                expected * 8
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAdam {
    pub t: u64,
    pub m: Vec<StoredTensor>,
    pub v: Vec<StoredTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRngs {
    pub batches: RngState,
    pub eval: RngState,
    pub dropout: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub metrics: Vec<Metric>,
    pub loss_sum: f64,
    pub loss_count: usize,
    pub hygiene: Hygiene,
    pub status: RunStatus,
}

/// On-disk training state. Contains no wall-clock data, so two identical
/// runs write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub model: serde_json::Value,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub params: Vec<StoredTensor>,
    pub optimizer: StoredAdam,
    pub rng: StoredRngs,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))
    }

    /// Loads the stored parameter values into `store` (names and shapes
    /// must match exactly).
    pub fn load_params(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, s) in store.iter().zip(&self.params) {
            if p.name != s.name || p.tensor.shape() != s.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` does not match `{}`",
                    p.name, s.name
                )));
            }
            p.tensor.data_mut().copy_from_slice(&s.decode()?);
        }
        Ok(())
    }
}

/// Metrics as CSV with a fixed header; the OoD column is empty when no
/// split is configured. Floats use Rust's shortest round-trip formatting.
pub fn metrics_csv(metrics: &[Metric]) -> String {
    let mut out = String::from("step,train_loss,in_dist_loss,ood_loss\n");
    for m in metrics {
        let ood = m.ood_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", m.step, m.train_loss, m.in_dist_loss, ood).expect("writing to a String");
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[Metric]) -> Result<()> {
    std::fs::write(path, metrics_csv(metrics))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientFlowReport {
    pub batches: usize,
    /// Largest absolute gradient seen per parameter.
    pub max_abs_grad: Vec<(String, f64)>,
    /// Parameters whose gradient never rose above the dead threshold.
    pub dead: Vec<String>,
    /// Dead parameters that the architecture makes inert by construction.
    pub expected_dead: Vec<String>,
    pub passed: bool,
}

/// Relative threshold (against the largest gradient anywhere in the
/// model) below which a parameter counts as receiving no gradient; this
/// absorbs floating-point residue from terms that cancel analytically.
pub const DEAD_GRADIENT_RATIO: f64 = 1e-10;

/// Runs `batches` fresh batches through the model at its current weights
/// and lists parameters that never receive a gradient. `inert` names
/// parameters known to be unused by construction; the check passes when
/// every dead parameter is among them.
pub fn gradient_flow<M: Regressor>(
    model: &M,
    spec: &TaskSpec,
    rng: &mut Rng,
    batches: usize,
    batch_size: usize,
    inert: &[String],
) -> Result<GradientFlowReport> {
    let store = model.params();
    let mut max_abs: Vec<f64> = vec![0.0; store.len()];
    for _ in 0..batches {
        let batch = sample_batch(spec, rng, batch_size, spec.train_pool())?;
        store.zero_grad();
        let loss = l1_loss(&model.predict(&batch.inputs, None)?, &batch.targets)?;
        loss.backward()?;
        for (slot, p) in max_abs.iter_mut().zip(store.iter()) {
            if let Some(g) = p.tensor.grad_ref().as_ref() {
                *slot = g.iter().fold(*slot, |a, v| a.max(v.abs()));
            }
        }
    }
    store.zero_grad();
    let global = max_abs.iter().copied().fold(0.0, f64::max);
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let dead: Vec<String> = names
        .iter()
        .zip(&max_abs)
        .filter(|(_, &g)| !(g > DEAD_GRADIENT_RATIO * global))
        .map(|(n, _)| n.clone())
        .collect();
    let expected_dead: Vec<String> = dead.iter().filter(|n| inert.contains(n)).cloned().collect();
    Ok(GradientFlowReport {
        batches,
        max_abs_grad: names.into_iter().zip(max_abs).collect(),
        passed: global > 0.0 && expected_dead.len() == dead.len(),
        dead,
        expected_dead,
    })
}
