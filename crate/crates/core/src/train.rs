//! Maximum-likelihood training with AdaMax.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{join_f64, ConfigError, KvMap};
use crate::data::Example;
use crate::diffcore::{Array, Graph, ParamStore};
use crate::model::{batch_trajectories, Checkpoint, CheckpointError, HbaFlowModel, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged: {}", .0.summary())]
    Diverged(Box<Diagnostics>),
    #[error("{0}")]
    Shape(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// State captured when training hits a non-finite value.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub alphas: Vec<f64>,
    pub max_abs_param: f64,
    pub detail: String,
}

impl Diagnostics {
    fn summary(&self) -> String {
        format!(
            "epoch {} batch {} ({}), alpha {}, max |param| {:e}",
            self.epoch,
            self.batch,
            self.detail,
            join_f64(&self.alphas),
            self.max_abs_param
        )
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("epoch", self.epoch);
        kv.set("batch", self.batch);
        kv.set("step", self.step);
        kv.set("alpha", join_f64(&self.alphas));
        kv.set("max_abs_param", format!("{:?}", self.max_abs_param));
        kv.set("detail", self.detail.replace('\n', " "));
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Epochs between validation passes.
    pub eval_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub val_fraction: f64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            eval_interval: 1,
            checkpoint_dir: None,
            val_fraction: 0.1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.epochs", self.epochs);
        kv.set("train.lr", format!("{:?}", self.lr));
        kv.set("train.beta1", format!("{:?}", self.beta1));
        kv.set("train.beta2", format!("{:?}", self.beta2));
        kv.set("train.eps", format!("{:?}", self.eps));
        kv.set("train.clip_norm", format!("{:?}", self.clip_norm));
        kv.set("train.seed", self.seed);
        kv.set("train.eval_interval", self.eval_interval);
        kv.set("train.val_fraction", format!("{:?}", self.val_fraction));
        kv.set("train.max_steps", self.max_steps.map_or("none".to_string(), |s| s.to_string()));
        kv
    }

    /// Read `train.*` keys (checkpoint_dir is set by the caller).
    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let d = Self::default();
        let max_steps = match kv.raw("train.max_steps") {
            None | Some("none") => None,
            Some(_) => Some(kv.require::<u64>("train.max_steps")?),
        };
        let cfg = Self {
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            epochs: kv.get_or("train.epochs", d.epochs)?,
            lr: kv.get_or("train.lr", d.lr)?,
            beta1: kv.get_or("train.beta1", d.beta1)?,
            beta2: kv.get_or("train.beta2", d.beta2)?,
            eps: kv.get_or("train.eps", d.eps)?,
            clip_norm: kv.get_or("train.clip_norm", d.clip_norm)?,
            seed: kv.get_or("train.seed", d.seed)?,
            eval_interval: kv.get_or("train.eval_interval", d.eval_interval)?,
            checkpoint_dir: None,
            val_fraction: kv.get_or("train.val_fraction", d.val_fraction)?,
            max_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, v: String, reason: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                value: v,
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("train.batch_size", "0".into(), "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("train.lr", self.lr.to_string(), "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1", format!("{}, {}", self.beta1, self.beta2), "betas must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm", self.clip_norm.to_string(), "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("train.eval_interval", "0".into(), "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("train.val_fraction", self.val_fraction.to_string(), "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// AdaMax moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array>,
    pub u: Vec<Array>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.values().iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            u: zeros(),
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }
}

/// One AdaMax update. Parameters flagged in `frozen` are left untouched.
pub fn adamax_step(
    params: &mut ParamStore,
    grads: &[Array],
    state: &mut OptimizerState,
    frozen: &[bool],
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} gradients and {} moment arrays for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let lr_t = state.lr / (1.0 - state.beta1.powi(state.step.min(i32::MAX as u64) as i32));
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let (m, u, g) = (state.m[i].data_mut(), state.u[i].data_mut(), grads[i].data());
        for j in 0..g.len() {
            u[j] = (b2 * u[j]).max(g[j].abs());
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        }
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        let m = state.m[i].data();
        let u = state.u[i].data();
        for (j, v) in p.data_mut().iter_mut().enumerate() {
            *v -= lr_t * m[j] / (u[j] + eps);
        }
    }
    Ok(())
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn batch_arrays(batch: &[&Example]) -> Result<(Array, Array), ModelError> {
    Ok((
        batch_trajectories(batch.iter().map(|e| &e.y))?,
        batch_trajectories(batch.iter().map(|e| &e.x))?,
    ))
}

/// `-mean log p(y | x)` over the batch.
pub fn nll_batch(model: &HbaFlowModel, batch: &[&Example]) -> Result<f64, ModelError> {
    let (y, x) = batch_arrays(batch)?;
    let ll = model.log_likelihood_batch(&y, &x)?;
    Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
}

/// Batch NLL and its gradient for every parameter.
pub fn nll_and_grads(model: &HbaFlowModel, batch: &[&Example]) -> Result<(f64, Vec<Array>), ModelError> {
    let (y, x) = batch_arrays(batch)?;
    let mut g = Graph::new(model.params(), true);
    let yv = g.tape.constant(y);
    let xv = g.tape.constant(x);
    let ll = model.log_likelihood_on_tape(&mut g, yv, xv)?;
    let mean = g.tape.mean(ll);
    let loss = g.tape.neg(mean);
    let grads = g.tape.backward(loss)?;
    Ok((g.tape.value(loss).item(), g.param_grads(&grads)))
}

/// Mean NLL over a set, evaluated in chunks; summation order is fixed.
pub fn mean_nll(model: &HbaFlowModel, examples: &[&Example], chunk: usize) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for c in examples.chunks(chunk.max(1)) {
        total += nll_batch(model, c)? * c.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub alphas: Vec<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_nll,val_nll,alpha,wall_seconds";

impl EpochMetrics {
    /// `epoch,train_nll,val_nll,alpha,wall_seconds`; per-scale alphas joined by `;`.
    pub fn csv_line(&self) -> String {
        let alpha = self
            .alphas
            .iter()
            .map(|a| format!("{a:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{:.6},{:.6},{},{:.3}",
            self.epoch, self.train_nll, self.val_nll, alpha, self.wall_seconds
        )
    }
}

/// Training loop state; everything needed to resume lives in the checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: HbaFlowModel,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best: Option<HbaFlowModel>,
    pub history: Vec<EpochMetrics>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Trainer {
    pub fn new(model: HbaFlowModel, cfg: TrainConfig) -> Self {
        let opt = OptimizerState::from_config(model.params(), &cfg);
        Self {
            model,
            opt,
            cfg,
            epoch: 0,
            best_val: f64::INFINITY,
            best: None,
            history: Vec::new(),
        }
    }

    fn diagnostics(&self, batch: usize, detail: String) -> TrainError {
        TrainError::Diverged(Box::new(Diagnostics {
            epoch: self.epoch + 1,
            batch,
            step: self.opt.step,
            alphas: self.model.alphas(),
            max_abs_param: self
                .model
                .params()
                .values()
                .iter()
                .flat_map(|a| a.data())
                .fold(0.0, |m: f64, v| if m.is_nan() || v.is_nan() { f64::NAN } else { m.max(v.abs()) }),
            detail,
        }))
    }

    fn steps_exhausted(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.opt.step >= m)
    }

    /// One optimizer step on `batch`; returns the batch NLL before the update.
    pub fn step(&mut self, batch: &[&Example], batch_id: usize) -> Result<f64, TrainError> {
        let (loss, mut grads) = match nll_and_grads(&self.model, batch) {
            Ok(v) => v,
            Err(ModelError::Coupling(e)) => return Err(self.diagnostics(batch_id, e.to_string())),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() {
            return Err(self.diagnostics(batch_id, format!("loss {loss}")));
        }
        if let Some((name, _)) = self.model.params().iter().zip(&grads).find(|(_, g)| !g.all_finite()) {
            let name = name.0.to_string();
            return Err(self.diagnostics(batch_id, format!("non-finite gradient for {name}")));
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        let frozen = self.model.frozen();
        adamax_step(self.model.params_mut(), &grads, &mut self.opt, &frozen)?;
        if self.model.params().values().iter().any(|a| !a.all_finite()) {
            return Err(self.diagnostics(batch_id, "non-finite parameter after update".into()));
        }
        Ok(loss)
    }

    /// Train one epoch, then validate if due. Returns `None` once the step
    /// budget is exhausted before any batch ran.
    pub fn run_epoch(&mut self, train: &[&Example], val: &[&Example]) -> Result<Option<EpochMetrics>, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Shape("empty training set".into()));
        }
        if self.steps_exhausted() {
            return Ok(None);
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.cfg.seed, self.epoch));
        let mut total = 0.0;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            if self.steps_exhausted() {
                break;
            }
            let batch: Vec<&Example> = idx.iter().map(|&i| train[i]).collect();
            total += self.step(&batch, b)? * batch.len() as f64;
            seen += batch.len();
        }
        self.epoch += 1;
        let due = self.epoch % self.cfg.eval_interval == 0 || self.steps_exhausted() || self.epoch == self.cfg.epochs;
        let val_nll = if due && !val.is_empty() {
            mean_nll(&self.model, val, self.cfg.batch_size.max(64))?
        } else {
            f64::NAN
        };
        if val_nll.is_finite() && val_nll < self.best_val {
            self.best_val = val_nll;
            self.best = Some(self.model.clone());
        }
        let m = EpochMetrics {
            epoch: self.epoch,
            train_nll: total / seen.max(1) as f64,
            val_nll,
            alphas: self.model.alphas(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.history.push(m.clone());
        Ok(Some(m))
    }

    /// Run the remaining epochs, writing one metrics line per epoch and
    /// keeping `last.ckpt` / `best.ckpt` in the checkpoint directory.
    pub fn fit(&mut self, train: &[&Example], val: &[&Example], log: &mut dyn Write) -> Result<(), TrainError> {
        if self.epoch == 0 {
            writeln!(log, "{METRICS_HEADER}")?;
        }
        while self.epoch < self.cfg.epochs {
            let Some(m) = self.run_epoch(train, val)? else {
                break;
            };
            writeln!(log, "{}", m.csv_line())?;
            if let Some(dir) = &self.cfg.checkpoint_dir {
                crate::model::write_checkpoint(&dir.join("last.ckpt"), &self.to_checkpoint())?;
                if let Some(best) = &self.best {
                    if self.history.last().is_some_and(|h| h.val_nll == self.best_val) {
                        crate::model::save_checkpoint(&dir.join("best.ckpt"), best)?;
                    }
                }
            }
            if self.steps_exhausted() {
                break;
            }
        }
        Ok(())
    }

    /// The best-validation model, or the current one if never validated.
    pub fn best_model(&self) -> &HbaFlowModel {
        self.best.as_ref().unwrap_or(&self.model)
    }

    /// Model parameters, optimizer moments and loop counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.header.merge(&self.cfg.to_kv());
        ckpt.header.set("state.step", self.opt.step);
        ckpt.header.set("state.epoch", self.epoch);
        ckpt.header.set("state.best_val", format!("{:?}", self.best_val));
        for (i, name) in self.model.params().names().iter().enumerate() {
            ckpt.arrays.push((format!("opt.m.{name}"), self.opt.m[i].clone()));
            ckpt.arrays.push((format!("opt.u.{name}"), self.opt.u[i].clone()));
        }
        ckpt
    }

    /// Resume from a checkpoint written by [`Trainer::to_checkpoint`].
    /// Loop settings come from `cfg`; counters and moments from the file.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self, TrainError> {
        let model = HbaFlowModel::from_checkpoint(ckpt)?;
        let mut t = Trainer::new(model, cfg);
        t.opt.step = ckpt.header.require("state.step")?;
        t.epoch = ckpt.header.require("state.epoch")?;
        t.best_val = ckpt.header.get_or("state.best_val", f64::INFINITY)?;
        for (i, name) in t.model.params().names().iter().enumerate() {
            for (prefix, dst) in [("opt.m.", &mut t.opt.m[i]), ("opt.u.", &mut t.opt.u[i])] {
                let a = ckpt
                    .array(&format!("{prefix}{name}"))
                    .ok_or_else(|| CheckpointError::Format(format!("missing optimizer state for {name}")))?;
                if a.shape() != dst.shape() {
                    return Err(CheckpointError::Format(format!("optimizer state for {name} has the wrong shape")).into());
                }
                *dst = a.clone();
            }
        }
        Ok(t)
    }
}
