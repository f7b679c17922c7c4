//! The block-autoregressive flow over Haar scales.
//!
//! A future trajectory `y` is decomposed into `[f_1, ..., f_K, c_K]`. Each
//! fine component `f_k` passes through a coupling stack conditioned on the
//! coarse trajectory `c_k` and the encoded past `x`; the coarsest trajectory
//! passes through its own stack conditioned on `x` alone. The resulting
//! latents are scored under either a fixed standard normal or the
//! scale-conditional Gaussian prior, and the log-likelihood adds every
//! Haar and coupling log-determinant.
//!
//! Sampling runs coarse to fine: one stage for `c_K`, then one per scale,
//! so `K + 1` sequential stages in total.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ConfigError, KvMap};
use crate::coupling::{
    ConditionerConfig, ContextEncoding, CouplingError, CouplingStack, StackConfig, TransformKind, WaveNet,
};
use crate::diffcore::{Array, DiffError, Graph, ParamId, ParamStore, Var};
use crate::haar::{self, HaarError, HaarPyramid, Trajectory, DEFAULT_MIX_EPSILON};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};

/// Bounds on the predicted prior log-standard-deviation.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Haar(#[from] HaarError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    /// Fixed `N(0, I)` over every latent.
    Gaussian,
    /// Scale-conditional Gaussians `p(z_k | c_k, x)`.
    Hba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    Shared,
    PerScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub t_obs: usize,
    pub t_fut: usize,
    pub scales: usize,
    pub stack: StackConfig,
    pub prior: PriorKind,
    pub alpha_init: f64,
    pub alpha_mode: AlphaMode,
    pub learn_alpha: bool,
    pub context_dim: usize,
    pub encoder_channels: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            t_obs: 8,
            t_fut: 16,
            scales: 2,
            stack: StackConfig::default(),
            prior: PriorKind::Hba,
            alpha_init: 0.5,
            alpha_mode: AlphaMode::Shared,
            learn_alpha: true,
            context_dim: 16,
            encoder_channels: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("model.dim", self.dim);
        kv.set("model.t_obs", self.t_obs);
        kv.set("model.t_fut", self.t_fut);
        kv.set("model.scales", self.scales);
        kv.set("model.steps", self.stack.steps);
        kv.set("model.transform", self.stack.kind.name());
        kv.set("model.channels", self.stack.conditioner.channels);
        kv.set("model.layers", self.stack.conditioner.layers);
        kv.set("model.kernel", self.stack.conditioner.kernel);
        kv.set(
            "model.prior",
            match self.prior {
                PriorKind::Gaussian => "gaussian",
                PriorKind::Hba => "hba",
            },
        );
        kv.set("model.alpha_init", format!("{:?}", self.alpha_init));
        kv.set(
            "model.alpha_mode",
            match self.alpha_mode {
                AlphaMode::Shared => "shared",
                AlphaMode::PerScale => "per_scale",
            },
        );
        kv.set("model.learn_alpha", self.learn_alpha);
        kv.set("model.context_dim", self.context_dim);
        kv.set("model.encoder_channels", self.encoder_channels);
        kv.set("model.init_seed", self.init_seed);
        kv
    }

    /// Read `model.*` keys, falling back to defaults for absent ones.
    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let d = Self::default();
        let invalid = |key: &str, value: &str, reason: &str| ConfigError::Invalid {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        };
        let kind = match kv.raw("model.transform") {
            None => d.stack.kind,
            Some(s) => TransformKind::parse(s).ok_or_else(|| invalid("model.transform", s, "expected affine or nlsq"))?,
        };
        let prior = match kv.raw("model.prior") {
            None => d.prior,
            Some("gaussian") => PriorKind::Gaussian,
            Some("hba") => PriorKind::Hba,
            Some(s) => return Err(invalid("model.prior", s, "expected gaussian or hba")),
        };
        let alpha_mode = match kv.raw("model.alpha_mode") {
            None => d.alpha_mode,
            Some("shared") => AlphaMode::Shared,
            Some("per_scale") => AlphaMode::PerScale,
            Some(s) => return Err(invalid("model.alpha_mode", s, "expected shared or per_scale")),
        };
        let cfg = Self {
            dim: kv.get_or("model.dim", d.dim)?,
            t_obs: kv.get_or("model.t_obs", d.t_obs)?,
            t_fut: kv.get_or("model.t_fut", d.t_fut)?,
            scales: kv.get_or("model.scales", d.scales)?,
            stack: StackConfig {
                steps: kv.get_or("model.steps", d.stack.steps)?,
                kind,
                conditioner: ConditionerConfig {
                    channels: kv.get_or("model.channels", d.stack.conditioner.channels)?,
                    layers: kv.get_or("model.layers", d.stack.conditioner.layers)?,
                    kernel: kv.get_or("model.kernel", d.stack.conditioner.kernel)?,
                },
            },
            prior,
            alpha_init: kv.get_or("model.alpha_init", d.alpha_init)?,
            alpha_mode,
            learn_alpha: kv.get_or("model.learn_alpha", d.learn_alpha)?,
            context_dim: kv.get_or("model.context_dim", d.context_dim)?,
            encoder_channels: kv.get_or("model.encoder_channels", d.encoder_channels)?,
            init_seed: kv.get_or("model.init_seed", d.init_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, value: String, reason: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.dim == 0 {
            return invalid("model.dim", self.dim.to_string(), "must be positive");
        }
        if self.t_obs == 0 {
            return invalid("model.t_obs", self.t_obs.to_string(), "must be positive");
        }
        if let Err(e) = haar::check_scales(self.t_fut, self.scales) {
            return invalid("model.scales", self.scales.to_string(), &e.to_string());
        }
        if self.stack.steps == 0 || self.stack.steps % 2 != 0 {
            return invalid("model.steps", self.stack.steps.to_string(), "must be a positive even number");
        }
        if self.stack.conditioner.kernel % 2 == 0 {
            return invalid("model.kernel", self.stack.conditioner.kernel.to_string(), "must be odd");
        }
        if !(0.0..1.0 - DEFAULT_MIX_EPSILON).contains(&self.alpha_init) {
            return invalid("model.alpha_init", self.alpha_init.to_string(), "must lie in [0, 0.999)");
        }
        Ok(())
    }
}

/// Per-scale latents `z_1..z_K` (the last is `z^f_K`) plus the coarsest `z^c_K`,
/// channel-major `[batch, dim, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub fines: Vec<Array>,
    pub coarse: Array,
}

/// Diagonal Gaussian parameters for one latent block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: Array,
    pub log_std: Array,
}

impl ConditionalGaussian {
    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mean: Array::zeros(shape),
            log_std: Array::zeros(shape),
        }
    }

    /// Log-density per batch row.
    pub fn log_prob(&self, z: &Array) -> Vec<f64> {
        let batch = z.shape()[0];
        let block = z.len() / batch;
        (0..batch)
            .map(|b| {
                (b * block..(b + 1) * block)
                    .map(|i| {
                        let s = self.log_std.data()[i];
                        let u = (z.data()[i] - self.mean.data()[i]) * (-s).exp();
                        -0.5 * u * u - s - HALF_LOG_2PI
                    })
                    .sum()
            })
            .collect()
    }
}

/// How the coarse conditioning trajectory of each scale is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// `c_k` from the forward recursion on `y`.
    Forward,
    /// `c_k` rebuilt from `[f_{k+1}, ..., f_K, c_K]` through the inverse transform.
    ReconstructedTail,
}

/// The additive pieces of one log-likelihood evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodTerms {
    /// `log p(f_k | c_k, x)` for every scale.
    pub fine: Vec<f64>,
    /// `log p(c_K | x)`.
    pub coarse: f64,
    /// Haar log-determinants per scale.
    pub haar: Vec<f64>,
}

impl LikelihoodTerms {
    pub fn total(&self) -> f64 {
        self.fine.iter().sum::<f64>() + self.coarse + self.haar.iter().sum::<f64>()
    }
}

/// Instrumentation of one sampling call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SamplingTrace {
    /// Sequential coarse-to-fine stages executed.
    pub stages: usize,
}

#[derive(Clone, Debug)]
struct PastEncoder {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    pooled: (ParamId, ParamId),
    flat: (ParamId, ParamId),
}

fn normal_array(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
    )
    .expect("shape")
}

impl PastEncoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, c, e) = (cfg.dim, cfg.encoder_channels, cfg.context_dim);
        let mut layer = |name: &str, shape: &[usize], fan_in: usize| {
            let w = store.add(format!("encoder.{name}.w"), normal_array(shape, (1.0 / fan_in as f64).sqrt(), rng));
            let b = store.add(format!("encoder.{name}.b"), Array::zeros(&[shape[0]]));
            (w, b)
        };
        Self {
            conv1: layer("conv1", &[c, d, 3], d * 3),
            conv2: layer("conv2", &[c, c, 3], c * 3),
            pooled: layer("pooled", &[e, c], c),
            flat: layer("flat", &[e, d * cfg.t_obs], d * cfg.t_obs),
        }
    }

    /// `[batch, dim, t_obs] -> [batch, context_dim]`.
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let s = g.tape.shape(x).to_vec();
        let (w, b) = (g.param(self.conv1.0), g.param(self.conv1.1));
        let h = g.tape.conv1d(x, w, b, 1)?;
        let h = g.tape.tanh(h);
        let (w, b) = (g.param(self.conv2.0), g.param(self.conv2.1));
        let h = g.tape.conv1d(h, w, b, 2)?;
        let h = g.tape.tanh(h);
        let pooled = g.tape.mean_axis(h, 2)?;
        let (w, b) = (g.param(self.pooled.0), g.param(self.pooled.1));
        let a = g.tape.affine(pooled, w, b)?;
        let flat = g.tape.reshape(x, &[s[0], s[1] * s[2]])?;
        let (w, b) = (g.param(self.flat.0), g.param(self.flat.1));
        let l = g.tape.affine(flat, w, b)?;
        g.tape.add(a, l)
    }
}

/// Stack trajectories into a channel-major `[batch, dim, len]` array.
pub fn batch_trajectories<'a>(items: impl IntoIterator<Item = &'a Trajectory>) -> Result<Array, ModelError> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut batch = 0;
    for t in items {
        let s = (t.dim(), t.len());
        if *shape.get_or_insert(s) != s {
            return Err(ModelError::Input(format!(
                "batch mixes trajectory shapes {:?} and {s:?}",
                shape.unwrap()
            )));
        }
        data.extend_from_slice(t.to_channel_major().data());
        batch += 1;
    }
    let (d, l) = shape.ok_or_else(|| ModelError::Input("empty batch".into()))?;
    Ok(Array::new(vec![batch, d, l], data)?)
}

/// Fixed position channel: a ramp over `[-1, 1]`.
fn position_channel(len: usize) -> Array {
    let vals = if len == 1 {
        vec![0.0]
    } else {
        (0..len).map(|i| -1.0 + 2.0 * i as f64 / (len - 1) as f64).collect()
    };
    Array::new(vec![1, 1, len], vals).expect("shape")
}

/// The full flow model: parameters plus the structure that indexes them.
#[derive(Clone, Debug)]
pub struct HbaFlowModel {
    config: ModelConfig,
    params: ParamStore,
    mix: ParamId,
    encoder: PastEncoder,
    fine_stacks: Vec<CouplingStack>,
    coarse_stack: CouplingStack,
    fine_priors: Vec<WaveNet>,
    coarse_prior: Option<WaveNet>,
}

impl HbaFlowModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let (d, e) = (config.dim, config.context_dim);
        let mix_len = match config.alpha_mode {
            AlphaMode::Shared => 1,
            AlphaMode::PerScale => config.scales,
        };
        let u = haar::MixParam::from_alpha(config.alpha_init)?.unconstrained;
        let mix = params.add("mix.u", Array::full(&[mix_len], u));
        let encoder = PastEncoder::new(&mut params, &config, &mut rng);
        let fine_ctx = d + e + 1;
        let coarse_ctx = e + 1;
        let mut fine_stacks = Vec::with_capacity(config.scales);
        for k in 1..=config.scales {
            fine_stacks.push(CouplingStack::new(
                &mut params,
                &format!("fine{k}"),
                d,
                fine_ctx,
                k,
                &config.stack,
                &mut rng,
            )?);
        }
        let coarse_stack = CouplingStack::new(&mut params, "coarse", d, coarse_ctx, 0, &config.stack, &mut rng)?;
        let (fine_priors, coarse_prior) = match config.prior {
            PriorKind::Gaussian => (Vec::new(), None),
            PriorKind::Hba => {
                let cc = &config.stack.conditioner;
                let fines = (1..=config.scales)
                    .map(|k| WaveNet::new(&mut params, &format!("prior.fine{k}"), fine_ctx, 2 * d, cc, &mut rng))
                    .collect();
                let coarse = WaveNet::new(&mut params, "prior.coarse", coarse_ctx, 2 * d, cc, &mut rng);
                (fines, Some(coarse))
            }
        };
        Ok(Self {
            config,
            params,
            mix,
            encoder,
            fine_stacks,
            coarse_stack,
            fine_priors,
            coarse_prior,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scales(&self) -> usize {
        self.config.scales
    }

    /// Parameters the optimizer must leave untouched.
    pub fn frozen(&self) -> Vec<bool> {
        (0..self.params.len())
            .map(|i| !self.config.learn_alpha && i == self.mix.0)
            .collect()
    }

    /// Realized mixing parameter for every scale.
    pub fn alphas(&self) -> Vec<f64> {
        let u = self.params.get(self.mix).data();
        (0..self.config.scales)
            .map(|k| {
                haar::MixParam {
                    unconstrained: u[if u.len() == 1 { 0 } else { k }],
                    epsilon: DEFAULT_MIX_EPSILON,
                }
                .alpha()
            })
            .collect()
    }

    /// Overwrite the mixing parameter(s) with a realized value.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<(), ModelError> {
        let u = haar::MixParam::from_alpha(alpha)?.unconstrained;
        self.params.get_mut(self.mix).data_mut().fill(u);
        Ok(())
    }

    fn alpha_on_tape(&self, g: &mut Graph, k: usize) -> Result<Var, DiffError> {
        let u = g.param(self.mix);
        let u = if g.tape.shape(u)[0] == 1 { u } else { g.tape.slice(u, 0, k, 1, 1)? };
        let s = g.tape.sigmoid(u);
        Ok(g.tape.scale(s, 1.0 - DEFAULT_MIX_EPSILON))
    }

    /// Conditioning features `[coarse?, encoding, position]` of length `len`.
    fn context_on_tape(&self, g: &mut Graph, coarse: Option<Var>, enc: Var, len: usize) -> Result<Var, DiffError> {
        let batch = g.tape.shape(enc)[0];
        let e = self.config.context_dim;
        let enc3 = g.tape.reshape(enc, &[batch, e, 1])?;
        let enc_b = g.tape.broadcast_to(enc3, &[batch, e, len])?;
        let pos = g.tape.constant(position_channel(len));
        let pos_b = g.tape.broadcast_to(pos, &[batch, 1, len])?;
        match coarse {
            Some(c) => g.tape.concat(&[c, enc_b, pos_b], 1),
            None => g.tape.concat(&[enc_b, pos_b], 1),
        }
    }

    /// Latent log-density per batch row: `[batch]`.
    fn prior_on_tape(&self, g: &mut Graph, net: Option<&WaveNet>, z: Var, ctx: Var) -> Result<Var, DiffError> {
        let d = self.config.dim;
        let lp = match net {
            None => {
                let sq = g.tape.square(z);
                let sq = g.tape.scale(sq, -0.5);
                g.tape.add_scalar(sq, -HALF_LOG_2PI)
            }
            Some(net) => {
                let raw = net.forward(g, ctx)?;
                let mean = g.tape.slice(raw, 1, 0, 1, d)?;
                let log_std = g.tape.slice(raw, 1, d, 1, d)?;
                let log_std = g.tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
                let diff = g.tape.sub(z, mean)?;
                let neg = g.tape.neg(log_std);
                let inv_std = g.tape.exp(neg);
                let u = g.tape.mul(diff, inv_std)?;
                let u2 = g.tape.square(u);
                let u2 = g.tape.scale(u2, -0.5);
                let t = g.tape.sub(u2, log_std)?;
                g.tape.add_scalar(t, -HALF_LOG_2PI)
            }
        };
        let lp = g.tape.sum_axis(lp, 2)?;
        g.tape.sum_axis(lp, 1)
    }

    fn fine_prior(&self, k: usize) -> Option<&WaveNet> {
        self.fine_priors.get(k)
    }

    fn check_inputs(&self, y_shape: &[usize], x_shape: &[usize]) -> Result<(), ModelError> {
        let d = self.config.dim;
        if y_shape.len() != 3 || y_shape[1] != d || x_shape.len() != 3 || x_shape[1] != d || x_shape[0] != y_shape[0] {
            return Err(ModelError::Input(format!(
                "future {y_shape:?} / past {x_shape:?} do not match dimension {d}"
            )));
        }
        if x_shape[2] != self.config.t_obs {
            return Err(ModelError::Input(format!(
                "past has {} steps, the model expects {}",
                x_shape[2], self.config.t_obs
            )));
        }
        haar::check_scales(y_shape[2], self.config.scales)?;
        Ok(())
    }

    /// Differentiable log-likelihood of every row: `[batch]`.
    ///
    /// `y: [batch, dim, T]`, `x: [batch, dim, t_obs]`.
    pub fn log_likelihood_on_tape(&self, g: &mut Graph, y: Var, x: Var) -> Result<Var, ModelError> {
        self.check_inputs(g.tape.shape(y), g.tape.shape(x))?;
        let d = self.config.dim;
        let enc = self.encoder.forward(g, x)?;
        let mut cur = y;
        let mut total: Option<Var> = None;
        let mut add = |g: &mut Graph, v: Var| -> Result<(), DiffError> {
            total = Some(match total {
                None => v,
                Some(t) => g.tape.add(t, v)?,
            });
            Ok(())
        };
        for k in 0..self.config.scales {
            let len = g.tape.shape(cur)[2];
            let alpha = self.alpha_on_tape(g, k)?;
            let (f, c) = haar::forward_on_tape(&mut g.tape, cur, alpha)?;
            let ld_haar = haar::logdet_on_tape(&mut g.tape, alpha, len, d);
            let ctx = self.context_on_tape(g, Some(c), enc, len / 2)?;
            let (z, ld) = self.fine_stacks[k].forward_on_tape(g, f, ctx)?;
            let lp = self.prior_on_tape(g, self.fine_prior(k), z, ctx)?;
            add(g, ld_haar)?;
            add(g, ld)?;
            add(g, lp)?;
            cur = c;
        }
        let len = g.tape.shape(cur)[2];
        let ctx = self.context_on_tape(g, None, enc, len)?;
        let (z, ld) = self.coarse_stack.forward_on_tape(g, cur, ctx)?;
        let lp = self.prior_on_tape(g, self.coarse_prior.as_ref(), z, ctx)?;
        add(g, ld)?;
        add(g, lp)?;
        Ok(total.expect("at least one term"))
    }

    /// Log-likelihood per row without gradients.
    pub fn log_likelihood_batch(&self, y: &Array, x: &Array) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params, false);
        let yv = g.tape.constant(y.clone());
        let xv = g.tape.constant(x.clone());
        let ll = self.log_likelihood_on_tape(&mut g, yv, xv)?;
        Ok(g.tape.value(ll).data().to_vec())
    }

    /// `log p(y | x)` in nats.
    pub fn log_likelihood(&self, y: &Trajectory, x: &Trajectory) -> Result<f64, ModelError> {
        Ok(self.log_likelihood_batch(&y.to_channel_major(), &x.to_channel_major())?[0])
    }

    /// Fixed-width encoding of the observed past: `[batch, context_dim]`.
    pub fn encode_past(&self, x: &Trajectory) -> Result<ContextEncoding, ModelError> {
        let a = x.to_channel_major();
        if x.dim() != self.config.dim || x.len() != self.config.t_obs {
            return Err(ModelError::Input(format!(
                "past of {} steps in {} dimensions, the model expects {} x {}",
                x.len(),
                x.dim(),
                self.config.t_obs,
                self.config.dim
            )));
        }
        Ok(ContextEncoding::new(self.encode_past_batch(&a)?)?)
    }

    fn encode_past_batch(&self, x: &Array) -> Result<Array, ModelError> {
        let mut g = Graph::new(&self.params, false);
        let xv = g.tape.constant(x.clone());
        let enc = self.encoder.forward(&mut g, xv)?;
        Ok(g.tape.value(enc).clone())
    }

    fn context(&self, coarse: Option<&Array>, enc: &Array, len: usize) -> Result<ContextEncoding, ModelError> {
        let mut g = Graph::new(&self.params, false);
        let ev = g.tape.constant(enc.clone());
        let cv = coarse.map(|c| g.tape.constant(c.clone()));
        let ctx = self.context_on_tape(&mut g, cv, ev, len)?;
        Ok(ContextEncoding::new(g.tape.value(ctx).clone())?)
    }

    fn prior_params(&self, net: Option<&WaveNet>, ctx: &ContextEncoding) -> Result<ConditionalGaussian, ModelError> {
        let s = ctx.features.shape();
        let shape = [s[0], self.config.dim, s[2]];
        let Some(net) = net else {
            return Ok(ConditionalGaussian::standard(&shape));
        };
        let d = self.config.dim;
        let mut g = Graph::new(&self.params, false);
        let cv = g.tape.constant(ctx.features.clone());
        let raw = net.forward(&mut g, cv)?;
        let mean = g.tape.slice(raw, 1, 0, 1, d)?;
        let log_std = g.tape.slice(raw, 1, d, 1, d)?;
        let log_std = g.tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        Ok(ConditionalGaussian {
            mean: g.tape.value(mean).clone(),
            log_std: g.tape.value(log_std).clone(),
        })
    }

    /// Scale-conditional prior for fine scale `k` (0-based) given its context.
    pub fn fine_prior_params(&self, k: usize, ctx: &ContextEncoding) -> Result<ConditionalGaussian, ModelError> {
        self.prior_params(self.fine_prior(k), ctx)
    }

    /// Coarse trajectories `c_1..c_K` of `y` from the forward recursion.
    fn coarse_chain(&self, y: &Array) -> Result<(Vec<Array>, Vec<Array>), ModelError> {
        let alphas = self.alphas();
        let mut fines = Vec::new();
        let mut coarse = Vec::new();
        let mut cur = y.clone();
        for a in alphas {
            let (f, c) = haar::forward_batched(&cur, a)?;
            fines.push(f);
            coarse.push(c.clone());
            cur = c;
        }
        Ok((fines, coarse))
    }

    /// Each additive term of `log p(y | x)` for a single pair, with the
    /// conditioning trajectories obtained as selected.
    pub fn log_likelihood_terms(
        &self,
        y: &Trajectory,
        x: &Trajectory,
        conditioning: Conditioning,
    ) -> Result<LikelihoodTerms, ModelError> {
        let ya = y.to_channel_major();
        let xa = x.to_channel_major();
        self.check_inputs(ya.shape(), xa.shape())?;
        let alphas = self.alphas();
        let k_max = self.config.scales;
        let (fines, forward_coarse) = self.coarse_chain(&ya)?;
        let coarse = match conditioning {
            Conditioning::Forward => forward_coarse,
            Conditioning::ReconstructedTail => {
                let c_top = forward_coarse[k_max - 1].clone();
                let mut rebuilt = vec![c_top.clone(); k_max];
                let mut cur = c_top;
                for k in (0..k_max - 1).rev() {
                    cur = haar::inverse_batched(&fines[k + 1], &cur, alphas[k + 1])?;
                    rebuilt[k] = cur.clone();
                }
                rebuilt
            }
        };
        let enc = self.encode_past_batch(&xa)?;
        let mut fine_terms = Vec::with_capacity(k_max);
        let mut haar_terms = Vec::with_capacity(k_max);
        for k in 0..k_max {
            let len = fines[k].shape()[2];
            let ctx = self.context(Some(&coarse[k]), &enc, len)?;
            let (z, ld) = self.fine_stacks[k].forward(&self.params, &fines[k], &ctx)?;
            let prior = self.prior_params(self.fine_prior(k), &ctx)?;
            fine_terms.push(ld[0] + prior.log_prob(&z)[0]);
            haar_terms.push(haar::scale_logdet(2 * len, self.config.dim, alphas[k]));
        }
        let c_top = &coarse[k_max - 1];
        let ctx = self.context(None, &enc, c_top.shape()[2])?;
        let (z, ld) = self.coarse_stack.forward(&self.params, c_top, &ctx)?;
        let prior = self.prior_params(self.coarse_prior.as_ref(), &ctx)?;
        Ok(LikelihoodTerms {
            fine: fine_terms,
            coarse: ld[0] + prior.log_prob(&z)[0],
            haar: haar_terms,
        })
    }

    /// Map futures `[batch, dim, T]` to latents (no gradients).
    pub fn encode_latents(&self, y: &Array, x: &Array) -> Result<LatentStack, ModelError> {
        self.check_inputs(y.shape(), x.shape())?;
        let (fines, coarse) = self.coarse_chain(y)?;
        let enc = self.encode_past_batch(x)?;
        let mut zs = Vec::with_capacity(fines.len());
        for (k, f) in fines.iter().enumerate() {
            let ctx = self.context(Some(&coarse[k]), &enc, f.shape()[2])?;
            zs.push(self.fine_stacks[k].forward(&self.params, f, &ctx)?.0);
        }
        let c_top = coarse.last().expect("at least one scale");
        let ctx = self.context(None, &enc, c_top.shape()[2])?;
        let zc = self.coarse_stack.forward(&self.params, c_top, &ctx)?.0;
        Ok(LatentStack { fines: zs, coarse: zc })
    }

    /// Log-density of latents under the prior, per batch row. The
    /// conditioning trajectories are recovered by decoding the latents.
    pub fn prior_logprob(&self, latents: &LatentStack, x: &Array) -> Result<Vec<f64>, ModelError> {
        if latents.fines.len() != self.config.scales {
            return Err(ModelError::Input(format!(
                "{} fine latents for {} scales",
                latents.fines.len(),
                self.config.scales
            )));
        }
        let enc = self.encode_past_batch(x)?;
        let batch = latents.coarse.shape()[0];
        let mut total = vec![0.0; batch];
        let mut acc = |lp: Vec<f64>| total.iter_mut().zip(lp).for_each(|(t, l)| *t += l);
        let ctx = self.context(None, &enc, latents.coarse.shape()[2])?;
        acc(self.prior_params(self.coarse_prior.as_ref(), &ctx)?.log_prob(&latents.coarse));
        let mut c = self.coarse_stack.inverse(&self.params, &latents.coarse, &ctx)?.0;
        let alphas = self.alphas();
        for k in (0..self.config.scales).rev() {
            let z = &latents.fines[k];
            if z.shape() != c.shape() {
                return Err(ModelError::Input(format!(
                    "latent {} has shape {:?}, expected {:?}",
                    k + 1,
                    z.shape(),
                    c.shape()
                )));
            }
            let ctx = self.context(Some(&c), &enc, c.shape()[2])?;
            acc(self.prior_params(self.fine_prior(k), &ctx)?.log_prob(z));
            let f = self.fine_stacks[k].inverse(&self.params, z, &ctx)?.0;
            c = haar::inverse_batched(&f, &c, alphas[k])?;
        }
        Ok(total)
    }

    /// Coarse-to-fine decoding. `draw(stage_ctx, prior)` supplies the latent
    /// for each stage: the coarsest first, then scales `K..1`.
    fn decode_with(
        &self,
        x: &Array,
        t_future: usize,
        mut draw: impl FnMut(Option<usize>, &ConditionalGaussian) -> Result<Array, ModelError>,
    ) -> Result<(Array, SamplingTrace), ModelError> {
        haar::check_scales(t_future, self.config.scales)?;
        let mut trace = SamplingTrace::default();
        let enc = self.encode_past_batch(x)?;
        let len_top = haar::scale_len(t_future, self.config.scales);
        let ctx = self.context(None, &enc, len_top)?;
        let prior = self.prior_params(self.coarse_prior.as_ref(), &ctx)?;
        let zc = draw(None, &prior)?;
        let mut c = self.coarse_stack.inverse(&self.params, &zc, &ctx)?.0;
        trace.stages += 1;
        let alphas = self.alphas();
        for k in (0..self.config.scales).rev() {
            let ctx = self.context(Some(&c), &enc, c.shape()[2])?;
            let prior = self.prior_params(self.fine_prior(k), &ctx)?;
            let z = draw(Some(k), &prior)?;
            let f = self.fine_stacks[k].inverse(&self.params, &z, &ctx)?.0;
            c = haar::inverse_batched(&f, &c, alphas[k])?;
            trace.stages += 1;
        }
        Ok((c, trace))
    }

    /// Exact inverse of [`HbaFlowModel::encode_latents`].
    pub fn decode_latents(&self, latents: &LatentStack, x: &Array) -> Result<Array, ModelError> {
        let t_future = latents.coarse.shape()[2] << self.config.scales;
        let (y, _) = self.decode_with(x, t_future, |stage, _| {
            Ok(match stage {
                None => latents.coarse.clone(),
                Some(k) => latents.fines[k].clone(),
            })
        })?;
        Ok(y)
    }

    /// Draw one future per row of `x` (`[batch, dim, t_obs]`), scaling the
    /// prior standard deviation by `temperature`.
    pub fn sample_batch(
        &self,
        x: &Array,
        t_future: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<(Array, SamplingTrace), ModelError> {
        if x.shape().len() != 3 || x.shape()[1] != self.config.dim || x.shape()[2] != self.config.t_obs {
            return Err(ModelError::Input(format!(
                "past batch {:?} does not match dimension {} and {} observed steps",
                x.shape(),
                self.config.dim,
                self.config.t_obs
            )));
        }
        self.decode_with(x, t_future, |_, prior| {
            let mut z = prior.mean.clone();
            for (v, s) in z.data_mut().iter_mut().zip(prior.log_std.data()) {
                let eps: f64 = rng.sample(StandardNormal);
                *v += temperature * s.exp() * eps;
            }
            Ok(z)
        })
    }

    /// `n` futures of length `t_future` for one observed past, deterministic given `seed`.
    pub fn sample(
        &self,
        x: &Trajectory,
        n: usize,
        t_future: usize,
        seed: u64,
    ) -> Result<(Vec<Trajectory>, SamplingTrace), ModelError> {
        self.sample_with_temperature(x, n, t_future, seed, 1.0)
    }

    pub fn sample_with_temperature(
        &self,
        x: &Trajectory,
        n: usize,
        t_future: usize,
        seed: u64,
        temperature: f64,
    ) -> Result<(Vec<Trajectory>, SamplingTrace), ModelError> {
        if n == 0 {
            return Err(ModelError::Input("sample count must be positive".into()));
        }
        let xa = batch_trajectories(std::iter::repeat_n(x, n))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, trace) = self.sample_batch(&xa, t_future, temperature, &mut rng)?;
        let out = (0..n)
            .map(|i| Trajectory::from_channel_major(&y, i, x.dt()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((out, trace))
    }

    /// Haar decomposition of `y` with the model's current mixing parameters.
    pub fn pyramid(&self, y: &Trajectory) -> Result<HaarPyramid, ModelError> {
        Ok(haar::decompose(y, self.config.scales, &self.alphas())?)
    }
}
