//! Conditional split-coupling flow steps over even/odd time steps.
//!
//! A step transforms one temporal half `l` of its input elementwise, with
//! parameters predicted from the untouched half `r` and a conditioning
//! context. Consecutive steps alternate which half is transformed.
//! Sequences of length one have no second half; their steps transform the
//! single element from the context alone.

pub mod cubic;
pub mod transforms;
mod wavenet;

use rand::Rng;

use crate::diffcore::{Array, DiffError, Graph, ParamStore, Var};
pub use transforms::{affine_transform, nlsq_transform, Direction, Nlsq, TransformKind};
pub use wavenet::{ConditionerConfig, WaveNet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CouplingError {
    #[error("length error: {0}")]
    Length(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Conditioning features aligned with the sequence a stack transforms:
/// `[batch, channels, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoding {
    pub features: Array,
}

impl ContextEncoding {
    pub fn new(features: Array) -> Result<Self, CouplingError> {
        if !features.all_finite() {
            return Err(CouplingError::Numeric("non-finite context features".into()));
        }
        Ok(Self { features })
    }
}

/// Split the last axis into `(l, r)`: entries at even (0-based) and odd positions.
/// For odd lengths `l` holds one more entry than `r`.
pub fn temporal_split(h: &Array) -> Result<(Array, Array), CouplingError> {
    if h.shape().is_empty() {
        return Err(CouplingError::Length("temporal split of a scalar".into()));
    }
    Ok((take_positions(h, 0), take_positions(h, 1)))
}

/// Inverse of [`temporal_split`].
pub fn temporal_merge(l: &Array, r: &Array) -> Result<Array, CouplingError> {
    let (sl, sr) = (l.shape(), r.shape());
    let ok = !sl.is_empty()
        && sl.len() == sr.len()
        && sl[..sl.len() - 1] == sr[..sr.len() - 1]
        && (sl[sl.len() - 1] == sr[sr.len() - 1] || sl[sl.len() - 1] == sr[sr.len() - 1] + 1);
    if !ok {
        return Err(CouplingError::Length(format!("merge halves differ: {sl:?} vs {sr:?}")));
    }
    let mut shape = sl.to_vec();
    *shape.last_mut().unwrap() += sr[sr.len() - 1];
    let mut out = Array::zeros(&shape);
    put_positions(&mut out, 0, l);
    put_positions(&mut out, 1, r);
    Ok(out)
}

/// Entries at positions `parity, parity + 2, ...` of the last axis.
fn take_positions(h: &Array, parity: usize) -> Array {
    let n = *h.shape().last().unwrap();
    let rows = h.len() / n.max(1);
    let half = positions(n, parity);
    let mut data = Vec::with_capacity(rows * half);
    for r in 0..rows {
        for i in 0..half {
            data.push(h.data()[r * n + 2 * i + parity]);
        }
    }
    let mut shape = h.shape().to_vec();
    *shape.last_mut().unwrap() = half;
    Array::new(shape, data).expect("shape")
}

/// Number of positions `parity, parity + 2, ...` below `n`.
fn positions(n: usize, parity: usize) -> usize {
    (n + 1 - parity.min(n + 1)) / 2
}

fn put_positions(h: &mut Array, parity: usize, vals: &Array) {
    let n = *h.shape().last().unwrap();
    let half = positions(n, parity);
    let rows = h.len() / n.max(1);
    for r in 0..rows {
        for i in 0..half {
            h.data_mut()[r * n + 2 * i + parity] = vals.data()[r * half + i];
        }
    }
}

/// One conditional coupling step.
#[derive(Clone, Debug)]
pub struct CouplingStep {
    pub kind: TransformKind,
    /// 0 transforms even positions, 1 odd positions.
    pub parity: usize,
    pub conditioner: WaveNet,
    dim: usize,
}

/// Configuration shared by every step of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub steps: usize,
    pub kind: TransformKind,
    pub conditioner: ConditionerConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            kind: TransformKind::Nlsq,
            conditioner: ConditionerConfig::default(),
        }
    }
}

impl CouplingStep {
    /// Raw transform parameters at the transformed positions, one
    /// `[batch, dim, len_l]` node per parameter.
    fn raw_params(&self, g: &mut Graph, h: Var, ctx: Var) -> Result<Vec<Var>, DiffError> {
        let shape = g.tape.shape(h).to_vec();
        let len = shape[2];
        let mut mask = vec![0.0; len];
        if len > 1 {
            for (i, m) in mask.iter_mut().enumerate() {
                if i % 2 != self.parity {
                    *m = 1.0;
                }
            }
        }
        let mask = g.tape.constant(Array::new(vec![1, 1, len], mask).expect("shape"));
        let masked = g.tape.mul(h, mask)?;
        let input = g.tape.concat(&[masked, ctx], 1)?;
        let mut raw = self.conditioner.forward(g, input)?;
        if len > 1 {
            raw = g.tape.slice(raw, 2, self.parity, 2, positions(len, self.parity))?;
        }
        (0..self.kind.param_count())
            .map(|p| g.tape.slice(raw, 1, p * self.dim, 1, self.dim))
            .collect()
    }

    fn forward_on_tape(&self, g: &mut Graph, h: Var, ctx: Var) -> Result<(Var, Var), DiffError> {
        let len = g.tape.shape(h)[2];
        let raw = self.raw_params(g, h, ctx)?;
        let (l, r) = if len > 1 {
            let l = g.tape.slice(h, 2, self.parity, 2, positions(len, self.parity))?;
            let r = g.tape.slice(h, 2, 1 - self.parity, 2, positions(len, 1 - self.parity))?;
            (l, Some(r))
        } else {
            (h, None)
        };
        let (l_out, ld) = transforms::forward_on_tape(&mut g.tape, self.kind, l, &raw)?;
        let out = match (r, self.parity) {
            (None, _) => l_out,
            (Some(r), 0) => g.tape.interleave(l_out, r)?,
            (Some(r), _) => g.tape.interleave(r, l_out)?,
        };
        let ld = g.tape.sum_axis(ld, 2)?;
        let ld = g.tape.sum_axis(ld, 1)?;
        Ok((out, ld))
    }

    /// Apply the step to a value array (no gradients), returning per-row log-dets.
    fn apply(
        &self,
        store: &ParamStore,
        h: &Array,
        ctx: &Array,
        direction: Direction,
    ) -> Result<(Array, Vec<f64>), CouplingError> {
        let mut g = Graph::new(store, false);
        let hv = g.tape.constant(h.clone());
        let cv = g.tape.constant(ctx.clone());
        let raw = self.raw_params(&mut g, hv, cv)?;
        let raw: Vec<&Array> = raw.iter().map(|v| g.tape.value(*v)).collect();
        let len = h.shape()[2];
        let l = if len > 1 { take_positions(h, self.parity) } else { h.clone() };
        let batch = h.shape()[0];
        let block = l.len() / batch;
        let mut l_out = Vec::with_capacity(l.len());
        let mut lds = Vec::with_capacity(batch);
        for b in 0..batch {
            let span = b * block..(b + 1) * block;
            let slices: Vec<&[f64]> = raw.iter().map(|a| &a.data()[span.clone()]).collect();
            let (vals, ld) = transforms::apply(self.kind, &l.data()[span.clone()], &slices, direction)?;
            l_out.extend(vals);
            lds.push(ld);
        }
        let l_out = Array::new(l.shape().to_vec(), l_out).expect("shape");
        let out = if len > 1 {
            let mut out = h.clone();
            put_positions(&mut out, self.parity, &l_out);
            out
        } else {
            l_out
        };
        Ok((out, lds))
    }
}

/// Ordered coupling steps for one scale, alternating parity.
#[derive(Clone, Debug)]
pub struct CouplingStack {
    pub steps: Vec<CouplingStep>,
    /// 1-based scale index; 0 for the coarsest-trajectory stack.
    pub scale: usize,
    dim: usize,
    context_channels: usize,
}

impl CouplingStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        context_channels: usize,
        scale: usize,
        cfg: &StackConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, CouplingError> {
        if cfg.steps == 0 || cfg.steps % 2 != 0 {
            return Err(CouplingError::Config(format!(
                "a coupling stack needs a positive even step count, got {}",
                cfg.steps
            )));
        }
        let steps = (0..cfg.steps)
            .map(|i| CouplingStep {
                kind: cfg.kind,
                parity: i % 2,
                conditioner: WaveNet::new(
                    store,
                    &format!("{prefix}.step{i}"),
                    dim + context_channels,
                    cfg.kind.param_count() * dim,
                    &cfg.conditioner,
                    rng,
                ),
                dim,
            })
            .collect();
        Ok(Self {
            steps,
            scale,
            dim,
            context_channels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_channels(&self) -> usize {
        self.context_channels
    }

    fn check(&self, h: &[usize], ctx: &[usize]) -> Result<(), CouplingError> {
        let ok = h.len() == 3
            && h[1] == self.dim
            && ctx.len() == 3
            && ctx[0] == h[0]
            && ctx[1] == self.context_channels
            && ctx[2] == h[2];
        if !ok {
            return Err(CouplingError::Length(format!(
                "stack input {h:?} / context {ctx:?} do not match dim {} with {} context channels",
                self.dim, self.context_channels
            )));
        }
        if h[2] == 0 {
            return Err(CouplingError::Length("empty sequence".into()));
        }
        Ok(())
    }

    /// Differentiable forward: `(z, logdet)` with `logdet` of shape `[batch]`.
    pub fn forward_on_tape(&self, g: &mut Graph, h: Var, ctx: Var) -> Result<(Var, Var), CouplingError> {
        self.check(g.tape.shape(h), g.tape.shape(ctx))?;
        let mut cur = h;
        let mut total: Option<Var> = None;
        for step in &self.steps {
            let (next, ld) = step.forward_on_tape(g, cur, ctx)?;
            cur = next;
            total = Some(match total {
                None => ld,
                Some(t) => g.tape.add(t, ld)?,
            });
        }
        Ok((cur, total.expect("non-empty stack")))
    }

    /// Forward without gradients; log-dets per batch row.
    pub fn forward(
        &self,
        store: &ParamStore,
        h: &Array,
        ctx: &ContextEncoding,
    ) -> Result<(Array, Vec<f64>), CouplingError> {
        self.check(h.shape(), ctx.features.shape())?;
        let mut cur = h.clone();
        let mut total = vec![0.0; h.shape()[0]];
        for step in &self.steps {
            let (next, ld) = step.apply(store, &cur, &ctx.features, Direction::Forward)?;
            cur = next;
            total.iter_mut().zip(ld).for_each(|(t, l)| *t += l);
        }
        Ok((cur, total))
    }

    /// Exact inverse; returns the inverse-path log-dets (the negated forward ones).
    pub fn inverse(
        &self,
        store: &ParamStore,
        z: &Array,
        ctx: &ContextEncoding,
    ) -> Result<(Array, Vec<f64>), CouplingError> {
        self.check(z.shape(), ctx.features.shape())?;
        let mut cur = z.clone();
        let mut total = vec![0.0; z.shape()[0]];
        for step in self.steps.iter().rev() {
            let (next, ld) = step.apply(store, &cur, &ctx.features, Direction::Inverse)?;
            cur = next;
            total.iter_mut().zip(ld).for_each(|(t, l)| *t += l);
        }
        Ok((cur, total))
    }
}
