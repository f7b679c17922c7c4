use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Array, DiffError, Graph, ParamId, ParamStore, Var};

/// Shape of a gated dilated-convolution conditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionerConfig {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 4,
            kernel: 3,
        }
    }
}

impl ConditionerConfig {
    /// Dilation of gated layer `i`: 1, 2, 4, 8, ...
    pub fn dilation(&self, i: usize) -> usize {
        1 << i
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
    dilation: usize,
}

impl ConvParams {
    fn new(
        store: &mut ParamStore,
        name: &str,
        shape: [usize; 3],
        dilation: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n = shape.iter().product();
        let data = if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        let w = store.add(format!("{name}.w"), Array::new(shape.to_vec(), data).expect("shape"));
        let b = store.add(format!("{name}.b"), Array::zeros(&[shape[0]]));
        Self { w, b, dilation }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.tape.conv1d(x, w, b, self.dilation)
    }
}

/// Non-causal gated dilated convolution stack.
///
/// `input conv -> [h += tanh(conv_f h) * sigmoid(conv_g h)] x layers -> 1x1 out`.
/// The output projection starts at zero so a fresh network emits zeros.
#[derive(Clone, Debug)]
pub struct WaveNet {
    input: ConvParams,
    layers: Vec<(ConvParams, ConvParams)>,
    output: ConvParams,
    in_channels: usize,
    out_channels: usize,
}

impl WaveNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &ConditionerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let c = cfg.channels;
        let k = cfg.kernel;
        let input = ConvParams::new(
            store,
            &format!("{prefix}.in"),
            [c, in_channels, k],
            1,
            (1.0 / (in_channels * k) as f64).sqrt(),
            rng,
        );
        let hidden_std = (1.0 / (c * k) as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|i| {
                let dil = cfg.dilation(i);
                (
                    ConvParams::new(store, &format!("{prefix}.l{i}.filter"), [c, c, k], dil, hidden_std, rng),
                    ConvParams::new(store, &format!("{prefix}.l{i}.gate"), [c, c, k], dil, hidden_std, rng),
                )
            })
            .collect();
        let output = ConvParams::new(store, &format!("{prefix}.out"), [out_channels, c, 1], 1, 0.0, rng);
        Self {
            input,
            layers,
            output,
            in_channels,
            out_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[batch, in_channels, len] -> [batch, out_channels, len]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let mut h = self.input.apply(g, x)?;
        for (filter, gate) in &self.layers {
            let f = filter.apply(g, h)?;
            let f = g.tape.tanh(f);
            let s = gate.apply(g, h)?;
            let s = g.tape.sigmoid(s);
            let gated = g.tape.mul(f, s)?;
            h = g.tape.add(h, gated)?;
        }
        self.output.apply(g, h)
    }
}
