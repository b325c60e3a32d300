//! Network blocks shared by the velocity fields, the Gaussian baseline and
//! the critics.

use std::str::FromStr;

use rand::Rng;
use sacflow_autodiff::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Swish => g.silu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" | "silu" => Ok(Activation::Swish),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// How a linear layer is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    FanIn,
    /// Fan-in uniform multiplied by a gain.
    FanInGain(f64),
    /// Constant weight and bias.
    Constant { weight: f64, bias: f64 },
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let (w, b) = match init {
            Init::FanIn => fan_in_uniform(rng, fan_in, fan_out, 1.0),
            Init::FanInGain(gain) => fan_in_uniform(rng, fan_in, fan_out, gain),
            Init::Constant { weight, bias } => {
                (Tensor::full(&[fan_in, fan_out], weight), Tensor::full(&[fan_out], bias))
            }
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.fan_in {
            return Err(Error::Dim {
                context: "linear input",
                expected: self.fan_in,
                got: width,
            });
        }
        Ok(g.linear(x, p.get(self.weight), p.get(self.bias))?)
    }

    /// Overwrites weight and bias with constants.
    pub fn set_constant(&self, store: &mut ParamStore, weight: f64, bias: f64) {
        store.get_mut(self.weight).data_mut().fill(weight);
        store.get_mut(self.bias).data_mut().fill(bias);
    }
}

fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> (Tensor, Tensor) {
    let bound = gain / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
    let b = Tensor::vector(draw(fan_out));
    (w, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by the width of every layer.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub final_activation: Option<Activation>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            layer_widths,
            activation,
            final_activation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Invalid(format!(
                "an MLP needs an input width and at least one layer, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "MLP widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }
}

/// Stack of affine layers with an activation between them. The last layer
/// uses `final_activation` (identity when absent).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        Self::with_init(store, name, spec, Init::FanIn, rng)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        spec: MlpSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            let act = if i == last {
                self.spec.final_activation.unwrap_or(Activation::Identity)
            } else {
                self.spec.activation
            };
            h = act.apply(g, h);
        }
        Ok(h)
    }

    pub fn last_layer(&self) -> &Linear {
        self.layers.last().expect("validated")
    }

    /// Multiplies every weight matrix (not the biases) by `gain`.
    pub fn scale_weights(&self, store: &mut ParamStore, gain: f64) {
        for layer in &self.layers {
            store
                .get_mut(layer.weight)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= gain);
        }
    }
}

/// Layer normalisation with a learnable per-feature gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        layer_norm(g, x, p.get(self.gain), p.get(self.bias))
    }
}

/// `gain * (x - mean) / sqrt(var + 1e-5) + bias`, per row.
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LAYER_NORM_EPS);
    let y = g.mul_row(n, gain)?;
    Ok(g.add_row(y, bias)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Invalid(format!("attention sizes must be positive: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention of one query token over a set of
/// context tokens, each a `[batch, d]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        output_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, Init::FanIn, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, Init::FanIn, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, Init::FanIn, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, output_init, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, query: Var, context: &[Var]) -> Result<Var> {
        match context {
            [] => Err(Error::Invalid("attention needs at least one context token".into())),
            // Softmax over a single key is identically 1 (and has zero
            // derivative), so the output is the projected value.
            [only] => {
                let q_width = g.value(query).cols();
                if q_width != self.query.fan_in {
                    return Err(Error::Dim {
                        context: "attention query",
                        expected: self.query.fan_in,
                        got: q_width,
                    });
                }
                let v = self.value.forward(g, p, *only)?;
                self.output.forward(g, p, v)
            }
            _ => self.forward_general(g, p, query, context),
        }
    }

    /// Full softmax attention; also valid for a single context token.
    pub fn forward_general(&self, g: &mut Graph, p: &BoundParams, query: Var, context: &[Var]) -> Result<Var> {
        let dim = self.query.fan_out;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(g, p, query)?;
        let mut keys = Vec::with_capacity(context.len());
        let mut values = Vec::with_capacity(context.len());
        for &c in context {
            keys.push(self.key.forward(g, p, c)?);
            values.push(self.value.forward(g, p, c)?);
        }
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = g.slice_cols(q, start, head_dim)?;
            let mut scores = Vec::with_capacity(context.len());
            for &k in &keys {
                let kh = g.slice_cols(k, start, head_dim)?;
                let prod = g.mul(qh, kh)?;
                let dot = g.sum_cols(prod);
                scores.push(g.scale(dot, scale));
            }
            let scores = g.concat_cols(&scores)?;
            let weights = g.softmax(scores);
            let mut acc: Option<Var> = None;
            for (j, &v) in values.iter().enumerate() {
                let vh = g.slice_cols(v, start, head_dim)?;
                let wj = g.slice_cols(weights, j, 1)?;
                let term = g.mul_col(vh, wj)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            head_outputs.push(acc.expect("non-empty context"));
        }
        let merged = g.concat_cols(&head_outputs)?;
        self.output.forward(g, p, merged)
    }
}

/// Pre-norm decoder block for a single action token: optional self-only
/// attention, cross-attention to the context tokens, and a feed-forward
/// network, each added back through a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub self_norm: Option<LayerNorm>,
    pub self_attention: Option<Attention>,
    pub query_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub cross_attention: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl DecoderBlock {
    /// Output projections of every residual branch start at zero, so a fresh
    /// block is the identity map.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &AttentionSpec,
        self_attention: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        let zero = Init::Constant { weight: 0.0, bias: 0.0 };
        let (self_norm, self_attention) = if self_attention {
            (
                Some(LayerNorm::new(store, &format!("{name}.self_ln"), d)),
                Some(Attention::new(
                    store,
                    &format!("{name}.self_attn"),
                    d,
                    spec.heads,
                    zero,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            self_norm,
            self_attention,
            query_norm: LayerNorm::new(store, &format!("{name}.cross_ln"), d),
            context_norm: LayerNorm::new(store, &format!("{name}.context_ln"), d),
            cross_attention: Attention::new(store, &format!("{name}.cross_attn"), d, spec.heads, zero, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_ln"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn.0"), d, spec.ffn_mult * d, Init::FanIn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.1"), spec.ffn_mult * d, d, zero, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, token: Var, context: Var) -> Result<Var> {
        let mut x = token;
        if let (Some(norm), Some(attn)) = (&self.self_norm, &self.self_attention) {
            let n = norm.forward(g, p, x)?;
            let sa = attn.forward(g, p, n, &[n])?;
            x = g.add(x, sa)?;
        }
        let q = self.query_norm.forward(g, p, x)?;
        let c = self.context_norm.forward(g, p, context)?;
        let ca = self.cross_attention.forward(g, p, q, &[c])?;
        let y = g.add(x, ca)?;
        let n = self.ffn_norm.forward(g, p, y)?;
        let h = self.ffn_in.forward(g, p, n)?;
        let h = g.silu(h);
        let f = self.ffn_out.forward(g, p, h)?;
        Ok(g.add(y, f)?)
    }
}

/// Sinusoidal features `[sin(w_j t)..., cos(w_j t)...]` with `w_j`
/// geometrically spaced from 1 to 1000.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("time {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let freq = |j: usize| {
        if half == 1 {
            1.0
        } else {
            1000f64.powf(j as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|j| (freq(j) * t).sin()));
    out.extend((0..half).map(|j| (freq(j) * t).cos()));
    Ok(out)
}

/// Time embeddings for a batch of times, as a `[batch, dim]` tensor.
pub fn time_embed_batch(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?);
    }
    Ok(Tensor::matrix(ts.len(), dim, data)?)
}
