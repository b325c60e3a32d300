//! Velocity fields `v(t, A, s)` for the flow rollout and the per-step noise
//! scale.

use std::str::FromStr;

use rand::Rng;
use sacflow_autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{time_embed_batch, Activation, AttentionSpec, DecoderBlock, Init, LayerNorm, Linear, Mlp, MlpSpec};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Anything that can drive the rollout. `t` holds one time per batch row.
pub trait VelocityField {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn velocity(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityKind {
    Classic,
    FlowG,
    FlowT,
}

impl VelocityKind {
    pub const ALL: [VelocityKind; 3] = [VelocityKind::Classic, VelocityKind::FlowG, VelocityKind::FlowT];

    pub fn as_str(self) -> &'static str {
        match self {
            VelocityKind::Classic => "classic",
            VelocityKind::FlowG => "flow_g",
            VelocityKind::FlowT => "flow_t",
        }
    }
}

impl FromStr for VelocityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(VelocityKind::Classic),
            "flow_g" | "flow-g" => Ok(VelocityKind::FlowG),
            "flow_t" | "flow-t" => Ok(VelocityKind::FlowT),
            other => Err(Error::Invalid(format!("unknown velocity kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Fixed,
    Learned,
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(NoiseMode::Fixed),
            "learned" => Ok(NoiseMode::Learned),
            other => Err(Error::Invalid(format!("unknown noise mode `{other}`"))),
        }
    }
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Fixed => "fixed",
            NoiseMode::Learned => "learned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepNoise {
    pub mode: NoiseMode,
    pub fixed_sigma: f64,
}

impl StepNoise {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            mode: NoiseMode::Fixed,
            fixed_sigma: sigma,
        }
    }

    pub fn learned() -> Self {
        Self {
            mode: NoiseMode::Learned,
            fixed_sigma: 0.10,
        }
    }
}

impl Default for StepNoise {
    fn default() -> Self {
        Self::fixed(0.10)
    }
}

/// Maps an unbounded head output onto `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0) / 2.0
}

/// Source of the per-step noise scale `σ` used by the noisy rollout.
pub trait StepSigma {
    /// `σ` as a `[batch, action_dim]` node.
    fn sigma(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var>;
}

/// Constant `σ` for every row and dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedSigma(pub f64);

impl StepSigma for FixedSigma {
    fn sigma(&self, g: &mut Graph, _p: &BoundParams, _t: &[f64], a: Var, _s: Var) -> Result<Var> {
        if !(self.0 > 0.0) {
            return Err(Error::Invalid(format!("step noise must be positive, got {}", self.0)));
        }
        let shape = g.shape(a).to_vec();
        Ok(g.constant(Tensor::full(&shape, self.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocitySpec {
    pub kind: VelocityKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub time_dim: usize,
    /// Trunk widths of the classic field.
    pub classic_hidden: Vec<usize>,
    /// Hidden widths of the gate network.
    pub gate_hidden: Vec<usize>,
    /// Hidden widths of the candidate network.
    pub candidate_hidden: Vec<usize>,
    pub candidate_bound: f64,
    pub gate_bias: f64,
    pub attention: AttentionSpec,
    pub obs_hidden: usize,
    pub self_attention: bool,
    pub noise: StepNoise,
    pub logstd_hidden: usize,
    /// Multiplies the fan-in bound of every hidden and output layer that
    /// uses fan-in init.
    pub init_gain: f64,
}

impl VelocitySpec {
    /// From-scratch sizes.
    pub fn scratch(kind: VelocityKind, state_dim: usize, action_dim: usize) -> Self {
        Self {
            kind,
            state_dim,
            action_dim,
            time_dim: 16,
            classic_hidden: vec![256, 256],
            gate_hidden: vec![128],
            candidate_hidden: vec![128],
            candidate_bound: 50.0,
            gate_bias: 5.0,
            attention: AttentionSpec {
                model_dim: 64,
                heads: 4,
                layers: 2,
                ffn_mult: 4,
            },
            obs_hidden: 32,
            self_attention: true,
            noise: StepNoise::learned(),
            logstd_hidden: 64,
            init_gain: 1.0,
        }
    }

    /// Offline-to-online sizes with fixed noise.
    pub fn o2o(kind: VelocityKind, state_dim: usize, action_dim: usize) -> Self {
        Self {
            classic_hidden: vec![512; 4],
            gate_hidden: vec![256],
            candidate_hidden: vec![512; 4],
            attention: AttentionSpec {
                model_dim: 128,
                heads: 4,
                layers: 2,
                ffn_mult: 4,
            },
            noise: StepNoise::fixed(0.10),
            ..Self::scratch(kind, state_dim, action_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Invalid("state and action dims must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Invalid(format!("time_dim must be even, got {}", self.time_dim)));
        }
        if self.noise.mode == NoiseMode::Fixed && !(self.noise.fixed_sigma > 0.0) {
            return Err(Error::Invalid(format!(
                "fixed step noise must be positive, got {}",
                self.noise.fixed_sigma
            )));
        }
        if !(self.candidate_bound > 0.0) || !(self.init_gain > 0.0) {
            return Err(Error::Invalid("candidate bound and init gain must be positive".into()));
        }
        match self.kind {
            VelocityKind::Classic if self.classic_hidden.is_empty() => {
                Err(Error::Invalid("classic trunk needs at least one hidden layer".into()))
            }
            VelocityKind::FlowT => self.attention.validate(),
            _ => Ok(()),
        }
    }

    fn conditioning_width(&self) -> usize {
        match self.kind {
            VelocityKind::Classic => self.state_dim + self.action_dim + 1,
            _ => self.state_dim + self.action_dim + self.time_dim,
        }
    }

    fn fan_in(&self) -> Init {
        if self.init_gain == 1.0 {
            Init::FanIn
        } else {
            Init::FanInGain(self.init_gain)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassicNet {
    pub trunk: Mlp,
    pub mean_head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedNet {
    /// `f_z`; its last layer is the gate head.
    pub gate: Mlp,
    /// `f_h`.
    pub candidate: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedNet {
    pub action_embed: Linear,
    pub obs_encoder: Linear,
    pub state_embed: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VelocityNet {
    Classic(ClassicNet),
    Gated(GatedNet),
    Decoded(DecodedNet),
}

/// A velocity network together with its optional log-std head. Parameters
/// live in the [`ParamStore`] passed to [`VelocityModel::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    pub spec: VelocitySpec,
    pub net: VelocityNet,
    pub logstd_head: Option<Mlp>,
}

impl VelocityModel {
    pub fn new(spec: VelocitySpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let init = spec.fan_in();
        let cond = spec.conditioning_width();
        let da = spec.action_dim;
        let net = match spec.kind {
            VelocityKind::Classic => {
                let mut widths = vec![cond];
                widths.extend(&spec.classic_hidden);
                let mut trunk_spec = MlpSpec::new(widths, Activation::Relu);
                trunk_spec.final_activation = Some(Activation::Relu);
                let trunk = Mlp::with_init(store, "velocity.trunk", trunk_spec, init, rng)?;
                let hidden = *spec.classic_hidden.last().expect("validated");
                let mean_head = Linear::new(store, "velocity.mean", hidden, da, init, rng);
                VelocityNet::Classic(ClassicNet { trunk, mean_head })
            }
            VelocityKind::FlowG => {
                let widths = |hidden: &[usize]| {
                    let mut w = vec![cond];
                    w.extend(hidden);
                    w.push(da);
                    w
                };
                let gate = Mlp::with_init(
                    store,
                    "velocity.gate",
                    MlpSpec::new(widths(&spec.gate_hidden), Activation::Swish),
                    init,
                    rng,
                )?;
                gate.last_layer().set_constant(store, 0.0, spec.gate_bias);
                let candidate = Mlp::with_init(
                    store,
                    "velocity.candidate",
                    MlpSpec::new(widths(&spec.candidate_hidden), Activation::Swish),
                    init,
                    rng,
                )?;
                VelocityNet::Gated(GatedNet { gate, candidate })
            }
            VelocityKind::FlowT => {
                let att = spec.attention;
                let d = att.model_dim;
                let action_embed = Linear::new(store, "velocity.embed_a", spec.time_dim + da, d, init, rng);
                let obs_encoder = Linear::new(store, "velocity.obs_enc", spec.state_dim, spec.obs_hidden, init, rng);
                let state_embed = Linear::new(store, "velocity.embed_s", spec.obs_hidden, d, init, rng);
                let blocks = (0..att.layers)
                    .map(|l| DecoderBlock::new(store, &format!("velocity.block{l}"), &att, spec.self_attention, rng))
                    .collect::<Result<Vec<_>>>()?;
                let final_norm = LayerNorm::new(store, "velocity.final_ln", d);
                let output = Linear::new(store, "velocity.out", d, da, init, rng);
                VelocityNet::Decoded(DecodedNet {
                    action_embed,
                    obs_encoder,
                    state_embed,
                    blocks,
                    final_norm,
                    output,
                })
            }
        };
        let logstd_head = match spec.noise.mode {
            NoiseMode::Fixed => None,
            NoiseMode::Learned => Some(Mlp::new(
                store,
                "logstd",
                MlpSpec::new(vec![cond, spec.logstd_hidden, da], Activation::Swish),
                rng,
            )?),
        };
        Ok(Self { spec, net, logstd_head })
    }

    fn check_inputs(&self, g: &Graph, t: &[f64], a: Var, s: Var) -> Result<usize> {
        let rows = g.value(a).rows();
        let checks = [
            ("velocity action input", self.spec.action_dim, g.value(a).cols()),
            ("velocity state input", self.spec.state_dim, g.value(s).cols()),
            ("velocity state rows", rows, g.value(s).rows()),
            ("velocity time rows", rows, t.len()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(Error::Dim { context, expected, got });
            }
        }
        if let Some(&bad) = t.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::Invalid(format!("velocity time {bad} outside [0, 1)")));
        }
        Ok(rows)
    }

    fn conditioning(&self, g: &mut Graph, t: &[f64], a: Var, s: Var) -> Result<Var> {
        let time = match self.spec.kind {
            VelocityKind::Classic => Tensor::matrix(t.len(), 1, t.to_vec())?,
            _ => time_embed_batch(t, self.spec.time_dim)?,
        };
        let time = g.constant(time);
        Ok(g.concat_cols(&[s, a, time])?)
    }

    /// Gate values `g` for the gated field.
    pub fn gate(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var> {
        let VelocityNet::Gated(net) = &self.net else {
            return Err(Error::Invalid("gate is only defined for the gated field".into()));
        };
        self.check_inputs(g, t, a, s)?;
        let x = self.conditioning(g, t, a, s)?;
        let z = net.gate.forward(g, p, x)?;
        Ok(g.sigmoid(z))
    }

    /// Candidate `50 tanh(f_h)` for the gated field.
    pub fn candidate(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var> {
        let VelocityNet::Gated(net) = &self.net else {
            return Err(Error::Invalid("candidate is only defined for the gated field".into()));
        };
        self.check_inputs(g, t, a, s)?;
        let x = self.conditioning(g, t, a, s)?;
        let h = net.candidate.forward(g, p, x)?;
        let h = g.tanh(h);
        Ok(g.scale(h, self.spec.candidate_bound))
    }

    /// Clamped `log σ`, `[batch, action_dim]`. Only defined in learned mode.
    pub fn log_std(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var> {
        let head = self
            .logstd_head
            .as_ref()
            .ok_or_else(|| Error::Invalid("log-std head exists only in learned noise mode".into()))?;
        self.check_inputs(g, t, a, s)?;
        let x = self.conditioning(g, t, a, s)?;
        let raw = head.forward(g, p, x)?;
        let th = g.tanh(raw);
        let half_span = (LOG_STD_MAX - LOG_STD_MIN) / 2.0;
        let scaled = g.scale(th, half_span);
        Ok(g.add_scalar(scaled, LOG_STD_MIN + half_span))
    }
}

impl VelocityField for VelocityModel {
    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn velocity(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var> {
        self.check_inputs(g, t, a, s)?;
        match &self.net {
            VelocityNet::Classic(net) => {
                let x = self.conditioning(g, t, a, s)?;
                let h = net.trunk.forward(g, p, x)?;
                net.mean_head.forward(g, p, h)
            }
            VelocityNet::Gated(net) => {
                let x = self.conditioning(g, t, a, s)?;
                let z = net.gate.forward(g, p, x)?;
                let gate = g.sigmoid(z);
                let h = net.candidate.forward(g, p, x)?;
                let h = g.tanh(h);
                let cand = g.scale(h, self.spec.candidate_bound);
                let diff = g.sub(cand, a)?;
                Ok(g.mul(gate, diff)?)
            }
            VelocityNet::Decoded(net) => {
                let time = g.constant(time_embed_batch(t, self.spec.time_dim)?);
                let token_in = g.concat_cols(&[time, a])?;
                let mut token = net.action_embed.forward(g, p, token_in)?;
                let obs = net.obs_encoder.forward(g, p, s)?;
                let obs = g.silu(obs);
                let context = net.state_embed.forward(g, p, obs)?;
                for block in &net.blocks {
                    token = block.forward(g, p, token, context)?;
                }
                let n = net.final_norm.forward(g, p, token)?;
                net.output.forward(g, p, n)
            }
        }
    }
}

impl StepSigma for VelocityModel {
    fn sigma(&self, g: &mut Graph, p: &BoundParams, t: &[f64], a: Var, s: Var) -> Result<Var> {
        match self.spec.noise.mode {
            NoiseMode::Fixed => FixedSigma(self.spec.noise.fixed_sigma).sigma(g, p, t, a, s),
            NoiseMode::Learned => {
                let log_std = self.log_std(g, p, t, a, s)?;
                Ok(g.exp(log_std))
            }
        }
    }
}

/// Velocity network plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowActor {
    pub model: VelocityModel,
    pub params: ParamStore,
}

impl FlowActor {
    pub fn new(spec: VelocitySpec, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let model = VelocityModel::new(spec, &mut params, rng)?;
        Ok(Self { model, params })
    }

    pub fn spec(&self) -> &VelocitySpec {
        &self.model.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sacflow_autodiff::{finite_diff_check, ProbeOptions};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn eval(actor: &FlowActor, t: &[f64], a: &Tensor, s: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let av = g.constant(a.clone());
        let sv = g.constant(s.clone());
        let v = actor.model.velocity(&mut g, &p, t, av, sv).unwrap();
        g.value(v).clone()
    }

    fn zero_all(store: &mut ParamStore) {
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
    }

    #[test]
    fn zero_classic_field_is_zero() {
        let mut actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::Classic, 2, 2), &mut rng(0)).unwrap();
        zero_all(&mut actor.params);
        let v = eval(
            &actor,
            &[0.25; 3],
            &random(&mut rng(1), 3, 2, 1.0),
            &random(&mut rng(2), 3, 2, 1.0),
        );
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_width_is_action_dim() {
        for kind in VelocityKind::ALL {
            let actor = FlowActor::new(VelocitySpec::scratch(kind, 3, 5), &mut rng(0)).unwrap();
            let v = eval(
                &actor,
                &[0.5; 4],
                &random(&mut rng(1), 4, 5, 1.0),
                &random(&mut rng(2), 4, 3, 1.0),
            );
            assert_eq!(v.shape(), &[4, 5], "{kind:?}");
            assert!(v.data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn gated_field_at_init_with_zero_candidate() {
        let mut actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::FlowG, 2, 3), &mut rng(0)).unwrap();
        let VelocityNet::Gated(net) = actor.model.net.clone() else {
            panic!()
        };
        for layer in &net.candidate.layers {
            layer.set_constant(&mut actor.params, 0.0, 0.0);
        }
        let a = random(&mut rng(1), 4, 3, 2.0);
        let v = eval(&actor, &[0.5; 4], &a, &random(&mut rng(2), 4, 2, 1.0));
        let g5 = 0.9933071490757153;
        for (vi, ai) in v.data().iter().zip(a.data()) {
            assert!((vi + g5 * ai).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_and_candidate_ranges() {
        let mut actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::FlowG, 2, 2), &mut rng(3)).unwrap();
        // Random gate head so the gate is not pinned at sigmoid(5).
        let mut r = rng(4);
        for t in actor.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        }
        let (t, a, s) = (
            [0.0, 0.25, 0.5, 0.75, 0.9],
            random(&mut r, 5, 2, 3.0),
            random(&mut r, 5, 2, 3.0),
        );
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let (av, sv) = (g.constant(a), g.constant(s));
        let gate = actor.model.gate(&mut g, &p, &t, av, sv).unwrap();
        let cand = actor.model.candidate(&mut g, &p, &t, av, sv).unwrap();
        assert!(g.value(gate).data().iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(g.value(cand).data().iter().all(|&x| x.abs() <= 50.0));
    }

    #[test]
    fn candidate_equal_to_action_is_fixed_point() {
        // Zero candidate net makes the candidate 0; A = 0 then gives v = 0.
        let mut actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::FlowG, 2, 2), &mut rng(0)).unwrap();
        let VelocityNet::Gated(net) = actor.model.net.clone() else {
            panic!()
        };
        for layer in &net.candidate.layers {
            layer.set_constant(&mut actor.params, 0.0, 0.0);
        }
        let v = eval(
            &actor,
            &[0.3; 2],
            &Tensor::zeros(&[2, 2]),
            &random(&mut rng(1), 2, 2, 1.0),
        );
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn closed_gate_keeps_action() {
        let mut actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::FlowG, 2, 2), &mut rng(0)).unwrap();
        let VelocityNet::Gated(net) = actor.model.net.clone() else {
            panic!()
        };
        net.gate.last_layer().set_constant(&mut actor.params, 0.0, -800.0);
        let v = eval(
            &actor,
            &[0.3; 2],
            &random(&mut rng(1), 2, 2, 1.0),
            &random(&mut rng(2), 2, 2, 1.0),
        );
        assert!(v.data().iter().all(|&x| x.abs() < 1e-300));
    }

    #[test]
    fn decoded_zero_output_projection() {
        let mut actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::FlowT, 3, 2), &mut rng(0)).unwrap();
        let VelocityNet::Decoded(net) = actor.model.net.clone() else {
            panic!()
        };
        net.output.set_constant(&mut actor.params, 0.0, 0.0);
        let v = eval(
            &actor,
            &[0.0, 0.5, 0.75],
            &random(&mut rng(1), 3, 2, 5.0),
            &random(&mut rng(2), 3, 3, 5.0),
        );
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    fn small_spec(kind: VelocityKind, noise: StepNoise) -> VelocitySpec {
        VelocitySpec {
            classic_hidden: vec![8, 8],
            gate_hidden: vec![8],
            candidate_hidden: vec![8],
            attention: AttentionSpec {
                model_dim: 8,
                heads: 4,
                layers: 2,
                ffn_mult: 4,
            },
            obs_hidden: 4,
            logstd_hidden: 6,
            noise,
            ..VelocitySpec::scratch(kind, 3, 6)
        }
    }

    #[test]
    fn every_kind_passes_gradient_check() {
        for kind in VelocityKind::ALL {
            for seed in 0..10 {
                let mut r = rng(seed);
                let mut actor = FlowActor::new(small_spec(kind, StepNoise::learned()), &mut r).unwrap();
                // Perturb away from the structured inits so every weight matters.
                for t in actor.params.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
                }
                let a = random(&mut r, 3, 6, 1.0);
                let s = random(&mut r, 3, 3, 1.0);
                let w = random(&mut r, 3, 6, 1.0);
                let t = [0.0, 0.25, 0.75];
                let model = &actor.model;
                let f = |g: &mut Graph, p: &BoundParams| {
                    let (av, sv) = (g.constant(a.clone()), g.constant(s.clone()));
                    let v = model.velocity(g, p, &t, av, sv)?;
                    let sig = model.sigma(g, p, &t, av, sv)?;
                    let y = g.add(v, sig)?;
                    let wv = g.constant(w.clone());
                    let y = g.mul(y, wv)?;
                    Ok(g.sum(y))
                };
                let err = finite_diff_check(&f, &actor.params, 1e-5, ProbeOptions::default()).unwrap();
                assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn fixed_and_learned_sigma() {
        let actor = FlowActor::new(small_spec(VelocityKind::FlowG, StepNoise::fixed(0.1)), &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let a = g.constant(Tensor::zeros(&[2, 6]));
        let s = g.constant(Tensor::zeros(&[2, 3]));
        let sig = actor.model.sigma(&mut g, &p, &[0.0, 0.5], a, s).unwrap();
        assert!(g.value(sig).data().iter().all(|&x| x == 0.10));
        assert!(actor.model.log_std(&mut g, &p, &[0.0, 0.5], a, s).is_err());

        let mut actor = FlowActor::new(small_spec(VelocityKind::FlowG, StepNoise::learned()), &mut rng(0)).unwrap();
        let head = actor.model.logstd_head.clone().unwrap();
        head.last_layer().set_constant(&mut actor.params, 0.0, 0.0);
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let a = g.constant(Tensor::zeros(&[2, 6]));
        let s = g.constant(Tensor::zeros(&[2, 3]));
        let sig = actor.model.sigma(&mut g, &p, &[0.0, 0.5], a, s).unwrap();
        for &x in g.value(sig).data() {
            assert!((x - (-1.5f64).exp()).abs() < 1e-15);
            assert!((x - 0.22313).abs() < 1e-5);
        }
        assert_eq!(squash_log_std(1e6), 2.0);
        assert_eq!(squash_log_std(-1e6), -5.0);
    }

    #[test]
    fn learned_log_std_stays_in_range() {
        let mut actor = FlowActor::new(small_spec(VelocityKind::Classic, StepNoise::learned()), &mut rng(5)).unwrap();
        actor
            .model
            .logstd_head
            .clone()
            .unwrap()
            .scale_weights(&mut actor.params, 50.0);
        let mut r = rng(6);
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let a = g.constant(random(&mut r, 64, 6, 20.0));
        let s = g.constant(random(&mut r, 64, 3, 20.0));
        let t: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let ls = actor.model.log_std(&mut g, &p, &t, a, s).unwrap();
        assert!(g
            .value(ls)
            .data()
            .iter()
            .all(|&x| (LOG_STD_MIN..=LOG_STD_MAX).contains(&x)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let actor = FlowActor::new(VelocitySpec::scratch(VelocityKind::FlowG, 2, 2), &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let s = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            actor.model.velocity(&mut g, &p, &[0.0; 2], a, s),
            Err(Error::Dim { .. })
        ));
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(actor.model.velocity(&mut g, &p, &[1.0; 2], a, s).is_err());
        assert!("gru".parse::<VelocityKind>().is_err());
        let bad = AttentionSpec {
            model_dim: 10,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
        };
        let spec = VelocitySpec {
            attention: bad,
            ..VelocitySpec::scratch(VelocityKind::FlowT, 2, 2)
        };
        assert!(FlowActor::new(spec, &mut rng(0)).is_err());
    }
}
