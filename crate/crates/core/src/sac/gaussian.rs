//! Diagonal-Gaussian tanh-squashed actor, the standard SAC policy, kept as a
//! unimodal baseline.

use rand::Rng;
use rand_distr::StandardNormal;
use sacflow_autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::nets::{Activation, Init, Linear, Mlp, MlpSpec};
use crate::rollout::{squash_graph, PRE_ACTION_LIMIT};
use crate::sac::critic::Critic;
use crate::sac::losses::pre_squash_targets;
use crate::velocity::{LOG_STD_MAX, LOG_STD_MIN};

/// Target-network rate of the Gaussian baseline.
pub const GAUSSIAN_TAU: f64 = 0.005;

/// Target entropy `-dim(A)` of the Gaussian baseline.
pub fn gaussian_target_entropy(action_dim: usize) -> f64 {
    -(action_dim as f64)
}

/// `s -> (μ, log σ)` with `log σ` squashed into `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActor {
    pub trunk: Mlp,
    pub mean: Linear,
    pub log_std: Linear,
    pub params: ParamStore,
    pub action_dim: usize,
}

/// Reparameterized sample and its log-density, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianSample {
    pub action: Var,
    /// `[batch, 1]`.
    pub log_prob: Var,
}

impl GaussianActor {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut widths = vec![state_dim];
        widths.extend(hidden);
        let mut spec = MlpSpec::new(widths, Activation::Relu);
        spec.final_activation = Some(Activation::Relu);
        let trunk = Mlp::new(&mut params, "gauss.trunk", spec, rng)?;
        let h = trunk.spec.output_width();
        let mean = Linear::new(&mut params, "gauss.mean", h, action_dim, Init::FanIn, rng);
        let log_std = Linear::new(&mut params, "gauss.log_std", h, action_dim, Init::FanIn, rng);
        Ok(Self {
            trunk,
            mean,
            log_std,
            params,
            action_dim,
        })
    }

    /// `(μ, σ)`, each `[batch, action_dim]`.
    pub fn heads(&self, g: &mut Graph, p: &BoundParams, s: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(g, p, s)?;
        let mean = self.mean.forward(g, p, h)?;
        let raw = self.log_std.forward(g, p, h)?;
        let th = g.tanh(raw);
        let half = (LOG_STD_MAX - LOG_STD_MIN) / 2.0;
        let scaled = g.scale(th, half);
        let log_std = g.add_scalar(scaled, LOG_STD_MIN + half);
        Ok((mean, g.exp(log_std)))
    }

    /// Mean negative log-likelihood of dataset actions (pre-squash; the
    /// squash Jacobian does not depend on the parameters).
    pub fn behavior_cloning_loss(&self, g: &mut Graph, p: &BoundParams, s: Var, a_data: &Tensor) -> Result<Var> {
        let u = g.constant(pre_squash_targets(a_data)?);
        let (mean, std) = self.heads(g, p, s)?;
        let lp = g.gaussian_log_density(u, mean, std)?;
        let per_row = g.sum_cols(lp);
        let m = g.mean(per_row);
        Ok(g.neg(m))
    }

    /// `a = tanh(μ + σ ε)` with `log π(a|s) = Σ log N(u; μ, σ) - Σ log(1 - a²)`.
    pub fn sample_graph(&self, g: &mut Graph, p: &BoundParams, s: Var, eps: &Tensor) -> Result<GaussianSample> {
        let (mean, std) = self.heads(g, p, s)?;
        let e = g.constant(eps.clone());
        let kick = g.mul(std, e)?;
        let u = g.add(mean, kick)?;
        let lp = g.gaussian_log_density(u, mean, std)?;
        let lp = g.sum_cols(lp);
        let uc = g.clamp(u, -PRE_ACTION_LIMIT, PRE_ACTION_LIMIT);
        let (action, corr) = squash_graph(g, uc);
        let log_prob = g.sub(lp, corr)?;
        Ok(GaussianSample { action, log_prob })
    }

    /// Actions for a batch of states, without gradients.
    pub fn sample(&self, s: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let eps: Vec<f64> = (0..s.rows() * self.action_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let eps = Tensor::matrix(s.rows(), self.action_dim, eps)?;
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let sv = g.constant(s.clone());
        let out = self.sample_graph(&mut g, &p, sv, &eps)?;
        Ok(g.value(out.action).clone())
    }

    /// `mean_b [α log π(a|s) - min_i Q_i(s, a)]` over reparameterized samples.
    #[allow(clippy::too_many_arguments)]
    pub fn sac_actor_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        critic: &Critic,
        critic_p: &BoundParams,
        s: Var,
        eps: &Tensor,
        alpha: f64,
    ) -> Result<Var> {
        let out = self.sample_graph(g, p, s, eps)?;
        let q = critic.min_q(g, critic_p, s, out.action)?;
        let ent = g.scale(out.log_prob, alpha);
        let per_row = g.sub(ent, q)?;
        Ok(g.mean(per_row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sac::critic::CriticSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sacflow_autodiff::{finite_diff_check, ProbeOptions};

    #[test]
    fn presets() {
        assert_eq!(GAUSSIAN_TAU, 0.005);
        assert_eq!(gaussian_target_entropy(6), -6.0);
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = GaussianActor::new(2, 2, &[8], &mut rng).unwrap();
        let s = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.5, 0.9]).unwrap();
        let eps = Tensor::matrix(2, 2, vec![0.1, -1.2, 2.0, 0.4]).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&actor.params, false);
        let sv = g.constant(s);
        let (mean, std) = actor.heads(&mut g, &p, sv).unwrap();
        let out = actor.sample_graph(&mut g, &p, sv, &eps).unwrap();
        for r in 0..2 {
            let mut expected = 0.0;
            for c in 0..2 {
                let (m, sd, e) = (g.value(mean).get(r, c), g.value(std).get(r, c), eps.get(r, c));
                let u: f64 = m + sd * e;
                expected += -0.5 * e * e - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                expected -= (1.0 - u.tanh().powi(2)).ln();
            }
            assert!((g.value(out.log_prob).get(r, 0) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn sac_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = GaussianActor::new(2, 2, &[8], &mut rng).unwrap();
        let critic = Critic::new(
            CriticSpec {
                state_dim: 2,
                action_dim: 2,
                hidden: vec![8],
                count: 2,
            },
            &mut rng,
        )
        .unwrap();
        let s = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.9, -0.4, 0.0]).unwrap();
        let eps = Tensor::matrix(3, 2, vec![0.1, -1.2, 2.0, 0.4, -0.3, 0.8]).unwrap();
        let build = |g: &mut Graph, p: &BoundParams| -> sacflow_autodiff::Result<Var> {
            let cp = g.bind(&critic.params, false);
            let sv = g.constant(s.clone());
            Ok(actor.sac_actor_loss(g, p, &critic, &cp, sv, &eps, 0.2)?)
        };
        let err = finite_diff_check(&build, &actor.params, 1e-5, ProbeOptions::default()).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
