//! Flow-matching, actor, critic and temperature objectives.

use rand::Rng;
use rand_distr::StandardNormal;
use sacflow_autodiff::{AdamConfig, AdamState, BackwardMode, BoundParams, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::rollout::{noisy_rollout_graph, NoiseDraw, Rollout, TimeGrid};
use crate::sac::critic::Critic;
use crate::sac::replay::Batch;
use crate::velocity::{StepSigma, VelocityField};

/// Dataset actions are clipped to `±(1 - ATANH_CLIP)` before inverting the squash.
pub const ATANH_CLIP: f64 = 1e-6;

/// `atanh` of dataset actions after clipping into the open box.
pub fn pre_squash_targets(a: &Tensor) -> Result<Tensor> {
    if let Some(bad) = a.data().iter().find(|x| !(x.abs() <= 1.0)) {
        return Err(Error::Invalid(format!("dataset action {bad} lies outside [-1, 1]")));
    }
    let lim = 1.0 - ATANH_CLIP;
    Ok(a.map(|x| x.clamp(-lim, lim).atanh()))
}

/// Random inputs of one flow-matching evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMatchingDraw {
    /// `A_0 ~ N(0, I)`.
    pub base: Tensor,
    /// One `t ~ U[0, 1)` per row.
    pub times: Vec<f64>,
}

impl FlowMatchingDraw {
    pub fn sample(rng: &mut impl Rng, batch: usize, action_dim: usize) -> Self {
        let base = (0..batch * action_dim).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            base: Tensor::matrix(batch, action_dim, base).expect("shape"),
            times: (0..batch).map(|_| rng.random::<f64>()).collect(),
        }
    }
}

/// `mean_b ‖v(t, (1-t) A_0 + t A_1, s) - (A_1 - A_0)‖²` with `A_1` the
/// pre-squash dataset action.
pub fn flow_matching_loss(
    g: &mut Graph,
    p: &BoundParams,
    field: &dyn VelocityField,
    s: Var,
    a_data: &Tensor,
    draw: &FlowMatchingDraw,
) -> Result<Var> {
    let a1 = pre_squash_targets(a_data)?;
    if a1.shape() != draw.base.shape() || draw.times.len() != a1.rows() {
        return Err(Error::Dim {
            context: "flow-matching draw",
            expected: a1.len(),
            got: draw.base.len(),
        });
    }
    let cols = a1.cols();
    let mut xt = Vec::with_capacity(a1.len());
    let mut target = Vec::with_capacity(a1.len());
    for r in 0..a1.rows() {
        let t = draw.times[r];
        for (&x0, &x1) in draw.base.row(r).iter().zip(a1.row(r)) {
            xt.push((1.0 - t) * x0 + t * x1);
            target.push(x1 - x0);
        }
    }
    let xt = g.constant(Tensor::matrix(a1.rows(), cols, xt)?);
    let target = g.constant(Tensor::matrix(a1.rows(), cols, target)?);
    let v = field.velocity(g, p, &draw.times, xt, s)?;
    let diff = g.sub(v, target)?;
    let sq = g.square(diff);
    let per_row = g.sum_cols(sq);
    Ok(g.mean(per_row))
}

/// `α log p_c - Q` for one sample.
pub fn actor_objective(alpha: f64, log_pc: f64, q: f64) -> f64 {
    alpha * log_pc - q
}

/// `r + γ (1 - done) (Q_target - α log p_c)`.
pub fn td_target(r: f64, gamma: f64, done: bool, target_q: f64, alpha: f64, log_pc: f64) -> f64 {
    let cont = if done { 0.0 } else { 1.0 };
    r + gamma * cont * (target_q - alpha * log_pc)
}

/// Nodes of an actor-loss graph.
#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub loss: Var,
    pub rollout: Rollout,
    /// Batch mean of `min_i Q_i(s, a)`.
    pub mean_q: f64,
    pub mean_log_pc: f64,
    /// `log p_c` of every row, for the temperature step.
    pub log_pc: Vec<f64>,
}

/// Behaviour-regularization term of the offline-to-online actor objective.
#[derive(Clone, Copy, Debug)]
pub struct BehaviorPenalty<'a> {
    pub actions: &'a Tensor,
    pub beta: f64,
}

/// `mean_b [α log p_c(𝒜 | s) - min_i Q_i(s, tanh A_K)]`, plus
/// `β mean_b ‖a - a_data‖²` when a penalty is given. Gradients reach the
/// actor through the reparameterized path and through `log p_c`; critic
/// parameters must be bound as constants.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    g: &mut Graph,
    actor_p: &BoundParams,
    field: &dyn VelocityField,
    sigma: &dyn StepSigma,
    critic: &Critic,
    critic_p: &BoundParams,
    s: Var,
    grid: &TimeGrid,
    draw: &NoiseDraw,
    alpha: f64,
    penalty: Option<BehaviorPenalty<'_>>,
) -> Result<ActorLoss> {
    let rollout = noisy_rollout_graph(g, actor_p, field, sigma, s, grid, draw)?;
    let q = critic.min_q(g, critic_p, s, rollout.action)?;
    let ent = g.scale(rollout.log_pc, alpha);
    let per_row = g.sub(ent, q)?;
    let mut loss = g.mean(per_row);
    if let Some(pen) = penalty {
        if !(pen.beta >= 0.0) {
            return Err(Error::Invalid(format!(
                "behaviour weight β must be non-negative, got {}",
                pen.beta
            )));
        }
        let target = g.constant(pen.actions.clone());
        let diff = g.sub(rollout.action, target)?;
        let sq = g.square(diff);
        let dist = g.sum_cols(sq);
        let mean_dist = g.mean(dist);
        let reg = g.scale(mean_dist, pen.beta);
        loss = g.add(loss, reg)?;
    }
    let log_pc = g.value(rollout.log_pc).data().to_vec();
    let mean_log_pc = log_pc.iter().sum::<f64>() / log_pc.len() as f64;
    let qv = g.value(q).data();
    let mean_q = qv.iter().sum::<f64>() / qv.len() as f64;
    Ok(ActorLoss {
        loss,
        rollout,
        mean_q,
        mean_log_pc,
        log_pc,
    })
}

/// TD targets `r + γ (1 - done) (min_i Q̄_i(s', a') - α log p_c')` from the
/// target critics, as plain values.
pub fn critic_targets(
    critic: &Critic,
    batch: &Batch,
    next_action: &Tensor,
    next_log_pc: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let tp = g.bind(&critic.target, false);
    let s2 = g.constant(batch.s_next.clone());
    let a2 = g.constant(next_action.clone());
    let q = critic.min_q(&mut g, &tp, s2, a2)?;
    let qv = g.value(q).data();
    Ok((0..batch.len())
        .map(|i| {
            td_target(
                batch.r.data()[i],
                gamma,
                batch.done.data()[i] != 0.0,
                qv[i],
                alpha,
                next_log_pc[i],
            )
        })
        .collect())
}

/// `Σ_i mean_b (Q_i(s, a) - y)²` with constant targets `y`.
pub fn critic_loss(
    g: &mut Graph,
    critic_p: &BoundParams,
    critic: &Critic,
    batch: &Batch,
    targets: &[f64],
) -> Result<Var> {
    if targets.len() != batch.len() {
        return Err(Error::Dim {
            context: "critic targets",
            expected: batch.len(),
            got: targets.len(),
        });
    }
    let s = g.constant(batch.s.clone());
    let a = g.constant(batch.a.clone());
    let y = g.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let mut total: Option<Var> = None;
    for q in critic.q_values(g, critic_p, s, a)? {
        let d = g.sub(q, y)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one critic"))
}

/// Learnable entropy coefficient `α = exp(log α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Temperature {
    pub log_alpha: ParamStore,
    pub target_entropy: f64,
    pub adam: AdamState,
}

impl Temperature {
    pub fn new(init_alpha: f64, target_entropy: f64, lr: f64) -> Result<Self> {
        if !(init_alpha > 0.0) {
            return Err(Error::Invalid(format!("initial α must be positive, got {init_alpha}")));
        }
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Tensor::scalar(init_alpha.ln()));
        // No first-moment averaging, so every step moves α in the direction
        // of the current entropy gap.
        let adam = AdamState::new(AdamConfig::new(lr).with_b1(0.0), &log_alpha);
        Ok(Self {
            log_alpha,
            target_entropy,
            adam,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.tensors()[0].data()[0].exp()
    }

    /// One Adam step on `-α (mean log p_c + H̄)` with `log p_c` held fixed.
    pub fn update(&mut self, log_pc: &[f64]) -> Result<f64> {
        let mean = log_pc.iter().sum::<f64>() / log_pc.len().max(1) as f64;
        let mut g = Graph::new();
        let p = g.bind(&self.log_alpha, true);
        let alpha = g.exp(p.vars()[0]);
        let loss = g.scale(alpha, -(mean + self.target_entropy));
        let grads = g.backward(loss, BackwardMode::ParamsOnly)?;
        self.adam.step(&mut self.log_alpha, &grads.for_params(&p))?;
        Ok(g.scalar(loss))
    }
}
