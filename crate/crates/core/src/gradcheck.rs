//! Central-difference checks of every differentiable path an actor update
//! uses: the three velocity fields, the squashed path log-density and both
//! actor objectives.

use rand::{Rng, SeedableRng};
use sacflow_autodiff::{finite_diff_check, BoundParams, Graph, ProbeOptions, Tensor, Var};

use crate::error::Result;
use crate::nets::AttentionSpec;
use crate::rollout::{noisy_rollout_graph, NoiseDraw, TimeGrid};
use crate::sac::critic::{Critic, CriticSpec};
use crate::sac::losses::{actor_loss, BehaviorPenalty};
use crate::velocity::{FlowActor, StepNoise, StepSigma, VelocityField, VelocityKind, VelocitySpec};
use crate::SacRng;

/// Tolerance on the maximum relative error of single-field checks.
pub const FIELD_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full two-step actor objectives.
pub const ACTOR_LOSS_TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-5;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn small_spec(kind: VelocityKind, state_dim: usize, action_dim: usize) -> VelocitySpec {
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
        noise: StepNoise::learned(),
        ..VelocitySpec::scratch(kind, state_dim, action_dim)
    }
}

fn random(rng: &mut SacRng, rows: usize, cols: usize) -> Result<Tensor> {
    Ok(Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?)
}

/// Actor with every weight nudged off its structured init so that no
/// parameter sits at a special point.
fn perturbed_actor(spec: VelocitySpec, rng: &mut SacRng) -> Result<FlowActor> {
    let mut actor = FlowActor::new(spec, rng)?;
    for t in actor.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    Ok(actor)
}

fn field_check(kind: VelocityKind, rng: &mut SacRng) -> Result<GradCheck> {
    let actor = perturbed_actor(small_spec(kind, 3, 4), rng)?;
    let a = random(rng, 3, 4)?;
    let s = random(rng, 3, 3)?;
    let w = random(rng, 3, 4)?;
    let t = [0.0, 0.25, 0.75];
    let model = &actor.model;
    let f = |g: &mut Graph, p: &BoundParams| -> sacflow_autodiff::Result<Var> {
        let (av, sv) = (g.constant(a.clone()), g.constant(s.clone()));
        let v = model.velocity(g, p, &t, av, sv)?;
        let sig = model.sigma(g, p, &t, av, sv)?;
        let y = g.add(v, sig)?;
        let wv = g.constant(w.clone());
        let y = g.mul(y, wv)?;
        Ok(g.sum(y))
    };
    Ok(GradCheck {
        name: format!("velocity/{}", kind.as_str()),
        max_rel_error: finite_diff_check(&f, &actor.params, STEP, ProbeOptions::default())?,
        tolerance: FIELD_TOLERANCE,
    })
}

fn log_density_check(rng: &mut SacRng) -> Result<GradCheck> {
    let actor = perturbed_actor(small_spec(VelocityKind::FlowG, 2, 2), rng)?;
    let s = random(rng, 3, 2)?;
    let grid = TimeGrid::new(2)?;
    let draw = NoiseDraw::sample(rng, 3, 2, 2);
    let model = &actor.model;
    let f = |g: &mut Graph, p: &BoundParams| -> sacflow_autodiff::Result<Var> {
        let sv = g.constant(s.clone());
        let r = noisy_rollout_graph(g, p, model, model, sv, &grid, &draw)?;
        Ok(g.sum(r.log_pc))
    };
    Ok(GradCheck {
        name: "squash/log_density".into(),
        max_rel_error: finite_diff_check(&f, &actor.params, STEP, ProbeOptions::default())?,
        tolerance: FIELD_TOLERANCE,
    })
}

fn actor_loss_check(beta: Option<f64>, rng: &mut SacRng) -> Result<GradCheck> {
    let mut spec = VelocitySpec::scratch(VelocityKind::FlowG, 2, 2);
    spec.gate_hidden = vec![8];
    spec.candidate_hidden = vec![8];
    spec.logstd_hidden = 8;
    let actor = FlowActor::new(spec, rng)?;
    let critic = Critic::new(
        CriticSpec {
            state_dim: 2,
            action_dim: 2,
            hidden: vec![8],
            count: 2,
        },
        rng,
    )?;
    let s = random(rng, 3, 2)?;
    let a_data = random(rng, 3, 2)?;
    let grid = TimeGrid::new(2)?;
    let draw = NoiseDraw::sample(rng, 3, 2, 2);
    let model = &actor.model;
    let f = |g: &mut Graph, p: &BoundParams| -> sacflow_autodiff::Result<Var> {
        let cp = g.bind(&critic.params, false);
        let sv = g.constant(s.clone());
        let pen = beta.map(|beta| BehaviorPenalty { actions: &a_data, beta });
        Ok(actor_loss(g, p, model, model, &critic, &cp, sv, &grid, &draw, 0.2, pen)?.loss)
    };
    Ok(GradCheck {
        name: if beta.is_some() {
            "actor_loss/o2o".into()
        } else {
            "actor_loss/scratch".into()
        },
        max_rel_error: finite_diff_check(&f, &actor.params, STEP, ProbeOptions::default())?,
        tolerance: ACTOR_LOSS_TOLERANCE,
    })
}

/// Runs every check on instances drawn from `seed`.
pub fn run_gradchecks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SacRng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in VelocityKind::ALL {
        out.push(field_check(kind, &mut rng)?);
    }
    out.push(log_density_check(&mut rng)?);
    out.push(actor_loss_check(None, &mut rng)?);
    out.push(actor_loss_check(Some(300.0), &mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_two_seeds() {
        for seed in 0..2 {
            let checks = run_gradchecks(seed).unwrap();
            assert_eq!(checks.len(), 6);
            for c in &checks {
                assert!(c.passed(), "seed {seed} {}: {}", c.name, c.max_rel_error);
            }
        }
    }
}
