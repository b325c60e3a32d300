//! Supervised pretraining on a fixed dataset: flow matching for flow actors
//! and behaviour cloning for the Gaussian baseline.

use rand::Rng;
use sacflow_autodiff::{AdamState, BackwardMode, Graph, Tensor};

use crate::error::{Error, Result};
use crate::sac::gaussian::GaussianActor;
use crate::sac::losses::{flow_matching_loss, FlowMatchingDraw};
use crate::velocity::FlowActor;

/// One Adam step of the flow-matching objective on `(s, a)`; returns the loss.
pub fn flow_matching_step(
    actor: &mut FlowActor,
    adam: &mut AdamState,
    s: &Tensor,
    a: &Tensor,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = FlowMatchingDraw::sample(rng, a.rows(), a.cols());
    let mut g = Graph::new();
    let ap = g.bind(&actor.params, true);
    let sv = g.constant(s.clone());
    let loss = flow_matching_loss(&mut g, &ap, &actor.model, sv, a, &draw)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "flow-matching loss".into(),
            step: adam.step_count + 1,
        });
    }
    let grads = g.backward(loss, BackwardMode::ParamsOnly)?;
    adam.step(&mut actor.params, &grads.for_params(&ap))?;
    Ok(value)
}

/// Uniform minibatch of rows `(states[i], actions[i])`.
pub fn sample_rows(states: &Tensor, actions: &Tensor, batch: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let n = states.rows();
    if n == 0 || actions.rows() != n {
        return Err(Error::Invalid(format!(
            "dataset holds {n} states and {} actions",
            actions.rows()
        )));
    }
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let s: Vec<&[f64]> = idx.iter().map(|&i| states.row(i)).collect();
    let a: Vec<&[f64]> = idx.iter().map(|&i| actions.row(i)).collect();
    Ok((Tensor::from_rows(&s)?, Tensor::from_rows(&a)?))
}

/// `steps` flow-matching updates on minibatches of the dataset; returns the
/// loss of every step.
pub fn pretrain_flow_matching(
    actor: &mut FlowActor,
    adam: &mut AdamState,
    states: &Tensor,
    actions: &Tensor,
    steps: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    (0..steps)
        .map(|_| {
            let (s, a) = sample_rows(states, actions, batch, rng)?;
            flow_matching_step(actor, adam, &s, &a, rng)
        })
        .collect()
}

/// `steps` maximum-likelihood updates of the Gaussian baseline; returns the
/// loss of every step.
pub fn behavior_cloning(
    actor: &mut GaussianActor,
    adam: &mut AdamState,
    states: &Tensor,
    actions: &Tensor,
    steps: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    (0..steps)
        .map(|_| {
            let (s, a) = sample_rows(states, actions, batch, rng)?;
            let mut g = Graph::new();
            let p = g.bind(&actor.params, true);
            let sv = g.constant(s);
            let loss = actor.behavior_cloning_loss(&mut g, &p, sv, &a)?;
            let value = g.scalar(loss);
            let grads = g.backward(loss, BackwardMode::ParamsOnly)?;
            adam.step(&mut actor.params, &grads.for_params(&p))?;
            Ok(value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bandit_demo_actions, EnvKind, EnvSpec};
    use crate::velocity::{VelocityKind, VelocitySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sacflow_autodiff::AdamConfig;

    #[test]
    fn flow_matching_loss_decreases_on_bandit_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = EnvSpec::of(EnvKind::Bandit);
        let mut vs = VelocitySpec::scratch(VelocityKind::FlowG, spec.state_dim, spec.action_dim);
        vs.gate_hidden = vec![32];
        vs.candidate_hidden = vec![32];
        let mut actor = FlowActor::new(vs, &mut rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::new(1e-3), &actor.params);
        let a = bandit_demo_actions(2000, &mut rng);
        let states = Tensor::matrix(a.len(), 1, vec![0.0; a.len()]).unwrap();
        let actions = Tensor::matrix(a.len(), 1, a).unwrap();
        let losses = pretrain_flow_matching(&mut actor, &mut adam, &states, &actions, 1000, 128, &mut rng).unwrap();
        let window = |i: usize| losses[i..i + 100].iter().sum::<f64>() / 100.0;
        let smoothed: Vec<f64> = (0..losses.len() / 100).map(|w| window(w * 100)).collect();
        assert!(smoothed.last() < smoothed.first(), "{smoothed:?}");
        assert!(smoothed[..3].windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
    }

    #[test]
    fn sample_rows_rejects_mismatched_data() {
        let s = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let a = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_rows(&s, &a, 4, &mut rng).is_err());
    }
}
