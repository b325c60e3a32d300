//! Desk-scale configurations: the presets with networks, batches and run
//! lengths shrunk to fit a single CPU core.

use sacflow::envs::EnvKind;
use sacflow::sac::TrainConfig;
use sacflow::velocity::{StepNoise, VelocityKind, VelocitySpec};

/// Width of every hidden layer.
pub const HIDDEN: usize = 64;
/// Model width of the decoder.
pub const MODEL_DIM: usize = 32;
/// Width of the observation encoder of the decoder.
pub const OBS_HIDDEN: usize = 16;
/// Target-network averaging rate for every desk run.
pub const TAU: f64 = 0.005;
/// Fixed per-step noise for actors trained by flow matching alone.
pub const FLOW_MATCHING_SIGMA: f64 = 0.1;

fn shrink(spec: &mut VelocitySpec, candidate_layers: usize) {
    spec.classic_hidden = vec![HIDDEN; 2];
    spec.gate_hidden = vec![HIDDEN];
    spec.candidate_hidden = vec![HIDDEN; candidate_layers];
    spec.logstd_hidden = HIDDEN / 2;
    spec.attention.model_dim = MODEL_DIM;
    spec.obs_hidden = OBS_HIDDEN;
}

/// From-scratch run on the point-mass task: 30k steps, learning from step
/// 1000, one update every second step, evaluated only at the end.
pub fn scratch(kind: VelocityKind, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::scratch(EnvKind::PointMass, kind);
    shrink(&mut c.velocity, 1);
    c.critic_hidden = vec![HIDDEN; 2];
    c.batch = 64;
    c.buffer = 100_000;
    c.learning_starts = 1000;
    c.steps = 30_000;
    c.update_every = 2;
    c.tau = TAU;
    c.log_every = c.steps;
    c.eval_episodes = 20;
    c.grad_norms = false;
    c.seed = seed;
    c
}

/// Offline-to-online run on the sparse-reach task with the preset's 200
/// demonstrations and behaviour weights.
pub fn o2o(kind: VelocityKind, seed: u64, l_off: u64, l_on: u64) -> TrainConfig {
    let mut c = TrainConfig::o2o(EnvKind::SparseReach, kind);
    shrink(&mut c.velocity, 2);
    c.critic_hidden = vec![HIDDEN; 2];
    c.batch = 64;
    c.buffer = 100_000;
    c.l_off = l_off;
    c.l_on = l_on;
    c.steps = l_off + l_on;
    c.log_every = 250;
    c.eval_episodes = 50;
    c.grad_norms = false;
    c.seed = seed;
    c
}

/// Bandit actor for flow-matching pretraining.
pub fn bandit_actor(kind: VelocityKind) -> VelocitySpec {
    let mut spec = VelocitySpec::scratch(kind, 1, 1);
    shrink(&mut spec, 2);
    spec.noise = StepNoise::fixed(FLOW_MATCHING_SIGMA);
    spec
}
