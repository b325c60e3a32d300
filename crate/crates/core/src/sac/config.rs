//! Training hyperparameters and the named presets.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::velocity::{VelocityKind, VelocitySpec};

/// Named default sets: learning from scratch or offline-to-online.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Scratch,
    O2o,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Scratch => "scratch",
            Preset::O2o => "o2o",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Preset::Scratch),
            "o2o" => Ok(Preset::O2o),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (scratch, o2o)"),
            )),
        }
    }
}

/// Everything a training loop needs besides its output location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub velocity: VelocitySpec,
    /// Environment steps (from scratch) or offline-to-online iterations.
    pub steps: u64,
    /// Sampling steps of the flow rollout.
    pub k: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub alpha_init: f64,
    /// Learning rate of the auxiliary flow-matching optimizer.
    pub fm_lr: f64,
    /// Adam first-moment decay of the actor optimizer.
    pub actor_b1: f64,
    pub batch: usize,
    pub buffer: usize,
    pub gamma: f64,
    pub tau: f64,
    pub learning_starts: u64,
    pub target_entropy: f64,
    pub critic_hidden: Vec<usize>,
    pub critics: usize,
    pub beta_offline: f64,
    pub beta_online: f64,
    pub l_off: u64,
    pub l_on: u64,
    /// Expert episodes placed in the buffer before offline training.
    pub demos: usize,
    /// Gradient updates happen every this many iterations.
    pub update_every: u64,
    pub log_every: u64,
    /// Evaluation episodes per logged row; 0 reports training episodes.
    pub eval_episodes: usize,
    /// Record per-step gradient norms at logged updates.
    pub grad_norms: bool,
    /// Fill the wallclock column; off keeps metrics byte-reproducible.
    pub wallclock: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, env: EnvKind, kind: VelocityKind) -> Self {
        match preset {
            Preset::Scratch => Self::scratch(env, kind),
            Preset::O2o => Self::o2o(env, kind),
        }
    }

    /// From-scratch defaults.
    pub fn scratch(env: EnvKind, kind: VelocityKind) -> Self {
        let spec = EnvSpec::of(env);
        Self {
            env,
            velocity: VelocitySpec::scratch(kind, spec.state_dim, spec.action_dim),
            steps: 1_000_000,
            k: 4,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            alpha_lr: 3e-4,
            alpha_init: 0.2,
            fm_lr: 3e-4,
            actor_b1: 0.5,
            batch: 512,
            buffer: 1_000_000,
            gamma: 0.99,
            tau: 1.0,
            learning_starts: 50_000,
            target_entropy: 0.0,
            critic_hidden: vec![256, 256],
            critics: 2,
            beta_offline: 0.0,
            beta_online: 0.0,
            l_off: 0,
            l_on: 0,
            demos: 0,
            update_every: 1,
            log_every: 1000,
            eval_episodes: 10,
            grad_norms: true,
            wallclock: false,
            seed: 0,
        }
    }

    /// Offline-to-online defaults: larger actor, fixed noise, behaviour
    /// regularization switched from 10000 to 1000 after the offline phase.
    pub fn o2o(env: EnvKind, kind: VelocityKind) -> Self {
        let spec = EnvSpec::of(env);
        let (l_off, l_on) = (1_000_000, 1_000_000);
        Self {
            velocity: VelocitySpec::o2o(kind, spec.state_dim, spec.action_dim),
            steps: l_off + l_on,
            batch: 256,
            tau: 0.005,
            learning_starts: 0,
            beta_offline: 10_000.0,
            beta_online: 1_000.0,
            l_off,
            l_on,
            demos: 200,
            ..Self::scratch(env, kind)
        }
    }

    /// Behaviour weight for the cube-style tasks.
    pub const CUBE_BETA: f64 = 300.0;

    /// `β` in force at 1-based iteration `step` of an offline-to-online run.
    pub fn beta_at(&self, step: u64) -> f64 {
        if step <= self.l_off {
            self.beta_offline
        } else {
            self.beta_online
        }
    }

    /// Keeps the actor dimensions in line with the environment.
    pub fn sync_dims(&mut self) {
        let spec = EnvSpec::of(self.env);
        self.velocity.state_dim = spec.state_dim;
        self.velocity.action_dim = spec.action_dim;
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
            ("alpha_init", self.alpha_init),
            ("fm_lr", self.fm_lr),
            ("gamma", self.gamma),
            ("tau", self.tau),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        if !(self.gamma <= 1.0) {
            return Err(Error::config("gamma", format!("must not exceed 1, got {}", self.gamma)));
        }
        if !(self.tau <= 1.0) {
            return Err(Error::config("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.actor_b1) {
            return Err(Error::config(
                "actor_b1",
                format!("must lie in [0, 1), got {}", self.actor_b1),
            ));
        }
        for (key, v) in [("beta_offline", self.beta_offline), ("beta_online", self.beta_online)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be non-negative, got {v}")));
            }
        }
        if !self.target_entropy.is_finite() {
            return Err(Error::config("target_entropy", "must be finite"));
        }
        let counts = [
            ("k", self.k as u64),
            ("batch", self.batch as u64),
            ("buffer", self.buffer as u64),
            ("critics", self.critics as u64),
            ("update_every", self.update_every),
            ("log_every", self.log_every),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.critic_hidden.contains(&0) {
            return Err(Error::config("critic_hidden", "widths must be positive"));
        }
        if self.batch > self.buffer {
            return Err(Error::config(
                "batch",
                format!("batch {} exceeds buffer capacity {}", self.batch, self.buffer),
            ));
        }
        let spec = EnvSpec::of(self.env);
        if self.velocity.state_dim != spec.state_dim || self.velocity.action_dim != spec.action_dim {
            return Err(Error::config(
                "velocity.state_dim",
                format!(
                    "actor dims ({}, {}) do not match {} ({}, {})",
                    self.velocity.state_dim,
                    self.velocity.action_dim,
                    self.env.as_str(),
                    spec.state_dim,
                    spec.action_dim
                ),
            ));
        }
        self.velocity
            .validate()
            .map_err(|e| Error::config("velocity", e.to_string()))
    }

    /// Offline-to-online specific checks.
    pub fn validate_o2o(&self) -> Result<()> {
        self.validate()?;
        if self.env != EnvKind::SparseReach {
            return Err(Error::config(
                "env",
                "offline-to-online training needs sparse_reach demos",
            ));
        }
        if self.l_off == 0 {
            return Err(Error::config("l_off", "must be positive"));
        }
        if self.demos == 0 {
            return Err(Error::config("demos", "must be positive"));
        }
        if self.steps != self.l_off + self.l_on {
            return Err(Error::config(
                "steps",
                format!(
                    "must equal l_off + l_on = {}, got {}",
                    self.l_off + self.l_on,
                    self.steps
                ),
            ));
        }
        Ok(())
    }
}
