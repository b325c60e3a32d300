//! The from-scratch and offline-to-online training loops.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use sacflow_autodiff::{AdamConfig, AdamState, AutodiffError, BackwardMode, Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::diagnostics::{record_step_grad_norms, GradNormProfile, MetricsRow};
use crate::envs::{DemoDataset, Env, EnvKind};
use crate::error::{Error, Result};
use crate::rollout::{sample_action, NoiseDraw, TimeGrid};
use crate::sac::config::TrainConfig;
use crate::sac::critic::{Critic, CriticSpec};
use crate::sac::losses::{actor_loss, critic_loss, critic_targets, BehaviorPenalty, Temperature};
use crate::sac::pretrain::flow_matching_step;
use crate::sac::replay::ReplayBuffer;
use crate::velocity::FlowActor;
use crate::SacRng;

/// Offset mixed into the seed of the evaluation generator.
const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;

/// Which training loop a [`Trainer`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Interact, then update from the replay buffer.
    Scratch,
    /// Offline phase on demonstrations, then online fine-tuning.
    OfflineToOnline,
}

/// Output of one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub row: Option<MetricsRow>,
    pub grad_norms: Option<GradNormProfile>,
}

/// One temperature step: `(mean log p_c, α before, α after)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaStep {
    pub mean_log_pc: f64,
    pub before: f64,
    pub after: f64,
}

/// Running sums between two logged rows.
#[derive(Clone, Debug, Default, PartialEq)]
struct Window {
    actor_loss: f64,
    critic_loss: f64,
    log_pc: f64,
    updates: u64,
    clamps: u64,
    ep_return: f64,
    ep_success: f64,
    episodes: u64,
    norms: Option<Vec<f64>>,
}

/// Actor, critics, temperature, optimizers, replay memory, environment and
/// generator of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub mode: Mode,
    pub actor: FlowActor,
    pub critic: Critic,
    pub temperature: Temperature,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub fm_adam: AdamState,
    pub buffer: ReplayBuffer,
    grid: TimeGrid,
    env: Env,
    rng: SacRng,
    step: u64,
    env_steps: u64,
    episode_return: f64,
    episode_success: bool,
    window: Window,
    last_alpha: Option<AlphaStep>,
    started: Instant,
}

impl Trainer {
    /// Builds a run; offline-to-online runs need the expert demonstrations,
    /// which seed the replay buffer.
    pub fn new(mut config: TrainConfig, mode: Mode, demos: Option<&DemoDataset>) -> Result<Self> {
        config.sync_dims();
        match mode {
            Mode::Scratch => config.validate()?,
            Mode::OfflineToOnline => config.validate_o2o()?,
        }
        let mut rng = SacRng::seed_from_u64(config.seed);
        let actor = FlowActor::new(config.velocity.clone(), &mut rng)?;
        let critic = Critic::new(
            CriticSpec {
                state_dim: config.velocity.state_dim,
                action_dim: config.velocity.action_dim,
                hidden: config.critic_hidden.clone(),
                count: config.critics,
            },
            &mut rng,
        )?;
        let temperature = Temperature::new(config.alpha_init, config.target_entropy, config.alpha_lr)?;
        let actor_adam = AdamState::new(AdamConfig::new(config.actor_lr).with_b1(config.actor_b1), &actor.params);
        let critic_adam = AdamState::new(AdamConfig::new(config.critic_lr), &critic.params);
        let fm_adam = AdamState::new(AdamConfig::new(config.fm_lr).with_b1(config.actor_b1), &actor.params);
        let mut buffer = ReplayBuffer::new(config.velocity.state_dim, config.velocity.action_dim, config.buffer)?;
        if mode == Mode::OfflineToOnline {
            let demos =
                demos.ok_or_else(|| Error::config("demos", "offline-to-online training needs demonstrations"))?;
            if demos.transitions.is_empty() {
                return Err(Error::config("demos", "demonstration set is empty"));
            }
            if demos.env != config.env {
                return Err(Error::config(
                    "demos",
                    format!(
                        "demonstrations are for {}, training on {}",
                        demos.env.as_str(),
                        config.env.as_str()
                    ),
                ));
            }
            for t in &demos.transitions {
                buffer.push(t)?;
            }
        }
        Ok(Self {
            grid: TimeGrid::new(config.k)?,
            env: Env::new(config.env),
            config,
            mode,
            actor,
            critic,
            temperature,
            actor_adam,
            critic_adam,
            fm_adam,
            buffer,
            rng,
            step: 0,
            env_steps: 0,
            episode_return: 0.0,
            episode_success: false,
            window: Window::default(),
            last_alpha: None,
            started: Instant::now(),
        })
    }

    /// Completed iterations.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Environment transitions collected so far.
    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// The most recent temperature update.
    pub fn last_alpha_step(&self) -> Option<AlphaStep> {
        self.last_alpha
    }

    /// `β` in force at the current iteration.
    fn beta(&self) -> f64 {
        match self.mode {
            Mode::Scratch => 0.0,
            Mode::OfflineToOnline => self.config.beta_at(self.step.max(1)),
        }
    }

    /// Runs until the configured number of iterations, handing every
    /// report to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let report = self.step_once()?;
            sink(self, &report)?;
        }
        Ok(())
    }

    /// One iteration of the configured loop.
    pub fn step_once(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::Invalid(format!("run already finished at step {}", self.step)));
        }
        let (beta, fm) = match self.mode {
            Mode::Scratch => {
                let random = self.step < self.config.learning_starts;
                self.interact(random)?;
                self.step += 1;
                (None, false)
            }
            Mode::OfflineToOnline => {
                self.step += 1;
                let online = self.step > self.config.l_off;
                if online {
                    self.interact(false)?;
                }
                (Some(self.config.beta_at(self.step)), !online)
            }
        };
        let log_now = self.step.is_multiple_of(self.config.log_every)
            || (self.mode == Mode::OfflineToOnline && self.step == self.config.l_off)
            || self.is_done();
        let update_now = self.step.is_multiple_of(self.config.update_every)
            && (self.mode == Mode::OfflineToOnline || self.step >= self.config.learning_starts);
        let mut profile = None;
        if update_now {
            let step = self.step;
            profile = self
                .update(beta, fm, log_now && self.config.grad_norms)
                .map_err(|e| match e {
                    Error::Autodiff(AutodiffError::NonFinite { node, op }) => Error::NonFinite {
                        what: format!("{op} node {node}"),
                        step,
                    },
                    other => other,
                })?;
        }
        let row = if log_now { Some(self.log_row()?) } else { None };
        Ok(StepReport {
            row,
            grad_norms: profile,
        })
    }

    fn policy_actions(&mut self, states: &Tensor) -> Result<Tensor> {
        let path = sample_action(
            &self.actor.model,
            &self.actor.model,
            &self.actor.params,
            states,
            &self.grid,
            &mut self.rng,
        )?;
        Ok(path.action)
    }

    fn interact(&mut self, random: bool) -> Result<()> {
        if self.env.is_finished() {
            self.env.reset(&mut self.rng);
            self.episode_return = 0.0;
            self.episode_success = false;
        }
        let s = self.env.state().to_vec();
        let a = if random {
            (0..self.config.velocity.action_dim)
                .map(|_| self.rng.random_range(-1.0..=1.0))
                .collect()
        } else {
            let st = Tensor::matrix(1, s.len(), s)?;
            self.policy_actions(&st)?.into_data()
        };
        let out = self
            .env
            .step(&a)
            .map_err(|e| Error::Env(format!("at step {}: {e}", self.step + 1)))?;
        self.env_steps += 1;
        self.episode_return += out.transition.r;
        self.episode_success |= out.success;
        self.buffer.push(&out.transition)?;
        if out.episode_over {
            self.window.ep_return += self.episode_return;
            self.window.ep_success += if self.episode_success { 1.0 } else { 0.0 };
            self.window.episodes += 1;
        }
        Ok(())
    }

    fn check(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: what.to_string(),
                step: self.step,
            })
        }
    }

    /// Actor, critic, temperature and target updates on one minibatch, plus
    /// the flow-matching step when `flow_matching` is set.
    fn update(&mut self, beta: Option<f64>, flow_matching: bool, record: bool) -> Result<Option<GradNormProfile>> {
        let batch = self.buffer.sample(self.config.batch, &mut self.rng)?;
        let n = batch.len();
        let da = self.config.velocity.action_dim;
        let alpha = self.temperature.alpha();

        let draw = NoiseDraw::sample(&mut self.rng, n, da, self.grid.steps());
        let mut g = Graph::new();
        let ap = g.bind(&self.actor.params, true);
        let cp = g.bind(&self.critic.params, false);
        let s = g.constant(batch.s.clone());
        let penalty = beta.map(|beta| BehaviorPenalty {
            actions: &batch.a,
            beta,
        });
        let model = &self.actor.model;
        let out = actor_loss(
            &mut g,
            &ap,
            model,
            model,
            &self.critic,
            &cp,
            s,
            &self.grid,
            &draw,
            alpha,
            penalty,
        )
        .map_err(|e| self.tag_numeric(e, "actor rollout"))?;
        let a_loss = g.scalar(out.loss);
        self.check("actor loss", a_loss)?;
        let (grads, profile) = if record {
            let (grads, profile) = record_step_grad_norms(&g, out.loss, &out.rollout.pre_actions, self.step)?;
            (grads, Some(profile))
        } else {
            (g.backward(out.loss, BackwardMode::ParamsOnly)?, None)
        };
        self.actor_adam.step(&mut self.actor.params, &grads.for_params(&ap))?;
        self.window.clamps += out.rollout.clamp_events + g.log_clamp_events();
        drop(g);

        let next = sample_action(
            model,
            model,
            &self.actor.params,
            &batch.s_next,
            &self.grid,
            &mut self.rng,
        )
        .map_err(|e| self.tag_numeric(e, "next-action rollout"))?;
        self.window.clamps += next.clamp_events;
        let targets = critic_targets(
            &self.critic,
            &batch,
            &next.action,
            &next.log_pc,
            alpha,
            self.config.gamma,
        )?;
        let mut g = Graph::new();
        let cp = g.bind(&self.critic.params, true);
        let c_loss_var = critic_loss(&mut g, &cp, &self.critic, &batch, &targets)?;
        let c_loss = g.scalar(c_loss_var);
        self.check("critic loss", c_loss)?;
        let grads = g.backward(c_loss_var, BackwardMode::ParamsOnly)?;
        self.critic_adam.step(&mut self.critic.params, &grads.for_params(&cp))?;

        let before = self.temperature.alpha();
        self.temperature.update(&out.log_pc)?;
        let after = self.temperature.alpha();
        self.check("temperature", after)?;
        self.last_alpha = Some(AlphaStep {
            mean_log_pc: out.mean_log_pc,
            before,
            after,
        });

        self.critic.target_update(self.config.tau)?;

        if flow_matching {
            flow_matching_step(&mut self.actor, &mut self.fm_adam, &batch.s, &batch.a, &mut self.rng).map_err(|e| {
                match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { what, step: self.step },
                    other => other,
                }
            })?;
        }

        self.window.actor_loss += a_loss;
        self.window.critic_loss += c_loss;
        self.window.log_pc += out.mean_log_pc;
        self.window.updates += 1;
        if let Some(p) = &profile {
            self.window.norms = Some(p.norms.clone());
        }
        Ok(profile)
    }

    fn tag_numeric(&self, e: Error, what: &str) -> Error {
        match e {
            Error::NonFinite { what: inner, step } => Error::NonFinite {
                what: format!("{what}: {inner} (sampling step {step})"),
                step: self.step,
            },
            other => other,
        }
    }

    fn log_row(&mut self) -> Result<MetricsRow> {
        let w = std::mem::take(&mut self.window);
        let per_update = |x: f64| if w.updates > 0 { x / w.updates as f64 } else { f64::NAN };
        let (episode_return, success_rate) = if self.config.eval_episodes > 0 {
            self.evaluate(self.config.eval_episodes)?
        } else if w.episodes > 0 {
            (w.ep_return / w.episodes as f64, w.ep_success / w.episodes as f64)
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(MetricsRow {
            step: self.step,
            episode_return,
            success_rate,
            actor_loss: per_update(w.actor_loss),
            critic_loss: per_update(w.critic_loss),
            alpha: self.temperature.alpha(),
            mean_log_pc: per_update(w.log_pc),
            grad_norms: w.norms.unwrap_or_else(|| vec![f64::NAN; self.grid.steps()]),
            clamp_count: w.clamps,
            wallclock_ms: if self.config.wallclock {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
            beta: self.beta(),
        })
    }

    /// Mean return and success rate of the current stochastic policy over
    /// `episodes` episodes, run side by side. Starts and policy noise come
    /// from a generator derived from the run seed alone, so every
    /// evaluation of a run sees the same starts.
    pub fn evaluate(&self, episodes: usize) -> Result<(f64, f64)> {
        let mut rng = SacRng::seed_from_u64(self.config.seed ^ EVAL_SEED_OFFSET);
        evaluate_policy(&self.actor, &self.grid, self.config.env, episodes, &mut rng)
    }

    /// Full mutable state, minus the replay buffer which is saved separately.
    pub fn save_state(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_u64("step", vec![self.step, self.env_steps]);
        let seed = self.rng.get_seed();
        let mut words: Vec<u64> = seed
            .chunks(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let pos = self.rng.get_word_pos();
        words.extend([self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        c.put_u64("rng", words);
        c.put_params("actor", &self.actor.params);
        c.put_params("critic", &self.critic.params);
        c.put_params("target", &self.critic.target);
        c.put_params("log_alpha", &self.temperature.log_alpha);
        c.put_adam("actor_adam", &self.actor_adam);
        c.put_adam("critic_adam", &self.critic_adam);
        c.put_adam("fm_adam", &self.fm_adam);
        c.put_adam("alpha_adam", &self.temperature.adam);
        c.put_f64("env/state", self.env.state().to_vec());
        c.put_u64(
            "env/meta",
            vec![
                self.env.elapsed() as u64,
                u64::from(self.env.is_finished()),
                u64::from(self.episode_success),
            ],
        );
        c.put_f64("env/return", vec![self.episode_return]);
        let w = &self.window;
        c.put_f64(
            "window/f64",
            vec![w.actor_loss, w.critic_loss, w.log_pc, w.ep_return, w.ep_success],
        );
        c.put_u64(
            "window/u64",
            vec![w.updates, w.clamps, w.episodes, u64::from(w.norms.is_some())],
        );
        c.put_f64("window/norms", w.norms.clone().unwrap_or_default());
        c
    }

    /// Rebuilds a run from its configuration, a checkpoint and the replay
    /// snapshot taken at the same step.
    pub fn restore(
        config: TrainConfig,
        mode: Mode,
        demos: Option<&DemoDataset>,
        state: &Checkpoint,
        buffer: ReplayBuffer,
    ) -> Result<Self> {
        let mut t = Self::new(config, mode, demos)?;
        let steps = state.u64s("step")?;
        if steps.len() != 2 {
            return Err(Error::format("checkpoint", "entry `step` must hold 2 values"));
        }
        t.step = steps[0];
        t.env_steps = steps[1];
        let words = state.u64s("rng")?;
        if words.len() != 7 {
            return Err(Error::format("checkpoint", "entry `rng` must hold 7 values"));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_mut(8).zip(&words[..4]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        t.rng = SacRng::from_seed(seed);
        t.rng.set_stream(words[4]);
        t.rng.set_word_pos(u128::from(words[5]) | (u128::from(words[6]) << 64));
        state.load_params("actor", &mut t.actor.params)?;
        state.load_params("critic", &mut t.critic.params)?;
        state.load_params("target", &mut t.critic.target)?;
        state.load_params("log_alpha", &mut t.temperature.log_alpha)?;
        state.load_adam("actor_adam", &mut t.actor_adam)?;
        state.load_adam("critic_adam", &mut t.critic_adam)?;
        state.load_adam("fm_adam", &mut t.fm_adam)?;
        state.load_adam("alpha_adam", &mut t.temperature.adam)?;
        let meta = state.u64s("env/meta")?;
        if meta.len() != 3 {
            return Err(Error::format("checkpoint", "entry `env/meta` must hold 3 values"));
        }
        t.env
            .resume(state.f64s("env/state")?.to_vec(), meta[0] as usize, meta[1] != 0)?;
        t.episode_success = meta[2] != 0;
        t.episode_return = state.f64("env/return")?;
        let wf = state.f64s("window/f64")?;
        let wu = state.u64s("window/u64")?;
        if wf.len() != 5 || wu.len() != 4 {
            return Err(Error::format("checkpoint", "window entries have the wrong length"));
        }
        t.window = Window {
            actor_loss: wf[0],
            critic_loss: wf[1],
            log_pc: wf[2],
            ep_return: wf[3],
            ep_success: wf[4],
            updates: wu[0],
            clamps: wu[1],
            episodes: wu[2],
            norms: (wu[3] != 0)
                .then(|| state.f64s("window/norms").map(<[f64]>::to_vec))
                .transpose()?,
        };
        if buffer.state_dim() != t.buffer.state_dim() || buffer.action_dim() != t.buffer.action_dim() {
            return Err(Error::format(
                "replay snapshot",
                "dimensions do not match the configuration",
            ));
        }
        t.buffer = buffer;
        Ok(t)
    }
}

/// Mean return and success rate of a flow policy over `episodes`
/// side-by-side episodes.
pub fn evaluate_policy(
    actor: &FlowActor,
    grid: &TimeGrid,
    env_kind: EnvKind,
    episodes: usize,
    rng: &mut SacRng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Invalid("evaluation needs at least one episode".into()));
    }
    let mut envs: Vec<Env> = (0..episodes).map(|_| Env::new(env_kind)).collect();
    for e in &mut envs {
        e.reset(rng);
    }
    let mut returns = vec![0.0; episodes];
    let mut success = vec![false; episodes];
    loop {
        let active: Vec<usize> = (0..episodes).filter(|&i| !envs[i].is_finished()).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<&[f64]> = active.iter().map(|&i| envs[i].state()).collect();
        let states = Tensor::from_rows(&rows)?;
        let path = sample_action(&actor.model, &actor.model, &actor.params, &states, grid, rng)?;
        for (r, &i) in active.iter().enumerate() {
            let out = envs[i].step(path.action.row(r))?;
            returns[i] += out.transition.r;
            success[i] |= out.success;
        }
    }
    let n = episodes as f64;
    Ok((
        returns.iter().sum::<f64>() / n,
        success.iter().filter(|&&s| s).count() as f64 / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::generate_demos;
    use crate::velocity::VelocityKind;

    fn tiny(kind: VelocityKind) -> TrainConfig {
        let mut c = TrainConfig::scratch(EnvKind::PointMass, kind);
        c.velocity.gate_hidden = vec![16];
        c.velocity.candidate_hidden = vec![16];
        c.velocity.classic_hidden = vec![16, 16];
        c.velocity.logstd_hidden = 8;
        c.velocity.attention.model_dim = 8;
        c.velocity.attention.heads = 2;
        c.velocity.attention.layers = 1;
        c.velocity.obs_hidden = 8;
        c.critic_hidden = vec![16];
        c.batch = 16;
        c.buffer = 1000;
        c.learning_starts = 40;
        c.steps = 120;
        c.log_every = 30;
        c.eval_episodes = 2;
        c.seed = 3;
        c
    }

    fn rows(t: &mut Trainer) -> Vec<MetricsRow> {
        let mut out = Vec::new();
        t.run(|_, r| {
            out.extend(r.row.clone());
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn scratch_run_is_deterministic() {
        for kind in VelocityKind::ALL {
            let a = rows(&mut Trainer::new(tiny(kind), Mode::Scratch, None).unwrap());
            let b = rows(&mut Trainer::new(tiny(kind), Mode::Scratch, None).unwrap());
            assert_eq!(a.len(), 4);
            assert!(a.iter().zip(&b).all(|(x, y)| x.same_bits(y)));
            assert!(a[0].actor_loss.is_nan(), "no updates before learning starts");
            assert!(a[3].actor_loss.is_finite());
            assert!(a[3].grad_norms.iter().all(|n| n.is_finite() && *n >= 0.0));
        }
    }

    #[test]
    fn restore_continues_identically() {
        let cfg = tiny(VelocityKind::FlowG);
        let mut full = Trainer::new(cfg.clone(), Mode::Scratch, None).unwrap();
        let expected = rows(&mut full);
        let mut first = Trainer::new(cfg.clone(), Mode::Scratch, None).unwrap();
        let mut head = Vec::new();
        for _ in 0..75 {
            head.extend(first.step_once().unwrap().row);
        }
        let state = Checkpoint::from_bytes(&first.save_state().to_bytes()).unwrap();
        let buffer = ReplayBuffer::restore(&first.buffer.snapshot(), cfg.buffer).unwrap();
        let mut resumed = Trainer::restore(cfg, Mode::Scratch, None, &state, buffer).unwrap();
        head.extend(rows(&mut resumed));
        assert!(expected.iter().zip(&head).all(|(x, y)| x.same_bits(y)));
        assert_eq!(expected.len(), head.len());
        assert_eq!(full.actor.params, resumed.actor.params);
    }

    #[test]
    fn grad_norm_recording_does_not_change_training() {
        let mut on = tiny(VelocityKind::FlowT);
        on.grad_norms = true;
        let mut off = on.clone();
        off.grad_norms = false;
        let mut a = Trainer::new(on, Mode::Scratch, None).unwrap();
        let mut b = Trainer::new(off, Mode::Scratch, None).unwrap();
        rows(&mut a);
        rows(&mut b);
        assert_eq!(a.save_state().to_bytes(), b.save_state().to_bytes());
    }

    #[test]
    fn alpha_moves_with_entropy_gap() {
        let mut t = Trainer::new(tiny(VelocityKind::Classic), Mode::Scratch, None).unwrap();
        let mut checked = 0;
        while !t.is_done() {
            t.step_once().unwrap();
            if let Some(a) = t.last_alpha_step() {
                let gap = a.mean_log_pc + t.config.target_entropy;
                assert_eq!((a.after - a.before).signum(), gap.signum(), "{a:?}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn offline_only_run_never_touches_the_env() {
        let mut c = TrainConfig::o2o(EnvKind::SparseReach, VelocityKind::FlowG);
        let t = tiny(VelocityKind::FlowG);
        c.velocity = t.velocity.clone();
        c.velocity.noise = crate::velocity::StepNoise::fixed(0.1);
        c.critic_hidden = t.critic_hidden;
        c.batch = 16;
        c.buffer = 5000;
        c.l_off = 12;
        c.l_on = 0;
        c.steps = 12;
        c.log_every = 5;
        c.eval_episodes = 0;
        let demos = generate_demos(EnvKind::SparseReach, 5, 1, &mut SacRng::seed_from_u64(1)).unwrap();
        let mut tr = Trainer::new(c, Mode::OfflineToOnline, Some(&demos)).unwrap();
        let got = rows(&mut tr);
        assert_eq!(tr.env_steps(), 0);
        assert_eq!(got.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 12]);
        assert!(got.iter().all(|r| r.beta == 10_000.0));
    }

    #[test]
    fn learning_before_enough_data_fails_with_count() {
        let mut c = tiny(VelocityKind::FlowG);
        c.learning_starts = 5;
        let mut t = Trainer::new(c, Mode::Scratch, None).unwrap();
        let err = (0..10).map(|_| t.step_once()).find_map(|r| r.err()).unwrap();
        assert!(matches!(err, Error::NotEnoughData { need: 16, .. }), "{err}");
    }
}
