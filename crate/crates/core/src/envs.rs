//! Small synthetic control tasks, a scripted expert, the demo file format and
//! a closed-form Gaussian velocity oracle.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use sacflow_autodiff::{BoundParams, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::velocity::VelocityField;

pub const GOAL: [f64; 2] = [0.7, 0.7];
pub const GOAL_RADIUS: f64 = 0.1;
pub const MOVE_SCALE: f64 = 0.05;
pub const BANDIT_MODES: [f64; 2] = [-0.6, 0.6];
pub const BANDIT_WIDTH: f64 = 0.02;
pub const EXPERT_GAIN: f64 = 2.0;
pub const EXPERT_SHRINK: f64 = 0.999;

const DEMO_MAGIC: &str = "SACFLOW-DEMOS";
const DEMO_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Bandit,
    PointMass,
    SparseReach,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Bandit => "bandit",
            EnvKind::PointMass => "point_mass",
            EnvKind::SparseReach => "sparse_reach",
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bandit" | "bimodal_bandit" => Ok(EnvKind::Bandit),
            "point_mass" | "point-mass" | "pointmass" => Ok(EnvKind::PointMass),
            "sparse_reach" | "sparse-reach" => Ok(EnvKind::SparseReach),
            other => Err(Error::Env(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    Dense,
    Sparse,
    Bandit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub reward: RewardKind,
    pub reward_range: (f64, f64),
}

impl EnvSpec {
    pub fn of(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Bandit => Self {
                kind,
                state_dim: 1,
                action_dim: 1,
                horizon: 1,
                reward: RewardKind::Bandit,
                reward_range: (0.0, 1.0),
            },
            EnvKind::PointMass => {
                // Farthest reachable point from the goal is the corner (-1, -1).
                let worst = (1.0 + GOAL[0]).powi(2) + (1.0 + GOAL[1]).powi(2);
                Self {
                    kind,
                    state_dim: 2,
                    action_dim: 2,
                    horizon: 100,
                    reward: RewardKind::Dense,
                    reward_range: (-worst, 0.0),
                }
            }
            EnvKind::SparseReach => Self {
                kind,
                state_dim: 2,
                action_dim: 2,
                horizon: 100,
                reward: RewardKind::Sparse,
                reward_range: (0.0, 1.0),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// True termination (goal reached or the bandit's single step). Time
    /// limits do not set it.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub transition: Transition,
    /// The episode ended, by termination or by the time limit.
    pub episode_over: bool,
    pub success: bool,
}

/// `max(exp(-(a-0.6)²/0.02), exp(-(a+0.6)²/0.02))`.
pub fn bandit_reward(a: f64) -> f64 {
    BANDIT_MODES
        .iter()
        .map(|m| (-(a - m).powi(2) / BANDIT_WIDTH).exp())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Share of `actions` in the basin of each bandit optimum, in the order of
/// [`BANDIT_MODES`]. An action is in a basin when its reward exceeds 1/2,
/// i.e. it lies within `sqrt(0.02 ln 2)` of that optimum.
pub fn bandit_basin_fractions(actions: &[f64]) -> [f64; 2] {
    let n = actions.len().max(1) as f64;
    BANDIT_MODES.map(|m| {
        actions
            .iter()
            .filter(|&&a| (-(a - m).powi(2) / BANDIT_WIDTH).exp() > 0.5)
            .count() as f64
            / n
    })
}

fn dist2_to_goal(x: &[f64]) -> f64 {
    x.iter().zip(GOAL).map(|(a, g)| (a - g).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    spec: EnvSpec,
    state: Vec<f64>,
    t: usize,
    finished: bool,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        let spec = EnvSpec::of(kind);
        Self {
            state: vec![0.0; spec.state_dim],
            spec,
            t: 0,
            finished: true,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Steps taken in the current episode.
    pub fn elapsed(&self) -> usize {
        self.t
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Reinstates a saved mid-episode position.
    pub fn resume(&mut self, state: Vec<f64>, elapsed: usize, finished: bool) -> Result<()> {
        if state.len() != self.spec.state_dim || elapsed > self.spec.horizon {
            return Err(Error::Env(format!(
                "cannot resume {} with state of length {} at step {elapsed}",
                self.spec.kind.as_str(),
                state.len()
            )));
        }
        self.state = state;
        self.t = elapsed;
        self.finished = finished;
        Ok(())
    }

    pub fn reset(&mut self, rng: &mut impl Rng) -> Vec<f64> {
        self.state = match self.spec.kind {
            EnvKind::Bandit => vec![0.0],
            EnvKind::PointMass | EnvKind::SparseReach => {
                vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
            }
        };
        self.t = 0;
        self.finished = false;
        self.state.clone()
    }

    /// Places the point at `x` and starts a fresh episode there.
    pub fn reset_to(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.state_dim {
            return Err(Error::Env(format!(
                "state of length {} for {} (state dim {})",
                x.len(),
                self.spec.kind.as_str(),
                self.spec.state_dim
            )));
        }
        self.state = x.to_vec();
        self.t = 0;
        self.finished = false;
        Ok(self.state.clone())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::Env("step called on a finished episode; reset first".into()));
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::Env(format!(
                "action of length {} for {} (action dim {})",
                action.len(),
                self.spec.kind.as_str(),
                self.spec.action_dim
            )));
        }
        if let Some(bad) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
            return Err(Error::Env(format!("action component {bad} outside [-1, 1]")));
        }
        let s = self.state.clone();
        self.t += 1;
        let (s_next, r, done, success) = match self.spec.kind {
            EnvKind::Bandit => {
                let r = bandit_reward(action[0]);
                (s.clone(), r, true, r > 0.5)
            }
            EnvKind::PointMass | EnvKind::SparseReach => {
                let next: Vec<f64> = s
                    .iter()
                    .zip(action)
                    .map(|(x, a)| (x + MOVE_SCALE * a).clamp(-1.0, 1.0))
                    .collect();
                let d2 = dist2_to_goal(&next);
                if self.spec.kind == EnvKind::PointMass {
                    (next, -d2, false, d2.sqrt() < GOAL_RADIUS)
                } else {
                    let reached = d2.sqrt() < GOAL_RADIUS;
                    (next, if reached { 1.0 } else { 0.0 }, reached, reached)
                }
            }
        };
        self.state = s_next.clone();
        let episode_over = done || self.t >= self.spec.horizon;
        self.finished = episode_over;
        Ok(StepOutcome {
            transition: Transition {
                s,
                a: action.to_vec(),
                r,
                s_next,
                done,
            },
            episode_over,
            success,
        })
    }
}

/// Proportional controller `clip(k (g - x))`, shrunk into the open box.
pub fn expert_action(x: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(GOAL)
        .map(|(x, g)| (EXPERT_GAIN * (g - x)).clamp(-1.0, 1.0) * EXPERT_SHRINK)
        .collect()
}

/// Result of running one policy episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    pub ret: f64,
    pub success: bool,
    pub length: usize,
}

/// Runs one episode from a fresh reset with a state-feedback policy.
pub fn run_episode(
    env: &mut Env,
    rng: &mut impl Rng,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<(EpisodeStats, Vec<Transition>)> {
    let mut s = env.reset(rng);
    let mut stats = EpisodeStats {
        ret: 0.0,
        success: false,
        length: 0,
    };
    let mut transitions = Vec::new();
    loop {
        let a = policy(&s)?;
        let out = env.step(&a)?;
        stats.ret += out.transition.r;
        stats.success |= out.success;
        stats.length += 1;
        s = out.transition.s_next.clone();
        transitions.push(out.transition);
        if out.episode_over {
            return Ok((stats, transitions));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub env: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Seed used to generate the episodes, when known.
    pub seed: Option<u64>,
    pub episodes: usize,
    pub transitions: Vec<Transition>,
}

/// Spread of the demonstration actions around each bandit optimum.
pub const BANDIT_DEMO_STD: f64 = 0.05;

/// Bimodal bandit demonstrations: each action picks one optimum with equal
/// probability and adds Gaussian jitter, kept inside the open action box.
pub fn bandit_demo_actions(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mode = BANDIT_MODES[usize::from(rng.random::<bool>())];
            let jitter: f64 = rng.sample(StandardNormal);
            (mode + BANDIT_DEMO_STD * jitter).clamp(-EXPERT_SHRINK, EXPERT_SHRINK)
        })
        .collect()
}

/// Scripted-expert episodes on the sparse-reach task.
pub fn generate_demos(kind: EnvKind, n_episodes: usize, seed: u64, rng: &mut impl Rng) -> Result<DemoDataset> {
    if kind != EnvKind::SparseReach {
        return Err(Error::Env(format!(
            "the scripted expert drives sparse_reach, not {}",
            kind.as_str()
        )));
    }
    if n_episodes == 0 {
        return Err(Error::Invalid("n_episodes must be positive".into()));
    }
    let mut env = Env::new(kind);
    let mut transitions = Vec::new();
    for episode in 0..n_episodes {
        let (stats, steps) = run_episode(&mut env, rng, |x| Ok(expert_action(x)))?;
        if !stats.success {
            return Err(Error::Env(format!(
                "scripted expert failed episode {episode}; the environment is misconfigured"
            )));
        }
        transitions.extend(steps);
    }
    let spec = env.spec();
    Ok(DemoDataset {
        env: kind,
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        seed: Some(seed),
        episodes: n_episodes,
        transitions,
    })
}

fn push_floats(line: &mut String, xs: &[f64]) {
    for x in xs {
        write!(line, " {x:.16e}").expect("write to string");
    }
}

impl DemoDataset {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{DEMO_MAGIC} {DEMO_VERSION} {} {} {} {}\n",
            self.env.as_str(),
            self.state_dim,
            self.action_dim,
            self.transitions.len()
        );
        for t in &self.transitions {
            let mut line = String::new();
            push_floats(&mut line, &t.s);
            push_floats(&mut line, &t.a);
            push_floats(&mut line, &[t.r]);
            push_floats(&mut line, &t.s_next);
            push_floats(&mut line, &[if t.done { 1.0 } else { 0.0 }]);
            out.push_str(line.trim_start());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f), &path.display().to_string())
    }

    pub fn parse(reader: impl BufRead, context: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(context, "empty demo file"))?
            .map_err(|e| Error::format(context, e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != DEMO_MAGIC || fields[1] != DEMO_VERSION {
            return Err(Error::format(context, format!("bad header `{header}`")));
        }
        let env: EnvKind = fields[2].parse()?;
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::format(context, format!("bad header field `{}`", fields[i])))
        };
        let (sd, ad, count) = (num(3)?, num(4)?, num(5)?);
        let width = 2 * sd + ad + 2;
        let mut transitions = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::format(context, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let xs = line
                .split_whitespace()
                .map(|w| w.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(context, format!("record {i}: {e}")))?;
            if xs.len() != width {
                return Err(Error::format(
                    context,
                    format!("record {i} has {} fields, expected {width}", xs.len()),
                ));
            }
            transitions.push(Transition {
                s: xs[..sd].to_vec(),
                a: xs[sd..sd + ad].to_vec(),
                r: xs[sd + ad],
                s_next: xs[sd + ad + 1..2 * sd + ad + 1].to_vec(),
                done: xs[width - 1] != 0.0,
            });
        }
        if transitions.len() != count {
            return Err(Error::format(
                context,
                format!("header announces {count} records, found {}", transitions.len()),
            ));
        }
        let episodes = transitions.iter().filter(|t| t.done).count();
        Ok(Self {
            env,
            state_dim: sd,
            action_dim: ad,
            seed: None,
            episodes,
            transitions,
        })
    }
}

/// `E[A_1 - A_0 | A_t = x]` for `A_0 ~ N(0, 1)`, `A_1 ~ N(m, τ²)`, coupled
/// independently along straight paths.
pub fn oracle_gaussian_velocity(t: f64, x: f64, m: f64, tau: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Invalid(format!("oracle time {t} outside [0, 1)")));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("oracle target std {tau} must be positive")));
    }
    let coef = (t * tau * tau - (1.0 - t)) / ((1.0 - t).powi(2) + t * t * tau * tau);
    Ok(m + coef * (x - t * m))
}

/// [`oracle_gaussian_velocity`] applied per coordinate; ignores the state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
    pub action_dim: usize,
}

impl VelocityField for GaussianOracle {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity(&self, g: &mut Graph, _p: &BoundParams, t: &[f64], a: Var, _s: Var) -> Result<Var> {
        // v = m + c(t) (x - t m) = c(t) x + m (1 - t c(t)), linear in x.
        let cols = self.action_dim;
        let mut slope = Vec::with_capacity(t.len());
        let mut offset = Vec::with_capacity(t.len() * cols);
        for &ti in t {
            let c = oracle_gaussian_velocity(ti, 1.0, 0.0, self.std)?;
            slope.push(c);
            offset.extend(std::iter::repeat_n(self.mean * (1.0 - ti * c), cols));
        }
        let slope = g.constant(Tensor::matrix(t.len(), 1, slope)?);
        let offset = g.constant(Tensor::matrix(t.len(), cols, offset)?);
        let scaled = g.mul_col(a, slope)?;
        Ok(g.add(scaled, offset)?)
    }
}
