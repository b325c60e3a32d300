//! Per-step gradient norms of the actor loss and the CSV metric streams.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use sacflow_autodiff::{BackwardMode, Gradients, Graph, Tensor, Var};

use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::rollout::{NoiseDraw, TimeGrid};
use crate::sac::critic::{Critic, CriticSpec};
use crate::sac::losses::actor_loss;
use crate::velocity::{FlowActor, VelocityKind, VelocitySpec};
use crate::SacRng;

/// `n_k = mean_b ‖∂L/∂A_{t_k}‖₂` for `k = 0 .. K-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNormProfile {
    pub step: u64,
    pub norms: Vec<f64>,
}

impl GradNormProfile {
    /// Reads the profile off a finished sweep. `pre_actions` holds
    /// `A_{t_0} .. A_{t_K}`; the terminal entry is ignored.
    pub fn from_gradients(g: &Graph, grads: &Gradients, pre_actions: &[Var], step: u64) -> Result<Self> {
        let steps = pre_actions.len().saturating_sub(1);
        let mut norms = Vec::with_capacity(steps);
        for &a in &pre_actions[..steps] {
            let cols = g.value(a).cols();
            let grad = grads.wrt(a)?;
            let rows = grad.len() / cols;
            let total: f64 = grad
                .chunks(cols)
                .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum();
            let n = total / rows as f64;
            if !n.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient norm at sampling step {}", norms.len()),
                    step,
                });
            }
            norms.push(n);
        }
        Ok(Self { step, norms })
    }

    /// `max_k n_k / min_k n_k`.
    pub fn ratio(&self) -> f64 {
        let max = self.norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.norms.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// One backward sweep that keeps intermediate gradients, returning them
/// together with the per-step profile.
pub fn record_step_grad_norms(
    g: &Graph,
    loss: Var,
    pre_actions: &[Var],
    step: u64,
) -> Result<(Gradients, GradNormProfile)> {
    let grads = g.backward(loss, BackwardMode::RetainIntermediates)?;
    let profile = GradNormProfile::from_gradients(g, &grads, pre_actions, step)?;
    Ok((grads, profile))
}

/// Profile of the scalar linear field `v = w A` over `K` Euler steps with
/// `L = Σ A_K`, whose norms are `|1 + w Δt|^{K-k}`.
pub fn linear_velocity_profile(w: f64, k: usize) -> Result<GradNormProfile> {
    let dt = 1.0 / k as f64;
    let mut g = Graph::new();
    let a0 = g.variable(Tensor::matrix(3, 1, vec![0.3, -1.0, 2.0])?);
    let mut path = vec![a0];
    let mut a = a0;
    for _ in 0..k {
        let step = g.scale(a, w * dt);
        a = g.add(a, step)?;
        path.push(a);
    }
    let loss = g.sum(a);
    Ok(record_step_grad_norms(&g, loss, &path, 0)?.1)
}

/// Inputs of a gradient-norm probe at initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct InitProbe {
    pub velocity: VelocitySpec,
    pub critic_hidden: Vec<usize>,
    pub k: usize,
    pub batch: usize,
    pub alpha: f64,
}

impl InitProbe {
    /// From-scratch preset sizes with `K` steps and an init gain on the
    /// velocity network. The entropy weight is zero so the profile reflects
    /// only the chain through the rollout.
    pub fn preset(kind: VelocityKind, k: usize, init_gain: f64) -> Self {
        let spec = EnvSpec::of(EnvKind::PointMass);
        let mut velocity = VelocitySpec::scratch(kind, spec.state_dim, spec.action_dim);
        velocity.init_gain = init_gain;
        Self {
            velocity,
            critic_hidden: vec![256, 256],
            k,
            batch: 256,
            alpha: 0.0,
        }
    }
}

/// Per-step norms of the actor loss for a freshly initialized actor and
/// critic on uniformly drawn point-mass states. Everything is drawn from
/// `seed`, so one seed gives the same states and noise to every velocity
/// kind.
pub fn init_grad_profile(probe: &InitProbe, seed: u64) -> Result<GradNormProfile> {
    let spec = EnvSpec::of(EnvKind::PointMass);
    let mut velocity = probe.velocity.clone();
    velocity.state_dim = spec.state_dim;
    velocity.action_dim = spec.action_dim;
    let mut data_rng = SacRng::seed_from_u64(seed);
    let states: Vec<f64> = (0..probe.batch * spec.state_dim)
        .map(|_| data_rng.random_range(-1.0..=1.0))
        .collect();
    let states = Tensor::matrix(probe.batch, spec.state_dim, states)?;
    let grid = TimeGrid::new(probe.k)?;
    let draw = NoiseDraw::sample(&mut data_rng, probe.batch, spec.action_dim, probe.k);
    let mut critic_rng = SacRng::seed_from_u64(seed.wrapping_add(1));
    let critic = Critic::new(
        CriticSpec {
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            hidden: probe.critic_hidden.clone(),
            count: 2,
        },
        &mut critic_rng,
    )?;
    let mut actor_rng = SacRng::seed_from_u64(seed.wrapping_add(2));
    let actor = FlowActor::new(velocity, &mut actor_rng)?;
    let mut g = Graph::new();
    let ap = g.bind(&actor.params, true);
    let cp = g.bind(&critic.params, false);
    let s = g.constant(states);
    let model = &actor.model;
    let out = actor_loss(
        &mut g,
        &ap,
        model,
        model,
        &critic,
        &cp,
        s,
        &grid,
        &draw,
        probe.alpha,
        None,
    )?;
    let (_, profile) = record_step_grad_norms(&g, out.loss, &out.rollout.pre_actions, 0)?;
    Ok(profile)
}

/// Diagnostic record written once per logging interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return: f64,
    pub success_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub mean_log_pc: f64,
    /// One entry per sampling step; NaN when not recorded in the interval.
    pub grad_norms: Vec<f64>,
    pub clamp_count: u64,
    pub wallclock_ms: u64,
    /// Behaviour-regularization weight in force; 0 outside offline-to-online runs.
    pub beta: f64,
}

/// Column names of `metrics.csv` for `k` sampling steps.
pub fn metrics_header(k: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "step",
        "episode_return",
        "success_rate",
        "actor_loss",
        "critic_loss",
        "alpha",
        "mean_log_pc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..k).map(|i| format!("grad_norm_k{i}")));
    cols.extend(["clamp_count", "wallclock_ms", "beta"].map(String::from));
    cols
}

/// Shortest representation that parses back to the same bits.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl MetricsRow {
    pub fn to_fields(&self) -> Vec<String> {
        let mut out = vec![self.step.to_string()];
        out.extend(
            [
                self.episode_return,
                self.success_rate,
                self.actor_loss,
                self.critic_loss,
                self.alpha,
                self.mean_log_pc,
            ]
            .map(format_f64),
        );
        out.extend(self.grad_norms.iter().map(|&x| format_f64(x)));
        out.push(self.clamp_count.to_string());
        out.push(self.wallclock_ms.to_string());
        out.push(format_f64(self.beta));
        out
    }

    pub fn parse(line: &str, k: usize) -> Result<Self> {
        let bad = |m: String| Error::format("metrics row", m);
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 10 + k {
            return Err(bad(format!("expected {} fields, found {}", 10 + k, fields.len())));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {i} `{}`: {e}", fields[i])))
        };
        let u = |i: usize| -> Result<u64> {
            fields[i]
                .parse::<u64>()
                .map_err(|e| bad(format!("field {i} `{}`: {e}", fields[i])))
        };
        Ok(Self {
            step: u(0)?,
            episode_return: f(1)?,
            success_rate: f(2)?,
            actor_loss: f(3)?,
            critic_loss: f(4)?,
            alpha: f(5)?,
            mean_log_pc: f(6)?,
            grad_norms: (7..7 + k).map(f).collect::<Result<_>>()?,
            clamp_count: u(7 + k)?,
            wallclock_ms: u(8 + k)?,
            beta: f(9 + k)?,
        })
    }

    /// Field-wise equality that treats NaN as equal to NaN.
    pub fn same_bits(&self, other: &Self) -> bool {
        self.to_fields() == other.to_fields()
    }
}

/// Exclusive lock held while a writer owns a file; a second writer fails.
#[derive(Debug)]
pub struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    /// Claims `<target>.lock`; fails while another holder exists.
    pub fn acquire(target: &Path) -> Result<Self> {
        let mut name = target.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                std::io::Error::new(e.kind(), "another writer holds this file"),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Append-only CSV file with a fixed header, flushed after every row.
#[derive(Debug)]
pub struct CsvWriter {
    path: PathBuf,
    file: File,
    columns: usize,
    _lock: WriterLock,
}

impl CsvWriter {
    /// Opens `path` for appending. A new or empty file gets the header; an
    /// existing one must already carry exactly this header.
    pub fn open(path: &Path, header: &[String]) -> Result<Self> {
        let lock = WriterLock::acquire(path)?;
        let line = header.join(",");
        let existing = match File::open(path) {
            Ok(f) => BufReader::new(f)
                .lines()
                .next()
                .transpose()
                .map_err(|e| Error::io(path, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        match existing {
            Some(found) if found != line => {
                return Err(Error::format(
                    "csv header",
                    format!("{} starts with `{found}`, expected `{line}`", path.display()),
                ))
            }
            Some(_) => {}
            None => {
                writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
                file.flush().map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            columns: header.len(),
            _lock: lock,
        })
    }

    pub fn write_fields(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::Dim {
                context: "csv row",
                expected: self.columns,
                got: fields.len(),
            });
        }
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// `metrics.csv` writer; steps must increase.
#[derive(Debug)]
pub struct MetricsWriter {
    csv: CsvWriter,
    k: usize,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn open(path: &Path, k: usize) -> Result<Self> {
        Ok(Self {
            csv: CsvWriter::open(path, &metrics_header(k))?,
            k,
            last_step: None,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if row.grad_norms.len() != self.k {
            return Err(Error::Dim {
                context: "metrics grad-norm columns",
                expected: self.k,
                got: row.grad_norms.len(),
            });
        }
        if self.last_step.is_some_and(|s| row.step <= s) {
            return Err(Error::Invalid(format!(
                "metrics step {} does not follow {}",
                row.step,
                self.last_step.unwrap_or_default()
            )));
        }
        self.csv.write_fields(&row.to_fields())?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

/// `gradnorms.csv` writer: one `step,k,norm` line per sampling step.
#[derive(Debug)]
pub struct GradNormWriter {
    csv: CsvWriter,
}

impl GradNormWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let header = ["step", "k", "norm"].map(String::from);
        Ok(Self {
            csv: CsvWriter::open(path, &header)?,
        })
    }

    pub fn write(&mut self, profile: &GradNormProfile) -> Result<()> {
        for (k, n) in profile.norms.iter().enumerate() {
            self.csv
                .write_fields(&[profile.step.to_string(), k.to_string(), format_f64(*n)])?;
        }
        Ok(())
    }
}

/// Parses a whole `metrics.csv`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("metrics file", format!("{} is empty", path.display())))?;
    let k = header.split(',').filter(|c| c.starts_with("grad_norm_k")).count();
    if header.split(',').map(String::from).collect::<Vec<_>>() != metrics_header(k) {
        return Err(Error::format("metrics header", header.to_string()));
    }
    lines.map(|l| MetricsRow::parse(l, k)).collect()
}
