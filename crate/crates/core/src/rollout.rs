//! Deterministic and noise-augmented flow rollouts, tanh squashing and the
//! joint path log-density.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;
use sacflow_autodiff::{BackwardMode, BoundParams, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::velocity::{StepSigma, VelocityField};

/// Pre-actions are clamped to this magnitude before squashing.
pub const PRE_ACTION_LIMIT: f64 = 20.0;

/// Rows per graph when a value-level helper processes a large batch.
const CHUNK_ROWS: usize = 4096;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Uniform grid `0 = t_0 < ... < t_K = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    k: usize,
}

impl TimeGrid {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("a time grid needs at least one step".into()));
        }
        Ok(Self { k })
    }

    pub fn steps(&self) -> usize {
        self.k
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.k as f64
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.k).map(|i| i as f64 / self.k as f64).collect()
    }

    /// Times at which the velocity is evaluated: `t_0 .. t_{K-1}`.
    pub fn step_time(&self, i: usize) -> f64 {
        i as f64 / self.k as f64
    }
}

/// `(c1, c2)` with `b = c1 v - c2 A`.
pub fn drift_coefficients(t: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Invalid(format!("drift time {t} outside [0, 1)")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("noise scale {sigma} must be non-negative")));
    }
    let s2 = sigma * sigma;
    Ok(((1.0 - t + t * s2 / 2.0) / (1.0 - t), s2 / (2.0 * (1.0 - t))))
}

/// Drift of the noisy rollout for one coordinate.
pub fn corrected_drift(t: f64, a: f64, v: f64, sigma: f64) -> Result<f64> {
    let (c1, c2) = drift_coefficients(t, sigma)?;
    Ok(c1 * v - c2 * a)
}

/// Graph form of [`corrected_drift`]: `v + σ²/(2(1-t)) (t v - A)`.
pub fn corrected_drift_graph(g: &mut Graph, t: f64, a: Var, v: Var, sigma: Var) -> Result<Var> {
    drift_coefficients(t, 0.0)?;
    let s2 = g.square(sigma);
    let w = g.scale(s2, 1.0 / (2.0 * (1.0 - t)));
    let tv = g.scale(v, t);
    let pull = g.sub(tv, a)?;
    let corr = g.mul(w, pull)?;
    Ok(g.add(v, corr)?)
}

/// `log(1 - tanh(u)^2)` without cancellation.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - sacflow_autodiff::softplus(-2.0 * u))
}

/// `(tanh(u), Σ log(1 - tanh(u_j)^2))`.
pub fn squash_with_logdet(u: &[f64]) -> (Vec<f64>, f64) {
    let a = u.iter().map(|x| x.tanh()).collect();
    let corr = u.iter().map(|&x| log_one_minus_tanh_sq(x)).sum();
    (a, corr)
}

/// Graph form of [`squash_with_logdet`]; the correction is `[batch, 1]`.
pub fn squash_graph(g: &mut Graph, u: Var) -> (Var, Var) {
    let a = g.tanh(u);
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let nu = g.neg(u);
    let inner = g.sub(nu, sp).expect("same shape");
    let inner = g.add_scalar(inner, LN_2);
    let per_dim = g.scale(inner, 2.0);
    (a, g.sum_cols(per_dim))
}

/// `log N(x; 0, I)` per row.
pub fn standard_normal_log_density(row: &[f64]) -> f64 {
    row.iter().map(|x| -0.5 * x * x - HALF_LN_2PI).sum()
}

/// Base sample and per-step standard normal noise for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub base: Tensor,
    pub noises: Vec<Tensor>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut impl Rng, batch: usize, action_dim: usize, steps: usize) -> Self {
        let mut draw = || {
            let data = (0..batch * action_dim).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::matrix(batch, action_dim, data).expect("shape")
        };
        let base = draw();
        let noises = (0..steps).map(|_| draw()).collect();
        Self { base, noises }
    }

    fn rows(&self, start: usize, end: usize) -> Self {
        let slice = |t: &Tensor| {
            let c = t.cols();
            Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec()).expect("shape")
        };
        Self {
            base: slice(&self.base),
            noises: self.noises.iter().map(slice).collect(),
        }
    }
}

/// Graph nodes of one noisy rollout over a batch.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// `A_{t_0} .. A_{t_K}`; the first is a gradient-carrying leaf.
    pub pre_actions: Vec<Var>,
    /// `log η_i`, each `[batch, 1]`.
    pub step_logp: Vec<Var>,
    /// `log ζ(A_{t_0})`, constant `[batch, 1]`.
    pub base_logp: Var,
    /// `Σ_j log(1 - a_j²)`, `[batch, 1]`.
    pub squash_correction: Var,
    /// `log p_c`, `[batch, 1]`.
    pub log_pc: Var,
    pub action: Var,
    /// Entries of `A_{t_K}` beyond [`PRE_ACTION_LIMIT`].
    pub clamp_events: u64,
}

fn check_draw(draw: &NoiseDraw, rows: usize, action_dim: usize, grid: &TimeGrid) -> Result<()> {
    if draw.noises.len() != grid.steps() {
        return Err(Error::Dim {
            context: "rollout noise steps",
            expected: grid.steps(),
            got: draw.noises.len(),
        });
    }
    for t in std::iter::once(&draw.base).chain(&draw.noises) {
        if t.rows() != rows || t.cols() != action_dim {
            return Err(Error::Dim {
                context: "rollout noise shape",
                expected: rows * action_dim,
                got: t.len(),
            });
        }
    }
    Ok(())
}

fn check_step(g: &Graph, v: Var, step: usize) -> Result<()> {
    if g.value(v).data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "rollout pre-action".into(),
            step: step as u64,
        });
    }
    Ok(())
}

/// Noisy rollout with reparameterized steps:
/// `A_{i+1} = A_i + b Δt + σ √Δt ε_i`, plus squashing and `log p_c`.
pub fn noisy_rollout_graph(
    g: &mut Graph,
    p: &BoundParams,
    field: &dyn VelocityField,
    sigma: &dyn StepSigma,
    s: Var,
    grid: &TimeGrid,
    draw: &NoiseDraw,
) -> Result<Rollout> {
    let rows = g.value(s).rows();
    check_draw(draw, rows, field.action_dim(), grid)?;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let base_vals: Vec<f64> = (0..rows)
        .map(|r| standard_normal_log_density(draw.base.row(r)))
        .collect();
    let base_logp = g.constant(Tensor::matrix(rows, 1, base_vals)?);
    let mut a = g.variable(draw.base.clone());
    let mut pre_actions = vec![a];
    let mut step_logp = Vec::with_capacity(grid.steps());
    for (i, eps) in draw.noises.iter().enumerate() {
        let t = grid.step_time(i);
        let ts = vec![t; rows];
        let v = field.velocity(g, p, &ts, a, s)?;
        let sig = sigma.sigma(g, p, &ts, a, s)?;
        let b = corrected_drift_graph(g, t, a, v, sig)?;
        let step = g.scale(b, dt);
        let mean = g.add(a, step)?;
        let std = g.scale(sig, sqrt_dt);
        let e = g.constant(eps.clone());
        let kick = g.mul(std, e)?;
        let next = g.add(mean, kick)?;
        check_step(g, next, i)?;
        let logp = g.gaussian_log_density(next, mean, std)?;
        step_logp.push(g.sum_cols(logp));
        pre_actions.push(next);
        a = next;
    }
    let clamp_events = g.value(a).data().iter().filter(|x| x.abs() > PRE_ACTION_LIMIT).count() as u64;
    let u = g.clamp(a, -PRE_ACTION_LIMIT, PRE_ACTION_LIMIT);
    let (action, squash_correction) = squash_graph(g, u);
    let mut log_pc = base_logp;
    for &lp in &step_logp {
        log_pc = g.add(log_pc, lp)?;
    }
    let log_pc = g.sub(log_pc, squash_correction)?;
    Ok(Rollout {
        pre_actions,
        step_logp,
        base_logp,
        squash_correction,
        log_pc,
        action,
        clamp_events,
    })
}

/// `K` Euler steps `A_{i+1} = A_i + Δt v(t_i, A_i, s)`; returns every
/// pre-action, the first being `a0` itself.
pub fn deterministic_rollout_graph(
    g: &mut Graph,
    p: &BoundParams,
    field: &dyn VelocityField,
    s: Var,
    a0: Var,
    grid: &TimeGrid,
) -> Result<Vec<Var>> {
    let rows = g.value(a0).rows();
    let mut a = a0;
    let mut out = vec![a];
    for i in 0..grid.steps() {
        let ts = vec![grid.step_time(i); rows];
        let v = field.velocity(g, p, &ts, a, s)?;
        let step = g.scale(v, grid.dt());
        a = g.add(a, step)?;
        check_step(g, a, i)?;
        out.push(a);
    }
    Ok(out)
}

fn chunks(rows: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows.div_ceil(CHUNK_ROWS).max(1)).map(move |c| (c * CHUNK_ROWS, ((c + 1) * CHUNK_ROWS).min(rows)))
}

fn row_slice(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec()).expect("shape")
}

fn stack_rows(parts: Vec<Tensor>, cols: usize) -> Tensor {
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Terminal pre-action of the deterministic rollout (values only).
pub fn deterministic_rollout(
    field: &dyn VelocityField,
    params: &ParamStore,
    s: &Tensor,
    a0: &Tensor,
    grid: &TimeGrid,
) -> Result<Tensor> {
    if s.rows() != a0.rows() {
        return Err(Error::Dim {
            context: "deterministic rollout rows",
            expected: s.rows(),
            got: a0.rows(),
        });
    }
    let mut parts = Vec::new();
    for (start, end) in chunks(s.rows()) {
        let mut g = Graph::new();
        let p = g.bind(params, false);
        let sv = g.constant(row_slice(s, start, end));
        let av = g.constant(row_slice(a0, start, end));
        let path = deterministic_rollout_graph(&mut g, &p, field, sv, av, grid)?;
        parts.push(g.value(*path.last().expect("non-empty")).clone());
    }
    Ok(stack_rows(parts, a0.cols()))
}

/// Values of a batch of noisy rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPath {
    /// `A_{t_0} .. A_{t_K}`, each `[batch, action_dim]`.
    pub pre_actions: Vec<Tensor>,
    /// `ε_0 .. ε_{K-1}`.
    pub noises: Vec<Tensor>,
    /// `log η_i`, `[batch, K]`.
    pub per_step_logp: Tensor,
    pub base_logp: Vec<f64>,
    pub squash_correction: Vec<f64>,
    /// `tanh` of the clamped terminal pre-action.
    pub action: Tensor,
    pub log_pc: Vec<f64>,
    pub clamp_events: u64,
}

impl FlowPath {
    pub fn batch(&self) -> usize {
        self.action.rows()
    }

    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    /// `log ζ + Σ log η_i - Σ log(1 - a_j²)` recomputed from the parts.
    pub fn recombined_log_pc(&self, row: usize) -> f64 {
        self.base_logp[row] + self.per_step_logp.row(row).iter().sum::<f64>() - self.squash_correction[row]
    }

    fn from_graph(g: &Graph, r: &Rollout, draw: &NoiseDraw) -> Result<Self> {
        let rows = g.value(r.action).rows();
        let k = r.step_logp.len();
        let mut per_step = vec![0.0; rows * k];
        for (i, &lp) in r.step_logp.iter().enumerate() {
            for (row, &v) in g.value(lp).data().iter().enumerate() {
                per_step[row * k + i] = v;
            }
        }
        Ok(Self {
            pre_actions: r.pre_actions.iter().map(|&v| g.value(v).clone()).collect(),
            noises: draw.noises.clone(),
            per_step_logp: Tensor::matrix(rows, k, per_step)?,
            base_logp: g.value(r.base_logp).data().to_vec(),
            squash_correction: g.value(r.squash_correction).data().to_vec(),
            action: g.value(r.action).clone(),
            log_pc: g.value(r.log_pc).data().to_vec(),
            clamp_events: r.clamp_events,
        })
    }

    fn concat(parts: Vec<FlowPath>) -> FlowPath {
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("at least one chunk");
        for part in it {
            let cat = |a: &Tensor, b: Tensor| stack_rows(vec![a.clone(), b], a.cols());
            for (x, y) in acc.pre_actions.iter_mut().zip(part.pre_actions) {
                *x = cat(x, y);
            }
            for (x, y) in acc.noises.iter_mut().zip(part.noises) {
                *x = cat(x, y);
            }
            acc.per_step_logp = cat(&acc.per_step_logp, part.per_step_logp);
            acc.action = cat(&acc.action, part.action);
            acc.base_logp.extend(part.base_logp);
            acc.squash_correction.extend(part.squash_correction);
            acc.log_pc.extend(part.log_pc);
            acc.clamp_events += part.clamp_events;
        }
        acc
    }
}

/// Noisy rollout over given noise, evaluated without gradients.
pub fn noisy_rollout_values(
    field: &dyn VelocityField,
    sigma: &dyn StepSigma,
    params: &ParamStore,
    s: &Tensor,
    grid: &TimeGrid,
    draw: &NoiseDraw,
) -> Result<FlowPath> {
    check_draw(draw, s.rows(), field.action_dim(), grid)?;
    let mut parts = Vec::new();
    for (start, end) in chunks(s.rows()) {
        let mut g = Graph::new();
        let p = g.bind(params, false);
        let sv = g.constant(row_slice(s, start, end));
        let sub = draw.rows(start, end);
        let r = noisy_rollout_graph(&mut g, &p, field, sigma, sv, grid, &sub)?;
        parts.push(FlowPath::from_graph(&g, &r, &sub)?);
    }
    Ok(FlowPath::concat(parts))
}

/// One noisy rollout per state row: draws the noise from `rng`, then
/// squashes and scores the path.
pub fn sample_action(
    field: &dyn VelocityField,
    sigma: &dyn StepSigma,
    params: &ParamStore,
    s: &Tensor,
    grid: &TimeGrid,
    rng: &mut impl Rng,
) -> Result<FlowPath> {
    let draw = NoiseDraw::sample(rng, s.rows(), field.action_dim(), grid.steps());
    noisy_rollout_values(field, sigma, params, s, grid, &draw)
}

/// `log p_c` of a recorded path, as a function of the parameters bound in
/// `p`. The pre-actions are fixed, so only the per-step transition densities
/// depend on the parameters.
pub fn log_path_density(
    g: &mut Graph,
    p: &BoundParams,
    field: &dyn VelocityField,
    sigma: &dyn StepSigma,
    path: &FlowPath,
    s: Var,
    grid: &TimeGrid,
) -> Result<Var> {
    let rows = g.value(s).rows();
    if path.batch() != rows || path.steps() != grid.steps() || path.pre_actions.len() != grid.steps() + 1 {
        return Err(Error::Invalid(format!(
            "path with {} rows and {} steps does not match {} states on a {}-step grid",
            path.batch(),
            path.steps(),
            rows,
            grid.steps()
        )));
    }
    let dt = grid.dt();
    let base = g.constant(Tensor::matrix(rows, 1, path.base_logp.clone())?);
    let corr = g.constant(Tensor::matrix(rows, 1, path.squash_correction.clone())?);
    let mut total = g.sub(base, corr)?;
    for i in 0..grid.steps() {
        let t = grid.step_time(i);
        let ts = vec![t; rows];
        let a = g.constant(path.pre_actions[i].clone());
        let next = g.constant(path.pre_actions[i + 1].clone());
        let v = field.velocity(g, p, &ts, a, s)?;
        let sig = sigma.sigma(g, p, &ts, a, s)?;
        let b = corrected_drift_graph(g, t, a, v, sig)?;
        let step = g.scale(b, dt);
        let mean = g.add(a, step)?;
        let std = g.scale(sig, dt.sqrt());
        let lp = g.gaussian_log_density(next, mean, std)?;
        let lp = g.sum_cols(lp);
        total = g.add(total, lp)?;
    }
    Ok(total)
}

/// Gradient of `Σ_rows log p_c` for a recorded path, assembled step by step
/// from the analytic Gaussian score
/// `∇ log N(x; m, s²) = (x-m)/s² ∇m + ((x-m)²/s³ - 1/s) ∇s`,
/// with `∇m` and `∇s` obtained as vector-Jacobian products. Aligned with the
/// tensors of `params`.
pub fn analytic_path_score(
    field: &dyn VelocityField,
    sigma: &dyn StepSigma,
    params: &ParamStore,
    path: &FlowPath,
    s: &Tensor,
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    let mut total: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let dt = grid.dt();
    for i in 0..grid.steps() {
        let mut g = Graph::new();
        let p = g.bind(params, true);
        let t = grid.step_time(i);
        let ts = vec![t; s.rows()];
        let sv = g.constant(s.clone());
        let a = g.constant(path.pre_actions[i].clone());
        let v = field.velocity(&mut g, &p, &ts, a, sv)?;
        let sig = sigma.sigma(&mut g, &p, &ts, a, sv)?;
        let b = corrected_drift_graph(&mut g, t, a, v, sig)?;
        let step = g.scale(b, dt);
        let mean = g.add(a, step)?;
        let std = g.scale(sig, dt.sqrt());
        let x = path.pre_actions[i + 1].data();
        let (m, sd) = (g.value(mean).data().to_vec(), g.value(std).data().to_vec());
        let mut cm = Vec::with_capacity(x.len());
        let mut cs = Vec::with_capacity(x.len());
        for ((&x, &m), &sd) in x.iter().zip(&m).zip(&sd) {
            let r = x - m;
            cm.push(r / (sd * sd));
            cs.push(r * r / (sd * sd * sd) - 1.0 / sd);
        }
        let shape = path.pre_actions[i + 1].shape().to_vec();
        let cm = g.constant(Tensor::new(shape.clone(), cm)?);
        let cs = g.constant(Tensor::new(shape, cs)?);
        let wm = g.mul(mean, cm)?;
        let ws = g.mul(std, cs)?;
        let both = g.add(wm, ws)?;
        let root = g.sum(both);
        let grads = g.backward(root, BackwardMode::ParamsOnly)?;
        for (acc, gr) in total.iter_mut().zip(grads.for_params(&p)) {
            acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::FixedSigma;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `v = c` for every input.
    struct ConstantField(Vec<f64>);

    impl VelocityField for ConstantField {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, g: &mut Graph, _p: &BoundParams, t: &[f64], _a: Var, _s: Var) -> Result<Var> {
            let data = t.iter().flat_map(|_| self.0.iter().copied()).collect();
            Ok(g.constant(Tensor::matrix(t.len(), self.0.len(), data)?))
        }
    }

    #[test]
    fn grid_properties() {
        let grid = TimeGrid::new(4).unwrap();
        assert_eq!(grid.knots(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(grid.dt(), 0.25);
        assert!((0..4).all(|i| grid.step_time(i) < 1.0));
        assert!(TimeGrid::new(0).is_err());
    }

    #[test]
    fn drift_examples() {
        assert_eq!(corrected_drift(0.3, 2.0, 1.7, 0.0).unwrap(), 1.7);
        let b = corrected_drift(0.5, 2.0, 1.0, 0.1).unwrap();
        assert!((b - 0.985).abs() < 1e-12, "{b}");
        let (c1, c2) = drift_coefficients(0.5, 0.1).unwrap();
        assert!((c1 - 1.005).abs() < 1e-12 && (c2 - 0.01).abs() < 1e-12);
        let b0 = corrected_drift(0.0, 1.0, 0.0, 0.1).unwrap();
        assert!((b0 + 0.005).abs() < 1e-15);
        assert!(corrected_drift(1.0, 0.0, 0.0, 0.1).is_err());
        assert!(corrected_drift(1.2, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn drift_graph_matches_scalar_form() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![2.0, -1.0]));
        let v = g.constant(Tensor::vector(vec![1.0, 0.5]));
        let s = g.constant(Tensor::vector(vec![0.1, 0.3]));
        let b = corrected_drift_graph(&mut g, 0.5, a, v, s).unwrap();
        let expect = [
            corrected_drift(0.5, 2.0, 1.0, 0.1).unwrap(),
            corrected_drift(0.5, -1.0, 0.5, 0.3).unwrap(),
        ];
        for (x, y) in g.value(b).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn squash_examples() {
        let (a, c) = squash_with_logdet(&[0.0]);
        assert_eq!((a[0], c), (0.0, 0.0));
        let (_, c) = squash_with_logdet(&[2.0]);
        assert!((c + 2.65001).abs() < 1e-5, "{c}");
        assert!((c - (1.0 - 2f64.tanh().powi(2)).ln()).abs() < 1e-12);
        for u in [40.0, -40.0] {
            let (a, c) = squash_with_logdet(&[u]);
            assert_eq!(a[0].abs(), 1.0);
            assert!(c.is_finite());
            assert!((c - 2.0 * (LN_2 - 40.0)).abs() < 1e-12, "{c}");
        }
    }

    #[test]
    fn squash_graph_matches_values() {
        let u = vec![-3.0, -0.5, 0.0, 0.7, 25.0];
        let mut g = Graph::new();
        let uv = g.constant(Tensor::matrix(1, 5, u.clone()).unwrap());
        let (a, c) = squash_graph(&mut g, uv);
        let (ea, ec) = squash_with_logdet(&u);
        assert_eq!(g.value(a).data(), &ea[..]);
        assert!((g.scalar(c) - ec).abs() < 1e-12);
    }

    #[test]
    fn zero_and_constant_velocity_rollouts() {
        let grid = TimeGrid::new(4).unwrap();
        let s = Tensor::zeros(&[3, 1]);
        let a0 = Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 1.5, -2.0, 0.0]).unwrap();
        let zero = ConstantField(vec![0.0, 0.0]);
        let out = deterministic_rollout(&zero, &ParamStore::new(), &s, &a0, &grid).unwrap();
        assert_eq!(out, a0);
        let c = ConstantField(vec![0.8, -1.2]);
        let out = deterministic_rollout(&c, &ParamStore::new(), &s, &a0, &grid).unwrap();
        for r in 0..3 {
            for j in 0..2 {
                assert!((out.get(r, j) - a0.get(r, j) - c.0[j]).abs() < 1e-12);
            }
        }
        let one = deterministic_rollout(&c, &ParamStore::new(), &s, &a0, &TimeGrid::new(1).unwrap()).unwrap();
        let quarter = {
            let mut g = Graph::new();
            let p = g.bind(&ParamStore::new(), false);
            let sv = g.constant(s.clone());
            let av = g.constant(a0.clone());
            deterministic_rollout_graph(&mut g, &p, &c, sv, av, &grid)
                .map(|v| g.value(v[1]).clone())
                .unwrap()
        };
        assert!((quarter.get(0, 0) - (0.1 + 0.25 * 0.8)).abs() < 1e-15);
        assert!((one.get(0, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn single_step_density_at_mean() {
        // K = 1, A_0 = 0, zero drift, noise 0: the step lands on its mean.
        let grid = TimeGrid::new(1).unwrap();
        let zero = ConstantField(vec![0.0]);
        let draw = NoiseDraw {
            base: Tensor::zeros(&[1, 1]),
            noises: vec![Tensor::zeros(&[1, 1])],
        };
        let s = Tensor::zeros(&[1, 1]);
        let path = noisy_rollout_values(&zero, &FixedSigma(0.1), &ParamStore::new(), &s, &grid, &draw).unwrap();
        let step = path.per_step_logp.get(0, 0);
        // K = 1 gives Δt = 1, so the step std is σ.
        assert!((step - (-0.5 * (2.0 * std::f64::consts::PI * 0.01).ln())).abs() < 1e-12);
        assert!((path.base_logp[0] + 0.91894).abs() < 1e-5);
        assert_eq!(path.squash_correction[0], 0.0);
        assert!((path.log_pc[0] - path.recombined_log_pc(0)).abs() < 1e-12);

        // With Δt = 0.25 and σ = 0.1 the step std is 0.05.
        let grid = TimeGrid::new(4).unwrap();
        let draw = NoiseDraw {
            base: Tensor::zeros(&[1, 1]),
            noises: vec![Tensor::zeros(&[1, 1]); 4],
        };
        let path = noisy_rollout_values(&zero, &FixedSigma(0.1), &ParamStore::new(), &s, &grid, &draw).unwrap();
        assert!((path.per_step_logp.get(0, 0) - 2.0768).abs() < 1e-4);
        assert!((0.1 * grid.dt().sqrt() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let grid = TimeGrid::new(2).unwrap();
        let s = Tensor::zeros(&[1, 1]);
        let r = sample_action(
            &ConstantField(vec![0.0]),
            &FixedSigma(0.0),
            &ParamStore::new(),
            &s,
            &grid,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn mismatched_path_is_rejected() {
        let grid = TimeGrid::new(2).unwrap();
        let field = ConstantField(vec![0.0]);
        let s = Tensor::zeros(&[2, 1]);
        let path = sample_action(
            &field,
            &FixedSigma(0.1),
            &ParamStore::new(),
            &s,
            &grid,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.bind(&ParamStore::new(), true);
        let s3 = g.constant(Tensor::zeros(&[3, 1]));
        assert!(log_path_density(&mut g, &p, &field, &FixedSigma(0.1), &path, s3, &grid).is_err());
        let s2 = g.constant(Tensor::zeros(&[2, 1]));
        let other = TimeGrid::new(3).unwrap();
        assert!(log_path_density(&mut g, &p, &field, &FixedSigma(0.1), &path, s2, &other).is_err());
    }

    #[test]
    fn nan_velocity_names_the_step() {
        struct Exploding;
        impl VelocityField for Exploding {
            fn state_dim(&self) -> usize {
                1
            }
            fn action_dim(&self) -> usize {
                1
            }
            fn velocity(&self, g: &mut Graph, _p: &BoundParams, t: &[f64], _a: Var, _s: Var) -> Result<Var> {
                let v = if t[0] >= 0.5 { f64::NAN } else { 0.0 };
                Ok(g.constant(Tensor::full(&[t.len(), 1], v)))
            }
        }
        let grid = TimeGrid::new(4).unwrap();
        let s = Tensor::zeros(&[1, 1]);
        let err =
            deterministic_rollout(&Exploding, &ParamStore::new(), &s, &Tensor::zeros(&[1, 1]), &grid).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 2, .. }), "{err}");
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let grid = TimeGrid::new(4).unwrap();
        let field = ConstantField(vec![3.0, -3.0]);
        let s = Tensor::zeros(&[50, 1]);
        let run = |seed| {
            sample_action(
                &field,
                &FixedSigma(0.5),
                &ParamStore::new(),
                &s,
                &grid,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        let (a, b) = (run(9), run(9));
        assert_eq!(a, b);
        assert!(a.action.data().iter().all(|x| x.abs() < 1.0));
        for r in 0..50 {
            assert!((a.log_pc[r] - a.recombined_log_pc(r)).abs() < 1e-10);
            let (sq, _) = squash_with_logdet(a.pre_actions[4].row(r));
            assert_eq!(&sq[..], a.action.row(r));
        }
    }

    #[test]
    fn chunked_values_match_single_graph() {
        let grid = TimeGrid::new(3).unwrap();
        let field = ConstantField(vec![0.3]);
        let rows = CHUNK_ROWS + 17;
        let s = Tensor::zeros(&[rows, 1]);
        let draw = NoiseDraw::sample(&mut ChaCha8Rng::seed_from_u64(1), rows, 1, 3);
        let chunked = noisy_rollout_values(&field, &FixedSigma(0.2), &ParamStore::new(), &s, &grid, &draw).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&ParamStore::new(), false);
        let sv = g.constant(s.clone());
        let r = noisy_rollout_graph(&mut g, &p, &field, &FixedSigma(0.2), sv, &grid, &draw).unwrap();
        let whole = FlowPath::from_graph(&g, &r, &draw).unwrap();
        assert_eq!(chunked, whole);
    }
}
