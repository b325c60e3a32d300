//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{BackwardMode, BoundParams, Graph, Var};
use crate::params::ParamStore;

/// Which coordinates of each parameter tensor are probed.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProbeOptions {
    /// Probe at most this many coordinates per tensor (chosen at random);
    /// `None` probes every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

/// Builds a scalar from freshly bound parameters. Must be a pure function of
/// the parameter values.
pub trait GraphBuilder {
    fn build(&self, g: &mut Graph, params: &BoundParams) -> Result<Var>;
}

impl<F> GraphBuilder for F
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    fn build(&self, g: &mut Graph, params: &BoundParams) -> Result<Var> {
        self(g, params)
    }
}

/// Value and parameter gradients of the scalar built by `builder`.
pub fn evaluate_and_grad(builder: &impl GraphBuilder, params: &ParamStore) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let root = builder.build(&mut g, &bound)?;
    let grads = g.backward(root, BackwardMode::ParamsOnly)?;
    Ok((g.scalar(root), grads.for_params(&bound)))
}

fn evaluate(builder: &impl GraphBuilder, params: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let root = builder.build(&mut g, &bound)?;
    let shape = g.shape(root);
    if g.value(root).len() != 1 {
        return Err(AutodiffError::NonScalarRoot(shape.to_vec()));
    }
    Ok(g.scalar(root))
}

/// Max over probed coordinates of `|analytic - central| / max(1, |analytic|)`.
pub fn finite_diff_check(
    builder: &impl GraphBuilder,
    params: &ParamStore,
    h: f64,
    options: ProbeOptions,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let first = evaluate(builder, params)?;
    let second = evaluate(builder, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let (_, analytic) = evaluate_and_grad(builder, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = match options.max_coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.tensors()[ti].data()[c];
            probe.tensors_mut()[ti].data_mut()[c] = orig + h;
            let plus = evaluate(builder, &probe)?;
            probe.tensors_mut()[ti].data_mut()[c] = orig - h;
            let minus = evaluate(builder, &probe)?;
            probe.tensors_mut()[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad[c] - numeric).abs() / grad[c].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
