//! Twin Q-networks with delayed targets.

use rand::Rng;
use sacflow_autodiff::{BoundParams, Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp, MlpSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub count: usize,
}

/// `count` MLPs `[s; a] -> Q`. Online and target parameters share a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub spec: CriticSpec,
    pub nets: Vec<Mlp>,
    pub params: ParamStore,
    pub target: ParamStore,
}

impl Critic {
    pub fn new(spec: CriticSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.count == 0 {
            return Err(Error::Invalid("at least one critic is required".into()));
        }
        let mut params = ParamStore::new();
        let mut widths = vec![spec.state_dim + spec.action_dim];
        widths.extend(&spec.hidden);
        widths.push(1);
        let nets = (0..spec.count)
            .map(|i| {
                Mlp::new(
                    &mut params,
                    &format!("q{i}"),
                    MlpSpec::new(widths.clone(), Activation::Relu),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let target = params.clone();
        Ok(Self {
            spec,
            nets,
            params,
            target,
        })
    }

    /// One `[batch, 1]` node per critic.
    pub fn q_values(&self, g: &mut Graph, p: &BoundParams, s: Var, a: Var) -> Result<Vec<Var>> {
        let x = g.concat_cols(&[s, a])?;
        self.nets.iter().map(|net| net.forward(g, p, x)).collect()
    }

    /// Elementwise minimum over critics.
    pub fn min_q(&self, g: &mut Graph, p: &BoundParams, s: Var, a: Var) -> Result<Var> {
        let qs = self.q_values(g, p, s, a)?;
        let mut m = qs[0];
        for &q in &qs[1..] {
            m = g.minimum(m, q)?;
        }
        Ok(m)
    }

    /// `target <- τ online + (1 - τ) target`; `τ = 1` copies exactly.
    pub fn target_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Invalid(format!("target rate τ must lie in (0, 1], got {tau}")));
        }
        self.target.blend_from(&self.params, tau)?;
        Ok(())
    }
}
