//! Small layer helpers over the graph. Layers only hold parameter ids; values
//! live in the [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a parameter participates in weight-level isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// 2-D weight matrix; eligible for per-element ownership.
    Weight,
    /// Bias, norm gain, positional table: owned whole by the first task.
    Vector,
    /// Managed by its own freezing rules (codebook, adapters, language rows).
    Exempt,
}

/// Registry of roles alongside the store.
#[derive(Clone, Debug, Default)]
pub struct Roles {
    roles: Vec<ParamRole>,
}

impl Roles {
    pub fn set(&mut self, id: ParamId, role: ParamRole) {
        let i = id.index();
        if self.roles.len() <= i {
            self.roles.resize(i + 1, ParamRole::Exempt);
        }
        self.roles[i] = role;
    }

    pub fn get(&self, id: ParamId) -> ParamRole {
        self.roles.get(id.index()).copied().unwrap_or(ParamRole::Exempt)
    }
}

pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub roles: &'a mut Roles,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn add(&mut self, name: &str, value: Tensor, role: ParamRole) -> Result<ParamId> {
        let id = self.store.add(name, value)?;
        self.roles.set(id, role);
        Ok(id)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64, role: ParamRole) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t, role)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let weight = self.randn(&format!("{name}.w"), &[d_in, d_out], (d_in as f64).powf(-0.5), ParamRole::Weight)?;
        let bias = if bias {
            Some(self.add(&format!("{name}.b"), Tensor::zeros(&[d_out]), ParamRole::Vector)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn zero_linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let weight = self.add(&format!("{name}.w"), Tensor::zeros(&[d_in, d_out]), ParamRole::Weight)?;
        let bias = Some(self.add(&format!("{name}.b"), Tensor::zeros(&[d_out]), ParamRole::Vector)?);
        Ok(Linear { weight, bias })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.add(&format!("{name}.g"), Tensor::ones(&[d]), ParamRole::Vector)?,
            beta: self.add(&format!("{name}.b"), Tensor::zeros(&[d]), ParamRole::Vector)?,
        })
    }

    pub fn mlp(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Mlp> {
        Ok(Mlp {
            fc1: self.linear(&format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: self.linear(&format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }
}

/// `y = x W + b` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        self.forward_with(g, store, x, w)
    }

    /// Same layer with an externally supplied (e.g. adapted) weight.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, x: Var, w: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt, 1e-5)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
