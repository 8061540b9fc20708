//! Gaussian-mixture action head and its negative log-likelihood.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Mlp};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -9.210_340_371_976_184; // ln 1e-4
pub const LOG_STD_MAX: f64 = 2.302_585_092_994_046; // ln 10
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// One mixture: `R` components over an `A`-dimensional action.
#[derive(Clone, Debug, PartialEq)]
pub struct GMMParams {
    /// `R × A`, row-major.
    pub means: Vec<f64>,
    /// `R × A`, clamped to `[ln 1e-4, ln 10]` on use.
    pub log_stds: Vec<f64>,
    pub mixture_logits: Vec<f64>,
    pub action_dim: usize,
}

impl GMMParams {
    pub fn components(&self) -> usize {
        self.mixture_logits.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.components() * self.action_dim;
        if self.components() == 0 || self.means.len() != n || self.log_stds.len() != n {
            return Err(Error::contract("inconsistent mixture parameter lengths"));
        }
        Ok(())
    }

    /// η = softmax(logits).
    pub fn weights(&self) -> Vec<f64> {
        let m = self.mixture_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.mixture_logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn log_std(&self, i: usize) -> f64 {
        self.log_stds[i].clamp(LOG_STD_MIN, LOG_STD_MAX)
    }
}

/// `−log Σ_r η_r N(a | μ_r, diag σ_r²)` via log-sum-exp.
pub fn gmm_nll(p: &GMMParams, action: &[f64]) -> Result<f64> {
    p.validate()?;
    let a_dim = p.action_dim;
    if action.len() != a_dim {
        return Err(Error::shape("gmm_nll", &[a_dim], &[action.len()]));
    }
    let r = p.components();
    let lmax = p.mixture_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_logits = lmax + p.mixture_logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
    let terms: Vec<f64> = (0..r)
        .map(|c| {
            let mut lp = p.mixture_logits[c] - lse_logits;
            for k in 0..a_dim {
                let i = c * a_dim + k;
                let ls = p.log_std(i);
                let z = (action[k] - p.means[i]) / ls.exp();
                lp += -0.5 * z * z - ls - HALF_LN_2PI;
            }
            lp
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(-(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()))
}

/// Draw from the mixture, or return the mean of the heaviest component.
pub fn sample_action<R: Rng + ?Sized>(p: &GMMParams, rng: &mut R, deterministic: bool) -> Vec<f64> {
    let eta = p.weights();
    let a_dim = p.action_dim;
    let comp = if deterministic {
        // first maximum wins on ties
        eta.iter()
            .enumerate()
            .fold(0, |best, (i, &w)| if w > eta[best] { i } else { best })
    } else {
        WeightedIndex::new(&eta).map(|w| w.sample(rng)).unwrap_or(0)
    };
    (0..a_dim)
        .map(|k| {
            let i = comp * a_dim + k;
            if deterministic {
                p.means[i]
            } else {
                let z: f64 = StandardNormal.sample(rng);
                p.means[i] + p.log_std(i).exp() * z
            }
        })
        .collect()
}

/// Graph handles for a batch of mixtures.
pub struct GmmVars {
    /// `[B, R, A]`
    pub means: Var,
    /// `[B, R, A]`, already clamped.
    pub log_stds: Var,
    /// `[B, R]`
    pub logits: Var,
}

impl GmmVars {
    /// Plain values for batch element `b`.
    pub fn params(&self, g: &Graph, b: usize) -> GMMParams {
        let sh = g.shape(self.means);
        let (r, a) = (sh[1], sh[2]);
        let n = r * a;
        GMMParams {
            means: g.value(self.means).data()[b * n..(b + 1) * n].to_vec(),
            log_stds: g.value(self.log_stds).data()[b * n..(b + 1) * n].to_vec(),
            mixture_logits: g.value(self.logits).data()[b * r..(b + 1) * r].to_vec(),
            action_dim: a,
        }
    }

    /// Per-element NLL `[B]` of `actions [B, A]`.
    pub fn nll(&self, g: &mut Graph, actions: &Tensor) -> Result<Var> {
        let sh = g.shape(self.means).to_vec();
        let (bsz, r, a) = (sh[0], sh[1], sh[2]);
        if actions.shape() != [bsz, a] {
            return Err(Error::shape("gmm nll", actions.shape(), &[bsz, a]));
        }
        let act = g.constant(actions.reshape(&[bsz, 1, a])?);
        let diff = g.sub(act, self.means)?;
        let neg_ls = g.scale(self.log_stds, -1.0);
        let inv_std = g.exp(neg_ls);
        let z = g.mul(diff, inv_std)?;
        let z2 = g.mul(z, z)?;
        let quad = g.scale(z2, -0.5);
        let per_dim = g.sub(quad, self.log_stds)?;
        let per_dim = g.offset(per_dim, -HALF_LN_2PI);
        let log_n = g.sum_axis(per_dim, 2)?;
        let lse = g.log_sum_exp(self.logits, 1)?;
        let lse = g.reshape(lse, &[bsz, 1])?;
        let log_eta = g.sub(self.logits, lse)?;
        let joint = g.add(log_eta, log_n)?;
        debug_assert_eq!(g.shape(joint), &[bsz, r]);
        let ll = g.log_sum_exp(joint, 1)?;
        Ok(g.scale(ll, -1.0))
    }
}

/// MLP from a feature vector to mixture parameters.
#[derive(Clone, Debug)]
pub struct GmmHead {
    pub mlp: Mlp,
    pub components: usize,
    pub action_dim: usize,
}

impl GmmHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, components: usize, action_dim: usize) -> Result<Self> {
        let out = components * (2 * action_dim + 1);
        Ok(GmmHead {
            mlp: b.mlp(name, d, d, out)?,
            components,
            action_dim,
        })
    }

    /// `feat [B, d]` → mixture parameters.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feat: Var) -> Result<GmmVars> {
        let bsz = g.shape(feat)[0];
        let (r, a) = (self.components, self.action_dim);
        let out = self.mlp.forward(g, store, feat)?;
        let means = g.slice(out, 1, 0, r * a)?;
        let means = g.reshape(means, &[bsz, r, a])?;
        let ls = g.slice(out, 1, r * a, 2 * r * a)?;
        let ls = g.reshape(ls, &[bsz, r, a])?;
        let log_stds = g.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        let logits = g.slice(out, 1, 2 * r * a, r * (2 * a + 1))?;
        Ok(GmmVars { means, log_stds, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn standard() -> GMMParams {
        GMMParams {
            means: vec![0.0],
            log_stds: vec![0.0],
            mixture_logits: vec![0.0],
            action_dim: 1,
        }
    }

    #[test]
    fn standard_normal_at_mean() {
        assert!((gmm_nll(&standard(), &[0.0]).unwrap() - 0.918939).abs() < 1e-6);
    }

    #[test]
    fn duplicated_component_is_redundant() {
        let p = GMMParams {
            means: vec![0.3, -1.0, 2.0, 0.5],
            log_stds: vec![-0.2, 0.1, 0.4, -1.0],
            mixture_logits: vec![0.7, -0.4],
            action_dim: 2,
        };
        // duplicate component 0 and halve its weight: logits - ln 2 for both copies
        let dup = GMMParams {
            means: vec![0.3, -1.0, 0.3, -1.0, 2.0, 0.5],
            log_stds: vec![-0.2, 0.1, -0.2, 0.1, 0.4, -1.0],
            mixture_logits: vec![0.7 - 2f64.ln(), 0.7 - 2f64.ln(), -0.4],
            action_dim: 2,
        };
        let a = [0.1, -0.6];
        assert!((gmm_nll(&p, &a).unwrap() - gmm_nll(&dup, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn deterministic_picks_heaviest_mean() {
        let p = GMMParams {
            means: vec![1.5, -3.0],
            log_stds: vec![0.0, 0.0],
            mixture_logits: vec![0.9f64.ln(), 0.1f64.ln()],
            action_dim: 1,
        };
        assert_eq!(sample_action(&p, &mut seed::rng(0, &[]), true), vec![1.5]);
    }

    #[test]
    fn floor_std_samples_hug_mean() {
        let p = GMMParams {
            means: vec![0.4, -0.2],
            log_stds: vec![-50.0, -50.0],
            mixture_logits: vec![0.0],
            action_dim: 2,
        };
        let mut rng = seed::rng(1, &[]);
        for _ in 0..100 {
            let a = sample_action(&p, &mut rng, false);
            assert!((a[0] - 0.4).abs() < 1e-3 && (a[1] + 0.2).abs() < 1e-3);
        }
    }

    #[test]
    fn graph_nll_matches_scalar() {
        let mut rng = seed::rng(2, &[]);
        let (bsz, r, a) = (3, 4, 3);
        let means = Tensor::randn(&[bsz, r, a], 1.0, &mut rng);
        let ls = Tensor::randn(&[bsz, r, a], 0.5, &mut rng);
        let logits = Tensor::randn(&[bsz, r], 1.0, &mut rng);
        let acts = Tensor::randn(&[bsz, a], 1.0, &mut rng);
        let mut g = Graph::inference();
        let gv = GmmVars {
            means: g.constant(means),
            log_stds: g.constant(ls),
            logits: g.constant(logits),
        };
        let nll = gv.nll(&mut g, &acts).unwrap();
        for b in 0..bsz {
            let want = gmm_nll(&gv.params(&g, b), &acts.data()[b * a..(b + 1) * a]).unwrap();
            assert!((g.value(nll).data()[b] - want).abs() <= 1e-12);
        }
    }
}
