//! Low-rank CP adapters over a block's stacked attention weights.
//!
//! `W_k[i, j, s] = Σ_r λ_r U[i, r] V[j, r] Q[s, r]`, added to the base
//! projection for slot `s`. `U`, `V` are shared; `(Q, λ)` are keyed, either
//! per task or one shared pair.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamRole};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Attention projections covered per block: q, k, v, o of self- and
/// cross-attention.
pub const N_SLOTS: usize = 8;

#[derive(Clone, Debug)]
pub struct CPAdapter {
    pub name: String,
    pub d: usize,
    pub rank: usize,
    pub n_w: usize,
    pub u: ParamId,
    pub v: ParamId,
    /// key → (Q [n_w, rank], λ [rank])
    pub factors: BTreeMap<usize, (ParamId, ParamId)>,
}

impl CPAdapter {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, rank: usize, n_w: usize) -> Result<Self> {
        let u = b.randn(&format!("{name}.U"), &[d, rank], (d as f64).powf(-0.5), ParamRole::Exempt)?;
        let v = b.add(&format!("{name}.V"), Tensor::zeros(&[d, rank]), ParamRole::Exempt)?;
        Ok(CPAdapter {
            name: name.to_string(),
            d,
            rank,
            n_w,
            u,
            v,
            factors: BTreeMap::new(),
        })
    }

    /// Register `(Q, λ)` for `key` and freeze every earlier key's factors.
    pub fn add_task<R: Rng>(&mut self, b: &mut Builder<'_, R>, key: usize) -> Result<()> {
        if self.factors.contains_key(&key) {
            return Err(Error::contract(format!("{}: key {key} already registered", self.name)));
        }
        for &(q, l) in self.factors.values() {
            b.store.set_frozen(q, true);
            b.store.set_frozen(l, true);
        }
        let q = b.randn(&format!("{}.Q.{key}", self.name), &[self.n_w, self.rank], 1.0, ParamRole::Exempt)?;
        let l = b.randn(&format!("{}.lambda.{key}", self.name), &[self.rank], 1.0, ParamRole::Exempt)?;
        self.factors.insert(key, (q, l));
        Ok(())
    }

    pub fn factors_for(&self, key: usize) -> Result<(ParamId, ParamId)> {
        self.factors
            .get(&key)
            .copied()
            .ok_or_else(|| Error::contract(format!("{}: key {key} not registered", self.name)))
    }

    /// Dense `d × d × n_w` delta.
    pub fn delta(&self, store: &ParamStore, key: usize) -> Result<Tensor> {
        let (q, l) = self.factors_for(key)?;
        let (u, v, q, l) = (store.value(self.u), store.value(self.v), store.value(q), store.value(l));
        let (d, r, n) = (self.d, self.rank, self.n_w);
        let mut out = vec![0.0; d * d * n];
        for s in 0..n {
            for k in 0..r {
                let c = l.data()[k] * q.data()[s * r + k];
                if c == 0.0 {
                    continue;
                }
                for i in 0..d {
                    let ui = c * u.data()[i * r + k];
                    for j in 0..d {
                        out[(i * d + j) * n + s] += ui * v.data()[j * r + k];
                    }
                }
            }
        }
        Tensor::new(vec![d, d, n], out)
    }

    /// Per-slot deltas on the graph, each oriented `[d_in, d_out]` so that
    /// `x @ (W + Δ_s)` applies `W_k[:, :, s]` to column vectors.
    pub fn slot_deltas(&self, g: &mut Graph, store: &ParamStore, key: usize) -> Result<Vec<Var>> {
        let (q, l) = self.factors_for(key)?;
        let u = g.param(store, self.u);
        let v = g.param(store, self.v);
        let q = g.param(store, q);
        let l = g.param(store, l);
        let ut = g.transpose(u)?;
        let mut out = Vec::with_capacity(self.n_w);
        for s in 0..self.n_w {
            let qs = g.slice(q, 0, s, s + 1)?;
            let c = g.mul(qs, l)?;
            let vc = g.mul(v, c)?;
            out.push(g.matmul(vc, ut)?);
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.rank * (2 * self.d + self.factors.len() * (self.n_w + 1))
    }
}

/// `H = W x + W_k[:, :, slot] x` for a base matrix `W` stored `[d_out, d_in]`.
pub fn adapted_matvec(x: &Tensor, base_w: &Tensor, delta: &Tensor, slot: usize) -> Result<Tensor> {
    let (d_out, d_in) = match base_w.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::shape("adapted_matvec", s, x.shape())),
    };
    let n = delta.shape().get(2).copied().unwrap_or(0);
    if x.numel() != d_in || delta.shape() != [d_out, d_in, n] || slot >= n {
        return Err(Error::shape("adapted_matvec", delta.shape(), x.shape()));
    }
    let out = (0..d_out)
        .map(|i| {
            (0..d_in)
                .map(|j| (base_w.data()[i * d_in + j] + delta.data()[(i * d_in + j) * n + slot]) * x.data()[j])
                .sum()
        })
        .collect();
    Tensor::new(vec![d_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Roles;
    use crate::seed;

    fn adapter(d: usize, r: usize, n: usize) -> (ParamStore, CPAdapter) {
        let mut store = ParamStore::new();
        let mut roles = Roles::default();
        let mut rng = seed::rng(5, &[]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let mut a = CPAdapter::new(&mut b, "ad", d, r, n).unwrap();
        a.add_task(&mut b, 0).unwrap();
        (store, a)
    }

    #[test]
    fn zero_v_gives_zero_delta() {
        let (store, a) = adapter(5, 3, 8);
        assert!(a.delta(&store, 0).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unit_factors_hit_single_entry() {
        let (mut store, a) = adapter(3, 1, 2);
        let (q, l) = a.factors_for(0).unwrap();
        store.get_mut(a.u).value = Tensor::from_vec(vec![1.0, 0.0, 0.0]).reshape(&[3, 1]).unwrap();
        store.get_mut(a.v).value = Tensor::from_vec(vec![0.0, 1.0, 0.0]).reshape(&[3, 1]).unwrap();
        store.get_mut(q).value = Tensor::from_vec(vec![1.0, 0.0]).reshape(&[2, 1]).unwrap();
        store.get_mut(l).value = Tensor::from_vec(vec![2.0]);
        let dl = a.delta(&store, 0).unwrap();
        for (idx, &v) in dl.data().iter().enumerate() {
            // entry [0, 1, 0] in row-major d×d×n
            let expect = if idx == 2 { 2.0 } else { 0.0 };
            assert_eq!(v, expect, "index {idx}");
        }
        assert_eq!(dl.at(&[0, 1, 0]), 2.0);
    }

    #[test]
    fn matches_triple_loop_and_graph_slots() {
        let (mut store, a) = adapter(6, 4, 8);
        let mut rng = seed::rng(9, &[]);
        store.get_mut(a.v).value = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let (q, l) = a.factors_for(0).unwrap();
        let (u, v, qv, lv) = (store.value(a.u), store.value(a.v), store.value(q), store.value(l));
        let dl = a.delta(&store, 0).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for s in 0..8 {
                    let mut want = 0.0;
                    for r in 0..4 {
                        want += lv.data()[r] * u.at(&[i, r]) * v.at(&[j, r]) * qv.at(&[s, r]);
                    }
                    assert!((dl.at(&[i, j, s]) - want).abs() <= 1e-12);
                }
            }
        }
        let mut g = Graph::inference();
        let slots = a.slot_deltas(&mut g, &store, 0).unwrap();
        for (s, var) in slots.iter().enumerate() {
            let t = g.value(*var);
            for i in 0..6 {
                for j in 0..6 {
                    assert!((t.at(&[j, i]) - dl.at(&[i, j, s])).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn matvec_additivity() {
        let (mut store, a) = adapter(4, 2, 8);
        let mut rng = seed::rng(10, &[]);
        store.get_mut(a.v).value = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let zero_delta = Tensor::zeros(&[4, 4, 8]);
        let base = adapted_matvec(&x, &w, &zero_delta, 3).unwrap();
        let plain = crate::tensor::matmul(&w, &x.reshape(&[4, 1]).unwrap()).unwrap();
        assert!(base.max_abs_diff(&plain.reshape(&[4]).unwrap()) <= 1e-12);
        let dl = a.delta(&store, 0).unwrap();
        let only_delta = adapted_matvec(&x, &Tensor::zeros(&[4, 4]), &dl, 5).unwrap();
        let both = adapted_matvec(&x, &w, &dl, 5).unwrap();
        for i in 0..4 {
            assert!((both.data()[i] - base.data()[i] - only_delta.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn add_task_freezes_previous_and_rejects_duplicates() {
        let mut store = ParamStore::new();
        let mut roles = Roles::default();
        let mut rng = seed::rng(5, &[]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let mut a = CPAdapter::new(&mut b, "ad", 4, 2, 8).unwrap();
        a.add_task(&mut b, 0).unwrap();
        a.add_task(&mut b, 1).unwrap();
        assert!(a.add_task(&mut b, 1).is_err());
        let (q0, l0) = a.factors_for(0).unwrap();
        let (q1, _) = a.factors_for(1).unwrap();
        assert!(store.get(q0).frozen && store.get(l0).frozen && !store.get(q1).frozen);
        assert_eq!(a.factors.len(), 2);
        assert_eq!(a.num_params(), 2 * (2 * 4 + 2 * 9));
        assert!(a.factors_for(7).is_err());
    }

    #[test]
    fn lambda_init_is_seeded() {
        let (s1, a1) = adapter(4, 3, 8);
        let (s2, a2) = adapter(4, 3, 8);
        let l1 = a1.factors_for(0).unwrap().1;
        let l2 = a2.factors_for(0).unwrap().1;
        assert_eq!(s1.value(l1), s2.value(l2));
    }
}
