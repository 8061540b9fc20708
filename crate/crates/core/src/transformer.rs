//! Pre-norm decoder blocks: self-attention, prefix cross-attention, MLP.

use rand::Rng;

use crate::adapter::{CPAdapter, N_SLOTS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, Mlp};
use crate::param::ParamStore;

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_sa: LayerNorm,
    pub ln_ca: LayerNorm,
    pub ln_mlp: LayerNorm,
    /// q, k, v, o for self-attention then cross-attention (adapter slots 0..8).
    pub proj: [Linear; N_SLOTS],
    pub mlp: Mlp,
    pub adapter: CPAdapter,
}

#[derive(Clone, Debug)]
pub struct TemporalTransformer {
    pub d: usize,
    pub heads: usize,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
}

/// Per-call conditioning shared by every block.
#[derive(Clone, Copy, Default)]
pub struct Conditioning {
    /// `(p_K, p_V)`, each `[B, 1, d]`, prepended to cross-attention keys and values.
    pub prefix: Option<(Var, Var)>,
    /// Adapter factor key; `None` runs the base weights.
    pub adapter_key: Option<usize>,
}

impl TemporalTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d: usize,
        heads: usize,
        n_blocks: usize,
        hidden: usize,
        cp_rank: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        const SLOT: [&str; N_SLOTS] = ["sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.k", "ca.v", "ca.o"];
        for i in 0..n_blocks {
            let p = format!("{name}.block{i}");
            let mut proj = Vec::with_capacity(N_SLOTS);
            for s in SLOT {
                proj.push(b.linear(&format!("{p}.{s}"), d, d, false)?);
            }
            blocks.push(Block {
                ln_sa: b.layer_norm(&format!("{p}.ln_sa"), d)?,
                ln_ca: b.layer_norm(&format!("{p}.ln_ca"), d)?,
                ln_mlp: b.layer_norm(&format!("{p}.ln_mlp"), d)?,
                proj: proj.try_into().expect("eight projections"),
                mlp: b.mlp(&format!("{p}.mlp"), d, hidden, d)?,
                adapter: CPAdapter::new(b, &format!("{p}.adapter"), d, cp_rank, N_SLOTS)?,
            });
        }
        Ok(TemporalTransformer {
            d,
            heads,
            blocks,
            ln_out: b.layer_norm(&format!("{name}.ln_out"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Conditioning) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, cond)?.0)
    }

    /// Forward pass also returning each block's cross-attention
    /// probabilities `[B, h, L, L + prefix]`.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Conditioning) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::shape("transformer input", &shape, &[0, 0, self.d]));
        }
        let mut h = x;
        let mut probes = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let w: Vec<Var> = match cond.adapter_key {
                Some(key) => {
                    let deltas = blk.adapter.slot_deltas(g, store, key)?;
                    let mut w = Vec::with_capacity(N_SLOTS);
                    for (lin, dl) in blk.proj.iter().zip(deltas) {
                        let base = g.param(store, lin.weight);
                        w.push(g.add(base, dl)?);
                    }
                    w
                }
                None => blk.proj.iter().map(|lin| g.param(store, lin.weight)).collect(),
            };

            let n = blk.ln_sa.forward(g, store, h)?;
            let (sa, _) = self.attention(g, n, &w[0..4], None)?;
            h = g.add(h, sa)?;

            let n = blk.ln_ca.forward(g, store, h)?;
            let (ca, probs) = self.attention(g, n, &w[4..8], cond.prefix)?;
            probes.push(probs);
            h = g.add(h, ca)?;

            let n = blk.ln_mlp.forward(g, store, h)?;
            let m = blk.mlp.forward(g, store, n)?;
            h = g.add(h, m)?;
        }
        let out = self.ln_out.forward(g, store, h)?;
        Ok((out, probes))
    }

    /// Multi-head attention with queries, keys and values all projected
    /// from `x`; an optional prefix pair is prepended after projection.
    fn attention(&self, g: &mut Graph, x: Var, w: &[Var], prefix: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let (bsz, len, d) = (shape[0], shape[1], shape[2]);
        let (nh, dh) = (self.heads, d / self.heads);
        let q = g.matmul(x, w[0])?;
        let mut k = g.matmul(x, w[1])?;
        let mut v = g.matmul(x, w[2])?;
        if let Some((pk, pv)) = prefix {
            k = g.concat(&[pk, k], 1)?;
            v = g.concat(&[pv, v], 1)?;
        }
        let kl = g.shape(k)[1];
        let q = g.reshape(q, &[bsz, len, nh, dh])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &[bsz, kl, nh, dh])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.reshape(v, &[bsz, kl, nh, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores, 3)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[bsz, len, d])?;
        Ok((g.matmul(ctx, w[3])?, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Roles;
    use crate::seed;
    use crate::tensor::Tensor;

    fn build(d: usize, heads: usize) -> (ParamStore, TemporalTransformer) {
        let mut store = ParamStore::new();
        let mut roles = Roles::default();
        let mut rng = seed::rng(21, &[]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let mut t = TemporalTransformer::new(&mut b, "t", d, heads, 2, 2 * d, 3).unwrap();
        for blk in &mut t.blocks {
            blk.adapter.add_task(&mut b, 0).unwrap();
        }
        (store, t)
    }

    #[test]
    fn shape_preserved_and_rows_normalized() {
        let (store, t) = build(8, 2);
        let mut g = Graph::inference();
        let mut rng = seed::rng(1, &[]);
        let x = g.constant(Tensor::randn(&[3, 6, 8], 1.0, &mut rng));
        let pk = g.constant(Tensor::randn(&[3, 1, 8], 1.0, &mut rng));
        let pv = g.constant(Tensor::randn(&[3, 1, 8], 1.0, &mut rng));
        let cond = Conditioning {
            prefix: Some((pk, pv)),
            adapter_key: Some(0),
        };
        let (y, probes) = t.forward_traced(&mut g, &store, x, cond).unwrap();
        assert_eq!(g.shape(y), &[3, 6, 8]);
        for p in probes {
            assert_eq!(g.shape(p), &[3, 2, 6, 7]);
            for row in g.value(p).data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_adapter_and_zero_prefix_match_plain() {
        let (store, t) = build(8, 4);
        let mut rng = seed::rng(2, &[]);
        let xt = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);

        let mut g = Graph::inference();
        let x = g.constant(xt.clone());
        let zero = g.constant(Tensor::zeros(&[2, 1, 8]));
        let cond = Conditioning {
            prefix: Some((zero, zero)),
            adapter_key: Some(0),
        };
        let y = t.forward(&mut g, &store, x, cond).unwrap();
        let with = g.value(y).clone();

        // Zero prefix keys add a score-0 slot with zero value, which
        // reweights the remaining slots; compare against the same prefix on
        // the plain path so only the adapter differs.
        let mut g = Graph::inference();
        let x = g.constant(xt);
        let zero = g.constant(Tensor::zeros(&[2, 1, 8]));
        let cond = Conditioning {
            prefix: Some((zero, zero)),
            adapter_key: None,
        };
        let y = t.forward(&mut g, &store, x, cond).unwrap();
        assert!(with.max_abs_diff(g.value(y)) <= 1e-12);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let (store, t) = build(8, 2);
        let mut rng = seed::rng(3, &[]);
        let a = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let run = |first: &Tensor, second: &Tensor| {
            let mut g = Graph::inference();
            let mut data = first.data().to_vec();
            data.extend_from_slice(second.data());
            let x = g.constant(Tensor::new(vec![2, 4, 8], data).unwrap());
            let y = t.forward(&mut g, &store, x, Conditioning::default()).unwrap();
            g.value(y).data().to_vec()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(&ab[..32], &ba[32..]);
        assert_eq!(&ab[32..], &ba[..32]);
    }
}
