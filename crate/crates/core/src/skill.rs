//! Expandable skill codebook with key matching and weighted synthesis.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamRole};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Rows allocated to one task: skills `P [M, 2, d]`, keys and attention
/// vectors `[M, d]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkillSubset {
    pub task_id: usize,
    pub p: ParamId,
    pub k: ParamId,
    pub a: ParamId,
}

#[derive(Clone, Debug)]
pub struct SkillCodebook {
    pub d: usize,
    pub per_task: usize,
    pub subsets: Vec<SkillSubset>,
}

/// Outcome of top-C matching for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillSelection {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub full_similarities: Vec<f64>,
}

/// Graph handles for a batch of selections.
pub struct Selected {
    /// `[B, C]` mixing weights.
    pub weights: Var,
    pub selections: Vec<SkillSelection>,
}

/// Indices of the `c` largest entries, best first; ties go to the lower index.
pub fn top_c(scores: &[f64], c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(c);
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of `rows` by modified Gram–Schmidt, dropping
/// dependent rows.
fn basis_of(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-10 * dot(r, r).sqrt().max(1e-300) {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `count` Gaussian rows made orthogonal to `existing` (and to each other),
/// each renormalized to unit length.
pub fn orthonormal_rows<R: Rng + ?Sized>(existing: &[Vec<f64>], count: usize, d: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut basis = basis_of(existing);
    if basis.len() + count > d {
        return Err(Error::contract(format!(
            "cannot add {count} orthogonal rows to a span of {} in {d} dimensions",
            basis.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
        basis.push(v.clone());
        out.push(v);
    }
    Ok(out)
}

fn rows_of(t: &Tensor, width: usize) -> Vec<Vec<f64>> {
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

impl SkillCodebook {
    pub fn new(d: usize, per_task: usize) -> Self {
        SkillCodebook {
            d,
            per_task,
            subsets: Vec::new(),
        }
    }

    /// Total rows m.
    pub fn rows(&self) -> usize {
        self.subsets.len() * self.per_task
    }

    /// `(task_id, start, end)` for every subset.
    pub fn subset_bounds(&self) -> Vec<(usize, usize, usize)> {
        self.subsets
            .iter()
            .enumerate()
            .map(|(i, s)| (s.task_id, i * self.per_task, (i + 1) * self.per_task))
            .collect()
    }

    /// Task whose subset holds `row`.
    pub fn source_task(&self, row: usize) -> usize {
        self.subsets[row / self.per_task].task_id
    }

    /// Rows below this index belong to frozen subsets.
    pub fn frozen_upto(&self, store: &ParamStore) -> usize {
        self.subsets.iter().take_while(|s| store.get(s.p).frozen).count() * self.per_task
    }

    /// Stacked values: keys `[m, d]`, attention vectors `[m, d]`, skills `[m, 2, d]`.
    pub fn keys(&self, store: &ParamStore) -> Tensor {
        self.stack(store, |s| s.k, &[self.d])
    }

    pub fn attention(&self, store: &ParamStore) -> Tensor {
        self.stack(store, |s| s.a, &[self.d])
    }

    pub fn skills(&self, store: &ParamStore) -> Tensor {
        self.stack(store, |s| s.p, &[2, self.d])
    }

    fn stack(&self, store: &ParamStore, f: impl Fn(&SkillSubset) -> ParamId, tail: &[usize]) -> Tensor {
        let mut data = Vec::new();
        for s in &self.subsets {
            data.extend_from_slice(store.value(f(s)).data());
        }
        let mut shape = vec![self.rows()];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data).expect("consistent subset shapes")
    }

    /// Allocate `M` new rows for `task_id`, orthogonalized against every
    /// existing row, and freeze all earlier subsets.
    pub fn expand_for_task<R: Rng>(&mut self, b: &mut Builder<'_, R>, task_id: usize) -> Result<()> {
        if self.subsets.iter().any(|s| s.task_id == task_id) {
            return Err(Error::contract(format!("skill subset for task {task_id} already exists")));
        }
        let (d, m) = (self.d, self.per_task);
        let old_k = rows_of(&self.keys(b.store), d);
        let old_a = rows_of(&self.attention(b.store), d);
        let old_p = self.skills(b.store);
        let old_p0: Vec<Vec<f64>> = old_p.data().chunks(2 * d).map(|r| r[..d].to_vec()).collect();
        let old_p1: Vec<Vec<f64>> = old_p.data().chunks(2 * d).map(|r| r[d..].to_vec()).collect();

        let k = orthonormal_rows(&old_k, m, d, b.rng)?;
        let a = orthonormal_rows(&old_a, m, d, b.rng)?;
        let p0 = orthonormal_rows(&old_p0, m, d, b.rng)?;
        let p1 = orthonormal_rows(&old_p1, m, d, b.rng)?;
        let p: Vec<f64> = p0.iter().zip(&p1).flat_map(|(x, y)| x.iter().chain(y).copied()).collect();

        for s in &self.subsets {
            for id in [s.p, s.k, s.a] {
                b.store.set_frozen(id, true);
            }
        }
        let flat = |rows: Vec<Vec<f64>>| rows.into_iter().flatten().collect::<Vec<f64>>();
        let subset = SkillSubset {
            task_id,
            p: b.add(&format!("skill.P.{task_id}"), Tensor::new(vec![m, 2, d], p)?, ParamRole::Exempt)?,
            k: b.add(&format!("skill.K.{task_id}"), Tensor::new(vec![m, d], flat(k))?, ParamRole::Exempt)?,
            a: b.add(&format!("skill.A.{task_id}"), Tensor::new(vec![m, d], flat(a))?, ParamRole::Exempt)?,
        };
        self.subsets.push(subset);
        Ok(())
    }

    fn concat_param(&self, g: &mut Graph, store: &ParamStore, f: impl Fn(&SkillSubset) -> ParamId) -> Result<Var> {
        let parts: Vec<Var> = self.subsets.iter().map(|s| g.param(store, f(s))).collect();
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 0)
        }
    }

    /// Score every row against the window embedding `s_e [B, L, d]` and keep
    /// the top `c` per batch element.
    ///
    /// `α_i = cos(mean_L(s_e) ⊙ A_i, K_i)`; weights are the softmax of the
    /// kept scores.
    pub fn select(&self, g: &mut Graph, store: &ParamStore, s_e: Var, c: usize) -> Result<Selected> {
        if self.subsets.is_empty() {
            return Err(Error::contract("skill selection on an empty codebook"));
        }
        let m = self.rows();
        if c == 0 || c > m {
            return Err(Error::contract(format!("top-C of {c} from {m} rows")));
        }
        let shape = g.shape(s_e).to_vec();
        let (bsz, d) = (shape[0], self.d);
        let keys = self.concat_param(g, store, |s| s.k)?;
        let attn = self.concat_param(g, store, |s| s.a)?;
        let pooled = g.mean_axis(s_e, 1)?;
        let pooled = g.reshape(pooled, &[bsz, 1, d])?;
        let query = g.mul(pooled, attn)?;
        let keys_b = g.broadcast_to(keys, &[bsz, m, d])?;
        let alpha = g.cosine(query, keys_b)?;

        let alpha_vals = g.value(alpha).data().to_vec();
        let mut flat_idx = Vec::with_capacity(bsz * c);
        let mut selections = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let row = &alpha_vals[b * m..(b + 1) * m];
            let idx = top_c(row, c);
            flat_idx.extend(idx.iter().map(|&i| b * m + i));
            selections.push(SkillSelection {
                indices: idx,
                weights: Vec::new(),
                full_similarities: row.to_vec(),
            });
        }
        let alpha_col = g.reshape(alpha, &[bsz * m, 1])?;
        let picked = g.gather(alpha_col, &flat_idx)?;
        let picked = g.reshape(picked, &[bsz, c])?;
        let weights = g.softmax(picked, 1)?;
        let wv = g.value(weights).data();
        for (b, sel) in selections.iter_mut().enumerate() {
            sel.weights = wv[b * c..(b + 1) * c].to_vec();
        }
        Ok(Selected { weights, selections })
    }

    /// `p̃ = Σ_c α_c P[idx_c]`, split into prefix key and value `[B, 1, d]`.
    pub fn synthesize(&self, g: &mut Graph, store: &ParamStore, sel: &Selected) -> Result<(Var, Var)> {
        let d = self.d;
        let bsz = sel.selections.len();
        let c = sel.selections[0].indices.len();
        let p = self.concat_param(g, store, |s| s.p)?;
        let p = g.reshape(p, &[self.rows(), 2 * d])?;
        let rows: Vec<usize> = sel.selections.iter().flat_map(|s| s.indices.iter().copied()).collect();
        let chosen = g.gather(p, &rows)?;
        let chosen = g.reshape(chosen, &[bsz, c, 2 * d])?;
        let w = g.reshape(sel.weights, &[bsz, c, 1])?;
        let mixed = g.mul(chosen, w)?;
        let mixed = g.sum_axis(mixed, 1)?;
        let pk = g.slice(mixed, 1, 0, d)?;
        let pv = g.slice(mixed, 1, d, 2 * d)?;
        Ok((g.reshape(pk, &[bsz, 1, d])?, g.reshape(pv, &[bsz, 1, d])?))
    }
}

/// Value-only selection for a batch of embeddings `[B, L, d]`.
pub fn select_skills(s_e: &Tensor, codebook: &SkillCodebook, store: &ParamStore, c: usize) -> Result<Vec<SkillSelection>> {
    let mut g = Graph::inference();
    let x = g.constant(s_e.clone());
    Ok(codebook.select(&mut g, store, x, c)?.selections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Roles;
    use crate::seed;
    use crate::tensor::cosine_similarity;

    fn grown(d: usize, m: usize, tasks: usize) -> (ParamStore, SkillCodebook) {
        let mut store = ParamStore::new();
        let mut roles = Roles::default();
        let mut rng = seed::rng(3, &[]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let mut cb = SkillCodebook::new(d, m);
        for t in 0..tasks {
            cb.expand_for_task(&mut b, t).unwrap();
        }
        (store, cb)
    }

    #[test]
    fn growth_and_freezing_counts() {
        let (store, cb) = grown(32, 10, 1);
        assert_eq!((cb.rows(), cb.frozen_upto(&store)), (10, 0));
        let (store, cb) = grown(32, 10, 3);
        assert_eq!((cb.rows(), cb.frozen_upto(&store)), (30, 20));
        assert_eq!(cb.subset_bounds(), vec![(0, 0, 10), (1, 10, 20), (2, 20, 30)]);
        assert_eq!(cb.source_task(25), 2);
    }

    #[test]
    fn new_rows_orthogonal_to_perturbed_old_rows() {
        let (mut store, mut cb) = grown(24, 6, 1);
        // training moves old rows off the orthonormal frame
        let mut rng = seed::rng(4, &[]);
        for id in [cb.subsets[0].k, cb.subsets[0].a, cb.subsets[0].p] {
            let noise = Tensor::randn(store.value(id).shape(), 0.3, &mut rng);
            let v = store.get_mut(id).value.data_mut();
            v.iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
        }
        let mut roles = Roles::default();
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        cb.expand_for_task(&mut b, 1).unwrap();
        let check = |t: Tensor, w: usize, off: usize| {
            let rows = rows_of(&t, w);
            let mut worst = 0.0f64;
            for new in &rows[6..] {
                for old in &rows[..6] {
                    worst = worst.max(dot(&new[off..off + 24], &old[off..off + 24]).abs());
                }
                assert!((dot(&new[off..off + 24], &new[off..off + 24]) - 1.0).abs() < 1e-12);
            }
            worst
        };
        assert!(check(cb.keys(&store), 24, 0) <= 1e-8);
        assert!(check(cb.attention(&store), 24, 0) <= 1e-8);
        assert!(check(cb.skills(&store), 48, 0) <= 1e-8);
        assert!(check(cb.skills(&store), 48, 24) <= 1e-8);
    }

    #[test]
    fn duplicate_task_and_overflow_rejected() {
        let (mut store, mut cb) = grown(8, 4, 2);
        let mut roles = Roles::default();
        let mut rng = seed::rng(1, &[]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        assert!(cb.expand_for_task(&mut b, 1).is_err());
        assert!(cb.expand_for_task(&mut b, 2).is_err());
    }

    #[test]
    fn equal_scores_split_evenly_and_single_pick_is_argmax() {
        let (mut store, cb) = grown(4, 2, 1);
        let k = cb.subsets[0].k;
        let a = cb.subsets[0].a;
        store.get_mut(k).value = Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        store.get_mut(a).value = Tensor::ones(&[2, 4]);
        let s = Tensor::new(vec![1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let sel = &select_skills(&s, &cb, &store, 2).unwrap()[0];
        assert_eq!(sel.indices, vec![0, 1]);
        assert_eq!(sel.weights, vec![0.5, 0.5]);
        let sel = &select_skills(&s, &cb, &store, 1).unwrap()[0];
        assert_eq!(sel.weights, vec![1.0]);
    }

    #[test]
    fn selection_matches_exhaustive_scoring() {
        let (store, cb) = grown(32, 10, 3);
        let mut rng = seed::rng(8, &[]);
        let (keys, attn) = (cb.keys(&store), cb.attention(&store));
        for _ in 0..20 {
            let s = Tensor::randn(&[2, 5, 32], 1.0, &mut rng);
            let sels = select_skills(&s, &cb, &store, 10).unwrap();
            for (b, sel) in sels.iter().enumerate() {
                let mut pooled = vec![0.0; 32];
                for l in 0..5 {
                    for j in 0..32 {
                        pooled[j] += s.at(&[b, l, j]) / 5.0;
                    }
                }
                let scores: Vec<f64> = (0..30)
                    .map(|i| {
                        let q: Vec<f64> = (0..32).map(|j| pooled[j] * attn.at(&[i, j])).collect();
                        let k: Vec<f64> = (0..32).map(|j| keys.at(&[i, j])).collect();
                        cosine_similarity(&Tensor::from_vec(q), &Tensor::from_vec(k)).unwrap()
                    })
                    .collect();
                let mut order: Vec<usize> = (0..30).collect();
                order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
                assert_eq!(sel.indices, order[..10].to_vec());
                assert!((sel.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn synthesis_is_weighted_sum_with_sparse_grad() {
        let (store, cb) = grown(6, 3, 1);
        let mut g = Graph::new();
        let s = g.constant(Tensor::randn(&[1, 4, 6], 1.0, &mut seed::rng(2, &[])));
        let sel = cb.select(&mut g, &store, s, 2).unwrap();
        let (pk, pv) = cb.synthesize(&mut g, &store, &sel).unwrap();
        let skills = cb.skills(&store);
        let sl = &sel.selections[0];
        for j in 0..6 {
            let want_k: f64 = (0..2).map(|c| sl.weights[c] * skills.at(&[sl.indices[c], 0, j])).sum();
            let want_v: f64 = (0..2).map(|c| sl.weights[c] * skills.at(&[sl.indices[c], 1, j])).sum();
            assert!((g.value(pk).data()[j] - want_k).abs() <= 1e-12);
            assert!((g.value(pv).data()[j] - want_v).abs() <= 1e-12);
        }
        let sum = g.add(pk, pv).unwrap();
        let loss = g.sum_all(sum);
        let mut store = store;
        store.zero_grad();
        g.backward_into(loss, &mut store).unwrap();
        let grad = store.get(cb.subsets[0].p).grad.clone();
        let unselected = (0..3).find(|i| !sl.indices.contains(i)).unwrap();
        for j in 0..12 {
            assert_eq!(grad.data()[unselected * 12 + j], 0.0);
        }
    }

    #[test]
    fn single_skill_weight_one_is_that_row() {
        let (store, cb) = grown(5, 3, 1);
        let mut g = Graph::inference();
        let s = g.constant(Tensor::randn(&[1, 2, 5], 1.0, &mut seed::rng(6, &[])));
        let sel = cb.select(&mut g, &store, s, 1).unwrap();
        let (pk, _) = cb.synthesize(&mut g, &store, &sel).unwrap();
        let row = sel.selections[0].indices[0];
        let skills = cb.skills(&store);
        assert_eq!(g.value(pk).data(), &skills.data()[row * 10..row * 10 + 5]);
    }

    #[test]
    fn empty_codebook_is_contract_error() {
        let cb = SkillCodebook::new(4, 2);
        assert!(select_skills(&Tensor::zeros(&[1, 2, 4]), &cb, &ParamStore::new(), 1).is_err());
    }
}
