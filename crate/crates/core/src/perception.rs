//! Per-step encoders and FiLM fusion, producing the window token sequence.
//!
//! Each step contributes five tokens in order: workspace view, wrist view,
//! proprioception, language, and a learned per-slot context token. A learned
//! positional vector for the step slot is added to all five.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::env::{Observation, PROPRIO_DIM, VIEW_DIM};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, Mlp, ParamRole};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MODALITIES: usize = 5;

/// Stacked raw inputs for a batch of windows.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `[B, W, VIEW_DIM]`
    pub workspace: Tensor,
    /// `[B, W, VIEW_DIM]`
    pub wrist: Tensor,
    /// `[B, W, PROPRIO_DIM]`
    pub proprio: Tensor,
    pub language: Vec<usize>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[Vec<&Observation>]) -> Result<Self> {
        let bsz = windows.len();
        let w = windows.first().map_or(0, Vec::len);
        let mut ws = Vec::with_capacity(bsz * w * VIEW_DIM);
        let mut wr = Vec::with_capacity(bsz * w * VIEW_DIM);
        let mut pr = Vec::with_capacity(bsz * w * PROPRIO_DIM);
        let mut language = Vec::with_capacity(bsz);
        for win in windows {
            if win.len() != w {
                return Err(Error::contract("windows in a batch differ in length"));
            }
            for o in win {
                ws.extend_from_slice(&o.workspace_view);
                wr.extend_from_slice(&o.wrist_view);
                pr.extend_from_slice(&o.proprio);
            }
            language.push(win[w - 1].language_id);
        }
        Ok(WindowBatch {
            workspace: Tensor::new(vec![bsz, w, VIEW_DIM], ws)?,
            wrist: Tensor::new(vec![bsz, w, VIEW_DIM], wr)?,
            proprio: Tensor::new(vec![bsz, w, PROPRIO_DIM], pr)?,
            language,
        })
    }

    pub fn len(&self) -> usize {
        self.language.len()
    }

    pub fn is_empty(&self) -> bool {
        self.language.is_empty()
    }

    pub fn window(&self) -> usize {
        self.workspace.shape()[1]
    }
}

/// Window around step `t` of a trajectory: `center` past slots back to
/// `t - center` (repeating the first observation before the start), and the
/// current observation repeated in every slot after `t`.
pub fn window_at<'a>(obs: &[&'a Observation], t: usize, window: usize, center: usize) -> Vec<&'a Observation> {
    (0..window)
        .map(|s| {
            let idx = (t + s).saturating_sub(center).min(t);
            obs[idx]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EncoderBank {
    pub d: usize,
    pub window: usize,
    pub language: BTreeMap<usize, ParamId>,
    pub workspace: Mlp,
    pub wrist: Mlp,
    pub proprio: Mlp,
    pub film_workspace: Linear,
    pub film_wrist: Linear,
    /// `[W, d]` learned fifth token per step slot.
    pub context: ParamId,
    /// `[W, d]` positional vector per step slot.
    pub position: ParamId,
}

impl EncoderBank {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d: usize, window: usize) -> Result<Self> {
        Ok(EncoderBank {
            d,
            window,
            language: BTreeMap::new(),
            workspace: b.mlp("enc.workspace", VIEW_DIM, d, d)?,
            wrist: b.mlp("enc.wrist", VIEW_DIM, d, d)?,
            proprio: b.mlp("enc.proprio", PROPRIO_DIM, d, d)?,
            film_workspace: b.zero_linear("enc.film_workspace", d, 2 * d)?,
            film_wrist: b.zero_linear("enc.film_wrist", d, 2 * d)?,
            context: b.randn("enc.context", &[window, d], 0.02, ParamRole::Vector)?,
            position: b.randn("enc.position", &[window, d], 0.02, ParamRole::Vector)?,
        })
    }

    /// Add a language row for a descriptor id.
    pub fn add_language<R: Rng>(&mut self, b: &mut Builder<'_, R>, id: usize) -> Result<()> {
        if self.language.contains_key(&id) {
            return Err(Error::contract(format!("language row {id} already exists")));
        }
        let row = b.randn(&format!("enc.language.{id}"), &[self.d], 1.0, ParamRole::Exempt)?;
        self.language.insert(id, row);
        Ok(())
    }

    pub fn encode_language(&self, g: &mut Graph, store: &ParamStore, id: usize) -> Result<Var> {
        let row = self
            .language
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no language row for descriptor {id}")))?;
        Ok(g.param(store, *row))
    }

    /// `(1 + γ(lang)) ⊙ f + β(lang)` with `f [B, W, d]`, `lang [B, d]`.
    pub fn film(&self, g: &mut Graph, store: &ParamStore, gen: &Linear, features: Var, lang: Var) -> Result<Var> {
        let bsz = g.shape(lang)[0];
        let d = self.d;
        let gb = gen.forward(g, store, lang)?;
        let gamma = g.slice(gb, 1, 0, d)?;
        let gamma = g.reshape(gamma, &[bsz, 1, d])?;
        let beta = g.slice(gb, 1, d, 2 * d)?;
        let beta = g.reshape(beta, &[bsz, 1, d])?;
        let scale = g.offset(gamma, 1.0);
        let scaled = g.mul(features, scale)?;
        g.add(scaled, beta)
    }

    /// Token sequence `[B, W·5, d]`.
    pub fn encode_window(&self, g: &mut Graph, store: &ParamStore, batch: &WindowBatch) -> Result<Var> {
        if batch.window() != self.window {
            return Err(Error::contract(format!(
                "window of {} observations, expected {}",
                batch.window(),
                self.window
            )));
        }
        let (bsz, w, d) = (batch.len(), self.window, self.d);
        let rows: Vec<Var> = batch
            .language
            .iter()
            .map(|&id| {
                let v = self.encode_language(g, store, id)?;
                g.reshape(v, &[1, d])
            })
            .collect::<Result<_>>()?;
        let lang = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };

        let ws_in = g.constant(batch.workspace.clone());
        let ws = self.workspace.forward(g, store, ws_in)?;
        let ws = self.film(g, store, &self.film_workspace, ws, lang)?;
        let wr_in = g.constant(batch.wrist.clone());
        let wr = self.wrist.forward(g, store, wr_in)?;
        let wr = self.film(g, store, &self.film_wrist, wr, lang)?;
        let pr_in = g.constant(batch.proprio.clone());
        let pr = self.proprio.forward(g, store, pr_in)?;
        let lang_tok = g.reshape(lang, &[bsz, 1, d])?;
        let lang_tok = g.broadcast_to(lang_tok, &[bsz, w, d])?;
        let ctx = g.param(store, self.context);
        let ctx = g.reshape(ctx, &[1, w, d])?;
        let ctx = g.broadcast_to(ctx, &[bsz, w, d])?;

        let mut parts = Vec::with_capacity(MODALITIES);
        for t in [ws, wr, pr, lang_tok, ctx] {
            parts.push(g.reshape(t, &[bsz, w, 1, d])?);
        }
        let tokens = g.concat(&parts, 2)?;
        let pos = g.param(store, self.position);
        let pos = g.reshape(pos, &[1, w, 1, d])?;
        let tokens = g.add(tokens, pos)?;
        g.reshape(tokens, &[bsz, w * MODALITIES, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_suite, SuiteKind};
    use crate::nn::Roles;
    use crate::seed;

    fn bank(d: usize) -> (ParamStore, EncoderBank) {
        let mut store = ParamStore::new();
        let mut roles = Roles::default();
        let mut rng = seed::rng(4, &[]);
        let mut b = Builder {
            store: &mut store,
            roles: &mut roles,
            rng: &mut rng,
        };
        let mut e = EncoderBank::new(&mut b, d, 10).unwrap();
        e.add_language(&mut b, 0).unwrap();
        e.add_language(&mut b, 1).unwrap();
        (store, e)
    }

    fn obs(lang: usize, seed: u64) -> Observation {
        let t = &make_suite(SuiteKind::Goal, 2, 0).unwrap()[lang];
        t.observe(&t.sample_initial(&mut seed::rng(seed, &[])))
    }

    fn encode(store: &ParamStore, e: &EncoderBank, windows: &[Vec<&Observation>]) -> Tensor {
        let mut g = Graph::inference();
        let batch = WindowBatch::from_windows(windows).unwrap();
        let v = e.encode_window(&mut g, store, &batch).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn shape_is_window_times_modalities() {
        let (store, e) = bank(64);
        let o = obs(0, 1);
        let t = encode(&store, &e, &[vec![&o; 10], vec![&o; 10]]);
        assert_eq!(t.shape(), &[2, 50, 64]);
    }

    #[test]
    fn repeated_observation_differs_only_by_slot_vectors() {
        let (store, e) = bank(8);
        let o = obs(0, 2);
        let t = encode(&store, &e, &[vec![&o; 10]]);
        let pos = store.value(e.position);
        let ctx = store.value(e.context);
        for slot in 1..10 {
            for m in 0..5 {
                for j in 0..8 {
                    let a = t.at(&[0, slot * 5 + m, j]) - pos.at(&[slot, j]);
                    let b = t.at(&[0, m, j]) - pos.at(&[0, j]);
                    let (a, b) = if m == 4 {
                        (a - ctx.at(&[slot, j]), b - ctx.at(&[0, j]))
                    } else {
                        (a, b)
                    };
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn short_prefix_pads_with_first_observation() {
        let (store, e) = bank(8);
        let o = obs(0, 3);
        let history = vec![&o];
        let win = window_at(&history, 0, 10, 4);
        let padded = encode(&store, &e, &[win]);
        let explicit = encode(&store, &e, &[vec![&o; 10]]);
        assert_eq!(padded, explicit);
    }

    #[test]
    fn window_indices() {
        let o: Vec<Observation> = (0..8).map(|i| obs(0, i)).collect();
        let refs: Vec<&Observation> = o.iter().collect();
        let w = window_at(&refs, 6, 10, 4);
        let idx: Vec<usize> = w.iter().map(|x| refs.iter().position(|r| std::ptr::eq(*r, *x)).unwrap()).collect();
        assert_eq!(idx, vec![2, 3, 4, 5, 6, 6, 6, 6, 6, 6]);
    }

    #[test]
    fn language_change_leaves_proprio_tokens_alone() {
        let (mut store, e) = bank(8);
        // make FiLM non-trivial so view tokens do depend on language
        let mut rng = seed::rng(5, &[]);
        let w = e.film_workspace.weight;
        store.get_mut(w).value = Tensor::randn(&[8, 16], 0.5, &mut rng);
        let a = obs(0, 4);
        let mut b = a.clone();
        b.language_id = 1;
        let ta = encode(&store, &e, &[vec![&a; 10]]);
        let tb = encode(&store, &e, &[vec![&b; 10]]);
        for slot in 0..10 {
            for j in 0..8 {
                assert_eq!(ta.at(&[0, slot * 5 + 2, j]), tb.at(&[0, slot * 5 + 2, j]));
                assert_eq!(ta.at(&[0, slot * 5 + 1, j]), tb.at(&[0, slot * 5 + 1, j]));
            }
            assert_ne!(ta.at(&[0, slot * 5, 0]), tb.at(&[0, slot * 5, 0]));
            assert_ne!(ta.at(&[0, slot * 5 + 3, 0]), tb.at(&[0, slot * 5 + 3, 0]));
        }
    }

    #[test]
    fn film_identity_then_shift() {
        let (mut store, e) = bank(4);
        let mut g = Graph::inference();
        let f = g.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut seed::rng(6, &[])));
        let lang = e.encode_language(&mut g, &store, 0).unwrap();
        let lang = g.reshape(lang, &[1, 4]).unwrap();
        let out = e.film(&mut g, &store, &e.film_wrist, f, lang).unwrap();
        assert_eq!(g.value(out), g.value(f));
        let bias = e.film_wrist.bias.unwrap();
        store.get_mut(bias).value = Tensor::new(vec![8], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let mut g2 = Graph::inference();
        let f2 = g2.constant(g.value(f).clone());
        let lang = e.encode_language(&mut g2, &store, 0).unwrap();
        let lang = g2.reshape(lang, &[1, 4]).unwrap();
        let out = e.film(&mut g2, &store, &e.film_wrist, f2, lang).unwrap();
        let want = g.value(f).map(|x| x + 0.5);
        assert!(g2.value(out).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn language_lookup() {
        let (store, e) = bank(4);
        let mut g = Graph::inference();
        let a = e.encode_language(&mut g, &store, 0).unwrap();
        let b = e.encode_language(&mut g, &store, 1).unwrap();
        assert_ne!(g.value(a), g.value(b));
        assert!(matches!(e.encode_language(&mut g, &store, 9), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_window_rejected() {
        let (store, e) = bank(4);
        let o = obs(0, 5);
        let batch = WindowBatch::from_windows(&[vec![&o; 9]]).unwrap();
        let mut g = Graph::inference();
        assert!(matches!(e.encode_window(&mut g, &store, &batch), Err(Error::Contract(_))));
    }
}
