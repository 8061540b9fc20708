#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use speci_core::config::{ModelConfig, TrainConfig};
use speci_core::env::{PROPRIO_DIM, VIEW_DIM};
use speci_core::perception::WindowBatch;
use speci_core::{Graph, ParamStore, Policy, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d = 8, one block, M = 4, C = 2, CP rank 2, two mixture components.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        blocks: 1,
        mlp_hidden: 8,
        skills_per_task: 4,
        top_c: 2,
        cp_rank: 2,
        gmm_components: 2,
        window: 3,
        ..Default::default()
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        eval_every: 1,
        eval_episodes: 2,
        demos_per_task: 2,
        batch_size: 16,
        ..Default::default()
    }
}

/// Policy with `tasks` registered tasks.
pub fn policy(cfg: &ModelConfig, per_task: bool, tasks: usize, seed: u64) -> Policy {
    let mut p = Policy::new(cfg, per_task, seed).unwrap();
    for t in 0..tasks {
        p.add_language(t, t > 0).unwrap();
        p.begin_task(t).unwrap();
    }
    p
}

pub fn random_batch(r: &mut impl Rng, bsz: usize, window: usize, language: usize) -> WindowBatch {
    let mut t = |n: usize| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    WindowBatch {
        workspace: Tensor::new(vec![bsz, window, VIEW_DIM], t(bsz * window * VIEW_DIM)).unwrap(),
        wrist: Tensor::new(vec![bsz, window, VIEW_DIM], t(bsz * window * VIEW_DIM)).unwrap(),
        proprio: Tensor::new(vec![bsz, window, PROPRIO_DIM], t(bsz * window * PROPRIO_DIM)).unwrap(),
        language: vec![language; bsz],
    }
}

pub fn random_actions(r: &mut impl Rng, bsz: usize) -> Tensor {
    Tensor::new(vec![bsz, 3], (0..bsz * 3).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Add Gaussian noise to every value so zero-initialized factors are
/// exercised too.
pub fn perturb(store: &mut ParamStore, scale: f64, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += scale * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, r);
        }
    }
}

pub fn loss_value(p: &Policy, store: &ParamStore, b: &WindowBatch, a: &Tensor, task: usize) -> f64 {
    let mut g = Graph::inference();
    let l = p.bc_loss(&mut g, store, b, a, task).unwrap();
    g.value(l).item()
}

pub fn analytic_grads(p: &Policy, store: &ParamStore, b: &WindowBatch, a: &Tensor, task: usize) -> ParamStore {
    let mut s = store.clone();
    s.zero_grad();
    let mut g = Graph::new();
    let l = p.bc_loss(&mut g, &s, b, a, task).unwrap();
    g.backward_into(l, &mut s).unwrap();
    s
}

pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
}

/// Central differences over every element of every trainable parameter.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn fd_check(p: &Policy, store: &ParamStore, b: &WindowBatch, a: &Tensor, task: usize, h: f64, floor: f64) -> FdReport {
    let grads = analytic_grads(p, store, b, a, task);
    let mut s = store.clone();
    let mut rep = FdReport {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
    };
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        if !s.get(id).receives_grad() {
            continue;
        }
        let name = s.name(id).to_string();
        for i in 0..s.get(id).value.numel() {
            let x0 = s.get(id).value.data()[i];
            s.get_mut(id).value.data_mut()[i] = x0 + h;
            let up = loss_value(p, &s, b, a, task);
            s.get_mut(id).value.data_mut()[i] = x0 - h;
            let down = loss_value(p, &s, b, a, task);
            s.get_mut(id).value.data_mut()[i] = x0;
            let num = (up - down) / (2.0 * h);
            let ana = grads.get(id).grad.data()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            if rel > rep.worst_rel {
                rep.worst_rel = rel;
                rep.worst_name = format!("{name}[{i}] analytic {ana:e} numeric {num:e}");
            }
            rep.checked += 1;
        }
    }
    rep
}
