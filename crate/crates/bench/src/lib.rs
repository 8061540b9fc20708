//! Shared fixtures for the benchmarks.

use speci_core::config::ModelConfig;
use speci_core::env::{collect_demos, make_suite, Demonstration, SuiteKind, TaskSpec};
use speci_core::harness::make_batch;
use speci_core::perception::WindowBatch;
use speci_core::{Policy, Tensor};

/// The small model the transfer experiments use.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        d: 48,
        heads: 4,
        blocks: 1,
        mlp_hidden: 96,
        skills_per_task: 5,
        top_c: 5,
        cp_rank: 4,
        window: 1,
        ..Default::default()
    }
}

pub fn goal_task() -> TaskSpec {
    make_suite(SuiteKind::Goal, 5, 0).unwrap().remove(0)
}

pub fn demos(n: usize) -> Vec<Demonstration> {
    collect_demos(&goal_task(), n, 7).unwrap()
}

/// A policy with one registered task and a training batch of `batch` steps.
pub fn policy_and_batch(cfg: &ModelConfig, batch: usize) -> (Policy, WindowBatch, Tensor) {
    let mut p = Policy::new(cfg, false, 1).unwrap();
    p.add_language(0, false).unwrap();
    p.begin_task(0).unwrap();
    let d = demos(2);
    let items: Vec<(&Demonstration, usize)> = (0..batch).map(|i| (&d[i % 2], i % d[i % 2].len())).collect();
    let (b, a) = make_batch(&items, cfg.window, cfg.center_slot()).unwrap();
    (p, b, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let (_, b, a) = policy_and_batch(&desk_model(), 8);
        assert_eq!((b.len(), a.shape()[0]), (8, 8));
    }
}
