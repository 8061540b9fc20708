use rand::Rng;

use super::{dist, step, Action, Demonstration, EnvState, SubGoal, TaskSpec, MAX_STEP};
use crate::error::{Error, Result};
use crate::seed;

pub const EXPERT_NOISE: f64 = 0.005;
const AT_OBJECT: f64 = 0.01;
const AT_GOAL: f64 = 0.02;
const HOVER: f64 = -0.2;
const PUSH: f64 = -1.0;
const CLOSE: f64 = 1.0;

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        (to[0] - from[0]).clamp(-MAX_STEP, MAX_STEP),
        (to[1] - from[1]).clamp(-MAX_STEP, MAX_STEP),
    ]
}

fn plan(task: &TaskSpec, s: &EnvState) -> ([f64; 2], f64) {
    let e = s.effector_xy;
    let holding = s.objects.iter().position(|o| o.held);
    let still = [0.0, 0.0];
    match *task.active_goal(s) {
        SubGoal::Place { object, region } => {
            if holding == Some(object) {
                if dist(e, region.center) < AT_GOAL {
                    (still, HOVER)
                } else {
                    (toward(e, region.center), CLOSE)
                }
            } else if holding.is_some() || s.gripper_closed {
                (still, HOVER)
            } else if dist(e, s.objects[object].xy) < AT_OBJECT {
                (still, CLOSE)
            } else {
                (toward(e, s.objects[object].xy), HOVER)
            }
        }
        SubGoal::Push { object, region } => {
            let o = s.objects[object].xy;
            if holding.is_some() || s.gripper_closed {
                (still, HOVER)
            } else if dist(e, o) < AT_OBJECT {
                (toward(o, region.center), PUSH)
            } else {
                (toward(e, o), HOVER)
            }
        }
        SubGoal::Reach { region } => (toward(e, region.center), HOVER),
    }
}

/// Scripted waypoint controller: approach, grasp, transport, release for
/// each sub-goal in order, with uniform ±0.005 noise on the displacement.
pub fn expert_action<R: Rng + ?Sized>(task: &TaskSpec, state: &EnvState, rng: &mut R) -> Action {
    noisy_action(task, state, rng, EXPERT_NOISE)
}

fn noisy_action<R: Rng + ?Sized>(task: &TaskSpec, state: &EnvState, rng: &mut R, noise: f64) -> Action {
    let (mut d, g) = plan(task, state);
    if noise > 0.0 {
        d[0] += rng.gen_range(-noise..=noise);
        d[1] += rng.gen_range(-noise..=noise);
    }
    Action {
        delta_xy: d,
        gripper_cmd: g,
    }
}

/// One expert episode from a fresh initial state drawn with `rng`.
pub fn rollout_expert<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R, noise: f64) -> Result<Demonstration> {
    let initial = task.sample_initial(rng);
    let mut s = initial.clone();
    let mut steps = Vec::new();
    let mut success = false;
    while !s.done {
        let a = noisy_action(task, &s, rng, noise);
        steps.push((task.observe(&s), a));
        let (next, _, ok) = step(&s, &a, task)?;
        success = ok;
        s = next;
    }
    Ok(Demonstration {
        task_id: task.task_id,
        initial,
        steps,
        success,
    })
}

/// `n` successful demonstrations; failed attempts are discarded and retried.
pub fn collect_demos(task: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Demonstration>> {
    let mut demos = Vec::with_capacity(n);
    let max_attempts = 10 * n.max(1);
    for attempt in 0..max_attempts {
        if demos.len() == n {
            break;
        }
        let mut rng = seed::rng(seed, &[task.init_dist.seed_offset, attempt as u64]);
        let d = rollout_expert(task, &mut rng, EXPERT_NOISE)?;
        if d.success {
            demos.push(d);
        }
    }
    if demos.len() < n {
        return Err(Error::Data(format!(
            "task {}: only {} of {n} expert demos succeeded",
            task.task_id,
            demos.len()
        )));
    }
    Ok(demos)
}
