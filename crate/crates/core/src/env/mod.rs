//! A deterministic 2D tabletop: one effector with a parallel gripper and a
//! handful of objects on the unit square.

mod expert;
mod suite;

pub use expert::{collect_demos, expert_action, rollout_expert};
pub use suite::make_suite;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_OBJECTS: usize = 3;
pub const N_CLASSES: usize = 4;
pub const GRASP_RADIUS: f64 = 0.03;
pub const MAX_STEP: f64 = 0.05;
/// Per-object view features: position, class one-hot, held flag.
const OBJ_FEATURES: usize = 2 + N_CLASSES + 1;
pub const VIEW_DIM: usize = N_OBJECTS * OBJ_FEATURES + 2;
pub const PROPRIO_DIM: usize = 3;
pub const ACTION_DIM: usize = 3;

pub const CLASS_NAMES: [&str; N_CLASSES] = ["red block", "blue bowl", "green cup", "yellow plate"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Object,
    Goal,
    Spatial,
    Long,
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "object" => Ok(SuiteKind::Object),
            "goal" => Ok(SuiteKind::Goal),
            "spatial" => Ok(SuiteKind::Spatial),
            "long" => Ok(SuiteKind::Long),
            other => Err(Error::Config(format!("unknown suite kind `{other}`"))),
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SuiteKind::Object => "object",
            SuiteKind::Goal => "goal",
            SuiteKind::Spatial => "spatial",
            SuiteKind::Long => "long",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        dist(p, self.center) <= self.radius
    }
}

/// One goal predicate. `object` indexes the scene's object list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SubGoal {
    /// Carry the object into the region and let go.
    Place { object: usize, region: Region },
    /// Slide the object into the region with an open gripper.
    Push { object: usize, region: Region },
    /// Bring the effector into the region.
    Reach { region: Region },
}

impl SubGoal {
    pub fn region(&self) -> Region {
        match *self {
            SubGoal::Place { region, .. } | SubGoal::Push { region, .. } | SubGoal::Reach { region } => {
                region
            }
        }
    }

    pub fn holds(&self, s: &EnvState) -> bool {
        match *self {
            SubGoal::Place { object, region } | SubGoal::Push { object, region } => {
                let o = &s.objects[object];
                !o.held && region.contains(o.xy)
            }
            SubGoal::Reach { region } => region.contains(s.effector_xy),
        }
    }
}

/// Initial-state distribution: nominal layout plus uniform jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitDist {
    pub classes: Vec<usize>,
    pub nominal: Vec<[f64; 2]>,
    pub effector: [f64; 2],
    pub jitter: f64,
    pub effector_jitter: f64,
    pub seed_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub suite_kind: SuiteKind,
    pub language: String,
    pub init_dist: InitDist,
    /// Ordered sub-goals; exactly two for long-horizon tasks.
    pub goal: Vec<SubGoal>,
    pub horizon: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config(format!("task {}: horizon must be >= 1", self.task_id)));
        }
        if self.goal.is_empty() || (self.suite_kind == SuiteKind::Long) != (self.goal.len() == 2) {
            return Err(Error::Config(format!("task {}: bad sub-goal count", self.task_id)));
        }
        for g in &self.goal {
            let r = g.region();
            let inside = |v: f64| v - r.radius >= 0.0 && v + r.radius <= 1.0;
            if !inside(r.center[0]) || !inside(r.center[1]) {
                return Err(Error::Config(format!("task {}: goal region leaves workspace", self.task_id)));
            }
        }
        Ok(())
    }

    /// Sample s₀ ~ μ₀.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let d = &self.init_dist;
        let mut jit = |p: [f64; 2], r: f64| {
            [
                clamp01(p[0] + rng.gen_range(-r..=r)),
                clamp01(p[1] + rng.gen_range(-r..=r)),
            ]
        };
        let effector_xy = jit(d.effector, d.effector_jitter);
        let objects = d
            .classes
            .iter()
            .zip(&d.nominal)
            .map(|(&class, &p)| ObjectState {
                class,
                xy: jit(p, d.jitter),
                held: false,
            })
            .collect();
        EnvState {
            effector_xy,
            gripper_closed: false,
            objects,
            step_count: 0,
            stage: 0,
            done: false,
        }
    }

    /// Goal predicate g(s).
    pub fn success(&self, s: &EnvState) -> bool {
        let last = self.goal.len() - 1;
        s.stage >= last && self.goal[last].holds(s)
    }

    /// The sub-goal currently being pursued.
    pub fn active_goal(&self, s: &EnvState) -> &SubGoal {
        &self.goal[s.stage.min(self.goal.len() - 1)]
    }

    pub fn observe(&self, s: &EnvState) -> Observation {
        observe(self, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub class: usize,
    pub xy: [f64; 2],
    pub held: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector_xy: [f64; 2],
    pub gripper_closed: bool,
    pub objects: Vec<ObjectState>,
    pub step_count: usize,
    /// Number of leading sub-goals already achieved, in order.
    pub stage: usize,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta_xy: [f64; 2],
    /// > 0 closes the gripper; below -0.5 with an open gripper pushes.
    pub gripper_cmd: f64,
}

impl Action {
    pub fn zero() -> Self {
        Action {
            delta_xy: [0.0, 0.0],
            gripper_cmd: 0.0,
        }
    }

    pub fn clipped(&self) -> Action {
        Action {
            delta_xy: [
                self.delta_xy[0].clamp(-MAX_STEP, MAX_STEP),
                self.delta_xy[1].clamp(-MAX_STEP, MAX_STEP),
            ],
            gripper_cmd: self.gripper_cmd.clamp(-1.0, 1.0),
        }
    }

    /// Scaled to roughly unit range: deltas divided by the step bound.
    pub fn to_normalized(&self) -> [f64; ACTION_DIM] {
        [self.delta_xy[0] / MAX_STEP, self.delta_xy[1] / MAX_STEP, self.gripper_cmd]
    }

    pub fn from_normalized(a: &[f64]) -> Action {
        Action {
            delta_xy: [a[0] * MAX_STEP, a[1] * MAX_STEP],
            gripper_cmd: a[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub workspace_view: Vec<f64>,
    pub wrist_view: Vec<f64>,
    pub proprio: Vec<f64>,
    pub language_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task_id: usize,
    pub initial: EnvState,
    pub steps: Vec<(Observation, Action)>,
    pub success: bool,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn nearest_within(objects: &[ObjectState], p: [f64; 2], radius: f64, free_only: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in objects.iter().enumerate() {
        if free_only && o.held {
            continue;
        }
        let d = dist(o.xy, p);
        if d <= radius && best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Advance one step. Returns the next state with `(done, success)`.
pub fn step(state: &EnvState, action: &Action, task: &TaskSpec) -> Result<(EnvState, bool, bool)> {
    if state.done || state.step_count >= task.horizon {
        return Err(Error::contract("step on a finished episode"));
    }
    if !(action.delta_xy[0].is_finite() && action.delta_xy[1].is_finite() && action.gripper_cmd.is_finite()) {
        return Err(Error::contract("non-finite action"));
    }
    let a = action.clipped();
    let mut s = state.clone();
    let old = s.effector_xy;
    s.effector_xy = [clamp01(old[0] + a.delta_xy[0]), clamp01(old[1] + a.delta_xy[1])];
    let moved = [s.effector_xy[0] - old[0], s.effector_xy[1] - old[1]];

    let close = a.gripper_cmd > 0.0;
    let holding = s.objects.iter().position(|o| o.held);
    match (s.gripper_closed, close) {
        (false, true) => {
            if let Some(i) = nearest_within(&s.objects, s.effector_xy, GRASP_RADIUS, true) {
                s.objects[i].held = true;
                s.objects[i].xy = s.effector_xy;
            }
        }
        (true, false) => {
            if let Some(i) = holding {
                s.objects[i].held = false;
            }
        }
        (true, true) => {
            if let Some(i) = holding {
                s.objects[i].xy = s.effector_xy;
            }
        }
        (false, false) => {
            if a.gripper_cmd < -0.5 {
                if let Some(i) = nearest_within(&state.objects, old, GRASP_RADIUS, true) {
                    let o = &mut s.objects[i];
                    o.xy = [clamp01(o.xy[0] + moved[0]), clamp01(o.xy[1] + moved[1])];
                }
            }
        }
    }
    s.gripper_closed = close;
    if s.stage + 1 < task.goal.len() && task.goal[s.stage].holds(&s) {
        s.stage += 1;
    }
    s.step_count += 1;
    let success = task.success(&s);
    s.done = success || s.step_count >= task.horizon;
    let done = s.done;
    Ok((s, done, success))
}

/// Wrist-camera offset: magnified tenfold and saturating at 0.2 away.
fn wrist(delta: f64) -> f64 {
    (10.0 * delta).clamp(-2.0, 2.0)
}

fn observe(task: &TaskSpec, s: &EnvState) -> Observation {
    let e = s.effector_xy;
    let goal = task.active_goal(s).region().center;
    let mut ws = Vec::with_capacity(VIEW_DIM);
    let mut wr = Vec::with_capacity(VIEW_DIM);
    for o in &s.objects {
        ws.extend([2.0 * o.xy[0] - 1.0, 2.0 * o.xy[1] - 1.0]);
        wr.extend([wrist(o.xy[0] - e[0]), wrist(o.xy[1] - e[1])]);
        for c in 0..N_CLASSES {
            let v = if c == o.class { 1.0 } else { 0.0 };
            ws.push(v);
            wr.push(v);
        }
        let h = if o.held { 1.0 } else { 0.0 };
        ws.push(h);
        wr.push(h);
    }
    ws.extend([2.0 * goal[0] - 1.0, 2.0 * goal[1] - 1.0]);
    wr.extend([wrist(goal[0] - e[0]), wrist(goal[1] - e[1])]);
    Observation {
        workspace_view: ws,
        wrist_view: wr,
        proprio: vec![2.0 * e[0] - 1.0, 2.0 * e[1] - 1.0, if s.gripper_closed { 1.0 } else { -1.0 }],
        language_id: task.task_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn goal_task() -> TaskSpec {
        make_suite(SuiteKind::Goal, 5, 7).unwrap().remove(0)
    }

    #[test]
    fn zero_action_only_advances_clock() {
        let t = goal_task();
        let s0 = t.sample_initial(&mut seed::rng(1, &[]));
        let (s1, _, _) = step(&s0, &Action::zero(), &t).unwrap();
        assert_eq!(s1.effector_xy, s0.effector_xy);
        assert_eq!(s1.objects, s0.objects);
        assert_eq!(s1.step_count, 1);
    }

    #[test]
    fn satisfied_goal_reports_success() {
        let t = TaskSpec {
            goal: vec![SubGoal::Reach {
                region: Region {
                    center: [0.5, 0.5],
                    radius: 0.06,
                },
            }],
            ..goal_task()
        };
        let mut s = t.sample_initial(&mut seed::rng(2, &[]));
        s.effector_xy = [0.5, 0.5];
        let (_, done, success) = step(&s, &Action::zero(), &t).unwrap();
        assert!(done && success);
    }

    #[test]
    fn finished_episode_rejects_step() {
        let t = goal_task();
        let mut s = t.sample_initial(&mut seed::rng(3, &[]));
        s.step_count = t.horizon;
        assert!(matches!(step(&s, &Action::zero(), &t), Err(Error::Contract(_))));
    }

    #[test]
    fn grasp_carry_release() {
        let t = goal_task();
        let mut s = t.sample_initial(&mut seed::rng(4, &[]));
        let target = s.objects[0].xy;
        s.effector_xy = [target[0] + 0.02, target[1]];
        let close = Action {
            delta_xy: [0.0, 0.0],
            gripper_cmd: 1.0,
        };
        let (s, _, _) = step(&s, &close, &t).unwrap();
        assert!(s.objects[0].held);
        let carry = Action {
            delta_xy: [0.04, -0.08],
            gripper_cmd: 1.0,
        };
        let (s, _, _) = step(&s, &carry, &t).unwrap();
        assert_eq!(s.objects[0].xy, s.effector_xy);
        assert!((s.effector_xy[1] - (target[1] - 0.05)).abs() < 1e-12);
        let (s, _, _) = step(&s, &Action::zero(), &t).unwrap();
        assert!(!s.objects[0].held);
        assert!(!s.gripper_closed);
    }

    #[test]
    fn grasp_outside_radius_fails() {
        let t = goal_task();
        let mut s = t.sample_initial(&mut seed::rng(5, &[]));
        let target = s.objects[0].xy;
        s.effector_xy = [target[0] + 0.031, target[1]];
        let close = Action {
            delta_xy: [0.0, 0.0],
            gripper_cmd: 1.0,
        };
        let (s, _, _) = step(&s, &close, &t).unwrap();
        assert!(s.objects.iter().all(|o| !o.held));
    }

    #[test]
    fn push_drags_contacted_object() {
        let t = goal_task();
        let mut s = t.sample_initial(&mut seed::rng(6, &[]));
        let target = s.objects[1].xy;
        s.effector_xy = [target[0] - 0.01, target[1]];
        let push = Action {
            delta_xy: [0.03, 0.0],
            gripper_cmd: -1.0,
        };
        let (s2, _, _) = step(&s, &push, &t).unwrap();
        assert!((s2.objects[1].xy[0] - (target[0] + 0.03)).abs() < 1e-12);
        let hover = Action {
            gripper_cmd: -0.2,
            ..push
        };
        let (s3, _, _) = step(&s, &hover, &t).unwrap();
        assert_eq!(s3.objects[1].xy, target);
    }

    #[test]
    fn observation_dims() {
        let t = goal_task();
        let o = t.observe(&t.sample_initial(&mut seed::rng(7, &[])));
        assert_eq!(o.workspace_view.len(), VIEW_DIM);
        assert_eq!(o.wrist_view.len(), VIEW_DIM);
        assert_eq!(o.proprio.len(), PROPRIO_DIM);
    }

    #[test]
    fn unknown_suite_is_config_error() {
        assert!(matches!("kitchen".parse::<SuiteKind>(), Err(Error::Config(_))));
        assert_eq!("Goal".parse::<SuiteKind>().unwrap(), SuiteKind::Goal);
    }
}
