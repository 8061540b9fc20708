use rand::seq::SliceRandom;
use rand::Rng;

use super::{dist, InitDist, Region, SubGoal, SuiteKind, TaskSpec, CLASS_NAMES, N_CLASSES};
use crate::error::{Error, Result};
use crate::seed;

const REGION_RADIUS: f64 = 0.06;
const SHORT_HORIZON: usize = 80;
const LONG_HORIZON: usize = 160;
const JITTER: f64 = 0.05;
const EFFECTOR_JITTER: f64 = 0.15;
const EFFECTOR_HOME: [f64; 2] = [0.5, 0.5];
/// Scene shared by every Goal and Long task.
const FIXED_SCENE: [[f64; 2]; 3] = [[0.25, 0.3], [0.5, 0.75], [0.75, 0.3]];

fn describe(goal: &SubGoal, classes: &[usize], qualifier: &[&str]) -> String {
    let name = |o: usize| {
        let q = qualifier.get(o).copied().unwrap_or("");
        if q.is_empty() {
            CLASS_NAMES[classes[o]].to_string()
        } else {
            format!("{q} {}", CLASS_NAMES[classes[o]])
        }
    };
    let at = |r: Region| format!("the zone at ({:.2}, {:.2})", r.center[0], r.center[1]);
    match *goal {
        SubGoal::Place { object, region } => format!("put the {} in {}", name(object), at(region)),
        SubGoal::Push { object, region } => format!("push the {} to {}", name(object), at(region)),
        SubGoal::Reach { region } => format!("move the gripper to {}", at(region)),
    }
}

/// A region center at least `clearance` away from every point in `avoid`.
fn free_region<R: Rng>(rng: &mut R, avoid: &[[f64; 2]], clearance: f64) -> Region {
    loop {
        let c = [rng.gen_range(0.12..0.88), rng.gen_range(0.12..0.88)];
        if avoid.iter().all(|&p| dist(p, c) >= clearance) {
            return Region {
                center: [round2(c[0]), round2(c[1])],
                radius: REGION_RADIUS,
            };
        }
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn random_subgoal<R: Rng>(rng: &mut R, avoid: &[[f64; 2]], object: usize) -> SubGoal {
    let region = free_region(rng, avoid, 0.22);
    match rng.gen_range(0..3) {
        0 => SubGoal::Place { object, region },
        1 => SubGoal::Push { object, region },
        _ => SubGoal::Reach { region },
    }
}

fn goal_key(g: &SubGoal) -> (u8, usize) {
    match *g {
        SubGoal::Place { object, .. } => (0, object),
        SubGoal::Push { object, .. } => (1, object),
        SubGoal::Reach { .. } => (2, usize::MAX),
    }
}

/// Build a task suite. Deterministic in `seed`.
pub fn make_suite(kind: SuiteKind, n_tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if n_tasks == 0 {
        return Err(Error::Config("a suite needs at least one task".into()));
    }
    let mut rng = seed::rng(seed, &[kind as u64, 0x5017e]);
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut used: Vec<(u8, usize)> = Vec::new();
    for task_id in 0..n_tasks {
        let mut avoid: Vec<[f64; 2]> = FIXED_SCENE.to_vec();
        avoid.push(EFFECTOR_HOME);
        let (classes, nominal, goal, qualifier, horizon): (Vec<usize>, Vec<[f64; 2]>, Vec<SubGoal>, Vec<&str>, usize) =
            match kind {
                SuiteKind::Goal => {
                    // Cycle through distinct (kind, object) pairs before repeating.
                    let g = loop {
                        let obj = rng.gen_range(0..FIXED_SCENE.len());
                        let g = random_subgoal(&mut rng, &avoid, obj);
                        if used.len() >= 7 || !used.contains(&goal_key(&g)) {
                            break g;
                        }
                    };
                    used.push(goal_key(&g));
                    (vec![0, 1, 2], FIXED_SCENE.to_vec(), vec![g], vec![], SHORT_HORIZON)
                }
                SuiteKind::Object => {
                    let basket = Region {
                        center: [0.5, 0.85],
                        radius: REGION_RADIUS,
                    };
                    let target_class = task_id % N_CLASSES;
                    let mut others: Vec<usize> = (0..N_CLASSES).filter(|&c| c != target_class).collect();
                    others.shuffle(&mut rng);
                    let mut classes = vec![target_class, others[0], others[1]];
                    classes.shuffle(&mut rng);
                    let object = classes.iter().position(|&c| c == target_class).unwrap();
                    let nominal = vec![[0.2, 0.25], [0.5, 0.25], [0.8, 0.25]];
                    let g = SubGoal::Place { object, region: basket };
                    (classes, nominal, vec![g], vec![], SHORT_HORIZON)
                }
                SuiteKind::Spatial => {
                    let twin = rng.gen_range(0..N_CLASSES);
                    let other = (twin + 1 + rng.gen_range(0..N_CLASSES - 1)) % N_CLASSES;
                    let y = rng.gen_range(0.2..0.4);
                    let left = [rng.gen_range(0.15..0.3), round2(y)];
                    let right = [rng.gen_range(0.6..0.75), round2(y + rng.gen_range(-0.05..0.05))];
                    let nominal = vec![
                        [round2(left[0]), left[1]],
                        [round2(right[0]), right[1]],
                        [0.5, 0.8],
                    ];
                    let object = rng.gen_range(0..2);
                    let mut av = nominal.clone();
                    av.push(EFFECTOR_HOME);
                    let region = free_region(&mut rng, &av, 0.22);
                    let g = SubGoal::Place { object, region };
                    (vec![twin, twin, other], nominal, vec![g], vec!["left", "right", ""], SHORT_HORIZON)
                }
                SuiteKind::Long => {
                    let first_obj = rng.gen_range(0..3);
                    let first_region = free_region(&mut rng, &avoid, 0.22);
                    let first = if rng.gen_bool(0.5) {
                        SubGoal::Place {
                            object: first_obj,
                            region: first_region,
                        }
                    } else {
                        SubGoal::Push {
                            object: first_obj,
                            region: first_region,
                        }
                    };
                    avoid.push(first_region.center);
                    let second_obj = (first_obj + rng.gen_range(1..3)) % 3;
                    let second = random_subgoal(&mut rng, &avoid, second_obj);
                    (vec![0, 1, 2], FIXED_SCENE.to_vec(), vec![first, second], vec![], LONG_HORIZON)
                }
            };
        let language = goal
            .iter()
            .map(|g| describe(g, &classes, &qualifier))
            .collect::<Vec<_>>()
            .join(", then ");
        let task = TaskSpec {
            task_id,
            suite_kind: kind,
            language,
            init_dist: InitDist {
                classes,
                nominal,
                effector: EFFECTOR_HOME,
                jitter: JITTER,
                effector_jitter: EFFECTOR_JITTER,
                seed_offset: seed::derive(seed, &[kind as u64, task_id as u64]),
            },
            goal,
            horizon,
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}
