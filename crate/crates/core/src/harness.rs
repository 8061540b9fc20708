//! Lifelong training: paradigms, replay, PackNet ownership, evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::sample_action;
use crate::autograd::Graph;
use crate::config::{AdapterMode, ModelConfig, ParadigmConfig, ParadigmKind, TrainConfig};
use crate::env::{self, Action, Demonstration, EnvState, Observation, TaskSpec, ACTION_DIM};
use crate::error::{Error, Result};
use crate::metrics::{SuccessRecord, UsageLog};
use crate::nn::ParamRole;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::param::ParamStore;
use crate::perception::{window_at, WindowBatch};
use crate::policy::Policy;
use crate::seed;
use crate::tensor::Tensor;

const TAG_MODEL: u64 = 0x30de1;
const TAG_DEMOS: u64 = 0xde30;
const TAG_TRAIN: u64 = 0x7a11;
const TAG_EVAL: u64 = 0xe7a1;
const TAG_REPLAY: u64 = 0x4e91;
const TAG_TUNE: u64 = 0xf1e7;

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub task_id: usize,
    /// Position of the demonstration in its task's demo list.
    pub index: usize,
    pub demo: Demonstration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub stored: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            stored: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<usize, usize> {
        let mut c = BTreeMap::new();
        for e in &self.stored {
            *c.entry(e.task_id).or_insert(0) += 1;
        }
        c
    }

    pub fn contains_task(&self, task_id: usize) -> bool {
        self.stored.iter().any(|e| e.task_id == task_id)
    }

    /// Add every demo of `task_id`; while over capacity, evict a uniformly
    /// random entry of the most represented task (lowest id on ties).
    pub fn update<R: Rng + ?Sized>(&mut self, task_id: usize, demos: &[Demonstration], rng: &mut R) {
        for (index, demo) in demos.iter().enumerate() {
            self.stored.push(ReplayEntry {
                task_id,
                index,
                demo: demo.clone(),
            });
        }
        while self.stored.len() > self.capacity {
            let counts = self.counts();
            let top = counts.values().copied().max().unwrap_or(0);
            let victim_task = *counts.iter().find(|(_, &n)| n == top).unwrap().0;
            let members: Vec<usize> = (0..self.stored.len())
                .filter(|&i| self.stored[i].task_id == victim_task)
                .collect();
            let pick = members[rng.gen_range(0..members.len())];
            self.stored.remove(pick);
        }
    }
}

/// Per-element ownership of every weight matrix. `None` is free capacity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PackNetState {
    pub owners: BTreeMap<String, Vec<Option<usize>>>,
    /// `(task, elements assigned)` per pruning round.
    pub history: Vec<(usize, usize)>,
}

impl PackNetState {
    pub fn new(policy: &Policy) -> Self {
        let owners = policy
            .store
            .iter()
            .filter(|(id, _, _)| policy.roles.get(*id) == ParamRole::Weight)
            .map(|(_, name, p)| (name.to_string(), vec![None; p.value.numel()]))
            .collect();
        PackNetState {
            owners,
            history: Vec::new(),
        }
    }

    /// Before training `task`: weight matrices may only move their free
    /// elements; whole-vector parameters belong to the first task.
    pub fn prepare(&self, policy: &mut Policy, task: usize) -> Result<()> {
        let ids: Vec<_> = policy.store.ids().collect();
        for id in ids {
            match policy.roles.get(id) {
                ParamRole::Weight => {
                    let owners = self.owners_for(policy.store.name(id))?;
                    policy.store.get_mut(id).update_mask = Some(owners.iter().map(Option::is_none).collect());
                }
                ParamRole::Vector => policy.store.set_frozen(id, task > 0),
                ParamRole::Exempt => {}
            }
        }
        Ok(())
    }

    fn owners_for(&self, name: &str) -> Result<&Vec<Option<usize>>> {
        self.owners
            .get(name)
            .ok_or_else(|| Error::contract(format!("no ownership map for {name}")))
    }

    /// Assign the largest-magnitude `keep_ratio` of each matrix's free
    /// elements to `task`; zero the rest and leave them free.
    pub fn prune(&mut self, store: &mut ParamStore, keep_ratio: f64, task: usize) -> Result<usize> {
        let mut assigned = 0;
        for (name, owners) in self.owners.iter_mut() {
            let id = store
                .lookup(name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            let values = store.get_mut(id).value.data_mut();
            let free: Vec<usize> = (0..owners.len()).filter(|&i| owners[i].is_none()).collect();
            let keep = (keep_ratio * free.len() as f64).round() as usize;
            let mut order = free.clone();
            order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
            for &i in &order[..keep] {
                owners[i] = Some(task);
            }
            for &i in &order[keep..] {
                values[i] = 0.0;
            }
            assigned += keep;
        }
        self.history.push((task, assigned));
        Ok(assigned)
    }

    /// Masks for fine-tuning after pruning: only `task`'s elements move.
    pub fn finetune_masks(&self, store: &mut ParamStore, task: usize) -> Result<()> {
        for (name, owners) in &self.owners {
            let id = store.lookup(name).unwrap();
            store.get_mut(id).update_mask = Some(owners.iter().map(|o| *o == Some(task)).collect());
        }
        Ok(())
    }

    /// Copy of `store` in which elements owned by tasks after `task`, and
    /// free elements, read as zero.
    pub fn masked_store(&self, store: &ParamStore, task: usize) -> Result<ParamStore> {
        let mut out = store.clone();
        for (name, owners) in &self.owners {
            let id = out.lookup(name).unwrap();
            let v = out.get_mut(id).value.data_mut();
            for (x, o) in v.iter_mut().zip(owners) {
                if !matches!(o, Some(t) if *t <= task) {
                    *x = 0.0;
                }
            }
        }
        Ok(out)
    }
}

/// Batch of windows and normalized actions for `(demo, t)` pairs.
pub fn make_batch(items: &[(&Demonstration, usize)], window: usize, center: usize) -> Result<(WindowBatch, Tensor)> {
    let mut wins = Vec::with_capacity(items.len());
    let mut acts = Vec::with_capacity(items.len() * ACTION_DIM);
    for &(demo, t) in items {
        let obs: Vec<&Observation> = demo.steps.iter().map(|s| &s.0).collect();
        wins.push(window_at(&obs, t, window, center));
        acts.extend_from_slice(&demo.steps[t].1.to_normalized());
    }
    let batch = WindowBatch::from_windows(&wins)?;
    Ok((batch, Tensor::new(vec![items.len(), ACTION_DIM], acts)?))
}

/// One optimizer step on `items`; returns the batch loss.
fn train_step(
    policy: &mut Policy,
    opt: &mut AdamW,
    train: &TrainConfig,
    items: &[(&Demonstration, usize)],
    (window, center): (usize, usize),
    task_id: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (batch, mut acts) = make_batch(items, window, center)?;
    // Deterministic gripper labels collapse that dimension's variance to the floor.
    let nz = train.gripper_label_noise;
    if nz > 0.0 {
        for row in acts.data_mut().chunks_exact_mut(ACTION_DIM) {
            row[ACTION_DIM - 1] += rng.gen_range(-nz..=nz);
        }
    }
    let mut g = Graph::new();
    let loss = policy.bc_loss(&mut g, &policy.store, &batch, &acts, task_id)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Data("non-finite loss".into()));
    }
    g.backward_into(loss, &mut policy.store)?;
    if train.grad_clip > 0.0 {
        clip_grad_norm(&mut policy.store, train.grad_clip);
    }
    opt.step(&mut policy.store);
    policy.store.zero_grad();
    Ok(lv)
}

fn samples<'a>(demos: impl IntoIterator<Item = &'a Demonstration>) -> Vec<(usize, usize)> {
    demos
        .into_iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |t| (i, t)))
        .collect()
}

/// Per-episode state handed to an evaluation actor.
pub struct Episode<'a> {
    pub state: &'a EnvState,
    pub history: &'a [Observation],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub rate: f64,
    pub successes: Vec<bool>,
    /// Selection count per codebook row over every step of every episode.
    pub usage: Vec<u64>,
}

/// Roll out `n_episodes` episodes in lockstep. Episode `i` draws its initial
/// state and all of its sampling from its own stream, so results do not
/// depend on batching. The actor returns one action per active episode.
pub fn evaluate_with<F>(task: &TaskSpec, n_episodes: usize, seed: u64, mut actor: F) -> Result<EvalOutcome>
where
    F: FnMut(&[Episode<'_>], &mut [&mut ChaCha8Rng], &mut Vec<u64>) -> Result<Vec<Action>>,
{
    if n_episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n_episodes)
        .map(|ep| seed::rng(seed, &[TAG_EVAL, task.task_id as u64, ep as u64]))
        .collect();
    let mut states: Vec<EnvState> = rngs.iter_mut().map(|r| task.sample_initial(r)).collect();
    let mut histories: Vec<Vec<Observation>> = states.iter().map(|s| vec![task.observe(s)]).collect();
    let mut success = vec![false; n_episodes];
    let mut active: Vec<usize> = (0..n_episodes).collect();
    let mut usage = Vec::new();
    while !active.is_empty() {
        let eps: Vec<Episode<'_>> = active
            .iter()
            .map(|&i| Episode {
                state: &states[i],
                history: &histories[i],
            })
            .collect();
        let mut rs: Vec<&mut ChaCha8Rng> = rngs
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| active.binary_search(i).is_ok())
            .map(|(_, r)| r)
            .collect();
        let actions = actor(&eps, &mut rs, &mut usage)?;
        if actions.len() != active.len() {
            return Err(Error::contract("actor returned the wrong number of actions"));
        }
        let mut still = Vec::with_capacity(active.len());
        for (&i, a) in active.iter().zip(&actions) {
            let (next, done, ok) = env::step(&states[i], a, task)?;
            histories[i].push(task.observe(&next));
            states[i] = next;
            success[i] = ok;
            if !done {
                still.push(i);
            }
        }
        active = still;
    }
    let rate = success.iter().filter(|&&s| s).count() as f64 / n_episodes as f64;
    Ok(EvalOutcome {
        rate,
        successes: success,
        usage,
    })
}

/// Evaluate the policy on `task` with parameters `store`, conditioning on
/// `policy_task` (adapter key).
pub fn evaluate(
    policy: &Policy,
    store: &ParamStore,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
    stochastic: bool,
) -> Result<EvalOutcome> {
    let (w, center) = (policy.cfg.window, policy.cfg.center_slot());
    evaluate_with(task, n_episodes, seed, |eps, rngs, usage| {
        let wins: Vec<Vec<&Observation>> = eps
            .iter()
            .map(|e| {
                let obs: Vec<&Observation> = e.history.iter().collect();
                window_at(&obs, obs.len() - 1, w, center)
            })
            .collect();
        let batch = WindowBatch::from_windows(&wins)?;
        let mut g = Graph::inference();
        let f = policy.forward(&mut g, store, &batch, task.task_id)?;
        if usage.len() < policy.codebook.rows() {
            usage.resize(policy.codebook.rows(), 0);
        }
        for sel in &f.selections {
            for &i in &sel.indices {
                usage[i] += 1;
            }
        }
        Ok((0..eps.len())
            .map(|b| Action::from_normalized(&sample_action(&f.gmm.params(&g, b), &mut *rngs[b], !stochastic)))
            .collect())
    })
}

/// Adapter mode after resolving `Auto` for a paradigm.
pub fn per_task_adapters(model: &ModelConfig, kind: ParadigmKind) -> bool {
    match model.adapter_mode {
        AdapterMode::PerTask => true,
        AdapterMode::Shared => false,
        AdapterMode::Auto => kind == ParadigmKind::Packnet,
    }
}

/// One lifelong run: a policy, its paradigm state and the success record.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paradigm: ParadigmConfig,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub policy: Policy,
    pub replay: ReplayBuffer,
    pub packnet: Option<PackNetState>,
    pub record: SuccessRecord,
    pub usage: UsageLog,
    /// Tasks fully trained so far.
    pub completed: usize,
}

impl Learner {
    pub fn new(model: &ModelConfig, train: &TrainConfig, paradigm: &ParadigmConfig, tasks: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        if paradigm.kind == ParadigmKind::Multitask {
            return Err(Error::contract("multitask runs use train_multitask"));
        }
        model.validate(tasks.len())?;
        train.validate()?;
        paradigm.validate()?;
        if tasks.iter().enumerate().any(|(k, t)| t.task_id != k) {
            return Err(Error::contract("task ids must equal their position in the suite"));
        }
        let per_task = per_task_adapters(model, paradigm.kind);
        let policy = Policy::new(model, per_task, seed::derive(seed, &[TAG_MODEL]))?;
        let packnet = (paradigm.kind == ParadigmKind::Packnet).then(|| PackNetState::new(&policy));
        let capacity = if paradigm.kind == ParadigmKind::Er { paradigm.er_capacity } else { 0 };
        Ok(Learner {
            model: model.clone(),
            train: train.clone(),
            paradigm: paradigm.clone(),
            seed,
            record: SuccessRecord::new(tasks.len(), train.eval_points()),
            tasks,
            policy,
            replay: ReplayBuffer::new(capacity),
            packnet,
            usage: UsageLog::default(),
            completed: 0,
        })
    }

    /// Demonstrations of task `k` for this run's seed.
    pub fn demos(&self, k: usize) -> Result<Vec<Demonstration>> {
        env::collect_demos(&self.tasks[k], self.train.demos_per_task, seed::derive(self.seed, &[TAG_DEMOS, k as u64]))
    }

    /// Structural per-task hooks: language row, codebook rows, adapter
    /// factors. Also replayed when restoring from a checkpoint.
    pub fn register_task(&mut self, k: usize) -> Result<()> {
        self.policy.add_language(self.tasks[k].task_id, false)?;
        self.policy.begin_task(k)
    }

    /// Language rows of tasks absent from the training data get no gradient
    /// and would only decay, so they are frozen.
    fn freeze_unused_language(&mut self, k: usize) {
        let rows: Vec<(usize, _)> = self.policy.encoder.language.iter().map(|(&t, &id)| (t, id)).collect();
        for (t, id) in rows {
            let used = t == self.tasks[k].task_id || self.replay.contains_task(t);
            self.policy.store.set_frozen(id, !used);
        }
    }

    fn eval(&mut self, store: &ParamStore, j: usize, trained_upto: usize) -> Result<f64> {
        let out = evaluate(
            &self.policy,
            store,
            &self.tasks[j],
            self.train.eval_episodes,
            self.seed,
            self.train.stochastic_eval,
        )?;
        self.usage.add(trained_upto, j, &out.usage);
        Ok(out.rate)
    }

    /// Success on earlier task `j`, through the task-`j` mask under PackNet.
    fn eval_previous(&mut self, j: usize, k: usize) -> Result<f64> {
        let store = match &self.packnet {
            Some(p) => p.masked_store(&self.policy.store, j)?,
            None => self.policy.store.clone(),
        };
        self.eval(&store, j, k)
    }

    fn run_epoch(&mut self, opt: &mut AdamW, demos: &[Demonstration], k: usize, epoch: usize, tag: u64) -> Result<f64> {
        let mut rng = seed::rng(self.seed, &[tag, k as u64, epoch as u64]);
        let mut order = samples(demos);
        order.shuffle(&mut rng);
        let replay: Vec<(usize, usize)> = samples(self.replay.stored.iter().map(|e| &e.demo));
        let (w, center) = (self.model.window, self.model.center_slot());
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(self.train.batch_size) {
            let mut items: Vec<(&Demonstration, usize)> = chunk.iter().map(|&(i, t)| (&demos[i], t)).collect();
            if !replay.is_empty() {
                for _ in 0..chunk.len() {
                    let (i, t) = replay[rng.gen_range(0..replay.len())];
                    items.push((&self.replay.stored[i].demo, t));
                }
            }
            let lv = train_step(&mut self.policy, opt, &self.train, &items, (w, center), k, &mut rng)
                .map_err(|e| match e {
                    Error::Data(m) => Error::Data(format!("{m} on task {k}, epoch {epoch}")),
                    e => e,
                })?;
            total += lv;
            n += 1;
        }
        Ok(total / n.max(1) as f64)
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            ..Default::default()
        })
    }

    /// Train the next task in order and fill its row of the record.
    /// Returns the clamped diagonal curve.
    pub fn train_task(&mut self, k: usize) -> Result<Vec<f64>> {
        if k != self.completed || k >= self.tasks.len() {
            return Err(Error::contract(format!(
                "task {k} out of order; next expected task is {}",
                self.completed
            )));
        }
        let demos = self.demos(k)?;
        self.register_task(k)?;
        self.freeze_unused_language(k);
        if let Some(p) = &self.packnet {
            p.prepare(&mut self.policy, k)?;
        }

        let points = self.train.eval_points();
        let mut opt = self.optimizer();
        let mut curve: Vec<Option<f64>> = vec![None; points.len()];
        let mut best = (f64::NEG_INFINITY, 0usize);
        let mut snapshot = self.policy.store.clone();
        let mut declines = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut epoch = 0;
        for (pi, &target) in points.iter().enumerate() {
            while epoch < target {
                epoch += 1;
                self.run_epoch(&mut opt, &demos, k, epoch, TAG_TRAIN)?;
            }
            let store = self.policy.store.clone();
            let rate = self.eval(&store, k, k)?;
            curve[pi] = Some(rate);
            if self.train.eval_offdiag_all_points {
                for j in 0..k {
                    let r = self.eval_previous(j, k)?;
                    self.record.set(k, j, pi, r)?;
                }
            }
            if rate > best.0 {
                best = (rate, pi);
                snapshot = store;
            }
            declines = if rate < prev { declines + 1 } else { 0 };
            prev = rate;
            if self.train.early_stop && best.0 >= self.train.early_stop_threshold && declines >= 2 {
                break;
            }
        }
        let (c_best, e_star) = best;
        for (pi, v) in curve.iter_mut().enumerate() {
            if pi >= e_star {
                *v = Some(c_best);
            }
        }
        for (pi, v) in curve.iter().enumerate() {
            self.record.set(k, k, pi, v.expect("every point before e* was evaluated"))?;
        }

        // Continue from the best parameters.
        self.policy.store = snapshot;
        if self.train.eval_offdiag_all_points {
            for j in 0..k {
                let at_star = self.record.get(k, j, e_star);
                for pi in 0..points.len() {
                    match at_star {
                        Some(v) if self.record.get(k, j, pi).is_none() || pi > e_star => self.record.set(k, j, pi, v)?,
                        _ => {}
                    }
                }
            }
        } else {
            for j in 0..k {
                let r = self.eval_previous(j, k)?;
                self.record.set(k, j, e_star, r)?;
            }
        }

        if self.packnet.is_some() {
            self.pack(k, &demos)?;
        }
        if self.replay.capacity > 0 {
            let mut rng = seed::rng(self.seed, &[TAG_REPLAY, k as u64]);
            self.replay.update(k, &demos, &mut rng);
        }
        self.completed = k + 1;
        Ok(curve.into_iter().map(Option::unwrap).collect())
    }

    /// Prune free capacity to task `k`, then fine-tune only its elements.
    fn pack(&mut self, k: usize, demos: &[Demonstration]) -> Result<()> {
        let mut state = self.packnet.take().expect("packnet state");
        state.prune(&mut self.policy.store, self.paradigm.packnet_keep_ratio, k)?;
        if self.paradigm.packnet_finetune_epochs > 0 {
            let ids: Vec<_> = self.policy.store.ids().collect();
            let saved: Vec<bool> = ids.iter().map(|&id| self.policy.store.get(id).frozen).collect();
            for &id in &ids {
                if self.policy.roles.get(id) != ParamRole::Weight {
                    self.policy.store.set_frozen(id, true);
                }
            }
            state.finetune_masks(&mut self.policy.store, k)?;
            // Keep the best of the pruned state and each fine-tune epoch.
            let mut opt = self.optimizer();
            let score = |l: &Self| {
                evaluate(&l.policy, &l.policy.store, &l.tasks[k], l.train.eval_episodes, l.seed, l.train.stochastic_eval).map(|o| o.rate)
            };
            let mut best = (score(self)?, self.policy.store.clone());
            for e in 1..=self.paradigm.packnet_finetune_epochs {
                self.run_epoch(&mut opt, demos, k, e, TAG_TUNE)?;
                let r = score(self)?;
                if r > best.0 {
                    best = (r, self.policy.store.clone());
                }
            }
            self.policy.store = best.1;
            for (&id, &f) in ids.iter().zip(&saved) {
                self.policy.store.set_frozen(id, f);
            }
        }
        // Nothing moves until the next task sets its own masks.
        for name in state.owners.keys() {
            let id = self.policy.store.lookup(name).unwrap();
            let n = self.policy.store.value(id).numel();
            self.policy.store.get_mut(id).update_mask = Some(vec![false; n]);
        }
        self.packnet = Some(state);
        Ok(())
    }

    pub fn train_all(&mut self) -> Result<()> {
        while self.completed < self.tasks.len() {
            self.train_task(self.completed)?;
        }
        Ok(())
    }
}

/// Joint training on every task's demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskOutcome {
    /// `curves[e][j]`: success on task `j` at eval point `e`.
    pub curves: Vec<Vec<f64>>,
    pub best_mean: f64,
    pub best_point: usize,
}

pub fn train_multitask(
    model: &ModelConfig,
    train: &TrainConfig,
    tasks: &[TaskSpec],
    seed: u64,
) -> Result<(Policy, MultitaskOutcome)> {
    model.validate(tasks.len())?;
    train.validate()?;
    let mut policy = Policy::new(model, per_task_adapters(model, ParadigmKind::Multitask), seed::derive(seed, &[TAG_MODEL]))?;
    let mut all = Vec::new();
    for (k, t) in tasks.iter().enumerate() {
        policy.add_language(t.task_id, false)?;
        policy.begin_task(k)?;
        let demos = env::collect_demos(t, train.demos_per_task, seed::derive(seed, &[TAG_DEMOS, k as u64]))?;
        all.extend(demos);
    }
    for s in &policy.codebook.subsets {
        for id in [s.p, s.k, s.a] {
            policy.store.set_frozen(id, false);
        }
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..Default::default()
    });
    let order_all = samples(&all);
    let (w, center) = (model.window, model.center_slot());
    let mut curves = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0);
    let mut epoch = 0;
    for (pi, &target) in train.eval_points().iter().enumerate() {
        while epoch < target {
            epoch += 1;
            let mut rng = seed::rng(seed, &[TAG_TRAIN, u64::MAX, epoch as u64]);
            let mut order = order_all.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(train.batch_size) {
                let items: Vec<(&Demonstration, usize)> = chunk.iter().map(|&(i, t)| (&all[i], t)).collect();
                // Shared adapters: the task id only selects the key.
                train_step(&mut policy, &mut opt, train, &items, (w, center), 0, &mut rng)?;
            }
        }
        let row = tasks
            .iter()
            .map(|t| evaluate(&policy, &policy.store, t, train.eval_episodes, seed, train.stochastic_eval).map(|o| o.rate))
            .collect::<Result<Vec<f64>>>()?;
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        if mean > best.0 {
            best = (mean, pi);
        }
        curves.push(row);
    }
    Ok((
        policy,
        MultitaskOutcome {
            curves,
            best_mean: best.0,
            best_point: best.1,
        },
    ))
}
