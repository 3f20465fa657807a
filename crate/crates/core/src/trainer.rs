//! Freeze-and-evolve training: capture prototypes, freeze history, add a
//! router and candidate experts, optimize, and evolve the new experts.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Method, ModelState};
use crate::moe::{load_balance_tape, resize_router, GatingRule, Router, RouterResize};
use crate::pges::{build_prototypes, kmeans, threshold_from_sets, TaskPrototypeSet};
use crate::scee::{EventRecord, ExpertObservation, LayerObservation, Scee, SceeConfig};
use crate::seed::{derive_seed, rng_for};
use crate::taskgen::TaskData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set from the experiment's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub method: Method,
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub top_p: f64,
    /// Fixed top-k routing instead of top-p.
    pub top_k: Option<usize>,
    pub beta_new: f64,
    pub beta_frozen: f64,
    pub lambda_lb: f64,
    pub experts_per_task: usize,
    pub lora_rank: usize,
    pub expert_init_std: f64,
    pub router_init_std: f64,
    pub temperature: f64,
    pub shared_router: bool,
    /// Adds a never-routed expert per layer at task start.
    pub inject_decoy: bool,
    pub scee: SceeConfig,
    pub prototype_clusters: usize,
    /// Percent units.
    pub prototype_percentile: f64,
    pub prototype_cap: usize,
    pub kmeans_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Dimoe,
            batch_size: 128,
            max_iters: 500,
            lr: 1e-3,
            weight_decay: 0.0,
            label_smoothing: 0.2,
            top_p: 0.6,
            top_k: None,
            beta_new: 0.6,
            beta_frozen: 1.0,
            lambda_lb: 0.01,
            experts_per_task: 2,
            lora_rank: 4,
            expert_init_std: 0.02,
            router_init_std: 0.02,
            temperature: 10.0,
            shared_router: false,
            inject_decoy: false,
            scee: SceeConfig::default(),
            prototype_clusters: 3,
            prototype_percentile: 0.5,
            prototype_cap: 2000,
            kmeans_max_iter: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.max_iters == 0 {
            return bad("train.max_iters must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("train.label_smoothing must lie in [0, 1)");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("train.top_p must lie in (0, 1]");
        }
        if self.top_k == Some(0) {
            return bad("train.top_k must be at least 1");
        }
        if !(self.beta_new > 0.0 && self.beta_new < 1.0) {
            return bad("train.beta_new must lie in (0, 1)");
        }
        if !(self.beta_frozen >= 0.0) {
            return bad("train.beta_frozen must be non-negative");
        }
        if !(self.lambda_lb >= 0.0) {
            return bad("train.lambda_lb must be non-negative");
        }
        if self.experts_per_task == 0 {
            return bad("train.experts_per_task must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("train.temperature must be positive");
        }
        if self.prototype_clusters == 0 {
            return bad("train.prototype_clusters must be at least 1");
        }
        if !(0.0..=100.0).contains(&self.prototype_percentile) {
            return bad("train.prototype_percentile must lie in [0, 100]");
        }
        if self.prototype_cap < 2 {
            return bad("train.prototype_cap must be at least 2");
        }
        self.scee.validate()
    }

    pub fn gating(&self) -> GatingRule {
        match self.top_k {
            Some(k) => GatingRule::TopK { k },
            None => GatingRule::TopP { p0: self.top_p },
        }
    }
}

/// Frozen features of (at most `cap`) training inputs, clustered into
/// Gaussian prototypes.
pub fn capture_prototypes(
    state: &ModelState,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<TaskPrototypeSet> {
    let task = data.spec.task;
    if data.train.is_empty() {
        return Err(Error::Shape(format!("task {task} has no training data")));
    }
    let n = data.train.len();
    let picked: Vec<usize> = if n > config.prototype_cap {
        let mut rng = rng_for(config.seed, "prototype-subsample", task as u64);
        let mut idx = sample(&mut rng, n, config.prototype_cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let features = picked
        .iter()
        .map(|&i| Ok(state.encoder.encode(&data.train[i].x)?.feature))
        .collect::<Result<Vec<_>>>()?;
    let km = kmeans(
        &features,
        config.prototype_clusters,
        derive_seed(config.seed, "kmeans", task as u64),
        config.kmeans_max_iter,
    )?;
    build_prototypes(
        task,
        &features,
        &km.assignments,
        config.prototype_percentile,
    )
}

/// Registers a task's prototypes and recalibrates the threshold over every
/// task seen so far.
pub fn register_prototypes(state: &mut ModelState, set: TaskPrototypeSet) {
    state.prototypes.retain(|p| p.task != set.task);
    state.prototypes.push(set);
    state.prototypes.sort_by_key(|p| p.task);
    state.threshold = threshold_from_sets(&state.prototypes);
}

/// Freezes history and instantiates the task's router and candidate
/// experts.
pub fn begin_task(state: &mut ModelState, task: usize, config: &TrainConfig) -> Result<()> {
    if let Some(cur) = state.current {
        return Err(Error::TaskOrder(format!("task {cur} is still in progress")));
    }
    if state.completed.contains(&task) {
        return Err(Error::TaskOrder(format!("task {task} was already trained")));
    }
    if state.embeddings.task(task).is_err() {
        return Err(Error::Lookup(format!(
            "task {task} has no class embeddings"
        )));
    }
    let layers = state.pool.num_layers();
    let dim = state.pool.dim();
    let mut rng = rng_for(config.seed, "task-init", task as u64);

    if state.method == Method::SharedAdapter {
        if !state.routers.contains(task) {
            for l in 0..layers {
                state.pool.add_expert(
                    l,
                    task,
                    config.expert_init_std,
                    &mut state.store,
                    &mut rng,
                )?;
            }
            let routers = (0..layers)
                .map(|l| {
                    Router::new(
                        task,
                        l,
                        dim,
                        1,
                        config.router_init_std,
                        &mut state.store,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            state.routers.insert(task, routers);
        }
        state.current = Some(task);
        return Ok(());
    }

    state.pool.freeze_all(&mut state.store)?;
    let added = config.experts_per_task + usize::from(config.inject_decoy);
    for l in 0..layers {
        for _ in 0..added {
            state
                .pool
                .add_expert(l, task, config.expert_init_std, &mut state.store, &mut rng)?;
        }
    }
    if state.routers.is_shared() && !state.completed.is_empty() {
        let routers = state.routers.for_task(task)?.to_vec();
        for r in &routers {
            resize_router(
                r,
                &RouterResize::Add(added),
                &mut state.store,
                &mut state.optimizer,
            )?;
        }
    } else {
        let routers = (0..layers)
            .map(|l| {
                Router::new(
                    task,
                    l,
                    dim,
                    state.pool.len(l),
                    config.router_init_std,
                    &mut state.store,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        state.routers.insert(task, routers);
    }
    if config.inject_decoy {
        // the last expert of each layer: a logit bias low enough that top-p
        // never reaches it
        for r in state.routers.for_task(task)?.to_vec() {
            let mut bias = state.store.value(r.bias)?.clone();
            let n = bias.len();
            bias.data_mut()[n - 1] = -30.0;
            state.store.replace(r.bias, bias)?;
        }
    }
    state.current = Some(task);
    state.check_consistency()
}

/// Parameters that may change while training `task`: its router (or the
/// shared router) and the evolvable experts.
pub fn trainable_audit(state: &ModelState, task: usize) -> Result<()> {
    let mut expected = BTreeSet::new();
    for r in state.routers.for_task(task)? {
        expected.insert(r.weight);
        expected.insert(r.bias);
    }
    for (_, e) in state.pool.iter().filter(|(_, e)| !e.frozen) {
        expected.insert(e.down);
        expected.insert(e.up);
    }
    let actual: BTreeSet<_> = state
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    if actual != expected {
        return Err(Error::Consistency(format!(
            "trainable parameters of task {task} are {actual:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

/// Expert counts per layer over one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCounts {
    pub start: Vec<usize>,
    pub peak: Vec<usize>,
    pub end: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub ce: f64,
    pub balance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task: usize,
    pub losses: Vec<StepLoss>,
    pub events: Vec<EventRecord>,
    pub counts: ExpertCounts,
    pub expansions: usize,
    pub prunes: usize,
    /// Evolution events that pruned at least one expert, by event number.
    pub prune_events: Vec<usize>,
}

struct BatchLoss {
    loss: NodeId,
    ce: f64,
    balance: f64,
    routing: Vec<crate::moe::LayerRouting>,
}

fn batch_loss(
    state: &ModelState,
    tape: &mut Tape,
    data: &TaskData,
    batch: &[usize],
    config: &TrainConfig,
    forced: Option<&[Vec<Vec<usize>>]>,
) -> Result<BatchLoss> {
    let task = data.spec.task;
    let xs: Vec<&[f64]> = batch.iter().map(|&i| data.train[i].x.as_slice()).collect();
    let targets = batch
        .iter()
        .map(|&i| state.class_index(task, data.train[i].label))
        .collect::<Result<Vec<_>>>()?;
    let (features, routing) = state.forward_tape(tape, &xs, task, forced)?;
    let logits = state.logits_tape(tape, features, task)?;
    let ce = tape.smoothed_ce(logits, &targets, config.label_smoothing)?;
    let mut total = ce;
    let mut balance = 0.0;
    if config.lambda_lb > 0.0 {
        for (l, r) in routing.iter().enumerate() {
            let width = r.gates.first().map_or(0, |g| g.probs.len());
            let betas: Vec<f64> = state.pool.layer(l)[..width]
                .iter()
                .map(|e| {
                    if e.frozen {
                        config.beta_frozen
                    } else {
                        config.beta_new
                    }
                })
                .collect();
            let lb = load_balance_tape(tape, r, &betas)?;
            balance += tape.value(lb).data()[0];
            let weighted = tape.scale(lb, config.lambda_lb);
            total = tape.add(total, weighted)?;
        }
    }
    let ce_value = tape.value(ce).data()[0];
    Ok(BatchLoss {
        loss: total,
        ce: ce_value,
        balance,
        routing,
    })
}

/// Training loss of a fixed batch with the routing selections pinned, for
/// gradient checking.
pub fn pinned_loss(
    state: &ModelState,
    data: &TaskData,
    batch: &[usize],
    config: &TrainConfig,
    forced: &[Vec<Vec<usize>>],
) -> Result<(Tape, NodeId)> {
    let mut tape = Tape::new();
    let out = batch_loss(state, &mut tape, data, batch, config, Some(forced))?;
    Ok((tape, out.loss))
}

/// Selected expert sets of every layer and sample for a batch.
pub fn batch_selections(
    state: &ModelState,
    data: &TaskData,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut tape = Tape::new();
    let out = batch_loss(state, &mut tape, data, batch, config, None)?;
    Ok(out
        .routing
        .iter()
        .map(|r| r.gates.iter().map(|g| g.selected.clone()).collect())
        .collect())
}

/// The optimization loop with evolution events.
pub fn train_task(
    state: &mut ModelState,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<TaskTrace> {
    let task = data.spec.task;
    if state.current != Some(task) {
        return Err(Error::TaskOrder(format!(
            "train_task({task}) before begin_task"
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Shape(format!("task {task} has no training data")));
    }
    trainable_audit(state, task)?;
    let layers = state.pool.num_layers();
    let evolve = state.method == Method::Dimoe;
    let mut scee = Scee::new(config.scee, layers)?;
    let mut rng = rng_for(config.seed, "batches", task as u64);
    let start = state.pool.counts();
    let mut peak = start.clone();
    let mut trace = TaskTrace {
        task,
        losses: Vec::with_capacity(config.max_iters),
        events: Vec::new(),
        counts: ExpertCounts {
            start: start.clone(),
            peak: start.clone(),
            end: start,
        },
        expansions: 0,
        prunes: 0,
        prune_events: Vec::new(),
    };
    let mut event_no = 0;

    for step in 1..=config.max_iters {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..data.train.len()))
            .collect();
        let mut tape = Tape::new();
        let out = batch_loss(state, &mut tape, data, &batch, config, None)?;
        let loss = tape.value(out.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                task,
                step,
                detail: format!("ce={} balance={}", out.ce, out.balance),
            });
        }
        tape.backward(out.loss, &mut state.store)?;

        if evolve {
            let observations = (0..layers)
                .map(|l| {
                    let usage = out.routing[l].usage();
                    let experts = state
                        .pool
                        .evolvable(l)
                        .map(|(pos, e)| {
                            Ok(ExpertObservation {
                                id: e.id,
                                grad: e.flat_grad(&state.store)?,
                                routed: usage.routed.get(pos).copied().unwrap_or(0),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LayerObservation {
                        experts,
                        samples: usage.total,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scee.telemetry.record_step(&observations)?;
        }
        state.optimizer.step(&mut state.store)?;
        trace.losses.push(StepLoss {
            step,
            ce: out.ce,
            balance: out.balance,
        });

        if !evolve {
            continue;
        }
        if let Some(in_window) = config.scee.event_at(step, config.max_iters) {
            event_no += 1;
            let routers = state.routers.for_task(task)?.to_vec();
            let spawn_seed = derive_seed(config.seed, "spawn", (task as u64) << 32 | step as u64);
            let (records, outcome) = scee.run_event(
                task,
                step,
                in_window,
                spawn_seed,
                &mut state.pool,
                &routers,
                &mut state.store,
                &mut state.optimizer,
            )?;
            if !outcome.pruned.is_empty() {
                trace.prune_events.push(event_no);
            }
            trace.expansions += outcome.spawned.len();
            trace.prunes += outcome.pruned.len();
            for (l, p) in peak.iter_mut().enumerate() {
                *p = (*p).max(state.pool.len(l));
            }
            trace.events.extend(records);
            state.check_consistency()?;
        }
    }
    trace.counts.peak = peak;
    trace.counts.end = state.pool.counts();
    Ok(trace)
}

/// Freezes the task's router and surviving experts.
pub fn end_task(state: &mut ModelState) -> Result<()> {
    let task = state
        .current
        .ok_or_else(|| Error::TaskOrder("end_task without a task in progress".into()))?;
    if state.method == Method::Dimoe {
        state.pool.freeze_all(&mut state.store)?;
        if !state.routers.is_shared() {
            for r in state.routers.for_task_mut(task)? {
                r.freeze(&mut state.store)?;
            }
        }
        let frozen: Vec<_> = state
            .store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(id, _)| id)
            .collect();
        for id in frozen {
            state.optimizer.forget(id);
        }
    }
    state.completed.push(task);
    state.current = None;
    state.check_consistency()
}

/// Prototypes, then begin, train and end one task.
pub fn run_task(
    state: &mut ModelState,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<TaskTrace> {
    if state.method == Method::Dimoe {
        let set = capture_prototypes(state, data, config)?;
        register_prototypes(state, set);
    }
    begin_task(state, data.spec.task, config)?;
    let trace = train_task(state, data, config)?;
    end_task(state)?;
    Ok(trace)
}

/// Fixed batch of training indices, for diagnostics.
pub fn fixed_batch(data: &TaskData, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "fixed-batch", data.spec.task as u64);
    (0..size)
        .map(|_| rng.random_range(0..data.train.len()))
        .collect()
}
