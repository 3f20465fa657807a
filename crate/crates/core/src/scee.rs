//! Self-calibrated expert evolution.
//!
//! Over each telemetry window we accumulate, per evolvable expert, the sum of
//! gradient norms, the sum of squared norms, the elementwise gradient sum and
//! the number of routed samples. At an evolution event these become the
//! optimization contribution `I`, the optimization instability `V` and the
//! activation frequency `f`, which are compared against exponential moving
//! baselines to decide which experts to prune and which to split.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::moe::{resize_router, ExpertPool, Router, RouterResize};
use crate::seed::{derive_seed, gaussian_vec, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceeConfig {
    /// Steps between evolution events; also the telemetry window length.
    pub interval: usize,
    /// Fraction of a task's iterations during which evolution may act.
    pub window_fraction: f64,
    pub momentum: f64,
    pub gamma_prune: f64,
    pub gamma_expand: f64,
    /// Noise scale added to a split expert's parameters.
    pub spawn_sigma: f64,
    pub max_evolvable: usize,
    pub prune: bool,
    pub expand: bool,
}

impl Default for SceeConfig {
    fn default() -> Self {
        Self {
            interval: 50,
            window_fraction: 0.6,
            momentum: 0.9,
            gamma_prune: 0.05,
            gamma_expand: 0.95,
            spawn_sigma: 0.01,
            max_evolvable: 8,
            prune: true,
            expand: true,
        }
    }
}

impl SceeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("scee.interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.window_fraction) {
            return Err(Error::Config(
                "scee.window_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("scee.momentum must lie in (0, 1)".into()));
        }
        if !(self.gamma_prune > 0.0 && self.gamma_prune < 1.0) {
            return Err(Error::Config("scee.gamma_prune must lie in (0, 1)".into()));
        }
        if !(self.gamma_expand > 0.0) {
            return Err(Error::Config("scee.gamma_expand must be positive".into()));
        }
        if !(self.spawn_sigma >= 0.0) {
            return Err(Error::Config(
                "scee.spawn_sigma must be non-negative".into(),
            ));
        }
        if self.max_evolvable == 0 {
            return Err(Error::Config(
                "scee.max_evolvable must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether step `step` (1-based) of a task with `max_iters` steps is an
    /// event step, and whether it lies inside the evolution window.
    pub fn event_at(&self, step: usize, max_iters: usize) -> Option<bool> {
        if step == 0 || !step.is_multiple_of(self.interval) {
            return None;
        }
        Some(step as f64 <= self.window_fraction * max_iters as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAccumulator {
    pub sum_norm: f64,
    pub sum_norm_sq: f64,
    pub sum_grad: Vec<f64>,
    pub routed: usize,
}

impl ExpertAccumulator {
    fn new(len: usize) -> Self {
        Self {
            sum_norm: 0.0,
            sum_norm_sq: 0.0,
            sum_grad: vec![0.0; len],
            routed: 0,
        }
    }
}

/// One expert's observation at one optimization step.
#[derive(Debug, Clone)]
pub struct ExpertObservation {
    pub id: u64,
    /// Flattened `[∂W_down, ∂W_up]`; all zero when the expert was not routed.
    pub grad: Vec<f64>,
    pub routed: usize,
}

/// One layer's observation at one optimization step.
#[derive(Debug, Clone)]
pub struct LayerObservation {
    pub experts: Vec<ExpertObservation>,
    pub samples: usize,
}

/// Windowed per-expert accumulators for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTelemetry {
    layers: Vec<BTreeMap<u64, ExpertAccumulator>>,
    samples: Vec<usize>,
    steps: usize,
    window: usize,
}

/// Per-expert metrics of one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertMetrics {
    pub id: u64,
    /// Mean gradient norm over the window.
    pub contribution: f64,
    /// Mean squared norm minus squared norm of the mean gradient, clamped at 0.
    pub instability: f64,
    /// Fraction of window samples routed to the expert.
    pub frequency: f64,
}

impl ExpertTelemetry {
    pub fn new(layers: usize, window: usize) -> Self {
        Self {
            layers: vec![BTreeMap::new(); layers],
            samples: vec![0; layers],
            steps: 0,
            window,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn accumulator(&self, layer: usize, id: u64) -> Option<&ExpertAccumulator> {
        self.layers.get(layer)?.get(&id)
    }

    /// Advances every accumulator by one step.
    pub fn record_step(&mut self, observations: &[LayerObservation]) -> Result<()> {
        if observations.len() != self.layers.len() {
            return Err(Error::Consistency(format!(
                "telemetry has {} layers, step reported {}",
                self.layers.len(),
                observations.len()
            )));
        }
        if self.steps >= self.window {
            return Err(Error::Consistency(format!(
                "telemetry window of {} steps overrun without reset",
                self.window
            )));
        }
        // validate everything before touching the accumulators
        for (l, obs) in observations.iter().enumerate() {
            let acc = &self.layers[l];
            if self.steps > 0 {
                let same = acc.len() == obs.experts.len()
                    && obs.experts.iter().all(|e| {
                        acc.get(&e.id)
                            .is_some_and(|a| a.sum_grad.len() == e.grad.len())
                    });
                if !same {
                    return Err(Error::Consistency(format!(
                        "expert set of layer {l} changed inside a telemetry window"
                    )));
                }
            }
        }
        for (l, obs) in observations.iter().enumerate() {
            let acc = &mut self.layers[l];
            for e in &obs.experts {
                let a = acc
                    .entry(e.id)
                    .or_insert_with(|| ExpertAccumulator::new(e.grad.len()));
                let norm_sq: f64 = e.grad.iter().map(|g| g * g).sum();
                a.sum_norm += norm_sq.sqrt();
                a.sum_norm_sq += norm_sq;
                for (s, g) in a.sum_grad.iter_mut().zip(&e.grad) {
                    *s += g;
                }
                a.routed += e.routed;
            }
            self.samples[l] += obs.samples;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn compute_metrics(&self) -> Result<Vec<Vec<ExpertMetrics>>> {
        if self.steps == 0 {
            return Err(Error::Consistency(
                "metrics requested on an empty window".into(),
            ));
        }
        let w = self.steps as f64;
        Ok(self
            .layers
            .iter()
            .zip(&self.samples)
            .map(|(acc, &samples)| {
                acc.iter()
                    .map(|(&id, a)| {
                        let mean_sq: f64 = a.sum_grad.iter().map(|s| (s / w) * (s / w)).sum();
                        ExpertMetrics {
                            id,
                            contribution: a.sum_norm / w,
                            instability: (a.sum_norm_sq / w - mean_sq).max(0.0),
                            frequency: if samples == 0 {
                                0.0
                            } else {
                                a.routed as f64 / samples as f64
                            },
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.clear();
        }
        self.samples.iter_mut().for_each(|s| *s = 0);
        self.steps = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub contribution: f64,
    pub instability: f64,
}

/// Exponential moving baselines of contribution and instability, keyed by
/// expert id. An expert without an entry has not completed a window yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    momentum: f64,
    entries: BTreeMap<u64, Baseline>,
}

impl Baselines {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("momentum {momentum} outside (0, 1)")));
        }
        Ok(Self {
            momentum,
            entries: BTreeMap::new(),
        })
    }

    pub fn get(&self, id: u64) -> Option<Baseline> {
        self.entries.get(&id).copied()
    }

    pub fn forget(&mut self, id: u64) {
        self.entries.remove(&id);
    }

    /// `H ← αH + (1−α)·curr`; a first observation seeds `H = curr`.
    pub fn update(&mut self, id: u64, contribution: f64, instability: f64) {
        let a = self.momentum;
        self.entries
            .entry(id)
            .and_modify(|h| {
                h.contribution = ema(a, h.contribution, contribution);
                h.instability = ema(a, h.instability, instability);
            })
            .or_insert(Baseline {
                contribution,
                instability,
            });
    }
}

pub fn ema(momentum: f64, history: f64, current: f64) -> f64 {
    momentum * history + (1.0 - momentum) * current
}

/// `current / baseline`, with a zero baseline read as 0 for a zero current
/// value and +∞ otherwise.
pub fn guarded_ratio(current: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        current / baseline
    } else if current == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Rarely used and contributing less than its history.
pub fn prune_decision(frequency: f64, contribution: f64, baseline: f64, gamma_prune: f64) -> bool {
    frequency < gamma_prune && guarded_ratio(contribution, baseline) < 1.0 - gamma_prune
}

/// Frequently used and unusually unstable relative to its history.
pub fn expand_decision(frequency: f64, instability: f64, baseline: f64, gamma_expand: f64) -> bool {
    if frequency == 0.0 {
        return false;
    }
    frequency * guarded_ratio(instability, baseline) > gamma_expand
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionDecision {
    pub layer: usize,
    pub prune: Vec<u64>,
    /// `(source expert id, noise seed)`
    pub expand: Vec<(u64, u64)>,
}

impl EvolutionDecision {
    pub fn is_empty(&self) -> bool {
        self.prune.is_empty() && self.expand.is_empty()
    }
}

/// Flags of one expert at one event, for the telemetry trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub task: usize,
    pub step: usize,
    pub layer: usize,
    pub expert: u64,
    pub contribution: f64,
    pub instability: f64,
    pub frequency: f64,
    pub baseline_contribution: Option<f64>,
    pub baseline_instability: Option<f64>,
    pub in_window: bool,
    pub pruned: bool,
    pub expanded: bool,
}

/// Evaluates the prune and expand rules on every expert with a baseline.
///
/// Experts without a baseline are in their first window and are left
/// alone. An expert flagged for both is pruned. Expansions beyond the
/// evolvable-expert cap are dropped.
pub fn decide(
    metrics: &[Vec<ExpertMetrics>],
    baselines: &Baselines,
    config: &SceeConfig,
    spawn_seed: u64,
) -> Vec<EvolutionDecision> {
    metrics
        .iter()
        .enumerate()
        .map(|(layer, ms)| {
            let mut d = EvolutionDecision {
                layer,
                ..Default::default()
            };
            for m in ms {
                let Some(h) = baselines.get(m.id) else {
                    continue;
                };
                if config.prune
                    && prune_decision(
                        m.frequency,
                        m.contribution,
                        h.contribution,
                        config.gamma_prune,
                    )
                {
                    d.prune.push(m.id);
                } else if config.expand
                    && expand_decision(
                        m.frequency,
                        m.instability,
                        h.instability,
                        config.gamma_expand,
                    )
                {
                    let seed = derive_seed(spawn_seed, "spawn", ((layer as u64) << 32) | m.id);
                    d.expand.push((m.id, seed));
                }
            }
            let room = (config.max_evolvable + d.prune.len()).saturating_sub(ms.len());
            if d.expand.len() > room {
                log::info!(
                    "layer {layer}: expansion capped at {} evolvable experts",
                    config.max_evolvable
                );
                d.expand.truncate(room);
            }
            d
        })
        .collect()
}

/// Copies expert `source` with i.i.d. `N(0, sigma²)` noise on every
/// parameter and appends the copy to the layer.
pub fn spawn_expert<R: Rng + ?Sized>(
    pool: &mut ExpertPool,
    layer: usize,
    source: u64,
    sigma: f64,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<u64> {
    let pos = pool
        .position(layer, source)
        .ok_or_else(|| Error::Lookup(format!("expert {source} not in layer {layer}")))?;
    let src = pool.layer(layer)[pos].clone();
    let perturb = |t: &Tensor, rng: &mut R| -> Result<Tensor> {
        let noise = gaussian_vec(rng, t.len(), sigma);
        let data = t.data().iter().zip(noise).map(|(v, n)| v + n).collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    let down = perturb(store.value(src.down)?, rng)?;
    let up = perturb(store.value(src.up)?, rng)?;
    pool.push_expert(layer, src.origin_task, down, up, store)
}

/// What an evolution event actually changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvolutionOutcome {
    pub pruned: Vec<(usize, u64)>,
    /// `(layer, source id, new id)`
    pub spawned: Vec<(usize, u64, u64)>,
    pub skipped_prunes: Vec<(usize, u64)>,
}

/// Applies prune and expand decisions to the pool and the current routers
/// (one per layer), keeping optimizer state aligned.
pub fn apply_evolution(
    decisions: &[EvolutionDecision],
    pool: &mut ExpertPool,
    routers: &[Router],
    store: &mut ParamStore,
    opt: &mut AdamWState,
    sigma: f64,
) -> Result<EvolutionOutcome> {
    let mut outcome = EvolutionOutcome::default();
    for d in decisions {
        let ids = d.prune.iter().chain(d.expand.iter().map(|(s, _)| s));
        for &id in ids {
            let pos = pool
                .position(d.layer, id)
                .ok_or_else(|| Error::Lookup(format!("expert {id} not in layer {}", d.layer)))?;
            if pool.layer(d.layer)[pos].frozen {
                return Err(Error::Frozen(format!(
                    "evolution decision names frozen expert {id} in layer {}",
                    d.layer
                )));
            }
        }
        if d.prune.iter().any(|p| d.expand.iter().any(|(s, _)| s == p)) {
            return Err(Error::Consistency(format!(
                "layer {}: an expert is both pruned and expanded",
                d.layer
            )));
        }
    }
    for d in decisions {
        let router = routers.get(d.layer).ok_or(Error::Index {
            index: d.layer,
            len: routers.len(),
        })?;
        let mut evolvable = pool.evolvable(d.layer).count();
        for &id in &d.prune {
            if evolvable <= 1 {
                log::warn!(
                    "layer {}: not pruning expert {id}, it is the last evolvable expert",
                    d.layer
                );
                outcome.skipped_prunes.push((d.layer, id));
                continue;
            }
            let pos = pool.position(d.layer, id).expect("checked above");
            resize_router(router, &RouterResize::Remove(vec![pos]), store, opt)?;
            pool.remove_expert(d.layer, id, store, opt)?;
            evolvable -= 1;
            outcome.pruned.push((d.layer, id));
        }
        for &(source, seed) in &d.expand {
            let mut rng = rng_for(seed, "spawn-noise", 0);
            let new = spawn_expert(pool, d.layer, source, sigma, &mut rng, store)?;
            resize_router(router, &RouterResize::Add(1), store, opt)?;
            outcome.spawned.push((d.layer, source, new));
        }
        let width = router.width(store)?;
        if width != pool.len(d.layer) {
            return Err(Error::Consistency(format!(
                "layer {}: router width {width} differs from {} experts after evolution",
                d.layer,
                pool.len(d.layer)
            )));
        }
    }
    Ok(outcome)
}

/// Telemetry, baselines and configuration for one task's training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scee {
    pub config: SceeConfig,
    pub telemetry: ExpertTelemetry,
    pub baselines: Baselines,
}

impl Scee {
    pub fn new(config: SceeConfig, layers: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            telemetry: ExpertTelemetry::new(layers, config.interval),
            baselines: Baselines::new(config.momentum)?,
            config,
        })
    }

    /// One event: metrics, then evolution if inside the window, then
    /// baseline update, then accumulator reset.
    #[allow(clippy::too_many_arguments)]
    pub fn run_event(
        &mut self,
        task: usize,
        step: usize,
        in_window: bool,
        spawn_seed: u64,
        pool: &mut ExpertPool,
        routers: &[Router],
        store: &mut ParamStore,
        opt: &mut AdamWState,
    ) -> Result<(Vec<EventRecord>, EvolutionOutcome)> {
        let metrics = self.telemetry.compute_metrics()?;
        let (decisions, outcome) = if in_window {
            let decisions = decide(&metrics, &self.baselines, &self.config, spawn_seed);
            let outcome = apply_evolution(
                &decisions,
                pool,
                routers,
                store,
                opt,
                self.config.spawn_sigma,
            )?;
            (decisions, outcome)
        } else {
            (Vec::new(), EvolutionOutcome::default())
        };
        let mut records = Vec::new();
        for (layer, ms) in metrics.iter().enumerate() {
            for m in ms {
                let h = self.baselines.get(m.id);
                records.push(EventRecord {
                    task,
                    step,
                    layer,
                    expert: m.id,
                    contribution: m.contribution,
                    instability: m.instability,
                    frequency: m.frequency,
                    baseline_contribution: h.map(|h| h.contribution),
                    baseline_instability: h.map(|h| h.instability),
                    in_window,
                    pruned: outcome.pruned.contains(&(layer, m.id)),
                    expanded: outcome
                        .spawned
                        .iter()
                        .any(|&(l, s, _)| l == layer && s == m.id),
                });
            }
        }
        debug_assert!(decisions.iter().all(|d| d.layer < metrics.len()));
        for (layer, id) in &outcome.pruned {
            let _ = layer;
            self.baselines.forget(*id);
        }
        for ms in &metrics {
            for m in ms {
                if !outcome.pruned.iter().any(|&(_, id)| id == m.id) {
                    self.baselines.update(m.id, m.contribution, m.instability);
                }
            }
        }
        self.telemetry.reset();
        Ok((records, outcome))
    }
}
