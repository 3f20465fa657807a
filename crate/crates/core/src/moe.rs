//! Mixture-of-experts adapter layer.
//!
//! Each adapter tap holds an ordered pool of low-rank experts
//! `E(x) = x · W_down · W_up`. A per-task router scores the tap activation,
//! Top-p gating keeps the smallest high-probability prefix of experts, and
//! the layer output is the residual mixture `y = x + Σ_i w_i E_i(x)`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, AdamWState, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::seed::gaussian_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub id: u64,
    /// `D × r`
    pub down: ParamId,
    /// `r × D`
    pub up: ParamId,
    pub frozen: bool,
    pub origin_task: usize,
}

impl LoraExpert {
    pub fn forward(&self, x: &[f64], store: &ParamStore) -> Result<Vec<f64>> {
        expert_forward(x, store.value(self.down)?, store.value(self.up)?)
    }

    /// Flattened `[W_down, W_up]`.
    pub fn flat_params(&self, store: &ParamStore) -> Result<Vec<f64>> {
        let mut v = store.value(self.down)?.data().to_vec();
        v.extend_from_slice(store.value(self.up)?.data());
        Ok(v)
    }

    /// Flattened gradient `[∂W_down, ∂W_up]`.
    pub fn flat_grad(&self, store: &ParamStore) -> Result<Vec<f64>> {
        let mut v = store.get(self.down)?.grad.data().to_vec();
        v.extend_from_slice(store.get(self.up)?.grad.data());
        Ok(v)
    }

    pub fn param_count(&self, store: &ParamStore) -> Result<usize> {
        Ok(store.value(self.down)?.len() + store.value(self.up)?.len())
    }
}

/// `x · W_down · W_up`, no residual.
pub fn expert_forward(x: &[f64], down: &Tensor, up: &Tensor) -> Result<Vec<f64>> {
    let (d, r) = down.dims2()?;
    let (r2, d2) = up.dims2()?;
    if x.len() != d || r != r2 {
        return Err(Error::Shape(format!(
            "expert {d}x{r}·{r2}x{d2} applied to a {}-vector",
            x.len()
        )));
    }
    let hidden = Tensor::row(x.to_vec()).matmul(down)?;
    Ok(hidden.matmul(up)?.into_data())
}

/// Per-layer ordered expert lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertPool {
    layers: Vec<Vec<LoraExpert>>,
    next_id: u64,
    dim: usize,
    rank: usize,
}

impl ExpertPool {
    pub fn new(layers: usize, dim: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::Config(format!(
                "LoRA rank must satisfy 0 < r < D, got r={rank}, D={dim}"
            )));
        }
        Ok(Self {
            layers: vec![Vec::new(); layers],
            next_id: 0,
            dim,
            rank,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layer(&self, l: usize) -> &[LoraExpert] {
        &self.layers[l]
    }

    pub fn len(&self, l: usize) -> usize {
        self.layers[l].len()
    }

    pub fn is_empty(&self, l: usize) -> bool {
        self.layers[l].is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn position(&self, l: usize, id: u64) -> Option<usize> {
        self.layers[l].iter().position(|e| e.id == id)
    }

    pub fn evolvable(&self, l: usize) -> impl Iterator<Item = (usize, &LoraExpert)> {
        self.layers[l].iter().enumerate().filter(|(_, e)| !e.frozen)
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Appends a fresh expert: `W_down ~ N(0, init_std²)`, `W_up = 0`, so the
    /// expert starts as an exact no-op.
    pub fn add_expert<R: Rng + ?Sized>(
        &mut self,
        l: usize,
        task: usize,
        init_std: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<u64> {
        let down = Tensor::matrix(
            self.dim,
            self.rank,
            gaussian_vec(rng, self.dim * self.rank, init_std),
        )?;
        let up = Tensor::zeros(&[self.rank, self.dim]);
        self.push_expert(l, task, down, up, store)
    }

    pub fn push_expert(
        &mut self,
        l: usize,
        task: usize,
        down: Tensor,
        up: Tensor,
        store: &mut ParamStore,
    ) -> Result<u64> {
        if down.shape() != [self.dim, self.rank] || up.shape() != [self.rank, self.dim] {
            return Err(Error::Shape(format!(
                "expert factors {:?}/{:?} do not match D={}, r={}",
                down.shape(),
                up.shape(),
                self.dim,
                self.rank
            )));
        }
        let id = self.fresh_id();
        let down = store.insert(format!("expert.l{l}.{id}.down"), down);
        let up = store.insert(format!("expert.l{l}.{id}.up"), up);
        self.layers[l].push(LoraExpert {
            id,
            down,
            up,
            frozen: false,
            origin_task: task,
        });
        Ok(id)
    }

    /// Removes an evolvable expert and its parameters. Returns its old
    /// position.
    pub fn remove_expert(
        &mut self,
        l: usize,
        id: u64,
        store: &mut ParamStore,
        opt: &mut AdamWState,
    ) -> Result<usize> {
        let pos = self
            .position(l, id)
            .ok_or_else(|| Error::Lookup(format!("expert {id} not in layer {l}")))?;
        if self.layers[l][pos].frozen {
            return Err(Error::Frozen(format!("expert {id} in layer {l}")));
        }
        let e = self.layers[l].remove(pos);
        for p in [e.down, e.up] {
            store.remove(p)?;
            opt.forget(p);
        }
        Ok(pos)
    }

    pub fn freeze_all(&mut self, store: &mut ParamStore) -> Result<()> {
        for e in self.layers.iter_mut().flatten() {
            e.frozen = true;
            store.set_frozen(e.down, true)?;
            store.set_frozen(e.up, true)?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LoraExpert)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, es)| es.iter().map(move |e| (l, e)))
    }
}

/// Single-layer routing network `logits = x · W + b` over a prefix of the
/// layer's pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub task: usize,
    pub layer: usize,
    /// `D × N`
    pub weight: ParamId,
    /// `1 × N`
    pub bias: ParamId,
    pub frozen: bool,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(
        task: usize,
        layer: usize,
        dim: usize,
        width: usize,
        init_std: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("router.t{task}.l{layer}.weight"),
            Tensor::matrix(dim, width, gaussian_vec(rng, dim * width, init_std))?,
        );
        let bias = store.insert(
            format!("router.t{task}.l{layer}.bias"),
            Tensor::zeros(&[1, width]),
        );
        Ok(Self {
            task,
            layer,
            weight,
            bias,
            frozen: false,
        })
    }

    pub fn width(&self, store: &ParamStore) -> Result<usize> {
        Ok(store.value(self.weight)?.cols())
    }

    pub fn logits(&self, x: &[f64], store: &ParamStore) -> Result<Vec<f64>> {
        let w = store.value(self.weight)?;
        let b = store.value(self.bias)?;
        if w.rows() != x.len() {
            return Err(Error::Shape(format!(
                "router expects {} inputs, got {}",
                w.rows(),
                x.len()
            )));
        }
        let mut out = Tensor::row(x.to_vec()).matmul(w)?.into_data();
        for (o, bi) in out.iter_mut().zip(b.data()) {
            *o += bi;
        }
        Ok(out)
    }

    pub fn freeze(&mut self, store: &mut ParamStore) -> Result<()> {
        self.frozen = true;
        store.set_frozen(self.weight, true)?;
        store.set_frozen(self.bias, true)
    }

    pub fn hashes(&self, store: &ParamStore) -> Result<[String; 2]> {
        Ok([store.hash(self.weight)?, store.hash(self.bias)?])
    }
}

/// Structural change applied to a router's outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum RouterResize {
    Add(usize),
    /// Output positions to delete.
    Remove(Vec<usize>),
}

/// Adds zero-initialized outputs or deletes outputs. Optimizer moments of
/// surviving outputs are kept; new outputs start from zero moments.
pub fn resize_router(
    router: &Router,
    change: &RouterResize,
    store: &mut ParamStore,
    opt: &mut AdamWState,
) -> Result<()> {
    if router.frozen {
        return Err(Error::Frozen(format!(
            "router of task {} layer {}",
            router.task, router.layer
        )));
    }
    let width = router.width(store)?;
    let mapping: Vec<Option<usize>> = match change {
        RouterResize::Add(n) => (0..width).map(Some).chain((0..*n).map(|_| None)).collect(),
        RouterResize::Remove(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
                return Err(Error::Index {
                    index: bad,
                    len: width,
                });
            }
            let keep: Vec<Option<usize>> =
                (0..width).filter(|i| !idx.contains(i)).map(Some).collect();
            if keep.is_empty() {
                return Err(Error::Consistency(
                    "cannot remove every router output".into(),
                ));
            }
            keep
        }
    };
    for id in [router.weight, router.bias] {
        let t = store.value(id)?;
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(rows * mapping.len());
        for r in 0..rows {
            for m in &mapping {
                data.push(m.map_or(0.0, |c| t.data()[r * cols + c]));
            }
        }
        store.replace(id, Tensor::matrix(rows, mapping.len(), data)?)?;
        opt.remap_columns(id, &mapping)?;
    }
    Ok(())
}

/// Expert selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatingRule {
    /// Smallest descending prefix whose cumulative probability exceeds `p0`.
    TopP { p0: f64 },
    /// Fixed `k` highest-probability experts.
    TopK { k: usize },
}

impl GatingRule {
    pub fn select(&self, probs: &[f64]) -> Result<GateResult> {
        match *self {
            GatingRule::TopP { p0 } => top_p_select(probs, p0),
            GatingRule::TopK { k } => top_k_select(probs, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    /// Selected expert indices in descending-probability order.
    pub selected: Vec<usize>,
    /// Renormalized weights over all experts (zero off the selected set).
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
}

impl GateResult {
    pub fn contains(&self, i: usize) -> bool {
        self.selected.contains(&i)
    }
}

/// Indices sorted by descending probability, ties by lower index.
fn descending_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

fn renormalized(p: &[f64], selected: Vec<usize>) -> GateResult {
    let mass: f64 = selected.iter().map(|&i| p[i]).sum();
    let mut weights = vec![0.0; p.len()];
    for &i in &selected {
        weights[i] = p[i] / mass;
    }
    GateResult {
        selected,
        weights,
        probs: p.to_vec(),
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape("gating needs at least one expert".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical("invalid routing probabilities".into()));
    }
    Ok(())
}

/// Top-p probability-accumulation gating.
///
/// Takes the smallest descending prefix whose cumulative probability is
/// strictly greater than `p0` (all experts if rounding keeps the total at
/// or below `p0`) and renormalizes the kept probabilities.
pub fn top_p_select(p: &[f64], p0: f64) -> Result<GateResult> {
    if !(p0 > 0.0 && p0 <= 1.0) {
        return Err(Error::Config(format!(
            "top-p threshold {p0} outside (0, 1]"
        )));
    }
    check_probs(p)?;
    let order = descending_order(p);
    let mut cum = 0.0;
    let mut selected = Vec::new();
    for i in order {
        selected.push(i);
        cum += p[i];
        if cum > p0 {
            break;
        }
    }
    Ok(renormalized(p, selected))
}

pub fn top_k_select(p: &[f64], k: usize) -> Result<GateResult> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    check_probs(p)?;
    let selected = descending_order(p).into_iter().take(k).collect();
    Ok(renormalized(p, selected))
}

/// Routes `x` over `experts` (which must match the router's width) and
/// returns `y = x + Σ w_i E_i(x)` with the gate used.
pub fn moe_forward(
    x: &[f64],
    experts: &[LoraExpert],
    router: &Router,
    store: &ParamStore,
    rule: GatingRule,
) -> Result<(Vec<f64>, GateResult)> {
    let width = router.width(store)?;
    if width != experts.len() {
        return Err(Error::Consistency(format!(
            "router of task {} layer {} has width {width} but {} experts were supplied",
            router.task,
            router.layer,
            experts.len()
        )));
    }
    let probs = softmax(&router.logits(x, store)?)?;
    let gate = rule.select(&probs)?;
    let mut y = x.to_vec();
    for &i in &gate.selected {
        let e = experts[i].forward(x, store)?;
        for (yi, ei) in y.iter_mut().zip(e) {
            *yi += gate.weights[i] * ei;
        }
    }
    Ok((y, gate))
}

/// Routing counts and probability mass per expert over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub routed: Vec<usize>,
    pub prob_sum: Vec<f64>,
    pub total: usize,
}

impl UsageStats {
    pub fn new(n: usize) -> Self {
        Self {
            routed: vec![0; n],
            prob_sum: vec![0.0; n],
            total: 0,
        }
    }

    pub fn from_gates<'a>(n: usize, gates: impl IntoIterator<Item = &'a GateResult>) -> Self {
        let mut s = Self::new(n);
        for g in gates {
            s.record(g);
        }
        s
    }

    pub fn record(&mut self, gate: &GateResult) {
        for &i in &gate.selected {
            self.routed[i] += 1;
        }
        for (acc, p) in self.prob_sum.iter_mut().zip(&gate.probs) {
            *acc += p;
        }
        self.total += 1;
    }

    /// `f_i`: fraction of samples routed to each expert.
    pub fn fractions(&self) -> Vec<f64> {
        self.routed
            .iter()
            .map(|&c| c as f64 / self.total as f64)
            .collect()
    }

    /// `Q_i`: average routing probability of each expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        self.prob_sum
            .iter()
            .map(|&s| s / self.total as f64)
            .collect()
    }
}

/// Task-aware load-balancing loss `N · Σ β_i f_i Q_i`.
///
/// Returns the loss and its gradient with respect to `Q`; `f` is treated
/// as a constant.
pub fn load_balance_loss(stats: &UsageStats, betas: &[f64]) -> Result<(f64, Vec<f64>)> {
    if stats.total == 0 {
        return Err(Error::Shape("load balance over an empty batch".into()));
    }
    let n = stats.routed.len();
    if betas.len() != n {
        return Err(Error::Shape(format!(
            "{} betas for {n} experts",
            betas.len()
        )));
    }
    let f = stats.fractions();
    let q = stats.mean_probs();
    let grad: Vec<f64> = betas
        .iter()
        .zip(&f)
        .map(|(b, fi)| n as f64 * b * fi)
        .collect();
    let loss = grad.iter().zip(&q).map(|(g, qi)| g * qi).sum();
    Ok((loss, grad))
}

/// Per-batch routing record of one layer from a taped forward pass.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub gates: Vec<GateResult>,
    /// `B × N` routing probabilities on the tape.
    pub probs: NodeId,
}

impl LayerRouting {
    pub fn usage(&self) -> UsageStats {
        let n = self.gates.first().map_or(0, |g| g.probs.len());
        UsageStats::from_gates(n, &self.gates)
    }

    /// Whether expert `i` was selected for any sample in the batch.
    pub fn routed_any(&self, i: usize) -> bool {
        self.gates.iter().any(|g| g.contains(i))
    }
}

/// Taped batch version of [`moe_forward`]. `x` is `B × D`.
///
/// The selected sets are fixed by the forward values; gradients flow to the
/// router through the renormalized weights and to each expert only from the
/// samples that selected it.
#[allow(clippy::too_many_arguments)]
pub fn moe_forward_tape(
    tape: &mut Tape,
    x: NodeId,
    experts: &[LoraExpert],
    router: &Router,
    store: &ParamStore,
    rule: GatingRule,
    forced: Option<&[Vec<usize>]>,
) -> Result<(NodeId, LayerRouting)> {
    let width = router.width(store)?;
    if width != experts.len() {
        return Err(Error::Consistency(format!(
            "router of task {} layer {} has width {width} but the layer has {} experts",
            router.task,
            router.layer,
            experts.len()
        )));
    }
    let w = tape.param(store, router.weight)?;
    let b = tape.param(store, router.bias)?;
    let xw = tape.matmul(x, w)?;
    let logits = tape.add_row(xw, b)?;
    let probs = tape.softmax_rows(logits)?;

    let (rows, n) = tape.value(probs).dims2()?;
    let mut gates = Vec::with_capacity(rows);
    let mut mask = vec![0.0; rows * n];
    for r in 0..rows {
        let p = tape.value(probs).row_slice(r).to_vec();
        let gate = match forced {
            Some(sel) => renormalized(&p, sel[r].clone()),
            None => rule.select(&p)?,
        };
        for &i in &gate.selected {
            mask[r * n + i] = 1.0;
        }
        gates.push(gate);
    }
    let mask = tape.constant(Tensor::matrix(rows, n, mask)?);
    let kept = tape.mul(probs, mask)?;
    let weights = tape.normalize_row_sum(kept)?;

    let mut y = x;
    for (i, e) in experts.iter().enumerate() {
        if !gates.iter().any(|g| g.contains(i)) {
            continue;
        }
        let down = tape.param(store, e.down)?;
        let up = tape.param(store, e.up)?;
        let hidden = tape.matmul(x, down)?;
        let out = tape.matmul(hidden, up)?;
        let wi = tape.column(weights, i)?;
        let scaled = tape.mul_column(out, wi)?;
        y = tape.add(y, scaled)?;
    }
    Ok((y, LayerRouting { gates, probs }))
}

/// Taped load-balancing loss for one layer. Gradient flows through `Q`.
pub fn load_balance_tape(tape: &mut Tape, routing: &LayerRouting, betas: &[f64]) -> Result<NodeId> {
    let stats = routing.usage();
    let (_, coef) = load_balance_loss(&stats, betas)?;
    let q = tape.mean_rows(routing.probs)?;
    let coef = tape.constant(Tensor::row(coef));
    let weighted = tape.mul(q, coef)?;
    Ok(tape.sum(weighted))
}

/// Routers of every task, one per layer. In shared mode a single router
/// set serves all tasks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RouterBank {
    shared: bool,
    routers: BTreeMap<usize, Vec<Router>>,
}

impl RouterBank {
    pub fn new(shared: bool) -> Self {
        Self {
            shared,
            routers: BTreeMap::new(),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    fn key(&self, task: usize) -> usize {
        if self.shared {
            0
        } else {
            task
        }
    }

    pub fn contains(&self, task: usize) -> bool {
        self.routers.contains_key(&self.key(task))
    }

    pub fn insert(&mut self, task: usize, routers: Vec<Router>) {
        let key = self.key(task);
        self.routers.insert(key, routers);
    }

    pub fn for_task(&self, task: usize) -> Result<&[Router]> {
        self.routers
            .get(&self.key(task))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no router for task {task}")))
    }

    pub fn for_task_mut(&mut self, task: usize) -> Result<&mut Vec<Router>> {
        let key = self.key(task);
        self.routers
            .get_mut(&key)
            .ok_or_else(|| Error::Lookup(format!("no router for task {task}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[Router])> {
        self.routers.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}
