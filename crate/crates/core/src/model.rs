//! The adapted model: frozen encoder, expert pool, routers, class
//! embeddings, prototypes and optimizer state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWState, NodeId, ParamStore, Tape, Tensor};
use crate::backbone::{ClassEmbeddingTable, FrozenEncoder, LogitHead};
use crate::error::{Error, Result};
use crate::moe::{
    moe_forward, moe_forward_tape, ExpertPool, GateResult, GatingRule, LayerRouting, RouterBank,
};
use crate::pges::TaskPrototypeSet;

/// Which training recipe the model follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Per-task routers over a growing pool, history frozen, task identity
    /// recovered from prototypes at inference.
    Dimoe,
    /// One adapter per tap trained on every task in turn, nothing frozen.
    SharedAdapter,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub encoder: FrozenEncoder,
    pub embeddings: ClassEmbeddingTable,
    pub head: LogitHead,
    pub store: ParamStore,
    pub pool: ExpertPool,
    pub routers: RouterBank,
    pub prototypes: Vec<TaskPrototypeSet>,
    /// Fallback threshold on the best task score.
    pub threshold: f64,
    pub optimizer: AdamWState,
    pub gating: GatingRule,
    pub method: Method,
    /// Completed tasks in training order.
    pub completed: Vec<usize>,
    pub current: Option<usize>,
}

impl ModelState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        encoder: FrozenEncoder,
        embeddings: ClassEmbeddingTable,
        head: LogitHead,
        rank: usize,
        optimizer: AdamWState,
        gating: GatingRule,
        method: Method,
        shared_router: bool,
    ) -> Result<Self> {
        let pool = ExpertPool::new(encoder.taps(), encoder.feature_dim(), rank)?;
        Ok(Self {
            encoder,
            embeddings,
            head,
            store: ParamStore::new(),
            pool,
            routers: RouterBank::new(shared_router || method == Method::SharedAdapter),
            prototypes: Vec::new(),
            threshold: f64::INFINITY,
            optimizer,
            gating,
            method,
            completed: Vec::new(),
            current: None,
        })
    }

    pub fn is_trained(&self, task: usize) -> bool {
        self.routers.contains(task)
            && (self.completed.contains(&task) || self.current == Some(task))
    }

    /// Adapted forward pass through the routers of `task`. Frozen routers
    /// see the prefix of the pool that existed when they were frozen.
    pub fn forward(&self, x: &[f64], task: usize) -> Result<(Vec<f64>, Vec<GateResult>)> {
        let routers = self.routers.for_task(task)?;
        if x.len() != self.encoder.input_dim() {
            return Err(Error::Shape(format!(
                "model expects {} inputs, got {}",
                self.encoder.input_dim(),
                x.len()
            )));
        }
        let mut h = x.to_vec();
        let mut gates = Vec::with_capacity(routers.len());
        for (l, router) in routers.iter().enumerate() {
            h = self.encoder.apply_layer(l, &h)?;
            let width = router.width(&self.store)?;
            let experts = self.pool.layer(l).get(..width).ok_or_else(|| {
                Error::Consistency(format!(
                    "router of task {task} layer {l} is wider than the pool ({width} > {})",
                    self.pool.len(l)
                ))
            })?;
            let (y, gate) = moe_forward(&h, experts, router, &self.store, self.gating)?;
            h = y;
            gates.push(gate);
        }
        Ok((h, gates))
    }

    /// Global label predicted with the adapters and classes of `task`.
    pub fn classify(&self, x: &[f64], task: usize) -> Result<usize> {
        let (feature, _) = self.forward(x, task)?;
        self.predict_label(&feature, task)
    }

    pub fn predict_label(&self, feature: &[f64], task: usize) -> Result<usize> {
        self.head
            .predict(feature, self.embeddings.task(task)?)
            .ok_or_else(|| Error::Lookup(format!("task {task} has no classes")))
    }

    /// Frozen-encoder prediction over the classes of `task`.
    pub fn zero_shot(&self, x: &[f64], task: usize) -> Result<usize> {
        let feature = self.encoder.encode(x)?.feature;
        self.predict_label(&feature, task)
    }

    /// Taped batch forward through the routers of `task`; returns the
    /// `B × D` features and the routing of every layer. `forced` pins the
    /// selected expert sets per layer and sample.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        xs: &[&[f64]],
        task: usize,
        forced: Option<&[Vec<Vec<usize>>]>,
    ) -> Result<(NodeId, Vec<LayerRouting>)> {
        let routers = self.routers.for_task(task)?;
        let dim = self.encoder.input_dim();
        let mut data = Vec::with_capacity(xs.len() * dim);
        for x in xs {
            if x.len() != dim {
                return Err(Error::Shape(format!(
                    "model expects {dim} inputs, got {}",
                    x.len()
                )));
            }
            data.extend_from_slice(x);
        }
        let mut h = tape.constant(Tensor::matrix(xs.len(), dim, data)?);
        let mut routing = Vec::with_capacity(routers.len());
        for (l, (router, layer)) in routers.iter().zip(self.encoder.layers()).enumerate() {
            let w = tape.constant(layer.weight.clone());
            let b = tape.constant(layer.bias.clone());
            let pre = tape.matmul(h, w)?;
            let pre = tape.add_row(pre, b)?;
            let act = tape.tanh(pre);
            let width = router.width(&self.store)?;
            let experts = self.pool.layer(l).get(..width).ok_or_else(|| {
                Error::Consistency(format!(
                    "router of task {task} layer {l} is wider than the pool"
                ))
            })?;
            let (y, r) = moe_forward_tape(
                tape,
                act,
                experts,
                router,
                &self.store,
                self.gating,
                forced.map(|f| f[l].as_slice()),
            )?;
            h = y;
            routing.push(r);
        }
        Ok((h, routing))
    }

    /// Cosine logits of taped features against the classes of `task`.
    pub fn logits_tape(&self, tape: &mut Tape, features: NodeId, task: usize) -> Result<NodeId> {
        let unit = tape.l2_normalize_rows(features)?;
        let emb = tape.constant(self.embeddings.matrix(task)?);
        let cos = tape.matmul(unit, emb)?;
        Ok(tape.scale(cos, self.head.temperature))
    }

    /// Position of a global label among the classes of `task`.
    pub fn class_index(&self, task: usize, label: usize) -> Result<usize> {
        self.embeddings
            .task(task)?
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| Error::Lookup(format!("label {label} is not a class of task {task}")))
    }

    /// Hash of every parameter, keyed by name.
    pub fn parameter_hashes(&self) -> Result<BTreeMap<String, String>> {
        self.store
            .iter()
            .map(|(id, p)| Ok((p.name.clone(), self.store.hash(id)?)))
            .collect()
    }

    /// Router widths and frozen flags agree with the pool and the task
    /// history.
    pub fn check_consistency(&self) -> Result<()> {
        for (task, routers) in self.routers.iter() {
            if routers.len() != self.pool.num_layers() {
                return Err(Error::Consistency(format!(
                    "task {task} has {} routers for {} layers",
                    routers.len(),
                    self.pool.num_layers()
                )));
            }
            for (l, r) in routers.iter().enumerate() {
                let width = r.width(&self.store)?;
                let active = !r.frozen;
                if (active && width != self.pool.len(l)) || width > self.pool.len(l) {
                    return Err(Error::Consistency(format!(
                        "router of task {task} layer {l} has width {width}, pool has {}",
                        self.pool.len(l)
                    )));
                }
                if r.frozen != self.store.is_frozen(r.weight)? {
                    return Err(Error::Consistency(format!(
                        "router of task {task} layer {l} has inconsistent frozen flags"
                    )));
                }
            }
        }
        for (l, e) in self.pool.iter() {
            if e.frozen != self.store.is_frozen(e.down)?
                || e.frozen != self.store.is_frozen(e.up)?
            {
                return Err(Error::Consistency(format!(
                    "expert {} in layer {l} has inconsistent frozen flags",
                    e.id
                )));
            }
        }
        Ok(())
    }
}
