//! Frozen feature encoder and class-embedding classifier.
//!
//! The encoder is a seed-derived tanh perceptron with one adapter tap after
//! every layer. It is never trained; adapters perturb its activations
//! residually (see [`crate::moe`]).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::{gaussian_vec, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Set from the experiment's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Number of layers, one adapter tap after each.
    pub taps: usize,
    /// Weight std of the first layer is `input_gain / sqrt(input_dim)`.
    pub input_gain: f64,
    /// Weight std of later layers is `hidden_gain / sqrt(feature_dim)`.
    pub hidden_gain: f64,
    pub bias_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_dim: 16,
            feature_dim: 16,
            taps: 2,
            input_gain: 1.5,
            hidden_gain: 1.5,
            bias_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Seed-derived frozen encoder. Rebuilt bit-identically from its config.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    layers: Vec<EncoderLayer>,
}

/// Output of a frozen pass: the final feature and the activation at every tap.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub feature: Vec<f64>,
    pub taps: Vec<Vec<f64>>,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.input_dim == 0 || config.feature_dim == 0 || config.taps == 0 {
            return Err(Error::Config(
                "encoder dimensions and tap count must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(config.taps);
        for l in 0..config.taps {
            let mut rng = rng_for(config.seed, "encoder-layer", l as u64);
            let fan_in = if l == 0 {
                config.input_dim
            } else {
                config.feature_dim
            };
            let gain = if l == 0 {
                config.input_gain
            } else {
                config.hidden_gain
            };
            let std = gain / (fan_in as f64).sqrt();
            let weight = Tensor::matrix(
                fan_in,
                config.feature_dim,
                gaussian_vec(&mut rng, fan_in * config.feature_dim, std),
            )?;
            let bias = Tensor::row(gaussian_vec(
                &mut rng,
                config.feature_dim,
                config.bias_scale,
            ));
            layers.push(EncoderLayer { weight, bias });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn taps(&self) -> usize {
        self.config.taps
    }

    /// Pre-activation + tanh of one layer applied to a single vector.
    pub fn apply_layer(&self, layer: usize, input: &[f64]) -> Result<Vec<f64>> {
        let l = self.layers.get(layer).ok_or(Error::Index {
            index: layer,
            len: self.layers.len(),
        })?;
        let (fan_in, d) = l.weight.dims2()?;
        if input.len() != fan_in {
            return Err(Error::Shape(format!(
                "layer {layer} expects {fan_in} inputs, got {}",
                input.len()
            )));
        }
        let mut out = l.bias.data().to_vec();
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &l.weight.data()[i * d..(i + 1) * d];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out.iter_mut().for_each(|v| *v = v.tanh());
        Ok(out)
    }

    /// Frozen forward pass with no adapters.
    pub fn encode(&self, x: &[f64]) -> Result<Encoding> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} inputs, got {}",
                self.config.input_dim,
                x.len()
            )));
        }
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in 0..self.layers.len() {
            h = self.apply_layer(l, &h)?;
            taps.push(h.clone());
        }
        Ok(Encoding { feature: h, taps })
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for l in &self.layers {
            hasher.update(l.weight.to_le_bytes());
            hasher.update(l.bias.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    /// Global label, unique across all tasks.
    pub label: usize,
    pub vector: Vec<f64>,
}

/// Frozen per-task class embeddings (unit norm), standing in for text
/// features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingTable {
    tasks: BTreeMap<usize, Vec<ClassEmbedding>>,
}

impl ClassEmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a task's classes. Vectors are normalized; labels must not
    /// collide with any registered task.
    pub fn insert_task(&mut self, task: usize, classes: Vec<(usize, Vec<f64>)>) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(Error::Config(format!("task {task} already has embeddings")));
        }
        let taken: BTreeSet<usize> = self.labels().collect();
        let mut entries = Vec::with_capacity(classes.len());
        for (label, v) in classes {
            if taken.contains(&label) || entries.iter().any(|e: &ClassEmbedding| e.label == label) {
                return Err(Error::Config(format!(
                    "label {label} of task {task} overlaps an existing label space"
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "class {label} has a degenerate embedding"
                )));
            }
            entries.push(ClassEmbedding {
                label,
                vector: v.iter().map(|x| x / norm).collect(),
            });
        }
        self.tasks.insert(task, entries);
        Ok(())
    }

    pub fn task(&self, task: usize) -> Result<&[ClassEmbedding]> {
        self.tasks
            .get(&task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no class embeddings for task {task}")))
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.values().flatten().map(|e| e.label)
    }

    /// `D × C` matrix whose columns are the task's embeddings.
    pub fn matrix(&self, task: usize) -> Result<Tensor> {
        let classes = self.task(task)?;
        let d = classes.first().map_or(0, |c| c.vector.len());
        let mut data = vec![0.0; d * classes.len()];
        for (c, e) in classes.iter().enumerate() {
            for (r, v) in e.vector.iter().enumerate() {
                data[r * classes.len() + c] = *v;
            }
        }
        Tensor::matrix(d, classes.len(), data)
    }
}

/// Cosine classifier: `logit_c = temperature · cos(feature, embedding_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitHead {
    pub temperature: f64,
}

impl Default for LogitHead {
    fn default() -> Self {
        Self { temperature: 10.0 }
    }
}

impl LogitHead {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }

    pub fn logits(&self, feature: &[f64], classes: &[ClassEmbedding]) -> Vec<f64> {
        let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        classes
            .iter()
            .map(|c| {
                if norm == 0.0 {
                    return 0.0;
                }
                let dot: f64 = feature.iter().zip(&c.vector).map(|(a, b)| a * b).sum();
                self.temperature * dot / norm
            })
            .collect()
    }

    /// Global label of the highest logit; ties go to the earlier class.
    pub fn predict(&self, feature: &[f64], classes: &[ClassEmbedding]) -> Option<usize> {
        let logits = self.logits(feature, classes);
        argmax(&logits).map(|i| classes[i].label)
    }
}

pub fn zero_shot_logits(
    feature: &[f64],
    table: &ClassEmbeddingTable,
    head: &LogitHead,
    task: usize,
) -> Result<Vec<f64>> {
    Ok(head.logits(feature, table.task(task)?))
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
