//! Experiment configuration: one JSON document, unknown keys rejected,
//! omitted keys filled with defaults.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluator::Protocol;
use crate::model::Method;
use crate::taskgen::TaskGenConfig;
use crate::trainer::TrainConfig;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    /// Disable expert expansion.
    NoAdd,
    /// Disable expert pruning.
    NoPrune,
    /// Disable the load-balancing loss.
    NoLb,
    /// Fixed top-2 routing instead of top-p.
    Top2,
    /// One router shared by all tasks.
    SharedRouter,
}

impl Toggle {
    pub const ALL: [Toggle; 5] = [
        Toggle::NoAdd,
        Toggle::NoPrune,
        Toggle::NoLb,
        Toggle::Top2,
        Toggle::SharedRouter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::NoAdd => "no-add",
            Toggle::NoPrune => "no-prune",
            Toggle::NoLb => "no-lb",
            Toggle::Top2 => "top2",
            Toggle::SharedRouter => "shared-router",
        }
    }

    pub fn apply(self, train: &mut TrainConfig) {
        match self {
            Toggle::NoAdd => train.scee.expand = false,
            Toggle::NoPrune => train.scee.prune = false,
            Toggle::NoLb => train.lambda_lb = 0.0,
            Toggle::Top2 => train.top_k = Some(2),
            Toggle::SharedRouter => train.shared_router = true,
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Toggle::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<&str> = Toggle::ALL.iter().map(|t| t.name()).collect();
                Error::Config(format!(
                    "unknown toggle `{}` (known: full, {})",
                    s.trim(),
                    known.join(", ")
                ))
            })
    }
}

/// A set of toggles for one run. `full` is the empty set and cannot be
/// combined with anything else.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ToggleSet(pub BTreeSet<Toggle>);

impl ToggleSet {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn is_full(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses `sep`-separated toggle names.
    pub fn parse(s: &str, sep: char) -> Result<Self> {
        let parts: Vec<&str> = s
            .split(sep)
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .collect();
        if parts.is_empty() {
            return Err(Error::Config("empty toggle set".into()));
        }
        if parts.contains(&"full") {
            if parts.len() > 1 {
                return Err(Error::Config(
                    "`full` cannot be combined with other toggles".into(),
                ));
            }
            return Ok(Self::full());
        }
        let mut set = BTreeSet::new();
        for p in parts {
            let t: Toggle = p.parse()?;
            if !set.insert(t) {
                return Err(Error::Config(format!("toggle `{t}` given twice")));
            }
        }
        Ok(Self(set))
    }

    pub fn name(&self) -> String {
        if self.is_full() {
            return "full".into();
        }
        self.0
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn apply(&self, train: &mut TrainConfig) {
        for t in &self.0 {
            t.apply(train);
        }
    }
}

/// Rows of the ablation grid: comma-separated rows, `+` inside a row.
pub fn parse_ablation_rows(s: &str) -> Result<Vec<ToggleSet>> {
    let mut rows = vec![ToggleSet::full()];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let row = ToggleSet::parse(part, '+')?;
        if rows.contains(&row) {
            if row.is_full() {
                continue;
            }
            return Err(Error::Config(format!(
                "ablation row `{}` given twice",
                row.name()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// The standard ablation grid.
pub fn default_ablation_rows() -> Vec<ToggleSet> {
    let one = |t: Toggle| ToggleSet([t].into_iter().collect());
    vec![
        ToggleSet::full(),
        one(Toggle::NoAdd),
        one(Toggle::NoPrune),
        ToggleSet([Toggle::NoAdd, Toggle::NoPrune].into_iter().collect()),
        one(Toggle::NoLb),
        one(Toggle::Top2),
        one(Toggle::SharedRouter),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Protocols to evaluate; `with_pges` is always included.
    pub protocols: Vec<Protocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            protocols: vec![
                Protocol::WithPges,
                Protocol::OracleTaskId,
                Protocol::FrozenZeroShot,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub taskgen: TaskGenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<String>,
    pub toggles: ToggleSet,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            taskgen: TaskGenConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
            toggles: ToggleSet::full(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        let cfg = cfg.resolved();
        cfg.validate().map_err(|e| anchor(e, text))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies the master seed into every component.
    pub fn resolved(mut self) -> Self {
        self.encoder.seed = self.seed;
        self.taskgen.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.taskgen.validate()?;
        self.train.validate()?;
        if self.taskgen.input_dim != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "taskgen.input_dim ({}) must equal encoder.input_dim ({})",
                self.taskgen.input_dim, self.encoder.input_dim
            )));
        }
        if self.encoder.input_dim == 0 || self.encoder.feature_dim == 0 || self.encoder.taps == 0 {
            return Err(Error::Config(
                "encoder.feature_dim and encoder.taps must be positive".into(),
            ));
        }
        if self.train.lora_rank == 0 || self.train.lora_rank >= self.encoder.feature_dim {
            return Err(Error::Config(format!(
                "train.lora_rank must lie in [1, {})",
                self.encoder.feature_dim
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.train.method == Method::SharedAdapter && !self.toggles.is_full() {
            return Err(Error::Config(
                "toggles only apply to the dimoe method".into(),
            ));
        }
        Ok(())
    }

    /// Training configuration with the toggles applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        self.toggles.apply(&mut t);
        t
    }

    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&(self.seed, self)).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn protocols(&self) -> Vec<Protocol> {
        let mut p: Vec<Protocol> = self.eval.protocols.clone();
        p.push(Protocol::WithPges);
        p.sort();
        p.dedup();
        p
    }
}

/// Prefixes a semantic config error with the line of the offending key.
fn anchor(err: Error, text: &str) -> Error {
    let Error::Config(msg) = err else {
        return err;
    };
    let path = msg.split_whitespace().next().unwrap_or("");
    let key = path.rsplit('.').next().unwrap_or("").trim_end_matches(':');
    if key.is_empty() {
        return Error::Config(msg);
    }
    let needle = format!("\"{key}\"");
    match text.lines().position(|l| l.contains(&needle)) {
        Some(i) => Error::Config(format!("line {}: {msg}", i + 1)),
        None => Error::Config(msg),
    }
}

/// Provenance of the main default hyperparameters, `published` settings
/// versus local `design` choices. Recorded in run manifests.
pub fn default_provenance() -> Vec<(&'static str, &'static str)> {
    vec![
        ("train.top_p", "published"),
        ("train.beta_new", "published"),
        ("train.scee.momentum", "published"),
        ("train.scee.gamma_prune", "published"),
        ("train.scee.gamma_expand", "published"),
        ("train.label_smoothing", "published"),
        ("train.batch_size", "published"),
        ("eval.batch_size", "published"),
        ("train.weight_decay", "published"),
        ("train.lr", "design"),
        ("train.max_iters", "design"),
        ("train.lambda_lb", "design"),
        ("train.lora_rank", "design"),
        ("train.experts_per_task", "design"),
        ("train.scee.interval", "design"),
        ("train.scee.window_fraction", "design"),
        ("train.scee.spawn_sigma", "design"),
        ("train.scee.max_evolvable", "design"),
        ("train.prototype_clusters", "design"),
        ("train.prototype_percentile", "design"),
        ("train.temperature", "design"),
        ("taskgen", "design"),
        ("encoder", "design"),
    ]
}
