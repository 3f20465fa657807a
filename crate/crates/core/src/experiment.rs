//! End-to-end runs: train the stream stage by stage, evaluate every
//! protocol after each stage, run the reference baselines and write the
//! report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, AdamWState};
use crate::backbone::{FrozenEncoder, LogitHead};
use crate::config::{default_provenance, ExperimentConfig, ToggleSet};
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate_stage, evaluate_task, matrices_from_cells, metrics, AccuracyMatrix, Metrics, Protocol,
    RoutingMatrix, TaskEval,
};
use crate::model::{Method, ModelState};
use crate::taskgen::{generate_stream, verify_stream, TaskStream};
use crate::trainer::{run_task, TaskTrace, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Evaluation of every protocol after one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub task: usize,
    pub evals: BTreeMap<Protocol, Vec<TaskEval>>,
    pub expert_counts: Vec<usize>,
    pub parameter_hashes: BTreeMap<String, String>,
}

/// A run in progress.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: ExperimentConfig,
    pub train: TrainConfig,
    pub stream: TaskStream,
    pub state: ModelState,
    pub stages: Vec<StageRecord>,
    pub traces: Vec<TaskTrace>,
}

pub fn build_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    let stream = generate_stream(&config.taskgen)?;
    verify_stream(&stream).into_result()?;
    Ok(stream)
}

/// Untrained model for a configuration and its stream.
pub fn fresh_state(
    config: &ExperimentConfig,
    train: &TrainConfig,
    stream: &TaskStream,
) -> Result<ModelState> {
    let encoder = FrozenEncoder::new(config.encoder.clone())?;
    let embeddings = stream.embedding_table(&encoder)?;
    let head = LogitHead::new(train.temperature)?;
    let optimizer = AdamWState::new(AdamWConfig {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..AdamWConfig::default()
    });
    ModelState::new(
        encoder,
        embeddings,
        head,
        train.lora_rank,
        optimizer,
        train.gating(),
        train.method,
        train.shared_router,
    )
}

impl Session {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let stream = build_stream(&config)?;
        Self::with_stream(config, stream)
    }

    pub fn with_stream(config: ExperimentConfig, stream: TaskStream) -> Result<Self> {
        let config = config.resolved();
        let train = config.effective_train();
        let state = fresh_state(&config, &train, &stream)?;
        Ok(Self {
            config,
            train,
            stream,
            state,
            stages: Vec::new(),
            traces: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.stages.len() == self.stream.len()
    }

    /// Evaluates the current model with every configured protocol.
    pub fn evaluate_now(&self) -> Result<BTreeMap<Protocol, Vec<TaskEval>>> {
        self.config
            .protocols()
            .into_iter()
            .map(|p| {
                Ok((
                    p,
                    evaluate_stage(&self.state, &self.stream, p, self.config.eval.batch_size)?,
                ))
            })
            .collect()
    }

    /// Trains the next task and evaluates.
    pub fn next_stage(&mut self) -> Result<&StageRecord> {
        let stage = self.stages.len();
        let data = self
            .stream
            .tasks
            .get(stage)
            .ok_or_else(|| Error::TaskOrder("every task is already trained".into()))?;
        log::info!("stage {stage}: training task {}", data.spec.task);
        let trace = run_task(&mut self.state, data, &self.train)?;
        log::info!(
            "stage {stage}: {} expansions, {} prunes, experts per layer {:?}",
            trace.expansions,
            trace.prunes,
            self.state.pool.counts()
        );
        self.traces.push(trace);
        let record = StageRecord {
            stage,
            task: data.spec.task,
            evals: self.evaluate_now()?,
            expert_counts: self.state.pool.counts(),
            parameter_hashes: self.state.parameter_hashes()?,
        };
        self.stages.push(record);
        Ok(self.stages.last().expect("just pushed"))
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.next_stage()?;
        }
        Ok(())
    }

    pub fn into_result(self) -> Result<RunResult> {
        if !self.is_done() {
            return Err(Error::TaskOrder(format!(
                "{} of {} stages trained",
                self.stages.len(),
                self.stream.len()
            )));
        }
        let mut matrices = BTreeMap::new();
        for p in self.config.protocols() {
            let cells = self
                .stages
                .iter()
                .map(|s| {
                    s.evals.get(&p).cloned().ok_or_else(|| {
                        Error::Lookup(format!("stage {} lacks {}", s.stage, p.name()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            matrices.insert(p, matrices_from_cells(p, cells)?);
        }
        Ok(RunResult {
            config: self.config,
            matrices,
            stages: self.stages,
            traces: self.traces,
            state: self.state,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub matrices: BTreeMap<Protocol, (AccuracyMatrix, RoutingMatrix)>,
    pub stages: Vec<StageRecord>,
    pub traces: Vec<TaskTrace>,
    pub state: ModelState,
}

impl RunResult {
    pub fn accuracy(&self, p: Protocol) -> Result<&AccuracyMatrix> {
        self.matrices
            .get(&p)
            .map(|m| &m.0)
            .ok_or_else(|| Error::Lookup(format!("protocol {} was not evaluated", p.name())))
    }

    pub fn routing(&self, p: Protocol) -> Result<&RoutingMatrix> {
        self.matrices
            .get(&p)
            .map(|m| &m.1)
            .ok_or_else(|| Error::Lookup(format!("protocol {} was not evaluated", p.name())))
    }

    pub fn metrics(&self, p: Protocol) -> Result<Metrics> {
        Ok(metrics(self.accuracy(p)?))
    }
}

pub fn run(config: ExperimentConfig) -> Result<RunResult> {
    let mut s = Session::new(config)?;
    s.run_to_end()?;
    s.into_result()
}

/// The shared single-adapter baseline under the same seed and stream.
pub fn shared_adapter_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.train.method = Method::SharedAdapter;
    c.toggles = ToggleSet::full();
    c.resolved()
}

/// Per-task upper bound: a fresh model fine-tuned on each task alone and
/// evaluated on it with its own adapters.
pub fn finetune_upper_bound(config: &ExperimentConfig, stream: &TaskStream) -> Result<Vec<f64>> {
    let config = config.clone().resolved();
    let train = config.effective_train();
    stream
        .tasks
        .iter()
        .map(|data| {
            let mut state = fresh_state(&config, &train, stream)?;
            run_task(&mut state, data, &train)?;
            Ok(evaluate_task(
                &state,
                data,
                Protocol::OracleTaskId,
                stream.len(),
                config.eval.batch_size,
            )?
            .accuracy)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub shared_adapter: Metrics,
    pub shared_adapter_matrix: AccuracyMatrix,
    pub finetune: Vec<f64>,
    pub finetune_mean: f64,
}

pub fn run_baselines(config: &ExperimentConfig, stream: &TaskStream) -> Result<Baselines> {
    let shared_cfg = shared_adapter_config(config);
    let mut s = Session::with_stream(shared_cfg, stream.clone())?;
    s.run_to_end()?;
    let shared = s.into_result()?;
    let finetune = finetune_upper_bound(config, stream)?;
    let finetune_mean = finetune.iter().sum::<f64>() / finetune.len() as f64;
    Ok(Baselines {
        shared_adapter: shared.metrics(Protocol::WithPges)?,
        shared_adapter_matrix: shared.accuracy(Protocol::WithPges)?.clone(),
        finetune,
        finetune_mean,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: ToggleSet,
    pub transfer: f64,
    pub avg: f64,
    pub last: f64,
    pub delta_transfer: f64,
    pub delta_avg: f64,
    pub delta_last: f64,
    pub final_experts: usize,
}

pub fn ablate(config: &ExperimentConfig, rows: &[ToggleSet]) -> Result<Vec<AblationRow>> {
    let base = config.clone().resolved();
    base.validate()?;
    let stream = build_stream(&base)?;
    let mut out: Vec<AblationRow> = Vec::with_capacity(rows.len());
    for toggles in rows {
        let mut c = base.clone();
        c.toggles = toggles.clone();
        c.validate()?;
        log::info!("ablation row {}", toggles.name());
        let mut s = Session::with_stream(c, stream.clone())?;
        s.run_to_end()?;
        let r = s.into_result()?;
        let m = r.metrics(Protocol::WithPges)?;
        out.push(AblationRow {
            name: toggles.name(),
            toggles: toggles.clone(),
            transfer: m.transfer.overall.unwrap_or(f64::NAN),
            avg: m.avg.overall.unwrap_or(f64::NAN),
            last: m.last.overall.unwrap_or(f64::NAN),
            delta_transfer: 0.0,
            delta_avg: 0.0,
            delta_last: 0.0,
            final_experts: r.state.pool.counts().iter().sum(),
        });
    }
    let reference = out
        .iter()
        .find(|r| r.toggles.is_full())
        .cloned()
        .ok_or_else(|| Error::Config("the ablation grid needs a `full` row".into()))?;
    for r in &mut out {
        r.delta_transfer = r.transfer - reference.transfer;
        r.delta_avg = r.avg - reference.avg;
        r.delta_last = r.last - reference.last;
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn task_header(prefix: &[&str], tasks: usize) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..tasks).map(|t| format!("task_{t}")))
        .collect()
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    schema_version: u32,
    seed: u64,
    config_hash: String,
    toggles: String,
    protocols: BTreeMap<&'static str, &'a Metrics>,
    final_expert_counts: Vec<usize>,
    baselines: Option<&'a Baselines>,
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    crate_version: &'static str,
    seed: u64,
    config_hash: String,
    encoder_fingerprint: String,
    config: ExperimentConfig,
    defaults_provenance: BTreeMap<&'static str, &'static str>,
    files: Vec<&'static str>,
}

/// Writes the report files of a finished run into `dir`.
pub fn write_report(dir: &Path, result: &RunResult, baselines: Option<&Baselines>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = result.stages.len();

    let mut w = csv::Writer::from_path(dir.join("accuracy_matrix.csv"))?;
    w.write_record(task_header(&["protocol", "stage"], k))?;
    for (p, (acc, _)) in &result.matrices {
        for (stage, row) in acc.entries.iter().enumerate() {
            let mut rec = vec![p.name().to_string(), stage.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(rec)?;
        }
    }
    w.flush()?;

    let routing = result.routing(Protocol::WithPges)?;
    let mut w = csv::Writer::from_path(dir.join("routing_matrix.csv"))?;
    w.write_record(task_header(&["stage"], k))?;
    for stage in 0..k {
        let mut rec = vec![stage.to_string()];
        rec.extend((0..k).map(|t| format!("{:.6}", routing.routing_accuracy(stage, t))));
        w.write_record(rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("routing_detail.csv"))?;
    w.write_record(["stage", "task", "target", "fraction"])?;
    for (stage, row) in routing.cells.iter().enumerate() {
        for cell in row {
            for (target, f) in cell.routed_to.iter().enumerate() {
                w.write_record([
                    stage.to_string(),
                    cell.task.to_string(),
                    format!("task_{target}"),
                    format!("{f:.6}"),
                ])?;
            }
            w.write_record([
                stage.to_string(),
                cell.task.to_string(),
                "fallback".to_string(),
                format!("{:.6}", cell.fallback),
            ])?;
        }
    }
    w.flush()?;

    let mut lines = String::new();
    for trace in &result.traces {
        for e in &trace.events {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
        }
    }
    write_text(&dir.join("telemetry.jsonl"), &lines)?;

    let mut w = csv::Writer::from_path(dir.join("expert_counts.csv"))?;
    w.write_record([
        "task",
        "layer",
        "start",
        "peak",
        "end",
        "expansions",
        "prunes",
    ])?;
    for trace in &result.traces {
        for l in 0..trace.counts.end.len() {
            w.write_record([
                trace.task.to_string(),
                l.to_string(),
                trace.counts.start[l].to_string(),
                trace.counts.peak[l].to_string(),
                trace.counts.end[l].to_string(),
                trace.expansions.to_string(),
                trace.prunes.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let per_protocol: Vec<(Protocol, Metrics)> = result
        .matrices
        .keys()
        .map(|&p| Ok((p, result.metrics(p)?)))
        .collect::<Result<_>>()?;
    let file = MetricsFile {
        schema_version: SCHEMA_VERSION,
        seed: result.config.seed,
        config_hash: result.config.hash(),
        toggles: result.config.toggles.name(),
        protocols: per_protocol.iter().map(|(p, m)| (p.name(), m)).collect(),
        final_expert_counts: result.state.pool.counts(),
        baselines,
    };
    write_json(&dir.join("metrics.json"), &file)?;

    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION,
            crate_version: env!("CARGO_PKG_VERSION"),
            seed: result.config.seed,
            config_hash: result.config.hash(),
            encoder_fingerprint: result.state.encoder.fingerprint(),
            config: result.config.clone(),
            defaults_provenance: default_provenance().into_iter().collect(),
            files: vec![
                "accuracy_matrix.csv",
                "routing_matrix.csv",
                "routing_detail.csv",
                "telemetry.jsonl",
                "expert_counts.csv",
                "metrics.json",
                "manifest.json",
            ],
        },
    )
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record([
        "row",
        "transfer",
        "avg",
        "last",
        "delta_transfer",
        "delta_avg",
        "delta_last",
        "final_experts",
    ])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{:.6}", r.transfer),
            format!("{:.6}", r.avg),
            format!("{:.6}", r.last),
            format!("{:+.6}", r.delta_transfer),
            format!("{:+.6}", r.delta_avg),
            format!("{:+.6}", r.delta_last),
            r.final_experts.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("ablation.json"), &rows)
}
