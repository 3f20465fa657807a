//! Deterministic synthetic multi-domain task streams.
//!
//! Every task owns a disjoint block of labels, a set of well-separated unit
//! class prototypes and one or two orthogonal domain transforms. A sample is
//! `Q · (prototype + noise)`. Class embeddings are built from the clean
//! prototypes, so the frozen path sees shifted inputs against unshifted
//! references and the adapters have something to undo.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::{ClassEmbeddingTable, FrozenEncoder};
use crate::error::{Error, Result};
use crate::seed::{gaussian_vec, rng_for};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskGenConfig {
    /// Set from the experiment's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Scale of the Gaussian perturbation of the identity before
    /// orthogonalization; 0 gives no shift.
    pub shift_strength: f64,
    /// Within-class noise std per input coordinate, before the transform.
    pub noise: f64,
    /// Minimum pairwise angle between one task's class prototypes.
    pub min_angle_deg: f64,
    /// Task whose samples come from two sub-domains, if any.
    pub hard_task: Option<usize>,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 5,
            classes_per_task: 8,
            train_per_class: 200,
            test_per_class: 50,
            input_dim: 16,
            shift_strength: 0.3,
            noise: 0.05,
            min_angle_deg: 40.0,
            hard_task: Some(2),
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 || self.train_per_class == 0 {
            return Err(Error::Config(
                "taskgen needs at least one task, class and training sample".into(),
            ));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config(
                "taskgen.test_per_class must be positive".into(),
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("taskgen.input_dim must be positive".into()));
        }
        if !(self.shift_strength >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "taskgen.shift_strength and taskgen.noise must be non-negative".into(),
            ));
        }
        if !(0.0..180.0).contains(&self.min_angle_deg) {
            return Err(Error::Config(
                "taskgen.min_angle_deg must lie in [0, 180)".into(),
            ));
        }
        if let Some(h) = self.hard_task {
            if h >= self.tasks {
                return Err(Error::Config(format!(
                    "taskgen.hard_task {h} is not one of the {} tasks",
                    self.tasks
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub task: usize,
    pub label_offset: usize,
    /// One unit vector per class.
    pub prototypes: Vec<Vec<f64>>,
    /// One orthogonal matrix per sub-domain.
    pub transforms: Vec<Tensor>,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes()).map(|c| self.label_offset + c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Global label.
    pub label: usize,
    pub sub_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: DomainSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    /// Index of a global label within this task's classes.
    pub fn local_class(&self, label: usize) -> Result<usize> {
        label
            .checked_sub(self.spec.label_offset)
            .filter(|&c| c < self.spec.classes())
            .ok_or_else(|| {
                Error::Lookup(format!("label {label} is not in task {}", self.spec.task))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: TaskGenConfig,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, t: usize) -> Result<&TaskData> {
        self.tasks.get(t).ok_or(Error::Index {
            index: t,
            len: self.tasks.len(),
        })
    }

    /// Class embeddings: frozen features of the clean prototypes.
    pub fn embedding_table(&self, encoder: &FrozenEncoder) -> Result<ClassEmbeddingTable> {
        let mut table = ClassEmbeddingTable::new();
        for t in &self.tasks {
            let classes = t
                .spec
                .prototypes
                .iter()
                .enumerate()
                .map(|(c, p)| Ok((t.spec.label_offset + c, encoder.encode(p)?.feature)))
                .collect::<Result<Vec<_>>>()?;
            table.insert_task(t.spec.task, classes)?;
        }
        Ok(table)
    }
}

/// Orthogonal factor of `QR(I + strength · G)` with the signs fixed so that
/// `R` has a positive diagonal; strength 0 yields the identity exactly.
pub fn orthogonal_transform(dim: usize, strength: f64, seed: u64, index: u64) -> Result<Tensor> {
    let mut rng = rng_for(seed, "domain-transform", index);
    let g = gaussian_vec(&mut rng, dim * dim, strength);
    let m = DMatrix::<f64>::identity(dim, dim) + DMatrix::from_row_slice(dim, dim, &g);
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Tensor::matrix(dim, dim, q.transpose().as_slice().to_vec())
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn class_prototypes(config: &TaskGenConfig, task: usize) -> Result<Vec<Vec<f64>>> {
    const RETRIES: usize = 10_000;
    let mut rng = rng_for(config.seed, "class-prototypes", task as u64);
    let max_cos = config.min_angle_deg.to_radians().cos();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(config.classes_per_task);
    let mut tries = 0;
    while protos.len() < config.classes_per_task {
        tries += 1;
        if tries > RETRIES {
            return Err(Error::Config(format!(
                "cannot place {} prototypes {}° apart in {} dimensions",
                config.classes_per_task, config.min_angle_deg, config.input_dim
            )));
        }
        let p = unit(gaussian_vec(&mut rng, config.input_dim, 1.0));
        let ok = protos
            .iter()
            .all(|q| q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
        if ok {
            protos.push(p);
        }
    }
    Ok(protos)
}

fn apply(q: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| (0..d).map(|j| q.get(i, j) * v[j]).sum())
        .collect()
}

fn draw_samples(spec: &DomainSpec, per_class: usize, seed: u64, split: &str) -> Vec<Sample> {
    let mut rng = rng_for(seed, split, spec.task as u64);
    let mut out = Vec::with_capacity(per_class * spec.classes());
    for (c, proto) in spec.prototypes.iter().enumerate() {
        for i in 0..per_class {
            let sub = i % spec.transforms.len();
            let noisy: Vec<f64> = gaussian_vec(&mut rng, proto.len(), spec.noise)
                .iter()
                .zip(proto)
                .map(|(n, p)| p + n)
                .collect();
            out.push(Sample {
                x: apply(&spec.transforms[sub], &noisy),
                label: spec.label_offset + c,
                sub_domain: sub,
            });
        }
    }
    out
}

pub fn generate_stream(config: &TaskGenConfig) -> Result<TaskStream> {
    config.validate()?;
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let subs = if config.hard_task == Some(t) { 2 } else { 1 };
        let transforms = (0..subs)
            .map(|s| {
                orthogonal_transform(
                    config.input_dim,
                    config.shift_strength,
                    config.seed,
                    (t * 2 + s) as u64,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = DomainSpec {
            task: t,
            label_offset: t * config.classes_per_task,
            prototypes: class_prototypes(config, t)?,
            transforms,
            noise: config.noise,
            train_per_class: config.train_per_class,
            test_per_class: config.test_per_class,
        };
        let train = draw_samples(&spec, config.train_per_class, config.seed, "train-split");
        let test = draw_samples(&spec, config.test_per_class, config.seed, "test-split");
        tasks.push(TaskData { spec, train, test });
    }
    Ok(TaskStream {
        config: config.clone(),
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub checks: Vec<StreamCheck>,
}

impl StreamReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        Err(Error::Stream(failed.join("; ")))
    }
}

/// Checks label disjointness, transform orthogonality, split disjointness
/// and per-class sample counts.
pub fn verify_stream(stream: &TaskStream) -> StreamReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, problems: Vec<String>| {
        checks.push(StreamCheck {
            name: name.to_string(),
            passed: problems.is_empty(),
            detail: if problems.is_empty() {
                "ok".into()
            } else {
                problems.join(", ")
            },
        });
    };

    let mut seen = BTreeSet::new();
    let mut overlaps = Vec::new();
    for t in &stream.tasks {
        for l in t.spec.labels() {
            if !seen.insert(l) {
                overlaps.push(format!("label {l} reused by task {}", t.spec.task));
            }
        }
    }
    push("label_disjointness", overlaps);

    let mut bad = Vec::new();
    for t in &stream.tasks {
        for (s, q) in t.spec.transforms.iter().enumerate() {
            let Ok((n, m)) = q.dims2() else {
                bad.push(format!(
                    "task {} transform {s} is not a matrix",
                    t.spec.task
                ));
                continue;
            };
            let mut worst: f64 = if n == m { 0.0 } else { f64::INFINITY };
            if n == m {
                for i in 0..n {
                    for j in 0..n {
                        let dot: f64 = (0..n).map(|k| q.get(k, i) * q.get(k, j)).sum();
                        let e = if i == j { 1.0 } else { 0.0 };
                        worst = worst.max((dot - e).abs());
                    }
                }
            }
            if worst > 1e-9 {
                bad.push(format!(
                    "task {} transform {s}: |QᵀQ - I|max = {worst:.3e}",
                    t.spec.task
                ));
            }
        }
    }
    push("orthogonality", bad);

    let mut shared = Vec::new();
    for t in &stream.tasks {
        let train: BTreeSet<Vec<u64>> = t
            .train
            .iter()
            .map(|s| s.x.iter().map(|v| v.to_bits()).collect())
            .collect();
        let dup = t
            .test
            .iter()
            .filter(|s| train.contains(&s.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .count();
        if dup > 0 {
            shared.push(format!(
                "task {}: {dup} test samples also in train",
                t.spec.task
            ));
        }
    }
    push("split_disjointness", shared);

    let mut counts = Vec::new();
    for t in &stream.tasks {
        for (split, samples, want) in [
            ("train", &t.train, t.spec.train_per_class),
            ("test", &t.test, t.spec.test_per_class),
        ] {
            for l in t.spec.labels() {
                let n = samples.iter().filter(|s| s.label == l).count();
                if n != want {
                    counts.push(format!(
                        "task {} {split} label {l}: {n} samples, expected {want}",
                        t.spec.task
                    ));
                }
            }
            if let Some(s) = samples
                .iter()
                .find(|s| !t.spec.labels().any(|l| l == s.label))
            {
                counts.push(format!(
                    "task {} {split}: foreign label {}",
                    t.spec.task, s.label
                ));
            }
        }
    }
    push("class_counts", counts);

    StreamReport { checks }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    seed: u64,
    config: TaskGenConfig,
    specs: Vec<DomainSpec>,
}

fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut header = vec!["label".to_string(), "sub_domain".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut rec = vec![s.label.to_string(), s.sub_domain.to_string()];
        // shortest round-trip float formatting
        rec.extend(s.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Stream(format!("{}: short record", path.display())))
        };
        let parse_err = |e: String| Error::Stream(format!("{}: {e}", path.display()));
        let label = field(0)?.parse().map_err(|e| parse_err(format!("{e}")))?;
        let sub_domain = field(1)?.parse().map_err(|e| parse_err(format!("{e}")))?;
        let x = (2..rec.len())
            .map(|i| {
                field(i)?
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("{e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            x,
            label,
            sub_domain,
        });
    }
    Ok(out)
}

/// Writes `manifest.json` plus `task_XX_{train,test}.csv` into `dir`.
pub fn write_bundle(stream: &TaskStream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        seed: stream.config.seed,
        config: stream.config.clone(),
        specs: stream.tasks.iter().map(|t| t.spec.clone()).collect(),
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    for t in &stream.tasks {
        write_samples(
            &dir.join(format!("task_{:02}_train.csv", t.spec.task)),
            &t.train,
        )?;
        write_samples(
            &dir.join(format!("task_{:02}_test.csv", t.spec.task)),
            &t.test,
        )?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<TaskStream> {
    let manifest: BundleManifest =
        serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: BUNDLE_FORMAT_VERSION,
        });
    }
    let tasks = manifest
        .specs
        .into_iter()
        .map(|spec| {
            let train = read_samples(&dir.join(format!("task_{:02}_train.csv", spec.task)))?;
            let test = read_samples(&dir.join(format!("task_{:02}_test.csv", spec.task)))?;
            Ok(TaskData { spec, train, test })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        config: TaskGenConfig {
            seed: manifest.seed,
            ..manifest.config
        },
        tasks,
    })
}
