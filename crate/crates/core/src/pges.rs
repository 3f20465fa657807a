//! Prototype-guided expert selection.
//!
//! Each task keeps a few Gaussian prototypes of its frozen-encoder features.
//! At inference a sample's per-task score is the best component's
//! `-½ d² - ½ ln|Σ|` with `d` the Mahalanobis distance; the best-scoring
//! task's adapters are used unless the score is below a calibrated
//! threshold, in which case the sample goes to the frozen encoder.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn mean_of<'a>(points: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    let mut n = 0usize;
    for p in points {
        for (mi, pi) in m.iter_mut().zip(p) {
            *mi += pi;
        }
        n += 1;
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Lloyd's algorithm with seeded farthest-point initialization.
///
/// The first center is a seeded random point; each further center is the
/// point farthest from the centers chosen so far. A cluster that empties is
/// refilled with the point farthest from its own center.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let n = features.len();
    if n == 0 {
        return Err(Error::Shape("k-means on an empty feature set".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape(
            "k-means features have mixed dimensions".into(),
        ));
    }
    let k = if n < k {
        log::warn!("k-means: {n} points for k={k}, reducing k to {n}");
        n
    } else {
        k
    };

    let mut rng = rng_for(seed, "kmeans-init", 0);
    let mut centers = vec![features[rng.random_range(0..n)].clone()];
    let mut min_d: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let far = argmax_first(&min_d);
        centers.push(features[far].clone());
        for (d, f) in min_d.iter_mut().zip(features) {
            *d = d.min(sq_dist(f, &centers[centers.len() - 1]));
        }
    }

    let mut assignments: Vec<usize> = features.iter().map(|f| nearest(f, &centers)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for (c, center) in centers.iter_mut().enumerate() {
            let members = features
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(f, _)| f);
            if assignments.contains(&c) {
                *center = mean_of(members, dim);
            }
        }
        for c in 0..k {
            if !assignments.contains(&c) {
                let dists: Vec<f64> = features
                    .iter()
                    .zip(&assignments)
                    .map(|(f, &a)| sq_dist(f, &centers[a]))
                    .collect();
                let far = argmax_first(&dists);
                centers[c] = features[far].clone();
                assignments[far] = c;
            }
        }
        let next: Vec<usize> = features.iter().map(|f| nearest(f, &centers)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        assignments,
        centers,
        iterations,
    })
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Serialized form of a component; the factorization is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ComponentRecord {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    regularization: f64,
    count: usize,
}

/// One Gaussian prototype with its covariance (regularization included)
/// factored once.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "ComponentRecord", try_from = "ComponentRecord")]
pub struct GaussianComponent {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    regularization: f64,
    count: usize,
    chol_lower: DMatrix<f64>,
    log_det: f64,
}

impl From<GaussianComponent> for ComponentRecord {
    fn from(c: GaussianComponent) -> Self {
        // nalgebra is column-major; store row-major
        let covariance = c.covariance.transpose().as_slice().to_vec();
        ComponentRecord {
            mean: c.mean,
            covariance,
            regularization: c.regularization,
            count: c.count,
        }
    }
}

impl TryFrom<ComponentRecord> for GaussianComponent {
    type Error = Error;

    fn try_from(r: ComponentRecord) -> Result<Self> {
        let d = r.mean.len();
        if r.covariance.len() != d * d {
            return Err(Error::Shape(format!(
                "covariance of {} entries for dimension {d}",
                r.covariance.len()
            )));
        }
        let cov = DMatrix::from_row_slice(d, d, &r.covariance);
        GaussianComponent::factor(r.mean, cov, r.regularization, r.count)
    }
}

impl GaussianComponent {
    fn factor(
        mean: Vec<f64>,
        covariance: DMatrix<f64>,
        regularization: f64,
        count: usize,
    ) -> Result<Self> {
        let chol = covariance.clone().cholesky().ok_or_else(|| {
            Error::Numerical("prototype covariance is not positive definite".into())
        })?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            covariance,
            regularization,
            count,
            chol_lower: l,
            log_det,
        })
    }

    /// Mean and unbiased covariance of `points` plus `reg·I`. The
    /// regularization is escalated tenfold up to three times if the
    /// factorization fails.
    pub fn fit(points: &[&[f64]], reg: f64) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Shape(format!(
                "a prototype needs at least 2 points, got {n}"
            )));
        }
        let d = points[0].len();
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(*p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for p in points {
            let c = DVector::from_iterator(d, p.iter().zip(&mean).map(|(v, m)| v - m));
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        // exact symmetry
        cov = (&cov + cov.transpose()) * 0.5;

        let mut lambda = reg;
        for attempt in 0..4 {
            let regd = &cov + DMatrix::<f64>::identity(d, d) * lambda;
            match Self::factor(mean.clone(), regd, lambda, n) {
                Ok(c) => return Ok(c),
                Err(_) if attempt < 3 => {
                    log::warn!(
                        "prototype covariance not positive definite, raising regularization"
                    );
                    lambda *= 10.0;
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on its last attempt")
    }

    /// Component with a given mean and (row-major, already regularized)
    /// covariance.
    pub fn from_moments(mean: Vec<f64>, covariance: &[f64]) -> Result<Self> {
        Self::try_from(ComponentRecord {
            mean,
            covariance: covariance.to_vec(),
            regularization: 0.0,
            count: 0,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Regularized covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        self.covariance.transpose().as_slice().to_vec()
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Squared Mahalanobis distance via a triangular solve.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(self.dim(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        let y = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        -0.5 * self.mahalanobis_sq(x) - 0.5 * self.log_det
    }

    /// Explicit inverse, row-major. Scoring never uses it.
    pub fn inverse(&self) -> Vec<f64> {
        let chol = nalgebra::linalg::Cholesky::new(self.covariance.clone())
            .expect("factored at construction");
        chol.inverse().transpose().as_slice().to_vec()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskPrototypeSet {
    pub task: usize,
    pub components: Vec<GaussianComponent>,
    pub regularization: f64,
    /// Chosen percentile of this task's own training scores.
    pub calibration_score: f64,
}

impl TaskPrototypeSet {
    pub fn score(&self, x: &[f64]) -> f64 {
        task_score(x, self)
    }
}

/// Base shrinkage `max(1e-3 · trace(Σ)/D, 1e-6)` from the overall sample
/// covariance of the task's features.
pub fn regularization_for(features: &[Vec<f64>]) -> f64 {
    let n = features.len();
    if n < 2 {
        return 1e-6;
    }
    let d = features[0].len();
    let mean = mean_of(features.iter(), d);
    let trace: f64 = features.iter().map(|f| sq_dist(f, &mean)).sum::<f64>() / (n - 1) as f64;
    (1e-3 * trace / d as f64).max(1e-6)
}

/// Folds clusters with fewer than two members into the nearest remaining
/// cluster (by mean) and relabels to `0..k'`.
fn merge_small_clusters(features: &[Vec<f64>], assignments: &[usize]) -> Vec<usize> {
    let dim = features[0].len();
    let mut labels = assignments.to_vec();
    loop {
        let mut ids: Vec<usize> = labels.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() <= 1 {
            break;
        }
        let size = |c: usize| labels.iter().filter(|&&a| a == c).count();
        let Some(&small) = ids.iter().find(|&&c| size(c) < 2) else {
            break;
        };
        let mean_for = |c: usize| {
            mean_of(
                features
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &a)| a == c)
                    .map(|(f, _)| f),
                dim,
            )
        };
        let m = mean_for(small);
        let target = ids
            .iter()
            .filter(|&&c| c != small)
            .map(|&c| (c, sq_dist(&m, &mean_for(c))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .expect("at least two clusters");
        labels
            .iter_mut()
            .filter(|a| **a == small)
            .for_each(|a| *a = target);
    }
    let mut ids = labels.clone();
    ids.sort_unstable();
    ids.dedup();
    labels
        .iter()
        .map(|a| ids.binary_search(a).expect("label present"))
        .collect()
}

/// Fits one Gaussian component per cluster and calibrates the task's
/// own-score percentile (`percentile` is in percent units).
pub fn build_prototypes(
    task: usize,
    features: &[Vec<f64>],
    assignments: &[usize],
    percentile: f64,
) -> Result<TaskPrototypeSet> {
    if features.len() < 2 {
        return Err(Error::Shape(format!(
            "task {task}: prototypes need at least 2 features, got {}",
            features.len()
        )));
    }
    if assignments.len() != features.len() {
        return Err(Error::Shape("one assignment per feature required".into()));
    }
    let labels = merge_small_clusters(features, assignments);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let reg = regularization_for(features);
    let components = (0..k)
        .map(|c| {
            let pts: Vec<&[f64]> = features
                .iter()
                .zip(&labels)
                .filter(|(_, &a)| a == c)
                .map(|(f, _)| f.as_slice())
                .collect();
            GaussianComponent::fit(&pts, reg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = TaskPrototypeSet {
        task,
        components,
        regularization: reg,
        calibration_score: 0.0,
    };
    let scores: Vec<f64> = features.iter().map(|f| task_score(f, &set)).collect();
    set.calibration_score = percentile_of(&scores, percentile)?;
    Ok(set)
}

/// Best component's `-½ d² - ½ ln|Σ|`.
pub fn task_score(x: &[f64], set: &TaskPrototypeSet) -> f64 {
    set.components
        .iter()
        .map(|c| c.score(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDecision {
    /// `None` routes the sample to the frozen encoder.
    pub task: Option<usize>,
    pub max_score: f64,
    pub scores: Vec<(usize, f64)>,
}

/// Argmax task by score (ties to the lower task index), or fallback when
/// the best score is below `threshold`.
pub fn identify_task(x: &[f64], sets: &[TaskPrototypeSet], threshold: f64) -> Result<TaskDecision> {
    if sets.is_empty() {
        return Err(Error::Lookup("no task prototypes registered".into()));
    }
    let mut scores: Vec<(usize, f64)> = sets.iter().map(|s| (s.task, task_score(x, s))).collect();
    scores.sort_by_key(|&(t, _)| t);
    let (mut best_task, mut best) = scores[0];
    for &(t, s) in &scores[1..] {
        if s > best {
            best = s;
            best_task = t;
        }
    }
    Ok(TaskDecision {
        task: (best >= threshold).then_some(best_task),
        max_score: best,
        scores,
    })
}

/// Linear-interpolation percentile; `q` in percent, position
/// `q/100 · (n-1)` between order statistics.
pub fn percentile_of(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Shape("percentile of an empty score list".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Config(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Minimum over tasks of each task's `q`-th percentile own score.
pub fn calibrate_threshold(per_task_scores: &[Vec<f64>], q: f64) -> Result<f64> {
    if per_task_scores.is_empty() {
        return Err(Error::Shape("threshold calibration without tasks".into()));
    }
    let mut delta = f64::INFINITY;
    for (t, scores) in per_task_scores.iter().enumerate() {
        if scores.len() < 20 {
            log::warn!(
                "threshold calibration: task {t} has only {} scores",
                scores.len()
            );
        }
        delta = delta.min(percentile_of(scores, q)?);
    }
    Ok(delta)
}

/// Threshold from the stored per-task calibration scores.
pub fn threshold_from_sets(sets: &[TaskPrototypeSet]) -> f64 {
    sets.iter()
        .map(|s| s.calibration_score)
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::gaussian_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gauss-Jordan inverse with partial pivoting, independent of nalgebra.
    fn gauss_jordan_inverse(a: &[f64], n: usize) -> Vec<f64> {
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = a[i * n..(i + 1) * n].to_vec();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
                .unwrap();
            m.swap(col, piv);
            let p = m[col][col];
            m[col].iter_mut().for_each(|v| *v /= p);
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    let pivot_row = m[col].clone();
                    for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        m.into_iter().flat_map(|r| r[n..].to_vec()).collect()
    }

    fn blob(rng: &mut ChaCha8Rng, center: &[f64], std: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                gaussian_vec(rng, center.len(), std)
                    .iter()
                    .zip(center)
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_cluster_center_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = blob(&mut rng, &[1.0, -2.0, 0.5], 1.0, 40);
        let km = kmeans(&pts, 1, 7, 50).unwrap();
        let mean = mean_of(pts.iter(), 3);
        for (a, b) in km.centers[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_recovered_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.1, 30);
        pts.extend(blob(&mut rng, &[10.0, 10.0], 0.1, 30));
        let km = kmeans(&pts, 2, 3, 100).unwrap();
        let first = km.assignments[0];
        assert!(km.assignments[..30].iter().all(|&a| a == first));
        assert!(km.assignments[30..].iter().all(|&a| a != first));
        assert_eq!(km, kmeans(&pts, 2, 3, 100).unwrap());
    }

    #[test]
    fn kmeans_reduces_k_for_tiny_sets() {
        let pts = vec![vec![0.0], vec![1.0]];
        let km = kmeans(&pts, 5, 0, 10).unwrap();
        assert_eq!(km.centers.len(), 2);
        assert!(kmeans(&[], 2, 0, 10).is_err());
    }

    #[test]
    fn two_point_cluster_hand_example() {
        let pts: Vec<&[f64]> = vec![&[0.0, 0.0], &[2.0, 0.0]];
        let c = GaussianComponent::fit(&pts, 1e-6).unwrap();
        assert_eq!(c.mean(), &[1.0, 0.0]);
        let cov = c.covariance();
        assert!((cov[0] - (2.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(cov[1], 0.0);
        assert_eq!(cov[2], 0.0);
        assert!((cov[3] - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn identical_points_give_scaled_identity() {
        let p = [0.5, -1.0, 2.0];
        let pts: Vec<&[f64]> = vec![&p; 5];
        let c = GaussianComponent::fit(&pts, 0.01).unwrap();
        let cov = c.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 0.01 } else { 0.0 };
                assert!((cov[i * 3 + j] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn covariance_matches_naive_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = blob(&mut rng, &[1.0, 2.0, 3.0, 4.0], 0.7, 50);
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let c = GaussianComponent::fit(&refs, 1e-6).unwrap();
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..4)
            .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n)
            .collect();
        let cov = c.covariance();
        for i in 0..4 {
            for j in 0..4 {
                let naive: f64 = pts
                    .iter()
                    .map(|p| (p[i] - mean[i]) * (p[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                let reg = if i == j { 1e-6 } else { 0.0 };
                assert!((cov[i * 4 + j] - naive - reg).abs() < 1e-10);
                assert!((cov[i * 4 + j] - cov[j * 4 + i]).abs() < 1e-10);
            }
        }
        let inv = c.inverse();
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = (0..4).map(|k| cov[i * 4 + k] * inv[k * 4 + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-8);
            }
        }
    }

    fn set_of(components: Vec<GaussianComponent>) -> TaskPrototypeSet {
        TaskPrototypeSet {
            task: 0,
            components,
            regularization: 0.0,
            calibration_score: 0.0,
        }
    }

    fn component(mean: Vec<f64>, cov_row_major: Vec<f64>) -> GaussianComponent {
        let d = mean.len();
        GaussianComponent::factor(mean, DMatrix::from_row_slice(d, d, &cov_row_major), 0.0, 2)
            .unwrap()
    }

    #[test]
    fn score_hand_examples() {
        let c = component(vec![1.0, 2.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(task_score(&[1.0, 2.0], &set_of(vec![c])), 0.0);

        let c = component(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]);
        let s = task_score(&[2.0, 0.0], &set_of(vec![c]));
        assert!((s - (-0.5 - 0.5 * 4f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn score_matches_explicit_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 5;
        let comps: Vec<GaussianComponent> = (0..3)
            .map(|k| {
                let pts = blob(&mut rng, &vec![k as f64; d], 0.5 + k as f64 * 0.3, 30);
                let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
                GaussianComponent::fit(&refs, 1e-4).unwrap()
            })
            .collect();
        let set = set_of(comps.clone());
        for _ in 0..50 {
            let x = gaussian_vec(&mut rng, d, 1.5);
            let brute = comps
                .iter()
                .map(|c| {
                    let inv = gauss_jordan_inverse(&c.covariance(), d);
                    let diff: Vec<f64> = x.iter().zip(c.mean()).map(|(a, b)| a - b).collect();
                    let mut d2 = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            d2 += diff[i] * inv[i * d + j] * diff[j];
                        }
                    }
                    // log-det through elimination on a copy
                    let mut m = c.covariance();
                    let mut logdet = 0.0;
                    for col in 0..d {
                        let p = m[col * d + col];
                        logdet += p.ln();
                        for r in col + 1..d {
                            let f = m[r * d + col] / p;
                            for k in col..d {
                                m[r * d + k] -= f * m[col * d + k];
                            }
                        }
                    }
                    -0.5 * d2 - 0.5 * logdet
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((task_score(&x, &set) - brute).abs() < 1e-8);
        }
    }

    #[test]
    fn identify_task_basics() {
        let a = TaskPrototypeSet {
            task: 0,
            ..set_of(vec![component(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])])
        };
        let d = identify_task(&[0.1, 0.0], std::slice::from_ref(&a), -10.0).unwrap();
        assert_eq!(d.task, Some(0));
        let d = identify_task(&[0.1, 0.0], std::slice::from_ref(&a), f64::INFINITY).unwrap();
        assert_eq!(d.task, None);
        assert!(identify_task(&[0.0, 0.0], &[], 0.0).is_err());

        // equal scores go to the lower task index
        let b = TaskPrototypeSet {
            task: 1,
            ..a.clone()
        };
        let d = identify_task(&[0.3, 0.3], &[b, a], -10.0).unwrap();
        assert_eq!(d.task, Some(0));
    }

    #[test]
    fn separated_tasks_route_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let sets: Vec<TaskPrototypeSet> = (0..2)
            .map(|t| {
                let pts = blob(&mut rng, &vec![10.0 * t as f64; d], 1.0, 300);
                let km = kmeans(&pts, 3, t as u64, 100).unwrap();
                build_prototypes(t, &pts, &km.assignments, 0.5).unwrap()
            })
            .collect();
        let delta = threshold_from_sets(&sets);
        let hits = (0..1000)
            .filter(|_| {
                let x = blob(&mut rng, &vec![10.0; d], 1.0, 1).remove(0);
                identify_task(&x, &sets, delta).unwrap().task == Some(1)
            })
            .count();
        assert!(hits >= 990, "{hits}");
    }

    #[test]
    fn percentile_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile_of(&scores, 0.5).unwrap() - 1.495).abs() < 1e-12);
        assert_eq!(percentile_of(&scores, 0.0).unwrap(), 1.0);
        assert_eq!(percentile_of(&scores, 100.0).unwrap(), 100.0);
        let two = vec![vec![3.0; 20], vec![5.0; 20]];
        assert_eq!(calibrate_threshold(&two, 0.5).unwrap(), 3.0);
        assert!(calibrate_threshold(&[vec![]], 0.5).is_err());
    }

    #[test]
    fn singleton_clusters_are_merged() {
        let pts = vec![vec![0.0], vec![0.1], vec![0.2], vec![5.0]];
        let set = build_prototypes(0, &pts, &[0, 0, 0, 1], 0.5).unwrap();
        assert_eq!(set.components.len(), 1);
        assert_eq!(set.components[0].count(), 4);
    }

    #[test]
    fn components_round_trip_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let pts = blob(&mut rng, &[0.0; 3], 1.0, 20);
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let c = GaussianComponent::fit(&refs, 1e-3).unwrap();
        let back: GaussianComponent =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        let x = [0.3, -0.2, 1.0];
        assert_eq!(c.score(&x), back.score(&x));
    }
}
