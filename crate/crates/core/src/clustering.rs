//! k-means over embeddings, class-dominance labeling of clusters, minority
//! sets, and cluster purity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `[k x d]`.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &Tensor, centroids: &Tensor, exec: Execution) -> (Vec<usize>, Vec<f64>) {
    par::map_range(exec, points.rows(), |i| nearest(points.row(i), centroids))
        .into_iter()
        .unzip()
}

/// k-means++ seeding.
fn seed_centroids(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // floating drift can leave target past the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            pick
        } else {
            // all remaining points coincide with a centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

pub fn kmeans(points: &Tensor, cfg: &KMeansConfig) -> Result<ClusterModel> {
    kmeans_with(points, cfg, Execution::default())
}

/// k-means++ initialization followed by Lloyd iterations until the largest
/// centroid move drops below `tol` or `max_iter` is reached. Empty clusters
/// are re-seeded at the point farthest from its assigned centroid.
pub fn kmeans_with(points: &Tensor, cfg: &KMeansConfig, exec: Execution) -> Result<ClusterModel> {
    let (n, d, k) = (points.rows(), points.cols(), cfg.k);
    if k == 0 || k > n {
        return Err(Error::TooFewPoints { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let (mut assignments, mut dists) = assign(points, &centroids, exec);
    history.push(dists.iter().sum());

    while iterations < cfg.max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut next = centroids.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            let row = &mut next.data_mut()[c * d..(c + 1) * d];
            if counts[c] > 0 {
                for (v, s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *v = s / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken.push(far);
                row.copy_from_slice(points.row(far));
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(centroids.row(c), next.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        (assignments, dists) = assign(points, &centroids, exec);
        history.push(dists.iter().sum());
        if shift < cfg.tol {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        inertia: *history.last().expect("at least one assignment"),
        inertia_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLabel {
    Dominant(usize),
    Neutral,
}

/// Dominance labels, index sets, and minority sets for one clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub threshold: f64,
    pub labels: Vec<ClusterLabel>,
    pub sizes: Vec<usize>,
    /// `I_i`: indices of the clusters dominated by class `i`.
    pub dominant: Vec<Vec<usize>>,
    /// `I_N`: indices of the neutral clusters.
    pub neutral: Vec<usize>,
    /// `m_i`: class-`i` samples sitting in clusters dominated by another class.
    pub minority: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl ClusterSummary {
    /// Clusters a class-`class` sample may be drawn from: `I_i` and `I_N`.
    pub fn eligible_clusters(&self, class: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.dominant[class].iter().chain(&self.neutral).copied().collect();
        out.sort_unstable();
        out
    }

    pub fn minority_counts(&self) -> Vec<usize> {
        self.minority.iter().map(Vec::len).collect()
    }
}

/// Marks cluster `c` as dominated by class `i` when at least `threshold` of
/// its members have label `i`; otherwise neutral. Minority sets are filled
/// in as well.
pub fn label_clusters(
    assignments: &[usize],
    labels: &[usize],
    k: usize,
    num_classes: usize,
    threshold: f64,
) -> Result<ClusterSummary> {
    if assignments.len() != labels.len() {
        return Err(Error::shape("label_clusters", "assignments and labels differ in length"));
    }
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::Config("dominance threshold must lie in (0.5, 1]".into()));
    }
    let mut counts = vec![vec![0usize; num_classes]; k];
    for (&c, &y) in assignments.iter().zip(labels) {
        if c >= k || y >= num_classes {
            return Err(Error::shape("label_clusters", format!("cluster {c} / label {y} out of range")));
        }
        counts[c][y] += 1;
    }
    let mut summary = ClusterSummary {
        threshold,
        labels: Vec::with_capacity(k),
        sizes: counts.iter().map(|c| c.iter().sum()).collect(),
        dominant: vec![Vec::new(); num_classes],
        neutral: Vec::new(),
        minority: Vec::new(),
        warnings: Vec::new(),
    };
    for (c, per_class) in counts.iter().enumerate() {
        let size = summary.sizes[c];
        let label = if size == 0 {
            summary.warnings.push(format!("cluster {c} is empty; treated as neutral"));
            ClusterLabel::Neutral
        } else {
            per_class
                .iter()
                .position(|&m| m as f64 / size as f64 >= threshold)
                .map_or(ClusterLabel::Neutral, ClusterLabel::Dominant)
        };
        match label {
            ClusterLabel::Dominant(i) => summary.dominant[i].push(c),
            ClusterLabel::Neutral => summary.neutral.push(c),
        }
        summary.labels.push(label);
    }
    summary.minority = minority_sets(&summary, assignments, labels);
    Ok(summary)
}

/// `m_i = { samples with y = i in a cluster outside I_i and I_N }`.
pub fn minority_sets(summary: &ClusterSummary, assignments: &[usize], labels: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); summary.dominant.len()];
    for (i, (&c, &y)) in assignments.iter().zip(labels).enumerate() {
        if matches!(summary.labels[c], ClusterLabel::Dominant(d) if d != y) {
            out[y].push(i);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPurity {
    pub cluster: usize,
    pub size: usize,
    pub majority: usize,
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub clusters: Vec<ClusterPurity>,
    pub overall: f64,
}

/// Each cluster takes its most frequent label (ties to the smaller label);
/// purity is the fraction of members carrying it.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<Purity> {
    if assignments.len() != labels.len() {
        return Err(Error::shape("purity", "assignments and labels differ in length"));
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &y) in assignments.iter().zip(labels) {
        *table.entry(c).or_default().entry(y).or_insert(0) += 1;
    }
    let mut matched = 0;
    let clusters: Vec<ClusterPurity> = table
        .into_iter()
        .map(|(cluster, counts)| {
            let size: usize = counts.values().sum();
            let (&majority, &count) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("non-empty cluster");
            matched += count;
            ClusterPurity {
                cluster,
                size,
                majority,
                purity: count as f64 / size as f64,
            }
        })
        .collect();
    let overall = if labels.is_empty() {
        1.0
    } else {
        matched as f64 / labels.len() as f64
    };
    Ok(Purity { clusters, overall })
}
