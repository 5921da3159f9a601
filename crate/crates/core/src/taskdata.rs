//! The class-balanced mask-training set and cluster-conditioned contrastive
//! batches.
//!
//! Per anchor `z` with positives `z⁺_1..z⁺_P` and negatives `z⁻_1..z⁻_N`
//! (all unit vectors), the contrastive loss is
//!
//! ```text
//! l = -Σ_i log( exp(z·z⁺_i/τ) / (Σ_p exp(z·z⁺_p/τ) + Σ_n exp(z·z⁻_n/τ)) )
//!   = P · LSE(s) - Σ_i s_i,        s = [z·z⁺, z·z⁻] / τ
//! ```

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::clustering::ClusterSummary;
use crate::error::{Error, Result};

/// Norm floor used when normalizing embeddings for the contrastive loss.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Minority,
    ClusterSampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    /// Indices into the parent dataset, ascending.
    pub members: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub per_class: usize,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `p = ceil(fraction * n / classes)`.
pub fn per_class_target(n: usize, classes: usize, fraction: f64) -> usize {
    (fraction * n as f64 / classes as f64).ceil() as usize
}

/// For every class `i`: all of `m_i`, then `floor((p - |m_i|) / |eligible|)`
/// class-`i` samples from every cluster in `I_i ∪ I_N`. The remainder is
/// taken one each from the largest eligible clusters (ties to the lower
/// index). Clusters that run out contribute what they have and the shortfall
/// moves round-robin to clusters with samples left.
pub fn build_task_dataset(
    labels: &[usize],
    assignments: &[usize],
    summary: &ClusterSummary,
    p: usize,
    rng: &mut impl Rng,
) -> Result<TaskDataset> {
    if labels.len() != assignments.len() {
        return Err(Error::shape("build_task_dataset", "labels and assignments differ in length"));
    }
    let classes = summary.dominant.len();
    let mut picked: BTreeMap<usize, Provenance> = BTreeMap::new();
    for class in 0..classes {
        let minority = &summary.minority[class];
        let available = labels.iter().filter(|&&y| y == class).count();
        if p > available {
            return Err(Error::TaskData {
                class,
                detail: format!("p = {p} exceeds the {available} samples of this class"),
            });
        }
        if p < minority.len() {
            return Err(Error::TaskData {
                class,
                detail: format!("p = {p} is below the minority set size {}", minority.len()),
            });
        }
        for &i in minority {
            picked.insert(i, Provenance::Minority);
        }
        let eligible = summary.eligible_clusters(class);
        let rest = p - minority.len();
        if rest == 0 {
            continue;
        }
        let mut pools: Vec<Vec<usize>> = eligible
            .iter()
            .map(|&c| {
                (0..labels.len())
                    .filter(|&i| labels[i] == class && assignments[i] == c)
                    .collect()
            })
            .collect();
        for pool in &mut pools {
            pool.shuffle(rng);
        }
        let e = eligible.len();
        let mut quota = vec![rest / e; e];
        let mut by_size: Vec<usize> = (0..e).collect();
        by_size.sort_by_key(|&j| (std::cmp::Reverse(summary.sizes[eligible[j]]), eligible[j]));
        for &j in by_size.iter().take(rest % e) {
            quota[j] += 1;
        }
        let mut take: Vec<usize> = quota.iter().zip(&pools).map(|(&q, pool)| q.min(pool.len())).collect();
        let mut shortfall = rest - take.iter().sum::<usize>();
        while shortfall > 0 {
            let before = shortfall;
            for j in 0..e {
                if shortfall > 0 && take[j] < pools[j].len() {
                    take[j] += 1;
                    shortfall -= 1;
                }
            }
            debug_assert!(shortfall < before, "availability was checked above");
        }
        for (pool, &t) in pools.iter().zip(&take) {
            for &i in &pool[..t] {
                picked.insert(i, Provenance::ClusterSampled);
            }
        }
    }
    let (members, provenance) = picked.into_iter().unzip();
    Ok(TaskDataset {
        members,
        provenance,
        per_class: p,
    })
}

/// Which samples count as positives and negatives for an anchor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRule {
    /// Positives: same class, other cluster. Negatives: same cluster.
    #[default]
    Cluster,
    /// As `Cluster`, but negatives must also differ in class.
    NegAblation,
    /// Positives: same class. Negatives: other class. Clusters are ignored.
    SupCon,
}

impl PoolRule {
    pub fn is_positive(self, anchor: usize, other: usize, labels: &[usize], clusters: &[usize]) -> bool {
        anchor != other
            && labels[anchor] == labels[other]
            && (self == PoolRule::SupCon || clusters[anchor] != clusters[other])
    }

    pub fn is_negative(self, anchor: usize, other: usize, labels: &[usize], clusters: &[usize]) -> bool {
        anchor != other
            && match self {
                PoolRule::Cluster => clusters[anchor] == clusters[other],
                PoolRule::NegAblation => clusters[anchor] == clusters[other] && labels[anchor] != labels[other],
                PoolRule::SupCon => labels[anchor] != labels[other],
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub anchors: usize,
    pub positives: usize,
    pub negatives: usize,
    pub temperature: f64,
    pub max_redraws: usize,
    pub rule: PoolRule,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            anchors: 8,
            positives: 4,
            negatives: 16,
            temperature: 0.1,
            max_redraws: 10,
            rule: PoolRule::Cluster,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("contrastive temperature must be > 0".into()));
        }
        if self.anchors == 0 || self.positives == 0 {
            return Err(Error::Config("need at least one anchor and one positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSample {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub anchors: Vec<AnchorSample>,
    pub temperature: f64,
    pub rule: PoolRule,
    pub warnings: Vec<String>,
}

impl ContrastiveBatch {
    /// Every dataset index referenced by the batch, ascending and unique.
    pub fn indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .anchors
            .iter()
            .flat_map(|a| std::iter::once(a.anchor).chain(a.positives.iter().copied()).chain(a.negatives.iter().copied()))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Draws anchors from distinct clusters (uniformly among samples when the rule
/// ignores clusters) and fills their positive and negative pools from
/// `members`, which index into `labels` and `clusters`.
pub fn sample_contrastive_batch(
    labels: &[usize],
    clusters: &[usize],
    members: &[usize],
    cfg: &ContrastiveConfig,
    rng: &mut impl Rng,
) -> Result<ContrastiveBatch> {
    cfg.validate()?;
    if labels.len() != clusters.len() {
        return Err(Error::shape("sample_contrastive_batch", "labels and clusters differ in length"));
    }
    if members.is_empty() {
        return Err(Error::Sampling("no samples to draw anchors from".into()));
    }
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in members {
        by_cluster.entry(clusters[i]).or_default().push(i);
    }
    let mut warnings = Vec::new();
    let anchor_sources: Vec<Vec<usize>> = if cfg.rule == PoolRule::SupCon {
        let count = cfg.anchors.min(members.len());
        members.choose_multiple(rng, count).map(|&i| vec![i]).collect()
    } else {
        let groups: Vec<&Vec<usize>> = by_cluster.values().collect();
        if cfg.anchors > groups.len() {
            warnings.push(format!(
                "{} anchors requested but only {} non-empty clusters",
                cfg.anchors,
                groups.len()
            ));
        }
        let count = cfg.anchors.min(groups.len());
        groups.choose_multiple(rng, count).map(|g| g.to_vec()).collect()
    };

    let mut anchors = Vec::new();
    for source in anchor_sources {
        let mut drawn = None;
        for _ in 0..=cfg.max_redraws {
            let a = *source.choose(rng).expect("non-empty cluster");
            let positives: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&j| cfg.rule.is_positive(a, j, labels, clusters))
                .collect();
            if !positives.is_empty() {
                drawn = Some((a, positives));
                break;
            }
            if cfg.rule == PoolRule::SupCon {
                break;
            }
        }
        let Some((a, positives)) = drawn else {
            warnings.push(format!(
                "cluster {}: no anchor with a non-empty positive pool; skipped",
                clusters[source[0]]
            ));
            continue;
        };
        let negatives: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&j| cfg.rule.is_negative(a, j, labels, clusters))
            .collect();
        if negatives.is_empty() {
            warnings.push(format!("anchor {a}: empty negative pool"));
        }
        anchors.push(AnchorSample {
            anchor: a,
            positives: positives.choose_multiple(rng, cfg.positives).copied().collect(),
            negatives: negatives.choose_multiple(rng, cfg.negatives).copied().collect(),
        });
    }
    Ok(ContrastiveBatch {
        anchors,
        temperature: cfg.temperature,
        rule: cfg.rule,
        warnings,
    })
}

/// Single-anchor loss on the graph. `anchor` is `[1 x d]`, `candidates` is
/// `[(P + N) x d]` with the positives first; both must already be unit rows.
pub fn contrastive_loss_graph(
    graph: &mut Graph,
    anchor: Var,
    candidates: Var,
    positives: usize,
    temperature: f64,
) -> Result<Var> {
    if positives == 0 {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    let sims = graph.matmul_t(anchor, candidates)?;
    let sims = graph.scale(sims, 1.0 / temperature);
    let lse = graph.log_sum_exp_rows(sims);
    let lse = graph.sum(lse);
    let lse = graph.scale(lse, positives as f64);
    let pos = graph.slice_cols(sims, 0, positives)?;
    let pos = graph.sum(pos);
    graph.sub(lse, pos)
}

/// Value of the single-anchor loss for unit vectors given as slices.
pub fn contrastive_loss(z: &[f64], positives: &[&[f64]], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config("contrastive temperature must be > 0".into()));
    }
    let mut graph = Graph::new();
    let a = graph.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
    let rows: Vec<Vec<f64>> = positives.iter().chain(negatives).map(|r| r.to_vec()).collect();
    if rows.is_empty() {
        return Ok(0.0);
    }
    let c = graph.constant(Tensor::from_rows(&rows)?);
    let loss = contrastive_loss_graph(&mut graph, a, c, positives.len(), temperature)?;
    Ok(graph.value(loss).item())
}

/// Sum of per-anchor losses. Row `r` of `embeddings` holds the raw embedding
/// of `batch.indices()[r]`; rows are L2-normalized here.
pub fn batch_contrastive_loss(graph: &mut Graph, batch: &ContrastiveBatch, embeddings: Var) -> Result<Option<Var>> {
    let index = batch.indices();
    if graph.value(embeddings).rows() != index.len() {
        return Err(Error::shape(
            "batch_contrastive_loss",
            format!("{} embedding rows for {} batch indices", graph.value(embeddings).rows(), index.len()),
        ));
    }
    let row = |i: usize| index.binary_search(&i).expect("index collected from the batch");
    let unit = graph.l2_normalize(embeddings, NORM_EPSILON);
    let mut total: Option<Var> = None;
    for a in &batch.anchors {
        if a.positives.is_empty() {
            continue;
        }
        let anchor = graph.gather_rows(unit, &[row(a.anchor)])?;
        let rows: Vec<usize> = a.positives.iter().chain(&a.negatives).map(|&i| row(i)).collect();
        let candidates = graph.gather_rows(unit, &rows)?;
        let l = contrastive_loss_graph(graph, anchor, candidates, a.positives.len(), batch.temperature)?;
        total = Some(match total {
            Some(t) => graph.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}
