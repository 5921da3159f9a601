use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, MaskOptimizer, MaskTrainConfig, PruneMode, SgdConfig};
use crate::autodiff::{argmax_rows, AdamState, DenseNetwork, Graph, LayerVars, OptimizerState, Tensor, Var};
use crate::datasets::TrainingView;
use crate::error::{Error, Result};
use crate::masking::{MaskSet, MaskedModel};
use crate::taskdata::{batch_contrastive_loss, sample_contrastive_batch, ContrastiveBatch, ContrastiveConfig, TaskDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    /// Accuracy on the minibatches as they were trained.
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Share of masked weights with a deterministic gate above threshold.
    pub keep_ratio: Option<f64>,
    pub empty_batches: usize,
    /// Anchors whose negative pool was empty.
    pub empty_negative_pools: usize,
}

pub fn write_curve<W: std::io::Write>(records: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "epoch",
        "loss",
        "cross_entropy",
        "contrastive",
        "train_accuracy",
        "eval_accuracy",
        "keep_ratio",
        "empty_batches",
        "empty_negative_pools",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.cross_entropy.to_string(),
            r.contrastive.to_string(),
            r.train_accuracy.to_string(),
            opt(r.eval_accuracy),
            opt(r.keep_ratio),
            r.empty_batches.to_string(),
            r.empty_negative_pools.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    All,
    LastLayer,
}

/// Contrastive term added to a training loss.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveTerm<'a> {
    /// Cluster id of every row of the training view.
    pub clusters: &'a [usize],
    pub cfg: &'a ContrastiveConfig,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSpec<'a> {
    pub sgd: &'a SgdConfig,
    pub seed: u64,
    pub trainable: Trainable,
    /// Fixed binary masks per layer; masked-out weights are zeroed and stay 0.
    pub masks: Option<&'a [Option<Vec<bool>>]>,
    /// Rows of the view to train on (all rows when `None`).
    pub members: Option<&'a [usize]>,
    pub contrastive: Option<ContrastiveTerm<'a>>,
    pub eval: Option<TrainingView<'a>>,
}

impl<'a> TrainSpec<'a> {
    pub fn new(sgd: &'a SgdConfig, seed: u64) -> Self {
        Self {
            sgd,
            seed,
            trainable: Trainable::All,
            masks: None,
            members: None,
            contrastive: None,
            eval: None,
        }
    }
}

fn apply_masks(net: &mut DenseNetwork, masks: &[Option<Vec<bool>>]) -> Result<()> {
    if masks.len() != net.layers().len() {
        return Err(Error::shape("train", "one mask slot per layer required"));
    }
    for (layer, mask) in net.layers_mut().iter_mut().zip(masks) {
        if let Some(bits) = mask {
            if bits.len() != layer.weight.len() {
                return Err(Error::shape("train", "mask length differs from weight count"));
            }
            for (w, &keep) in layer.weight.data_mut().iter_mut().zip(bits) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
    Ok(())
}

fn finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

fn empty_negative_count(batch: &ContrastiveBatch) -> usize {
    batch.anchors.iter().filter(|a| a.negatives.is_empty()).count()
}

/// Rows for one step: the minibatch followed by the contrastive batch's rows.
fn step_rows(batch: &[usize], contrastive: Option<&ContrastiveBatch>) -> Vec<usize> {
    let mut rows = batch.to_vec();
    if let Some(c) = contrastive {
        rows.extend(c.indices());
    }
    rows
}

/// Cross-entropy on the leading `labels.len()` rows plus `beta` times the
/// contrastive loss on the trailing rows. Returns `(loss, ce, con, correct)`.
fn step_loss(
    graph: &mut Graph,
    logits: Var,
    embedding: Var,
    labels: &[usize],
    contrastive: Option<(&ContrastiveBatch, f64)>,
) -> Result<(Var, Var, Option<Var>, usize)> {
    let b = labels.len();
    let total_rows = graph.value(logits).rows();
    let head = if total_rows == b {
        logits
    } else {
        graph.gather_rows(logits, &(0..b).collect::<Vec<_>>())?
    };
    let correct = argmax_rows(graph.value(head)).iter().zip(labels).filter(|(p, y)| p == y).count();
    let ce = graph.cross_entropy(head, labels)?;
    let mut loss = ce;
    let mut con = None;
    if let Some((batch, beta)) = contrastive {
        if !batch.is_empty() && total_rows > b {
            let tail = graph.gather_rows(embedding, &(b..total_rows).collect::<Vec<_>>())?;
            if let Some(c) = batch_contrastive_loss(graph, batch, tail)? {
                let weighted = graph.scale(c, beta);
                loss = graph.add(loss, weighted)?;
                con = Some(c);
            }
        }
    }
    Ok((loss, ce, con, correct))
}

/// Minibatch SGD on cross-entropy (plus an optional contrastive term) over
/// the selected rows of `view`.
pub fn train_network(
    mut net: DenseNetwork,
    view: TrainingView<'_>,
    spec: &TrainSpec<'_>,
) -> Result<(DenseNetwork, Vec<EpochRecord>)> {
    let sgd = spec.sgd;
    sgd.validate("train")?;
    if view.inputs.cols() != net.input_dim() {
        return Err(Error::shape("train", "input width differs from the network"));
    }
    let members: Vec<usize> = spec.members.map_or_else(|| (0..view.labels.len()).collect(), <[usize]>::to_vec);
    if let Some(masks) = spec.masks {
        apply_masks(&mut net, masks)?;
    }
    let layers = net.layers().len();
    let trainable: Vec<bool> = (0..layers)
        .map(|l| spec.trainable == Trainable::All || l + 1 == layers)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = OptimizerState::new(sgd.learning_rate, sgd.momentum, sgd.weight_decay)?;
    let mut curve = Vec::with_capacity(sgd.epochs);

    for epoch in 0..sgd.epochs {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut con_sum, mut correct, mut steps, mut empty) = (0.0, 0.0, 0.0, 0, 0, 0);
        let mut empty_negatives = 0;
        for batch in order.chunks(sgd.batch_size) {
            let cbatch = match spec.contrastive {
                Some(term) => Some(sample_contrastive_batch(view.labels, term.clusters, &members, term.cfg, &mut rng)?),
                None => None,
            };
            if cbatch.as_ref().is_some_and(ContrastiveBatch::is_empty) {
                empty += 1;
            }
            empty_negatives += cbatch.as_ref().map_or(0, empty_negative_count);
            let rows = step_rows(batch, cbatch.as_ref());
            let labels: Vec<usize> = batch.iter().map(|&i| view.labels[i]).collect();
            let mut graph = Graph::new();
            let x = graph.constant(view.inputs.select_rows(&rows));
            let vars: Vec<LayerVars> = net
                .layers()
                .iter()
                .zip(&trainable)
                .map(|(l, &t)| {
                    let (w, b) = (l.weight.clone(), l.bias.clone());
                    if t {
                        LayerVars {
                            weight: graph.param(w),
                            bias: graph.param(b),
                        }
                    } else {
                        LayerVars {
                            weight: graph.constant(w),
                            bias: graph.constant(b),
                        }
                    }
                })
                .collect();
            let (logits, embedding) = net.forward_bound(&mut graph, &vars, x)?;
            let con_arg = cbatch.as_ref().zip(spec.contrastive.map(|t| t.beta));
            let (loss, ce, con, ok) = step_loss(&mut graph, logits, embedding, &labels, con_arg)?;
            let loss_value = graph.value(loss).item();
            finite(loss_value, epoch)?;
            loss_sum += loss_value;
            ce_sum += graph.value(ce).item();
            con_sum += con.map_or(0.0, |c| graph.value(c).item());
            correct += ok;
            steps += 1;

            let grads = graph.backward(loss)?;
            let mut owned: Vec<Vec<f64>> = Vec::new();
            for (l, v) in vars.iter().enumerate().filter(|(l, _)| trainable[*l]) {
                let layer = &net.layers()[l];
                let mut gw = grads.get_or_zeros(v.weight, layer.weight.len());
                if let Some(Some(bits)) = spec.masks.map(|m| &m[l]) {
                    for (g, &keep) in gw.iter_mut().zip(bits) {
                        if !keep {
                            *g = 0.0;
                        }
                    }
                }
                owned.push(gw);
                owned.push(grads.get_or_zeros(v.bias, layer.bias.len()));
            }
            let grad_refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = Vec::new();
            for (l, layer) in net.layers_mut().iter_mut().enumerate() {
                if trainable[l] {
                    params.push(layer.weight.data_mut());
                    params.push(layer.bias.data_mut());
                }
            }
            opt.step(&mut params, &grad_refs)?;
        }
        if spec.contrastive.is_some() && steps > 0 && empty == steps {
            return Err(Error::Sampling(format!(
                "every contrastive batch in epoch {epoch} was empty; adjust k, P or N"
            )));
        }
        let eval_accuracy = match &spec.eval {
            Some(v) => Some(crate::eval::accuracy(&net.predict(v.inputs)?, v.labels)),
            None => None,
        };
        let steps_f = steps.max(1) as f64;
        curve.push(EpochRecord {
            epoch,
            loss: loss_sum / steps_f,
            cross_entropy: ce_sum / steps_f,
            contrastive: con_sum / steps_f,
            train_accuracy: correct as f64 / members.len().max(1) as f64,
            eval_accuracy,
            keep_ratio: None,
            empty_batches: empty,
            empty_negative_pools: empty_negatives,
        });
    }
    Ok((net, curve))
}

/// Standard cross-entropy training of a fresh `mlp` with the given hidden
/// widths.
pub fn train_erm(
    view: TrainingView<'_>,
    hidden: &[usize],
    sgd: &SgdConfig,
    seed: u64,
    eval: Option<TrainingView<'_>>,
) -> Result<(DenseNetwork, Vec<EpochRecord>)> {
    let mut sizes = vec![view.inputs.cols()];
    sizes.extend_from_slice(hidden);
    sizes.push(view.num_classes);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    let net = DenseNetwork::mlp(&sizes, &mut init_rng)?;
    let mut spec = TrainSpec::new(sgd, derive_seed(seed, "erm"));
    spec.eval = eval;
    train_network(net, view, &spec)
}

fn deterministic_keep_ratio(masks: &MaskSet) -> f64 {
    let total = masks.total_weights().max(1);
    let kept: usize = masks
        .deterministic_gates()
        .iter()
        .map(|g| g.iter().filter(|&&s| s > masks.threshold()).count())
        .sum();
    kept as f64 / total as f64
}

enum LogitOptimizer {
    Sgd(OptimizerState),
    Adam(AdamState),
}

/// Trains mask logits over the frozen `erm` weights on the task dataset with
/// `L = CE + alpha * sparsity + beta * L_con`.
pub fn train_mask(
    erm: &DenseNetwork,
    view: TrainingView<'_>,
    clusters: &[usize],
    task: &TaskDataset,
    cfg: &MaskTrainConfig,
    contrastive: &ContrastiveConfig,
    seed: u64,
) -> Result<(MaskedModel, Vec<EpochRecord>)> {
    if clusters.len() != view.labels.len() {
        return Err(Error::shape("train_mask", "one cluster id per training row required"));
    }
    let masks = MaskSet::init(erm, &cfg.gates)?;
    let mut model = MaskedModel::new(erm.clone(), masks, derive_seed(seed, "gumbel"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mask-batches"));
    let mut opt = match cfg.optimizer {
        MaskOptimizer::Sgd => LogitOptimizer::Sgd(OptimizerState::new(cfg.learning_rate, cfg.momentum, 0.0)?),
        MaskOptimizer::Adam => LogitOptimizer::Adam(AdamState::new(cfg.learning_rate)?),
    };
    let members = &task.members;
    let use_con = cfg.beta > 0.0;
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut con_sum, mut correct, mut steps, mut empty) = (0.0, 0.0, 0.0, 0, 0, 0);
        let mut empty_negatives = 0;
        for batch in order.chunks(cfg.batch_size) {
            let cbatch = if use_con {
                Some(sample_contrastive_batch(view.labels, clusters, members, contrastive, &mut rng)?)
            } else {
                None
            };
            if cbatch.as_ref().is_some_and(ContrastiveBatch::is_empty) {
                empty += 1;
            }
            empty_negatives += cbatch.as_ref().map_or(0, empty_negative_count);
            let rows = step_rows(batch, cbatch.as_ref());
            let labels: Vec<usize> = batch.iter().map(|&i| view.labels[i]).collect();
            let noise = model.draw_noise();
            let mut graph = Graph::new();
            let x = graph.constant(view.inputs.select_rows(&rows));
            let fwd = model.forward_with_noise(&mut graph, x, Some(noise))?;
            let (mut loss, ce, con, ok) = step_loss(
                &mut graph,
                fwd.logits,
                fwd.embedding,
                &labels,
                cbatch.as_ref().map(|b| (b, cfg.beta)),
            )?;
            if cfg.alpha > 0.0 {
                if let Some(sp) = MaskedModel::sparsity_term(&mut graph, &fwd.mask_logits, cfg.sparsity)? {
                    let sp = graph.scale(sp, cfg.alpha);
                    loss = graph.add(loss, sp)?;
                }
            }
            let loss_value = graph.value(loss).item();
            finite(loss_value, epoch)?;
            loss_sum += loss_value;
            ce_sum += graph.value(ce).item();
            con_sum += con.map_or(0.0, |c| graph.value(c).item());
            correct += ok;
            steps += 1;

            let grads = graph.backward(loss)?;
            let owned: Vec<Vec<f64>> = fwd
                .mask_logits
                .iter()
                .zip(model.masks().logits())
                .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
                .collect();
            let grad_refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
            let masks = model.masks_mut();
            let mut params: Vec<&mut [f64]> = masks.logits_mut().iter_mut().map(Tensor::data_mut).collect();
            match &mut opt {
                LogitOptimizer::Sgd(o) => o.step(&mut params, &grad_refs)?,
                LogitOptimizer::Adam(o) => o.step(&mut params, &grad_refs)?,
            }
            masks.clamp_logits(cfg.logit_clamp);
        }
        if use_con && steps > 0 && empty == steps {
            return Err(Error::Sampling(format!(
                "every contrastive batch in epoch {epoch} was empty; adjust k, P or N"
            )));
        }
        let steps_f = steps.max(1) as f64;
        curve.push(EpochRecord {
            epoch,
            loss: loss_sum / steps_f,
            cross_entropy: ce_sum / steps_f,
            contrastive: con_sum / steps_f,
            train_accuracy: correct as f64 / members.len().max(1) as f64,
            eval_accuracy: None,
            keep_ratio: Some(deterministic_keep_ratio(model.masks())),
            empty_batches: empty,
            empty_negative_pools: empty_negatives,
        });
    }
    Ok((model, curve))
}

/// A binarized mask and the subnetwork it selects, before fine-tuning.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub masks: MaskSet,
    pub subnetwork: DenseNetwork,
    pub layer_masks: Vec<Option<Vec<bool>>>,
    pub keep_ratio: f64,
}

/// Freezes the mask (thresholded or at a pruning ratio) and applies it.
pub fn extract(model: &MaskedModel, prune: PruneMode) -> Result<Extracted> {
    let mut model = model.clone();
    match prune {
        PruneMode::Threshold => model.masks_mut().freeze()?,
        PruneMode::Ratio { ratio } => model.masks_mut().freeze_pruned_fraction(ratio)?,
    }
    Ok(Extracted {
        subnetwork: model.finalize_subnetwork()?,
        layer_masks: model.layer_masks()?,
        keep_ratio: model.masks().keep_ratio()?,
        masks: model.masks().clone(),
    })
}

/// Fine-tunes an extracted subnetwork on the task dataset, keeping pruned
/// weights at zero.
pub fn finetune(
    extracted: &Extracted,
    view: TrainingView<'_>,
    task: &TaskDataset,
    sgd: &SgdConfig,
    contrastive: Option<ContrastiveTerm<'_>>,
    seed: u64,
) -> Result<(DenseNetwork, Vec<EpochRecord>)> {
    let mut spec = TrainSpec::new(sgd, derive_seed(seed, "finetune"));
    spec.masks = Some(&extracted.layer_masks);
    spec.members = Some(&task.members);
    spec.contrastive = contrastive;
    train_network(extracted.subnetwork.clone(), view, &spec)
}

pub fn extract_and_finetune(
    model: &MaskedModel,
    view: TrainingView<'_>,
    task: &TaskDataset,
    prune: PruneMode,
    sgd: &SgdConfig,
    contrastive: Option<ContrastiveTerm<'_>>,
    seed: u64,
) -> Result<(DenseNetwork, Extracted, Vec<EpochRecord>)> {
    let extracted = extract(model, prune)?;
    let (net, curve) = finetune(&extracted, view, task, sgd, contrastive, seed)?;
    Ok((net, extracted, curve))
}
