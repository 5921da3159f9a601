//! Independent reference implementations and the check suites shared by the
//! focused test files and the acceptance target. Nothing in here calls the
//! library code it is used to check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use spurprune::autodiff::{Activation, DenseNetwork, Graph, Tensor, Var};
use spurprune::clustering::{kmeans, label_clusters, ClusterLabel, KMeansConfig};
use spurprune::masking::{
    binarize, gumbel_sigmoid_graph, gumbel_sigmoid_sample, MaskConfig, MaskSet, MaskedModel, SparsityForm,
};
use spurprune::taskdata::{
    batch_contrastive_loss, build_task_dataset, contrastive_loss, per_class_target, sample_contrastive_batch,
    AnchorSample, ContrastiveBatch, ContrastiveConfig, PoolRule,
};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so that gradients that are zero up
/// to rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
pub fn away_from_zero(n: usize, gap: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// finite differences

/// Worst relative error between reverse-mode gradients and central
/// differences of the forward value, over every element of every input.
pub fn graph_fd_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &vars);
    let grads = graph.backward(loss).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vs);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.len());
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
    }
    worst
}

/// Central differences of a plain function.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let hi = f(&p);
            p[i] = x[i] - FD_STEP;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// plain-f64 network and losses

/// One dense layer: `weight` is `[inputs x outputs]` row-major.
#[derive(Debug, Clone)]
pub struct PlainLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

pub fn plain_layers(net: &DenseNetwork) -> Vec<PlainLayer> {
    net.layers()
        .iter()
        .map(|l| PlainLayer {
            inputs: l.weight.rows(),
            outputs: l.weight.cols(),
            weight: l.weight.data().to_vec(),
            bias: l.bias.data().to_vec(),
            relu: l.activation == Activation::Relu,
        })
        .collect()
}

/// Logits, embedding (output of layer `embedding_layer`) and the smallest
/// absolute pre-activation of any ReLU unit.
pub fn plain_forward(layers: &[PlainLayer], x: &[Vec<f64>], embedding_layer: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let mut closest = f64::INFINITY;
    let mut logits = Vec::new();
    let mut embedding = Vec::new();
    for row in x {
        let mut h = row.clone();
        for (li, l) in layers.iter().enumerate() {
            let mut z = l.bias.clone();
            for (i, &hi) in h.iter().enumerate() {
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += hi * l.weight[i * l.outputs + o];
                }
            }
            if l.relu {
                closest = z.iter().fold(closest, |c, v| c.min(v.abs()));
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
            if li == embedding_layer {
                embedding.push(h.clone());
            }
        }
        logits.push(h);
    }
    (logits, embedding, closest)
}

/// Mean of `-log softmax(row)[y]`, written out directly.
pub fn plain_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        })
        .sum();
    total / labels.len() as f64
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_p -log( exp(z.p/t) / sum_{c in P u N} exp(z.c/t) )` by direct
/// summation, no stabilization.
pub fn plain_contrastive(z: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], t: f64) -> f64 {
    let denom: f64 = positives.iter().chain(negatives).map(|c| (dot(z, c) / t).exp()).sum();
    positives.iter().map(|p| -((dot(z, p) / t).exp() / denom).ln()).sum()
}

/// Sum over anchors with a non-empty positive pool, on normalized raw
/// embeddings keyed by dataset index.
pub fn plain_batch_contrastive(batch: &ContrastiveBatch, emb: &BTreeMap<usize, Vec<f64>>) -> f64 {
    batch
        .anchors
        .iter()
        .filter(|a| !a.positives.is_empty())
        .map(|a| {
            let z = unit(&emb[&a.anchor]);
            let pos: Vec<Vec<f64>> = a.positives.iter().map(|i| unit(&emb[i])).collect();
            let neg: Vec<Vec<f64>> = a.negatives.iter().map(|i| unit(&emb[i])).collect();
            plain_contrastive(&z, &pos, &neg, batch.temperature)
        })
        .sum()
}

pub fn plain_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// gradient suite

/// Random-instance checks of every differentiable primitive. Returns the
/// number of instances and the worst relative error.
pub fn primitive_suite(instances: usize, seed: u64) -> (usize, f64) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for _ in 0..instances {
        let rows = r.random_range(1..4);
        let cols = r.random_range(1..4);
        let inner = r.random_range(1..4);
        let a = matrix(rows, cols, uniform(rows * cols, -1.5, 1.5, &mut r));
        let b = matrix(rows, cols, uniform(rows * cols, -1.5, 1.5, &mut r));
        let weights = matrix(rows, cols, uniform(rows * cols, -1.0, 1.0, &mut r));
        let weigh = move |g: &mut Graph, v: Var, w: &Tensor| {
            let c = g.constant(w.clone());
            let m = g.mul(v, c).unwrap();
            g.sum(m)
        };
        let wv = weights.clone();
        let checks: Vec<f64> = vec![
            {
                let l = matrix(rows, inner, uniform(rows * inner, -1.0, 1.0, &mut r));
                let rr = matrix(inner, cols, uniform(inner * cols, -1.0, 1.0, &mut r));
                let w = wv.clone();
                graph_fd_error(&[l, rr], move |g, v| {
                    let m = g.matmul(v[0], v[1]).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let l = matrix(rows, inner, uniform(rows * inner, -1.0, 1.0, &mut r));
                let rr = matrix(cols, inner, uniform(inner * cols, -1.0, 1.0, &mut r));
                let w = wv.clone();
                graph_fd_error(&[l, rr], move |g, v| {
                    let m = g.matmul_t(v[0], v[1]).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let bias = Tensor::vector(uniform(cols, -1.0, 1.0, &mut r));
                let w = wv.clone();
                graph_fd_error(&[a.clone(), bias], move |g, v| {
                    let m = g.add_row(v[0], v[1]).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let w = wv.clone();
                graph_fd_error(&[a.clone(), b.clone()], move |g, v| {
                    let m = g.add(v[0], v[1]).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let w = wv.clone();
                graph_fd_error(&[a.clone(), b.clone()], move |g, v| {
                    let m = g.sub(v[0], v[1]).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let w = wv.clone();
                graph_fd_error(&[a.clone(), b.clone()], move |g, v| {
                    let m = g.mul(v[0], v[1]).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let f = r.random_range(-2.0..2.0);
                let w = wv.clone();
                graph_fd_error(&[a.clone()], move |g, v| {
                    let m = g.scale(v[0], f);
                    weigh(g, m, &w)
                })
            },
            {
                let x = matrix(rows, cols, away_from_zero(rows * cols, 0.05, 1.5, &mut r));
                let w = wv.clone();
                graph_fd_error(&[x], move |g, v| {
                    let m = g.relu(v[0]);
                    weigh(g, m, &w)
                })
            },
            {
                let w = wv.clone();
                graph_fd_error(&[a.clone()], move |g, v| {
                    let m = g.sigmoid(v[0]);
                    weigh(g, m, &w)
                })
            },
            {
                // sum of a product keeps the gradient input dependent
                graph_fd_error(&[a.clone(), b.clone()], |g, v| {
                    let m = g.mul(v[0], v[1]).unwrap();
                    g.sum(m)
                })
            },
            {
                let classes = cols.max(2);
                let logits = matrix(rows, classes, uniform(rows * classes, -2.0, 2.0, &mut r));
                let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
                graph_fd_error(&[logits], move |g, v| g.cross_entropy(v[0], &labels).unwrap())
            },
            {
                let x = matrix(rows, cols, away_from_zero(rows * cols, 0.2, 1.5, &mut r));
                let w = wv.clone();
                graph_fd_error(&[x], move |g, v| {
                    let m = g.l2_normalize(v[0], 1e-12);
                    weigh(g, m, &w)
                })
            },
            {
                let picks: Vec<usize> = (0..rows + 1).map(|_| r.random_range(0..rows)).collect();
                let w = matrix(picks.len(), cols, uniform(picks.len() * cols, -1.0, 1.0, &mut r));
                graph_fd_error(&[a.clone()], move |g, v| {
                    let m = g.gather_rows(v[0], &picks).unwrap();
                    weigh(g, m, &w)
                })
            },
            {
                let w = Tensor::vector(uniform(rows, -1.0, 1.0, &mut r));
                graph_fd_error(&[a.clone()], move |g, v| {
                    let m = g.log_sum_exp_rows(v[0]);
                    weigh(g, m, &w)
                })
            },
            {
                let start = r.random_range(0..cols);
                let end = r.random_range(start + 1..=cols);
                let w = matrix(rows, end - start, uniform(rows * (end - start), -1.0, 1.0, &mut r));
                graph_fd_error(&[a.clone()], move |g, v| {
                    let m = g.slice_cols(v[0], start, end).unwrap();
                    weigh(g, m, &w)
                })
            },
        ];
        count += checks.len();
        worst = checks.into_iter().fold(worst, f64::max);
    }
    (count, worst)
}

/// Network cross-entropy: graph gradients with respect to every weight and
/// bias against central differences of the plain forward pass. Also returns
/// the worst value mismatch.
pub fn cross_entropy_suite(instances: usize, seed: u64) -> (usize, f64, f64) {
    let mut r = rng(seed);
    let (mut done, mut worst, mut value_gap) = (0, 0.0f64, 0.0f64);
    while done < instances {
        let d = r.random_range(2..5);
        let h1 = r.random_range(2..6);
        let h2 = r.random_range(2..6);
        let classes = r.random_range(2..4);
        let n = r.random_range(1..6);
        let mut net = DenseNetwork::mlp(&[d, h1, h2, classes], &mut r).unwrap();
        for l in net.layers_mut() {
            let len = l.bias.len();
            l.bias = Tensor::vector(uniform(len, -0.3, 0.3, &mut r));
        }
        let x: Vec<Vec<f64>> = (0..n).map(|_| uniform(d, -1.0, 1.0, &mut r)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let layers = plain_layers(&net);
        let (logits, _, closest) = plain_forward(&layers, &x, net.embedding_layer());
        if closest < 1e-3 {
            continue;
        }
        let mut graph = Graph::new();
        let xv = graph.constant(Tensor::from_rows(&x).unwrap());
        let (out, _, vars) = net.forward(&mut graph, xv).unwrap();
        let loss = graph.cross_entropy(out, &labels).unwrap();
        value_gap = value_gap.max((graph.value(loss).item() - plain_cross_entropy(&logits, &labels)).abs());
        let grads = graph.backward(loss).unwrap();
        for (li, v) in vars.iter().enumerate() {
            for (is_bias, var) in [(false, v.weight), (true, v.bias)] {
                let base = if is_bias { &layers[li].bias } else { &layers[li].weight };
                let numeric = numeric_grad(base, |p| {
                    let mut ls = layers.clone();
                    if is_bias {
                        ls[li].bias = p.to_vec();
                    } else {
                        ls[li].weight = p.to_vec();
                    }
                    plain_cross_entropy(&plain_forward(&ls, &x, usize::MAX).0, &labels)
                });
                worst = worst.max(max_rel_err(grads.get(var).unwrap(), &numeric));
            }
        }
        done += 1;
    }
    (done, worst, value_gap)
}

/// A batch over dataset indices `0..n` with random roles.
pub fn random_batch(n: usize, max_p: usize, max_n: usize, temperature: f64, r: &mut impl Rng) -> ContrastiveBatch {
    let anchors = r.random_range(1..4).min(n);
    let mut ids: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    for _ in 0..anchors {
        ids.shuffle(r);
        let p = r.random_range(1..=max_p.min(n - 1));
        let q = r.random_range(0..=max_n.min(n - 1 - p));
        out.push(AnchorSample {
            anchor: ids[0],
            positives: ids[1..1 + p].to_vec(),
            negatives: ids[1 + p..1 + p + q].to_vec(),
        });
    }
    ContrastiveBatch {
        anchors: out,
        temperature,
        rule: PoolRule::Cluster,
        warnings: Vec::new(),
    }
}

/// Batch contrastive loss on raw embeddings: graph gradient against central
/// differences of the plain summation. Returns (instances, worst gradient
/// error, worst value gap).
pub fn contrastive_grad_suite(instances: usize, seed: u64) -> (usize, f64, f64) {
    let mut r = rng(seed);
    let (mut worst, mut gap) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = r.random_range(3..9);
        let d = r.random_range(2..5);
        let t = r.random_range(0.1..1.0);
        let batch = random_batch(n, 5, 5, t, &mut r);
        let idx = batch.indices();
        let raw: Vec<Vec<f64>> = idx.iter().map(|_| away_from_zero(d, 0.1, 1.0, &mut r)).collect();
        let flat: Vec<f64> = raw.concat();
        let plain = |p: &[f64]| {
            let emb: BTreeMap<usize, Vec<f64>> = idx.iter().enumerate().map(|(k, &i)| (i, p[k * d..(k + 1) * d].to_vec())).collect();
            plain_batch_contrastive(&batch, &emb)
        };
        let mut graph = Graph::new();
        let e = graph.param(matrix(idx.len(), d, flat.clone()));
        let loss = batch_contrastive_loss(&mut graph, &batch, e).unwrap().unwrap();
        gap = gap.max((graph.value(loss).item() - plain(&flat)).abs());
        let grads = graph.backward(loss).unwrap();
        worst = worst.max(max_rel_err(grads.get(e).unwrap(), &numeric_grad(&flat, plain)));
    }
    (instances, worst, gap)
}

/// The mask objective `CE + alpha * sum(pi) + beta * contrastive` on a masked
/// network with fixed Gumbel noise. The finite-difference reference is the
/// plain loss of the straight-through surrogate: gates `m = h0 - s0 + s(pi)`
/// with `h0`, `s0` frozen at the evaluation point, which has the same value
/// and, by construction, the gradient the estimator claims.
pub fn mask_loss_suite(instances: usize, seed: u64) -> (usize, f64, f64) {
    let mut r = rng(seed);
    let (mut done, mut worst, mut gap) = (0, 0.0f64, 0.0f64);
    while done < instances {
        let d = r.random_range(2..5);
        let h1 = r.random_range(2..6);
        let h2 = r.random_range(2..5);
        let classes = 2;
        let mut net = DenseNetwork::mlp(&[d, h1, h2, classes], &mut r).unwrap();
        for l in net.layers_mut() {
            let len = l.bias.len();
            l.bias = Tensor::vector(uniform(len, -0.3, 0.3, &mut r));
        }
        let tau = r.random_range(0.5..2.0);
        let mcfg = MaskConfig {
            init_logit: 0.0,
            gumbel_temperature: tau,
            threshold: 0.5,
            mask_classifier: r.random_bool(0.5),
        };
        let mut masks = MaskSet::init(&net, &mcfg).unwrap();
        for t in masks.logits_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&uniform(len, -2.0, 2.0, &mut r));
        }
        let pis: Vec<Vec<f64>> = masks.logits().iter().map(|t| t.data().to_vec()).collect();
        let masked_layers = masks.layers().to_vec();
        let mut model = MaskedModel::new(net.clone(), masks, r.random()).unwrap();
        let noise = model.draw_noise();

        let b = r.random_range(1..5);
        let m = r.random_range(3..7);
        let alpha = r.random_range(0.0..0.1);
        let beta = r.random_range(0.1..1.0);
        let batch = random_batch(m, 3, 3, r.random_range(0.2..1.0), &mut r);
        let idx = batch.indices();
        let x_head: Vec<Vec<f64>> = (0..b).map(|_| uniform(d, -1.0, 1.0, &mut r)).collect();
        let x_tail: Vec<Vec<f64>> = idx.iter().map(|_| uniform(d, -1.0, 1.0, &mut r)).collect();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..classes)).collect();

        // plain reference
        let soft = |pi: &[f64], n: &[f64]| -> Vec<f64> {
            pi.iter().zip(n).map(|(p, e)| plain_sigmoid((p - e) / tau)).collect()
        };
        let s0: Vec<Vec<f64>> = pis.iter().zip(&noise).map(|(p, n)| soft(p, n)).collect();
        let h0: Vec<Vec<f64>> = s0.iter().map(|s| s.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect()).collect();
        let base = plain_layers(&net);
        let emb_layer = net.embedding_layer();
        let objective = |pis: &[Vec<f64>]| -> (f64, f64, f64) {
            let mut layers = base.clone();
            for (slot, &l) in masked_layers.iter().enumerate() {
                let s = soft(&pis[slot], &noise[slot]);
                for (k, w) in layers[l].weight.iter_mut().enumerate() {
                    *w *= h0[slot][k] - s0[slot][k] + s[k];
                }
            }
            let (logits, _, c1) = plain_forward(&layers, &x_head, emb_layer);
            let (_, emb, c2) = plain_forward(&layers, &x_tail, emb_layer);
            let smallest = emb.iter().map(|e| e.iter().map(|v| v * v).sum::<f64>()).fold(f64::INFINITY, f64::min);
            let emb: BTreeMap<usize, Vec<f64>> = idx.iter().copied().zip(emb).collect();
            let sparsity: f64 = pis.iter().flatten().sum();
            let total = plain_cross_entropy(&logits, &labels) + alpha * sparsity + beta * plain_batch_contrastive(&batch, &emb);
            (total, c1.min(c2), smallest)
        };
        let (reference, closest, smallest) = objective(&pis);
        // skip instances where an embedding is zero or a ReLU sits at its kink
        if closest < 1e-3 || smallest < 1e-4 || !reference.is_finite() {
            continue;
        }

        let mut graph = Graph::new();
        let rows: Vec<Vec<f64>> = x_head.iter().chain(&x_tail).cloned().collect();
        let xv = graph.constant(Tensor::from_rows(&rows).unwrap());
        let fwd = model.forward_with_noise(&mut graph, xv, Some(noise.clone())).unwrap();
        let head = graph.gather_rows(fwd.logits, &(0..b).collect::<Vec<_>>()).unwrap();
        let ce = graph.cross_entropy(head, &labels).unwrap();
        let tail = graph.gather_rows(fwd.embedding, &(b..b + idx.len()).collect::<Vec<_>>()).unwrap();
        let con = batch_contrastive_loss(&mut graph, &batch, tail).unwrap().unwrap();
        let con = graph.scale(con, beta);
        let mut loss = graph.add(ce, con).unwrap();
        let sp = MaskedModel::sparsity_term(&mut graph, &fwd.mask_logits, SparsityForm::Logits).unwrap().unwrap();
        let sp = graph.scale(sp, alpha);
        loss = graph.add(loss, sp).unwrap();
        gap = gap.max((graph.value(loss).item() - reference).abs());
        let grads = graph.backward(loss).unwrap();
        for (slot, &var) in fwd.mask_logits.iter().enumerate() {
            let numeric = numeric_grad(&pis[slot], |p| {
                let mut all = pis.clone();
                all[slot] = p.to_vec();
                objective(&all).0
            });
            worst = worst.max(max_rel_err(grads.get(var).unwrap(), &numeric));
        }
        done += 1;
    }
    (done, worst, gap)
}

// ---------------------------------------------------------------------------
// straight-through

/// Returns (worst gradient deviation, whether every forward gate was exactly
/// 0 or 1). The reference gradient is `dL/dm` at `m = hard`, computed on a
/// separate graph where the gates are a plain leaf, times the analytic
/// `ds/dpi`.
pub fn straight_through_suite(instances: usize, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let (mut worst, mut binary) = (0.0f64, true);
    for _ in 0..instances {
        let rows = r.random_range(1..5);
        let cols = r.random_range(1..5);
        let n = rows * cols;
        let tau = r.random_range(0.3..2.0);
        let gamma = r.random_range(0.2..0.8);
        let pi = uniform(n, -3.0, 3.0, &mut r);
        let noise = uniform(n, -2.0, 2.0, &mut r);
        let w = matrix(rows, cols, uniform(n, -1.0, 1.0, &mut r));
        let x = matrix(2, rows, uniform(2 * rows, -1.0, 1.0, &mut r));
        let labels = [r.random_range(0..cols.max(1)), r.random_range(0..cols.max(1))];
        // loss: CE of x (w * m), nonlinear in m
        let head = |g: &mut Graph, m: Var| {
            let wv = g.constant(w.clone());
            let eff = g.mul(wv, m).unwrap();
            let xv = g.constant(x.clone());
            let z = g.matmul(xv, eff).unwrap();
            g.cross_entropy(z, &labels).unwrap()
        };
        let mut g = Graph::new();
        let p = g.param(matrix(rows, cols, pi.clone()));
        let s = gumbel_sigmoid_graph(&mut g, p, &noise, tau).unwrap();
        let m = binarize(&mut g, s, gamma).unwrap();
        binary &= g.value(m).data().iter().all(|&v| v == 0.0 || v == 1.0);
        let loss = head(&mut g, m);
        let via_st = g.backward(loss).unwrap().get(p).unwrap().to_vec();

        let sv: Vec<f64> = pi.iter().zip(&noise).map(|(a, e)| plain_sigmoid((a - e) / tau)).collect();
        let hard: Vec<f64> = sv.iter().map(|&v| if v > gamma { 1.0 } else { 0.0 }).collect();
        binary &= g.value(m).data() == hard.as_slice();
        let mut g2 = Graph::new();
        let mv = g2.param(matrix(rows, cols, hard));
        let loss2 = head(&mut g2, mv);
        let dm = g2.backward(loss2).unwrap().get(mv).unwrap().to_vec();
        for k in 0..n {
            let ds = sv[k] * (1.0 - sv[k]) / tau;
            worst = worst.max((via_st[k] - dm[k] * ds).abs());
        }

        // loss linear in m: replacing m by s gives the same gradient
        let c = matrix(rows, cols, uniform(n, -1.0, 1.0, &mut r));
        let linear = |g: &mut Graph, v: Var| {
            let cv = g.constant(c.clone());
            let prod = g.mul(v, cv).unwrap();
            g.sum(prod)
        };
        let mut g3 = Graph::new();
        let p3 = g3.param(matrix(rows, cols, pi.clone()));
        let s3 = gumbel_sigmoid_graph(&mut g3, p3, &noise, tau).unwrap();
        let m3 = binarize(&mut g3, s3, gamma).unwrap();
        let l3 = linear(&mut g3, m3);
        let a = g3.backward(l3).unwrap().get(p3).unwrap().to_vec();
        let mut g4 = Graph::new();
        let p4 = g4.param(matrix(rows, cols, pi.clone()));
        let s4 = gumbel_sigmoid_graph(&mut g4, p4, &noise, tau).unwrap();
        let l4 = linear(&mut g4, s4);
        let b = g4.backward(l4).unwrap().get(p4).unwrap().to_vec();
        worst = a.iter().zip(&b).fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    (worst, binary)
}

// ---------------------------------------------------------------------------
// Gumbel-Sigmoid statistics

#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    Moments {
        mean,
        var,
        se_mean: (var / n).sqrt(),
        se_var: ((m4 - var * var) / n).sqrt(),
    }
}

/// `sigmoid((pi - log(E1 / E2)) / tau)` with `E = -log U` drawn as unit
/// exponentials from a separate generator.
pub fn reference_gumbel_sigmoid(draws: usize, pi: f64, tau: f64, seed: u64) -> Vec<f64> {
    let mut r = rand::rngs::StdRng::seed_from_u64(seed);
    (0..draws)
        .map(|_| {
            let e1: f64 = Exp1.sample(&mut r);
            let e2: f64 = Exp1.sample(&mut r);
            plain_sigmoid((pi - (e1 / e2).ln()) / tau)
        })
        .collect()
}

/// (library moments, reference moments, worst gap in standard errors).
pub fn gumbel_suite(draws: usize, seed: u64) -> (Moments, Moments, f64) {
    let lib = gumbel_sigmoid_sample(&vec![0.0; draws], 1.0, &mut rng(seed));
    let reference = reference_gumbel_sigmoid(draws, 0.0, 1.0, seed ^ 0x5eed);
    let (a, b) = (moments(&lib), moments(&reference));
    let z_mean = (a.mean - b.mean).abs() / (a.se_mean.powi(2) + b.se_mean.powi(2)).sqrt();
    let z_var = (a.var - b.var).abs() / (a.se_var.powi(2) + b.se_var.powi(2)).sqrt();
    (a, b, z_mean.max(z_var))
}

// ---------------------------------------------------------------------------
// contrastive value oracle

/// Worst gap between the library value and direct summation on random unit
/// vectors with P, N <= 5.
pub fn contrastive_value_suite(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let d = r.random_range(2..7);
        let p = r.random_range(1..=5);
        let n = r.random_range(0..=5);
        let t = r.random_range(0.1..1.0);
        let mut draw = || unit(&away_from_zero(d, 0.05, 1.0, &mut r));
        let z = draw();
        let pos: Vec<Vec<f64>> = (0..p).map(|_| draw()).collect();
        let neg: Vec<Vec<f64>> = (0..n).map(|_| draw()).collect();
        let pr: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        let nr: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
        let lib = contrastive_loss(&z, &pr, &nr, t).unwrap();
        worst = worst.max((lib - plain_contrastive(&z, &pos, &neg, t)).abs());
    }
    worst
}

/// (loss with one positive and no negatives, loss with one positive and one
/// negative at equal similarity).
pub fn contrastive_boundaries() -> (f64, f64) {
    let z = unit(&[0.3, -0.4, 1.2]);
    let p = unit(&[1.0, 0.5, 0.2]);
    let zero = contrastive_loss(&z, &[&p], &[], 0.1).unwrap();
    // mirror p across z so both share the same similarity to z
    let c = dot(&z, &p);
    let mirrored: Vec<f64> = z.iter().zip(&p).map(|(a, b)| 2.0 * c * a - b).collect();
    let log2 = contrastive_loss(&z, &[&p], &[&mirrored], 0.1).unwrap();
    (zero, log2)
}

// ---------------------------------------------------------------------------
// k-means

pub fn sse(points: &[Vec<f64>], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let d = points[0].len();
    let mut c = vec![0.0; d];
    for &i in members {
        for (cj, x) in c.iter_mut().zip(&points[i]) {
            *cj += x;
        }
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    members.iter().map(|&i| points[i].iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).sum()
}

/// Minimum inertia over all two-way partitions, with the partition as a
/// bitmask (point 0 always on side 0).
pub fn best_two_partition(points: &[Vec<f64>]) -> (f64, u32) {
    let n = points.len();
    let mut best = (f64::INFINITY, 0);
    for mask in 0u32..(1 << (n - 1)) {
        let full = mask << 1;
        let (a, b): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| full & (1 << i) == 0);
        let v = sse(points, &a) + sse(points, &b);
        if v < best.0 {
            best = (v, full);
        }
    }
    best
}

pub fn two_blobs(seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let offset = r.random_range(2.0..5.0);
    (0..12)
        .map(|i| {
            let shift = if i < 6 { 0.0 } else { offset };
            vec![shift + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]
        })
        .collect()
}

/// (worst inertia gap to the exhaustive optimum, partitions matched,
/// instances, every logged run monotone).
pub fn kmeans_suite(instances: u64, seed: u64) -> (f64, usize, usize, bool) {
    let (mut gap, mut matched, mut monotone) = (0.0f64, 0, true);
    for s in 0..instances {
        let pts = two_blobs(seed + s);
        let (best, partition) = best_two_partition(&pts);
        let x = Tensor::from_rows(&pts).unwrap();
        let model = kmeans(
            &x,
            &KMeansConfig {
                k: 2,
                seed: s,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        gap = gap.max((model.inertia - best).abs());
        let mine: u32 = (0..pts.len())
            .filter(|&i| model.assignments[i] != model.assignments[0])
            .fold(0, |m, i| m | (1 << i));
        matched += usize::from(mine == partition);
        monotone &= history_monotone(&model.inertia_history);
    }
    (gap, matched, instances as usize, monotone)
}

pub fn history_monotone(h: &[f64]) -> bool {
    h.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0))
}

/// Lloyd runs on random data with several k; true when every inertia
/// history is non-increasing.
pub fn lloyd_monotone_suite(runs: u64, seed: u64) -> bool {
    let mut r = rng(seed);
    (0..runs).all(|s| {
        let n = r.random_range(10..80);
        let d = r.random_range(1..5);
        let k = r.random_range(1..7).min(n);
        let x = matrix(n, d, uniform(n * d, -3.0, 3.0, &mut r));
        let m = kmeans(
            &x,
            &KMeansConfig {
                k,
                seed: s,
                max_iter: 50,
                tol: 0.0,
            },
        )
        .unwrap();
        history_monotone(&m.inertia_history)
    })
}

// ---------------------------------------------------------------------------
// task set

/// Hand count of the minority sets: class-`i` samples in clusters where some
/// other class holds at least `threshold` of the members.
pub fn oracle_minority(assign: &[usize], labels: &[usize], k: usize, classes: usize, threshold: f64) -> Vec<BTreeSet<usize>> {
    let mut counts = vec![vec![0usize; classes]; k];
    for (&c, &y) in assign.iter().zip(labels) {
        counts[c][y] += 1;
    }
    let dominant: Vec<Option<usize>> = counts
        .iter()
        .map(|row| {
            let size: usize = row.iter().sum();
            (0..classes).find(|&i| size > 0 && row[i] as f64 >= threshold * size as f64)
        })
        .collect();
    let mut out = vec![BTreeSet::new(); classes];
    for (i, (&c, &y)) in assign.iter().zip(labels).enumerate() {
        if matches!(dominant[c], Some(d) if d != y) {
            out[y].insert(i);
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct TaskReport {
    pub instances: usize,
    pub fraction_derived: usize,
    pub balance_violations: usize,
    pub minority_violations: usize,
    pub eligibility_violations: usize,
    pub size_violations: usize,
    pub minority_mismatches: usize,
}

impl TaskReport {
    pub fn clean(&self) -> bool {
        self.balance_violations + self.minority_violations + self.eligibility_violations + self.size_violations + self.minority_mismatches
            == 0
    }
}

/// Random clusterings where most clusters lean hard toward one class.
pub fn random_clustering(r: &mut impl Rng) -> (Vec<usize>, Vec<usize>, usize, usize) {
    let classes = r.random_range(2..4);
    let k = r.random_range(classes + 1..10);
    let n = r.random_range(300..700);
    let lean: Vec<Option<usize>> = (0..k)
        .map(|c| if c < classes { Some(c) } else if r.random_bool(0.7) { Some(r.random_range(0..classes)) } else { None })
        .collect();
    let purity = r.random_range(0.93..0.995);
    let mut assign = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = r.random_range(0..k);
        let y = match lean[c] {
            Some(i) if r.random_bool(purity) => i,
            _ => r.random_range(0..classes),
        };
        assign.push(c);
        labels.push(y);
    }
    (assign, labels, k, classes)
}

pub fn taskdata_suite(instances: usize, seed: u64) -> TaskReport {
    let mut r = rng(seed);
    let mut rep = TaskReport::default();
    while rep.instances < instances {
        let (assign, labels, k, classes) = random_clustering(&mut r);
        let n = labels.len();
        let summary = label_clusters(&assign, &labels, k, classes, 0.9).unwrap();
        let minority = oracle_minority(&assign, &labels, k, classes, 0.9);
        let lib: Vec<BTreeSet<usize>> = summary.minority.iter().map(|m| m.iter().copied().collect()).collect();
        rep.minority_mismatches += usize::from(lib != minority);
        let derived = per_class_target(n, classes, 0.1);
        let largest = minority.iter().map(BTreeSet::len).max().unwrap_or(0);
        let smallest_class = (0..classes).map(|c| labels.iter().filter(|&&y| y == c).count()).min().unwrap();
        let fraction_derived = derived >= largest;
        let p = derived.max(largest);
        if p > smallest_class {
            continue;
        }
        let task = build_task_dataset(&labels, &assign, &summary, p, &mut r).unwrap();
        rep.instances += 1;
        let members: BTreeSet<usize> = task.members.iter().copied().collect();
        for c in 0..classes {
            if task.members.iter().filter(|&&i| labels[i] == c).count() != p {
                rep.balance_violations += 1;
            }
            if !minority[c].is_subset(&members) {
                rep.minority_violations += 1;
            }
        }
        // every non-minority member sits in a cluster its class may draw from
        let mut counts = vec![vec![0usize; classes]; k];
        for (&c, &y) in assign.iter().zip(&labels) {
            counts[c][y] += 1;
        }
        for &i in &task.members {
            let (c, y) = (assign[i], labels[i]);
            if minority[y].contains(&i) {
                continue;
            }
            let size: usize = counts[c].iter().sum();
            let dom = (0..classes).find(|&j| counts[c][j] as f64 >= 0.9 * size as f64);
            if dom.is_some_and(|d| d != y) {
                rep.eligibility_violations += 1;
            }
        }
        if fraction_derived {
            rep.fraction_derived += 1;
            let target = 0.1 * n as f64;
            if (task.len() as f64 - target).abs() > classes as f64 {
                rep.size_violations += 1;
            }
        }
    }
    rep
}

/// (label for a 9-of-10 cluster, label for an 89-of-100 cluster).
pub fn dominance_boundaries() -> (ClusterLabel, ClusterLabel) {
    let mut assign = vec![0; 10];
    let mut labels = vec![0; 9];
    labels.push(1);
    assign.extend(vec![1; 100]);
    labels.extend(vec![0; 89]);
    labels.extend(vec![1; 11]);
    let s = label_clusters(&assign, &labels, 2, 2, 0.9).unwrap();
    (s.labels[0], s.labels[1])
}

// ---------------------------------------------------------------------------
// batch predicates

/// Membership rules restated from their definitions.
pub fn oracle_positive(rule: PoolRule, a: usize, j: usize, y: &[usize], c: &[usize]) -> bool {
    match rule {
        PoolRule::Cluster | PoolRule::NegAblation => a != j && y[a] == y[j] && c[a] != c[j],
        PoolRule::SupCon => a != j && y[a] == y[j],
    }
}

pub fn oracle_negative(rule: PoolRule, a: usize, j: usize, y: &[usize], c: &[usize]) -> bool {
    match rule {
        PoolRule::Cluster => a != j && c[a] == c[j],
        PoolRule::NegAblation => a != j && c[a] == c[j] && y[a] != y[j],
        PoolRule::SupCon => a != j && y[a] != y[j],
    }
}

/// (batches drawn, violations, empty-negative warnings) for one rule.
pub fn predicate_scan(rule: PoolRule, batches: usize, seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    let (mut violations, mut empty) = (0, 0);
    let cfg = ContrastiveConfig {
        rule,
        ..ContrastiveConfig::default()
    };
    let mut setup = random_clustering(&mut r);
    let mut members: Vec<usize> = Vec::new();
    for b in 0..batches {
        if b % 200 == 0 {
            setup = random_clustering(&mut r);
            let n = setup.1.len();
            let keep = r.random_range(40..120).min(n);
            members = rand::seq::index::sample(&mut r, n, keep).into_vec();
            members.sort_unstable();
        }
        let (assign, labels, _, _) = &setup;
        let batch = sample_contrastive_batch(labels, assign, &members, &cfg, &mut r).unwrap();
        empty += batch.warnings.iter().filter(|w| w.contains("empty negative")).count();
        let mut anchor_clusters = BTreeSet::new();
        for a in &batch.anchors {
            if !members.contains(&a.anchor) {
                violations += 1;
            }
            if rule != PoolRule::SupCon && !anchor_clusters.insert(assign[a.anchor]) {
                violations += 1;
            }
            if a.positives.is_empty() || a.positives.len() > cfg.positives || a.negatives.len() > cfg.negatives {
                violations += 1;
            }
            let uniq: BTreeSet<usize> = a.positives.iter().chain(&a.negatives).copied().collect();
            if uniq.len() != a.positives.len() + a.negatives.len() {
                violations += 1;
            }
            for &j in &a.positives {
                if !members.contains(&j) || !oracle_positive(rule, a.anchor, j, labels, assign) {
                    violations += 1;
                }
            }
            for &j in &a.negatives {
                if !members.contains(&j) || !oracle_negative(rule, a.anchor, j, labels, assign) {
                    violations += 1;
                }
            }
            // pools are complete when the eligible set fits
            let eligible_neg = members.iter().filter(|&&j| oracle_negative(rule, a.anchor, j, labels, assign)).count();
            if a.negatives.len() != eligible_neg.min(cfg.negatives) {
                violations += 1;
            }
        }
    }
    (batches, violations, empty)
}

// ---------------------------------------------------------------------------
// purity

/// Fraction of members agreeing with their cluster's most common label,
/// counted by hand.
pub fn oracle_purity(assign: &[usize], labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &y) in assign.iter().zip(labels) {
        *counts.entry(c).or_default().entry(y).or_default() += 1;
    }
    let matched: usize = counts.values().map(|m| m.values().copied().max().unwrap()).sum();
    matched as f64 / labels.len() as f64
}

/// Constructed instances with known purity: (computed, expected) pairs.
pub fn purity_cases() -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    vec![
        (vec![0, 0, 0, 1, 1, 1], vec![0, 0, 1, 1, 1, 1], 5.0 / 6.0),
        (vec![0, 1, 2, 3], vec![1, 0, 1, 0], 1.0),
        (vec![0; 10], vec![0, 1, 0, 1, 0, 1, 0, 1, 2, 2], 0.4),
        (vec![2, 2, 0, 0, 0, 1], vec![0, 1, 0, 0, 1, 1], 4.0 / 6.0),
    ]
}

// ---------------------------------------------------------------------------
// small pipeline configuration

pub fn small_images_config(seed: u64) -> spurprune::pipeline::PipelineConfig {
    use spurprune::datasets::SyntheticImageConfig;
    use spurprune::pipeline::{DataConfig, MaskTrainConfig, PipelineConfig, SgdConfig};
    let base = PipelineConfig::default();
    PipelineConfig {
        seed,
        data: DataConfig::Images {
            train: SyntheticImageConfig {
                per_class: 150,
                ..SyntheticImageConfig::default()
            },
            test_per_class: 100,
        },
        hidden: vec![32, 32],
        erm: SgdConfig {
            epochs: 4,
            ..base.erm.clone()
        },
        masking: MaskTrainConfig {
            epochs: 3,
            ..base.masking.clone()
        },
        finetune: SgdConfig {
            epochs: 2,
            ..base.finetune.clone()
        },
        ..base
    }
}

/// FNV-1a over a byte string.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn hash_json<T: serde::Serialize>(value: &T) -> u64 {
    hash_bytes(serde_json::to_string(value).unwrap().as_bytes())
}

/// Hashes of every training-stage output of setting 1: ERM weights, cluster
/// assignments, dominance summary, task set, mask gates and final weights.
pub fn training_hashes(prepared: &spurprune::pipeline::Prepared) -> Vec<(&'static str, u64)> {
    use spurprune::pipeline::network_fingerprint;
    let outcome = prepared.run_settings(&[1]).unwrap().pop().unwrap();
    let ex = outcome.extracted.as_ref().unwrap();
    vec![
        ("erm", network_fingerprint(&prepared.erm)),
        ("erm_curve", hash_json(&prepared.erm_curve)),
        ("clusters", hash_json(&prepared.clusters.assignments)),
        ("summary", hash_json(&prepared.summary)),
        ("task", hash_json(&prepared.task)),
        ("mask", hash_json(&ex.masks.binary_gates().unwrap())),
        ("mask_curve", hash_json(&outcome.mask_curve)),
        ("model", network_fingerprint(&outcome.model)),
    ]
}
