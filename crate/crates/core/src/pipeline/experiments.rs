use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, PipelineConfig, PruneMode, Variant};
use super::run::{prepare, Prepared};
use super::train::{train_network, EpochRecord, TrainSpec};
use crate::autodiff::DenseNetwork;
use crate::datasets::MOONS_ATTRIBUTE;
use crate::error::{Error, Result};
use crate::eval::{decision_boundary_raster, Bounds, MetricsReport, Raster};
use crate::masking::{MaskSet, MaskedModel};
use crate::par::{self, Execution};

/// Runs `f` once per seed (`cfg.seed` replaced), in seed order.
pub fn for_seeds<T, F>(cfg: &PipelineConfig, seeds: &[u64], exec: Execution, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(PipelineConfig) -> Result<T> + Sync + Send,
{
    par::map_slice(exec, seeds, |&seed| {
        f(PipelineConfig {
            seed,
            ..cfg.clone()
        })
    })
    .into_iter()
    .collect()
}

/// `seed, seed + 1, ..., seed + n - 1`.
pub fn seed_range(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed + i).collect()
}

/// One row of a metrics table: a model's headline numbers on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub label: String,
    pub avg: f64,
    pub keep_ratio: Option<f64>,
    pub wga: BTreeMap<String, f64>,
    pub ua: BTreeMap<String, f64>,
    pub uag: BTreeMap<String, f64>,
    pub flip_rate: BTreeMap<String, f64>,
    /// Anchors seen with an empty negative pool during mask training.
    pub empty_negative_pools: usize,
}

impl MetricsRow {
    pub fn from_report(seed: u64, label: impl Into<String>, report: &MetricsReport) -> Self {
        let pick = |f: &dyn Fn(&crate::eval::AttributeMetrics) -> Option<f64>| {
            report
                .attributes
                .iter()
                .filter_map(|(k, m)| f(m).map(|v| (k.clone(), v)))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            seed,
            label: label.into(),
            avg: report.avg,
            keep_ratio: report.keep_ratio,
            wga: pick(&|m| Some(m.wga)),
            ua: pick(&|m| Some(m.ua)),
            uag: pick(&|m| Some(m.uag)),
            flip_rate: pick(&|m| m.flip_rate),
            empty_negative_pools: 0,
        }
    }

    /// WGA averaged over attributes.
    pub fn mean_wga(&self) -> f64 {
        mean(self.wga.values().copied())
    }

    pub fn write_csv<W: std::io::Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let attrs: Vec<String> = rows.first().map(|r| r.wga.keys().cloned().collect()).unwrap_or_default();
        let mut header = vec!["seed".to_string(), "label".into(), "avg".into(), "keep_ratio".into(), "mean_wga".into()];
        for a in &attrs {
            header.extend([format!("wga_{a}"), format!("ua_{a}"), format!("uag_{a}"), format!("flip_{a}")]);
        }
        header.push("empty_negative_pools".into());
        w.write_record(&header)?;
        let opt = |v: Option<&f64>| v.map_or(String::new(), |v| v.to_string());
        for r in rows {
            let mut rec = vec![
                r.seed.to_string(),
                r.label.clone(),
                r.avg.to_string(),
                opt(r.keep_ratio.as_ref()),
                r.mean_wga().to_string(),
            ];
            for a in &attrs {
                rec.extend([opt(r.wga.get(a)), opt(r.ua.get(a)), opt(r.uag.get(a)), opt(r.flip_rate.get(a))]);
            }
            rec.push(r.empty_negative_pools.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values.iter().copied());
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len().max(1) as f64).sqrt()
}

fn empty_negatives(curve: &[EpochRecord]) -> usize {
    curve.iter().map(|r| r.empty_negative_pools).sum()
}

/// The ERM row plus one row per requested setting, for one prepared run.
pub fn ablation_rows(prepared: &Prepared, settings: &[u8]) -> Result<Vec<MetricsRow>> {
    let seed = prepared.cfg.seed;
    let mut rows = Vec::with_capacity(settings.len());
    for outcome in prepared.run_settings(settings)? {
        let mut row = MetricsRow::from_report(seed, format!("setting_{}", outcome.setting), &outcome.report);
        row.empty_negative_pools = empty_negatives(&outcome.mask_curve);
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_ablation_suite(cfg: &PipelineConfig, settings: &[u8], seeds: &[u64], exec: Execution) -> Result<Vec<MetricsRow>> {
    if let Some(bad) = settings.iter().find(|s| !(1..=7).contains(*s)) {
        return Err(Error::Config(format!("ablation setting {bad} is not in 1..=7")));
    }
    let per_seed = for_seeds(cfg, seeds, exec, |c| ablation_rows(&prepare(&c)?, settings))?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Setting 1 under each contrastive variant, for one prepared run.
pub fn variant_rows(prepared: &Prepared, variants: &[Variant]) -> Result<Vec<MetricsRow>> {
    let seed = prepared.cfg.seed;
    variants
        .iter()
        .map(|&v| {
            let (masked, curve) = prepared.train_mask(prepared.cfg.masking.beta, v)?;
            let (net, ex, _) = prepared.finish(&masked, prepared.cfg.masking.prune, false, None)?;
            let report = prepared.evaluate(&net, Some(ex.keep_ratio))?;
            let mut row = MetricsRow::from_report(seed, v.name(), &report);
            row.empty_negative_pools = empty_negatives(&curve);
            Ok(row)
        })
        .collect()
}

pub fn run_variant_suite(cfg: &PipelineConfig, seeds: &[u64], exec: Execution) -> Result<Vec<MetricsRow>> {
    let per_seed = for_seeds(cfg, seeds, exec, |c| variant_rows(&prepare(&c)?, &Variant::ALL))?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// One mask training, then extraction and fine-tuning at each pruning ratio.
pub fn sweep_rows(prepared: &Prepared, ratios: &[f64]) -> Result<Vec<MetricsRow>> {
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Config(format!("pruning ratio {bad} is not in (0, 1)")));
    }
    let seed = prepared.cfg.seed;
    let (masked, _) = prepared.train_mask(prepared.cfg.masking.beta, prepared.cfg.variant)?;
    ratios
        .iter()
        .map(|&ratio| {
            let (net, ex, _) = prepared.finish(&masked, PruneMode::Ratio { ratio }, false, None)?;
            let report = prepared.evaluate(&net, Some(ex.keep_ratio))?;
            Ok(MetricsRow::from_report(seed, format!("{ratio}"), &report))
        })
        .collect()
}

pub fn sweep_pruning_ratio(cfg: &PipelineConfig, ratios: &[f64], seeds: &[u64], exec: Execution) -> Result<Vec<MetricsRow>> {
    let per_seed = for_seeds(cfg, seeds, exec, |c| sweep_rows(&prepare(&c)?, ratios))?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// One variant of the two-moons figure.
#[derive(Debug, Clone)]
pub struct DemoModel {
    pub name: &'static str,
    pub model: DenseNetwork,
    pub train_accuracy: f64,
    pub report: MetricsReport,
    pub raster: Raster,
}

impl DemoModel {
    pub fn flip_rate(&self) -> f64 {
        self.report.attributes[MOONS_ATTRIBUTE].flip_rate.unwrap_or(f64::NAN)
    }

    pub fn balanced_accuracy(&self) -> f64 {
        self.report.attributes[MOONS_ATTRIBUTE].ua
    }
}

#[derive(Debug, Clone)]
pub struct Demo {
    pub seed: u64,
    pub bounds: Bounds,
    pub models: Vec<DemoModel>,
}

impl Demo {
    pub fn get(&self, name: &str) -> Option<&DemoModel> {
        self.models.iter().find(|m| m.name == name)
    }
}

pub const DEMO_ERM: &str = "erm";
pub const DEMO_RANDOM: &str = "random_mask";
pub const DEMO_PRUNED: &str = "prusc";

/// Dense ERM, the same architecture trained under one fixed random mask that
/// keeps half the weights of every layer, and the pruned-and-fine-tuned
/// subnetwork of the ERM model.
pub fn demo_two_moons(cfg: &PipelineConfig, resolution: usize) -> Result<Demo> {
    if !matches!(cfg.data, super::config::DataConfig::Moons { .. }) {
        return Err(Error::Config("the two-moons demo needs moons data".into()));
    }
    let prepared = prepare(cfg)?;
    let train = &prepared.splits.train;
    let test = &prepared.splits.test;
    let xs: Vec<f64> = (0..test.len()).map(|i| test.inputs().get(i, 0)).collect();
    let ys: Vec<f64> = (0..test.len()).map(|i| test.inputs().get(i, 1)).collect();
    let lo_hi = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo - 0.25, hi + 0.25)
    };
    let ((x_min, x_max), (y_min, y_max)) = (lo_hi(&xs), lo_hi(&ys));
    let bounds = Bounds {
        x_min,
        x_max,
        y_min,
        y_max,
    };

    // fixed Bernoulli(0.5) mask over every layer, used in training and at test time
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "random-mask"));
    let fresh = {
        let mut sizes = vec![train.dim()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(train.num_classes());
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "random-mask-init"));
        DenseNetwork::mlp(&sizes, &mut init)?
    };
    let random = MaskSet::random_frozen(&fresh, 0.5, &mut mask_rng)?;
    let layer_masks = MaskedModel::new(fresh.clone(), random, cfg.seed)?.layer_masks()?;
    let mut spec = TrainSpec::new(&cfg.erm, derive_seed(cfg.seed, "random-mask-train"));
    spec.masks = Some(&layer_masks);
    let (random_net, _) = train_network(fresh, train.training_view(), &spec)?;

    let pruned = prepared.run_settings(&[1])?.pop().expect("one setting").model;

    let mut models = Vec::new();
    for (name, net) in [(DEMO_ERM, prepared.erm.clone()), (DEMO_RANDOM, random_net), (DEMO_PRUNED, pruned)] {
        let train_accuracy = crate::eval::accuracy(&net.predict(train.inputs())?, train.labels());
        let report = prepared.evaluate(&net, None)?;
        let raster = decision_boundary_raster(&net, bounds, resolution)?;
        models.push(DemoModel {
            name,
            model: net,
            train_accuracy,
            report,
            raster,
        });
    }
    Ok(Demo {
        seed: cfg.seed,
        bounds,
        models,
    })
}
