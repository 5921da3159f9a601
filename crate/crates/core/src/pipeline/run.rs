use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, DataConfig, PipelineConfig, PruneMode, Variant};
use super::train::{
    extract, finetune, train_erm, train_mask, train_network, write_curve, ContrastiveTerm, EpochRecord, Extracted,
    TrainSpec, Trainable,
};
use crate::autodiff::DenseNetwork;
use crate::clustering::{kmeans, label_clusters, purity, ClusterModel, ClusterSummary, KMeansConfig, Purity};
use crate::datasets::{
    gen_synthetic_images, gen_two_moons, moons_intervention, LabeledDataset, SpuriousMoonsConfig, SplitTag,
    SyntheticImageConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::masking::{MaskSet, MaskedModel};
use crate::taskdata::{build_task_dataset, per_class_target, ContrastiveConfig, TaskDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn make_splits(data: &DataConfig, seed: u64) -> Result<Splits> {
    let (train, test) = match data {
        DataConfig::Moons { train, test_n } => {
            let tr = gen_two_moons(&SpuriousMoonsConfig {
                seed: derive_seed(seed, "train-data"),
                ..train.clone()
            })?;
            let te = gen_two_moons(&SpuriousMoonsConfig {
                n: *test_n,
                seed: derive_seed(seed, "test-data"),
                ..train.clone()
            })?;
            (tr, te)
        }
        DataConfig::Images { train, test_per_class } => {
            let tr = gen_synthetic_images(&SyntheticImageConfig {
                seed: derive_seed(seed, "train-data"),
                ..train.clone()
            })?;
            let te = gen_synthetic_images(&SyntheticImageConfig {
                per_class: *test_per_class,
                seed: derive_seed(seed, "test-data"),
                ..train.clone()
            })?;
            (tr, te)
        }
    };
    Ok(Splits {
        train: train.with_split(SplitTag::Train),
        test: test.with_split(SplitTag::Test),
    })
}

/// Class purity of the clustering plus, for reporting, its purity with
/// respect to every attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    pub class: Purity,
    pub attributes: BTreeMap<String, Purity>,
}

/// Everything upstream of mask training: ERM, clustering, and the task set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: PipelineConfig,
    pub splits: Splits,
    pub erm: DenseNetwork,
    pub erm_curve: Vec<EpochRecord>,
    pub clusters: ClusterModel,
    pub summary: ClusterSummary,
    pub task: TaskDataset,
}

/// Re-attaches the counterfactual interventions that a CSV round trip drops,
/// using the generator settings in `data`.
pub fn restore_interventions(ds: LabeledDataset, data: &DataConfig) -> Result<LabeledDataset> {
    match data {
        DataConfig::Moons { train, .. } => {
            let iv = moons_intervention(&ds, train.spur_shift)?;
            ds.with_intervention(crate::datasets::MOONS_ATTRIBUTE, iv)
        }
        DataConfig::Images { train, .. } => {
            let mut ds = ds;
            for (name, iv) in train.interventions() {
                ds = ds.with_intervention(&name, iv)?;
            }
            Ok(ds)
        }
    }
}

/// ERM training on the train split, k-means on its embeddings, dominance
/// labeling, and task-set construction. Attribute labels are not consulted.
pub fn prepare_from(cfg: &PipelineConfig, splits: Splits) -> Result<Prepared> {
    cfg.validate()?;
    let view = splits.train.training_view();
    let seed = cfg.seed;
    let (erm, erm_curve) = train_erm(view, &cfg.hidden, &cfg.erm, seed, None)?;
    prepare_with_erm(cfg, splits, erm, erm_curve)
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    prepare_from(cfg, make_splits(&cfg.data, cfg.seed)?)
}

/// Clustering and task-set stages on top of a given ERM model.
pub fn prepare_with_erm(
    cfg: &PipelineConfig,
    splits: Splits,
    erm: DenseNetwork,
    erm_curve: Vec<EpochRecord>,
) -> Result<Prepared> {
    let view = splits.train.training_view();
    let embeddings = erm.embed(view.inputs)?;
    let clusters = kmeans(
        &embeddings,
        &KMeansConfig {
            k: cfg.clustering.k,
            seed: derive_seed(cfg.seed, "kmeans"),
            max_iter: cfg.clustering.max_iter,
            tol: cfg.clustering.tol,
        },
    )?;
    let summary = label_clusters(
        &clusters.assignments,
        view.labels,
        clusters.k,
        view.num_classes,
        cfg.clustering.threshold,
    )?;
    let p = cfg
        .taskdata
        .per_class
        .unwrap_or_else(|| per_class_target(view.labels.len(), view.num_classes, cfg.taskdata.fraction));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "taskdata"));
    let task = build_task_dataset(view.labels, &clusters.assignments, &summary, p, &mut rng)?;
    Ok(Prepared {
        cfg: cfg.clone(),
        splits,
        erm,
        erm_curve,
        clusters,
        summary,
        task,
    })
}

/// Outcome of one pruning/fine-tuning setting.
#[derive(Debug, Clone)]
pub struct SettingOutcome {
    pub setting: u8,
    pub model: DenseNetwork,
    pub extracted: Option<Extracted>,
    pub mask_curve: Vec<EpochRecord>,
    pub finetune_curve: Vec<EpochRecord>,
    pub report: MetricsReport,
}

impl SettingOutcome {
    pub fn keep_ratio(&self) -> Option<f64> {
        self.extracted.as_ref().map(|e| e.keep_ratio)
    }
}

impl Prepared {
    pub fn attribute_names(&self) -> Vec<&str> {
        self.splits.train.attribute_names()
    }

    pub fn contrastive_config(&self, variant: Variant) -> ContrastiveConfig {
        ContrastiveConfig {
            rule: variant.rule(),
            ..self.cfg.taskdata.contrastive.clone()
        }
    }

    pub fn evaluate(&self, model: &DenseNetwork, keep_ratio: Option<f64>) -> Result<MetricsReport> {
        let mut report = evaluate(
            model,
            &self.splits.train,
            &self.splits.test,
            &self.attribute_names(),
            Some(derive_seed(self.cfg.seed, "balanced-test")),
        )?;
        report.keep_ratio = keep_ratio;
        Ok(report)
    }

    pub fn purity_report(&self) -> Result<PurityReport> {
        let a = &self.clusters.assignments;
        let mut attributes = BTreeMap::new();
        for attr in self.splits.train.attributes() {
            attributes.insert(attr.name.clone(), purity(a, &attr.values)?);
        }
        Ok(PurityReport {
            class: purity(a, self.splits.train.labels())?,
            attributes,
        })
    }

    /// Mask training on the task set with contrastive weight `beta`.
    pub fn train_mask(&self, beta: f64, variant: Variant) -> Result<(MaskedModel, Vec<EpochRecord>)> {
        let mcfg = super::config::MaskTrainConfig {
            beta,
            ..self.cfg.masking.clone()
        };
        train_mask(
            &self.erm,
            self.splits.train.training_view(),
            &self.clusters.assignments,
            &self.task,
            &mcfg,
            &self.contrastive_config(variant),
            derive_seed(self.cfg.seed, "mask"),
        )
    }

    fn contrastive_term<'a>(&'a self, cfg: &'a ContrastiveConfig) -> ContrastiveTerm<'a> {
        ContrastiveTerm {
            clusters: &self.clusters.assignments,
            cfg,
            beta: self.cfg.masking.beta,
        }
    }

    /// Extracts at `prune` and fine-tunes (CE only, or with the contrastive
    /// term when `with_contrastive`).
    pub fn finish(
        &self,
        masked: &MaskedModel,
        prune: PruneMode,
        with_contrastive: bool,
        epochs: Option<usize>,
    ) -> Result<(DenseNetwork, Extracted, Vec<EpochRecord>)> {
        let extracted = extract(masked, prune)?;
        let sgd = super::config::SgdConfig {
            epochs: epochs.unwrap_or(self.cfg.finetune.epochs),
            ..self.cfg.finetune.clone()
        };
        let ccfg = self.contrastive_config(self.cfg.variant);
        let term = with_contrastive.then(|| self.contrastive_term(&ccfg));
        let (net, curve) = finetune(
            &extracted,
            self.splits.train.training_view(),
            &self.task,
            &sgd,
            term,
            self.cfg.seed,
        )?;
        Ok((net, extracted, curve))
    }

    /// Fine-tunes the dense ERM model on the task set.
    fn finetune_dense(&self, trainable: Trainable, with_contrastive: bool) -> Result<(DenseNetwork, Vec<EpochRecord>)> {
        let ccfg = self.contrastive_config(self.cfg.variant);
        let mut spec = TrainSpec::new(&self.cfg.finetune, derive_seed(self.cfg.seed, "finetune"));
        spec.members = Some(&self.task.members);
        spec.trainable = trainable;
        spec.contrastive = with_contrastive.then(|| self.contrastive_term(&ccfg));
        train_network(self.erm.clone(), self.splits.train.training_view(), &spec)
    }

    fn cached_mask(&self, beta: f64, cache: &mut Option<(MaskedModel, Vec<EpochRecord>)>) -> Result<(MaskedModel, Vec<EpochRecord>)> {
        if cache.is_none() {
            *cache = Some(self.train_mask(beta, self.cfg.variant)?);
        }
        Ok(cache.clone().expect("filled above"))
    }

    /// Runs several ablation settings, sharing mask training between the
    /// settings that use the same mask loss.
    ///
    /// 1. prune with the contrastive term, fine-tune with CE
    /// 2. as 1, fine-tune with CE and the contrastive term
    /// 3. prune without the contrastive term, fine-tune with CE
    /// 4. as 1 without fine-tuning
    /// 5. no pruning; fine-tune the whole network with CE and the contrastive term
    /// 6. no pruning; fine-tune the whole network with CE
    /// 7. no pruning; fine-tune only the last layer with CE
    pub fn run_settings(&self, settings: &[u8]) -> Result<Vec<SettingOutcome>> {
        let mut with_con: Option<(MaskedModel, Vec<EpochRecord>)> = None;
        let mut without_con: Option<(MaskedModel, Vec<EpochRecord>)> = None;
        let mut out = Vec::with_capacity(settings.len());
        let prune = self.cfg.masking.prune;
        for &setting in settings {
            let (model, extracted, mask_curve, finetune_curve) = match setting {
                1 | 2 | 4 => {
                    let (masked, mcurve) = self.cached_mask(self.cfg.masking.beta, &mut with_con)?;
                    let epochs = (setting == 4).then_some(0);
                    let (net, ex, fcurve) = self.finish(&masked, prune, setting == 2, epochs)?;
                    (net, Some(ex), mcurve, fcurve)
                }
                3 => {
                    let (masked, mcurve) = self.cached_mask(0.0, &mut without_con)?;
                    let (net, ex, fcurve) = self.finish(&masked, prune, false, None)?;
                    (net, Some(ex), mcurve, fcurve)
                }
                5 | 6 => {
                    let (net, fcurve) = self.finetune_dense(Trainable::All, setting == 5)?;
                    (net, None, Vec::new(), fcurve)
                }
                7 => {
                    let (net, fcurve) = self.finetune_dense(Trainable::LastLayer, false)?;
                    (net, None, Vec::new(), fcurve)
                }
                other => return Err(Error::Config(format!("ablation setting {other} is not in 1..=7"))),
            };
            let report = self.evaluate(&model, extracted.as_ref().map(|e| e.keep_ratio))?;
            out.push(SettingOutcome {
                setting,
                model,
                extracted,
                mask_curve,
                finetune_curve,
                report,
            });
        }
        Ok(out)
    }
}

/// All stage outputs of one run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub prepared: Prepared,
    pub purity: PurityReport,
    pub outcome: SettingOutcome,
    pub erm_report: MetricsReport,
}

impl RunArtifacts {
    pub fn final_report(&self) -> &MetricsReport {
        &self.outcome.report
    }

    pub fn mask(&self) -> Option<&MaskSet> {
        self.outcome.extracted.as_ref().map(|e| &e.masks)
    }

    /// Writes the run directory: configuration, checkpoints, reports, curves.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.prepared;
        write_json(&dir.join("config.json"), &p.cfg)?;
        write_json(&dir.join("cluster_summary.json"), &p.summary)?;
        write_json(&dir.join("purity.json"), &self.purity)?;
        write_json(&dir.join("taskdata.json"), &p.task)?;
        write_json(&dir.join("metrics_erm.json"), &self.erm_report)?;
        write_json(&dir.join("metrics.json"), &self.outcome.report)?;
        p.erm.save_json(&dir.join("erm.json"))?;
        self.outcome.model.save_json(&dir.join("model.json"))?;
        if let Some(ex) = &self.outcome.extracted {
            ex.masks.save_json(&dir.join("mask.json"))?;
            ex.subnetwork.save_json(&dir.join("subnetwork.json"))?;
        }
        let curve = |name: &str, records: &[EpochRecord]| -> Result<()> {
            let path = dir.join(name);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_curve(records, file)
        };
        curve("curve_erm.csv", &p.erm_curve)?;
        curve("curve_mask.csv", &self.outcome.mask_curve)?;
        curve("curve_finetune.csv", &self.outcome.finetune_curve)?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// ERM, clustering, task set, mask training, extraction, fine-tuning, and
/// evaluation. Runs ablation setting `cfg.ablation` (default 1).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    let prepared = prepare(cfg)?;
    run_prepared(prepared)
}

pub fn run_prepared(prepared: Prepared) -> Result<RunArtifacts> {
    let setting = prepared.cfg.ablation.unwrap_or(1);
    let outcome = prepared.run_settings(&[setting])?.pop().expect("one setting requested");
    let erm_report = prepared.evaluate(&prepared.erm, None)?;
    Ok(RunArtifacts {
        purity: prepared.purity_report()?,
        prepared,
        outcome,
        erm_report,
    })
}

pub fn run_ablation(setting: u8, cfg: &PipelineConfig) -> Result<MetricsReport> {
    if !(1..=7).contains(&setting) {
        return Err(Error::Config(format!("ablation setting {setting} is not in 1..=7")));
    }
    let prepared = prepare(cfg)?;
    Ok(prepared.run_settings(&[setting])?.pop().expect("one setting requested").report)
}

/// FNV-1a over the bit patterns of a sequence of floats.
pub fn fingerprint<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn network_fingerprint(net: &DenseNetwork) -> u64 {
    fingerprint(net.layers().iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data())))
}
