use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spurprune::autodiff::DenseNetwork;
use spurprune::clustering::{kmeans, label_clusters, purity, KMeansConfig};
use spurprune::datasets::{load_dataset, save_dataset, LabeledDataset};
use spurprune::eval::{evaluate, line_svg, raster_svg};
use spurprune::par::Execution;
use spurprune::pipeline::{
    demo_two_moons, derive_seed, extract, make_splits, mean, restore_interventions, run_ablation_suite,
    run_variant_suite, seed_range, sweep_pruning_ratio, train_erm, train_mask, train_network, write_curve,
    write_json, EpochRecord, MetricsRow, PipelineConfig, PurityReport, TrainSpec, Variant,
};
use spurprune::taskdata::{build_task_dataset, per_class_target, ContrastiveConfig};

use crate::config::RunConfig;

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";

/// Cluster assignments of the training split, as written by `cluster`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterFile {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_effective(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.effective_toml()?)
}

fn save_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    write_curve(curve, file)?;
    Ok(())
}

fn save_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    MetricsRow::write_csv(rows, file)?;
    Ok(())
}

fn load_split(data: &Path, file: &str) -> Result<LabeledDataset> {
    let path = data.join(file);
    load_dataset(&path, &[]).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> Result<DenseNetwork> {
    DenseNetwork::load_json(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Prints per-label means over seeds.
fn print_means(rows: &[MetricsRow]) {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    for label in labels {
        let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.label == label).collect();
        let avg = mean(group.iter().map(|r| r.avg));
        let mut line = format!("{label:<14} avg {avg:.4}");
        for attr in group[0].wga.keys() {
            let w = mean(group.iter().map(|r| r.wga[attr]));
            let u = mean(group.iter().map(|r| r.uag[attr]));
            line += &format!("  {attr}: wga {w:.4} uag {u:.4}");
        }
        println!("{line}");
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_dir(out)?;
    let splits = make_splits(&cfg.pipeline.data, cfg.pipeline.seed)?;
    save_dataset(&splits.train, &out.join(TRAIN_CSV))?;
    save_dataset(&splits.test, &out.join(TEST_CSV))?;
    write_effective(out, cfg)?;
    println!("train {} rows, test {} rows -> {}", splits.train.len(), splits.test.len(), out.display());
    Ok(())
}

pub fn train_erm_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train = load_split(data, TRAIN_CSV)?;
    prepare_dir(out)?;
    let p = &cfg.pipeline;
    let (model, curve) = train_erm(train.training_view(), &p.hidden, &p.erm, p.seed, None)?;
    model.save_json(&out.join("model.json"))?;
    save_curve(&out.join("curve_erm.csv"), &curve)?;
    write_effective(out, cfg)?;
    let acc = spurprune::eval::accuracy(&model.predict(train.inputs())?, train.labels());
    println!("train accuracy {acc:.4}");
    Ok(())
}

pub fn cluster(model: &Path, data: &Path, k: usize, seed: u64, threshold: f64, out: &Path) -> Result<()> {
    let train = load_split(data, TRAIN_CSV)?;
    let erm = load_model(model)?;
    prepare_dir(out)?;
    let embeddings = erm.embed(train.inputs())?;
    let clusters = kmeans(
        &embeddings,
        &KMeansConfig {
            k,
            seed: derive_seed(seed, "kmeans"),
            ..KMeansConfig::default()
        },
    )?;
    let summary = label_clusters(&clusters.assignments, train.labels(), k, train.num_classes(), threshold)?;
    // attribute purity is a report only; nothing downstream reads it
    let mut attributes = BTreeMap::new();
    for attr in train.attributes() {
        attributes.insert(attr.name.clone(), purity(&clusters.assignments, &attr.values)?);
    }
    let report = PurityReport {
        class: purity(&clusters.assignments, train.labels())?,
        attributes,
    };
    write_json(&out.join("clusters.json"), &ClusterFile {
        k,
        assignments: clusters.assignments.clone(),
        inertia: clusters.inertia,
        inertia_history: clusters.inertia_history.clone(),
        iterations: clusters.iterations,
    })?;
    write_json(&out.join("cluster_summary.json"), &summary)?;
    write_json(&out.join("purity.json"), &report)?;
    println!("class purity {:.4}", report.class.overall);
    for (name, p) in &report.attributes {
        println!("{name} purity {:.4}", p.overall);
    }
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn contrastive_for(p: &PipelineConfig) -> ContrastiveConfig {
    ContrastiveConfig {
        rule: p.variant.rule(),
        ..p.taskdata.contrastive.clone()
    }
}

pub fn prune(cfg: &RunConfig, model: &Path, data: &Path, clusters: &Path, out: &Path) -> Result<()> {
    let p = &cfg.pipeline;
    let mut train = load_split(data, TRAIN_CSV)?;
    let erm = load_model(model)?;
    let cf: ClusterFile = read_json(clusters)?;
    if cf.assignments.len() != train.len() {
        bail!("{} has {} assignments for {} training rows", clusters.display(), cf.assignments.len(), train.len());
    }
    prepare_dir(out)?;
    let view = train.training_view();
    let summary = label_clusters(&cf.assignments, view.labels, cf.k, view.num_classes, p.clustering.threshold)?;
    let per_class = p
        .taskdata
        .per_class
        .unwrap_or_else(|| per_class_target(view.labels.len(), view.num_classes, p.taskdata.fraction));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, "taskdata"));
    let task = build_task_dataset(view.labels, &cf.assignments, &summary, per_class, &mut rng)?;
    let (masked, curve) = train_mask(
        &erm,
        view,
        &cf.assignments,
        &task,
        &p.masking,
        &contrastive_for(p),
        derive_seed(p.seed, "mask"),
    )?;
    let extracted = extract(&masked, p.masking.prune)?;
    extracted.masks.save_json(&out.join("mask.json"))?;
    extracted.subnetwork.save_json(&out.join("subnetwork.json"))?;
    write_json(&out.join("layer_masks.json"), &extracted.layer_masks)?;
    write_json(&out.join("taskdata.json"), &task)?;
    train.set_clusters(Some(cf.assignments))?;
    save_dataset(&train.subset(&task.members), &out.join("taskdata.csv"))?;
    save_curve(&out.join("curve_mask.csv"), &curve)?;
    write_effective(out, cfg)?;
    println!("keep_ratio {:.4}", extracted.keep_ratio);
    Ok(())
}

pub fn finetune(cfg: &RunConfig, subnet: &Path, mask: Option<&Path>, taskdata: &Path, epochs: Option<usize>, out: &Path) -> Result<()> {
    let p = &cfg.pipeline;
    let net = load_model(subnet)?;
    let mask_path = mask.map_or_else(|| subnet.with_file_name("layer_masks.json"), Path::to_path_buf);
    let masks: Option<Vec<Option<Vec<bool>>>> = if mask_path.exists() {
        Some(read_json(&mask_path)?)
    } else if mask.is_some() {
        bail!("mask file {} not found", mask_path.display());
    } else {
        None
    };
    let task = load_dataset(taskdata, &[]).with_context(|| format!("loading {}", taskdata.display()))?;
    prepare_dir(out)?;
    let mut sgd = p.finetune.clone();
    if let Some(e) = epochs {
        sgd.epochs = e;
    }
    let mut spec = TrainSpec::new(&sgd, derive_seed(p.seed, "finetune"));
    spec.masks = masks.as_deref();
    let (model, curve) = train_network(net, task.training_view(), &spec)?;
    model.save_json(&out.join("model.json"))?;
    save_curve(&out.join("curve_finetune.csv"), &curve)?;
    write_effective(out, cfg)?;
    if let Some(last) = curve.last() {
        println!("final loss {:.4} train accuracy {:.4}", last.loss, last.train_accuracy);
    }
    Ok(())
}

pub fn evaluate_cmd(
    model: &Path,
    data: &Path,
    attributes: &[String],
    cfg: Option<&RunConfig>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let net = load_model(model)?;
    let train = load_split(data, TRAIN_CSV)?;
    let mut test = load_split(data, TEST_CSV)?;
    if let Some(cfg) = cfg {
        test = restore_interventions(test, &cfg.pipeline.data)?;
    }
    let names: Vec<&str> = if attributes.is_empty() {
        test.attribute_names()
    } else {
        attributes.iter().map(String::as_str).collect()
    };
    prepare_dir(out)?;
    let report = evaluate(&net, &train, &test, &names, Some(derive_seed(seed, "balanced-test")))?;
    report.save_json(&out.join("metrics.json"))?;
    for (name, m) in &report.attributes {
        let path = out.join(format!("groups_{name}.csv"));
        let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        m.groups.write_csv(file)?;
        let flip = m.flip_rate.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        println!("{name}: wga {:.4} mga {:.4} ua {:.4} uag {:.4} flip {flip}", m.wga, m.mga, m.ua, m.uag);
    }
    println!("avg {:.4}", report.avg);
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, settings: &[u8], seeds: usize, exec: Execution, out: &Path) -> Result<()> {
    prepare_dir(out)?;
    let seeds = seed_range(cfg.pipeline.seed, seeds);
    let rows = run_ablation_suite(&cfg.pipeline, settings, &seeds, exec)?;
    save_rows(&out.join("ablation.csv"), &rows)?;
    write_effective(out, cfg)?;
    print_means(&rows);
    Ok(())
}

pub fn variants(cfg: &RunConfig, seeds: usize, exec: Execution, out: &Path) -> Result<()> {
    prepare_dir(out)?;
    let seeds = seed_range(cfg.pipeline.seed, seeds);
    let rows = run_variant_suite(&cfg.pipeline, &seeds, exec)?;
    save_rows(&out.join("variants.csv"), &rows)?;
    write_effective(out, cfg)?;
    print_means(&rows);
    let empty: usize = rows
        .iter()
        .filter(|r| r.label == Variant::NegAblation.name())
        .map(|r| r.empty_negative_pools)
        .sum();
    println!("neg_ablation anchors with empty negative pools: {empty}");
    Ok(())
}

pub fn sweep(cfg: &RunConfig, ratios: &[f64], seeds: usize, exec: Execution, out: &Path) -> Result<()> {
    prepare_dir(out)?;
    let seeds = seed_range(cfg.pipeline.seed, seeds);
    let rows = sweep_pruning_ratio(&cfg.pipeline, ratios, &seeds, exec)?;
    save_rows(&out.join("sweep.csv"), &rows)?;
    let at = |r: f64| -> Vec<&MetricsRow> { rows.iter().filter(|row| row.label == format!("{r}")).collect() };
    let series = |f: &dyn Fn(&MetricsRow) -> f64| -> Vec<(f64, f64)> {
        ratios.iter().map(|&r| (r, mean(at(r).into_iter().map(f)))).collect()
    };
    let svg = line_svg(&[
        ("avg".to_string(), series(&|r| r.avg)),
        ("mean wga".to_string(), series(&|r| r.mean_wga())),
        ("keep ratio".to_string(), series(&|r| r.keep_ratio.unwrap_or(f64::NAN))),
    ]);
    write_text(&out.join("sweep.svg"), &svg)?;
    write_effective(out, cfg)?;
    print_means(&rows);
    Ok(())
}

pub fn demo_moons(cfg: &RunConfig, resolution: usize, out: &Path) -> Result<()> {
    prepare_dir(out)?;
    let p = &cfg.pipeline;
    let demo = demo_two_moons(p, resolution)?;
    let train = make_splits(&p.data, p.seed)?.train;
    let mut table = csv::Writer::from_path(out.join("flip_rates.csv"))?;
    table.write_record(["model", "train_accuracy", "avg", "balanced_accuracy", "flip_rate"])?;
    for m in &demo.models {
        let svg = raster_svg(&m.raster, Some((train.inputs(), train.labels())));
        write_text(&out.join(format!("boundary_{}.svg", m.name)), &svg)?;
        let raster_path = out.join(format!("raster_{}.csv", m.name));
        m.raster.write_csv(fs::File::create(&raster_path).with_context(|| format!("writing {}", raster_path.display()))?)?;
        table.write_record([
            m.name.to_string(),
            format!("{}", m.train_accuracy),
            format!("{}", m.report.avg),
            format!("{}", m.balanced_accuracy()),
            format!("{}", m.flip_rate()),
        ])?;
        println!(
            "{:<12} train {:.4} avg {:.4} balanced {:.4} flip {:.4}",
            m.name,
            m.train_accuracy,
            m.report.avg,
            m.balanced_accuracy(),
            m.flip_rate()
        );
    }
    table.flush()?;
    write_effective(out, cfg)?;
    Ok(())
}

/// Resolves the output directory for a command.
pub fn out_for(flag: Option<PathBuf>, cfg: Option<&RunConfig>, command: &str) -> PathBuf {
    crate::config::output_dir(flag.as_deref(), cfg.and_then(|c| c.output.as_deref()), command)
}
