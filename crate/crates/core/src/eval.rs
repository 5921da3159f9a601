//! Group metrics (worst-group, minority-group, unbiased accuracy and gap),
//! intervention flip rates, decision rasters, PCA projections, and their
//! CSV/JSON/SVG exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_rows, DenseNetwork, Tensor};
use crate::datasets::{balanced_indices, LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::par::Execution;

/// Anything that maps a batch of input rows to class ids.
pub trait Classifier {
    fn classify(&self, x: &Tensor) -> Result<Vec<usize>>;
    fn input_dim(&self) -> usize;
}

impl Classifier for DenseNetwork {
    fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits_with(x, Execution::default())?))
    }

    fn input_dim(&self) -> usize {
        DenseNetwork::input_dim(self)
    }
}

/// Per-row classifier built from a closure.
pub struct FnClassifier<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> usize> Classifier for FnClassifier<F> {
    fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok((0..x.rows()).map(|r| (self.f)(x.row(r))).collect())
    }

    fn input_dim(&self) -> usize {
        self.dim
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub class: usize,
    pub value: usize,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty group.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub attribute: String,
    pub split: SplitTag,
    /// Ordered by `(class, value)`; includes empty groups.
    pub cells: Vec<GroupCell>,
}

impl GroupTable {
    pub fn from_predictions(ds: &LabeledDataset, predictions: &[usize], attribute: &str) -> Result<Self> {
        if predictions.len() != ds.len() {
            return Err(Error::shape("group table", "one prediction per sample required"));
        }
        let attr = ds.attribute(attribute)?;
        let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for y in 0..ds.num_classes() {
            for a in 0..attr.cardinality {
                cells.insert((y, a), (0, 0));
            }
        }
        for (i, &p) in predictions.iter().enumerate() {
            let cell = cells.entry((ds.labels()[i], attr.values[i])).or_default();
            cell.0 += 1;
            cell.1 += usize::from(p == ds.labels()[i]);
        }
        Ok(Self {
            attribute: attribute.to_string(),
            split: ds.split(),
            cells: cells
                .into_iter()
                .map(|((class, value), (count, correct))| GroupCell {
                    class,
                    value,
                    count,
                    correct,
                    accuracy: (count > 0).then(|| correct as f64 / count as f64),
                })
                .collect(),
        })
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Count-weighted accuracy over all cells.
    pub fn overall_accuracy(&self) -> f64 {
        let correct: usize = self.cells.iter().map(|c| c.correct).sum();
        correct as f64 / self.total().max(1) as f64
    }

    pub fn warnings(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter(|c| c.count == 0)
            .map(|c| format!("group (y={}, {}={}) is empty; excluded", c.class, self.attribute, c.value))
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["attribute", "split", "y", "a", "count", "correct", "accuracy"])?;
        for c in &self.cells {
            w.write_record([
                self.attribute.clone(),
                format!("{:?}", self.split).to_lowercase(),
                c.class.to_string(),
                c.value.to_string(),
                c.count.to_string(),
                c.correct.to_string(),
                c.accuracy.map_or(String::new(), |a| a.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn group_accuracy(model: &impl Classifier, ds: &LabeledDataset, attribute: &str) -> Result<GroupTable> {
    ds.attribute(attribute)?;
    let predictions = model.classify(ds.inputs())?;
    GroupTable::from_predictions(ds, &predictions, attribute)
}

/// Lowest accuracy over the non-empty groups.
pub fn wga(table: &GroupTable) -> Result<f64> {
    table
        .cells
        .iter()
        .filter_map(|c| c.accuracy)
        .reduce(f64::min)
        .ok_or_else(|| Error::Config(format!("no non-empty groups for {}", table.attribute)))
}

/// Accuracy of the non-empty group with the fewest training samples (ties to
/// the lower `(class, value)`).
pub fn mga(table: &GroupTable, train_counts: &BTreeMap<(usize, usize), usize>) -> Result<f64> {
    table
        .cells
        .iter()
        .filter(|c| c.accuracy.is_some())
        .min_by_key(|c| (train_counts.get(&(c.class, c.value)).copied().unwrap_or(0), c.class, c.value))
        .and_then(|c| c.accuracy)
        .ok_or_else(|| Error::Config(format!("no non-empty groups for {}", table.attribute)))
}

/// Accuracy on the exactly balanced subsample (every group cut to the size of
/// the smallest one).
pub fn unbiased_accuracy_from_predictions(
    ds: &LabeledDataset,
    predictions: &[usize],
    attribute: &str,
    seed: Option<u64>,
) -> Result<f64> {
    let idx = balanced_indices(ds, attribute, seed)?;
    let p: Vec<usize> = idx.iter().map(|&i| predictions[i]).collect();
    let y: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
    Ok(accuracy(&p, &y))
}

pub fn unbiased_accuracy(model: &impl Classifier, ds: &LabeledDataset, attribute: &str, seed: Option<u64>) -> Result<f64> {
    let predictions = model.classify(ds.inputs())?;
    unbiased_accuracy_from_predictions(ds, &predictions, attribute, seed)
}

pub fn uag(avg: f64, ua: f64) -> f64 {
    avg - ua
}

/// Fraction of samples whose prediction changes when the attribute's
/// registered intervention is applied.
pub fn spurious_flip_rate(model: &impl Classifier, ds: &LabeledDataset, attribute: &str) -> Result<f64> {
    let flipped = ds.intervene(attribute)?;
    let before = model.classify(ds.inputs())?;
    let after = model.classify(flipped.inputs())?;
    if before.is_empty() {
        return Ok(0.0);
    }
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / before.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub wga: f64,
    pub mga: f64,
    pub ua: f64,
    pub uag: f64,
    pub flip_rate: Option<f64>,
    pub groups: GroupTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg: f64,
    pub attributes: BTreeMap<String, AttributeMetrics>,
    pub keep_ratio: Option<f64>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Full report on `test` for each attribute. `train` supplies the group sizes
/// that decide which group is the minority.
pub fn evaluate(
    model: &impl Classifier,
    train: &LabeledDataset,
    test: &LabeledDataset,
    attributes: &[&str],
    ua_seed: Option<u64>,
) -> Result<MetricsReport> {
    let predictions = model.classify(test.inputs())?;
    let avg = accuracy(&predictions, test.labels());
    let mut report = MetricsReport {
        avg,
        attributes: BTreeMap::new(),
        keep_ratio: None,
        warnings: Vec::new(),
    };
    for &name in attributes {
        let table = GroupTable::from_predictions(test, &predictions, name)?;
        report.warnings.extend(table.warnings());
        let ua = unbiased_accuracy_from_predictions(test, &predictions, name, ua_seed)?;
        let flip_rate = if test.has_intervention(name) {
            Some(spurious_flip_rate(model, test, name)?)
        } else {
            None
        };
        report.attributes.insert(
            name.to_string(),
            AttributeMetrics {
                wga: wga(&table)?,
                mga: mga(&table, &train.group_counts(name)?)?,
                ua,
                uag: uag(avg, ua),
                flip_rate,
                groups: table,
            },
        );
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub bounds: Bounds,
    pub resolution: usize,
    /// Row-major; row `r` is `y` at cell center `r`, column `c` is `x`.
    pub classes: Vec<usize>,
}

impl Raster {
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let b = &self.bounds;
        let r = self.resolution as f64;
        (
            b.x_min + (col as f64 + 0.5) * (b.x_max - b.x_min) / r,
            b.y_min + (row as f64 + 0.5) * (b.y_max - b.y_min) / r,
        )
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.classes[row * self.resolution + col]
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row", "col", "x", "y", "class"])?;
        for r in 0..self.resolution {
            for c in 0..self.resolution {
                let (x, y) = self.cell_center(r, c);
                w.write_record([r.to_string(), c.to_string(), x.to_string(), y.to_string(), self.get(r, c).to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Predictions at the centers of a `resolution x resolution` grid.
pub fn decision_boundary_raster(model: &impl Classifier, bounds: Bounds, resolution: usize) -> Result<Raster> {
    if model.input_dim() != 2 {
        return Err(Error::shape("decision_boundary_raster", format!("needs 2-D inputs, model takes {}", model.input_dim())));
    }
    if resolution == 0 || !(bounds.x_max > bounds.x_min && bounds.y_max > bounds.y_min) {
        return Err(Error::Config("raster needs resolution > 0 and a non-empty box".into()));
    }
    let mut raster = Raster {
        bounds,
        resolution,
        classes: Vec::new(),
    };
    let mut points = Vec::with_capacity(2 * resolution * resolution);
    for r in 0..resolution {
        for c in 0..resolution {
            let (x, y) = raster.cell_center(r, c);
            points.extend([x, y]);
        }
    }
    raster.classes = model.classify(&Tensor::matrix(resolution * resolution, 2, points)?)?;
    Ok(raster)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `[n x dims]`.
    pub coords: Tensor,
    /// `[dims x d]`, unit rows.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Centers the rows and projects them on the top `dims` principal directions.
/// Each direction is signed so its largest-magnitude entry is positive.
pub fn pca_project(x: &Tensor, dims: usize) -> Result<Projection> {
    let (n, d) = (x.rows(), x.cols());
    if dims == 0 || dims > d || n < dims {
        return Err(Error::shape("pca_project", format!("{dims} components from {n} x {d} data")));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(dims * d);
    let mut explained = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let v = eig.eigenvectors.column(k);
        let lead = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|e| sign * e));
        explained.push(eig.eigenvalues[k].max(0.0));
    }
    let comp = DMatrix::from_row_slice(dims, d, &components);
    let coords = &centered * comp.transpose();
    let coords: Vec<f64> = (0..n).flat_map(|i| (0..dims).map(move |j| (i, j))).map(|(i, j)| coords[(i, j)]).collect();
    Ok(Projection {
        coords: Tensor::matrix(n, dims, coords)?,
        components: Tensor::matrix(dims, d, components)?,
        explained_variance: explained,
        mean,
    })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const SVG_SIZE: f64 = 480.0;

fn color(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

/// Scatter plot of 2-D points colored by `labels`.
pub fn scatter_svg(points: &Tensor, labels: &[usize]) -> Result<String> {
    if points.cols() != 2 || points.rows() != labels.len() {
        return Err(Error::shape("scatter_svg", "need [n x 2] points and n labels"));
    }
    let xs: Vec<f64> = (0..points.rows()).map(|i| points.get(i, 0)).collect();
    let ys: Vec<f64> = (0..points.rows()).map(|i| points.get(i, 1)).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let ((x0, x1), (y0, y1)) = (span(&xs), span(&ys));
    let pad = 10.0;
    let scale = |v: f64, lo: f64, hi: f64| pad + (v - lo) / (hi - lo) * (SVG_SIZE - 2.0 * pad);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}">"#);
    s.push('\n');
    for ((x, y), &l) in xs.iter().zip(&ys).zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#,
            scale(*x, x0, x1),
            SVG_SIZE - scale(*y, y0, y1),
            color(l)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Heatmap of a raster with optional sample points drawn on top.
pub fn raster_svg(raster: &Raster, overlay: Option<(&Tensor, &[usize])>) -> String {
    let cell = SVG_SIZE / raster.resolution as f64;
    let b = raster.bounds;
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}">"#);
    s.push('\n');
    for r in 0..raster.resolution {
        for c in 0..raster.resolution {
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}" fill-opacity="0.25"/>"#,
                c as f64 * cell,
                SVG_SIZE - (r + 1) as f64 * cell,
                cell,
                cell,
                color(raster.get(r, c))
            );
        }
    }
    if let Some((points, labels)) = overlay {
        for (i, &l) in labels.iter().enumerate() {
            let px = (points.get(i, 0) - b.x_min) / (b.x_max - b.x_min) * SVG_SIZE;
            let py = SVG_SIZE - (points.get(i, 1) - b.y_min) / (b.y_max - b.y_min) * SVG_SIZE;
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="{}"/>"#, color(l));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart with one polyline and legend entry per named series. The y
/// axis spans `[0, 1]`, which suits accuracies and keep ratios.
pub fn line_svg(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xs = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
    let pad = 40.0;
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (SVG_SIZE - 2.0 * pad);
    let py = |y: f64| SVG_SIZE - pad - y.clamp(0.0, 1.0) * (SVG_SIZE - 2.0 * pad);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}">"#);
    s.push('\n');
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{w}" height="{w}" fill="none" stroke="black"/>"#,
        w = SVG_SIZE - 2.0 * pad
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            path.join(" "),
            color(k)
        );
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, px(x), py(y), color(k));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{}">{}</text>"#,
            pad + 8.0,
            pad + 16.0 * (k + 1) as f64,
            color(k),
            name
        );
    }
    s.push_str("</svg>\n");
    s
}
