use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Intervention, LabeledDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            row,
            col,
            height,
            width,
        }
    }

    fn pixels(&self, grid: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row..self.row + self.height)
            .flat_map(move |r| (self.col..self.col + self.width).map(move |c| r * grid + c))
    }

    fn fits(&self, grid: usize) -> bool {
        self.row + self.height <= grid && self.col + self.width <= grid
    }
}

/// Class-determined stroke: class `c` of `C` draws a bar through the center
/// of the core box at angle `c * pi / C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreSpec {
    /// Core box, top-left corner and side length.
    pub top: usize,
    pub left: usize,
    pub size: usize,
    /// Stroke intensity is drawn uniformly from `[intensity * (1 - intensity_jitter), intensity]`.
    pub intensity: f64,
    pub intensity_jitter: f64,
    /// Maximum random translation of the stroke in pixels, per axis.
    pub max_shift: usize,
    /// Std of the Gaussian noise added to every non-marker pixel.
    pub pixel_noise: f64,
}

impl Default for CoreSpec {
    fn default() -> Self {
        Self {
            top: 3,
            left: 3,
            size: 6,
            intensity: 0.6,
            intensity_jitter: 0.5,
            max_shift: 1,
            pixel_noise: 0.2,
        }
    }
}

/// Binary marker rendered at `levels[a]` over `region`. With probability
/// `correlation` the marker value matches the class parity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub correlation: f64,
    pub region: Vec<Rect>,
    #[serde(default = "default_levels")]
    pub levels: [f64; 2],
}

fn default_levels() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticImageConfig {
    pub grid: usize,
    pub classes: usize,
    pub per_class: usize,
    pub core: CoreSpec,
    pub attributes: Vec<AttributeSpec>,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticImageConfig {
    fn default() -> Self {
        Self {
            grid: 12,
            classes: 2,
            per_class: 500,
            core: CoreSpec::default(),
            attributes: vec![
                AttributeSpec {
                    name: "corner".into(),
                    correlation: 0.95,
                    region: vec![Rect::new(0, 0, 2, 2)],
                    levels: default_levels(),
                },
                AttributeSpec {
                    name: "band".into(),
                    correlation: 0.95,
                    region: vec![Rect::new(10, 0, 2, 12)],
                    levels: default_levels(),
                },
            ],
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticImageConfig {
    /// Marker-swap interventions, one per attribute, keyed by name.
    pub fn interventions(&self) -> Vec<(String, Intervention)> {
        self.attributes
            .iter()
            .map(|a| {
                let pixels = a.region.iter().flat_map(|r| r.pixels(self.grid)).collect();
                (
                    a.name.clone(),
                    Intervention::SwapMarker {
                        pixels,
                        levels: a.levels,
                    },
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.per_class == 0 {
            return err("need at least two classes and one sample per class".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return err("label noise must lie in [0, 1]".into());
        }
        let core = &self.core;
        let reach = core.size + 2 * core.max_shift;
        if core.top < core.max_shift
            || core.left < core.max_shift
            || core.top + core.size + core.max_shift > self.grid
            || core.left + core.size + core.max_shift > self.grid
        {
            return err("core box (with shift margin) leaves the grid".into());
        }
        let core_rect = Rect::new(core.top - core.max_shift, core.left - core.max_shift, reach, reach);
        let mut owner = vec![None::<&str>; self.grid * self.grid];
        for p in core_rect.pixels(self.grid) {
            owner[p] = Some("core");
        }
        for attr in &self.attributes {
            if !(0.0..=1.0).contains(&attr.correlation) {
                return err(format!("attribute {}: correlation outside [0, 1]", attr.name));
            }
            for rect in &attr.region {
                if !rect.fits(self.grid) {
                    return err(format!("attribute {}: region leaves the grid", attr.name));
                }
                for p in rect.pixels(self.grid) {
                    if let Some(other) = owner[p] {
                        return err(format!(
                            "attribute {} overlaps {other} at pixel {p}",
                            attr.name
                        ));
                    }
                    owner[p] = Some(&attr.name);
                }
            }
        }
        Ok(())
    }
}

fn stroke(grid: usize, core: &CoreSpec, class: usize, classes: usize) -> Vec<(usize, usize)> {
    let angle = class as f64 * std::f64::consts::PI / classes as f64;
    let (dy, dx) = (angle.sin(), angle.cos());
    let center = (core.size as f64 - 1.0) / 2.0;
    let mut pixels = Vec::new();
    for r in 0..core.size {
        for c in 0..core.size {
            let (py, px) = (r as f64 - center, c as f64 - center);
            // distance from the line through the box center with direction (dy, dx)
            if (px * dy - py * dx).abs() <= 0.6 {
                pixels.push((core.top + r, core.left + c));
            }
        }
    }
    debug_assert!(pixels.iter().all(|&(r, c)| r < grid && c < grid));
    pixels
}

pub fn gen_synthetic_images(cfg: &SyntheticImageConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.grid;
    let d = g * g;
    let n = cfg.classes * cfg.per_class;
    let noise = Normal::new(0.0, cfg.core.pixel_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let strokes: Vec<_> = (0..cfg.classes).map(|c| stroke(g, &cfg.core, c, cfg.classes)).collect();
    let marker_pixels: Vec<Vec<usize>> = cfg
        .attributes
        .iter()
        .map(|a| a.region.iter().flat_map(|r| r.pixels(g)).collect())
        .collect();
    let mut is_marker = vec![false; d];
    for p in marker_pixels.iter().flatten() {
        is_marker[*p] = true;
    }

    let order = super::permutation(n, rng.random());
    let mut inputs = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    let mut attrs = vec![Vec::with_capacity(n); cfg.attributes.len()];
    for (i, &slot) in order.iter().enumerate() {
        let class = slot / cfg.per_class;
        let img = &mut inputs[i * d..(i + 1) * d];
        let shift = cfg.core.max_shift as i64;
        let (sr, sc) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
        let lo = cfg.core.intensity * (1.0 - cfg.core.intensity_jitter);
        let level = rng.random_range(lo..=cfg.core.intensity);
        for &(r, c) in &strokes[class] {
            let (r, c) = ((r as i64 + sr) as usize, (c as i64 + sc) as usize);
            img[r * g + c] = level;
        }
        for (p, v) in img.iter_mut().enumerate() {
            if !is_marker[p] {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        for (k, attr) in cfg.attributes.iter().enumerate() {
            let parity = class % 2;
            let a = if rng.random::<f64>() < attr.correlation {
                parity
            } else {
                1 - parity
            };
            for &p in &marker_pixels[k] {
                img[p] = attr.levels[a];
            }
            attrs[k].push(a);
        }
        let label = if rng.random::<f64>() < cfg.label_noise {
            (class + rng.random_range(1..cfg.classes)) % cfg.classes
        } else {
            class
        };
        labels.push(label);
    }

    let mut ds = LabeledDataset::new(Tensor::matrix(n, d, inputs)?, labels, cfg.classes)?;
    for ((attr, values), pixels) in cfg.attributes.iter().zip(attrs).zip(marker_pixels) {
        ds = ds.with_attribute(&attr.name, values, 2)?.with_intervention(
            &attr.name,
            Intervention::SwapMarker {
                pixels,
                levels: attr.levels,
            },
        )?;
    }
    Ok(ds)
}
