//! Labeled datasets with evaluation-only attribute annotations, synthetic
//! generators with tunable spurious correlations, splitting, and CSV I/O.
//!
//! Training code only ever sees a [`TrainingView`] (inputs and class
//! labels). Attribute labels are reachable through [`LabeledDataset`] for
//! evaluation and reporting.

mod csvio;
mod images;
mod moons;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use csvio::{load_dataset, read_csv, save_dataset, write_csv, CLUSTER_COLUMN, LABEL_COLUMN};
pub use images::{gen_synthetic_images, AttributeSpec, CoreSpec, Rect, SyntheticImageConfig};
pub use moons::{gen_two_moons, moons_intervention, SpuriousMoonsConfig, MOONS_ATTRIBUTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Val,
    Test,
}

/// One evaluation-only annotation column.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<usize>,
    /// Number of distinct values the attribute can take.
    pub cardinality: usize,
}

/// Counterfactual edit of the inputs that flips one attribute's spurious
/// signal. Applying an intervention twice restores the original inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    /// `x[feature] = base + displacement`; the intervention negates the
    /// displacement.
    NegateDisplacement {
        feature: usize,
        base: Vec<f64>,
        displacement: Vec<f64>,
    },
    /// A binary marker rendered as constant `levels[a]` over `pixels`; the
    /// intervention swaps `a` and re-renders.
    SwapMarker {
        pixels: Vec<usize>,
        levels: [f64; 2],
    },
}

/// Inputs and class labels only. This is everything the training stages are
/// given.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
    pub num_classes: usize,
}

impl TrainingView<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    attributes: Vec<Attribute>,
    clusters: Option<Vec<usize>>,
    split: SplitTag,
    interventions: BTreeMap<String, Intervention>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("inputs {:?} for {} labels", inputs.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            attributes: Vec::new(),
            clusters: None,
            split: SplitTag::Train,
            interventions: BTreeMap::new(),
        })
    }

    pub fn with_attribute(mut self, name: &str, values: Vec<usize>, cardinality: usize) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::shape("attribute", format!("{name}: {} values", values.len())));
        }
        if values.iter().any(|&v| v >= cardinality) {
            return Err(Error::Config(format!("attribute {name} exceeds cardinality {cardinality}")));
        }
        self.attributes.retain(|a| a.name != name);
        self.attributes.push(Attribute {
            name: name.to_string(),
            values,
            cardinality,
        });
        Ok(self)
    }

    pub fn with_intervention(mut self, attribute: &str, intervention: Intervention) -> Result<Self> {
        self.attribute(attribute)?;
        self.interventions.insert(attribute.to_string(), intervention);
        Ok(self)
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            inputs: &self.inputs,
            labels: &self.labels,
            num_classes: self.num_classes,
        }
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute_names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn attribute(&self, name: &str) -> Result<&Attribute> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn attributes_mut(&mut self) -> &mut [Attribute] {
        &mut self.attributes
    }

    pub fn clusters(&self) -> Option<&[usize]> {
        self.clusters.as_deref()
    }

    pub fn set_clusters(&mut self, clusters: Option<Vec<usize>>) -> Result<()> {
        if clusters.as_ref().is_some_and(|c| c.len() != self.len()) {
            return Err(Error::shape("clusters", "one cluster id per sample"));
        }
        self.clusters = clusters;
        Ok(())
    }

    pub fn has_intervention(&self, attribute: &str) -> bool {
        self.interventions.contains_key(attribute)
    }

    /// Group id `(y, a)` of every sample for `attribute`.
    pub fn groups(&self, attribute: &str) -> Result<Vec<(usize, usize)>> {
        let attr = self.attribute(attribute)?;
        Ok(self.labels.iter().copied().zip(attr.values.iter().copied()).collect())
    }

    /// Sample count per `(y, a)` group, including empty groups.
    pub fn group_counts(&self, attribute: &str) -> Result<BTreeMap<(usize, usize), usize>> {
        let attr = self.attribute(attribute)?;
        let mut counts = BTreeMap::new();
        for y in 0..self.num_classes {
            for a in 0..attr.cardinality {
                counts.insert((y, a), 0);
            }
        }
        for g in self.groups(attribute)? {
            *counts.entry(g).or_insert(0) += 1;
        }
        Ok(counts)
    }

    /// Rows, labels, attributes, clusters and intervention state of the
    /// listed samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_f = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: pick(&self.labels),
            num_classes: self.num_classes,
            attributes: self
                .attributes
                .iter()
                .map(|a| Attribute {
                    name: a.name.clone(),
                    values: pick(&a.values),
                    cardinality: a.cardinality,
                })
                .collect(),
            clusters: self.clusters.as_deref().map(pick),
            split: self.split,
            interventions: self
                .interventions
                .iter()
                .map(|(k, iv)| {
                    let iv = match iv {
                        Intervention::NegateDisplacement {
                            feature,
                            base,
                            displacement,
                        } => Intervention::NegateDisplacement {
                            feature: *feature,
                            base: pick_f(base),
                            displacement: pick_f(displacement),
                        },
                        other => other.clone(),
                    };
                    (k.clone(), iv)
                })
                .collect(),
        }
    }

    /// Applies the intervention registered for `attribute`.
    pub fn intervene(&self, attribute: &str) -> Result<Self> {
        let iv = self
            .interventions
            .get(attribute)
            .ok_or_else(|| Error::NoIntervention(attribute.to_string()))?;
        let mut out = self.clone();
        let d = self.dim();
        match iv {
            Intervention::NegateDisplacement {
                feature,
                base,
                displacement,
            } => {
                let flipped: Vec<f64> = displacement.iter().map(|v| -v).collect();
                let data = out.inputs.data_mut();
                for (i, (&b, &s)) in base.iter().zip(&flipped).enumerate() {
                    data[i * d + feature] = b + s;
                }
                out.interventions.insert(
                    attribute.to_string(),
                    Intervention::NegateDisplacement {
                        feature: *feature,
                        base: base.clone(),
                        displacement: flipped,
                    },
                );
            }
            Intervention::SwapMarker { pixels, levels } => {
                let slot = out
                    .attributes
                    .iter()
                    .position(|a| a.name == attribute)
                    .expect("intervention attribute exists");
                let values: Vec<usize> = out.attributes[slot].values.iter().map(|&a| 1 - a).collect();
                let data = out.inputs.data_mut();
                for (i, &a) in values.iter().enumerate() {
                    for &p in pixels {
                        data[i * d + p] = levels[a];
                    }
                }
                out.attributes[slot].values = values;
            }
        }
        Ok(out)
    }
}

/// Deterministic shuffled train/val/test split. With
/// `balanced_test_attribute`, the test part is cut down to an equal count per
/// `(y, a)` group.
pub fn split(
    ds: &LabeledDataset,
    fractions: [f64; 3],
    seed: u64,
    balanced_test_attribute: Option<&str>,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let order = permutation(ds.len(), seed);
    let n_train = (fractions[0] * ds.len() as f64).round() as usize;
    let n_val = ((fractions[1] * ds.len() as f64).round() as usize).min(ds.len() - n_train);
    let train = ds.subset(&order[..n_train]).with_split(SplitTag::Train);
    let val = ds.subset(&order[n_train..n_train + n_val]).with_split(SplitTag::Val);
    let mut test = ds.subset(&order[n_train + n_val..]).with_split(SplitTag::Test);
    if let Some(attr) = balanced_test_attribute {
        let keep = balanced_indices(&test, attr, None)?;
        test = test.subset(&keep);
    }
    Ok((train, val, test))
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Indices of an exactly group-balanced subsample for `attribute`: the first
/// `min group count` members of every `(y, a)` group, taken in a seeded
/// shuffled order (or in dataset order when `seed` is `None`).
pub fn balanced_indices(ds: &LabeledDataset, attribute: &str, seed: Option<u64>) -> Result<Vec<usize>> {
    let counts = ds.group_counts(attribute)?;
    if let Some((&(class, value), _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(Error::EmptyGroup {
            attribute: attribute.to_string(),
            class,
            value,
        });
    }
    let per_group = counts.values().copied().min().unwrap_or(0);
    let groups = ds.groups(attribute)?;
    let order = match seed {
        Some(s) => permutation(ds.len(), s),
        None => (0..ds.len()).collect(),
    };
    let mut taken: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut keep = Vec::with_capacity(per_group * counts.len());
    for i in order {
        let slot = taken.entry(groups[i]).or_insert(0);
        if *slot < per_group {
            *slot += 1;
            keep.push(i);
        }
    }
    keep.sort_unstable();
    Ok(keep)
}
