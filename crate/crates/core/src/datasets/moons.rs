use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Intervention, LabeledDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Attribute recording whether a sample's `x1` carries the class-aligned
/// displacement.
pub const MOONS_ATTRIBUTE: &str = "x1_aligned";

/// Two interleaving moons where, with probability `spuriousness`, a sample's
/// first coordinate is pushed by `spur_shift` toward its own class side
/// (`+` for class 1, `-` for class 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousMoonsConfig {
    pub n: usize,
    pub noise: f64,
    pub spuriousness: f64,
    pub spur_shift: f64,
    pub seed: u64,
}

impl Default for SpuriousMoonsConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            noise: 0.1,
            spuriousness: 0.95,
            spur_shift: 1.0,
            seed: 0,
        }
    }
}

impl SpuriousMoonsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config("two moons needs n >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.spuriousness) {
            return Err(Error::Config("spuriousness must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0) || !(self.spur_shift > 0.0) {
            return Err(Error::Config("noise must be >= 0 and spur_shift > 0".into()));
        }
        Ok(())
    }
}

pub fn gen_two_moons(cfg: &SpuriousMoonsConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.n;
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut aligned = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    let mut displacement = Vec::with_capacity(n);
    let class_order = super::permutation(n, rng.random());
    for &slot in &class_order {
        let y = usize::from(slot >= n / 2);
        let t = rng.random_range(0.0..PI);
        let (mx, my) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let bx = mx + jitter.sample(&mut rng);
        let by = my + jitter.sample(&mut rng);
        let on = rng.random::<f64>() < cfg.spuriousness;
        let d = match (on, y) {
            (false, _) => 0.0,
            (true, 0) => -cfg.spur_shift,
            (true, _) => cfg.spur_shift,
        };
        inputs.extend([bx + d, by]);
        labels.push(y);
        aligned.push(usize::from(on));
        base.push(bx);
        displacement.push(d);
    }
    LabeledDataset::new(Tensor::matrix(n, 2, inputs)?, labels, 2)?
        .with_attribute(MOONS_ATTRIBUTE, aligned, 2)?
        .with_intervention(
            MOONS_ATTRIBUTE,
            Intervention::NegateDisplacement {
                feature: 0,
                base,
                displacement,
            },
        )
}

/// Rebuilds the displacement intervention of a moons dataset loaded from disk,
/// from its labels, its `x1_aligned` column and the generator's shift.
pub fn moons_intervention(ds: &LabeledDataset, spur_shift: f64) -> Result<Intervention> {
    let aligned = &ds.attribute(MOONS_ATTRIBUTE)?.values;
    let x = ds.inputs();
    let mut base = Vec::with_capacity(ds.len());
    let mut displacement = Vec::with_capacity(ds.len());
    for (i, (&y, &a)) in ds.labels().iter().zip(aligned).enumerate() {
        let d = match (a, y) {
            (0, _) => 0.0,
            (_, 0) => -spur_shift,
            _ => spur_shift,
        };
        base.push(x.get(i, 0) - d);
        displacement.push(d);
    }
    Ok(Intervention::NegateDisplacement {
        feature: 0,
        base,
        displacement,
    })
}
