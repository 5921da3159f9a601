use serde::{Deserialize, Serialize};

use crate::datasets::{SpuriousMoonsConfig, SyntheticImageConfig};
use crate::error::{Error, Result};
use crate::masking::{MaskConfig, SparsityForm};
use crate::taskdata::{ContrastiveConfig, PoolRule};

/// Minibatch SGD with momentum and coupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-2,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "{what}: need learning_rate > 0, momentum in [0, 1), weight_decay >= 0"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}: batch_size must be > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub threshold: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iter: 300,
            tol: 1e-6,
            threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDataConfig {
    /// Fraction of the training set placed in the task dataset; ignored when
    /// `per_class` is set.
    pub fraction: f64,
    pub per_class: Option<usize>,
    pub contrastive: ContrastiveConfig,
}

impl Default for TaskDataConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            per_class: None,
            contrastive: ContrastiveConfig::default(),
        }
    }
}

/// How trained mask logits become a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PruneMode {
    /// Keep gates with `sigmoid(pi / tau) > threshold`.
    Threshold,
    /// Prune this fraction of the masked weights with the lowest gates.
    Ratio { ratio: f64 },
}

impl Default for PruneMode {
    fn default() -> Self {
        PruneMode::Ratio { ratio: 0.5 }
    }
}

/// Optimizer for the mask logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOptimizer {
    /// SGD with `momentum`.
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskTrainConfig {
    /// Weight of the sparsity term.
    pub alpha: f64,
    /// Weight of the contrastive term.
    pub beta: f64,
    pub sparsity: SparsityForm,
    pub gates: MaskConfig,
    pub epochs: usize,
    pub optimizer: MaskOptimizer,
    pub learning_rate: f64,
    /// Only used by SGD.
    pub momentum: f64,
    pub batch_size: usize,
    /// Logits are clamped to `[-logit_clamp, logit_clamp]` after every step.
    pub logit_clamp: f64,
    pub prune: PruneMode,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 0.1,
            sparsity: SparsityForm::Logits,
            gates: MaskConfig::default(),
            epochs: 20,
            optimizer: MaskOptimizer::Adam,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            logit_clamp: 10.0,
            prune: PruneMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Default,
    NegAblation,
    Supcon,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Default, Variant::NegAblation, Variant::Supcon];

    pub fn rule(self) -> PoolRule {
        match self {
            Variant::Default => PoolRule::Cluster,
            Variant::NegAblation => PoolRule::NegAblation,
            Variant::Supcon => PoolRule::SupCon,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NegAblation => "neg_ablation",
            Variant::Supcon => "supcon",
        }
    }
}

/// Source of the train and test splits. The generator's own `seed` field is
/// replaced by one derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Moons {
        #[serde(default)]
        train: SpuriousMoonsConfig,
        #[serde(default = "default_moons_test")]
        test_n: usize,
    },
    Images {
        #[serde(default)]
        train: SyntheticImageConfig,
        #[serde(default = "default_images_test")]
        test_per_class: usize,
    },
}

fn default_moons_test() -> usize {
    4000
}

fn default_images_test() -> usize {
    2000
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Images {
            train: SyntheticImageConfig::default(),
            test_per_class: default_images_test(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    pub erm: SgdConfig,
    pub clustering: ClusteringConfig,
    pub taskdata: TaskDataConfig,
    pub masking: MaskTrainConfig,
    pub finetune: SgdConfig,
    pub ablation: Option<u8>,
    pub variant: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            hidden: vec![128, 128, 128],
            erm: SgdConfig::default(),
            clustering: ClusteringConfig::default(),
            taskdata: TaskDataConfig::default(),
            masking: MaskTrainConfig::default(),
            finetune: SgdConfig {
                epochs: 5,
                learning_rate: 1e-2,
                batch_size: 16,
                ..SgdConfig::default()
            },
            ablation: None,
            variant: Variant::Default,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.erm.validate("erm")?;
        self.finetune.validate("finetune")?;
        self.taskdata.contrastive.validate()?;
        self.masking.gates.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be non-empty and positive".into()));
        }
        if !(self.taskdata.fraction > 0.0 && self.taskdata.fraction <= 1.0) {
            return Err(Error::Config("taskdata.fraction must lie in (0, 1]".into()));
        }
        let m = &self.masking;
        if !(m.alpha >= 0.0 && m.beta >= 0.0) || !(m.learning_rate > 0.0) || !(0.0..1.0).contains(&m.momentum) {
            return Err(Error::Config("masking: need alpha, beta >= 0, learning_rate > 0, momentum in [0, 1)".into()));
        }
        if m.batch_size == 0 || !(m.logit_clamp > 0.0) {
            return Err(Error::Config("masking: batch_size and logit_clamp must be > 0".into()));
        }
        if let PruneMode::Ratio { ratio } = m.prune {
            if !(0.0..1.0).contains(&ratio) {
                return Err(Error::Config("masking.prune.ratio must lie in [0, 1)".into()));
            }
        }
        if !(self.clustering.threshold > 0.5 && self.clustering.threshold <= 1.0) || self.clustering.k == 0 {
            return Err(Error::Config("clustering: need k > 0 and threshold in (0.5, 1]".into()));
        }
        if let Some(s) = self.ablation {
            if !(1..=7).contains(&s) {
                return Err(Error::Config(format!("ablation setting {s} is not in 1..=7")));
            }
        }
        Ok(())
    }

    /// The configuration used for the two-moons figure: five hidden layers of
    /// 500 units trained for 100 epochs.
    pub fn moons_demo() -> Self {
        Self {
            data: DataConfig::Moons {
                train: SpuriousMoonsConfig {
                    n: 500,
                    ..SpuriousMoonsConfig::default()
                },
                test_n: default_moons_test(),
            },
            hidden: vec![500; 5],
            erm: SgdConfig {
                epochs: 100,
                ..SgdConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Independent stream seed for a named stage of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // splitmix64 over the seed mixed with an FNV-1a hash of the stream name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed.wrapping_add(h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
