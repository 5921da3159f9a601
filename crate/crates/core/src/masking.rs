//! Per-weight learnable mask logits with Gumbel-Sigmoid sampling and
//! straight-through binarization.
//!
//! During mask training each weight `w_i` of a masked layer is replaced by
//! `w_i * m_i`, where
//!
//! ```text
//! s_i = sigmoid((pi_i - log(log U1 / log U2)) / tau),   U1, U2 ~ U(0, 1)
//! m_i = [1{s_i > gamma} - s_i]_stop + s_i
//! ```
//!
//! so the forward pass sees a hard 0/1 gate while the gradient reaches the
//! logit `pi_i` as if `m_i = s_i`. Base weights stay frozen; only the logits
//! are trained.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, DenseNetwork, Graph, LayerVars, Tensor, Var};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to uniform draws before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Gumbel-Sigmoid sample, then binarize.
    Sampled,
    /// Noise-free `sigmoid(pi / tau)`, then binarize.
    Deterministic,
    /// Stored binary mask.
    FrozenBinary,
}

impl GateMode {
    fn name(self) -> &'static str {
        match self {
            GateMode::Sampled => "sampled",
            GateMode::Deterministic => "deterministic",
            GateMode::FrozenBinary => "frozen-binary",
        }
    }
}

/// Form of the sparsity regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityForm {
    /// `sum_i pi_i`. Unbounded below, so logits must be clamped.
    #[default]
    Logits,
    /// `sum_i sigmoid(pi_i)`.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub init_logit: f64,
    pub gumbel_temperature: f64,
    pub threshold: f64,
    /// Also mask the final classifier layer.
    pub mask_classifier: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            init_logit: 0.9,
            gumbel_temperature: 1.0,
            threshold: 0.5,
            mask_classifier: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config("gumbel temperature must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("binarization threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Mask logits for every masked layer, plus the binary gates once frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    layers: Vec<usize>,
    logits: Vec<Tensor>,
    gumbel_temperature: f64,
    threshold: f64,
    mode: GateMode,
    frozen: Option<Vec<Vec<bool>>>,
}

impl MaskSet {
    /// Sets every logit to `cfg.init_logit` for each hidden layer of `net`
    /// (and the classifier when `cfg.mask_classifier`).
    pub fn init(net: &DenseNetwork, cfg: &MaskConfig) -> Result<Self> {
        cfg.validate()?;
        let count = net.layers().len() - usize::from(!cfg.mask_classifier);
        let layers: Vec<usize> = (0..count).collect();
        let logits = layers
            .iter()
            .map(|&l| {
                let w = &net.layers()[l].weight;
                Tensor::filled(w.shape().to_vec(), cfg.init_logit)
            })
            .collect();
        Ok(Self {
            layers,
            logits,
            gumbel_temperature: cfg.gumbel_temperature,
            threshold: cfg.threshold,
            mode: GateMode::Sampled,
            frozen: None,
        })
    }

    /// A frozen mask keeping each weight independently with probability
    /// `keep_prob`, over every layer including the classifier.
    pub fn random_frozen(net: &DenseNetwork, keep_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        let cfg = MaskConfig {
            mask_classifier: true,
            ..MaskConfig::default()
        };
        let mut set = Self::init(net, &cfg)?;
        let gates = set
            .logits
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.random::<f64>() < keep_prob).collect())
            .collect();
        set.freeze_with(gates)?;
        Ok(set)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn logits(&self) -> &[Tensor] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [Tensor] {
        &mut self.logits
    }

    pub fn gumbel_temperature(&self) -> f64 {
        self.gumbel_temperature
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn frozen_gates(&self) -> Option<&[Vec<bool>]> {
        self.frozen.as_deref()
    }

    /// Switches between sampled and deterministic gating. Entering
    /// frozen-binary mode goes through one of the `freeze*` methods.
    pub fn set_mode(&mut self, mode: GateMode) -> Result<()> {
        if mode == GateMode::FrozenBinary && self.frozen.is_none() {
            return Err(Error::Config("no frozen mask stored; call freeze first".into()));
        }
        self.mode = mode;
        Ok(())
    }

    pub fn total_weights(&self) -> usize {
        self.logits.iter().map(Tensor::len).sum()
    }

    /// Noise-free gate probabilities `sigmoid(pi / tau)` per masked layer.
    pub fn deterministic_gates(&self) -> Vec<Vec<f64>> {
        let t = self.gumbel_temperature;
        self.logits
            .iter()
            .map(|l| l.data().iter().map(|&p| sigmoid(p / t)).collect())
            .collect()
    }

    /// Binary gates in deterministic or frozen-binary mode.
    pub fn binary_gates(&self) -> Result<Vec<Vec<bool>>> {
        match self.mode {
            GateMode::Sampled => Err(Error::StochasticMask(self.mode.name())),
            GateMode::FrozenBinary => Ok(self.frozen.clone().expect("frozen mode has gates")),
            GateMode::Deterministic => Ok(self
                .deterministic_gates()
                .into_iter()
                .map(|g| g.into_iter().map(|s| s > self.threshold).collect())
                .collect()),
        }
    }

    /// Fraction of masked weights whose gate is 1.
    pub fn keep_ratio(&self) -> Result<f64> {
        let gates = self.binary_gates()?;
        let total = self.total_weights();
        if total == 0 {
            return Ok(1.0);
        }
        let kept: usize = gates.iter().map(|g| g.iter().filter(|&&b| b).count()).sum();
        Ok(kept as f64 / total as f64)
    }

    /// Stores `sigmoid(pi / tau) > gamma` as the frozen mask.
    pub fn freeze(&mut self) -> Result<()> {
        let gates = self
            .deterministic_gates()
            .into_iter()
            .map(|g| g.into_iter().map(|s| s > self.threshold).collect())
            .collect();
        self.freeze_with(gates)
    }

    /// Prunes exactly `round(ratio * total)` weights: those with the smallest
    /// deterministic gates across all masked layers (ties by position).
    pub fn freeze_pruned_fraction(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("pruning ratio {ratio} outside [0, 1)")));
        }
        let gates = self.deterministic_gates();
        let mut order: Vec<(usize, usize)> = gates
            .iter()
            .enumerate()
            .flat_map(|(l, g)| (0..g.len()).map(move |i| (l, i)))
            .collect();
        order.sort_by(|a, b| gates[a.0][a.1].total_cmp(&gates[b.0][b.1]).then(a.cmp(b)));
        let prune = (ratio * order.len() as f64).round() as usize;
        let mut binary: Vec<Vec<bool>> = gates.iter().map(|g| vec![true; g.len()]).collect();
        for &(l, i) in &order[..prune] {
            binary[l][i] = false;
        }
        self.freeze_with(binary)
    }

    pub fn freeze_with(&mut self, gates: Vec<Vec<bool>>) -> Result<()> {
        if gates.len() != self.logits.len()
            || gates.iter().zip(&self.logits).any(|(g, l)| g.len() != l.len())
        {
            return Err(Error::shape("freeze", "gate layout differs from logits"));
        }
        self.frozen = Some(gates);
        self.mode = GateMode::FrozenBinary;
        Ok(())
    }

    pub fn clamp_logits(&mut self, limit: f64) {
        for l in &mut self.logits {
            l.data_mut().iter_mut().for_each(|p| *p = p.clamp(-limit, limit));
        }
    }

    /// Value of the sparsity regularizer (without the alpha factor).
    pub fn sparsity_penalty(&self, form: SparsityForm) -> f64 {
        self.logits
            .iter()
            .flat_map(|l| l.data())
            .map(|&p| match form {
                SparsityForm::Logits => p,
                SparsityForm::Sigmoid => sigmoid(p),
            })
            .sum()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &MaskCheckpoint::from(self))?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: MaskCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        ckpt.into_mask_set()
    }
}

/// Draws `log(log U1 / log U2)` per element.
pub fn gumbel_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            let u2: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            (u1.ln() / u2.ln()).ln()
        })
        .collect()
}

/// Tape-free Gumbel-Sigmoid gate values for pre-drawn noise.
pub fn gumbel_sigmoid(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    logits
        .iter()
        .zip(noise)
        .map(|(&p, &n)| sigmoid((p - n) / temperature))
        .collect()
}

/// Samples fresh noise and returns the gate values.
pub fn gumbel_sigmoid_sample(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_sigmoid(logits, &noise, temperature)
}

/// Differentiable `sigmoid((pi - noise) / tau)` with the noise held constant.
pub fn gumbel_sigmoid_graph(graph: &mut Graph, logits: Var, noise: &[f64], temperature: f64) -> Result<Var> {
    let shape = graph.value(logits).shape().to_vec();
    let noise = graph.constant(Tensor::new(shape, noise.to_vec())?);
    let shifted = graph.sub(logits, noise)?;
    let scaled = graph.scale(shifted, 1.0 / temperature);
    Ok(graph.sigmoid(scaled))
}

/// Hard threshold `1{s > gamma}`.
pub fn binarize_values(s: &[f64], threshold: f64) -> Vec<f64> {
    s.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect()
}

/// `m = [1{s > gamma} - s]_stop + s`: exactly binary forward, identity
/// gradient with respect to `s`.
pub fn binarize(graph: &mut Graph, s: Var, threshold: f64) -> Result<Var> {
    let hard = binarize_values(graph.value(s).data(), threshold);
    graph.straight_through(s, Tensor::vector(hard))
}

/// Graph handles produced by [`MaskedModel::forward`].
#[derive(Debug, Clone)]
pub struct MaskedForward {
    pub logits: Var,
    pub embedding: Var,
    /// One trainable leaf per masked layer (empty in frozen-binary mode).
    pub mask_logits: Vec<Var>,
    /// Noise drawn for each masked layer in sampled mode.
    pub noise: Vec<Vec<f64>>,
}

/// A frozen dense network with a mask over its weights.
#[derive(Debug, Clone)]
pub struct MaskedModel {
    base: DenseNetwork,
    masks: MaskSet,
    seed: u64,
    rng: ChaCha8Rng,
}

impl MaskedModel {
    pub fn new(base: DenseNetwork, masks: MaskSet, seed: u64) -> Result<Self> {
        if masks.layers.len() != masks.logits.len() {
            return Err(Error::shape("masked_model", "layer list and logits disagree"));
        }
        for (&l, logits) in masks.layers.iter().zip(&masks.logits) {
            let layer = base
                .layers()
                .get(l)
                .ok_or_else(|| Error::shape("masked_model", format!("no layer {l}")))?;
            if layer.weight.shape() != logits.shape() {
                return Err(Error::shape(
                    "masked_model",
                    format!("layer {l}: weights {:?}, logits {:?}", layer.weight.shape(), logits.shape()),
                ));
            }
        }
        Ok(Self {
            base,
            masks,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn base(&self) -> &DenseNetwork {
        &self.base
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut MaskSet {
        &mut self.masks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws one noise vector per masked layer from the model's stream.
    pub fn draw_noise(&mut self) -> Vec<Vec<f64>> {
        let lens: Vec<usize> = self.masks.logits.iter().map(Tensor::len).collect();
        lens.into_iter().map(|n| gumbel_noise(n, &mut self.rng)).collect()
    }

    /// Forward pass with effective weights `w * m`. In sampled mode noise is
    /// drawn from the model's own stream.
    pub fn forward(&mut self, graph: &mut Graph, x: Var) -> Result<MaskedForward> {
        let noise = match self.masks.mode {
            GateMode::Sampled => Some(self.draw_noise()),
            _ => None,
        };
        self.forward_with_noise(graph, x, noise)
    }

    /// Forward pass with caller-supplied noise (required in sampled mode).
    pub fn forward_with_noise(
        &self,
        graph: &mut Graph,
        x: Var,
        noise: Option<Vec<Vec<f64>>>,
    ) -> Result<MaskedForward> {
        let mode = self.masks.mode;
        if mode == GateMode::Sampled && noise.is_none() {
            return Err(Error::Config("sampled mode needs gumbel noise".into()));
        }
        let mut vars = self.base.bind(graph, false);
        let mut mask_logits = Vec::new();
        for (slot, &layer) in self.masks.layers.iter().enumerate() {
            let gate = match mode {
                GateMode::FrozenBinary => {
                    let bits = &self.masks.frozen.as_ref().expect("frozen gates")[slot];
                    let values = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    let shape = self.masks.logits[slot].shape().to_vec();
                    graph.constant(Tensor::new(shape, values)?)
                }
                GateMode::Sampled | GateMode::Deterministic => {
                    let pi = graph.param(self.masks.logits[slot].clone());
                    mask_logits.push(pi);
                    let s = match (&noise, mode) {
                        (Some(n), GateMode::Sampled) => {
                            gumbel_sigmoid_graph(graph, pi, &n[slot], self.masks.gumbel_temperature)?
                        }
                        _ => {
                            let scaled = graph.scale(pi, 1.0 / self.masks.gumbel_temperature);
                            graph.sigmoid(scaled)
                        }
                    };
                    binarize(graph, s, self.masks.threshold)?
                }
            };
            let LayerVars { weight, bias } = vars[layer];
            vars[layer] = LayerVars {
                weight: graph.mul(weight, gate)?,
                bias,
            };
        }
        let (logits, embedding) = self.base.forward_bound(graph, &vars, x)?;
        Ok(MaskedForward {
            logits,
            embedding,
            mask_logits,
            noise: noise.unwrap_or_default(),
        })
    }

    /// Adds `sum_i pi_i` (or `sum_i sigmoid(pi_i)`) over the given logit
    /// leaves to the graph.
    pub fn sparsity_term(graph: &mut Graph, mask_logits: &[Var], form: SparsityForm) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for &pi in mask_logits {
            let term = match form {
                SparsityForm::Logits => graph.sum(pi),
                SparsityForm::Sigmoid => {
                    let s = graph.sigmoid(pi);
                    graph.sum(s)
                }
            };
            total = Some(match total {
                Some(t) => graph.add(t, term)?,
                None => term,
            });
        }
        Ok(total)
    }

    fn apply_gates(&self, gates: &[Vec<bool>]) -> DenseNetwork {
        let mut net = self.base.clone();
        for (&layer, bits) in self.masks.layers.iter().zip(gates) {
            let w = net.layers_mut()[layer].weight.data_mut();
            for (wi, &keep) in w.iter_mut().zip(bits) {
                *wi *= if keep { 1.0 } else { 0.0 };
            }
        }
        net
    }

    /// Dense copy with the current hard gates applied (deterministic or
    /// frozen-binary mode).
    pub fn effective_network(&self) -> Result<DenseNetwork> {
        Ok(self.apply_gates(&self.masks.binary_gates()?))
    }

    /// `W' = W * m` for a frozen-binary mask.
    pub fn finalize_subnetwork(&self) -> Result<DenseNetwork> {
        if self.masks.mode != GateMode::FrozenBinary {
            return Err(Error::NonBinaryMask);
        }
        self.effective_network()
    }

    /// Binary gates of the frozen mask laid out over all network layers
    /// (`None` for unmasked layers), for use as fixed fine-tuning masks.
    pub fn layer_masks(&self) -> Result<Vec<Option<Vec<bool>>>> {
        if self.masks.mode != GateMode::FrozenBinary {
            return Err(Error::NonBinaryMask);
        }
        let gates = self.masks.frozen.as_ref().expect("frozen gates");
        let mut out = vec![None; self.base.layers().len()];
        for (&layer, bits) in self.masks.layers.iter().zip(gates) {
            out[layer] = Some(bits.clone());
        }
        Ok(out)
    }
}

pub const MASK_FORMAT: &str = "spurprune-mask";
pub const MASK_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskCheckpoint {
    pub format: String,
    pub version: u32,
    pub gumbel_temperature: f64,
    pub threshold: f64,
    pub mode: GateMode,
    pub layers: Vec<MaskLayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskLayerRecord {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f64>,
    /// Base64 of the gates packed eight per byte, least significant bit first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_bits: Option<String>,
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Checkpoint(format!("{} bytes for {len} gates", bytes.len())));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

impl From<&MaskSet> for MaskCheckpoint {
    fn from(set: &MaskSet) -> Self {
        let layers = set
            .layers
            .iter()
            .zip(&set.logits)
            .enumerate()
            .map(|(slot, (&layer, logits))| MaskLayerRecord {
                layer,
                rows: logits.rows(),
                cols: logits.cols(),
                logits: logits.data().to_vec(),
                mask_bits: set
                    .frozen
                    .as_ref()
                    .map(|f| BASE64.encode(pack_bits(&f[slot]))),
            })
            .collect();
        Self {
            format: MASK_FORMAT.into(),
            version: MASK_VERSION,
            gumbel_temperature: set.gumbel_temperature,
            threshold: set.threshold,
            mode: set.mode,
            layers,
        }
    }
}

impl MaskCheckpoint {
    pub fn into_mask_set(self) -> Result<MaskSet> {
        if self.format != MASK_FORMAT || self.version != MASK_VERSION {
            return Err(Error::Checkpoint(format!("{} v{}", self.format, self.version)));
        }
        let mut layers = Vec::new();
        let mut logits = Vec::new();
        let mut frozen = Vec::new();
        for r in self.layers {
            let len = r.rows * r.cols;
            if let Some(bits) = &r.mask_bits {
                let bytes = BASE64
                    .decode(bits)
                    .map_err(|e| Error::Checkpoint(format!("mask bits: {e}")))?;
                frozen.push(unpack_bits(&bytes, len)?);
            }
            layers.push(r.layer);
            logits.push(Tensor::matrix(r.rows, r.cols, r.logits)?);
        }
        let frozen = match frozen.len() {
            0 => None,
            n if n == layers.len() => Some(frozen),
            _ => return Err(Error::Checkpoint("mask bits present for only some layers".into())),
        };
        if self.mode == GateMode::FrozenBinary && frozen.is_none() {
            return Err(Error::Checkpoint("frozen-binary mask without bits".into()));
        }
        Ok(MaskSet {
            layers,
            logits,
            gumbel_temperature: self.gumbel_temperature,
            threshold: self.threshold,
            mode: self.mode,
            frozen,
        })
    }
}
