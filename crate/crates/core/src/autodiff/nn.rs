use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer computing `activation(x * weight + bias)` with
/// `weight` stored as `[inputs x outputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward network with one designated embedding layer, the last hidden
/// layer, whose activations feed the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
    embedding_layer: usize,
}

/// Graph handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseNetwork {
    pub fn new(layers: Vec<DenseLayer>, embedding_layer: usize) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Config(
                "a network needs a hidden layer and a classifier".into(),
            ));
        }
        if embedding_layer + 1 >= layers.len() {
            return Err(Error::Config(format!(
                "embedding layer {embedding_layer} must precede the classifier (layer {})",
                layers.len() - 1
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 || layer.bias.len() != layer.outputs() {
                return Err(Error::shape("network", format!("layer {i} is malformed")));
            }
            if i > 0 && layers[i - 1].outputs() != layer.inputs() {
                return Err(Error::shape(
                    "network",
                    format!(
                        "layer {} outputs {} but layer {i} expects {}",
                        i - 1,
                        layers[i - 1].outputs(),
                        layer.inputs()
                    ),
                ));
            }
        }
        Ok(Self {
            layers,
            embedding_layer,
        })
    }

    /// ReLU multilayer perceptron with He-normal weights and zero biases.
    /// `sizes` runs from the input dimension to the class count.
    pub fn mlp(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Config(
                "mlp needs input, at least one hidden, and output sizes".into(),
            ));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (2.0 / w[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
                DenseLayer {
                    weight: Tensor::matrix(w[0], w[1], data).expect("sized"),
                    bias: Tensor::zeros(vec![w[1]]),
                    activation: if i == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::new(layers, last - 1)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn embedding_layer(&self) -> usize {
        self.embedding_layer
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.embedding_layer].outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Registers all weights and biases in `graph`, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.clone(), l.bias.clone());
                if trainable {
                    LayerVars {
                        weight: graph.param(w),
                        bias: graph.param(b),
                    }
                } else {
                    LayerVars {
                        weight: graph.constant(w),
                        bias: graph.constant(b),
                    }
                }
            })
            .collect()
    }

    /// Forward pass over bound parameters. Returns `(logits, embedding)`.
    pub fn forward_bound(&self, graph: &mut Graph, vars: &[LayerVars], x: Var) -> Result<(Var, Var)> {
        let cols = graph.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input has {cols} columns, network expects {}", self.input_dim()),
            ));
        }
        let mut h = x;
        let mut embedding = x;
        for (i, (layer, v)) in self.layers.iter().zip(vars).enumerate() {
            let z = graph.matmul(h, v.weight)?;
            let z = graph.add_row(z, v.bias)?;
            h = match layer.activation {
                Activation::Relu => graph.relu(z),
                Activation::Identity => z,
            };
            if i == self.embedding_layer {
                embedding = h;
            }
        }
        Ok((h, embedding))
    }

    /// Binds the parameters as trainable leaves and runs the forward pass.
    pub fn forward(&self, graph: &mut Graph, x: Var) -> Result<(Var, Var, Vec<LayerVars>)> {
        let vars = self.bind(graph, true);
        let (logits, embedding) = self.forward_bound(graph, &vars, x)?;
        Ok((logits, embedding, vars))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, network expects {}", x.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    /// Tape-free forward over a row block, returning `(logits, embedding)`.
    fn infer_block(&self, rows: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        let mut embedding = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.inputs(), layer.outputs());
            let mut z = vec![0.0; rows * n];
            for row in z.chunks_mut(n) {
                row.copy_from_slice(layer.bias.data());
            }
            gemm(rows, k, n, 1.0, &h, false, layer.weight.data(), false, 1.0, &mut z);
            if layer.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
            if i == self.embedding_layer {
                embedding = h.clone();
            }
        }
        (h, embedding)
    }

    fn infer(&self, x: &Tensor, exec: Execution, want_embedding: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let d = self.input_dim();
        let width = if want_embedding {
            self.embedding_dim()
        } else {
            self.num_classes()
        };
        let out = par::map_row_chunks(exec, x.data(), d, 256, |block| {
            let (logits, emb) = self.infer_block(block.len() / d, block);
            if want_embedding {
                emb
            } else {
                logits
            }
        });
        Tensor::matrix(x.rows(), width, out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, Execution::default(), false)
    }

    pub fn logits_with(&self, x: &Tensor, exec: Execution) -> Result<Tensor> {
        self.infer(x, exec, false)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, Execution::default(), true)
    }

    /// Arg-max class per row; ties go to the lower class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &NetworkCheckpoint::from(self))?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: NetworkCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        ckpt.into_network()
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub const NETWORK_FORMAT: &str = "spurprune-network";
pub const NETWORK_VERSION: u32 = 1;

/// On-disk network document: layer shapes with row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub version: u32,
    pub embedding_layer: usize,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&DenseNetwork> for NetworkCheckpoint {
    fn from(net: &DenseNetwork) -> Self {
        Self {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_VERSION,
            embedding_layer: net.embedding_layer,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        }
    }
}

impl NetworkCheckpoint {
    pub fn into_network(self) -> Result<DenseNetwork> {
        if self.format != NETWORK_FORMAT || self.version != NETWORK_VERSION {
            return Err(Error::Checkpoint(format!("{} v{}", self.format, self.version)));
        }
        let layers = self
            .layers
            .into_iter()
            .map(|r| {
                Ok(DenseLayer {
                    weight: Tensor::matrix(r.inputs, r.outputs, r.weight)?,
                    bias: Tensor::new(vec![r.outputs], r.bias)?,
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNetwork::new(layers, self.embedding_layer)
    }
}
