//! Multi-layer perceptrons with smooth activations and cross-entropy loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{AutodiffError, Error, Result};
use crate::rng::{self, Streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        })
    }
}

/// Architecture of a fully connected classifier.
///
/// `widths[0]` is the flattened input size and the last width is the class
/// count; every width in between is a hidden layer followed by the
/// activation. The output layer produces logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    widths: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input_shape: &[usize], widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        let flat: usize = input_shape.iter().product();
        if input_shape.is_empty() || flat != widths[0] {
            return Err(Error::Config(format!(
                "input shape {input_shape:?} does not flatten to the first width {}",
                widths[0]
            )));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            widths: widths.to_vec(),
            activation,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Shapes of the parameter tensors in canonical order: `w0, b0, w1, b1, ...`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers())
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// `mlp:784-256-10:sigmoid:1x28x28`
impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize], sep: &str| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
        };
        write!(
            f,
            "mlp:{}:{}:{}",
            join(&self.widths, "-"),
            self.activation,
            join(&self.input_shape, "x")
        )
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed model spec {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, widths, act, shape] = parts.as_slice() else {
            return Err(bad());
        };
        if *kind != "mlp" {
            return Err(bad());
        }
        let parse_list = |t: &str, sep: char| -> Result<Vec<usize>> {
            t.split(sep).map(|x| x.parse().map_err(|_| bad())).collect()
        };
        let activation = match *act {
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            _ => return Err(bad()),
        };
        ModelSpec::mlp(&parse_list(shape, 'x')?, &parse_list(widths, '-')?, activation)
    }
}

/// Tensors laid out in a model's canonical parameter order.
///
/// Flattening concatenates the row-major data of each tensor in order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    tensors: Vec<Tensor>,
}

impl GradientVector {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds from flat data with the given shapes.
    pub fn from_flat(shapes: &[Vec<usize>], flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(Error::Config(format!(
                "flat length {} does not match parameter layout of {total} scalars",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n: usize = s.iter().product();
            tensors.push(Tensor::new(s.clone(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { tensors })
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| t.map(f)).collect(),
        }
    }
}

/// Parameters of one model instance, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    spec: ModelSpec,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new(spec: ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if tensors.len() != shapes.len()
            || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(Error::Config(format!(
                "parameter tensors do not match {spec}"
            )));
        }
        Ok(Self { spec, tensors })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = Streams::new(seed).rng(rng::INIT, &[]);
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 2 {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng::uniform(&mut rng, -bound, bound)).collect();
                    Tensor::from_parts(shape, data)
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            tensors,
        }
    }

    /// All parameters set to zero.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let tensors = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self {
            spec: spec.clone(),
            tensors,
        }
    }

    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let g = GradientVector::from_flat(&spec.param_shapes(), flat)?;
        Ok(Self {
            spec: spec.clone(),
            tensors: g.tensors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// `θ - lr · g`, returned as a new set.
    pub fn step(&self, grad: &GradientVector, lr: f64) -> Result<Self> {
        if grad.shapes() != self.spec.param_shapes() {
            return Err(Error::Config("gradient layout does not match parameters".into()));
        }
        let tensors = self
            .tensors
            .iter()
            .zip(grad.tensors())
            .map(|(p, g)| p.zip_map(g, |a, b| a - lr * b))
            .collect::<Vec<_>>();
        if tensors.iter().any(|t| !t.all_finite()) {
            return Err(Error::Config("parameter update produced non-finite values".into()));
        }
        Ok(Self {
            spec: self.spec.clone(),
            tensors,
        })
    }

    /// Adds the parameters to `g`, as leaves when `differentiable`.
    pub fn attach(&self, g: &mut Graph, differentiable: bool) -> ModelNodes {
        let params = self
            .tensors
            .iter()
            .map(|t| {
                if differentiable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ModelNodes {
            spec: self.spec.clone(),
            params,
        }
    }

    /// Logits for a batch of model inputs (already normalized).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.attach(&mut g, false);
        let xin = g.constant(x.clone());
        let out = nodes.forward(&mut g, xin)?;
        Ok(g.value(out.logits).clone())
    }

    /// Activations of the last hidden layer (the input itself for a model
    /// without hidden layers).
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.attach(&mut g, false);
        let xin = g.constant(x.clone());
        let out = nodes.forward(&mut g, xin)?;
        Ok(g.value(out.penultimate).clone())
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, GradientVector)> {
        let mut g = Graph::new();
        let nodes = self.attach(&mut g, true);
        let xin = g.constant(x.clone());
        let loss = nodes.loss(&mut g, xin, labels)?;
        let grads = g.grad(loss, &nodes.params)?;
        let tensors = grads.iter().map(|&id| g.value(id).clone()).collect();
        Ok((g.value(loss).item(), GradientVector::new(tensors)))
    }
}

/// A model's parameters inside a graph.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    spec: ModelSpec,
    pub params: Vec<NodeId>,
}

/// Output of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: NodeId,
    pub penultimate: NodeId,
}

impl ModelNodes {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Runs the MLP on `x`, which is either `[n, d]` or `[n, ...input_shape]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<Forward, AutodiffError> {
        let d = self.spec.input_dim();
        let shape = g.shape(x).to_vec();
        let n = shape.first().copied().unwrap_or(1);
        let flat: usize = shape.iter().product();
        if shape.len() < 2 || flat != n * d {
            return Err(AutodiffError::ShapeMismatch {
                op: "model input",
                lhs: shape,
                rhs: self.spec.input_shape.clone(),
            });
        }
        let mut h = if shape.len() == 2 { x } else { g.reshape(x, &[n, d])? };
        let mut penultimate = h;
        let layers = self.spec.layers();
        for l in 0..layers {
            let z = g.matmul(h, self.params[2 * l])?;
            let z = g.add_row(z, self.params[2 * l + 1])?;
            if l + 1 < layers {
                h = match self.spec.activation {
                    Activation::Sigmoid => g.sigmoid(z)?,
                    Activation::Tanh => g.tanh(z)?,
                };
                penultimate = h;
            } else {
                h = z;
            }
        }
        Ok(Forward {
            logits: h,
            penultimate,
        })
    }

    /// Mean cross-entropy against integer labels.
    pub fn loss(&self, g: &mut Graph, x: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let out = self.forward(g, x)?;
        g.softmax_cross_entropy(out.logits, labels)
    }

    /// Mean cross-entropy against soft label rows (`[n, classes]`).
    pub fn soft_loss(&self, g: &mut Graph, x: NodeId, targets: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.forward(g, x)?;
        g.soft_cross_entropy(out.logits, targets)
    }
}
