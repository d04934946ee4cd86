//! Gradient-matching inversion (DLG) by an honest-but-curious server.
//!
//! Given the model `θ` it sent out and a gradient `g` it received, the
//! attacker searches for inputs `x̂` (in normalized space) and label logits
//! `z` minimizing `‖∇_θ L(f_θ(x̂), softmax(z)) − g‖²` by plain gradient
//! descent on both, keeping the best of several random restarts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::NormalizationTransform;
use crate::error::{AutodiffError, Error, Result};
use crate::federation::RoundArtifact;
use crate::model::{GradientVector, ModelNodes, ParameterSet};
use crate::rng::{self, Gaussian, Streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Labels are optimized as logits alongside the input.
    OptimizeSoft,
    /// Labels are read off the sign of the last bias gradient and held fixed
    /// (batch size 1 only).
    Known,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackInit {
    GaussianNoise,
    /// Start from a caller-supplied input. Only useful for debugging, since
    /// a real attacker has no such starting point.
    Provided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub iterations: usize,
    pub lr: f64,
    pub restarts: usize,
    pub init: AttackInit,
    pub batch_size: usize,
    pub label_mode: LabelMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.1,
            restarts: 3,
            init: AttackInit::GaussianNoise,
            batch_size: 1,
            label_mode: LabelMode::OptimizeSoft,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.restarts == 0 || self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid attack config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    /// Reconstructed inputs, `[batch, d]`, normalized space.
    pub x_hat: Tensor,
    /// Label probabilities, `[batch, classes]`.
    pub y_hat: Tensor,
    pub loss: f64,
    pub best_restart: usize,
    /// Matching loss before every step and after the last, per restart.
    pub traces: Vec<Vec<f64>>,
    /// Restarts abandoned because their starting point had no finite loss.
    pub diverged: usize,
}

impl ReconstructionResult {
    /// `clamp(denormalize(x̂), 0, 1)` reshaped to `[batch, ...image_shape]`.
    pub fn pixels(&self, transform: &NormalizationTransform, image_shape: &[usize]) -> Result<Tensor> {
        let back = transform.denormalize(&self.x_hat)?.map(|v| v.clamp(0.0, 1.0));
        let mut shape = vec![self.x_hat.shape()[0]];
        shape.extend_from_slice(image_shape);
        Ok(back.reshape(&shape)?)
    }
}

fn check_layout(params: &ParameterSet, target: &GradientVector) -> Result<(), AutodiffError> {
    let expected = params.spec().param_shapes();
    if target.shapes() != expected {
        return Err(AutodiffError::ShapeMismatch {
            op: "matching_loss",
            lhs: vec![target.len()],
            rhs: vec![params.len()],
        });
    }
    Ok(())
}

/// Records `‖∇_θ L_soft(f_θ(x̂), ŷ) − g‖²` in `g`. `nodes` must hold the
/// parameters as leaves; `x_hat` is `[batch, d]` and `y_hat` holds label
/// probabilities.
pub fn matching_loss_node(
    g: &mut Graph,
    nodes: &ModelNodes,
    x_hat: NodeId,
    y_hat: NodeId,
    target: &GradientVector,
) -> Result<NodeId, AutodiffError> {
    let loss = nodes.soft_loss(g, x_hat, y_hat)?;
    let grads = g.grad(loss, &nodes.params)?;
    let mut total: Option<NodeId> = None;
    for (gi, ti) in grads.into_iter().zip(target.tensors()) {
        let t = g.constant(ti.clone());
        let diff = g.sub(gi, t)?;
        let sq = g.square(diff)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("a model has at least one parameter tensor"))
}

/// Value of the matching loss for fixed `x̂` and label probabilities `ŷ`.
pub fn matching_loss(params: &ParameterSet, x_hat: &Tensor, y_hat: &Tensor, target: &GradientVector) -> Result<f64> {
    check_layout(params, target)?;
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, true);
    let x = g.constant(x_hat.clone());
    let y = g.constant(y_hat.clone());
    let l = matching_loss_node(&mut g, &nodes, x, y, target)?;
    Ok(g.value(l).item())
}

/// Labels implied by the last bias gradient: with one sample it equals
/// `softmax(z) − onehot(y)`, whose only negative entry is the label.
pub fn infer_labels(target: &GradientVector) -> Vec<usize> {
    let bias = target.tensors().last().expect("nonempty gradient").data();
    vec![crate::metrics::argmax(&bias.iter().map(|v| -v).collect::<Vec<_>>())]
}

#[derive(Clone)]
enum Labels {
    Logits(Tensor),
    Fixed(Tensor),
}

struct Step {
    loss: f64,
    grad_x: Tensor,
    grad_z: Option<Tensor>,
}

fn evaluate(params: &ParameterSet, x: &Tensor, labels: &Labels, target: &GradientVector) -> Result<Step, AutodiffError> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, true);
    let xn = g.leaf(x.clone());
    let (yn, zn) = match labels {
        Labels::Logits(z) => {
            let zn = g.leaf(z.clone());
            (g.softmax(zn)?, Some(zn))
        }
        Labels::Fixed(p) => (g.constant(p.clone()), None),
    };
    let loss = matching_loss_node(&mut g, &nodes, xn, yn, target)?;
    let wrt: Vec<NodeId> = std::iter::once(xn).chain(zn).collect();
    let grads = g.grad(loss, &wrt)?;
    Ok(Step {
        loss: g.value(loss).item(),
        grad_x: g.value(grads[0]).clone(),
        grad_z: grads.get(1).map(|&id| g.value(id).clone()),
    })
}

fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let n = g.constant(z.clone());
    let s = g.softmax(n).expect("softmax of finite logits");
    g.value(s).clone()
}

struct RestartOutcome {
    x: Tensor,
    labels: Labels,
    loss: f64,
}

/// Step size factor after a step that raised the matching loss.
const BACKOFF: f64 = 0.5;
/// Step size factor after an accepted step, capped at the configured rate.
const GROWTH: f64 = 1.2;

/// Gradient descent on the matching loss. A step that raises the loss or
/// leaves the finite range is undone and retried at half the rate.
fn run_restart(
    params: &ParameterSet,
    target: &GradientVector,
    cfg: &AttackConfig,
    mut x: Tensor,
    mut labels: Labels,
) -> (Option<RestartOutcome>, Vec<f64>) {
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut cur = match evaluate(params, &x, &labels, target) {
        Ok(step) if step.loss.is_finite() => step,
        _ => return (None, trace),
    };
    let mut lr = cfg.lr;
    for _ in 0..cfg.iterations {
        trace.push(cur.loss);
        let nx = x.zip_map(&cur.grad_x, |a, b| a - lr * b);
        let nl = match (&labels, &cur.grad_z) {
            (Labels::Logits(z), Some(gz)) => Labels::Logits(z.zip_map(gz, |a, b| a - lr * b)),
            (other, _) => other.clone(),
        };
        match evaluate(params, &nx, &nl, target) {
            Ok(next) if next.loss <= cur.loss => {
                x = nx;
                labels = nl;
                cur = next;
                lr *= GROWTH;
            }
            _ => lr *= BACKOFF,
        }
    }
    trace.push(cur.loss);
    (Some(RestartOutcome { x, labels, loss: cur.loss }), trace)
}

/// Best-of-restarts gradient inversion of `target` under `params`.
///
/// Restart `r` draws its noise from the attack stream at `path ++ [r]`.
/// `provided` is the starting input for [`AttackInit::Provided`].
pub fn reconstruct(
    params: &ParameterSet,
    target: &GradientVector,
    cfg: &AttackConfig,
    seed: u64,
    path: &[u64],
    provided: Option<&Tensor>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    check_layout(params, target)?;
    let (b, d, classes) = (cfg.batch_size, params.spec().input_dim(), params.spec().classes());
    if cfg.label_mode == LabelMode::Known && b != 1 {
        return Err(Error::Config("known-label mode needs batch size 1".into()));
    }
    let streams = Streams::new(seed);
    let mut best: Option<(usize, RestartOutcome)> = None;
    let mut traces = Vec::with_capacity(cfg.restarts);
    let mut diverged = 0;

    for r in 0..cfg.restarts {
        let mut p = path.to_vec();
        p.push(r as u64);
        let mut stream = streams.rng(rng::ATTACK, &p);
        let mut gauss = Gaussian::new();
        let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| gauss.sample(&mut stream)).collect() };
        let x0 = match cfg.init {
            AttackInit::GaussianNoise => Tensor::from_parts(vec![b, d], noise(b * d)),
            AttackInit::Provided => {
                let x = provided.ok_or_else(|| Error::Config("provided init without an input".into()))?;
                x.reshape(&[b, d])?
            }
        };
        let labels = match cfg.label_mode {
            LabelMode::OptimizeSoft => Labels::Logits(Tensor::from_parts(vec![b, classes], noise(b * classes))),
            LabelMode::Known => Labels::Fixed(onehot(&infer_labels(target), classes)),
        };
        let (outcome, trace) = run_restart(params, target, cfg, x0, labels);
        traces.push(trace);
        match outcome {
            Some(o) if best.as_ref().map_or(true, |(_, bo)| o.loss < bo.loss) => best = Some((r, o)),
            Some(_) => {}
            None => diverged += 1,
        }
    }

    let (best_restart, o) = best.ok_or(Error::AttackFailed { restarts: cfg.restarts })?;
    let y_hat = match &o.labels {
        Labels::Logits(z) => softmax_rows(z),
        Labels::Fixed(p) => p.clone(),
    };
    Ok(ReconstructionResult {
        x_hat: o.x,
        y_hat,
        loss: o.loss,
        best_restart,
        traces,
        diverged,
    })
}

/// One attacked upload of a stored round.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeAttack {
    pub round: usize,
    pub client: usize,
    pub probe: usize,
    /// The clean images behind the upload, pixel scale.
    pub original: Tensor,
    pub labels: Vec<usize>,
    pub result: ReconstructionResult,
}

/// Attacks every stored upload of a round independently.
pub fn attack_round(artifact: &RoundArtifact, cfg: &AttackConfig, seed: u64) -> Result<Vec<ProbeAttack>> {
    let mut out = Vec::new();
    for upload in &artifact.uploads {
        if upload.probes.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "round {} client {} has no stored uploads to attack",
                artifact.round, upload.client
            )));
        }
        for (p, probe) in upload.probes.iter().enumerate() {
            if probe.labels.len() != cfg.batch_size {
                return Err(Error::Config(format!(
                    "stored uploads hold {} images but the attack reconstructs {}",
                    probe.labels.len(),
                    cfg.batch_size
                )));
            }
            let path = [artifact.round as u64, upload.client as u64, p as u64];
            let provided = probe.images.reshape(&[cfg.batch_size, artifact.theta.spec().input_dim()])?;
            let result = reconstruct(&artifact.theta, &probe.gradient, cfg, seed, &path, Some(&provided))
                .map_err(|e| Error::Client {
                    client: upload.client,
                    source: Box::new(e),
                })?;
            out.push(ProbeAttack {
                round: artifact.round,
                client: upload.client,
                probe: p,
                original: probe.images.clone(),
                labels: probe.labels.clone(),
                result,
            });
        }
    }
    Ok(out)
}
