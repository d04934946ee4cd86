//! Quick runtime oracle checks behind `fedem selftest`.

use rand::Rng;

use crate::attack::{matching_loss_node, reconstruct, AttackConfig, AttackInit, LabelMode};
use crate::autodiff::{grad_check, Graph, NodeId};
use crate::data::{partition_iid, synth_blobs, NormalizationTransform};
use crate::error::{AutodiffError, Result};
use crate::federation::{Defense, FederatedData, Federation, FederationConfig};
use crate::ldp::{clip_gradient, Mechanism, NoiseSpec};
use crate::metrics;
use crate::model::{GradientVector, ModelSpec, ParameterSet};
use crate::perturb::project_annulus;
use crate::rng::{self, Gaussian, Streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(rng, -scale, scale)).collect()).expect("shape")
}

fn mlp_gradients() -> Result<(bool, String)> {
    let mut rng = Streams::new(11).rng("selftest", &[1]);
    let labels = [1usize, 0, 2];
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let point = [
            random_tensor(&mut rng, &[3, 4], 1.0),
            random_tensor(&mut rng, &[4, 5], 1.0),
            random_tensor(&mut rng, &[5], 1.0),
            random_tensor(&mut rng, &[5, 3], 1.0),
            random_tensor(&mut rng, &[3], 1.0),
        ];
        let f = |g: &mut Graph, v: &[NodeId]| -> std::result::Result<NodeId, AutodiffError> {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.sigmoid(h)?;
            let z = g.matmul(h, v[3])?;
            let z = g.add_row(z, v[4])?;
            g.softmax_cross_entropy(z, &labels)
        };
        worst = worst.max(grad_check(f, &point, 1e-5)?);
    }
    Ok((worst < 1e-4, format!("max rel err {worst:.2e}")))
}

fn second_order() -> Result<(bool, String)> {
    let spec: ModelSpec = "mlp:4-5-3:sigmoid:1x1x4".parse()?;
    let theta = ParameterSet::init(&spec, 5);
    let mut rng = Streams::new(12).rng("selftest", &[2]);
    let x0 = random_tensor(&mut rng, &[1, 4], 1.0);
    let target = theta.loss_and_grad(&x0, &[2])?.1;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let point = [random_tensor(&mut rng, &[1, 4], 1.0), random_tensor(&mut rng, &[1, 3], 1.0)];
        let f = |g: &mut Graph, v: &[NodeId]| -> std::result::Result<NodeId, AutodiffError> {
            let nodes = theta.attach(g, true);
            let y = g.softmax(v[1])?;
            matching_loss_node(g, &nodes, v[0], y, &target)
        };
        worst = worst.max(grad_check(f, &point, 1e-5)?);
    }
    Ok((worst < 1e-3, format!("max rel err {worst:.2e}")))
}

fn linear_inversion() -> Result<(bool, String)> {
    let spec: ModelSpec = "mlp:6-3:sigmoid:1x1x6".parse()?;
    let theta = ParameterSet::init(&spec, 7);
    let mut rng = Streams::new(13).rng("selftest", &[3]);
    let x = random_tensor(&mut rng, &[1, 6], 1.0);
    let (_, grad) = theta.loss_and_grad(&x, &[1])?;
    let (gw, gb) = (&grad.tensors()[0], &grad.tensors()[1]);
    let i = (0..3).max_by(|&a, &b| gb.data()[a].abs().total_cmp(&gb.data()[b].abs())).unwrap_or(0);
    let closed: Vec<f64> = (0..6).map(|j| gw.data()[j * 3 + i] / gb.data()[i]).collect();
    let cfg = AttackConfig {
        iterations: 400,
        lr: 0.5,
        restarts: 1,
        init: AttackInit::GaussianNoise,
        batch_size: 1,
        label_mode: LabelMode::Known,
    };
    let r = reconstruct(&theta, &grad, &cfg, 13, &[0], None)?;
    let err = r.x_hat.data().iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err < 1e-6, format!("max |x_hat - closed form| {err:.2e}")))
}

fn fedsgd_equivalence() -> Result<(bool, String)> {
    let data = synth_blobs(3, 20, 4, 21)?;
    let spec: ModelSpec = "mlp:4-6-3:sigmoid:1x1x4".parse()?;
    let theta = ParameterSet::init(&spec, 21);
    let cfg = FederationConfig::new(4, 1, 0.5, Defense::None, 21);
    let shards = partition_iid(data.len(), 4, 21);
    let id = NormalizationTransform::identity(1);
    let fed = Federation::new(
        &cfg,
        FederatedData {
            train: &data,
            val: &data,
            test: &data,
            shards: &shards,
            transform: &id,
        },
    )?;
    let (fed_theta, _) = fed.run_round(&theta, 1)?;
    let x = data.images().reshape(&[data.len(), 4])?;
    let (_, g) = theta.loss_and_grad(&x, data.labels())?;
    let central = theta.step(&g, 0.5)?;
    let diff = fed_theta
        .flatten()
        .iter()
        .zip(central.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((diff < 1e-10, format!("max param diff {diff:.2e}")))
}

fn annulus() -> Result<(bool, String)> {
    let mut rng = Streams::new(14).rng("selftest", &[4]);
    let mut bad = 0;
    for i in 0..10_000 {
        let rho_max = rng::uniform(&mut rng, 0.01, 1.0);
        let rho_min = rng::uniform(&mut rng, 0.0, rho_max);
        let scale = if i % 3 == 0 { rho_min * 0.5 } else { 2.0 * rho_max };
        let d = if i % 50 == 0 { Tensor::zeros(&[8]) } else { random_tensor(&mut rng, &[8], scale) };
        let n = project_annulus(&d, rho_min, rho_max).linf_norm();
        if !(rho_min <= n && n <= rho_max) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} violations in 10000 projections")))
}

/// Sample mean and variance against 3.9 standard errors of their CLT limits.
fn moments_ok(draws: &[f64], var: f64, kurtosis: f64) -> (bool, f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let v = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_tol = 3.9 * (var / n).sqrt();
    let var_tol = 3.9 * ((kurtosis - 1.0) * var * var / n).sqrt();
    (mean.abs() <= mean_tol && (v - var).abs() <= var_tol, mean, v)
}

fn noise() -> Result<(bool, String)> {
    let n = 100_000;
    let mut rng = Streams::new(15).rng(rng::NOISE, &[0]);
    let mut gauss = Gaussian::new();
    let g: Vec<f64> = (0..n).map(|_| 2.0 * gauss.sample(&mut rng)).collect();
    let l: Vec<f64> = (0..n).map(|_| rng::laplace(&mut rng, 0.5)).collect();
    let (gok, gm, gv) = moments_ok(&g, 4.0, 3.0);
    let (lok, lm, lv) = moments_ok(&l, 0.5, 6.0);
    let mut clip_ok = true;
    for k in 0..1000 {
        let v = GradientVector::new(vec![random_tensor(&mut rng, &[7], 10.0)]);
        let c = 0.1 + (k % 10) as f64;
        clip_ok &= clip_gradient(&v, c).l2_norm() <= c;
    }
    let spec = NoiseSpec {
        mechanism: Mechanism::Gaussian,
        scale: 0.0,
        clip: None,
    };
    spec.validate()?;
    Ok((
        gok && lok && clip_ok,
        format!("gaussian mean {gm:.4} var {gv:.4}; laplace mean {lm:.4} var {lv:.4}; clip {clip_ok}"),
    ))
}

fn metric_constants() -> Result<(bool, String)> {
    let mut rng = Streams::new(16).rng("selftest", &[6]);
    let a = random_tensor(&mut rng, &[12, 12], 0.5).map(|v| v + 0.5);
    let ssim_self = metrics::ssim(&a, &a)?;
    let p1 = metrics::psnr_from_mse(1.0);
    let p2 = metrics::psnr_from_mse(0.01);
    let m0 = metrics::mse(&a, &a)?;
    let ok = (ssim_self - 1.0).abs() < 1e-9 && p1.abs() < 1e-9 && (p2 - 20.0).abs() < 1e-9 && m0 == 0.0;
    Ok((ok, format!("ssim(a,a) {ssim_self:.12}, psnr {p1:.3}/{p2:.3} dB")))
}

/// Runs every check. Each takes well under a second in release builds.
pub fn run_all() -> Vec<Check> {
    vec![
        check("autodiff-first-order", mlp_gradients()),
        check("autodiff-second-order", second_order()),
        check("linear-inversion", linear_inversion()),
        check("fedsgd-equivalence", fedsgd_equivalence()),
        check("annulus-projection", annulus()),
        check("noise-statistics", noise()),
        check("metric-constants", metric_constants()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            assert!(c.passed, "{c}");
        }
    }
}
