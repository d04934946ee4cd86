//! Error-minimizing data perturbation for client-side defense.
//!
//! A client holding a batch `(x, y)` and the current global model `θ`
//! alternates `N` times between
//!
//! 1. a signed gradient step on `δ` that *decreases* the loss of the
//!    auxiliary model `θ_u` on `t(x + δ)`, followed by projection onto the
//!    annulus `ρ_min ≤ ‖δ‖∞ ≤ ρ_max`, and
//! 2. one gradient-descent step on `θ_u` using the updated `δ`.
//!
//! `θ_u` starts as a copy of `θ`. The client then uploads the gradient of
//! the global model on the perturbed batch instead of the clean one.
//!
//! Radii and step sizes are expressed in 8-bit pixel units (a radius of 8
//! means 8/255 on the `[0, 1]` image scale).

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::NormalizationTransform;
use crate::error::{AutodiffError, Error, Result};
use crate::model::{GradientVector, ParameterSet};
use crate::rng::{self, Streams};
use crate::tensor::Tensor;

/// Pixel units per unit of image intensity.
pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Outer ℓ∞ radius, pixel units.
    pub rho_max: f64,
    /// Inner ℓ∞ radius, pixel units.
    pub rho_min: f64,
    /// Signed step size `α_u`, pixel units.
    pub step_size: f64,
    /// Alternating iterations `N`.
    pub iterations: usize,
    /// Learning rate of the auxiliary model `θ_u`.
    pub theta_lr: f64,
    /// Draw the initial perturbation from a server-side stream instead of a
    /// per-client one.
    #[serde(default)]
    pub server_side_init: bool,
}

impl PerturbationConfig {
    /// Step size `ρ_max / 4` and auxiliary learning rate 0.01.
    pub fn new(rho_max: f64, rho_min: f64, iterations: usize) -> Self {
        Self {
            rho_max,
            rho_min,
            step_size: rho_max / 4.0,
            iterations,
            theta_lr: 0.01,
            server_side_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rho_min >= 0.0
            && self.rho_min <= self.rho_max
            && self.rho_max.is_finite()
            && self.iterations >= 1
            && self.theta_lr >= 0.0
            && self.theta_lr.is_finite()
            && (self.step_size > 0.0 || self.rho_max == 0.0)
            && self.step_size.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid perturbation config {self:?}")))
        }
    }

    /// Radii on the `[0, 1]` intensity scale.
    pub fn unit_radii(&self) -> (f64, f64) {
        (self.rho_min / PIXEL_SCALE, self.rho_max / PIXEL_SCALE)
    }

    /// Projection onto this config's annulus, for `δ` on the `[0, 1]` scale.
    pub fn project(&self, delta: &Tensor) -> Tensor {
        let (lo, hi) = self.unit_radii();
        project_annulus(delta, lo, hi)
    }
}

/// A client's current perturbation on the `[0, 1]` intensity scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    pub delta: Tensor,
    pub step: usize,
}

/// Projects `delta` so that `rho_min ≤ ‖δ‖∞ ≤ rho_max`, in the units of the
/// arguments.
///
/// Components are clamped to `[-rho_max, rho_max]`. A nonzero `δ` that is
/// still inside the inner radius is scaled radially up to it; a zero `δ`
/// gets `rho_min` at flat index 0. Both bounds hold exactly afterwards.
pub fn project_annulus(delta: &Tensor, rho_min: f64, rho_max: f64) -> Tensor {
    let mut out = delta.map(|v| v.clamp(-rho_max, rho_max));
    if rho_min <= 0.0 {
        return out;
    }
    let (argmax, norm) = out
        .data()
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bm), (i, v)| if v.abs() > bm { (i, v.abs()) } else { (bi, bm) });
    if norm >= rho_min {
        return out;
    }
    let data = out.data_mut();
    if norm == 0.0 {
        data[0] = rho_min;
        return out;
    }
    let sign = data[argmax].signum();
    for v in data.iter_mut() {
        *v = (*v / norm * rho_min).clamp(-rho_max, rho_max);
    }
    // Pin the largest component so rounding cannot leave it below rho_min.
    data[argmax] = sign * rho_min;
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Identifies one perturbation draw. `slot` separates the round's training
/// batch (slot 0) from auxiliary batches of the same client and round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeltaKey {
    pub seed: u64,
    pub client: usize,
    pub round: usize,
    pub slot: usize,
}

impl DeltaKey {
    pub fn new(seed: u64, client: usize, round: usize) -> Self {
        Self { seed, client, round, slot: 0 }
    }

    pub fn with_slot(self, slot: usize) -> Self {
        Self { slot, ..self }
    }
}

/// Initial perturbation, uniform in `[-ρ_max, ρ_max]` then projected.
/// Deterministic in the key.
pub fn init_delta(shape: &[usize], cfg: &PerturbationConfig, key: DeltaKey) -> PerturbationState {
    let (_, hi) = cfg.unit_radii();
    let stream = if cfg.server_side_init { "server-perturbation" } else { rng::PERTURBATION };
    let path = [key.client as u64, key.round as u64, key.slot as u64];
    let mut r = Streams::new(key.seed).rng(stream, &path);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform(&mut r, -hi, hi)).collect();
    let delta = cfg.project(&Tensor::from_parts(shape.to_vec(), data));
    PerturbationState { delta, step: 0 }
}

/// Mean loss of `params` on `t(x)` and its parameter gradient.
///
/// `x` is a pixel-scale batch; clean and perturbed uploads both go through
/// this function so that a zero perturbation reproduces the clean gradient
/// bit for bit.
pub fn client_gradient(
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    transform: &NormalizationTransform,
) -> Result<(f64, GradientVector), AutodiffError> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, true);
    let xin = g.constant(x.clone());
    let xn = transform.apply_node(&mut g, xin)?;
    let loss = nodes.loss(&mut g, xn, labels)?;
    let grads = g.grad(loss, &nodes.params)?;
    let tensors = grads.iter().map(|&id| g.value(id).clone()).collect();
    Ok((g.value(loss).item(), GradientVector::new(tensors)))
}

/// Loss of `params` on `t(x + δ)` and its gradient with respect to `δ`.
fn delta_gradient(
    params: &ParameterSet,
    x: &Tensor,
    delta: &Tensor,
    labels: &[usize],
    transform: &NormalizationTransform,
    loss_scale: f64,
) -> Result<(f64, Tensor), AutodiffError> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, false);
    let xin = g.constant(x.clone());
    let d = g.leaf(delta.clone());
    let xd = g.add(xin, d)?;
    let xn = transform.apply_node(&mut g, xd)?;
    let loss = nodes.loss(&mut g, xn, labels)?;
    let scaled = g.scale(loss, loss_scale)?;
    let gd = g.grad(scaled, &[d])?[0];
    Ok((g.value(loss).item(), g.value(gd).clone()))
}

/// Output of [`generate_perturbation`].
#[derive(Clone, Debug)]
pub struct Perturbed {
    pub state: PerturbationState,
    /// `x + δ` at pixel scale (unclamped; the normalization clamps).
    pub images: Tensor,
    /// The auxiliary model after co-training.
    pub theta_u: ParameterSet,
    /// Loss of `θ_u` before each `δ` step.
    pub loss_trace: Vec<f64>,
}

/// Runs the alternating perturbation / auxiliary-model optimization for one
/// client batch. `params` is never modified.
pub fn generate_perturbation(
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    transform: &NormalizationTransform,
    cfg: &PerturbationConfig,
    key: DeltaKey,
) -> Result<Perturbed> {
    generate_scaled(params, x, labels, transform, cfg, key, 1.0)
}

pub(crate) fn generate_scaled(
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    transform: &NormalizationTransform,
    cfg: &PerturbationConfig,
    key: DeltaKey,
    delta_loss_scale: f64,
) -> Result<Perturbed> {
    cfg.validate()?;
    let client = key.client;
    let diverged = |step| Error::PerturbationDiverged { client, step };
    let alpha = cfg.step_size / PIXEL_SCALE;
    let mut state = init_delta(x.shape(), cfg, key);
    let mut theta_u = params.clone();
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let (loss, gd) = delta_gradient(&theta_u, x, &state.delta, labels, transform, delta_loss_scale)
            .map_err(|_| diverged(step))?;
        loss_trace.push(loss);
        let stepped = state.delta.zip_map(&gd, |d, g| d - alpha * sign(g));
        state.delta = cfg.project(&stepped);
        state.step = step + 1;

        let perturbed = x.zip_map(&state.delta, |a, b| a + b);
        let (_, gtheta) = client_gradient(&theta_u, &perturbed, labels, transform).map_err(|_| diverged(step))?;
        theta_u = theta_u.step(&gtheta, cfg.theta_lr).map_err(|_| diverged(step))?;
    }

    let images = x.zip_map(&state.delta, |a, b| a + b);
    Ok(Perturbed {
        state,
        images,
        theta_u,
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_annulus(&t(&[16.0, -4.0]), 0.0, 8.0).data(), &[8.0, -4.0]);
        assert_eq!(project_annulus(&t(&[1.0, 0.5]), 2.0, 8.0).data(), &[2.0, 1.0]);
        assert_eq!(project_annulus(&t(&[3.0]), 2.0, 8.0).data(), &[3.0]);
        assert_eq!(project_annulus(&t(&[0.0, 0.0]), 2.0, 8.0).data(), &[2.0, 0.0]);
        assert_eq!(project_annulus(&t(&[-0.5, 0.25]), 1.0, 8.0).data(), &[-1.0, 0.5]);
    }

    proptest! {
        #[test]
        fn annulus_bounds_hold_exactly(
            xs in prop::collection::vec(-20.0f64..20.0, 1..12),
            rmin in 0.0f64..5.0,
            extra in 0.0f64..5.0,
            shrink in 0u32..40,
        ) {
            let rmax = rmin + extra;
            let scaled: Vec<f64> = xs.iter().map(|v| v * 0.5f64.powi(shrink as i32)).collect();
            let p = project_annulus(&t(&scaled), rmin, rmax);
            prop_assert!(p.data().iter().all(|v| v.abs() <= rmax));
            if rmin > 0.0 {
                prop_assert!(p.linf_norm() >= rmin);
            }
        }
    }

    #[test]
    fn zero_radius_init_is_zero() {
        let cfg = PerturbationConfig::new(0.0, 0.0, 1);
        let s = init_delta(&[2, 3], &cfg, DeltaKey::new(1, 0, 0));
        assert!(s.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_within_radius_and_deterministic() {
        let cfg = PerturbationConfig::new(8.0, 2.0, 1);
        let a = init_delta(&[4, 5], &cfg, DeltaKey::new(3, 1, 2));
        assert!(a.delta.linf_norm() <= 8.0 / 255.0);
        assert!(a.delta.linf_norm() >= 2.0 / 255.0);
        assert_eq!(a, init_delta(&[4, 5], &cfg, DeltaKey::new(3, 1, 2)));
        assert_ne!(a, init_delta(&[4, 5], &cfg, DeltaKey::new(3, 2, 2)));
        assert_ne!(a, init_delta(&[4, 5], &cfg, DeltaKey::new(3, 1, 3)));
    }

    fn setup() -> (ParameterSet, Tensor, Vec<usize>, NormalizationTransform) {
        let spec = ModelSpec::mlp(&[1, 2, 3], &[6, 5, 3], Activation::Sigmoid).unwrap();
        let params = ParameterSet::init(&spec, 7);
        let x = Tensor::new(vec![4, 1, 2, 3], (0..24).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        (params, x, vec![0, 1, 2, 1], NormalizationTransform::new(vec![0.5], vec![0.25]).unwrap())
    }

    #[test]
    fn saturating_step_hits_the_radius() {
        let (params, x, y, tr) = setup();
        let mut cfg = PerturbationConfig::new(8.0, 0.0, 1);
        cfg.step_size = 1000.0;
        let out = generate_perturbation(&params, &x, &y, &tr, &cfg, DeltaKey::new(1, 0, 0)).unwrap();
        let init = init_delta(x.shape(), &cfg, DeltaKey::new(1, 0, 0));
        let (_, gd) = delta_gradient(&params, &x, &init.delta, &y, &tr, 1.0).unwrap();
        for (d, g) in out.state.delta.data().iter().zip(gd.data()) {
            if *g != 0.0 {
                assert_eq!(d.abs(), 8.0 / 255.0);
            }
        }
    }

    #[test]
    fn global_parameters_untouched() {
        let (params, x, y, tr) = setup();
        let before = params.clone();
        let _ = generate_perturbation(&params, &x, &y, &tr, &PerturbationConfig::new(8.0, 1.0, 3), DeltaKey::new(1, 0, 0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sign_steps_ignore_loss_scale() {
        let (params, x, y, tr) = setup();
        let cfg = PerturbationConfig::new(8.0, 1.0, 4);
        let a = generate_scaled(&params, &x, &y, &tr, &cfg, DeltaKey::new(5, 1, 1), 1.0).unwrap();
        let b = generate_scaled(&params, &x, &y, &tr, &cfg, DeltaKey::new(5, 1, 1), 37.5).unwrap();
        assert_eq!(a.state.delta, b.state.delta);
    }

    #[test]
    fn zero_radius_reproduces_clean_gradient() {
        let (params, x, y, tr) = setup();
        let cfg = PerturbationConfig::new(0.0, 0.0, 2);
        let out = generate_perturbation(&params, &x, &y, &tr, &cfg, DeltaKey::new(1, 0, 0)).unwrap();
        let clean = client_gradient(&params, &x, &y, &tr).unwrap().1;
        let pert = client_gradient(&params, &out.images, &y, &tr).unwrap().1;
        assert_eq!(clean.flatten(), pert.flatten());
    }

    #[test]
    fn generation_lowers_loss_on_convex_model() {
        let spec = ModelSpec::mlp(&[1, 2, 3], &[6, 3], Activation::Sigmoid).unwrap();
        let params = ParameterSet::init(&spec, 2);
        let (_, x, y, tr) = setup();
        let out = generate_perturbation(&params, &x, &y, &tr, &PerturbationConfig::new(8.0, 0.0, 5), DeltaKey::new(4, 0, 0)).unwrap();
        let (after, _) = client_gradient(&out.theta_u, &out.images, &y, &tr).unwrap();
        assert!(after <= out.loss_trace[0], "{after} > {}", out.loss_trace[0]);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(PerturbationConfig::new(4.0, 5.0, 1).validate().is_err());
        assert!(PerturbationConfig::new(4.0, 0.0, 0).validate().is_err());
    }
}
