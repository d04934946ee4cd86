//! Acceptance criteria 1 to 11. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stderr so the verdicts show up even when output is
//! captured.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedem_core::attack::{matching_loss_node, reconstruct, AttackConfig, LabelMode};
use fedem_core::autodiff::{Graph, NodeId};
use fedem_core::data::{synth_blobs, partition_iid};
use fedem_core::error::AutodiffError;
use fedem_core::federation::{Defense, FederatedData, Federation};
use fedem_core::harness::{run_experiment, run_sweep, ExperimentManifest, RunSummary, SweepSpec};
use fedem_core::ldp::{add_noise, clip_gradient};
use fedem_core::metrics;
use fedem_core::perturb::project_annulus;
use fedem_core::{FederationConfig, GradientVector, ModelSpec, NoiseSpec, NormalizationTransform, ParameterSet, PerturbationConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n}: {tag} {detail}");
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>>;

fn eval(f: &Builder, point: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves).unwrap();
    g.value(out).item()
}

/// Worst `|analytic - numeric| / max(1, |numeric|)` over all inputs, with
/// numeric derivatives from central differences of step `h`.
fn worst_error(f: &Builder, point: &[Tensor], h: f64) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves).unwrap();
    let grads = g.grad(out, &leaves).unwrap();
    let mut worst = 0.0f64;
    let mut work = point.to_vec();
    for (k, gid) in grads.iter().enumerate() {
        let analytic = g.value(*gid).data().to_vec();
        for i in 0..point[k].len() {
            let x0 = point[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(f, &work);
            work[k].data_mut()[i] = x0 - h;
            let down = eval(f, &work);
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

/// Contracts a node with fixed weights into a scalar so that every output
/// component contributes a distinct amount.
fn contract(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId, AutodiffError> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    let c = |name, shapes: &[&[usize]], f: Builder| (name, shapes.iter().map(|s| s.to_vec()).collect(), f);
    vec![
        c("add", &[&[3, 4], &[3, 4]], Box::new(|g, v| { let y = g.add(v[0], v[1])?; contract(g, y, 1) })),
        c("sub", &[&[3, 4], &[3, 4]], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; contract(g, y, 2) })),
        c("mul", &[&[3, 4], &[3, 4]], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; contract(g, y, 3) })),
        c("matmul", &[&[3, 4], &[4, 5]], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; contract(g, y, 4) })),
        c("matmul_ta", &[&[4, 3], &[4, 5]], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], true, false)?; contract(g, y, 5) })),
        c("matmul_tb", &[&[3, 4], &[5, 4]], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], false, true)?; contract(g, y, 6) })),
        c("matmul_tab", &[&[4, 3], &[5, 4]], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], true, true)?; contract(g, y, 7) })),
        c("add_row", &[&[3, 4], &[4]], Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; contract(g, y, 8) })),
        c("mul_row", &[&[3, 4], &[4]], Box::new(|g, v| { let y = g.mul_row(v[0], v[1])?; contract(g, y, 9) })),
        c("sum_rows", &[&[3, 4]], Box::new(|g, v| { let y = g.sum_rows(v[0])?; contract(g, y, 10) })),
        c("broadcast_rows", &[&[4]], Box::new(|g, v| { let y = g.broadcast_rows(v[0], 3)?; contract(g, y, 11) })),
        c("row_sum", &[&[3, 4]], Box::new(|g, v| { let y = g.row_sum(v[0])?; contract(g, y, 12) })),
        c("broadcast_cols", &[&[3]], Box::new(|g, v| { let y = g.broadcast_cols(v[0], 4)?; contract(g, y, 13) })),
        c("sum", &[&[3, 4]], Box::new(|g, v| { let y = g.sum(v[0])?; g.square(y) })),
        c("mean", &[&[3, 4]], Box::new(|g, v| { let y = g.mean(v[0])?; g.square(y) })),
        c("expand", &[&[]], Box::new(|g, v| { let y = g.expand(v[0], &[3, 4])?; contract(g, y, 14) })),
        c("mul_scalar", &[&[3, 4], &[]], Box::new(|g, v| { let y = g.mul_scalar(v[0], v[1])?; contract(g, y, 15) })),
        c("sigmoid", &[&[3, 4]], Box::new(|g, v| { let y = g.sigmoid(v[0])?; contract(g, y, 16) })),
        c("tanh", &[&[3, 4]], Box::new(|g, v| { let y = g.tanh(v[0])?; contract(g, y, 17) })),
        c("softmax", &[&[3, 4]], Box::new(|g, v| { let y = g.softmax(v[0])?; contract(g, y, 18) })),
        c("log_softmax", &[&[3, 4]], Box::new(|g, v| { let y = g.log_softmax(v[0])?; contract(g, y, 19) })),
        c("square", &[&[3, 4]], Box::new(|g, v| { let y = g.square(v[0])?; contract(g, y, 20) })),
        c("affine", &[&[3, 4]], Box::new(|g, v| { let y = g.affine(v[0], -1.7, 0.3)?; let y = g.square(y)?; contract(g, y, 21) })),
        c("scale", &[&[3, 4]], Box::new(|g, v| { let y = g.scale(v[0], 2.5)?; contract(g, y, 22) })),
        c("clamp", &[&[3, 4]], Box::new(|g, v| { let y = g.clamp(v[0], -0.5, 0.5)?; let y = g.square(y)?; contract(g, y, 23) })),
        c("reshape", &[&[3, 4]], Box::new(|g, v| { let y = g.reshape(v[0], &[2, 6])?; let y = g.square(y)?; contract(g, y, 24) })),
        c("softmax_cross_entropy", &[&[3, 4]], Box::new(|g, v| g.softmax_cross_entropy(v[0], &[1, 3, 0]))),
        c("soft_cross_entropy", &[&[3, 4], &[3, 4]], Box::new(|g, v| { let t = g.softmax(v[1])?; g.soft_cross_entropy(v[0], t) })),
        c("mlp_sigmoid_loss", &[&[5, 6], &[6, 7], &[7], &[7, 3], &[3]], Box::new(|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.sigmoid(h)?;
            let z = g.matmul(h, v[3])?;
            let z = g.add_row(z, v[4])?;
            g.softmax_cross_entropy(z, &[0, 2, 1, 1, 0])
        })),
    ]
}

#[test]
fn criterion_01_autodiff_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut first = 0.0f64;
    let mut worst_op = "";
    for (name, shapes, f) in op_cases() {
        for _ in 0..100 {
            let point: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, -2.0, 2.0)).collect();
            let e = worst_error(&f, &point, 1e-5);
            if e > first {
                first = e;
                worst_op = name;
            }
        }
    }

    let spec: ModelSpec = "mlp:8-6-4:sigmoid:1x1x8".parse().unwrap();
    let theta = ParameterSet::init(&spec, 3);
    let x_true = rand_tensor(&mut rng, &[1, 8], 0.0, 1.0);
    let target = theta.loss_and_grad(&x_true, &[2]).unwrap().1;
    let matching: Builder = Box::new(move |g, v| {
        let nodes = theta.attach(g, true);
        let y = g.softmax(v[1])?;
        matching_loss_node(g, &nodes, v[0], y, &target)
    });
    let mut second = 0.0f64;
    for _ in 0..100 {
        let point = vec![rand_tensor(&mut rng, &[1, 8], -1.0, 1.0), rand_tensor(&mut rng, &[1, 4], -2.0, 2.0)];
        second = second.max(worst_error(&matching, &point, 1e-5));
    }
    let elapsed = start.elapsed();
    let pass = first < 1e-4 && second < 1e-3 && elapsed < Duration::from_secs(60);
    verdict(
        "1",
        pass,
        &format!("first-order {first:.2e} (worst op {worst_op}), second-order {second:.2e}, {elapsed:.1?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_linear_inversion() {
    let start = Instant::now();
    let spec: ModelSpec = "mlp:784-10:sigmoid:1x28x28".parse().unwrap();
    let theta = ParameterSet::init(&spec, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let x = rand_tensor(&mut rng, &[1, 784], -0.4, 2.8);
    let label = 6;
    let target = theta.loss_and_grad(&x, &[label]).unwrap().1;

    // Row i of dL/dW is x scaled by dL/db_i, so any class with a nonzero bias
    // gradient yields the input in closed form.
    let (gw, gb) = (target.tensors()[0].data(), target.tensors()[1].data());
    let i = (0..10).max_by(|&a, &b| gb[a].abs().total_cmp(&gb[b].abs())).unwrap();
    let closed: Vec<f64> = (0..784).map(|j| gw[j * 10 + i] / gb[i]).collect();

    // Known labels: soft labels only reach the one-hot optimum in the limit.
    let cfg = AttackConfig {
        iterations: 3000,
        restarts: 1,
        label_mode: LabelMode::Known,
        ..AttackConfig::default()
    };
    let r = reconstruct(&theta, &target, &cfg, 5, &[0], None).unwrap();
    let err = r.x_hat.data().iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let oracle_err = x.data().iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = err < 1e-6 && elapsed < Duration::from_secs(10);
    verdict(
        "2",
        pass,
        &format!("max |x_hat - closed form| {err:.2e} (closed form vs truth {oracle_err:.1e}), {elapsed:.1?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Full-batch mean cross-entropy gradient of a one-hidden-layer sigmoid MLP,
/// computed with explicit loops.
fn manual_gradient(theta: &ParameterSet, x: &[f64], labels: &[usize], mean: f64, std: f64) -> Vec<Vec<f64>> {
    let t = theta.tensors();
    let (w1, b1, w2, b2) = (t[0].data(), t[1].data(), t[2].data(), t[3].data());
    let (d, h) = (t[0].shape()[0], t[0].shape()[1]);
    let c = t[2].shape()[1];
    let n = labels.len();
    let mut g = vec![vec![0.0; d * h], vec![0.0; h], vec![0.0; h * c], vec![0.0; c]];
    for s in 0..n {
        let xs: Vec<f64> = x[s * d..(s + 1) * d].iter().map(|v| (v.clamp(0.0, 1.0) - mean) / std).collect();
        let hid: Vec<f64> = (0..h)
            .map(|k| {
                let a: f64 = b1[k] + (0..d).map(|j| xs[j] * w1[j * h + k]).sum::<f64>();
                1.0 / (1.0 + (-a).exp())
            })
            .collect();
        let z: Vec<f64> = (0..c).map(|o| b2[o] + (0..h).map(|k| hid[k] * w2[k * c + o]).sum::<f64>()).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let tot: f64 = e.iter().sum();
        let dz: Vec<f64> = (0..c).map(|o| (e[o] / tot - f64::from(o == labels[s])) / n as f64).collect();
        for k in 0..h {
            for o in 0..c {
                g[2][k * c + o] += hid[k] * dz[o];
            }
        }
        for o in 0..c {
            g[3][o] += dz[o];
        }
        for k in 0..h {
            let dh: f64 = (0..c).map(|o| dz[o] * w2[k * c + o]).sum();
            let da = dh * hid[k] * (1.0 - hid[k]);
            for j in 0..d {
                g[0][j * h + k] += xs[j] * da;
            }
            g[1][k] += da;
        }
    }
    g
}

#[test]
fn criterion_03_fedsgd_equivalence() {
    let start = Instant::now();
    let data = synth_blobs(4, 25, 16, 33).unwrap();
    let spec: ModelSpec = "mlp:16-10-4:sigmoid:1x4x4".parse().unwrap();
    let theta = ParameterSet::init(&spec, 33);
    let transform = NormalizationTransform::mnist();
    let lr = 0.7;
    let cfg = FederationConfig::new(4, 1, lr, Defense::None, 33);
    let shards = partition_iid(data.len(), 4, 33);
    assert!(shards.iter().all(|s| s.size() == 25));
    let fed = Federation::new(
        &cfg,
        FederatedData { train: &data, val: &data, test: &data, shards: &shards, transform: &transform },
    )
    .unwrap();
    let (after, _) = fed.run_round(&theta, 1).unwrap();

    let grads = manual_gradient(&theta, data.images().data(), data.labels(), 0.1307, 0.3081);
    let mut worst = 0.0f64;
    for ((fed_t, old_t), g) in after.tensors().iter().zip(theta.tensors()).zip(&grads) {
        for ((f, o), gv) in fed_t.data().iter().zip(old_t.data()).zip(g) {
            worst = worst.max((f - (o - lr * gv)).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(10);
    verdict("3", pass, &format!("max parameter difference {worst:.2e}, {elapsed:.1?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_fedem_reduction() {
    let data = synth_blobs(3, 40, 12, 44).unwrap();
    let (train, val) = data.split_validation(0.1).unwrap();
    let test = synth_blobs(3, 10, 12, 45).unwrap();
    let spec: ModelSpec = "mlp:12-8-3:sigmoid:1x1x12".parse().unwrap();
    let shards = partition_iid(train.len(), 4, 44);
    let transform = NormalizationTransform::identity(1);
    let run = |defense: Defense| {
        let mut cfg = FederationConfig::new(4, 10, 1.0, defense, 44);
        cfg.batch_size = Some(8);
        cfg.clients_per_round = 3;
        cfg.record_rounds = (1..=10).collect();
        let fed = Federation::new(
            &cfg,
            FederatedData { train: &train, val: &val, test: &test, shards: &shards, transform: &transform },
        )
        .unwrap();
        fed.train(ParameterSet::init(&spec, 44)).unwrap()
    };
    let plain = run(Defense::None);
    let zero = run(Defense::Fedem(PerturbationConfig::new(0.0, 0.0, 5)));
    let bits = |p: &ParameterSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let grad_bits = |g: &GradientVector| g.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut same = plain.records == zero.records && bits(&plain.last) == bits(&zero.last) && plain.artifacts.len() == 10;
    for (a, b) in plain.artifacts.iter().zip(&zero.artifacts) {
        same &= bits(&a.theta) == bits(&b.theta);
        for (ua, ub) in a.uploads.iter().zip(&b.uploads) {
            same &= grad_bits(&ua.gradient) == grad_bits(&ub.gradient);
        }
    }
    verdict("4", same, &format!("{} rounds compared bit for bit", plain.records.len()));
    assert!(same);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_annulus_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut violations, mut inner, mut zero) = (0, 0, 0);
    for i in 0..100_000 {
        let rho_max = rng.gen_range(1e-3..1.0);
        let rho_min = rng.gen_range(1e-4..=rho_max);
        let len = rng.gen_range(1..40);
        let delta = match i % 5 {
            0 => {
                zero += 1;
                Tensor::zeros(&[len])
            }
            1 | 2 => {
                inner += 1;
                rand_tensor(&mut rng, &[len], -rho_min * 0.9, rho_min * 0.9)
            }
            _ => rand_tensor(&mut rng, &[len], -3.0 * rho_max, 3.0 * rho_max),
        };
        let n = project_annulus(&delta, rho_min, rho_max).linf_norm();
        if !(rho_min <= n && n <= rho_max) {
            violations += 1;
        }
    }
    let pass = violations == 0;
    verdict("5", pass, &format!("{violations} violations in 100000 calls ({inner} inside the hole, {zero} zero)"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

/// Checks sample mean and unbiased variance against 3.9 standard errors: the
/// mean's standard error is sqrt(var/n) and the variance's is
/// sqrt((mu4 - var^2)/n), mu4 being the fourth central moment.
fn moments(draws: &[f64], var: f64, mu4: f64) -> (bool, String) {
    let n = draws.len() as f64;
    let m = draws.iter().sum::<f64>() / n;
    let v = draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0);
    let mb = 3.9 * (var / n).sqrt();
    let vb = 3.9 * ((mu4 - var * var) / n).sqrt();
    (m.abs() <= mb && (v - var).abs() <= vb, format!("mean {m:+.2e} (bound {mb:.1e}), var {v:.5} vs {var} (bound {vb:.1e})"))
}

#[test]
fn criterion_06_noise_statistics() {
    let zeros = GradientVector::new(vec![Tensor::zeros(&[1_000_000])]);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let sigma = 0.7;
    let g = add_noise(&zeros, &NoiseSpec::gaussian(sigma), &mut rng).flatten();
    let (gok, gd) = moments(&g, sigma * sigma, 3.0 * sigma.powi(4));
    let b = 1.3;
    let l = add_noise(&zeros, &NoiseSpec::laplace(b), &mut rng).flatten();
    let (lok, ld) = moments(&l, 2.0 * b * b, 24.0 * b.powi(4));
    let mut clip_bad = 0;
    for i in 0..10_000 {
        let len = rng.gen_range(1..50);
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let v = GradientVector::new(vec![rand_tensor(&mut rng, &[len], -scale, scale), rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)]);
        let c = if i % 2 == 0 { rng.gen_range(1e-3..5.0) } else { v.l2_norm() * rng.gen_range(0.5..1.5) };
        if clip_gradient(&v, c).l2_norm() > c {
            clip_bad += 1;
        }
    }
    let pass = gok && lok && clip_bad == 0;
    verdict("6", pass, &format!("gaussian {gd}; laplace {ld}; {clip_bad} clip violations"));
    assert!(pass);
}

// ---------------------------------------------------------------- criteria 7 and 8

struct MnistRun {
    summary: RunSummary,
    /// Reconstruction MSE of every attacked round-1 image.
    round1_mse: Vec<f64>,
}

fn attack_rows(dir: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(dir.join("attack.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn run_mnist(manifest: ExperimentManifest, dir: &Path) -> MnistRun {
    let summary = run_experiment(&manifest, dir).unwrap();
    let round1_mse = attack_rows(dir)
        .iter()
        .filter(|row| row["round"] == "1")
        .map(|row| row["mse"].parse().unwrap())
        .collect();
    MnistRun { summary, round1_mse }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Shared {
    _tmp: tempfile::TempDir,
    fedsgd: MnistRun,
    fedem: MnistRun,
    elapsed: Duration,
}

fn mnist_pair() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let sgd = ExperimentManifest::load(&configs().join("mnist-fedsgd.toml")).unwrap();
        let em = ExperimentManifest::load(&configs().join("mnist-fedem.toml")).unwrap();
        let fedsgd = run_mnist(sgd, &tmp.path().join("fedsgd"));
        let fedem = run_mnist(em, &tmp.path().join("fedem"));
        Shared { fedsgd, fedem, elapsed: start.elapsed(), _tmp: tmp }
    })
}

#[test]
fn criterion_07_fedsgd_vs_fedem() {
    let s = mnist_pair();
    let (a_sgd, a_em) = (s.fedsgd.summary.training.test_acc, s.fedem.summary.training.test_acc);
    let (m_sgd, m_em) = (mean(&s.fedsgd.round1_mse), mean(&s.fedem.round1_mse));
    let images = s.fedem.round1_mse.len().min(s.fedsgd.round1_mse.len());
    let a = a_em >= a_sgd - 0.03;
    let b = images >= 8 && m_em >= m_sgd;
    let pass = a && b && s.elapsed < Duration::from_secs(30 * 60);
    verdict(
        "7",
        pass,
        &format!(
            "(a) acc FedEM {a_em:.4} vs FedSGD {a_sgd:.4}; (b) round-1 MSE FedEM {m_em:.3e} vs FedSGD {m_sgd:.3e} over {images} images; {:.0?}",
            s.elapsed
        ),
    );
    assert!(pass);
}

/// LDP run of the FedSGD desk manifest. `rounds` shortens training when
/// only the round-1 attack matters; `attack` off makes the attack trivial
/// when only accuracy matters.
fn ldp_run(defense: &Defense, rounds: usize, attack: bool, dir: &Path) -> Option<(f64, f64)> {
    let mut m = ExperimentManifest::load(&configs().join("mnist-fedsgd.toml")).unwrap();
    m.name = "ldp".into();
    m.defense = defense.clone();
    m.federation.rounds = rounds;
    if !attack {
        m.attack.config.iterations = 1;
        m.attack.config.restarts = 1;
        m.attack.dump_images = false;
    }
    let _ = fs::remove_dir_all(dir);
    match run_experiment(&m, dir) {
        Ok(s) => {
            let mse: Vec<f64> = attack_rows(dir).iter().filter(|r| r["round"] == "1").map(|r| r["mse"].parse().unwrap()).collect();
            Some((s.training.test_acc, mean(&mse)))
        }
        // Every restart diverging means the attack learned nothing.
        Err(fedem_core::Error::AttackFailed { .. }) => Some((f64::NAN, f64::INFINITY)),
        Err(e) => panic!("LDP run failed: {e}"),
    }
}

/// Geometric bisection for the boundary of a monotone predicate on
/// `[lo, hi]`: returns the largest probed scale where `ok` held.
fn bisect(mut lo: f64, mut hi: f64, steps: usize, mut ok: impl FnMut(f64) -> bool) -> f64 {
    for _ in 0..steps {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn criterion_08_fedem_vs_ldp() {
    let s = mnist_pair();
    let acc_em = s.fedem.summary.training.test_acc;
    let mse_em = mean(&s.fedem.round1_mse);
    let tmp = tempfile::tempdir().unwrap();
    let mut all = true;
    let mut details = Vec::new();
    for (name, make) in [
        ("gaussian", (|v: f64| Defense::LdpGaussian { sigma: v }) as fn(f64) -> Defense),
        ("laplace", |v: f64| Defense::LdpLaplace { b: v }),
    ] {
        let dir = tmp.path().join(name);
        // Largest noise scale whose accuracy stays within 0.02 of FedEM.
        let mut accs = BTreeMap::new();
        let s_acc = bisect(1e-4, 1.0, 8, |v| {
            let (acc, _) = ldp_run(&make(v), 50, false, &dir).unwrap();
            accs.insert(v.to_bits(), acc);
            (acc - acc_em).abs() <= 0.02
        });
        let (acc_at, _) = ldp_run(&make(s_acc), 50, false, &dir).unwrap();
        let (_, mse_at) = ldp_run(&make(s_acc), 1, true, &dir).unwrap();
        let matched_acc = (acc_at - acc_em).abs() <= 0.02;
        let horn1 = matched_acc && mse_em >= mse_at;

        // Scale whose reconstruction error matches FedEM's.
        let s_mse = bisect(1e-6, 1.0, 10, |v| ldp_run(&make(v), 1, true, &dir).unwrap().1 <= mse_em);
        let (_, mse_m) = ldp_run(&make(s_mse), 1, true, &dir).unwrap();
        let (acc_m, _) = ldp_run(&make(s_mse), 50, false, &dir).unwrap();
        let horn2 = acc_m < acc_em - 0.05;
        all &= horn1 || horn2;
        details.push(format!(
            "{name}: acc-matched scale {s_acc:.3e} (acc {acc_at:.4}, MSE {mse_at:.3e}) vs FedEM (acc {acc_em:.4}, MSE {mse_em:.3e}); \
             MSE-matched scale {s_mse:.3e} (MSE {mse_m:.3e}, acc {acc_m:.4}); horns {horn1}/{horn2}"
        ));
    }
    verdict("8", all, &details.join(" | "));
    assert!(all);
}

// ---------------------------------------------------------------- criterion 9

const SWEEP_BASE: &str = r#"
name = "sweep-base"
seed = 9

[dataset]
name = "blobs"
kind = "synthetic"
classes = 4
per_class = 30
dims = 36
test_per_class = 10
normalization = "identity"

[model]
spec = "mlp:36-16-4:sigmoid:1x6x6"

[federation]
clients = 4
rounds = 8
server_lr = 1.0
record_rounds = [1]

[defense]
method = "fedem"
rho_max = 8.0
rho_min = 0.0
step_size = 2.0
iterations = 5
theta_lr = 0.01

[attack]
iterations = 60
restarts = 1
rounds = [1]
"#;

fn sweep_file(dir: &Path, name: &str, axis: &str, values: &str) -> SweepSpec {
    let text = format!("name = \"{name}\"\nbase = \"base.toml\"\naxis = \"{axis}\"\nvalues = {values}\n");
    SweepSpec::from_toml(&text, dir).unwrap()
}

fn table(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn criterion_09_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("base.toml"), SWEEP_BASE).unwrap();
    let iters = sweep_file(tmp.path(), "iterations", "perturb-iterations", "[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]");
    let rho = sweep_file(tmp.path(), "rho", "rho-min", "[0, \"rho_max/8\", \"rho_max/4\"]");
    let mut ok = true;
    let mut detail = Vec::new();
    for (spec, expect) in [(&iters, 10), (&rho, 3)] {
        let dir = tmp.path().join(&spec.name);
        let rows = run_sweep(spec, &dir).unwrap();
        let sweep = table(&dir.join("sweep.csv"));
        let trade = table(&dir.join("tradeoff.csv"));
        let full = sweep.iter().skip(1).all(|r| r.len() == 11 && r.iter().all(|c| c != "NA" && !c.is_empty()));
        let header_ok = sweep[0][5..] == ["test_acc", "val_acc", "test_mse", "fea_mse", "ssim", "psnr"];
        let trade_ok = trade.len() == expect + 1 && trade[0][1..] == ["test_acc", "test_mse"];
        ok &= rows.len() == expect && sweep.len() == expect + 1 && full && header_ok && trade_ok;
        detail.push(format!("{} sweep {} rows", spec.axis.name(), sweep.len() - 1));
    }

    // A single value run on its own reproduces its sweep row exactly.
    let base = iters.base_manifest().unwrap();
    let alone = iters.manifest_for(&base, &fedem_core::harness::AxisValue::Int(3)).unwrap();
    let alone_dir = tmp.path().join("alone");
    run_experiment(&alone, &alone_dir).unwrap();
    let same = fs::read(alone_dir.join("metrics.csv")).unwrap()
        == fs::read(tmp.path().join("iterations").join("3").join("metrics.csv")).unwrap()
        && fs::read(alone_dir.join("attack.csv")).unwrap()
            == fs::read(tmp.path().join("iterations").join("3").join("attack.csv")).unwrap();
    ok &= same;
    detail.push(format!("single-value rerun identical: {same}"));
    verdict("9", ok, &detail.join(", "));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_metric_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let a = rand_tensor(&mut rng, &[20, 20], 0.0, 1.0);
    let b = rand_tensor(&mut rng, &[20, 20], 0.0, 1.0);
    let mut checks = vec![
        ("ssim(a,a)", metrics::ssim(&a, &a).unwrap(), 1.0),
        ("psnr(mse=1)", metrics::psnr_from_mse(1.0), 0.0),
        ("psnr(mse=0.01)", metrics::psnr_from_mse(0.01), 20.0),
        ("mse(a,a)", metrics::mse(&a, &a).unwrap(), 0.0),
        ("mse(0,1)", metrics::mse(&Tensor::zeros(&[3, 5]), &Tensor::filled(&[3, 5], 1.0)).unwrap(), 1.0),
        ("mse(a,a+0.1)", metrics::mse(&a, &a.map(|v| v + 0.1)).unwrap(), 0.01),
    ];
    let brute: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 400.0;
    checks.push(("mse(a,b)", metrics::mse(&a, &b).unwrap(), brute));
    for (c1, c2) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.3)] {
        // Zero variances leave only the luminance term.
        let expect = (2.0 * c1 * c2 + 1e-4) / (c1 * c1 + c2 * c2 + 1e-4);
        let got = metrics::ssim(&Tensor::filled(&[16, 16], c1), &Tensor::filled(&[16, 16], c2)).unwrap();
        checks.push(("ssim(const)", got, expect));
    }
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .map(|(n, got, want)| format!("{n} = {got} != {want}"))
        .collect();
    let pass = bad.is_empty();
    verdict("10", pass, &if pass { format!("{} checks within 1e-9", checks.len()) } else { bad.join("; ") });
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 11

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ExperimentManifest::load(&configs().join("synthetic-smoke.toml")).unwrap();
    let mut noisy = base.clone();
    noisy.name = "smoke-ldp".into();
    noisy.defense = Defense::DpClip { clip: 1.0, sigma: 0.01 };
    noisy.federation.batch_size = Some(6);
    let mut ok = true;
    let mut compared = 0;
    for m in [base, noisy] {
        let (a, b) = (tmp.path().join(format!("{}-a", m.name)), tmp.path().join(format!("{}-b", m.name)));
        run_experiment(&m, &a).unwrap();
        run_experiment(&m, &b).unwrap();
        let (fa, fb) = (files(&a), files(&b));
        let dumps = fa.keys().filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "pgm" | "ppm"))).count();
        ok &= dumps > 10 && fa == fb;
        compared += fa.len();
    }
    verdict("11", ok, &format!("{compared} files compared byte for byte across repeated runs"));
    assert!(ok);
}
