//! FedSGD simulation: each round the server sends `θ` to the selected
//! clients, each client uploads one gradient (possibly defended), and the
//! server takes one step along the size-weighted mean gradient.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset, NormalizationTransform};
use crate::error::{Error, Result};
use crate::ldp::{self, NoiseSpec};
use crate::metrics;
use crate::model::{GradientVector, ParameterSet};
use crate::perturb::{self, DeltaKey, PerturbationConfig};
use crate::rng::{self, Streams};
use crate::tensor::Tensor;

/// Client-side defense applied to every upload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Defense {
    None,
    Fedem(PerturbationConfig),
    LdpGaussian { sigma: f64 },
    LdpLaplace { b: f64 },
    /// ℓ2 clipping to `clip`, then Gaussian noise of std `sigma`.
    DpClip { clip: f64, sigma: f64 },
}

impl Defense {
    pub fn method(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Fedem(_) => "fedem",
            Defense::LdpGaussian { .. } => "ldp-gaussian",
            Defense::LdpLaplace { .. } => "ldp-laplace",
            Defense::DpClip { .. } => "dp-clip",
        }
    }

    /// The gradient mechanism of the noise-based defenses.
    pub fn noise_spec(&self) -> Option<NoiseSpec> {
        match *self {
            Defense::LdpGaussian { sigma } => Some(NoiseSpec::gaussian(sigma)),
            Defense::LdpLaplace { b } => Some(NoiseSpec::laplace(b)),
            Defense::DpClip { clip, sigma } => Some(NoiseSpec::gaussian(sigma).with_clip(clip)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Defense::None => Ok(()),
            Defense::Fedem(cfg) => cfg.validate(),
            other => other.noise_spec().unwrap().validate(),
        }
    }
}

/// Small batches whose defended gradients are kept for the attacker.
///
/// For each client in a recorded round, `per_client` batches of
/// `batch_size` images are taken from the front of its shard; each gets the
/// gradient the client would upload for that batch alone under the round's
/// model and defense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub per_client: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            per_client: 2,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub server_lr: f64,
    pub defense: Defense,
    pub patience: usize,
    pub seed: u64,
    /// Per-round client batch size; `None` uses the whole shard.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Rounds (1-based) whose model and uploads are kept.
    #[serde(default = "default_record_rounds")]
    pub record_rounds: Vec<usize>,
    /// Also keep the last round that ran.
    #[serde(default = "default_true")]
    pub record_final: bool,
    #[serde(default)]
    pub probes: ProbeConfig,
    /// Keep each recorded client's perturbation.
    #[serde(default)]
    pub dump_delta: bool,
    /// Measure wall time per round. Off by default so that records are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
}

fn default_record_rounds() -> Vec<usize> {
    vec![1]
}

fn default_true() -> bool {
    true
}

impl FederationConfig {
    pub fn new(clients: usize, rounds: usize, server_lr: f64, defense: Defense, seed: u64) -> Self {
        Self {
            clients,
            rounds,
            clients_per_round: clients,
            server_lr,
            defense,
            patience: 30,
            seed,
            batch_size: None,
            record_rounds: default_record_rounds(),
            record_final: true,
            probes: ProbeConfig::default(),
            dump_delta: false,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 || self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return bad(format!(
                "need 1 <= clients_per_round ({}) <= clients ({})",
                self.clients_per_round, self.clients
            ));
        }
        if !(self.server_lr >= 0.0 && self.server_lr.is_finite()) {
            return bad(format!("server learning rate must be >= 0, got {}", self.server_lr));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size == Some(0) || self.probes.batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        self.defense.validate()
    }
}

/// Per-round log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub grad_norms: Vec<f64>,
    pub val_acc: f64,
    pub test_acc: f64,
    pub elapsed_ms: u64,
}

impl RoundRecord {
    pub fn grad_norm_mean(&self) -> f64 {
        self.grad_norms.iter().sum::<f64>() / self.grad_norms.len() as f64
    }
}

/// One attackable upload: clean images, their labels and the defended
/// gradient the server received for them.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub gradient: GradientVector,
    /// `x + δ` when the defense perturbs data.
    pub perturbed: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpload {
    pub client: usize,
    pub weight: f64,
    pub gradient: GradientVector,
    pub delta: Option<Tensor>,
    pub probes: Vec<Probe>,
}

/// Everything the server saw in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundArtifact {
    pub round: usize,
    pub theta: ParameterSet,
    pub uploads: Vec<ClientUpload>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy seen.
    pub best: ParameterSet,
    pub best_round: Option<usize>,
    pub last: ParameterSet,
    pub records: Vec<RoundRecord>,
    pub stop: StopReason,
    pub artifacts: Vec<RoundArtifact>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> Option<&RoundRecord> {
        self.best_round.map(|r| &self.records[r - 1])
    }
}

/// Uniform sample of `count` distinct ids from `0..clients`, ascending.
pub fn select_clients(clients: usize, count: usize, round: usize, seed: u64) -> Vec<usize> {
    assert!(count >= 1 && count <= clients, "cannot select {count} of {clients} clients");
    let mut r = Streams::new(seed).rng(rng::SELECTION, &[round as u64]);
    let mut ids = index::sample(&mut r, clients, count).into_vec();
    ids.sort_unstable();
    ids
}

/// `Σ_k (w_k / Σ w) · g_k`, combined in the given order.
pub fn aggregate(gradients: &[GradientVector], weights: &[f64]) -> Result<GradientVector> {
    if gradients.is_empty() || gradients.len() != weights.len() {
        return Err(Error::Config("aggregate needs one weight per gradient".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::Config(format!("aggregation weights must be positive, got {weights:?}")));
    }
    let shapes = gradients[0].shapes();
    if gradients.iter().any(|g| g.shapes() != shapes) {
        return Err(Error::Config("gradients differ in layout".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; gradients[0].len()];
    for (g, w) in gradients.iter().zip(weights) {
        let share = w / total;
        for (a, v) in acc.iter_mut().zip(g.flatten()) {
            *a += share * v;
        }
    }
    GradientVector::from_flat(&shapes, &acc)
}

/// Data a federation runs on.
#[derive(Clone, Copy, Debug)]
pub struct FederatedData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub shards: &'a [ClientShard],
    pub transform: &'a NormalizationTransform,
}

pub struct Federation<'a> {
    pub config: &'a FederationConfig,
    pub data: FederatedData<'a>,
}

struct RoundOutput {
    theta: ParameterSet,
    record: RoundRecord,
    uploads: Vec<ClientUpload>,
}

impl<'a> Federation<'a> {
    pub fn new(config: &'a FederationConfig, data: FederatedData<'a>) -> Result<Self> {
        config.validate()?;
        if data.shards.len() != config.clients {
            return Err(Error::Config(format!(
                "{} shards for {} clients",
                data.shards.len(),
                config.clients
            )));
        }
        if data.shards.iter().any(|s| s.indices.is_empty()) {
            return Err(Error::Config("every client needs at least one sample".into()));
        }
        Ok(Self { config, data })
    }

    fn check_model(&self, theta: &ParameterSet) -> Result<()> {
        let spec = theta.spec();
        let image: usize = self.data.train.image_shape().iter().product();
        if image != spec.input_dim() || self.data.train.classes() != spec.classes() {
            return Err(Error::Config(format!(
                "model {spec} does not fit dataset {} (image {:?}, {} classes)",
                self.data.train.name(),
                self.data.train.image_shape(),
                self.data.train.classes()
            )));
        }
        if self.data.transform.channels() != self.data.train.channels() {
            return Err(Error::Config(format!(
                "normalization has {} channels, dataset has {}",
                self.data.transform.channels(),
                self.data.train.channels()
            )));
        }
        Ok(())
    }

    /// Indices of the client's batch for `round`.
    fn batch_indices(&self, client: usize, round: usize) -> Vec<usize> {
        let shard = &self.data.shards[client].indices;
        match self.config.batch_size {
            Some(b) if b < shard.len() => {
                let mut r = Streams::new(self.config.seed).rng(rng::BATCH, &[client as u64, round as u64]);
                let mut picks = index::sample(&mut r, shard.len(), b).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| shard[i]).collect()
            }
            _ => shard.clone(),
        }
    }

    /// The gradient a client uploads for `(x, y)` under the configured
    /// defense, and the perturbed images when the defense perturbs data.
    fn defended_gradient(
        &self,
        theta: &ParameterSet,
        x: &Tensor,
        labels: &[usize],
        client: usize,
        round: usize,
        slot: usize,
    ) -> Result<(GradientVector, Option<Tensor>, Option<Tensor>)> {
        let transform = self.data.transform;
        let seed = self.config.seed;
        match &self.config.defense {
            Defense::None => Ok((perturb::client_gradient(theta, x, labels, transform)?.1, None, None)),
            Defense::Fedem(cfg) => {
                let key = DeltaKey::new(seed, client, round).with_slot(slot);
                let p = perturb::generate_perturbation(theta, x, labels, transform, cfg, key)?;
                let g = perturb::client_gradient(theta, &p.images, labels, transform)?.1;
                Ok((g, Some(p.images), Some(p.state.delta)))
            }
            other => {
                let spec = other.noise_spec().unwrap();
                let g = perturb::client_gradient(theta, x, labels, transform)?.1;
                let (name, path) = if slot == 0 {
                    (rng::NOISE, vec![client as u64, round as u64])
                } else {
                    (rng::PROBE_NOISE, vec![client as u64, round as u64, slot as u64])
                };
                let mut r = Streams::new(seed).rng(name, &path);
                Ok((ldp::privatize(&g, &spec, &mut r), None, None))
            }
        }
    }

    fn client_upload(&self, theta: &ParameterSet, client: usize, round: usize, record: bool) -> Result<ClientUpload> {
        let ds = self.data.train;
        let idx = self.batch_indices(client, round);
        let x = ds.images().select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
        let (gradient, _, delta) = self.defended_gradient(theta, &x, &y, client, round, 0)?;

        let mut probes = Vec::new();
        if record {
            let shard = &self.data.shards[client].indices;
            let b = self.config.probes.batch_size;
            for p in 0..self.config.probes.per_client {
                let Some(pidx) = shard.get(p * b..(p + 1) * b) else { break };
                let images = ds.images().select_rows(pidx);
                let labels: Vec<usize> = pidx.iter().map(|&i| ds.labels()[i]).collect();
                let (gradient, perturbed, _) = self.defended_gradient(theta, &images, &labels, client, round, p + 1)?;
                probes.push(Probe {
                    images,
                    labels,
                    gradient,
                    perturbed,
                });
            }
        }
        Ok(ClientUpload {
            client,
            weight: self.data.shards[client].size() as f64,
            gradient,
            delta: if record && self.config.dump_delta { delta } else { None },
            probes,
        })
    }

    fn evaluate(&self, theta: &ParameterSet) -> Result<(f64, f64)> {
        let t = self.data.transform;
        Ok((metrics::accuracy(theta, self.data.val, t)?, metrics::accuracy(theta, self.data.test, t)?))
    }

    fn round(&self, theta: &ParameterSet, round: usize, record: bool) -> Result<RoundOutput> {
        let start = Instant::now();
        let cfg = self.config;
        let selected = select_clients(cfg.clients, cfg.clients_per_round, round, cfg.seed);
        let uploads = selected
            .iter()
            .map(|&k| {
                self.client_upload(theta, k, round, record).map_err(|e| Error::Client {
                    client: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let grads: Vec<GradientVector> = uploads.iter().map(|u| u.gradient.clone()).collect();
        let weights: Vec<f64> = uploads.iter().map(|u| u.weight).collect();
        let global = aggregate(&grads, &weights)?;
        let next = theta.step(&global, cfg.server_lr)?;
        let (val_acc, test_acc) = self.evaluate(&next)?;
        let elapsed_ms = if cfg.record_timing { start.elapsed().as_millis() as u64 } else { 0 };
        Ok(RoundOutput {
            theta: next,
            record: RoundRecord {
                round,
                selected,
                grad_norms: grads.iter().map(GradientVector::l2_norm).collect(),
                val_acc,
                test_acc,
                elapsed_ms,
            },
            uploads,
        })
    }

    /// One FedSGD round starting from `theta`. `round` is 1-based.
    pub fn run_round(&self, theta: &ParameterSet, round: usize) -> Result<(ParameterSet, RoundRecord)> {
        self.check_model(theta)?;
        let out = self.round(theta, round, false)?;
        Ok((out.theta, out.record))
    }

    /// Runs up to `rounds` rounds with early stopping on validation
    /// accuracy.
    pub fn train(&self, init: ParameterSet) -> Result<TrainOutcome> {
        self.check_model(&init)?;
        let cfg = self.config;
        let mut theta = init;
        let mut best = theta.clone();
        let mut best_val = f64::NEG_INFINITY;
        let mut best_round = None;
        let mut stale = 0;
        let mut records = Vec::new();
        let mut artifacts = Vec::new();
        let mut last_uploads: Option<RoundArtifact> = None;
        let mut stop = StopReason::Completed;

        for round in 1..=cfg.rounds {
            let keep = cfg.record_rounds.contains(&round);
            let out = self.round(&theta, round, keep || cfg.record_final)?;
            log::debug!(
                "round {round}: val {:.4} test {:.4} |g| {:.4e}",
                out.record.val_acc,
                out.record.test_acc,
                out.record.grad_norm_mean()
            );
            let artifact = RoundArtifact {
                round,
                theta: theta.clone(),
                uploads: out.uploads,
            };
            if keep {
                artifacts.push(artifact);
                last_uploads = None;
            } else if cfg.record_final {
                last_uploads = Some(artifact);
            }
            if out.record.val_acc > best_val {
                best_val = out.record.val_acc;
                best = out.theta.clone();
                best_round = Some(round);
                stale = 0;
            } else {
                stale += 1;
            }
            records.push(out.record);
            theta = out.theta;
            if stale >= cfg.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
        artifacts.extend(last_uploads);
        Ok(TrainOutcome {
            best,
            best_round,
            last: theta,
            records,
            stop,
            artifacts,
        })
    }
}
