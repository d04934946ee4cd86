use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetSource, ExperimentManifest};
use crate::attack::{attack_round, ProbeAttack};
use crate::blob;
use crate::data::partition_iid;
use crate::error::{Error, Result};
use crate::federation::{ClientUpload, FederatedData, Federation, Probe, RoundArtifact, RoundRecord, StopReason};
use crate::metrics::{self, format_metric, MetricReport};
use crate::model::{GradientVector, ParameterSet};
use crate::tensor::Tensor;

pub const STATUS_FILE: &str = "status.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const MANIFEST_TOML: &str = "manifest.toml";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const TRAINING_JSON: &str = "training.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ATTACK_CSV: &str = "attack.csv";
pub const TRACES_CSV: &str = "traces.csv";
pub const FINAL_MODEL: &str = "model/final.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    DatasetError,
    ConfigError,
    RuntimeError,
}

impl RunStatus {
    pub fn of(err: &Error) -> Self {
        match err {
            Error::Data(_) => RunStatus::DatasetError,
            Error::Config(_) => RunStatus::ConfigError,
            Error::Client { source, .. } => RunStatus::of(source),
            _ => RunStatus::RuntimeError,
        }
    }

    /// Process exit code for this status.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::DatasetError | RunStatus::ConfigError => 1,
            RunStatus::RuntimeError => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusFile {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Outcome of training, kept next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub rounds_run: usize,
    pub best_round: Option<usize>,
    pub stop: StopReason,
    pub test_acc: f64,
    pub val_acc: f64,
    pub stored_rounds: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub training: TrainingSummary,
    pub report: MetricReport,
}

fn io(ctx: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{ctx} {}", path.display());
    move |e| Error::io(context, e)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io("creating", path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io("writing", path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_status(dir: &Path, status: RunStatus, message: Option<String>) -> Result<()> {
    mkdir(dir)?;
    write_json(&dir.join(STATUS_FILE), &StatusFile { status, message })
}

pub fn read_status(dir: &Path) -> Result<StatusFile> {
    read_json(&dir.join(STATUS_FILE))
}

fn round_dir(dir: &Path, round: usize) -> PathBuf {
    dir.join("rounds").join(format!("r{round:04}"))
}

#[derive(Serialize, Deserialize)]
struct StoredProbe {
    labels: Vec<usize>,
    perturbed: bool,
}

#[derive(Serialize, Deserialize)]
struct StoredClient {
    client: usize,
    weight: f64,
    delta: bool,
    probes: Vec<StoredProbe>,
}

#[derive(Serialize, Deserialize)]
struct StoredRound {
    round: usize,
    clients: Vec<StoredClient>,
}

fn save_round(dir: &Path, a: &RoundArtifact) -> Result<()> {
    let rd = round_dir(dir, a.round);
    mkdir(&rd)?;
    blob::save_checkpoint(&rd.join("theta.bin"), &a.theta)?;
    let mut clients = Vec::new();
    for u in &a.uploads {
        let cd = rd.join(format!("client-{}", u.client));
        mkdir(&cd)?;
        blob::save_tensors(&cd.join("gradient.bin"), u.gradient.tensors())?;
        if let Some(d) = &u.delta {
            blob::save_tensor(&cd.join("delta.bin"), d)?;
        }
        let mut probes = Vec::new();
        for (p, probe) in u.probes.iter().enumerate() {
            blob::save_tensor(&cd.join(format!("probe-{p}-images.bin")), &probe.images)?;
            blob::save_tensors(&cd.join(format!("probe-{p}-gradient.bin")), probe.gradient.tensors())?;
            if let Some(x) = &probe.perturbed {
                blob::save_tensor(&cd.join(format!("probe-{p}-perturbed.bin")), x)?;
            }
            probes.push(StoredProbe {
                labels: probe.labels.clone(),
                perturbed: probe.perturbed.is_some(),
            });
        }
        clients.push(StoredClient {
            client: u.client,
            weight: u.weight,
            delta: u.delta.is_some(),
            probes,
        });
    }
    write_json(
        &rd.join("round.json"),
        &StoredRound {
            round: a.round,
            clients,
        },
    )
}

/// Reads a stored round back from a run directory.
pub fn load_round(dir: &Path, round: usize) -> Result<RoundArtifact> {
    let rd = round_dir(dir, round);
    let index: StoredRound = read_json(&rd.join("round.json"))?;
    let theta = blob::load_checkpoint(&rd.join("theta.bin"))?;
    let mut uploads = Vec::new();
    for c in index.clients {
        let cd = rd.join(format!("client-{}", c.client));
        let gradient = GradientVector::new(blob::load_tensors(&cd.join("gradient.bin"))?);
        let delta = if c.delta { Some(blob::load_tensor(&cd.join("delta.bin"))?) } else { None };
        let mut probes = Vec::new();
        for (p, sp) in c.probes.into_iter().enumerate() {
            probes.push(Probe {
                images: blob::load_tensor(&cd.join(format!("probe-{p}-images.bin")))?,
                labels: sp.labels,
                gradient: GradientVector::new(blob::load_tensors(&cd.join(format!("probe-{p}-gradient.bin")))?),
                perturbed: if sp.perturbed {
                    Some(blob::load_tensor(&cd.join(format!("probe-{p}-perturbed.bin")))?)
                } else {
                    None
                },
            });
        }
        uploads.push(ClientUpload {
            client: c.client,
            weight: c.weight,
            gradient,
            delta,
            probes,
        });
    }
    Ok(RoundArtifact {
        round: index.round,
        theta,
        uploads,
    })
}

fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "val_acc", "test_acc", "grad_norm_mean", "elapsed_ms"])?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            format_metric(r.val_acc),
            format_metric(r.test_acc),
            format_metric(r.grad_norm_mean()),
            r.elapsed_ms.to_string(),
        ])?;
    }
    w.flush().map_err(io("writing", path))?;
    Ok(())
}

/// Copy of the manifest with data paths made absolute, so that the echo
/// reproduces the run from any working directory.
fn resolved(m: &ExperimentManifest) -> ExperimentManifest {
    let mut out = m.clone();
    let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { m.base_dir.join(p) };
    out.dataset.source = match &m.dataset.source {
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => DatasetSource::Idx {
            train_images: abs(train_images),
            train_labels: abs(train_labels),
            test_images: abs(test_images),
            test_labels: abs(test_labels),
        },
        DatasetSource::Cifar10 {
            train_batches,
            test_batches,
        } => DatasetSource::Cifar10 {
            train_batches: train_batches.iter().map(abs).collect(),
            test_batches: test_batches.iter().map(abs).collect(),
        },
        s @ DatasetSource::Synthetic { .. } => s.clone(),
    };
    out.output_dir = None;
    out
}

/// Trains, stores round artifacts, attacks and evaluates, writing
/// everything under `dir`. Failures are recorded in `status.json` before
/// being returned.
pub fn run_experiment(manifest: &ExperimentManifest, dir: &Path) -> Result<RunSummary> {
    let result = (|| {
        mkdir(dir)?;
        let _ = fs::remove_file(dir.join(STATUS_FILE));
        let echo = resolved(manifest);
        write_json(&dir.join(MANIFEST_JSON), &echo)?;
        write_text(&dir.join(MANIFEST_TOML), &echo.to_toml())?;
        let training = train_stage(manifest, dir)?;
        let report = attack_stage(dir, manifest.attack.rounds.as_deref())?;
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            training,
            report,
        })
    })();
    match &result {
        Ok(_) => write_status(dir, RunStatus::Ok, None)?,
        Err(e) => {
            let _ = write_status(dir, RunStatus::of(e), Some(e.to_string()));
        }
    }
    result
}

fn train_stage(manifest: &ExperimentManifest, dir: &Path) -> Result<TrainingSummary> {
    let data = manifest.load_data()?;
    let spec = manifest.model_spec()?;
    let cfg = manifest.federation_config();
    if data.train.len() < cfg.clients {
        return Err(Error::Config(format!(
            "{} training samples cannot cover {} clients",
            data.train.len(),
            cfg.clients
        )));
    }
    let shards = partition_iid(data.train.len(), cfg.clients, manifest.seed);
    let fed = Federation::new(
        &cfg,
        FederatedData {
            train: &data.train,
            val: &data.val,
            test: &data.test,
            shards: &shards,
            transform: &data.transform,
        },
    )?;
    let init = ParameterSet::init(&spec, manifest.seed);
    let outcome = fed.train(init)?;

    write_rounds_csv(&dir.join(ROUNDS_CSV), &outcome.records)?;
    mkdir(&dir.join("model"))?;
    blob::save_checkpoint(&dir.join(FINAL_MODEL), &outcome.best)?;
    for a in &outcome.artifacts {
        save_round(dir, a)?;
    }
    let (test_acc, val_acc) = match outcome.best_record() {
        Some(r) => (r.test_acc, r.val_acc),
        None => (
            metrics::accuracy(&outcome.best, &data.test, &data.transform)?,
            if data.val.is_empty() { f64::NAN } else { metrics::accuracy(&outcome.best, &data.val, &data.transform)? },
        ),
    };
    let summary = TrainingSummary {
        rounds_run: outcome.records.len(),
        best_round: outcome.best_round,
        stop: outcome.stop,
        test_acc,
        val_acc,
        stored_rounds: outcome.artifacts.iter().map(|a| a.round).collect(),
    };
    write_json(&dir.join(TRAINING_JSON), &summary)?;
    log::info!(
        "{}: {} rounds, best round {:?}, test acc {:.4}",
        manifest.name,
        summary.rounds_run,
        summary.best_round,
        summary.test_acc
    );
    Ok(summary)
}

/// Per-image attack results plus their averages.
struct AttackRows {
    mse: Vec<f64>,
    fea: Vec<f64>,
    ssim: Vec<f64>,
    psnr: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Attacks stored rounds of a finished training run and writes the attack
/// CSVs, image dumps and `metrics.csv`. `rounds` defaults to the last
/// stored round.
pub fn attack_stage(dir: &Path, rounds: Option<&[usize]>) -> Result<MetricReport> {
    let manifest: ExperimentManifest = read_json(&dir.join(MANIFEST_JSON))?;
    let training: TrainingSummary = read_json(&dir.join(TRAINING_JSON))?;
    let spec = manifest.model_spec()?;
    let final_theta = blob::load_checkpoint(&dir.join(FINAL_MODEL))?;
    let channels = spec.input_shape()[0];
    let transform = manifest.dataset.normalization.transform(channels);
    let image_shape = spec.input_shape().to_vec();
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    let targets: Vec<usize> = match rounds {
        Some(r) => r.to_vec(),
        None => training.stored_rounds.iter().max().into_iter().copied().collect(),
    };
    for r in &targets {
        if !training.stored_rounds.contains(r) {
            return Err(Error::MissingArtifact(format!("round {r} was not stored")));
        }
    }

    let cfg = &manifest.attack.config;
    let mut attacks: Vec<(ProbeAttack, Option<Tensor>)> = Vec::new();
    for &r in &targets {
        let artifact = load_round(dir, r)?;
        let perturbed: Vec<Option<Tensor>> = artifact
            .uploads
            .iter()
            .flat_map(|u| u.probes.iter().map(|p| p.perturbed.clone()))
            .collect();
        for (a, p) in attack_round(&artifact, cfg, manifest.seed)?.into_iter().zip(perturbed) {
            attacks.push((a, p));
        }
    }

    let images_dir = dir.join("images");
    if manifest.attack.dump_images && !attacks.is_empty() {
        mkdir(&images_dir)?;
    }
    let mut rows = AttackRows {
        mse: vec![],
        fea: vec![],
        ssim: vec![],
        psnr: vec![],
    };
    let attack_path = dir.join(ATTACK_CSV);
    let mut aw = csv::Writer::from_path(&attack_path)?;
    aw.write_record([
        "round",
        "client",
        "probe",
        "image",
        "label",
        "predicted_label",
        "matching_loss",
        "diverged_restarts",
        "mse",
        "fea_mse",
        "ssim",
        "psnr",
    ])?;
    let traces_path = dir.join(TRACES_CSV);
    let mut tw = csv::Writer::from_path(&traces_path)?;
    tw.write_record(["round", "client", "probe", "restart", "step", "loss"])?;

    for (a, perturbed) in &attacks {
        let recon = a.result.pixels(&transform, &image_shape)?;
        let b = a.labels.len();
        let batch_shape: Vec<usize> = std::iter::once(b).chain(image_shape.iter().copied()).collect();
        let original = a.original.reshape(&batch_shape)?;
        let perturbed = perturbed.as_ref().map(|p| p.reshape(&batch_shape)).transpose()?;
        for i in 0..b {
            let orig = original.select_rows(&[i]);
            let rec = recon.select_rows(&[i]);
            let mse = metrics::mse(&orig, &rec)?;
            let fea = metrics::feature_mse(&final_theta, &transform, &orig, &rec)?;
            let ssim = metrics::ssim(&orig, &rec)?;
            let psnr = metrics::psnr_from_mse(mse);
            let pred = metrics::argmax(&a.result.y_hat.data()[i * spec.classes()..(i + 1) * spec.classes()]);
            aw.write_record([
                a.round.to_string(),
                a.client.to_string(),
                a.probe.to_string(),
                i.to_string(),
                a.labels[i].to_string(),
                pred.to_string(),
                format_metric(a.result.loss),
                a.result.diverged.to_string(),
                format_metric(mse),
                format_metric(fea),
                format_metric(ssim),
                format_metric(psnr),
            ])?;
            rows.mse.push(mse);
            rows.fea.push(fea);
            rows.ssim.push(ssim);
            rows.psnr.push(psnr);
            if manifest.attack.dump_images {
                let stem = if b == 1 {
                    format!("r{:04}-c{}-p{}", a.round, a.client, a.probe)
                } else {
                    format!("r{:04}-c{}-p{}-i{i}", a.round, a.client, a.probe)
                };
                blob::save_pnm(&images_dir.join(format!("{stem}-original.{ext}")), &orig)?;
                blob::save_pnm(&images_dir.join(format!("{stem}-reconstruction.{ext}")), &rec)?;
                if let Some(p) = &perturbed {
                    blob::save_pnm(&images_dir.join(format!("{stem}-perturbed.{ext}")), &p.select_rows(&[i]))?;
                }
            }
        }
        for (restart, trace) in a.result.traces.iter().enumerate() {
            for (step, loss) in trace.iter().enumerate() {
                tw.write_record([
                    a.round.to_string(),
                    a.client.to_string(),
                    a.probe.to_string(),
                    restart.to_string(),
                    step.to_string(),
                    format_metric(*loss),
                ])?;
            }
        }
    }
    aw.flush().map_err(io("writing", &attack_path))?;
    tw.flush().map_err(io("writing", &traces_path))?;

    let report = MetricReport {
        test_acc: training.test_acc,
        val_acc: training.val_acc,
        test_mse: mean(&rows.mse),
        fea_mse: mean(&rows.fea),
        ssim: mean(&rows.ssim),
        psnr: mean(&rows.psnr),
    };
    let metrics_path = dir.join(METRICS_CSV);
    let mut mw = csv::Writer::from_path(&metrics_path)?;
    let mut header = vec!["dataset".to_string(), "method".to_string()];
    header.extend(MetricReport::HEADER.iter().map(|s| s.to_string()));
    mw.write_record(&header)?;
    let mut row = vec![manifest.dataset.name.clone(), manifest.defense.method().to_string()];
    row.extend(report.fields());
    mw.write_record(&row)?;
    mw.flush().map_err(io("writing", &metrics_path))?;
    Ok(report)
}

/// Re-runs the attack stage of a finished run and refreshes its status.
/// Asking for a round that was never stored is a configuration error and
/// leaves the run untouched.
pub fn attack_run(dir: &Path, rounds: Option<&[usize]>) -> Result<MetricReport> {
    let training: TrainingSummary = read_json(&dir.join(TRAINING_JSON))?;
    for r in rounds.unwrap_or_default() {
        if !training.stored_rounds.contains(r) {
            return Err(Error::Config(format!(
                "round {r} was not stored; stored rounds are {:?}",
                training.stored_rounds
            )));
        }
    }
    let result = attack_stage(dir, rounds);
    match &result {
        Ok(_) => write_status(dir, RunStatus::Ok, None)?,
        Err(e) => {
            let _ = write_status(dir, RunStatus::of(e), Some(e.to_string()));
        }
    }
    result
}
