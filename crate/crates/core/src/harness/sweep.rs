use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::ExperimentManifest;
use super::run::{run_experiment, RunStatus};
use crate::error::{Error, Result};
use crate::federation::Defense;
use crate::metrics::{format_metric, MetricReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    PerturbIterations,
    RhoMin,
    Method,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PerturbIterations => "perturb-iterations",
            SweepAxis::RhoMin => "rho-min",
            SweepAxis::Method => "method",
        }
    }
}

/// A value on a sweep axis: an integer, a real, or a label. Radii may be
/// written relative to the outer radius as `"rho_max/8"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl AxisValue {
    pub fn label(&self) -> String {
        match self {
            AxisValue::Int(i) => i.to_string(),
            AxisValue::Float(f) => f.to_string(),
            AxisValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    /// Base manifest, relative to the sweep file.
    pub base: PathBuf,
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    /// Defense for each label of a method sweep.
    #[serde(default)]
    pub defenses: BTreeMap<String, Defense>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SweepSpec {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        if s.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn base_manifest(&self) -> Result<ExperimentManifest> {
        let p = if self.base.is_absolute() { self.base.clone() } else { self.base_dir.join(&self.base) };
        ExperimentManifest::load(&p)
    }

    /// `<output_root>/<name>` when a root is given, else `sweeps/<name>` next
    /// to the sweep file.
    pub fn sweep_dir(&self, output_root: Option<&Path>) -> PathBuf {
        match output_root {
            Some(root) => root.join(&self.name),
            None => self.base_dir.join("sweeps").join(&self.name),
        }
    }

    /// The manifest for one axis value.
    pub fn manifest_for(&self, base: &ExperimentManifest, value: &AxisValue) -> Result<ExperimentManifest> {
        let mut m = base.clone();
        let label = value.label();
        m.name = format!("{}-{}-{}", base.name, self.axis.name(), sanitize(&label));
        match self.axis {
            SweepAxis::PerturbIterations | SweepAxis::RhoMin => {
                let Defense::Fedem(cfg) = &mut m.defense else {
                    return Err(Error::Config(format!(
                        "a {} sweep needs a fedem base manifest, got {}",
                        self.axis.name(),
                        base.defense.method()
                    )));
                };
                if self.axis == SweepAxis::PerturbIterations {
                    cfg.iterations = match value {
                        AxisValue::Int(n) if *n >= 1 => *n as usize,
                        _ => return Err(Error::Config(format!("iteration count must be a positive integer, got {label}"))),
                    };
                } else {
                    cfg.rho_min = radius(value, cfg.rho_max)?;
                }
            }
            SweepAxis::Method => {
                let AxisValue::Text(name) = value else {
                    return Err(Error::Config(format!("method sweep values must be labels, got {label}")));
                };
                m.defense = self
                    .defenses
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no [defenses.{name}] table")))?;
            }
        }
        m.validate()?;
        Ok(m)
    }
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn radius(value: &AxisValue, rho_max: f64) -> Result<f64> {
    match value {
        AxisValue::Int(i) => Ok(*i as f64),
        AxisValue::Float(f) => Ok(*f),
        AxisValue::Text(s) => {
            let bad = || Error::Config(format!("cannot read radius {s:?}"));
            let rest = s.trim().strip_prefix("rho_max").ok_or_else(bad)?.trim();
            if rest.is_empty() {
                return Ok(rho_max);
            }
            let (op, num) = rest.split_at(1);
            let k: f64 = num.trim().parse().map_err(|_| bad())?;
            match op {
                "/" if k != 0.0 => Ok(rho_max / k),
                "*" => Ok(rho_max * k),
                _ => Err(bad()),
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: AxisValue,
    pub dir: PathBuf,
    pub method: String,
    pub dataset: String,
    pub status: RunStatus,
    pub report: Option<MetricReport>,
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";

/// Runs every value of the sweep into `dir/<value>` and writes the
/// combined table and the accuracy/MSE trade-off table. A failing value is
/// recorded and the sweep moves on.
pub fn run_sweep(spec: &SweepSpec, dir: &Path) -> Result<Vec<SweepRow>> {
    let base = spec.base_manifest()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut rows = Vec::new();
    for value in &spec.values {
        let run_dir = dir.join(sanitize(&value.label()));
        let (status, report, method) = match spec.manifest_for(&base, value) {
            Ok(m) => match run_experiment(&m, &run_dir) {
                Ok(s) => (RunStatus::Ok, Some(s.report), m.defense.method().to_string()),
                Err(e) => {
                    log::warn!("sweep value {}: {e}", value.label());
                    (RunStatus::of(&e), None, m.defense.method().to_string())
                }
            },
            Err(e) => {
                log::warn!("sweep value {}: {e}", value.label());
                (RunStatus::of(&e), None, String::from("unknown"))
            }
        };
        rows.push(SweepRow {
            value: value.clone(),
            dir: run_dir,
            method,
            dataset: base.dataset.name.clone(),
            status,
            report,
        });
    }
    write_sweep_tables(spec, &rows, dir)?;
    Ok(rows)
}

fn status_label(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::DatasetError => "dataset-error",
        RunStatus::ConfigError => "config-error",
        RunStatus::RuntimeError => "runtime-error",
    }
}

fn write_sweep_tables(spec: &SweepSpec, rows: &[SweepRow], dir: &Path) -> Result<()> {
    let na = || "NA".to_string();
    let path = dir.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["axis", "value", "dataset", "method", "status"];
    header.extend(MetricReport::HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            spec.axis.name().to_string(),
            r.value.label(),
            r.dataset.clone(),
            r.method.clone(),
            status_label(r.status).to_string(),
        ];
        match &r.report {
            Some(m) => rec.extend(m.fields()),
            None => rec.extend(std::iter::repeat_with(na).take(MetricReport::HEADER.len())),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let path = dir.join(TRADEOFF_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([spec.axis.name(), "test_acc", "test_mse"])?;
    for r in rows {
        let (acc, mse) = match &r.report {
            Some(m) => (format_metric(m.test_acc), format_metric(m.test_mse)),
            None => (na(), na()),
        };
        w.write_record([r.value.label(), acc, mse])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}
