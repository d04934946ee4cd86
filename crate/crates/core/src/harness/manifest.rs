use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{load_cifar10, load_idx, synth_blobs, Dataset, NormalizationTransform, Split};
use crate::error::{Error, Result};
use crate::federation::{Defense, FederationConfig, ProbeConfig};
use crate::model::ModelSpec;

/// Environment variable the CLI reads to relocate every run directory.
pub const OUTPUT_ROOT_ENV: &str = "FEDEM_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Mnist,
    FashionMnist,
    Cifar10,
    Identity,
}

impl Normalization {
    pub fn transform(&self, channels: usize) -> NormalizationTransform {
        match self {
            Normalization::Mnist => NormalizationTransform::mnist(),
            Normalization::FashionMnist => NormalizationTransform::fashion_mnist(),
            Normalization::Cifar10 => NormalizationTransform::cifar10(),
            Normalization::Identity => NormalizationTransform::identity(channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train_batches: Vec<PathBuf>,
        test_batches: Vec<PathBuf>,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        dims: usize,
        test_per_class: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
    pub normalization: Normalization,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Use only the first `train_limit` training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub spec: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub rounds: usize,
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub server_lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_record_rounds")]
    pub record_rounds: Vec<usize>,
    #[serde(default = "default_true")]
    pub record_final: bool,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub dump_delta: bool,
    #[serde(default)]
    pub record_timing: bool,
}

fn default_patience() -> usize {
    30
}

fn default_record_rounds() -> Vec<usize> {
    vec![1]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(flatten)]
    pub config: AttackConfig,
    /// Stored rounds to attack; the last stored round when absent.
    #[serde(default)]
    pub rounds: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub dump_images: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            config: AttackConfig::default(),
            rounds: None,
            dump_images: true,
        }
    }
}

/// One experiment: data, model, federation, defense and attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub federation: FederationSection,
    pub defense: Defense,
    #[serde(default)]
    pub attack: AttackSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Train/validation/test splits plus the transform a run uses.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub transform: NormalizationTransform,
}

impl ExperimentManifest {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.model.spec.parse()
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            clients: f.clients,
            rounds: f.rounds,
            clients_per_round: f.clients_per_round.unwrap_or(f.clients),
            server_lr: f.server_lr,
            defense: self.defense.clone(),
            patience: f.patience,
            seed: self.seed,
            batch_size: f.batch_size,
            record_rounds: f.record_rounds.clone(),
            record_final: f.record_final,
            probes: f.probes.clone(),
            dump_delta: f.dump_delta,
            record_timing: f.record_timing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} must be a plain file name", self.name)));
        }
        let v = self.dataset.val_fraction;
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {v}")));
        }
        self.model_spec()?;
        self.federation_config().validate()?;
        self.attack.config.validate()?;
        if self.attack.config.batch_size != self.federation.probes.batch_size {
            return Err(Error::Config(format!(
                "attack.batch_size ({}) must equal federation.probes.batch_size ({})",
                self.attack.config.batch_size, self.federation.probes.batch_size
            )));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Run directory: `<output_root>/<name>` when a root is given (the CLI
    /// takes it from `FEDEM_OUTPUT_ROOT`), otherwise `output_dir`, by
    /// default `runs/<name>` next to the manifest.
    pub fn run_dir(&self, output_root: Option<&Path>) -> PathBuf {
        match output_root {
            Some(root) => root.join(&self.name),
            None => match &self.output_dir {
                Some(d) => self.resolve(d),
                None => self.base_dir.join("runs").join(&self.name),
            },
        }
    }

    /// Loads the dataset, applies the limits and carves off the validation
    /// split (the tail of the training set, before partitioning).
    pub fn load_data(&self) -> Result<LoadedData> {
        let d = &self.dataset;
        let (train, test) = match &d.source {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                load_idx(&self.resolve(train_images), &self.resolve(train_labels))?,
                load_idx(&self.resolve(test_images), &self.resolve(test_labels))?,
            ),
            DatasetSource::Cifar10 {
                train_batches,
                test_batches,
            } => {
                let r = |v: &[PathBuf]| v.iter().map(|p| self.resolve(p)).collect::<Vec<_>>();
                (load_cifar10(&r(train_batches))?, load_cifar10(&r(test_batches))?)
            }
            DatasetSource::Synthetic {
                classes,
                per_class,
                dims,
                test_per_class,
            } => (
                synth_blobs(*classes, *per_class, *dims, self.seed)?,
                synth_blobs(*classes, *test_per_class, *dims, self.seed.wrapping_add(1))?,
            ),
        };
        let train = match d.train_limit {
            Some(n) => train.take(n),
            None => train,
        };
        let test = match d.test_limit {
            Some(n) => test.take(n),
            None => test,
        };
        let (train, val) = train.with_name(&d.name).split_validation(d.val_fraction)?;
        let transform = d.normalization.transform(train.channels());
        Ok(LoadedData {
            train,
            val,
            test: test.with_name(&d.name).with_split(Split::Test),
            transform,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
name = "blobs"
seed = 3

[dataset]
name = "blobs"
kind = "synthetic"
classes = 3
per_class = 20
dims = 4
test_per_class = 5
normalization = "identity"

[model]
spec = "mlp:4-6-3:sigmoid:1x1x4"

[federation]
clients = 2
rounds = 2
server_lr = 1.0

[defense]
method = "fedem"
rho_max = 8.0
rho_min = 1.0
step_size = 2.0
iterations = 2
theta_lr = 0.01
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let m = ExperimentManifest::from_toml(SAMPLE, Path::new("/tmp/x")).unwrap();
        assert_eq!(m.federation.patience, 30);
        assert_eq!(m.attack.config, AttackConfig::default());
        assert_eq!(m.federation_config().clients_per_round, 2);
        assert_eq!(m.defense.method(), "fedem");
        let data = m.load_data().unwrap();
        assert_eq!(data.train.len() + data.val.len(), 60);
        assert_eq!(data.val.len(), 6);
        assert_eq!(data.test.len(), 15);
    }

    #[test]
    fn round_trips_through_toml() {
        let m = ExperimentManifest::from_toml(SAMPLE, Path::new("/tmp/x")).unwrap();
        let again = ExperimentManifest::from_toml(&m.to_toml(), Path::new("/tmp/x")).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn rejects_unknown_and_missing_fields() {
        let extra = SAMPLE.replace("seed = 3", "seed = 3\nbogus = 1");
        assert!(ExperimentManifest::from_toml(&extra, Path::new(".")).is_err());
        let missing = SAMPLE.replace("iterations = 2\n", "");
        assert!(ExperimentManifest::from_toml(&missing, Path::new(".")).is_err());
        let bad_model = SAMPLE.replace("mlp:4-6-3", "mlp:5-6-3");
        assert!(ExperimentManifest::from_toml(&bad_model, Path::new(".")).is_err());
    }

    #[test]
    fn run_dir_prefers_output_root() {
        let m = ExperimentManifest::from_toml(SAMPLE, Path::new("/tmp/x")).unwrap();
        assert_eq!(m.run_dir(None), Path::new("/tmp/x/runs/blobs"));
        assert_eq!(m.run_dir(Some(Path::new("/out"))), Path::new("/out/blobs"));
    }

    #[test]
    fn missing_files_are_data_errors() {
        let idx = SAMPLE.replace(
            "kind = \"synthetic\"\nclasses = 3\nper_class = 20\ndims = 4\ntest_per_class = 5",
            "kind = \"idx\"\ntrain_images = \"a\"\ntrain_labels = \"b\"\ntest_images = \"c\"\ntest_labels = \"d\"",
        );
        let m = ExperimentManifest::from_toml(&idx, Path::new("/nonexistent")).unwrap();
        assert!(matches!(m.load_data(), Err(Error::Data(_))));
    }
}
