//! Experiment configuration: a flat JSON object. `dataset` and `variant` are
//! required; every other key has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autoencoder::NstTrainConfig;
use crate::error::{Error, Result};
use crate::nn::ClassifierSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One autoencoder per task.
    Eec,
    /// One autoencoder shared and retrained across tasks.
    Eecs,
    /// New-task data only, no replay.
    FinetuneBaseline,
    /// Replays a fixed number of stored real images per old class.
    ExemplarBaseline,
}

impl Variant {
    pub fn uses_autoencoders(self) -> bool {
        matches!(self, Variant::Eec | Variant::Eecs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub variant: Variant,
    /// Directory holding the four uncompressed MNIST IDX files.
    pub mnist_dir: PathBuf,
    /// Keep at most this many training images per class (desk-scale runs).
    pub train_limit_per_class: Option<usize>,
    pub test_limit_per_class: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_image_size: usize,
    pub synthetic_noise: f64,
    pub classes_per_increment: usize,
    pub shuffle_classes: bool,
    pub lambda: f64,
    pub gamma_r: f64,
    pub gamma_p: f64,
    /// Memory budget in units; 0 is unlimited.
    pub budget: usize,
    pub classifier_epochs: usize,
    pub autoencoder_epochs: usize,
    pub classifier_lr: f64,
    pub autoencoder_lr: f64,
    pub classifier_batch_size: usize,
    pub autoencoder_batch_size: usize,
    pub classifier_width: usize,
    pub feature_layer: usize,
    pub oversample_factor: usize,
    pub retry_oversample_factor: usize,
    /// Continue from the previous increment's classifier instead of
    /// reinitialising it.
    pub warm_start: bool,
    pub exemplars_per_class: usize,
    pub seed: u64,
    pub repeats: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            variant: Variant::Eec,
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit_per_class: None,
            test_limit_per_class: None,
            synthetic_classes: 6,
            synthetic_per_class: 200,
            synthetic_image_size: 32,
            synthetic_noise: 0.1,
            classes_per_increment: 1,
            shuffle_classes: true,
            lambda: 0.5,
            gamma_r: 0.2,
            gamma_p: 0.4,
            budget: 0,
            classifier_epochs: 20,
            autoencoder_epochs: 50,
            classifier_lr: 1e-3,
            autoencoder_lr: 1e-3,
            classifier_batch_size: 64,
            autoencoder_batch_size: 64,
            classifier_width: 32,
            feature_layer: ClassifierSpec::CONV_LAYERS,
            oversample_factor: 5,
            retry_oversample_factor: 10,
            warm_start: true,
            exemplars_per_class: 20,
            seed: 0,
            repeats: 1,
            output_dir: None,
        }
    }
}

const REQUIRED: [&str; 2] = ["dataset", "variant"];

fn known_keys() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("config serializes to an object"),
    }
}

fn unknown_key(key: &str, known: &[String]) -> Error {
    let nearest = known
        .iter()
        .map(|k| (strsim::damerau_levenshtein(key, k), k))
        .min()
        .filter(|(d, k)| *d <= 2.max(k.len() / 3));
    let message = match nearest {
        Some((_, k)) => format!("unknown key; did you mean `{k}`?"),
        None => "unknown key".to_string(),
    };
    Error::config(key, message)
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let Value::Object(user) = value else {
            return Err(Error::config("<document>", "expected a JSON object"));
        };
        let known = known_keys();
        if let Some(k) = user.keys().find(|k| !known.contains(k)) {
            return Err(unknown_key(k, &known));
        }
        if let Some(k) = REQUIRED.iter().find(|k| !user.contains_key(**k)) {
            return Err(Error::config(k, "missing required key"));
        }
        let Value::Object(defaults) = serde_json::to_value(Self::default()).expect("serializable") else {
            unreachable!()
        };
        let merge = |only: Option<&str>| -> Value {
            let mut m: Map<String, Value> = defaults.clone();
            for (k, v) in &user {
                if only.map_or(true, |o| o == k) {
                    m.insert(k.clone(), v.clone());
                }
            }
            Value::Object(m)
        };
        let config: Self = match serde_json::from_value(merge(None)) {
            Ok(c) => c,
            Err(e) => {
                // find the offending key by applying user keys one at a time
                let field = user
                    .keys()
                    .find(|k| serde_json::from_value::<Self>(merge(Some(k))).is_err())
                    .cloned()
                    .unwrap_or_else(|| "<document>".into());
                return Err(Error::config(&field, e.to_string()));
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} is outside [0, 1]")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("gamma_r", self.gamma_r)?;
        unit("gamma_p", self.gamma_p)?;
        for (field, v) in [
            ("classifier_lr", self.classifier_lr),
            ("autoencoder_lr", self.autoencoder_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("classes_per_increment", self.classes_per_increment),
            ("classifier_epochs", self.classifier_epochs),
            ("autoencoder_epochs", self.autoencoder_epochs),
            ("classifier_batch_size", self.classifier_batch_size),
            ("autoencoder_batch_size", self.autoencoder_batch_size),
            ("classifier_width", self.classifier_width),
            ("oversample_factor", self.oversample_factor),
            ("synthetic_per_class", self.synthetic_per_class),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(1..=10).contains(&self.synthetic_classes) {
            return Err(Error::config("synthetic_classes", "must be in 1..=10"));
        }
        if ![16, 32].contains(&self.synthetic_image_size) {
            return Err(Error::config("synthetic_image_size", "must be 16 or 32"));
        }
        if !(self.synthetic_noise.is_finite() && self.synthetic_noise >= 0.0) {
            return Err(Error::config("synthetic_noise", "must be >= 0"));
        }
        for (field, v) in [
            ("train_limit_per_class", self.train_limit_per_class),
            ("test_limit_per_class", self.test_limit_per_class),
        ] {
            if v == Some(0) {
                return Err(Error::config(field, "must be positive when set"));
            }
        }
        if !(1..=ClassifierSpec::CONV_LAYERS).contains(&self.feature_layer) {
            return Err(Error::config("feature_layer", "must be in 1..=3"));
        }
        if self.variant == Variant::ExemplarBaseline && self.exemplars_per_class == 0 {
            return Err(Error::config("exemplars_per_class", "must be positive for the exemplar baseline"));
        }
        Ok(())
    }

    pub fn nst(&self) -> NstTrainConfig {
        NstTrainConfig {
            lambda: self.lambda,
            epochs: self.autoencoder_epochs,
            batch_size: self.autoencoder_batch_size,
            learning_rate: self.autoencoder_lr,
            feature_layer: self.feature_layer,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json_str(&text)
}
