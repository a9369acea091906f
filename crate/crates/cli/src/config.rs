//! Flat experiment configuration: one JSON object holding the federation
//! settings, the dataset recipe, and the output directory.
//!
//! The file format is deliberately flat with explicit keys so a config is
//! greppable and diffable; unknown keys are rejected to catch typos that
//! would otherwise silently change an experiment.

use std::path::{Path, PathBuf};

use orchestra_core::datasets::{gen_mixture, load_cifar_binary, Dataset};
use orchestra_core::protocol::{FederationConfig, Method};
use orchestra_core::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_tau_assign() -> f64 {
    0.1
}
fn default_tau_unif() -> f64 {
    0.2
}
fn default_mem_size() -> usize {
    128
}
fn default_eval_every() -> usize {
    5
}
fn default_hidden_dims() -> Vec<usize> {
    vec![64, 64]
}
fn default_rep_dim() -> usize {
    16
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_jitter_sigma() -> f64 {
    0.1
}
fn default_scale_lo() -> f64 {
    0.9
}
fn default_scale_hi() -> f64 {
    1.1
}
fn default_probe_epochs() -> usize {
    500
}
fn default_probe_lr() -> f64 {
    0.5
}
fn default_classes() -> usize {
    4
}
fn default_input_dim() -> usize {
    16
}
fn default_per_class() -> usize {
    512
}
fn default_class_sep() -> f64 {
    3.0
}
fn default_within_std() -> f64 {
    1.5
}
fn default_outdir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything one experiment needs: federation settings plus the dataset
/// recipe and the output root. Keys mirror the federation field names
/// one-for-one so command-line overrides map directly onto file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema: f64,
    pub global_clusters: usize,
    pub local_clusters: usize,
    #[serde(default = "default_tau_assign")]
    pub tau_assign: f64,
    #[serde(default = "default_tau_unif")]
    pub tau_unif: f64,
    pub alpha: f64,
    pub seed: u64,
    pub method: Method,
    #[serde(default = "default_mem_size")]
    pub mem_size: usize,
    #[serde(default)]
    pub weighted_avg: bool,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_rep_dim")]
    pub rep_dim: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_jitter_sigma")]
    pub jitter_sigma: f64,
    #[serde(default = "default_scale_lo")]
    pub scale_lo: f64,
    #[serde(default = "default_scale_hi")]
    pub scale_hi: f64,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub probe_lr: f64,
    #[serde(default)]
    pub knn_k: Option<usize>,
    /// Number of mixture classes in the synthetic dataset.
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Input feature dimension; must be a positive multiple of 4.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Samples generated per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    /// Radius of the sphere the class means are drawn on.
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    /// Within-class standard deviation per feature.
    #[serde(default = "default_within_std")]
    pub within_std: f64,
    /// Binary image file to load instead of the synthetic mixture.
    #[serde(default)]
    pub cifar_path: Option<PathBuf>,
    /// Root directory run outputs are written under.
    #[serde(default = "default_outdir")]
    pub outdir: PathBuf,
}

/// Command-line values that replace file keys one-for-one.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub participation: Option<f64>,
    pub global_clusters: Option<usize>,
    pub local_clusters: Option<usize>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub local_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub outdir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses `path` and applies `over`; the result is validated.
    pub fn load(path: &Path, over: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config from its JSON text without applying overrides.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn apply(&mut self, over: &Overrides) {
        macro_rules! put {
            ($field:ident) => {
                if let Some(v) = &over.$field {
                    self.$field = v.clone();
                }
            };
        }
        put!(alpha);
        put!(clients);
        put!(rounds);
        put!(participation);
        put!(global_clusters);
        put!(local_clusters);
        put!(method);
        put!(seed);
        put!(lr);
        put!(local_epochs);
        put!(batch_size);
        put!(outdir);
    }

    /// The federation settings embedded in this experiment.
    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            clients: self.clients,
            participation: self.participation,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            ema: self.ema,
            global_clusters: self.global_clusters,
            local_clusters: self.local_clusters,
            tau_assign: self.tau_assign,
            tau_unif: self.tau_unif,
            alpha: self.alpha,
            seed: self.seed,
            method: self.method,
            mem_size: self.mem_size,
            weighted_avg: self.weighted_avg,
            eval_every: self.eval_every,
            hidden_dims: self.hidden_dims.clone(),
            rep_dim: self.rep_dim,
            init_scale: self.init_scale,
            jitter_sigma: self.jitter_sigma,
            scale_lo: self.scale_lo,
            scale_hi: self.scale_hi,
            probe_epochs: self.probe_epochs,
            probe_lr: self.probe_lr,
            knn_k: self.knn_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.federation().validate()?;
        if self.cifar_path.is_none() {
            if self.classes < 2 {
                return Err(Error::Config(
                    "synthetic dataset needs at least 2 classes for the probes".into(),
                ));
            }
            if self.per_class == 0 {
                return Err(Error::Config("per_class must be at least 1".into()));
            }
            if self.input_dim == 0 || self.input_dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "input_dim {} must be a positive multiple of 4",
                    self.input_dim
                )));
            }
            if !self.class_sep.is_finite() || self.class_sep < 0.0 {
                return Err(Error::Config(format!(
                    "class_sep {} must be finite and >= 0",
                    self.class_sep
                )));
            }
            if !self.within_std.is_finite() || self.within_std < 0.0 {
                return Err(Error::Config(format!(
                    "within_std {} must be finite and >= 0",
                    self.within_std
                )));
            }
        }
        Ok(())
    }

    /// Builds or loads the dataset this experiment trains on.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.cifar_path {
            Some(path) => load_cifar_binary(path),
            None => gen_mixture(
                self.classes,
                self.input_dim,
                self.per_class,
                self.class_sep,
                self.within_std,
                self.seed,
            ),
        }
    }

    /// Number of classes the probes score against.
    pub fn n_classes(&self) -> usize {
        match self.cifar_path {
            Some(_) => orchestra_core::datasets::CIFAR_CLASSES,
            None => self.classes,
        }
    }

    /// Non-fatal issues worth flagging before a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let threshold = 4 * self.n_classes() + 2;
        if self.global_clusters <= threshold {
            out.push(format!(
                "global_clusters = {} is at most 4*classes+2 = {}; the cluster-separation \
                 guarantee only binds above that count",
                self.global_clusters, threshold
            ));
        }
        if self.rounds > 0 && self.eval_every > self.rounds {
            out.push(format!(
                "eval_every = {} exceeds rounds = {}; probes run on the final round only",
                self.eval_every, self.rounds
            ));
        }
        out
    }

    /// Stable 16-hex-digit digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

/// 64-bit FNV-1a; tiny, dependency-free, and stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
