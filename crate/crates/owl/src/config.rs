//! Run settings: built-in defaults, then a TOML file, then flags.

use std::path::Path;

use owl_core::data::DEFAULT_UNKNOWN_IN_TRAIN;
use owl_core::fusion::FusionKind;
use owl_core::graph::GraphKind;
use owl_core::prox::ProxKind;
use owl_core::train::{DictionaryInit, ModelSpec, Optimizer, TrainConfig};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Every setting a run accepts. Absent fields fall through to the next
/// layer; the same struct backs the TOML file and the flag set.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, clap::Args)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Training and initialization seed (defaults to the manifest seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the known-class loss [default: 1]
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the unknown-class loss [default: 1]
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// adam or sgd [default: adam]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Unrolled layers [default: 3]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Graph damping factor in [0, 1) [default: 0.5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sparsity weight setting the initial thresholds [default: 0.01]
    #[arg(long)]
    pub beta: Option<f64>,
    /// soft-threshold or row-group-threshold [default: soft-threshold]
    #[arg(long)]
    pub prox: Option<String>,
    /// weighted-average, auto-weight, attention or trusted [default: weighted-average]
    #[arg(long)]
    pub fusion: Option<String>,
    /// none, laplacian or hypergraph [default: laplacian]
    #[arg(long)]
    pub graph: Option<String>,
    /// Neighbors per sample for feature graphs [default: 10, or the manifest's]
    #[arg(long)]
    pub knn_k: Option<usize>,
    /// class-means or random [default: class-means]
    #[arg(long)]
    pub dictionary: Option<String>,
    /// Share of each unknown class placed in the unlabeled pool [default: 0.2]
    #[arg(long)]
    pub unknown_in_train_frac: Option<f64>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub unknown_in_train: f64,
}

impl Settings {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Fields set here win over `lower`.
    pub fn over(self, lower: Settings) -> Settings {
        Settings {
            seed: self.seed.or(lower.seed),
            epochs: self.epochs.or(lower.epochs),
            lr: self.lr.or(lower.lr),
            lambda1: self.lambda1.or(lower.lambda1),
            lambda2: self.lambda2.or(lower.lambda2),
            optimizer: self.optimizer.or(lower.optimizer),
            layers: self.layers.or(lower.layers),
            alpha: self.alpha.or(lower.alpha),
            beta: self.beta.or(lower.beta),
            prox: self.prox.or(lower.prox),
            fusion: self.fusion.or(lower.fusion),
            graph: self.graph.or(lower.graph),
            knn_k: self.knn_k.or(lower.knn_k),
            dictionary: self.dictionary.or(lower.dictionary),
            unknown_in_train_frac: self.unknown_in_train_frac.or(lower.unknown_in_train_frac),
        }
    }

    /// Flags over the optional config file over the built-in defaults.
    pub fn merged(flags: &Settings, config: Option<&Path>) -> Result<Settings> {
        let file = match config {
            Some(p) => Settings::from_toml_file(p)?,
            None => Settings::default(),
        };
        Ok(flags.clone().over(file))
    }

    pub fn resolve(&self, default_seed: u64, default_knn_k: Option<usize>) -> Result<Resolved> {
        let d_train = TrainConfig::default();
        let d_model = ModelSpec::default();
        let parse = |key: &str, v: &Option<String>, f: &dyn Fn(&str) -> bool| -> Result<()> {
            match v {
                Some(s) if !f(s) => Err(Error::config(format!("{key}: unknown value {s:?}"))),
                _ => Ok(()),
            }
        };
        parse("optimizer", &self.optimizer, &|s| {
            matches!(s, "adam" | "sgd")
        })?;
        parse("prox", &self.prox, &|s| {
            ProxKind::from_name(s).is_some_and(|k| k != ProxKind::Identity)
        })?;
        parse("fusion", &self.fusion, &|s| {
            FusionKind::from_name(s).is_some()
        })?;
        parse("graph", &self.graph, &|s| GraphKind::from_name(s).is_some())?;
        parse("dictionary", &self.dictionary, &|s| {
            DictionaryInit::from_name(s).is_some()
        })?;

        let train = TrainConfig {
            epochs: self.epochs.unwrap_or(d_train.epochs),
            lr: self.lr.unwrap_or(d_train.lr),
            lambda1: self.lambda1.unwrap_or(d_train.lambda1),
            lambda2: self.lambda2.unwrap_or(d_train.lambda2),
            seed: self.seed.unwrap_or(default_seed),
            optimizer: match self.optimizer.as_deref() {
                Some("sgd") => Optimizer::Sgd,
                _ => Optimizer::ADAM,
            },
        };
        let model = ModelSpec {
            layers: self.layers.unwrap_or(d_model.layers),
            prox_kind: self
                .prox
                .as_deref()
                .and_then(ProxKind::from_name)
                .unwrap_or(d_model.prox_kind),
            alpha: self.alpha.unwrap_or(d_model.alpha),
            beta: self.beta.unwrap_or(d_model.beta),
            graph: self
                .graph
                .as_deref()
                .and_then(GraphKind::from_name)
                .unwrap_or(d_model.graph),
            knn_k: self.knn_k.or(default_knn_k).unwrap_or(d_model.knn_k),
            fusion: self
                .fusion
                .as_deref()
                .and_then(FusionKind::from_name)
                .unwrap_or(d_model.fusion),
            dictionary: self
                .dictionary
                .as_deref()
                .and_then(DictionaryInit::from_name)
                .unwrap_or(d_model.dictionary),
        };
        let unknown_in_train = self
            .unknown_in_train_frac
            .unwrap_or(DEFAULT_UNKNOWN_IN_TRAIN);

        let bad = |key: &str, why: &str| Err(Error::config(format!("{key}: {why}")));
        if train.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(train.lr > 0.0 && train.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(train.lambda1 >= 0.0) || !(train.lambda2 >= 0.0) {
            return bad("lambda", "loss weights must be non-negative");
        }
        if model.layers == 0 {
            return bad("layers", "must be at least 1");
        }
        if !(0.0..1.0).contains(&model.alpha) {
            return bad("alpha", "must lie in [0, 1)");
        }
        if !(model.beta >= 0.0) {
            return bad("beta", "must be non-negative");
        }
        if model.knn_k == 0 {
            return bad("knn-k", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&unknown_in_train) {
            return bad("unknown-in-train-frac", "must lie in [0, 1]");
        }
        Ok(Resolved {
            train,
            model,
            unknown_in_train,
        })
    }
}
