//! Model checkpoints as self-describing JSON.
//!
//! Graph operators are not stored. They are rebuilt from the experiment
//! manifest and the recorded graph settings, then checked against the
//! stored per-modality fingerprints.

use std::path::Path;

use owl_core::data::OpenWorldDataset;
use owl_core::fusion::{Fusion, FusionKind};
use owl_core::graph::{GraphKind, GraphOperator};
use owl_core::openworld::AgentThreshold;
use owl_core::prox::ProxKind;
use owl_core::train::{self, ModelSpec, TrainConfig};
use owl_core::unroll::{LayerParams, UnrolledModel};
use owl_core::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "owl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub t_layers: usize,
    pub seed: u64,
    pub known_classes: Vec<usize>,
    pub split: SplitRecord,
    pub graph: GraphRecord,
    pub fusion: FusionRecord,
    pub modalities: Vec<ModalityRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub seed: u64,
    pub unknown_in_train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    /// "none", "laplacian" or "hypergraph".
    pub kind: String,
    pub knn_k: usize,
    /// "features" or "edge-list".
    pub source: String,
    /// Hex FNV-1a hash of each modality's operator bits, null without one.
    pub fingerprints: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionRecord {
    pub kind: String,
    /// Learnable parameters (auto-weight logits or the attention vector).
    pub params: Vec<f64>,
    /// Fixed weights of weighted-average fusion.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityRecord {
    pub k: usize,
    pub d_feat: usize,
    pub alpha: f64,
    pub prox: String,
    pub theta: Vec<f64>,
    pub f: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub a: f64,
    pub a_k: f64,
    pub a_u: f64,
    pub entropy_cutoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub epochs: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub optimizer: String,
    pub beta: f64,
    pub dictionary: String,
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn from_rows(what: &str, r: &[Vec<f64>]) -> Result<Mat> {
    Mat::from_rows(r).map_err(|e| Error::config(format!("checkpoint {what}: {e}")))
}

/// FNV-1a over the operator's matrix bits.
pub fn graph_fingerprint(g: &GraphOperator) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in g.matrix().data() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn from_model(
        model: &UnrolledModel,
        dataset: &OpenWorldDataset,
        split: SplitRecord,
        spec: &ModelSpec,
        agent: Option<&AgentThreshold>,
        training: Option<&TrainConfig>,
    ) -> Self {
        let graph_kind = if model.graphs.iter().all(Option::is_none) {
            GraphKind::None
        } else {
            spec.graph
        };
        let from_edges = dataset.graphs.iter().any(Option::is_some);
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            t_layers: model.t_layers,
            seed: model.seed,
            known_classes: dataset.known_classes.clone(),
            split,
            graph: GraphRecord {
                kind: graph_kind.name().into(),
                knn_k: spec.knn_k,
                source: if from_edges { "edge-list" } else { "features" }.into(),
                fingerprints: model
                    .graphs
                    .iter()
                    .map(|g| g.as_ref().map(graph_fingerprint))
                    .collect(),
            },
            fusion: FusionRecord {
                kind: model.fusion.kind().name().into(),
                params: model.fusion.params().to_vec(),
                weights: match &model.fusion {
                    Fusion::WeightedAverage(w) => w.clone(),
                    _ => Vec::new(),
                },
            },
            modalities: model
                .params
                .iter()
                .map(|p| ModalityRecord {
                    k: p.k(),
                    d_feat: p.d_feat(),
                    alpha: p.alpha,
                    prox: p.prox_kind.name().into(),
                    theta: p.theta.clone(),
                    f: rows(&p.f),
                    w: rows(&p.w),
                    u: rows(&p.u),
                })
                .collect(),
            agent: agent.map(|a| AgentRecord {
                a: a.a,
                a_k: a.a_k,
                a_u: a.a_u,
                entropy_cutoff: a.entropy_cutoff,
            }),
            training: training.map(|c| TrainingRecord {
                epochs: c.epochs,
                lr: c.lr,
                lambda1: c.lambda1,
                lambda2: c.lambda2,
                optimizer: c.optimizer.name().into(),
                beta: spec.beta,
                dictionary: spec.dictionary.name().into(),
            }),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if c.format != FORMAT {
            return Err(Error::config(format!(
                "{}: not an {FORMAT} file",
                path.display()
            )));
        }
        if c.version != VERSION {
            return Err(Error::config(format!(
                "{}: checkpoint version {} is not supported (expected {VERSION})",
                path.display(),
                c.version
            )));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        let mut w = crate::io::create(path)?;
        std::io::Write::write_all(&mut w, (text + "\n").as_bytes())
            .map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn graph_kind(&self) -> Result<GraphKind> {
        GraphKind::from_name(&self.graph.kind)
            .ok_or_else(|| Error::config(format!("checkpoint graph kind {:?}", self.graph.kind)))
    }

    pub fn agent(&self) -> Option<AgentThreshold> {
        self.agent.map(|a| AgentThreshold {
            a: a.a,
            a_k: a.a_k,
            a_u: a.a_u,
            entropy_cutoff: a.entropy_cutoff,
        })
    }

    /// Rebuilds the model against `dataset`, recomputing graphs and
    /// checking them against the stored fingerprints.
    pub fn to_model(&self, dataset: &OpenWorldDataset) -> Result<UnrolledModel> {
        if self.known_classes != dataset.known_classes {
            return Err(Error::config(
                "checkpoint and manifest disagree on the known classes",
            ));
        }
        if self.modalities.len() != dataset.modalities.len() {
            return Err(Error::config(format!(
                "checkpoint has {} modalities, the manifest {}",
                self.modalities.len(),
                dataset.modalities.len()
            )));
        }
        let spec = ModelSpec {
            graph: self.graph_kind()?,
            knn_k: self.graph.knn_k,
            ..ModelSpec::default()
        };
        let mut params = Vec::with_capacity(self.modalities.len());
        let mut graphs = Vec::with_capacity(self.modalities.len());
        for (m, rec) in self.modalities.iter().enumerate() {
            let prox_kind = ProxKind::from_name(&rec.prox)
                .ok_or_else(|| Error::config(format!("prox kind {:?}", rec.prox)))?;
            params.push(LayerParams {
                f: from_rows("F", &rec.f)?,
                w: from_rows("W", &rec.w)?,
                u: from_rows("U", &rec.u)?,
                theta: rec.theta.clone(),
                alpha: rec.alpha,
                prox_kind,
            });
            let g = if self.graph.fingerprints.get(m).is_some_and(Option::is_some) {
                train::modality_graph(dataset, m, &spec)?
            } else {
                None
            };
            let want = self.graph.fingerprints.get(m).cloned().flatten();
            if g.as_ref().map(graph_fingerprint) != want {
                return Err(Error::config(format!(
                    "graph of modality {m} differs from the one the checkpoint was trained on"
                )));
            }
            graphs.push(g);
        }
        let kind = FusionKind::from_name(&self.fusion.kind)
            .ok_or_else(|| Error::config(format!("fusion kind {:?}", self.fusion.kind)))?;
        let mut fusion = Fusion::init(kind, params.len(), params[0].k());
        if let Fusion::WeightedAverage(w) = &mut fusion {
            *w = self.fusion.weights.clone();
        }
        if fusion.params().len() != self.fusion.params.len() {
            return Err(Error::config(
                "fusion parameter count does not match its kind",
            ));
        }
        fusion.params_mut().copy_from_slice(&self.fusion.params);
        Ok(UnrolledModel::new(
            self.t_layers,
            params,
            graphs,
            fusion,
            self.seed,
        )?)
    }
}
