//! Experiment manifest: the JSON file naming every input of a run.

use std::path::{Path, PathBuf};

use owl_core::data::{OpenWorldDataset, DEFAULT_RATIOS};
use owl_core::graph;
use owl_core::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Feature CSVs, one per modality. Relative paths resolve against the
    /// manifest's directory.
    pub modalities: Vec<PathBuf>,
    pub labels: PathBuf,
    pub known_classes: Vec<usize>,
    /// Split seed.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_list_path: Option<PathBuf>,
}

/// A manifest together with the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if manifest.modalities.is_empty() {
            return Err(Error::config(format!(
                "{}: modalities is empty",
                path.display()
            )));
        }
        if manifest.known_classes.is_empty() {
            return Err(Error::config(format!(
                "{}: known_classes is empty",
                path.display()
            )));
        }
        if let Some(g) = &manifest.graph {
            if g.knn_k.is_some() && g.edge_list_path.is_some() {
                return Err(Error::config(format!(
                    "{}: graph takes knn_k or edge_list_path, not both",
                    path.display()
                )));
            }
        }
        Ok(LoadedManifest {
            manifest,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// k from the manifest's graph section, if it names one.
    pub fn knn_k(&self) -> Option<usize> {
        self.manifest.graph.as_ref().and_then(|g| g.knn_k)
    }

    pub fn edge_list(&self) -> Option<PathBuf> {
        self.manifest
            .graph
            .as_ref()
            .and_then(|g| g.edge_list_path.as_deref())
            .map(|p| self.resolve(p))
    }

    /// Reads, normalizes and splits the data. An edge list, when given,
    /// becomes the graph of every modality.
    pub fn load(&self, unknown_in_train: f64) -> Result<OpenWorldDataset> {
        let paths: Vec<PathBuf> = self
            .manifest
            .modalities
            .iter()
            .map(|p| self.resolve(p))
            .collect();
        let raw = io::load_csv(
            &paths,
            &self.resolve(&self.manifest.labels),
            self.manifest.known_classes.clone(),
        )?;
        if let Some(c) = self
            .manifest
            .known_classes
            .iter()
            .find(|c| !raw.labels.contains(c))
        {
            return Err(Error::config(format!("known class {c} has no samples")));
        }
        let n = raw.n();
        let mut ds = OpenWorldDataset::from_raw(
            raw,
            DEFAULT_RATIOS,
            unknown_in_train,
            &mut Rng::new(self.manifest.seed),
        )?;
        if let Some(path) = self.edge_list() {
            let edges = io::read_edge_list(&path, n)?;
            let g = graph::laplacian(&graph::adjacency_from_edges(n, &edges)?)?;
            ds.graphs = vec![Some(g); ds.modalities.len()];
        }
        Ok(ds)
    }

    pub fn write(manifest: &Manifest, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
