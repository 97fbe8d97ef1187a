use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcprune_core::data::Normalization;
use tcprune_core::graph::ModelGraph;
use tcprune_core::params::ParameterStore;
use tcprune_core::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Everything needed to re-execute a run. Written before any other output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Base-model directory a `prune` run starts from, if any.
    pub base: Option<String>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.prune.seed,
            config_hash: config.hash()?,
            base: None,
            input_hashes: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: config.clone(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::config(format!("manifest does not serialize: {e}")))?;
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::config(format!("cannot read manifest {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("manifest {}: {e}", path.display())))
    }

    /// Fails when recorded input digests disagree with `actual`.
    pub fn check_inputs(&self, actual: &BTreeMap<String, String>) -> Result<()> {
        for (name, want) in &self.input_hashes {
            match actual.get(name) {
                Some(got) if got == want => {}
                Some(got) => {
                    return Err(Error::Data(format!(
                        "input {name} changed since the manifest was written ({want} → {got})"
                    )))
                }
                None => return Err(Error::Data(format!("input {name} recorded in the manifest is missing"))),
            }
        }
        Ok(())
    }
}

/// A saved model: graph, parameters and the input normalization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub graph: ModelGraph,
    pub params: ParameterStore<f32>,
    pub normalization: Normalization,
}

const GRAPH_FILE: &str = "graph.json";
const PARAMS_FILE: &str = "params.tcpc";
const NORM_FILE: &str = "normalization.json";

impl SavedModel {
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let files = vec![dir.join(GRAPH_FILE), dir.join(PARAMS_FILE), dir.join(NORM_FILE)];
        fs::write(&files[0], self.graph.to_json()?)?;
        self.params.save(&files[1])?;
        fs::write(&files[2], serde_json::to_string_pretty(&self.normalization)?)?;
        Ok(files)
    }

    /// Accepts the model directory itself or a run directory holding `model/`.
    pub fn load(dir: &Path) -> Result<Self> {
        let dir = if dir.join(GRAPH_FILE).is_file() { dir.to_path_buf() } else { dir.join("model") };
        if !dir.join(GRAPH_FILE).is_file() {
            return Err(Error::Data(format!("no saved model under {}", dir.display())));
        }
        let graph = ModelGraph::from_json(&fs::read_to_string(dir.join(GRAPH_FILE))?)?;
        let params = ParameterStore::load(dir.join(PARAMS_FILE))?;
        let normalization = serde_json::from_str(&fs::read_to_string(dir.join(NORM_FILE))?)?;
        let problems = tcprune_core::surgery::validate_structure(&graph, &params);
        if !problems.is_empty() {
            return Err(Error::structural(dir.display().to_string(), problems.join("; ")));
        }
        Ok(Self {
            graph,
            params,
            normalization,
        })
    }
}
