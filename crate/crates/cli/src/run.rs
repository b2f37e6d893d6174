//! Run directory layout, the artifact manifest and artifact lookup.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ldprune_core::checkpoint::{self, Lineage};
use ldprune_core::graph::OperatorGraph;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: PathBuf,
    /// Hash of the config inputs that produced the artifact.
    pub stage_hash: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `<output_dir>/<config_hash>/` and records the resolved config.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let root = cfg.run_dir();
        for sub in ["checkpoints", "reports", "logs", "eval"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let config_hash = cfg.config_hash();
        let text = toml::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(
            root.join("config.toml"),
            format!("# config_hash: {config_hash}\n{text}"),
        )?;
        let manifest = match fs::read(root.join("manifest.json")) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(_) => Manifest {
                config_hash: config_hash.clone(),
                artifacts: BTreeMap::new(),
            },
        };
        Ok(Self {
            root,
            config_hash,
            manifest,
        })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Writes a checkpoint and records it under `name`.
    pub fn save_model(
        &mut self,
        name: &str,
        graph: &OperatorGraph,
        stage_hash: &str,
        parent: Option<&OperatorGraph>,
    ) -> Result<PathBuf, CliError> {
        let lineage = Lineage {
            config_hash: Some(stage_hash.to_string()),
            parent_hash: parent.map(checkpoint::graph_hash).transpose()?,
            role: Some(name.to_string()),
        };
        let rel = PathBuf::from("checkpoints").join(format!("{name}.ldpr"));
        let path = self.root.join(&rel);
        let sha256 = checkpoint::save(graph, &lineage, &path)?;
        self.record(name, rel, stage_hash, sha256)?;
        Ok(path)
    }

    /// Writes a JSON object with `config_hash` prepended.
    pub fn write_json<T: Serialize>(
        &mut self,
        rel: &str,
        value: &T,
        record_as: Option<(&str, &str)>,
    ) -> Result<PathBuf, CliError> {
        let mut obj = serde_json::Map::new();
        obj.insert("config_hash".into(), self.config_hash.clone().into());
        match serde_json::to_value(value)? {
            serde_json::Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("value".into(), other);
            }
        }
        let bytes = serde_json::to_vec_pretty(&serde_json::Value::Object(obj))?;
        self.write_bytes(rel, &bytes, record_as)
    }

    /// Writes CSV text behind a `# config_hash:` line.
    pub fn write_csv(&mut self, rel: &str, csv: &str, record_as: Option<(&str, &str)>) -> Result<PathBuf, CliError> {
        let text = format!("# config_hash: {}\n{csv}", self.config_hash);
        self.write_bytes(rel, text.as_bytes(), record_as)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8], record_as: Option<(&str, &str)>) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&path, bytes)?;
        if let Some((name, stage)) = record_as {
            self.record(name, rel.into(), stage, checkpoint::sha256_hex(bytes))?;
        }
        Ok(path)
    }

    fn record(&mut self, name: &str, path: PathBuf, stage_hash: &str, sha256: String) -> Result<(), CliError> {
        self.manifest.artifacts.insert(
            name.to_string(),
            ArtifactRecord {
                path,
                stage_hash: stage_hash.to_string(),
                sha256,
            },
        );
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(())
    }
}

/// Finds an artifact `name` produced with `stage_hash` in any run under
/// `output_dir`, preferring the run `prefer`.
pub fn find_artifact(output_dir: &Path, prefer: &Path, name: &str, stage_hash: &str) -> Option<PathBuf> {
    let mut dirs = vec![prefer.to_path_buf()];
    if let Ok(rd) = fs::read_dir(output_dir) {
        let mut others: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p != prefer)
            .collect();
        others.sort();
        dirs.extend(others);
    }
    dirs.into_iter().find_map(|d| {
        let m: Manifest = serde_json::from_slice(&fs::read(d.join("manifest.json")).ok()?).ok()?;
        let rec = m.artifacts.get(name)?;
        let path = d.join(&rec.path);
        (rec.stage_hash == stage_hash && path.exists()).then_some(path)
    })
}

/// Loads a checkpoint and checks its recorded config hash against
/// `expected`. A mismatch is an error unless `force` is set.
pub fn load_checked(path: &Path, expected: &str, force: bool) -> Result<OperatorGraph, CliError> {
    let (graph, lineage) = checkpoint::load(path)?;
    match lineage.config_hash.as_deref() {
        Some(h) if h == expected => {}
        found => {
            let msg = format!(
                "{} was produced by config {} but the current config expects {expected}",
                path.display(),
                found.unwrap_or("<none>")
            );
            if !force {
                return Err(CliError::HashMismatch(format!("{msg}; pass --force to use it anyway")));
            }
            log::warn!("{msg}");
        }
    }
    Ok(graph)
}
