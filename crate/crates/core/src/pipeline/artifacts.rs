//! JSON artifacts written by a run and the manifest that ties them together.
//!
//! Every artifact is an object carrying `schema_version`, the `stage` that
//! produced it and the `config_hash` of the run, followed by the stage
//! payload. Nothing time-dependent is written, so two runs with the same
//! input and config produce byte-identical files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{GrowFailure, PipelineConfig, PipelineRun};
use crate::cloud::{write_cloud, CloudFormat};
use crate::error::{Error, Result};
use crate::grow::Part;
use crate::link::{Chain, MergeRecord, Resolution, SkeletonGraph};
use crate::select::{PartCosts, Selection};

pub const SCHEMA_VERSION: u32 = 1;

pub const PARTS_FILE: &str = "parts.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const SKELETON_FILE: &str = "skeleton.json";
pub const SKELETON_OBJ_FILE: &str = "skeleton.obj";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Common header wrapped around each payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub stage: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(stage: &str, config_hash: &str, body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartsArtifact {
    pub n_points: usize,
    pub parts: Vec<Part>,
    pub costs: Vec<PartCosts>,
    pub failures: Vec<GrowFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub k1: f64,
    pub k2: f64,
    /// Ids of the chosen parts.
    pub selected: Vec<usize>,
    /// Ids removed by a reviewer; empty for a fresh run.
    #[serde(default)]
    pub removed: Vec<usize>,
    pub solution: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonArtifact {
    /// Ids of the parts the skeleton was linked from.
    pub parts: Vec<usize>,
    pub merges: Vec<MergeRecord>,
    pub chains: Vec<Chain>,
    pub resolution: Resolution,
    pub skeleton: SkeletonGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Pending,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Index of a run: the full config, its hash and how far each stage got.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub complete: bool,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn new(config: &PipelineConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            complete: false,
            stages: super::STAGES
                .iter()
                .map(|s| StageRecord {
                    stage: s.to_string(),
                    status: StageStatus::Pending,
                    artifact: None,
                    error: None,
                })
                .collect(),
        }
    }

    pub fn mark(&mut self, stage: &str, status: StageStatus, artifact: Option<&str>) {
        if let Some(r) = self.stages.iter_mut().find(|r| r.stage == stage) {
            r.status = status;
            if artifact.is_some() {
                r.artifact = artifact.map(str::to_string);
            }
        }
        self.complete = self.stages.iter().all(|r| r.status == StageStatus::Complete);
    }

    pub fn fail(&mut self, stage: &str, error: &Error) {
        self.mark(stage, StageStatus::Failed, None);
        if let Some(r) = self.stages.iter_mut().find(|r| r.stage == stage) {
            r.error = Some(error.to_string());
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads an artifact, checking its schema version.
pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let env: Envelope<T> = read_json(path)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: format!("schema version {} is not supported (expected {SCHEMA_VERSION})", env.schema_version),
        });
    }
    Ok(env)
}

pub fn skeleton_artifact(parts: &[Part], link: &crate::link::LinkResult) -> SkeletonArtifact {
    SkeletonArtifact {
        parts: parts.iter().map(|p| p.id).collect(),
        merges: link.merges.clone(),
        chains: link.chains.clone(),
        resolution: link.resolution.clone(),
        skeleton: link.skeleton.clone(),
    }
}

/// Writes the skeleton as JSON and OBJ.
pub fn write_skeleton(dir: &Path, hash: &str, artifact: SkeletonArtifact) -> Result<()> {
    std::fs::write(dir.join(SKELETON_OBJ_FILE), artifact.skeleton.to_obj())?;
    write_json(&dir.join(SKELETON_FILE), &Envelope::new("link", hash, artifact))
}

/// Writes every artifact of a finished run and records them in `manifest`.
pub fn write_artifacts(run: &PipelineRun, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let hash = run.config.hash();
    std::fs::write(dir.join(CLOUD_FILE), write_cloud(&run.prepared.cloud, CloudFormat::PlyAscii))?;
    manifest.mark("cloud", StageStatus::Complete, Some(CLOUD_FILE));
    manifest.mark("graph", StageStatus::Complete, None);
    let parts = PartsArtifact {
        n_points: run.prepared.cloud.len(),
        parts: run.candidates.clone(),
        costs: run.costs.clone(),
        failures: run.failures.clone(),
    };
    write_json(&dir.join(PARTS_FILE), &Envelope::new("grow", &hash, parts))?;
    manifest.mark("grow", StageStatus::Complete, Some(PARTS_FILE));
    manifest.mark("costs", StageStatus::Complete, Some(PARTS_FILE));
    let selection = SelectionArtifact {
        k1: run.k1,
        k2: run.config.k2,
        selected: run.selected_ids(),
        removed: Vec::new(),
        solution: run.selection.clone(),
    };
    write_json(&dir.join(SELECTION_FILE), &Envelope::new("select", &hash, selection))?;
    manifest.mark("select", StageStatus::Complete, Some(SELECTION_FILE));
    write_skeleton(dir, &hash, skeleton_artifact(&run.selected_parts(), &run.link))?;
    manifest.mark("link", StageStatus::Complete, Some(SKELETON_FILE));
    Ok(())
}
