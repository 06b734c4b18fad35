//! HTTP endpoints behind the part-review interface.
//!
//! A session holds one finished run. Reviewers inspect candidate parts,
//! change the selection, permanently remove parts and relink the skeleton;
//! when the session was loaded from an output directory every change is
//! written back to its artifacts.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::artifacts::{
    read_artifact, skeleton_artifact, write_json, write_skeleton, Envelope, Manifest, PartsArtifact, SelectionArtifact, SkeletonArtifact,
    CLOUD_FILE, PARTS_FILE, SCHEMA_VERSION, SELECTION_FILE, SKELETON_FILE,
};
use super::{prepare, PipelineConfig, PipelineRun};
use crate::cloud::{load_cloud, CloudFormat, PointCloud, Vec3};
use crate::error::{Error, Result};
use crate::graph::ConnectivityGraph;
use crate::grow::Part;
use crate::link::link_parts;
use crate::select::PartCosts;

/// Largest number of points `GET /cloud` returns.
pub const MAX_CLOUD_POINTS: usize = 50_000;

/// Mutable review state of one run.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub config: PipelineConfig,
    /// Output directory the session persists to, if any.
    pub dir: Option<PathBuf>,
    pub cloud: Arc<PointCloud>,
    pub connectivity: Arc<ConnectivityGraph>,
    pub candidates: Vec<Part>,
    pub costs: Vec<PartCosts>,
    pub k1: f64,
    pub selected: BTreeSet<usize>,
    pub removed: BTreeSet<usize>,
    pub skeleton: SkeletonArtifact,
    /// The selection changed since the skeleton was last linked.
    pub stale: bool,
}

impl SessionState {
    pub fn from_run(run: &PipelineRun, dir: Option<PathBuf>) -> Self {
        Self {
            config: run.config.clone(),
            dir,
            cloud: Arc::new(run.prepared.cloud.clone()),
            connectivity: Arc::new(run.prepared.connectivity.clone()),
            candidates: run.candidates.clone(),
            costs: run.costs.clone(),
            k1: run.k1,
            selected: run.selected_ids().into_iter().collect(),
            removed: BTreeSet::new(),
            skeleton: skeleton_artifact(&run.selected_parts(), &run.link),
            stale: false,
        }
    }

    /// Reopens the output directory of a finished run.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        if !manifest.complete {
            return Err(Error::InvalidArgument(format!("{} holds an incomplete run", dir.display())));
        }
        let cloud = load_cloud(&dir.join(CLOUD_FILE), CloudFormat::PlyAscii)?;
        let config = PipelineConfig {
            use_input_normals: true,
            ..manifest.config.clone()
        };
        let prepared = prepare(&cloud, &config)?;
        let parts: Envelope<PartsArtifact> = read_artifact(&dir.join(PARTS_FILE))?;
        let selection: Envelope<SelectionArtifact> = read_artifact(&dir.join(SELECTION_FILE))?;
        let skeleton: Envelope<SkeletonArtifact> = read_artifact(&dir.join(SKELETON_FILE))?;
        let stale = skeleton.body.parts.iter().copied().collect::<BTreeSet<_>>() != selection.body.selected.iter().copied().collect();
        Ok(Self {
            config: manifest.config,
            dir: Some(dir.to_path_buf()),
            cloud: Arc::new(prepared.cloud),
            connectivity: Arc::new(prepared.connectivity),
            candidates: parts.body.parts,
            costs: parts.body.costs,
            k1: selection.body.k1,
            selected: selection.body.selected.into_iter().collect(),
            removed: selection.body.removed.into_iter().collect(),
            skeleton: skeleton.body,
            stale,
        })
    }

    fn position(&self, id: usize) -> Option<usize> {
        self.candidates.iter().position(|p| p.id == id)
    }

    /// Ids that are not reviewable parts (unknown or removed).
    fn invalid_ids(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .copied()
            .filter(|&id| self.position(id).is_none() || self.removed.contains(&id))
            .collect()
    }

    pub fn selected_parts(&self) -> Vec<Part> {
        self.candidates.iter().filter(|p| self.selected.contains(&p.id)).cloned().collect()
    }

    /// Replaces the selection. Fails with the offending ids if any id is
    /// unknown or removed.
    pub fn set_selection(&mut self, ids: &[usize]) -> std::result::Result<(), Vec<usize>> {
        let bad = self.invalid_ids(ids);
        if !bad.is_empty() {
            return Err(bad);
        }
        let next: BTreeSet<usize> = ids.iter().copied().collect();
        if next != self.selected {
            self.selected = next;
            self.stale = true;
        }
        Ok(())
    }

    /// Permanently excludes parts from the session.
    pub fn remove(&mut self, ids: &[usize]) -> std::result::Result<(), Vec<usize>> {
        let bad: Vec<usize> = ids.iter().copied().filter(|&id| self.position(id).is_none()).collect();
        if !bad.is_empty() {
            return Err(bad);
        }
        for &id in ids {
            self.removed.insert(id);
            if self.selected.remove(&id) {
                self.stale = true;
            }
        }
        Ok(())
    }

    fn selection_artifact(&self) -> SelectionArtifact {
        let chosen: Vec<bool> = self.candidates.iter().map(|p| self.selected.contains(&p.id)).collect();
        let covered = self.selected_parts().iter().map(|p| p.member_set.len() as u64).sum();
        let objective = self
            .candidates
            .iter()
            .zip(&self.costs)
            .filter(|(p, _)| self.selected.contains(&p.id))
            .map(|(_, c)| c.c_ovr)
            .sum();
        let parts = self.selected_parts();
        let mut overlap = 0;
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                overlap += crate::select::sorted_intersection_len(&a.member_set, &b.member_set) as u64;
            }
        }
        SelectionArtifact {
            k1: self.k1,
            k2: self.config.k2,
            selected: self.selected.iter().copied().collect(),
            removed: self.removed.iter().copied().collect(),
            solution: crate::select::Selection {
                chosen,
                objective,
                covered_points: covered,
                overlap_points: overlap,
                feasible: true,
                nodes: 0,
            },
        }
    }

    /// Writes the selection (and removals) back to the session directory.
    pub fn persist_selection(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_json(
                &dir.join(SELECTION_FILE),
                &Envelope::new("select", &self.config.hash(), self.selection_artifact()),
            )?;
        }
        Ok(())
    }

    pub fn persist_skeleton(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_skeleton(dir, &self.config.hash(), self.skeleton.clone())?;
        }
        Ok(())
    }
}

/// A session shared between request handlers. At most one relink runs at a
/// time; a second request gets 409 Conflict.
#[derive(Debug)]
pub struct Session {
    state: RwLock<SessionState>,
    relinking: AtomicBool,
}

pub type SharedSession = Arc<Session>;

/// Held while a relink runs; releases the slot on drop.
pub struct RelinkGuard<'a>(&'a AtomicBool);

impl Drop for RelinkGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Session {
    pub fn new(state: SessionState) -> SharedSession {
        Arc::new(Self {
            state: RwLock::new(state),
            relinking: AtomicBool::new(false),
        })
    }

    pub fn snapshot(&self) -> SessionState {
        self.read().clone()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, SessionState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, SessionState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Claims the relink slot, or `None` if a relink is already running.
    pub fn try_begin_relink(&self) -> Option<RelinkGuard<'_>> {
        self.relinking
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| RelinkGuard(&self.relinking))
    }

    /// Links the current selection and stores (and persists) the skeleton.
    /// The state lock is not held while linking.
    pub fn relink(&self) -> Result<SkeletonArtifact> {
        let (cloud, cnct, parts, cfg, selected) = {
            let s = self.read();
            (
                s.cloud.clone(),
                s.connectivity.clone(),
                s.selected_parts(),
                s.config.link.clone(),
                s.selected.clone(),
            )
        };
        let link = link_parts(&cloud, &cnct, &parts, &cfg).map_err(|e| e.in_stage("link"))?;
        let artifact = skeleton_artifact(&parts, &link);
        let mut s = self.write();
        s.skeleton = artifact.clone();
        // A selection change that raced with the link leaves the result stale.
        s.stale = s.selected != selected;
        s.persist_skeleton()?;
        s.persist_selection()?;
        Ok(artifact)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartSummary {
    pub id: usize,
    pub selected: bool,
    pub sections: usize,
    pub members: usize,
    pub axis: Vec<Vec3>,
    pub costs: PartCosts,
}

#[derive(Debug, Deserialize)]
struct IdsBody {
    ids: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct CloudQuery {
    max: Option<usize>,
}

fn error_response(status: StatusCode, message: &str, offending: &[usize]) -> Response {
    (
        status,
        Json(json!({ "schema_version": SCHEMA_VERSION, "error": message, "offending_ids": offending })),
    )
        .into_response()
}

fn internal(e: Error) -> Response {
    error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string(), &[])
}

async fn get_parts(State(session): State<SharedSession>) -> Response {
    let s = session.read();
    let parts: Vec<PartSummary> = s
        .candidates
        .iter()
        .zip(&s.costs)
        .filter(|(p, _)| !s.removed.contains(&p.id))
        .map(|(p, c)| PartSummary {
            id: p.id,
            selected: s.selected.contains(&p.id),
            sections: p.sections.len(),
            members: p.member_set.len(),
            axis: p.axis.clone(),
            costs: c.clone(),
        })
        .collect();
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "n_points": s.cloud.len(),
        "stale": s.stale,
        "parts": parts,
    }))
    .into_response()
}

async fn post_selection(State(session): State<SharedSession>, Json(body): Json<IdsBody>) -> Response {
    let mut s = session.write();
    if let Err(bad) = s.set_selection(&body.ids) {
        return error_response(StatusCode::UNPROCESSABLE_ENTITY, "unknown or removed part ids", &bad);
    }
    if let Err(e) = s.persist_selection() {
        return internal(e);
    }
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "selected": s.selected,
        "stale": s.stale,
    }))
    .into_response()
}

async fn post_remove(State(session): State<SharedSession>, Json(body): Json<IdsBody>) -> Response {
    let mut s = session.write();
    if let Err(bad) = s.remove(&body.ids) {
        return error_response(StatusCode::UNPROCESSABLE_ENTITY, "unknown part ids", &bad);
    }
    if let Err(e) = s.persist_selection() {
        return internal(e);
    }
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "removed": s.removed,
        "selected": s.selected,
        "stale": s.stale,
    }))
    .into_response()
}

async fn post_relink(State(session): State<SharedSession>) -> Response {
    let worker = session.clone();
    let result = tokio::task::spawn_blocking(move || {
        let Some(_guard) = worker.try_begin_relink() else {
            return Err(None);
        };
        worker.relink().map_err(Some)
    })
    .await;
    match result {
        Ok(Ok(artifact)) => Json(json!({
            "schema_version": SCHEMA_VERSION,
            "stale": session.read().stale,
            "leaves": artifact.skeleton.leaves().len(),
            "connected": artifact.skeleton.is_connected(),
            "vertices": artifact.skeleton.vertices.len(),
            "edges": artifact.skeleton.edges.len(),
        }))
        .into_response(),
        Ok(Err(None)) => error_response(StatusCode::CONFLICT, "a relink is already running", &[]),
        Ok(Err(Some(e))) => internal(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string(), &[]),
    }
}

async fn get_skeleton(State(session): State<SharedSession>) -> Response {
    let s = session.read();
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "stale": s.stale,
        "parts": s.skeleton.parts,
        "leaves": s.skeleton.skeleton.leaves(),
        "skeleton": s.skeleton.skeleton,
    }))
    .into_response()
}

/// Evenly random subset of point indices, sorted, reproducible per session.
pub fn decimate(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

async fn get_cloud(State(session): State<SharedSession>, Query(q): Query<CloudQuery>) -> Response {
    let s = session.read();
    let max = q.max.unwrap_or(MAX_CLOUD_POINTS).min(MAX_CLOUD_POINTS);
    let idx = decimate(s.cloud.len(), max, s.config.seed);
    let positions: Vec<[f64; 3]> = idx.iter().map(|&i| s.cloud.position(i).into()).collect();
    let normals: Vec<[f64; 3]> = idx.iter().map(|&i| s.cloud.normal(i).into()).collect();
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "total": s.cloud.len(),
        "indices": idx,
        "positions": positions,
        "normals": normals,
    }))
    .into_response()
}

pub fn router(session: SharedSession) -> Router {
    Router::new()
        .route("/parts", get(get_parts))
        .route("/selection", post(post_selection))
        .route("/remove", post(post_remove))
        .route("/relink", post(post_relink))
        .route("/skeleton", get(get_skeleton))
        .route("/cloud", get(get_cloud))
        .with_state(session)
}

/// Serves a session until the process is stopped.
pub async fn serve(session: SharedSession, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving review session on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session)).await?;
    Ok(())
}
