//! End-to-end orchestration: cloud → graph → grow → costs → select → link,
//! with self-describing JSON artifacts and a review session server.

pub mod artifacts;
pub mod config;
pub mod server;

use std::collections::BTreeSet;

use log::{info, warn};

use crate::cloud::{estimate_normals, orient_normals_forest, CloudFormat, PointCloud};
use crate::error::{Error, Result};
use crate::graph::{
    build_connectivity, build_mst, cluster_cloud, component_labels, compute_thresholds_with, AdaptiveThresholds, Clustering,
    ConnectivityGraph,
};
use crate::grow::{grow_parts, GrowContext, Part};
use crate::link::{link_parts, LinkResult};
use crate::select::{max_feasible_k1, normalize_costs_with, part_costs, solve_selection, PartCosts, Selection, SelectionProblem};

pub use artifacts::{write_artifacts, Manifest, StageRecord, StageStatus, SCHEMA_VERSION};
pub use config::{ClusterCount, K1Setting, PipelineConfig};
pub use server::{router, serve, Session, SessionState, SharedSession};

/// The cloud and the graphs every later stage reads.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cloud: PointCloud,
    pub thresholds: AdaptiveThresholds,
    pub connectivity: ConnectivityGraph,
    /// Connected components of the connectivity graph.
    pub components: usize,
}

/// A seed cluster whose part could not be grown.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrowFailure {
    pub cluster: usize,
    pub reason: String,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub prepared: Prepared,
    pub clustering: Clustering,
    /// Candidate parts, ordered by seed cluster; `id` is the seed cluster.
    pub candidates: Vec<Part>,
    pub failures: Vec<GrowFailure>,
    pub costs: Vec<PartCosts>,
    /// The k1 actually used (the auto value when requested).
    pub k1: f64,
    pub selection: Selection,
    pub link: LinkResult,
}

impl PipelineRun {
    pub fn selected_ids(&self) -> Vec<usize> {
        self.selection.chosen_indices().into_iter().map(|i| self.candidates[i].id).collect()
    }

    pub fn selected_parts(&self) -> Vec<Part> {
        self.selection
            .chosen_indices()
            .into_iter()
            .map(|i| self.candidates[i].clone())
            .collect()
    }
}

/// Reads the configured input file.
pub fn load_input(config: &PipelineConfig) -> Result<PointCloud> {
    let path = config
        .input
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no input file configured".into()))?;
    let format =
        CloudFormat::from_path(path).ok_or_else(|| Error::InvalidArgument(format!("cannot tell the format of {}", path.display())))?;
    crate::cloud::load_cloud(path, format)
}

/// Normals (estimated and oriented if missing or ignored) and the
/// connectivity structures.
pub fn prepare(cloud: &PointCloud, config: &PipelineConfig) -> Result<Prepared> {
    let mst = build_mst(cloud, config.mst_knn)?;
    let cloud = if cloud.has_normals() && config.use_input_normals {
        cloud.clone()
    } else {
        let est = estimate_normals(cloud, config.normal_knn)?;
        if !est.degenerate.is_empty() {
            warn!(
                "{} points have degenerate neighbourhoods; their normals are arbitrary",
                est.degenerate.len()
            );
        }
        let (oriented, trees) = orient_normals_forest(&est.cloud, &mst)?;
        if trees > 1 {
            warn!("normals oriented separately on {trees} disconnected pieces");
        }
        oriented
    };
    let thresholds = compute_thresholds_with(&mst, cloud.len(), config.threshold_factor)?;
    let connectivity = build_connectivity(&cloud, &thresholds);
    let (_, components) = component_labels(&connectivity);
    if components > 1 {
        warn!("connectivity graph has {components} components; proceeding per component");
    }
    Ok(Prepared {
        cloud,
        thresholds,
        connectivity,
        components,
    })
}

/// Grows one candidate per cluster; clusters that yield no part are
/// reported, not fatal.
pub fn grow_candidates(prepared: &Prepared, clustering: &Clustering, config: &PipelineConfig) -> (Vec<Part>, Vec<GrowFailure>) {
    let ctx = GrowContext::new(&prepared.cloud, &prepared.connectivity, &prepared.thresholds, clustering);
    let clusters: Vec<usize> = (0..clustering.len()).collect();
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (&cluster, result) in clusters.iter().zip(grow_parts(&ctx, &clusters, &config.grow)) {
        match result {
            Ok(part) if !part.member_set.is_empty() => parts.push(part),
            Ok(_) => failures.push(GrowFailure {
                cluster,
                reason: "part has no members".into(),
            }),
            Err(e) => failures.push(GrowFailure {
                cluster,
                reason: e.to_string(),
            }),
        }
    }
    (parts, failures)
}

/// Per-part costs, normalized across candidates. A single candidate gets
/// all-zero normalized costs.
pub fn score_candidates(candidates: &[Part], cloud: &PointCloud, config: &PipelineConfig) -> Result<Vec<PartCosts>> {
    let raw = candidates.iter().map(|p| part_costs(p, cloud)).collect::<Result<Vec<_>>>()?;
    if raw.len() < 2 {
        return Ok(raw
            .into_iter()
            .map(|mut c| {
                c.normalized = [0.0; 4];
                c.c_ovr = 0.0;
                c
            })
            .collect());
    }
    normalize_costs_with(&raw, &config.costs)
}

/// Chooses the subset of candidates; returns the k1 used and the solution.
pub fn select_candidates(candidates: &[Part], costs: &[PartCosts], n_points: usize, config: &PipelineConfig) -> Result<(f64, Selection)> {
    let c: Vec<f64> = costs.iter().map(|c| c.c_ovr).collect();
    let mut problem = SelectionProblem::from_parts(candidates, &c, n_points, 0.0, config.k2)?;
    let k1 = match config.k1 {
        K1Setting::Percent(p) => p,
        K1Setting::Auto => max_feasible_k1(&problem)? as f64,
    };
    problem.k1 = k1;
    let selection = solve_selection(&problem);
    if !selection.feasible {
        return Err(Error::Infeasible(format!(
            "no subset covers {k1}% with at most {}% overlap",
            config.k2
        )));
    }
    Ok((k1, selection))
}

/// Runs every stage on `cloud`. Stage errors carry the stage name.
pub fn run_on_cloud(cloud: &PointCloud, config: &PipelineConfig) -> Result<PipelineRun> {
    let mut progress = |_: &str| {};
    run_stages(cloud, config, &mut progress).map_err(|(_, e)| e)
}

/// Stage names in execution order.
pub const STAGES: [&str; 6] = ["cloud", "graph", "grow", "costs", "select", "link"];

fn run_stages(
    cloud: &PointCloud,
    config: &PipelineConfig,
    done: &mut dyn FnMut(&str),
) -> std::result::Result<PipelineRun, (&'static str, Error)> {
    let stage = |name: &'static str| move |e: Error| (name, e.in_stage(name));
    config.validate().map_err(stage("cloud"))?;
    let prepared = prepare(cloud, config).map_err(stage("cloud"))?;
    done("cloud");
    let m = config.clusters.resolve().min(prepared.cloud.len());
    let clustering = cluster_cloud(&prepared.cloud, m, config.seed, &prepared.connectivity).map_err(stage("graph"))?;
    done("graph");
    let (candidates, failures) = grow_candidates(&prepared, &clustering, config);
    info!("grew {} candidate parts ({} clusters failed)", candidates.len(), failures.len());
    if candidates.is_empty() {
        return Err(stage("grow")(Error::EmptyInput("no candidate part could be grown".into())));
    }
    done("grow");
    let costs = score_candidates(&candidates, &prepared.cloud, config).map_err(stage("costs"))?;
    done("costs");
    let (k1, selection) = select_candidates(&candidates, &costs, prepared.cloud.len(), config).map_err(stage("select"))?;
    info!("selected {} parts at k1 = {k1}%", selection.chosen_indices().len());
    done("select");
    let chosen: Vec<Part> = selection.chosen_indices().into_iter().map(|i| candidates[i].clone()).collect();
    let link = link_parts(&prepared.cloud, &prepared.connectivity, &chosen, &config.link).map_err(stage("link"))?;
    done("link");
    Ok(PipelineRun {
        config: config.clone(),
        prepared,
        clustering,
        candidates,
        failures,
        costs,
        k1,
        selection,
        link,
    })
}

/// Loads the input, runs all stages and writes artifacts to the configured
/// output directory. On a stage failure the manifest records how far the
/// run got, and the stage error is returned.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    let out = config
        .output
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no output directory configured".into()))?;
    std::fs::create_dir_all(&out)?;
    let mut manifest = Manifest::new(config);
    let cloud = match load_input(config) {
        Ok(c) => c,
        Err(e) => {
            let e = e.in_stage("cloud");
            manifest.fail("cloud", &e);
            manifest.write(&out)?;
            return Err(e);
        }
    };
    let mut completed = BTreeSet::new();
    let result = run_stages(&cloud, config, &mut |s| {
        completed.insert(s.to_string());
    });
    match result {
        Ok(run) => {
            write_artifacts(&run, &out, &mut manifest)?;
            manifest.write(&out)?;
            Ok(run)
        }
        Err((stage, e)) => {
            for s in STAGES.iter().filter(|s| completed.contains(**s)) {
                manifest.mark(s, StageStatus::Complete, None);
            }
            manifest.fail(stage, &e);
            manifest.write(&out)?;
            Err(e)
        }
    }
}
