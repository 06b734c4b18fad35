//! Registration accuracy on synthetic GCs, with and without normals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{angle_deg, generate_gc, rotation_error, GCSpec, GroundTruth, Sampling, SliceSpacing};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::register::{register, RegConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalsMode {
    On,
    Off,
    Both,
}

impl NormalsMode {
    fn flags(self) -> &'static [bool] {
        match self {
            NormalsMode::On => &[true],
            NormalsMode::Off => &[false],
            NormalsMode::Both => &[true, false],
        }
    }
}

impl std::str::FromStr for NormalsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(NormalsMode::On),
            "off" => Ok(NormalsMode::Off),
            "both" => Ok(NormalsMode::Both),
            other => Err(Error::InvalidArgument(format!("unknown normals mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct TrialConfig {
    pub sampling: Sampling,
    pub axis_samples: usize,
    pub contour_samples: usize,
    pub spacing: SliceSpacing,
    /// Slices between the source and the (centre of the) destination.
    pub slice_gap: usize,
    /// Extra slices on each side of the destination in [`run_trials`].
    pub dest_half_width: usize,
    /// Extra slices on each side of the destination in the wide case of the
    /// neighbourhood-size experiment.
    pub wide_half_width: usize,
    pub registration: RegConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            sampling: Sampling::Random,
            axis_samples: 16,
            contour_samples: 40,
            spacing: SliceSpacing::default(),
            slice_gap: 2,
            dest_half_width: 1,
            wide_half_width: 1,
            registration: RegConfig::default(),
        }
    }
}

/// One registration of a source slice against a destination band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub sampling: Sampling,
    pub normals: bool,
    /// ‖I − R̂ R*ᵀ‖_F against the true relative rotation.
    pub rot_err: f64,
    /// Angle between the predicted and the true destination plane normal.
    pub plane_err_deg: f64,
    /// Mean angle between each source normal and its best match.
    pub reg_cost_deg: f64,
    /// |ŝ / s* − 1|.
    pub scale_err: f64,
    /// Set when the registration itself failed; the metrics are then NaN.
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Registers slice `source` (as X) against the union of `dest` slices (as
/// Y) and scores the result against the slice in the middle of `dest`.
pub fn run_registration_trial(
    cloud: &PointCloud,
    truth: &GroundTruth,
    source: usize,
    dest: &[usize],
    use_normals: bool,
    reg: &RegConfig,
) -> Result<TrialRecord> {
    let n = truth.n_slices();
    if dest.is_empty() || source >= n || dest.iter().any(|&d| d >= n || d == source) {
        return Err(Error::InvalidArgument(format!(
            "source slice {source} and destination {dest:?} must be distinct slices below {n}"
        )));
    }
    let target = dest[dest.len() / 2];
    let x = PointCloud::new(cloud.subset(&truth.slice_points(source)), true)?;
    let y_idx: Vec<usize> = dest.iter().flat_map(|&d| truth.slice_points(d)).collect();
    let y = PointCloud::new(cloud.subset(&y_idx), true)?;
    let cfg = RegConfig {
        use_normals,
        ..reg.clone()
    };
    let mut record = TrialRecord {
        trial: 0,
        sampling: Sampling::Regular,
        normals: use_normals,
        rot_err: f64::NAN,
        plane_err_deg: f64::NAN,
        reg_cost_deg: f64::NAN,
        scale_err: f64::NAN,
        failure: None,
    };
    // The fitted transform carries Y (destination) onto X (source).
    let (r_true, s_true, _) = truth.relative(target, source);
    match register(&x, &y, &cfg) {
        Ok(rep) => {
            let p = &rep.params;
            record.rot_err = rotation_error(&p.rotation, &r_true)?;
            let predicted = p.rotation.transpose() * truth.tangent(source);
            record.plane_err_deg = angle_deg(&predicted, &truth.tangent(target));
            record.reg_cost_deg = rep.mean_best_match_angle;
            record.scale_err = (p.scale / s_true - 1.0).abs();
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    Ok(record)
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// A random GC and a source slice far enough from the ends for the widest
/// destination band.
fn trial_setup(cfg: &TrialConfig, seed: u64, trial: usize) -> Result<(PointCloud, GroundTruth, usize)> {
    let mut rng = trial_rng(seed, trial);
    let spec = GCSpec::random_with(&mut rng, cfg.sampling, cfg.axis_samples, cfg.contour_samples, &cfg.spacing);
    let (cloud, truth) = generate_gc(&spec)?;
    let reach = cfg.slice_gap + cfg.wide_half_width.max(cfg.dest_half_width);
    if reach >= cfg.axis_samples {
        return Err(Error::InvalidArgument(format!(
            "{} axis samples cannot hold a destination {reach} slices ahead",
            cfg.axis_samples
        )));
    }
    let source = rng.gen_range(0..cfg.axis_samples - reach);
    Ok((cloud, truth, source))
}

/// `n_trials` random GCs; each registers one source slice against the band
/// of `2 · dest_half_width + 1` slices centred `slice_gap` ahead, once per
/// requested normals setting (paired: both settings see the same data).
///
/// A single destination slice pins the plane orientation even from
/// positions alone (planar set onto planar set); a band of slices is the
/// growth setting, where the neighbourhood is wider than the section.
pub fn run_trials(n_trials: usize, normals: NormalsMode, cfg: &TrialConfig, seed: u64) -> Result<Vec<TrialRecord>> {
    if cfg.slice_gap <= cfg.dest_half_width {
        return Err(Error::InvalidArgument(format!(
            "slice gap {} must exceed the destination half-width {}",
            cfg.slice_gap, cfg.dest_half_width
        )));
    }
    let per_trial: Vec<Result<Vec<TrialRecord>>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let (cloud, truth, source) = trial_setup(cfg, seed, trial)?;
            let centre = source + cfg.slice_gap;
            let dest: Vec<usize> = (centre - cfg.dest_half_width..=centre + cfg.dest_half_width).collect();
            normals
                .flags()
                .iter()
                .map(|&use_normals| {
                    let mut rec = run_registration_trial(&cloud, &truth, source, &dest, use_normals, &cfg.registration)?;
                    rec.trial = trial;
                    rec.sampling = cfg.sampling;
                    Ok(rec)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

/// Fraction of trials in which widening the destination made the rotation
/// estimate worse, per method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSizeResult {
    pub proportion_with: f64,
    pub proportion_without: f64,
    /// Trials where all four registrations succeeded.
    pub trials_used: usize,
    pub trials_failed: usize,
}

pub fn run_neighborhood_size_experiment(n_trials: usize, cfg: &TrialConfig, seed: u64) -> Result<NeighborhoodSizeResult> {
    if n_trials < 30 {
        return Err(Error::InvalidArgument(format!("need at least 30 trials, got {n_trials}")));
    }
    if cfg.slice_gap <= cfg.wide_half_width {
        return Err(Error::InvalidArgument(format!(
            "slice gap {} must exceed the wide half-width {} so the source stays outside the destination",
            cfg.slice_gap, cfg.wide_half_width
        )));
    }
    let outcomes: Vec<Result<Option<[bool; 2]>>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let (cloud, truth, source) = trial_setup(cfg, seed, trial)?;
            let centre = source + cfg.slice_gap;
            let wide: Vec<usize> = (centre - cfg.wide_half_width..=centre + cfg.wide_half_width).collect();
            let mut worse = [false; 2];
            for (slot, use_normals) in [true, false].into_iter().enumerate() {
                let narrow = run_registration_trial(&cloud, &truth, source, &[centre], use_normals, &cfg.registration)?;
                let broad = run_registration_trial(&cloud, &truth, source, &wide, use_normals, &cfg.registration)?;
                if narrow.failed() || broad.failed() {
                    return Ok(None);
                }
                worse[slot] = broad.rot_err > narrow.rot_err;
            }
            Ok(Some(worse))
        })
        .collect();
    let (mut used, mut failed, mut with, mut without) = (0usize, 0usize, 0usize, 0usize);
    for o in outcomes {
        match o? {
            Some([w, wo]) => {
                used += 1;
                with += w as usize;
                without += wo as usize;
            }
            None => failed += 1,
        }
    }
    if used == 0 {
        return Err(Error::Numerical("every neighbourhood-size trial failed to register".into()));
    }
    Ok(NeighborhoodSizeResult {
        proportion_with: with as f64 / used as f64,
        proportion_without: without as f64 / used as f64,
        trials_used: used,
        trials_failed: failed,
    })
}

/// CSV with columns trial, sampling, normals, rot_err, plane_err_deg,
/// reg_cost_deg, scale_err. Failed trials have empty metric fields.
pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut s = String::from("trial,sampling,normals,rot_err,plane_err_deg,reg_cost_deg,scale_err\n");
    let f = |v: f64| if v.is_finite() { format!("{v}") } else { String::new() };
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.trial,
            r.sampling.as_str(),
            if r.normals { "on" } else { "off" },
            f(r.rot_err),
            f(r.plane_err_deg),
            f(r.reg_cost_deg),
            f(r.scale_err)
        ));
    }
    s
}
