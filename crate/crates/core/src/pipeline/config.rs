use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grow::GrowConfig;
use crate::link::LinkConfig;
use crate::select::NormalizeConfig;

/// Number of k-means clusters (one candidate part grows from each).
///
/// Written either as a plain count or as `"<k>n"`, meaning 50·k clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterCount {
    Fixed(usize),
    FiftyTimes(usize),
}

impl ClusterCount {
    pub fn resolve(self) -> usize {
        match self {
            ClusterCount::Fixed(m) => m,
            ClusterCount::FiftyTimes(k) => 50 * k,
        }
    }
}

impl FromStr for ClusterCount {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("cluster count `{s}` is neither a number nor `<k>n`"));
        match s.strip_suffix('n') {
            Some(k) => k.parse().map(ClusterCount::FiftyTimes).map_err(|_| bad()),
            None => s.parse().map(ClusterCount::Fixed).map_err(|_| bad()),
        }
    }
}

impl fmt::Display for ClusterCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterCount::Fixed(m) => write!(f, "{m}"),
            ClusterCount::FiftyTimes(k) => write!(f, "{k}n"),
        }
    }
}

impl Serialize for ClusterCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClusterCount::Fixed(m) => s.serialize_u64(*m as u64),
            ClusterCount::FiftyTimes(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(m) => Ok(ClusterCount::Fixed(m as usize)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Required coverage: a fixed percentage, or the largest feasible one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum K1Setting {
    Auto,
    Percent(f64),
}

impl FromStr for K1Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto" {
            return Ok(K1Setting::Auto);
        }
        s.trim()
            .parse()
            .map(K1Setting::Percent)
            .map_err(|_| Error::InvalidArgument(format!("k1 `{s}` is neither `auto` nor a percentage")))
    }
}

impl fmt::Display for K1Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            K1Setting::Auto => f.write_str("auto"),
            K1Setting::Percent(p) => write!(f, "{p}"),
        }
    }
}

impl Serialize for K1Setting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            K1Setting::Auto => s.serialize_str("auto"),
            K1Setting::Percent(p) => s.serialize_f64(*p),
        }
    }
}

impl<'de> Deserialize<'de> for K1Setting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(p) => Ok(K1Setting::Percent(p)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything a run depends on. Omitted fields take their defaults, and the
/// fully populated config is echoed into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Number of candidate parts to grow (about a hundred).
    pub clusters: ClusterCount,
    /// Required coverage in percent of the points.
    pub k1: K1Setting,
    /// Allowed pairwise overlap in percent of the points.
    pub k2: f64,
    pub seed: u64,
    /// Neighbours per point when building the spanning tree.
    pub mst_knn: usize,
    /// Neighbours per point for normal estimation (raw clouds only).
    pub normal_knn: usize,
    /// Use normals from the input file when it has them.
    pub use_input_normals: bool,
    pub threshold_factor: f64,
    pub grow: GrowConfig,
    pub costs: NormalizeConfig,
    pub link: LinkConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            clusters: ClusterCount::Fixed(100),
            k1: K1Setting::Auto,
            k2: 5.0,
            seed: 7,
            mst_knn: 100,
            normal_knn: 15,
            use_input_normals: true,
            threshold_factor: crate::graph::DEFAULT_THRESHOLD_FACTOR,
            grow: GrowConfig::default(),
            costs: NormalizeConfig::default(),
            link: LinkConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML (`.toml`) or JSON (anything else) config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let cfg: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
                message: e.message().to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.resolve() == 0 {
            return Err(Error::InvalidArgument("cluster count must be positive".into()));
        }
        if let K1Setting::Percent(p) = self.k1 {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("k1 = {p} is not a percentage")));
            }
        }
        if !(0.0..=100.0).contains(&self.k2) {
            return Err(Error::InvalidArgument(format!("k2 = {} is not a percentage", self.k2)));
        }
        if self.mst_knn == 0 {
            return Err(Error::InvalidArgument("mst-knn must be positive".into()));
        }
        if !(self.threshold_factor > 0.0) {
            return Err(Error::InvalidArgument("threshold-factor must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, identifying the run settings.
    /// The output directory does not affect results and is left out.
    pub fn hash(&self) -> String {
        let settings = Self {
            output: None,
            ..self.clone()
        };
        let canonical = serde_json::to_string(&settings).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omitted_fields_take_defaults() {
        let cfg: PipelineConfig = toml::from_str("k2 = 3.0\nclusters = \"2n\"\n").unwrap();
        assert_eq!(cfg.k2, 3.0);
        assert_eq!(cfg.clusters.resolve(), 100);
        assert_eq!(cfg.k1, K1Setting::Auto);
        assert_eq!(cfg.grow, GrowConfig::default());
        assert_eq!(cfg.mst_knn, 100);
    }

    #[test]
    fn settings_round_trip_through_json() {
        let cfg = PipelineConfig {
            clusters: ClusterCount::FiftyTimes(3),
            k1: K1Setting::Percent(80.0),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"clusters\":\"3n\"") && text.contains("\"k1\":80.0"));
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let auto: PipelineConfig = serde_json::from_str(r#"{"k1": "auto", "clusters": 40}"#).unwrap();
        assert_eq!((auto.k1, auto.clusters), (K1Setting::Auto, ClusterCount::Fixed(40)));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!("12x".parse::<ClusterCount>().is_err());
        assert!("most".parse::<K1Setting>().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"k3": 1}"#).is_err());
        let cfg = PipelineConfig {
            k2: 150.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            seed: 8,
            ..Default::default()
        };
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let moved = PipelineConfig {
            output: Some("elsewhere".into()),
            ..Default::default()
        };
        assert_eq!(moved.hash(), a.hash());
    }

    #[test]
    fn toml_errors_carry_a_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "k2 = 5.0\nseed = \"seven\"\n").unwrap();
        match PipelineConfig::load(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
