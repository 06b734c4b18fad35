use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{OrientedPoint, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Supported text formats.
///
/// * `xyz`: `x y z` per line.
/// * `xyzn`: `x y z nx ny nz` per line.
/// * `ply-ascii`: ASCII PLY with a `vertex` element carrying `x y z` and
///   optionally `nx ny nz`.
///
/// In `xyz`/`xyzn` files blank lines and lines starting with `#` are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    Xyz,
    Xyzn,
    PlyAscii,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(Self::Xyz),
            "xyzn" => Some(Self::Xyzn),
            "ply" => Some(Self::PlyAscii),
            _ => None,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(Self::Xyz),
            "xyzn" => Ok(Self::Xyzn),
            "ply" | "ply-ascii" => Ok(Self::PlyAscii),
            other => Err(Error::InvalidArgument(format!("unknown cloud format '{other}'"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    parse_cloud(&text, format, path)
}

/// Parses cloud text. `origin` is only used in error messages.
pub fn parse_cloud(text: &str, format: CloudFormat, origin: &Path) -> Result<PointCloud> {
    let fail = |line: usize, message: String| Error::Format {
        path: PathBuf::from(origin),
        line,
        message,
    };
    let points = match format {
        CloudFormat::Xyz | CloudFormat::Xyzn => {
            let want = if format == CloudFormat::Xyz { 3 } else { 6 };
            let mut points = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let values = parse_floats(line).map_err(|m| fail(lineno + 1, m))?;
                if values.len() != want {
                    return Err(fail(lineno + 1, format!("expected {want} values, found {}", values.len())));
                }
                points.push(make_point(&values, want == 6).map_err(|m| fail(lineno + 1, m))?);
            }
            points
        }
        CloudFormat::PlyAscii => parse_ply(text).map_err(|(line, m)| fail(line, m))?,
    };
    if points.is_empty() {
        return Err(Error::EmptyInput(format!("{} contains no points", origin.display())));
    }
    let has_normals = match format {
        CloudFormat::Xyz => false,
        CloudFormat::Xyzn => true,
        CloudFormat::PlyAscii => points.iter().all(|(_, n)| n.is_some()),
    };
    let points = points
        .into_iter()
        .map(|(p, n)| match n {
            Some(n) if has_normals => OrientedPoint::new(p, n),
            _ => OrientedPoint::bare(p),
        })
        .collect();
    PointCloud::new(points, has_normals)
}

fn parse_floats(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|tok| {
            let v: f64 = tok.parse().map_err(|_| format!("cannot parse '{tok}' as a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite value '{tok}'"))
            }
        })
        .collect()
}

fn make_point(values: &[f64], with_normal: bool) -> std::result::Result<(Vec3, Option<Vec3>), String> {
    let p = Vec3::new(values[0], values[1], values[2]);
    if !with_normal {
        return Ok((p, None));
    }
    let n = Vec3::new(values[3], values[4], values[5]);
    let len = n.norm();
    if len == 0.0 {
        return Err("zero-length normal".into());
    }
    Ok((p, Some(n / len)))
}

type PlyPoints = Vec<(Vec3, Option<Vec3>)>;

fn parse_ply(text: &str) -> std::result::Result<PlyPoints, (usize, String)> {
    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
    }

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err((1, "missing 'ply' magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let Some((i, line)) = lines.next() else {
            return Err((text.lines().count(), "header not terminated by end_header".into()));
        };
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err((lineno, "only ascii PLY is supported".into()));
                }
                saw_format = true;
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err((lineno, "malformed element line".into()));
                }
                let count = toks[2].parse().map_err(|_| (lineno, format!("bad element count '{}'", toks[2])))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return Err((lineno, "property before any element".into()));
                };
                let name = if toks.get(1) == Some(&"list") { toks.get(4) } else { toks.get(2) };
                let Some(name) = name else {
                    return Err((lineno, "malformed property line".into()));
                };
                el.props.push(name.to_string());
            }
            Some("end_header") => break,
            Some(other) => return Err((lineno, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !saw_format {
        return Err((1, "missing format line".into()));
    }

    let mut points = Vec::new();
    for el in &elements {
        let col = |name: &str| el.props.iter().position(|p| p == name);
        let xyz = [col("x"), col("y"), col("z")];
        let nrm = [col("nx"), col("ny"), col("nz")];
        let is_vertex = el.name == "vertex";
        if is_vertex && xyz.iter().any(Option::is_none) {
            return Err((1, "vertex element lacks x, y or z".into()));
        }
        let has_normals = nrm.iter().all(Option::is_some);
        let mut read = 0;
        while read < el.count {
            let Some((i, line)) = lines.next() else {
                return Err((text.lines().count(), format!("expected {} {} records", el.count, el.name)));
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            read += 1;
            if !is_vertex {
                continue;
            }
            let values = parse_floats(line).map_err(|m| (i + 1, m))?;
            if values.len() < el.props.len() {
                return Err((i + 1, format!("expected {} values, found {}", el.props.len(), values.len())));
            }
            let get = |c: [Option<usize>; 3]| Vec3::new(values[c[0].unwrap()], values[c[1].unwrap()], values[c[2].unwrap()]);
            let p = get(xyz);
            let n = if has_normals {
                let n = get(nrm);
                let len = n.norm();
                if len == 0.0 {
                    return Err((i + 1, "zero-length normal".into()));
                }
                Some(n / len)
            } else {
                None
            };
            points.push((p, n));
        }
    }
    Ok(points)
}

/// Serializes a cloud. Normals are written for `xyzn` and, when present, for PLY.
pub fn write_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::new();
    match format {
        CloudFormat::Xyz => {
            for p in cloud.points() {
                let q = p.position;
                let _ = writeln!(out, "{} {} {}", q.x, q.y, q.z);
            }
        }
        CloudFormat::Xyzn => {
            for p in cloud.points() {
                let (q, n) = (p.position, p.normal);
                let _ = writeln!(out, "{} {} {} {} {} {}", q.x, q.y, q.z, n.x, n.y, n.z);
            }
        }
        CloudFormat::PlyAscii => {
            out.push_str("ply\nformat ascii 1.0\n");
            let _ = writeln!(out, "element vertex {}", cloud.len());
            out.push_str("property double x\nproperty double y\nproperty double z\n");
            if cloud.has_normals() {
                out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
            }
            out.push_str("end_header\n");
            for p in cloud.points() {
                let q = p.position;
                if cloud.has_normals() {
                    let n = p.normal;
                    let _ = writeln!(out, "{} {} {} {} {} {}", q.x, q.y, q.z, n.x, n.y, n.z);
                } else {
                    let _ = writeln!(out, "{} {} {}", q.x, q.y, q.z);
                }
            }
        }
    }
    out
}
