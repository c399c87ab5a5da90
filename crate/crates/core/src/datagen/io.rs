//! ASCII PLY / XYZ point files and the JSON-lines dataset manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PairMeta;
use crate::error::{Error, Result};
use crate::geometry::{EulerPose, PointCloud};

pub(super) const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    #[default]
    Ply,
    Xyz,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Ply => "ply",
            CloudFormat::Xyz => "xyz",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(CloudFormat::Ply),
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            _ => Err(Error::invalid(format!("unknown point cloud format for {}", path.display()))),
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

// `{}` on f64 prints the shortest string that parses back to the same value.
fn push_point(out: &mut String, p: &[f64; 3]) {
    let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
}

pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(pc.len() * 60 + 128);
    out.push_str("ply\nformat ascii 1.0\n");
    if let Some(id) = &pc.id {
        let _ = writeln!(out, "comment id {id}");
    }
    let _ = writeln!(out, "element vertex {}", pc.len());
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in pc.points() {
        push_point(&mut out, p);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_xyz(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(pc.len() * 60);
    for p in pc.points() {
        push_point(&mut out, p);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    match CloudFormat::from_path(path)? {
        CloudFormat::Ply => write_ply(path, pc),
        CloudFormat::Xyz => write_xyz(path, pc),
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    match CloudFormat::from_path(path)? {
        CloudFormat::Ply => read_ply(&text),
        CloudFormat::Xyz => read_xyz(&text),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| err(line, format!("not a number: `{tok}`")))?;
    if !v.is_finite() {
        return Err(err(line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

pub fn read_xyz(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(err(i + 1, format!("expected 3 coordinates, found {}", toks.len())));
        }
        pts.push([parse_f64(toks[0], i + 1)?, parse_f64(toks[1], i + 1)?, parse_f64(toks[2], i + 1)?]);
    }
    if pts.is_empty() {
        return Err(err(0, "no points"));
    }
    PointCloud::new(pts)
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// ASCII PLY with a `vertex` element carrying `x`, `y` and `z`; other
/// properties and elements are skipped.
pub fn read_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing `ply` magic")),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut id = None;
    let mut format_seen = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(err(n, "only ascii PLY is supported"));
                }
                format_seen = true;
            }
            Some("comment") => {
                if toks.get(1) == Some(&"id") && toks.len() > 2 {
                    id = Some(toks[2..].join(" "));
                }
            }
            Some("obj_info") | None => {}
            Some("element") => {
                if toks.len() != 3 {
                    return Err(err(n, "expected `element <name> <count>`"));
                }
                let count = toks[2].parse().map_err(|_| err(n, format!("bad element count `{}`", toks[2])))?;
                elements.push(Element { name: toks[1].to_string(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| err(n, "property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    if el.name == "vertex" {
                        return Err(err(n, "list properties on vertices are not supported"));
                    }
                    el.props.push(String::from("list"));
                } else if toks.len() == 3 {
                    el.props.push(toks[2].to_string());
                } else {
                    return Err(err(n, "expected `property <type> <name>`"));
                }
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some(other) => return Err(err(n, format!("unexpected header keyword `{other}`"))),
        }
    }
    let header_end = header_end.ok_or_else(|| err(0, "missing end_header"))?;
    if !format_seen {
        return Err(err(header_end, "missing format line"));
    }
    let mut pts = Vec::new();
    for el in &elements {
        let axis = |name: &str| el.props.iter().position(|p| p == name);
        let xyz = if el.name == "vertex" {
            match (axis("x"), axis("y"), axis("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(err(header_end, "vertex element lacks x, y or z")),
            }
        } else {
            None
        };
        for _ in 0..el.count {
            let (n, line) = lines.next().ok_or_else(|| err(0, format!("file ends inside element `{}`", el.name)))?;
            if let Some([x, y, z]) = xyz {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() < el.props.len() {
                    return Err(err(n, format!("expected {} values, found {}", el.props.len(), toks.len())));
                }
                pts.push([parse_f64(toks[x], n)?, parse_f64(toks[y], n)?, parse_f64(toks[z], n)?]);
            }
        }
    }
    if pts.is_empty() {
        return Err(err(header_end, "no vertices"));
    }
    let pc = PointCloud::new(pts)?;
    Ok(match id {
        Some(id) => pc.with_id(id),
        None => pc,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub a_path: String,
    pub b_path: String,
    /// Row-major 4×4 ground-truth transform taking the target's source frame
    /// onto the target.
    pub t_gt: Vec<f64>,
    pub pose: EulerPose,
    pub meta: PairMeta,
}

pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
        .collect()
}
