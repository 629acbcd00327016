//! ASCII PLY reader and writer for `x y z` vertex clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Property {
    name: String,
    is_list: bool,
}

const SCALAR_TYPES: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8",
    "int16", "uint16", "int32", "uint32", "float32", "float64",
];

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_ply(&text, path)
}

/// Parses ASCII PLY text. `origin` only labels error messages.
pub fn parse_ply(text: &str, origin: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(err(n, "missing 'ply' magic".into())),
        None => return Err(err(1, "empty file".into())),
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                match tok.next() {
                    Some("ascii") => {}
                    Some(other) => {
                        return Err(err(n, format!("unsupported PLY format '{other}'")))
                    }
                    None => return Err(err(n, "format line without a format".into())),
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| err(n, "element without a name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(n, "element without a valid count".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| err(n, "property before any element".into()))?;
                let words: Vec<&str> = tok.collect();
                let prop = match words.as_slice() {
                    ["list", _, _, name] => Property {
                        name: name.to_string(),
                        is_list: true,
                    },
                    [ty, name] if SCALAR_TYPES.contains(ty) => Property {
                        name: name.to_string(),
                        is_list: false,
                    },
                    _ => return Err(err(n, format!("malformed property line '{line}'"))),
                };
                elem.properties.push(prop);
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(err(n, format!("unknown header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(err(text.lines().count(), "missing end_header".into()));
    }
    if !saw_format {
        return Err(err(1, "missing format line".into()));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| err(1, "no 'vertex' element".into()))?;
    let vertex = &elements[vertex_pos];
    let find = |axis: &str| -> Result<usize> {
        vertex
            .properties
            .iter()
            .position(|p| p.name == axis && !p.is_list)
            .ok_or_else(|| err(1, format!("vertex element has no '{axis}' property")))
    };
    let (ix, iy, iz) = (find("x")?, find("y")?, find("z")?);
    if vertex.properties.iter().any(|p| p.is_list) {
        return Err(err(1, "list properties on vertices are not supported".into()));
    }

    // Elements before the vertex block are skipped line by line.
    for elem in &elements[..vertex_pos] {
        for _ in 0..elem.count {
            lines
                .next()
                .ok_or_else(|| err(0, format!("truncated '{}' element", elem.name)))?;
        }
    }

    let mut points: Vec<Point> = Vec::with_capacity(vertex.count);
    for _ in 0..vertex.count {
        let (n, line) = lines
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| err(text.lines().count(), "fewer vertices than declared".into()))?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() < vertex.properties.len() {
            return Err(err(
                n,
                format!(
                    "expected {} vertex values, found {}",
                    vertex.properties.len(),
                    values.len()
                ),
            ));
        }
        let parse = |i: usize| -> Result<f64> {
            values[i]
                .parse::<f64>()
                .map_err(|_| err(n, format!("invalid number '{}'", values[i])))
        };
        points.push([parse(ix)?, parse(iy)?, parse(iz)?]);
    }
    PointCloud::new(points).map_err(|e| err(0, e.to_string()))
}

/// Renders a cloud as ASCII PLY text.
pub fn write_ply(pc: &PointCloud) -> String {
    let mut out = String::with_capacity(32 * pc.len() + 128);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", pc.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in pc.points() {
        let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    out
}

pub fn save_pointcloud(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_ply(pc))?;
    Ok(())
}
