//! OFF, ASCII PLY and XYZ readers and writers.
//!
//! Writers print 17 significant digits so a write/read round trip is exact,
//! and every file is written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{QecError, Result};
use crate::quat::Vec3;

use super::{PointCloud, TriMesh};

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| QecError::Io(e.error))?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> QecError {
    QecError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Content lines with their 1-based line numbers; `#` comments and blank
/// lines are skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn numbers<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| parse_err(path, line, format!("bad number {t:?}"))))
        .collect()
}

fn vertex(path: &Path, line: usize, s: &str) -> Result<Vec3> {
    let v: Vec<f64> = numbers(path, line, s)?;
    if v.len() < 3 {
        return Err(parse_err(path, line, format!("expected 3 coordinates, found {}", v.len())));
    }
    if v[..3].iter().any(|c| !c.is_finite()) {
        return Err(parse_err(path, line, "non-finite coordinate"));
    }
    Ok([v[0], v[1], v[2]])
}

/// Fan triangulation of a polygon.
fn fan(poly: &[usize]) -> impl Iterator<Item = [usize; 3]> + '_ {
    (1..poly.len().saturating_sub(1)).map(move |k| [poly[0], poly[k], poly[k + 1]])
}

pub fn load_off(path: &Path) -> Result<TriMesh> {
    parse_off(path, &fs::read_to_string(path)?)
}

/// Accepts both `OFF\nV F E` and the fused `OFFV F E` header.
pub fn parse_off(path: &Path, text: &str) -> Result<TriMesh> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(path, hl, "missing OFF header"))?
        .trim();
    let (cl, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| parse_err(path, hl + 1, "missing count line"))?
    } else {
        (hl, rest)
    };
    let counts: Vec<usize> = numbers(path, cl, counts)?;
    if counts.len() < 2 {
        return Err(parse_err(path, cl, "count line needs vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);
    if nv == 0 {
        return Err(QecError::EmptyGeometry);
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| parse_err(path, cl, "file ends inside vertex list"))?;
        vertices.push(vertex(path, l, s)?);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| parse_err(path, cl, "file ends inside face list"))?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        let n: usize = toks[0].parse().map_err(|_| parse_err(path, l, "bad face size"))?;
        if n < 3 || toks.len() < n + 1 {
            return Err(parse_err(path, l, format!("face needs at least 3 indices, got {n}")));
        }
        let poly: Vec<usize> = numbers(path, l, &toks[1..=n].join(" "))?;
        if let Some(&bad) = poly.iter().find(|&&i| i >= nv) {
            return Err(parse_err(path, l, format!("vertex index {bad} out of range")));
        }
        faces.extend(fan(&poly));
    }
    TriMesh::new(vertices, faces)
}

pub fn load_ply_ascii(path: &Path) -> Result<TriMesh> {
    parse_ply_ascii(path, &fs::read_to_string(path)?)
}

/// ASCII PLY with a `vertex` element and an optional `face` element.
pub fn parse_ply_ascii(path: &Path, text: &str) -> Result<TriMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing ply magic")),
    }
    // (name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = vec![];
    loop {
        let (l, s) = lines.next().ok_or_else(|| parse_err(path, 1, "unterminated header"))?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", ..] => {}
            ["format", f, ..] => return Err(QecError::Unsupported(format!("PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let c = count.parse().map_err(|_| parse_err(path, l, "bad element count"))?;
                elements.push((name.to_string(), c, vec![]));
            }
            ["property", .., name] => match elements.last_mut() {
                Some(e) => e.2.push(name.to_string()),
                None => return Err(parse_err(path, l, "property before element")),
            },
            _ => return Err(parse_err(path, l, format!("unexpected header line {s:?}"))),
        }
    }
    let mut vertices = vec![];
    let mut faces = vec![];
    let mut body = lines.filter(|(_, s)| !s.is_empty());
    for (name, count, props) in &elements {
        for _ in 0..*count {
            let (l, s) = body.next().ok_or_else(|| parse_err(path, 0, format!("missing {name} data")))?;
            match name.as_str() {
                "vertex" => {
                    let v: Vec<f64> = numbers(path, l, s)?;
                    let col = |axis: &str| props.iter().position(|p| p == axis);
                    let (Some(x), Some(y), Some(z)) = (col("x"), col("y"), col("z")) else {
                        return Err(parse_err(path, l, "vertex element lacks x/y/z"));
                    };
                    if v.len() < props.len() {
                        return Err(parse_err(path, l, "short vertex row"));
                    }
                    vertices.push([v[x], v[y], v[z]]);
                }
                "face" => {
                    let v: Vec<usize> = numbers(path, l, s)?;
                    let n = *v.first().ok_or_else(|| parse_err(path, l, "empty face"))?;
                    if n < 3 || v.len() < n + 1 {
                        return Err(parse_err(path, l, "face needs at least 3 indices"));
                    }
                    faces.extend(fan(&v[1..=n]));
                }
                _ => {}
            }
        }
    }
    if vertices.is_empty() {
        return Err(QecError::EmptyGeometry);
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
        return Err(parse_err(path, 0, format!("face {f:?} out of range")));
    }
    TriMesh::new(vertices, faces)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(path, &fs::read_to_string(path)?)
}

pub fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let points = content_lines(text)
        .map(|(l, s)| vertex(path, l, s))
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(QecError::EmptyGeometry);
    }
    let mut c = PointCloud::new(points);
    c.source = Some(path.display().to_string());
    Ok(c)
}

fn push_vec3(out: &mut String, v: &Vec3) {
    let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", v[0], v[1], v[2]);
}

pub fn off_string(mesh: &TriMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        push_vec3(&mut s, v);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn write_off(path: &Path, mesh: &TriMesh) -> Result<()> {
    write_atomic(path, off_string(mesh).as_bytes())
}

pub fn write_ply_ascii(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    );
    for v in &mesh.vertices {
        push_vec3(&mut s, v);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    write_atomic(path, s.as_bytes())
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut s = String::with_capacity(cloud.len() * 72);
    for p in &cloud.points {
        push_vec3(&mut s, p);
    }
    write_atomic(path, s.as_bytes())
}

/// Either a mesh to sample from or a fixed point set.
#[derive(Clone, Debug)]
pub enum Geometry {
    Mesh(TriMesh),
    Points(PointCloud),
}

/// Dispatches on the file extension (`off`, `ply`, `xyz`/`txt`/`pts`).
pub fn load_geometry(path: &Path) -> Result<Geometry> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "off" => Ok(Geometry::Mesh(load_off(path)?)),
        "ply" => {
            let m = load_ply_ascii(path)?;
            if m.faces.is_empty() {
                Ok(Geometry::Points(PointCloud::new(m.vertices)))
            } else {
                Ok(Geometry::Mesh(m))
            }
        }
        "xyz" | "txt" | "pts" => Ok(Geometry::Points(load_xyz(path)?)),
        _ => Err(QecError::Unsupported(format!("file extension {ext:?} of {}", path.display()))),
    }
}
