//! Triangle meshes: OBJ ingestion, canonical framing, view orientation and
//! cylindrical UV generation.
//!
//! Coordinates are y-up and right-handed. A view rotates the model by
//! `R = R_roll * R_pitch * R_yaw`, so yaw (about +y) is applied first, then
//! pitch (about +x), then roll (about +z).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Uv = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("line {line}: malformed face: {reason}")]
    MalformedFace { line: usize, reason: String },
    #[error("line {line}: malformed vertex: {reason}")]
    MalformedVertex { line: usize, reason: String },
    #[error("mesh has no vertices")]
    EmptyMesh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub name: String,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-face-corner texture coordinates, one triple per face.
    pub uvs: Option<Vec<[Uv; 3]>>,
}

impl Mesh {
    pub fn new(name: impl Into<String>, vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self {
            name: name.into(),
            vertices,
            faces,
            uvs: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(mut lo, mut hi), v| {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
            (lo, hi)
        }))
    }

    /// Checks the structural invariants (index range, UV count, finiteness).
    pub fn validate(&self) -> Result<(), String> {
        let n = self.vertices.len();
        if let Some(i) = self.faces.iter().position(|f| f.iter().any(|&k| k >= n)) {
            return Err(format!("face {i} references a vertex out of range"));
        }
        if let Some(uvs) = &self.uvs {
            if uvs.len() != self.faces.len() {
                return Err(format!("{} uv triples for {} faces", uvs.len(), self.faces.len()));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err("non-finite vertex coordinate".into());
        }
        Ok(())
    }

    /// Writes the mesh as OBJ text (`v`, optional `vt`, `f`).
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        writeln!(out, "o {}", self.name).unwrap();
        for v in &self.vertices {
            writeln!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]).unwrap();
        }
        match &self.uvs {
            None => {
                for f in &self.faces {
                    writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
                }
            }
            Some(uvs) => {
                for tri in uvs {
                    for uv in tri {
                        writeln!(out, "vt {:?} {:?}", uv[0], uv[1]).unwrap();
                    }
                }
                for (i, f) in self.faces.iter().enumerate() {
                    let t = 3 * i + 1;
                    writeln!(
                        out,
                        "f {}/{} {}/{} {}/{}",
                        f[0] + 1,
                        t,
                        f[1] + 1,
                        t + 1,
                        f[2] + 1,
                        t + 2
                    )
                    .unwrap();
                }
            }
        }
        out
    }
}

fn resolve_index(raw: &str, count: usize, line: usize, what: &str) -> Result<usize, MeshError> {
    let bad = |reason: String| MeshError::MalformedFace { line, reason };
    let idx: i64 = raw
        .parse()
        .map_err(|_| bad(format!("non-integer {what} index {raw:?}")))?;
    let resolved = match idx {
        0 => return Err(bad(format!("{what} index 0 is invalid"))),
        i if i > 0 => i - 1,
        i => count as i64 + i,
    };
    if resolved < 0 || resolved >= count as i64 {
        return Err(bad(format!("{what} index {idx} out of range (have {count})")));
    }
    Ok(resolved as usize)
}

/// Parses OBJ text. Only `v`, `vt` and `f` are interpreted; normals and every
/// other directive are skipped. Polygons are fan-triangulated from their first
/// corner.
pub fn parse_obj(text: &str) -> Result<Mesh, MeshError> {
    let mut name = String::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut tex: Vec<Uv> = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs: Vec<Option<[Uv; 3]>> = Vec::new();

    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        let Some(directive) = tokens.next() else {
            continue;
        };
        match directive {
            "v" | "vt" => {
                let want = if directive == "v" { 3 } else { 2 };
                let mut coords = [0.0; 3];
                for c in coords.iter_mut().take(want) {
                    let tok = tokens.next().ok_or_else(|| MeshError::MalformedVertex {
                        line,
                        reason: format!("expected {want} coordinates"),
                    })?;
                    *c = tok
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| MeshError::MalformedVertex {
                            line,
                            reason: format!("non-numeric coordinate {tok:?}"),
                        })?;
                }
                if directive == "v" {
                    vertices.push(coords);
                } else {
                    tex.push([coords[0], coords[1]]);
                }
            }
            "f" => {
                let mut corners = Vec::new();
                for tok in tokens {
                    let mut parts = tok.split('/');
                    let v = resolve_index(parts.next().unwrap_or(""), vertices.len(), line, "vertex")?;
                    let t = match parts.next() {
                        Some(s) if !s.is_empty() => Some(resolve_index(s, tex.len(), line, "texture")?),
                        _ => None,
                    };
                    corners.push((v, t));
                }
                if corners.len() < 3 {
                    return Err(MeshError::MalformedFace {
                        line,
                        reason: format!("{} indices, need at least 3", corners.len()),
                    });
                }
                for k in 1..corners.len() - 1 {
                    let tri = [corners[0], corners[k], corners[k + 1]];
                    faces.push([tri[0].0, tri[1].0, tri[2].0]);
                    face_uvs.push(match (tri[0].1, tri[1].1, tri[2].1) {
                        (Some(a), Some(b), Some(c)) => Some([tex[a], tex[b], tex[c]]),
                        _ => None,
                    });
                }
            }
            "o" if name.is_empty() => {
                name = content.trim_start()[1..].trim().to_string();
            }
            _ => {}
        }
    }

    // UVs are kept only when every face carries them.
    let uvs = if !face_uvs.is_empty() && face_uvs.iter().all(Option::is_some) {
        Some(face_uvs.into_iter().flatten().collect())
    } else {
        None
    };
    Ok(Mesh {
        name,
        vertices,
        faces,
        uvs,
    })
}

/// Centers the bounding box at the origin and scales the largest extent to 1.
pub fn fit_to_unit(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let (lo, hi) = mesh.bounds().ok_or(MeshError::EmptyMesh)?;
    let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        for k in 0..3 {
            v[k] = (v[k] - center[k]) * scale;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLabel {
    Front,
    Side,
    Intra,
    Custom,
}

impl ViewLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::Front => "front",
            ViewLabel::Side => "side",
            ViewLabel::Intra => "intra",
            ViewLabel::Custom => "custom",
        }
    }
}

impl std::str::FromStr for ViewLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "front" => Ok(ViewLabel::Front),
            "side" => Ok(ViewLabel::Side),
            "intra" => Ok(ViewLabel::Intra),
            "custom" => Ok(ViewLabel::Custom),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

/// An object orientation in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPreset {
    pub label: ViewLabel,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl ViewPreset {
    pub const FRONT: ViewPreset = ViewPreset::fixed(ViewLabel::Front, 0.0, 0.0);
    pub const SIDE: ViewPreset = ViewPreset::fixed(ViewLabel::Side, 90.0, 0.0);
    pub const INTRA: ViewPreset = ViewPreset::fixed(ViewLabel::Intra, 45.0, 15.0);

    const fn fixed(label: ViewLabel, yaw: f64, pitch: f64) -> Self {
        Self {
            label,
            yaw,
            pitch,
            roll: 0.0,
        }
    }

    pub fn custom(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            label: ViewLabel::Custom,
            yaw,
            pitch,
            roll,
        }
    }

    /// Canonical angles for a named label; `Custom` maps to the identity.
    pub fn named(label: ViewLabel) -> Self {
        match label {
            ViewLabel::Front => Self::FRONT,
            ViewLabel::Side => Self::SIDE,
            ViewLabel::Intra => Self::INTRA,
            ViewLabel::Custom => Self::custom(0.0, 0.0, 0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.yaw.is_finite() && self.pitch.is_finite() && self.roll.is_finite()
    }

    /// Row-major rotation matrix `R_roll * R_pitch * R_yaw`.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (sy, cy) = self.yaw.to_radians().sin_cos();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (sr, cr) = self.roll.to_radians().sin_cos();
        let yaw = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let pitch = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let roll = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        matmul(&roll, &matmul(&pitch, &yaw))
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn rotate(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

/// Rotates the mesh about the origin into the given view.
pub fn apply_view(mesh: &Mesh, view: &ViewPreset) -> Result<Mesh, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let r = view.rotation();
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        *v = rotate(&r, *v);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UvScheme {
    Cylindrical,
}

/// Supplies texture coordinates by projecting onto a cylinder around +y.
/// Meshes that already carry UVs are returned unchanged.
pub fn generate_uv(mesh: &Mesh, scheme: UvScheme) -> Result<Mesh, MeshError> {
    let UvScheme::Cylindrical = scheme;
    let (lo, hi) = mesh.bounds().ok_or(MeshError::EmptyMesh)?;
    if mesh.uvs.is_some() {
        return Ok(mesh.clone());
    }
    let height = hi[1] - lo[1];
    let project = |p: Vec3| -> Uv {
        let u = (p[2].atan2(p[0]) + std::f64::consts::PI) / std::f64::consts::TAU;
        let v = if height > 0.0 {
            (p[1] - lo[1]) / height
        } else {
            0.5
        };
        [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
    };
    let mut out = mesh.clone();
    out.uvs = Some(
        mesh.faces
            .iter()
            .map(|f| f.map(|k| project(mesh.vertices[k])))
            .collect(),
    );
    Ok(out)
}
