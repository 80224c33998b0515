//! Triangle meshes, per-vertex displacement fields, edge adjacency and
//! vertex weight masks, plus Wavefront OBJ import/export.
//!
//! Coordinates are millimetres. Vertex indices are 0-based in memory and
//! converted to OBJ's 1-based form at the file boundary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
}

impl FaceMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidMesh("mesh has no vertices".into()));
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, len: n });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} is degenerate: {tri:?}"
                )));
            }
        }
        if let Some(k) = vertices
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!("vertex {k}")));
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn same_topology(&self, other: &FaceMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.triangles == other.triangles
    }

    /// Template displaced by `field`, keeping the triangle list.
    pub fn displaced(&self, field: &DisplacementField) -> Result<FaceMesh> {
        if field.len() != self.n_vertices() {
            return Err(Error::size(
                "displacement length",
                self.n_vertices(),
                field.len(),
            ));
        }
        let vertices = self
            .vertices
            .iter()
            .zip(field.offsets())
            .map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]])
            .collect();
        Ok(FaceMesh {
            vertices,
            triangles: self.triangles.clone(),
        })
    }
}

/// Per-vertex 3D offsets relative to a template.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    offsets: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(offsets: Vec<Vec3>) -> Result<Self> {
        if let Some(k) = offsets
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!("displacement at vertex {k}")));
        }
        Ok(Self { offsets })
    }

    pub fn zeros(n_vertices: usize) -> Self {
        Self {
            offsets: vec![[0.0; 3]; n_vertices],
        }
    }

    /// Builds a field from a flat `[x0, y0, z0, x1, ...]` slice.
    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat displacement length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.offsets.iter().flatten().copied().collect()
    }

    /// Mean per-vertex Euclidean magnitude.
    pub fn mean_norm(&self) -> f64 {
        if self.offsets.is_empty() {
            return 0.0;
        }
        self.offsets.iter().map(|v| norm3(v)).sum::<f64>() / self.offsets.len() as f64
    }
}

pub(crate) fn norm3(v: &Vec3) -> f64 {
    let (x, y, z) = (v[0] as f64, v[1] as f64, v[2] as f64);
    (x * x + y * y + z * z).sqrt()
}

/// Sparse symmetric vertex adjacency; neighbor lists are sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyMatrix {
    /// Builds from explicit neighbor lists; they must be symmetric and free
    /// of self-loops.
    pub fn from_lists(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::IndexOutOfRange { index: j, len: n });
                }
                if j == i {
                    return Err(Error::InvalidArgument(format!("self-loop at vertex {i}")));
                }
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidArgument(format!(
                        "edge {i}-{j} is not symmetric"
                    )));
                }
            }
        }
        Ok(Self { neighbors })
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn n_vertices(&self) -> usize {
        self.neighbors.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Vertices that no triangle touches.
    pub fn isolated(&self) -> Vec<usize> {
        (0..self.neighbors.len())
            .filter(|&i| self.neighbors[i].is_empty())
            .collect()
    }
}

pub fn build_adjacency(mesh: &FaceMesh) -> AdjacencyMatrix {
    let mut neighbors = vec![Vec::new(); mesh.n_vertices()];
    for tri in mesh.triangles() {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    AdjacencyMatrix { neighbors }
}

pub fn compute_displacement(mesh: &FaceMesh, template: &FaceMesh) -> Result<DisplacementField> {
    if mesh.n_vertices() != template.n_vertices() {
        return Err(Error::TopologyMismatch(format!(
            "mesh has {} vertices, template has {}",
            mesh.n_vertices(),
            template.n_vertices()
        )));
    }
    if mesh.triangles() != template.triangles() {
        return Err(Error::TopologyMismatch("triangle lists differ".into()));
    }
    let offsets = mesh
        .vertices()
        .iter()
        .zip(template.vertices())
        .map(|(v, t)| [v[0] - t[0], v[1] - t[1], v[2] - t[2]])
        .collect();
    DisplacementField::new(offsets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegionSelector {
    Uniform,
    Vertices(Vec<usize>),
}

/// Non-negative per-vertex weights used by the reconstruction and fitting losses.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexWeightMask {
    weights: Vec<f32>,
}

impl VertexWeightMask {
    pub fn new(weights: Vec<f32>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "mask weights must be finite and non-negative".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidArgument(
                "mask needs at least one positive weight".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n_vertices: usize) -> Self {
        Self {
            weights: vec![1.0; n_vertices],
        }
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn region_mask(
    mesh: &FaceMesh,
    region: &RegionSelector,
    boost: f32,
) -> Result<VertexWeightMask> {
    if !(boost >= 0.0 && boost.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "boost must be finite and >= 0, got {boost}"
        )));
    }
    let n = mesh.n_vertices();
    let mut weights = vec![1.0f32; n];
    if let RegionSelector::Vertices(list) = region {
        for &i in list {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            weights[i] = boost;
        }
    }
    VertexWeightMask::new(weights)
}

pub fn load_obj(path: &Path) -> Result<FaceMesh> {
    let text = fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub(crate) fn parse_obj(text: &str, path: &Path) -> Result<FaceMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut faces: Vec<(usize, [usize; 3])> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<&str> = parts.collect();
                if coords.len() < 3 {
                    return Err(err(lineno, "vertex needs 3 coordinates".into()));
                }
                let mut v = [0.0f32; 3];
                for (slot, tok) in v.iter_mut().zip(&coords) {
                    *slot = tok
                        .parse()
                        .map_err(|_| err(lineno, format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let refs: Vec<&str> = parts.collect();
                if refs.len() != 3 {
                    return Err(err(
                        lineno,
                        format!("non-triangular face ({} vertices)", refs.len()),
                    ));
                }
                let mut tri = [0usize; 3];
                for (slot, tok) in tri.iter_mut().zip(&refs) {
                    let idx = tok.split('/').next().unwrap_or("");
                    let one_based: usize = idx
                        .parse()
                        .map_err(|_| err(lineno, format!("bad face index {tok:?}")))?;
                    if one_based == 0 {
                        return Err(err(lineno, "face index 0 (OBJ is 1-based)".into()));
                    }
                    *slot = one_based - 1;
                }
                faces.push((lineno, tri));
            }
            _ => {}
        }
    }
    let n = vertices.len();
    for (lineno, tri) in &faces {
        if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
            return Err(err(
                *lineno,
                format!("face index {} out of range ({} vertices)", bad + 1, n),
            ));
        }
    }
    FaceMesh::new(vertices, faces.into_iter().map(|(_, t)| t).collect())
}

pub fn save_obj(path: &Path, mesh: &FaceMesh) -> Result<()> {
    fs::write(path, format_obj(mesh))?;
    Ok(())
}

/// `{}` on f32 prints the shortest string that parses back to the same
/// float, which is at most 9 significant digits.
pub fn format_obj(mesh: &FaceMesh) -> String {
    let mut out = String::with_capacity(mesh.n_vertices() * 32 + mesh.triangles().len() * 16);
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}
