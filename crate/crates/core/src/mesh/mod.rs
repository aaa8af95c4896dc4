//! Tetrahedral meshes with labelled boundary surfaces.
//!
//! Geometry is in centimetres. Tets are stored with positive orientation
//! (`(b-a)·((c-a)×(d-a)) > 0`); boundary triangles are oriented with their
//! normal pointing out of the solid.

mod io;
mod structured;
pub(crate) mod surface;

pub use io::{load_mesh, save_mesh, save_vtk_with_point_scalar, MeshFormat};
pub use structured::{box_mesh, shell_mesh, ShellLayout};
pub use surface::{boundary_faces, cavity_volume, extract_surfaces, surface_enclosed_volume};

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SurfaceLabel {
    Endo,
    Epi,
    Base,
}

impl SurfaceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceLabel::Endo => "ENDO",
            SurfaceLabel::Epi => "EPI",
            SurfaceLabel::Base => "BASE",
        }
    }

    /// Integer code used in VTK cell data. Tets carry 0.
    pub fn code(self) -> i32 {
        match self {
            SurfaceLabel::Endo => 1,
            SurfaceLabel::Epi => 2,
            SurfaceLabel::Base => 3,
        }
    }

    pub fn from_code(code: i32) -> Option<Self> {
        match code {
            1 => Some(SurfaceLabel::Endo),
            2 => Some(SurfaceLabel::Epi),
            3 => Some(SurfaceLabel::Base),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ENDO" => Some(SurfaceLabel::Endo),
            "EPI" => Some(SurfaceLabel::Epi),
            "BASE" => Some(SurfaceLabel::Base),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurfaceTri {
    pub tri: [usize; 3],
    pub label: SurfaceLabel,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TetMesh {
    pub nodes: Vec<Point>,
    pub tets: Vec<[usize; 4]>,
    pub surface: Vec<SurfaceTri>,
}

/// Signed volume of the tetrahedron `(a, b, c, d)`.
pub fn tet_volume(a: &Point, b: &Point, c: &Point, d: &Point) -> f64 {
    (b - a).dot(&(c - a).cross(&(d - a))) / 6.0
}

/// Gradients of the four linear shape functions and the element volume.
///
/// Returns `None` for a degenerate element.
pub fn shape_gradients(x: &[Point; 4]) -> Option<([Point; 4], f64)> {
    let d = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
    let vol = d.determinant() / 6.0;
    let inv = d.try_inverse()?;
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    Some(([-(g1 + g2 + g3), g1, g2, g3], vol))
}

impl TetMesh {
    pub fn new(nodes: Vec<Point>, tets: Vec<[usize; 4]>) -> Self {
        TetMesh {
            nodes,
            tets,
            surface: Vec::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_points(&self, e: usize) -> [Point; 4] {
        let t = self.tets[e];
        [
            self.nodes[t[0]],
            self.nodes[t[1]],
            self.nodes[t[2]],
            self.nodes[t[3]],
        ]
    }

    pub fn tet_signed_volume(&self, e: usize) -> f64 {
        let p = self.tet_points(e);
        tet_volume(&p[0], &p[1], &p[2], &p[3])
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.n_tets()).map(|e| self.tet_signed_volume(e)).sum()
    }

    pub fn has_label(&self, label: SurfaceLabel) -> bool {
        self.surface.iter().any(|s| s.label == label)
    }

    pub fn labelled(&self, label: SurfaceLabel) -> impl Iterator<Item = &[usize; 3]> {
        self.surface
            .iter()
            .filter(move |s| s.label == label)
            .map(|s| &s.tri)
    }

    /// Sorted, de-duplicated node ids touched by triangles with `label`.
    pub fn label_nodes(&self, label: SurfaceLabel) -> Vec<usize> {
        let set: BTreeSet<usize> = self.labelled(label).flat_map(|t| t.iter().copied()).collect();
        set.into_iter().collect()
    }

    /// Undirected 1-skeleton of the tets, each edge once as `(lo, hi)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(6 * self.tets.len());
        for t in &self.tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    edges.push((t[i].min(t[j]), t[i].max(t[j])));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Mean tet volume.
    pub fn mean_tet_volume(&self) -> f64 {
        if self.tets.is_empty() {
            return 0.0;
        }
        self.total_volume() / self.n_tets() as f64
    }

    /// Checks index bounds and positive orientation of every tet.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Topology("mesh has no nodes".into()));
        }
        if n > 1_000_000 {
            return Err(Error::Topology(format!("{n} nodes exceeds the 10^6 limit")));
        }
        for (e, t) in self.tets.iter().enumerate() {
            if let Some(&bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::Topology(format!(
                    "tet {e} references node {bad} of {n}"
                )));
            }
            let v = self.tet_signed_volume(e);
            if !(v > 0.0) {
                return Err(Error::Topology(format!(
                    "tet {e} has non-positive volume {v:.3e}"
                )));
            }
        }
        for (k, s) in self.surface.iter().enumerate() {
            if let Some(&bad) = s.tri.iter().find(|&&i| i >= n) {
                return Err(Error::Topology(format!(
                    "surface triangle {k} references node {bad} of {n}"
                )));
            }
        }
        if self.nodes.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Topology("non-finite node coordinate".into()));
        }
        Ok(())
    }

    /// Same connectivity and labels, new coordinates.
    pub fn with_nodes(&self, nodes: Vec<Point>) -> TetMesh {
        assert_eq!(nodes.len(), self.nodes.len());
        TetMesh {
            nodes,
            tets: self.tets.clone(),
            surface: self.surface.clone(),
        }
    }

    /// Nodes displaced by `u`.
    pub fn displaced(&self, u: &[Point]) -> TetMesh {
        assert_eq!(u.len(), self.nodes.len());
        self.with_nodes(self.nodes.iter().zip(u).map(|(x, d)| x + d).collect())
    }

    /// True when both meshes have identical tet arrays and node counts.
    pub fn same_connectivity(&self, other: &TetMesh) -> bool {
        self.nodes.len() == other.nodes.len() && self.tets == other.tets
    }

    /// Largest element aspect ratio, normalised so a regular tet scores 1.
    pub fn max_aspect_ratio(&self) -> f64 {
        (0..self.n_tets())
            .map(|e| aspect_ratio(&self.tet_points(e)))
            .fold(0.0, f64::max)
    }
}

/// Longest edge over inradius, scaled by `1 / (2√6)` so the regular tet is 1.
pub fn aspect_ratio(x: &[Point; 4]) -> f64 {
    let vol = tet_volume(&x[0], &x[1], &x[2], &x[3]).abs();
    let faces = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];
    let area: f64 = faces
        .iter()
        .map(|f| 0.5 * (x[f[1]] - x[f[0]]).cross(&(x[f[2]] - x[f[0]])).norm())
        .sum();
    let mut longest: f64 = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            longest = longest.max((x[i] - x[j]).norm());
        }
    }
    if vol <= 0.0 {
        return f64::INFINITY;
    }
    let inradius = 3.0 * vol / area;
    longest / (2.0 * 6f64.sqrt() * inradius)
}

/// Affine map `x ↦ (x - centroid) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        NormalizationTransform {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    fn c(&self) -> Point {
        Point::from(self.centroid)
    }

    pub fn apply(&self, p: &Point) -> Point {
        (p - self.c()) / self.scale
    }

    pub fn invert(&self, p: &Point) -> Point {
        p * self.scale + self.c()
    }

    /// Displacements only scale.
    pub fn apply_vector(&self, v: &Point) -> Point {
        v / self.scale
    }

    pub fn invert_vector(&self, v: &Point) -> Point {
        v * self.scale
    }

    pub fn apply_mesh(&self, mesh: &TetMesh) -> TetMesh {
        mesh.with_nodes(mesh.nodes.iter().map(|p| self.apply(p)).collect())
    }

    pub fn invert_mesh(&self, mesh: &TetMesh) -> TetMesh {
        mesh.with_nodes(mesh.nodes.iter().map(|p| self.invert(p)).collect())
    }
}

/// Centres the nodes at the origin and scales them to unit RMS radius.
pub fn normalize_coords(mesh: &TetMesh) -> Result<(TetMesh, NormalizationTransform)> {
    let tf = normalization_of(&mesh.nodes)?;
    Ok((tf.apply_mesh(mesh), tf))
}

pub fn normalization_of(nodes: &[Point]) -> Result<NormalizationTransform> {
    if nodes.is_empty() {
        return Err(Error::DegenerateMesh("no nodes".into()));
    }
    let n = nodes.len() as f64;
    let c = nodes.iter().fold(Point::zeros(), |acc, p| acc + p) / n;
    let ms = nodes.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n;
    let scale = ms.sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateMesh(
            "all nodes coincide; RMS radius is zero".into(),
        ));
    }
    Ok(NormalizationTransform {
        centroid: [c.x, c.y, c.z],
        scale,
    })
}
