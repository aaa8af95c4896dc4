use std::collections::HashMap;

use super::{Point, SurfaceLabel, SurfaceTri, TetMesh};
use crate::error::{Error, Result};

/// Outward-facing local faces of a positively oriented tet.
const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

fn sorted3(t: [usize; 3]) -> [usize; 3] {
    let mut s = t;
    s.sort_unstable();
    s
}

/// Faces owned by exactly one tet, oriented out of the solid, in tet order.
pub fn boundary_faces(mesh: &TetMesh) -> Vec<[usize; 3]> {
    let mut count: HashMap<[usize; 3], u32> = HashMap::with_capacity(mesh.tets.len() * 4);
    for t in &mesh.tets {
        for f in TET_FACES {
            *count.entry(sorted3([t[f[0]], t[f[1]], t[f[2]]])).or_insert(0) += 1;
        }
    }
    let mut out = Vec::new();
    for t in &mesh.tets {
        for f in TET_FACES {
            let tri = [t[f[0]], t[f[1]], t[f[2]]];
            if count[&sorted3(tri)] == 1 {
                out.push(tri);
            }
        }
    }
    out
}

fn area_vector(nodes: &[Point], t: &[usize; 3]) -> Point {
    0.5 * (nodes[t[1]] - nodes[t[0]]).cross(&(nodes[t[2]] - nodes[t[0]]))
}

/// Volume enclosed by the whole boundary (divergence theorem on `x`).
pub fn surface_enclosed_volume(mesh: &TetMesh) -> f64 {
    boundary_faces(mesh)
        .iter()
        .map(|t| {
            let c = (mesh.nodes[t[0]] + mesh.nodes[t[1]] + mesh.nodes[t[2]]) / 3.0;
            area_vector(&mesh.nodes, t).dot(&c) / 3.0
        })
        .sum()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Labels the boundary: the planar cap at maximal `z` becomes BASE, the inner
/// of the two remaining shells ENDO and the outer EPI.
///
/// A mesh that already carries labels is returned unchanged.
pub fn extract_surfaces(mesh: &TetMesh) -> Result<TetMesh> {
    if !mesh.surface.is_empty() {
        return Ok(mesh.clone());
    }
    let faces = boundary_faces(mesh);
    if faces.is_empty() {
        return Err(Error::AmbiguousTopology("mesh has no boundary faces".into()));
    }
    let (lo, hi) = bbox(mesh.nodes.iter());
    let extent = (hi - lo).norm().max(1.0);
    let tol = 1e-9 * extent;
    let z_max = hi.z;

    let mut is_base = vec![false; faces.len()];
    for (k, t) in faces.iter().enumerate() {
        let on_plane = t.iter().all(|&i| (mesh.nodes[i].z - z_max).abs() <= tol);
        let n = area_vector(&mesh.nodes, t);
        is_base[k] = on_plane && n.z > 0.0 && n.z >= (1.0 - 1e-9) * n.norm();
    }

    let shell: Vec<usize> = (0..faces.len()).filter(|&k| !is_base[k]).collect();
    let mut uf = UnionFind::new(shell.len());
    let mut edge_owner: HashMap<(usize, usize), usize> = HashMap::new();
    for (s, &k) in shell.iter().enumerate() {
        let t = faces[k];
        for j in 0..3 {
            let (a, b) = (t[j], t[(j + 1) % 3]);
            let key = (a.min(b), a.max(b));
            match edge_owner.get(&key) {
                Some(&other) => uf.union(s, other),
                None => {
                    edge_owner.insert(key, s);
                }
            }
        }
    }
    let mut roots: Vec<usize> = (0..shell.len()).map(|s| uf.find(s)).collect();
    let mut distinct = roots.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != 2 {
        return Err(Error::AmbiguousTopology(format!(
            "expected 2 shell components, found {}",
            distinct.len()
        )));
    }
    // Inner shell has the smaller bounding box.
    let diag = |root: usize, roots: &[usize]| {
        let pts = shell
            .iter()
            .zip(roots)
            .filter(|(_, &r)| r == root)
            .flat_map(|(&k, _)| faces[k].iter().map(|&i| &mesh.nodes[i]));
        let (a, b) = bbox(pts);
        (b - a).norm()
    };
    let (d0, d1) = (diag(distinct[0], &roots), diag(distinct[1], &roots));
    let inner = if d0 <= d1 { distinct[0] } else { distinct[1] };

    let mut out = mesh.clone();
    out.surface.clear();
    let mut shell_iter = 0;
    for (k, t) in faces.iter().enumerate() {
        let label = if is_base[k] {
            SurfaceLabel::Base
        } else {
            let r = roots[shell_iter];
            shell_iter += 1;
            if r == inner {
                SurfaceLabel::Endo
            } else {
                SurfaceLabel::Epi
            }
        };
        out.surface.push(SurfaceTri { tri: *t, label });
    }
    roots.clear();
    Ok(out)
}

fn bbox<'a>(pts: impl Iterator<Item = &'a Point>) -> (Point, Point) {
    let mut lo = Point::repeat(f64::INFINITY);
    let mut hi = Point::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Plane of the basal cap closing the ENDO surface: the highest ENDO node when
/// a BASE surface exists, otherwise `z = 0` (any plane works for a closed shell).
pub(crate) fn cap_plane(mesh: &TetMesh) -> f64 {
    if mesh.has_label(SurfaceLabel::Base) {
        mesh.label_nodes(SurfaceLabel::Endo)
            .iter()
            .map(|&i| mesh.nodes[i].z)
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        0.0
    }
}

/// Volume enclosed by ENDO triangles (solid-outward orientation) and the flat
/// cap `z = z0`, using the field `(0, 0, z - z0)` whose flux through the cap
/// vanishes.
pub(crate) fn endo_cavity_volume(nodes: &[Point], endo: &[[usize; 3]], z0: f64) -> f64 {
    endo.iter()
        .map(|t| {
            let az = area_vector(nodes, t).z;
            let zbar = (nodes[t[0]].z + nodes[t[1]].z + nodes[t[2]].z) / 3.0;
            -az * (zbar - z0)
        })
        .sum()
}

/// Cavity volume (cm³) bounded by the ENDO surface and its flat basal cap.
pub fn cavity_volume(mesh: &TetMesh) -> Result<f64> {
    if !mesh.has_label(SurfaceLabel::Endo) {
        return Err(Error::MissingLabel("ENDO"));
    }
    let endo: Vec<[usize; 3]> = mesh.labelled(SurfaceLabel::Endo).copied().collect();
    Ok(endo_cavity_volume(&mesh.nodes, &endo, cap_plane(mesh)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{shell_mesh, ShellLayout};
    use std::f64::consts::PI;

    fn sphere_shell(r0: f64, r1: f64, n_theta: usize, rings: usize, layers: usize) -> TetMesh {
        shell_mesh(&ShellLayout::sphere_shell(r0, r1, n_theta, rings, layers)).unwrap()
    }

    #[test]
    fn concentric_spheres_label_inner_endo() {
        let m = extract_surfaces(&sphere_shell(1.0, 2.0, 12, 8, 3)).unwrap();
        for s in &m.surface {
            let r = s.tri.iter().map(|&i| m.nodes[i].norm()).sum::<f64>() / 3.0;
            match s.label {
                SurfaceLabel::Endo => assert!((r - 1.0).abs() < 1e-9),
                SurfaceLabel::Epi => assert!((r - 2.0).abs() < 1e-9),
                SurfaceLabel::Base => panic!("closed shell has no base"),
            }
        }
    }

    #[test]
    fn solid_ball_is_ambiguous() {
        let ball = crate::mesh::box_mesh([1.0, 1.0, 1.0], [3, 3, 3]);
        assert!(matches!(
            extract_surfaces(&ball),
            Err(Error::AmbiguousTopology(_))
        ));
    }

    #[test]
    fn boundary_volume_matches_tet_sum() {
        let m = sphere_shell(1.0, 1.5, 16, 10, 3);
        let a = m.total_volume();
        let b = surface_enclosed_volume(&m);
        assert!((a - b).abs() <= 1e-8 * a);
    }

    #[test]
    fn unit_sphere_cavity_converges_to_analytic() {
        let exact = 4.0 * PI / 3.0;
        let mut prev_err = f64::INFINITY;
        for k in [1usize, 2, 4, 8] {
            let m = extract_surfaces(&sphere_shell(1.0, 1.2, 16 * k, 12 * k, 2)).unwrap();
            let v = cavity_volume(&m).unwrap();
            let err = (v - exact).abs();
            assert!(v < exact, "inscribed polyhedron is smaller");
            assert!(err < prev_err / 3.0);
            prev_err = err;
        }
        assert!(prev_err / exact < 1e-3);
    }

    #[test]
    fn hemisphere_cavity_capped_at_base() {
        let exact = 2.0 * PI / 3.0;
        let layout = ShellLayout::truncated(
            [1.0, 1.0, 1.0],
            [1.3, 1.3, 1.3],
            0.0,
            64,
            48,
            2,
        );
        let m = extract_surfaces(&shell_mesh(&layout).unwrap()).unwrap();
        assert!(m.has_label(SurfaceLabel::Base));
        let v = cavity_volume(&m).unwrap();
        assert!((v - exact).abs() / exact < 3e-3, "v = {v}");
    }

    #[test]
    fn cavity_without_endo_is_missing_label() {
        let mut m = sphere_shell(1.0, 2.0, 8, 6, 2);
        m.surface.retain(|s| s.label != SurfaceLabel::Endo);
        assert!(matches!(cavity_volume(&m), Err(Error::MissingLabel("ENDO"))));
    }
}
