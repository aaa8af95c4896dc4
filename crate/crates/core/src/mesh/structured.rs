//! Structured tetrahedralisations: ellipsoidal shells (open at a basal plane or
//! closed) and axis-aligned boxes.
//!
//! Hexahedral cells are cut into two prisms along a fixed surface diagonal and
//! each prism into three tets with the minimum-global-index rule, so every quad
//! face is split the same way from both sides and the result is conforming.

use std::f64::consts::PI;

use super::{tet_volume, Point, TetMesh};
use crate::error::{Error, Result};

/// Geometry and resolution of a layered ellipsoidal shell.
///
/// Layer `s` of `layers` has semi-axes interpolated linearly between `inner`
/// and `outer`. `z_base = Some(h)` truncates every layer at the plane `z = h`
/// (the LV base); `None` gives a closed shell with poles at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellLayout {
    pub inner: [f64; 3],
    pub outer: [f64; 3],
    pub z_base: Option<f64>,
    pub n_theta: usize,
    pub rings: usize,
    pub layers: usize,
}

impl ShellLayout {
    pub fn sphere_shell(r0: f64, r1: f64, n_theta: usize, rings: usize, layers: usize) -> Self {
        ShellLayout {
            inner: [r0; 3],
            outer: [r1; 3],
            z_base: None,
            n_theta,
            rings,
            layers,
        }
    }

    pub fn truncated(
        inner: [f64; 3],
        outer: [f64; 3],
        z_base: f64,
        n_theta: usize,
        rings: usize,
        layers: usize,
    ) -> Self {
        ShellLayout {
            inner,
            outer,
            z_base: Some(z_base),
            n_theta,
            rings,
            layers,
        }
    }

    pub fn node_count(&self) -> usize {
        let poles = if self.z_base.is_some() { 1 } else { 2 };
        (self.rings * self.n_theta + poles) * self.layers
    }

    pub fn tet_count(&self) -> usize {
        let poles = if self.z_base.is_some() { 1 } else { 2 };
        let per_gap = (self.rings - 1) * self.n_theta * 6 + poles * self.n_theta * 3;
        per_gap * (self.layers - 1)
    }
}

/// Splits the prism `v[0..3]` (bottom) / `v[3..6]` (top, `v[i+3]` above `v[i]`)
/// into three tets.
fn prism_to_tets(v: [usize; 6], out: &mut Vec<[usize; 4]>) {
    const PERM: [[usize; 6]; 6] = [
        [0, 1, 2, 3, 4, 5],
        [1, 2, 0, 4, 5, 3],
        [2, 0, 1, 5, 3, 4],
        [3, 5, 4, 0, 2, 1],
        [4, 3, 5, 1, 0, 2],
        [5, 4, 3, 2, 1, 0],
    ];
    let m = (0..6).min_by_key(|&i| v[i]).unwrap();
    let w: [usize; 6] = std::array::from_fn(|i| v[PERM[m][i]]);
    if w[1].min(w[5]) < w[2].min(w[4]) {
        out.push([w[0], w[1], w[2], w[5]]);
        out.push([w[0], w[1], w[5], w[4]]);
        out.push([w[0], w[4], w[5], w[3]]);
    } else {
        out.push([w[0], w[1], w[2], w[4]]);
        out.push([w[0], w[4], w[2], w[5]]);
        out.push([w[0], w[4], w[5], w[3]]);
    }
}

fn orient(nodes: &[Point], tets: &mut [[usize; 4]]) -> Result<()> {
    for (e, t) in tets.iter_mut().enumerate() {
        let v = tet_volume(&nodes[t[0]], &nodes[t[1]], &nodes[t[2]], &nodes[t[3]]);
        if v < 0.0 {
            t.swap(2, 3);
        } else if v == 0.0 {
            return Err(Error::Resolution(format!("structured tet {e} is degenerate")));
        }
    }
    Ok(())
}

/// Builds the shell and labels its boundary.
pub fn shell_mesh(layout: &ShellLayout) -> Result<TetMesh> {
    let ShellLayout {
        inner,
        outer,
        z_base,
        n_theta,
        rings,
        layers,
    } = layout.clone();
    if n_theta < 3 || rings < 2 || layers < 2 {
        return Err(Error::Resolution(format!(
            "shell needs n_theta >= 3, rings >= 2, layers >= 2 (got {n_theta}, {rings}, {layers})"
        )));
    }
    let all_pos = inner.iter().chain(&outer).all(|&a| a > 0.0 && a.is_finite());
    if !all_pos || (0..3).any(|i| outer[i] <= inner[i]) {
        return Err(Error::Resolution(format!(
            "shell semi-axes must be positive with outer > inner (inner {inner:?}, outer {outer:?})"
        )));
    }
    if let Some(h) = z_base {
        if !(h.abs() < inner[2]) {
            return Err(Error::Resolution(format!(
                "base plane z = {h} must cut the inner surface (c = {})",
                inner[2]
            )));
        }
    }

    let node_id = |k: usize, j: usize, s: usize| ((k * n_theta + j % n_theta) * layers) + s;
    let pole_lo = |s: usize| rings * n_theta * layers + s;
    let pole_hi = |s: usize| rings * n_theta * layers + layers + s;

    let mut nodes = vec![Point::zeros(); layout.node_count()];
    for s in 0..layers {
        let f = s as f64 / (layers - 1) as f64;
        let ax: [f64; 3] = std::array::from_fn(|i| inner[i] + f * (outer[i] - inner[i]));
        let (t0, dt) = match z_base {
            Some(h) => {
                let tb = (h / ax[2]).acos();
                (tb, (PI - tb) / rings as f64)
            }
            None => {
                let dt = PI / (rings + 1) as f64;
                (dt, dt)
            }
        };
        for k in 0..rings {
            let t = t0 + k as f64 * dt;
            for j in 0..n_theta {
                let th = 2.0 * PI * j as f64 / n_theta as f64;
                let z = match (k, z_base) {
                    (0, Some(h)) => h,
                    _ => ax[2] * t.cos(),
                };
                nodes[node_id(k, j, s)] =
                    Point::new(ax[0] * t.sin() * th.cos(), ax[1] * t.sin() * th.sin(), z);
            }
        }
        nodes[pole_lo(s)] = Point::new(0.0, 0.0, -ax[2]);
        if z_base.is_none() {
            nodes[pole_hi(s)] = Point::new(0.0, 0.0, ax[2]);
        }
    }

    let mut tets = Vec::with_capacity(layout.tet_count());
    for s in 0..layers - 1 {
        for k in 0..rings - 1 {
            for j in 0..n_theta {
                let a = |kk, jj, ss| node_id(kk, jj, ss);
                prism_to_tets(
                    [
                        a(k, j, s),
                        a(k + 1, j, s),
                        a(k + 1, j + 1, s),
                        a(k, j, s + 1),
                        a(k + 1, j, s + 1),
                        a(k + 1, j + 1, s + 1),
                    ],
                    &mut tets,
                );
                prism_to_tets(
                    [
                        a(k, j, s),
                        a(k + 1, j + 1, s),
                        a(k, j + 1, s),
                        a(k, j, s + 1),
                        a(k + 1, j + 1, s + 1),
                        a(k, j + 1, s + 1),
                    ],
                    &mut tets,
                );
            }
        }
        for j in 0..n_theta {
            let last = rings - 1;
            prism_to_tets(
                [
                    pole_lo(s),
                    node_id(last, j, s),
                    node_id(last, j + 1, s),
                    pole_lo(s + 1),
                    node_id(last, j, s + 1),
                    node_id(last, j + 1, s + 1),
                ],
                &mut tets,
            );
            if z_base.is_none() {
                prism_to_tets(
                    [
                        pole_hi(s),
                        node_id(0, j + 1, s),
                        node_id(0, j, s),
                        pole_hi(s + 1),
                        node_id(0, j + 1, s + 1),
                        node_id(0, j, s + 1),
                    ],
                    &mut tets,
                );
            }
        }
    }
    orient(&nodes, &mut tets)?;
    let mesh = TetMesh::new(nodes, tets);
    mesh.validate()?;
    super::extract_surfaces(&mesh)
}

/// Axis-aligned box `[0, size]` with `cells` hexahedra per axis, unlabelled.
pub fn box_mesh(size: [f64; 3], cells: [usize; 3]) -> TetMesh {
    let [nx, ny, nz] = cells;
    let id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push(Point::new(
                    size[0] * i as f64 / nx as f64,
                    size[1] * j as f64 / ny as f64,
                    size[2] * k as f64 / nz as f64,
                ));
            }
        }
    }
    let mut tets = Vec::with_capacity(nx * ny * nz * 6);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let q = [id(i, j, k), id(i + 1, j, k), id(i + 1, j + 1, k), id(i, j + 1, k)];
                let up = |v: usize| v + (nx + 1) * (ny + 1);
                prism_to_tets([q[0], q[1], q[2], up(q[0]), up(q[1]), up(q[2])], &mut tets);
                prism_to_tets([q[0], q[2], q[3], up(q[0]), up(q[2]), up(q[3])], &mut tets);
            }
        }
    }
    orient(&nodes, &mut tets).expect("box cells are non-degenerate");
    TetMesh::new(nodes, tets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{boundary_faces, SurfaceLabel};
    use std::collections::HashMap;

    /// Every edge of the closed boundary is shared by exactly two triangles
    /// with opposite orientation.
    fn assert_closed_manifold(m: &TetMesh) {
        let mut edges: HashMap<(usize, usize), i32> = HashMap::new();
        for s in &m.surface {
            for j in 0..3 {
                let (a, b) = (s.tri[j], s.tri[(j + 1) % 3]);
                *edges.entry((a, b)).or_insert(0) += 1;
            }
        }
        for (&(a, b), &c) in &edges {
            assert_eq!(c, 1, "edge {a}-{b} repeated");
            assert_eq!(edges.get(&(b, a)), Some(&1), "edge {a}-{b} unmatched");
        }
    }

    #[test]
    fn box_is_conforming() {
        let m = box_mesh([1.0, 2.0, 0.5], [3, 2, 4]);
        m.validate().unwrap();
        assert!((m.total_volume() - 1.0).abs() < 1e-12);
        // 6 faces × 2 triangles per boundary quad.
        let quads = 2 * (3 * 2 + 3 * 4 + 2 * 4);
        assert_eq!(boundary_faces(&m).len(), 2 * quads);
    }

    #[test]
    fn truncated_shell_counts_and_labels() {
        let layout = ShellLayout::truncated([2.5, 2.5, 6.0], [3.5, 3.5, 6.8], 1.5, 24, 16, 2);
        let m = shell_mesh(&layout).unwrap();
        assert_eq!(m.n_nodes(), layout.node_count());
        assert_eq!(m.n_tets(), layout.tet_count());
        assert!((600..=1000).contains(&m.n_nodes()));
        assert!((1800..=2500).contains(&m.n_tets()));
        assert_closed_manifold(&m);
        for label in [SurfaceLabel::Endo, SurfaceLabel::Epi, SurfaceLabel::Base] {
            assert!(m.has_label(label));
        }
        // BASE oracle: faces whose nodes all sit on the basal plane.
        for s in &m.surface {
            let on_plane = s.tri.iter().all(|&i| (m.nodes[i].z - 1.5).abs() <= 1e-9);
            assert_eq!(on_plane, s.label == SurfaceLabel::Base);
        }
    }

    #[test]
    fn closed_shell_is_manifold() {
        let m = shell_mesh(&ShellLayout::sphere_shell(1.0, 2.0, 10, 7, 4)).unwrap();
        assert_closed_manifold(&m);
        assert!(!m.has_label(SurfaceLabel::Base));
    }

    #[test]
    fn bad_layout_is_resolution_error() {
        let layout = ShellLayout::truncated([2.0, 2.0, 6.0], [2.0, 2.0, 6.0], 1.0, 24, 16, 2);
        assert!(matches!(shell_mesh(&layout), Err(Error::Resolution(_))));
    }
}
