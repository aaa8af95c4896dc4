//! Transmural coordinate and rule-based fiber/sheet/sheet-normal frames.
//!
//! `phi` is the linear finite-element solution of Laplace's equation with
//! `phi = 0` on ENDO and `phi = 1` on EPI. Each element's sheet-normal is the
//! normalised gradient of `phi`; the fiber direction rotates from the local
//! circumferential direction towards the longitudinal one by the helix angle,
//! which varies linearly with the element-mean transmural coordinate.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{shape_gradients, Point, SurfaceLabel, TetMesh};
use crate::sparse::{pcg, CsrMatrix};

pub const PHI_REL_TOL: f64 = 1e-10;

/// Orthonormal right-handed material frame of one element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberFrame {
    pub f: Point,
    pub s: Point,
    pub n: Point,
}

impl FiberFrame {
    /// Rotation whose columns are `(f, s, n)`.
    pub fn rotation(&self) -> nalgebra::Matrix3<f64> {
        nalgebra::Matrix3::from_columns(&[self.f, self.s, self.n])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiberField {
    pub phi: Vec<f64>,
    pub frames: Vec<FiberFrame>,
    /// Degrees.
    pub theta_endo: f64,
    /// Degrees.
    pub theta_epi: f64,
}

pub fn solve_transmural_phi(mesh: &TetMesh) -> Result<Vec<f64>> {
    let endo = mesh.label_nodes(SurfaceLabel::Endo);
    let epi = mesh.label_nodes(SurfaceLabel::Epi);
    if endo.is_empty() {
        return Err(Error::MissingLabel("ENDO"));
    }
    if epi.is_empty() {
        return Err(Error::MissingLabel("EPI"));
    }
    let n = mesh.n_nodes();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for &i in &endo {
        fixed[i] = Some(0.0);
    }
    for &i in &epi {
        fixed[i] = Some(1.0);
    }
    let mut free_id = vec![usize::MAX; n];
    let mut n_free = 0;
    for i in 0..n {
        if fixed[i].is_none() {
            free_id[i] = n_free;
            n_free += 1;
        }
    }
    let mut phi: Vec<f64> = fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
    if n_free == 0 {
        return Ok(phi);
    }

    let mut trips = Vec::with_capacity(mesh.n_tets() * 16);
    let mut rhs = vec![0.0; n_free];
    for e in 0..mesh.n_tets() {
        let t = mesh.tets[e];
        let (g, vol) = shape_gradients(&mesh.tet_points(e))
            .ok_or_else(|| Error::Topology(format!("degenerate tet {e}")))?;
        for a in 0..4 {
            let ia = free_id[t[a]];
            if ia == usize::MAX {
                continue;
            }
            for b in 0..4 {
                let k = vol * g[a].dot(&g[b]);
                match fixed[t[b]] {
                    Some(v) => rhs[ia] -= k * v,
                    None => trips.push((ia, free_id[t[b]], k)),
                }
            }
        }
    }
    let k = CsrMatrix::from_triplets(n_free, trips);
    let mut x = vec![0.5; n_free];
    pcg(&k, &rhs, &mut x, PHI_REL_TOL, 20 * n_free + 100)?;
    for i in 0..n {
        if free_id[i] != usize::MAX {
            // The discrete maximum principle can fail by round-off on
            // obtuse meshes; the field is a coordinate, so clamp.
            phi[i] = x[free_id[i]].clamp(0.0, 1.0);
        }
    }
    Ok(phi)
}

fn element_neighbours(mesh: &TetMesh) -> Vec<Vec<usize>> {
    let mut owner: HashMap<[usize; 3], usize> = HashMap::new();
    let mut nb = vec![Vec::new(); mesh.n_tets()];
    for (e, t) in mesh.tets.iter().enumerate() {
        for skip in 0..4 {
            let mut f = [0usize; 3];
            let mut k = 0;
            for (i, &v) in t.iter().enumerate() {
                if i != skip {
                    f[k] = v;
                    k += 1;
                }
            }
            f.sort_unstable();
            if let Some(&o) = owner.get(&f) {
                nb[e].push(o);
                nb[o].push(e);
            } else {
                owner.insert(f, e);
            }
        }
    }
    nb
}

fn frame_from(a_n: Point, e_c: Point, theta_deg: f64) -> FiberFrame {
    let e_l = a_n.cross(&e_c);
    let th = theta_deg.to_radians();
    let f = th.cos() * e_c + th.sin() * e_l;
    let s = a_n.cross(&f);
    FiberFrame { f, s, n: a_n }
}

/// Helix angle (degrees) at transmural coordinate `xi`.
pub fn helix_angle(theta_endo: f64, theta_epi: f64, xi: f64) -> f64 {
    theta_endo + xi * (theta_epi - theta_endo)
}

pub fn assign_fibers(
    mesh: &TetMesh,
    phi: &[f64],
    theta_endo: f64,
    theta_epi: f64,
) -> Result<FiberField> {
    if phi.len() != mesh.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "phi has {} values for {} nodes",
            phi.len(),
            mesh.n_nodes()
        )));
    }
    let z = Point::z();
    let ne = mesh.n_tets();
    let mut a_n = vec![Point::zeros(); ne];
    let mut theta = vec![0.0; ne];
    let mut e_c: Vec<Option<Point>> = vec![None; ne];
    for e in 0..ne {
        let t = mesh.tets[e];
        let (g, _) = shape_gradients(&mesh.tet_points(e))
            .ok_or_else(|| Error::Topology(format!("degenerate tet {e}")))?;
        let grad: Point = (0..4).map(|a| g[a] * phi[t[a]]).sum();
        let norm = grad.norm();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateGradient(e));
        }
        a_n[e] = grad / norm;
        let xi = t.iter().map(|&i| phi[i]).sum::<f64>() / 4.0;
        theta[e] = helix_angle(theta_endo, theta_epi, xi);
        let c = z.cross(&a_n[e]);
        if c.norm() >= 1e-8 {
            e_c[e] = Some(c.normalize());
        }
    }

    if e_c.iter().any(Option::is_none) {
        // Apex fallback: inherit the circumferential direction from the
        // neighbour that reaches the element first in a BFS from resolved ones.
        let nb = element_neighbours(mesh);
        let mut queue: VecDeque<usize> = (0..ne).filter(|&e| e_c[e].is_some()).collect();
        while let Some(e) = queue.pop_front() {
            let src = e_c[e].unwrap();
            for &o in &nb[e] {
                if e_c[o].is_none() {
                    let proj = src - a_n[o] * src.dot(&a_n[o]);
                    if proj.norm() < 1e-8 {
                        return Err(Error::PoleDegeneracy(o));
                    }
                    e_c[o] = Some(proj.normalize());
                    queue.push_back(o);
                }
            }
        }
        if let Some(e) = e_c.iter().position(Option::is_none) {
            return Err(Error::PoleDegeneracy(e));
        }
    }

    let frames = (0..ne)
        .map(|e| frame_from(a_n[e], e_c[e].unwrap(), theta[e]))
        .collect();
    Ok(FiberField {
        phi: phi.to_vec(),
        frames,
        theta_endo,
        theta_epi,
    })
}

/// `phi` followed by frame assignment.
pub fn fiber_field(mesh: &TetMesh, theta_endo: f64, theta_epi: f64) -> Result<FiberField> {
    let phi = solve_transmural_phi(mesh)?;
    assign_fibers(mesh, &phi, theta_endo, theta_epi)
}

/// Writes tets with `phi` as point data and the three frame vectors as cell
/// data, for visual inspection.
pub fn export_fibers_vtk(mesh: &TetMesh, field: &FiberField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\nunloadlab fiber field\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.n_nodes());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "CELLS {} {}", mesh.n_tets(), 5 * mesh.n_tets());
    for t in &mesh.tets {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", mesh.n_tets());
    for _ in &mesh.tets {
        let _ = writeln!(s, "10");
    }
    let _ = writeln!(s, "POINT_DATA {}\nSCALARS phi double 1\nLOOKUP_TABLE default", mesh.n_nodes());
    for v in &field.phi {
        let _ = writeln!(s, "{v}");
    }
    let _ = writeln!(s, "CELL_DATA {}", mesh.n_tets());
    for (name, pick) in [
        ("fiber", 0usize),
        ("sheet", 1),
        ("sheet_normal", 2),
    ] {
        let _ = writeln!(s, "VECTORS {name} double");
        for fr in &field.frames {
            let v = [fr.f, fr.s, fr.n][pick];
            let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
