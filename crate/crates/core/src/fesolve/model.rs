//! Discrete total potential, its gradient and its Hessian on a fixed
//! reference mesh.

use faer::sparse::{SparseColMatRef, SymbolicSparseColMat, SymbolicSparseColMatRef};
use nalgebra::{Matrix3, SMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::{cofactor, fung_response, MaterialParams};
use crate::error::{Error, Result};
use crate::fibers::FiberFrame;
use crate::mesh::surface::{cap_plane, endo_cavity_volume};
use crate::mesh::{shape_gradients, Point, SurfaceLabel, TetMesh};

/// How the cavity pressure does work on the ENDO surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LoadMode {
    /// `−P·ΔV_cavity` on the deformed configuration.
    #[default]
    Follower,
    /// Reference-configuration traction `P·n₀·A₀` applied to the mean
    /// displacement of each ENDO triangle.
    Dead,
}

impl LoadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "follower" => Ok(LoadMode::Follower),
            "dead" => Ok(LoadMode::Dead),
            _ => Err(Error::Config(format!("unknown load mode '{s}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoadMode::Follower => "FOLLOWER",
            LoadMode::Dead => "DEAD",
        }
    }
}

/// Homogeneous Dirichlet constraints as `(node, axis)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub fixed: Vec<(usize, usize)>,
}

impl BoundaryConditions {
    pub fn none() -> Self {
        BoundaryConditions { fixed: Vec::new() }
    }

    /// Every basal node is held in `z`; the basal node with the largest `x`
    /// is also held in `x` and `y`, and the one with the smallest `x` in `y`.
    pub fn base_longitudinal_plus_rigid(mesh: &TetMesh) -> Result<Self> {
        let base = mesh.label_nodes(SurfaceLabel::Base);
        if base.len() < 2 {
            return Err(Error::MissingLabel("BASE"));
        }
        let by_x = |a: &&usize, b: &&usize| {
            mesh.nodes[**a].x.total_cmp(&mesh.nodes[**b].x).then(a.cmp(b))
        };
        let hi = *base.iter().max_by(by_x).unwrap();
        let lo = *base.iter().min_by(by_x).unwrap();
        let mut fixed: Vec<(usize, usize)> = base.iter().map(|&i| (i, 2)).collect();
        fixed.extend([(hi, 0), (hi, 1), (lo, 1)]);
        fixed.sort_unstable();
        fixed.dedup();
        Ok(BoundaryConditions { fixed })
    }
}

/// Result of one evaluation of the potential.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub energy: f64,
    /// Length `3·n_nodes`, zero on fixed dofs.
    pub gradient: Vec<f64>,
    /// Lower-triangle values of the reduced Hessian in the model's pattern.
    pub hessian: Option<Vec<f64>>,
}

/// Reference geometry, material and constraints, with the sparsity pattern
/// of the reduced Hessian precomputed.
pub struct FeModel {
    pub nodes: Vec<Point>,
    tets: Vec<[usize; 4]>,
    rots: Vec<Matrix3<f64>>,
    grads: Vec<[Vector3<f64>; 4]>,
    vols: Vec<f64>,
    endo: Vec<[usize; 3]>,
    z0: f64,
    cavity_ref: f64,
    pub mat: MaterialParams,
    pub load_mode: LoadMode,
    pub bcs: BoundaryConditions,
    /// Free index of each dof, `usize::MAX` when fixed.
    free: Vec<usize>,
    n_free: usize,
    pattern: SymbolicSparseColMat<usize>,
    tet_slots: Vec<[u32; 144]>,
    tri_slots: Vec<[u32; 81]>,
    mean_volume: f64,
}

const NO_SLOT: u32 = u32::MAX;

impl FeModel {
    pub fn new(
        mesh: &TetMesh,
        frames: &[FiberFrame],
        mat: MaterialParams,
        load_mode: LoadMode,
        bcs: BoundaryConditions,
    ) -> Result<Self> {
        mat.validate()?;
        if frames.len() != mesh.n_tets() {
            return Err(Error::ShapeMismatch(format!(
                "{} fiber frames for {} elements",
                frames.len(),
                mesh.n_tets()
            )));
        }
        let n = mesh.n_nodes();
        let mut rots = Vec::with_capacity(mesh.n_tets());
        let mut grads = Vec::with_capacity(mesh.n_tets());
        let mut vols = Vec::with_capacity(mesh.n_tets());
        for e in 0..mesh.n_tets() {
            let (g, v) = shape_gradients(&mesh.tet_points(e)).ok_or(Error::InvertedElement {
                element: e,
                det_f: 0.0,
            })?;
            if !(v > 0.0) {
                return Err(Error::InvertedElement { element: e, det_f: v });
            }
            let r = frames[e].rotation();
            let rt = r.transpose();
            grads.push([rt * g[0], rt * g[1], rt * g[2], rt * g[3]]);
            rots.push(r);
            vols.push(v);
        }
        let endo: Vec<[usize; 3]> = mesh.labelled(SurfaceLabel::Endo).copied().collect();
        let z0 = cap_plane(mesh);
        let cavity_ref = endo_cavity_volume(&mesh.nodes, &endo, z0);

        let mut free = vec![0usize; 3 * n];
        for &(node, axis) in &bcs.fixed {
            if node >= n || axis > 2 {
                return Err(Error::Config(format!("constraint ({node}, {axis}) out of range")));
            }
            free[3 * node + axis] = usize::MAX;
        }
        let mut n_free = 0;
        for f in free.iter_mut() {
            if *f != usize::MAX {
                *f = n_free;
                n_free += 1;
            }
        }

        // Lower-triangle pattern from element couplings (ENDO faces are tet
        // faces, so they add nothing new).
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n_free];
        let dof_list = |nodes: &[usize]| -> Vec<usize> {
            nodes.iter().flat_map(|&v| (0..3).map(move |i| 3 * v + i)).collect()
        };
        for t in &mesh.tets {
            let d = dof_list(t);
            for &p in &d {
                for &q in &d {
                    let (r, c) = (free[p], free[q]);
                    if r != usize::MAX && c != usize::MAX && r >= c {
                        cols[c].push(r);
                    }
                }
            }
        }
        let mut col_ptr = vec![0usize; n_free + 1];
        let mut row_idx = Vec::new();
        for (c, rows) in cols.iter_mut().enumerate() {
            rows.sort_unstable();
            rows.dedup();
            row_idx.extend_from_slice(rows);
            col_ptr[c + 1] = row_idx.len();
        }
        let slot = |r: usize, c: usize| -> u32 {
            let range = col_ptr[c]..col_ptr[c + 1];
            let k = row_idx[range.clone()].binary_search(&r).expect("entry in pattern");
            (range.start + k) as u32
        };
        let local_slots = |d: &[usize], out: &mut [u32]| {
            let m = d.len();
            for p in 0..m {
                for q in 0..m {
                    let (r, c) = (free[d[p]], free[d[q]]);
                    out[p * m + q] = if r != usize::MAX && c != usize::MAX && r >= c {
                        slot(r, c)
                    } else {
                        NO_SLOT
                    };
                }
            }
        };
        let mut tet_slots = vec![[NO_SLOT; 144]; mesh.n_tets()];
        for (t, s) in mesh.tets.iter().zip(tet_slots.iter_mut()) {
            local_slots(&dof_list(t), s);
        }
        let mut tri_slots = vec![[NO_SLOT; 81]; endo.len()];
        if load_mode == LoadMode::Follower {
            for (t, s) in endo.iter().zip(tri_slots.iter_mut()) {
                local_slots(&dof_list(t), s);
            }
        }
        let pattern = SymbolicSparseColMat::new_checked(n_free, n_free, col_ptr, None, row_idx);
        let mean_volume = vols.iter().sum::<f64>() / vols.len().max(1) as f64;
        Ok(FeModel {
            nodes: mesh.nodes.clone(),
            tets: mesh.tets.clone(),
            rots,
            grads,
            vols,
            endo,
            z0,
            cavity_ref,
            mat,
            load_mode,
            bcs,
            free,
            n_free,
            pattern,
            tet_slots,
            tri_slots,
            mean_volume,
        })
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.nodes.len()
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn mean_volume(&self) -> f64 {
        self.mean_volume
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.free[dof] == usize::MAX
    }

    /// Free index of each dof, `usize::MAX` for constrained ones.
    pub fn free_map(&self) -> &[usize] {
        &self.free
    }

    pub fn pattern(&self) -> SymbolicSparseColMatRef<'_, usize> {
        self.pattern.as_ref()
    }

    pub fn hessian_ref<'a>(&'a self, vals: &'a [f64]) -> SparseColMatRef<'a, usize, f64> {
        SparseColMatRef::new(self.pattern.as_ref(), vals)
    }

    /// Reduced Hessian as a dense symmetric matrix (tests and diagnostics).
    pub fn hessian_dense(&self, vals: &[f64]) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n_free, self.n_free);
        let p = self.pattern.as_ref();
        for c in 0..self.n_free {
            for k in p.col_ptr()[c]..p.col_ptr()[c + 1] {
                let r = p.row_idx()[k];
                m[(r, c)] = vals[k];
                m[(c, r)] = vals[k];
            }
        }
        m
    }

    /// Cavity volume of the deformed configuration.
    pub fn cavity_volume(&self, u: &[f64]) -> f64 {
        endo_cavity_volume(&self.current(u), &self.endo, self.z0)
    }

    pub fn current(&self, u: &[f64]) -> Vec<Point> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, x)| x + Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]))
            .collect()
    }

    fn deformation(&self, e: usize, u: &[f64]) -> Matrix3<f64> {
        let mut f = self.rots[e];
        for (a, &v) in self.tets[e].iter().enumerate() {
            let ua = Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2]);
            f += ua * self.grads[e][a].transpose();
        }
        f
    }

    fn element(
        &self,
        e: usize,
        u: &[f64],
        with_hessian: bool,
    ) -> Result<(f64, [f64; 12], Option<SMatrix<f64, 12, 12>>)> {
        let f = self.deformation(e, u);
        let j = f.determinant();
        if !(j > 0.0) {
            return Err(Error::InvertedElement { element: e, det_f: j });
        }
        let strain = 0.5 * (f.transpose() * f - Matrix3::identity());
        let (w, s, tangent) = fung_response(&strain, &self.mat, with_hessian)?;
        let kappa = self.mat.kappa_vol;
        let v = self.vols[e];
        let energy = v * (w + 0.5 * kappa * (j - 1.0) * (j - 1.0));
        let cof = cofactor(&f);
        let fs = f * s;
        let g = &self.grads[e];
        let mut force = [0.0; 12];
        for a in 0..4 {
            let fa = v * (fs * g[a] + kappa * (j - 1.0) * (cof * g[a]));
            force[3 * a..3 * a + 3].copy_from_slice(fa.as_slice());
        }
        let hess = tangent.map(|t| {
            let mut b = SMatrix::<f64, 9, 12>::zeros();
            for a in 0..4 {
                for i in 0..3 {
                    let col = 3 * a + i;
                    for aa in 0..3 {
                        for bb in 0..3 {
                            b[(3 * aa + bb, col)] =
                                0.5 * (f[(i, aa)] * g[a][bb] + g[a][aa] * f[(i, bb)]);
                        }
                    }
                }
            }
            let mut k = b.transpose() * t * b;
            let cg: [Vector3<f64>; 4] = std::array::from_fn(|a| cof * g[a]);
            for a in 0..4 {
                for bn in 0..4 {
                    let geo = g[a].dot(&(s * g[bn]));
                    let wv = f * g[a].cross(&g[bn]);
                    for i in 0..3 {
                        for kk in 0..3 {
                            let mut val = kappa * cg[a][i] * cg[bn][kk];
                            if i == kk {
                                val += geo;
                            } else {
                                let m = 3 - i - kk;
                                let eps = if (kk + 3 - i) % 3 == 1 { 1.0 } else { -1.0 };
                                val += kappa * (j - 1.0) * eps * wv[m];
                            }
                            k[(3 * a + i, 3 * bn + kk)] += val;
                        }
                    }
                }
            }
            k * v
        });
        Ok((energy, force, hess))
    }

    /// Cavity volume of one ENDO triangle with its gradient and Hessian.
    fn tri_volume(&self, t: &[usize; 3], x: &[Point]) -> (f64, [f64; 9], SMatrix<f64, 9, 9>) {
        let p = [x[t[0]], x[t[1]], x[t[2]]];
        let az = 0.5
            * (0..3)
                .map(|i| p[i].x * p[(i + 1) % 3].y - p[(i + 1) % 3].x * p[i].y)
                .sum::<f64>();
        let s = (p[0].z + p[1].z + p[2].z) / 3.0 - self.z0;
        let mut daz = [0.0; 9];
        for i in 0..3 {
            let (n1, n2) = ((i + 1) % 3, (i + 2) % 3);
            daz[3 * i] = 0.5 * (p[n1].y - p[n2].y);
            daz[3 * i + 1] = 0.5 * (p[n2].x - p[n1].x);
        }
        let mut grad = [0.0; 9];
        let mut hess = SMatrix::<f64, 9, 9>::zeros();
        for i in 0..3 {
            grad[3 * i] = -s * daz[3 * i];
            grad[3 * i + 1] = -s * daz[3 * i + 1];
            grad[3 * i + 2] = -az / 3.0;
            let (n1, n2) = ((i + 1) % 3, (i + 2) % 3);
            hess[(3 * i, 3 * n1 + 1)] = -0.5 * s;
            hess[(3 * i, 3 * n2 + 1)] = 0.5 * s;
            hess[(3 * n1 + 1, 3 * i)] = -0.5 * s;
            hess[(3 * n2 + 1, 3 * i)] = 0.5 * s;
            for jn in 0..3 {
                for c in 0..2 {
                    let h = -daz[3 * i + c] / 3.0;
                    hess[(3 * i + c, 3 * jn + 2)] += h;
                    hess[(3 * jn + 2, 3 * i + c)] += h;
                }
            }
        }
        (-az * s, grad, hess)
    }

    /// Reference area vectors (solid-outward) of ENDO triangles.
    fn tri_area_vector(&self, t: &[usize; 3]) -> Point {
        let p = &self.nodes;
        0.5 * (p[t[1]] - p[t[0]]).cross(&(p[t[2]] - p[t[0]]))
    }

    /// Total potential only.
    pub fn energy(&self, u: &[f64], pressure: f64) -> Result<f64> {
        let parts: Vec<Result<f64>> = (0..self.tets.len())
            .into_par_iter()
            .map(|e| self.element(e, u, false).map(|r| r.0))
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total + self.load_energy(u, pressure))
    }

    fn load_energy(&self, u: &[f64], pressure: f64) -> f64 {
        if pressure == 0.0 {
            return 0.0;
        }
        match self.load_mode {
            LoadMode::Follower => -pressure * (self.cavity_volume(u) - self.cavity_ref),
            LoadMode::Dead => self
                .endo
                .iter()
                .map(|t| {
                    let a = self.tri_area_vector(t);
                    let ubar: Vector3<f64> = t
                        .iter()
                        .map(|&v| Vector3::new(u[3 * v], u[3 * v + 1], u[3 * v + 2]))
                        .sum::<Vector3<f64>>()
                        / 3.0;
                    pressure * a.dot(&ubar)
                })
                .sum(),
        }
    }

    /// Potential, its gradient (fixed dofs zeroed) and optionally the reduced
    /// Hessian. Element work runs in parallel; the reduction is sequential in
    /// element order, so results do not depend on the thread count.
    pub fn evaluate(&self, u: &[f64], pressure: f64, with_hessian: bool) -> Result<Evaluation> {
        if u.len() != self.n_dofs() {
            return Err(Error::ShapeMismatch(format!(
                "displacement has {} entries, expected {}",
                u.len(),
                self.n_dofs()
            )));
        }
        let parts: Vec<Result<(f64, [f64; 12], Option<SMatrix<f64, 12, 12>>)>> = (0
            ..self.tets.len())
            .into_par_iter()
            .map(|e| self.element(e, u, with_hessian))
            .collect();
        let mut energy = 0.0;
        let mut gradient = vec![0.0; self.n_dofs()];
        let mut hessian = with_hessian.then(|| vec![0.0; self.pattern.row_idx().len()]);
        for (e, part) in parts.into_iter().enumerate() {
            let (w, f, k) = part?;
            energy += w;
            let t = self.tets[e];
            for a in 0..4 {
                for i in 0..3 {
                    gradient[3 * t[a] + i] += f[3 * a + i];
                }
            }
            if let (Some(h), Some(k)) = (hessian.as_mut(), k) {
                let slots = &self.tet_slots[e];
                for p in 0..12 {
                    for q in 0..12 {
                        let s = slots[p * 12 + q];
                        if s != NO_SLOT {
                            h[s as usize] += k[(p, q)];
                        }
                    }
                }
            }
        }
        if pressure != 0.0 {
            energy += self.load_energy(u, pressure);
            match self.load_mode {
                LoadMode::Follower => {
                    let x = self.current(u);
                    for (k, t) in self.endo.iter().enumerate() {
                        let (_, g, hm) = self.tri_volume(t, &x);
                        for a in 0..3 {
                            for i in 0..3 {
                                gradient[3 * t[a] + i] -= pressure * g[3 * a + i];
                            }
                        }
                        if let Some(h) = hessian.as_mut() {
                            let slots = &self.tri_slots[k];
                            for p in 0..9 {
                                for q in 0..9 {
                                    let s = slots[p * 9 + q];
                                    if s != NO_SLOT {
                                        h[s as usize] -= pressure * hm[(p, q)];
                                    }
                                }
                            }
                        }
                    }
                }
                LoadMode::Dead => {
                    for t in &self.endo {
                        let a = self.tri_area_vector(t) * (pressure / 3.0);
                        for &v in t {
                            for i in 0..3 {
                                gradient[3 * v + i] += a[i];
                            }
                        }
                    }
                }
            }
        }
        for (d, g) in gradient.iter_mut().enumerate() {
            if self.free[d] == usize::MAX {
                *g = 0.0;
            }
        }
        Ok(Evaluation {
            energy,
            gradient,
            hessian,
        })
    }
}

/// `Π(u)` on a reference mesh.
pub fn total_potential(
    mesh: &TetMesh,
    u: &[f64],
    frames: &[FiberFrame],
    mat: MaterialParams,
    pressure: f64,
    load_mode: LoadMode,
) -> Result<f64> {
    FeModel::new(mesh, frames, mat, load_mode, BoundaryConditions::none())?.energy(u, pressure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fibers::fiber_field;
    use crate::mesh::{shell_mesh, ShellLayout, SurfaceTri};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_frames(n: usize) -> Vec<FiberFrame> {
        vec![
            FiberFrame {
                f: Point::x(),
                s: Point::y(),
                n: Point::z(),
            };
            n
        ]
    }

    /// Two tets sharing a face; the face (0,1,2) on the bottom is ENDO.
    fn two_tets() -> TetMesh {
        let nodes = vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
            Point::new(0.2, 0.3, 1.0),
            Point::new(0.9, 0.9, 0.6),
        ];
        let mut m = TetMesh::new(nodes, vec![[0, 1, 2, 3], [1, 4, 2, 3]]);
        for t in &mut m.tets {
            if crate::mesh::tet_volume(&m.nodes[t[0]], &m.nodes[t[1]], &m.nodes[t[2]], &m.nodes[t[3]]) < 0.0 {
                t.swap(2, 3);
            }
        }
        m.surface.push(SurfaceTri {
            tri: [0, 2, 1],
            label: SurfaceLabel::Endo,
        });
        m
    }

    fn tilted_frames(n: usize) -> Vec<FiberFrame> {
        let a_n = Point::new(0.2, -0.1, 1.0).normalize();
        let e_c = Point::z().cross(&a_n).normalize();
        (0..n)
            .map(|_| {
                let f = (0.5 * e_c + 0.8 * a_n.cross(&e_c)).normalize();
                FiberFrame {
                    f,
                    s: a_n.cross(&f),
                    n: a_n,
                }
            })
            .collect()
    }

    fn check_derivatives(mode: LoadMode, kappa_factor: f64) {
        let mesh = two_tets();
        let mut mat = MaterialParams::with_stiffness(120.0);
        mat.kappa_vol = kappa_factor * mat.c;
        let model = FeModel::new(&mesh, &tilted_frames(2), mat, mode, BoundaryConditions::none()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let u: Vec<f64> = (0..15).map(|_| rng.random_range(-0.05..0.05)).collect();
            let p = 900.0;
            let ev = model.evaluate(&u, p, true).unwrap();
            let h = 1e-6;
            let gscale = ev.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for d in 0..15 {
                let mut up = u.clone();
                up[d] += h;
                let mut um = u.clone();
                um[d] -= h;
                let fd = (model.energy(&up, p).unwrap() - model.energy(&um, p).unwrap()) / (2.0 * h);
                assert!(
                    (fd - ev.gradient[d]).abs() <= 1e-6 * gscale,
                    "dof {d}: fd {fd} vs {}",
                    ev.gradient[d]
                );
            }
            let k = model.hessian_dense(ev.hessian.as_ref().unwrap());
            let kscale = k.abs().max();
            for d in 0..15 {
                let mut up = u.clone();
                up[d] += h;
                let mut um = u.clone();
                um[d] -= h;
                let gp = model.evaluate(&up, p, false).unwrap().gradient;
                let gm = model.evaluate(&um, p, false).unwrap().gradient;
                for r in 0..15 {
                    let fd = (gp[r] - gm[r]) / (2.0 * h);
                    assert!(
                        (fd - k[(r, d)]).abs() <= 1e-6 * kscale,
                        "K[{r},{d}] fd {fd} vs {}",
                        k[(r, d)]
                    );
                }
            }
        }
    }

    #[test]
    fn follower_derivatives_match_differences() {
        check_derivatives(LoadMode::Follower, 10.0);
    }

    #[test]
    fn dead_load_derivatives_match_differences() {
        check_derivatives(LoadMode::Dead, 10.0);
    }

    #[test]
    fn incompressibility_penalty_off_derivatives() {
        check_derivatives(LoadMode::Follower, 0.0);
    }

    #[test]
    fn reference_state_is_stress_free() {
        let mesh = two_tets();
        let mat = MaterialParams::with_stiffness(100.0);
        let model = FeModel::new(&mesh, &identity_frames(2), mat, LoadMode::Follower, BoundaryConditions::none()).unwrap();
        let ev = model.evaluate(&[0.0; 15], 0.0, true).unwrap();
        assert_eq!(ev.energy, 0.0);
        assert!(ev.gradient.iter().all(|&g| g.abs() < 1e-12));
        // Rigid translation stores no energy.
        let u: Vec<f64> = (0..15).map(|d| [0.3, -0.2, 0.7][d % 3]).collect();
        assert!(model.energy(&u, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fixed_dofs_have_zero_gradient() {
        let mesh = two_tets();
        let bcs = BoundaryConditions {
            fixed: vec![(0, 0), (0, 1), (0, 2), (4, 2)],
        };
        let model = FeModel::new(&mesh, &identity_frames(2), MaterialParams::with_stiffness(100.0), LoadMode::Follower, bcs).unwrap();
        let u: Vec<f64> = (0..15).map(|d| 0.01 * (d as f64).sin()).collect();
        let ev = model.evaluate(&u, 500.0, true).unwrap();
        for d in [0, 1, 2, 14] {
            assert_eq!(ev.gradient[d], 0.0);
        }
        assert_eq!(model.n_free(), 11);
    }

    #[test]
    fn inverted_element_is_reported() {
        let mesh = two_tets();
        let model = FeModel::new(&mesh, &identity_frames(2), MaterialParams::with_stiffness(100.0), LoadMode::Follower, BoundaryConditions::none()).unwrap();
        let mut u = vec![0.0; 15];
        u[11] = -3.0; // push node 3 through the base
        assert!(matches!(model.energy(&u, 0.0), Err(Error::InvertedElement { .. })));
    }

    #[test]
    fn lv_potential_is_frame_indifferent_for_rigid_rotation() {
        let mesh = shell_mesh(&ShellLayout::truncated([2.5, 2.5, 6.0], [3.5, 3.5, 6.8], 1.5, 12, 8, 2)).unwrap();
        let field = fiber_field(&mesh, 60.0, -60.0).unwrap();
        let mat = MaterialParams::with_stiffness(100.0);
        let w = total_potential(&mesh, &vec![0.0; 3 * mesh.n_nodes()], &field.frames, mat, 0.0, LoadMode::Follower).unwrap();
        assert!(w.abs() < 1e-20);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.9);
        let u: Vec<f64> = mesh
            .nodes
            .iter()
            .flat_map(|p| {
                let d = rot * p - p;
                [d.x, d.y, d.z]
            })
            .collect();
        let w = total_potential(&mesh, &u, &field.frames, mat, 0.0, LoadMode::Follower).unwrap();
        assert!(w.abs() < 1e-9, "rigid rotation energy {w}");
    }

    #[test]
    fn lv_bcs_remove_rigid_modes() {
        let mesh = shell_mesh(&ShellLayout::truncated([2.5, 2.5, 6.0], [3.5, 3.5, 6.8], 1.5, 12, 8, 2)).unwrap();
        let bcs = BoundaryConditions::base_longitudinal_plus_rigid(&mesh).unwrap();
        let base = mesh.label_nodes(SurfaceLabel::Base).len();
        assert_eq!(bcs.fixed.len(), base + 3);
        let field = fiber_field(&mesh, 60.0, -60.0).unwrap();
        let model = FeModel::new(&mesh, &field.frames, MaterialParams::with_stiffness(100.0), LoadMode::Follower, bcs).unwrap();
        let ev = model.evaluate(&vec![0.0; model.n_dofs()], 0.0, true).unwrap();
        let vals = ev.hessian.unwrap();
        let llt = model.hessian_ref(&vals).sp_cholesky(faer::Side::Lower);
        assert!(llt.is_ok(), "reduced stiffness must be positive definite");
    }

    #[test]
    fn closed_shell_has_no_base_constraints() {
        let mesh = shell_mesh(&ShellLayout::sphere_shell(1.0, 1.5, 8, 6, 2)).unwrap();
        assert!(matches!(
            BoundaryConditions::base_longitudinal_plus_rigid(&mesh),
            Err(Error::MissingLabel("BASE"))
        ));
    }
}
