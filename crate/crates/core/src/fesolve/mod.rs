//! Forward inflation by Newton minimisation of the total potential, inverse
//! unloading by backward-displacement iteration, and pair generation.

mod model;

use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::constitutive::MaterialParams;
use crate::error::{Error, Result};
use crate::fibers::FiberFrame;
use crate::mesh::{Point, TetMesh};

pub use model::{total_potential, BoundaryConditions, Evaluation, FeModel, LoadMode};

pub const PA_PER_MMHG: f64 = 133.322;

pub fn mmhg_to_pa(p: f64) -> f64 {
    p * PA_PER_MMHG
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub ramp_steps: usize,
    /// Convergence when `‖∇Π‖∞ ≤ newton_tol · C · V̄_e`.
    pub newton_tol: f64,
    pub max_iters: usize,
    /// Times a failed pressure increment may be halved.
    pub max_refinements: usize,
    pub load_mode: LoadMode,
    /// Constraints; derived from the BASE surface when absent.
    pub bcs: Option<BoundaryConditions>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            ramp_steps: 10,
            newton_tol: 1e-8,
            max_iters: 50,
            max_refinements: 3,
            load_mode: LoadMode::Follower,
            bcs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnloadOptions {
    pub solver: SolverOptions,
    /// cm.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for UnloadOptions {
    fn default() -> Self {
        UnloadOptions {
            solver: SolverOptions::default(),
            tol: 1e-4,
            max_iters: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub newton_iters: usize,
    pub final_residual_norm: f64,
    pub pressure_steps: usize,
    pub wall_time: f64,
    /// Backward-displacement iterations (unloading only).
    pub unload_iters: usize,
    /// Reload mismatch in cm (unloading only).
    pub mismatch: Option<f64>,
}

/// Newton driver on one reference configuration. The symbolic factorisation
/// is computed once and reused.
struct Newton<'a> {
    model: &'a FeModel,
    symbolic: SymbolicLlt<usize>,
    tol_abs: f64,
    opts: &'a SolverOptions,
    iters: usize,
}

enum StepOutcome {
    Converged(f64),
    Failed(Error),
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl<'a> Newton<'a> {
    fn new(model: &'a FeModel, opts: &'a SolverOptions) -> Result<Self> {
        let symbolic = SymbolicLlt::try_new(model.pattern(), Side::Lower)
            .map_err(|e| Error::Solver(format!("symbolic factorisation: {e:?}")))?;
        let tol_abs = opts.newton_tol * model.mat.c * model.mean_volume();
        Ok(Newton {
            model,
            symbolic,
            tol_abs,
            opts,
            iters: 0,
        })
    }

    fn factor(&self, vals: &[f64]) -> Option<Llt<usize, f64>> {
        Llt::try_new_with_symbolic(self.symbolic.clone(), self.model.hessian_ref(vals), Side::Lower).ok()
    }

    /// Descent direction from the reduced Newton system. Falls back to a
    /// diagonally shifted system, then to steepest descent.
    fn direction(&self, g: &[f64], hess: &mut [f64]) -> Vec<f64> {
        let free = self.model.free_map();
        let nf = self.model.n_free();
        let mut rhs = Mat::<f64>::zeros(nf, 1);
        for (d, &fi) in free.iter().enumerate() {
            if fi != usize::MAX {
                rhs[(fi, 0)] = -g[d];
            }
        }
        let pat = self.model.pattern();
        let diag_slots: Vec<usize> = (0..nf)
            .map(|c| pat.col_ptr()[c]) // rows are sorted, the diagonal comes first
            .collect();
        let dmax = diag_slots.iter().fold(0.0f64, |m, &s| m.max(hess[s].abs())).max(1e-300);
        let mut shift = 0.0;
        let mut sol = None;
        for attempt in 0..8 {
            if let Some(llt) = self.factor(hess) {
                let x = llt.solve(&rhs);
                let dir: Vec<f64> = (0..nf).map(|i| x[(i, 0)]).collect();
                if dir.iter().all(|v| v.is_finite()) {
                    sol = Some(dir);
                    break;
                }
            }
            let next = if attempt == 0 { 1e-8 * dmax } else { shift * 100.0 };
            for &s in &diag_slots {
                hess[s] += next - shift;
            }
            log::debug!("tangent not positive definite, diagonal shift {next:.3e}");
            shift = next;
        }
        let dir = sol.unwrap_or_else(|| {
            log::debug!("falling back to steepest descent");
            (0..nf).map(|i| rhs[(i, 0)] / dmax).collect()
        });
        let mut full = vec![0.0; g.len()];
        for (d, &fi) in free.iter().enumerate() {
            if fi != usize::MAX {
                full[d] = dir[fi];
            }
        }
        full
    }

    /// Newton iterations at fixed pressure starting from `u`.
    fn solve_at(&mut self, u: &mut Vec<f64>, pressure: f64) -> StepOutcome {
        let mut ev = match self.model.evaluate(u, pressure, true) {
            Ok(ev) => ev,
            Err(e) => return StepOutcome::Failed(e),
        };
        let energy_scale = self.model.mat.c * self.model.mean_volume() * self.model.nodes.len() as f64;
        for _ in 0..self.opts.max_iters {
            let gnorm = inf_norm(&ev.gradient);
            if !gnorm.is_finite() {
                return StepOutcome::Failed(Error::NonConvergence("non-finite residual".into()));
            }
            if gnorm <= self.tol_abs {
                return StepOutcome::Converged(gnorm);
            }
            self.iters += 1;
            let mut hess = ev.hessian.take().unwrap();
            let d = self.direction(&ev.gradient, &mut hess);
            let slope: f64 = d.iter().zip(&ev.gradient).map(|(a, b)| a * b).sum();
            let (d, slope) = if slope < 0.0 {
                (d, slope)
            } else {
                let d: Vec<f64> = ev.gradient.iter().map(|g| -g).collect();
                let s = -d.iter().map(|x| x * x).sum::<f64>();
                (d, s)
            };
            // Backtracking Armijo search; a small slack absorbs round-off in
            // the potential once the residual is tiny.
            let slack = 1e-12 * (ev.energy.abs() + energy_scale);
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-10 {
                let trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                if let Ok(e) = self.model.energy(&trial, pressure) {
                    if e <= ev.energy + 1e-4 * alpha * slope + slack {
                        accepted = Some(trial);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some(trial) = accepted else {
                return StepOutcome::Failed(Error::NonConvergence("line search failed".into()));
            };
            *u = trial;
            ev = match self.model.evaluate(u, pressure, true) {
                Ok(ev) => ev,
                Err(e) => return StepOutcome::Failed(e),
            };
        }
        let gnorm = inf_norm(&ev.gradient);
        if gnorm <= self.tol_abs {
            StepOutcome::Converged(gnorm)
        } else {
            StepOutcome::Failed(Error::NonConvergence(format!(
                "residual {gnorm:.3e} above {:.3e} after {} iterations",
                self.tol_abs, self.opts.max_iters
            )))
        }
    }
}

/// Equilibrium displacement of `model` at `pressure`, ramping the load.
/// With `warm` the full load is attempted directly from that guess first.
pub fn solve_displacement(
    model: &FeModel,
    pressure: f64,
    opts: &SolverOptions,
    warm: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    if !(pressure >= 0.0) || !pressure.is_finite() {
        return Err(Error::Config(format!("pressure must be non-negative, got {pressure}")));
    }
    if opts.ramp_steps == 0 {
        return Err(Error::Config("ramp_steps must be positive".into()));
    }
    let mut newton = Newton::new(model, opts)?;
    let n = model.n_dofs();
    let mut report = SolveReport::default();

    if let Some(w) = warm {
        let mut u = w.to_vec();
        for (d, v) in u.iter_mut().enumerate() {
            if model.is_fixed(d) {
                *v = 0.0;
            }
        }
        if let StepOutcome::Converged(r) = newton.solve_at(&mut u, pressure) {
            report.converged = true;
            report.newton_iters = newton.iters;
            report.final_residual_norm = r;
            report.pressure_steps = 1;
            report.wall_time = start.elapsed().as_secs_f64();
            return Ok((u, report));
        }
        log::debug!("warm start failed, ramping from zero");
    }

    let mut u = vec![0.0; n];
    let mut p_done = 0.0;
    let mut dp = pressure / opts.ramp_steps as f64;
    let mut refinements = 0;
    let mut residual = inf_norm(&model.evaluate(&u, 0.0, false)?.gradient);
    if pressure == 0.0 {
        if let StepOutcome::Converged(r) = newton.solve_at(&mut u, 0.0) {
            residual = r;
        }
    }
    while p_done < pressure {
        let target = if pressure - p_done <= dp * (1.0 + 1e-9) {
            pressure
        } else {
            p_done + dp
        };
        let mut trial = u.clone();
        match newton.solve_at(&mut trial, target) {
            StepOutcome::Converged(r) => {
                u = trial;
                p_done = target;
                residual = r;
                report.pressure_steps += 1;
            }
            StepOutcome::Failed(e) => {
                if refinements >= opts.max_refinements {
                    log::warn!("inflation failed at {target:.2} Pa: {e}");
                    return Err(match e {
                        Error::InvertedElement { .. } => e,
                        Error::NonConvergence(m) => Error::NonConvergence(m),
                        other => Error::NonConvergence(other.to_string()),
                    });
                }
                refinements += 1;
                dp *= 0.5;
                log::debug!("halving pressure increment to {dp:.3} Pa");
            }
        }
    }
    report.converged = true;
    report.newton_iters = newton.iters;
    report.final_residual_norm = residual;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((u, report))
}

fn bcs_for(mesh: &TetMesh, opts: &SolverOptions) -> Result<BoundaryConditions> {
    match &opts.bcs {
        Some(b) => Ok(b.clone()),
        None => BoundaryConditions::base_longitudinal_plus_rigid(mesh),
    }
}

fn displaced(mesh: &TetMesh, u: &[f64]) -> TetMesh {
    let nodes = mesh
        .nodes
        .iter()
        .enumerate()
        .map(|(i, p)| p + Point::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]))
        .collect();
    mesh.with_nodes(nodes)
}

/// Inflates an unloaded mesh to cavity pressure `pressure` (Pa).
pub fn inflate(
    mesh: &TetMesh,
    frames: &[FiberFrame],
    mat: &MaterialParams,
    pressure: f64,
    opts: &SolverOptions,
) -> Result<(TetMesh, SolveReport)> {
    let model = FeModel::new(mesh, frames, *mat, opts.load_mode, bcs_for(mesh, opts)?)?;
    let (u, report) = solve_displacement(&model, pressure, opts, None)?;
    Ok((displaced(mesh, &u), report))
}

/// Recovers the reference configuration that inflates to `mesh_ed` at
/// `pressure`, by iterating `X ← X_ED − u(X)`. Fiber frames stay attached to
/// their elements. Returns the best iterate; `converged` is false when the
/// reload mismatch stays above `opts.tol`.
pub fn unload_inverse(
    mesh_ed: &TetMesh,
    frames: &[FiberFrame],
    mat: &MaterialParams,
    pressure: f64,
    opts: &UnloadOptions,
) -> Result<(TetMesh, SolveReport)> {
    let start = Instant::now();
    let bcs = bcs_for(mesh_ed, &opts.solver)?;
    let mut report = SolveReport::default();
    let mut x = mesh_ed.clone();
    let mut warm: Option<Vec<f64>> = None;
    let mut best: Option<(f64, TetMesh)> = None;
    for k in 0..opts.max_iters.max(1) {
        let model = FeModel::new(&x, frames, *mat, opts.solver.load_mode, bcs.clone())?;
        let (u, rep) = solve_displacement(&model, pressure, &opts.solver, warm.as_deref())?;
        report.newton_iters += rep.newton_iters;
        report.pressure_steps += rep.pressure_steps;
        report.final_residual_norm = rep.final_residual_norm;
        report.unload_iters = k + 1;
        let mut mismatch = 0.0f64;
        let mut next = Vec::with_capacity(x.n_nodes());
        for i in 0..x.n_nodes() {
            let ui = Point::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]);
            mismatch = mismatch.max((x.nodes[i] + ui - mesh_ed.nodes[i]).norm());
            next.push(mesh_ed.nodes[i] - ui);
        }
        log::debug!("unload iteration {k}: mismatch {mismatch:.3e} cm");
        if best.as_ref().is_none_or(|(m, _)| mismatch < *m) {
            best = Some((mismatch, x.clone()));
        }
        if mismatch <= opts.tol {
            break;
        }
        x = x.with_nodes(next);
        warm = Some(u);
    }
    let (mismatch, mesh) = best.unwrap();
    report.converged = mismatch <= opts.tol;
    report.mismatch = Some(mismatch);
    report.wall_time = start.elapsed().as_secs_f64();
    if !report.converged {
        log::warn!("unloading stopped at mismatch {mismatch:.3e} cm");
    }
    Ok((mesh, report))
}

/// One training pair derived from a seed end-diastolic mesh.
#[derive(Clone, Debug)]
pub struct CasePair {
    pub unloaded: TetMesh,
    pub loaded: TetMesh,
    pub unload_report: SolveReport,
    pub inflate_report: SolveReport,
}

/// Unloads the seed, then re-inflates the result; the seed itself is
/// discarded so the pair is exactly consistent with the forward model.
pub fn make_pair(
    seed_ed: &TetMesh,
    frames: &[FiberFrame],
    mat: &MaterialParams,
    pressure: f64,
    opts: &UnloadOptions,
) -> Result<CasePair> {
    let bcs = bcs_for(seed_ed, &opts.solver)?;
    let mut opts = opts.clone();
    opts.solver.bcs = Some(bcs);
    let (unloaded, unload_report) = unload_inverse(seed_ed, frames, mat, pressure, &opts)?;
    if !unload_report.converged {
        return Err(Error::NonConvergence(format!(
            "unloading mismatch {:.3e} cm above {:.1e}",
            unload_report.mismatch.unwrap_or(f64::NAN),
            opts.tol
        )));
    }
    let (loaded, inflate_report) = inflate(&unloaded, frames, mat, pressure, &opts.solver)?;
    Ok(CasePair {
        unloaded,
        loaded,
        unload_report,
        inflate_report,
    })
}
