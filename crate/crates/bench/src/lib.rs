//! Shared fixtures for the pipeline benchmarks.

use unloadlab_core::datagen::{build_shell_mesh, EllipsoidParams, GlobalParams, MeshResolution, ShapeSpec};
use unloadlab_core::fibers::{fiber_field, FiberFrame};
use unloadlab_core::TetMesh;

/// Reference LV shell at the default dataset resolution, with fibers.
pub fn lv_fixture() -> (TetMesh, Vec<FiberFrame>, GlobalParams) {
    let spec = ShapeSpec::ellipsoid("bench", EllipsoidParams::reference());
    let mesh = build_shell_mesh(&spec, &MeshResolution::default(), None).expect("reference shape meshes");
    let g = GlobalParams::new(8.0, 100.0, 60.0, -60.0);
    let frames = fiber_field(&mesh, g.theta_endo_deg, g.theta_epi_deg).expect("fibers").frames;
    (mesh, frames, g)
}
