//! Left-ventricle unloading: a Fung-hyperelastic finite-element engine that
//! produces paired (unloaded, end-diastolic) meshes, and a cycle-consistent
//! graph-attention surrogate that predicts the unloaded mesh from the loaded
//! one plus four physiological scalars.

pub mod autograd;
pub mod constitutive;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod fesolve;
pub mod fibers;
pub mod mesh;
pub mod net;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
pub use mesh::{NormalizationTransform, Point, SurfaceLabel, TetMesh};
