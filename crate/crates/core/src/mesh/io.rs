//! Native JSON and legacy-ASCII VTK mesh files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{extract_surfaces, Point, SurfaceLabel, SurfaceTri, TetMesh};
use crate::error::{Error, Result};

pub const MESH_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    NativeJson,
    VtkLegacyAscii,
}

impl MeshFormat {
    /// `.vtk` selects VTK, anything else the native JSON format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("vtk") => MeshFormat::VtkLegacyAscii,
            _ => MeshFormat::NativeJson,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NativeSurface {
    tri: [usize; 3],
    label: SurfaceLabel,
}

#[derive(Serialize, Deserialize)]
struct NativeMesh {
    version: u32,
    units: String,
    nodes: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surface: Option<Vec<NativeSurface>>,
}

pub fn load_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<TetMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mesh, labelled) = match format {
        MeshFormat::NativeJson => parse_native(path, &text)?,
        MeshFormat::VtkLegacyAscii => parse_vtk(path, &text)?,
    };
    mesh.validate()?;
    if labelled {
        Ok(mesh)
    } else {
        extract_surfaces(&mesh)
    }
}

pub fn save_mesh(mesh: &TetMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        MeshFormat::NativeJson => {
            let doc = NativeMesh {
                version: MESH_FORMAT_VERSION,
                units: "cm".into(),
                nodes: mesh.nodes.iter().map(|p| [p.x, p.y, p.z]).collect(),
                tets: mesh.tets.clone(),
                surface: Some(
                    mesh.surface
                        .iter()
                        .map(|s| NativeSurface {
                            tri: s.tri,
                            label: s.label,
                        })
                        .collect(),
                ),
            };
            serde_json::to_string(&doc).expect("mesh serialises")
        }
        MeshFormat::VtkLegacyAscii => vtk_text(mesh, None),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the mesh with a per-node scalar (`POINT_DATA`), e.g. an error heatmap.
pub fn save_vtk_with_point_scalar(
    mesh: &TetMesh,
    name: &str,
    values: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != mesh.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} point values for {} nodes",
            values.len(),
            mesh.n_nodes()
        )));
    }
    fs::write(path, vtk_text(mesh, Some((name, values)))).map_err(|e| Error::io(path, e))
}

fn parse_native(path: &Path, text: &str) -> Result<(TetMesh, bool)> {
    let doc: NativeMesh =
        serde_json::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
    if doc.version != MESH_FORMAT_VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported mesh format version {}", doc.version),
        ));
    }
    if doc.units != "cm" {
        return Err(Error::parse(path, format!("unsupported units {:?}", doc.units)));
    }
    let labelled = doc.surface.is_some();
    let mesh = TetMesh {
        nodes: doc.nodes.iter().map(|p| Point::from(*p)).collect(),
        tets: doc.tets,
        surface: doc
            .surface
            .unwrap_or_default()
            .into_iter()
            .map(|s| SurfaceTri {
                tri: s.tri,
                label: s.label,
            })
            .collect(),
    };
    Ok((mesh, labelled))
}

fn vtk_text(mesh: &TetMesh, point_scalar: Option<(&str, &[f64])>) -> String {
    let mut s = String::new();
    let n_cells = mesh.n_tets() + mesh.surface.len();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "unloadlab tetrahedral mesh (cm)");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.n_nodes());
    for p in &mesh.nodes {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    let size = mesh.n_tets() * 5 + mesh.surface.len() * 4;
    let _ = writeln!(s, "CELLS {n_cells} {size}");
    for t in &mesh.tets {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    for t in &mesh.surface {
        let _ = writeln!(s, "3 {} {} {}", t.tri[0], t.tri[1], t.tri[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {n_cells}");
    for _ in &mesh.tets {
        let _ = writeln!(s, "10");
    }
    for _ in &mesh.surface {
        let _ = writeln!(s, "5");
    }
    let _ = writeln!(s, "CELL_DATA {n_cells}");
    let _ = writeln!(s, "SCALARS surface_label int 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for _ in &mesh.tets {
        let _ = writeln!(s, "0");
    }
    for t in &mesh.surface {
        let _ = writeln!(s, "{}", t.label.code());
    }
    if let Some((name, values)) = point_scalar {
        let _ = writeln!(s, "POINT_DATA {}", mesh.n_nodes());
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for v in values {
            let _ = writeln!(s, "{v}");
        }
    }
    s
}

struct Tokens<'a> {
    it: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
    path: &'a Path,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.it
            .next()
            .ok_or_else(|| Error::parse(self.path, format!("unexpected end of file reading {what}")))
    }

    fn num<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.next(what)?;
        tok.parse()
            .map_err(|_| Error::parse(self.path, format!("bad {what}: {tok:?}")))
    }
}

fn parse_vtk(path: &Path, text: &str) -> Result<(TetMesh, bool)> {
    let mut lines = text.splitn(3, '\n');
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("# vtk DataFile") {
        return Err(Error::parse(path, "missing VTK header"));
    }
    let _title = lines.next();
    let body = lines.next().unwrap_or_default();
    let mut tk = Tokens {
        it: body.split_whitespace().peekable(),
        path,
    };
    if !tk.next("format")?.eq_ignore_ascii_case("ASCII") {
        return Err(Error::parse(path, "only ASCII legacy VTK is supported"));
    }
    if tk.next("DATASET")? != "DATASET" || tk.next("dataset type")? != "UNSTRUCTURED_GRID" {
        return Err(Error::parse(path, "expected DATASET UNSTRUCTURED_GRID"));
    }

    let mut nodes = Vec::new();
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut types: Vec<u8> = Vec::new();
    let mut labels: Option<Vec<i32>> = None;
    let mut section = "";
    while let Some(kw) = tk.it.next() {
        match kw {
            "POINTS" => {
                let n: usize = tk.num("point count")?;
                let _ty = tk.next("point type")?;
                nodes.reserve(n);
                for _ in 0..n {
                    nodes.push(Point::new(tk.num("x")?, tk.num("y")?, tk.num("z")?));
                }
            }
            "CELLS" => {
                let n: usize = tk.num("cell count")?;
                let _size: usize = tk.num("cell list size")?;
                for _ in 0..n {
                    let k: usize = tk.num("cell arity")?;
                    let mut c = Vec::with_capacity(k);
                    for _ in 0..k {
                        c.push(tk.num("cell index")?);
                    }
                    cells.push(c);
                }
            }
            "CELL_TYPES" => {
                let n: usize = tk.num("cell type count")?;
                for _ in 0..n {
                    types.push(tk.num("cell type")?);
                }
            }
            "CELL_DATA" | "POINT_DATA" => {
                let _n: usize = tk.num("data count")?;
                section = if kw == "CELL_DATA" { "cell" } else { "point" };
            }
            "SCALARS" => {
                let name = tk.next("scalar name")?;
                let _ty = tk.next("scalar type")?;
                if tk.it.peek().is_some_and(|t| t.parse::<usize>().is_ok()) {
                    tk.it.next();
                }
                if tk.it.peek() == Some(&"LOOKUP_TABLE") {
                    tk.it.next();
                    tk.next("lookup table name")?;
                }
                let count = if section == "cell" { cells.len() } else { nodes.len() };
                if section == "cell" && name == "surface_label" {
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        v.push(tk.num("surface_label")?);
                    }
                    labels = Some(v);
                } else {
                    for _ in 0..count {
                        tk.num::<f64>("scalar value")?;
                    }
                }
            }
            other => {
                return Err(Error::parse(path, format!("unsupported VTK keyword {other:?}")))
            }
        }
    }
    if types.len() != cells.len() {
        return Err(Error::parse(path, "CELL_TYPES count differs from CELLS"));
    }
    let mut mesh = TetMesh::new(nodes, Vec::new());
    for (k, (c, &ty)) in cells.iter().zip(&types).enumerate() {
        match (ty, c.len()) {
            (10, 4) => mesh.tets.push([c[0], c[1], c[2], c[3]]),
            (5, 3) => {
                if let Some(l) = &labels {
                    let label = SurfaceLabel::from_code(l[k]).ok_or_else(|| {
                        Error::parse(path, format!("triangle {k} has surface_label {}", l[k]))
                    })?;
                    mesh.surface.push(SurfaceTri {
                        tri: [c[0], c[1], c[2]],
                        label,
                    });
                }
            }
            _ => {
                return Err(Error::parse(
                    path,
                    format!("unsupported cell type {ty} with {} nodes", c.len()),
                ))
            }
        }
    }
    Ok((mesh, labels.is_some()))
}
