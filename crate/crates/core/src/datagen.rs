//! LV shape family, the physiological parameter grid, paired-case generation
//! and dataset splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::MaterialParams;
use crate::error::{Error, Result};
use crate::fesolve::{make_pair, mmhg_to_pa, UnloadOptions};
use crate::fibers::fiber_field;
use crate::mesh::{load_mesh, save_mesh, shell_mesh, MeshFormat, Point, ShellLayout, TetMesh};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TRAIN_FRACTION: f64 = 42.0 / 60.0;

/// Sampling ranges of the parametric family, cm.
pub const LONG_AXIS_RANGE: (f64, f64) = (7.0, 9.5);
pub const SHORT_AXIS_RANGE: (f64, f64) = (2.0, 3.0);
pub const WALL_RANGE: (f64, f64) = (0.8, 1.4);
/// Basal truncation height as a fraction of the long semi-axis.
pub const TRUNCATION_RANGE: (f64, f64) = (0.1, 0.3);
pub const PCA_WEIGHT_LIMIT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShapeKind {
    ParametricEllipsoid,
    PcaModes,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ellipsoid" | "parametric-ellipsoid" => Some(ShapeKind::ParametricEllipsoid),
            "pca" | "pca-modes" => Some(ShapeKind::PcaModes),
            _ => None,
        }
    }
}

/// Truncated-ellipsoid LV. `a`, `b`, `c` are endocardial semi-axes; the
/// epicardium adds `wall_base` to the short axes and `wall_apex` to the long
/// one; the base plane sits at `z_base` above the equator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub wall_base: f64,
    pub wall_apex: f64,
    pub z_base: f64,
}

impl EllipsoidParams {
    /// Mid-range member of the family.
    pub fn reference() -> Self {
        let tau = 0.5 * (TRUNCATION_RANGE.0 + TRUNCATION_RANGE.1);
        let l = 0.5 * (LONG_AXIS_RANGE.0 + LONG_AXIS_RANGE.1);
        let c = l / (1.0 + tau);
        let s = 0.5 * (SHORT_AXIS_RANGE.0 + SHORT_AXIS_RANGE.1);
        let w = 0.5 * (WALL_RANGE.0 + WALL_RANGE.1);
        EllipsoidParams {
            a: s,
            b: s,
            c,
            wall_base: w,
            wall_apex: w,
            z_base: tau * c,
        }
    }

    pub fn layout(&self, res: &MeshResolution) -> ShellLayout {
        ShellLayout::truncated(
            [self.a, self.b, self.c],
            [self.a + self.wall_base, self.b + self.wall_base, self.c + self.wall_apex],
            self.z_base,
            res.n_theta,
            res.rings,
            res.layers,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape_id: String,
    pub kind: ShapeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipsoid: Option<EllipsoidParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl ShapeSpec {
    pub fn ellipsoid(shape_id: impl Into<String>, p: EllipsoidParams) -> Self {
        ShapeSpec {
            shape_id: shape_id.into(),
            kind: ShapeKind::ParametricEllipsoid,
            ellipsoid: Some(p),
            weights: None,
        }
    }
}

/// Mean shape plus displacement modes over the template shell's nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModes {
    pub mean: Vec<Point>,
    pub modes: Vec<Vec<Point>>,
}

impl PcaModes {
    /// Plain text: blocks of `x y z` lines separated by blank lines; the
    /// first block is the mean, each further block one mode. `#` starts a
    /// comment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingModeFile,
            _ => Error::io(path, e),
        })?;
        let mut blocks: Vec<Vec<Point>> = vec![Vec::new()];
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                if !blocks.last().unwrap().is_empty() {
                    blocks.push(Vec::new());
                }
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, format!("line {}: {e}", ln + 1)))?;
            if v.len() != 3 {
                return Err(Error::parse(path, format!("line {}: expected 3 values", ln + 1)));
            }
            blocks.last_mut().unwrap().push(Point::new(v[0], v[1], v[2]));
        }
        if blocks.last().is_some_and(|b| b.is_empty()) {
            blocks.pop();
        }
        let mut it = blocks.into_iter();
        let mean = it.next().ok_or_else(|| Error::parse(path, "no mean block"))?;
        let modes: Vec<_> = it.collect();
        if let Some(m) = modes.iter().find(|m| m.len() != mean.len()) {
            return Err(Error::parse(path, format!("mode has {} nodes, mean has {}", m.len(), mean.len())));
        }
        Ok(PcaModes { mean, modes })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }
}

pub fn sample_shapes(n: usize, seed: u64, kind: ShapeKind, modes: Option<&PcaModes>) -> Result<Vec<ShapeSpec>> {
    if n == 0 {
        return Err(Error::Config("number of shapes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |r: (f64, f64)| rng.random_range(r.0..=r.1);
    (0..n)
        .map(|i| {
            let shape_id = format!("shape{i:03}");
            match kind {
                ShapeKind::ParametricEllipsoid => {
                    let l = u(LONG_AXIS_RANGE);
                    let tau = u(TRUNCATION_RANGE);
                    let c = l / (1.0 + tau);
                    let p = EllipsoidParams {
                        a: u(SHORT_AXIS_RANGE),
                        b: u(SHORT_AXIS_RANGE),
                        c,
                        wall_base: u(WALL_RANGE),
                        wall_apex: u(WALL_RANGE),
                        z_base: tau * c,
                    };
                    Ok(ShapeSpec::ellipsoid(shape_id, p))
                }
                ShapeKind::PcaModes => {
                    let m = modes.ok_or(Error::MissingModeFile)?;
                    let w = (0..m.n_modes()).map(|_| u((-PCA_WEIGHT_LIMIT, PCA_WEIGHT_LIMIT))).collect();
                    Ok(ShapeSpec {
                        shape_id,
                        kind,
                        ellipsoid: None,
                        weights: Some(w),
                    })
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshResolution {
    pub n_theta: usize,
    pub rings: usize,
    pub layers: usize,
    /// Accepted node-count band; `None` skips the check.
    pub node_band: Option<(usize, usize)>,
}

impl Default for MeshResolution {
    fn default() -> Self {
        MeshResolution {
            n_theta: 24,
            rings: 16,
            layers: 2,
            node_band: Some((600, 1000)),
        }
    }
}

/// Tetrahedral LV mesh of a shape, labelled ENDO/EPI/BASE.
pub fn build_shell_mesh(spec: &ShapeSpec, res: &MeshResolution, modes: Option<&PcaModes>) -> Result<TetMesh> {
    let mesh = match spec.kind {
        ShapeKind::ParametricEllipsoid => {
            let p = spec
                .ellipsoid
                .ok_or_else(|| Error::Config(format!("{} has no ellipsoid parameters", spec.shape_id)))?;
            if ![p.a, p.b, p.c, p.z_base].iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::Resolution(format!("{}: non-positive dimensions", spec.shape_id)));
            }
            shell_mesh(&p.layout(res))?
        }
        ShapeKind::PcaModes => {
            let m = modes.ok_or(Error::MissingModeFile)?;
            let w = spec.weights.as_deref().unwrap_or(&[]);
            if w.len() > m.n_modes() || w.iter().any(|x| x.abs() > PCA_WEIGHT_LIMIT) {
                return Err(Error::Config(format!("{}: invalid mode weights", spec.shape_id)));
            }
            let template = shell_mesh(&EllipsoidParams::reference().layout(res))?;
            if template.n_nodes() != m.mean.len() {
                return Err(Error::Resolution(format!(
                    "mode file has {} nodes, template shell has {}",
                    m.mean.len(),
                    template.n_nodes()
                )));
            }
            let nodes = (0..m.mean.len())
                .map(|i| m.mean[i] + w.iter().zip(&m.modes).map(|(wk, mode)| mode[i] * *wk).sum::<Point>())
                .collect();
            let mesh = template.with_nodes(nodes);
            mesh.validate()?;
            mesh
        }
    };
    if let Some((lo, hi)) = res.node_band {
        if !(lo..=hi).contains(&mesh.n_nodes()) {
            return Err(Error::Resolution(format!(
                "{} nodes outside the band [{lo}, {hi}]",
                mesh.n_nodes()
            )));
        }
    }
    Ok(mesh)
}

/// Cavity pressure, stiffness scale and endo/epi helix angles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub p_mmhg: f64,
    pub c_pa: f64,
    pub theta_endo_deg: f64,
    pub theta_epi_deg: f64,
}

/// Normalisation bounds: (min, max) per component.
pub const PARAM_BOUNDS: [(f64, f64); 4] = [(4.0, 14.0), (50.0, 300.0), (60.0, 70.0), (-70.0, -60.0)];
pub const PARAM_NAMES: [&str; 4] = ["P", "C", "theta_endo", "theta_epi"];

impl GlobalParams {
    pub fn new(p_mmhg: f64, c_pa: f64, theta_endo_deg: f64, theta_epi_deg: f64) -> Self {
        GlobalParams {
            p_mmhg,
            c_pa,
            theta_endo_deg,
            theta_epi_deg,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.p_mmhg, self.c_pa, self.theta_endo_deg, self.theta_epi_deg]
    }

    pub fn normalized(&self) -> [f64; 4] {
        let v = self.values();
        std::array::from_fn(|i| (v[i] - PARAM_BOUNDS[i].0) / (PARAM_BOUNDS[i].1 - PARAM_BOUNDS[i].0))
    }

    pub fn pressure_pa(&self) -> f64 {
        mmhg_to_pa(self.p_mmhg)
    }

    pub fn material(&self) -> MaterialParams {
        MaterialParams::with_stiffness(self.c_pa)
    }

    /// Component index for a parameter name (`P`, `C`, `theta_endo`, `theta_epi`).
    pub fn index_of(name: &str) -> Option<usize> {
        let n = name.to_ascii_lowercase();
        match n.as_str() {
            "p" | "p_mmhg" | "pressure" => Some(0),
            "c" | "c_pa" | "stiffness" => Some(1),
            "theta_endo" | "theta_endo_deg" => Some(2),
            "theta_epi" | "theta_epi_deg" => Some(3),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub pressures_mmhg: Vec<f64>,
    pub stiffness_pa: Vec<f64>,
    pub theta_endo_deg: Vec<f64>,
    pub theta_epi_deg: Vec<f64>,
}

impl ParamGrid {
    pub fn full() -> Self {
        ParamGrid {
            pressures_mmhg: vec![4.0, 6.0, 8.0, 10.0, 12.0, 14.0],
            stiffness_pa: vec![50.0, 100.0, 150.0, 200.0, 250.0, 300.0],
            theta_endo_deg: vec![60.0, 65.0, 70.0],
            theta_epi_deg: vec![-60.0, -65.0, -70.0],
        }
    }

    /// Two pressures, two stiffnesses, one angle pair.
    pub fn mini() -> Self {
        ParamGrid {
            pressures_mmhg: vec![8.0, 12.0],
            stiffness_pa: vec![100.0, 200.0],
            theta_endo_deg: vec![60.0],
            theta_epi_deg: vec![-60.0],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "mini" => Some(Self::mini()),
            _ => None,
        }
    }

    /// Cartesian product, pressure varying slowest.
    pub fn points(&self) -> Vec<GlobalParams> {
        let mut out = Vec::new();
        for &p in &self.pressures_mmhg {
            for &c in &self.stiffness_pa {
                for &te in &self.theta_endo_deg {
                    for &tp in &self.theta_epi_deg {
                        out.push(GlobalParams::new(p, c, te, tp));
                    }
                }
            }
        }
        out
    }

    fn values(&self, i: usize) -> &[f64] {
        match i {
            0 => &self.pressures_mmhg,
            1 => &self.stiffness_pa,
            2 => &self.theta_endo_deg,
            _ => &self.theta_epi_deg,
        }
    }
}

pub fn case_grid() -> Vec<GlobalParams> {
    ParamGrid::full().points()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub shape_id: String,
    #[serde(rename = "P_mmHg")]
    pub p_mmhg: f64,
    #[serde(rename = "C_Pa")]
    pub c_pa: f64,
    pub theta_endo_deg: f64,
    pub theta_epi_deg: f64,
    pub unloaded_path: String,
    #[serde(rename = "ED_path")]
    pub ed_path: String,
    pub converged: bool,
    pub split_tags: Vec<String>,
    pub unload_iters: usize,
    pub newton_iters: usize,
    pub mismatch_cm: f64,
    /// Wall time of the inverse solve; the only non-deterministic field.
    pub unload_wall_s: f64,
}

impl CaseRecord {
    pub fn params(&self) -> GlobalParams {
        GlobalParams::new(self.p_mmhg, self.c_pa, self.theta_endo_deg, self.theta_epi_deg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub shape_id: String,
    pub params: GlobalParams,
    pub reason: String,
}

/// Contents of `dataset.json`, written beside `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub grid: ParamGrid,
    pub resolution: MeshResolution,
    pub solver: UnloadOptions,
    pub train_fraction: f64,
    pub shapes: Vec<ShapeSpec>,
    pub failures: Vec<CaseFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub header: DatasetHeader,
    pub records: Vec<CaseRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HEADER_FILE: &str = "dataset.json";
pub const SHAPES_FILE: &str = "shapes.json";

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_shapes(shapes: &[ShapeSpec], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(shapes).expect("shape specs serialise");
    write_atomic(path, text.as_bytes())
}

pub fn load_shapes(path: &Path) -> Result<Vec<ShapeSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub solver: UnloadOptions,
    pub resolution: MeshResolution,
    pub seed: u64,
    pub jobs: usize,
    pub force: bool,
    pub train_fraction: f64,
    /// Bulk modulus override (Pa); the default scales with `C`.
    pub kappa: Option<f64>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            solver: UnloadOptions::default(),
            resolution: MeshResolution::default(),
            seed: 0,
            jobs: 1,
            force: false,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            kappa: None,
        }
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v}").replace('-', "m").replace('.', "p")
}

fn case_id(shape_id: &str, g: &GlobalParams) -> String {
    format!(
        "{shape_id}_P{}_C{}_te{}_ti{}",
        fmt_value(g.p_mmhg),
        fmt_value(g.c_pa),
        fmt_value(g.theta_endo_deg),
        fmt_value(g.theta_epi_deg)
    )
}

/// Unloads each shape (taken as the end-diastolic seed) at every grid
/// point, re-inflates, and writes the consistent pair. Cases whose solve
/// fails are logged and left out.
pub fn build_dataset(
    shapes: &[ShapeSpec],
    grid: &ParamGrid,
    opts: &BuildOptions,
    out_dir: &Path,
    modes: Option<&PcaModes>,
) -> Result<DatasetManifest> {
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !opts.force {
        return Err(Error::io(
            &manifest_path,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "dataset exists; pass --force to overwrite"),
        ));
    }
    let ids: BTreeSet<_> = shapes.iter().map(|s| &s.shape_id).collect();
    if ids.len() != shapes.len() {
        return Err(Error::Config("duplicate shape ids".into()));
    }
    let mesh_dir = out_dir.join("meshes");
    fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;

    let seeds: Vec<TetMesh> = shapes
        .iter()
        .map(|s| build_shell_mesh(s, &opts.resolution, modes))
        .collect::<Result<_>>()?;
    let points = grid.points();
    let jobs: Vec<(usize, GlobalParams)> = (0..shapes.len())
        .flat_map(|s| points.iter().map(move |g| (s, *g)))
        .collect();

    let run = |&(s, g): &(usize, GlobalParams)| -> std::result::Result<CaseRecord, CaseFailure> {
        let spec = &shapes[s];
        let fail = |e: Error| CaseFailure {
            shape_id: spec.shape_id.clone(),
            params: g,
            reason: e.to_string(),
        };
        let id = case_id(&spec.shape_id, &g);
        let t = Instant::now();
        let fibers = fiber_field(&seeds[s], g.theta_endo_deg, g.theta_epi_deg).map_err(fail)?;
        let mut mat = g.material();
        if let Some(k) = opts.kappa {
            mat.kappa_vol = k;
        }
        let pair = make_pair(&seeds[s], &fibers.frames, &mat, g.pressure_pa(), &opts.solver).map_err(fail)?;
        let unloaded_path = format!("meshes/{id}_unloaded.json");
        let ed_path = format!("meshes/{id}_ed.json");
        save_mesh(&pair.unloaded, out_dir.join(&unloaded_path), MeshFormat::NativeJson).map_err(fail)?;
        save_mesh(&pair.loaded, out_dir.join(&ed_path), MeshFormat::NativeJson).map_err(fail)?;
        log::info!("case {id} done in {:.2}s", t.elapsed().as_secs_f64());
        Ok(CaseRecord {
            case_id: id,
            shape_id: spec.shape_id.clone(),
            p_mmhg: g.p_mmhg,
            c_pa: g.c_pa,
            theta_endo_deg: g.theta_endo_deg,
            theta_epi_deg: g.theta_epi_deg,
            unloaded_path,
            ed_path,
            converged: true,
            split_tags: Vec::new(),
            unload_iters: pair.unload_report.unload_iters,
            newton_iters: pair.unload_report.newton_iters + pair.inflate_report.newton_iters,
            mismatch_cm: pair.unload_report.mismatch.unwrap_or(0.0),
            unload_wall_s: pair.unload_report.wall_time,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| jobs.par_iter().map(run).collect());

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => {
                log::warn!("case {} {:?} failed: {}", f.shape_id, f.params, f.reason);
                failures.push(f);
            }
        }
    }
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        seed: opts.seed,
        grid: grid.clone(),
        resolution: opts.resolution.clone(),
        solver: opts.solver.clone(),
        train_fraction: opts.train_fraction,
        shapes: shapes.to_vec(),
        failures,
    };
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        header,
        records,
    };
    if manifest.shape_ids().len() >= 2 {
        let (train, _) = split_by_shape(&manifest, opts.train_fraction, opts.seed)?;
        let train: BTreeSet<_> = train.into_iter().collect();
        for r in &mut manifest.records {
            r.split_tags = vec![if train.contains(&r.case_id) { "shape-train" } else { "shape-test" }.to_string()];
        }
    }
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    /// Writes `dataset.json` then `manifest.jsonl`, each atomically.
    pub fn save(&self) -> Result<()> {
        let header = serde_json::to_string_pretty(&self.header).expect("header serialises");
        write_atomic(&self.root.join(HEADER_FILE), header.as_bytes())?;
        let mut lines = String::new();
        for r in &self.records {
            lines.push_str(&serde_json::to_string(r).expect("record serialises"));
            lines.push('\n');
        }
        write_atomic(&self.root.join(MANIFEST_FILE), lines.as_bytes())
    }

    /// Loads a manifest from its `manifest.jsonl` path (or its directory).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<CaseRecord> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(&path, format!("line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        let hpath = root.join(HEADER_FILE);
        let htext = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header = serde_json::from_str(&htext).map_err(|e| Error::parse(&hpath, e.to_string()))?;
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(&r.case_id) {
                return Err(Error::parse(&path, format!("duplicate case id {}", r.case_id)));
            }
            for p in [&r.unloaded_path, &r.ed_path] {
                if !root.join(p).is_file() {
                    return Err(Error::io(
                        root.join(p),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced mesh missing"),
                    ));
                }
            }
        }
        Ok(DatasetManifest { root, header, records })
    }

    pub fn shape_ids(&self) -> Vec<String> {
        let s: BTreeSet<_> = self.records.iter().map(|r| r.shape_id.clone()).collect();
        s.into_iter().collect()
    }

    pub fn record(&self, case_id: &str) -> Option<&CaseRecord> {
        self.records.iter().find(|r| r.case_id == case_id)
    }

    /// `(unloaded, end-diastolic)` meshes of a case.
    pub fn load_pair(&self, rec: &CaseRecord) -> Result<(TetMesh, TetMesh)> {
        let u = load_mesh(self.root.join(&rec.unloaded_path), MeshFormat::NativeJson)?;
        let e = load_mesh(self.root.join(&rec.ed_path), MeshFormat::NativeJson)?;
        if !u.same_connectivity(&e) {
            return Err(Error::CorrespondenceMismatch(rec.case_id.clone()));
        }
        Ok((u, e))
    }

    pub fn ids_with_tag(&self, tag: &str) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split_tags.iter().any(|t| t == tag))
            .map(|r| r.case_id.clone())
            .collect()
    }
}

/// Shuffled, seeded partition of shapes; returns case ids on each side.
pub fn split_shape_ids(shape_ids: &[String], train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = shape_ids.len();
    if n < 2 {
        return Err(Error::TooFewShapes(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut ids = shape_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let test = ids.split_off(k);
    Ok((ids, test))
}

pub fn split_by_shape(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let (train_shapes, _) = split_shape_ids(&manifest.shape_ids(), train_fraction, seed)?;
    let train_shapes: BTreeSet<_> = train_shapes.into_iter().collect();
    let (tr, te): (Vec<_>, Vec<_>) = manifest.records.iter().partition(|r| train_shapes.contains(&r.shape_id));
    Ok((
        tr.into_iter().map(|r| r.case_id.clone()).collect(),
        te.into_iter().map(|r| r.case_id.clone()).collect(),
    ))
}

/// Test side: every case whose `param` equals `held_value`.
pub fn split_lovo(manifest: &DatasetManifest, param: &str, held_value: f64) -> Result<(Vec<String>, Vec<String>)> {
    let i = GlobalParams::index_of(param).ok_or_else(|| Error::Config(format!("unknown parameter {param}")))?;
    let in_grid = manifest.header.grid.values(i).iter().any(|v| (v - held_value).abs() < 1e-9);
    if !in_grid {
        return Err(Error::ValueNotInGrid {
            param: PARAM_NAMES[i].to_string(),
            value: held_value,
        });
    }
    let (te, tr): (Vec<_>, Vec<_>) = manifest
        .records
        .iter()
        .partition(|r| (r.params().values()[i] - held_value).abs() < 1e-9);
    Ok((
        tr.into_iter().map(|r| r.case_id.clone()).collect(),
        te.into_iter().map(|r| r.case_id.clone()).collect(),
    ))
}

/// Case ids named by a split expression: `all`, `shape-train`,
/// `shape-test`, or `lovo:<param>=<value>:<train|test>`.
pub fn resolve_split(manifest: &DatasetManifest, spec: &str) -> Result<Vec<String>> {
    let bad = || Error::Config(format!("unknown split {spec:?}"));
    match spec {
        "all" => Ok(manifest.records.iter().map(|r| r.case_id.clone()).collect()),
        "shape-train" | "shape-test" => {
            if manifest.records.iter().all(|r| !r.split_tags.is_empty()) {
                return Ok(manifest.ids_with_tag(spec));
            }
            let (tr, te) = split_by_shape(manifest, manifest.header.train_fraction, manifest.header.seed)?;
            Ok(if spec == "shape-train" { tr } else { te })
        }
        _ => {
            let rest = spec.strip_prefix("lovo:").ok_or_else(bad)?;
            let (cond, side) = rest.rsplit_once(':').ok_or_else(bad)?;
            let (param, value) = cond.split_once('=').ok_or_else(bad)?;
            let value: f64 = value.trim().parse().map_err(|_| bad())?;
            let (tr, te) = split_lovo(manifest, param.trim(), value)?;
            match side {
                "train" => Ok(tr),
                "test" => Ok(te),
                _ => Err(bad()),
            }
        }
    }
}
