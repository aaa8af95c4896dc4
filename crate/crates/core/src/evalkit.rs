//! Corresponded-node geometry metrics, the PCA displacement baseline,
//! model evaluation reports, error heatmaps and the ablation runner.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{CaseRecord, DatasetManifest, GlobalParams};
use crate::error::{Error, Result};
use crate::mesh::{save_vtk_with_point_scalar, Point, TetMesh};
use crate::net::{ModelConfig, UnloadNet};
use crate::trainer::{train, TrainConfig};

/// cm.
pub const DEFAULT_DSC_THRESHOLD: f64 = 0.01;
pub const PCA_RIDGE: f64 = 1e-6;
/// Shape coefficients are clamped to this many training standard deviations.
pub const PCA_COEF_CLAMP: f64 = 3.0;

fn check_correspondence(pred: &TetMesh, truth: &TetMesh) -> Result<()> {
    if pred.n_nodes() != truth.n_nodes() {
        return Err(Error::CorrespondenceMismatch(format!(
            "{} predicted nodes vs {} reference nodes",
            pred.n_nodes(),
            truth.n_nodes()
        )));
    }
    Ok(())
}

/// Euclidean error per corresponded node, cm.
pub fn node_errors(pred: &TetMesh, truth: &TetMesh) -> Result<Vec<f64>> {
    check_correspondence(pred, truth)?;
    Ok(pred.nodes.iter().zip(&truth.nodes).map(|(a, b)| (a - b).norm()).collect())
}

/// Fraction of nodes whose error is below `threshold` (cm).
pub fn node_dsc(pred: &TetMesh, truth: &TetMesh, threshold: f64) -> Result<f64> {
    let e = node_errors(pred, truth)?;
    Ok(dsc_of(&e, threshold))
}

fn dsc_of(errors: &[f64], threshold: f64) -> f64 {
    errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub hd: f64,
    pub md: f64,
    pub sd: f64,
}

fn stats_of(errors: &[f64]) -> DistanceStats {
    let n = errors.len() as f64;
    let md = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - md) * (e - md)).sum::<f64>() / n;
    DistanceStats {
        hd: errors.iter().copied().fold(0.0, f64::max),
        md,
        sd: var.sqrt(),
    }
}

/// Max, mean and population standard deviation of node-wise errors.
pub fn distance_stats(pred: &TetMesh, truth: &TetMesh) -> Result<DistanceStats> {
    Ok(stats_of(&node_errors(pred, truth)?))
}

/// Classic symmetric Hausdorff distance between the node sets, ignoring
/// correspondence.
pub fn point_set_hausdorff(a: &[Point], b: &[Point]) -> f64 {
    let directed = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
            .sqrt()
    };
    directed(a, b).max(directed(b, a))
}

/// Writes `pred` as VTK with the per-node error as `error_cm`.
pub fn export_error_heatmap(pred: &TetMesh, truth: &TetMesh, path: impl AsRef<Path>) -> Result<()> {
    let e = node_errors(pred, truth)?;
    save_vtk_with_point_scalar(pred, "error_cm", &e, path)
}

/// Anything that maps an end-diastolic mesh to an unloaded one.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict_unloaded(&self, mesh_ed: &TetMesh, params: &GlobalParams) -> Result<TetMesh>;
}

impl Predictor for UnloadNet {
    fn name(&self) -> String {
        "unloadnet".into()
    }

    fn predict_unloaded(&self, mesh_ed: &TetMesh, params: &GlobalParams) -> Result<TetMesh> {
        self.predict(mesh_ed, params.normalized())
    }
}

/// Linear model on corresponded nodes: PCA of end-diastolic coordinates,
/// PCA of displacement fields, and a ridge map between the coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBaseline {
    pub k: usize,
    pub shape_mean: Vec<f64>,
    pub shape_modes: Vec<Vec<f64>>,
    pub disp_mean: Vec<f64>,
    pub disp_modes: Vec<Vec<f64>>,
    /// `k × k`, row-major: displacement coefficients = shape coefficients · W.
    pub map: Vec<f64>,
    /// Training standard deviation of each shape coefficient.
    pub coef_std: Vec<f64>,
}

fn flatten(nodes: &[Point]) -> Vec<f64> {
    nodes.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Mean row and the top `k` right singular vectors of the centred rows.
fn pca(rows: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let dim = rows[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    // Thin SVD of the transpose keeps the factor sizes at dim × n.
    let svd = centred.transpose().svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let modes = order.iter().take(k).map(|&c| u.column(c).iter().copied().collect()).collect();
    (mean, modes)
}

fn project(x: &[f64], mean: &[f64], modes: &[Vec<f64>]) -> Vec<f64> {
    modes
        .iter()
        .map(|m| m.iter().zip(x.iter().zip(mean)).map(|(a, (b, c))| a * (b - c)).sum())
        .collect()
}

impl PcaBaseline {
    /// `pairs` are `(unloaded, end-diastolic)` with shared connectivity.
    pub fn fit(pairs: &[(TetMesh, TetMesh)], k: usize) -> Result<Self> {
        if k == 0 || pairs.len() < k {
            return Err(Error::InsufficientData(format!("{} cases for {k} modes", pairs.len())));
        }
        let n_nodes = pairs[0].1.n_nodes();
        for (u, e) in pairs {
            if u.n_nodes() != n_nodes || e.n_nodes() != n_nodes {
                return Err(Error::CorrespondenceMismatch("training meshes differ in node count".into()));
            }
        }
        let shapes: Vec<Vec<f64>> = pairs.iter().map(|(_, e)| flatten(&e.nodes)).collect();
        let disps: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(u, e)| u.nodes.iter().zip(&e.nodes).flat_map(|(a, b)| { let d = a - b; [d.x, d.y, d.z] }).collect())
            .collect();
        let (shape_mean, shape_modes) = pca(&shapes, k);
        let (disp_mean, disp_modes) = pca(&disps, k);
        let ks = shape_modes.len();
        let kd = disp_modes.len();
        let cs: Vec<Vec<f64>> = shapes.iter().map(|x| project(x, &shape_mean, &shape_modes)).collect();
        let cd: Vec<Vec<f64>> = disps.iter().map(|x| project(x, &disp_mean, &disp_modes)).collect();
        let a = DMatrix::from_fn(pairs.len(), ks, |i, j| cs[i][j]);
        let b = DMatrix::from_fn(pairs.len(), kd, |i, j| cd[i][j]);
        let lhs = a.transpose() * &a + DMatrix::identity(ks, ks) * PCA_RIDGE;
        let rhs = a.transpose() * b;
        let w = lhs
            .cholesky()
            .ok_or_else(|| Error::Solver("ridge system not positive definite".into()))?
            .solve(&rhs);
        let map = (0..ks).flat_map(|i| (0..kd).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect();
        let coef_std = (0..ks)
            .map(|j| (cs.iter().map(|c| c[j] * c[j]).sum::<f64>() / cs.len() as f64).sqrt())
            .collect();
        Ok(PcaBaseline {
            k,
            shape_mean,
            shape_modes,
            disp_mean,
            disp_modes,
            map,
            coef_std,
        })
    }

    /// Displacement field rebuilt from its own mode coefficients.
    pub fn reconstruct(&self, disp: &[f64]) -> Vec<f64> {
        let c = project(disp, &self.disp_mean, &self.disp_modes);
        self.expand(&c)
    }

    fn expand(&self, c: &[f64]) -> Vec<f64> {
        let mut out = self.disp_mean.clone();
        for (ci, m) in c.iter().zip(&self.disp_modes) {
            out.iter_mut().zip(m).for_each(|(o, v)| *o += ci * v);
        }
        out
    }

    pub fn predict_displacement(&self, mesh_ed: &TetMesh) -> Result<Vec<Point>> {
        if 3 * mesh_ed.n_nodes() != self.shape_mean.len() {
            return Err(Error::CorrespondenceMismatch(format!(
                "baseline fitted on {} nodes, got {}",
                self.shape_mean.len() / 3,
                mesh_ed.n_nodes()
            )));
        }
        let cs: Vec<f64> = project(&flatten(&mesh_ed.nodes), &self.shape_mean, &self.shape_modes)
            .into_iter()
            .zip(&self.coef_std)
            .map(|(c, s)| c.clamp(-PCA_COEF_CLAMP * s, PCA_COEF_CLAMP * s))
            .collect();
        let kd = self.disp_modes.len();
        let cd: Vec<f64> = (0..kd).map(|j| cs.iter().enumerate().map(|(i, c)| c * self.map[i * kd + j]).sum()).collect();
        let d = self.expand(&cd);
        Ok(d.chunks(3).map(|c| Point::new(c[0], c[1], c[2])).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::datagen::write_atomic(path, serde_json::to_string(self).expect("baseline serialises").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

impl Predictor for PcaBaseline {
    fn name(&self) -> String {
        format!("pca-k{}", self.k)
    }

    fn predict_unloaded(&self, mesh_ed: &TetMesh, _params: &GlobalParams) -> Result<TetMesh> {
        let d = self.predict_displacement(mesh_ed)?;
        Ok(mesh_ed.displaced(&d))
    }
}

/// Fits the baseline on the listed cases.
pub fn fit_pca_baseline(manifest: &DatasetManifest, ids: &[String], k: usize) -> Result<PcaBaseline> {
    let pairs = ids
        .iter()
        .map(|id| {
            let r = manifest
                .record(id)
                .ok_or_else(|| Error::Config(format!("case {id} not in manifest")))?;
            manifest.load_pair(r)
        })
        .collect::<Result<Vec<_>>>()?;
    PcaBaseline::fit(&pairs, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub shape_id: String,
    pub dsc: f64,
    pub hd: f64,
    pub md: f64,
    pub sd: f64,
    pub infer_s: f64,
    /// Wall time the inverse finite-element solve took on the same case.
    pub inverse_fe_s: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = xs.into_iter().collect();
        if v.is_empty() {
            return MeanStd::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub threshold_cm: f64,
    pub cases: Vec<CaseMetrics>,
    pub dsc: MeanStd,
    pub hd: MeanStd,
    pub md: MeanStd,
    pub sd: MeanStd,
    pub infer_s: MeanStd,
    pub inverse_fe_s: MeanStd,
}

pub const REPORT_CSV_HEADER: &str = "case_id,shape_id,DSC,HD_cm,MD_cm,SD_cm,infer_s,inverse_fe_s";

impl MetricReport {
    fn from_cases(model: String, threshold_cm: f64, cases: Vec<CaseMetrics>) -> Self {
        let agg = |f: fn(&CaseMetrics) -> f64| MeanStd::of(cases.iter().map(f));
        MetricReport {
            model,
            threshold_cm,
            dsc: agg(|c| c.dsc),
            hd: agg(|c| c.hd),
            md: agg(|c| c.md),
            sd: agg(|c| c.sd),
            infer_s: agg(|c| c.infer_s),
            inverse_fe_s: agg(|c| c.inverse_fe_s),
            cases,
        }
    }

    /// One row per case, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for c in &self.cases {
            s += &format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e}\n",
                c.case_id, c.shape_id, c.dsc, c.hd, c.md, c.sd, c.infer_s, c.inverse_fe_s
            );
        }
        for (label, pick) in [("mean", (|m: &MeanStd| m.mean) as fn(&MeanStd) -> f64), ("std", |m: &MeanStd| m.std)] {
            s += &format!(
                "{label},,{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e}\n",
                pick(&self.dsc),
                pick(&self.hd),
                pick(&self.md),
                pick(&self.sd),
                pick(&self.infer_s),
                pick(&self.inverse_fe_s)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn case_metrics(p: &dyn Predictor, manifest: &DatasetManifest, rec: &CaseRecord, threshold: f64) -> Result<CaseMetrics> {
    let (truth, ed) = manifest.load_pair(rec)?;
    let params = rec.params();
    let t = Instant::now();
    let pred = p.predict_unloaded(&ed, &params)?;
    let infer_s = t.elapsed().as_secs_f64();
    let e = node_errors(&pred, &truth)?;
    let st = stats_of(&e);
    Ok(CaseMetrics {
        case_id: rec.case_id.clone(),
        shape_id: rec.shape_id.clone(),
        dsc: dsc_of(&e, threshold),
        hd: st.hd,
        md: st.md,
        sd: st.sd,
        infer_s,
        inverse_fe_s: rec.unload_wall_s,
    })
}

/// Per-case metrics over `ids`, computed on `jobs` workers; case order
/// follows `ids`.
pub fn evaluate_model(
    p: &dyn Predictor,
    manifest: &DatasetManifest,
    ids: &[String],
    threshold: f64,
    jobs: usize,
) -> Result<MetricReport> {
    if ids.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let recs = ids
        .iter()
        .map(|id| manifest.record(id).ok_or_else(|| Error::Config(format!("case {id} not in manifest"))))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cases = pool.install(|| {
        recs.par_iter()
            .map(|r| case_metrics(p, manifest, r, threshold))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(MetricReport::from_cases(p.name(), threshold, cases))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,DSC_mean,DSC_std,HD_mean,HD_std,MD_mean,MD_std,SD_mean,SD_std\n");
    for r in rows {
        let m = &r.report;
        s += &format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant, m.dsc.mean, m.dsc.std, m.hd.mean, m.hd.std, m.md.mean, m.md.std, m.sd.mean, m.sd.std
        );
    }
    s
}

/// Trains and evaluates each variant with the same seed and split.
pub fn run_ablation_suite(
    manifest: &DatasetManifest,
    train_ids: &[String],
    test_ids: &[String],
    base: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[String],
    threshold: f64,
) -> Result<Vec<AblationRow>> {
    let mut seen = BTreeSet::new();
    let configs = variants
        .iter()
        .map(|v| {
            let key = v.to_ascii_uppercase();
            if !seen.insert(key.clone()) {
                return Err(Error::UnknownVariant(format!("{v} listed twice")));
            }
            Ok((key, base.variant(v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .into_iter()
        .map(|(variant, mc)| {
            log::info!("ablation {variant}");
            let out = train(manifest, train_ids, &mc, cfg, None)?;
            let mut report = evaluate_model(&out.model, manifest, test_ids, threshold, 1)?;
            report.model = variant.clone();
            Ok(AblationRow { variant, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::box_mesh;

    fn moved(m: &TetMesh, i: usize, d: Point) -> TetMesh {
        let mut n = m.nodes.clone();
        n[i] += d;
        m.with_nodes(n)
    }

    #[test]
    fn dsc_counts_and_distance_arithmetic() {
        let m = crate::mesh::tests::regular_tet();
        assert_eq!(node_dsc(&m, &m, 0.01).unwrap(), 1.0);
        let p = moved(&m, 2, Point::new(0.5, 0.0, 0.0));
        assert_eq!(node_dsc(&p, &m, 0.01).unwrap(), 0.75);
        let s = distance_stats(&moved(&m, 0, Point::new(0.3, 0.4, 0.0)), &m).unwrap();
        assert!((s.hd - 0.5).abs() < 1e-15);
        let st = stats_of(&[0.01, 0.05, 0.2]);
        assert_eq!(st.hd, 0.2);
        assert!((st.md - 0.086666666666666667).abs() < 1e-15);
        assert_eq!(distance_stats(&m, &m).unwrap(), DistanceStats { hd: 0.0, md: 0.0, sd: 0.0 });
        let other = box_mesh([1.0; 3], [1, 1, 1]);
        assert!(matches!(node_dsc(&other, &m, 0.01), Err(Error::CorrespondenceMismatch(_))));
    }

    #[test]
    fn point_set_hausdorff_of_shifted_set() {
        let a = vec![Point::zeros(), Point::new(1.0, 0.0, 0.0)];
        let b = vec![Point::new(0.0, 0.2, 0.0), Point::new(1.0, 0.2, 0.0)];
        assert!((point_set_hausdorff(&a, &b) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn heatmap_marks_displaced_node() {
        let dir = tempfile::tempdir().unwrap();
        let m = box_mesh([1.0; 3], [1, 1, 1]);
        let p = moved(&m, 3, Point::new(0.0, 0.0, 0.25));
        let path = dir.path().join("h.vtk");
        export_error_heatmap(&p, &m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let pos = text.find("SCALARS error_cm").unwrap();
        let vals: Vec<f64> = text[pos..]
            .lines()
            .skip(2)
            .flat_map(|l| l.split_whitespace().map(|t| t.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(vals.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(vals[3], 0.25);
        export_error_heatmap(&m, &m, &path).unwrap();
        assert!(matches!(export_error_heatmap(&m, &m, dir.path().join("no/such/h.vtk")), Err(Error::Io { .. })));
    }

    fn toy_pairs(n: usize, identical: bool) -> Vec<(TetMesh, TetMesh)> {
        let base = box_mesh([1.0, 1.0, 2.0], [1, 1, 2]);
        (0..n)
            .map(|c| {
                let s = 1.0 + 0.1 * c as f64;
                let ed = base.with_nodes(base.nodes.iter().map(|p| Point::new(p.x * s, p.y, p.z + 0.05 * (c * c) as f64 * p.x)).collect());
                let d = |p: &Point| if identical { Point::new(0.0, 0.0, -0.1) } else { Point::new(-0.02 * p.x * c as f64, 0.01 * (c as f64).sin(), -0.1 * p.z * (1.0 + 0.3 * c as f64)) };
                let un = ed.with_nodes(ed.nodes.iter().map(|p| p + d(p)).collect());
                (un, ed)
            })
            .collect()
    }

    #[test]
    fn pca_full_rank_reconstructs_training_fields() {
        let pairs = toy_pairs(6, false);
        let b = PcaBaseline::fit(&pairs, 5).unwrap();
        for m in &b.disp_modes {
            for m2 in &b.disp_modes {
                let dot: f64 = m.iter().zip(m2).map(|(a, c)| a * c).sum();
                let want = if std::ptr::eq(m, m2) { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
        for (u, e) in &pairs {
            let d: Vec<f64> = u.nodes.iter().zip(&e.nodes).flat_map(|(a, c)| { let x = a - c; [x.x, x.y, x.z] }).collect();
            let r = b.reconstruct(&d);
            let err = r.iter().zip(&d).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err <= 1e-8 * norm);
        }
        assert!(matches!(PcaBaseline::fit(&pairs, 7), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn pca_identical_fields_predict_the_mean() {
        let pairs = toy_pairs(4, true);
        let b = PcaBaseline::fit(&pairs, 1).unwrap();
        let d = b.predict_displacement(&pairs[2].1).unwrap();
        assert!(d.iter().all(|p| (p - Point::new(0.0, 0.0, -0.1)).norm() < 1e-12));
    }

    #[test]
    fn pca_far_shapes_are_clamped_to_training_spread() {
        let pairs = toy_pairs(6, false);
        let b = PcaBaseline::fit(&pairs, 2).unwrap();
        let along = |t: f64| {
            let x: Vec<f64> = b.shape_mean.iter().zip(&b.shape_modes[0]).map(|(m, v)| m + t * v).collect();
            let nodes = x.chunks(3).map(|c| Point::new(c[0], c[1], c[2])).collect();
            b.predict_displacement(&pairs[0].1.with_nodes(nodes)).unwrap()
        };
        let edge = along(PCA_COEF_CLAMP * b.coef_std[0]);
        let far = along(1e3 * b.coef_std[0]);
        assert!(edge.iter().zip(&far).all(|(a, c)| (a - c).norm() < 1e-10));
    }

    struct Perfect<'a>(&'a DatasetManifest);

    impl Predictor for Perfect<'_> {
        fn name(&self) -> String {
            "truth".into()
        }
        fn predict_unloaded(&self, mesh_ed: &TetMesh, params: &GlobalParams) -> Result<TetMesh> {
            let r = self.0.records.iter().find(|r| r.params() == *params).unwrap();
            let (u, e) = self.0.load_pair(r)?;
            assert_eq!(&e, mesh_ed);
            Ok(u)
        }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let shapes = crate::datagen::sample_shapes(1, 3, crate::datagen::ShapeKind::ParametricEllipsoid, None).unwrap();
        let grid = crate::datagen::ParamGrid {
            pressures_mmhg: vec![4.0],
            stiffness_pa: vec![300.0],
            theta_endo_deg: vec![60.0],
            theta_epi_deg: vec![-60.0],
        };
        let opts = crate::datagen::BuildOptions {
            resolution: crate::datagen::MeshResolution {
                n_theta: 8,
                rings: 5,
                layers: 2,
                node_band: None,
            },
            ..Default::default()
        };
        let m = crate::datagen::build_dataset(&shapes, &grid, &opts, dir.path(), None).unwrap();
        let ids: Vec<String> = m.records.iter().map(|r| r.case_id.clone()).collect();
        let rep = evaluate_model(&Perfect(&m), &m, &ids, 0.01, 1).unwrap();
        assert_eq!(rep.dsc.mean, 1.0);
        assert_eq!(rep.hd.mean, 0.0);
        assert!(rep.cases[0].infer_s >= 0.0 && rep.cases[0].inverse_fe_s > 0.0);
        assert!(rep.to_csv().starts_with(REPORT_CSV_HEADER));
        assert!(matches!(evaluate_model(&Perfect(&m), &m, &[], 0.01, 1), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn duplicate_variant_rejected() {
        let m = DatasetManifest {
            root: Default::default(),
            header: serde_json::from_str(
                r#"{"format_version":1,"seed":0,"grid":{"pressures_mmhg":[],"stiffness_pa":[],"theta_endo_deg":[],"theta_epi_deg":[]},
                "resolution":{"n_theta":3,"rings":2,"layers":2,"node_band":null},
                "solver":{"solver":{"ramp_steps":1,"newton_tol":1e-8,"max_iters":1,"max_refinements":0,"load_mode":"FOLLOWER","bcs":null},"tol":1e-4,"max_iters":1},
                "train_fraction":0.7,"shapes":[],"failures":[]}"#,
            )
            .unwrap(),
            records: vec![],
        };
        let r = run_ablation_suite(&m, &[], &[], &ModelConfig::default(), &TrainConfig::default(), &["A0".into(), "a0".into()], 0.01);
        assert!(matches!(r, Err(Error::UnknownVariant(_))));
    }
}
