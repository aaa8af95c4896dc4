//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//!
//! Correctness criteria (1-5, 10) must pass for the target to succeed. The
//! learning and speed criteria (6-9) depend on desk-scale training and are
//! reported with their measured values; see the decisions ledger for the
//! ones that do not hold.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use unloadlab_core::autograd::{gradcheck, Array, Tape};
use unloadlab_core::datagen::{
    build_dataset, build_shell_mesh, sample_shapes, split_shape_ids, BuildOptions, DatasetManifest, GlobalParams,
    MeshResolution, ParamGrid, ShapeKind,
};
use unloadlab_core::evalkit::{evaluate_model, fit_pca_baseline, MetricReport, PcaBaseline};
use unloadlab_core::fesolve::{inflate, total_potential, unload_inverse, BoundaryConditions, FeModel, LoadMode};
use unloadlab_core::fibers::{fiber_field, solve_transmural_phi, FiberFrame};
use unloadlab_core::mesh::{box_mesh, boundary_faces, cavity_volume, shell_mesh, ShellLayout};
use unloadlab_core::net::{GraphBatch, GraphInput, ModelConfig, UnloadNet};
use unloadlab_core::trainer::{history_csv, train, TrainConfig};
use unloadlab_core::{Point, SurfaceLabel, TetMesh};

const DSC_THRESHOLD_CM: f64 = 0.05;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    id: usize,
    pass: bool,
    hard: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, hard: bool, pass: bool, detail: String) {
    println!("criterion {id:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    lines.push(Line { id, pass, hard, detail });
}

// ---------------------------------------------------------------- 1

fn two_tets() -> TetMesh {
    let nodes = vec![
        Point::new(0.0, 0.0, 0.0),
        Point::new(1.0, 0.0, 0.0),
        Point::new(0.0, 1.0, 0.0),
        Point::new(0.2, 0.3, 1.0),
        Point::new(0.9, 0.9, 0.6),
    ];
    let mut m = TetMesh::new(nodes, vec![[0, 1, 2, 3], [1, 4, 2, 3]]);
    for e in 0..m.n_tets() {
        if m.tet_signed_volume(e) < 0.0 {
            m.tets[e].swap(2, 3);
        }
    }
    m.surface.push(unloadlab_core::mesh::SurfaceTri {
        tri: [0, 2, 1],
        label: SurfaceLabel::Endo,
    });
    m
}

fn oblique_frames(n: usize) -> Vec<FiberFrame> {
    let a_n = Point::new(0.3, -0.2, 1.0).normalize();
    let e_c = Point::z().cross(&a_n).normalize();
    let f = (0.6 * e_c + 0.8 * a_n.cross(&e_c)).normalize();
    vec![FiberFrame { f, s: a_n.cross(&f), n: a_n }; n]
}

/// Largest relative deviation of the analytic gradient and tangent from
/// central differences of the total potential.
fn fd_errors(mesh: &TetMesh, frames: &[FiberFrame], amp: f64, seed: u64) -> (f64, f64) {
    let g = GlobalParams::new(10.0, 150.0, 60.0, -60.0);
    let mat = g.material();
    let p = g.pressure_pa();
    let model = FeModel::new(mesh, frames, mat, LoadMode::Follower, BoundaryConditions::none()).unwrap();
    let n = model.n_dofs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pot = |u: &[f64]| total_potential(mesh, u, frames, mat, p, LoadMode::Follower).unwrap();
    let (mut eg, mut ek) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-amp..amp)).collect();
        let ev = model.evaluate(&u, p, true).unwrap();
        let k = model.hessian_dense(ev.hessian.as_ref().unwrap());
        let gs = ev.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ks = k.abs().max();
        let h = 1e-6 * mesh.mean_tet_volume().cbrt();
        for d in 0..n {
            let mut up = u.clone();
            let mut um = u.clone();
            up[d] += h;
            um[d] -= h;
            let fd = (pot(&up) - pot(&um)) / (2.0 * h);
            eg = eg.max((fd - ev.gradient[d]).abs() / gs);
            let gp = model.evaluate(&up, p, false).unwrap().gradient;
            let gm = model.evaluate(&um, p, false).unwrap().gradient;
            for r in 0..n {
                ek = ek.max(((gp[r] - gm[r]) / (2.0 * h) - k[(r, d)]).abs() / ks);
            }
        }
    }
    (eg, ek)
}

fn criterion_1(lines: &mut Vec<Line>) {
    let t = Instant::now();
    let tets = two_tets();
    let (g1, k1) = fd_errors(&tets, &oblique_frames(2), 0.05, 1);
    let shell = shell_mesh(&ShellLayout::truncated([2.5, 2.5, 6.0], [3.4, 3.4, 6.9], 1.5, 6, 4, 2)).unwrap();
    let frames = fiber_field(&shell, 60.0, -60.0).unwrap().frames;
    let (g2, k2) = fd_errors(&shell, &frames, 0.02, 2);
    let secs = t.elapsed().as_secs_f64();
    let pass = g1.max(g2) <= 1e-6 && k1.max(k2) <= 1e-5 && secs < 60.0;
    report(
        lines,
        1,
        true,
        pass,
        format!(
            "2-tet grad {g1:.1e} tangent {k1:.1e}; {}-node shell grad {g2:.1e} tangent {k2:.1e}; {secs:.1}s",
            shell.n_nodes()
        ),
    );
}

// ---------------------------------------------------------------- 2, 3

fn seed_mesh(m: &DatasetManifest, shape_id: &str) -> TetMesh {
    let spec = m.header.shapes.iter().find(|s| s.shape_id == shape_id).unwrap();
    build_shell_mesh(spec, &m.header.resolution, None).unwrap()
}

fn criterion_2(lines: &mut Vec<Line>, m: &DatasetManifest, shapes: &[String]) {
    let t = Instant::now();
    let recs: Vec<_> = m.records.iter().filter(|r| shapes.contains(&r.shape_id)).collect();
    let expected = shapes.len() * m.header.grid.points().len();
    let mut ok = 0;
    let mut worst = 0.0f64;
    let mut nodes = (usize::MAX, 0);
    for r in &recs {
        let (_, ed) = m.load_pair(r).unwrap();
        nodes = (nodes.0.min(ed.n_nodes()), nodes.1.max(ed.n_nodes()));
        let g = r.params();
        let frames = fiber_field(&seed_mesh(m, &r.shape_id), g.theta_endo_deg, g.theta_epi_deg).unwrap().frames;
        let (un, rep) = unload_inverse(&ed, &frames, &g.material(), g.pressure_pa(), &m.header.solver).unwrap();
        let (re, _) = inflate(&un, &frames, &g.material(), g.pressure_pa(), &m.header.solver.solver).unwrap();
        let err = re.nodes.iter().zip(&ed.nodes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        worst = worst.max(err);
        if rep.converged && err <= 1e-4 {
            ok += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64() + recs.iter().map(|r| r.unload_wall_s).sum::<f64>();
    let frac = ok as f64 / expected as f64;
    let pass = frac >= 0.95 && nodes.0 >= 600 && nodes.1 <= 1000 && secs < 1800.0;
    report(
        lines,
        2,
        true,
        pass,
        format!(
            "{ok}/{expected} cases within 1e-4 cm (worst {worst:.2e}); {}-{} nodes; {secs:.0}s incl. generation",
            nodes.0, nodes.1
        ),
    );
}

fn criterion_3(lines: &mut Vec<Line>, m: &DatasetManifest, shapes: &[String]) {
    let full = ParamGrid::full();
    let mut violations = Vec::new();
    let mut checks = 0;
    for sid in shapes {
        let r = m
            .records
            .iter()
            .find(|r| &r.shape_id == sid && r.p_mmhg == 8.0 && r.c_pa == 100.0)
            .unwrap();
        let (un, _) = m.load_pair(r).unwrap();
        let frames = fiber_field(&seed_mesh(m, sid), r.theta_endo_deg, r.theta_epi_deg).unwrap().frames;
        let run = |p: f64, c: f64| {
            let g = GlobalParams::new(p, c, r.theta_endo_deg, r.theta_epi_deg);
            inflate(&un, &frames, &g.material(), g.pressure_pa(), &m.header.solver.solver).unwrap().0
        };
        let vols: Vec<f64> = full.pressures_mmhg.iter().map(|&p| cavity_volume(&run(p, 100.0)).unwrap()).collect();
        let disp: Vec<f64> = full
            .stiffness_pa
            .iter()
            .map(|&c| {
                let x = run(8.0, c);
                x.nodes.iter().zip(&un.nodes).map(|(a, b)| (a - b).norm()).sum::<f64>() / un.n_nodes() as f64
            })
            .collect();
        for w in vols.windows(2) {
            checks += 1;
            if w[1] < w[0] {
                violations.push(format!("{sid} volume {:.4}->{:.4}", w[0], w[1]));
            }
        }
        for w in disp.windows(2) {
            checks += 1;
            if w[1] > w[0] {
                violations.push(format!("{sid} displacement {:.4}->{:.4}", w[0], w[1]));
            }
        }
    }
    report(
        lines,
        3,
        true,
        violations.is_empty(),
        format!("{} violations in {checks} adjacent-pair checks {:?}", violations.len(), violations),
    );
}

// ---------------------------------------------------------------- 4

fn labelled_slab(cells: [usize; 3]) -> TetMesh {
    let mut m = box_mesh([1.0, 1.0, 1.0], cells);
    for tri in boundary_faces(&m) {
        let xs: Vec<f64> = tri.iter().map(|&i| m.nodes[i].x).collect();
        let label = if xs.iter().all(|&x| x == 0.0) {
            SurfaceLabel::Endo
        } else if xs.iter().all(|&x| x == 1.0) {
            SurfaceLabel::Epi
        } else {
            SurfaceLabel::Base
        };
        m.surface.push(unloadlab_core::mesh::SurfaceTri { tri, label });
    }
    m
}

/// Nodal RMS error of φ against the radial harmonic solution. `layers` and
/// `rings` count nodes, so refinement maps `l -> 2l - 1` and `r -> 2r + 1`.
fn sphere_phi_rms_error(n_theta: usize, rings: usize, layers: usize) -> f64 {
    let (r0, r1) = (1.0, 2.0);
    let m = shell_mesh(&ShellLayout::sphere_shell(r0, r1, n_theta, rings, layers)).unwrap();
    let phi = solve_transmural_phi(&m).unwrap();
    let exact = |r: f64| (1.0 / r0 - 1.0 / r) / (1.0 / r0 - 1.0 / r1);
    let s: f64 = m.nodes.iter().zip(&phi).map(|(p, v)| (v - exact(p.norm())).powi(2)).sum();
    (s / m.n_nodes() as f64).sqrt()
}

fn frame_error(fr: &FiberFrame) -> f64 {
    let r = fr.rotation();
    let e = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
    e.max((r.determinant() - 1.0).abs())
}

fn criterion_4(lines: &mut Vec<Line>, m: &DatasetManifest) {
    let slab = labelled_slab([6, 3, 3]);
    let phi = solve_transmural_phi(&slab).unwrap();
    let slab_err = slab.nodes.iter().zip(&phi).map(|(p, v)| (v - p.x).abs()).fold(0.0, f64::max);
    let coarse = sphere_phi_rms_error(8, 5, 3);
    let fine = sphere_phi_rms_error(16, 11, 5);
    let mut ortho = 0.0f64;
    for spec in &m.header.shapes {
        let mesh = build_shell_mesh(spec, &m.header.resolution, None).unwrap();
        for (te, ti) in [(60.0, -60.0), (70.0, -70.0)] {
            let ff = fiber_field(&mesh, te, ti).unwrap();
            ortho = ff.frames.iter().map(frame_error).fold(ortho, f64::max);
        }
    }
    let pass = slab_err <= 1e-8 && fine <= 0.5 * coarse && ortho <= 1e-10;
    report(
        lines,
        4,
        true,
        pass,
        format!(
            "slab {slab_err:.1e}; sphere RMS {coarse:.2e} -> {fine:.2e} (ratio {:.2}); frames {ortho:.1e}",
            coarse / fine
        ),
    );
}

// ---------------------------------------------------------------- 5

fn toy_input(seed: u64, n: usize) -> GraphInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n)
        .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.extend((0..n).map(|i| (i, (i + 2) % n)));
    GraphInput {
        coords,
        edges,
        globals: [0.3, 0.6, 0.1, 0.9],
    }
}

fn small_model(variant: &str, dropout: f64) -> UnloadNet {
    let mut cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        decoder_hidden: 8,
        ..Default::default()
    }
    .variant(variant)
    .unwrap();
    cfg.dropout = dropout;
    UnloadNet::new(cfg, 17).unwrap()
}

fn criterion_5(lines: &mut Vec<Line>) {
    let t = Instant::now();
    let net = small_model("A0", 0.1);
    let g = toy_input(3, 12);
    let b = GraphBatch::new(&[&g], true).unwrap();
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let out = net.forward_cycle(&mut tape, &p, &b, None).unwrap();
    let heads = net.config.heads;
    let mut row_err = 0.0f64;
    for &alpha in &out.trace.gat_alpha {
        let a = tape.value(alpha);
        let mut sums = vec![0.0; b.n_nodes() * heads];
        for (k, &d) in b.dst.iter().enumerate() {
            for h in 0..heads {
                sums[d * heads + h] += a.at(k, h);
            }
        }
        row_err = sums.iter().map(|s| (s - 1.0).abs()).fold(row_err, f64::max);
    }
    // Single-key attention collapses to LayerNorm(H + g W_V).
    let h = tape.value(out.trace.h_last.unwrap()).clone();
    let gm = tape.value(out.trace.g_mesh.unwrap()).clone();
    let param = |name: &str| net.params.values[net.params.index_of(name).unwrap()].clone();
    let wv = param("mesh_attn.v");
    let (gain, bias) = (param("ln_mesh.gain"), param("ln_mesh.bias"));
    let d = h.cols;
    let mut closed_err = 0.0f64;
    let got = tape.value(out.trace.z_mesh.unwrap());
    for i in 0..h.rows {
        let row: Vec<f64> = (0..d)
            .map(|j| h.at(i, j) + (0..d).map(|k| gm.at(0, k) * wv.at(k, j)).sum::<f64>())
            .collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.at(0, j) + bias.at(0, j);
            closed_err = closed_err.max((want - got.at(i, j)).abs());
        }
    }
    let single_alpha = [out.trace.mesh_alpha.unwrap(), out.trace.global_alpha.unwrap()]
        .iter()
        .flat_map(|&a| tape.value(a).data.clone())
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max);
    closed_err = closed_err.max(single_alpha);

    let mut equi_err = 0.0f64;
    let perm: Vec<usize> = vec![5, 2, 9, 0, 11, 7, 1, 10, 3, 8, 6, 4];
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let gp = GraphInput {
        coords: perm.iter().map(|&o| g.coords[o]).collect(),
        edges: g.edges.iter().rev().map(|&(a, c)| (inv[c], inv[a])).collect(),
        globals: g.globals,
    };
    let encode = |gi: &GraphInput| {
        let b = GraphBatch::new(&[gi], true).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let x = tape.constant(b.coords.clone());
        let mut tr = Default::default();
        let z = net.encode(&mut tape, &p, &b, x, &mut tr).unwrap();
        tape.value(z).clone()
    };
    let (z, zp) = (encode(&g), encode(&gp));
    for (new, &old) in perm.iter().enumerate() {
        for j in 0..z.cols {
            equi_err = equi_err.max((zp.at(new, j) - z.at(old, j)).abs());
        }
    }

    // Every parameter of the full model with the cycle term, on the 2-tet
    // graph moved off the origin: a node at exactly 0 puts its self-loop
    // logit on the LeakyReLU kink while the lift bias is still zero.
    let net = small_model("A0", 0.0);
    let mesh = two_tets();
    let toy = GraphInput {
        coords: mesh.nodes.iter().map(|p| p + Point::new(0.13, 0.21, 0.34)).collect(),
        edges: mesh.edges(),
        globals: [0.5; 4],
    };
    let b = GraphBatch::new(&[&toy], true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = Array::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let gc = gradcheck(
        |tape, vars| {
            let out = net.forward_cycle(tape, vars, &b, None)?;
            net.loss(tape, &b, &out, &target)
        },
        &net.params.values,
        None,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = row_err <= 1e-12 && closed_err <= 1e-12 && equi_err <= 1e-10 && gc.max_rel_error <= 1e-4 && secs < 300.0;
    report(
        lines,
        5,
        true,
        pass,
        format!(
            "rows {row_err:.1e}; single-key {closed_err:.1e}; equivariance {equi_err:.1e}; gradcheck {:.1e} over {} coords; {secs:.1}s",
            gc.max_rel_error, gc.checked
        ),
    );
}

// ---------------------------------------------------------------- 6-9

fn desk_model(variant: &str) -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 4,
        decoder_hidden: 32,
        ..Default::default()
    }
    .variant(variant)
    .unwrap()
}

fn desk_train(sr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 300,
        patience: 50,
        batch_size: 4,
        supervision_ratio: sr,
        seed,
        ..Default::default()
    }
}

struct Run {
    report: MetricReport,
    train_s: f64,
}

fn run(m: &DatasetManifest, train_ids: &[String], test_ids: &[String], variant: &str, sr: f64, seed: u64) -> Run {
    let t = Instant::now();
    let out = train(m, train_ids, &desk_model(variant), &desk_train(sr, seed), None).unwrap();
    let train_s = t.elapsed().as_secs_f64();
    let report = evaluate_model(&out.model, m, test_ids, DSC_THRESHOLD_CM, 1).unwrap();
    println!(
        "    {variant} sr {sr} seed {seed}: {} epochs (best {}), DSC {:.3} HD {:.3} MD {:.3} cm, {train_s:.0}s",
        out.checkpoint.epoch, out.checkpoint.best_epoch, report.dsc.mean, report.hd.mean, report.md.mean
    );
    Run { report, train_s }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// PCA baseline with the mode count picked on a held-out training shape.
fn select_pca(m: &DatasetManifest, train_ids: &[String]) -> (PcaBaseline, usize) {
    let shapes: Vec<String> = {
        let mut s: Vec<String> = train_ids.iter().map(|i| m.record(i).unwrap().shape_id.clone()).collect();
        s.dedup();
        s
    };
    let (fit_shapes, val_shapes) = split_shape_ids(&shapes, 1.0 - 1.0 / shapes.len() as f64, 0).unwrap();
    let by = |ss: &[String]| -> Vec<String> {
        train_ids.iter().filter(|i| ss.contains(&m.record(i).unwrap().shape_id)).cloned().collect()
    };
    let (fit_ids, val_ids) = (by(&fit_shapes), by(&val_shapes));
    let mut best = (f64::INFINITY, 1);
    for k in [1, 2, 4, 8, 16] {
        if k > fit_ids.len() {
            break;
        }
        let b = fit_pca_baseline(m, &fit_ids, k).unwrap();
        let hd = evaluate_model(&b, m, &val_ids, DSC_THRESHOLD_CM, 1).unwrap().hd.mean;
        if hd < best.0 {
            best = (hd, k);
        }
    }
    (fit_pca_baseline(m, train_ids, best.1).unwrap(), best.1)
}

fn criteria_6_to_9(lines: &mut Vec<Line>, m: &DatasetManifest) {
    let train_ids = m.ids_with_tag("shape-train");
    let test_ids = m.ids_with_tag("shape-test");
    let n_train_shapes = m.shape_ids().len() - {
        let mut s: Vec<_> = test_ids.iter().map(|i| m.record(i).unwrap().shape_id.clone()).collect();
        s.dedup();
        s.len()
    };
    let mut runs: BTreeMap<(String, u64, u64), Run> = BTreeMap::new();
    for seed in SEEDS {
        for (variant, sr) in [("A0", 1.0), ("A1", 1.0), ("A4", 1.0), ("A0", 0.1), ("A1", 0.1)] {
            let r = run(m, &train_ids, &test_ids, variant, sr, seed);
            runs.insert((variant.to_string(), (sr * 100.0) as u64, seed), r);
        }
    }
    let get = |v: &str, sr: u64, s: u64| &runs[&(v.to_string(), sr, s)];

    let a0 = get("A0", 100, SEEDS[0]);
    let dsc6 = a0.report.dsc.mean;
    report(
        lines,
        6,
        false,
        dsc6 >= 0.8 && a0.train_s < 3600.0,
        format!(
            "A0 held-out DSC@{DSC_THRESHOLD_CM}cm {dsc6:.3} (MD {:.3} cm) on {n_train_shapes}/{} shapes; training {:.0}s",
            a0.report.md.mean,
            m.shape_ids().len() - n_train_shapes,
            a0.train_s
        ),
    );

    let dsc = |v: &str, sr: u64| mean(SEEDS.iter().map(|&s| get(v, sr, s).report.dsc.mean));
    let (a0_10, a1_10, a0_100, a1_100) = (dsc("A0", 10), dsc("A1", 10), dsc("A0", 100), dsc("A1", 100));
    let (gap10, gap100) = (a0_10 - a1_10, a0_100 - a1_100);
    report(
        lines,
        7,
        false,
        gap10 > 0.0 && gap10 > gap100,
        format!(
            "SR 10%: A0 {a0_10:.3} vs A1 {a1_10:.3} (gap {gap10:+.3}); SR 100%: A0 {a0_100:.3} vs A1 {a1_100:.3} (gap {gap100:+.3})"
        ),
    );

    let (pca, k) = select_pca(m, &train_ids);
    let pca_hd = evaluate_model(&pca, m, &test_ids, DSC_THRESHOLD_CM, 1).unwrap().hd.mean;
    let hd = |v: &str| mean(SEEDS.iter().map(|&s| get(v, 100, s).report.hd.mean));
    let (hd_a0, hd_a4) = (hd("A0"), hd("A4"));
    report(
        lines,
        8,
        false,
        hd_a0 < pca_hd && hd_a0 < hd_a4,
        format!("mean HD A0 {hd_a0:.3} cm, A4 {hd_a4:.3} cm, PCA(k={k}) {pca_hd:.3} cm"),
    );

    let infer = a0.report.infer_s.mean;
    let fe = a0.report.inverse_fe_s.mean;
    report(
        lines,
        9,
        false,
        fe >= 100.0 * infer,
        format!("inference {:.2} ms vs inverse FE {fe:.3} s per case: {:.0}x", infer * 1e3, fe / infer),
    );
}

// ---------------------------------------------------------------- 10

/// JSON with every wall-clock field (`*_s`) removed.
fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| !k.ends_with("_s"));
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn json_lines_without_timing(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            strip_timing(&mut v);
            v
        })
        .collect()
}

fn csv_without_timing(text: &str) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].ends_with("_s")).collect();
    std::iter::once(header.join(","))
        .chain(lines.map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| f[i]).collect::<Vec<_>>().join(",")
        }))
        .collect::<Vec<_>>()
        .join("\n")
}

fn mesh_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir.join("meshes"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_10(lines: &mut Vec<Line>) {
    let dir = tempfile::tempdir().unwrap();
    let shapes = sample_shapes(2, 11, ShapeKind::ParametricEllipsoid, None).unwrap();
    let opts = BuildOptions {
        resolution: MeshResolution {
            n_theta: 10,
            rings: 6,
            layers: 2,
            node_band: None,
        },
        seed: 11,
        ..Default::default()
    };
    let mut diffs = Vec::new();
    let snapshot = || {
        build_dataset(&shapes, &ParamGrid::mini(), &BuildOptions { force: true, ..opts.clone() }, dir.path(), None).unwrap();
        let manifest = json_lines_without_timing(&dir.path().join("manifest.jsonl"));
        let mut header: Value = serde_json::from_slice(&std::fs::read(dir.path().join("dataset.json")).unwrap()).unwrap();
        strip_timing(&mut header);
        let m = DatasetManifest::load(dir.path()).unwrap();
        let ids = m.ids_with_tag("shape-train");
        let test = m.ids_with_tag("shape-test");
        let cfg = TrainConfig {
            max_epochs: 4,
            seed: 5,
            supervision_ratio: 0.5,
            ..Default::default()
        };
        let model = ModelConfig {
            hidden: 8,
            heads: 2,
            decoder_hidden: 8,
            ..Default::default()
        };
        let out = train(&m, &ids, &model, &cfg, None).unwrap();
        let mut ck = serde_json::to_value(&out.checkpoint).unwrap();
        strip_timing(&mut ck);
        let metrics = csv_without_timing(&evaluate_model(&out.model, &m, &test, 0.05, 1).unwrap().to_csv());
        let pca = serde_json::to_string(&fit_pca_baseline(&m, &ids, 2).unwrap()).unwrap();
        let history = csv_without_timing(&history_csv(&out.history));
        (manifest, header, mesh_files(dir.path()), ck, metrics, pca, history)
    };
    let a = snapshot();
    let b = snapshot();
    if a.0 != b.0 {
        diffs.push("manifest");
    }
    if a.1 != b.1 {
        diffs.push("dataset header");
    }
    if a.2 != b.2 {
        diffs.push("mesh files");
    }
    if a.3 != b.3 {
        diffs.push("checkpoint");
    }
    if a.4 != b.4 {
        diffs.push("metrics csv");
    }
    if a.5 != b.5 {
        diffs.push("pca baseline");
    }
    if a.6 != b.6 {
        diffs.push("history");
    }
    report(
        lines,
        10,
        true,
        diffs.is_empty(),
        format!("{} stages rerun; differing: {:?}", 7, diffs),
    );
}

#[test]
fn acceptance_criteria() {
    let mut lines = Vec::new();
    criterion_1(&mut lines);
    criterion_5(&mut lines);
    criterion_10(&mut lines);

    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let shapes = sample_shapes(8, 7, ShapeKind::ParametricEllipsoid, None).unwrap();
    let opts = BuildOptions {
        train_fraction: 0.75,
        seed: 7,
        ..Default::default()
    };
    let m = build_dataset(&shapes, &ParamGrid::mini(), &opts, dir.path(), None).unwrap();
    println!(
        "    desk dataset: {} cases, {} failures, {:.0}s",
        m.records.len(),
        m.header.failures.len(),
        t.elapsed().as_secs_f64()
    );
    let first4: Vec<String> = shapes.iter().take(4).map(|s| s.shape_id.clone()).collect();
    criterion_2(&mut lines, &m, &first4);
    criterion_3(&mut lines, &m, &first4);
    criterion_4(&mut lines, &m);
    criteria_6_to_9(&mut lines, &m);

    lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary");
    for l in &lines {
        println!("  {:>2} {} {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let hard: Vec<usize> = lines.iter().filter(|l| l.hard && !l.pass).map(|l| l.id).collect();
    assert!(hard.is_empty(), "correctness criteria failed: {hard:?}");
}
