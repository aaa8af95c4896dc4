use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use unloadlab_core::datagen::{
    build_dataset, load_shapes, resolve_split, sample_shapes, save_shapes, write_atomic, BuildOptions, DatasetManifest,
    GlobalParams, MeshResolution, ParamGrid, PcaModes, ShapeKind, SHAPES_FILE,
};
use unloadlab_core::evalkit::{
    ablation_csv, evaluate_model, export_error_heatmap, fit_pca_baseline, run_ablation_suite, PcaBaseline, Predictor,
    DEFAULT_DSC_THRESHOLD,
};
use unloadlab_core::fesolve::{inflate, LoadMode, unload_inverse, UnloadOptions};
use unloadlab_core::fibers::fiber_field;
use unloadlab_core::mesh::{load_mesh, save_mesh, MeshFormat};
use unloadlab_core::net::{ModelConfig, VARIANTS};
use unloadlab_core::trainer::{history_csv, train, Checkpoint, TrainConfig};
use unloadlab_core::{Error, Result, TetMesh};

use crate::config::{parse_bool, Settings};
use crate::{
    AblateArgs, BuildDatasetArgs, CaseArgs, Cli, Command, EvaluateArgs, FeArgs, GenShapesArgs, ModelArgs, PcaArgs,
    PredictArgs, SolverArgs, TrainArgs, TrainCmdArgs,
};

struct Ctx {
    settings: Settings,
    seed: u64,
    jobs: usize,
    out: PathBuf,
}

impl Ctx {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        write_atomic(&p, text.as_bytes())?;
        log::info!("wrote {}", p.display());
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.seed(cli.seed)?;
    let jobs = settings.get("jobs", cli.jobs, 1usize)?;
    let out = settings.require_path("out", cli.out)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut ctx = Ctx {
        settings,
        seed,
        jobs,
        out,
    };
    match cli.command {
        Command::GenShapes(a) => gen_shapes(&mut ctx, a),
        Command::BuildDataset(a) => build(&mut ctx, a),
        Command::Inflate(a) => fe(&mut ctx, a, false),
        Command::Unload(a) => fe(&mut ctx, a, true),
        Command::Train(a) => train_cmd(&mut ctx, a),
        Command::Predict(a) => predict_cmd(&mut ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&mut ctx, a),
        Command::Ablate(a) => ablate_cmd(&mut ctx, a),
        Command::PcaBaseline(a) => pca_cmd(&mut ctx, a),
    }
}

fn load_modes(s: &mut Settings, flag: Option<PathBuf>) -> Result<Option<PcaModes>> {
    s.path("modes", flag)?.map(PcaModes::load).transpose()
}

fn gen_shapes(ctx: &mut Ctx, a: GenShapesArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let n: usize = s.require("n", a.n)?;
    let kind_s = s.get("kind", a.kind, "ellipsoid".to_string())?;
    let kind = ShapeKind::parse(&kind_s).ok_or_else(|| Error::Config(format!("unknown shape kind {kind_s:?}")))?;
    let modes = load_modes(s, a.modes)?;
    s.log_resolved("gen-shapes");
    let shapes = sample_shapes(n, ctx.seed, kind, modes.as_ref())?;
    save_shapes(&shapes, &ctx.file(SHAPES_FILE))?;
    log::info!("wrote {} shapes to {}", shapes.len(), ctx.file(SHAPES_FILE).display());
    Ok(())
}

fn unload_options(s: &mut Settings, a: SolverArgs) -> Result<(UnloadOptions, Option<f64>)> {
    let mut o = UnloadOptions::default();
    o.solver.ramp_steps = s.get("ramp_steps", a.ramp_steps, o.solver.ramp_steps)?;
    o.solver.newton_tol = s.get("newton_tol", a.newton_tol, o.solver.newton_tol)?;
    o.solver.max_iters = s.get("max_iters", a.max_iters, o.solver.max_iters)?;
    let mode = s.get("load_mode", a.load_mode, o.solver.load_mode.as_str().to_string())?;
    o.solver.load_mode = LoadMode::parse(&mode)?;
    o.tol = s.get("unload_tol", a.unload_tol, o.tol)?;
    o.max_iters = s.get("unload_max_iters", a.unload_max_iters, o.max_iters)?;
    let kappa = s.opt("kappa", a.kappa)?;
    Ok((o, kappa))
}

fn build(ctx: &mut Ctx, a: BuildDatasetArgs) -> Result<()> {
    let default_shapes = ctx.file(SHAPES_FILE);
    let s = &mut ctx.settings;
    let shapes_path = s.path("shapes", a.shapes)?.unwrap_or(default_shapes);
    let grid_name = s.get("grid", a.grid, "mini".to_string())?;
    let grid = ParamGrid::by_name(&grid_name).ok_or_else(|| Error::Config(format!("unknown grid {grid_name:?}")))?;
    let modes = load_modes(s, a.modes)?;
    let mut res = MeshResolution::default();
    let n_theta = s.opt("n_theta", a.n_theta)?;
    let rings = s.opt("rings", a.rings)?;
    let layers = s.opt("layers", a.layers)?;
    if n_theta.is_some() || rings.is_some() || layers.is_some() {
        res.node_band = None;
    }
    res.n_theta = n_theta.unwrap_or(res.n_theta);
    res.rings = rings.unwrap_or(res.rings);
    res.layers = layers.unwrap_or(res.layers);
    let mut opts = BuildOptions {
        resolution: res,
        seed: ctx.seed,
        jobs: ctx.jobs,
        ..BuildOptions::default()
    };
    opts.train_fraction = s.get("train_fraction", a.train_fraction, opts.train_fraction)?;
    opts.force = s.switch("force", a.force)?;
    (opts.solver, opts.kappa) = unload_options(s, a.solver)?;
    s.log_resolved("build-dataset");

    let shapes = load_shapes(&shapes_path)?;
    let t = Instant::now();
    let m = build_dataset(&shapes, &grid, &opts, &ctx.out, modes.as_ref())?;
    log::info!(
        "dataset: {} cases, {} failures in {:.1}s",
        m.records.len(),
        m.header.failures.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn case_params(s: &mut Settings, a: &mut CaseArgs) -> Result<(TetMesh, GlobalParams)> {
    let path = s.require_path("mesh", a.mesh.take())?;
    let p = s.require("p", a.p)?;
    let c = s.require("c", a.c)?;
    let te = s.get("theta_endo", a.theta_endo, 60.0)?;
    let ti = s.get("theta_epi", a.theta_epi, -60.0)?;
    let mesh = load_mesh(&path, MeshFormat::from_path(&path))?;
    Ok((mesh, GlobalParams::new(p, c, te, ti)))
}

fn save_both(ctx: &Ctx, mesh: &TetMesh, stem: &str) -> Result<()> {
    for (ext, fmt) in [("json", MeshFormat::NativeJson), ("vtk", MeshFormat::VtkLegacyAscii)] {
        let p = ctx.file(&format!("{stem}.{ext}"));
        save_mesh(mesh, &p, fmt)?;
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn fe(ctx: &mut Ctx, mut a: FeArgs, unload: bool) -> Result<()> {
    let s = &mut ctx.settings;
    let (mesh, g) = case_params(s, &mut a.case)?;
    let (opts, kappa) = unload_options(s, a.solver)?;
    s.log_resolved(if unload { "unload" } else { "inflate" });
    let mut mat = g.material();
    if let Some(k) = kappa {
        mat.kappa_vol = k;
    }
    let fibers = fiber_field(&mesh, g.theta_endo_deg, g.theta_epi_deg)?;
    let (result, report, stem) = if unload {
        let (m, r) = unload_inverse(&mesh, &fibers.frames, &mat, g.pressure_pa(), &opts)?;
        (m, r, "unloaded")
    } else {
        let (m, r) = inflate(&mesh, &fibers.frames, &mat, g.pressure_pa(), &opts.solver)?;
        (m, r, "inflated")
    };
    save_both(ctx, &result, stem)?;
    let rep = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    ctx.write("report.json", &rep)?;
    if !report.converged {
        return Err(Error::NonConvergence(format!(
            "{stem} mesh written from the best iterate (mismatch {:?})",
            report.mismatch
        )));
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let abs = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::load(abs)
}

fn model_config(s: &mut Settings, a: ModelArgs) -> Result<ModelConfig> {
    let variant = s.get("variant", a.variant, "A0".to_string())?;
    let mut m = ModelConfig::default().variant(&variant)?;
    if let Some(c) = s.opt("cycle", a.cycle)? {
        m.cycle = parse_bool(&c).ok_or_else(|| Error::Config(format!("cycle must be on|off, got {c:?}")))?;
    }
    m.hidden = s.get("hidden", a.hidden, m.hidden)?;
    m.heads = s.get("heads", a.heads, m.heads)?;
    m.gat_layers = s.get("gat_layers", a.gat_layers, m.gat_layers)?;
    m.decoder_hidden = s.get("decoder_hidden", a.decoder_hidden, m.decoder_hidden)?;
    m.dropout = s.get("dropout", a.dropout, m.dropout)?;
    m.lambda_cycle = s.get("lambda_cycle", a.lambda_cycle, m.lambda_cycle)?;
    m.validate()?;
    Ok(m)
}

fn train_config(s: &mut Settings, a: TrainArgs, base: TrainConfig, seed: u64) -> Result<TrainConfig> {
    let c = TrainConfig {
        max_epochs: s.get("epochs", a.epochs, base.max_epochs)?,
        lr: s.get("lr", a.lr, base.lr)?,
        weight_decay: s.get("wd", a.wd, base.weight_decay)?,
        batch_size: s.get("batch_size", a.batch_size, base.batch_size)?,
        patience: s.get("patience", a.patience, base.patience)?,
        supervision_ratio: s.get("sr", a.sr, base.supervision_ratio)?,
        val_fraction: s.get("val_fraction", a.val_fraction, base.val_fraction)?,
        grad_clip: s.get("grad_clip", a.grad_clip, base.grad_clip)?,
        seed,
    };
    c.validate()?;
    Ok(c)
}

fn split_ids(m: &DatasetManifest, spec: &str) -> Result<Vec<String>> {
    let ids = resolve_split(m, spec)?;
    if ids.is_empty() {
        return Err(Error::EmptySplit(spec.to_string()));
    }
    Ok(ids)
}

fn train_cmd(ctx: &mut Ctx, a: TrainCmdArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let manifest_path = s.require_path("manifest", a.manifest)?;
    let split = s.get("split", a.split, "shape-train".to_string())?;
    let resume = s.path("resume", a.resume)?.map(|p| Checkpoint::load(&p)).transpose()?;
    let model_cfg = model_config(s, a.model)?;
    let base = resume.as_ref().map(|c| c.train_config.clone()).unwrap_or_default();
    let cfg = train_config(s, a.train, base, ctx.seed)?;
    s.log_resolved("train");

    let manifest = load_manifest(&manifest_path)?;
    let ids = split_ids(&manifest, &split)?;
    let out = train(&manifest, &ids, &model_cfg, &cfg, resume)?;
    out.checkpoint.save(&ctx.file("model.ckpt"))?;
    log::info!("wrote {}", ctx.file("model.ckpt").display());
    ctx.write("history.csv", &history_csv(&out.history))?;
    let ck = &out.checkpoint;
    log::info!("best val {:.4e} at epoch {} of {}", ck.best_val, ck.best_epoch, ck.epoch);
    Ok(())
}

enum Loaded {
    Net(Box<Checkpoint>),
    Pca(PcaBaseline),
}

fn load_predictor(path: &Path) -> Result<Loaded> {
    match Checkpoint::load(path) {
        Ok(ck) => Ok(Loaded::Net(Box::new(ck))),
        Err(Error::Parse { .. }) => PcaBaseline::load(path)
            .map(Loaded::Pca)
            .map_err(|_| Error::parse(path, "neither a checkpoint nor a PCA baseline")),
        Err(e) => Err(e),
    }
}

fn predict_cmd(ctx: &mut Ctx, mut a: PredictArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let model_path = s.require_path("model", a.model)?;
    let (mesh, g) = case_params(s, &mut a.case)?;
    s.log_resolved("predict");
    let predictor: Box<dyn Predictor> = match load_predictor(&model_path)? {
        Loaded::Net(ck) => Box::new(ck.best_model()?),
        Loaded::Pca(p) => Box::new(p),
    };
    let t = Instant::now();
    let pred = predictor.predict_unloaded(&mesh, &g)?;
    let secs = t.elapsed().as_secs_f64();
    save_both(ctx, &pred, "predicted_unloaded")?;
    ctx.write(
        "prediction.json",
        &json!({ "model": predictor.name(), "params": g, "infer_s": secs }).to_string(),
    )?;
    Ok(())
}

fn evaluate_cmd(ctx: &mut Ctx, a: EvaluateArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let model_path = s.require_path("model", a.model)?;
    let manifest_flag = s.path("manifest", a.manifest)?;
    let split = s.get("split", a.split, "shape-test".to_string())?;
    let threshold = s.get("threshold", a.threshold, DEFAULT_DSC_THRESHOLD)?;
    let heatmaps = s.switch("heatmaps", a.heatmaps)?;
    s.log_resolved("evaluate");

    let (predictor, recorded): (Box<dyn Predictor>, Option<String>) = match load_predictor(&model_path)? {
        Loaded::Net(ck) => (Box::new(ck.best_model()?), ck.manifest.clone()),
        Loaded::Pca(p) => (Box::new(p), None),
    };
    let manifest_path = manifest_flag
        .or(recorded.map(PathBuf::from))
        .ok_or_else(|| Error::Config("missing manifest: pass --manifest".into()))?;
    let manifest = load_manifest(&manifest_path)?;
    let ids = resolve_split(&manifest, &split)?;
    let report = evaluate_model(predictor.as_ref(), &manifest, &ids, threshold, ctx.jobs)?;
    ctx.write("metrics.csv", &report.to_csv())?;
    ctx.write("metrics.json", &report.to_json())?;
    log::info!(
        "DSC {:.4} HD {:.4} MD {:.4} SD {:.4} over {} cases",
        report.dsc.mean,
        report.hd.mean,
        report.md.mean,
        report.sd.mean,
        report.cases.len()
    );
    if heatmaps {
        let dir = ctx.file("heatmaps");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for id in &ids {
            let rec = manifest.record(id).expect("resolved ids come from the manifest");
            let (truth, ed) = manifest.load_pair(rec)?;
            let pred = predictor.predict_unloaded(&ed, &rec.params())?;
            export_error_heatmap(&pred, &truth, dir.join(format!("{id}_error.vtk")))?;
        }
        log::info!("wrote {} heatmaps to {}", ids.len(), dir.display());
    }
    Ok(())
}

fn ablate_cmd(ctx: &mut Ctx, a: AblateArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let manifest_path = s.require_path("manifest", a.manifest)?;
    let variants = s.get("variants", a.variants, VARIANTS.join(","))?;
    let train_split = s.get("train_split", a.train_split, "shape-train".to_string())?;
    let test_split = s.get("test_split", a.test_split, "shape-test".to_string())?;
    let threshold = s.get("threshold", a.threshold, DEFAULT_DSC_THRESHOLD)?;
    let base = model_config(s, a.model)?;
    let cfg = train_config(s, a.train, TrainConfig::default(), ctx.seed)?;
    s.log_resolved("ablate");

    let variants: Vec<String> = variants.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    let manifest = load_manifest(&manifest_path)?;
    let train_ids = split_ids(&manifest, &train_split)?;
    let test_ids = resolve_split(&manifest, &test_split)?;
    let rows = run_ablation_suite(&manifest, &train_ids, &test_ids, &base, &cfg, &variants, threshold)?;
    ctx.write("ablation.csv", &ablation_csv(&rows))?;
    let js = serde_json::to_string_pretty(&rows).map_err(|e| Error::Config(e.to_string()))?;
    ctx.write("ablation.json", &js)?;
    Ok(())
}

fn pca_cmd(ctx: &mut Ctx, a: PcaArgs) -> Result<()> {
    let s = &mut ctx.settings;
    let manifest_path = s.require_path("manifest", a.manifest)?;
    let k = s.get("k", a.k, 4usize)?;
    let train_split = s.get("train_split", a.train_split, "shape-train".to_string())?;
    let test_split = s.get("test_split", a.test_split, "shape-test".to_string())?;
    let threshold = s.get("threshold", a.threshold, DEFAULT_DSC_THRESHOLD)?;
    s.log_resolved("pca-baseline");

    let manifest = load_manifest(&manifest_path)?;
    let train_ids = split_ids(&manifest, &train_split)?;
    let pca = fit_pca_baseline(&manifest, &train_ids, k)?;
    pca.save(&ctx.file("pca.json"))?;
    log::info!("wrote {}", ctx.file("pca.json").display());
    let test_ids = resolve_split(&manifest, &test_split)?;
    let report = evaluate_model(&pca, &manifest, &test_ids, threshold, ctx.jobs)?;
    ctx.write("metrics.csv", &report.to_csv())?;
    ctx.write("metrics.json", &report.to_json())?;
    Ok(())
}
