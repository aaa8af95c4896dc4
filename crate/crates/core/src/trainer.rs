//! AdamW training loop with early stopping, supervision-ratio subsetting and
//! resumable JSON checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Tape};
use crate::datagen::{split_shape_ids, write_atomic, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::mesh::TetMesh;
use crate::net::{graph_input, GraphBatch, GraphInput, ModelConfig, ParamStore, UnloadNet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub supervision_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of training shapes held out for early stopping.
    pub val_fraction: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 1000,
            patience: 50,
            supervision_ratio: 1.0,
            batch_size: 4,
            seed: 0,
            val_fraction: 0.1,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.max_epochs > 0
            && self.batch_size > 0
            && self.supervision_ratio > 0.0
            && self.supervision_ratio <= 1.0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.values.iter().map(|a| Array::zeros(a.rows, a.cols)).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(params: &mut ParamStore, grads: &[Array], opt: &mut OptimizerState, lr: f64, wd: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.values[i].shape() {
            return Err(Error::ShapeMismatch(format!("gradient of {}", params.names[i])));
        }
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(params.names[i].clone()));
        }
    }
    let (b1, b2) = ADAM_BETAS;
    opt.step += 1;
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.values[i].data;
        let m = &mut opt.m[i].data;
        let v = &mut opt.v[i].data;
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g.data[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g.data[j] * g.data[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * wd * p[j];
            p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Global-norm clipping; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// One training example: normalised end-diastolic graph and the unloaded
/// coordinates under the same transform.
#[derive(Clone, Debug)]
pub struct Sample {
    pub case_id: String,
    pub shape_id: String,
    pub input: GraphInput,
    pub target: Array,
}

pub fn load_samples(manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            let rec = manifest
                .record(id)
                .ok_or_else(|| Error::Config(format!("case {id} not in manifest")))?;
            let (unloaded, ed) = manifest.load_pair(rec)?;
            let (input, tf) = graph_input(&ed, rec.params().normalized())?;
            let mut target = Array::zeros(unloaded.n_nodes(), 3);
            for (i, p) in unloaded.nodes.iter().enumerate() {
                target.data[3 * i..3 * i + 3].copy_from_slice(tf.apply(p).as_slice());
            }
            Ok(Sample {
                case_id: rec.case_id.clone(),
                shape_id: rec.shape_id.clone(),
                input,
                target,
            })
        })
        .collect()
}

fn stack_targets(samples: &[&Sample]) -> Array {
    let rows = samples.iter().map(|s| s.target.rows).sum();
    let data = samples.iter().flat_map(|s| s.target.data.iter().copied()).collect();
    Array { rows, cols: 3, data }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_s: f64,
    /// Largest pre-clipping gradient norm of the epoch.
    pub max_grad_norm: f64,
    pub clipped_steps: usize,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,wall_s\n");
    for h in history {
        s += &format!("{},{:e},{:e},{:e},{:.6}\n", h.epoch, h.train_loss, h.val_loss, h.lr, h.wall_s);
    }
    s
}

/// Serialisable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng position {}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
    pub labeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Manifest the model was trained from.
    #[serde(default)]
    pub manifest: Option<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serialises");
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::parse(path, format!("checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Network with the best-validation weights.
    pub fn best_model(&self) -> Result<UnloadNet> {
        UnloadNet::from_params(self.model_config.clone(), self.best_params.clone())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UnloadNet,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Validation cases (by shape) and the labelled subset of the rest.
pub fn partition_training(manifest: &DatasetManifest, train_ids: &[String], cfg: &TrainConfig) -> Result<(Vec<String>, Vec<String>)> {
    if train_ids.is_empty() {
        return Err(Error::EmptySplit("training side has no cases".into()));
    }
    let shape_of = |id: &String| -> Result<String> {
        manifest
            .record(id)
            .map(|r| r.shape_id.clone())
            .ok_or_else(|| Error::Config(format!("case {id} not in manifest")))
    };
    let shapes: BTreeSet<String> = train_ids.iter().map(shape_of).collect::<Result<_>>()?;
    let shapes: Vec<String> = shapes.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (val, pool): (Vec<String>, Vec<String>) = if shapes.len() >= 2 && cfg.val_fraction > 0.0 {
        let (_, val_shapes) = split_shape_ids(&shapes, 1.0 - cfg.val_fraction, cfg.seed)?;
        let vs: BTreeSet<_> = val_shapes.into_iter().collect();
        let mut val = Vec::new();
        let mut pool = Vec::new();
        for id in train_ids {
            if vs.contains(&shape_of(id)?) {
                val.push(id.clone());
            } else {
                pool.push(id.clone());
            }
        }
        (val, pool)
    } else {
        log::warn!("one training shape: validating on the labelled cases");
        (Vec::new(), train_ids.to_vec())
    };
    let mut pool = pool;
    pool.shuffle(&mut rng);
    let k = ((cfg.supervision_ratio * pool.len() as f64).round() as usize).clamp(1, pool.len());
    pool.truncate(k);
    pool.sort();
    let val = if val.is_empty() { pool.clone() } else { val };
    Ok((pool, val))
}

struct Trainer<'a> {
    net: UnloadNet,
    cfg: &'a TrainConfig,
    labeled: Vec<Sample>,
    val: Vec<Sample>,
}

impl Trainer<'_> {
    fn batch(&self, samples: &[&Sample]) -> Result<(GraphBatch, Array)> {
        let inputs: Vec<&GraphInput> = samples.iter().map(|s| &s.input).collect();
        Ok((GraphBatch::new(&inputs, self.net.config.self_loops)?, stack_targets(samples)))
    }

    /// Returns (loss, pre-clip gradient norm).
    fn step(&mut self, idx: &[usize], opt: &mut OptimizerState, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.labeled[i]).collect();
        let (batch, target) = self.batch(&samples)?;
        let mut tape = Tape::new();
        let p = self.net.bind(&mut tape);
        let out = self.net.forward_cycle(&mut tape, &p, &batch, Some(rng))?;
        let loss = self.net.loss(&mut tape, &batch, &out, &target)?;
        let value = tape.value(loss).data[0];
        let mut g = tape.backward(loss)?;
        let mut grads: Vec<Array> = p
            .iter()
            .zip(&self.net.params.values)
            .map(|(&v, a)| g.take(v).unwrap_or_else(|| Array::zeros(a.rows, a.cols)))
            .collect();
        if let Some(i) = grads.iter().position(|a| a.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(self.net.params.names[i].clone()));
        }
        let norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        adamw_step(&mut self.net.params, &grads, opt, self.cfg.lr, self.cfg.weight_decay)?;
        Ok((value, norm))
    }

    /// Mean supervised loss over the validation cases, evaluation mode.
    fn validate(&self) -> Result<f64> {
        let mut total = 0.0;
        for chunk in self.val.chunks(self.cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().collect();
            let (batch, target) = self.batch(&samples)?;
            let mut tape = Tape::new();
            let p: Vec<_> = self.net.params.values.iter().map(|a| tape.constant(a.clone())).collect();
            let out = self.net.forward_unload(&mut tape, &p, &batch, None)?;
            let l = self.net.loss(&mut tape, &batch, &out, &target)?;
            total += tape.value(l).data[0] * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }
}

/// Trains on `train_ids` (or continues `resume`) until `max_epochs` or
/// early stopping.
pub fn train(
    manifest: &DatasetManifest,
    train_ids: &[String],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    let (net, mut opt, mut rng, mut ck) = match resume {
        Some(ck) => {
            model_cfg = ck.model_config.clone();
            let net = UnloadNet::from_params(model_cfg.clone(), ck.params.clone())?;
            (net, ck.optimizer.clone(), ck.rng.restore()?, ck)
        }
        None => {
            let (labeled_ids, val_ids) = partition_training(manifest, train_ids, cfg)?;
            let net = UnloadNet::new(model_cfg.clone(), cfg.seed)?;
            let opt = OptimizerState::new(&net.params);
            let ck = Checkpoint {
                version: CHECKPOINT_VERSION,
                model_config: model_cfg.clone(),
                train_config: cfg.clone(),
                params: net.params.clone(),
                best_params: net.params.clone(),
                optimizer: opt.clone(),
                rng: RngState::capture(&ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed)),
                epoch: 0,
                best_val: f64::INFINITY,
                best_epoch: 0,
                epochs_since_best: 0,
                stopped_early: false,
                history: Vec::new(),
                labeled_ids,
                val_ids,
                manifest: Some(manifest.root.join(MANIFEST_FILE).display().to_string()),
            };
            let rng = ck.rng.restore()?;
            (net, opt, rng, ck)
        }
    };
    let mut tr = Trainer {
        net,
        cfg,
        labeled: load_samples(manifest, &ck.labeled_ids)?,
        val: load_samples(manifest, &ck.val_ids)?,
    };
    log::info!(
        "training on {} labelled cases, validating on {}, {} parameters",
        tr.labeled.len(),
        tr.val.len(),
        tr.net.params.n_scalars()
    );
    let start = Instant::now();
    let prior_wall = ck.history.last().map_or(0.0, |h| h.wall_s);
    while ck.epoch < cfg.max_epochs && !ck.stopped_early {
        let mut order: Vec<usize> = (0..tr.labeled.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut max_norm = 0.0f64;
        let mut clipped = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (l, norm) = tr.step(idx, &mut opt, &mut rng)?;
            loss_sum += l * idx.len() as f64;
            max_norm = max_norm.max(norm);
            clipped += usize::from(norm > cfg.grad_clip);
        }
        let val_loss = tr.validate()?;
        ck.epoch += 1;
        let rec = EpochRecord {
            epoch: ck.epoch,
            train_loss: loss_sum / tr.labeled.len() as f64,
            val_loss,
            lr: cfg.lr,
            wall_s: prior_wall + start.elapsed().as_secs_f64(),
            max_grad_norm: max_norm,
            clipped_steps: clipped,
        };
        log::debug!("epoch {} train {:.4e} val {:.4e}", rec.epoch, rec.train_loss, rec.val_loss);
        ck.history.push(rec);
        if val_loss < ck.best_val {
            ck.best_val = val_loss;
            ck.best_epoch = ck.epoch;
            ck.best_params = tr.net.params.clone();
            ck.epochs_since_best = 0;
        } else {
            ck.epochs_since_best += 1;
            if ck.epochs_since_best >= cfg.patience {
                ck.stopped_early = true;
                log::info!("early stop at epoch {} (best {})", ck.epoch, ck.best_epoch);
            }
        }
    }
    ck.params = tr.net.params.clone();
    ck.optimizer = opt;
    ck.rng = RngState::capture(&rng);
    ck.train_config = cfg.clone();
    Ok(TrainOutcome {
        model: ck.best_model()?,
        history: ck.history.clone(),
        checkpoint: ck,
    })
}

/// Predicted unloaded mesh and the wall time of the prediction in seconds.
pub fn predict(model: &UnloadNet, mesh_ed: &TetMesh, globals: [f64; 4]) -> Result<(TetMesh, f64)> {
    let t = Instant::now();
    let m = model.predict(mesh_ed, globals)?;
    Ok((m, t.elapsed().as_secs_f64()))
}
