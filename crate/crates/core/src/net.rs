//! Graph-attention unloading network with global-context and physiological
//! cross-attention fusion, twin displacement decoders, and the cycle pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{normalization_of, NormalizationTransform, Point, TetMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConvKind {
    Gat,
    Gcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pooling {
    Mean,
    Max,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fusion {
    CrossAttention,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub dropout: f64,
    pub lambda_cycle: f64,
    pub conv: ConvKind,
    pub pooling: Pooling,
    pub fusion: Fusion,
    pub dual_input: bool,
    pub cycle: bool,
    pub decoder_hidden: usize,
    pub self_loops: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            heads: 4,
            gat_layers: 3,
            dropout: 0.1,
            lambda_cycle: 0.2,
            conv: ConvKind::Gat,
            pooling: Pooling::Mean,
            fusion: Fusion::CrossAttention,
            dual_input: true,
            cycle: true,
            decoder_hidden: 128,
            self_loops: true,
        }
    }
}

pub const VARIANTS: [&str; 6] = ["A0", "A1", "A2", "A3", "A4", "A5"];

/// Output layer of both decoders starts small so initial displacements are
/// near zero rather than O(1) cm.
const DECODER_OUT_SCALE: f64 = 0.01;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lambda_cycle >= 0.0) {
            return Err(Error::Config("lambda_cycle must be non-negative".into()));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::Config("decoder_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Stepwise ablations: each variant removes one more component than
    /// the previous one.
    pub fn variant(&self, id: &str) -> Result<Self> {
        let mut c = self.clone();
        let level = VARIANTS
            .iter()
            .position(|v| v.eq_ignore_ascii_case(id))
            .ok_or_else(|| Error::UnknownVariant(id.to_string()))?;
        if level >= 1 {
            c.cycle = false;
        }
        if level >= 2 {
            c.fusion = Fusion::Concat;
        }
        if level >= 3 {
            c.pooling = Pooling::None;
        }
        if level >= 4 {
            c.conv = ConvKind::Gcn;
        }
        if level >= 5 {
            c.dual_input = false;
        }
        if level == 0 {
            c.cycle = true;
        }
        Ok(c)
    }
}

/// Named parameter arrays in creation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Array>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Array) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|a| a.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    a_src: Option<usize>,
    a_dst: Option<usize>,
}

#[derive(Clone, Debug)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    lift: Lin,
    convs: Vec<Conv>,
    mesh_attn: Option<Attn>,
    ln_mesh: Norm,
    global: Option<(Lin, Lin)>,
    global_attn: Option<Attn>,
    concat: Option<Lin>,
    ln_fuse: Option<Norm>,
    dec_eu: (Lin, Lin),
    dec_ue: (Lin, Lin),
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    Array {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-lim..lim)).collect(),
    }
}

fn build_layout(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Layout, ParamStore) {
    let d = cfg.hidden;
    let mut ps = ParamStore::default();
    let lin = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| Lin {
        w: ps.push(format!("{name}.w"), xavier(rng, i, o)),
        b: ps.push(format!("{name}.b"), Array::zeros(1, o)),
    };
    let norm = |ps: &mut ParamStore, name: &str| Norm {
        gain: ps.push(format!("{name}.gain"), Array::filled(1, d, 1.0)),
        bias: ps.push(format!("{name}.bias"), Array::zeros(1, d)),
    };
    let attn = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| Attn {
        q: ps.push(format!("{name}.q"), xavier(rng, d, d)),
        k: ps.push(format!("{name}.k"), xavier(rng, d, d)),
        v: ps.push(format!("{name}.v"), xavier(rng, d, d)),
    };
    let in_dim = if cfg.dual_input { 3 } else { 7 };
    let lift = lin(&mut ps, rng, "lift", in_dim, d);
    let convs = (0..cfg.gat_layers)
        .map(|l| {
            let w = ps.push(format!("conv{l}.w"), xavier(rng, d, d));
            let (a_src, a_dst) = match cfg.conv {
                ConvKind::Gat => {
                    // Attention vectors are stored as rows; initialised as d×1.
                    let mut a = xavier(rng, d, 1);
                    a.rows = 1;
                    a.cols = d;
                    let mut b = xavier(rng, d, 1);
                    b.rows = 1;
                    b.cols = d;
                    (
                        Some(ps.push(format!("conv{l}.a_src"), a)),
                        Some(ps.push(format!("conv{l}.a_dst"), b)),
                    )
                }
                ConvKind::Gcn => (None, None),
            };
            Conv { w, a_src, a_dst }
        })
        .collect();
    let mesh_attn = (cfg.pooling != Pooling::None).then(|| attn(&mut ps, rng, "mesh_attn"));
    let ln_mesh = norm(&mut ps, "ln_mesh");
    let (global, global_attn, concat, ln_fuse) = if cfg.dual_input {
        let g1 = lin(&mut ps, rng, "global1", 4, d);
        let g2 = lin(&mut ps, rng, "global2", d, d);
        let (ga, cc) = match cfg.fusion {
            Fusion::CrossAttention => (Some(attn(&mut ps, rng, "global_attn")), None),
            Fusion::Concat => (None, Some(lin(&mut ps, rng, "concat", 2 * d, d))),
        };
        (Some((g1, g2)), ga, cc, Some(norm(&mut ps, "ln_fuse")))
    } else {
        (None, None, None, None)
    };
    let h = cfg.decoder_hidden;
    let dec = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
        let first = lin(ps, rng, &format!("{name}.0"), d, h);
        let mut w = xavier(rng, h, 3);
        w.data.iter_mut().for_each(|v| *v *= DECODER_OUT_SCALE);
        let second = Lin {
            w: ps.push(format!("{name}.1.w"), w),
            b: ps.push(format!("{name}.1.b"), Array::zeros(1, 3)),
        };
        (first, second)
    };
    let dec_eu = dec(&mut ps, rng, "dec_eu");
    let dec_ue = dec(&mut ps, rng, "dec_ue");
    (
        Layout {
            lift,
            convs,
            mesh_attn,
            ln_mesh,
            global,
            global_attn,
            concat,
            ln_fuse,
            dec_eu,
            dec_ue,
        },
        ps,
    )
}

/// Disjoint union of graphs with per-graph globals.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// Normalised coordinates, all graphs stacked.
    pub coords: Array,
    /// One row of four normalised globals per graph.
    pub globals: Array,
    pub node_graph: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// Symmetric-normalised adjacency weight per directed edge.
    pub edge_norm: Array,
    pub n_graphs: usize,
    pub offsets: Vec<usize>,
}

/// One graph ready for batching.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub coords: Vec<Point>,
    /// Undirected edges.
    pub edges: Vec<(usize, usize)>,
    pub globals: [f64; 4],
}

impl GraphInput {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }
}

impl GraphBatch {
    pub fn new(graphs: &[&GraphInput], self_loops: bool) -> Result<Self> {
        let total: usize = graphs.iter().map(|g| g.n_nodes()).sum();
        let mut coords = Array::zeros(total, 3);
        let mut globals = Array::zeros(graphs.len(), 4);
        let mut node_graph = Vec::with_capacity(total);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        let mut off = 0;
        for (gi, g) in graphs.iter().enumerate() {
            offsets.push(off);
            for (i, p) in g.coords.iter().enumerate() {
                coords.data[3 * (off + i)..3 * (off + i) + 3].copy_from_slice(p.as_slice());
                node_graph.push(gi);
            }
            globals.data[4 * gi..4 * gi + 4].copy_from_slice(&g.globals);
            let mut has_nb = vec![false; g.n_nodes()];
            for &(a, b) in &g.edges {
                if a >= g.n_nodes() || b >= g.n_nodes() {
                    return Err(Error::ShapeMismatch(format!("edge ({a}, {b}) out of range")));
                }
                if a == b {
                    continue;
                }
                src.extend([off + a, off + b]);
                dst.extend([off + b, off + a]);
                has_nb[a] = true;
                has_nb[b] = true;
            }
            if self_loops {
                for i in 0..g.n_nodes() {
                    src.push(off + i);
                    dst.push(off + i);
                }
            } else if let Some(i) = has_nb.iter().position(|&h| !h) {
                return Err(Error::IsolatedNode(i));
            }
            off += g.n_nodes();
        }
        offsets.push(off);
        let mut deg = vec![0.0; total];
        for &d in &dst {
            deg[d] += 1.0;
        }
        let edge_norm = Array {
            rows: src.len(),
            cols: 1,
            data: src
                .iter()
                .zip(&dst)
                .map(|(&s, &d)| 1.0 / (deg[s] * deg[d] as f64).sqrt())
                .collect(),
        };
        Ok(GraphBatch {
            coords,
            globals,
            node_graph: node_graph.into(),
            src: src.into(),
            dst: dst.into(),
            edge_norm,
            n_graphs: graphs.len(),
            offsets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.rows
    }
}

/// Intermediate values of one encoder pass, exposed for inspection.
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    pub gat_alpha: Vec<Var>,
    pub mesh_alpha: Option<Var>,
    pub global_alpha: Option<Var>,
    pub h_last: Option<Var>,
    pub g_mesh: Option<Var>,
    pub g_global: Option<Var>,
    pub z_mesh: Option<Var>,
}

/// Outputs of the two-pass forward computation.
#[derive(Clone, Debug)]
pub struct CycleOutput {
    pub u_hat: Var,
    pub ed_hat: Option<Var>,
    pub du_eu: Var,
    pub du_ue: Option<Var>,
    pub trace: EncodeTrace,
}

#[derive(Clone, Debug)]
pub struct UnloadNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn finite(tape: &Tape, v: Var, what: &'static str) -> Result<()> {
    if tape.value(v).data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what))
    }
}

impl UnloadNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&config, &mut rng);
        Ok(UnloadNet {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = UnloadNet::new(config, 0)?;
        if fresh.params.names != params.names
            || fresh
                .params
                .values
                .iter()
                .zip(&params.values)
                .any(|(a, b)| a.shape() != b.shape() || b.data.len() != a.data.len())
        {
            return Err(Error::ShapeMismatch("stored parameters do not match the configuration".into()));
        }
        Ok(UnloadNet {
            params,
            ..fresh
        })
    }

    /// Registers every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.values.iter().map(|a| tape.param(a.clone())).collect()
    }

    fn linear(&self, tape: &mut Tape, p: &[Var], l: &Lin, x: Var) -> Result<Var> {
        tape.linear(x, p[l.w], p[l.b])
    }

    fn conv(&self, tape: &mut Tape, p: &[Var], c: &Conv, b: &GraphBatch, h: Var, trace: &mut EncodeTrace) -> Result<Var> {
        let n = b.n_nodes();
        let dm = self.config.head_dim();
        let wh = tape.matmul(h, p[c.w])?;
        let agg = match (c.a_src, c.a_dst) {
            (Some(a_src), Some(a_dst)) => {
                let ts = tape.mul_row(wh, p[a_src])?;
                let s_src = tape.sum_col_groups(ts, dm)?;
                let td = tape.mul_row(wh, p[a_dst])?;
                let s_dst = tape.sum_col_groups(td, dm)?;
                let es = tape.gather_rows(s_src, &b.src)?;
                let ed = tape.gather_rows(s_dst, &b.dst)?;
                let e = tape.add(ed, es)?;
                let e = tape.leaky_relu(e, 0.2);
                let alpha = tape.segment_softmax(e, &b.dst, n)?;
                trace.gat_alpha.push(alpha);
                tape.edge_aggregate(wh, alpha, &b.src, &b.dst, n, dm)?
            }
            _ => {
                let norm = tape.constant(b.edge_norm.clone());
                tape.edge_aggregate(wh, norm, &b.src, &b.dst, n, self.config.hidden)?
            }
        };
        let act = tape.relu(agg);
        tape.add(act, h)
    }

    /// Multi-head attention of every node over the single key/value token of
    /// its graph (`kv` has one row per graph). Returns `(output, weights)`.
    fn single_key_attention(&self, tape: &mut Tape, p: &[Var], a: &Attn, b: &GraphBatch, x: Var, kv: Var) -> Result<(Var, Var)> {
        let dm = self.config.head_dim();
        let q = tape.matmul(x, p[a.q])?;
        let k = tape.matmul(kv, p[a.k])?;
        let v = tape.matmul(kv, p[a.v])?;
        let kn = tape.gather_rows(k, &b.node_graph)?;
        let vn = tape.gather_rows(v, &b.node_graph)?;
        let qk = tape.mul(q, kn)?;
        let scores = tape.sum_col_groups(qk, dm)?;
        let scores = tape.scale(scores, 1.0 / (dm as f64).sqrt());
        // One key per head: the softmax runs over a single entry.
        let alpha = tape.softmax_groups(scores, 1)?;
        let w = tape.repeat_cols(alpha, dm);
        Ok((tape.mul(w, vn)?, alpha))
    }

    /// Node embeddings `Z` from normalised coordinates `x`.
    pub fn encode(&self, tape: &mut Tape, p: &[Var], b: &GraphBatch, x: Var, trace: &mut EncodeTrace) -> Result<Var> {
        let lay = &self.layout;
        let globals = tape.constant(b.globals.clone());
        let feat = if self.config.dual_input {
            x
        } else {
            let gn = tape.gather_rows(globals, &b.node_graph)?;
            tape.concat_cols(&[x, gn])?
        };
        let mut h = self.linear(tape, p, &lay.lift, feat)?;
        for c in &lay.convs {
            h = self.conv(tape, p, c, b, h, trace)?;
        }
        finite(tape, h, "graph encoder")?;
        trace.h_last = Some(h);
        let pre = match (&lay.mesh_attn, self.config.pooling) {
            (Some(a), pool) if pool != Pooling::None => {
                let g_mesh = match pool {
                    Pooling::Max => tape.segment_max(h, &b.node_graph, b.n_graphs)?,
                    _ => tape.segment_mean(h, &b.node_graph, b.n_graphs)?,
                };
                trace.g_mesh = Some(g_mesh);
                let (att, alpha) = self.single_key_attention(tape, p, a, b, h, g_mesh)?;
                trace.mesh_alpha = Some(alpha);
                tape.add(h, att)?
            }
            _ => h,
        };
        let z_mesh = tape.layer_norm(pre, p[lay.ln_mesh.gain], p[lay.ln_mesh.bias])?;
        trace.z_mesh = Some(z_mesh);
        let Some((g1, g2)) = &lay.global else {
            return Ok(z_mesh);
        };
        let t = self.linear(tape, p, g1, globals)?;
        let t = tape.relu(t);
        let g_global = self.linear(tape, p, g2, t)?;
        trace.g_global = Some(g_global);
        let fused = match (&lay.global_attn, &lay.concat) {
            (Some(a), _) => {
                let (att, alpha) = self.single_key_attention(tape, p, a, b, z_mesh, g_global)?;
                trace.global_alpha = Some(alpha);
                tape.add(z_mesh, att)?
            }
            (None, Some(cc)) => {
                let gn = tape.gather_rows(g_global, &b.node_graph)?;
                let cat = tape.concat_cols(&[z_mesh, gn])?;
                self.linear(tape, p, cc, cat)?
            }
            (None, None) => z_mesh,
        };
        let ln = lay.ln_fuse.as_ref().unwrap();
        let z = tape.layer_norm(fused, p[ln.gain], p[ln.bias])?;
        finite(tape, z, "fusion")?;
        Ok(z)
    }

    fn decode(&self, tape: &mut Tape, p: &[Var], dec: &(Lin, Lin), z: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let z = tape.dropout(z, 1.0 - self.config.dropout, rng);
        let t = self.linear(tape, p, &dec.0, z)?;
        let t = tape.relu(t);
        let out = self.linear(tape, p, &dec.1, t)?;
        finite(tape, out, "decoder")?;
        Ok(out)
    }

    /// Unloading pass, then (with the cycle enabled) the reloading pass on
    /// the predicted unloaded geometry. Dropout is active iff `rng` is given.
    pub fn forward_cycle(&self, tape: &mut Tape, p: &[Var], b: &GraphBatch, mut rng: Option<&mut ChaCha8Rng>) -> Result<CycleOutput> {
        let mut out = self.forward_unload(tape, p, b, rng.as_deref_mut())?;
        if !self.config.cycle {
            return Ok(out);
        }
        let mut trace2 = EncodeTrace::default();
        let z2 = self.encode(tape, p, b, out.u_hat, &mut trace2)?;
        let du_ue = self.decode(tape, p, &self.layout.dec_ue, z2, rng)?;
        out.ed_hat = Some(tape.add(out.u_hat, du_ue)?);
        out.du_ue = Some(du_ue);
        Ok(out)
    }

    /// The unloading pass alone.
    pub fn forward_unload(&self, tape: &mut Tape, p: &[Var], b: &GraphBatch, rng: Option<&mut ChaCha8Rng>) -> Result<CycleOutput> {
        let x = tape.constant(b.coords.clone());
        let mut trace = EncodeTrace::default();
        let z = self.encode(tape, p, b, x, &mut trace)?;
        let du_eu = self.decode(tape, p, &self.layout.dec_eu, z, rng)?;
        let u_hat = tape.add(x, du_eu)?;
        Ok(CycleOutput {
            u_hat,
            ed_hat: None,
            du_eu,
            du_ue: None,
            trace,
        })
    }

    /// Supervised term plus `λ` times the cycle term; each is a mean over
    /// `n·3` coordinates per graph, averaged over graphs.
    pub fn loss(&self, tape: &mut Tape, b: &GraphBatch, out: &CycleOutput, target_u: &Array) -> Result<Var> {
        if target_u.shape() != b.coords.shape() {
            return Err(Error::ShapeMismatch(format!(
                "target {:?} vs input {:?}",
                target_u.shape(),
                b.coords.shape()
            )));
        }
        let t = tape.constant(target_u.clone());
        let sup = graph_mse(tape, b, out.u_hat, t)?;
        match out.ed_hat {
            Some(ed_hat) if self.config.lambda_cycle > 0.0 => {
                let x = tape.constant(b.coords.clone());
                let cyc = graph_mse(tape, b, ed_hat, x)?;
                let cyc = tape.scale(cyc, self.config.lambda_cycle);
                tape.add(sup, cyc)
            }
            _ => Ok(sup),
        }
    }

    /// Predicted unloaded mesh for an end-diastolic mesh in centimetres.
    pub fn predict(&self, mesh_ed: &TetMesh, globals: [f64; 4]) -> Result<TetMesh> {
        let (input, tf) = graph_input(mesh_ed, globals)?;
        let batch = GraphBatch::new(&[&input], self.config.self_loops)?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.values.iter().map(|a| tape.constant(a.clone())).collect();
        let out = self.forward_unload(&mut tape, &p, &batch, None)?;
        let du = tape.value(out.du_eu);
        let nodes = input
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| tf.invert(&(c + Point::new(du.at(i, 0), du.at(i, 1), du.at(i, 2)))))
            .collect();
        Ok(mesh_ed.with_nodes(nodes))
    }
}

fn graph_mse(tape: &mut Tape, b: &GraphBatch, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let per_node = tape.sum_col_groups(sq, 3)?;
    let per_graph = tape.segment_mean(per_node, &b.node_graph, b.n_graphs)?;
    let m = tape.mean_all(per_graph);
    Ok(tape.scale(m, 1.0 / 3.0))
}

/// Normalised coordinates, edges and globals of a mesh, with the transform
/// needed to map predictions back to centimetres.
pub fn graph_input(mesh: &TetMesh, globals: [f64; 4]) -> Result<(GraphInput, NormalizationTransform)> {
    let tf = normalization_of(&mesh.nodes)?;
    let coords = mesh.nodes.iter().map(|p| tf.apply(p)).collect();
    Ok((
        GraphInput {
            coords,
            edges: mesh.edges(),
            globals,
        },
        tf,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;

    fn toy_graph(seed: u64) -> GraphInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..5)
            .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        GraphInput {
            coords,
            edges: vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2), (1, 3)],
            globals: [0.2, 0.7, 0.5, 1.0],
        }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            decoder_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn variants_are_cumulative() {
        let base = small_cfg();
        let a1 = base.variant("A1").unwrap();
        assert!(!a1.cycle && a1.fusion == Fusion::CrossAttention);
        let a4 = base.variant("A4").unwrap();
        assert!(!a4.cycle && a4.fusion == Fusion::Concat && a4.pooling == Pooling::None && a4.conv == ConvKind::Gcn && a4.dual_input);
        let a5 = base.variant("a5").unwrap();
        assert!(!a5.dual_input);
        assert!(matches!(base.variant("A9"), Err(Error::UnknownVariant(_))));
        assert!(base.variant("A0").unwrap().cycle);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = ModelConfig {
            hidden: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(UnloadNet::new(cfg, 0).is_err());
    }

    #[test]
    fn attention_rows_are_normalised_and_single_key_is_closed_form() {
        let net = UnloadNet::new(small_cfg(), 3).unwrap();
        let g = toy_graph(1);
        let b = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let out = net.forward_cycle(&mut tape, &p, &b, None).unwrap();
        for &alpha in &out.trace.gat_alpha {
            let a = tape.value(alpha);
            let mut sums = vec![0.0; b.n_nodes() * 2];
            for (k, &d) in b.dst.iter().enumerate() {
                for m in 0..2 {
                    sums[d * 2 + m] += a.at(k, m);
                }
            }
            assert!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-12));
        }
        for alpha in [out.trace.mesh_alpha.unwrap(), out.trace.global_alpha.unwrap()] {
            assert!(tape.value(alpha).data.iter().all(|&v| v == 1.0));
        }
        // Z_mesh = LayerNorm(H + g_mesh W_V) without any attention machinery.
        let h = tape.value(out.trace.h_last.unwrap()).clone();
        let g = tape.value(out.trace.g_mesh.unwrap()).clone();
        let mut t2 = Tape::new();
        let hv = t2.constant(h);
        let gv = t2.constant(g);
        let wv = t2.constant(net.params.values[net.layout.mesh_attn.as_ref().unwrap().v].clone());
        let v = t2.matmul(gv, wv).unwrap();
        let vn = t2.gather_rows(v, &b.node_graph).unwrap();
        let s = t2.add(hv, vn).unwrap();
        let gain = t2.constant(net.params.values[net.layout.ln_mesh.gain].clone());
        let bias = t2.constant(net.params.values[net.layout.ln_mesh.bias].clone());
        let z = t2.layer_norm(s, gain, bias).unwrap();
        let want = t2.value(z);
        let got = tape.value(out.trace.z_mesh.unwrap());
        for (a, b) in want.data.iter().zip(&got.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_node_self_loop_attends_to_itself() {
        let net = UnloadNet::new(small_cfg(), 3).unwrap();
        let g = GraphInput {
            coords: vec![Point::new(0.1, 0.2, 0.3)],
            edges: vec![],
            globals: [0.0; 4],
        };
        let b = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let out = net.forward_cycle(&mut tape, &p, &b, None).unwrap();
        for &a in &out.trace.gat_alpha {
            assert!(tape.value(a).data.iter().all(|&v| v == 1.0));
        }
        assert!(matches!(GraphBatch::new(&[&g], false), Err(Error::IsolatedNode(0))));
    }

    fn permuted(g: &GraphInput, perm: &[usize]) -> GraphInput {
        // perm[new] = old
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        GraphInput {
            coords: perm.iter().map(|&o| g.coords[o]).collect(),
            edges: g.edges.iter().rev().map(|&(a, b)| (inv[b], inv[a])).collect(),
            globals: g.globals,
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        for variant in VARIANTS {
            let cfg = small_cfg().variant(variant).unwrap();
            let net = UnloadNet::new(cfg, 11).unwrap();
            let g = toy_graph(2);
            let perm = [3, 0, 4, 1, 2];
            let gp = permuted(&g, &perm);
            let run = |g: &GraphInput| {
                let b = GraphBatch::new(&[g], true).unwrap();
                let mut tape = Tape::new();
                let p = net.bind(&mut tape);
                let out = net.forward_cycle(&mut tape, &p, &b, None).unwrap();
                let last = out.ed_hat.unwrap_or(out.u_hat);
                (tape.value(out.u_hat).clone(), tape.value(last).clone())
            };
            let (u, e) = run(&g);
            let (up, ep) = run(&gp);
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..3 {
                    assert!((up.at(new, c) - u.at(old, c)).abs() <= 1e-10, "{variant}");
                    assert!((ep.at(new, c) - e.at(old, c)).abs() <= 1e-10, "{variant}");
                }
            }
        }
    }

    #[test]
    fn zero_decoders_predict_no_displacement() {
        let mut net = UnloadNet::new(small_cfg(), 5).unwrap();
        for name in ["dec_eu.1.w", "dec_eu.1.b", "dec_ue.1.w", "dec_ue.1.b"] {
            let i = net.params.index_of(name).unwrap();
            net.params.values[i].data.fill(0.0);
        }
        let g = toy_graph(3);
        let b = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let out = net.forward_cycle(&mut tape, &p, &b, None).unwrap();
        assert_eq!(tape.value(out.u_hat), &b.coords);
        assert_eq!(tape.value(out.ed_hat.unwrap()), &b.coords);
    }

    #[test]
    fn cycle_off_skips_second_pass() {
        let net = UnloadNet::new(small_cfg().variant("A1").unwrap(), 5).unwrap();
        let g = toy_graph(3);
        let b = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let out = net.forward_cycle(&mut tape, &p, &b, None).unwrap();
        assert!(out.ed_hat.is_none() && out.du_ue.is_none());
    }

    #[test]
    fn loss_convention_by_hand() {
        let mut net = UnloadNet::new(small_cfg(), 5).unwrap();
        net.config.lambda_cycle = 0.2;
        let g = GraphInput {
            coords: vec![Point::zeros()],
            edges: vec![],
            globals: [0.0; 4],
        };
        let b = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let u_hat = tape.constant(Array::from_vec(1, 3, vec![0.1, 0.0, 0.0]).unwrap());
        let ed_hat = tape.constant(Array::from_vec(1, 3, vec![0.2, 0.0, 0.0]).unwrap());
        let out = CycleOutput {
            u_hat,
            ed_hat: Some(ed_hat),
            du_eu: u_hat,
            du_ue: None,
            trace: EncodeTrace::default(),
        };
        let l = net.loss(&mut tape, &b, &out, &Array::zeros(1, 3)).unwrap();
        assert!((tape.value(l).data[0] - 0.006).abs() < 1e-15);
        assert!(net.loss(&mut tape, &b, &out, &Array::zeros(2, 3)).is_err());
    }

    #[test]
    fn end_to_end_loss_gradcheck() {
        for variant in ["A0", "A4", "A5"] {
            let mut cfg = small_cfg().variant(variant).unwrap();
            cfg.dropout = 0.0;
            let net = UnloadNet::new(cfg, 9).unwrap();
            let g = toy_graph(4);
            let b = GraphBatch::new(&[&g], true).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let target = Array::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let rep = gradcheck(
                |tape, vars| {
                    let out = net.forward_cycle(tape, vars, &b, None)?;
                    net.loss(tape, &b, &out, &target)
                },
                &net.params.values,
                None,
            )
            .unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{variant}: {rep:?}");
        }
    }

    #[test]
    fn predict_output_matches_input_size() {
        let net = UnloadNet::new(small_cfg(), 1).unwrap();
        let mesh = crate::mesh::box_mesh([1.0, 2.0, 1.5], [1, 1, 1]);
        let out = net.predict(&mesh, [0.5; 4]).unwrap();
        assert_eq!(out.n_nodes(), mesh.n_nodes());
        assert!(out.same_connectivity(&mesh));
        assert_eq!(net.predict(&mesh, [0.5; 4]).unwrap(), out);
    }
}
