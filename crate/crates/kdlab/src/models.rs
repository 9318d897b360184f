//! The five-point scale ladder in two families: an MLP classifier over dense
//! feature vectors and a tiny pre-norm attention classifier over token
//! sequences. Both expose activation tracing (post-block activations, and for
//! the attention family per-head post-projection contributions and per-layer
//! MLP outputs) for the similarity and attribution analyses.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::data::{Payload, Sample};
use crate::graph::NodeId;
use crate::rng;
use crate::{Error, Real, Result, Tape, Tensor};

pub const LN_EPS: Real = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScaleTag {
    T,
    S,
    M,
    B,
    L,
}

impl ScaleTag {
    pub const LADDER: [ScaleTag; 5] = [ScaleTag::T, ScaleTag::S, ScaleTag::M, ScaleTag::B, ScaleTag::L];

    pub fn index(self) -> usize {
        Self::LADDER.iter().position(|&t| t == self).unwrap()
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "T" => Ok(ScaleTag::T),
            "S" => Ok(ScaleTag::S),
            "M" => Ok(ScaleTag::M),
            "B" => Ok(ScaleTag::B),
            "L" => Ok(ScaleTag::L),
            _ => Err(Error::Format(format!("unknown scale tag {s}"))),
        }
    }
}

impl fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    Attn,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Mlp => f.write_str("mlp"),
            Family::Attn => f.write_str("attn"),
        }
    }
}

/// Input geometry a spec is instantiated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    /// Feature dimension (mlp) or vocabulary size (attn).
    pub input_dim: usize,
    /// Sequence length (attn only; 0 for mlp).
    pub seq_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub scale: ScaleTag,
    /// Number of hidden layers / blocks.
    pub layers: usize,
    /// Hidden width.
    pub hidden: usize,
    /// Attention heads (0 for mlp).
    pub heads: usize,
    pub input: InputShape,
    pub num_classes: usize,
}

/// Desk-scale (layers, hidden[, heads]) per rung of the ladder.
const MLP_LADDER: [(usize, usize); 5] = [(1, 16), (2, 32), (2, 64), (3, 128), (4, 256)];
const ATTN_LADDER: [(usize, usize, usize); 5] = [(1, 32, 2), (2, 48, 2), (2, 64, 4), (3, 96, 4), (4, 128, 8)];

/// All five specs of a family, smallest to largest.
pub fn ladder(family: Family, input: InputShape) -> Vec<ModelSpec> {
    ScaleTag::LADDER
        .iter()
        .map(|&scale| spec_for(family, scale, input))
        .collect()
}

pub fn spec_for(family: Family, scale: ScaleTag, input: InputShape) -> ModelSpec {
    let i = scale.index();
    match family {
        Family::Mlp => {
            let (layers, hidden) = MLP_LADDER[i];
            ModelSpec { family, scale, layers, hidden, heads: 0, input, num_classes: 2 }
        }
        Family::Attn => {
            let (layers, hidden, heads) = ATTN_LADDER[i];
            ModelSpec { family, scale, layers, hidden, heads, input, num_classes: 2 }
        }
    }
}

impl ModelSpec {
    /// Named parameter geometry, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.hidden;
        let mut out = Vec::new();
        match self.family {
            Family::Mlp => {
                let mut fan_in = self.input.input_dim;
                for l in 0..self.layers {
                    out.push((format!("layer{l}.w"), fan_in, d));
                    out.push((format!("layer{l}.b"), 1, d));
                    fan_in = d;
                }
            }
            Family::Attn => {
                out.push(("embed".into(), self.input.input_dim, d));
                out.push(("pos".into(), self.input.seq_len, d));
                for l in 0..self.layers {
                    out.push((format!("block{l}.ln1.g"), 1, d));
                    out.push((format!("block{l}.ln1.b"), 1, d));
                    out.push((format!("block{l}.wq"), d, d));
                    out.push((format!("block{l}.wk"), d, d));
                    out.push((format!("block{l}.wv"), d, d));
                    out.push((format!("block{l}.wo"), d, d));
                    out.push((format!("block{l}.ln2.g"), 1, d));
                    out.push((format!("block{l}.ln2.b"), 1, d));
                    out.push((format!("block{l}.ff1.w"), d, 2 * d));
                    out.push((format!("block{l}.ff1.b"), 1, 2 * d));
                    out.push((format!("block{l}.ff2.w"), 2 * d, d));
                    out.push((format!("block{l}.ff2.b"), 1, d));
                }
                out.push(("lnf.g".into(), 1, d));
                out.push(("lnf.b".into(), 1, d));
            }
        }
        out.push(("head.w".into(), d, self.num_classes));
        out.push(("head.b".into(), 1, self.num_classes));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TeacherScratch,
    StudentScratch,
    Distilled,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::TeacherScratch => f.write_str("teacher_scratch"),
            Role::StudentScratch => f.write_str("student_scratch"),
            Role::Distilled => f.write_str("distilled"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub teacher_scale: Option<ScaleTag>,
    pub seed: u64,
    pub config_hash: String,
    /// Intermediate scales walked by iterative distillation, outermost first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chain: Vec<ScaleTag>,
}

impl Provenance {
    pub fn scratch(method: &str, seed: u64, config_hash: &str) -> Self {
        Self { method: method.into(), teacher_scale: None, seed, config_hash: config_hash.into(), chain: vec![] }
    }
}

/// Named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn byte_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex_digest(&h.finalize())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Params,
    pub role: Role,
    pub provenance: Provenance,
    /// Forward-pass counter (instrumentation only, shared across clones).
    pub forward_calls: Arc<AtomicU64>,
}

impl TrainedModel {
    pub fn new(spec: ModelSpec, params: Params, role: Role, provenance: Provenance) -> Self {
        Self { spec, params, role, provenance, forward_calls: Arc::new(AtomicU64::new(0)) }
    }

    pub fn forward_call_count(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }
}

/// Fan-in-scaled random init, deterministic per (spec, seed). Each parameter
/// draws from its own substream keyed by name, so layouts that share names
/// share initial values.
pub fn init_params(spec: &ModelSpec, seed: u64) -> TrainedModel {
    let layout = spec.param_layout();
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, rows, cols) in layout {
        let t = init_tensor(&name, rows, cols, seed);
        names.push(name);
        tensors.push(t);
    }
    TrainedModel::new(
        *spec,
        Params { names, tensors },
        Role::StudentScratch,
        Provenance::scratch("init", seed, ""),
    )
}

pub fn init_tensor(name: &str, rows: usize, cols: usize, seed: u64) -> Tensor {
    // Biases start at zero, layer-norm gains at one, everything else at
    // N(0, 1/fan_in).
    if name.ends_with(".b") || name == "head.b" {
        return Tensor::zeros(rows, cols);
    }
    if name.ends_with(".g") {
        return Tensor::filled(rows, cols, 1.0);
    }
    let fan_in = if name == "embed" || name == "pos" { cols } else { rows };
    let sd = (1.0 / fan_in as f64).sqrt();
    let mut r = rng::substream(seed, &format!("init/{name}"));
    let data = (0..rows * cols).map(|_| rng::normal(&mut r, 0.0, sd)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// Forward graphs
// ---------------------------------------------------------------------------

/// A batch in the family's native input form.
#[derive(Clone, Debug)]
pub enum Batch {
    Vec(Tensor),
    Tok(Vec<Vec<usize>>),
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Empty("batch from zero samples".into()));
        }
        match &samples[0].payload {
            Payload::Vec(v0) => {
                let cols = v0.len();
                let mut data = Vec::with_capacity(samples.len() * cols);
                for s in samples {
                    let Payload::Vec(v) = &s.payload else {
                        return Err(Error::Shape("mixed payload kinds in batch".into()));
                    };
                    data.extend_from_slice(v);
                }
                Ok(Batch::Vec(Tensor::new(samples.len(), cols, data)?))
            }
            Payload::Tok(_) => {
                let mut rows = Vec::with_capacity(samples.len());
                for s in samples {
                    let Payload::Tok(t) = &s.payload else {
                        return Err(Error::Shape("mixed payload kinds in batch".into()));
                    };
                    rows.push(t.iter().map(|&x| x as usize).collect());
                }
                Ok(Batch::Tok(rows))
            }
        }
    }

    pub fn from_dataset(ds: &crate::data::GroupedDataset) -> Result<Batch> {
        Batch::from_samples(&ds.samples.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        match self {
            Batch::Vec(t) => t.rows(),
            Batch::Tok(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Node handles produced while building a forward graph.
pub struct BuiltGraph {
    /// Parameter node ids, aligned with `Params` order.
    pub param_ids: Vec<NodeId>,
    /// Batch logits `[n, 2]`.
    pub logits: NodeId,
    /// Penultimate representation `[n, hidden]` (input of the classifier head).
    pub features: NodeId,
    /// Per layer: nodes whose rows concatenate to the post-block activations.
    /// Mlp: one `[n, d]` node per layer. Attn: one `[seq, d]` node per sample.
    pub block_outputs: Vec<Vec<NodeId>>,
    /// Attn only: `[layer][head][sample]` post-projection head contributions.
    pub head_contribs: Vec<Vec<Vec<NodeId>>>,
    /// Attn only: `[layer][sample]` summed attention block outputs.
    pub attn_outputs: Vec<Vec<NodeId>>,
    /// Attn only: `[layer][sample]` MLP (feed-forward) outputs.
    pub mlp_outputs: Vec<Vec<NodeId>>,
    /// Attn only: `[sample]` embedding + positional encoding nodes.
    pub embed_nodes: Vec<NodeId>,
    /// Attn only: `[sample]` per-sample logits `[1, 2]`.
    pub per_sample_logits: Vec<NodeId>,
}

/// Build the forward graph for a batch on an existing tape. `head_mask`
/// zeroes one attention head's contribution (attn family only).
pub fn build_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &Params,
    batch: &Batch,
    head_mask: Option<(usize, usize)>,
) -> Result<BuiltGraph> {
    let param_ids: Vec<NodeId> =
        params.tensors.iter().map(|t| tape.param(t.clone())).collect::<Result<_>>()?;
    let id_of = |name: &str| -> Result<NodeId> {
        params
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| param_ids[i])
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    };

    match (spec.family, batch) {
        (Family::Mlp, Batch::Vec(x)) => {
            if x.cols() != spec.input.input_dim {
                return Err(Error::Shape("batch feature dim does not match spec".into()));
            }
            let mut h = tape.input(x.clone())?;
            let mut block_outputs = Vec::with_capacity(spec.layers);
            for l in 0..spec.layers {
                let w = id_of(&format!("layer{l}.w"))?;
                let b = id_of(&format!("layer{l}.b"))?;
                let z = tape.matmul(h, w)?;
                let z = tape.add_bias(z, b)?;
                h = tape.relu(z)?;
                block_outputs.push(vec![h]);
            }
            let hw = id_of("head.w")?;
            let hb = id_of("head.b")?;
            let z = tape.matmul(h, hw)?;
            let logits = tape.add_bias(z, hb)?;
            Ok(BuiltGraph {
                param_ids,
                logits,
                features: h,
                block_outputs,
                head_contribs: vec![],
                attn_outputs: vec![],
                mlp_outputs: vec![],
                embed_nodes: vec![],
                per_sample_logits: vec![],
            })
        }
        (Family::Attn, Batch::Tok(rows)) => {
            let d = spec.hidden;
            let heads = spec.heads;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let embed = id_of("embed")?;
            let pos = id_of("pos")?;
            let mut block_outputs = vec![Vec::with_capacity(rows.len()); spec.layers];
            let mut head_contribs = vec![vec![Vec::with_capacity(rows.len()); heads]; spec.layers];
            let mut attn_outputs = vec![Vec::with_capacity(rows.len()); spec.layers];
            let mut mlp_outputs = vec![Vec::with_capacity(rows.len()); spec.layers];
            let mut embed_nodes = Vec::with_capacity(rows.len());
            let mut per_sample_logits = Vec::with_capacity(rows.len());
            let mut per_sample_features = Vec::with_capacity(rows.len());

            for tokens in rows {
                if tokens.len() != spec.input.seq_len {
                    return Err(Error::Shape("sequence length does not match spec".into()));
                }
                let e = tape.embed(embed, tokens)?;
                let mut r = tape.add(e, pos)?;
                embed_nodes.push(r);
                for l in 0..spec.layers {
                    let xn = {
                        let g = id_of(&format!("block{l}.ln1.g"))?;
                        let b = id_of(&format!("block{l}.ln1.b"))?;
                        tape.layer_norm(r, g, b, LN_EPS)?
                    };
                    let q = tape.matmul(xn, id_of(&format!("block{l}.wq"))?)?;
                    let k = tape.matmul(xn, id_of(&format!("block{l}.wk"))?)?;
                    let v = tape.matmul(xn, id_of(&format!("block{l}.wv"))?)?;
                    let wo = id_of(&format!("block{l}.wo"))?;
                    let mut attn_sum: Option<NodeId> = None;
                    for h in 0..heads {
                        let qh = tape.slice_cols(q, h * dh, dh)?;
                        let kh = tape.slice_cols(k, h * dh, dh)?;
                        let vh = tape.slice_cols(v, h * dh, dh)?;
                        let kt = tape.transpose(kh)?;
                        let scores = tape.matmul(qh, kt)?;
                        let scores = tape.scale(scores, scale)?;
                        let a = tape.softmax_rows(scores)?;
                        let oh = tape.matmul(a, vh)?;
                        let woh = tape.slice_rows(wo, h * dh, dh)?;
                        let mut contrib = tape.matmul(oh, woh)?;
                        if head_mask == Some((l, h)) {
                            contrib = tape.scale(contrib, 0.0)?;
                        }
                        head_contribs[l][h].push(contrib);
                        attn_sum = Some(match attn_sum {
                            None => contrib,
                            Some(acc) => tape.add(acc, contrib)?,
                        });
                    }
                    let attn_out = attn_sum.expect("at least one head");
                    attn_outputs[l].push(attn_out);
                    r = tape.add(r, attn_out)?;
                    let xn2 = {
                        let g = id_of(&format!("block{l}.ln2.g"))?;
                        let b = id_of(&format!("block{l}.ln2.b"))?;
                        tape.layer_norm(r, g, b, LN_EPS)?
                    };
                    let f = tape.matmul(xn2, id_of(&format!("block{l}.ff1.w"))?)?;
                    let f = tape.add_bias(f, id_of(&format!("block{l}.ff1.b"))?)?;
                    let f = tape.relu(f)?;
                    let m = tape.matmul(f, id_of(&format!("block{l}.ff2.w"))?)?;
                    let m = tape.add_bias(m, id_of(&format!("block{l}.ff2.b"))?)?;
                    mlp_outputs[l].push(m);
                    r = tape.add(r, m)?;
                    block_outputs[l].push(r);
                }
                let xf = {
                    let g = id_of("lnf.g")?;
                    let b = id_of("lnf.b")?;
                    tape.layer_norm(r, g, b, LN_EPS)?
                };
                let pooled = tape.mean_pool_rows(xf)?;
                per_sample_features.push(pooled);
                let z = tape.matmul(pooled, id_of("head.w")?)?;
                let z = tape.add_bias(z, id_of("head.b")?)?;
                per_sample_logits.push(z);
            }
            let logits = tape.concat_rows(&per_sample_logits)?;
            let features = tape.concat_rows(&per_sample_features)?;
            Ok(BuiltGraph {
                param_ids,
                logits,
                features,
                block_outputs,
                head_contribs,
                attn_outputs,
                mlp_outputs,
                embed_nodes,
                per_sample_logits,
            })
        }
        _ => Err(Error::Shape("batch kind does not match model family".into())),
    }
}

/// Per-layer activations captured during a traced forward pass, pooled to one
/// row per sample.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    /// `[layer]` post-block activations `[n, d]`.
    pub layers: Vec<Tensor>,
    /// Attn only: `[layer][head]` post-projection contributions `[n, d]`.
    pub heads: Vec<Vec<Tensor>>,
    /// Attn only: `[layer]` feed-forward outputs `[n, d]`.
    pub mlps: Vec<Tensor>,
}

pub fn forward(model: &TrainedModel, batch: &Batch) -> Result<Tensor> {
    model.forward_calls.fetch_add(1, Ordering::Relaxed);
    let mut tape = Tape::new();
    let built = build_forward(&mut tape, &model.spec, &model.params, batch, None)?;
    Ok(tape.value(built.logits).clone())
}

pub fn forward_traced(model: &TrainedModel, batch: &Batch) -> Result<(Tensor, ActivationTrace)> {
    model.forward_calls.fetch_add(1, Ordering::Relaxed);
    let mut tape = Tape::new();
    let built = build_forward(&mut tape, &model.spec, &model.params, batch, None)?;
    let logits = tape.value(built.logits).clone();

    let pool_group = |nodes: &[NodeId]| -> Tensor {
        // One node covering the batch (mlp) or one [seq, d] node per sample.
        if nodes.len() == 1 && model.spec.family == Family::Mlp {
            return tape.value(nodes[0]).clone();
        }
        let d = tape.value(nodes[0]).cols();
        let mut out = Tensor::zeros(nodes.len(), d);
        for (i, &n) in nodes.iter().enumerate() {
            let v = tape.value(n);
            let inv = 1.0 / v.rows() as f64;
            for r in 0..v.rows() {
                for c in 0..d {
                    let nv = out.at(i, c) + v.at(r, c) * inv;
                    out.set(i, c, nv);
                }
            }
        }
        out
    };

    let layers = built.block_outputs.iter().map(|g| pool_group(g)).collect();
    let heads = built
        .head_contribs
        .iter()
        .map(|per_layer| per_layer.iter().map(|g| pool_group(g)).collect())
        .collect();
    let mlps = built.mlp_outputs.iter().map(|g| pool_group(g)).collect();
    Ok((logits, ActivationTrace { layers, heads, mlps }))
}

/// Penultimate (pre-head) representation of a batch, `[n, hidden]`.
pub fn features(model: &TrainedModel, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let built = build_forward(&mut tape, &model.spec, &model.params, batch, None)?;
    Ok(tape.value(built.features).clone())
}

// ---------------------------------------------------------------------------
// Checkpoint format: one JSON header line, then raw little-endian f64 payload
// in param_layout order.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    spec: ModelSpec,
    role: Role,
    provenance: Provenance,
}

const CKPT_TAG: &str = "kdlab-checkpoint v1";

pub fn save_model<W: Write>(model: &TrainedModel, w: &mut W) -> Result<()> {
    let header = CheckpointHeader {
        format: CKPT_TAG.into(),
        spec: model.spec,
        role: model.role,
        provenance: model.provenance.clone(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}")?;
    for (name, rows, cols) in model.spec.param_layout() {
        let t = model
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        if t.shape() != (rows, cols) {
            return Err(Error::Shape(format!("parameter {name} has unexpected shape")));
        }
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_model<R: Read>(r: &mut R) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.format != CKPT_TAG {
        return Err(Error::Format(format!("unexpected checkpoint format {}", header.format)));
    }
    let mut offset = nl + 1;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, rows, cols) in header.spec.param_layout() {
        let len = rows * cols * 8;
        if offset + len > bytes.len() {
            return Err(Error::Format("checkpoint payload truncated".into()));
        }
        tensors.push(Tensor::from_le_bytes(rows, cols, &bytes[offset..offset + len])?);
        names.push(name);
        offset += len;
    }
    if offset != bytes.len() {
        return Err(Error::Format("checkpoint payload has trailing bytes".into()));
    }
    Ok(TrainedModel::new(header.spec, Params { names, tensors }, header.role, header.provenance))
}
