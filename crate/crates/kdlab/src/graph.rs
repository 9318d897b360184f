//! Reverse-mode differentiation over an eager op tape.
//!
//! A [`Tape`] records every op as it executes: op kind, input node ids, and
//! the computed output value. Nodes are therefore topologically ordered by
//! construction, and [`Tape::backward`] walks them in reverse, accumulating a
//! gradient for every node reachable from the loss. Ops cover exactly what
//! the two model families need: matmul, bias add, elementwise tanh/relu,
//! row softmax / log-softmax, layer normalization, embedding lookup, pooling,
//! row/column slicing (attention heads), plus fused classification losses.
//!
//! There is no broadcasting beyond bias addition, and every op output is
//! checked finite.

use crate::funcs::{log_softmax, softmax};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op<F: Scalar> {
    Leaf,
    MatMul,
    Transpose,
    Add,
    /// `x [m,n] + b [1,n]`, the only broadcast in the system.
    AddBias,
    /// Add a constant tensor (no gradient for the constant).
    AddConst(Tensor<F>),
    Scale(F),
    Relu,
    Tanh,
    SoftmaxRows,
    LogSoftmaxRows,
    /// Row-wise layer norm with learned gain and bias: inputs (x, gain, bias).
    LayerNorm { eps: F },
    /// Rows of the (single) input gathered by token id.
    Embed { tokens: Vec<usize> },
    /// `[m,n] -> [1,n]` column means.
    MeanPoolRows,
    ConcatRows,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Mean cross-entropy of `logits [n,C]` against integer labels -> `[1,1]`.
    CeLoss { labels: Vec<usize> },
    /// Mean over rows of KL(target_row || softmax(logits_row)) -> `[1,1]`.
    KlToTarget { target: Tensor<F> },
    /// Sum over rows of `logit[1] - logit[0]` -> `[1,1]`.
    SumMargin,
}

#[derive(Clone, Debug)]
pub struct Node<F: Scalar> {
    pub op: Op<F>,
    pub inputs: Vec<NodeId>,
    pub value: Tensor<F>,
    pub trainable: bool,
}

#[derive(Default)]
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<NodeId>, value: Tensor<F>, trainable: bool) -> Result<NodeId> {
        value.check_finite("op output")?;
        self.nodes.push(Node { op, inputs, value, trainable });
        Ok(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (inputs, constants that still want a node id).
    pub fn input(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Trainable leaf; backward will produce a gradient for it.
    pub fn param(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.push(Op::Leaf, vec![], value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.push(Op::MatMul, vec![a, b], v, false)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.transpose();
        self.push(Op::Transpose, vec![x], v, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        self.push(Op::Add, vec![a, b], v, false)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[bias].value;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape("add_bias expects bias [1, cols(x)]".into()));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let nv = v.at(r, c) + bv.at(0, c);
                v.set(r, c, nv);
            }
        }
        self.push(Op::AddBias, vec![x, bias], v, false)
    }

    pub fn add_const(&mut self, x: NodeId, constant: Tensor<F>) -> Result<NodeId> {
        let v = self.nodes[x].value.add(&constant)?;
        self.push(Op::AddConst(constant), vec![x], v, false)
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        let v = self.nodes[x].value.scale(c);
        self.push(Op::Scale(c), vec![x], v, false)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|a| if a > F::zero() { a } else { F::zero() });
        self.push(Op::Relu, vec![x], v, false)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|a| a.tanh());
        self.push(Op::Tanh, vec![x], v, false)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let mut v = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let p = softmax(xv.row(r))?;
            v.row_mut(r).copy_from_slice(&p);
        }
        self.push(Op::SoftmaxRows, vec![x], v, false)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let mut v = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let p = log_softmax(xv.row(r));
            v.row_mut(r).copy_from_slice(&p);
        }
        self.push(Op::LogSoftmaxRows, vec![x], v, false)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gain].value;
        let bv = &self.nodes[bias].value;
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(Error::Shape("layer_norm gain/bias must be [1, cols(x)]".into()));
        }
        let mut v = Tensor::zeros(xv.rows(), d);
        for r in 0..xv.rows() {
            let (mean, inv) = row_norm_stats(xv.row(r), eps);
            for c in 0..d {
                let xhat = (xv.at(r, c) - mean) * inv;
                v.set(r, c, gv.at(0, c) * xhat + bv.at(0, c));
            }
        }
        self.push(Op::LayerNorm { eps }, vec![x, gain, bias], v, false)
    }

    pub fn embed(&mut self, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table].value;
        if let Some(&t) = tokens.iter().find(|&&t| t >= tv.rows()) {
            return Err(Error::InvalidArgument(format!("token id {t} out of vocab {}", tv.rows())));
        }
        let mut v = Tensor::zeros(tokens.len(), tv.cols());
        for (i, &t) in tokens.iter().enumerate() {
            v.row_mut(i).copy_from_slice(tv.row(t));
        }
        self.push(Op::Embed { tokens: tokens.to_vec() }, vec![table], v, false)
    }

    pub fn mean_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.rows() == 0 {
            return Err(Error::Empty("mean_pool_rows over zero rows".into()));
        }
        let inv = F::from_f64_lit(1.0 / xv.rows() as f64);
        let mut v = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for c in 0..xv.cols() {
                let nv = v.at(0, c) + xv.at(r, c) * inv;
                v.set(0, c, nv);
            }
        }
        self.push(Op::MeanPoolRows, vec![x], v, false)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows with no parts".into()));
        }
        let cols = self.nodes[parts[0]].value.cols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.cols() != cols {
                return Err(Error::Shape("concat_rows column mismatch".into()));
            }
            data.extend_from_slice(pv.data());
        }
        let v = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatRows, parts.to_vec(), v, false)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if start + len > xv.rows() {
            return Err(Error::Shape("slice_rows out of range".into()));
        }
        let mut v = Tensor::zeros(len, xv.cols());
        for r in 0..len {
            v.row_mut(r).copy_from_slice(xv.row(start + r));
        }
        self.push(Op::SliceRows { start, len }, vec![x], v, false)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if start + len > xv.cols() {
            return Err(Error::Shape("slice_cols out of range".into()));
        }
        let mut v = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            for c in 0..len {
                v.set(r, c, xv.at(r, start + c));
            }
        }
        self.push(Op::SliceCols { start, len }, vec![x], v, false)
    }

    pub fn ce_loss(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        if labels.len() != lv.rows() {
            return Err(Error::Shape("ce_loss label count mismatch".into()));
        }
        let mut total = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            total += crate::funcs::cross_entropy(lv.row(r), y)?;
        }
        let mean = total / F::from_f64_lit(labels.len() as f64);
        let v = Tensor::new(1, 1, vec![mean])?;
        self.push(Op::CeLoss { labels: labels.to_vec() }, vec![logits], v, false)
    }

    pub fn kl_to_target(&mut self, logits: NodeId, target: Tensor<F>) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        if target.shape() != lv.shape() {
            return Err(Error::Shape("kl_to_target shape mismatch".into()));
        }
        let n = lv.rows();
        let mut total = F::zero();
        for r in 0..n {
            let lsm = log_softmax(lv.row(r));
            for (c, &t) in target.row(r).iter().enumerate() {
                if t > F::zero() {
                    total += t * (t.ln() - lsm[c]);
                }
            }
        }
        let mean = total / F::from_f64_lit(n as f64);
        let v = Tensor::new(1, 1, vec![mean])?;
        self.push(Op::KlToTarget { target }, vec![logits], v, false)
    }

    pub fn sum_margin(&mut self, logits: NodeId) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        if lv.cols() != 2 {
            return Err(Error::Shape("sum_margin expects two-class logits".into()));
        }
        let mut total = F::zero();
        for r in 0..lv.rows() {
            total += lv.at(r, 1) - lv.at(r, 0);
        }
        let v = Tensor::new(1, 1, vec![total])?;
        self.push(Op::SumMargin, vec![logits], v, false)
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per
    /// node; `None` where the loss does not depend on the node.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor<F>>>> {
        let lv = &self.nodes[loss].value;
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(1, 1, vec![F::one()])?);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate_inputs(&self, id: NodeId, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                let ga = g.matmul(&b.transpose())?;
                let gb = a.transpose().matmul(g)?;
                add_grad(grads, ins[0], ga)?;
                add_grad(grads, ins[1], gb)?;
            }
            Op::Transpose => add_grad(grads, ins[0], g.transpose())?,
            Op::Add => {
                add_grad(grads, ins[0], g.clone())?;
                add_grad(grads, ins[1], g.clone())?;
            }
            Op::AddBias => {
                add_grad(grads, ins[0], g.clone())?;
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let nv = gb.at(0, c) + g.at(r, c);
                        gb.set(0, c, nv);
                    }
                }
                add_grad(grads, ins[1], gb)?;
            }
            Op::AddConst(_) => add_grad(grads, ins[0], g.clone())?,
            Op::Scale(c) => add_grad(grads, ins[0], g.scale(*c))?,
            Op::Relu => {
                let x = &self.nodes[ins[0]].value;
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= F::zero() {
                        *gv = F::zero();
                    }
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::Tanh => {
                let y = &node.value;
                let mut gx = g.clone();
                for (gv, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *gv = *gv * (F::one() - yv * yv);
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: F = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                    }
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::LogSoftmaxRows => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: F = g.row(r).iter().cloned().sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, g.at(r, c) - y.at(r, c).exp() * gsum);
                    }
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::LayerNorm { eps } => {
                let x = &self.nodes[ins[0]].value;
                let gain = &self.nodes[ins[1]].value;
                let d = x.cols();
                let dn = F::from_f64_lit(d as f64);
                let mut gx = Tensor::zeros(x.rows(), d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                for r in 0..x.rows() {
                    let (mean, inv) = row_norm_stats(x.row(r), *eps);
                    let xhat: Vec<F> = x.row(r).iter().map(|&v| (v - mean) * inv).collect();
                    let gy: Vec<F> = (0..d).map(|c| g.at(r, c) * gain.at(0, c)).collect();
                    let gy_mean: F = gy.iter().cloned().sum::<F>() / dn;
                    let gyx_mean: F = gy.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / dn;
                    for c in 0..d {
                        gx.set(r, c, inv * (gy[c] - gy_mean - xhat[c] * gyx_mean));
                        let ng = ggain.at(0, c) + g.at(r, c) * xhat[c];
                        ggain.set(0, c, ng);
                        let nb = gbias.at(0, c) + g.at(r, c);
                        gbias.set(0, c, nb);
                    }
                }
                add_grad(grads, ins[0], gx)?;
                add_grad(grads, ins[1], ggain)?;
                add_grad(grads, ins[2], gbias)?;
            }
            Op::Embed { tokens } => {
                let table = &self.nodes[ins[0]].value;
                let mut gt = Tensor::zeros(table.rows(), table.cols());
                for (i, &t) in tokens.iter().enumerate() {
                    for c in 0..table.cols() {
                        let nv = gt.at(t, c) + g.at(i, c);
                        gt.set(t, c, nv);
                    }
                }
                add_grad(grads, ins[0], gt)?;
            }
            Op::MeanPoolRows => {
                let x = &self.nodes[ins[0]].value;
                let inv = F::from_f64_lit(1.0 / x.rows() as f64);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        gx.set(r, c, g.at(0, c) * inv);
                    }
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &p in ins {
                    let pr = self.nodes[p].value.rows();
                    let mut gp = Tensor::zeros(pr, g.cols());
                    for r in 0..pr {
                        gp.row_mut(r).copy_from_slice(g.row(offset + r));
                    }
                    add_grad(grads, p, gp)?;
                    offset += pr;
                }
            }
            Op::SliceRows { start, len } => {
                let x = &self.nodes[ins[0]].value;
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..*len {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::SliceCols { start, len } => {
                let x = &self.nodes[ins[0]].value;
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..*len {
                        gx.set(r, start + c, g.at(r, c));
                    }
                }
                add_grad(grads, ins[0], gx)?;
            }
            Op::CeLoss { labels } => {
                let logits = &self.nodes[ins[0]].value;
                let n = F::from_f64_lit(labels.len() as f64);
                let gs = g.at(0, 0);
                let mut gl = Tensor::zeros(logits.rows(), logits.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax(logits.row(r))?;
                    for c in 0..logits.cols() {
                        let onehot = if c == y { F::one() } else { F::zero() };
                        gl.set(r, c, gs * (p[c] - onehot) / n);
                    }
                }
                add_grad(grads, ins[0], gl)?;
            }
            Op::KlToTarget { target } => {
                let logits = &self.nodes[ins[0]].value;
                let n = F::from_f64_lit(logits.rows() as f64);
                let gs = g.at(0, 0);
                let mut gl = Tensor::zeros(logits.rows(), logits.cols());
                for r in 0..logits.rows() {
                    let p = softmax(logits.row(r))?;
                    for c in 0..logits.cols() {
                        gl.set(r, c, gs * (p[c] - target.at(r, c)) / n);
                    }
                }
                add_grad(grads, ins[0], gl)?;
            }
            Op::SumMargin => {
                let logits = &self.nodes[ins[0]].value;
                let gs = g.at(0, 0);
                let mut gl = Tensor::zeros(logits.rows(), 2);
                for r in 0..logits.rows() {
                    gl.set(r, 0, -gs);
                    gl.set(r, 1, gs);
                }
                add_grad(grads, ins[0], gl)?;
            }
        }
        Ok(())
    }
}

fn row_norm_stats<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let n = F::from_f64_lit(row.len() as f64);
    let mean: F = row.iter().cloned().sum::<F>() / n;
    let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, (var + eps).sqrt().recip())
}

fn add_grad<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
