//! Measurement side of the lab: accuracy/F1/group metrics with the spurious
//! gap, prediction agreement and venn overlap between model pairs, confidence
//! densities, linear centered-kernel-alignment between layer activations, and
//! gradient-times-activation-difference attribution over attention heads and
//! feed-forward blocks.

use serde::{Deserialize, Serialize};

use crate::data::{self, DataConfig, DatasetBundle, GroupedDataset, Split};
use crate::funcs;
use crate::models::{self, Batch, Family, TrainedModel};
use crate::rng;
use crate::{Error, Result, Tape, Tensor};

/// Hard argmax predictions over a dataset, in sample order.
pub fn predict(model: &TrainedModel, ds: &GroupedDataset) -> Result<Vec<u8>> {
    let batch = Batch::from_dataset(ds)?;
    let logits = models::forward(model, &batch)?;
    Ok((0..ds.samples.len()).map(|i| u8::from(logits.at(i, 1) > logits.at(i, 0))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    /// F1 of the positive class (label 1).
    pub f1_positive: f64,
    /// Accuracy per (y, s) group; `None` where the split has no such samples.
    pub group_accuracy: [Option<f64>; 4],
    /// Minimum accuracy over non-empty groups.
    pub worst_group: f64,
}

pub fn split_metrics(model: &TrainedModel, ds: &GroupedDataset) -> Result<SplitMetrics> {
    if ds.samples.is_empty() {
        return Err(Error::Empty(format!("metrics on empty split {}", ds.split.name())));
    }
    let preds = predict(model, ds)?;
    let mut correct = 0usize;
    let mut group_hit = [0usize; 4];
    let mut group_n = [0usize; 4];
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (s, &p) in ds.samples.iter().zip(&preds) {
        let hit = p == s.y;
        correct += usize::from(hit);
        let g = s.group() as usize;
        group_n[g] += 1;
        group_hit[g] += usize::from(hit);
        match (s.y, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => {}
        }
    }
    let group_accuracy: [Option<f64>; 4] = std::array::from_fn(|g| {
        (group_n[g] > 0).then(|| group_hit[g] as f64 / group_n[g] as f64)
    });
    let worst_group = group_accuracy.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
    let f1_positive = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(SplitMetrics {
        accuracy: correct as f64 / ds.samples.len() as f64,
        f1_positive,
        group_accuracy,
        worst_group,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub id: SplitMetrics,
    pub ood: SplitMetrics,
    pub transfer: SplitMetrics,
    /// Headline in-distribution accuracy.
    pub id_accuracy: f64,
    /// Headline out-of-distribution accuracy: worst-group accuracy on the ood
    /// split for vector data, plain accuracy on the (anti-correlated) ood
    /// split for token data.
    pub ood_accuracy: f64,
    /// Plain accuracy on the distribution-shifted transfer split.
    pub transfer_accuracy: f64,
    /// `id_accuracy - ood_accuracy`; large values mean spurious reliance.
    pub spurious_gap: f64,
}

pub fn evaluate(model: &TrainedModel, bundle: &DatasetBundle) -> Result<Metrics> {
    let id = split_metrics(model, bundle.split(Split::IdTest))?;
    let ood = split_metrics(model, bundle.split(Split::OodTest))?;
    let transfer = split_metrics(model, bundle.split(Split::TransferTest))?;
    let id_accuracy = id.accuracy;
    let ood_accuracy = if bundle.is_token() { ood.accuracy } else { ood.worst_group };
    let transfer_accuracy = transfer.accuracy;
    Ok(Metrics {
        id_accuracy,
        ood_accuracy,
        transfer_accuracy,
        spurious_gap: id_accuracy - ood_accuracy,
        id,
        ood,
        transfer,
    })
}

/// Fraction of samples on which two models predict the same label.
pub fn agreement(a: &TrainedModel, b: &TrainedModel, ds: &GroupedDataset) -> Result<f64> {
    if ds.samples.is_empty() {
        return Err(Error::Empty("agreement on empty split".into()));
    }
    let pa = predict(a, ds)?;
    let pb = predict(b, ds)?;
    let same = pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
    Ok(same as f64 / pa.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VennCounts {
    pub both_correct: usize,
    pub only_a_correct: usize,
    pub only_b_correct: usize,
    pub neither_correct: usize,
}

impl VennCounts {
    pub fn total(&self) -> usize {
        self.both_correct + self.only_a_correct + self.only_b_correct + self.neither_correct
    }
}

/// Correctness overlap of two models on one split.
pub fn venn_counts(a: &TrainedModel, b: &TrainedModel, ds: &GroupedDataset) -> Result<VennCounts> {
    if ds.samples.is_empty() {
        return Err(Error::Empty("venn counts on empty split".into()));
    }
    let pa = predict(a, ds)?;
    let pb = predict(b, ds)?;
    let mut v = VennCounts { both_correct: 0, only_a_correct: 0, only_b_correct: 0, neither_correct: 0 };
    for ((s, &x), &y) in ds.samples.iter().zip(&pa).zip(&pb) {
        match (x == s.y, y == s.y) {
            (true, true) => v.both_correct += 1,
            (true, false) => v.only_a_correct += 1,
            (false, true) => v.only_b_correct += 1,
            (false, false) => v.neither_correct += 1,
        }
    }
    Ok(v)
}

/// Per-sample positive-class probabilities on a split, plus their histogram
/// over uniform bins on [0, 1]. Histogram counts sum to the split size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRecord {
    /// P(y = 1) per sample, in split order.
    pub probs: Vec<f64>,
    /// Count of samples per bin.
    pub histogram: Vec<usize>,
}

/// Histogram of the model's positive-class probability P(y = 1) over `bins`
/// equal-width bins on [0, 1].
pub fn prob_density(
    model: &TrainedModel,
    ds: &GroupedDataset,
    bins: usize,
) -> Result<ProbabilityRecord> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least two bins".into()));
    }
    if ds.samples.is_empty() {
        return Err(Error::Empty("density on empty split".into()));
    }
    let batch = Batch::from_dataset(ds)?;
    let logits = models::forward(model, &batch)?;
    let mut probs = Vec::with_capacity(ds.samples.len());
    let mut histogram = vec![0usize; bins];
    for i in 0..ds.samples.len() {
        let p = funcs::softmax(logits.row(i))?[1];
        let bin = ((p * bins as f64) as usize).min(bins - 1);
        histogram[bin] += 1;
        probs.push(p);
    }
    Ok(ProbabilityRecord { probs, histogram })
}

/// Linear centered-kernel alignment between two activation matrices with the
/// same rows: `|Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)` after column centering.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Shape("cka inputs must have the same rows".into()));
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("cka needs at least two rows".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = yc.transpose().matmul(&xc)?.frobenius_norm();
    let xx = xc.transpose().matmul(&xc)?.frobenius_norm();
    let yy = yc.transpose().matmul(&yc)?.frobenius_norm();
    let denom = xx * yy;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument("cka undefined for constant activations".into()));
    }
    Ok(cross * cross / denom)
}

fn center_columns(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = x.rows() as f64;
    for c in 0..x.cols() {
        let mean: f64 = (0..x.rows()).map(|r| x.at(r, c)).sum::<f64>() / n;
        for r in 0..x.rows() {
            out.set(r, c, x.at(r, c) - mean);
        }
    }
    out
}

/// Layer-by-layer CKA grid between two models on a seeded probe subset of
/// `ds`. Entry `(i, j)` compares layer `i` of `a` with layer `j` of `b`.
pub fn cka_matrix(
    a: &TrainedModel,
    b: &TrainedModel,
    ds: &GroupedDataset,
    probe: usize,
    seed: u64,
) -> Result<Tensor> {
    if probe < 2 {
        return Err(Error::InvalidArgument("probe size must be at least 2".into()));
    }
    if ds.samples.is_empty() {
        return Err(Error::Empty("cka probe on empty split".into()));
    }
    let mut r = rng::substream(seed, "cka/probe");
    let mut order = rng::shuffled_indices(&mut r, ds.samples.len());
    order.truncate(probe.min(ds.samples.len()));
    order.sort_unstable();
    let samples: Vec<_> = order.iter().map(|&i| &ds.samples[i]).collect();
    let batch = Batch::from_samples(&samples)?;
    let (_, ta) = models::forward_traced(a, &batch)?;
    let (_, tb) = models::forward_traced(b, &batch)?;
    let mut grid = Tensor::zeros(ta.layers.len(), tb.layers.len());
    for (i, la) in ta.layers.iter().enumerate() {
        for (j, lb) in tb.layers.iter().enumerate() {
            grid.set(i, j, linear_cka(la, lb)?);
        }
    }
    Ok(grid)
}

/// Which gradient the attribution scores use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EapGradient {
    /// Full backpropagated gradient of the margin at each component node.
    Node,
    /// Gradient of the margin at the final residual stream, applied to every
    /// component through its additive insertion point. Since the residual is
    /// exactly the sum of embedding, head contributions, and feed-forward
    /// outputs, the component scores then sum to the full linearized margin
    /// change by construction.
    Readout,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EapResult {
    /// `(layers, heads + 1)`: per-head scores, last column the feed-forward
    /// block of each layer.
    pub grid: Tensor,
    /// Score of the embedding (token + positional) component.
    pub embed_score: f64,
    /// Mean actual margin change under corruption.
    pub mean_margin_delta: f64,
    /// Mean predicted margin change (sum of all component scores).
    pub mean_predicted_delta: f64,
    /// Median over samples of |predicted - actual| / |actual|.
    pub median_rel_err: f64,
    pub gradient: EapGradient,
    pub samples: usize,
}

/// Attribution patching over attention heads and feed-forward blocks: each
/// component scores `mean over samples of (activation under corruption -
/// clean activation) . d(margin)/d(activation)` with the gradient taken on
/// the clean run. Corruption flips each probe sample's spurious attribute
/// while preserving its label, so high-scoring components are the ones
/// carrying the shortcut.
pub fn eap_scores(
    model: &TrainedModel,
    ds: &GroupedDataset,
    data_cfg: &DataConfig,
    probe: usize,
    seed: u64,
    gradient: EapGradient,
) -> Result<EapResult> {
    if model.spec.family != Family::Attn {
        return Err(Error::InvalidArgument("attribution scores need the attention family".into()));
    }
    if ds.samples.is_empty() {
        return Err(Error::Empty("attribution on empty split".into()));
    }
    if probe == 0 {
        return Err(Error::InvalidArgument("probe size must be positive".into()));
    }
    let mut r = rng::substream(seed, "eap/probe");
    let mut order = rng::shuffled_indices(&mut r, ds.samples.len());
    order.truncate(probe.min(ds.samples.len()));
    order.sort_unstable();

    let layers = model.spec.layers;
    let heads = model.spec.heads;
    let mut grid = Tensor::zeros(layers, heads + 1);
    let mut embed_score = 0.0;
    let mut margin_deltas = Vec::with_capacity(order.len());
    let mut rel_errs = Vec::with_capacity(order.len());
    let mut predicted_sum = 0.0;

    for &i in &order {
        let clean_sample = &ds.samples[i];
        let corrupt_sample = data::corrupt_counterpart(clean_sample, data_cfg);
        let clean_batch = Batch::from_samples(&[clean_sample])?;
        let corrupt_batch = Batch::from_samples(&[&corrupt_sample])?;

        let mut tape = Tape::new();
        let clean = models::build_forward(&mut tape, &model.spec, &model.params, &clean_batch, None)?;
        let margin = tape.sum_margin(clean.logits)?;
        let clean_margin = tape.value(margin).at(0, 0);
        let grads = tape.backward(margin)?;

        let mut corrupt_tape = Tape::new();
        let corrupt =
            models::build_forward(&mut corrupt_tape, &model.spec, &model.params, &corrupt_batch, None)?;
        let corrupt_margin_node = corrupt_tape.sum_margin(corrupt.logits)?;
        let corrupt_margin = corrupt_tape.value(corrupt_margin_node).at(0, 0);

        let readout_grad = grads[clean.block_outputs[layers - 1][0]]
            .as_ref()
            .ok_or_else(|| Error::Shape("margin is independent of the residual stream".into()))?
            .clone();
        let grad_for = |node: usize| -> Result<&Tensor> {
            match gradient {
                EapGradient::Readout => Ok(&readout_grad),
                EapGradient::Node => grads[node]
                    .as_ref()
                    .ok_or_else(|| Error::Shape("margin is independent of a component".into())),
            }
        };
        let dot_delta = |g: &Tensor, clean_v: &Tensor, corrupt_v: &Tensor| -> f64 {
            let mut acc = 0.0;
            for ((gv, cv), xv) in g.data().iter().zip(corrupt_v.data()).zip(clean_v.data()) {
                acc += gv * (cv - xv);
            }
            acc
        };

        let mut predicted = 0.0;
        for l in 0..layers {
            for h in 0..heads {
                let node = clean.head_contribs[l][h][0];
                let s = dot_delta(
                    grad_for(node)?,
                    tape.value(node),
                    corrupt_tape.value(corrupt.head_contribs[l][h][0]),
                );
                grid.set(l, h, grid.at(l, h) + s);
                predicted += s;
            }
            let node = clean.mlp_outputs[l][0];
            let s = dot_delta(
                grad_for(node)?,
                tape.value(node),
                corrupt_tape.value(corrupt.mlp_outputs[l][0]),
            );
            grid.set(l, heads, grid.at(l, heads) + s);
            predicted += s;
        }
        let enode = clean.embed_nodes[0];
        let es = dot_delta(grad_for(enode)?, tape.value(enode), corrupt_tape.value(corrupt.embed_nodes[0]));
        embed_score += es;
        predicted += es;

        let actual = corrupt_margin - clean_margin;
        margin_deltas.push(actual);
        predicted_sum += predicted;
        rel_errs.push((predicted - actual).abs() / actual.abs().max(1e-12));
    }

    let n = order.len() as f64;
    let grid = grid.scale(1.0 / n);
    embed_score /= n;
    rel_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_rel_err = if rel_errs.len() % 2 == 1 {
        rel_errs[rel_errs.len() / 2]
    } else {
        0.5 * (rel_errs[rel_errs.len() / 2 - 1] + rel_errs[rel_errs.len() / 2])
    };
    Ok(EapResult {
        grid,
        embed_score,
        mean_margin_delta: margin_deltas.iter().sum::<f64>() / n,
        mean_predicted_delta: predicted_sum / n,
        median_rel_err,
        gradient,
        samples: order.len(),
    })
}
