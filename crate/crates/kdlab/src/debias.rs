//! Training methods: plain ERM plus the debiasing family — product-of-experts
//! against a hypothesis-only or weak-learner bias model, temperature-damped
//! ERM, deep feature reweighting (final-layer retraining on a group-balanced
//! heldout set), and per-sample-gradient reweighted resampling.
//!
//! All methods share one deterministic minibatch loop: seeded epoch shuffles,
//! bias-corrected Adam, divergence detection on the epoch loss.

use serde::{Deserialize, Serialize};

use crate::adam::AdamHyper;
use crate::data::{self, DataConfig, GroupedDataset, Sample};
use crate::funcs;
use crate::graph::NodeId;
use crate::models::{
    self, build_forward, Batch, BuiltGraph, ModelSpec, Provenance, ScaleTag,
    TrainedModel,
};
use crate::rng;
use crate::{AdamState, Error, Real, Result, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DebiasMethod {
    Erm,
    /// Product of experts against a logistic model that only sees the
    /// spurious view of each sample.
    #[serde(rename = "poe_biasfeature")]
    PoeBiasFeature,
    /// Product of experts against a T-scale model trained for one epoch.
    #[serde(rename = "poe_weak")]
    PoeWeak,
    /// ERM with logits divided by `tau` before the loss. `tau = 1` is ERM.
    SigmaDamp { tau: f64 },
    /// Final-layer retrain on the group-balanced heldout split.
    Dfr,
    /// Resample training data by final-layer per-sample gradient norm, retrain.
    Psg,
}

impl DebiasMethod {
    pub fn name(&self) -> String {
        match self {
            DebiasMethod::Erm => "erm".into(),
            DebiasMethod::PoeBiasFeature => "poe_biasfeature".into(),
            DebiasMethod::PoeWeak => "poe_weak".into(),
            DebiasMethod::SigmaDamp { tau } => format!("sigma_damp_{tau}"),
            DebiasMethod::Dfr => "dfr".into(),
            DebiasMethod::Psg => "psg".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive and finite".into()));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { learning_rate: self.learning_rate, ..AdamHyper::default() }
    }
}

/// One deterministic training pass. `loss_builder` receives the tape, the
/// built forward graph, and the dataset indices of the batch, and returns the
/// scalar loss node. Returns the mean loss per epoch.
pub fn train_loop<Fb>(
    model: &mut TrainedModel,
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    mut loss_builder: Fb,
) -> Result<Vec<f64>>
where
    Fb: FnMut(&mut Tape, &BuiltGraph, &[usize]) -> Result<NodeId>,
{
    cfg.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::Empty("training on empty dataset".into()));
    }
    let n = ds.samples.len();
    let mut adam = AdamState::new(&model.params.tensors, cfg.hyper());
    let mut shuffle_rng = rng::substream(cfg.seed, "train/shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let order = rng::shuffled_indices(&mut shuffle_rng, n);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            let mut tape = Tape::new();
            let built = build_forward(&mut tape, &model.spec, &model.params, &batch, None)?;
            let loss = loss_builder(&mut tape, &built, chunk)?;
            let loss_val = tape.value(loss).at(0, 0);
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!("non-finite batch loss {loss_val}")));
            }
            loss_sum += loss_val;
            batches += 1;
            let grads = tape.backward(loss)?;
            let param_grads: Vec<Option<Tensor>> =
                built.param_ids.iter().map(|&id| grads[id].clone()).collect();
            adam.update(&mut model.params.tensors, &param_grads)?;
        }
        let epoch_loss = loss_sum / batches as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite epoch loss {epoch_loss}")));
        }
        epoch_losses.push(epoch_loss);
    }
    for t in &model.params.tensors {
        t.check_finite("trained parameter")?;
    }
    Ok(epoch_losses)
}

fn labels_of(ds: &GroupedDataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| ds.samples[i].y as usize).collect()
}

/// Plain cross-entropy training from a fresh init.
pub fn train_erm(spec: &ModelSpec, ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_sigma_damp(spec, ds, cfg, 1.0)
}

/// ERM with logits divided by `tau` before the cross-entropy. `tau = 1`
/// reproduces ERM bit for bit; `tau > 1` damps the gradient on confidently
/// classified samples.
pub fn train_sigma_damp(
    spec: &ModelSpec,
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    tau: f64,
) -> Result<TrainedModel> {
    if !(tau >= 1.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument("tau must be >= 1 and finite".into()));
    }
    let mut model = models::init_params(spec, cfg.seed);
    train_loop(&mut model, ds, cfg, |tape, built, idx| {
        let damped = tape.scale(built.logits, 1.0 / tau)?;
        tape.ce_loss(damped, &labels_of(ds, idx))
    })?;
    let method = if tau == 1.0 { "erm".to_string() } else { format!("sigma_damp_{tau}") };
    model.provenance = Provenance::scratch(&method, cfg.seed, "");
    Ok(model)
}

/// Which expert plays the bias side of the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasExpert {
    HypothesisOnly,
    WeakLearner,
}

/// Product-of-experts combination of two logit vectors over the same classes:
/// the sum of their log-softmaxes, renormalized to a proper log-distribution.
/// Equivalent to `log(p_debias * p_bias / sum(p_debias * p_bias))`.
pub fn poe_combine(debias_logits: &[f64], bias_logits: &[f64]) -> Result<Vec<f64>> {
    if debias_logits.is_empty() || debias_logits.len() != bias_logits.len() {
        return Err(Error::Shape(format!(
            "poe_combine class counts differ: {} vs {}",
            debias_logits.len(),
            bias_logits.len()
        )));
    }
    let d = funcs::log_softmax(debias_logits);
    let b = funcs::log_softmax(bias_logits);
    let summed: Vec<f64> = d.iter().zip(&b).map(|(x, y)| x + y).collect();
    Ok(funcs::log_softmax(&summed))
}

/// Per-sample log-probabilities `[n, 2]` of the frozen bias expert, plus its
/// training-set accuracy.
struct BiasSide {
    log_probs: Vec<[Real; 2]>,
    accuracy: f64,
}

fn hypothesis_only_bias(
    ds: &GroupedDataset,
    data_cfg: &DataConfig,
    cfg: &TrainConfig,
) -> Result<BiasSide> {
    // Logistic regression on the scalar spurious view.
    let views: Vec<f64> = ds.samples.iter().map(|s| data::spurious_view(s, data_cfg)).collect();
    let mut w = Tensor::zeros(1, 2);
    let mut b = Tensor::zeros(1, 2);
    let mut adam = AdamState::new(
        &[w.clone(), b.clone()],
        AdamHyper { learning_rate: 0.05, ..AdamHyper::default() },
    );
    let mut shuffle_rng = rng::substream(cfg.seed, "poe/bias/shuffle");
    let epochs = cfg.epochs.max(20);
    for _ in 0..epochs {
        let order = rng::shuffled_indices(&mut shuffle_rng, ds.samples.len());
        for chunk in order.chunks(cfg.batch_size) {
            let x = Tensor::new(chunk.len(), 1, chunk.iter().map(|&i| views[i]).collect())?;
            let mut tape = Tape::new();
            let xn = tape.input(x)?;
            let wn = tape.param(w.clone())?;
            let bn = tape.param(b.clone())?;
            let z = tape.matmul(xn, wn)?;
            let z = tape.add_bias(z, bn)?;
            let loss = tape.ce_loss(z, &labels_of(ds, chunk))?;
            let grads = tape.backward(loss)?;
            let mut pair = [w, b];
            adam.update(&mut pair, &[grads[wn].clone(), grads[bn].clone()])?;
            [w, b] = pair;
        }
    }
    let mut log_probs = Vec::with_capacity(ds.samples.len());
    let mut correct = 0usize;
    for (i, s) in ds.samples.iter().enumerate() {
        let logits = [
            views[i] * w.at(0, 0) + b.at(0, 0),
            views[i] * w.at(0, 1) + b.at(0, 1),
        ];
        let lp = funcs::log_softmax(&logits);
        if (lp[1] > lp[0]) == (s.y == 1) {
            correct += 1;
        }
        log_probs.push([lp[0], lp[1]]);
    }
    Ok(BiasSide { log_probs, accuracy: correct as f64 / ds.samples.len() as f64 })
}

fn weak_learner_bias(
    spec: &ModelSpec,
    ds: &GroupedDataset,
    cfg: &TrainConfig,
) -> Result<(BiasSide, TrainedModel)> {
    let weak_spec = models::spec_for(spec.family, ScaleTag::T, spec.input);
    // One epoch at a raised learning rate: the expert should latch onto the
    // easiest (spurious) signal and little else.
    let weak_cfg = TrainConfig {
        epochs: 1,
        learning_rate: cfg.learning_rate * 3.0,
        seed: cfg.seed ^ 0x77ea_4c11,
        ..cfg.clone()
    };
    let weak = train_erm(&weak_spec, ds, &weak_cfg)?;
    let batch = Batch::from_dataset(ds)?;
    let logits = models::forward(&weak, &batch)?;
    // The expert enters the product with weight two (its distribution is
    // squared): after one epoch its confidence is still mild, and the
    // sharpening makes its vetoes strong enough to redirect the main model.
    const EXPERT_WEIGHT: f64 = 2.0;
    let mut log_probs = Vec::with_capacity(ds.samples.len());
    let mut correct = 0usize;
    for (i, s) in ds.samples.iter().enumerate() {
        let lp = funcs::log_softmax(logits.row(i));
        if (lp[1] > lp[0]) == (s.y == 1) {
            correct += 1;
        }
        log_probs.push([lp[0] * EXPERT_WEIGHT, lp[1] * EXPERT_WEIGHT]);
    }
    let side = BiasSide { log_probs, accuracy: correct as f64 / ds.samples.len() as f64 };
    Ok((side, weak))
}

/// The result of a product-of-experts run: the main (debiased) model plus the
/// frozen weak-learner expert when one was trained, kept around so callers can
/// verify the expert never participates in inference.
pub struct PoeOutcome {
    pub main: TrainedModel,
    /// The weak-learner expert, if `BiasExpert::WeakLearner` was used. The
    /// hypothesis-only expert is a closed-form logistic fit with no model.
    pub bias_model: Option<TrainedModel>,
    /// Training-set accuracy of the bias expert.
    pub bias_accuracy: f64,
}

/// Product-of-experts training: the main model's log-softmax is summed with a
/// frozen bias expert's log-probabilities before the cross-entropy, pushing
/// the main model toward whatever the bias expert cannot explain. Inference
/// uses the main model alone. Aborts if the bias expert fails to beat chance
/// on its training data, since the product then degenerates to noisy ERM.
pub fn train_poe(
    spec: &ModelSpec,
    ds: &GroupedDataset,
    data_cfg: &DataConfig,
    cfg: &TrainConfig,
    expert: BiasExpert,
) -> Result<TrainedModel> {
    train_poe_full(spec, ds, data_cfg, cfg, expert).map(|o| o.main)
}

/// As [`train_poe`], but also returns the bias expert for inspection.
pub fn train_poe_full(
    spec: &ModelSpec,
    ds: &GroupedDataset,
    data_cfg: &DataConfig,
    cfg: &TrainConfig,
    expert: BiasExpert,
) -> Result<PoeOutcome> {
    cfg.validate()?;
    let (bias, bias_model) = match expert {
        BiasExpert::HypothesisOnly => (hypothesis_only_bias(ds, data_cfg, cfg)?, None),
        BiasExpert::WeakLearner => {
            let (side, model) = weak_learner_bias(spec, ds, cfg)?;
            (side, Some(model))
        }
    };
    // The bias expert must beat chance by more than sampling noise (three
    // standard errors of a fair coin), otherwise the product degenerates to
    // noisy ERM and the run is not interpretable.
    let chance_band = 0.5 + 3.0 * (0.25 / ds.samples.len() as f64).sqrt();
    if bias.accuracy <= chance_band {
        return Err(Error::Diverged(format!(
            "bias expert indistinguishable from chance ({:.3} <= {:.3}); the product would not bind",
            bias.accuracy, chance_band
        )));
    }
    let mut model = models::init_params(spec, cfg.seed);
    train_loop(&mut model, ds, cfg, |tape, built, idx| {
        let main_lp = tape.log_softmax_rows(built.logits)?;
        let mut bias_lp = Tensor::zeros(idx.len(), 2);
        for (r, &i) in idx.iter().enumerate() {
            bias_lp.set(r, 0, bias.log_probs[i][0]);
            bias_lp.set(r, 1, bias.log_probs[i][1]);
        }
        let combined = tape.add_const(main_lp, bias_lp)?;
        tape.ce_loss(combined, &labels_of(ds, idx))
    })?;
    let method = match expert {
        BiasExpert::HypothesisOnly => "poe_biasfeature",
        BiasExpert::WeakLearner => "poe_weak",
    };
    model.provenance = Provenance::scratch(method, cfg.seed, "");
    Ok(PoeOutcome { main: model, bias_model, bias_accuracy: bias.accuracy })
}

/// Deep feature reweighting: freeze everything except the classifier head and
/// retrain it on the group-balanced heldout split.
pub fn dfr_retrain(
    base: &TrainedModel,
    heldout: &GroupedDataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let balanced = data::group_balance(heldout, cfg.seed ^ 0x0df2)?;
    if balanced.samples.is_empty() {
        return Err(Error::Empty("heldout split has an empty group".into()));
    }
    let batch = Batch::from_dataset(&balanced)?;
    let feats = models::features(base, &batch)?;
    let labels: Vec<usize> = balanced.samples.iter().map(|s| s.y as usize).collect();

    let mut w = base.params.get("head.w").ok_or_else(|| Error::Shape("missing head.w".into()))?.clone();
    let mut b = base.params.get("head.b").ok_or_else(|| Error::Shape("missing head.b".into()))?.clone();
    let mut adam = AdamState::new(&[w.clone(), b.clone()], cfg.hyper());
    let mut shuffle_rng = rng::substream(cfg.seed, "dfr/shuffle");
    for _ in 0..cfg.epochs {
        let order = rng::shuffled_indices(&mut shuffle_rng, labels.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Tensor::zeros(chunk.len(), feats.cols());
            for (r, &i) in chunk.iter().enumerate() {
                for c in 0..feats.cols() {
                    x.set(r, c, feats.at(i, c));
                }
            }
            let ch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xn = tape.input(x)?;
            let wn = tape.param(w.clone())?;
            let bn = tape.param(b.clone())?;
            let z = tape.matmul(xn, wn)?;
            let z = tape.add_bias(z, bn)?;
            let loss = tape.ce_loss(z, &ch_labels)?;
            if !tape.value(loss).at(0, 0).is_finite() {
                return Err(Error::Diverged("non-finite loss in head retrain".into()));
            }
            let grads = tape.backward(loss)?;
            let mut pair = [w, b];
            adam.update(&mut pair, &[grads[wn].clone(), grads[bn].clone()])?;
            [w, b] = pair;
        }
    }
    let mut out = base.clone();
    out.forward_calls = std::sync::Arc::new(std::sync::atomic::AtomicU64::new(0));
    *out.params.get_mut("head.w").unwrap() = w;
    *out.params.get_mut("head.b").unwrap() = b;
    out.provenance.method = format!("{}+dfr", base.provenance.method);
    Ok(out)
}

/// Per-sample sampling weights proportional to the gradient norm of the
/// cross-entropy with respect to the final layer, normalized to sum to one.
/// For a linear head the gradient norm is closed-form: `|p - onehot(y)| *
/// sqrt(|features|^2 + 1)`, so no per-sample tape is needed.
pub fn psg_weights(model: &TrainedModel, ds: &GroupedDataset) -> Result<Vec<f64>> {
    if ds.samples.is_empty() {
        return Err(Error::Empty("psg weights on empty dataset".into()));
    }
    let batch = Batch::from_dataset(ds)?;
    let feats = models::features(model, &batch)?;
    let w = model.params.get("head.w").ok_or_else(|| Error::Shape("missing head.w".into()))?;
    let b = model.params.get("head.b").ok_or_else(|| Error::Shape("missing head.b".into()))?;
    let mut out = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let f = feats.row(i);
        let mut logits = [b.at(0, 0), b.at(0, 1)];
        for (r, &fv) in f.iter().enumerate() {
            logits[0] += fv * w.at(r, 0);
            logits[1] += fv * w.at(r, 1);
        }
        let p = funcs::softmax(&logits)?;
        let mut resid = [p[0], p[1]];
        resid[s.y as usize] -= 1.0;
        let resid_norm = (resid[0] * resid[0] + resid[1] * resid[1]).sqrt();
        let feat_norm_sq: f64 = f.iter().map(|v| v * v).sum();
        out.push(resid_norm * (feat_norm_sq + 1.0).sqrt());
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "all per-sample gradient norms are zero; nothing to reweight".into(),
        ));
    }
    for w in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// Draw a same-size dataset from `ds` with replacement, with per-sample
/// probability proportional to `weights`, deterministically per seed.
pub fn resample(ds: &GroupedDataset, weights: &[f64], seed: u64) -> Result<GroupedDataset> {
    if weights.len() != ds.samples.len() {
        return Err(Error::Shape(format!(
            "resample weight count {} does not match dataset size {}",
            weights.len(),
            ds.samples.len()
        )));
    }
    let idx = resample_indices(weights, ds.samples.len(), seed)?;
    Ok(GroupedDataset {
        split: ds.split,
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
    })
}

/// Draw `n` indices with probability proportional to `weights` (with
/// replacement), deterministically per seed.
fn resample_indices(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::Empty("resampling from empty weights".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let mut r = rng::substream(seed, "psg/resample");
    let mut out = Vec::with_capacity(n);
    use rand::Rng;
    for _ in 0..n {
        let u: f64 = r.gen_range(0.0..total);
        let idx = cdf.partition_point(|&c| c <= u).min(weights.len() - 1);
        out.push(idx);
    }
    Ok(out)
}

/// Two-pass per-sample-gradient training: fit an ERM reference, weight each
/// training sample by its final-layer gradient norm under that reference,
/// resample the training set by those weights, and retrain from scratch.
pub fn train_psg(spec: &ModelSpec, ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    let ref_cfg = TrainConfig { seed: cfg.seed ^ 0x9512_af03, ..cfg.clone() };
    let reference = train_erm(spec, ds, &ref_cfg)?;
    let weights = psg_weights(&reference, ds)?;
    let resampled = resample(ds, &weights, cfg.seed)?;
    let mut model = train_erm(spec, &resampled, cfg)?;
    model.provenance.method = "psg".into();
    Ok(model)
}

/// Dispatch a debiasing method by name.
pub fn train_debias(
    method: &DebiasMethod,
    spec: &ModelSpec,
    train: &GroupedDataset,
    heldout: &GroupedDataset,
    data_cfg: &DataConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    match method {
        DebiasMethod::Erm => train_erm(spec, train, cfg),
        DebiasMethod::PoeBiasFeature => {
            train_poe(spec, train, data_cfg, cfg, BiasExpert::HypothesisOnly)
        }
        DebiasMethod::PoeWeak => train_poe(spec, train, data_cfg, cfg, BiasExpert::WeakLearner),
        DebiasMethod::SigmaDamp { tau } => train_sigma_damp(spec, train, cfg, *tau),
        DebiasMethod::Dfr => {
            let base = train_erm(spec, train, cfg)?;
            dfr_retrain(&base, heldout, cfg)
        }
        DebiasMethod::Psg => train_psg(spec, train, cfg),
    }
}
