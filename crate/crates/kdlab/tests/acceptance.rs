//! End-to-end acceptance suite. Each test prints exactly one PASS/FAIL line
//! for its numbered criterion; run with `--nocapture` to see them:
//!
//! 1.  Reverse-mode gradients match finite differences on random small graphs.
//! 2.  Core algebraic identities hold at tight tolerances.
//! 3.  The spurious-correlation premise: ERM scores high ID but has a large
//!     worst-group gap.
//! 4.  Debiasing (both PoE variants and DFR) shrinks that gap before any
//!     distillation.
//! 5.  Distillation loses performance and robustness in the expected
//!     direction across the scale matrix.
//! 6.  The DA and IKD remedies recover robustness relative to vanilla
//!     distillation; Init is reported.
//! 7.  Agreement and venn diagnostics behave, and some student beats its
//!     teacher on OOD samples somewhere in the matrix.
//! 8.  Teacher-student representation similarity (CKA) is higher in
//!     distribution than out of distribution.
//! 9.  Edge attribution scores are first-order complete on a small attention
//!     model.
//! 10. Runs are deterministic: byte-identical reports on rerun and after
//!     single-cell cache invalidation.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use kdlab::analysis::{self, agreement, linear_cka, venn_counts, EapGradient};
use kdlab::data::{self, DataConfig, Split, SplitSizes, TokSpurConfig, VecSpurConfig};
use kdlab::debias::{
    dfr_retrain, poe_combine, train_erm, train_poe, BiasExpert, DebiasMethod, TrainConfig,
};
use kdlab::distill::kd_loss;
use kdlab::funcs;
use kdlab::harness::{
    emit_reports, run_matrix, AnalysisSection, DistillSection, ExperimentConfig, MatrixConfig,
    MatrixReport, Remedy, ReportFormat, RunOptions, TrainSection, SCHEMA_VERSION,
};
use kdlab::models::{self, build_forward, Batch, Family, InputShape, ModelSpec, ScaleTag};
use kdlab::{rng, Tape, Tensor};

fn criterion(n: u32, desc: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {n}: {desc} — {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- criterion 1

/// Loss of a model on a fixed batch, as a pure function of its parameters.
fn batch_loss(spec: &ModelSpec, params: &models::Params, batch: &Batch, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let built = build_forward(&mut tape, spec, params, batch, None).unwrap();
    let loss = tape.ce_loss(built.logits, labels).unwrap();
    tape.value(loss).at(0, 0)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients over every parameter coordinate of a freshly seeded model.
/// Parameters are jittered away from their init so no pre-activation sits
/// exactly on a relu kink, where finite differences are undefined.
fn gradcheck(spec: &ModelSpec, batch: &Batch, labels: &[usize], seed: u64) -> f64 {
    let mut model = models::init_params(spec, seed);
    let mut jitter = rng::substream(seed, "acceptance/jitter");
    for t in &mut model.params.tensors {
        for v in t.data_mut() {
            *v += jitter.gen_range(-0.05..0.05);
        }
    }
    let mut tape = Tape::new();
    let built = build_forward(&mut tape, spec, &model.params, batch, None).unwrap();
    let loss = tape.ce_loss(built.logits, labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, &pid) in built.param_ids.iter().enumerate() {
        let analytic = grads[pid].as_ref().expect("parameter gets a gradient");
        let (rows, cols) = model.params.tensors[p].shape();
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = model.params.clone();
                let v = plus.tensors[p].at(r, c);
                plus.tensors[p].set(r, c, v + h);
                let mut minus = model.params.clone();
                minus.tensors[p].set(r, c, v - h);
                let fd = (batch_loss(spec, &plus, batch, labels)
                    - batch_loss(spec, &minus, batch, labels))
                    / (2.0 * h);
                let a = analytic.at(r, c);
                let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

#[test]
fn c01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut r = rng::substream(2024, "acceptance/gradcheck");
    let mut worst: f64 = 0.0;
    let mut graphs = 0usize;
    for g in 0..20u64 {
        // A small random MLP, capped at 64 parameters.
        let (dim, hidden, layers) = loop {
            let dim = r.gen_range(2..4usize);
            let hidden = r.gen_range(2..6usize);
            let layers = r.gen_range(1..3usize);
            let probe = ModelSpec {
                family: Family::Mlp,
                scale: ScaleTag::T,
                layers,
                hidden,
                heads: 0,
                input: InputShape { input_dim: dim, seq_len: 0 },
                num_classes: 2,
            };
            if probe.param_count() <= 64 {
                break (dim, hidden, layers);
            }
        };
        let spec = ModelSpec {
            family: Family::Mlp,
            scale: ScaleTag::T,
            layers,
            hidden,
            heads: 0,
            input: InputShape { input_dim: dim, seq_len: 0 },
            num_classes: 2,
        };
        let x: Vec<f64> = (0..4 * dim).map(|_| r.gen_range(-2.0..2.0)).collect();
        let batch = Batch::Vec(Tensor::new(4, dim, x).unwrap());
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..2usize)).collect();
        worst = worst.max(gradcheck(&spec, &batch, &labels, 900 + g));
        graphs += 1;

        // The smallest attention instance: 64 parameters exactly at width 2.
        let spec = ModelSpec {
            family: Family::Attn,
            scale: ScaleTag::T,
            layers: 1,
            hidden: 2,
            heads: if g % 2 == 0 { 1 } else { 2 },
            input: InputShape { input_dim: 2, seq_len: 2 },
            num_classes: 2,
        };
        assert!(spec.param_count() <= 64, "attn graph too large");
        let toks: Vec<Vec<usize>> = (0..4).map(|_| vec![r.gen_range(0..2), r.gen_range(0..2)]).collect();
        let batch = Batch::Tok(toks);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..2usize)).collect();
        worst = worst.max(gradcheck(&spec, &batch, &labels, 700 + g));
        graphs += 1;
    }
    let elapsed = start.elapsed();
    criterion(
        1,
        "reverse-mode gradients match central finite differences",
        worst < 1e-4 && elapsed.as_secs() < 10,
        format!("{graphs} graphs, max rel err {worst:.3e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn c02_algebraic_invariants() {
    let start = Instant::now();
    let mut r = rng::substream(2025, "acceptance/algebra");
    let mut ok = true;
    let mut notes = Vec::new();

    for _ in 0..200 {
        let logits: Vec<f64> = (0..3).map(|_| r.gen_range(-8.0..8.0)).collect();
        let other: Vec<f64> = (0..3).map(|_| r.gen_range(-8.0..8.0)).collect();
        let shift = r.gen_range(-5.0..5.0);

        // Softmax: normalized, positive, shift-invariant.
        let p = funcs::softmax(&logits).unwrap();
        ok &= (p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|&v| v > 0.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = funcs::softmax(&shifted).unwrap();
        ok &= p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12);

        // KL: nonnegative, zero at equality.
        let pq = funcs::softmax(&other).unwrap();
        ok &= funcs::kl_div(&p, &pq).unwrap() >= -1e-12;
        ok &= funcs::kl_div(&p, &p).unwrap().abs() < 1e-12;

        // PoE: a uniform bias expert is the identity.
        let flat = vec![shift; 3];
        let neutral = poe_combine(&logits, &flat).unwrap();
        ok &= neutral
            .iter()
            .zip(&funcs::log_softmax(&logits))
            .all(|(a, b)| (a - b).abs() < 1e-10);

        // kd_loss endpoints: alpha=1 is plain CE; alpha=0 with an identical
        // teacher vanishes.
        let label = r.gen_range(0..3usize);
        let tau = r.gen_range(0.5..4.0);
        let mut tape = Tape::new();
        let s = tape.param(Tensor::new(1, 3, logits.clone()).unwrap()).unwrap();
        let t = Tensor::new(1, 3, other.clone()).unwrap();
        let l1 = kd_loss(&mut tape, s, &t, &[label], 1.0, tau).unwrap();
        ok &= (tape.value(l1).at(0, 0) - funcs::cross_entropy(&logits, label).unwrap()).abs() < 1e-10;
        let mut tape = Tape::new();
        let s = tape.param(Tensor::new(1, 3, logits.clone()).unwrap()).unwrap();
        let t = Tensor::new(1, 3, logits.clone()).unwrap();
        let l0 = kd_loss(&mut tape, s, &t, &[label], 0.0, tau).unwrap();
        ok &= tape.value(l0).at(0, 0).abs() < 1e-10;
    }
    notes.push("softmax/kl/poe/kd over 200 random draws".to_string());

    // Linear CKA: self = 1, rotation and scaling are invisible.
    let x = Tensor::new(6, 2, (0..12).map(|_| r.gen_range(-3.0..3.0f64)).collect()).unwrap();
    ok &= (linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9;
    let theta: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let mut rotated = Tensor::zeros(6, 2);
    let mut scaled = Tensor::zeros(6, 2);
    for row in 0..6 {
        let (a, b) = (x.at(row, 0), x.at(row, 1));
        rotated.set(row, 0, a * theta.cos() - b * theta.sin());
        rotated.set(row, 1, a * theta.sin() + b * theta.cos());
        scaled.set(row, 0, -2.5 * a);
        scaled.set(row, 1, -2.5 * b);
    }
    ok &= (linear_cka(&x, &rotated).unwrap() - 1.0).abs() < 1e-9;
    ok &= (linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-9;
    notes.push("cka self/rotation/scaling".to_string());

    let elapsed = start.elapsed();
    criterion(
        2,
        "algebraic identities hold at stated tolerances",
        ok && elapsed.as_secs() < 5,
        format!("{}; {:.2}s", notes.join(", "), elapsed.as_secs_f64()),
    );
}

// ------------------------------------------------------------ criteria 3 & 4

const PREMISE_SEEDS: [u64; 3] = [17, 23, 42];

fn premise_data_config() -> VecSpurConfig {
    VecSpurConfig {
        dim: 8,
        rho_train: 0.95,
        rho_ood: 0.1,
        core_margin: 1.0,
        spur_margin: 2.0,
        noise_sd: 0.6,
        sizes: SplitSizes {
            train: 2048,
            id_test: 512,
            ood_test: 512,
            transfer_test: 256,
            heldout: 512,
        },
    }
}

fn premise_train_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 20, batch_size: 64, learning_rate: 3e-3, seed }
}

struct PremiseRuns {
    /// (id accuracy, spurious gap) per seed for ERM.
    erm: Vec<(f64, f64)>,
    /// Spurious gap per seed for each debiasing method.
    poe_biasfeature: Vec<f64>,
    poe_weak: Vec<f64>,
    dfr: Vec<f64>,
}

fn premise_runs() -> &'static PremiseRuns {
    static RUNS: OnceLock<PremiseRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let data_cfg = premise_data_config();
        let spec = models::spec_for(Family::Mlp, ScaleTag::M, InputShape { input_dim: 8, seq_len: 0 });
        let mut out = PremiseRuns {
            erm: Vec::new(),
            poe_biasfeature: Vec::new(),
            poe_weak: Vec::new(),
            dfr: Vec::new(),
        };
        for seed in PREMISE_SEEDS {
            let bundle = data::gen_vecspur(&data_cfg, seed).unwrap();
            let train = bundle.split(Split::Train);
            let cfg = premise_train_config(seed);

            let erm = train_erm(&spec, train, &cfg).unwrap();
            let m = analysis::evaluate(&erm, &bundle).unwrap();
            out.erm.push((m.id_accuracy, m.spurious_gap));

            let dc = DataConfig::Vecspur(data_cfg.clone());
            let poe = train_poe(&spec, train, &dc, &cfg, BiasExpert::HypothesisOnly).unwrap();
            out.poe_biasfeature.push(analysis::evaluate(&poe, &bundle).unwrap().spurious_gap);
            let poe = train_poe(&spec, train, &dc, &cfg, BiasExpert::WeakLearner).unwrap();
            out.poe_weak.push(analysis::evaluate(&poe, &bundle).unwrap().spurious_gap);

            let dfr = dfr_retrain(&erm, bundle.split(Split::Heldout), &cfg).unwrap();
            out.dfr.push(analysis::evaluate(&dfr, &bundle).unwrap().spurious_gap);
        }
        out
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c03_erm_relies_on_the_spurious_feature() {
    let start = Instant::now();
    let runs = premise_runs();
    let id = mean(&runs.erm.iter().map(|(i, _)| *i).collect::<Vec<_>>());
    let gap = mean(&runs.erm.iter().map(|(_, g)| *g).collect::<Vec<_>>());
    criterion(
        3,
        "ERM: high ID accuracy with a worst-group gap of at least 10 points",
        id >= 0.90 && gap >= 0.10,
        format!("mean ID {id:.4}, mean gap {gap:.4} over seeds {PREMISE_SEEDS:?}, {:.0}s", start.elapsed().as_secs_f64()),
    );
}

#[test]
fn c04_debiasing_shrinks_the_gap_before_distillation() {
    let start = Instant::now();
    let runs = premise_runs();
    let erm_gap = mean(&runs.erm.iter().map(|(_, g)| *g).collect::<Vec<_>>());
    let pb = mean(&runs.poe_biasfeature);
    let pw = mean(&runs.poe_weak);
    let df = mean(&runs.dfr);
    let pass = erm_gap - pb >= 0.05 && erm_gap - pw >= 0.05 && erm_gap - df >= 0.05;
    criterion(
        4,
        "PoE (both experts) and DFR each cut the spurious gap by 5+ points",
        pass,
        format!(
            "gaps: erm {erm_gap:.4}, poe_biasfeature {pb:.4}, poe_weak {pw:.4}, dfr {df:.4}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

// --------------------------------------------------------- criteria 5, 6, 7, 8

fn matrix_config() -> ExperimentConfig {
    let mut data_cfg = premise_data_config();
    data_cfg.sizes.train = 1024;
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        data: DataConfig::Vecspur(data_cfg),
        matrix: MatrixConfig {
            family: Family::Mlp,
            scales: vec![ScaleTag::T, ScaleTag::M, ScaleTag::L],
            methods: vec![DebiasMethod::Erm, DebiasMethod::PoeWeak],
            remedies: vec![Remedy::None, Remedy::Da, Remedy::Ikd, Remedy::Init],
            seeds: PREMISE_SEEDS.to_vec(),
        },
        train: TrainSection { epochs: 15, batch_size: 64, learning_rate: 3e-3 },
        distill: DistillSection { alpha: 0.5, tau: 2.0 },
        analysis: AnalysisSection { cka_probe: 128, eap_probe: 16, density_bins: 10 },
        out_dir: None,
    }
}

fn matrix_report() -> &'static MatrixReport {
    static REPORT: OnceLock<MatrixReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = matrix_config();
        let opts = RunOptions { jobs: 4, seed_offset: 0, cell_filter: None };
        let report = run_matrix(&cfg, dir.path(), &opts).unwrap();
        assert!(
            report.failures.is_empty(),
            "matrix cells failed: {:?}",
            report.failures.iter().map(|f| (&f.cell, &f.error)).collect::<Vec<_>>()
        );
        report
    })
}

#[test]
fn c05_distillation_loses_performance_and_robustness() {
    // Known red on the ID clause, kept honest. The OOD drop and the
    // T-student gap increase reproduce robustly, but the mean ID drop sits
    // at 0 +/- 0.005 in every configuration tried (alpha 0..0.5, tau 1..4,
    // both model families, and a capacity-bound token task): the ID split is
    // shortcut-aligned, so every scale saturates on it, and students of
    // debiased teachers revert to the shortcut during distillation — which
    // *raises* their ID accuracy above their teacher's and cancels the
    // small positive drop from the plain-ERM cells. At this scale the ID
    // clause is structurally opposed by the very effect the other clauses
    // measure.
    let start = Instant::now();
    let report = matrix_report();
    let vanilla: Vec<_> = report
        .cells
        .iter()
        .filter(|c| c.cell.remedy == Remedy::None && c.cell.teacher > c.cell.student)
        .collect();
    let id_drop = mean(
        &vanilla
            .iter()
            .map(|c| c.teacher_metrics.id_accuracy - c.distilled_metrics.id_accuracy)
            .collect::<Vec<_>>(),
    );
    let ood_drop = mean(&vanilla.iter().map(|c| c.c1).collect::<Vec<_>>());
    let t_column: Vec<f64> = vanilla
        .iter()
        .filter(|c| c.cell.student == ScaleTag::T)
        .map(|c| c.distilled_metrics.spurious_gap - c.teacher_metrics.spurious_gap)
        .collect();
    let t_gap_diff = mean(&t_column);
    criterion(
        5,
        "vanilla distillation drops ID and OOD scores; the smallest students lose the most robustness",
        id_drop > 0.0 && ood_drop > 0.0 && t_gap_diff > 0.0,
        format!(
            "{} cells: mean ID drop {id_drop:.4}, mean OOD drop {ood_drop:.4}, T-student gap increase {t_gap_diff:.4}; {:.0}s",
            vanilla.len(),
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c06_remedies_recover_robustness() {
    // Known red on the IKD clause, kept honest. Group-balanced distillation
    // (DA) beats vanilla by a wide margin in every run. Iterative chains,
    // however, differ from vanilla only on L->T cells (the only strict pairs
    // with an intermediate scale), and there |ikd - vanilla| <= 0.004 with a
    // coin-flip sign across alpha {0, 0.05, 0.15, 0.3, 0.5} and tau
    // {1, 2, 4} — usually slightly worse. The chain's premise is that each
    // hop closes a smaller capacity gap and therefore mimics with higher
    // fidelity; at this scale fidelity is near-perfect in one hop, so the
    // extra hop only adds one more chance for the student to revert to the
    // shortcut. A direct head-to-head on a capacity-bound token task
    // (L teacher, T student, M intermediate) showed the same tie.
    let start = Instant::now();
    let report = matrix_report();
    let gap_diff = |remedy: Remedy| -> f64 {
        mean(
            &report
                .cells
                .iter()
                .filter(|c| c.cell.remedy == remedy && c.cell.teacher > c.cell.student)
                .map(|c| c.distilled_metrics.spurious_gap - c.teacher_metrics.spurious_gap)
                .collect::<Vec<_>>(),
        )
    };
    let vanilla = gap_diff(Remedy::None);
    let da = gap_diff(Remedy::Da);
    let ikd = gap_diff(Remedy::Ikd);
    let init = gap_diff(Remedy::Init);
    criterion(
        6,
        "DA and IKD lose no more robustness than vanilla distillation (Init reported)",
        da <= vanilla && ikd <= vanilla,
        format!(
            "gap increase: vanilla {vanilla:.4}, da {da:.4}, ikd {ikd:.4}, init {init:.4} (reported only); {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c07_agreement_and_venn_diagnostics() {
    let start = Instant::now();
    let report = matrix_report();

    // Exact self-agreement and quadrant partition on a fresh small model.
    let data_cfg = premise_data_config();
    let bundle = data::gen_vecspur(&data_cfg, 17).unwrap();
    let split = bundle.split(Split::IdTest);
    let spec = models::spec_for(Family::Mlp, ScaleTag::T, InputShape { input_dim: 8, seq_len: 0 });
    let a = models::init_params(&spec, 5);
    let b = models::init_params(&spec, 6);
    let self_agree = agreement(&a, &a, split).unwrap();
    let venn = venn_counts(&a, &b, split).unwrap();
    let partitions = venn.total() == split.samples.len();

    // Somewhere in the matrix a distilled student solves OOD samples its
    // teacher misses.
    let student_only = report.cells.iter().any(|c| c.venn_ood.only_b_correct > 0);
    let ood_size = match &matrix_config().data {
        DataConfig::Vecspur(c) => c.sizes.ood_test,
        DataConfig::Tokspur(c) => c.sizes.ood_test,
    };
    let all_partition = report.cells.iter().all(|c| c.venn_ood.total() == ood_size);
    criterion(
        7,
        "agreement(m,m) = 1, venn quadrants partition, and some student-only OOD wins exist",
        self_agree == 1.0 && partitions && student_only && all_partition,
        format!(
            "self-agreement {self_agree}, partition {partitions}, student-only cells {}; {:.0}s",
            report.cells.iter().filter(|c| c.venn_ood.only_b_correct > 0).count(),
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c08_cka_is_higher_in_distribution() {
    let start = Instant::now();
    let report = matrix_report();
    let grid_mean = |g: &Vec<Vec<f64>>| {
        let vals: Vec<f64> = g.iter().flatten().copied().collect();
        mean(&vals)
    };
    let id = mean(&report.cells.iter().map(|c| grid_mean(&c.cka_teacher_distilled)).collect::<Vec<_>>());
    let ood = mean(
        &report
            .cells
            .iter()
            .map(|c| grid_mean(&c.cka_teacher_distilled_ood))
            .collect::<Vec<_>>(),
    );
    criterion(
        8,
        "teacher-student CKA on id data exceeds CKA on ood data",
        id > ood,
        format!("mean CKA id {id:.4} vs ood {ood:.4} over {} cells; {:.0}s", report.cells.len(), start.elapsed().as_secs_f64()),
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn c09_eap_first_order_completeness() {
    let start = Instant::now();
    // Known red, kept honest. With readout gradients the predicted delta
    // equals grad . delta(residual) identically — the residual stream is the
    // exact sum of the embedding, head, and feed-forward contributions — so
    // the entire per-probe error is the final LayerNorm's linearization
    // error. A full token-swap corruption moves the residual by 20-80% of
    // its norm once the marker embedding has trained, which floors the
    // median relative error around 0.26-0.35 across seeds, learning rates
    // (3e-4..3e-3), epochs (1..16), and sequence lengths (8..48); full
    // node gradients are worse (roughly 2.5x overshoot from double-counting
    // head effects that are also mediated through the feed-forward block).
    // The config below is the friendliest honest regime: a longer sequence
    // dilutes the single swapped marker in the mean-pool and a low learning
    // rate keeps activation deltas near initialization.
    let data_cfg = TokSpurConfig {
        vocab: 12,
        seq_len: 24,
        rho_train: 0.9,
        rho_ood: 0.1,
        bias_token: 0,
        neutral_token: 1,
        core_a: 2,
        core_b: 3,
        sizes: SplitSizes {
            train: 1024,
            id_test: 256,
            ood_test: 256,
            transfer_test: 128,
            heldout: 128,
        },
    };
    let bundle = data::gen_tokspur(&data_cfg, 17).unwrap();
    let spec = models::spec_for(
        Family::Attn,
        ScaleTag::T,
        InputShape { input_dim: 12, seq_len: 24 },
    );
    let cfg = TrainConfig { epochs: 8, batch_size: 32, learning_rate: 3e-4, seed: 17 };
    let model = train_erm(&spec, bundle.split(Split::Train), &cfg).unwrap();
    let result = analysis::eap_scores(
        &model,
        bundle.split(Split::IdTest),
        &DataConfig::Tokspur(data_cfg),
        64,
        17,
        EapGradient::Readout,
    )
    .unwrap();
    criterion(
        9,
        "summed EAP scores match the patched logit-margin change within 25% (median over 64 probes)",
        result.median_rel_err <= 0.25,
        format!(
            "median rel err {:.4}, mean actual delta {:.4}, mean predicted {:.4}; {:.0}s",
            result.median_rel_err,
            result.mean_margin_delta,
            result.mean_predicted_delta,
            start.elapsed().as_secs_f64()
        ),
    );
}

// --------------------------------------------------------------- criterion 10

#[test]
fn c10_determinism_and_cache_isolation() {
    let start = Instant::now();
    let mut cfg = matrix_config();
    cfg.matrix.scales = vec![ScaleTag::T, ScaleTag::S];
    cfg.matrix.methods = vec![DebiasMethod::Erm];
    cfg.matrix.remedies = vec![Remedy::None];
    cfg.matrix.seeds = vec![17, 23];
    cfg.train.epochs = 4;
    match &mut cfg.data {
        DataConfig::Vecspur(c) => c.sizes.train = 256,
        DataConfig::Tokspur(c) => c.sizes.train = 256,
    }

    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    let opts = RunOptions::default();

    let read_reports = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let out = store.join(tag);
        let report = run_matrix(&cfg, store, &opts).unwrap();
        assert!(report.failures.is_empty());
        let paths = emit_reports(&report, &out, ReportFormat::Csv).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = paths
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };

    let first = read_reports("r1");
    let second = read_reports("r2");
    let rerun_identical = first == second;

    // Invalidate exactly one cached cell and rerun: the recomputed cell must
    // reproduce the identical report bytes.
    let cells_dir = store.join("cells");
    let victim = std::fs::read_dir(&cells_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .expect("cached cell exists");
    std::fs::remove_file(&victim).unwrap();
    let third = read_reports("r3");
    let recompute_identical = first == third;

    criterion(
        10,
        "reports are byte-identical across reruns and after single-cell cache invalidation",
        rerun_identical && recompute_identical,
        format!(
            "{} report files compared; rerun {rerun_identical}, post-invalidation {recompute_identical}; {:.0}s",
            first.len(),
            start.elapsed().as_secs_f64()
        ),
    );
}
