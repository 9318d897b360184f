//! Knowledge distillation: the blended hard/soft loss, single-step
//! teacher-to-student transfer, iterative chains down the scale ladder, and
//! warm-starting a student from the leading sub-blocks of its teacher.

use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::debias::{train_loop, TrainConfig};
use crate::funcs;
use crate::graph::NodeId;
use crate::models::{self, Batch, ModelSpec, Provenance, Role, ScaleTag, TrainedModel};
use crate::{Error, Result, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the hard-label cross-entropy; `1 - alpha` weights the soft
    /// teacher-matching term.
    pub alpha: f64,
    /// Softmax temperature applied to both teacher and student logits in the
    /// soft term.
    pub tau: f64,
    pub train: TrainConfig,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig("tau must be positive and finite".into()));
        }
        Ok(())
    }
}

/// How the student's parameters start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Fresh,
    FromTeacher,
}

/// Blended distillation loss on the tape:
/// `alpha * CE(student, labels) + (1 - alpha) * tau^2 * KL(teacher_soft ||
/// student_soft)`, where both soft distributions are tempered by `tau`. The
/// `tau^2` factor keeps the soft-term gradient magnitude comparable across
/// temperatures.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: NodeId,
    teacher_logits: &Tensor,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument("tau must be positive and finite".into()));
    }
    let sv = tape.value(student_logits);
    if teacher_logits.shape() != sv.shape() {
        return Err(Error::Shape("teacher/student logit shape mismatch".into()));
    }
    let n = teacher_logits.rows();
    let c = teacher_logits.cols();
    let mut target = Tensor::zeros(n, c);
    for r in 0..n {
        let p = funcs::softmax_temp(teacher_logits.row(r), tau)?;
        for (j, v) in p.into_iter().enumerate() {
            target.set(r, j, v);
        }
    }
    let ce = tape.ce_loss(student_logits, labels)?;
    let tempered = tape.scale(student_logits, 1.0 / tau)?;
    let kl = tape.kl_to_target(tempered, target)?;
    let hard = tape.scale(ce, alpha)?;
    let soft = tape.scale(kl, (1.0 - alpha) * tau * tau)?;
    tape.add(hard, soft)
}

/// Train a student of `student_spec` to match a frozen `teacher` on `ds`.
pub fn distill(
    student_spec: &ModelSpec,
    teacher: &TrainedModel,
    ds: &GroupedDataset,
    cfg: &DistillConfig,
    init: StudentInit,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if student_spec.family != teacher.spec.family {
        return Err(Error::InvalidArgument("student and teacher families differ".into()));
    }
    if student_spec.scale > teacher.spec.scale {
        return Err(Error::InvalidArgument("student scale exceeds teacher scale".into()));
    }
    // Teacher is frozen: score the whole training set once.
    let batch = Batch::from_dataset(ds)?;
    let teacher_logits = models::forward(teacher, &batch)?;

    let mut student = match init {
        StudentInit::Fresh => models::init_params(student_spec, cfg.train.seed),
        StudentInit::FromTeacher => init_from_teacher(student_spec, teacher, cfg.train.seed)?,
    };
    train_loop(&mut student, ds, &cfg.train, |tape, built, idx| {
        let labels: Vec<usize> = idx.iter().map(|&i| ds.samples[i].y as usize).collect();
        let mut t = Tensor::zeros(idx.len(), teacher_logits.cols());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..teacher_logits.cols() {
                t.set(r, c, teacher_logits.at(i, c));
            }
        }
        kd_loss(tape, built.logits, &t, &labels, cfg.alpha, cfg.tau)
    })?;
    student.role = Role::Distilled;
    student.provenance = Provenance {
        method: match init {
            StudentInit::Fresh => format!("kd<-{}", teacher.provenance.method),
            StudentInit::FromTeacher => format!("kd_init<-{}", teacher.provenance.method),
        },
        teacher_scale: Some(teacher.spec.scale),
        seed: cfg.train.seed,
        config_hash: String::new(),
        chain: vec![teacher.spec.scale],
    };
    Ok(student)
}

/// Warm-start a student by copying the leading sub-block of every teacher
/// parameter with the same name; anything the slice cannot cover keeps its
/// fresh init. With equal shapes this is an exact weight copy.
pub fn init_from_teacher(
    student_spec: &ModelSpec,
    teacher: &TrainedModel,
    seed: u64,
) -> Result<TrainedModel> {
    if student_spec.family != teacher.spec.family {
        return Err(Error::InvalidArgument("student and teacher families differ".into()));
    }
    if student_spec.layers > teacher.spec.layers || student_spec.hidden > teacher.spec.hidden {
        return Err(Error::InvalidArgument("student does not fit inside teacher".into()));
    }
    let mut student = models::init_params(student_spec, seed);
    let same_scale = student_spec.scale == teacher.spec.scale;
    for (name, tensor) in student.params.names.clone().iter().zip(student.params.tensors.iter_mut())
    {
        // A cross-scale student keeps its randomly initialized classifier
        // head: the teacher's head reads a wider feature space, so its slice
        // is not a meaningful classifier.
        if !same_scale && name.starts_with("head.") {
            continue;
        }
        let Some(src) = teacher.params.get(name) else { continue };
        let (rows, cols) = tensor.shape();
        if src.rows() < rows || src.cols() < cols {
            return Err(Error::Shape(format!("teacher parameter {name} smaller than student")));
        }
        for r in 0..rows {
            for c in 0..cols {
                tensor.set(r, c, src.at(r, c));
            }
        }
    }
    Ok(student)
}

/// Iterative distillation: walk `path` (strictly descending scales, starting
/// below the teacher), distilling each rung from the previous model. A
/// one-element path is exactly a single `distill` call.
pub fn ikd_chain(
    path: &[ScaleTag],
    teacher: &TrainedModel,
    ds: &GroupedDataset,
    cfg: &DistillConfig,
    init: StudentInit,
) -> Result<TrainedModel> {
    if path.is_empty() {
        return Err(Error::Empty("iterative distillation with empty path".into()));
    }
    let mut prev_scale = teacher.spec.scale;
    for &s in path {
        if s >= prev_scale {
            return Err(Error::InvalidArgument(
                "iterative distillation path must be strictly descending".into(),
            ));
        }
        prev_scale = s;
    }
    let mut current = teacher.clone();
    let mut chain = vec![teacher.spec.scale];
    for &scale in path {
        let spec = models::spec_for(teacher.spec.family, scale, teacher.spec.input);
        current = distill(&spec, &current, ds, cfg, init)?;
        chain.push(scale);
    }
    current.provenance.method = format!("ikd<-{}", teacher.provenance.method);
    current.provenance.teacher_scale = Some(teacher.spec.scale);
    current.provenance.chain = chain;
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_vecspur, Split, SplitSizes, VecSpurConfig};
    use crate::debias::train_erm;
    use crate::models::{spec_for, Family, InputShape};
    use crate::rng;

    fn vec_cfg() -> VecSpurConfig {
        VecSpurConfig {
            dim: 6,
            rho_train: 0.9,
            rho_ood: 0.1,
            core_margin: 1.0,
            spur_margin: 1.5,
            noise_sd: 0.4,
            sizes: SplitSizes { train: 256, id_test: 128, ood_test: 128, transfer_test: 64, heldout: 64 },
        }
    }

    fn shape() -> InputShape {
        InputShape { input_dim: 6, seq_len: 0 }
    }

    fn dcfg(seed: u64) -> DistillConfig {
        DistillConfig {
            alpha: 0.5,
            tau: 2.0,
            train: TrainConfig { epochs: 20, batch_size: 32, learning_rate: 3e-3, seed },
        }
    }

    #[test]
    fn kd_loss_matches_direct_formula() {
        let mut r = rng::stream(3);
        let student = Tensor::new(4, 2, (0..8).map(|_| rng::normal(&mut r, 0.0, 2.0)).collect()).unwrap();
        let teacher = Tensor::new(4, 2, (0..8).map(|_| rng::normal(&mut r, 0.0, 2.0)).collect()).unwrap();
        let labels = [0usize, 1, 1, 0];
        let (alpha, tau) = (0.3, 2.5);

        let mut tape = Tape::new();
        let s = tape.param(student.clone()).unwrap();
        let loss = kd_loss(&mut tape, s, &teacher, &labels, alpha, tau).unwrap();
        let got = tape.value(loss).at(0, 0);

        let mut ce = 0.0;
        let mut kl = 0.0;
        for i in 0..4 {
            ce += funcs::cross_entropy(student.row(i), labels[i]).unwrap();
            let tp = funcs::softmax_temp(teacher.row(i), tau).unwrap();
            let sp = funcs::softmax_temp(student.row(i), tau).unwrap();
            kl += funcs::kl_div(&tp, &sp).unwrap();
        }
        let want = alpha * ce / 4.0 + (1.0 - alpha) * tau * tau * kl / 4.0;
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn kd_loss_alpha_one_is_plain_cross_entropy() {
        let student = Tensor::new(2, 2, vec![0.3, -0.7, 1.2, 0.4]).unwrap();
        let teacher = Tensor::new(2, 2, vec![5.0, -5.0, -5.0, 5.0]).unwrap();
        let labels = [1usize, 0];
        let mut tape = Tape::new();
        let s = tape.param(student.clone()).unwrap();
        let loss = kd_loss(&mut tape, s, &teacher, &labels, 1.0, 2.0).unwrap();
        let want = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| funcs::cross_entropy(student.row(i), y).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(loss).at(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_gradient_matches_finite_differences() {
        let mut r = rng::stream(7);
        let base = Tensor::new(3, 2, (0..6).map(|_| rng::normal(&mut r, 0.0, 1.0)).collect()).unwrap();
        let teacher = Tensor::new(3, 2, (0..6).map(|_| rng::normal(&mut r, 0.0, 1.0)).collect()).unwrap();
        let labels = [1usize, 0, 1];
        let eval = |t: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let s = tape.param(t.clone()).unwrap();
            let l = kd_loss(&mut tape, s, &teacher, &labels, 0.4, 1.7).unwrap();
            tape.value(l).at(0, 0)
        };
        let mut tape = Tape::new();
        let s = tape.param(base.clone()).unwrap();
        let loss = kd_loss(&mut tape, s, &teacher, &labels, 0.4, 1.7).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads[s].as_ref().unwrap();
        let h = 1e-4;
        for i in 0..3 {
            for j in 0..2 {
                let mut up = base.clone();
                up.set(i, j, base.at(i, j) + h);
                let mut dn = base.clone();
                dn.set(i, j, base.at(i, j) - h);
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                let an = g.at(i, j);
                assert!(
                    (fd - an).abs() / an.abs().max(1.0) < 1e-4,
                    "({i},{j}): fd {fd}, analytic {an}"
                );
            }
        }
    }

    #[test]
    fn distill_transfers_teacher_behavior() {
        let bundle = gen_vecspur(&vec_cfg(), 21).unwrap();
        let train = bundle.split(Split::Train);
        let teacher_spec = spec_for(Family::Mlp, ScaleTag::M, shape());
        let tcfg = TrainConfig { epochs: 30, batch_size: 32, learning_rate: 3e-3, seed: 11 };
        let teacher = train_erm(&teacher_spec, train, &tcfg).unwrap();
        let teacher_hash = teacher.params.byte_hash();

        let student_spec = spec_for(Family::Mlp, ScaleTag::S, shape());
        let student = distill(&student_spec, &teacher, train, &dcfg(12), StudentInit::Fresh).unwrap();
        assert_eq!(teacher.params.byte_hash(), teacher_hash, "teacher must stay frozen");
        assert_eq!(student.role, Role::Distilled);
        assert_eq!(student.provenance.teacher_scale, Some(ScaleTag::M));

        // Student should broadly agree with the teacher on held-out data.
        let id = bundle.split(Split::IdTest);
        let b = Batch::from_dataset(id).unwrap();
        let tl = models::forward(&teacher, &b).unwrap();
        let sl = models::forward(&student, &b).unwrap();
        let agree = (0..id.samples.len())
            .filter(|&i| (tl.at(i, 1) > tl.at(i, 0)) == (sl.at(i, 1) > sl.at(i, 0)))
            .count();
        assert!(agree as f64 / id.samples.len() as f64 > 0.85);
    }

    #[test]
    fn single_step_chain_is_bitwise_identical_to_distill() {
        let bundle = gen_vecspur(&vec_cfg(), 22).unwrap();
        let train = bundle.split(Split::Train);
        let teacher_spec = spec_for(Family::Mlp, ScaleTag::M, shape());
        let tcfg = TrainConfig { epochs: 10, batch_size: 32, learning_rate: 3e-3, seed: 13 };
        let teacher = train_erm(&teacher_spec, train, &tcfg).unwrap();

        let cfg = dcfg(14);
        let direct = distill(&spec_for(Family::Mlp, ScaleTag::S, shape()), &teacher, train, &cfg, StudentInit::Fresh)
            .unwrap();
        let chained = ikd_chain(&[ScaleTag::S], &teacher, train, &cfg, StudentInit::Fresh).unwrap();
        assert_eq!(direct.params.byte_hash(), chained.params.byte_hash());
        assert_eq!(chained.provenance.chain, vec![ScaleTag::M, ScaleTag::S]);
    }

    #[test]
    fn two_step_chain_walks_the_ladder() {
        let bundle = gen_vecspur(&vec_cfg(), 23).unwrap();
        let train = bundle.split(Split::Train);
        let teacher_spec = spec_for(Family::Mlp, ScaleTag::M, shape());
        let tcfg = TrainConfig { epochs: 10, batch_size: 32, learning_rate: 3e-3, seed: 15 };
        let teacher = train_erm(&teacher_spec, train, &tcfg).unwrap();
        let mut cfg = dcfg(16);
        cfg.train.epochs = 10;
        let m = ikd_chain(&[ScaleTag::S, ScaleTag::T], &teacher, train, &cfg, StudentInit::Fresh).unwrap();
        assert_eq!(m.spec.scale, ScaleTag::T);
        assert_eq!(m.provenance.chain, vec![ScaleTag::M, ScaleTag::S, ScaleTag::T]);
        assert!(m.provenance.method.starts_with("ikd<-"));
    }

    #[test]
    fn init_from_teacher_copies_leading_blocks() {
        let teacher_spec = spec_for(Family::Attn, ScaleTag::S, InputShape { input_dim: 32, seq_len: 8 });
        let teacher = models::init_params(&teacher_spec, 31);
        let student_spec = spec_for(Family::Attn, ScaleTag::T, InputShape { input_dim: 32, seq_len: 8 });
        let student = init_from_teacher(&student_spec, &teacher, 32).unwrap();
        let fresh = models::init_params(&student_spec, 32);
        for (name, st) in student.params.names.iter().zip(&student.params.tensors) {
            if name.starts_with("head.") {
                // The cross-scale head keeps the fresh random init.
                assert_eq!(st, fresh.params.get(name).unwrap(), "{name}");
                continue;
            }
            let Some(tt) = teacher.params.get(name) else { continue };
            for r in 0..st.rows() {
                for c in 0..st.cols() {
                    assert_eq!(st.at(r, c), tt.at(r, c), "{name}[{r},{c}]");
                }
            }
        }
        // Same shapes means an exact copy.
        let twin = init_from_teacher(&teacher_spec, &teacher, 33).unwrap();
        assert_eq!(twin.params.byte_hash(), teacher.params.byte_hash());
    }

    #[test]
    fn invalid_inputs_rejected() {
        let bundle = gen_vecspur(&vec_cfg(), 24).unwrap();
        let train = bundle.split(Split::Train);
        let teacher = models::init_params(&spec_for(Family::Mlp, ScaleTag::S, shape()), 1);
        let big = spec_for(Family::Mlp, ScaleTag::M, shape());
        assert!(distill(&big, &teacher, train, &dcfg(1), StudentInit::Fresh).is_err());

        let mut bad = dcfg(1);
        bad.alpha = 1.5;
        let t_spec = spec_for(Family::Mlp, ScaleTag::T, shape());
        assert!(distill(&t_spec, &teacher, train, &bad, StudentInit::Fresh).is_err());
        let mut bad = dcfg(1);
        bad.tau = 0.0;
        assert!(distill(&t_spec, &teacher, train, &bad, StudentInit::Fresh).is_err());

        assert!(ikd_chain(&[], &teacher, train, &dcfg(1), StudentInit::Fresh).is_err());
        assert!(ikd_chain(&[ScaleTag::T, ScaleTag::T], &teacher, train, &dcfg(1), StudentInit::Fresh).is_err());
        assert!(ikd_chain(&[ScaleTag::M], &teacher, train, &dcfg(1), StudentInit::Fresh).is_err());
    }
}
