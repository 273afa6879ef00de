//! Self-distillation: a frozen pre-trained teacher supervises a freshly
//! initialized student of the same architecture.

use crate::augment::AugmentConfig;
use crate::encoder::{EncoderDims, EncoderParams, OnlineHead, ParamSet, TargetHead};
use crate::error::{Error, Result};
use crate::pretrain::{
    contrastive_loss, online_vs_fixed, sample_pair, Corpus, LossRow, PretrainConfig,
};
use crate::rng::Rng;
use crate::tensor::{AdamState, Checkpoint, Tape, Tensor, Var};

/// Squared distance between row-normalized student and teacher outputs,
/// averaged over rows. Identical to the pre-training objective.
pub fn distill_loss(tape: &mut Tape, z_student: Var, h_teacher: Var) -> Result<Var> {
    contrastive_loss(tape, z_student, h_teacher)
}

/// Frozen teacher (encoder + one-layer head) and the trainable student.
#[derive(Clone, Debug)]
pub struct DistillState {
    teacher: EncoderParams,
    teacher_head: TargetHead,
    teacher_hash: u64,
    pub student: EncoderParams,
    pub student_head: OnlineHead,
    pub adam: AdamState,
    pub step: usize,
}

impl DistillState {
    /// Student weights are drawn fresh from `rng`, with the teacher's shapes.
    pub fn new(
        teacher: EncoderParams,
        teacher_head: TargetHead,
        cfg: &PretrainConfig,
        rng: &mut Rng,
    ) -> Self {
        let dims = EncoderDims {
            d_proj: teacher_head.projector.weight.cols(),
            ..teacher.dims()
        };
        let student = EncoderParams::init(&dims, rng);
        let student_head = OnlineHead::init(&dims, cfg.head_nonlinearity, rng);
        let adam = AdamState::new(
            student.tensors().into_iter().chain(student_head.tensors()),
            cfg.adam,
        );
        let teacher_hash = teacher_hash(&teacher, &teacher_head);
        Self {
            teacher,
            teacher_head,
            teacher_hash,
            student,
            student_head,
            adam,
            step: 0,
        }
    }

    pub fn teacher(&self) -> &EncoderParams {
        &self.teacher
    }

    pub fn teacher_head(&self) -> &TargetHead {
        &self.teacher_head
    }

    /// Content hash of the teacher taken at construction.
    pub fn initial_teacher_hash(&self) -> u64 {
        self.teacher_hash
    }

    pub fn current_teacher_hash(&self) -> u64 {
        teacher_hash(&self.teacher, &self.teacher_head)
    }
}

pub fn teacher_hash(teacher: &EncoderParams, head: &TargetHead) -> u64 {
    let mut all = teacher.tensors();
    all.extend(head.tensors());
    Tensor::content_hash(&all)
}

/// Teacher and projector stored under `teacher.*` / `teacher_head.*`.
pub fn teacher_checkpoint(teacher: &EncoderParams, head: &TargetHead) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    teacher.write_checkpoint("teacher", &mut ckpt);
    head.write_checkpoint("teacher_head", &mut ckpt);
    ckpt
}

/// Reads a teacher written by [`teacher_checkpoint`] with the given shapes.
pub fn load_teacher(ckpt: &Checkpoint, dims: &EncoderDims) -> Result<(EncoderParams, TargetHead)> {
    let mut teacher = EncoderParams::zeros(dims);
    teacher.read_checkpoint("teacher", ckpt)?;
    let mut head = TargetHead {
        projector: crate::encoder::Affine::zeros(dims.d_out, dims.d_proj),
    };
    head.read_checkpoint("teacher_head", ckpt)?;
    Ok((teacher, head))
}

/// One student update: the teacher encodes one view, the student the other.
pub fn distill_step(
    state: &mut DistillState,
    corpus: &Corpus,
    aug: &AugmentConfig,
    cfg: &PretrainConfig,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (teacher_side, student_side) =
        sample_pair(corpus, aug, cfg.batch_nodes, cfg.batch_graphs, rng)?;
    let pair = (student_side, teacher_side);
    let mut tape = Tape::new();
    let (loss, vars) = online_vs_fixed(
        &mut tape,
        &state.student,
        &state.student_head,
        &state.teacher,
        &state.teacher_head,
        &pair,
        false,
    )?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
    let mut params = state.student.tensors_mut();
    params.extend(state.student_head.tensors_mut());
    state.adam.step(&mut params, grads, lr)?;
    state.step += 1;
    Ok(value)
}

/// Mean student-teacher loss over `pairs` fresh view pairs, without updates.
pub fn evaluate_distill(
    state: &DistillState,
    corpus: &Corpus,
    aug: &AugmentConfig,
    cfg: &PretrainConfig,
    pairs: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::Contract(
            "evaluate_distill needs at least one pair".into(),
        ));
    }
    let mut total = 0.0;
    for _ in 0..pairs {
        let (teacher_side, student_side) =
            sample_pair(corpus, aug, cfg.batch_nodes, cfg.batch_graphs, rng)?;
        let mut tape = Tape::new();
        let (loss, _) = online_vs_fixed(
            &mut tape,
            &state.student,
            &state.student_head,
            &state.teacher,
            &state.teacher_head,
            &(student_side, teacher_side),
            false,
        )?;
        total += tape.value(loss).item();
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub state: DistillState,
    pub trajectory: Vec<LossRow>,
}

impl DistillOutcome {
    pub fn student(&self) -> &EncoderParams {
        &self.state.student
    }
}

/// Trains a fresh student against the frozen teacher with the pre-training
/// schedule (epochs, steps, learning-rate decay).
pub fn distill(
    teacher: EncoderParams,
    teacher_head: TargetHead,
    corpus: &Corpus,
    aug: &AugmentConfig,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if corpus.feature_dim() != teacher.dims().d_in {
        return Err(Error::Integrity(format!(
            "teacher expects {} features, data has {}",
            teacher.dims().d_in,
            corpus.feature_dim()
        )));
    }
    if teacher_head.projector.weight.rows() != teacher.dims().d_out {
        return Err(Error::Integrity(
            "teacher head does not match teacher output width".into(),
        ));
    }
    let mut state = DistillState::new(teacher, teacher_head, cfg, rng);
    let mut trajectory = Vec::with_capacity(cfg.total_steps());
    let mut lr = cfg.lr;
    for _ in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let loss = distill_step(&mut state, corpus, aug, cfg, lr, rng)?;
            trajectory.push(LossRow {
                step: state.step,
                loss,
                embed_std: None,
            });
        }
        lr *= cfg.lr_decay;
    }
    if state.current_teacher_hash() != state.initial_teacher_hash() {
        return Err(Error::Integrity(
            "teacher parameters changed during distillation".into(),
        ));
    }
    Ok(DistillOutcome { state, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_sbm, SbmConfig};
    use crate::rng::seeded;

    fn setup() -> (Corpus, EncoderParams, TargetHead) {
        let g = synth_sbm(&SbmConfig {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let dims = EncoderDims {
            d_in: g.feature_dim(),
            d_hidden: 8,
            d_out: 8,
            d_proj: 4,
        };
        let mut rng = seeded(9, 0);
        let teacher = EncoderParams::init(&dims, &mut rng);
        let head = TargetHead::init(&dims, &mut rng);
        (Corpus::Nodes(g.without_labels()), teacher, head)
    }

    #[test]
    fn scale_invariant_and_symmetric() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]);
        let b = Tensor::from_rows(&[[0.2, -1.0], [4.0, 4.0]]);
        let mut t = Tape::new();
        let (va, vb, v5) = (
            t.constant(a.clone()),
            t.constant(b),
            t.constant(a.map(|x| 5.0 * x)),
        );
        let ab = distill_loss(&mut t, va, vb).unwrap();
        let ba = distill_loss(&mut t, vb, va).unwrap();
        let same = distill_loss(&mut t, v5, va).unwrap();
        assert_eq!(t.value(ab).item(), t.value(ba).item());
        assert!(t.value(same).item().abs() < 1e-12);
    }

    #[test]
    fn zero_steps_keep_fresh_student() {
        let (corpus, teacher, head) = setup();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = distill(
            teacher.clone(),
            head.clone(),
            &corpus,
            &AugmentConfig::default(),
            &cfg,
            &mut seeded(1, 0),
        )
        .unwrap();
        let fresh = DistillState::new(teacher, head, &cfg, &mut seeded(1, 0));
        assert_eq!(out.student(), &fresh.student);
    }

    #[test]
    fn teacher_is_untouched() {
        let (corpus, teacher, head) = setup();
        let before = teacher_hash(&teacher, &head);
        let cfg = PretrainConfig {
            epochs: 1,
            steps_per_epoch: 5,
            ..Default::default()
        };
        let out = distill(
            teacher,
            head,
            &corpus,
            &AugmentConfig::default(),
            &cfg,
            &mut seeded(1, 0),
        )
        .unwrap();
        assert_eq!(out.state.current_teacher_hash(), before);
        assert_eq!(out.student().dims(), out.state.teacher().dims());
    }

    #[test]
    fn mismatched_teacher_is_integrity_error() {
        let (corpus, _, _) = setup();
        let dims = EncoderDims {
            d_in: 3,
            d_hidden: 4,
            d_out: 4,
            d_proj: 2,
        };
        let mut rng = seeded(0, 0);
        let t = EncoderParams::init(&dims, &mut rng);
        let h = TargetHead::init(&dims, &mut rng);
        let err = distill(
            t,
            h,
            &corpus,
            &AugmentConfig::default(),
            &PretrainConfig::default(),
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn teacher_checkpoint_round_trip() {
        let (_, teacher, head) = setup();
        let ckpt = teacher_checkpoint(&teacher, &head);
        let dims = EncoderDims {
            d_proj: 4,
            ..teacher.dims()
        };
        let (t2, h2) = load_teacher(&ckpt, &dims).unwrap();
        assert_eq!((t2, h2), (teacher, head));
        let wrong = EncoderDims {
            d_hidden: 9,
            ..dims
        };
        assert!(matches!(
            load_teacher(&ckpt, &wrong),
            Err(Error::Integrity(_))
        ));
    }
}
