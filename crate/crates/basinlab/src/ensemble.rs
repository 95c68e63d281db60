//! Ensemble construction under matched epoch budgets: deep, stochastic
//! weight ensembling (SWE), constrained, distilled, and the deep+distillation
//! control, plus prediction averaging.
//!
//! Every builder records the epochs it consumed so cost parity between
//! families is checkable, and every member run is deterministic given the
//! master seed and member index.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ParamVector};
use crate::tensor::{self, Scalar, Tensor};
use crate::train::{
    self, BatchLoss, Checkpoint, CrossEntropyLoss, EpochRow, RunSegment, ScheduleKind,
    TrainConfig,
};

/// Ensemble construction family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Deep,
    Swe,
    Constrained,
    Distilled,
    DeepDistilled,
    Permuted,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Deep => "deep",
            Family::Swe => "swe",
            Family::Constrained => "constrained",
            Family::Distilled => "distilled",
            Family::DeepDistilled => "deep_distilled",
            Family::Permuted => "permuted",
        };
        f.write_str(s)
    }
}

/// Construction parameters shared by the bundle families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleParams {
    pub members: usize,
    pub train_epochs: usize,
    pub master_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor_lr: Option<f64>,
}

/// A set of trained members plus construction metadata and budget ledger.
#[derive(Debug, Clone)]
pub struct EnsembleBundle {
    pub family: Family,
    pub members: Vec<Checkpoint>,
    pub params: BundleParams,
    /// Training epochs actually consumed building this bundle.
    pub epochs_consumed: usize,
    /// True when a member diverged and the bundle is incomplete.
    pub partial: bool,
    /// Construction notes (e.g. which member is the plain-CE reference).
    pub notes: Vec<String>,
    /// Per-member training logs, parallel to `members` where available.
    pub member_rows: Vec<Vec<EpochRow>>,
}

impl EnsembleBundle {
    pub fn spec(&self) -> &ModelSpec {
        self.members[0].spec()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_params(&self) -> Vec<&ParamVector> {
        self.members.iter().map(|m| &m.params).collect()
    }

    /// Replace the member parameters (used by permutation alignment); the
    /// family tag records the transformation.
    pub fn with_member_params(&self, family: Family, params: Vec<ParamVector>) -> Result<Self> {
        if params.len() != self.members.len() {
            return Err(Error::Usage("member count mismatch".into()));
        }
        let mut out = self.clone();
        out.family = family;
        for (m, p) in out.members.iter_mut().zip(params) {
            m.params = p;
        }
        Ok(out)
    }
}

/// Hyperparameters of the distillation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight on the hard-label term; 1 bypasses the teacher entirely.
    pub beta: f64,
    /// Softening temperature (>= 1).
    pub tau: f64,
    pub split_epoch: usize,
    pub distill_epochs: usize,
}

fn check_beta_tau(beta: f64, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta {beta} outside [0, 1]")));
    }
    if tau < 1.0 {
        return Err(Error::Domain(format!("tau {tau} must be >= 1")));
    }
    Ok(())
}

/// Distillation objective on an autodiff graph:
/// `(1-beta) * tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))
///  + beta * cross_entropy(student, labels)`,
/// averaged over the batch. With `beta = 1` the teacher term is skipped
/// entirely and no teacher logits are needed.
pub fn distill_loss_node(
    graph: &mut Graph<f32>,
    student_logits: NodeId,
    teacher_logits: Option<&Tensor<f32>>,
    labels: &[usize],
    beta: f64,
    tau: f64,
) -> Result<NodeId> {
    check_beta_tau(beta, tau)?;
    let ce = graph.cross_entropy(student_logits, labels)?;
    if beta == 1.0 {
        return graph.scale(ce, 1.0);
    }
    let teacher_logits = teacher_logits
        .ok_or_else(|| Error::Usage("teacher logits required when beta < 1".into()))?;
    let (rows, _) = teacher_logits.dims2()?;
    // KL(p || softmax(s/tau)) = sum p ln p - sum p log_softmax(s/tau);
    // the first term is constant in the student and added as a scalar.
    let teacher_soft = tensor::softmax(&tensor::scale(teacher_logits, 1.0 / tau))?;
    let p_log_p: f64 = teacher_soft
        .data()
        .iter()
        .map(|&p| {
            let p = p as f64;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / rows as f64;
    let scaled_student = graph.scale(student_logits, 1.0 / tau)?;
    let log_q = graph.log_softmax(scaled_student)?;
    let p_const = graph.constant(teacher_soft)?;
    let cross = graph.mul(p_const, log_q)?;
    let sum = graph.sum_all(cross)?;
    let mean_cross = graph.scale(sum, -1.0 / rows as f64)?; // -E[sum p log q]
    let entropy_term = graph.constant(Tensor::scalar(p_log_p as f32))?;
    let kl = graph.add(mean_cross, entropy_term)?;
    let soft = graph.scale(kl, (1.0 - beta) * tau * tau)?;
    let hard = graph.scale(ce, beta)?;
    graph.add(soft, hard)
}

/// Value-level distillation objective (same computation as the graph form).
pub fn distill_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    tau: f64,
) -> Result<f64> {
    check_beta_tau(beta, tau)?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::Dimension(format!(
            "student {:?} vs teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let ce = tensor::cross_entropy(student_logits, labels)?;
    if beta == 1.0 {
        return Ok(ce);
    }
    let (rows, _) = student_logits.dims2()?;
    let teacher_soft = tensor::softmax(&tensor::scale(teacher_logits, 1.0 / tau))?;
    let log_q = tensor::log_softmax(&tensor::scale(student_logits, 1.0 / tau))?;
    let mut kl = 0.0;
    for (p, lq) in teacher_soft.data().iter().zip(log_q.data()) {
        let p = p.to_f64();
        if p > 0.0 {
            kl += p * (p.ln() - lq.to_f64());
        }
    }
    kl /= rows as f64;
    Ok((1.0 - beta) * tau * tau * kl + beta * ce)
}

/// Teacher-matching batch loss for student training.
struct DistillBatchLoss<'a> {
    spec: &'a ModelSpec,
    teacher: &'a ParamVector,
    beta: f64,
    tau: f64,
}

impl BatchLoss for DistillBatchLoss<'_> {
    fn loss_node(
        &self,
        graph: &mut Graph<f32>,
        logits: NodeId,
        inputs: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<NodeId> {
        let teacher_logits = if self.beta == 1.0 {
            None
        } else {
            Some(models::forward(self.spec, self.teacher, inputs)?)
        };
        distill_loss_node(graph, logits, teacher_logits.as_ref(), labels, self.beta, self.tau)
    }
}

// ---- builders -----------------------------------------------------------------

/// M fully independent runs: fresh initialization and fresh batch streams
/// per member. Budget: `M * T` epochs.
pub fn build_deep(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    members: usize,
) -> Result<EnsembleBundle> {
    base.validate()?;
    if members == 0 {
        return Err(Error::Usage("ensemble needs at least one member".into()));
    }
    let mut checkpoints = Vec::with_capacity(members);
    let mut rows = Vec::with_capacity(members);
    let mut partial = false;
    let mut notes = Vec::new();
    for k in 0..members {
        let cfg = base.with_member(k as u64);
        match train::train(spec, train_set, test_set, &cfg, &[]) {
            Ok(traj) => {
                checkpoints.push(traj.final_checkpoint().clone());
                rows.push(traj.rows);
            }
            Err(e) => {
                partial = true;
                notes.push(format!("member {k} diverged: {e}"));
            }
        }
    }
    if checkpoints.is_empty() {
        return Err(Error::Diverged("every member diverged".into()));
    }
    Ok(EnsembleBundle {
        family: Family::Deep,
        epochs_consumed: checkpoints.len() * base.epochs,
        members: checkpoints,
        params: BundleParams {
            members,
            train_epochs: base.epochs,
            master_seed: base.master_seed,
            split_epoch: None,
            beta: None,
            tau: None,
            distill_epochs: None,
            floor_lr: None,
        },
        partial,
        notes,
        member_rows: rows,
    })
}

/// One long run: warmup-cosine decays to `floor_lr` within the first cycle
/// of `T` epochs, then constant-rate exploration with a snapshot every
/// further `T` epochs until `M` members exist. Budget: `M * T` epochs.
pub fn build_swe(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    members: usize,
    floor_lr: f64,
) -> Result<EnsembleBundle> {
    base.validate()?;
    if members == 0 {
        return Err(Error::Usage("ensemble needs at least one member".into()));
    }
    if floor_lr <= 0.0 {
        return Err(Error::Usage("floor learning rate must be > 0".into()));
    }
    let cycle = base.epochs;
    let mut cfg = base.with_member(0);
    cfg.epochs = members * cycle;
    cfg.schedule = ScheduleKind::WarmupCosineFloor { floor: floor_lr };
    cfg.schedule_epochs = Some(cycle);
    let snapshots: Vec<usize> = (1..=members).map(|k| k * cycle).collect();
    let traj = train::train(spec, train_set, test_set, &cfg, &snapshots)?;
    let checkpoints: Vec<Checkpoint> = snapshots
        .iter()
        .map(|&e| {
            traj.at_epoch(e)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("missing snapshot at epoch {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleBundle {
        family: Family::Swe,
        members: checkpoints,
        params: BundleParams {
            members,
            train_epochs: cycle,
            master_seed: base.master_seed,
            split_epoch: None,
            beta: None,
            tau: None,
            distill_epochs: None,
            floor_lr: Some(floor_lr),
        },
        epochs_consumed: members * cycle,
        partial: false,
        notes: Vec::new(),
        member_rows: vec![traj.rows],
    })
}

/// Shared prefix to the split epoch `t`, then M member continuations with
/// distinct batch streams. Budget: `t + M * (T - t)` epochs.
pub fn build_constrained(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    members: usize,
    split_epoch: usize,
) -> Result<EnsembleBundle> {
    let checkpoints = train::split_train(spec, train_set, test_set, base, split_epoch, members)?;
    Ok(EnsembleBundle {
        family: Family::Constrained,
        members: checkpoints,
        params: BundleParams {
            members,
            train_epochs: base.epochs,
            master_seed: base.master_seed,
            split_epoch: Some(split_epoch),
            beta: None,
            tau: None,
            distill_epochs: None,
            floor_lr: None,
        },
        epochs_consumed: split_epoch + members * (base.epochs - split_epoch),
        partial: false,
        notes: Vec::new(),
        member_rows: Vec::new(),
    })
}

/// Replay the recorded run of `ckpt` from scratch up to `epoch`, bit-exactly,
/// returning the parameters and the momentum buffer at that point.
fn replay_to_epoch(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    ckpt: &Checkpoint,
    epoch: usize,
) -> Result<(ParamVector, Vec<f32>)> {
    if epoch > ckpt.config.epochs {
        return Err(Error::Usage(format!(
            "cannot replay to epoch {epoch}, run had {}",
            ckpt.config.epochs
        )));
    }
    let mut cfg = ckpt.config.clone();
    cfg.eval_every = 0;
    let init = models::init_params(spec, cfg.init_seed())?;
    let out = train::run_segment(RunSegment {
        spec,
        train_set,
        test_set,
        config: &cfg,
        start_epoch: 0,
        end_epoch: epoch,
        init,
        velocity: None,
        loss: &CrossEntropyLoss,
        snapshot_epochs: &[],
    })?;
    Ok((out.trajectory.final_checkpoint().params.clone(), out.velocity))
}

/// Re-discover each deep-ensemble member inside the reference basin: all
/// students start from the reference run's split point and minimize the
/// distillation objective towards their own out-of-basin teacher. Member 0
/// is the plain cross-entropy continuation of the reference run. Budget:
/// `t + M * distill_epochs` on top of the already-built teachers.
pub fn build_distilled(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    teachers: &EnsembleBundle,
    distill: &DistillConfig,
) -> Result<EnsembleBundle> {
    base.validate()?;
    check_beta_tau(distill.beta, distill.tau)?;
    if teachers.is_empty() {
        return Err(Error::Usage("teacher bundle is empty".into()));
    }
    let members = teachers.len();
    let t = distill.split_epoch;

    // the stability point of the reference (first) teacher's run
    let (split_params, split_velocity) =
        replay_to_epoch(spec, train_set, test_set, &teachers.members[0], t)?;

    let mut checkpoints = Vec::with_capacity(members);
    let mut notes = vec!["member 0 is the plain cross-entropy reference continuation".into()];
    let mut partial = false;
    for k in 0..members {
        let member_cfg = base.with_member(k as u64);
        let loss: Box<dyn BatchLoss> = if k == 0 {
            Box::new(CrossEntropyLoss)
        } else {
            Box::new(DistillBatchLoss {
                spec,
                teacher: &teachers.members[k].params,
                beta: distill.beta,
                tau: distill.tau,
            })
        };
        let velocity = base
            .carry_split_momentum
            .then(|| split_velocity.clone());
        let result = train::run_segment(RunSegment {
            spec,
            train_set,
            test_set,
            config: &member_cfg,
            start_epoch: t,
            end_epoch: t + distill.distill_epochs,
            init: split_params.clone(),
            velocity,
            loss: loss.as_ref(),
            snapshot_epochs: &[],
        });
        match result {
            Ok(out) => checkpoints.push(out.trajectory.final_checkpoint().clone()),
            Err(d) => {
                partial = true;
                notes.push(format!("member {k} diverged: {}", d.message));
            }
        }
    }
    if checkpoints.is_empty() {
        return Err(Error::Diverged("every distilled member diverged".into()));
    }
    Ok(EnsembleBundle {
        family: Family::Distilled,
        epochs_consumed: t + checkpoints.len() * distill.distill_epochs,
        members: checkpoints,
        params: BundleParams {
            members,
            train_epochs: base.epochs,
            master_seed: base.master_seed,
            split_epoch: Some(t),
            beta: Some(distill.beta),
            tau: Some(distill.tau),
            distill_epochs: Some(distill.distill_epochs),
            floor_lr: None,
        },
        partial,
        notes,
        member_rows: Vec::new(),
    })
}

/// Multi-basin control for the distillation effect: each student keeps its
/// own teacher's independent initialization (replayed to the split epoch)
/// rather than sharing the reference basin. With `beta = 1` this reproduces
/// the plain deep ensemble exactly.
pub fn build_deep_distilled(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    teachers: &EnsembleBundle,
    distill: &DistillConfig,
) -> Result<EnsembleBundle> {
    base.validate()?;
    check_beta_tau(distill.beta, distill.tau)?;
    if teachers.is_empty() {
        return Err(Error::Usage("teacher bundle is empty".into()));
    }
    let members = teachers.len();
    let t = distill.split_epoch;

    let mut checkpoints = Vec::with_capacity(members);
    let mut notes = Vec::new();
    let mut partial = false;
    for k in 0..members {
        let (own_split, own_velocity) =
            replay_to_epoch(spec, train_set, test_set, &teachers.members[k], t)?;
        let member_cfg = base.with_member(k as u64);
        let loss = DistillBatchLoss {
            spec,
            teacher: &teachers.members[k].params,
            beta: distill.beta,
            tau: distill.tau,
        };
        let velocity = base.carry_split_momentum.then_some(own_velocity);
        let result = train::run_segment(RunSegment {
            spec,
            train_set,
            test_set,
            config: &member_cfg,
            start_epoch: t,
            end_epoch: t + distill.distill_epochs,
            init: own_split,
            velocity,
            loss: &loss,
            snapshot_epochs: &[],
        });
        match result {
            Ok(out) => checkpoints.push(out.trajectory.final_checkpoint().clone()),
            Err(d) => {
                partial = true;
                notes.push(format!("member {k} diverged: {}", d.message));
            }
        }
    }
    if checkpoints.is_empty() {
        return Err(Error::Diverged("every member diverged".into()));
    }
    Ok(EnsembleBundle {
        family: Family::DeepDistilled,
        epochs_consumed: members * t + checkpoints.len() * distill.distill_epochs,
        members: checkpoints,
        params: BundleParams {
            members,
            train_epochs: base.epochs,
            master_seed: base.master_seed,
            split_epoch: Some(t),
            beta: Some(distill.beta),
            tau: Some(distill.tau),
            distill_epochs: Some(distill.distill_epochs),
            floor_lr: None,
        },
        partial,
        notes,
        member_rows: Vec::new(),
    })
}

// ---- prediction --------------------------------------------------------------

/// Mean of the members' softmax outputs; each row is a distribution.
pub fn ensemble_predict(bundle: &EnsembleBundle, inputs: &Tensor<f32>) -> Result<Tensor<f64>> {
    if bundle.is_empty() {
        return Err(Error::Usage("cannot predict with an empty bundle".into()));
    }
    let spec = bundle.spec();
    let (n, _) = inputs.dims2()?;
    let k = spec.num_classes();
    let mut acc = vec![0.0f64; n * k];
    for member in &bundle.members {
        let probs = models::class_probabilities(spec, &member.params, inputs)?;
        for (a, p) in acc.iter_mut().zip(probs.data()) {
            *a += p;
        }
    }
    let m = bundle.len() as f64;
    Tensor::new(vec![n, k], acc.into_iter().map(|v| v / m).collect())
}

/// Accuracy and log-loss of the averaged prediction plus per-member stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleEvaluation {
    pub member_accuracies: Vec<f64>,
    pub member_nlls: Vec<f64>,
    pub mean_member_accuracy: f64,
    pub mean_member_nll: f64,
    pub ensemble_accuracy: f64,
    pub ensemble_nll: f64,
}

pub fn evaluate_bundle(bundle: &EnsembleBundle, eval_set: &Dataset) -> Result<BundleEvaluation> {
    let spec = bundle.spec();
    let inputs = eval_set.inputs();
    let labels = eval_set.labels();
    let mut member_accuracies = Vec::with_capacity(bundle.len());
    let mut member_nlls = Vec::with_capacity(bundle.len());
    for member in &bundle.members {
        let eval = models::evaluate(spec, &member.params, inputs, labels)?;
        member_accuracies.push(eval.accuracy);
        member_nlls.push(eval.mean_nll);
    }
    let probs = ensemble_predict(bundle, inputs)?;
    let (n, k) = probs.dims2()?;
    let mut correct = 0usize;
    let mut nll = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
        nll -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    Ok(BundleEvaluation {
        mean_member_accuracy: mean(&member_accuracies),
        mean_member_nll: mean(&member_nlls),
        member_accuracies,
        member_nlls,
        ensemble_accuracy: correct as f64 / n as f64,
        ensemble_nll: nll / n as f64,
    })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
