//! SGD-with-momentum training, learning-rate schedules, checkpoint
//! persistence, and the stability-point split used by constrained ensembles.
//!
//! Everything here is deterministic: (spec, dataset, config) fully determine
//! every checkpoint bitwise within one build. Runs that hit a non-finite
//! loss abort with a diagnostic instead of clipping silently, since
//! connectivity metrics on diverged runs are meaningless.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::data::{AugmentConfig, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ParamVector};
use crate::rng::{self, tag};
use crate::tensor::{Dtype, Scalar, Tensor};

/// Learning-rate schedule family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup to the peak, then cosine decay to zero.
    WarmupCosine,
    /// As above, but the decay is clamped at `floor` and held there.
    WarmupCosineFloor { floor: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::WarmupCosine
    }
}

fn default_batch_size() -> usize {
    128
}
fn default_peak_lr() -> f64 {
    0.1
}
fn default_warmup_frac() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_eval_every() -> usize {
    1
}

/// Full description of one training run. The member index keeps shuffle and
/// augmentation streams of ensemble members disjoint while sharing a master
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    /// Epoch count the schedule is shaped for; defaults to `epochs`. A run
    /// longer than this horizon continues at the schedule's terminal value,
    /// which is how constant-rate exploration after decay is expressed.
    #[serde(default)]
    pub schedule_epochs: Option<usize>,
    pub master_seed: u64,
    #[serde(default)]
    pub member_index: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Carry the momentum buffer across a split point instead of resetting.
    #[serde(default)]
    pub carry_split_momentum: bool,
    /// Evaluate test accuracy every this many epochs for the metrics log
    /// (0 = only when a snapshot is taken).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, master_seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch_size(),
            peak_lr: default_peak_lr(),
            warmup_frac: default_warmup_frac(),
            momentum: default_momentum(),
            schedule: ScheduleKind::default(),
            schedule_epochs: None,
            master_seed,
            member_index: 0,
            augment: AugmentConfig::default(),
            carry_split_momentum: false,
            eval_every: default_eval_every(),
        }
    }

    pub fn with_member(&self, member_index: u64) -> Self {
        TrainConfig { member_index, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Usage("warmup fraction must be in [0, 1)".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Usage("peak learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Usage("momentum must be in [0, 1)".into()));
        }
        if let ScheduleKind::WarmupCosineFloor { floor } = self.schedule {
            if floor <= 0.0 {
                return Err(Error::Usage("schedule floor must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        rng::mix3(self.master_seed, self.member_index, tag::INIT)
    }

    pub fn shuffle_seed(&self) -> u64 {
        rng::mix3(self.master_seed, self.member_index, tag::SHUFFLE)
    }

    pub fn augment_seed(&self) -> u64 {
        rng::mix3(self.master_seed, self.member_index, tag::AUGMENT)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Learning rate at a global step: linear 0 -> peak over the warmup steps,
/// then cosine from peak towards zero over the schedule horizon. The floor
/// variant clamps the decay and holds the floor for all later steps.
pub fn lr_at(config: &TrainConfig, global_step: usize, steps_per_epoch: usize) -> f64 {
    let horizon = config.schedule_epochs.unwrap_or(config.epochs) * steps_per_epoch;
    let warmup = (config.warmup_frac * horizon as f64).floor() as usize;
    if global_step < warmup {
        return config.peak_lr * global_step as f64 / warmup as f64;
    }
    let endpoint = match config.schedule {
        ScheduleKind::WarmupCosine => 0.0,
        ScheduleKind::WarmupCosineFloor { floor } => floor,
    };
    if global_step >= horizon {
        return endpoint;
    }
    let progress = (global_step - warmup) as f64 / (horizon - warmup) as f64;
    let cosine = config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cosine.max(endpoint)
}

/// Train/test metrics captured with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub train_loss: f64,
    pub test_acc: f64,
}

/// Parameters plus provenance at one point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub epoch: usize,
    pub config: TrainConfig,
    pub metrics: MetricSnapshot,
}

impl Checkpoint {
    pub fn spec(&self) -> &ModelSpec {
        self.params.spec()
    }
}

/// One row of the per-run metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
}

/// Output of a run: the requested snapshots (always including the final
/// epoch) and the per-epoch metrics log.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Checkpoint>,
    pub rows: Vec<EpochRow>,
    pub epochs_trained: usize,
}

impl Trajectory {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.snapshots.last().expect("final snapshot always recorded")
    }

    pub fn at_epoch(&self, epoch: usize) -> Option<&Checkpoint> {
        self.snapshots.iter().find(|c| c.epoch == epoch)
    }
}

/// A diverged run: the error plus the last finite state for diagnostics.
#[derive(Debug)]
pub struct DivergedRun {
    pub message: String,
    pub last_checkpoint: Option<Checkpoint>,
    pub epoch: usize,
}

impl From<DivergedRun> for Error {
    fn from(d: DivergedRun) -> Self {
        Error::Diverged(format!("{} at epoch {}", d.message, d.epoch))
    }
}

/// Loss attached on top of the logits of each training batch.
pub trait BatchLoss: Sync {
    fn loss_node(
        &self,
        graph: &mut Graph<f32>,
        logits: crate::autodiff::NodeId,
        inputs: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<crate::autodiff::NodeId>;
}

/// Plain cross-entropy against the hard labels.
pub struct CrossEntropyLoss;

impl BatchLoss for CrossEntropyLoss {
    fn loss_node(
        &self,
        graph: &mut Graph<f32>,
        logits: crate::autodiff::NodeId,
        _inputs: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<crate::autodiff::NodeId> {
        graph.cross_entropy(logits, labels)
    }
}

pub(crate) struct RunSegment<'a> {
    pub spec: &'a ModelSpec,
    pub train_set: &'a Dataset,
    pub test_set: &'a Dataset,
    pub config: &'a TrainConfig,
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub init: ParamVector,
    pub velocity: Option<Vec<f32>>,
    pub loss: &'a dyn BatchLoss,
    pub snapshot_epochs: &'a [usize],
}

pub(crate) struct SegmentOutput {
    pub trajectory: Trajectory,
    pub velocity: Vec<f32>,
}

/// Core SGD loop over an epoch range. The classic momentum update is
/// `v <- momentum * v + g; theta <- theta - lr * v`. Snapshots are taken
/// after the requested epoch counts; `start_epoch` itself is eligible.
pub(crate) fn run_segment(seg: RunSegment<'_>) -> std::result::Result<SegmentOutput, DivergedRun> {
    let cfg = seg.config;
    let stream = BatchStream::new(
        seg.train_set,
        cfg.batch_size,
        cfg.shuffle_seed(),
        cfg.augment_seed(),
        cfg.augment.clone(),
    )
    .map_err(|e| DivergedRun {
        message: e.to_string(),
        last_checkpoint: None,
        epoch: seg.start_epoch,
    })?;
    let steps_per_epoch = stream.steps_per_epoch();

    let mut params = seg.init;
    let mut velocity = seg.velocity.unwrap_or_else(|| vec![0.0; params.len()]);
    let mut rows = Vec::new();
    let mut snapshots: Vec<Checkpoint> = Vec::new();
    let mut last_train_loss = f64::NAN;

    let take_snapshot = |params: &ParamVector, epoch: usize, train_loss: f64| -> Result<Checkpoint> {
        let eval = models::evaluate(
            seg.spec,
            params,
            seg.test_set.inputs(),
            seg.test_set.labels(),
        )?;
        Ok(Checkpoint {
            params: params.clone(),
            epoch,
            config: cfg.clone(),
            metrics: MetricSnapshot { train_loss, test_acc: eval.accuracy },
        })
    };

    if seg.snapshot_epochs.contains(&seg.start_epoch) {
        let ckpt = take_snapshot(&params, seg.start_epoch, f64::NAN).map_err(|e| DivergedRun {
            message: e.to_string(),
            last_checkpoint: None,
            epoch: seg.start_epoch,
        })?;
        snapshots.push(ckpt);
    }

    for epoch in seg.start_epoch..seg.end_epoch {
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let global_step = epoch * steps_per_epoch + step;
            let lr = lr_at(cfg, global_step, steps_per_epoch);
            let diverged = |message: String, snapshots: &[Checkpoint]| DivergedRun {
                message,
                last_checkpoint: snapshots.last().cloned(),
                epoch,
            };
            let (inputs, labels) = stream
                .next_batch(epoch, step)
                .map_err(|e| diverged(e.to_string(), &snapshots))?;
            let mut graph = Graph::new();
            let (logits, leaves) =
                models::forward_graph(&mut graph, seg.spec, &params, inputs.clone())
                    .map_err(|e| diverged(e.to_string(), &snapshots))?;
            let loss = seg
                .loss
                .loss_node(&mut graph, logits, &inputs, &labels)
                .map_err(|e| diverged(e.to_string(), &snapshots))?;
            epoch_loss += graph.value(loss).item().unwrap().to_f64();
            graph
                .backward(loss)
                .map_err(|e| diverged(e.to_string(), &snapshots))?;

            // flatten per-tensor gradients into parameter order, then update
            let layout = seg.spec.layout();
            let values = params.values_mut();
            for (tensor, leaf) in layout.tensors.iter().zip(&leaves) {
                if let Some(grad) = graph.grad(*leaf) {
                    let base = tensor.offset;
                    for (j, g) in grad.iter().enumerate() {
                        let v = cfg.momentum as f32 * velocity[base + j] + *g as f32;
                        velocity[base + j] = v;
                        values[base + j] -= lr as f32 * v;
                    }
                }
            }
        }
        last_train_loss = epoch_loss / steps_per_epoch as f64;

        let done = epoch + 1;
        let want_snapshot = seg.snapshot_epochs.contains(&done) || done == seg.end_epoch;
        let want_eval = want_snapshot || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let mut test_acc = None;
        if want_snapshot {
            let ckpt = take_snapshot(&params, done, last_train_loss).map_err(|e| DivergedRun {
                message: e.to_string(),
                last_checkpoint: snapshots.last().cloned(),
                epoch: done,
            })?;
            test_acc = Some(ckpt.metrics.test_acc);
            snapshots.push(ckpt);
        } else if want_eval {
            let eval = models::evaluate(
                seg.spec,
                &params,
                seg.test_set.inputs(),
                seg.test_set.labels(),
            )
            .map_err(|e| DivergedRun {
                message: e.to_string(),
                last_checkpoint: snapshots.last().cloned(),
                epoch: done,
            })?;
            test_acc = Some(eval.accuracy);
        }
        rows.push(EpochRow {
            epoch: done,
            lr: lr_at(cfg, done * steps_per_epoch - 1, steps_per_epoch),
            train_loss: last_train_loss,
            test_acc,
        });
    }

    // cover the degenerate zero-epoch segment
    if snapshots.last().map(|c| c.epoch) != Some(seg.end_epoch) {
        let ckpt = take_snapshot(&params, seg.end_epoch, last_train_loss).map_err(|e| {
            DivergedRun {
                message: e.to_string(),
                last_checkpoint: snapshots.last().cloned(),
                epoch: seg.end_epoch,
            }
        })?;
        snapshots.push(ckpt);
    }

    Ok(SegmentOutput {
        trajectory: Trajectory {
            snapshots,
            rows,
            epochs_trained: seg.end_epoch - seg.start_epoch,
        },
        velocity,
    })
}

/// Train from a fresh initialization, returning checkpoints at each
/// requested epoch (the final epoch is always included).
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    snapshot_epochs: &[usize],
) -> Result<Trajectory> {
    config.validate()?;
    spec.validate()?;
    let init = models::init_params(spec, config.init_seed())?;
    let out = run_segment(RunSegment {
        spec,
        train_set,
        test_set,
        config,
        start_epoch: 0,
        end_epoch: config.epochs,
        init,
        velocity: None,
        loss: &CrossEntropyLoss,
        snapshot_epochs,
    })?;
    Ok(out.trajectory)
}

/// Train one run to epoch `t`, then branch `m` continuations to the full
/// epoch budget. Continuations share the split-point parameters exactly but
/// draw member-specific shuffle/augmentation streams; the schedule's step
/// counter carries across the split, and the momentum buffer resets there
/// unless `carry_split_momentum` is set.
pub fn split_train(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    t: usize,
    m: usize,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    if t > config.epochs {
        return Err(Error::Usage(format!(
            "split epoch {t} beyond total epochs {}",
            config.epochs
        )));
    }
    if m == 0 {
        return Err(Error::Usage("need at least one continuation".into()));
    }
    let base_cfg = config.with_member(0);
    let init = models::init_params(spec, base_cfg.init_seed())?;
    let prefix = run_segment(RunSegment {
        spec,
        train_set,
        test_set,
        config: &base_cfg,
        start_epoch: 0,
        end_epoch: t,
        init,
        velocity: None,
        loss: &CrossEntropyLoss,
        snapshot_epochs: &[],
    })?;
    let split_params = prefix.trajectory.final_checkpoint().params.clone();

    let mut members = Vec::with_capacity(m);
    for k in 0..m {
        let member_cfg = config.with_member(k as u64);
        let velocity = if config.carry_split_momentum {
            Some(prefix.velocity.clone())
        } else {
            None
        };
        let out = run_segment(RunSegment {
            spec,
            train_set,
            test_set,
            config: &member_cfg,
            start_epoch: t,
            end_epoch: config.epochs,
            init: split_params.clone(),
            velocity,
            loss: &CrossEntropyLoss,
            snapshot_epochs: &[],
        })?;
        members.push(out.trajectory.final_checkpoint().clone());
    }
    Ok(members)
}

// ---- checkpoint persistence ---------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"LBEN";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    config: TrainConfig,
    config_digest: String,
    epoch: usize,
    metrics: MetricSnapshot,
}

/// Serialize a checkpoint: magic, version (u16 LE), header length (u32 LE),
/// UTF-8 JSON header, then per-tensor records of name, rank, dims, dtype
/// code, and raw little-endian payload.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        spec: ckpt.spec().clone(),
        config: ckpt.config.clone(),
        config_digest: ckpt.config.digest(),
        epoch: ckpt.epoch,
        metrics: ckpt.metrics,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(header_json.len() + ckpt.params.len() * 4 + 64);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (name, shape, values) in ckpt.params.unflatten() {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(shape.len() as u8);
        for d in &shape {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        bytes.push(Dtype::F32.code());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Atomic checkpoint write: temp file in the target directory, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    atomic_write(path, &bytes)
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated checkpoint reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u32::from_le_bytes(cur.take(4, "header length")?.try_into().unwrap());
    let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len as usize, "header")?)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.config.digest() != header.config_digest {
        return Err(Error::Format("config digest mismatch".into()));
    }

    let layout = header.spec.layout();
    let mut tensors = Vec::with_capacity(layout.tensors.len());
    for _ in 0..layout.tensors.len() {
        let name_len = u16::from_le_bytes(cur.take(2, "tensor name length")?.try_into().unwrap());
        let name = String::from_utf8(cur.take(name_len as usize, "tensor name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize);
        }
        let dtype = Dtype::from_code(cur.take(1, "dtype")?[0])?;
        if dtype != Dtype::F32 {
            return Err(Error::Format("parameter tensors must be f32".into()));
        }
        let count: usize = shape.iter().product();
        let payload = cur.take(count * 4, "payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, values));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let params = ParamVector::from_tensors(header.spec, &tensors)
        .map_err(|e| Error::Format(format!("checkpoint does not match its spec: {e}")))?;
    Ok(Checkpoint {
        params,
        epoch: header.epoch,
        config: header.config,
        metrics: header.metrics,
    })
}

/// Write the per-run metrics log (`epoch,lr,train_loss,test_acc`).
pub fn write_metrics_csv(rows: &[EpochRow], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,test_acc\n");
    for row in rows {
        let acc = row
            .test_acc
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.8},{:.8},{}\n",
            row.epoch, row.lr, row.train_loss, acc
        ));
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobsConfig;

    fn desk_small() -> (Dataset, Dataset) {
        BlobsConfig { n_train: 256, n_test: 128, ..Default::default() }
            .build()
            .unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec::plain_mlp(2, 4, &[8])
    }

    #[test]
    fn lr_schedule_endpoints() {
        let mut cfg = TrainConfig::new(10, 1);
        cfg.peak_lr = 0.1;
        cfg.warmup_frac = 0.1;
        let spe = 10; // horizon 100 steps, warmup 10
        assert_eq!(lr_at(&cfg, 0, spe), 0.0);
        assert_eq!(lr_at(&cfg, 10, spe), 0.1); // end of warmup hits peak exactly
        assert!(lr_at(&cfg, 55, spe) < 0.1);
        assert!(lr_at(&cfg, 99, spe) > 0.0);
        assert_eq!(lr_at(&cfg, 100, spe), 0.0);

        cfg.schedule = ScheduleKind::WarmupCosineFloor { floor: 0.01 };
        // late steps clamp at the floor exactly
        assert_eq!(lr_at(&cfg, 97, spe), 0.01);
        assert_eq!(lr_at(&cfg, 100, spe), 0.01);
        assert_eq!(lr_at(&cfg, 10_000, spe), 0.01);
        assert_eq!(lr_at(&cfg, 10, spe), 0.1);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (train_set, test_set) = desk_small();
        let spec = tiny_spec();
        let mut cfg = TrainConfig::new(2, 3);
        cfg.peak_lr = 1e-30; // validate() rejects 0; this is numerically zero
        cfg.warmup_frac = 0.0;
        cfg.eval_every = 0;
        let init = models::init_params(&spec, cfg.init_seed()).unwrap();
        let traj = train(&spec, &train_set, &test_set, &cfg, &[]).unwrap();
        let max_move = traj
            .final_checkpoint()
            .params
            .values()
            .iter()
            .zip(init.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_move < 1e-20);
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, test_set) = desk_small();
        let spec = tiny_spec();
        let mut cfg = TrainConfig::new(3, 17);
        cfg.eval_every = 0;
        let a = train(&spec, &train_set, &test_set, &cfg, &[1]).unwrap();
        let b = train(&spec, &train_set, &test_set, &cfg, &[1]).unwrap();
        assert_eq!(
            a.final_checkpoint().params.values(),
            b.final_checkpoint().params.values()
        );
        assert_eq!(a.at_epoch(1).unwrap().params, b.at_epoch(1).unwrap().params);
    }

    #[test]
    fn one_step_matches_hand_momentum_update() {
        // single batch, single epoch, no warmup: theta' = theta - lr * g
        let inputs = Tensor::from_rows(&[&[1.0f32, -1.0]]).unwrap();
        let ds = Dataset::new(
            inputs.clone(),
            vec![0],
            2,
            crate::data::Split::Test,
            crate::data::Provenance::InMemory,
        )
        .unwrap();
        let spec = ModelSpec::PlainMlp {
            input_dim: 2,
            num_classes: 2,
            hidden: vec![2],
            layer_norm: false,
        };
        let mut cfg = TrainConfig::new(1, 5);
        cfg.batch_size = 4;
        cfg.warmup_frac = 0.0;
        cfg.peak_lr = 0.05;
        cfg.eval_every = 0;
        cfg.augment = AugmentConfig::default();

        let init = models::init_params(&spec, cfg.init_seed()).unwrap();
        let mut graph = Graph::new();
        let (logits, leaves) =
            models::forward_graph(&mut graph, &spec, &init, inputs.clone()).unwrap();
        let loss = graph.cross_entropy(logits, &[0]).unwrap();
        graph.backward(loss).unwrap();
        let layout = spec.layout();
        let mut expect = init.values().to_vec();
        for (tensor, leaf) in layout.tensors.iter().zip(&leaves) {
            if let Some(grad) = graph.grad(*leaf) {
                for (j, g) in grad.iter().enumerate() {
                    // v = 0.9 * 0 + g, theta -= lr * v
                    expect[tensor.offset + j] -= 0.05f32 * *g as f32;
                }
            }
        }

        let out = run_segment(RunSegment {
            spec: &spec,
            train_set: &ds,
            test_set: &ds,
            config: &cfg,
            start_epoch: 0,
            end_epoch: 1,
            init,
            velocity: None,
            loss: &CrossEntropyLoss,
            snapshot_epochs: &[],
        })
        .unwrap();
        assert_eq!(out.trajectory.final_checkpoint().params.values(), &expect[..]);
    }

    #[test]
    fn split_boundaries() {
        let (train_set, test_set) = desk_small();
        let spec = tiny_spec();
        let mut cfg = TrainConfig::new(4, 23);
        cfg.eval_every = 0;

        // t = T: every member is the single base run
        let members = split_train(&spec, &train_set, &test_set, &cfg, 4, 3).unwrap();
        assert_eq!(members.len(), 3);
        for pair in members.windows(2) {
            assert_eq!(pair[0].params.values(), pair[1].params.values());
        }

        // t = 0: members share the initialization but diverge afterwards
        let members = split_train(&spec, &train_set, &test_set, &cfg, 0, 2).unwrap();
        assert!(members[0].params.l2_distance(&members[1].params) > 0.0);

        // with the momentum buffer carried across the split, member 0 equals
        // the uninterrupted run exactly (same stream, same optimizer state)
        let mut carry_cfg = cfg.clone();
        carry_cfg.carry_split_momentum = true;
        let full = train(&spec, &train_set, &test_set, &carry_cfg.with_member(0), &[]).unwrap();
        let members = split_train(&spec, &train_set, &test_set, &carry_cfg, 2, 2).unwrap();
        assert_eq!(
            members[0].params.values(),
            full.final_checkpoint().params.values()
        );
        // the default resets momentum at the split and therefore drifts
        let members = split_train(&spec, &train_set, &test_set, &cfg, 2, 2).unwrap();
        assert!(members[0].params.l2_distance(&full.final_checkpoint().params) > 0.0);
    }

    #[test]
    fn loss_decreases_on_desk_task() {
        let (train_set, test_set) = desk_small();
        let spec = tiny_spec();
        for seed in [1u64, 2, 3] {
            let mut cfg = TrainConfig::new(6, seed);
            cfg.eval_every = 0;
            let traj = train(&spec, &train_set, &test_set, &cfg, &[]).unwrap();
            let first = traj.rows.first().unwrap().train_loss;
            let last = traj.rows.last().unwrap().train_loss;
            assert!(last < first, "seed {seed}: {last} !< {first}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (train_set, test_set) = desk_small();
        let spec = tiny_spec();
        let mut cfg = TrainConfig::new(2, 31);
        cfg.eval_every = 0;
        let traj = train(&spec, &train_set, &test_set, &cfg, &[]).unwrap();
        let ckpt = traj.final_checkpoint();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.values(), ckpt.params.values());
        assert_eq!(loaded.epoch, ckpt.epoch);
        assert_eq!(loaded.config, ckpt.config);

        // forward outputs identical on random probes after the round trip
        let probes = Tensor::new(
            vec![10, 2],
            (0..20).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let a = models::forward(&spec, &ckpt.params, &probes).unwrap();
        let b = models::forward(&spec, &loaded.params, &probes).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupted_checkpoint_magic_is_format_error() {
        let (train_set, test_set) = desk_small();
        let spec = tiny_spec();
        let mut cfg = TrainConfig::new(1, 37);
        cfg.eval_every = 0;
        let traj = train(&spec, &train_set, &test_set, &cfg, &[]).unwrap();
        let mut bytes = checkpoint_bytes(traj.final_checkpoint()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        // truncation is also a format error
        let ok_bytes = checkpoint_bytes(traj.final_checkpoint()).unwrap();
        assert!(matches!(
            checkpoint_from_bytes(&ok_bytes[..ok_bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }
}
