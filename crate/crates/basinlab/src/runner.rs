//! Experiment execution: builds datasets and ensembles from a manifest,
//! computes the requested metrics, and lays out run directories.
//!
//! Layout: `<out>/<experiment>/manifest.json`, then per seed
//! `seed-<s>/member-<k>/epoch-<e>.ckpt` with a `metrics.csv` per member and
//! `metrics.json` holding the seed's metric records. Completed member
//! checkpoints are reused on re-runs, so run directories are resumable and a
//! finished experiment re-runs without training.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::align::{align_bundle_multi_pcd, align_bundle_pcd};
use crate::data::Dataset;
use crate::ensemble::{self, DistillConfig, EnsembleBundle, Family};
use crate::error::{Error, Result};
use crate::landscape;
use crate::manifest::{AlignMode, ExperimentManifest, MetricRequest};
use crate::models::ModelSpec;
use crate::rng;
use crate::train::{self, Checkpoint, TrainConfig};

/// Default sweep budget for permutation alignment runs.
pub const DEFAULT_MAX_SWEEPS: usize = 50;
/// Default outer-iteration budget for joint alignment.
pub const DEFAULT_MAX_OUTER_ITERS: usize = 10;

/// One measured value with its provenance; tables are built from these
/// records without recomputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment: String,
    pub seed: u64,
    pub family: Family,
    pub metric: String,
    pub value: f64,
    /// Construction parameters relevant to the record (t, beta, ...).
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub params: std::collections::BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Execution options supplied by the CLI.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Override the manifest's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Worker threads across seeds (1 under BASINLAB_DETERMINISTIC=1).
    pub jobs: usize,
    /// Override the manifest's output directory.
    pub out_dir: Option<PathBuf>,
    /// Evaluate metrics on the test or train split.
    pub eval_split: EvalSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Test,
    Train,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seeds: None,
            jobs: default_jobs(),
            out_dir: None,
            eval_split: EvalSplit::Test,
        }
    }
}

/// Honors BASINLAB_DETERMINISTIC=1 by forcing a single worker.
pub fn default_jobs() -> usize {
    if deterministic_mode() {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

pub fn deterministic_mode() -> bool {
    std::env::var("BASINLAB_DETERMINISTIC").map_or(false, |v| v == "1")
}

/// Outcome of one `run` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub experiment_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub members_trained: usize,
    pub members_cached: usize,
    pub records: Vec<MetricRecord>,
}

struct SeedOutcome {
    trained: usize,
    cached: usize,
    records: Vec<MetricRecord>,
}

/// Run an experiment manifest end to end. Idempotent per (manifest, seed):
/// members whose final checkpoints already exist are loaded, not retrained.
/// On partial failure the completed artifacts are retained and the first
/// error is returned.
pub fn cmd_run(manifest: &ExperimentManifest, options: &RunOptions) -> Result<RunSummary> {
    manifest.validate()?;
    let out_root = options
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&manifest.output_dir));
    let experiment_dir = out_root.join(&manifest.name);
    std::fs::create_dir_all(&experiment_dir)?;
    train::atomic_write(
        &experiment_dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?.as_bytes(),
    )?;

    let base_dir = std::env::current_dir()?;
    let (train_set, test_set) = manifest.dataset.build(&base_dir)?;
    let spec = manifest
        .model
        .to_spec(train_set.input_dim(), train_set.num_classes());
    spec.validate()?;

    let seeds = options.seeds.clone().unwrap_or_else(|| manifest.seeds.clone());
    let jobs = options.jobs.max(1).min(seeds.len().max(1));

    let next_seed = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<(u64, Result<SeedOutcome>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next_seed.fetch_add(1, Ordering::SeqCst);
                if idx >= seeds.len() {
                    break;
                }
                let seed = seeds[idx];
                let outcome = run_seed(
                    manifest,
                    &experiment_dir,
                    &spec,
                    &train_set,
                    &test_set,
                    seed,
                    options.eval_split,
                );
                outcomes.lock().unwrap().push((seed, outcome));
            });
        }
    });

    let mut outcomes = outcomes.into_inner().unwrap();
    outcomes.sort_by_key(|(seed, _)| *seed);
    let mut summary = RunSummary {
        experiment: manifest.name.clone(),
        experiment_dir,
        seeds,
        members_trained: 0,
        members_cached: 0,
        records: Vec::new(),
    };
    let mut first_error = None;
    for (_, outcome) in outcomes {
        match outcome {
            Ok(seed_outcome) => {
                summary.members_trained += seed_outcome.trained;
                summary.members_cached += seed_outcome.cached;
                summary.records.extend(seed_outcome.records);
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn eval_set<'a>(split: EvalSplit, train_set: &'a Dataset, test_set: &'a Dataset) -> &'a Dataset {
    match split {
        EvalSplit::Test => test_set,
        EvalSplit::Train => train_set,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_seed(
    manifest: &ExperimentManifest,
    experiment_dir: &Path,
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    seed: u64,
    split: EvalSplit,
) -> Result<SeedOutcome> {
    let seed_dir = experiment_dir.join(format!("seed-{seed}"));
    let base = manifest.train.to_config(seed);
    let cache = MemberCache { dir: seed_dir.clone(), epochs: base.epochs };

    let (bundle, trained, cached) =
        build_family(manifest, spec, train_set, test_set, &base, &cache)?;
    persist_bundle(&bundle, &cache)?;

    let eval = eval_set(split, train_set, test_set);
    let records = compute_metrics(manifest, &bundle, eval, seed, &seed_dir)?;
    let json = serde_json::to_string_pretty(&records)?;
    train::atomic_write(&seed_dir.join("metrics.json"), json.as_bytes())?;
    Ok(SeedOutcome { trained, cached, records })
}

/// Member-checkpoint cache inside one seed directory. Members are cached by
/// final-epoch checkpoint presence plus a config digest match.
struct MemberCache {
    dir: PathBuf,
    epochs: usize,
}

impl MemberCache {
    fn member_path(&self, member: usize, epoch: usize) -> PathBuf {
        self.dir
            .join(format!("member-{member}"))
            .join(format!("epoch-{epoch}.ckpt"))
    }

    fn lookup(&self, member: usize, epoch: usize, expected: &TrainConfig) -> Option<Checkpoint> {
        let path = self.member_path(member, epoch);
        let ckpt = train::load_checkpoint(&path).ok()?;
        (ckpt.config == *expected && ckpt.epoch == epoch).then_some(ckpt)
    }

    fn store(&self, member: usize, ckpt: &Checkpoint) -> Result<()> {
        train::save_checkpoint(ckpt, &self.member_path(member, ckpt.epoch))
    }
}

fn build_family(
    manifest: &ExperimentManifest,
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    cache: &MemberCache,
) -> Result<(EnsembleBundle, usize, usize)> {
    let members = manifest.ensemble.members;
    let family = manifest.ensemble.family;

    // deep bundles support member-level reuse; other families resume at
    // bundle granularity (their members share training prefixes)
    let expected_final = |k: usize| -> TrainConfig {
        let mut cfg = base.with_member(k as u64);
        if family == Family::Swe {
            cfg.epochs = members * base.epochs;
            cfg.schedule = crate::train::ScheduleKind::WarmupCosineFloor {
                floor: manifest.ensemble.floor_lr.unwrap_or(0.01),
            };
            cfg.schedule_epochs = Some(base.epochs);
            cfg.member_index = 0;
        }
        cfg
    };
    let final_epoch = |k: usize| -> usize {
        match family {
            Family::Swe => (k + 1) * base.epochs,
            Family::Distilled | Family::DeepDistilled => {
                manifest.ensemble.split_epoch.unwrap_or(0) + manifest.distill_epochs()
            }
            _ => base.epochs,
        }
    };
    let cached_members: Vec<Option<Checkpoint>> = (0..members)
        .map(|k| cache.lookup(k, final_epoch(k), &expected_final(k)))
        .collect();
    let all_cached = cached_members.iter().all(Option::is_some);

    // nominal construction budget, reported even when members come from cache
    let t = manifest.ensemble.split_epoch.unwrap_or(0);
    let budget = match family {
        Family::Deep | Family::Swe | Family::Permuted => members * base.epochs,
        Family::Constrained => t + members * (base.epochs - t),
        Family::Distilled => t + members * manifest.distill_epochs(),
        Family::DeepDistilled => members * (t + manifest.distill_epochs()),
    };

    if all_cached && !matches!(family, Family::Permuted) {
        let checkpoints: Vec<Checkpoint> = cached_members.into_iter().flatten().collect();
        let bundle = EnsembleBundle {
            family,
            epochs_consumed: budget,
            members: checkpoints,
            params: ensemble::BundleParams {
                members,
                train_epochs: base.epochs,
                master_seed: base.master_seed,
                split_epoch: manifest.ensemble.split_epoch,
                beta: manifest.ensemble.beta,
                tau: manifest.ensemble.tau,
                distill_epochs: manifest.ensemble.distill_epochs,
                floor_lr: manifest.ensemble.floor_lr,
            },
            partial: false,
            notes: vec!["loaded from cache".into()],
            member_rows: Vec::new(),
        };
        return Ok((bundle, 0, members));
    }

    let bundle = match family {
        Family::Deep => ensemble::build_deep(spec, train_set, test_set, base, members)?,
        Family::Swe => ensemble::build_swe(
            spec,
            train_set,
            test_set,
            base,
            members,
            manifest.ensemble.floor_lr.unwrap_or(0.01),
        )?,
        Family::Constrained => ensemble::build_constrained(
            spec,
            train_set,
            test_set,
            base,
            members,
            manifest.ensemble.split_epoch.unwrap(),
        )?,
        Family::Distilled | Family::DeepDistilled => {
            let teachers = ensemble::build_deep(spec, train_set, test_set, base, members)?;
            let distill = DistillConfig {
                beta: manifest.ensemble.beta.unwrap(),
                tau: manifest.ensemble.tau.unwrap(),
                split_epoch: manifest.ensemble.split_epoch.unwrap(),
                distill_epochs: manifest.distill_epochs(),
            };
            if family == Family::Distilled {
                ensemble::build_distilled(spec, train_set, test_set, base, &teachers, &distill)?
            } else {
                ensemble::build_deep_distilled(
                    spec, train_set, test_set, base, &teachers, &distill,
                )?
            }
        }
        Family::Permuted => {
            let deep = ensemble::build_deep(spec, train_set, test_set, base, members)?;
            match manifest.ensemble.align_mode.unwrap() {
                AlignMode::Pcd => {
                    align_bundle_pcd(&deep, DEFAULT_MAX_SWEEPS, base.master_seed)?.0
                }
                AlignMode::MultiPcd => {
                    align_bundle_multi_pcd(
                        &deep,
                        DEFAULT_MAX_OUTER_ITERS,
                        DEFAULT_MAX_SWEEPS,
                        base.master_seed,
                    )?
                    .0
                }
            }
        }
    };
    let trained = bundle.len();
    Ok((bundle, trained, 0))
}

fn persist_bundle(bundle: &EnsembleBundle, cache: &MemberCache) -> Result<()> {
    for (k, member) in bundle.members.iter().enumerate() {
        cache.store(k, member)?;
    }
    for (k, rows) in bundle.member_rows.iter().enumerate() {
        if !rows.is_empty() {
            let path = cache.dir.join(format!("member-{k}")).join("metrics.csv");
            train::write_metrics_csv(rows, &path)?;
        }
    }
    let _ = cache.epochs;
    Ok(())
}

fn family_params(manifest: &ExperimentManifest) -> std::collections::BTreeMap<String, f64> {
    let mut params = std::collections::BTreeMap::new();
    let e = &manifest.ensemble;
    params.insert("members".into(), e.members as f64);
    params.insert("epochs".into(), manifest.train.epochs as f64);
    if let Some(t) = e.split_epoch {
        params.insert("t".into(), t as f64);
    }
    if let Some(beta) = e.beta {
        params.insert("beta".into(), beta);
    }
    if let Some(tau) = e.tau {
        params.insert("tau".into(), tau);
    }
    if let Some(floor) = e.floor_lr {
        params.insert("floor_lr".into(), floor);
    }
    params
}

fn compute_metrics(
    manifest: &ExperimentManifest,
    bundle: &EnsembleBundle,
    eval: &Dataset,
    seed: u64,
    seed_dir: &Path,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let params = family_params(manifest);
    let mut push = |metric: &str, value: f64| {
        records.push(MetricRecord {
            experiment: manifest.name.clone(),
            seed,
            family: bundle.family,
            metric: metric.into(),
            value,
            params: params.clone(),
        });
    };
    push("epochs_consumed", bundle.epochs_consumed as f64);

    for request in &manifest.metrics {
        match request {
            MetricRequest::Accuracy => {
                let eval_out = ensemble::evaluate_bundle(bundle, eval)?;
                push("ensemble_acc", eval_out.ensemble_accuracy * 100.0);
                push("mean_member_acc", eval_out.mean_member_accuracy * 100.0);
                push("ensemble_nll", eval_out.ensemble_nll);
                push("mean_member_nll", eval_out.mean_member_nll);
            }
            MetricRequest::QJoint => {
                let report = landscape::q_joint_report(
                    bundle,
                    manifest.q_joint_samples,
                    rng::mix(seed, rng::tag::DIRICHLET),
                    eval,
                )?;
                push("q_joint_mean", report.mean);
                push("q_joint_std", report.std);
                let json = serde_json::to_string_pretty(&report)?;
                train::atomic_write(&seed_dir.join("q_joint.json"), json.as_bytes())?;
            }
            MetricRequest::QPair => {
                let grid = landscape::lambda_grid(manifest.lambda_points);
                let mut curves = Vec::new();
                let mut mid_drops = Vec::new();
                for i in 0..bundle.len() {
                    for j in (i + 1)..bundle.len() {
                        let curve = landscape::q_pair_curve(
                            &bundle.members[i].params,
                            &bundle.members[j].params,
                            &grid,
                            eval,
                            (i, j),
                        )?;
                        let mid = curve.q_pair[curve.q_pair.len() / 2];
                        mid_drops.push(mid);
                        curves.push(curve);
                    }
                }
                push(
                    "q_pair_mid_mean",
                    mid_drops.iter().sum::<f64>() / mid_drops.len().max(1) as f64,
                );
                let json = serde_json::to_string_pretty(&curves)?;
                train::atomic_write(&seed_dir.join("q_pair.json"), json.as_bytes())?;
            }
            MetricRequest::Diversity => {
                let report = landscape::diversity_report(bundle, eval)?;
                push("predictive_variance", report.predictive_variance);
                push("one_vs_all_jsd", report.one_vs_all_jsd);
                let json = serde_json::to_string_pretty(&report)?;
                train::atomic_write(&seed_dir.join("diversity.json"), json.as_bytes())?;
            }
            MetricRequest::Plane => {
                let grid = landscape::plane_grid(
                    &bundle.members[0].params,
                    &bundle.members[1].params,
                    &bundle.members[2].params,
                    manifest.plane_resolution,
                    manifest.plane_margin,
                    eval,
                )?;
                train::atomic_write(
                    &seed_dir.join("plane.csv"),
                    landscape::plane_to_csv(&grid).as_bytes(),
                )?;
                let json = serde_json::to_string_pretty(&grid)?;
                train::atomic_write(&seed_dir.join("plane.json"), json.as_bytes())?;
            }
        }
    }
    Ok(records)
}

/// Load every `seed-*/metrics.json` under an experiment directory.
pub fn load_records(run_dir: &Path) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let mut seed_dirs: Vec<PathBuf> = std::fs::read_dir(run_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed-"))
        })
        .collect();
    seed_dirs.sort();
    for dir in seed_dirs {
        let path = dir.join("metrics.json");
        if path.exists() {
            let json = std::fs::read_to_string(&path)?;
            let seed_records: Vec<MetricRecord> = serde_json::from_str(&json)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            records.extend(seed_records);
        }
    }
    if records.is_empty() {
        return Err(Error::Usage(format!(
            "no metrics.json found under {}",
            run_dir.display()
        )));
    }
    Ok(records)
}

/// Resolve the manifest belonging to a run directory (the directory itself
/// or its parent).
pub fn find_manifest(run_dir: &Path) -> Result<(ExperimentManifest, PathBuf)> {
    for candidate in [run_dir.join("manifest.json")]
        .into_iter()
        .chain(run_dir.parent().map(|p| p.join("manifest.json")))
    {
        if candidate.exists() {
            return Ok((ExperimentManifest::load(&candidate)?, candidate));
        }
    }
    Err(Error::Usage(format!(
        "no manifest.json in {} or its parent",
        run_dir.display()
    )))
}

/// Load the member checkpoints of a seed directory as a bundle.
pub fn load_bundle(seed_dir: &Path, family: Family) -> Result<EnsembleBundle> {
    let mut member_dirs: Vec<(usize, PathBuf)> = std::fs::read_dir(seed_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            let index: usize = name.strip_prefix("member-")?.parse().ok()?;
            p.is_dir().then_some((index, p))
        })
        .collect();
    member_dirs.sort();
    let mut members = Vec::new();
    for (_, dir) in &member_dirs {
        // the highest-epoch checkpoint is the member's final state
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if let Some(epoch) = name
                .strip_prefix("epoch-")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                    best = Some((epoch, path));
                }
            }
        }
        if let Some((_, path)) = best {
            members.push(train::load_checkpoint(&path)?);
        }
    }
    if members.is_empty() {
        return Err(Error::Usage(format!(
            "no member checkpoints under {}",
            seed_dir.display()
        )));
    }
    let first = &members[0];
    let params = ensemble::BundleParams {
        members: members.len(),
        train_epochs: first.config.epochs,
        master_seed: first.config.master_seed,
        split_epoch: None,
        beta: None,
        tau: None,
        distill_epochs: None,
        floor_lr: None,
    };
    Ok(EnsembleBundle {
        family,
        members,
        params,
        epochs_consumed: 0,
        partial: false,
        notes: vec!["loaded from run directory".into()],
        member_rows: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ExperimentManifest;

    fn tiny_manifest(dir: &Path) -> ExperimentManifest {
        let json = format!(
            r#"{{
            "name": "tiny",
            "dataset": {{"kind": "gaussian_blobs", "classes": 4, "clusters_per_class": 2,
                        "dim": 2, "spread": 0.25, "n_train": 128, "n_test": 64, "seed": 7}},
            "model": {{"arch": "plain_mlp", "hidden": [8]}},
            "train": {{"epochs": 2}},
            "ensemble": {{"family": "deep", "members": 2}},
            "metrics": ["accuracy", "q_joint"],
            "seeds": [1, 2],
            "output_dir": {:?}
        }}"#,
            dir.to_str().unwrap()
        );
        ExperimentManifest::from_json(&json).unwrap()
    }

    #[test]
    fn run_creates_layout_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path());
        let options = RunOptions { jobs: 2, ..Default::default() };
        let summary = cmd_run(&manifest, &options).unwrap();
        assert_eq!(summary.members_trained, 4);
        assert_eq!(summary.members_cached, 0);
        let exp_dir = dir.path().join("tiny");
        assert!(exp_dir.join("manifest.json").exists());
        for seed in [1, 2] {
            let seed_dir = exp_dir.join(format!("seed-{seed}"));
            assert!(seed_dir.join("member-0/epoch-2.ckpt").exists());
            assert!(seed_dir.join("member-0/metrics.csv").exists());
            assert!(seed_dir.join("metrics.json").exists());
            assert!(seed_dir.join("q_joint.json").exists());
        }

        // second run hits the member cache and trains nothing
        let summary = cmd_run(&manifest, &options).unwrap();
        assert_eq!(summary.members_trained, 0);
        assert_eq!(summary.members_cached, 4);

        // records reload from disk
        let records = load_records(&exp_dir).unwrap();
        assert!(records.iter().any(|r| r.metric == "ensemble_acc"));
        assert!(records.iter().all(|r| r.is_finite()));

        // bundles reload from the run directory
        let bundle = load_bundle(&exp_dir.join("seed-1"), Family::Deep).unwrap();
        assert_eq!(bundle.len(), 2);
    }

    #[test]
    fn rerun_reproduces_checkpoints_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_manifest(dir.path());
        let options = RunOptions { jobs: 1, ..Default::default() };
        cmd_run(&manifest, &options).unwrap();
        let path = dir.path().join("tiny/seed-1/member-1/epoch-2.ckpt");
        let bytes_before = std::fs::read(&path).unwrap();
        std::fs::remove_dir_all(dir.path().join("tiny/seed-1")).unwrap();
        cmd_run(&manifest, &options).unwrap();
        let bytes_after = std::fs::read(&path).unwrap();
        assert_eq!(bytes_before, bytes_after);
    }
}
