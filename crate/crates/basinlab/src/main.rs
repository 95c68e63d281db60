//! Thin command-line driver over the basinlab library: every subcommand
//! parses arguments, delegates to a library call, and maps errors to exit
//! codes (0 ok, 2 schema, 3 numeric divergence, 4 I/O or format, 1 other).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use basinlab::align;
use basinlab::landscape;
use basinlab::manifest::ExperimentManifest;
use basinlab::report::{self, TableFormat};
use basinlab::rng;
use basinlab::runner::{self, EvalSplit, RunOptions};
use basinlab::train;
use basinlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "basinlab",
    about = "Train single-basin ensembles and measure connectivity and diversity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalArg {
    Test,
    Train,
}

impl From<EvalArg> for EvalSplit {
    fn from(v: EvalArg) -> Self {
        match v {
            EvalArg::Test => EvalSplit::Test,
            EvalArg::Train => EvalSplit::Train,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlignArg {
    Pcd,
    MultiPcd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotKind {
    Curve,
    Scatter,
    Ablation,
    Plane,
}

#[derive(Args)]
struct EvalDataArgs {
    /// Seed run directory (runs/<experiment>/seed-<s>)
    #[arg(long)]
    run_dir: PathBuf,
    /// Split to evaluate on
    #[arg(long, value_enum, default_value = "test")]
    eval: EvalArg,
}

impl EvalDataArgs {
    /// Bundle + evaluation dataset resolved from the run directory's
    /// manifest.
    fn load(&self) -> Result<(basinlab::ensemble::EnsembleBundle, basinlab::data::Dataset)> {
        let (manifest, _) = runner::find_manifest(&self.run_dir)?;
        let (train_set, test_set) = manifest.dataset.build(&std::env::current_dir()?)?;
        let bundle = runner::load_bundle(&self.run_dir, manifest.ensemble.family)?;
        let eval = match self.eval {
            EvalArg::Test => test_set,
            EvalArg::Train => train_set,
        };
        Ok((bundle, eval))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment manifest (idempotent per manifest and seed)
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated seed list overriding the manifest
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads across seeds
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory overriding the manifest
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        eval: EvalArg,
    },
    /// Aggregate stored metric records into a table
    Table {
        /// Experiment directories holding seed-*/metrics.json
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
    /// Render a report file into a self-contained SVG
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Input report files (q_pair.json, metrics.json, plane.json)
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric name for ablation plots
        #[arg(long, default_value = "q_joint_mean")]
        metric: String,
    },
    /// Permutation-align the members of an existing run directory
    Align {
        #[command(flatten)]
        data: EvalDataArgs,
        #[arg(long, value_enum, default_value = "pcd")]
        mode: AlignArg,
        #[arg(long, default_value_t = runner::DEFAULT_MAX_SWEEPS)]
        max_sweeps: usize,
        #[arg(long, default_value_t = runner::DEFAULT_MAX_OUTER_ITERS)]
        max_outer_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the aligned checkpoints (default <run-dir>/align-<mode>)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise and joint connectivity of an existing run directory
    Connect {
        #[command(flatten)]
        data: EvalDataArgs,
        /// Dirichlet samples for joint connectivity
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Points on the pairwise lambda grid
        #[arg(long, default_value_t = 21)]
        lambda_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Loss/accuracy plane spanned by three members of a run directory
    Plane {
        #[command(flatten)]
        data: EvalDataArgs,
        /// Three member indices spanning the plane
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0,1,2")]
        members: Vec<usize>,
        #[arg(long, default_value_t = 25)]
        resolution: usize,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        /// Output CSV path (a sibling .json is written as well)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predictive diversity of an existing run directory
    Diversity {
        #[command(flatten)]
        data: EvalDataArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { manifest, seeds, jobs, out, eval } => {
            let manifest = ExperimentManifest::load(&manifest)?;
            let options = RunOptions {
                seeds,
                jobs: jobs.unwrap_or_else(runner::default_jobs),
                out_dir: out,
                eval_split: eval.into(),
            };
            let summary = runner::cmd_run(&manifest, &options)?;
            println!(
                "experiment {} finished: {} member(s) trained, {} cached, {} record(s) -> {}",
                summary.experiment,
                summary.members_trained,
                summary.members_cached,
                summary.records.len(),
                summary.experiment_dir.display()
            );
            Ok(())
        }
        Command::Table { runs, format } => {
            let mut records = Vec::new();
            for dir in &runs {
                records.extend(runner::load_records(dir)?);
            }
            let rows = report::aggregate(&records);
            let format = match format {
                FormatArg::Text => TableFormat::Text,
                FormatArg::Csv => TableFormat::Csv,
            };
            print!("{}", report::format_table(&rows, format));
            Ok(())
        }
        Command::Plot { kind, input, out, metric } => {
            let svg = match kind {
                PlotKind::Curve => {
                    let mut curves = Vec::new();
                    for path in &input {
                        let json = std::fs::read_to_string(path)?;
                        let file_curves: Vec<landscape::PairCurve> = serde_json::from_str(&json)
                            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                        curves.extend(file_curves);
                    }
                    report::plot_curves(&curves)
                }
                PlotKind::Scatter | PlotKind::Ablation => {
                    let mut records = Vec::new();
                    for path in &input {
                        let json = std::fs::read_to_string(path)?;
                        let file_records: Vec<runner::MetricRecord> =
                            serde_json::from_str(&json)
                                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                        records.extend(file_records);
                    }
                    if kind == PlotKind::Scatter {
                        report::plot_scatter(&records)
                    } else {
                        report::plot_ablation(&records, &metric)
                    }
                }
                PlotKind::Plane => {
                    let json = std::fs::read_to_string(&input[0])?;
                    let grid: landscape::PlaneGrid = serde_json::from_str(&json)
                        .map_err(|e| Error::Format(format!("{}: {e}", input[0].display())))?;
                    report::plot_plane(&grid.cells, &grid.anchors)
                }
            };
            train::atomic_write(&out, svg.as_bytes())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Align { data, mode, max_sweeps, max_outer_iters, seed, out } => {
            let (bundle, eval_set) = data.load()?;
            let (aligned, traces, label) = match mode {
                AlignArg::Pcd => {
                    let (aligned, results) = align::align_bundle_pcd(&bundle, max_sweeps, seed)?;
                    (aligned, results, "pcd")
                }
                AlignArg::MultiPcd => {
                    let (aligned, result) =
                        align::align_bundle_multi_pcd(&bundle, max_outer_iters, max_sweeps, seed)?;
                    (aligned, vec![result], "multi-pcd")
                }
            };
            // alignment must not change any member's behaviour
            let mut max_dev = 0.0f64;
            for (orig, new) in bundle.members.iter().zip(&aligned.members) {
                let dev = align::verify_function_preservation(
                    bundle.spec(),
                    &orig.params,
                    &new.params,
                    100,
                    rng::mix(seed, 0xA11),
                )?;
                max_dev = max_dev.max(dev);
            }
            let out_dir = out.unwrap_or_else(|| data.run_dir.join(format!("align-{label}")));
            for (k, member) in aligned.members.iter().enumerate() {
                let path = out_dir
                    .join(format!("member-{k}"))
                    .join(format!("epoch-{}.ckpt", member.epoch));
                train::save_checkpoint(member, &path)?;
            }
            let summary = serde_json::json!({
                "mode": label,
                "max_logit_deviation": max_dev,
                "sweeps": traces.iter().map(|t| t.sweeps).collect::<Vec<_>>(),
                "converged": traces.iter().all(|t| t.converged),
                "objective_traces": traces.iter().map(|t| &t.objective_trace).collect::<Vec<_>>(),
            });
            train::atomic_write(
                &out_dir.join("alignment.json"),
                serde_json::to_string_pretty(&summary)?.as_bytes(),
            )?;
            let report = landscape::q_joint_report(&aligned, 50, seed, &eval_set)?;
            println!(
                "aligned {} member(s) ({label}); max logit deviation {max_dev:.2e}; q_joint {:.2} -> {}",
                aligned.len(),
                report.mean,
                out_dir.display()
            );
            Ok(())
        }
        Command::Connect { data, samples, lambda_points, seed } => {
            let (bundle, eval_set) = data.load()?;
            let grid = landscape::lambda_grid(lambda_points);
            let mut curves = Vec::new();
            for i in 0..bundle.len() {
                for j in (i + 1)..bundle.len() {
                    curves.push(landscape::q_pair_curve(
                        &bundle.members[i].params,
                        &bundle.members[j].params,
                        &grid,
                        &eval_set,
                        (i, j),
                    )?);
                }
            }
            let joint = landscape::q_joint_report(&bundle, samples, seed, &eval_set)?;
            train::atomic_write(
                &data.run_dir.join("q_pair.json"),
                serde_json::to_string_pretty(&curves)?.as_bytes(),
            )?;
            train::atomic_write(
                &data.run_dir.join("q_joint.json"),
                serde_json::to_string_pretty(&joint)?.as_bytes(),
            )?;
            println!(
                "connectivity of {} member(s): q_joint {:.2} ± {:.2} over {} samples, {} pair curve(s)",
                bundle.len(),
                joint.mean,
                joint.std,
                joint.samples,
                curves.len()
            );
            Ok(())
        }
        Command::Plane { data, members, resolution, margin, out } => {
            if members.len() != 3 {
                return Err(Error::Usage("exactly three member indices required".into()));
            }
            let (bundle, eval_set) = data.load()?;
            for &m in &members {
                if m >= bundle.len() {
                    return Err(Error::Usage(format!(
                        "member {m} out of range 0..{}",
                        bundle.len()
                    )));
                }
            }
            let grid = landscape::plane_grid(
                &bundle.members[members[0]].params,
                &bundle.members[members[1]].params,
                &bundle.members[members[2]].params,
                resolution,
                margin,
                &eval_set,
            )?;
            let csv_path = out.unwrap_or_else(|| data.run_dir.join("plane.csv"));
            train::atomic_write(&csv_path, landscape::plane_to_csv(&grid).as_bytes())?;
            let json_path = csv_path.with_extension("json");
            train::atomic_write(&json_path, serde_json::to_string_pretty(&grid)?.as_bytes())?;
            println!(
                "plane {}x{} over members {:?} -> {} / {}",
                resolution,
                resolution,
                members,
                csv_path.display(),
                json_path.display()
            );
            Ok(())
        }
        Command::Diversity { data } => {
            let (bundle, eval_set) = data.load()?;
            let report = landscape::diversity_report(&bundle, &eval_set)?;
            train::atomic_write(
                &data.run_dir.join("diversity.json"),
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?;
            println!(
                "diversity of {} member(s): predictive variance {:.6}, one-vs-all JSD {:.6}",
                bundle.len(),
                report.predictive_variance,
                report.one_vs_all_jsd
            );
            Ok(())
        }
    }
}
