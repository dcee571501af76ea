use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use shortcut_probe::config::load_config;
use shortcut_probe::dataset_io;
use shortcut_probe::experiments::{run_experiment, run_training, ExperimentKind};
use shortcut_probe::pool::thread_cap;
use shortcut_probe::report::{emit_report, load_report, summary_table};
use shortcut_probe_core::rng::{derive_seed, stream};
use shortcut_probe_core::synth::{generate, group_split, Dataset};

#[derive(Parser)]
#[command(
    name = "shortcut-probe",
    version,
    about = "Synthetic stained-patch experiments probing shortcut learning in a dual-head classifier"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset directory (manifest.csv, patches.bin, split.json, gen.json)
    Gen {
        /// JSON run configuration
        #[arg(long)]
        config: PathBuf,
        /// Directory to write the dataset into
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated training of the configured model, with checkpoints
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by `gen`
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the report
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a predefined experiment (1, 2, 3, or probe)
    Sweep {
        /// 1 | 2 | 3 | probe (or the full experiment name)
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; omitted means generate in memory. The probe
        /// always generates its own datasets, one per confounding level.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an aggregated summary table of an emitted report
    Report {
        /// Directory holding report.json
        #[arg(long = "in")]
        in_dir: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen { config, out } => {
            let cfg = load_config(&config)?;
            let spec = cfg.gen.clone().unwrap_or_default();
            let records = generate(&spec).context("generating patches")?;
            let plan = group_split(
                &records,
                &cfg.split,
                derive_seed(spec.seed, &[stream::SPLIT]),
            )
            .context("splitting groups")?;
            let data = Dataset::new(records)?;
            dataset_io::write_dataset(&out, &data)?;
            dataset_io::write_split(&out, &plan)?;
            dataset_io::write_gen_spec(&out, &spec)?;
            let (c, h, w) = data.shape();
            println!(
                "wrote {} patches ({c}x{h}x{w}) with {} test groups to {}",
                data.len(),
                plan.test_groups.len(),
                out.display()
            );
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let report = run_training(&cfg, &data, &out, thread_cap())?;
            let files = emit_report(&report, &out)?;
            println!(
                "trained {} runs; wrote {} files under {}",
                report.cells.len(),
                files.len(),
                out.display()
            );
        }
        Cmd::Sweep {
            experiment,
            config,
            data,
            out,
        } => {
            let Some(kind) = ExperimentKind::parse(&experiment) else {
                bail!("unknown experiment `{experiment}` (want 1, 2, 3, or probe)");
            };
            if kind == ExperimentKind::ConfoundProbe && data.is_some() {
                eprintln!("note: the probe generates its own datasets; --data is ignored");
            }
            let cfg = load_config(&config)?;
            let data_dir = match kind {
                ExperimentKind::ConfoundProbe => None,
                _ => data,
            };
            let report = run_experiment(kind, &cfg, data_dir.as_deref(), thread_cap())?;
            emit_report(&report, &out)?;
            let failed = report
                .cells
                .iter()
                .filter(|c| {
                    matches!(
                        c.status,
                        shortcut_probe::experiments::CellStatus::Failed { .. }
                    )
                })
                .count();
            println!(
                "{}: {} cells ({} failed); report under {}",
                report.experiment,
                report.cells.len(),
                failed,
                out.display()
            );
        }
        Cmd::Report { in_dir } => {
            let report = load_report(&in_dir)?;
            print!("{}", summary_table(&report));
        }
    }
    Ok(())
}
