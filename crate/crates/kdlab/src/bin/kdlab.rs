//! Command-line front end: run an experiment matrix, re-emit reports from
//! cached cells, generate datasets, and inspect artifacts.

use clap::{Parser, Subcommand};
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use kdlab::data;
use kdlab::harness::{self, ExperimentConfig, ReportFormat, RunOptions};
use kdlab::models;

#[derive(Parser)]
#[command(name = "kdlab", about = "Distillation-vs-debiasing experiment lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment matrix described by a TOML config.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Output directory (cells cache + reports); overrides the config's
        /// `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Only run cells whose key or label matches this.
        #[arg(long)]
        cell: Option<String>,
        /// Report format: csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Re-emit reports from a previous run's result store.
    Report {
        /// Store directory written by `run` (contains config.json and cells/).
        store: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Generate a dataset bundle from the config's data section.
    GenData {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Generation seed; defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file for the serialized bundle.
        #[arg(long, default_value = "dataset.kdd")]
        out: PathBuf,
    },
    /// Describe an artifact: dataset bundle, model checkpoint, or cached cell.
    Inspect {
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &PathBuf) -> kdlab::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text)
}

fn run(cli: Cli) -> kdlab::Result<()> {
    match cli.command {
        Command::Run { config, out, jobs, seed_offset, cell, format } => {
            let cfg = load_config(&config)?;
            let format = ReportFormat::from_name(&format)?;
            let out = out.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
                kdlab::Error::InvalidConfig(
                    "no output directory: set out_dir in the config or pass --out".into(),
                )
            })?;
            let opts = RunOptions { jobs, seed_offset, cell_filter: cell };
            let report = harness::run_matrix(&cfg, &out, &opts)?;
            println!("cells: {} ok, {} failed", report.cells.len(), report.failures.len());
            for f in &report.failures {
                eprintln!("failed {}: {}", f.cell.label(), f.error);
            }
            let paths = harness::emit_reports(&report, &out.join("reports"), format)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Report { store, format, seed_offset } => {
            let cfg = harness::load_store_config(&store)?;
            let format = ReportFormat::from_name(&format)?;
            // Cells already on disk are reused; anything missing is computed.
            let opts = RunOptions { jobs: 1, seed_offset, cell_filter: None };
            let report = harness::run_matrix(&cfg, &store, &opts)?;
            let paths = harness::emit_reports(&report, &store.join("reports"), format)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.matrix.seeds[0]);
            let bundle = data::generate(&cfg.data, seed)?;
            let mut file = fs::File::create(&out)?;
            data::write_bundle(&bundle, &mut file)?;
            println!(
                "wrote {} ({} train / {} id / {} ood / {} transfer / {} heldout samples)",
                out.display(),
                bundle.train.len(),
                bundle.id_test.len(),
                bundle.ood_test.len(),
                bundle.transfer_test.len(),
                bundle.heldout.len()
            );
            Ok(())
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn inspect(path: &PathBuf) -> kdlab::Result<()> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"# kdlab-dataset") {
        let mut reader = BufReader::new(bytes.as_slice());
        let bundle = data::read_bundle(&mut reader)?;
        println!("dataset bundle, seed {}", bundle.seed);
        for split in data::Split::ALL {
            let ds = bundle.split(split);
            let g = ds.group_counts();
            println!(
                "  {:>13}: {:>5} samples, groups (y,s) 00/01/10/11 = {}/{}/{}/{}",
                split.name(),
                ds.len(),
                g[0],
                g[1],
                g[2],
                g[3]
            );
        }
        return Ok(());
    }
    if bytes.starts_with(b"{") && bytes.windows(16).take(200).any(|w| w == b"kdlab-checkpoint") {
        let model = models::load_model(&mut bytes.as_slice())?;
        println!(
            "model checkpoint: {} {} ({} layers, width {}, {} params)",
            model.spec.family,
            model.spec.scale,
            model.spec.layers,
            model.spec.hidden,
            model.spec.param_count()
        );
        println!("  role: {}", model.role);
        println!("  method: {}", model.provenance.method);
        if let Some(t) = model.provenance.teacher_scale {
            println!("  teacher scale: {t}");
        }
        if !model.provenance.chain.is_empty() {
            let chain: Vec<String> = model.provenance.chain.iter().map(|s| s.to_string()).collect();
            println!("  chain: {}", chain.join(" -> "));
        }
        println!("  seed: {}", model.provenance.seed);
        println!("  params hash: {}", model.params.byte_hash());
        return Ok(());
    }
    if let Ok(cell) = serde_json::from_slice::<harness::CellResult>(&bytes) {
        println!("cell {} ({})", cell.cell.label(), cell.key);
        println!(
            "  teacher ood {:.4}  scratch ood {:.4}  distilled ood {:.4}",
            cell.teacher_metrics.ood_accuracy,
            cell.scratch_metrics.ood_accuracy,
            cell.distilled_metrics.ood_accuracy
        );
        println!("  c1 {:+.4}  c2 {:+.4}  agreement(id) {:.4}", cell.c1, cell.c2, cell.agreement_id);
        return Ok(());
    }
    Err(kdlab::Error::Format("unrecognized artifact (not a dataset, checkpoint, or cell)".into()))
}
