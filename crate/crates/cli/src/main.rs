use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unihead_cli::config::{RunConfig, SpecFile};
use unihead_cli::dataset::write_dataset;
use unihead_cli::report::{report_json, write_report};
use unihead_cli::run::{run_eval, run_gradcheck, run_train};
use unihead_cli::CliError;
use unihead_core::synth::generate_dataset;

#[derive(Parser)]
#[command(name = "unihead", version, about = "Dispersible-point head on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a JSON-lines dataset from a spec file.
    Datagen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a head and write the loss curve, checkpoint and report.
    Train {
        #[arg(long)]
        task: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        svg_overlays: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write report.json and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg_overlays: Option<PathBuf>,
    },
    /// Finite-difference gradient check of all four tasks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Datagen { spec, out } => {
            let spec = SpecFile::load(&spec)?.dataset_spec()?;
            write_dataset(&generate_dataset(&spec)?, &out)?;
            println!("wrote {} scenes to {}", spec.scenes, out.display());
        }
        Cmd::Train {
            task,
            config,
            data,
            out,
            seed,
            svg_overlays,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if cfg.task.as_deref().is_some_and(|t| t.parse::<unihead_core::head::Task>().ok() != task.parse().ok()) {
                return Err(CliError::Config(format!("--task {task} conflicts with the config's task")));
            }
            cfg.task = Some(task);
            cfg.dataset = Some(data);
            cfg.output = Some(out);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let summary = run_train(&cfg, svg_overlays.as_deref())?;
            println!("{}", report_json(&summary.report));
        }
        Cmd::Eval {
            config,
            checkpoint,
            data,
            out,
            svg_overlays,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.dataset = Some(data);
            let report = run_eval(&cfg, &checkpoint, svg_overlays.as_deref())?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                write_report(&report, &dir)?;
            }
            println!("{}", report_json(&report));
        }
        Cmd::Gradcheck { seed } => {
            let outcomes = run_gradcheck(seed)?;
            let mut ok = true;
            for o in &outcomes {
                let r = &o.report;
                println!(
                    "{} {:<5} max_rel_error={:.3e} checked={} worst={}[{}]",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.task.name(),
                    r.max_rel_error,
                    r.checked,
                    r.worst_path,
                    r.worst_index
                );
                ok &= o.passed;
            }
            if !ok {
                return Err(CliError::Core(unihead_core::Error::Numeric {
                    context: "gradient check".into(),
                }));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
