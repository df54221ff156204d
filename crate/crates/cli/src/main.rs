use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fskd_core::experiment::{self, RunConfig, RunOptions};
use fskd_core::federation::Strategy;
use fskd_core::Error;

/// Federated adapter training with entropy-gated selective distillation.
#[derive(Parser)]
#[command(name = "fskd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federation and write metrics, checkpoints and a report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        tau: Option<String>,
        /// Continue from the output directory's state checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Side-by-side table of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Also write the comparison as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a run's token traces as JSON lines.
    ExportTraces {
        run: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Dump a preset's datasets as JSON lines.
    MakeData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Cache directory for pretrained backbones.
    #[arg(long)]
    backbone_cache: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(p) = &self.preset {
            cfg.preset = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.display().to_string();
        }
        if let Some(c) = &self.backbone_cache {
            cfg.backbone_cache = Some(c.display().to_string());
        }
        Ok(cfg)
    }
}

fn parse_tau(s: &str) -> Result<f64, Error> {
    match s {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::config("tau", format!("expected a number or \"inf\", got {s:?}"))),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            cfg,
            rounds,
            strategy,
            tau,
            resume,
        } => {
            let mut c = cfg.load()?;
            if let Some(r) = rounds {
                c.rounds = r;
            }
            if let Some(s) = strategy {
                c.strategy = Strategy::parse(&s)?;
            }
            if let Some(t) = tau {
                c.tau = Some(parse_tau(&t)?);
            }
            let report = experiment::run(
                &c,
                RunOptions {
                    resume,
                    foundation: None,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare { runs, json } => {
            let cmp = experiment::compare(&runs)?;
            print!("{}", cmp.render());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&cmp)?;
                std::fs::write(&path, text + "\n").map_err(|e| Error::Artifact {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
        }
        Command::ExportTraces { run, output } => {
            let mut sink: Box<dyn Write> = match &output {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            let n = experiment::export_traces(&run, &mut sink)?;
            sink.flush()?;
            eprintln!("{n} traces");
        }
        Command::MakeData { cfg } => {
            let c = cfg.load()?;
            let dir = PathBuf::from(&c.output_dir);
            for p in experiment::make_data(&c, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
