use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgg::commands::{self, GradcheckSettings, Session};
use mgg::error::{CliError, CliResult, Kind, ResultExt};
use mgg_core::synth::SyntheticSpec;

#[derive(Parser)]
#[command(name = "mgg", version, about = "Multi-scale group attention and graph correlation for attribute recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Restore {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on this manifest instead of the config's test split.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from the config and write logs, checkpoint and a validation report.
    Train(Common),
    /// Per-attribute and mean accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        restore: Restore,
    },
    /// Attention masks of selected samples as PGM images.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        restore: Restore,
        /// Sample ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<u64>,
    },
    /// Mean group affinity matrices as CSV, one per tapped block.
    ExportAffinity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        restore: Restore,
    },
    /// Render a synthetic dataset to PGM images and a manifest.
    GenData {
        /// Generator spec (JSON); the built-in desk spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every gradient family on a tiny model.
    Gradcheck {
        /// Optional JSON overrides (samples, step, tolerance, floor, batch, seed, mode).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Scale one op's backward rule, as `op:scale` (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn session(common: &Common) -> CliResult<(Session, PathBuf)> {
    let s = Session::load(&common.config, common.seed)?;
    let out = common.out.clone().unwrap_or_else(|| s.config.output.clone());
    Ok((s, out))
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Train(common) => {
            let (s, out) = session(&common)?;
            let summary = commands::train(&s, &out)?;
            if let Some(last) = summary.epochs.last() {
                println!("trained {} epochs, final loss {:.6}", summary.epochs.len(), last.report.total);
            }
            if let Some(val) = &summary.val {
                print_report("validation", val);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { common, restore } => {
            let (s, out) = session(&common)?;
            let report = commands::eval(&s, &restore.checkpoint, restore.manifest.as_deref(), &out)?;
            print_report("evaluation", &report);
        }
        Command::ExportAttention { common, restore, samples } => {
            let (s, out) = session(&common)?;
            let files = commands::export_attention(&s, &restore.checkpoint, restore.manifest.as_deref(), &samples, &out)?;
            println!("wrote {} masks to {}", files.len(), out.display());
        }
        Command::ExportAffinity { common, restore } => {
            let (s, out) = session(&common)?;
            let files = commands::export_affinity(&s, &restore.checkpoint, restore.manifest.as_deref(), &out)?;
            println!("wrote {} affinity files to {}", files.len(), out.display());
        }
        Command::GenData { spec, count, out, seed } => {
            let mut spec = match spec {
                Some(p) => load_spec(&p)?,
                None => SyntheticSpec::desk_default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = commands::gen_data(&spec, count, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Gradcheck { config, seed, inject_fault } => {
            let settings = match config {
                Some(p) => GradcheckSettings::load(&p)?,
                None => GradcheckSettings::default(),
            };
            let mut cfg = settings.resolve()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.fault = inject_fault.as_deref().map(commands::parse_fault).transpose()?;
            let report = commands::gradcheck(&cfg)?;
            let counts: Vec<String> = report.family_counts().iter().map(|(f, n)| format!("{f}={n}")).collect();
            println!("checked {} entries ({}), {} kinks redrawn", report.entries.len(), counts.join(" "), report.kinks_skipped);
            if let Some(w) = report.worst() {
                println!("worst: {}[{}] analytic {:e} numeric {:e}", w.param, w.index, w.analytic, w.numeric);
            }
            println!("max rel. err. {:e} (tolerance {:e})", report.max_rel_err, report.tolerance);
            println!("{}", if report.passed() { "PASS" } else { "FAIL" });
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn load_spec(path: &Path) -> CliResult<SyntheticSpec> {
    let text = std::fs::read_to_string(path).or_kind(Kind::Config, path.display())?;
    serde_json::from_str(&text).or_kind(Kind::Config, path.display())
}

fn print_report(label: &str, r: &mgg_core::metrics::EvalReport) {
    print!("{label}: mean prediction {:.4}", r.mean_prediction);
    match r.mean_balanced {
        Some(b) => println!(", mean balanced {b:.4}"),
        None => println!(", mean balanced n/a"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => report_error(e),
    }
}

fn report_error(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
