//! `tlora` command line. Every subcommand takes a JSON run config and an
//! output directory; inputs are read from `--input` (default: the output
//! directory).
//!
//! Exit codes: 0 ok, 2 configuration or I/O errors, 3 numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlora_core::harness::commands::{self, Run, SUMMARY_FILE};
use tlora_core::harness::RunConfig;
use tlora_core::{LabError, Result};

#[derive(Parser)]
#[command(name = "tlora", version, about = "Task-aware low-rank adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory. Falls back to `output.dir` in the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Directory holding earlier outputs. Defaults to the output directory.
    #[arg(long, short)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic task, its dataset and the base network.
    GenData(Common),
    /// Collect per-module importance scores and input covariances.
    Calibrate(Common),
    /// Allocate ranks and alphas and initialize adapters.
    Init(Common),
    /// Train the initialized adapters.
    Train(Common),
    /// Subspace alignment report and stability probe.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Second stats file for an importance difference.
        #[arg(long)]
        diff_stats: Option<PathBuf>,
    },
    /// Run the variant matrix over all configured seeds.
    Compare(Common),
}

struct Ctx {
    run: Run,
    out: PathBuf,
    input: PathBuf,
}

fn context(c: &Common) -> Result<Ctx> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = match (&c.out, &cfg.output.dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => {
            return Err(LabError::InvalidConfig(
                "no output directory: pass --out or set output.dir".into(),
            ))
        }
    };
    let input = c.input.clone().unwrap_or_else(|| out.clone());
    Ok(Ctx {
        run: Run::new(cfg),
        out,
        input,
    })
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn execute(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(c) => {
            let x = context(c)?;
            commands::gen_data(&x.run, &x.out)?;
            println!("wrote dataset and base network to {}", show(&x.out));
        }
        Cmd::Calibrate(c) => {
            let x = context(c)?;
            let stats = commands::calibrate(&x.run, &x.input, &x.out)?;
            for m in &stats.modules {
                println!("{}\ts={:.6e}", m.name, m.score);
            }
        }
        Cmd::Init(c) => {
            let x = context(c)?;
            let ck = commands::init(&x.run, &x.input, &x.out)?;
            for a in &ck.adapters {
                println!("{}\tr={}\talpha={}", a.layer_name, a.r, a.alpha);
            }
        }
        Cmd::Train(c) => {
            let x = context(c)?;
            let loss = commands::train(&x.run, &x.input, &x.out)?;
            println!("final loss {loss:.6e}");
        }
        Cmd::Analyze { common, diff_stats } => {
            let x = context(common)?;
            let report = commands::analyze(&x.run, &x.input, &x.out, diff_stats.as_deref())?;
            for l in &report.layers {
                let pd = l.phi_proxy_delta.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{}\tphi_proxy_delta={pd}\tphi_approx_theory={:.4}",
                    l.layer, l.phi_approx_theory
                );
            }
        }
        Cmd::Compare(c) => {
            let x = context(c)?;
            let rows = commands::compare(&x.run, &x.out)?;
            for r in &rows {
                println!(
                    "{}\tseed={}\tloss={:.6e}\tparams={}",
                    r.variant, r.seed, r.final_loss, r.trainable_params
                );
            }
            println!("wrote {}", show(&x.out.join(SUMMARY_FILE)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
