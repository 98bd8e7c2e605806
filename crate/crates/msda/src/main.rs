use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msda::cli::{self, catalog, config};

#[derive(Parser)]
#[command(name = "msda", version, about = "Reduced-order stochastic filtering experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config and MSDA_OUTPUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the parallel sweeps.
        #[arg(long)]
        jobs: Option<usize>,
        /// Use the full-length cycle counts instead of the desk-scale defaults.
        #[arg(long)]
        paper_scale: bool,
    },
    /// List the available experiments.
    List,
    /// Check a config without running anything.
    Validate { config: PathBuf },
}

fn print_diagnostics(d: &config::Diagnostics) {
    eprint!("{d}");
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::List => {
            println!("{:<24} {:<18} {:<8} summary", "id", "anchor", "runtime");
            for e in catalog::list_experiments() {
                println!("{:<24} {:<18} {:<8} {}", e.id, e.anchor, e.runtime, e.summary);
            }
            cli::EXIT_OK
        }
        Command::Validate { config: path } => {
            let (cfg, diag) = config::validate_file(&path);
            print_diagnostics(&diag);
            match cfg {
                Some(c) => {
                    println!("ok: {} ({})", c.id(), c.content_hash());
                    cli::EXIT_OK
                }
                None => cli::EXIT_CONFIG,
            }
        }
        Command::Run { config: path, out, jobs, paper_scale } => {
            if let Some(n) = jobs {
                if n == 0 {
                    eprintln!("error: --jobs must be positive");
                    return ExitCode::from(cli::EXIT_CONFIG as u8);
                }
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("global pool is set once");
            }
            let (cfg, diag) = config::validate_file(&path);
            print_diagnostics(&diag);
            match cfg {
                None => cli::EXIT_CONFIG,
                Some(c) => {
                    let c = if paper_scale { c.paper_scale() } else { c };
                    match cli::run_experiment(&c, out.as_deref()) {
                        Ok(r) => {
                            println!("experiment {} hash {}", r.experiment, r.hash);
                            for (k, v) in &r.metrics {
                                println!("  {k} = {v}");
                            }
                            for n in &r.notes {
                                println!("  note: {n}");
                            }
                            println!("wrote {} files to {}", r.files.len(), r.output_dir.display());
                            cli::EXIT_OK
                        }
                        Err(e) => {
                            eprintln!("error: {e}");
                            cli::exit_code(&e)
                        }
                    }
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
