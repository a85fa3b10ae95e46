use std::path::PathBuf;
use std::process::ExitCode;

use blockpd_cli::config::Experiment;
use blockpd_cli::{check, compare_variants, export_data, output_root, run_experiment, CliError, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blockpd", version, about = "Block-adapted primal-dual experiments")]
struct Cli {
    /// Run only this seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Replace `max_iter` of every config.
    #[arg(long, global = true)]
    max_iter_override: Option<usize>,
    /// Write outputs here instead of under the output root.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment.
    Run { config: PathBuf },
    /// Run several variants of one problem and rank them by iterations to target.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Problem and step-rule diagnostics without running.
    Check { config: PathBuf },
    /// Write the DTI dataset of a config to a binary file.
    ExportData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(path: &PathBuf, o: &Overrides) -> Result<Experiment, CliError> {
    let mut e = Experiment::load(path)?;
    o.apply(&mut e)?;
    Ok(e)
}

fn main_inner(cli: Cli) -> Result<i32, CliError> {
    let o = Overrides { seed: cli.seed_override, max_iter: cli.max_iter_override };
    let root = output_root();
    match cli.command {
        Command::Run { config } => {
            let exp = load(&config, &o)?;
            let dir = cli.output_dir.unwrap_or_else(|| exp.output_dir(&root));
            let res = run_experiment(&exp, &dir)?;
            for r in &res.runs {
                match &r.output.error {
                    Some(e) => eprintln!("seed {}: {e}", r.seed),
                    None => println!(
                        "seed {}: final objective {:e}",
                        r.seed,
                        r.output.records.last().map_or(f64::NAN, |x| x.objective)
                    ),
                }
            }
            println!("outputs in {}", dir.display());
            Ok(res.exit_code())
        }
        Command::Compare { configs } => {
            let exps = configs.iter().map(|c| load(c, &o)).collect::<Result<Vec<_>, _>>()?;
            let dir = cli.output_dir.unwrap_or_else(|| root.join("compare"));
            let cmp = compare_variants(&exps, &dir)?;
            print!("{}", cmp.text);
            println!("outputs in {}", dir.display());
            Ok(if cmp.results.iter().any(|r| r.diverged()) { blockpd_cli::EXIT_DIVERGED } else { 0 })
        }
        Command::Check { config } => {
            let exp = load(&config, &o)?;
            let dir = cli.output_dir.unwrap_or_else(|| exp.output_dir(&root));
            print!("{}", check(&exp, &dir)?);
            Ok(0)
        }
        Command::ExportData { config, out, seed } => {
            let exp = load(&config, &o)?;
            export_data(&exp, o.seed.unwrap_or(seed), &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
