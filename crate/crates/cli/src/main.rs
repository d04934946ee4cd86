use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedem_core::harness::{
    attack_run, render_report, run_experiment, run_sweep, ExperimentManifest, RunStatus, SweepSpec, OUTPUT_ROOT_ENV,
};
use fedem_core::metrics::MetricReport;
use fedem_core::{selftest, Error};

#[derive(Parser)]
#[command(name = "fedem", version, about = "Federated learning simulator with gradient inversion attacks")]
struct Cli {
    /// Root directory for run and sweep outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, attack and evaluate one experiment manifest.
    Train { manifest: PathBuf },
    /// Re-run the attack stage of a finished run.
    Attack {
        run_dir: PathBuf,
        /// Stored round to attack; repeatable. Defaults to the last stored round.
        #[arg(long = "round")]
        rounds: Vec<usize>,
    },
    /// Run every value of a sweep file.
    Sweep { spec: PathBuf },
    /// Summarize finished runs into report.csv and report.txt.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where to write the report (defaults to the output root, else the
        /// current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn fail(e: &Error) -> ExitCode {
    log::error!("{e}");
    ExitCode::from(RunStatus::of(e).exit_code() as u8)
}

fn print_report(r: &MetricReport) {
    for (name, value) in MetricReport::HEADER.iter().zip(r.fields()) {
        println!("{name:>9} {value}");
    }
}

fn train(manifest: &Path, root: Option<&Path>) -> ExitCode {
    let m = match ExperimentManifest::load(manifest) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    let dir = m.run_dir(root);
    log::info!("run directory {}", dir.display());
    match run_experiment(&m, &dir) {
        Ok(summary) => {
            println!("{}", dir.display());
            print_report(&summary.report);
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn sweep(path: &Path, root: Option<&Path>) -> ExitCode {
    let spec = match SweepSpec::load(path) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let dir = spec.sweep_dir(root);
    match run_sweep(&spec, &dir) {
        Ok(rows) => {
            println!("{}", dir.display());
            let worst = rows.iter().map(|r| r.status.exit_code()).max().unwrap_or(0);
            for r in rows.iter().filter(|r| r.status != RunStatus::Ok) {
                log::warn!("value {} finished with {:?}", r.value.label(), r.status);
            }
            ExitCode::from(worst as u8)
        }
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.output_root.as_deref().filter(|p| !p.as_os_str().is_empty());
    match cli.command {
        Command::Train { manifest } => train(&manifest, root),
        Command::Attack { run_dir, rounds } => {
            let rounds = (!rounds.is_empty()).then_some(rounds);
            match attack_run(&run_dir, rounds.as_deref()) {
                Ok(report) => {
                    print_report(&report);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { spec } => sweep(&spec, root),
        Command::Report { run_dirs, out } => {
            let out = out.or_else(|| root.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("."));
            match render_report(&run_dirs, &out) {
                Ok(report) => {
                    print!("{}", fedem_core::harness::report::text_table(&report.rows));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
    }
}
