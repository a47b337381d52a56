use std::path::PathBuf;
use std::process::ExitCode;

use bottleneck_cli::config::{
    resolve, BottleneckSweepConfig, DiagnoseConfig, GenCorpusConfig, ReportConfig, SpamlangSweepConfig, TrainRunConfig,
    VerifyConfig,
};
use bottleneck_cli::experiments::{run_diagnose, run_gen_corpus, run_report, run_train, run_verify};
use bottleneck_cli::sweeps::{run_bottleneck_sweep, run_spamlang_sweep};
use bottleneck_cli::{resolve_out_dir, CliError, OUTPUT_ROOT_VAR};
use clap::{Args, Parser, Subcommand};

/// Matrix language model experiments.
///
/// Every subcommand reads an optional JSON config layered over built-in
/// defaults. Any key can be overridden with `--dotted.key value`, e.g.
/// `bottleneck train --train.lr 0.03 --hidden_dim 4`. Relative output
/// directories are placed under $BOTTLENECK_OUT when it is set.
///
/// Exit status: 0 success, 1 usage or configuration error, 2 verification
/// violation, 3 numeric failure.
#[derive(Parser)]
#[command(name = "bottleneck", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    /// Key overrides: `--a.b value` or `--a.b=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its assumption statistics.
    GenCorpus(Common),
    /// Train a matrix language model and write a checkpoint.
    Train(Common),
    /// Run the gradient diagnostics on a checkpoint.
    Diagnose(Common),
    /// Run every brute-force verifier.
    Verify(Common),
    /// Vocabulary size by learning rate on SpamLang.
    SpamlangSweep(Common),
    /// Head rank sweep on a shared Zipf corpus.
    BottleneckSweep(Common),
    /// Render SVG plots for the CSV files under a directory.
    Report(Common),
}

trait HasOutDir {
    fn out_dir_mut(&mut self) -> &mut PathBuf;
}

macro_rules! has_out_dir {
    ($($t:ty => $field:ident),*) => {
        $(impl HasOutDir for $t {
            fn out_dir_mut(&mut self) -> &mut PathBuf {
                &mut self.$field
            }
        })*
    };
}

has_out_dir!(
    GenCorpusConfig => out_dir,
    TrainRunConfig => out_dir,
    DiagnoseConfig => out_dir,
    VerifyConfig => out_dir,
    SpamlangSweepConfig => out_dir,
    BottleneckSweepConfig => out_dir,
    ReportConfig => input_dir
);

fn load<T>(common: &Common) -> Result<Option<T>, CliError>
where
    T: Default + serde::Serialize + serde::de::DeserializeOwned + HasOutDir,
{
    let mut cfg: T = resolve(common.config.as_deref(), &common.overrides)?;
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from);
    let dir = cfg.out_dir_mut();
    *dir = resolve_out_dir(dir, root.as_deref());
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus(c) => {
            if let Some(cfg) = load::<GenCorpusConfig>(&c)? {
                let o = run_gen_corpus(&cfg)?;
                println!(
                    "wrote {} ({} sequences, {} tokens)",
                    o.corpus_path.display(),
                    o.corpus.num_sequences(),
                    o.corpus.total_tokens()
                );
            }
        }
        Command::Train(c) => {
            if let Some(cfg) = load::<TrainRunConfig>(&c)? {
                let o = run_train(&cfg)?;
                let last = o.trajectory.final_point().expect("at least one point");
                println!(
                    "final train loss {:.6} (entropy floor {:.6}); checkpoint {}",
                    last.train_loss,
                    o.entropy_floor,
                    o.checkpoint.display()
                );
            }
        }
        Command::Diagnose(c) => {
            if let Some(cfg) = load::<DiagnoseConfig>(&c)? {
                let o = run_diagnose(&cfg)?;
                println!(
                    "lost fraction {:.4}, kernel cosine {:.4} ± {:.4}; outputs in {}",
                    o.compression.lost_fraction,
                    o.compression.cosine_mean,
                    o.compression.cosine_std,
                    cfg.out_dir.display()
                );
            }
        }
        Command::Verify(c) => {
            if let Some(cfg) = load::<VerifyConfig>(&c)? {
                let o = run_verify(&cfg)?;
                for r in &o.results {
                    println!(
                        "{:<20} instances {:>5}  skipped {:>3}  violations {:>3}  worst margin {:e}",
                        r.proposition, r.instances, r.skipped, r.violations, r.worst_margin
                    );
                }
                for f in &o.flags {
                    eprintln!("flagged: {f}");
                }
                if o.violations() > 0 {
                    return Err(CliError::Violation(format!("{} violations", o.violations())));
                }
            }
        }
        Command::SpamlangSweep(c) => {
            if let Some(cfg) = load::<SpamlangSweepConfig>(&c)? {
                let o = run_spamlang_sweep(&cfg)?;
                for ((v, f), (_, e)) in o.mean_best_final.iter().zip(&o.mean_best) {
                    println!("V = {v:>5}: mean best final loss {f:.5}, excess {e:.3e}");
                }
                println!("spearman(V, final loss) = {:?}", o.spearman_final);
                println!("spearman(V, excess loss) = {:?}", o.spearman);
            }
        }
        Command::BottleneckSweep(c) => {
            if let Some(cfg) = load::<BottleneckSweepConfig>(&c)? {
                let o = run_bottleneck_sweep(&cfg)?;
                for cell in &o.cells {
                    let head = cell.rank.map_or("full".to_string(), |r| format!("r = {r}"));
                    println!("{head:>8} seed {}: val loss {:?}", cell.seed, cell.final_val_loss);
                }
                println!("spearman(r, val loss) = {:?}", o.spearman);
                println!("token budget ratio = {:?}", o.token_budget_ratio);
            }
        }
        Command::Report(c) => {
            if let Some(cfg) = load::<ReportConfig>(&c)? {
                let written = run_report(&cfg)?;
                println!("wrote {} plots", written.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
