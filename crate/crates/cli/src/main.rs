use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iclbench_core::harness::{self, checks, CheckOutcome, ExperimentConfig};
use iclbench_core::metrics::{write_csv_file, MetricReport};
use iclbench_core::{Checkpoint, Error, TransformerParams};

#[derive(Parser, Debug)]
#[command(name = "iclbench", version, about = "ICL versus gradient-descent test-bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write seed-averaged long-format CSVs for plotting.
    #[arg(long)]
    emit_plot_data: bool,
    /// Run every cell on the calling thread.
    #[arg(long)]
    serial: bool,
}

#[derive(clap::Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Pretrained model written by `iclbench pretrain` (pretrained.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the attention construction against explicit GD steps and sweep its sparsity.
    VerifyConstruction(Common),
    /// Pretrain the toy model on the in-context objective and save checkpoints.
    Pretrain(Common),
    /// Order sensitivity of ICL against GD, SGD and Adam fine-tuning.
    OrderSens(WithCheckpoint),
    /// Accuracy, token overlap and OCS of ICL against GD and its sub-model variants.
    Compare(WithCheckpoint),
    /// Pretrain while tracking parameter gaps and ICL accuracy across checkpoints.
    Evolution(Common),
    /// GD accuracy as the number of demonstrations grows.
    DemoScaling(WithCheckpoint),
    /// Sparsity of the constructed matrices over the threshold grid.
    Sparsity(Common),
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if common.serial {
        cfg.parallel = false;
    }
    std::fs::create_dir_all(&common.out)
        .map_err(|e| Failure::Config(format!("cannot create output directory {}: {e}", common.out.display())))?;
    Ok(cfg)
}

fn load_base(args: &WithCheckpoint, cfg: &ExperimentConfig) -> Result<TransformerParams, Failure> {
    let path = args.checkpoint.as_ref().ok_or_else(|| {
        Failure::Config("this experiment needs a pretrained model: pass --checkpoint <out>/pretrained.json (run `iclbench pretrain` first)".into())
    })?;
    let ckpt = Checkpoint::load(path)
        .map_err(|e| Failure::Config(format!("cannot load checkpoint {}: {e}", path.display())))?;
    let expected = TransformerParams::init(&cfg.arch, &mut iclbench_core::SeededRng::new(0))?;
    if !ckpt.params.same_architecture(&expected) {
        return Err(Failure::Config(format!("checkpoint {} does not match the configured architecture", path.display())));
    }
    Ok(ckpt.params)
}

fn write_rows(rows: &[MetricReport], common: &Common, name: &str) -> Result<(), Failure> {
    write_csv_file(rows, &common.out.join(format!("{name}.csv")))?;
    if common.emit_plot_data {
        harness::write_plot_csv(rows, &common.out.join(format!("plot_{name}.csv")))?;
    }
    Ok(())
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!("{o}");
    }
    outcomes.iter().all(|o| o.pass)
}

fn save_checkpoints(dir: &Path, cps: &[Checkpoint]) -> Result<(), Failure> {
    let ck = dir.join("checkpoints");
    std::fs::create_dir_all(&ck).map_err(|e| Failure::Run(e.to_string()))?;
    for c in cps {
        c.save(&ck.join(format!("step_{:06}.json", c.step)))?;
    }
    if let Some(last) = cps.last() {
        last.save(&dir.join("pretrained.json"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::VerifyConstruction(c) => {
            let cfg = load(&c)?;
            let suite = harness::run_construction_suite(&cfg)?;
            suite.write(&c.out)?;
            println!(
                "{} instances, {} failures, zero-demonstration case rejected: {}",
                suite.instances.len(),
                suite.failures(),
                suite.zero_demo_rejected
            );
            Ok(suite.pass)
        }
        Command::Sparsity(c) => {
            let cfg = load(&c)?;
            let rows = harness::run_sparsity_sweep(&cfg)?;
            harness::write_sparsity_csv(&rows, &c.out.join("sparsity.csv"))?;
            let bad = rows.iter().filter(|r| !r.pass()).count();
            println!("{} sparsity rows, {bad} mismatches against the closed form", rows.len());
            Ok(bad == 0)
        }
        Command::Pretrain(c) => {
            let cfg = load(&c)?;
            let cps = harness::run_pretrain(&cfg, |cp| {
                eprintln!("step {} held-out loss {:.4}", cp.step, cp.loss.unwrap_or(f64::NAN));
                Ok(())
            })?;
            save_checkpoints(&c.out, &cps)?;
            let rows = harness::evolution_rows(&cfg, &cps)?;
            write_rows(&rows, &c, "pretrain")?;
            let first = cps.first().and_then(|c| c.loss).unwrap_or(f64::NAN);
            let last = cps.last().and_then(|c| c.loss).unwrap_or(f64::NAN);
            println!("held-out loss {first:.4} -> {last:.4}");
            Ok(cps.len() == 1 || last < first)
        }
        Command::Evolution(c) => {
            let cfg = load(&c)?;
            let (_, rows) = harness::run_evolution(&cfg)?;
            write_rows(&rows, &c, "evolution")?;
            Ok(report(&[checks::evolution_shape(&rows, 0.05)]))
        }
        Command::OrderSens(a) => {
            let cfg = load(&a.common)?;
            let base = load_base(&a, &cfg)?;
            let rows = harness::run_order_experiment(&cfg, &base)?;
            write_rows(&rows, &a.common, "order_sens")?;
            Ok(report(&[
                checks::gd_sen_zero(&rows),
                checks::order_direction(&rows, &cfg),
                checks::sgd_sen_decreases(&rows, &cfg),
            ]))
        }
        Command::Compare(a) => {
            let cfg = load(&a.common)?;
            let base = load_base(&a, &cfg)?;
            let rows = harness::run_comparison_grid(&cfg, &base)?;
            write_rows(&rows, &a.common, "compare")?;
            Ok(report(&[checks::overlap_direction(&rows, &cfg)]))
        }
        Command::DemoScaling(a) => {
            let cfg = load(&a.common)?;
            let base = load_base(&a, &cfg)?;
            let rows = harness::run_demo_scaling(&cfg, &base)?;
            write_rows(&rows, &a.common, "demo_scaling")?;
            Ok(report(&[checks::scaling_direction(&rows, &cfg)]))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
