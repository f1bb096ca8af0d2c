use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disout::disout::MaskKind;
use disout::train::{self, CellOutcome, TrainConfig};
use disout::verify::{self, Fault, GradcheckOptions, MaskStatsOptions};
use disout::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

/// Train small networks with dropout, DropBlock or feature-map distortion,
/// and check the gradient and mask machinery.
///
/// Exit codes: 0 ok, 1 verification failure or failed run, 2 configuration
/// error, 3 I/O or file format error.
#[derive(Parser, Debug)]
#[command(name = "disout", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics, checkpoints and a config snapshot.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report test accuracy and loss of a checkpoint.
    Eval {
        /// Run directory; supplies the config snapshot and final checkpoint.
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate (defaults to the run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accepted instances per suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
        /// Inject a defect to exercise the harness.
        #[arg(long, value_enum, hide = true)]
        fault: Option<FaultArg>,
    },
    /// Sample masks and print the drop fraction and block-size histogram.
    MaskStats {
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        #[arg(long, value_enum, default_value_t = KindArg::Element)]
        kind: KindArg,
        #[arg(long, default_value_t = 3)]
        block_size: usize,
        /// Side of the square feature maps.
        #[arg(long, default_value_t = 16)]
        map_size: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every (regularizer, seed) cell and summarize test accuracy.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file; `.cfg` is appended when the path does not exist.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set disout.p_target=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output directory (defaults to a directory under the output root).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DISOUT_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    SignFlip,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Element,
    Block,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Input(_) | Error::Numeric(_) => EXIT_VERIFY,
    }
}

fn resolve_config(path: &Path) -> PathBuf {
    let with_ext = path.with_extension("cfg");
    if !path.exists() && path.extension().is_none() && with_ext.exists() {
        with_ext
    } else {
        path.to_path_buf()
    }
}

impl ConfigArgs {
    fn load(&self, fallback: Option<&Path>) -> disout::Result<TrainConfig> {
        let path = self.config.as_deref().map(resolve_config).or_else(|| fallback.map(Path::to_path_buf));
        TrainConfig::load(path.as_deref(), &self.overrides)
    }
}

impl OutputArgs {
    fn dir(&self, default_name: String) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.output_root.join(default_name))
    }
}

fn cmd_train(config: &ConfigArgs, output: &OutputArgs, resume: Option<&Path>) -> disout::Result<u8> {
    let cfg = config.load(None)?;
    let out = output.dir(format!("{}-{}-seed{}", cfg.preset, cfg.regularizer.name(), cfg.seed));
    let outcome = train::run(&cfg, &out, resume)?;
    println!("output: {}", out.display());
    for r in outcome.records.iter().filter(|r| r.is_epoch_end()) {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_acc.unwrap_or(f64::NAN)
        );
    }
    println!("final val acc {:.4}  best val acc {:.4}", outcome.final_val_acc, outcome.best_val_acc);
    Ok(0)
}

fn cmd_eval(run: Option<&Path>, config: &ConfigArgs, checkpoint: Option<&Path>) -> disout::Result<u8> {
    let snapshot = run.map(|r| r.join(train::SNAPSHOT_FILE));
    let cfg = config.load(snapshot.as_deref())?;
    let ckpt = match (checkpoint, run) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(r)) => r.join(train::CHECKPOINT_DIR).join(train::FINAL_CHECKPOINT),
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --run".into())),
    };
    let (acc, loss) = train::evaluate_checkpoint(&cfg, &ckpt)?;
    println!("test acc {acc:.6}  test loss {loss:.6}");
    Ok(0)
}

fn cmd_gradcheck(opts: GradcheckOptions) -> disout::Result<u8> {
    let report = verify::gradcheck(&opts)?;
    let line: Vec<String> = report
        .suites
        .iter()
        .map(|s| format!("{}: {:.3e}", s.name, s.max_rel_error))
        .collect();
    println!("{}", line.join(", "));
    for s in &report.suites {
        println!(
            "{:<9} instances {:>4}  rejected {:>4}  max rel err {:.3e}  worst seed {}",
            s.name, s.instances, s.rejected, s.max_rel_error, s.worst_seed
        );
    }
    if report.passed() {
        println!("gradcheck passed (threshold {:.0e})", report.threshold);
        return Ok(0);
    }
    for s in report.suites.iter().filter(|s| s.instances == 0 || s.max_rel_error >= report.threshold) {
        eprintln!(
            "gradcheck failed: {} max rel err {:.3e} at seed {} ({} instances)",
            s.name, s.max_rel_error, s.worst_seed, s.instances
        );
    }
    Ok(EXIT_VERIFY)
}

fn cmd_mask_stats(opts: MaskStatsOptions) -> disout::Result<u8> {
    let r = verify::mask_stats(&opts)?;
    println!(
        "kind {}  p {}  elements {}  drop fraction {:.6}  binomial sigma {:.2e}  z {:+.2}",
        format!("{:?}", opts.kind).to_lowercase(),
        opts.p,
        r.elements,
        r.drop_fraction,
        r.sigma,
        r.z
    );
    if let Some(e) = r.element_fraction {
        println!(
            "element mask fraction {:.6}  |block - element| {:.6}",
            e,
            (r.drop_fraction - e).abs()
        );
    }
    println!("component size histogram (4-connected):");
    for (size, count) in &r.histogram {
        println!("{size:>6} {count:>10}");
    }
    if r.passed() {
        Ok(0)
    } else {
        eprintln!("drop fraction deviates from p by {:.2} sigma", r.z.abs());
        Ok(EXIT_VERIFY)
    }
}

fn cmd_compare(config: &ConfigArgs, output: &OutputArgs) -> disout::Result<u8> {
    let cfg = config.load(None)?;
    let out = output.dir(format!("compare-{}", cfg.preset));
    let summary = train::run_compare(&cfg, &out, |r, s, outcome| match outcome {
        CellOutcome::Done { final_test_acc, .. } => {
            println!("{} seed {s}: test acc {final_test_acc:.4}", r.name())
        }
        CellOutcome::Failed(e) => eprintln!("{} seed {s}: failed: {e}", r.name()),
    })?;
    print!("{}", summary.to_text());
    println!("summary: {}", out.join("summary.csv").display());
    Ok(if summary.any_failed() { EXIT_VERIFY } else { 0 })
}

fn dispatch(cli: Cli) -> disout::Result<u8> {
    match cli.command {
        Command::Train { config, output, resume } => cmd_train(&config, &output, resume.as_deref()),
        Command::Eval { run, config, checkpoint } => cmd_eval(run.as_deref(), &config, checkpoint.as_deref()),
        Command::Gradcheck {
            seed,
            instances,
            step,
            threshold,
            fault,
        } => cmd_gradcheck(GradcheckOptions {
            seed,
            instances,
            step,
            threshold,
            fault: fault.map(|FaultArg::SignFlip| Fault::SignFlip),
        }),
        Command::MaskStats {
            p,
            kind,
            block_size,
            map_size,
            samples,
            seed,
        } => cmd_mask_stats(MaskStatsOptions {
            p,
            kind: match kind {
                KindArg::Element => MaskKind::Element,
                KindArg::Block => MaskKind::Block,
            },
            block_size,
            map_size,
            samples,
            seed,
        }),
        Command::Compare { config, output } => cmd_compare(&config, &output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
