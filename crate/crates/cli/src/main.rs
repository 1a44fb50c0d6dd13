use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cohortsynth::pipeline::run::Run;
use cohortsynth::pipeline::{Method, RunConfig};
use cohortsynth::schema::ModuleSetting;
use cohortsynth::{Error, ErrorKind, Exec};

#[derive(Debug, Parser)]
#[command(name = "cohortsynth", version, about = "Synthetic longitudinal cohort generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing artifacts.
    #[arg(long, global = true)]
    overwrite: bool,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Module setting.
    #[arg(long, global = true, value_enum)]
    setting: Option<SettingArg>,
    /// Synthetic cohort size.
    #[arg(long, global = true)]
    size: Option<usize>,
    /// Match synthetic output to the real cohort's shape.
    #[arg(long, global = true)]
    postprocess: bool,
    /// Number of synthetic datasets in trend experiments.
    #[arg(long, global = true)]
    resamples: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the surrogate cohort.
    Simulate,
    /// Pivot and impute the real cohort.
    Prepare,
    /// Train the group autoencoders.
    Train,
    /// Encode the real cohort with the trained autoencoders.
    Encode,
    /// Learn the Bayesian network over embeddings and covariates.
    BnLearn,
    /// Draw a synthetic cohort.
    Sample,
    /// Match the raw synthetic cohort to the real cohort's shape.
    Postprocess,
    /// Compare synthetic and real cohorts.
    Evaluate,
    /// Fit age and time trends, with a resampling envelope.
    Trend,
    /// Run the full experimental grid.
    ReproducePaper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Vambn,
    Ft,
    Mt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SettingArg {
    I,
    Ii,
    Iii,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = cli.method {
        cfg.method = match m {
            MethodArg::Vambn => Method::Vambn,
            MethodArg::Ft => Method::Ft,
            MethodArg::Mt => Method::Mt,
        };
    }
    if let Some(s) = cli.setting {
        cfg.setting = match s {
            SettingArg::I => ModuleSetting::I,
            SettingArg::Ii => ModuleSetting::Ii,
            SettingArg::Iii => ModuleSetting::Iii,
        };
    }
    if let Some(n) = cli.size {
        cfg.sample_size = n;
    }
    if cli.postprocess {
        cfg.postprocess = true;
    }
    if let Some(k) = cli.resamples {
        cfg.resamples = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let mut run = Run::open(cfg, cli.overwrite, Exec::Parallel)?;
    match cli.command {
        Command::Simulate => run.simulate()?,
        Command::Prepare => {
            let p = run.prepare()?;
            println!("participants: {}", p.reference.n());
            for (var, n) in &p.imputed {
                println!("imputed {var}: {n}");
            }
        }
        Command::Train => {
            let models = run.train()?;
            for m in &models {
                println!("{}: {} model(s)", m.group, m.models.len());
            }
        }
        Command::Encode => {
            run.encode()?;
        }
        Command::BnLearn => {
            let net = run.bn_learn()?;
            println!("edges: {}", net.edges.len());
        }
        Command::Sample => {
            let s = run.sample()?;
            println!("records: {}", s.len());
        }
        Command::Postprocess => {
            let s = run.postprocess()?;
            println!("participants: {}", s.participants().len());
        }
        Command::Evaluate => {
            let r = run.evaluate()?;
            println!("js: {:.4} +- {:.4}", r.js.mean, r.js.sd);
            println!("correlation relative error: {:.4}", r.corr_error);
            println!("m_schulab violation rate: {:.4}", r.monotone.rate);
            println!("lockstep mean |error|: {:.4}", r.lockstep.mean_abs);
            println!("closure mean |error|: {:.4}", r.closure.mean_abs);
        }
        Command::Trend => {
            let t = run.trend()?;
            for row in &t.rows {
                let c = row.real.coefficients;
                println!("{} real: [{:.4}, {:.4}, {:.5}, {:.6}]", row.predictor, c[0], c[1], c[2], c[3]);
                if let Some(e) = &row.envelope {
                    println!(
                        "{} synthetic: significant {:.2}, band width {:.3}, failures {}",
                        row.predictor,
                        e.significant_fraction,
                        e.mean_width(),
                        e.failures
                    );
                }
            }
        }
        Command::ReproducePaper => {
            let r = run.reproduce()?;
            for c in &r.comparison {
                println!("{} setting {}: js {:.4} +- {:.4}, eps {:.4}", c.method, c.setting, c.js_mean, c.js_sd, c.corr_error);
            }
        }
    }
    println!("manifest: {}", run.out().join(cohortsynth::pipeline::run::MANIFEST_FILE).display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
