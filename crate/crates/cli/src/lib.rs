//! `pamlab`: batch runner for the pam-core laboratory.
//!
//! Every config-driven subcommand resolves its configuration, echoes it,
//! writes its outputs into `--out`, and finishes with `manifest.toml`
//! listing a SHA-256 checksum per output file. Exit codes: 0 success,
//! 1 failed assertion, 2 usage, configuration or runtime error.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use output::{sha256_hex, unix_now, OutputDir, RunManifest};

#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Usage(String),
    Config(String),
    /// A checked statistic failed; the run itself completed.
    Assertion(String),
    Compute(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Assertion(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Assertion(m) => write!(f, "assertion failed: {m}"),
            Failure::Compute(m) => write!(f, "error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<pam_core::Error> for Failure {
    fn from(e: pam_core::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "pamlab", version, about = "Numerical laboratory for the parabolic Anderson model with |x|^-2 noise")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags mirroring the shared config keys.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// model.d
    #[arg(long)]
    pub d: Option<usize>,
    /// model.kappa
    #[arg(long)]
    pub kappa: Option<f64>,
    /// discretization.epsilon
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// discretization.n_per_side
    #[arg(long)]
    pub n_per_side: Option<usize>,
    /// discretization.box_length
    #[arg(long)]
    pub box_length: Option<f64>,
    /// discretization.dt
    #[arg(long)]
    pub dt: Option<f64>,
    /// discretization.t_end
    #[arg(long)]
    pub t_end: Option<f64>,
    /// n_ensemble
    #[arg(long)]
    pub n_ensemble: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExactFn {
    /// α(η) from --d --eta
    Alpha,
    /// (d−2)²/8 from --d
    EtaMax,
    /// α(κ²/2) from --d --kappa
    ModelAlpha,
    /// Heat kernel G_t(x) from --d --t --x
    HeatKernel,
    /// I_ν(z) from --nu --z
    BesselI,
    /// Bessel transition density from --d (or --dim) --t --a --b
    BesselDensity,
    /// Exact Bessel-bridge moment from --d --eta --a --b --t
    BridgeMoment,
    /// Exact bridge moment averaged over |R_t − b| ≤ --half-width
    BinnedTarget,
    /// Riesz constant c with (c|x|^{-(d+2)/2})∗(c|x|^{-(d+2)/2}) = |x|^{-2}, from --d
    RieszConstant,
    /// Γ(x) from --z
    Gamma,
}

#[derive(Debug, Clone, Args)]
pub struct ExactArgs {
    #[arg(value_enum)]
    pub function: ExactFn,
    #[arg(long)]
    pub d: Option<usize>,
    /// Real-valued dimension of the Bessel process.
    #[arg(long)]
    pub dim: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Point, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub x: Option<Vec<f64>>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub z: Option<f64>,
    #[arg(long)]
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MomentAction {
    First,
    Second,
    Bound,
    Norm,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a closed-form quantity and print it.
    Exact(ExactArgs),
    /// Monte Carlo exponential moments of the inverse-square functional.
    BridgeMoment {
        #[command(flatten)]
        o: Overrides,
        /// bridge.eta (single value)
        #[arg(long)]
        eta: Option<f64>,
        /// bridge.n_paths
        #[arg(long)]
        n_paths: Option<usize>,
        /// bridge.m (single value)
        #[arg(long)]
        m: Option<usize>,
    },
    /// Monte Carlo moments of interacting Brownian bridges.
    PairMoment {
        #[command(flatten)]
        o: Overrides,
        /// pair.n_paths
        #[arg(long)]
        n_paths: Option<usize>,
        /// pair.m
        #[arg(long)]
        m: Option<usize>,
    },
    /// Empirical covariance of noise increments against dt·h^ε.
    NoiseCheck {
        #[command(flatten)]
        o: Overrides,
        /// noise.n_increments
        #[arg(long)]
        n_increments: Option<usize>,
    },
    /// Run the SPDE ensemble and record the configured observables.
    Simulate {
        #[command(flatten)]
        o: Overrides,
    },
    /// Chaos expansion per-order variances and truncation residuals.
    ChaosVerify {
        #[command(flatten)]
        o: Overrides,
        /// chaos.max_order
        #[arg(long = "max-order", short = 'N')]
        max_order: Option<usize>,
    },
    /// Moment oracles: first, second, bound, norm or all.
    Moments {
        #[arg(value_enum, default_value = "all")]
        action: MomentAction,
        #[command(flatten)]
        o: Overrides,
        /// moments.n_paths
        #[arg(long)]
        n_paths: Option<usize>,
    },
    /// Run a named experiment and write its report.
    Experiment {
        /// duality, scaling, total_mass, death, singularity,
        /// supermartingale_rho or local_extinction
        name: String,
        #[command(flatten)]
        o: Overrides,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Exact(_) => "exact",
            Command::BridgeMoment { .. } => "bridge-moment",
            Command::PairMoment { .. } => "pair-moment",
            Command::NoiseCheck { .. } => "noise-check",
            Command::Simulate { .. } => "simulate",
            Command::ChaosVerify { .. } => "chaos-verify",
            Command::Moments { .. } => "moments",
            Command::Experiment { .. } => "experiment",
        }
    }

    /// (dotted config key, value) pairs for every flag that was given.
    fn overrides(&self) -> Vec<(&'static str, toml::Value)> {
        use toml::Value;
        let int = |v: usize| Value::Integer(v as i64);
        let mut out = Vec::new();
        let shared = |o: &Overrides, out: &mut Vec<(&'static str, Value)>| {
            let pairs: [(&'static str, Option<Value>); 8] = [
                ("model.d", o.d.map(int)),
                ("model.kappa", o.kappa.map(Value::Float)),
                ("discretization.epsilon", o.epsilon.map(Value::Float)),
                ("discretization.n_per_side", o.n_per_side.map(int)),
                ("discretization.box_length", o.box_length.map(Value::Float)),
                ("discretization.dt", o.dt.map(Value::Float)),
                ("discretization.t_end", o.t_end.map(Value::Float)),
                ("n_ensemble", o.n_ensemble.map(int)),
            ];
            out.extend(pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        };
        match self {
            Command::Exact(_) => {}
            Command::BridgeMoment { o, eta, n_paths, m } => {
                shared(o, &mut out);
                out.extend(eta.map(|v| ("bridge.eta", Value::Array(vec![Value::Float(v)]))));
                out.extend(n_paths.map(|v| ("bridge.n_paths", int(v))));
                out.extend(m.map(|v| ("bridge.m", Value::Array(vec![int(v)]))));
            }
            Command::PairMoment { o, n_paths, m } => {
                shared(o, &mut out);
                out.extend(n_paths.map(|v| ("pair.n_paths", int(v))));
                out.extend(m.map(|v| ("pair.m", int(v))));
            }
            Command::NoiseCheck { o, n_increments } => {
                shared(o, &mut out);
                out.extend(n_increments.map(|v| ("noise.n_increments", int(v))));
            }
            Command::Simulate { o } | Command::Experiment { o, .. } => shared(o, &mut out),
            Command::ChaosVerify { o, max_order } => {
                shared(o, &mut out);
                out.extend(max_order.map(|v| ("chaos.max_order", int(v))));
            }
            Command::Moments { o, n_paths, .. } => {
                shared(o, &mut out);
                out.extend(n_paths.map(|v| ("moments.n_paths", int(v))));
            }
        }
        out
    }
}

/// Reads the config file (if any), applies `--seed` and the subcommand
/// flags, and resolves the result.
pub fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut table = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| Failure::Usage("--seed must fit in 63 bits for TOML".into()))?;
        config::set_key(&mut table, "seed", toml::Value::Integer(seed))?;
    }
    for (k, v) in cli.command.overrides() {
        config::set_key(&mut table, k, v)?;
    }
    if !table.contains_key("model") {
        return Err(Failure::Config("model.d and model.kappa are required (config [model] section or --d/--kappa)".into()));
    }
    config::from_table(table)
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("pamlab: {f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let started = unix_now();
    let workers = match cli.workers {
        Some(0) => return Err(Failure::Usage("--workers must be at least 1".into())),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::Usage(format!("cannot size the worker pool: {e}")))?;
            n
        }
        None => rayon::current_num_threads(),
    };
    if let Command::Exact(args) = &cli.command {
        let value = commands::exact(args)?;
        println!("{value}");
        if let Some(dir) = &cli.out {
            let mut out = OutputDir::create(dir)?;
            let mut t = output::Table::new(&["function", "value"]);
            t.push(vec![format!("{:?}", args.function).into(), value.into()]);
            out.write_csv("exact.csv", &t)?;
            out.finish(manifest(cli, workers, 0, sha256_hex(format!("{args:?}").as_bytes()), started))?;
        }
        return Ok(());
    }

    let mut cfg = load_config(cli)?;
    if let Command::Experiment { name, .. } = &cli.command {
        cfg.experiment = Some(commands::resolve_experiment(&cfg, name)?);
    }
    let rendered = cfg.render();
    eprintln!("# resolved configuration\n{rendered}");
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("pamlab-out").join(cli.command.name()));
    let mut out = OutputDir::create(&dir)?;
    out.write("config.toml", rendered.as_bytes())?;
    let verdict = commands::dispatch(&cli.command, &cfg, &mut out);
    // The manifest is written even when an assertion failed.
    let done = match &verdict {
        Ok(()) | Err(Failure::Assertion(_)) => true,
        Err(_) => false,
    };
    if done {
        let m = out.finish(manifest(cli, workers, cfg.seed, sha256_hex(rendered.as_bytes()), started))?;
        println!("wrote {} files and {} to {}", m.outputs.len(), output::MANIFEST, dir.display());
    }
    verdict
}

fn manifest(cli: &Cli, workers: usize, seed: u64, config_hash: String, started: f64) -> RunManifest {
    RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        git_describe: env!("PAMLAB_GIT_DESCRIBE").to_string(),
        subcommand: cli.command.name().to_string(),
        seed,
        workers,
        config_hash,
        started_unix: started,
        finished_unix: 0.0,
        outputs: Vec::new(),
    }
}
