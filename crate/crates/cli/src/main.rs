use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spde_ldp_cli::config::{parse_config, render_config};
use spde_ldp_cli::run::{run_experiment, EXIT_CONFIG, OUTPUT_ENV};

/// Solvers, hypothesis audits and large deviation experiments for monotone SPDEs.
///
/// Exit codes: 0 success, 2 hypothesis audit failed, 3 solver or output failure, 4 configuration error.
#[derive(Parser)]
#[command(name = "spde-ldp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; when given it overrides the experiment flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default: $SPDE_LDP_OUT, then ./spde-ldp-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Audit the structural hypotheses of a model on random samples
    CheckHypotheses(Flags),
    /// Solve the controlled skeleton equation
    SolveSkeleton(Flags),
    /// Simulate one noisy path
    Simulate(Flags),
    /// Compare consecutive Galerkin levels
    GalerkinConvergence(Flags),
    /// Minimise control energy to reach a target endpoint
    Rate(Flags),
    /// Monte Carlo exceedance probabilities over a sequence of noise levels
    McLdp(Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::CheckHypotheses(f) => ("check-hypotheses", f),
            Command::SolveSkeleton(f) => ("solve-skeleton", f),
            Command::Simulate(f) => ("simulate", f),
            Command::GalerkinConvergence(f) => ("galerkin-convergence", f),
            Command::Rate(f) => ("rate", f),
            Command::McLdp(f) => ("mc-ldp", f),
        }
    }
}

/// Flags mirror the configuration keys; keys that do not apply are rejected.
#[derive(Args, Default)]
struct Flags {
    #[arg(long, default_value = "heat")]
    model: String,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    noise_modes: Option<i64>,
    #[arg(long)]
    num_points: Option<i64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    steps: i64,
    #[arg(long)]
    seed: Option<i64>,
    #[arg(long)]
    samples: Option<i64>,
    #[arg(long)]
    lambda_points: Option<i64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    event: Option<String>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<i64>>,
    #[arg(long)]
    target_mode: Option<i64>,
    #[arg(long)]
    target_amplitude: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    pieces: Option<i64>,
    #[arg(long)]
    max_rounds: Option<i64>,
    #[arg(long)]
    stop_threshold: Option<f64>,
    #[arg(long)]
    initial: Option<String>,
    #[arg(long)]
    initial_mode: Option<i64>,
    #[arg(long)]
    initial_amplitude: Option<f64>,
    #[arg(long)]
    control_amplitude: Option<f64>,
    #[arg(long)]
    control_pieces: Option<i64>,
}

impl Flags {
    fn entries(&self, kind: &str) -> Vec<(&'static str, &'static str, toml::Value)> {
        use toml::Value as V;
        let mut e = vec![
            ("model", "name", V::String(self.model.clone())),
            ("time", "steps", V::Integer(self.steps)),
            ("experiment", "kind", V::String(kind.into())),
        ];
        let mut opt = |sec, key, v: Option<V>| {
            if let Some(v) = v {
                e.push((sec, key, v));
            }
        };
        let list_f = |v: &Option<Vec<f64>>| v.as_ref().map(|x| V::Array(x.iter().map(|f| V::Float(*f)).collect()));
        let list_i = |v: &Option<Vec<i64>>| v.as_ref().map(|x| V::Array(x.iter().map(|f| V::Integer(*f)).collect()));
        opt("model", "p", self.p.map(V::Float));
        opt("model", "noise_modes", self.noise_modes.map(V::Integer));
        opt("space", "num_points", self.num_points.map(V::Integer));
        opt("space", "alpha", self.alpha.map(V::Float));
        opt("time", "horizon", self.horizon.map(V::Float));
        opt("experiment", "seed", self.seed.map(V::Integer));
        opt("experiment", "samples", self.samples.map(V::Integer));
        opt("experiment", "lambda_points", self.lambda_points.map(V::Integer));
        opt("experiment", "epsilon", self.epsilon.map(V::Float));
        opt("experiment", "epsilons", list_f(&self.epsilons));
        opt("experiment", "delta", self.delta.map(V::Float));
        opt("experiment", "event", self.event.clone().map(V::String));
        opt("experiment", "budget", self.budget.map(V::Float));
        opt("experiment", "levels", list_i(&self.levels));
        opt("experiment", "target_mode", self.target_mode.map(V::Integer));
        opt("experiment", "target_amplitude", self.target_amplitude.map(V::Float));
        opt("experiment", "tolerance", self.tolerance.map(V::Float));
        opt("experiment", "pieces", self.pieces.map(V::Integer));
        opt("experiment", "max_rounds", self.max_rounds.map(V::Integer));
        opt("experiment", "stop_threshold", self.stop_threshold.map(V::Float));
        opt("experiment", "initial", self.initial.clone().map(V::String));
        opt("experiment", "initial_mode", self.initial_mode.map(V::Integer));
        opt("experiment", "initial_amplitude", self.initial_amplitude.map(V::Float));
        opt("experiment", "control_amplitude", self.control_amplitude.map(V::Float));
        opt("experiment", "control_pieces", self.control_pieces.map(V::Integer));
        e
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let (kind, flags) = cli.command.parts();
    let text = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return ExitCode::from(EXIT_CONFIG as u8);
            }
        },
        None => render_config(&flags.entries(kind)),
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(errs) => {
            eprintln!("configuration error:\n{errs}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if cfg.experiment.name() != kind {
        eprintln!("configuration describes a `{}` experiment, not `{kind}`", cfg.experiment.name());
        return ExitCode::from(EXIT_CONFIG as u8);
    }
    if cfg.output.is_none() {
        cfg.output = cli.out.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from));
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("--workers must be at least 1");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        cfg.workers = w;
    }
    match run_experiment(&cfg) {
        Ok(out) => {
            println!("{} {} -> {}", out.manifest.experiment, out.manifest.status, out.directory.display());
            for f in &out.manifest.files {
                println!("  {} {}", f.sha256, f.path);
            }
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
