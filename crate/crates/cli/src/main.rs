mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use holue_core::baselines::Method;
use holue_core::eval::{self, EvalConfig, EvalError, Evaluation, StatsSource};
use holue_core::gallery::DEFAULT_BETA;
use holue_core::holue::DEFAULT_TEMPERATURE;
use holue_core::io;
use holue_core::metrics::{DEFAULT_MAX_FRACTION, Metric};
use holue_core::protocol::{self, SynthConfig, PRESETS};
use holue_core::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_EMPTY_VALIDATION: u8 = 3;
const EXIT_UNDEFINED_PRR: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "holue", version, about = "Open-set recognition uncertainty: generate, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic protocol bundle.
    Gen(GenArgs),
    /// Evaluate every requested method on a bundle.
    Eval(EvalArgs),
    /// Check the numerical engine against the built-in oracles.
    Verify(VerifyArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// SynthConfig JSON file.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: ambiguous, degraded or mixed.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsArg {
    Validation,
    Test,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Target FPIR; repeat for several operating points.
    #[arg(long = "fpir", default_values_t = [0.1])]
    fpir: Vec<f64>,
    /// Comma-separated methods (default: all).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_FRACTION)]
    max_reject_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split supplying the KL standardization moments.
    #[arg(long, value_enum, default_value_t = StatsArg::Validation)]
    stats_source: StatsArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(verify::SCOPES))]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving verify.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Perturbs engine values so every numeric check fails.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

type Outcome = Result<u8, Failure>;

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(fail(EXIT_OTHER))?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(fail(EXIT_OTHER))?;
    Ok(0)
}

fn load_config(args: &GenArgs) -> anyhow::Result<SynthConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), _) => protocol::preset(name)
            .ok_or_else(|| anyhow!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, None) => unreachable!("clap requires one of --config/--preset"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(args: GenArgs) -> Outcome {
    let cfg = load_config(&args).map_err(fail(EXIT_INPUT))?;
    let protocol = protocol::generate(&cfg).map_err(|e| fail(EXIT_OTHER)(e.into()))?;
    io::write_bundle(&protocol, &args.out).map_err(|e| fail(EXIT_OTHER)(e.into()))?;
    let manifest = io::Manifest::describe(&protocol);
    println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serialization"));
    Ok(0)
}

fn parse_methods(names: &[String]) -> anyhow::Result<Vec<Method>> {
    if names.is_empty() {
        return Ok(Method::ALL.to_vec());
    }
    let mut out: Vec<Method> = Vec::new();
    for name in names.iter().filter(|n| !n.trim().is_empty()) {
        let m: Method = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn write_evaluation(ev: &Evaluation, dir: &Path) -> Outcome {
    write(&dir.join("report.json"), &ev.report.to_json())?;
    let curves = dir.join("curves");
    for (m, c) in &ev.curves {
        write(&curves.join(format!("{}_{}.csv", m.name(), c.metric.name())), &c.to_csv())?;
    }
    for (label, set) in [("oracle", &ev.oracle_curves), ("random", &ev.random_curves)] {
        for c in set.iter() {
            write(&curves.join(format!("{label}_{}.csv", c.metric.name())), &c.to_csv())?;
        }
    }
    if let Some(cal) = &ev.calibrator {
        io::write_calibrator(cal, &dir.join("calibrator.json")).map_err(|e| fail(EXIT_OTHER)(e.into()))?;
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let bundle = io::read_bundle(&args.bundle)
        .map_err(|e| anyhow!("{} [{}]", e, e.code()))
        .map_err(fail(EXIT_INPUT))?;
    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    let methods = parse_methods(&args.methods).map_err(fail(EXIT_INPUT))?;
    let mut code = 0;
    for &fpir in &args.fpir {
        let cfg = EvalConfig {
            target_fpir: fpir,
            methods: methods.clone(),
            temperature: args.temperature,
            beta: args.beta,
            max_reject_fraction: args.max_reject_fraction,
            seed: args.seed,
            stats_source: match args.stats_source {
                StatsArg::Validation => StatsSource::Validation,
                StatsArg::Test => StatsSource::Test,
            },
            ..EvalConfig::default()
        };
        log::info!("evaluating at FPIR {fpir}");
        let ev = eval::evaluate(&bundle.protocol, &cfg).map_err(|e| match e {
            EvalError::EmptyValidation(_) => fail(EXIT_EMPTY_VALIDATION)(e.into()),
            EvalError::Core(Error::InvalidParameter { .. }) => fail(EXIT_INPUT)(e.into()),
            EvalError::Core(_) => fail(EXIT_OTHER)(e.into()),
        })?;
        let dir = if args.fpir.len() == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("fpir_{fpir}"))
        };
        write_evaluation(&ev, &dir)?;
        let r = &ev.report;
        println!(
            "FPIR {fpir}: tau {:.6} kappa {:.6} FNIR {:.4} F1 {:.4}",
            r.tau, r.kappa, r.operating_point.fnir, r.operating_point.f1
        );
        for m in r.methods.keys() {
            let shown = r.prr(*m, Metric::F1).map_or("undefined".to_string(), |v| format!("{v:.4}"));
            println!("  {:<10} F1-PRR {shown}", m.name());
        }
        if r.has_undefined_prr() {
            log::warn!("PRR undefined at FPIR {fpir}: the oracle and random references coincide");
            code = EXIT_UNDEFINED_PRR;
        }
    }
    Ok(code)
}

fn cmd_verify(args: VerifyArgs) -> Outcome {
    let fault = verify::Fault(if args.inject_fault { 1e-6 } else { 0.0 });
    let report = verify::run(&args.scope, args.seed, fault)
        .expect("scope validated by clap")
        .map_err(|e| fail(EXIT_VERIFY)(e.into()))?;
    write(&args.out.join("verify.json"), &report.to_json())?;
    for c in &report.checks {
        println!(
            "{:<28} {:<4} max deviation {:.3e} (tolerance {:.0e}, {} cases)",
            c.name,
            if c.status == verify::Status::Pass { "ok" } else { "FAIL" },
            c.max_deviation,
            c.tolerance,
            c.n_cases
        );
    }
    Ok(if report.passed { 0 } else { EXIT_VERIFY })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
