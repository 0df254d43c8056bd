//! `ccver`: command-line front end of the verifier.
//!
//! Exit codes: 0 safe (or success for non-verifying commands), 1 unsafe,
//! 2 undecided gap, 3 usage or input error.

mod bench;
mod format;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use ccver_core::bab::{verify, Verdict, VerifyConfig};
use ccver_core::model::io::{load_network, save_network, InstanceFile};
use ccver_core::model::toy;
use ccver_core::mpcc::{self, build_problem, SolveOptions};
use ccver_core::oracle;
use ccver_core::propagate::{ibp_bounds, ibp_objective_bound, optimize_relaxation, root_bounds, OptimizeConfig};
use ccver_core::{Norm, SplitSet, VerificationInstance};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const EXIT_ERROR: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ccver", version, about = "Global robustness verification of ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run branch and bound and write a certificate.
    Verify(VerifyArgs),
    /// Interval and backward-propagation bounds at the root.
    Bounds(CaseArgs),
    /// Solve the complementarity program once for an upper bound.
    Upper(UpperArgs),
    /// Exact minimum by enumerating activation patterns.
    Oracle(OracleArgs),
    /// Tabulate bounds over a directory of cases.
    Bench(bench::BenchArgs),
    /// Write the two-neuron example or random networks with instances.
    GenToy(GenToyArgs),
}

/// Model and instance, from a file or inline flags, plus overrides.
#[derive(Args, Debug, Clone)]
pub struct CaseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Instance file; alternatively give --x0, --delta and --label.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Comma separated nominal input.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    norm: Option<Norm>,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long)]
    target: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_max: Option<usize>,
    #[arg(long)]
    eps_comp: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
}

impl Overrides {
    fn apply(&self, file: &mut InstanceFile) {
        if let Some(v) = self.epsilon {
            file.epsilon = v;
        }
        if let Some(v) = self.lambda {
            file.lambda = v;
        }
        if let Some(v) = self.tau_max {
            file.tau_max = v;
        }
        if let Some(v) = self.eps_comp {
            file.eps_comp = v;
        }
        if let Some(v) = self.t_max {
            file.t_max = v;
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wall-clock limit in seconds.
    #[arg(long, env = "CCVER_TIMEOUT", default_value_t = 600.0)]
    timeout: f64,
    /// Random restarts of the root NLP solve.
    #[arg(long, default_value_t = 2)]
    restarts: usize,
    /// Set the re-solve interval from measured costs at the root.
    #[arg(long)]
    calibrate_tau: bool,
    /// Write the root program in JSON form here.
    #[arg(long)]
    dump_problem: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct UpperArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    restarts: usize,
    #[arg(long)]
    no_polish: bool,
    #[arg(long)]
    dump_problem: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    case: CaseArgs,
    /// Refuse instances with more unstable neurons than this.
    #[arg(long, default_value_t = oracle::DEFAULT_PATTERN_CAP)]
    cap: usize,
}

#[derive(Args, Debug)]
struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write only the two-neuron example (`example.model.json`,
    /// `example.instance.json`).
    #[arg(long)]
    example: bool,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "2,8,8,2")]
    widths: Vec<usize>,
    /// Radii, used in turn.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.2")]
    delta: Vec<f64>,
}

impl CaseArgs {
    fn instance_file(&self) -> Result<InstanceFile> {
        let mut file = match &self.instance {
            Some(path) => InstanceFile::load(path)?,
            None => {
                let (Some(x0), Some(delta), Some(label)) = (self.x0.clone(), self.delta, self.label) else {
                    bail!("give --instance or all of --x0, --delta and --label");
                };
                InstanceFile::from_json(&json!({"x0": x0, "delta": delta, "label": label}).to_string())?
            }
        };
        if self.instance.is_some() && (self.x0.is_some() || self.delta.is_some() || self.label.is_some()) {
            bail!("--instance conflicts with inline --x0/--delta/--label");
        }
        if let Some(norm) = self.norm {
            file.norm = norm;
        }
        if let Some(t) = self.target {
            file.target = Some(t);
        }
        self.overrides.apply(&mut file);
        Ok(file)
    }

    fn load(&self) -> Result<VerificationInstance> {
        let net = load_network(&self.model)?;
        let inst = self.instance_file()?.into_instance(Arc::new(net))?;
        Ok(inst)
    }
}

fn emit(output: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dump(problem: &mpcc::MpccProblem, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(&problem.debug_json())?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn solve_options(seed: u64, restarts: usize, polish: bool) -> SolveOptions {
    SolveOptions {
        seed,
        restarts,
        polish,
        ..SolveOptions::default()
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<u8> {
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        bail!("timeout must be positive, got {}", args.timeout);
    }
    let inst = args.case.load()?;
    if args.dump_problem.is_some() {
        let problem = build_problem(&inst, &root_bounds(&inst), &SplitSet::new())?;
        dump(&problem, args.dump_problem.as_deref())?;
    }
    let cfg = VerifyConfig {
        seed: args.seed,
        timeout: Duration::from_secs_f64(args.timeout),
        solve: solve_options(args.seed, args.restarts, true),
        calibrate_tau: args.calibrate_tau,
        ..VerifyConfig::default()
    };
    let cert = verify(&inst, &cfg)?;
    emit(args.case.output.as_deref(), &format::certificate(&cert))?;
    Ok(match cert.verdict {
        Verdict::Safe => 0,
        Verdict::Unsafe => 1,
        Verdict::Gap => 2,
    })
}

fn cmd_bounds(args: &CaseArgs) -> Result<u8> {
    let inst = args.load()?;
    let t = Instant::now();
    let ibp = ibp_bounds(&inst.network, inst.x0.view(), inst.delta);
    let bounds = root_bounds(&inst);
    let splits = SplitSet::new();
    let opt = optimize_relaxation(&inst, &bounds, &splits, None, OptimizeConfig::default());
    let report = json!({
        "lower": bounds.lower.iter().map(|v| format::vec(v.as_slice().unwrap_or_default())).collect::<Vec<_>>(),
        "upper": bounds.upper.iter().map(|v| format::vec(v.as_slice().unwrap_or_default())).collect::<Vec<_>>(),
        "unstable": bounds.unstable().len(),
        "unstable_interval": ibp.unstable().len(),
        "interval_lower": format::num(ibp_objective_bound(&inst, &ibp, &splits)),
        "root_lower": format::num(opt.initial_lb),
        "optimized_lower": format::num(opt.result.lb),
        "time_s": t.elapsed().as_secs_f64(),
    });
    emit(args.output.as_deref(), &report)?;
    Ok(0)
}

fn cmd_upper(args: &UpperArgs) -> Result<u8> {
    let inst = args.case.load()?;
    let t = Instant::now();
    let problem = build_problem(&inst, &root_bounds(&inst), &SplitSet::new())?;
    dump(&problem, args.dump_problem.as_deref())?;
    let sol = mpcc::solve(&problem, None, &solve_options(args.seed, args.restarts, !args.no_polish))?;
    let mut report = format::solution(&sol);
    report["time_s"] = json!(t.elapsed().as_secs_f64());
    report["variables"] = json!(problem.num_vars());
    report["complementarity_pairs"] = json!(problem.num_complementarity());
    emit(args.case.output.as_deref(), &report)?;
    Ok(0)
}

fn cmd_oracle(args: &OracleArgs) -> Result<u8> {
    let inst = args.case.load()?;
    let t = Instant::now();
    let g = oracle::global_min(&inst, args.cap)?;
    let report = json!({
        "f_star": format::num(g.f_star),
        "x_star": format::vec(g.x_star.as_slice().unwrap_or_default()),
        "regions_solved": g.regions_solved,
        "unstable": g.unstable.len(),
        "time_s": t.elapsed().as_secs_f64(),
    });
    emit(args.case.output.as_deref(), &report)?;
    Ok(0)
}

fn cmd_gen_toy(args: &GenToyArgs) -> Result<u8> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let write = |name: &str, inst: &VerificationInstance| -> Result<()> {
        save_network(&inst.network, args.out.join(format!("{name}.model.json")))?;
        InstanceFile::from_instance(inst).save(args.out.join(format!("{name}.instance.json")))?;
        Ok(())
    };
    if args.example {
        write("example", &toy::scalar_example_instance())?;
        return Ok(0);
    }
    if args.widths.len() < 2 || args.widths.contains(&0) {
        bail!("widths need at least an input and an output size, all positive");
    }
    if args.delta.is_empty() || args.delta.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        bail!("radii must be finite and nonnegative");
    }
    for i in 0..args.count {
        let seed = args.seed + i as u64;
        let inst = toy::random_instance(&args.widths, args.delta[i % args.delta.len()], seed);
        write(&format!("case_{seed:04}"), &inst)?;
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Upper(a) => cmd_upper(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Bench(a) => bench::run(a),
        Command::GenToy(a) => cmd_gen_toy(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            // library errors already embed their source in the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
