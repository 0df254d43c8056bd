//! `ccver bench`: one CSV row per case plus an aggregate row, and an
//! optional per-round history table from full branch-and-bound runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use ccver_core::bab::{aggregate, case_metrics, verify, HistoryEntry, VerifyConfig};
use ccver_core::model::io::{load_network, InstanceFile};
use ccver_core::mpcc::{self, build_problem, SolveOptions, SolveStatus};
use ccver_core::oracle::{self, PgdConfig};
use ccver_core::propagate::{optimize_relaxation, root_bounds, OptimizeConfig};
use ccver_core::{Error, SplitSet, VerificationInstance};
use clap::Args;
use rayon::prelude::*;

use crate::format::cell;
use crate::Overrides;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Directory of `<name>.instance.json` files, each next to
    /// `<name>.model.json` unless --model is given.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV output; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also run branch and bound per case and write its history here.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = oracle::DEFAULT_PATTERN_CAP)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "CCVER_TIMEOUT", default_value_t = 600.0)]
    timeout: f64,
    #[command(flatten)]
    overrides: Overrides,
}

struct Case {
    name: String,
    inst: VerificationInstance,
}

struct Row {
    name: String,
    f_star: Option<f64>,
    oracle_note: Option<&'static str>,
    lb_root: f64,
    ub_nlp: Option<f64>,
    ub_pgd: f64,
    time_lb: f64,
    time_ub: f64,
    history: Vec<HistoryEntry>,
}

fn load_cases(args: &BenchArgs) -> Result<Vec<Case>> {
    let mut names: Vec<String> = fs::read_dir(&args.dir)
        .with_context(|| format!("reading {}", args.dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".instance.json")).map(str::to_owned))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no *.instance.json files in {}", args.dir.display());
    }
    let shared = args.model.as_deref().map(load_network).transpose()?.map(Arc::new);
    names
        .into_iter()
        .map(|name| {
            let net = match &shared {
                Some(n) => n.clone(),
                None => Arc::new(load_network(args.dir.join(format!("{name}.model.json")))?),
            };
            let mut file = InstanceFile::load(args.dir.join(format!("{name}.instance.json")))?;
            args.overrides.apply(&mut file);
            let inst = file.into_instance(net).with_context(|| format!("case {name}"))?;
            Ok(Case { name, inst })
        })
        .collect()
}

fn run_case(case: &Case, args: &BenchArgs) -> Result<Row> {
    let inst = &case.inst;
    let (f_star, oracle_note) = match oracle::global_min(inst, args.cap) {
        Ok(g) => (Some(g.f_star), None),
        Err(Error::PatternCap { .. }) => (None, Some("skipped-cap")),
        Err(Error::Unsupported(_)) => (None, Some("unsupported")),
        Err(e) => return Err(e.into()),
    };
    let t = Instant::now();
    let bounds = root_bounds(inst);
    let lb_root = optimize_relaxation(inst, &bounds, &SplitSet::new(), None, OptimizeConfig::default()).result.lb;
    let time_lb = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let problem = build_problem(inst, &bounds, &SplitSet::new())?;
    let opts = SolveOptions {
        seed: args.seed,
        ..SolveOptions::default()
    };
    let sol = mpcc::solve(&problem, None, &opts)?;
    let time_ub = t.elapsed().as_secs_f64();
    let ub_nlp = (sol.status != SolveStatus::Infeasible).then_some(sol.objective);
    let (ub_pgd, _) = oracle::pgd_upper_bound(
        inst,
        &PgdConfig {
            seed: args.seed,
            ..PgdConfig::default()
        },
    )?;
    let history = if args.history.is_some() {
        let cfg = VerifyConfig {
            seed: args.seed,
            timeout: Duration::from_secs_f64(args.timeout),
            ..VerifyConfig::default()
        };
        verify(inst, &cfg)?.history
    } else {
        Vec::new()
    };
    Ok(Row {
        name: case.name.clone(),
        f_star,
        oracle_note,
        lb_root,
        ub_nlp,
        ub_pgd,
        time_lb,
        time_ub,
        history,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

fn write_table(rows: &[Row], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "case", "f_star", "lb_root", "ub_nlp", "ub_pgd", "abs_err", "rel_err", "time_lb", "time_ub", "phi", "status",
    ])?;
    let metrics = aggregate(rows.iter().map(|r| case_metrics(r.ub_nlp, r.f_star)).collect());
    for (r, m) in rows.iter().zip(&metrics.cases) {
        let f = match (r.f_star, r.oracle_note) {
            (Some(v), _) => cell(v),
            (None, Some(note)) => note.to_owned(),
            (None, None) => String::new(),
        };
        w.write_record([
            r.name.clone(),
            f,
            cell(r.lb_root),
            opt(r.ub_nlp),
            cell(r.ub_pgd),
            opt(m.abs_err),
            opt(m.rel_err),
            format!("{:.6}", r.time_lb),
            format!("{:.6}", r.time_ub),
            String::new(),
            r.oracle_note.unwrap_or("ok").to_owned(),
        ])?;
    }
    let total_lb: f64 = rows.iter().map(|r| r.time_lb).sum();
    let total_ub: f64 = rows.iter().map(|r| r.time_ub).sum();
    w.write_record([
        "aggregate".to_owned(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        opt(metrics.mean_abs_err),
        opt(metrics.mean_rel_err),
        format!("{total_lb:.6}"),
        format!("{total_ub:.6}"),
        cell(metrics.upper_rate),
        String::new(),
    ])?;
    w.flush()?;
    Ok(())
}

fn write_history(rows: &[Row], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["case", "round", "lower", "upper", "gap"])?;
    for r in rows {
        for h in &r.history {
            w.write_record([
                r.name.clone(),
                h.round.to_string(),
                cell(h.lower),
                cell(h.upper),
                cell(h.upper - h.lower),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &BenchArgs) -> Result<u8> {
    if args.workers == 0 {
        bail!("--workers must be at least 1");
    }
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        bail!("timeout must be positive, got {}", args.timeout);
    }
    let cases = load_cases(args)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
    let rows: Vec<Row> = pool.install(|| cases.par_iter().map(|c| run_case(c, args)).collect::<Result<_>>())?;
    match &args.output {
        Some(path) => write_table(&rows, fs::File::create(path).with_context(|| format!("writing {}", path.display()))?)?,
        None => write_table(&rows, std::io::stdout().lock())?,
    }
    if let Some(path) = &args.history {
        write_history(&rows, path)?;
    }
    Ok(0)
}
