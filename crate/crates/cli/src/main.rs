//! `uvmtl`: dataset generation, training, evaluation, gradient checks and
//! ablation sweeps from the command line.
//!
//! Every configuration key is also a flag (`learning_rate` becomes
//! `--learning-rate`); flags override values read from `--config`. Dataset
//! keys take a `--data-` prefix outside `gen-data`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use uvmtl::config::{ablation, RunConfig, ABLATIONS, RUN_KEYS};
use uvmtl::model::Model;
use uvmtl::parallel::{init_from_env, Execution};
use uvmtl::synth::{generate, Dataset, GenConfig, GEN_KEYS};
use uvmtl::train::{evaluate, metrics_csv, split, train, Evaluation};
use uvmtl::{checkpoint, gradsuite};

/// A flag that parsed but carries an unusable value. Exits with status 2.
#[derive(Debug)]
struct BadFlag(String);

impl std::fmt::Display for BadFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadFlag {}

/// A check that ran and did not pass. Exits with status 1.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn key_args(keys: &[&str], prefix: &str, is_bool: impl Fn(&str) -> bool, heading: &'static str) -> Vec<Arg> {
    keys.iter()
        .map(|&k| {
            let id = format!("{prefix}{k}");
            let arg = Arg::new(id.clone())
                .long(flag_name(&id))
                .value_name("VALUE")
                .help_heading(heading);
            if is_bool(k) {
                arg.num_args(0..=1).default_missing_value("true")
            } else {
                arg.num_args(1)
            }
        })
        .collect()
}

fn run_args() -> Vec<Arg> {
    let defaults = RunConfig::default();
    let is_bool = |k: &str| matches!(defaults.get(k).as_deref(), Some("true" | "false"));
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("run configuration as `key = value` lines")];
    args.extend(key_args(RUN_KEYS, "", is_bool, "Run options"));
    args
}

fn data_args(prefix: &str) -> Vec<Arg> {
    let id = format!("{prefix}config");
    let mut args = vec![Arg::new(id.clone())
        .long(flag_name(&id))
        .value_name("FILE")
        .help("dataset configuration as `key = value` lines")];
    args.extend(key_args(GEN_KEYS, prefix, |_| false, "Dataset options"));
    args
}

fn source_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("data")
        .long("data")
        .value_name("FILE")
        .help("dataset file written by gen-data; generated in memory when absent")];
    args.extend(data_args("data_"));
    args
}

fn cli() -> Command {
    Command::new("uvmtl")
        .about("Multimodal multi-task training on a synthetic benchmark")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Generate a synthetic dataset file")
                .arg(Arg::new("out").long("out").short('o').value_name("FILE").required(true))
                .args(data_args("")),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model; writes checkpoint, metrics CSV and trace CSV")
                .arg(
                    Arg::new("out")
                        .long("out")
                        .short('o')
                        .value_name("DIR")
                        .default_value("run"),
                )
                .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue))
                .args(run_args())
                .args(source_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .required(true),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["val", "train", "all"])
                        .default_value("val"),
                )
                .args(run_args())
                .args(source_args()),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Run the finite-difference gradient suite")
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .default_value("5")
                        .help("number of seeded inputs per case"),
                )
                .arg(
                    Arg::new("step")
                        .long("step")
                        .value_parser(clap::value_parser!(f64))
                        .default_value("1e-5"),
                )
                .arg(
                    Arg::new("tol")
                        .long("tol")
                        .value_parser(clap::value_parser!(f64))
                        .default_value("1e-4"),
                )
                .arg(
                    Arg::new("case")
                        .long("case")
                        .value_name("NAME")
                        .action(ArgAction::Append)
                        .help("restrict to these cases"),
                ),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train a matrix of ablations over seeds and tabulate mAcc")
                .arg(
                    Arg::new("variants")
                        .long("variants")
                        .value_delimiter(',')
                        .help(format!(
                            "ablations to run [default: all] [possible: {}]",
                            ABLATIONS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
                        )),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_delimiter(',')
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0,1,2,3,4"),
                )
                .arg(
                    Arg::new("summary")
                        .long("summary")
                        .value_name("FILE")
                        .help("also write the per-run results as CSV"),
                )
                .args(run_args())
                .args(source_args()),
        )
}

fn bad(e: impl std::fmt::Display) -> anyhow::Error {
    BadFlag(e.to_string()).into()
}

fn read_text(path: &str) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {path}"))
}

fn run_config(m: &ArgMatches, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (m.get_one::<String>("config"), fallback) {
        (Some(p), _) => RunConfig::from_text(&read_text(p)?).map_err(bad)?,
        (None, Some(p)) if p.exists() => {
            RunConfig::from_text(&read_text(&p.to_string_lossy())?).map_err(bad)?
        }
        _ => RunConfig::default(),
    };
    for &k in RUN_KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v).map_err(|e| bad(format!("--{}: {e}", flag_name(k))))?;
        }
    }
    Ok(cfg)
}

/// Dataset configuration from `--{prefix}config` and `--{prefix}<key>`.
/// Returns whether the seed was given explicitly.
fn gen_config(m: &ArgMatches, prefix: &str) -> anyhow::Result<(GenConfig, bool)> {
    let mut cfg = match m.get_one::<String>(&format!("{prefix}config")) {
        Some(p) => GenConfig::from_text(&read_text(p)?).map_err(bad)?,
        None => GenConfig::default(),
    };
    let mut seeded = false;
    for &k in GEN_KEYS {
        let id = format!("{prefix}{k}");
        if let Some(v) = m.get_one::<String>(&id) {
            cfg.set(k, v).map_err(|e| bad(format!("--{}: {e}", flag_name(&id))))?;
            seeded |= k == "seed";
        }
    }
    cfg.validate().map_err(bad)?;
    Ok((cfg, seeded))
}

/// The dataset named by `--data`, or one generated from the dataset flags.
/// A generated dataset follows the run seed unless `--data-seed` is given.
fn dataset(m: &ArgMatches, run_seed: u64) -> anyhow::Result<Dataset> {
    if let Some(p) = m.get_one::<String>("data") {
        return Dataset::load(p).with_context(|| format!("loading dataset {p}"));
    }
    let (mut cfg, seeded) = gen_config(m, "data_")?;
    if !seeded {
        cfg.seed = run_seed;
    }
    Ok(generate(&cfg)?)
}

fn gen_data(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, _) = gen_config(m, "")?;
    let out = m.get_one::<String>("out").expect("required");
    let ds = generate(&cfg)?;
    ds.save(out).with_context(|| format!("writing {out}"))?;
    println!("wrote {} samples to {out}", ds.len());
    println!("sha256 {}", ds.hash()?);
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn report(ev: &Evaluation) -> String {
    let accs: Vec<String> = ev.acc.iter().map(|&a| pct(a)).collect();
    format!("acc [{}]  mAcc {}  |cos| {:.4}", accs.join(", "), pct(ev.macc), ev.mean_abs_cos)
}

fn train_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m, None)?;
    let data = dataset(m, cfg.seed)?;
    cfg.validate(data.num_tasks()).map_err(bad)?;
    let dir = PathBuf::from(m.get_one::<String>("out").expect("has default"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let out = train(&cfg, &data)?;
    if !m.get_flag("quiet") {
        for r in &out.metrics {
            println!(
                "epoch {:>3}/{}  loss {:.4}  mAcc {}",
                r.epoch,
                cfg.epochs,
                r.train_loss.iter().sum::<f64>() / r.train_loss.len() as f64,
                pct(r.macc)
            );
        }
    }
    checkpoint::save(&out.params, &dir.join("checkpoint.uvck"))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&cfg, &data, &out.metrics))?;
    fs::write(dir.join("trace.csv"), out.history.trace_csv())?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    println!("final {}", report(&out.eval));
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let ck = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let cfg = run_config(m, ck.parent().map(|d| d.join("config.txt")).as_deref())?;
    let data = dataset(m, cfg.seed)?;
    let loaded = checkpoint::load(&ck).with_context(|| format!("loading {}", ck.display()))?;
    let (model, mut ps) = Model::init(&cfg, &data.config)?;
    ps.load_values(&loaded)?;
    let (train_idx, val_idx) = split(data.len(), cfg.val_fraction);
    let idx = match m.get_one::<String>("split").map(String::as_str) {
        Some("train") => train_idx,
        Some("all") => (0..data.len()).collect(),
        _ => val_idx,
    };
    let ev = evaluate(&model, &ps, &data, &idx, Execution::Parallel)?;
    println!("{} samples  {}", idx.len(), report(&ev));
    Ok(())
}

fn gradcheck_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let n = *m.get_one::<u64>("seeds").expect("has default");
    let h = *m.get_one::<f64>("step").expect("has default");
    let tol = *m.get_one::<f64>("tol").expect("has default");
    if !(h > 0.0) || !(tol > 0.0) {
        return Err(bad("--step and --tol must be positive"));
    }
    let names: Vec<String> = match m.get_many::<String>("case") {
        Some(c) => c.cloned().collect(),
        None => gradsuite::case_names().into_iter().map(String::from).collect(),
    };
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for name in &names {
        let mut case_worst: f64 = 0.0;
        for seed in 0..n {
            let r = gradsuite::run_case(name, seed, h)?
                .ok_or_else(|| bad(format!("unknown case `{name}`")))?;
            case_worst = case_worst.max(r.worst());
        }
        let ok = case_worst < tol;
        println!("{:<28} {:.3e}  {}", name, case_worst, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
        worst = worst.max(case_worst);
    }
    println!("max relative error {worst:.3e} over {} cases x {n} seeds (tol {tol:e})", names.len());
    if !failed.is_empty() {
        return Err(CheckFailed(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

struct AblationRun {
    variant: String,
    seed: u64,
    eval: Evaluation,
}

fn ablate_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let base = run_config(m, None)?;
    let variants: Vec<String> = match m.get_many::<String>("variants") {
        Some(v) => v.cloned().collect(),
        None => ABLATIONS.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let seeds: Vec<u64> = m.get_many::<u64>("seeds").expect("has default").copied().collect();
    let mut jobs = Vec::new();
    for v in &variants {
        for &seed in &seeds {
            let mut cfg = ablation(&base, v).map_err(bad)?;
            cfg.seed = seed;
            // runs are spread over the pool instead
            cfg.sequential = true;
            let data = dataset(m, seed)?;
            cfg.validate(data.num_tasks()).map_err(bad)?;
            jobs.push((v.clone(), cfg, data));
        }
    }
    let runs: Vec<AblationRun> = Execution::Parallel
        .map(&jobs, |(v, cfg, data)| {
            train(cfg, data).map(|out| AblationRun {
                variant: v.clone(),
                seed: cfg.seed,
                eval: out.eval,
            })
        })
        .into_iter()
        .collect::<uvmtl::Result<_>>()?;

    let mut table = format!("{:<12}", "variant");
    for s in &seeds {
        let _ = write!(table, " {:>7}", format!("s{s}"));
    }
    table.push_str("    mean\n");
    for v in &variants {
        let row: Vec<f64> = runs.iter().filter(|r| &r.variant == v).map(|r| r.eval.macc).collect();
        let _ = write!(table, "{v:<12}");
        for a in &row {
            let _ = write!(table, " {:>7}", pct(*a));
        }
        let _ = writeln!(table, " {:>7}", pct(row.iter().sum::<f64>() / row.len() as f64));
    }
    print!("{table}");

    if let Some(path) = m.get_one::<String>("summary") {
        let n = runs.first().map_or(0, |r| r.eval.acc.len());
        let mut csv = String::from("variant,seed,mAcc");
        for j in 1..=n {
            let _ = write!(csv, ",acc_task{j}");
        }
        csv.push_str(",mean_abs_cos\n");
        for r in &runs {
            let _ = write!(csv, "{},{},{}", r.variant, r.seed, r.eval.macc);
            for a in &r.eval.acc {
                let _ = write!(csv, ",{a}");
            }
            let _ = writeln!(csv, ",{}", r.eval.mean_abs_cos);
        }
        fs::write(path, csv).with_context(|| format!("writing {path}"))?;
    }
    Ok(())
}

fn dispatch(m: &ArgMatches) -> anyhow::Result<()> {
    match m.subcommand() {
        Some(("gen-data", s)) => gen_data(s),
        Some(("train", s)) => train_cmd(s),
        Some(("eval", s)) => eval_cmd(s),
        Some(("gradcheck", s)) => gradcheck_cmd(s),
        Some(("ablate", s)) => ablate_cmd(s),
        _ => bail!("unknown subcommand"),
    }
}

fn main() -> ExitCode {
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_from_env();
    match dispatch(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<BadFlag>().is_some() {
                eprintln!("\n{}", cli().render_usage());
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
