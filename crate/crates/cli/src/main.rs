mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use fspll_core::bench::{mean_std, test_episode, Cell};
use fspll_core::episodes::derive_seed;
use fspll_core::trainer::write_run;
use fspll_core::{gradient_suite, meta_test, meta_train, run_benchmark, sweep, write_report, CorruptionSpec, NetworkParams};
use serde_json::json;

use config::{defaults_help, Config};

const WORLD_SALT: u64 = 0x3071D;
const TRAIN_SALT: u64 = 0x7EA1;

#[derive(Parser)]
#[command(name = "fspll", version, about = "Few-shot partial-label learning: training, evaluation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run configuration (see the key list below).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs strictly sequentially. Defaults to all cores.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the world manifest (class means, class split, seeds) to <out>/world.json.
    GenWorld(Common),
    /// Meta-train an embedding; writes config.json, log.csv and checkpoint.json.
    Train(Common),
    /// Meta-test `test.checkpoint` on held-out classes; writes test.csv and summary.json.
    Test(Common),
    /// Run the benchmark grid; writes rounds.csv, summary.csv and meta.json.
    Bench(Common),
    /// Like bench, once per value of `bench.sweep` on shared checkpoints.
    Sweep(Common),
    /// Compare task-loss gradients with finite differences on random tiny tasks.
    GradCheck(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenWorld(c)
            | Command::Train(c)
            | Command::Test(c)
            | Command::Bench(c)
            | Command::Sweep(c)
            | Command::GradCheck(c) => c,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenWorld(_) => "gen-world",
            Command::Train(_) => "train",
            Command::Test(_) => "test",
            Command::Bench(_) => "bench",
            Command::Sweep(_) => "sweep",
            Command::GradCheck(_) => "grad-check",
        }
    }
}

fn main() -> ExitCode {
    let help = defaults_help();
    let mut cmd = Cli::command().after_help(help.clone());
    cmd = cmd.mut_subcommands(|sc| sc.after_help(help.clone()));
    let matches = cmd.clone().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let common = cli.command.common();

    let config_path = match (&common.config, &cli.command) {
        (Some(p), _) => Some(p.clone()),
        (None, Command::GradCheck(_)) => None,
        (None, c) => usage_error(&mut cmd, c.name(), "--config <PATH> is required"),
    };
    if let Some(p) = &config_path {
        if !p.is_file() {
            usage_error(&mut cmd, cli.command.name(), &format!("config file {} does not exist", p.display()));
        }
    }

    let run = || -> anyhow::Result<bool> {
        let mut config = match &config_path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(format!("fspll-{}", cli.command.name())));
        dispatch(&cli.command, &config, &out)
    };
    let result = match common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .context("building the thread pool")
            .and_then(|pool| pool.install(run)),
        None => run(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(cmd: &mut clap::Command, sub: &str, msg: &str) -> ! {
    cmd.build();
    let usage = cmd.find_subcommand_mut(sub).expect("known subcommand").render_usage();
    eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try 'fspll {sub} --help'.");
    std::process::exit(2)
}

/// Returns `Ok(false)` when the command ran but its check failed.
fn dispatch(command: &Command, config: &Config, out: &Path) -> anyhow::Result<bool> {
    match command {
        Command::GenWorld(_) => gen_world(config, out),
        Command::Train(_) => train(config, out),
        Command::Test(_) => test(config, out),
        Command::Bench(_) => bench(config, out, false),
        Command::Sweep(_) => bench(config, out, true),
        Command::GradCheck(c) => grad_check(config, c.out.as_deref()),
    }
    .map_err(|e| e.context(format!("{} failed", command.name())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_world(config: &Config, out: &Path) -> anyhow::Result<bool> {
    let world_seed = derive_seed(config.seed, &[WORLD_SALT]);
    let split = config.world.build(world_seed)?;
    let world = match &config.world.dataset {
        Some(_) => None,
        None => Some(config.world.generate(world_seed)?),
    };
    fs::create_dir_all(out)?;
    let manifest = json!({
        "seed": config.seed,
        "world_seed": world_seed,
        "config": config.world,
        "classes": split.pool.n_classes(),
        "dim": split.pool.dim(),
        "train_classes": split.train,
        "test_classes": split.test,
        "world": world,
    });
    write_json(&out.join("world.json"), &manifest)?;
    println!(
        "world: {} classes ({} meta-train, {} held out), dim {} -> {}",
        split.pool.n_classes(),
        split.train.len(),
        split.test.len(),
        split.pool.dim(),
        out.join("world.json").display()
    );
    Ok(true)
}

fn train(config: &Config, out: &Path) -> anyhow::Result<bool> {
    let split = config.world.build(derive_seed(config.seed, &[WORLD_SALT]))?;
    let (params, log) = meta_train(&config.train, split.pool.as_ref(), &split.train, derive_seed(config.seed, &[TRAIN_SALT]))?;
    write_run(out, config, &log, &params, config.train.log_wall_time)?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        println!("epochs {}: loss {:.6} -> {:.6}, lr {} -> {}", log.epochs.len(), first.loss, last.loss, first.lr, last.lr);
    }
    println!("checkpoint -> {}", out.join("checkpoint.json").display());
    Ok(true)
}

fn test(config: &Config, out: &Path) -> anyhow::Result<bool> {
    let t = &config.test;
    let Some(path) = &t.checkpoint else {
        bail!("test.checkpoint is not set in the config");
    };
    let params = NetworkParams::load(path)?;
    let split = config.world.build(derive_seed(config.seed, &[WORLD_SALT]))?;
    if split.pool.dim() != params.input_dim() {
        bail!("checkpoint expects {}-dimensional features, the world has {}", params.input_dim(), split.pool.dim());
    }
    if t.rounds == 0 {
        bail!("test.rounds must be at least 1");
    }
    CorruptionSpec::new(t.p, t.r)?;
    let cell = Cell { ways: t.ways, shots: t.shots, p: t.p, r: t.r };
    let rows = (0..t.rounds)
        .map(|round| {
            let ep = test_episode(split.pool.as_ref(), &split.test, &cell, t.query_shots, config.seed, 0, round)?;
            let outcome = meta_test(&params, &ep, &t.rectify)?;
            Ok((ep.content_hash(), outcome.accuracy))
        })
        .collect::<fspll_core::Result<Vec<_>>>()?;

    fs::create_dir_all(out)?;
    let mut csv = String::from("round,episode,accuracy\n");
    for (i, (hash, acc)) in rows.iter().enumerate() {
        csv.push_str(&format!("{i},{hash},{acc:.6}\n"));
    }
    fs::write(out.join("test.csv"), csv)?;
    let accs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mean, std) = mean_std(&accs);
    write_json(
        &out.join("summary.json"),
        &json!({ "cell": cell.label(), "rounds": t.rounds, "mean": mean, "std": std, "std_kind": "population", "seed": config.seed }),
    )?;
    println!("{}: accuracy {mean:.4} ± {std:.4} over {} rounds", cell.label(), t.rounds);
    Ok(true)
}

fn bench(config: &Config, out: &Path, is_sweep: bool) -> anyhow::Result<bool> {
    let spec = config.bench_spec();
    let result = if is_sweep { sweep(&spec)? } else { run_benchmark(&spec)? };
    write_report(&result, &spec, out)?;
    for cell in &result.cells {
        for m in &cell.methods {
            println!("{:<16} {:<24} {:.4} ± {:.4}", cell.label, m.method, m.mean, m.std);
        }
    }
    println!("report -> {}", out.display());
    Ok(true)
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn grad_check(config: &Config, out: Option<&Path>) -> anyhow::Result<bool> {
    let cases = gradient_suite(&config.grad_check, config.seed)?;
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    for (i, c) in cases.iter().enumerate() {
        println!(
            "task {i:>3}: d={} N={} K={} r={} hidden={} m={}  checked {:>4} excluded {:>3}  max rel err {:.3e}",
            c.dim, c.ways, c.shots, c.r, c.hidden, c.output, c.checked, c.excluded, c.max_rel_error
        );
    }
    println!("max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:e})");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("grad_check.json"), &json!({ "seed": config.seed, "max_rel_error": worst, "cases": cases }))?;
    }
    let ok = worst < GRAD_TOLERANCE;
    if !ok {
        eprintln!("error: gradient check failed: {worst:e} >= {GRAD_TOLERANCE:e}");
    }
    Ok(ok)
}
