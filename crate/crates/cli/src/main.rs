use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kgattack_core::{
    ablation_sweep, generate_synthetic, pretrain, run_experiment_on, AttackerKind, DataConfig, DataFiles, ExperimentConfig,
    SweepAxis, SyntheticSpec,
};

/// Output directory override honoured when `--out` is absent.
const OUT_ENV: &str = "KGATTACK_OUT";

#[derive(Parser)]
#[command(name = "kgattack", version, about = "Knowledge-graph guided promotion attacks on recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults to the built-in synthetic setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction file, triple file and item map.
    GenData(Common),
    /// Train TransE embeddings for the configured KG.
    Pretrain(Common),
    /// Run one attacker over the configured seeds.
    Attack {
        #[command(flatten)]
        common: Common,
        /// kgattack, random, target or target-kg.
        #[arg(long)]
        attacker: Option<String>,
    },
    /// Vary one knob and report the median HR per setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// epsilon, hops or budget.
        #[arg(long)]
        axis: String,
        /// Comma separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        attacker: Option<String>,
    },
    /// Compare every attacker against the unattacked system.
    Eval(Common),
}

struct Prepared {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn prepare(common: &Common, attacker: Option<&str>) -> Result<Prepared> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).context("config stage failed")?,
        None => ExperimentConfig::with_data(DataConfig {
            synthetic: Some(SyntheticSpec::default()),
            files: None,
        }),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(a) = attacker {
        cfg.attacker = a.parse().context("config stage failed")?;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone());
    cfg.out_dir = out.clone();
    cfg.validate().context("config stage failed")?;
    fs::create_dir_all(&out).with_context(|| format!("output stage failed: cannot create {}", out.display()))?;
    Ok(Prepared { cfg, out })
}

fn save_config(p: &Prepared) -> Result<()> {
    let text = p.cfg.to_toml()?;
    fs::write(p.out.join("config.toml"), text).context("output stage failed: writing config.toml")
}

fn gen_data(common: &Common) -> Result<()> {
    let mut p = prepare(common, None)?;
    let mut spec = p
        .cfg
        .data
        .synthetic
        .clone()
        .context("data stage failed: gen-data needs a synthetic data section")?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec).context("data stage failed")?;
    let files = data.write(&p.out).context("output stage failed")?;
    // Written next to the data, so plain file names resolve.
    let name = |f: &std::path::Path| f.file_name().map(PathBuf::from).unwrap_or_default();
    p.cfg.data = DataConfig {
        synthetic: None,
        files: Some(DataFiles {
            interactions: name(&files.interactions),
            triples: name(&files.triples),
            item_map: name(&files.item_map),
        }),
    };
    save_config(&p)?;
    println!("wrote {} interactions and {} triples to {}", data.interactions.len(), data.triples.len(), p.out.display());
    Ok(())
}

fn pretrain_cmd(common: &Common) -> Result<()> {
    let p = prepare(common, None)?;
    let data = p.cfg.data.build().context("data stage failed")?;
    let mut cfg = p.cfg.pretrain.clone();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let trained = pretrain(&data.graph, &cfg).context("pretrain stage failed")?;
    trained
        .embeddings
        .save(&p.out.join("embeddings.ckpt"))
        .context("output stage failed")?;
    let mut log = fs::File::create(p.out.join("pretrain_loss.csv")).context("output stage failed")?;
    writeln!(log, "# config {}", p.cfg.hash())?;
    writeln!(log, "epoch,loss")?;
    for (i, l) in trained.loss_trace.iter().enumerate() {
        writeln!(log, "{i},{l}")?;
    }
    println!(
        "loss {:.4} -> {:.4} over {} epochs",
        trained.loss_trace.first().copied().unwrap_or(f64::NAN),
        trained.loss_trace.last().copied().unwrap_or(f64::NAN),
        trained.loss_trace.len()
    );
    Ok(())
}

fn run_and_write(p: &Prepared, attackers: &[AttackerKind]) -> Result<()> {
    let data = p.cfg.data.build().context("data stage failed")?;
    let result = run_experiment_on(&p.cfg, &data, attackers)?;
    result.write(&p.out).context("output stage failed")?;
    save_config(p)?;
    println!("attacker,k,HR,NDCG (median over seeds)");
    for r in result.rows.iter().filter(|r| r.seed.is_none()) {
        println!("{},{},{:.4},{:.4}", r.attacker, r.k, r.hr, r.ndcg);
    }
    Ok(())
}

fn sweep(common: &Common, axis: &str, values: &[f64], attacker: Option<&str>) -> Result<()> {
    let p = prepare(common, attacker)?;
    let axis: SweepAxis = axis.parse().context("config stage failed")?;
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    let table = ablation_sweep(&p.cfg, axis, &values)?;
    let write = |name: String, body: String| -> Result<()> {
        let path = p.out.join(name);
        fs::write(&path, format!("# config {}\n{body}", p.cfg.hash())).with_context(|| format!("output stage failed: {}", path.display()))
    };
    write(format!("sweep_{}.csv", axis.label().to_lowercase()), table.render())?;
    write(format!("sweep_{}_long.csv", axis.label().to_lowercase()), table.render_long())?;
    save_config(&p)?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Pretrain(c) => pretrain_cmd(&c),
        Command::Attack { common, attacker } => {
            let p = prepare(&common, attacker.as_deref())?;
            let kind = p.cfg.attacker;
            run_and_write(&p, &[kind])
        }
        Command::Sweep {
            common,
            axis,
            values,
            attacker,
        } => sweep(&common, &axis, &values, attacker.as_deref()),
        Command::Eval(c) => {
            let p = prepare(&c, None)?;
            run_and_write(&p, &AttackerKind::ALL)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
