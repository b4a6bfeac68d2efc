mod config;
mod plot;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use avatar_core::advantage::TasShape;
use avatar_core::experiments::{endpoint_weight, run_sweep, RewardSuite, Sweep};
use avatar_core::replay::{BufferConfig, StratifiedBuffer, Tier};
use avatar_core::synthenv;
use avatar_core::trainer::{self, Mode, StepMetrics};
use avatar_core::PromptRecord;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use config::RunConfig;

/// Exit code 2 for anything the operator can fix by editing input, 1 for
/// failures during a run.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Run(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "avatar", version, about = "Train, sweep and inspect off-policy GRPO runs on the synthetic counting task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config with optional [trainer] and [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay the configuration recorded in a manifest.json.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// avatar, baseline_grpo, no_tas, no_offpolicy or no_hinting.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory; defaults to a named folder under $AVATAR_OUT_DIR or ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, checkpoint, buffer, plot and manifest.
    Train(RunArgs),
    /// Train one run per value per seed along one axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// onoff_split, tas_shape, lambda or reward_suite.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; every value of the axis if omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Render metrics columns against step as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mean_reward")]
        columns: Vec<String>,
    },
    /// Summarise a buffer snapshot, one CSV row per tracked prompt.
    BufferDump {
        #[arg(long)]
        buffer: PathBuf,
        /// Config whose [trainer.buffer] section sized the buffer.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic dataset as JSON lines.
    DatasetGen {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepPlan {
    sweep: Sweep,
    seeds: Vec<u64>,
}

/// Enough to rerun a command bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    command: String,
    config: RunConfig,
    seed: u64,
    dataset_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepPlan>,
    /// `(lambda, endpoint weight)` pairs of a lambda sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tas_endpoints: Vec<(f64, f64)>,
    outputs: BTreeMap<String, String>,
    /// Hash of the main table the command wrote.
    output_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_jsonl(records: &[PromptRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn dataset_hash(cfg: &RunConfig) -> Result<String> {
    let t = &cfg.trainer;
    let data = synthenv::generate_dataset_with(t.dataset_size, t.dataset_seed, &t.dataset);
    Ok(sha256_hex(&dataset_jsonl(&data)?))
}

fn read_manifest(path: &Path, command: &str) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if m.command != command {
        return Err(CliError::Usage(format!("{} records a {} run, not {command}", path.display(), m.command)));
    }
    m.config.trainer.validate().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(m)
}

/// Config from file or manifest, with command-line overrides applied.
fn resolve(args: &RunArgs, command: &str) -> Result<(RunConfig, Option<Manifest>)> {
    let (mut cfg, manifest) = match &args.manifest {
        Some(p) => {
            let m = read_manifest(p, command)?;
            (m.config.clone(), Some(m))
        }
        None => (config::load(args.config.as_deref())?, None),
    };
    if let Some(seed) = args.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.trainer.steps = steps;
    }
    if let Some(mode) = &args.mode {
        cfg.trainer.mode = Mode::parse(mode).ok_or_else(|| CliError::Usage(format!("unknown mode `{mode}`")))?;
    }
    cfg.trainer.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(m) = &manifest {
        let hash = dataset_hash(&cfg)?;
        if hash != m.dataset_sha256 {
            return Err(anyhow::anyhow!("dataset hash {hash} does not match the manifest's {}", m.dataset_sha256).into());
        }
    }
    Ok((cfg, manifest))
}

fn out_dir(args: &RunArgs, name: &str) -> PathBuf {
    if let Some(d) = &args.out_dir {
        return d.clone();
    }
    let root = std::env::var_os("AVATAR_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(m)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn reward_series(metrics: &[StepMetrics]) -> plot::Series {
    plot::Series { name: "mean_reward".into(), points: metrics.iter().map(|m| (m.step as f64, m.mean_reward)).collect() }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let (cfg, _) = resolve(args, "train")?;
    let dir = out_dir(args, &format!("{}-seed{}", cfg.trainer.mode.name(), cfg.trainer.seed));
    let out = trainer::run(&cfg.trainer, &dir)?;
    let svg_path = dir.join("reward.svg");
    fs::write(&svg_path, plot::render(&[reward_series(&out.metrics)]))?;

    let a = &out.artifacts;
    let outputs = [("metrics", &a.metrics), ("checkpoint", &a.checkpoint), ("checkpoint_meta", &a.checkpoint_meta), ("buffer", &a.buffer), ("plot", &svg_path)]
        .into_iter()
        .map(|(k, p)| (k.to_string(), file_name(p)))
        .collect();
    let manifest = Manifest {
        command: "train".into(),
        seed: cfg.trainer.seed,
        dataset_sha256: sha256_hex(&dataset_jsonl(&out.trainer.dataset)?),
        config: cfg,
        sweep: None,
        tas_endpoints: Vec::new(),
        outputs,
        output_sha256: sha256_hex(&fs::read(&a.metrics)?),
    };
    write_manifest(&dir, &manifest)?;
    let last = out.metrics.last().map_or(f64::NAN, |m| m.mean_reward);
    println!("{} steps, last mean reward {last:.4}, outputs in {}", out.metrics.len(), dir.display());
    Ok(())
}

fn parse_sweep(axis: &str, values: &[String], group_size: usize) -> Result<Sweep> {
    let bad = |v: &str| CliError::Usage(format!("invalid {axis} value `{v}`"));
    Ok(match axis {
        "onoff_split" if values.is_empty() => Sweep::all_splits(group_size),
        "onoff_split" => Sweep::OnoffSplit(
            values
                .iter()
                .map(|v| {
                    let k_on: usize = v.split('-').next().unwrap_or("").parse().map_err(|_| bad(v))?;
                    if k_on == 0 || k_on > group_size {
                        return Err(bad(v));
                    }
                    Ok(k_on)
                })
                .collect::<Result<_>>()?,
        ),
        "tas_shape" if values.is_empty() => Sweep::TasShape(TasShape::ALL.to_vec()),
        "tas_shape" => Sweep::TasShape(values.iter().map(|v| TasShape::parse(v).ok_or_else(|| bad(v))).collect::<Result<_>>()?),
        "lambda" if values.is_empty() => Sweep::Lambda(vec![0.0, 0.25, 0.5, 1.0]),
        "lambda" => Sweep::Lambda(
            values.iter().map(|v| v.parse::<f64>().ok().filter(|l| *l >= 0.0).ok_or_else(|| bad(v))).collect::<Result<_>>()?,
        ),
        "reward_suite" if values.is_empty() => Sweep::RewardSuite(RewardSuite::ALL.to_vec()),
        "reward_suite" => Sweep::RewardSuite(values.iter().map(|v| RewardSuite::parse(v).ok_or_else(|| bad(v))).collect::<Result<_>>()?),
        other => return Err(CliError::Usage(format!("unknown sweep axis `{other}`"))),
    })
}

fn cmd_sweep(run: &RunArgs, axis: Option<&str>, values: &[String], seeds: &[u64]) -> Result<()> {
    let (cfg, manifest) = resolve(run, "sweep")?;
    let plan = match manifest.and_then(|m| m.sweep) {
        Some(plan) => plan,
        None => {
            let axis = axis.ok_or_else(|| CliError::Usage("--axis is required".into()))?;
            SweepPlan { sweep: parse_sweep(axis, values, cfg.trainer.group_size())?, seeds: seeds.to_vec() }
        }
    };
    let dir = out_dir(run, &format!("sweep-{}", plan.sweep.axis()));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows = run_sweep(&cfg.trainer, &plan.sweep, &plan.seeds, &cfg.eval)?;

    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let tas_endpoints = match &plan.sweep {
        Sweep::Lambda(ls) => ls.iter().map(|&l| (l, endpoint_weight(l))).collect(),
        _ => Vec::new(),
    };
    let manifest = Manifest {
        command: "sweep".into(),
        seed: cfg.trainer.seed,
        dataset_sha256: dataset_hash(&cfg)?,
        config: cfg,
        sweep: Some(plan),
        tas_endpoints,
        outputs: BTreeMap::from([("summary".to_string(), file_name(&csv_path))]),
        output_sha256: sha256_hex(&fs::read(&csv_path)?),
    };
    write_manifest(&dir, &manifest)?;
    for r in &rows {
        let n = r.samples_to_threshold.map_or("-".into(), |n| n.to_string());
        println!("{:>14} seed {:<3} final {:.4} rollouts-to-threshold {n}", r.value, r.seed, r.final_reward);
    }
    Ok(())
}

fn cmd_plot(metrics: &Path, out: &Path, columns: &[String]) -> Result<()> {
    let mut rdr = csv::Reader::from_path(metrics).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", metrics.display())))?;
    let headers = rdr.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{} has no `{name}` column", metrics.display())))
    };
    let step = index("step")?;
    let cols: Vec<usize> = columns.iter().map(|c| index(c)).collect::<Result<_>>()?;
    let mut series: Vec<plot::Series> = columns.iter().map(|c| plot::Series { name: c.clone(), points: Vec::new() }).collect();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| {
                CliError::Usage(format!("{}: row {} has a non-numeric `{}`", metrics.display(), line + 2, &headers[i]))
            })
        };
        let x = num(step)?;
        for (s, &c) in series.iter_mut().zip(&cols) {
            s.points.push((x, num(c)?));
        }
    }
    fs::write(out, plot::render(&series)).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_buffer_dump(path: &Path, config: Option<&Path>) -> Result<()> {
    let cfg: BufferConfig = config::load(config)?.trainer.buffer;
    let f = fs::File::open(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let buf = StratifiedBuffer::read_jsonl(BufReader::new(f), cfg).with_context(|| format!("reading {}", path.display()))?;
    let caps = buf.capacities();
    let occ = buf.occupancy();
    for t in Tier::ALL {
        let rewards: Vec<f64> = buf.tier(t).map(|e| e.total_reward).collect();
        let mean = if rewards.is_empty() { 0.0 } else { rewards.iter().sum::<f64>() / rewards.len() as f64 };
        eprintln!("{:<6} {:>4}/{:<4} mean reward {mean:.4}", t.name(), occ[t.idx()], caps[t.idx()]);
    }
    let mut stored: BTreeMap<u64, usize> = BTreeMap::new();
    for t in Tier::ALL {
        for e in buf.tier(t) {
            *stored.entry(e.prompt_id).or_default() += 1;
        }
    }
    let stdout = std::io::stdout();
    let mut w = csv::Writer::from_writer(stdout.lock());
    w.write_record(["prompt_id", "r_bar", "kl_mean", "hint_active", "stored"])?;
    for s in buf.all_stats() {
        w.write_record([
            s.prompt_id.to_string(),
            format!("{}", s.r_bar()),
            format!("{}", s.kl_mean()),
            s.hint_active.to_string(),
            stored.get(&s.prompt_id).copied().unwrap_or(0).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_dataset_gen(size: usize, seed: u64, out: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let dcfg = config::load(config)?.trainer.dataset;
    let bytes = dataset_jsonl(&synthenv::generate_dataset_with(size, seed, &dcfg))?;
    match out {
        Some(p) => fs::write(p, &bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    eprintln!("sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep { run, axis, values, seeds } => cmd_sweep(run, axis.as_deref(), values, seeds),
        Command::Plot { metrics, out, columns } => cmd_plot(metrics, out, columns),
        Command::BufferDump { buffer, config } => cmd_buffer_dump(buffer, config.as_deref()),
        Command::DatasetGen { size, seed, out, config } => cmd_dataset_gen(*size, *seed, out.as_deref(), config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Run(_) => 1,
            })
        }
    }
}
