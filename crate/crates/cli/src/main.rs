mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use spf_core::certify::{certify_delta_balance, certify_funnel, certify_schedule, certify_spatial_special_case};
use spf_core::data::{default_scenarios, generate, read_container, write_container, Container, Split};
use spf_core::eval::evaluate;
use spf_core::model::checkpoint::load_checkpoint;
use spf_core::rng::{fill_normal, substream};
use spf_core::sampling::{bench, LatentCache, SampleStats, Sampler};
use spf_core::train::{train, TrainingMember};
use spf_core::{DeltaPath, FieldGrid, PyramidSchedule, SpfError, VelocityModel};

use config::{RunConfig, ScheduleConfig};

const REPORT_FILE: &str = "report.jsonl";

#[derive(Parser)]
#[command(name = "spf", version, about = "Spatiotemporal pyramid flow climate emulator")]
struct Cli {
    /// Run config (TOML). Flags override its values.
    #[arg(long, global = true, env = "SPF_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scenario container.
    Synth(SynthArgs),
    /// Train a velocity model and write a checkpoint.
    Train(TrainArgs),
    /// Draw samples at one timescale.
    Sample(SampleArgs),
    /// Run the Monte Carlo certification suites.
    Validate(ValidateArgs),
    /// Score held-out scenarios against a climatology baseline.
    Eval(EvalArgs),
    /// Compare model-evaluation counts across timescales and caching.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Grid as LATxLON, e.g. 24x36.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    years: Option<usize>,
    /// Members per training scenario.
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    eval_members: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    timescale: Option<String>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    steps_total: Option<usize>,
    /// Coarse window to generate alone instead of the whole span.
    #[arg(long)]
    window: Option<usize>,
    /// Funnel choices for a single window, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    period: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// `default` or a TOML file with a `[[stages]]` list.
    #[arg(long, default_value = "default")]
    schedule: String,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scenario to score; defaults to every held-out scenario.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    timescale: Option<String>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint directory; an untrained model from the config is used
    /// when omitted.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    steps_total: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Runtime = 1,
    Config = 2,
    Input = 3,
    Invariant = 4,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Runtime => "runtime",
            Category::Config => "config",
            Category::Input => "input",
            Category::Invariant => "invariant",
        })
    }
}

/// Raised when a certification check fails.
#[derive(Debug)]
struct ChecksFailed(Vec<String>);

impl fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failed checks: {}", self.0.join(", "))
    }
}

impl std::error::Error for ChecksFailed {}

fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if cause.is::<ChecksFailed>() {
            return Category::Invariant;
        }
        if cause.is::<toml::de::Error>() {
            return Category::Config;
        }
        if let Some(e) = cause.downcast_ref::<SpfError>() {
            return match e {
                SpfError::Io(_) | SpfError::Format { .. } | SpfError::BlobLength { .. } | SpfError::Json(_) => {
                    Category::Input
                }
                SpfError::InvalidArgument(_) | SpfError::NotDivisible { .. } => Category::Config,
                _ => Category::Runtime,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return Category::Input;
            }
        }
    }
    Category::Runtime
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = categorize(&e);
            eprintln!("error[{cat}]: {e:#}");
            ExitCode::from(cat as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Sample(a) => cmd_sample(cfg, a),
        Command::Validate(a) => cmd_validate(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a),
    }
}

/// Line-delimited JSON records.
struct Report {
    out: BufWriter<File>,
}

impl Report {
    fn create(dir: &Path, name: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("grid '{s}' is not LATxLON"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| SpfError::InvalidArgument(format!("bad grid size '{v}'")));
    Ok((parse(a)?, parse(b)?))
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    if let Some(g) = &a.grid {
        (cfg.data.n_lat, cfg.data.n_lon) = parse_grid(g)?;
    }
    if let Some(v) = a.years {
        cfg.data.years = v;
    }
    if let Some(v) = a.members {
        cfg.data.train_members = v;
    }
    if let Some(v) = a.eval_members {
        cfg.data.eval_members = v;
    }
    if let Some(v) = a.out {
        cfg.paths.data = v;
    }
    let cfg = cfg.resolve();
    let d = &cfg.data;
    let mut sets = Vec::new();
    for (spec, split) in default_scenarios(d.n_lat, d.n_lon, d.years, d.train_members, d.eval_members) {
        info!("generating {} ({} members)", spec.id, spec.members);
        sets.push(generate(&spec, split, cfg.seed)?);
    }
    let mut prov = BTreeMap::new();
    prov.insert("generator".into(), "spf synth".into());
    prov.insert("seed".into(), cfg.seed.to_string());
    let container = Container::from_datasets(&sets, prov)?;
    let out = &cfg.paths.data;
    write_container(&container, out)?;
    cfg.persist(out)?;
    let mut report = Report::create(out, REPORT_FILE)?;
    for s in &container.manifest.scenarios {
        report.record(&serde_json::json!({
            "command": "synth",
            "scenario": s.id,
            "split": s.split,
            "members": s.members.len(),
            "frames": container.manifest.dims.time,
        }))?;
    }
    report.finish()?;
    info!("wrote {} scenarios to {}", container.manifest.scenarios.len(), out.display());
    Ok(())
}

fn training_members(container: &Container) -> Result<Vec<TrainingMember>> {
    let mut out = Vec::new();
    for s in &container.manifest.scenarios {
        if s.split != Split::Train {
            continue;
        }
        for &m in &s.members {
            out.push(TrainingMember {
                targets: container.targets(&s.id, m)?,
                forcings: container.forcings(&s.id, m)?,
            });
        }
    }
    if out.is_empty() {
        bail!(SpfError::InvalidArgument("container has no training members".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    loss: f64,
    lr: f64,
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.data {
        cfg.paths.data = v;
    }
    if let Some(v) = a.out {
        cfg.paths.run = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    let cfg = cfg.resolve();
    let schedule = cfg.schedule.build()?;
    let container = read_container(&cfg.paths.data)?;
    let members = training_members(&container)?;
    let mut model = VelocityModel::new(cfg.model.clone())?;
    info!("training {} parameters on {} members", model.num_params(), members.len());
    let run = &cfg.paths.run;
    cfg.persist(run)?;
    let started = Instant::now();
    let report = train(&mut model, &members, &schedule, &cfg.train, Some(run))?;
    let mut log = Report::create(run, "train_log.jsonl")?;
    for r in &report.log {
        log.record(&LogLine {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
        })?;
    }
    log.finish()?;
    let mut rep = Report::create(run, REPORT_FILE)?;
    rep.record(&serde_json::json!({
        "command": "train",
        "steps": cfg.train.steps,
        "params": model.num_params(),
        "final_loss": report.losses.last(),
        "final_moving_average": report.moving_average.last(),
    }))?;
    rep.finish()?;
    info!("trained {} steps in {:.1}s", cfg.train.steps, started.elapsed().as_secs_f64());
    Ok(())
}

fn load_model(run: &Path) -> Result<VelocityModel> {
    let (model, desc) = load_checkpoint(run).with_context(|| format!("loading checkpoint {}", run.display()))?;
    info!("loaded checkpoint at step {} ({} parameters)", desc.step, desc.param_count);
    Ok(model)
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    command: &'static str,
    scenario: &'a str,
    timescale: &'a str,
    member: usize,
    frames: usize,
    model_evals: u64,
    stage_runs: &'a [u64],
    cache_hits: u64,
}

fn cmd_sample(mut cfg: RunConfig, a: SampleArgs) -> Result<()> {
    if let Some(v) = a.run {
        cfg.paths.run = v;
    }
    if let Some(v) = a.data {
        cfg.paths.data = v;
    }
    if let Some(v) = a.out {
        cfg.paths.out = v;
    }
    let s = &mut cfg.sample;
    if let Some(v) = a.scenario {
        s.scenario = v;
    }
    if let Some(v) = a.timescale {
        s.timescale = v;
    }
    if let Some(v) = a.ensemble {
        s.ensemble = v;
    }
    if let Some(v) = a.steps_total {
        s.steps_total = v;
    }
    if let Some(v) = a.window {
        s.window = Some(v);
    }
    if let Some(v) = a.period {
        s.period = v;
    }
    let cfg = cfg.resolve();
    let sc = &cfg.sample;
    if sc.ensemble == 0 {
        bail!(SpfError::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let schedule = cfg.schedule.build()?;
    let model = load_model(&cfg.paths.run)?;
    let container = read_container(&cfg.paths.data)?;
    let entry = container.manifest.scenario(&sc.scenario)?;
    let forcings = container.forcings(&sc.scenario, entry.members[0])?;
    let target = schedule.stage_for_label(&sc.timescale)?;
    let path = DeltaPath::for_target_stage(schedule.num_stages(), target)?;
    let coarse_frames = schedule.stage(schedule.coarsest()).frames;
    let sampler = Sampler::new(&model, &schedule, &forcings, cfg.model.target_channels, coarse_frames, sc.steps_total)?;

    let out = &cfg.paths.out;
    cfg.persist(out)?;
    let mut report = Report::create(out, REPORT_FILE)?;
    let mut members = Vec::with_capacity(sc.ensemble);
    for m in 0..sc.ensemble {
        let mut stats = SampleStats::default();
        let cache = LatentCache::new(sc.cache_capacity);
        let x = match sc.window {
            Some(w) => {
                let mut wp = vec![w];
                wp.extend_from_slice(&sc.period);
                sampler.sample_window(cfg.seed, m, &path, &wp, None, &mut stats)?
            }
            None => sampler.sample_long_sequence(cfg.seed, m, &path, Some(&cache), &mut stats)?,
        };
        report.record(&SampleRecord {
            command: "sample",
            scenario: &sc.scenario,
            timescale: &sc.timescale,
            member: m,
            frames: x.time(),
            model_evals: stats.model_evals,
            stage_runs: &stats.stage_runs,
            cache_hits: stats.cache_hits,
        })?;
        info!("member {m}: {} frames, {} model evaluations", x.time(), stats.model_evals);
        members.push(x);
    }
    report.finish()?;
    let mut prov = BTreeMap::new();
    prov.insert("generator".into(), "spf sample".into());
    prov.insert("checkpoint".into(), cfg.paths.run.display().to_string());
    prov.insert("seed".into(), cfg.seed.to_string());
    let samples = Container::from_samples(&sc.scenario, &sc.timescale, members, prov)?;
    write_container(&samples, &out.join("samples"))?;
    Ok(())
}

fn load_schedule(spec: &str) -> Result<PyramidSchedule> {
    if spec == "default" {
        return Ok(PyramidSchedule::default_climate());
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading schedule {spec}"))?;
    let block: ScheduleConfig = toml::from_str(&text).with_context(|| format!("parsing schedule {spec}"))?;
    block.build()
}

fn cmd_validate(cfg: RunConfig, a: ValidateArgs) -> Result<()> {
    let cfg = cfg.resolve();
    let schedule = load_schedule(&a.schedule)?;
    if a.draws == 0 {
        bail!(SpfError::InvalidArgument("draws must be positive".into()));
    }
    let mut records = Vec::new();
    let mut failed = Vec::new();

    for c in certify_schedule(&schedule, a.draws, cfg.seed)? {
        let name = format!("jump {}->{} (n={})", c.from_stage, c.to_stage, c.block_size);
        info!(
            "{name}: within-block covariance {:.2e} ({:.2} se, max single block {:.2e}), max variance error {:.3}%",
            c.cov_pooled,
            c.cov_z,
            c.cov_max_abs,
            100.0 * c.var_max_rel_error
        );
        if !c.passed {
            failed.push(name.clone());
        }
        records.push(serde_json::json!({"check": "jump_continuity", "name": name, "result": c}));
    }

    let special = certify_spatial_special_case()?;
    if !special.passed {
        failed.push("spatial special case".into());
    }
    records.push(serde_json::json!({"check": "spatial_special_case", "result": special}));

    let balance = certify_delta_balance(schedule.num_stages(), a.draws, cfg.seed, 0.01)?;
    if !balance.passed {
        failed.push("delta balance".into());
    }
    records.push(serde_json::json!({"check": "delta_balance", "result": balance}));

    if schedule.num_stages() >= 2 {
        let top = schedule.cumulative(schedule.coarsest());
        let len = schedule.stage(schedule.coarsest()).frames * top.r_t;
        let mut x1 = FieldGrid::zeros(1, len, spf_core::grid::regular_latitudes(top.r_h), top.r_w)?;
        fill_normal(&mut substream(cfg.seed, &["validate-x1"]), x1.data_mut());
        let funnel = schedule.stage(schedule.coarsest()).frames / 2;
        let c = certify_funnel(&schedule, &x1, funnel, 2, a.draws, cfg.seed)?;
        if !c.passed {
            failed.push("funnel equivalence".into());
        }
        records.push(serde_json::json!({"check": "funnel_equivalence", "result": c}));
    }

    if let Some(out) = &a.out {
        cfg.persist(out)?;
        let mut report = Report::create(out, REPORT_FILE)?;
        for r in &records {
            report.record(r)?;
        }
        report.finish()?;
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for r in &records {
        serde_json::to_writer(&mut lock, r)?;
        writeln!(lock)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(ChecksFailed(failed).into())
    }
}

#[derive(Serialize)]
struct EvalRow<'a> {
    scenario: &'a str,
    timescale: &'a str,
    variable: &'a str,
    crps: f64,
    rmse: f64,
    bias: f64,
    climatology_crps: f64,
    trend_correlation: f64,
    consistency_rms: Option<f64>,
    internal_sigma: f64,
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    if let Some(v) = a.run {
        cfg.paths.run = v;
    }
    if let Some(v) = a.data {
        cfg.paths.data = v;
    }
    if let Some(v) = a.out {
        cfg.paths.out = v;
    }
    if let Some(v) = a.timescale {
        cfg.eval.timescale = v;
    }
    if let Some(v) = a.ensemble {
        cfg.eval.ensemble = v;
    }
    let cfg = cfg.resolve();
    let schedule = cfg.schedule.build()?;
    let model = load_model(&cfg.paths.run)?;
    let container = read_container(&cfg.paths.data)?;
    let train_targets: Vec<FieldGrid> = training_members(&container)?.into_iter().map(|m| m.targets).collect();
    let scenarios: Vec<String> = match a.scenario {
        Some(s) => vec![s],
        None => container
            .manifest
            .scenarios
            .iter()
            .filter(|s| s.split == Split::Eval)
            .map(|s| s.id.clone())
            .collect(),
    };
    if scenarios.is_empty() {
        bail!(SpfError::InvalidArgument("no held-out scenarios to evaluate".into()));
    }
    let out = &cfg.paths.out;
    cfg.persist(out)?;
    let mut report = Report::create(out, REPORT_FILE)?;
    let mut table = csv::Writer::from_path(out.join("eval.csv"))?;
    for id in &scenarios {
        let ds = container.dataset(id)?;
        let r = evaluate(&model, &schedule, &train_targets, &ds, &cfg.eval)?;
        for c in &r.channels {
            if c.crps >= c.climatology_crps {
                warn!("{id}/{}: CRPS {:.4} does not beat climatology {:.4}", c.variable, c.crps, c.climatology_crps);
            }
            table.serialize(EvalRow {
                scenario: &r.scenario,
                timescale: &r.timescale,
                variable: &c.variable,
                crps: c.crps,
                rmse: c.rmse,
                bias: c.bias,
                climatology_crps: c.climatology_crps,
                trend_correlation: c.trend_correlation,
                consistency_rms: c.consistency_rms,
                internal_sigma: c.internal_sigma,
            })?;
        }
        report.record(&serde_json::json!({"command": "eval", "result": r}))?;
    }
    table.flush()?;
    report.finish()?;
    Ok(())
}

fn cmd_bench(mut cfg: RunConfig, a: BenchArgs) -> Result<()> {
    if let Some(v) = a.data {
        cfg.paths.data = v;
    }
    if let Some(v) = a.out {
        cfg.paths.out = v;
    }
    if let Some(v) = a.scenario {
        cfg.sample.scenario = v;
    }
    if let Some(v) = a.steps_total {
        cfg.sample.steps_total = v;
    }
    let cfg = cfg.resolve();
    let schedule = cfg.schedule.build()?;
    let model = match &a.run {
        Some(run) => load_model(run)?,
        None => VelocityModel::new_randomized(cfg.model.clone())?,
    };
    let container = read_container(&cfg.paths.data)?;
    let entry = container.manifest.scenario(&cfg.sample.scenario)?;
    let forcings = container.forcings(&cfg.sample.scenario, entry.members[0])?;
    let records = bench(&model, &schedule, &forcings, cfg.model.target_channels, cfg.sample.steps_total, cfg.seed)?;
    let out = &cfg.paths.out;
    cfg.persist(out)?;
    let mut report = Report::create(out, REPORT_FILE)?;
    for r in &records {
        info!(
            "{:>8} cached={:<5} evals={:>6} planned={:>6} {} ms",
            r.timescale, r.cached, r.model_evals, r.planned_evals, r.wall_ms
        );
        report.record(r)?;
    }
    report.finish()?;
    Ok(())
}
