//! Command-line front end: JSON run configs, experiment commands and sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointKind};
use crate::error::{Error, Result};
use crate::generator::{Generator, OracleGenerator};
use crate::grid::{Condition, ScheduleKind, TokenGrid};
use crate::metrics::{alignment_rate, diversity_entropy, exact_nll, mean_drops};
use crate::neuralgen::{train_generator, NeuralGenerator, TrainConfig};
use crate::sampling::{generate, RunContext, SamplingOptions, Strategy, Trajectory};
use crate::selector::{train_selector, OracleScorer, Scorer, SelectorModel};
use crate::tasks::{
    edit_mask_free, refine_mask_lowest, refine_steps, upsample_token_map, upscale_tiled, EditRequest, TaskContext,
    DEFAULT_EDIT_NOISE, DEFAULT_EDIT_STEPS, DEFAULT_REFINE_FRACTION, DEFAULT_REFINE_STEPS,
};
use crate::toyworld::{Region, ToyWorld};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

/// Worlds shipped with the crate, addressable by name in configs.
pub const BUNDLED_WORLDS: &[(&str, &str)] = &[
    ("disjoint", include_str!("../worlds/disjoint.json")),
    ("overlap", include_str!("../worlds/overlap.json")),
    ("bgfg", include_str!("../worlds/bgfg.json")),
    ("attractive", include_str!("../worlds/attractive.json")),
];

/// Loads a world from a path, or from the bundled set by name.
pub fn load_world(spec: &str) -> Result<ToyWorld> {
    let path = Path::new(spec);
    if path.exists() {
        return ToyWorld::load(path);
    }
    match BUNDLED_WORLDS.iter().find(|(name, _)| *name == spec) {
        Some((_, text)) => ToyWorld::from_json_str(text),
        None => Err(Error::Config(format!("world: no file or bundled world named {spec:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorChoice {
    Oracle {
        #[serde(default = "one")]
        temperature: f64,
    },
    Checkpoint {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorChoice {
    None,
    Oracle,
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainKind {
    Generator,
    Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub kind: TrainKind,
    pub min_improvement: f64,
    #[serde(flatten)]
    pub hyper: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { kind: TrainKind::Generator, min_improvement: 0.02, hyper: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Steps,
    MaskLowest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSection {
    pub input: Option<PathBuf>,
    pub mode: RefineMode,
    pub steps: usize,
    pub fraction: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self { input: None, mode: RefineMode::Steps, steps: DEFAULT_REFINE_STEPS, fraction: DEFAULT_REFINE_FRACTION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSection {
    pub input: Option<PathBuf>,
    pub old_condition: Option<i64>,
    pub new_condition: Option<i64>,
    pub component: Option<String>,
    pub noise_ratio: f64,
    pub steps: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            input: None,
            old_condition: None,
            new_condition: None,
            component: None,
            noise_ratio: DEFAULT_EDIT_NOISE,
            steps: DEFAULT_EDIT_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpscaleSection {
    pub input: Option<PathBuf>,
    pub factor: usize,
    /// Defaults to a quarter of the window.
    pub overlap: Option<usize>,
    pub passes: usize,
    pub refine_steps: usize,
}

impl Default for UpscaleSection {
    fn default() -> Self {
        Self { input: None, factor: 2, overlap: None, passes: 2, refine_steps: DEFAULT_REFINE_STEPS }
    }
}

/// Everything a command needs, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: Option<String>,
    pub generator: GeneratorChoice,
    pub selector: SelectorChoice,
    pub strategy: Strategy,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub guidance: f64,
    pub argmax: bool,
    pub top_m: bool,
    /// `None` runs every condition of the world.
    pub condition: Option<i64>,
    pub seed: u64,
    pub samples: usize,
    pub out: Option<PathBuf>,
    pub trajectories: bool,
    pub fill_steps: usize,
    pub train: TrainSection,
    pub refine: RefineSection,
    pub edit: EditSection,
    pub upscale: UpscaleSection,
    /// Dotted config key to the list of values it takes in a sweep.
    pub sweep: BTreeMap<String, Vec<Value>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: None,
            generator: GeneratorChoice::Oracle { temperature: 1.0 },
            selector: SelectorChoice::None,
            strategy: Strategy::UniformFixed,
            schedule: ScheduleKind::Cosine,
            steps: 8,
            guidance: crate::sampling::DEFAULT_GUIDANCE,
            argmax: false,
            top_m: false,
            condition: None,
            seed: 0,
            samples: 16,
            out: None,
            trajectories: true,
            fill_steps: 4,
            train: TrainSection::default(),
            refine: RefineSection::default(),
            edit: EditSection::default(),
            upscale: UpscaleSection::default(),
            sweep: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Field-level problems, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.world.is_none() {
            out.push("world: required".to_string());
        }
        if let Err(e) = self.strategy.validate() {
            out.push(format!("strategy: {e}"));
        }
        if self.strategy.needs_scores() && self.selector == SelectorChoice::None {
            out.push(format!("selector: strategy {} requires a selector", self.strategy.name()));
        }
        if self.steps == 0 {
            out.push("steps: must be positive".to_string());
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            out.push(format!("guidance: must be finite and >= 0, got {}", self.guidance));
        }
        if self.samples == 0 {
            out.push("samples: must be positive".to_string());
        }
        if self.fill_steps == 0 {
            out.push("fill_steps: must be positive".to_string());
        }
        if let GeneratorChoice::Oracle { temperature } = self.generator {
            if !(temperature.is_finite() && temperature > 0.0) {
                out.push(format!("generator.temperature: must be positive, got {temperature}"));
            }
        }
        out
    }

    fn options(&self) -> SamplingOptions {
        SamplingOptions { guidance: self.guidance, argmax: self.argmax, top_m: self.top_m }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex_prefix(&Sha256::digest(text.as_bytes()), 16)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Seed for one sample of one cell, independent of scheduling.
pub fn derive_seed(master: u64, cell: u64, sample: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(cell.to_le_bytes());
    h.update(sample.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

pub fn sample_rng(master: u64, cell: u64, sample: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, cell, sample))
}

/// Parses `value` as JSON, falling back to a bare string.
fn parse_override(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Sets a dotted path inside a JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key {path:?}")));
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object ensured");
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the config file (if any) and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Value> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("config: cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        set_path(&mut root, k.trim(), parse_override(v.trim()))?;
    }
    Ok(root)
}

pub fn resolve_config(value: Value) -> Result<RunConfig> {
    serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))
}

#[derive(Debug, Parser)]
#[command(name = "remask", version, about = "Masked generative sampling over token grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set strategy.w=inf`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config, then REMASK_OUT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample grids and write them with trajectories and metrics.
    Generate,
    /// Run the Cartesian product of the config's `sweep` lists.
    Sweep,
    /// Train a generator or selector checkpoint.
    Train {
        #[arg(long, value_enum)]
        kind: Option<TrainKind>,
    },
    /// Move a grid to a new condition.
    Edit,
    /// Revise a grid with the selector.
    Refine,
    /// Upsample a grid and refine it window by window.
    Upscale,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse(_)
        | Error::Json(_)
        | Error::InvalidSchedule(_)
        | Error::UnknownCondition(_)
        | Error::InvalidComponent { .. }
        | Error::InvalidTiling(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_cli(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run_cli(cli: &Cli) -> Result<i32> {
    let mut value = load_config(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    let cfg = resolve_config(value.clone())?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os("REMASK_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("remask-out"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate => cmd_generate(&cfg, &out),
        Command::Sweep => cmd_sweep(&value, &out),
        Command::Train { kind } => cmd_train(&cfg, kind.unwrap_or(cfg.train.kind), &out),
        Command::Edit => cmd_edit(&cfg, &out),
        Command::Refine => cmd_refine(&cfg, &out),
        Command::Upscale => cmd_upscale(&cfg, &out),
    })
}

fn check(cfg: &RunConfig) -> Result<()> {
    let problems = cfg.problems();
    if problems.is_empty() {
        return Ok(());
    }
    for p in &problems {
        eprintln!("config error: {p}");
    }
    Err(Error::Config(problems.join("; ")))
}

/// Models built from a config.
pub struct Models {
    pub world: Arc<ToyWorld>,
    pub gen: Box<dyn Generator>,
    pub scorer: Option<Box<dyn Scorer>>,
}

pub fn build_models(cfg: &RunConfig) -> Result<Models> {
    let world = Arc::new(load_world(cfg.world.as_deref().ok_or_else(|| Error::Config("world: required".into()))?)?);
    let gen: Box<dyn Generator> = match &cfg.generator {
        GeneratorChoice::Oracle { temperature } => {
            Box::new(OracleGenerator::with_temperature(world.clone(), *temperature)?)
        }
        GeneratorChoice::Checkpoint { path } => {
            Box::new(NeuralGenerator::new(checkpoint::load_kind(path, CheckpointKind::Generator)?)?)
        }
    };
    if gen.height() != world.height() || gen.width() != world.width() || gen.codebook() != world.codebook() {
        return Err(Error::Config("generator: checkpoint shape does not match the world".into()));
    }
    let scorer: Option<Box<dyn Scorer>> = match &cfg.selector {
        SelectorChoice::None => None,
        SelectorChoice::Oracle => Some(Box::new(OracleScorer::new(world.clone()))),
        SelectorChoice::Checkpoint { path } => {
            Some(Box::new(SelectorModel::new(checkpoint::load_kind(path, CheckpointKind::Selector)?)?))
        }
    };
    Ok(Models { world, gen, scorer })
}

fn conditions(cfg: &RunConfig, world: &ToyWorld) -> Result<Vec<Condition>> {
    match cfg.condition {
        Some(id) => Ok(vec![world.condition(id)?.clone()]),
        None => Ok(world.conditions().to_vec()),
    }
}

fn single_condition(cfg: &RunConfig, world: &ToyWorld) -> Result<Condition> {
    match cfg.condition {
        Some(id) => Ok(world.condition(id)?.clone()),
        None => Ok(world.conditions()[0].clone()),
    }
}

/// Per-sample stream index: the condition id in the high half, the sample
/// number in the low half.
fn sample_index(c: &Condition, j: u64) -> u64 {
    (c.id as u64).wrapping_mul(1 << 32).wrapping_add(j)
}

/// Samples of one cell for one condition, in sample order.
pub fn run_cell(cfg: &RunConfig, models: &Models, c: &Condition, cell: u64) -> Result<Vec<(TokenGrid, Trajectory)>> {
    let n = models.world.len();
    let schedule = cfg.schedule.build(n, cfg.steps)?;
    let ctx = RunContext {
        gen: models.gen.as_ref(),
        scorer: models.scorer.as_deref(),
        condition: c,
        schedule: &schedule,
        options: cfg.options(),
    };
    (0..cfg.samples as u64)
        .into_par_iter()
        .map(|j| generate(&ctx, &cfg.strategy, &mut sample_rng(cfg.seed, cell, sample_index(c, j))))
        .collect()
}

/// One CSV row of aggregated metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub world: String,
    pub condition: i64,
    pub strategy: String,
    #[serde(rename = "T")]
    pub steps: usize,
    pub w: String,
    pub phi: String,
    pub s: f64,
    pub seed: u64,
    pub alignment_rate: Option<f64>,
    pub exact_nll: Option<f64>,
    pub diversity_low: Option<f64>,
    pub diversity_high: Option<f64>,
    pub mean_drops: Option<f64>,
    pub zero_prob_count: Option<usize>,
    pub error: String,
}

impl MetricsRow {
    fn key(cfg: &RunConfig, c: i64) -> Self {
        Self {
            world: cfg.world.clone().unwrap_or_default(),
            condition: c,
            strategy: cfg.strategy.name().to_string(),
            steps: cfg.steps,
            w: cfg.strategy.weight().map(|w| w.to_string()).unwrap_or_default(),
            phi: cfg.strategy.phi().map(|p| p.to_string()).unwrap_or_default(),
            s: cfg.guidance,
            seed: cfg.seed,
            alignment_rate: None,
            exact_nll: None,
            diversity_low: None,
            diversity_high: None,
            mean_drops: None,
            zero_prob_count: None,
            error: String::new(),
        }
    }
}

pub fn cell_metrics(
    cfg: &RunConfig,
    world: &ToyWorld,
    c: &Condition,
    runs: &[(TokenGrid, Trajectory)],
) -> Result<MetricsRow> {
    let samples: Vec<TokenGrid> = runs.iter().map(|r| r.0.clone()).collect();
    let mut row = MetricsRow::key(cfg, c.id);
    row.alignment_rate = Some(alignment_rate(&samples, world, c)?);
    let nll = exact_nll(&samples, world, c)?;
    row.exact_nll = Some(nll.mean);
    row.zero_prob_count = Some(nll.zero_probability);
    let low = world.region_set(Region::LowFreq);
    let high = world.region_set(Region::HighFreq);
    row.diversity_low = if low.is_empty() { None } else { Some(diversity_entropy(&samples, &low)?) };
    row.diversity_high = if high.is_empty() { None } else { Some(diversity_entropy(&samples, &high)?) };
    let all = crate::grid::LocationSet::full(world.len());
    let drops: f64 = runs.iter().map(|r| mean_drops(&r.1.drop_counts(), &all)).sum();
    row.mean_drops = Some(drops / runs.len() as f64);
    Ok(row)
}

fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("csv: {other:?}")),
    }
}

/// Reads back a metrics CSV.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    check(cfg)?;
    let models = build_models(cfg)?;
    let conds = conditions(cfg, &models.world)?;
    let hash = cfg.hash();
    create_dir(&out.join("samples"))?;
    if cfg.trajectories {
        create_dir(&out.join("trajectories"))?;
    }
    let mut rows = Vec::new();
    for c in &conds {
        let runs = run_cell(cfg, &models, c, 0)?;
        for (j, (grid, traj)) in runs.iter().enumerate() {
            let stem = format!("c{}_{j:05}", c.id);
            std::fs::write(out.join("samples").join(format!("{stem}.txt")), grid.to_text())?;
            if cfg.trajectories {
                let mut buf = Vec::new();
                traj.write_dump(&mut buf, &hash, derive_seed(cfg.seed, 0, sample_index(c, j as u64)))?;
                std::fs::write(out.join("trajectories").join(format!("{stem}.traj")), buf)?;
            }
        }
        rows.push(cell_metrics(cfg, &models.world, c, &runs)?);
    }
    write_csv(&out.join("metrics.csv"), &rows)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(EXIT_OK)
}

/// Cells of a sweep in key order: every combination of the override lists.
pub fn sweep_cells(base: &Value) -> Result<Vec<Value>> {
    let grid: BTreeMap<String, Vec<Value>> = match base.get("sweep") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("sweep: {e}")))?,
        None => BTreeMap::new(),
    };
    let mut cells = vec![base.clone()];
    for (key, values) in &grid {
        if values.is_empty() {
            return Err(Error::Config(format!("sweep.{key}: empty value list")));
        }
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                set_path(&mut c, key, v.clone())?;
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &mut cells {
        if let Some(obj) = c.as_object_mut() {
            obj.remove("sweep");
        }
    }
    Ok(cells)
}

pub fn cmd_sweep(base: &Value, out: &Path) -> Result<i32> {
    let cells = sweep_cells(base)?;
    let configs: Vec<Result<RunConfig>> = cells.into_iter().map(resolve_config).collect();
    for cfg in configs.iter().flatten() {
        check(cfg)?;
    }
    if let Some(Err(e)) = configs.iter().find(|c| c.is_err()) {
        return Err(Error::Config(e.to_string()));
    }
    let configs: Vec<RunConfig> = configs.into_iter().map(|c| c.expect("checked above")).collect();
    let rows: Vec<Vec<MetricsRow>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let attempt = || -> Result<Vec<MetricsRow>> {
                let models = build_models(cfg)?;
                conditions(cfg, &models.world)?
                    .iter()
                    .map(|c| cell_metrics(cfg, &models.world, c, &run_cell(cfg, &models, c, i as u64)?))
                    .collect()
            };
            attempt().unwrap_or_else(|e| {
                let mut row = MetricsRow::key(cfg, cfg.condition.unwrap_or(-1));
                row.error = e.to_string();
                vec![row]
            })
        })
        .collect();
    let rows: Vec<MetricsRow> = rows.into_iter().flatten().collect();
    create_dir(out)?;
    write_csv(&out.join("sweep.csv"), &rows)?;
    Ok(if rows.iter().any(|r| !r.error.is_empty()) { EXIT_PARTIAL } else { EXIT_OK })
}

pub fn cmd_train(cfg: &RunConfig, kind: TrainKind, out: &Path) -> Result<i32> {
    let world = load_world(cfg.world.as_deref().ok_or_else(|| Error::Config("world: required".into()))?)?;
    let mut hyper = cfg.train.hyper.clone();
    hyper.seed = cfg.seed;
    create_dir(out)?;
    let (name, ckpt_kind) = match kind {
        TrainKind::Generator => ("generator", CheckpointKind::Generator),
        TrainKind::Selector => ("selector", CheckpointKind::Selector),
    };
    let ckpt = out.join(format!("{name}.ckpt"));
    let _ = std::fs::remove_file(&ckpt);
    let trained = match kind {
        TrainKind::Generator => train_generator(&world, &hyper).map(|(g, r)| (g.into_network(), r)),
        TrainKind::Selector => {
            let models = build_models(&RunConfig { selector: SelectorChoice::None, ..cfg.clone() })?;
            train_selector(models.gen.as_ref(), &world, &hyper, cfg.train.min_improvement)
                .map(|(s, r)| (s.into_network(), r))
        }
    };
    let (net, report) = trained?;
    let mut loss = String::from("epoch,probe_loss\n");
    for (e, l) in report.probe_losses.iter().enumerate() {
        let _ = writeln!(loss, "{e},{l}");
    }
    std::fs::write(out.join(format!("{name}_loss.csv")), loss)?;
    if let Err(e) = checkpoint::save(&ckpt, ckpt_kind, &net) {
        let _ = std::fs::remove_file(&ckpt);
        return Err(e);
    }
    Ok(EXIT_OK)
}

fn read_grid(path: Option<&PathBuf>, field: &str) -> Result<TokenGrid> {
    let p = path.ok_or_else(|| Error::Config(format!("{field}: required")))?;
    let text =
        std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{field}: cannot read {}: {e}", p.display())))?;
    text.parse()
}

fn task_models(cfg: &RunConfig) -> Result<(Models, Box<dyn Scorer>)> {
    let mut models = build_models(cfg)?;
    let scorer =
        models.scorer.take().ok_or_else(|| Error::Config("selector: this command requires a selector".into()))?;
    Ok((models, scorer))
}

fn task_context<'a>(cfg: &RunConfig, models: &'a Models, scorer: &'a dyn Scorer) -> TaskContext<'a> {
    TaskContext { options: cfg.options(), fill_steps: cfg.fill_steps, ..TaskContext::new(models.gen.as_ref(), scorer) }
}

pub fn cmd_refine(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let grid = read_grid(cfg.refine.input.as_ref(), "refine.input")?;
    let (models, scorer) = task_models(cfg)?;
    let c = single_condition(cfg, &models.world)?;
    let ctx = task_context(cfg, &models, scorer.as_ref());
    let mut rng = sample_rng(cfg.seed, 0, 0);
    let refined = match cfg.refine.mode {
        RefineMode::Steps => refine_steps(&grid, &ctx, cfg.refine.steps, &c, &mut rng)?,
        RefineMode::MaskLowest => refine_mask_lowest(&grid, &ctx, cfg.refine.fraction, &c, &mut rng)?,
    };
    create_dir(out)?;
    std::fs::write(out.join("refined.txt"), refined.to_text())?;
    Ok(EXIT_OK)
}

pub fn cmd_edit(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let grid = read_grid(cfg.edit.input.as_ref(), "edit.input")?;
    let (models, scorer) = task_models(cfg)?;
    let world = &models.world;
    let pick = |id: Option<i64>, field: &str| -> Result<Condition> {
        Ok(world.condition(id.ok_or_else(|| Error::Config(format!("{field}: required")))?)?.clone())
    };
    let req = EditRequest {
        source: grid,
        old_condition: pick(cfg.edit.old_condition, "edit.old_condition")?,
        new_condition: pick(cfg.edit.new_condition, "edit.new_condition")?,
        component: cfg.edit.component.clone().ok_or_else(|| Error::Config("edit.component: required".into()))?,
        noise_ratio: cfg.edit.noise_ratio,
        steps: cfg.edit.steps,
    };
    let ctx = task_context(cfg, &models, scorer.as_ref());
    let edited = edit_mask_free(&req, &ctx, &mut sample_rng(cfg.seed, 0, 0))?;
    create_dir(out)?;
    std::fs::write(out.join("edited.txt"), edited.to_text())?;
    Ok(EXIT_OK)
}

pub fn cmd_upscale(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let grid = read_grid(cfg.upscale.input.as_ref(), "upscale.input")?;
    let (models, scorer) = task_models(cfg)?;
    let c = single_condition(cfg, &models.world)?;
    let up = upsample_token_map(&grid, &models.gen.token_embeddings(), cfg.upscale.factor)?;
    let ctx = task_context(cfg, &models, scorer.as_ref());
    let overlap = cfg.upscale.overlap.unwrap_or(models.gen.height().min(models.gen.width()) / 4);
    let result = upscale_tiled(
        &up,
        &ctx,
        overlap,
        cfg.upscale.passes,
        cfg.upscale.refine_steps,
        &c,
        &mut sample_rng(cfg.seed, 0, 0),
    )?;
    create_dir(out)?;
    std::fs::write(out.join("upscaled.txt"), result.to_text())?;
    Ok(EXIT_OK)
}
