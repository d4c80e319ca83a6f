//! One binary driving the whole pipeline: expert calibration, dataset
//! collection, network training, offline and closed-loop evaluation,
//! gradient checks, and debug frame dumps.
//!
//! Every command reads one strict JSON configuration (unknown keys are
//! errors), derives all of its randomness from the single top-level `seed`
//! through named streams, and writes results plus a config echo into the
//! `--out` directory, so each stage is reproducible from (config, seed)
//! alone. Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use lanepilot::dataset::{
    self, mix_equal_parts, split, CollectOptions, CollectReport, Dataset, DEFAULT_VAL_FRACTION,
};
use lanepilot::eval::{
    closed_loop, offline_matrix, policy_from_model, scenario_suite, trace_csv, DrivePolicy,
    ExpertDriver, MseMatrix, NeuralPolicy, Scenario, SuiteReport,
};
use lanepilot::expert::{
    calibrate_gains, ExpertPilot, ManeuverTable, PDGains, PerturbConfig, DEFAULT_KD_GRID,
    DEFAULT_KP_GRID,
};
use lanepilot::nn::{
    grad_check, grad_check_f32, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig,
    ModelParams, Tensor,
};
use lanepilot::render::{
    domain_preset, render_frame, CameraModel, Domain, DomainConfig, Palette, FRAME_HEIGHT,
    FRAME_WIDTH,
};
use lanepilot::rng::{derive, derive_idx, CounterRng};
use lanepilot::simcore::{MapPreset, TrackMap};
use lanepilot::train::{multi_seed_on, OptimSettings, TrainConfig, DEFAULT_SEED_COUNT};

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "lanepilot",
    version,
    about = "Lane-following pipeline: calibrate, collect, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON run configuration (strict: unknown keys are rejected).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Grid-search PD steering gains on the configured map; write gains.json.
    Calibrate,
    /// Drive the expert through every configured source; one dataset file each.
    Collect,
    /// Train the configured equal-mix across seeds; write checkpoints + curves.
    Train,
    /// Score checkpoints' MSE on every source's held-back validation split.
    EvalOffline,
    /// Drive checkpoints (and the expert) closed-loop on the eval map.
    EvalLoop,
    /// Finite-difference check of the network's backward pass against a
    /// fixed reference probe (ignores --config and --seed).
    Gradcheck,
    /// Render sample frames for every source to PNG for visual inspection.
    DumpFrames,
}

/// Failures carry their exit class: configuration problems (bad or missing
/// config values, missing configured input files) exit 2; failures while
/// doing the actual work exit 3.
enum Failure {
    Config(String),
    Runtime(String),
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn runtime_error(msg: impl Into<String>) -> Failure {
    Failure::Runtime(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("config error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        // Sizing the global pool can only fail if something built it already,
        // in which case the default-sized pool serves the run.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Gradcheck => return cmd_gradcheck(cli),
        _ => {}
    }
    let cfg = load_config(cli)?;
    prepare_out(cli, &cfg)?;
    match cli.cmd {
        Cmd::Calibrate => cmd_calibrate(cli, &cfg),
        Cmd::Collect => cmd_collect(cli, &cfg),
        Cmd::Train => cmd_train(cli, &cfg),
        Cmd::EvalOffline => cmd_eval_offline(cli, &cfg),
        Cmd::EvalLoop => cmd_eval_loop(cli, &cfg),
        Cmd::DumpFrames => cmd_dump_frames(cli, &cfg),
        Cmd::Gradcheck => unreachable!("dispatched above"),
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// The run configuration document. Only `seed` is mandatory; every other
/// field has a documented default, and unknown keys anywhere are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Master seed. Every stage derives its own named random streams from it.
    seed: u64,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    camera: CameraSection,
    /// Per-domain appearance overrides, keyed by domain name; fields absent
    /// from a patch keep their preset values.
    #[serde(default)]
    domains: BTreeMap<String, DomainPatch>,
    #[serde(default)]
    expert: ExpertSection,
    #[serde(default)]
    collect: CollectSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    /// Map preset used by `calibrate`: "loop", "cross", or "heldout".
    #[serde(default = "default_sim_map")]
    map: String,
}

fn default_sim_map() -> String {
    "loop".into()
}

impl Default for SimSection {
    fn default() -> SimSection {
        SimSection { map: default_sim_map() }
    }
}

/// Camera intrinsics/extrinsics overrides; defaults match the stock camera.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraSection {
    /// Horizontal field of view in degrees (default 100).
    hfov_deg: Option<f64>,
    /// Optical-center height above ground in meters (default 0.108).
    mount_height: Option<f64>,
    /// Downward pitch in degrees (default 19).
    pitch_deg: Option<f64>,
    /// Forward offset from the robot center in meters (default 0.06).
    forward_offset: Option<f64>,
}

impl CameraSection {
    fn camera(&self) -> CameraModel {
        let mut cam = CameraModel::default();
        if let Some(deg) = self.hfov_deg {
            cam.hfov = deg.to_radians();
        }
        if let Some(h) = self.mount_height {
            cam.mount_height = h;
        }
        if let Some(deg) = self.pitch_deg {
            cam.pitch = deg.to_radians();
        }
        if let Some(f) = self.forward_offset {
            cam.forward_offset = f;
        }
        cam
    }
}

/// Partial appearance override for one domain; `None` fields keep the preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainPatch {
    palette: Option<Palette>,
    lighting_gain: Option<f64>,
    lighting_bias: Option<[f64; 3]>,
    noise_sigma: Option<f64>,
    clutter_count: Option<usize>,
    clutter_seed: Option<u64>,
    dash_length: Option<f64>,
    dash_gap: Option<f64>,
    pitch_jitter_deg: Option<f64>,
    height_jitter: Option<f64>,
}

impl DomainPatch {
    fn apply(&self, mut dc: DomainConfig) -> DomainConfig {
        if let Some(p) = self.palette {
            dc.palette = p;
        }
        if let Some(g) = self.lighting_gain {
            dc.lighting_gain = g;
        }
        if let Some(b) = self.lighting_bias {
            dc.lighting_bias = b;
        }
        if let Some(s) = self.noise_sigma {
            dc.noise_sigma = s;
        }
        if let Some(c) = self.clutter_count {
            dc.clutter_count = c;
        }
        if let Some(s) = self.clutter_seed {
            dc.clutter_seed = s;
        }
        if let Some(l) = self.dash_length {
            dc.dash_length = l;
        }
        if let Some(g) = self.dash_gap {
            dc.dash_gap = g;
        }
        if let Some(deg) = self.pitch_jitter_deg {
            dc.pitch_jitter = deg.to_radians();
        }
        if let Some(h) = self.height_jitter {
            dc.height_jitter = h;
        }
        dc
    }
}

/// PD expert settings. With `kp`/`kd` unset, commands that need the expert
/// run the default calibration grid on the loop map first (deterministic,
/// a few seconds); `calibrate` writes gains that can be pasted here.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertSection {
    /// Proportional gain on lateral offset; set together with `kd`.
    kp: Option<f64>,
    /// Derivative-branch gain on heading error; set together with `kp`.
    kd: Option<f64>,
    /// Cruise wheel command in (0, 1] (default 0.7).
    v_nominal: Option<f64>,
    /// Wheel-command differential per unit steering (default 0.25).
    steer_scale: Option<f64>,
    /// Perturbation bursts during collection; `null` disables them.
    #[serde(default = "default_perturb")]
    perturb: Option<PerturbSection>,
}

impl Default for ExpertSection {
    fn default() -> ExpertSection {
        ExpertSection {
            kp: None,
            kd: None,
            v_nominal: None,
            steer_scale: None,
            perturb: default_perturb(),
        }
    }
}

/// Random steering bursts injected while collecting, so the dataset contains
/// recovery maneuvers; the recorded actions are the executed (perturbed)
/// ones.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerturbSection {
    /// Expected bursts per second (default 0.25).
    #[serde(default = "default_perturb_prob")]
    prob_per_sec: f64,
    /// Burst duration in seconds (default 0.3).
    #[serde(default = "default_perturb_burst")]
    burst_secs: f64,
    /// Steering offset magnitude in wheel-command units (default 0.3).
    #[serde(default = "default_perturb_magnitude")]
    magnitude: f64,
}

fn default_perturb() -> Option<PerturbSection> {
    Some(PerturbSection {
        prob_per_sec: default_perturb_prob(),
        burst_secs: default_perturb_burst(),
        magnitude: default_perturb_magnitude(),
    })
}

fn default_perturb_prob() -> f64 {
    0.25
}

fn default_perturb_burst() -> f64 {
    0.3
}

fn default_perturb_magnitude() -> f64 {
    0.3
}

impl PerturbSection {
    fn to_config(&self) -> PerturbConfig {
        PerturbConfig {
            prob_per_sec: self.prob_per_sec,
            burst_secs: self.burst_secs,
            magnitude: self.magnitude,
        }
    }
}

/// What `collect` records: how many frames from which (map, domain) sources.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectSection {
    /// Frames recorded per source (default 2000).
    #[serde(default = "default_frames_per_source")]
    frames_per_source: usize,
    /// Execute perturbation bursts but keep the perturbed frames out of the
    /// dataset (default false: imperfect frames are retained).
    #[serde(default)]
    drop_perturbed: bool,
    /// The sources, one output file `<name>.imds` each. Default: the four
    /// standard sources (two clean simulator looks, two shifted ones).
    #[serde(default = "default_sources")]
    sources: Vec<SourceSpec>,
}

fn default_frames_per_source() -> usize {
    2000
}

fn default_sources() -> Vec<SourceSpec> {
    let row = |name: &str, map: &str, domain: &str| SourceSpec {
        name: name.into(),
        map: map.into(),
        domain: domain.into(),
    };
    vec![
        row("SIM-LP", "loop", "SIM-LP"),
        row("SIM-IS", "cross", "SIM-IS"),
        row("PSEUDO-REAL-A", "loop", "PSEUDO-REAL-A"),
        row("PSEUDO-REAL-B", "cross", "PSEUDO-REAL-B"),
    ]
}

impl Default for CollectSection {
    fn default() -> CollectSection {
        CollectSection {
            frames_per_source: default_frames_per_source(),
            drop_perturbed: false,
            sources: default_sources(),
        }
    }
}

/// One data source: a file label, a map preset name, and a domain name.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSpec {
    name: String,
    map: String,
    domain: String,
}

/// One training run: which collected files to mix and how long to train.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    /// Dataset files to mix in equal proportions. Default: every collected
    /// source file (`<out>/<name>.imds`) from the collect section.
    sources: Option<Vec<PathBuf>>,
    /// Label for this model; output lands in `<out>/<label>/`.
    #[serde(default = "default_train_label")]
    label: String,
    /// Total mixed training-pool size; must divide evenly by the source
    /// count. Default: the smallest source's training half, rounded down to
    /// a multiple of the source count, so every label trains on the same
    /// budget regardless of how many sources it mixes.
    total_count: Option<usize>,
    /// Training epochs (default 50).
    epochs: Option<usize>,
    /// Minibatch size (default 64).
    batch_size: Option<usize>,
    /// Adam settings (defaults: lr 1e-3, betas 0.9/0.999, eps 1e-8).
    #[serde(default)]
    optimizer: OptimSettings,
    /// Independent training runs, seeds base..base+seeds (default 5).
    #[serde(default = "default_seed_count")]
    seeds: usize,
    /// Validation share, both for the per-source holdout split and for the
    /// training pool's internal split (default 0.30).
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
}

fn default_train_label() -> String {
    "HYBRID".into()
}

fn default_seed_count() -> usize {
    DEFAULT_SEED_COUNT
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            sources: None,
            label: default_train_label(),
            total_count: None,
            epochs: None,
            batch_size: None,
            optimizer: OptimSettings::default(),
            seeds: default_seed_count(),
            val_fraction: default_val_fraction(),
        }
    }
}

/// Closed-loop and offline evaluation settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    /// Map preset for closed-loop runs (default "heldout").
    #[serde(default = "default_eval_map")]
    map: String,
    /// Domain the policies were trained to expect (default "SIM-LP").
    #[serde(default = "default_clean_domain")]
    clean_domain: String,
    /// Visually shifted domain (default "PSEUDO-REAL-B").
    #[serde(default = "default_shifted_domain")]
    shifted_domain: String,
    /// Evenly spaced start poses per domain (default 3).
    #[serde(default = "default_starts")]
    starts: usize,
    /// Rollout time limit in seconds (default 30).
    #[serde(default = "default_time_limit")]
    time_limit_s: f64,
    /// Independent rollout seeds averaged in the report (default 3).
    #[serde(default = "default_rollout_seeds")]
    rollout_seeds: usize,
    /// Checkpoints to evaluate, newest training outputs look like
    /// `<out>/<label>/seed-<i>.imnn`.
    #[serde(default)]
    checkpoints: Vec<CheckpointSpec>,
    /// Also write per-tick CSV traces of the first rollout seed.
    #[serde(default)]
    keep_traces: bool,
}

fn default_eval_map() -> String {
    "heldout".into()
}

fn default_clean_domain() -> String {
    "SIM-LP".into()
}

fn default_shifted_domain() -> String {
    "PSEUDO-REAL-B".into()
}

fn default_starts() -> usize {
    3
}

fn default_time_limit() -> f64 {
    30.0
}

fn default_rollout_seeds() -> usize {
    3
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection {
            map: default_eval_map(),
            clean_domain: default_clean_domain(),
            shifted_domain: default_shifted_domain(),
            starts: default_starts(),
            time_limit_s: default_time_limit(),
            rollout_seeds: default_rollout_seeds(),
            checkpoints: Vec::new(),
            keep_traces: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointSpec {
    label: String,
    path: PathBuf,
}

// ---------------------------------------------------------------------------
// Config loading, echo, shared resolution helpers
// ---------------------------------------------------------------------------

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let raw = fs::read_to_string(&cli.config).map_err(|e| {
        config_error(format!("cannot read config file {}: {e}", cli.config.display()))
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&raw)
        .map_err(|e| config_error(format!("{}: {e}", cli.config.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Create the output directory and write the effective configuration into it
/// (the input document with any `--seed` override applied), so every output
/// directory records exactly what produced it.
fn prepare_out(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cli.out)
        .map_err(|e| runtime_error(format!("cannot create {}: {e}", cli.out.display())))?;
    let raw = fs::read_to_string(&cli.config)
        .map_err(|e| config_error(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| config_error(format!("{}: {e}", cli.config.display())))?;
    doc["seed"] = json!(cfg.seed);
    write_text(&cli.out.join("config.json"), &format!("{:#}\n", doc))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| runtime_error(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    write_text(path, &format!("{value:#}\n"))
}

fn parse_map(name: &str) -> Result<TrackMap, Failure> {
    let preset = MapPreset::parse(name)
        .ok_or_else(|| config_error(format!("unknown map preset \"{name}\" (loop|cross|heldout)")))?;
    Ok(TrackMap::preset(preset))
}

fn parse_domain(name: &str) -> Result<Domain, Failure> {
    Domain::parse(name).ok_or_else(|| {
        config_error(format!(
            "unknown domain \"{name}\" (SIM-LP|SIM-IS|PSEUDO-REAL-A|PSEUDO-REAL-B)"
        ))
    })
}

/// The domain's appearance with any configured patch applied.
fn appearance(cfg: &RunConfig, domain: Domain) -> Option<DomainConfig> {
    cfg.domains.get(domain.name()).map(|patch| patch.apply(domain_preset(domain)))
}

/// PD gains from the config, or from a fresh default-grid calibration on the
/// loop map when `kp`/`kd` are not pinned.
fn resolve_gains(cfg: &RunConfig) -> Result<PDGains, Failure> {
    let e = &cfg.expert;
    let mut gains = match (e.kp, e.kd) {
        (Some(kp), Some(kd)) => PDGains::new(kp, kd),
        (None, None) => {
            let map = TrackMap::preset(MapPreset::Loop);
            let table = ManeuverTable::seeded();
            calibrate_gains(&map, &table, &DEFAULT_KP_GRID, &DEFAULT_KD_GRID)
                .map_err(|e| runtime_error(format!("calibration failed: {e}")))?
                .best
        }
        _ => return Err(config_error("expert.kp and expert.kd must be set together")),
    };
    if let Some(v) = e.v_nominal {
        gains.v_nominal = v;
    }
    if let Some(s) = e.steer_scale {
        gains.steer_scale = s;
    }
    gains.validate().map_err(|e| config_error(format!("expert gains: {e}")))?;
    Ok(gains)
}

/// The dataset files the pipeline reads: `train.sources` if set, otherwise
/// the files `collect` writes for its configured sources under `--out`.
fn source_files(cli: &Cli, cfg: &RunConfig) -> Vec<PathBuf> {
    match &cfg.train.sources {
        Some(paths) => paths.clone(),
        None => cfg
            .collect
            .sources
            .iter()
            .map(|s| cli.out.join(format!("{}.imds", s.name)))
            .collect(),
    }
}

/// A source file's label: its single provenance key when it has exactly one
/// (the usual per-domain file), otherwise its file stem. Matches the labels
/// the mixing machinery reports.
fn source_label(ds: &Dataset, path: &Path) -> String {
    if ds.provenance.len() == 1 {
        ds.provenance.keys().next().expect("checked len").clone()
    } else {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    }
}

/// Load every source file and split it into frozen (train, val) halves.
///
/// The split seed is derived from the top-level seed and the source's label,
/// so `train` and `eval-offline` reconstruct identical halves without any
/// intermediate files: training pools draw only from train halves while the
/// offline matrix scores only val halves — shared, fixed validation sets.
fn load_split_sources(
    cli: &Cli,
    cfg: &RunConfig,
) -> Result<Vec<(String, Dataset, Dataset)>, Failure> {
    let files = source_files(cli, cfg);
    if files.is_empty() {
        return Err(config_error("no dataset sources configured (train.sources)"));
    }
    let mut out = Vec::with_capacity(files.len());
    for path in &files {
        let ds = dataset::read(path)
            .map_err(|e| config_error(format!("dataset {}: {e}", path.display())))?;
        let label = source_label(&ds, path);
        let split_seed = derive(cfg.seed, &format!("split:{label}"));
        let (train_half, val_half) = split(&ds, cfg.train.val_fraction, split_seed)
            .map_err(|e| config_error(format!("dataset {}: {e}", path.display())))?;
        out.push((label, train_half, val_half));
    }
    let mut labels: Vec<&String> = out.iter().map(|(l, _, _)| l).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != out.len() {
        return Err(config_error("dataset sources must have distinct labels"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn cmd_calibrate(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let map = parse_map(&cfg.sim.map)?;
    let table = ManeuverTable::seeded();
    let report = calibrate_gains(&map, &table, &DEFAULT_KP_GRID, &DEFAULT_KD_GRID)
        .map_err(|e| runtime_error(format!("calibration failed: {e}")))?;

    let gains_json = serde_json::to_value(&report.best)
        .map_err(|e| runtime_error(format!("encoding gains: {e}")))?;
    write_json(&cli.out.join("gains.json"), &gains_json)?;

    let mut table_txt = String::from("kp      kd      tiles    mean|d|\n");
    for p in &report.points {
        let _ = writeln!(table_txt, "{:<7} {:<7} {:<8.3} {:.5}", p.kp, p.kd, p.tiles, p.mean_abs_d);
    }
    let _ = writeln!(table_txt, "best: kp={} kd={}", report.best.kp, report.best.kd);
    write_text(&cli.out.join("calibration.txt"), &table_txt)?;

    println!("calibrated: kp={} kd={} -> {}", report.best.kp, report.best.kd, cli.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

struct ResolvedSource {
    name: String,
    map: TrackMap,
    domain: Domain,
    appearance: Option<DomainConfig>,
}

fn resolve_sources(cfg: &RunConfig) -> Result<Vec<ResolvedSource>, Failure> {
    let mut names: Vec<&str> = cfg.collect.sources.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != cfg.collect.sources.len() {
        return Err(config_error("collect.sources names must be unique"));
    }
    cfg.collect
        .sources
        .iter()
        .map(|s| {
            let domain = parse_domain(&s.domain)?;
            Ok(ResolvedSource {
                name: s.name.clone(),
                map: parse_map(&s.map)?,
                domain,
                appearance: appearance(cfg, domain),
            })
        })
        .collect()
}

fn cmd_collect(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.collect.frames_per_source == 0 {
        return Err(config_error("collect.frames_per_source must be positive"));
    }
    let sources = resolve_sources(cfg)?;
    let gains = resolve_gains(cfg)?;
    let perturb = cfg.expert.perturb.as_ref().map(PerturbSection::to_config);
    let camera = cfg.camera.camera();
    let table = ManeuverTable::seeded();
    let started = Instant::now();

    // Every source derives an independent seed stream from its name, so the
    // result set is the same no matter how the work is scheduled.
    let runs: Vec<Result<(String, Dataset, CollectReport), Failure>> = sources
        .par_iter()
        .map(|src| {
            let pilot = ExpertPilot { map: &src.map, gains, table: &table, perturb };
            let opts = CollectOptions {
                drop_perturbed: cfg.collect.drop_perturbed,
                appearance: src.appearance.clone(),
            };
            let seed = derive(cfg.seed, &format!("collect:{}", src.name));
            let (ds, report) = dataset::collect_with(
                &pilot,
                src.domain,
                &camera,
                cfg.collect.frames_per_source,
                seed,
                opts,
            )
            .map_err(|e| runtime_error(format!("collecting {}: {e}", src.name)))?;
            Ok((src.name.clone(), ds, report))
        })
        .collect();

    let mut report_rows = BTreeMap::new();
    for run in runs {
        let (name, ds, report) = run?;
        let path = cli.out.join(format!("{name}.imds"));
        dataset::write(&ds, &path)
            .map_err(|e| runtime_error(format!("writing {}: {e}", path.display())))?;
        let bytes = fs::metadata(&path)
            .map_err(|e| runtime_error(format!("stat {}: {e}", path.display())))?
            .len();
        println!(
            "{name}: {} frames, {} episodes, {} respawns -> {} ({} bytes)",
            report.frames,
            report.episodes,
            report.respawns,
            path.display(),
            bytes
        );
        report_rows.insert(
            name,
            json!({
                "frames": report.frames,
                "episodes": report.episodes,
                "respawns": report.respawns,
                "perturbed_kept": report.perturbed_kept,
                "perturbed_dropped": report.perturbed_dropped,
                "steps": report.steps,
                "bytes": bytes,
            }),
        );
    }
    write_json(&cli.out.join("collect_report.json"), &json!(report_rows))?;
    write_json(
        &cli.out.join("timing.json"),
        &json!({ "wall_time_s": started.elapsed().as_secs_f64() }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let label = cfg.train.label.clone();
    let halves = load_split_sources(cli, cfg)?;
    let parts: Vec<(String, &Dataset)> =
        halves.iter().map(|(l, train_half, _)| (l.clone(), train_half)).collect();

    let k = parts.len();
    let total = match cfg.train.total_count {
        Some(t) => t,
        None => {
            let min_half = parts.iter().map(|(_, d)| d.len()).min().unwrap_or(0);
            (min_half / k) * k
        }
    };
    if total == 0 {
        return Err(config_error("training pool is empty; collect more frames"));
    }

    let mix_seed = derive(cfg.seed, &format!("mix:{label}"));
    let pool = mix_equal_parts(&parts, total, mix_seed)
        .map_err(|e| config_error(format!("mixing training pool: {e}")))?;

    let train_cfg = TrainConfig {
        mix: None,
        epochs: cfg.train.epochs.unwrap_or(lanepilot::train::DEFAULT_EPOCHS),
        batch_size: cfg.train.batch_size.unwrap_or(lanepilot::train::DEFAULT_BATCH_SIZE),
        optimizer: cfg.train.optimizer,
        model: ModelConfig::default(),
        seed: derive(cfg.seed, &format!("train:{label}")),
        val_fraction: cfg.train.val_fraction,
        split_seed: None,
    };
    train_cfg.validate().map_err(|e| config_error(format!("train settings: {e}")))?;

    let started = Instant::now();
    let outcome = multi_seed_on(&pool, &train_cfg, cfg.train.seeds)
        .map_err(|e| runtime_error(format!("training {label}: {e}")))?;
    let wall = started.elapsed().as_secs_f64();

    let dir = cli.out.join(&label);
    fs::create_dir_all(&dir)
        .map_err(|e| runtime_error(format!("cannot create {}: {e}", dir.display())))?;

    for (i, (params, history)) in outcome.runs.iter().enumerate() {
        let cp = Checkpoint { config: train_cfg.model.clone(), params: params.clone(), adam: None };
        let path = dir.join(format!("seed-{i}.imnn"));
        save_checkpoint(&path, &cp)
            .map_err(|e| runtime_error(format!("writing {}: {e}", path.display())))?;
        let hist_json = serde_json::to_value(history)
            .map_err(|e| runtime_error(format!("encoding history: {e}")))?;
        write_json(&dir.join(format!("history-{i}.json")), &hist_json)?;
    }

    let summary = &outcome.summary;
    let result = json!({
        "label": label,
        "sources": parts.iter().map(|(l, d)| json!({"label": l, "train_half": d.len()})).collect::<Vec<_>>(),
        "total_count": total,
        "epochs": train_cfg.epochs,
        "batch_size": train_cfg.batch_size,
        "runs": cfg.train.seeds,
        "sweep": serde_json::to_value(summary).map_err(|e| runtime_error(e.to_string()))?,
        "selected": format!("seed-{}.imnn", summary.best),
    });
    write_json(&dir.join("result.json"), &result)?;
    write_json(&dir.join("timing.json"), &json!({ "wall_time_s": wall }))?;

    let mut txt = format!("{label}: {} runs, {} epochs, pool {}\n", cfg.train.seeds, train_cfg.epochs, total);
    for (i, row) in summary.final_val.iter().enumerate() {
        let marker = if i == summary.best { " <- selected" } else { "" };
        let _ = write!(txt, "run {i} (seed {}):", summary.seeds[i]);
        for (src, mse) in row {
            let _ = write!(txt, " {src}={mse:.4}");
        }
        let _ = writeln!(txt, " avg={:.4}{marker}", summary.avg[i]);
    }
    write_text(&dir.join("result.txt"), &txt)?;
    print!("{txt}");
    println!("wrote {} checkpoints to {}", cfg.train.seeds, dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-offline
// ---------------------------------------------------------------------------

/// Load every configured checkpoint; they must all share one architecture.
fn load_checkpoints(cfg: &RunConfig) -> Result<(ModelConfig, Vec<(String, ModelParams<f32>)>), Failure> {
    if cfg.eval.checkpoints.is_empty() {
        return Err(config_error("no checkpoints configured (eval.checkpoints)"));
    }
    let mut model_cfg: Option<ModelConfig> = None;
    let mut models = Vec::with_capacity(cfg.eval.checkpoints.len());
    for spec in &cfg.eval.checkpoints {
        let cp = load_checkpoint(&spec.path)
            .map_err(|e| config_error(format!("checkpoint {}: {e}", spec.path.display())))?;
        match &model_cfg {
            None => model_cfg = Some(cp.config.clone()),
            Some(first) if *first != cp.config => {
                return Err(config_error(format!(
                    "checkpoint {} has a different architecture than the first one",
                    spec.path.display()
                )));
            }
            Some(_) => {}
        }
        models.push((spec.label.clone(), cp.params));
    }
    Ok((model_cfg.expect("at least one checkpoint"), models))
}

fn cmd_eval_offline(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let (model_cfg, models) = load_checkpoints(cfg)?;
    let halves = load_split_sources(cli, cfg)?;
    let mut vals = BTreeMap::new();
    for (label, _, val_half) in &halves {
        vals.insert(label.clone(), val_half.samples.clone());
    }

    let started = Instant::now();
    let model_refs: Vec<(String, &ModelParams<f32>)> =
        models.iter().map(|(l, p)| (l.clone(), p)).collect();
    let matrix: MseMatrix = offline_matrix(&model_cfg, &model_refs, &vals)
        .map_err(|e| runtime_error(format!("offline evaluation: {e}")))?;

    let matrix_json =
        serde_json::to_value(&matrix).map_err(|e| runtime_error(e.to_string()))?;
    write_json(&cli.out.join("mse_matrix.json"), &matrix_json)?;
    write_text(&cli.out.join("mse_matrix.txt"), &matrix.text_table())?;
    write_json(
        &cli.out.join("timing.json"),
        &json!({ "wall_time_s": started.elapsed().as_secs_f64() }),
    )?;
    print!("{}", matrix.text_table());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-loop
// ---------------------------------------------------------------------------

fn eval_scenarios(cfg: &RunConfig, map: &TrackMap) -> Result<Vec<Scenario>, Failure> {
    if cfg.eval.starts == 0 {
        return Err(config_error("eval.starts must be at least 1"));
    }
    if !(cfg.eval.time_limit_s > 0.0) {
        return Err(config_error("eval.time_limit_s must be positive"));
    }
    let clean = parse_domain(&cfg.eval.clean_domain)?;
    let shifted = parse_domain(&cfg.eval.shifted_domain)?;
    let mut scenarios = Vec::new();
    for domain in [clean, shifted] {
        for i in 0..cfg.eval.starts {
            let u = (i as f64 + 0.5) / cfg.eval.starts as f64;
            scenarios.push(Scenario {
                name: format!("{}-start-{i}", domain.name()),
                domain,
                start: map.spawn_at(u),
                time_limit_s: cfg.eval.time_limit_s,
                appearance: appearance(cfg, domain),
            });
        }
    }
    Ok(scenarios)
}

/// The policy set for closed-loop runs: the calibrated expert plus one
/// pixel-driven policy per configured checkpoint.
fn build_policies<'a>(
    cfg: &RunConfig,
    pilot: ExpertPilot<'a>,
) -> Result<Vec<(String, Box<dyn DrivePolicy + 'a>)>, Failure> {
    let mut policies: Vec<(String, Box<dyn DrivePolicy + 'a>)> =
        vec![("EXPERT".into(), Box::new(ExpertDriver::new(pilot)))];
    if cfg.eval.checkpoints.is_empty() {
        return Ok(policies);
    }
    let (model_cfg, models) = load_checkpoints(cfg)?;
    for (label, params) in models {
        let policy: NeuralPolicy = policy_from_model(&model_cfg, &params)
            .map_err(|e| config_error(format!("checkpoint {label}: {e}")))?;
        policies.push((label, Box::new(policy)));
    }
    Ok(policies)
}

fn domain_total(suite: &SuiteReport, policy: &str, domain: Domain) -> f64 {
    let Some(report) = suite.policies.iter().find(|p| p.policy == policy) else {
        return 0.0;
    };
    suite
        .scenarios
        .iter()
        .zip(&report.results)
        .filter(|(sc, _)| sc.domain == domain)
        .map(|(_, r)| r.tiles)
        .sum()
}

fn cmd_eval_loop(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let map = parse_map(&cfg.eval.map)?;
    let camera = cfg.camera.camera();
    let gains = resolve_gains(cfg)?;
    let table = ManeuverTable::seeded();
    let scenarios = eval_scenarios(cfg, &map)?;
    let clean = parse_domain(&cfg.eval.clean_domain)?;
    let shifted = parse_domain(&cfg.eval.shifted_domain)?;
    if cfg.eval.rollout_seeds == 0 {
        return Err(config_error("eval.rollout_seeds must be at least 1"));
    }

    let started = Instant::now();
    let rollout_base = derive(cfg.seed, "rollout");
    let seeds: Vec<u64> =
        (0..cfg.eval.rollout_seeds).map(|j| derive_idx(rollout_base, j as u64)).collect();

    // One suite per rollout seed; each builds its own policy set so the runs
    // are independent and can be scheduled in any order.
    let suites: Vec<Result<SuiteReport, Failure>> = seeds
        .par_iter()
        .map(|&suite_seed| {
            let pilot = ExpertPilot { map: &map, gains, table: &table, perturb: None };
            let mut policies = build_policies(cfg, pilot)?;
            let mut refs: Vec<(String, &mut dyn DrivePolicy)> = policies
                .iter_mut()
                .map(|(label, p)| (label.clone(), p.as_mut() as &mut dyn DrivePolicy))
                .collect();
            scenario_suite(&mut refs, &map, &camera, &scenarios, suite_seed)
                .map_err(|e| runtime_error(format!("closed-loop rollout: {e}")))
        })
        .collect();
    let suites: Vec<SuiteReport> = suites.into_iter().collect::<Result<_, _>>()?;

    let policy_labels: Vec<String> =
        suites[0].policies.iter().map(|p| p.policy.clone()).collect();
    let mut policy_rows = Vec::new();
    for label in &policy_labels {
        let clean_per_seed: Vec<f64> =
            suites.iter().map(|s| domain_total(s, label, clean)).collect();
        let shifted_per_seed: Vec<f64> =
            suites.iter().map(|s| domain_total(s, label, shifted)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        policy_rows.push(json!({
            "label": label,
            "clean": { "per_seed": clean_per_seed.clone(), "mean": mean(&clean_per_seed) },
            "shifted": { "per_seed": shifted_per_seed.clone(), "mean": mean(&shifted_per_seed) },
        }));
    }

    let report = json!({
        "map": cfg.eval.map,
        "clean_domain": clean.name(),
        "shifted_domain": shifted.name(),
        "starts": cfg.eval.starts,
        "time_limit_s": cfg.eval.time_limit_s,
        "rollout_seeds": seeds,
        "policies": policy_rows,
        "suites": suites.iter().map(|s| serde_json::to_value(s).unwrap_or_default()).collect::<Vec<_>>(),
    });
    write_json(&cli.out.join("closed_loop.json"), &report)?;

    let mut txt = format!(
        "closed loop on {} ({} starts x {:.0} s, {} rollout seeds)\n{:<14} {:>20} {:>20}\n",
        cfg.eval.map,
        cfg.eval.starts,
        cfg.eval.time_limit_s,
        cfg.eval.rollout_seeds,
        "policy",
        format!("{} tiles", clean.name()),
        format!("{} tiles", shifted.name()),
    );
    for row in &policy_rows {
        let _ = writeln!(
            txt,
            "{:<14} {:>20.2} {:>20.2}",
            row["label"].as_str().unwrap_or("-"),
            row["clean"]["mean"].as_f64().unwrap_or(f64::NAN),
            row["shifted"]["mean"].as_f64().unwrap_or(f64::NAN),
        );
    }
    write_text(&cli.out.join("closed_loop.txt"), &txt)?;
    print!("{txt}");

    if cfg.eval.keep_traces {
        let trace_dir = cli.out.join("traces");
        let pilot = ExpertPilot { map: &map, gains, table: &table, perturb: None };
        let mut policies = build_policies(cfg, pilot)?;
        for (label, policy) in policies.iter_mut() {
            let dir = trace_dir.join(label.as_str());
            fs::create_dir_all(&dir)
                .map_err(|e| runtime_error(format!("cannot create {}: {e}", dir.display())))?;
            for sc in &scenarios {
                let result = closed_loop(policy.as_mut(), &map, &camera, sc, seeds[0], true)
                    .map_err(|e| runtime_error(format!("tracing {}: {e}", sc.name)))?;
                let trace = result.trace.as_deref().unwrap_or(&[]);
                write_text(&dir.join(format!("{}.csv", sc.name)), &trace_csv(trace))?;
            }
        }
    }

    write_json(
        &cli.out.join("timing.json"),
        &json!({ "wall_time_s": started.elapsed().as_secs_f64() }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Random batch-4 inputs in the pixel range with targets in the wheel-command
/// range.
fn gradcheck_batch<T: lanepilot::nn::Scalar>(
    cfg: &ModelConfig,
    seed: u64,
) -> (Tensor<T>, Tensor<T>) {
    let n = 4;
    let mut rng = CounterRng::new(seed);
    let len = n * cfg.input_channels * cfg.input_height * cfg.input_width;
    let x = Tensor::from_vec(
        &[n, cfg.input_channels, cfg.input_height, cfg.input_width],
        (0..len).map(|_| T::from_f64(rng.range(0.0, 1.0))).collect(),
    );
    let t = Tensor::from_vec(
        &[n, cfg.outputs],
        (0..n * cfg.outputs).map(|_| T::from_f64(rng.range(-1.0, 1.0))).collect(),
    );
    (x, t)
}

/// The reference probe is fixed: the 64-bit metric is an element-wise
/// worst-case ratio with a 1e-8 denominator floor, so its tight threshold is
/// only meaningful for a pinned draw (an arbitrary seed can sample a
/// parameter whose true gradient is near zero, where finite-difference noise
/// alone reaches ~1e-3 against the floor without any backward-pass bug).
fn cmd_gradcheck(cli: &Cli) -> Result<(), Failure> {
    fs::create_dir_all(&cli.out)
        .map_err(|e| runtime_error(format!("cannot create {}: {e}", cli.out.display())))?;
    let cfg = ModelConfig::default();
    let started = Instant::now();

    let params64 = ModelParams::<f64>::init(&cfg, 11);
    let (x64, t64) = gradcheck_batch::<f64>(&cfg, 12);
    let report64 = grad_check(&cfg, &params64, &x64, &t64, 3e-6, 20, 13, 14)
        .map_err(|e| runtime_error(format!("gradient check: {e}")))?;

    let params32 = ModelParams::<f32>::init(&cfg, 80);
    let (x32, t32) = gradcheck_batch::<f32>(&cfg, 81);
    let report32 = grad_check_f32(&cfg, &params32, &x32, &t32, 1e-5, 24, 8, 9)
        .map_err(|e| runtime_error(format!("gradient check (32-bit): {e}")))?;

    let pass64 = report64.max_rel_err < 1e-6;
    let pass32 = report32.max_rel_err < 1e-3;
    let report = json!({
        "f64": { "max_rel_err": report64.max_rel_err, "worst_tensor": report64.worst_tensor(), "threshold": 1e-6, "passed": pass64 },
        "f32": { "max_rel_err": report32.max_rel_err, "worst_tensor": report32.worst_tensor(), "threshold": 1e-3, "passed": pass32 },
    });
    write_json(&cli.out.join("gradcheck.json"), &report)?;
    write_json(
        &cli.out.join("timing.json"),
        &json!({ "wall_time_s": started.elapsed().as_secs_f64() }),
    )?;
    println!(
        "64-bit: max relative error {:.3e} (worst: {}) {}",
        report64.max_rel_err,
        report64.worst_tensor(),
        if pass64 { "ok" } else { "FAIL" }
    );
    println!(
        "32-bit: max relative error {:.3e} (worst: {}) {}",
        report32.max_rel_err,
        report32.worst_tensor(),
        if pass32 { "ok" } else { "FAIL" }
    );
    if pass64 && pass32 {
        Ok(())
    } else {
        Err(runtime_error("gradient check exceeded its error threshold"))
    }
}

// ---------------------------------------------------------------------------
// dump-frames
// ---------------------------------------------------------------------------

fn cmd_dump_frames(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let sources = resolve_sources(cfg)?;
    let camera = cfg.camera.camera();
    let dir = cli.out.join("frames");
    fs::create_dir_all(&dir)
        .map_err(|e| runtime_error(format!("cannot create {}: {e}", dir.display())))?;

    for src in &sources {
        let dcfg = src.appearance.clone().unwrap_or_else(|| domain_preset(src.domain));
        let seed_base = derive(cfg.seed, &format!("dump:{}", src.name));
        for (k, u) in [0.1f64, 0.35, 0.6, 0.85].iter().enumerate() {
            let pose = src.map.spawn_at(*u);
            let frame =
                render_frame(&src.map, pose, &camera, &dcfg, derive_idx(seed_base, k as u64));
            let path = dir.join(format!("{}-{k}.png", src.name));
            image::save_buffer(
                &path,
                &frame.data,
                FRAME_WIDTH as u32,
                FRAME_HEIGHT as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| runtime_error(format!("writing {}: {e}", path.display())))?;
        }
        println!("{}: 4 frames", src.name);
    }
    println!("frames in {}", dir.display());
    Ok(())
}

