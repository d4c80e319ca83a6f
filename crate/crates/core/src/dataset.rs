//! Sample collection, packed binary dataset storage, equal-proportion
//! mixing, and train/validation splitting.
//!
//! A [`Sample`] pairs one preprocessed camera frame with the wheel command
//! the expert executed when that frame was taken, tagged with the visual
//! domain it was rendered under. [`collect`] drives the expert around a map
//! and records one sample per control step, respawning on a random
//! centerline pose whenever the robot leaves the road. Datasets are stored
//! in a fixed little-endian binary layout (see [`to_bytes`]), combined
//! across sources in exactly equal proportions by [`mix_equal`], and
//! partitioned into train/validation halves by [`split`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{ExpertError, ExpertPilot};
use crate::preprocess::{preprocess, InputTensor, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_LEN, INPUT_WIDTH};
use crate::render::{domain_preset, jittered_camera, CameraModel, Domain, DomainConfig, FrameRenderer};
use crate::rng::{derive, derive_idx, CounterRng};
use crate::simcore::{step_dynamics, RobotState, SIM_DT};

/// File magic for the packed dataset format.
pub const DATASET_MAGIC: [u8; 4] = *b"IMDS";
/// Format version written and accepted.
pub const DATASET_VERSION: u16 = 1;
/// Fixed header size: magic, version u16, count u32, then C/H/W as u16 each.
pub const HEADER_BYTES: usize = 16;
/// Bytes per stored sample: the input tensor as 32-bit floats, two action
/// floats, and one domain tag byte.
pub const SAMPLE_BYTES: usize = INPUT_LEN * 4 + 2 * 4 + 1;
/// Default validation fraction used by [`split`].
pub const DEFAULT_VAL_FRACTION: f64 = 0.30;

/// Everything that can go wrong collecting, storing, or combining datasets.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error("cannot collect a dataset of zero frames")]
    ZeroFrames,
    #[error(
        "collection stalled: executed {executed} steps but kept only {kept} of {requested} \
         frames (is the perturbation dropping almost everything?)"
    )]
    Stalled { executed: usize, kept: usize, requested: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic {found:?} at offset 0 (expected \"IMDS\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} at offset 4 (expected {DATASET_VERSION})")]
    BadVersion { found: u16 },
    #[error(
        "unexpected tensor shape {c}x{h}x{w} at offset 10 (expected \
         {INPUT_CHANNELS}x{INPUT_HEIGHT}x{INPUT_WIDTH})"
    )]
    BadShape { c: u16, h: u16, w: u16 },
    #[error("truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("trailing data at offset {offset}: longer than the declared {count} samples")]
    TrailingData { offset: usize, count: usize },
    #[error("invalid sample {index} at offset {offset}: {reason}")]
    InvalidSample { index: usize, offset: usize, reason: String },
    #[error("dataset holds {0} samples; the format caps the count at a u32")]
    TooManySamples(usize),
    #[error("mixing needs at least one source")]
    NoSources,
    #[error("total count {total} is not divisible by the {sources} sources")]
    IndivisibleTotal { total: usize, sources: usize },
    #[error("source {name} short by {shortfall}")]
    ShortSource { name: String, shortfall: usize },
    #[error("val_fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
}

/// One training record: a preprocessed frame, the wheel command executed at
/// that instant, and the visual domain the frame was rendered under.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: InputTensor,
    /// `[v_left, v_right]`, each in `[-1, 1]`.
    pub action: [f32; 2],
    /// [`Domain`] id tag in `{0, 1, 2, 3}`.
    pub domain_id: u8,
}

/// An ordered sequence of samples plus per-source counts.
///
/// Provenance keys are domain names for collected or loaded datasets and
/// mix-source labels directly after [`mix_equal`]; the counts always sum to
/// the number of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: BTreeMap<String, usize>,
}

impl Dataset {
    /// Build a dataset, deriving provenance from the samples' domain tags.
    pub fn from_samples(samples: Vec<Sample>) -> Dataset {
        let mut provenance = BTreeMap::new();
        for s in &samples {
            let name = Domain::from_id(s.domain_id).map_or("UNKNOWN", Domain::name);
            *provenance.entry(name.to_string()).or_insert(0) += 1;
        }
        Dataset { samples, provenance }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check the type invariants: every action and input value in range,
    /// every domain tag known, provenance counts summing to the length.
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (index, s) in self.samples.iter().enumerate() {
            let offset = HEADER_BYTES + index * SAMPLE_BYTES;
            check_sample(s, index, offset)?;
        }
        let total: usize = self.provenance.values().sum();
        if total != self.samples.len() {
            return Err(DatasetError::InvalidSample {
                index: self.samples.len(),
                offset: 0,
                reason: format!(
                    "provenance counts sum to {total} but the dataset holds {} samples",
                    self.samples.len()
                ),
            });
        }
        Ok(())
    }
}

fn check_sample(s: &Sample, index: usize, offset: usize) -> Result<(), DatasetError> {
    let bad = |field_offset: usize, reason: String| DatasetError::InvalidSample {
        index,
        offset: field_offset,
        reason,
    };
    for (k, &v) in s.input.data.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(bad(offset + 4 * k, format!("input value {v} outside [0, 1]")));
        }
    }
    for (k, &a) in s.action.iter().enumerate() {
        if !(-1.0..=1.0).contains(&a) {
            return Err(bad(
                offset + 4 * (INPUT_LEN + k),
                format!("action value {a} outside [-1, 1]"),
            ));
        }
    }
    if Domain::from_id(s.domain_id).is_none() {
        return Err(bad(offset + SAMPLE_BYTES - 1, format!("unknown domain id {}", s.domain_id)));
    }
    Ok(())
}

/// Collection behavior switches.
#[derive(Debug, Clone, Default)]
pub struct CollectOptions {
    /// Execute perturbation bursts but leave the perturbed frames out of the
    /// dataset (the clean recovery frames that follow are still recorded).
    pub drop_perturbed: bool,
    /// Appearance override; `None` renders with the domain's preset. The
    /// samples are tagged with the `domain` argument either way.
    pub appearance: Option<DomainConfig>,
}

/// Bookkeeping from one collection run, reported alongside the dataset.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CollectReport {
    /// Samples recorded (equals the requested count on success).
    pub frames: usize,
    /// Episodes driven: one initial spawn plus one per respawn.
    pub episodes: usize,
    /// Road departures that forced a respawn.
    pub respawns: usize,
    /// Recorded samples whose action carried a perturbation offset.
    pub perturbed_kept: usize,
    /// Perturbed control steps executed but not recorded.
    pub perturbed_dropped: usize,
    /// Total control steps executed (recorded or not).
    pub steps: usize,
}

/// Drive the expert and record one sample per control step.
///
/// Each step renders the camera view at the current pose under `domain`,
/// preprocesses it into a network input, and stores it with the action the
/// expert *executed* (perturbation offsets included). When the robot leaves
/// the road it respawns on a seeded random centerline pose — with freshly
/// jittered camera extrinsics where the domain calls for them — and
/// collection continues until `n_frames` samples exist. The result is a
/// pure function of the arguments.
pub fn collect(
    pilot: &ExpertPilot,
    domain: Domain,
    cam: &CameraModel,
    n_frames: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    collect_with(pilot, domain, cam, n_frames, seed, CollectOptions::default()).map(|(ds, _)| ds)
}

/// [`collect`] with behavior switches, also returning run bookkeeping.
pub fn collect_with(
    pilot: &ExpertPilot,
    domain: Domain,
    cam: &CameraModel,
    n_frames: usize,
    seed: u64,
    opts: CollectOptions,
) -> Result<(Dataset, CollectReport), DatasetError> {
    pilot.gains.validate()?;
    pilot.table.validate()?;
    if let Some(p) = &pilot.perturb {
        p.validate()?;
    }
    if n_frames == 0 {
        return Err(DatasetError::ZeroFrames);
    }

    let dcfg = opts.appearance.clone().unwrap_or_else(|| domain_preset(domain));
    let mut spawn_rng = CounterRng::stream(seed, "spawn");
    let camera_seed = derive(seed, "camera");
    let frame_seed = derive(seed, "frame");
    let pilot_seed = derive(seed, "pilot");

    let mut episode: u64 = 0;
    let mut renderer =
        FrameRenderer::new(&jittered_camera(cam, &dcfg, derive_idx(camera_seed, episode)));
    let mut state = pilot.new_state(derive_idx(pilot_seed, episode));
    let mut robot = RobotState::at(pilot.map.spawn_at(spawn_rng.uniform()));

    let mut samples = Vec::with_capacity(n_frames);
    let mut report = CollectReport::default();
    // Dropping perturbed frames makes progress stochastic; cap the run so a
    // configuration that perturbs nearly every step errors instead of
    // spinning forever.
    let step_cap = n_frames.saturating_mul(64).max(100_000);

    while samples.len() < n_frames {
        if report.steps >= step_cap {
            return Err(DatasetError::Stalled {
                executed: report.steps,
                kept: samples.len(),
                requested: n_frames,
            });
        }
        if !pilot.map.is_drivable_at(robot.pose.x, robot.pose.y) {
            episode += 1;
            report.respawns += 1;
            renderer =
                FrameRenderer::new(&jittered_camera(cam, &dcfg, derive_idx(camera_seed, episode)));
            state = pilot.new_state(derive_idx(pilot_seed, episode));
            robot = RobotState::at(pilot.map.spawn_at(spawn_rng.uniform()));
        }
        let decision = pilot.act(&mut state, &robot);
        if opts.drop_perturbed && decision.perturbed {
            report.perturbed_dropped += 1;
        } else {
            let frame = renderer.render(
                pilot.map,
                robot.pose,
                &dcfg,
                derive_idx(frame_seed, report.steps as u64),
            );
            let input = preprocess(&frame).expect("renderer emits full-size frames");
            samples.push(Sample {
                input,
                action: [decision.action.v_left as f32, decision.action.v_right as f32],
                domain_id: domain.id(),
            });
            if decision.perturbed {
                report.perturbed_kept += 1;
            }
        }
        robot = step_dynamics(robot, decision.action, SIM_DT);
        report.steps += 1;
    }

    report.frames = samples.len();
    report.episodes = (episode + 1) as usize;
    let provenance = BTreeMap::from([(domain.name().to_string(), samples.len())]);
    Ok((Dataset { samples, provenance }, report))
}

/// Serialize a dataset into the packed binary layout.
///
/// Layout: `"IMDS"`, version `u16`, sample count `u32`, then channel/height/
/// width each as `u16` (16 header bytes total); then per sample the input
/// tensor as little-endian 32-bit floats, the two action floats, and one
/// domain tag byte.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>, DatasetError> {
    let count =
        u32::try_from(ds.samples.len()).map_err(|_| DatasetError::TooManySamples(ds.len()))?;
    let mut buf = Vec::with_capacity(HEADER_BYTES + ds.len() * SAMPLE_BYTES);
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(INPUT_CHANNELS as u16).to_le_bytes());
    buf.extend_from_slice(&(INPUT_HEIGHT as u16).to_le_bytes());
    buf.extend_from_slice(&(INPUT_WIDTH as u16).to_le_bytes());
    for s in &ds.samples {
        for v in &s.input.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for a in &s.action {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        buf.push(s.domain_id);
    }
    Ok(buf)
}

/// Parse the packed binary layout, validating structure and every stored
/// value. Errors carry the byte offset of the problem.
pub fn from_bytes(buf: &[u8]) -> Result<Dataset, DatasetError> {
    let need = |upto: usize| -> Result<(), DatasetError> {
        if buf.len() < upto {
            Err(DatasetError::Truncated { offset: buf.len() })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if buf[0..4] != DATASET_MAGIC {
        return Err(DatasetError::BadMagic { found: [buf[0], buf[1], buf[2], buf[3]] });
    }
    need(6)?;
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != DATASET_VERSION {
        return Err(DatasetError::BadVersion { found: version });
    }
    need(HEADER_BYTES)?;
    let count = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    let (c, h, w) = (
        u16::from_le_bytes([buf[10], buf[11]]),
        u16::from_le_bytes([buf[12], buf[13]]),
        u16::from_le_bytes([buf[14], buf[15]]),
    );
    if (c as usize, h as usize, w as usize) != (INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH) {
        return Err(DatasetError::BadShape { c, h, w });
    }
    let expected = HEADER_BYTES + count * SAMPLE_BYTES;
    need(expected)?;
    if buf.len() > expected {
        return Err(DatasetError::TrailingData { offset: expected, count });
    }

    let f32_at = |at: usize| f32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]);
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let base = HEADER_BYTES + index * SAMPLE_BYTES;
        let mut data = Vec::with_capacity(INPUT_LEN);
        for k in 0..INPUT_LEN {
            data.push(f32_at(base + 4 * k));
        }
        let action = [f32_at(base + 4 * INPUT_LEN), f32_at(base + 4 * (INPUT_LEN + 1))];
        let domain_id = buf[base + SAMPLE_BYTES - 1];
        let sample = Sample { input: InputTensor::from_data(data), action, domain_id };
        check_sample(&sample, index, base)?;
        samples.push(sample);
    }
    Ok(Dataset::from_samples(samples))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_owned(), source }
}

/// Write a dataset to `path` in the packed binary layout.
pub fn write(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, to_bytes(ds)?).map_err(io_err(path))
}

/// Read and validate a dataset from `path`.
pub fn read(path: &Path) -> Result<Dataset, DatasetError> {
    from_bytes(&fs::read(path).map_err(io_err(path))?)
}

/// Recipe for combining dataset files in equal proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub sources: Vec<PathBuf>,
    pub total_count: usize,
    pub seed: u64,
}

/// Label a mix source: its single provenance key when it has exactly one
/// (the common case of a per-domain file), otherwise its file stem.
fn source_label(ds: &Dataset, path: &Path) -> String {
    if ds.provenance.len() == 1 {
        ds.provenance.keys().next().unwrap().clone()
    } else {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    }
}

/// Draw exactly `total_count / k` samples, seeded and without replacement,
/// from each of the `k` source files, in source order. The output order and
/// contents are a pure function of the spec.
pub fn mix_equal(spec: &MixSpec) -> Result<Dataset, DatasetError> {
    let mut parts = Vec::with_capacity(spec.sources.len());
    for path in &spec.sources {
        let ds = read(path)?;
        let label = source_label(&ds, path);
        parts.push((label, ds));
    }
    let refs: Vec<(String, &Dataset)> =
        parts.iter().map(|(label, ds)| (label.clone(), ds)).collect();
    mix_equal_parts(&refs, spec.total_count, spec.seed)
}

/// In-memory form of [`mix_equal`]: equal seeded draws from already-loaded,
/// labeled source datasets. `mix_equal` is this applied to files.
pub fn mix_equal_parts(
    parts: &[(String, &Dataset)],
    total_count: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let k = parts.len();
    if k == 0 {
        return Err(DatasetError::NoSources);
    }
    if total_count % k != 0 {
        return Err(DatasetError::IndivisibleTotal { total: total_count, sources: k });
    }
    let per = total_count / k;

    let mut samples = Vec::with_capacity(total_count);
    let mut provenance: BTreeMap<String, usize> = BTreeMap::new();
    let mix_seed = derive(seed, "mix");
    for (i, (label, ds)) in parts.iter().enumerate() {
        if ds.len() < per {
            return Err(DatasetError::ShortSource {
                name: label.clone(),
                shortfall: per - ds.len(),
            });
        }
        let mut rng = CounterRng::new(derive_idx(mix_seed, i as u64));
        for idx in rng.sample_indices(ds.len(), per) {
            samples.push(ds.samples[idx].clone());
        }
        *provenance.entry(label.clone()).or_insert(0) += per;
    }
    Ok(Dataset { samples, provenance })
}

/// Train/validation sizes for `n` samples: the validation half gets
/// `round(n * val_fraction)`.
pub fn split_sizes(n: usize, val_fraction: f64) -> (usize, usize) {
    let val = ((n as f64) * val_fraction).round() as usize;
    (n - val, val)
}

/// Seeded shuffle, then partition into `(train, val)` with
/// `val = round(n * val_fraction)` samples. Each half's provenance is
/// recomputed from its samples' domain tags.
pub fn split(
    ds: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::BadFraction(val_fraction));
    }
    let (train_n, _) = split_sizes(ds.len(), val_fraction);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    CounterRng::stream(seed, "split").shuffle(&mut idx);
    let pick = |ids: &[usize]| {
        Dataset::from_samples(ids.iter().map(|&i| ds.samples[i].clone()).collect())
    };
    Ok((pick(&idx[..train_n]), pick(&idx[train_n..])))
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} samples [", self.samples.len())?;
        for (i, (name, n)) in self.provenance.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{name}: {n}")?;
        }
        write!(f, "]")
    }
}
