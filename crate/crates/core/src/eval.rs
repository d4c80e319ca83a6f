//! Model evaluation: offline error matrices over named validation subsets,
//! and closed-loop driving rollouts scored by road tiles covered before the
//! first infraction (or the time limit).
//!
//! Both halves are deterministic: the offline matrix is pure arithmetic, and
//! a rollout's camera jitter, per-frame pixel noise, and policy seeding all
//! derive from the single rollout seed, so repeating a run reproduces every
//! byte of its result and trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Sample;
use crate::expert::{ExpertPilot, PilotState};
use crate::nn::{model_forward, ModelConfig, ModelParams, NnError, RunMode, Tensor};
use crate::preprocess::preprocess;
use crate::render::{
    domain_preset, jittered_camera, CameraModel, Domain, DomainConfig, FrameRenderer, RgbImage,
};
use crate::rng::{derive, derive_idx};
use crate::simcore::{
    is_infraction, step_dynamics, tiles_driven, Action, Pose, RobotState, TrackMap, SIM_DT,
};
use crate::train::{eval_mse, source_average, TrainError};

/// Evaluation failures: bad inputs or propagated training/model errors.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    /// A named validation subset has no samples, so its column is undefined.
    #[error("validation subset for source {0} is empty")]
    EmptySubset(String),
    /// A rollout was asked to start off the drivable road.
    #[error("start pose ({x:.3}, {y:.3}) is off the drivable road")]
    BadStart { x: f64, y: f64 },
    #[error("bad scenario: {0}")]
    BadScenario(String),
}

// ---------------------------------------------------------------------------
// Offline error matrix
// ---------------------------------------------------------------------------

/// One matrix row: a method's per-source validation MSE plus the unweighted
/// average over sources.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseRow {
    pub method: String,
    pub by_source: BTreeMap<String, f64>,
    /// Unweighted mean of `by_source` values.
    pub avg: f64,
}

/// Per-source validation MSE for a set of methods, one row per method, with
/// the source-average column appended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseMatrix {
    /// Column order of the table (sorted source names).
    pub sources: Vec<String>,
    pub rows: Vec<MseRow>,
}

impl MseMatrix {
    pub fn row(&self, method: &str) -> Option<&MseRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Fixed-width text table, MSE values rounded to four decimals.
    pub fn text_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(std::iter::once("method".len()))
            .max()
            .unwrap_or(6);
        let col_w = self.sources.iter().map(|s| s.len().max(6)).collect::<Vec<_>>();
        let mut out = String::new();
        let _ = write!(out, "{:name_w$} |", "method");
        for (s, w) in self.sources.iter().zip(&col_w) {
            let _ = write!(out, " {s:>w$}");
        }
        out.push_str(" |    AVG\n");
        for row in &self.rows {
            let _ = write!(out, "{:name_w$} |", row.method);
            for (s, w) in self.sources.iter().zip(&col_w) {
                match row.by_source.get(s) {
                    Some(v) => {
                        let _ = write!(out, " {:>w$.4}", v);
                    }
                    None => {
                        let _ = write!(out, " {:>w$}", "-");
                    }
                }
            }
            let _ = writeln!(out, " | {:>6.4}", row.avg);
        }
        out
    }
}

/// Score every model on every named validation subset.
///
/// Each row reports one model's Eval-mode MSE per subset plus the unweighted
/// average over subsets. All subsets must be non-empty; every model is
/// checked against every subset, so all rows share the same columns.
pub fn offline_matrix(
    model: &ModelConfig,
    models: &[(String, &ModelParams<f32>)],
    val_sets: &BTreeMap<String, Vec<Sample>>,
) -> Result<MseMatrix, EvalError> {
    for (name, subset) in val_sets {
        if subset.is_empty() {
            return Err(EvalError::EmptySubset(name.clone()));
        }
    }
    let sources: Vec<String> = val_sets.keys().cloned().collect();
    let mut rows = Vec::with_capacity(models.len());
    for (method, params) in models {
        let mut by_source = BTreeMap::new();
        for (name, subset) in val_sets {
            by_source.insert(name.clone(), eval_mse(model, params, subset)?);
        }
        let avg = source_average(&by_source);
        rows.push(MseRow { method: method.clone(), by_source, avg });
    }
    Ok(MseMatrix { sources, rows })
}

// ---------------------------------------------------------------------------
// Drive policies
// ---------------------------------------------------------------------------

/// Anything that maps camera frames (and, for oracles, the true robot state)
/// to wheel commands, once per simulator tick.
pub trait DrivePolicy {
    /// Re-seed per-rollout state. Stateless policies ignore it.
    fn reset(&mut self, _seed: u64) {}
    /// Decide the wheel commands for the current frame.
    fn act(&mut self, frame: &RgbImage, robot: &RobotState) -> Action;
}

/// A trained network driving from pixels alone: preprocess the frame, run an
/// Eval-mode forward pass, clamp the two outputs to wheel commands.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    config: ModelConfig,
    params: ModelParams<f32>,
}

/// Wrap trained parameters as a driving policy.
///
/// Runs one probe forward pass on a zero frame so a config/parameter shape
/// mismatch is reported here rather than mid-rollout.
pub fn policy_from_model(
    config: &ModelConfig,
    params: &ModelParams<f32>,
) -> Result<NeuralPolicy, EvalError> {
    let probe = Tensor::<f32>::zeros(&[
        1,
        config.input_channels,
        config.input_height,
        config.input_width,
    ]);
    model_forward(config, params, &probe, RunMode::Eval, 0)?;
    Ok(NeuralPolicy { config: config.clone(), params: params.clone() })
}

impl NeuralPolicy {
    /// Network output for one preprocessed input, clamped to wheel commands.
    pub fn infer(&self, input: &crate::preprocess::InputTensor) -> Action {
        let mut x = Tensor::<f32>::zeros(&[
            1,
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ]);
        x.data.copy_from_slice(&input.data);
        let (out, _) = model_forward(&self.config, &self.params, &x, RunMode::Eval, 0)
            .expect("shape was validated by the construction probe");
        Action::new(f64::from(out.data[0]), f64::from(out.data[1]))
    }
}

impl DrivePolicy for NeuralPolicy {
    fn act(&mut self, frame: &RgbImage, _robot: &RobotState) -> Action {
        let input = preprocess(frame).expect("rendered frames are full camera size");
        self.infer(&input)
    }
}

/// The scripted expert as a policy (reads the true robot state, ignores the
/// frame). Used as the reference driver in closed-loop comparisons.
pub struct ExpertDriver<'a> {
    pilot: ExpertPilot<'a>,
    state: PilotState,
}

impl<'a> ExpertDriver<'a> {
    pub fn new(pilot: ExpertPilot<'a>) -> ExpertDriver<'a> {
        let state = pilot.new_state(0);
        ExpertDriver { pilot, state }
    }
}

impl DrivePolicy for ExpertDriver<'_> {
    fn reset(&mut self, seed: u64) {
        self.state = self.pilot.new_state(seed);
    }

    fn act(&mut self, _frame: &RgbImage, robot: &RobotState) -> Action {
        self.pilot.act(&mut self.state, robot).action
    }
}

/// Always outputs the same action. Useful as a do-nothing baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub Action);

impl DrivePolicy for ConstantPolicy {
    fn act(&mut self, _frame: &RgbImage, _robot: &RobotState) -> Action {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Closed-loop rollouts
// ---------------------------------------------------------------------------

/// One closed-loop driving task: where to start, how the world looks, and
/// how long the policy gets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub domain: Domain,
    pub start: Pose,
    /// Rollout length cap in seconds (must be positive).
    pub time_limit_s: f64,
    /// Appearance override; `None` renders with the domain's preset.
    #[serde(default)]
    pub appearance: Option<DomainConfig>,
}

/// One simulator tick of a kept trace: time, pose, lane fix (absent only if
/// the pose has no lane), and the executed action.
#[derive(Debug, Clone, Copy)]
pub struct TraceStep {
    pub t: f64,
    pub pose: Pose,
    /// `(lateral offset d, heading error phi)` at `pose`.
    pub lane: Option<(f64, f64)>,
    pub action: Action,
}

/// Outcome of one rollout.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    /// Road tiles' worth of path driven (path length / tile edge).
    pub tiles: f64,
    /// Seconds survived, capped at the scenario time limit.
    pub survival_s: f64,
    /// The rollout ended by leaving the drivable road.
    pub infraction: bool,
    /// Per-tick trace, present when requested.
    #[serde(skip)]
    pub trace: Option<Vec<TraceStep>>,
}

/// Run one policy through one scenario.
///
/// Per tick: render the camera frame, ask the policy for an action, record
/// the trace step, advance the dynamics one period, and stop at the first
/// infraction or once the time limit is reached. The start pose must be on
/// the drivable road. Camera jitter, frame noise, and the policy seed all
/// derive from `seed`.
pub fn closed_loop(
    policy: &mut dyn DrivePolicy,
    map: &TrackMap,
    camera: &CameraModel,
    scenario: &Scenario,
    seed: u64,
    keep_trace: bool,
) -> Result<ScenarioResult, EvalError> {
    if !(scenario.time_limit_s > 0.0) {
        return Err(EvalError::BadScenario(format!(
            "time limit must be positive, got {}",
            scenario.time_limit_s
        )));
    }
    if !map.is_drivable_at(scenario.start.x, scenario.start.y) {
        return Err(EvalError::BadStart { x: scenario.start.x, y: scenario.start.y });
    }
    let dcfg =
        scenario.appearance.clone().unwrap_or_else(|| domain_preset(scenario.domain));
    let renderer = FrameRenderer::new(&jittered_camera(camera, &dcfg, derive(seed, "camera")));
    let frame_base = derive(seed, "frame");
    policy.reset(derive(seed, "policy"));

    let mut robot = RobotState::at(scenario.start);
    let mut trace = if keep_trace { Some(Vec::new()) } else { None };
    let mut infraction = false;
    let mut step: u64 = 0;
    while robot.t < scenario.time_limit_s - 1e-9 {
        let frame = renderer.render(map, robot.pose, &dcfg, derive_idx(frame_base, step));
        let action = policy.act(&frame, &robot);
        if let Some(tr) = trace.as_mut() {
            let lane = map.lane_pose(robot.pose).map(|lp| (lp.d, lp.phi));
            tr.push(TraceStep { t: robot.t, pose: robot.pose, lane, action });
        }
        robot = step_dynamics(robot, action, SIM_DT);
        step += 1;
        if is_infraction(map, robot.pose) {
            infraction = true;
            break;
        }
    }
    // A rollout that ran out the clock survived the whole limit; only a
    // crash reports the (earlier) tick it happened on.
    let survival_s = if infraction {
        robot.t.min(scenario.time_limit_s)
    } else {
        scenario.time_limit_s
    };
    Ok(ScenarioResult { tiles: tiles_driven(&robot), survival_s, infraction, trace })
}

/// Render a trace as CSV: `t,x,y,theta,d,phi,v_left,v_right`, one row per
/// tick. Lane columns are left empty where no lane fix exists.
pub fn trace_csv(trace: &[TraceStep]) -> String {
    let mut out = String::from("t,x,y,theta,d,phi,v_left,v_right\n");
    for s in trace {
        let (d, phi) = match s.lane {
            Some((d, phi)) => (d.to_string(), phi.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{d},{phi},{},{}",
            s.t, s.pose.x, s.pose.y, s.pose.theta, s.action.v_left, s.action.v_right
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario suites
// ---------------------------------------------------------------------------

/// One policy's scores across a scenario list, in scenario order.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyReport {
    pub policy: String,
    pub results: Vec<ScenarioResult>,
    /// Sum of `tiles` over all scenarios.
    pub total_tiles: f64,
}

/// Every policy scored on every scenario of a suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub scenarios: Vec<Scenario>,
    pub policies: Vec<PolicyReport>,
}

impl SuiteReport {
    pub fn total_of(&self, policy: &str) -> Option<f64> {
        self.policies.iter().find(|p| p.policy == policy).map(|p| p.total_tiles)
    }

    /// Fixed-width text table: one row per policy, one tiles column per
    /// scenario, total appended. Values rounded to two decimals.
    pub fn text_table(&self) -> String {
        let name_w = self
            .policies
            .iter()
            .map(|p| p.policy.len())
            .chain(std::iter::once("policy".len()))
            .max()
            .unwrap_or(6);
        let col_w: Vec<usize> = self.scenarios.iter().map(|s| s.name.len().max(6)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:name_w$} |", "policy");
        for (s, w) in self.scenarios.iter().zip(&col_w) {
            let _ = write!(out, " {:>w$}", s.name);
        }
        out.push_str(" |  TOTAL\n");
        for p in &self.policies {
            let _ = write!(out, "{:name_w$} |", p.policy);
            for (r, w) in p.results.iter().zip(&col_w) {
                let flag = if r.infraction { "!" } else { "" };
                let _ = write!(out, " {:>w$}", format!("{:.2}{flag}", r.tiles));
            }
            let _ = writeln!(out, " | {:>6.2}", p.total_tiles);
        }
        out
    }
}

/// Run every policy through every scenario.
///
/// Scenario `i` uses the same derived rollout seed for all policies, so each
/// policy sees identical camera jitter and frame noise — differences in score
/// come from the policies alone. Traces are not kept; use [`closed_loop`]
/// directly to record one.
pub fn scenario_suite(
    policies: &mut [(String, &mut dyn DrivePolicy)],
    map: &TrackMap,
    camera: &CameraModel,
    scenarios: &[Scenario],
    seed: u64,
) -> Result<SuiteReport, EvalError> {
    let base = derive(seed, "scenario");
    let mut reports = Vec::with_capacity(policies.len());
    for (name, policy) in policies.iter_mut() {
        let mut results = Vec::with_capacity(scenarios.len());
        for (i, sc) in scenarios.iter().enumerate() {
            results.push(closed_loop(*policy, map, camera, sc, derive_idx(base, i as u64), false)?);
        }
        let total_tiles = results.iter().map(|r| r.tiles).sum();
        reports.push(PolicyReport { policy: name.clone(), results, total_tiles });
    }
    Ok(SuiteReport { scenarios: scenarios.to_vec(), policies: reports })
}
