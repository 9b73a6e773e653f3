//! Per-distance-segment target speeds learned from repeated runs.

use std::time::{Duration, Instant};

use crate::policy::{agent_act, CorrectionBuffer, Perception, PolicyError, SafetyLabel, ValueBuffer};
use crate::rng;
use crate::sim::{Env, SimError};

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("no adaptation run finished within the budget")]
    NoRuns,
    #[error("bad speed model file: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedParams {
    pub segment_length: f64,
    pub v_init: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub delta_up: f64,
    pub delta_down: f64,
    /// Segments lowered after a failure, counting back from the failing one.
    pub failure_window: usize,
}

impl Default for SpeedParams {
    fn default() -> Self {
        Self {
            segment_length: 25.0,
            v_init: 8.0,
            v_min: 4.0,
            v_max: 30.0,
            delta_up: 1.0,
            delta_down: 2.0,
            failure_window: 1,
        }
    }
}

impl SpeedParams {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let ok = self.segment_length > 0.0
            && self.v_min > 0.0
            && self.v_min <= self.v_init
            && self.v_init <= self.v_max
            && self.delta_up >= 0.0
            && self.delta_down >= 0.0
            && self.failure_window >= 1;
        if ok {
            Ok(())
        } else {
            Err(AdaptError::Contract(format!("invalid speed parameters {self:?}")))
        }
    }
}

/// Target speed per fixed-length distance segment, measured from the start line.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpeedModel {
    pub params: SpeedParams,
    pub targets: Vec<f64>,
    /// Estimated lap length once a full lap has been driven.
    pub lap_length: Option<f64>,
}

impl SegmentSpeedModel {
    /// No segments yet: every distance maps to `v_init`.
    pub fn new(params: SpeedParams) -> Self {
        Self {
            params,
            targets: Vec::new(),
            lap_length: None,
        }
    }

    /// `v_init` everywhere on a lap of the given length.
    pub fn uniform(params: SpeedParams, lap_length: f64) -> Self {
        let mut m = Self::new(params);
        m.lap_length = Some(lap_length);
        m.cover(lap_length);
        m
    }

    pub fn segment_count(&self) -> usize {
        self.targets.len()
    }

    fn segment_of(&self, distance: f64) -> usize {
        let d = match self.lap_length {
            Some(l) if l > 0.0 => distance.rem_euclid(l),
            _ => distance,
        };
        (d / self.params.segment_length).floor() as usize
    }

    /// Extends the segment list with `v_init` entries until it covers `distance`.
    fn cover(&mut self, distance: f64) {
        let needed = (distance / self.params.segment_length).ceil().max(1.0) as usize;
        while self.targets.len() < needed {
            self.targets.push(self.params.v_init);
        }
    }

    pub fn target_speed_at(&self, distance: f64) -> f64 {
        if self.targets.is_empty() {
            return self.params.v_init;
        }
        self.targets[self.segment_of(distance) % self.targets.len()]
    }

    /// Every target lowered by `margin`, never below `v_min`.
    pub fn backed_off(&self, margin: f64) -> Self {
        let mut m = self.clone();
        for t in &mut m.targets {
            *t = (*t - margin).max(m.params.v_min);
        }
        m
    }

    /// `segment_index,target_speed_mps` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment_index,target_speed_mps\n");
        for (i, t) in self.targets.iter().enumerate() {
            out.push_str(&format!("{i},{t}\n"));
        }
        out
    }

    pub fn from_csv(params: SpeedParams, lap_length: Option<f64>, text: &str) -> Result<Self, AdaptError> {
        let mut lines = text.lines();
        if lines.next() != Some("segment_index,target_speed_mps") {
            return Err(AdaptError::Format("missing header".into()));
        }
        let mut targets = Vec::new();
        for (row, line) in lines.enumerate() {
            let (i, t) = line
                .split_once(',')
                .ok_or_else(|| AdaptError::Format(format!("row {row}: expected two fields")))?;
            let i: usize = i.parse().map_err(|e| AdaptError::Format(format!("row {row}: {e}")))?;
            let t: f64 = t.parse().map_err(|e| AdaptError::Format(format!("row {row}: {e}")))?;
            if i != row || !(params.v_min..=params.v_max).contains(&t) {
                return Err(AdaptError::Format(format!("row {row}: bad entry {line}")));
            }
            targets.push(t);
        }
        Ok(Self {
            params,
            targets,
            lap_length,
        })
    }
}

/// `sum(speed * dt)` over the prefix.
pub fn estimate_distance(prefix: &[(f64, f64)]) -> f64 {
    prefix.iter().map(|(v, dt)| v * dt).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Survived,
    OffRoad,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub speed: f64,
    pub dt: f64,
    pub safety: SafetyLabel,
}

/// One run as the agent itself saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub steps: Vec<TraceStep>,
    pub outcome: Outcome,
    /// Internal distance at which the car left the road.
    pub failure_distance: Option<f64>,
}

impl RunTrace {
    pub fn distance(&self) -> f64 {
        self.steps.iter().map(|s| s.speed * s.dt).sum()
    }
}

/// Raises every segment passed before the failure (all reached segments when
/// the run survived) and lowers the failing one.
pub fn update_model(model: &SegmentSpeedModel, trace: &RunTrace) -> SegmentSpeedModel {
    let mut m = model.clone();
    let p = m.params.clone();
    let mut reached = trace.failure_distance.unwrap_or_else(|| trace.distance());
    // a multi-lap run revisits the same segments
    if let Some(l) = m.lap_length.filter(|l| *l > 0.0) {
        reached = reached.min(l);
    }
    m.cover(reached);
    let len = p.segment_length;
    match (trace.outcome, trace.failure_distance) {
        (Outcome::OffRoad, Some(f)) => {
            let failing = ((f / len).floor() as usize).min(m.targets.len() - 1);
            let first_lowered = (failing + 1).saturating_sub(p.failure_window);
            for (i, t) in m.targets.iter_mut().enumerate() {
                if i < first_lowered {
                    *t = (*t + p.delta_up).min(p.v_max);
                } else if i <= failing {
                    *t = (*t - p.delta_down).max(p.v_min);
                }
            }
        }
        _ => {
            let last = ((reached / len).ceil() as usize).min(m.targets.len());
            for t in &mut m.targets[..last] {
                *t = (*t + p.delta_up).min(p.v_max);
            }
        }
    }
    m
}

/// Everything the agent needs to drive.
#[derive(Debug, Clone, Copy)]
pub struct Agent<'a> {
    pub perception: Perception<'a>,
    pub value_buffer: &'a ValueBuffer,
    /// `None` disables the correction policy.
    pub correction_buffer: Option<&'a CorrectionBuffer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveStep {
    pub speed: f64,
    pub steering: f64,
    pub acceleration: f64,
    pub reward: f64,
    pub safety: SafetyLabel,
    pub off_road: bool,
    pub internal_distance: f64,
    pub lap_distance: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub steps: Vec<DriveStep>,
    pub laps_completed: u32,
    pub off_road: bool,
    /// Internal distance measured over each completed lap.
    pub lap_estimates: Vec<f64>,
}

impl EpisodeLog {
    pub fn survived(&self, laps: u32) -> bool {
        !self.off_road && self.laps_completed >= laps
    }
}

/// Drives one episode from the start line until `laps` laps are done, the
/// car leaves the road, or `max_steps` elapse. The internal distance is
/// integrated from speed and restarts at every lap line.
pub fn drive_episode(
    env: &mut Env,
    agent: &Agent<'_>,
    model: &SegmentSpeedModel,
    laps: u32,
    max_steps: usize,
    episode_seed: u64,
) -> Result<EpisodeLog, AdaptError> {
    let mut obs = env.reset(episode_seed);
    let dt = env.config().dt;
    let gain = env.config().speed_gain;
    let mut distance = 0.0;
    let mut log = EpisodeLog {
        steps: Vec::new(),
        laps_completed: 0,
        off_road: false,
        lap_estimates: Vec::new(),
    };
    while log.steps.len() < max_steps {
        let speed = env.state().speed;
        let s = agent.perception.state(&obs, speed)?;
        let d = agent_act(s, distance, agent.value_buffer, agent.correction_buffer, model, gain);
        let r = env.step(d.action)?;
        distance += r.next_state.speed * dt;
        if r.laps_completed > log.laps_completed {
            log.laps_completed = r.laps_completed;
            log.lap_estimates.push(distance);
            distance = 0.0;
        }
        log.steps.push(DriveStep {
            speed: r.next_state.speed,
            steering: d.action.steering,
            acceleration: d.action.acceleration,
            reward: r.reward,
            safety: d.label,
            off_road: r.off_road,
            internal_distance: distance,
            lap_distance: r.next_state.lap_distance,
            x: r.next_state.position.x,
            y: r.next_state.position.y,
            heading: r.next_state.heading,
        });
        if r.off_road {
            log.off_road = true;
            break;
        }
        if log.laps_completed >= laps || r.done {
            break;
        }
        obs = r.observation;
    }
    Ok(log)
}

/// One line of adaptation telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTelemetry {
    pub run: usize,
    pub outcome: Outcome,
    pub failure_distance: Option<f64>,
    pub mean_speed: f64,
    pub steps: usize,
    /// The model this run drove with.
    pub model: SegmentSpeedModel,
}

/// The model of the fastest run that finished without leaving the road: the
/// highest speed profile the agent has actually been seen to survive.
pub fn fastest_survived(runs: &[RunTelemetry]) -> Option<&SegmentSpeedModel> {
    runs.iter()
        .filter(|r| r.outcome == Outcome::Survived)
        .max_by(|a, b| a.mean_speed.total_cmp(&b.mean_speed))
        .map(|r| &r.model)
}

/// The profile to race with after adaptation: the fastest survived one lowered
/// by `margin`, or the final model when no run survived.
pub fn deployed_model(runs: &[RunTelemetry], last: &SegmentSpeedModel, margin: f64) -> SegmentSpeedModel {
    fastest_survived(runs).unwrap_or(last).backed_off(margin)
}

pub fn telemetry_csv(runs: &[RunTelemetry]) -> String {
    let mut out = String::from("run,outcome,failure_distance_m,mean_speed_mps,steps\n");
    for r in runs {
        let outcome = match r.outcome {
            Outcome::Survived => "survived",
            Outcome::OffRoad => "off_road",
        };
        let fd = r.failure_distance.map(|f| format!("{f:.3}")).unwrap_or_default();
        out.push_str(&format!("{},{outcome},{fd},{:.4},{}\n", r.run, r.mean_speed, r.steps));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub n_runs: usize,
    pub wall_budget: Duration,
    /// Laps per adaptation run.
    pub laps: u32,
    /// Step cap per lap.
    pub max_steps: usize,
    /// Safety margin (m/s) taken off the deployed profile.
    pub deploy_margin: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n_runs: 15,
            wall_budget: Duration::from_secs(300),
            laps: 3,
            max_steps: 2000,
            deploy_margin: 1.0,
            seed: 0,
        }
    }
}

/// Repeats run, trace, update until `n_runs` runs or the wall budget is spent.
pub fn run_adaptation(
    env: &mut Env,
    agent: &Agent<'_>,
    model: SegmentSpeedModel,
    cfg: &AdaptConfig,
) -> Result<(SegmentSpeedModel, Vec<RunTelemetry>), AdaptError> {
    if cfg.n_runs == 0 {
        return Ok((model, Vec::new()));
    }
    let started = Instant::now();
    let dt = env.config().dt;
    let mut model = model;
    let mut telemetry = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        if started.elapsed() >= cfg.wall_budget {
            break;
        }
        let log = drive_episode(env, agent, &model, cfg.laps, cfg.max_steps * cfg.laps as usize, rng::child_seed(cfg.seed, run as u64))?;
        if model.lap_length.is_none() {
            model.lap_length = log.lap_estimates.first().copied();
        }
        let steps: Vec<TraceStep> = log
            .steps
            .iter()
            .map(|s| TraceStep {
                speed: s.speed,
                dt,
                safety: s.safety,
            })
            .collect();
        let outcome = if log.off_road { Outcome::OffRoad } else { Outcome::Survived };
        // internal distance restarts at the lap line, so this is the distance into the failing lap
        let failure_distance = log.off_road.then(|| log.steps.last().map_or(0.0, |s| s.internal_distance));
        let trace = RunTrace {
            steps,
            outcome,
            failure_distance,
        };
        let used = model.clone();
        model = update_model(&model, &trace);
        let mean_speed = log.steps.iter().map(|s| s.speed).sum::<f64>() / log.steps.len().max(1) as f64;
        telemetry.push(RunTelemetry {
            run,
            outcome,
            failure_distance,
            mean_speed,
            steps: log.steps.len(),
            model: used,
        });
    }
    if telemetry.is_empty() {
        return Err(AdaptError::NoRuns);
    }
    Ok((model, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(distance: f64, outcome: Outcome) -> RunTrace {
        let n = (distance / 1.0).round() as usize;
        RunTrace {
            steps: vec![
                TraceStep {
                    speed: 10.0,
                    dt: 0.1,
                    safety: SafetyLabel::Safe
                };
                n
            ],
            outcome,
            failure_distance: (outcome == Outcome::OffRoad).then_some(distance),
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(estimate_distance(&[]), 0.0);
        assert!((estimate_distance(&[(10.0, 0.1); 10]) - 10.0).abs() < 1e-12);
        assert!((estimate_distance(&[(0.0, 0.1), (5.0, 0.1), (10.0, 0.1)]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn survived_run_raises_every_segment() {
        let m = SegmentSpeedModel::uniform(SpeedParams::default(), 125.0);
        let up = update_model(&m, &trace(125.0, Outcome::Survived));
        assert_eq!(up.targets, vec![9.0; 5]);
    }

    #[test]
    fn failure_lowers_only_its_segment() {
        let m = SegmentSpeedModel::uniform(SpeedParams::default(), 150.0);
        let up = update_model(&m, &trace(80.0, Outcome::OffRoad));
        assert_eq!(up.targets, vec![9.0, 9.0, 9.0, 6.0, 8.0, 8.0]);
    }

    #[test]
    fn targets_stay_clamped() {
        let mut m = SegmentSpeedModel::uniform(SpeedParams::default(), 50.0);
        m.targets = vec![30.0, 4.0];
        let up = update_model(&m, &trace(50.0, Outcome::Survived));
        assert_eq!(up.targets, vec![30.0, 5.0]);
        let down = update_model(&m, &trace(30.0, Outcome::OffRoad));
        assert_eq!(down.targets, vec![30.0, 4.0]);
    }

    #[test]
    fn empty_model_grows_with_coverage() {
        let m = SegmentSpeedModel::new(SpeedParams::default());
        assert_eq!(m.target_speed_at(1e6), 8.0);
        let up = update_model(&m, &trace(60.0, Outcome::Survived));
        assert_eq!(up.targets, vec![9.0; 3]);
    }

    #[test]
    fn multi_lap_run_stays_within_one_lap() {
        let m = SegmentSpeedModel::uniform(SpeedParams::default(), 100.0);
        let up = update_model(&m, &trace(300.0, Outcome::Survived));
        assert_eq!(up.targets, vec![9.0; 4]);
    }

    #[test]
    fn lookup_wraps_by_lap() {
        let mut m = SegmentSpeedModel::uniform(SpeedParams::default(), 110.0);
        m.targets = vec![5.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(m.target_speed_at(0.0), 5.0);
        assert_eq!(m.target_speed_at(37.5), 6.0);
        assert_eq!(m.target_speed_at(120.0), m.target_speed_at(10.0));
    }

    #[test]
    fn csv_round_trip() {
        let mut m = SegmentSpeedModel::uniform(SpeedParams::default(), 60.0);
        m.targets = vec![4.0, 12.5, 30.0];
        let back = SegmentSpeedModel::from_csv(SpeedParams::default(), Some(60.0), &m.to_csv()).unwrap();
        assert_eq!(back, m);
    }
}
