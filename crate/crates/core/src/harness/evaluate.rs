//! Evaluation episodes and their metrics.

use std::time::Instant;

use super::pipeline::{ensure_adapted, ensure_track, load_trained, log_timing};
use super::store::ArtifactStore;
use super::{HarnessError, PipelineConfig};
use crate::adapt::{drive_episode, EpisodeLog, SegmentSpeedModel};
use crate::rng;
use crate::sim::{Env, EnvMode, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub track_seed: u64,
    pub episodes: usize,
    pub laps: u32,
    /// Use the adapted speed model; otherwise every segment runs at `v_init`.
    pub adapted: bool,
    /// Enable the correction policy.
    pub corrections: bool,
}

impl EvalOptions {
    /// Stage directory name of this evaluation.
    pub fn label(&self) -> String {
        format!(
            "eval_track{}_{}_{}_{}x{}",
            self.track_seed,
            if self.adapted { "adapted" } else { "initial" },
            if self.corrections { "corrections" } else { "nocorrections" },
            self.episodes,
            self.laps
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Fraction of episodes that completed the lap quota on the road.
    pub success_rate: f64,
    /// km/h, averaged over on-road steps of all episodes.
    pub avg_speed: f64,
    pub off_road_events: usize,
    pub laps_completed: u32,
    pub episodes: usize,
    pub wall_time: f64,
}

impl Metrics {
    pub fn from_logs(logs: &[EpisodeLog], laps: u32, wall_time: f64) -> Self {
        let successes = logs.iter().filter(|l| l.survived(laps)).count();
        let (sum, n) = logs
            .iter()
            .flat_map(|l| l.steps.iter())
            .filter(|s| !s.off_road)
            .fold((0.0, 0usize), |(sum, n), s| (sum + s.speed, n + 1));
        Self {
            success_rate: if logs.is_empty() { 0.0 } else { successes as f64 / logs.len() as f64 },
            avg_speed: if n == 0 { 0.0 } else { 3.6 * sum / n as f64 },
            off_road_events: logs.iter().filter(|l| l.off_road).count(),
            laps_completed: logs.iter().map(|l| l.laps_completed).sum(),
            episodes: logs.len(),
            wall_time,
        }
    }

    /// Header plus one row; wall time is left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        format!(
            "success_rate,avg_speed_kmh,off_road_events,laps_completed,episodes\n{},{:.4},{},{},{}\n",
            self.success_rate, self.avg_speed, self.off_road_events, self.laps_completed, self.episodes
        )
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub label: String,
    pub metrics: Metrics,
    pub logs: Vec<EpisodeLog>,
}

/// `step,x,y,heading,speed,steering,accel,reward,off_road`.
pub fn trajectory_csv(log: &EpisodeLog) -> String {
    let mut out = String::from("step,x,y,heading,speed,steering,accel,reward,off_road\n");
    for (i, s) in log.steps.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{}\n",
            s.x, s.y, s.heading, s.speed, s.steering, s.acceleration, s.reward, s.off_road as u8
        ));
    }
    out
}

/// Runs `episodes` evaluation episodes with the stored agent. Never reads
/// ground-truth masks: the environment runs in evaluation mode.
pub fn evaluate(cfg: &PipelineConfig, opts: &EvalOptions) -> Result<EvalOutcome, HarnessError> {
    if opts.episodes == 0 || opts.laps == 0 {
        return Err(HarnessError::Config("episodes and laps must be positive".into()));
    }
    let store = ArtifactStore::new(&cfg.artifact_dir);
    if store.stages().is_empty() {
        return Err(HarnessError::NoArtifacts(cfg.artifact_dir.clone()));
    }
    let trained = load_trained(&store, cfg)?;
    let track = ensure_track(&store, cfg, opts.track_seed)?;
    let model = if opts.adapted {
        ensure_adapted(&store, cfg, &trained, opts.track_seed)?
    } else {
        SegmentSpeedModel::new(cfg.speed.clone())
    };
    let agent = trained.agent(opts.corrections);
    // the step cap applies per lap
    let cap = cfg.sim.episode_cap * opts.laps as u64;
    let sim = SimConfig {
        episode_cap: cap,
        ..cfg.sim.clone()
    };
    let mut env = Env::new(track, sim, EnvMode::Evaluation);
    let base_seed = rng::child_seed(cfg.stage_seed(9), opts.track_seed);
    let label = opts.label();
    let started = Instant::now();
    let mut logs = Vec::with_capacity(opts.episodes);
    for e in 0..opts.episodes {
        let log = drive_episode(&mut env, &agent, &model, opts.laps, cap as usize, rng::child_seed(base_seed, e as u64))
            .map_err(|err| HarnessError::Stage {
                stage: label.clone(),
                message: err.to_string(),
                telemetry: store.write_failure(&label, &err.to_string()),
            })?;
        logs.push(log);
    }
    let wall = started.elapsed().as_secs_f64();
    let metrics = Metrics::from_logs(&logs, opts.laps, wall);

    let mut episodes = String::from("episode,success,laps_completed,off_road,steps,avg_speed_kmh\n");
    let mut files = Vec::new();
    for (e, log) in logs.iter().enumerate() {
        let m = Metrics::from_logs(std::slice::from_ref(log), opts.laps, 0.0);
        episodes.push_str(&format!(
            "{e},{},{},{},{},{:.4}\n",
            log.survived(opts.laps) as u8,
            log.laps_completed,
            log.off_road as u8,
            log.steps.len(),
            m.avg_speed
        ));
        files.push((format!("trajectories/episode_{e:03}.csv"), trajectory_csv(log).into_bytes()));
    }
    let summary = format!(
        "track seed {}\nspeed model {}\ncorrection policy {}\nepisodes {} x {} laps\nsuccess rate {:.3}\naverage speed {:.2} km/h\noff-road events {}\nlaps completed {}\n",
        opts.track_seed,
        if opts.adapted { "adapted" } else { "initial" },
        if opts.corrections { "on" } else { "off" },
        opts.episodes,
        opts.laps,
        metrics.success_rate,
        metrics.avg_speed,
        metrics.off_road_events,
        metrics.laps_completed
    );
    files.insert(0, ("metrics.csv".into(), metrics.to_csv().into_bytes()));
    files.insert(1, ("episodes.csv".into(), episodes.into_bytes()));
    files.insert(2, ("summary.txt".into(), summary.into_bytes()));
    files.push(("speed_model.csv".into(), model.to_csv().into_bytes()));
    store.commit(&label, "evaluation", &files)?;
    log_timing(&store, &label, wall);
    Ok(EvalOutcome { label, metrics, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::DriveStep;
    use crate::policy::SafetyLabel;

    fn step(speed: f64, off_road: bool) -> DriveStep {
        DriveStep {
            speed,
            steering: 0.0,
            acceleration: 0.0,
            reward: 0.0,
            safety: SafetyLabel::Safe,
            off_road,
            internal_distance: 0.0,
            lap_distance: 0.0,
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    #[test]
    fn constant_ten_mps_is_36_kmh() {
        let log = EpisodeLog {
            steps: vec![step(10.0, false); 20],
            laps_completed: 1,
            off_road: false,
            lap_estimates: vec![],
        };
        let m = Metrics::from_logs(&[log], 1, 0.0);
        assert!((m.avg_speed - 36.0).abs() < 1e-9);
        assert_eq!(m.success_rate, 1.0);
    }

    #[test]
    fn off_road_steps_are_excluded_from_speed() {
        let mut steps = vec![step(10.0, false); 3];
        steps.push(step(30.0, true));
        let log = EpisodeLog {
            steps,
            laps_completed: 0,
            off_road: true,
            lap_estimates: vec![],
        };
        let m = Metrics::from_logs(&[log], 1, 0.0);
        assert!((m.avg_speed - 36.0).abs() < 1e-9);
        assert_eq!(m.success_rate, 0.0);
        assert_eq!(m.off_road_events, 1);
    }
}
