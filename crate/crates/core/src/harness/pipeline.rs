//! Stage graph: track → vision data → segmenter, track → VAE data → VAE,
//! then rollouts → value buffer → corrections → speed adaptation.
//!
//! Each stage is cached under a key built from its config subtree and the
//! manifests of the stages it reads, so a rerun with the same config does no
//! work and a corrupted file only re-runs its own stage.

use std::sync::Arc;
use std::time::Instant;

use super::evaluate::{evaluate, EvalOptions, Metrics};
use super::report::write_report;
use super::store::{stage_key, ArtifactStore, Manifest};
use super::{HarnessError, PipelineConfig, TIMINGS_FILE};
use crate::adapt::{deployed_model, run_adaptation, telemetry_csv, Agent, SegmentSpeedModel};
use crate::image::BinaryMask;
use crate::latent::{collect_vae_dataset, train_vae, VaeModel};
use crate::policy::{
    build_value_buffer, collect_base_rollouts, explore_corrections, CorrectionBuffer, Perception, StateVec, Step, Trajectory,
    ValueBuffer,
};
use crate::sim::{generate_track, Env, EnvMode, SimConfig, TrackSpec};
use crate::vision::{dataset_files, parse_dataset, render_training_pairs, train_segmenter, SegmenterModel};

/// Logical stage names in execution order.
pub const STAGES: [&str; 9] = [
    "track",
    "vision_data",
    "segmenter",
    "vae_data",
    "vae",
    "rollouts",
    "value_buffer",
    "corrections",
    "adapt",
];

const SIM_KEYS: [&str; 5] = ["sim.", "vehicle.", "reward.", "camera.", "track."];

type Files = Vec<(String, Vec<u8>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Run { force: bool },
    LoadOnly,
}

struct Runner<'a> {
    store: &'a ArtifactStore,
    mode: Mode,
    log: Vec<(String, StageStatus)>,
}

impl Runner<'_> {
    fn stage<F>(&mut self, name: &str, key: &str, produce: F) -> Result<Manifest, HarnessError>
    where
        F: FnOnce() -> Result<Files, String>,
    {
        let force = match self.mode {
            Mode::Run { force } => force,
            Mode::LoadOnly => {
                return self.store.cached(name, key).ok_or_else(|| HarnessError::MissingArtifact {
                    stage: name.to_string(),
                    detail: "missing, corrupt or built from a different config; run the pipeline first".into(),
                });
            }
        };
        if !force {
            if let Some(m) = self.store.cached(name, key) {
                self.log.push((name.to_string(), StageStatus::Cached));
                return Ok(m);
            }
        }
        let started = Instant::now();
        let files = produce().map_err(|message| HarnessError::Stage {
            stage: name.to_string(),
            telemetry: self.store.write_failure(name, &message),
            message,
        })?;
        let manifest = self.store.commit(name, key, &files)?;
        log_timing(self.store, name, started.elapsed().as_secs_f64());
        self.log.push((name.to_string(), StageStatus::Ran));
        Ok(manifest)
    }
}

pub(crate) fn log_timing(store: &ArtifactStore, what: &str, seconds: f64) {
    use std::io::Write;
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(store.root().join(TIMINGS_FILE)) {
        let _ = writeln!(f, "{what} {seconds:.3}s");
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn track_stage(seed: u64) -> String {
    format!("track_{seed}")
}

pub fn adapt_stage(seed: u64) -> String {
    format!("adapt_{seed}")
}

/// Generates (or loads) the track for `seed`. The stored CSV is the source of
/// truth, so every consumer sees exactly the persisted geometry.
fn track(runner: &mut Runner<'_>, cfg: &PipelineConfig, seed: u64) -> Result<(Arc<TrackSpec>, Manifest), HarnessError> {
    let name = track_stage(seed);
    let key = stage_key(&name, &cfg.subtree(&["track."]), &[]);
    let params = cfg.track.clone();
    let m = runner.stage(&name, &key, || {
        let t = generate_track(seed, &params).map_err(err)?;
        Ok(vec![("track.csv".into(), t.to_csv().into_bytes())])
    })?;
    let csv = runner.store.read_text(&name, &m, "track.csv")?;
    let t = TrackSpec::from_csv(seed, &csv).map_err(|e| HarnessError::MissingArtifact {
        stage: name.clone(),
        detail: e.to_string(),
    })?;
    Ok((Arc::new(t), m))
}

fn missing<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> HarnessError + '_ {
    move |e| HarnessError::MissingArtifact {
        stage: stage.to_string(),
        detail: e.to_string(),
    }
}

/// Everything the agent needs, loaded from verified artifacts.
pub struct Trained {
    pub track: Arc<TrackSpec>,
    pub segmenter: SegmenterModel,
    pub vae: VaeModel,
    pub value_buffer: ValueBuffer,
    pub correction_buffer: CorrectionBuffer,
    manifests: Vec<Manifest>,
}

impl Trained {
    pub fn agent(&self, corrections: bool) -> Agent<'_> {
        Agent {
            perception: Perception {
                segmenter: &self.segmenter,
                vae: &self.vae,
            },
            value_buffer: &self.value_buffer,
            correction_buffer: corrections.then_some(&self.correction_buffer),
        }
    }
}

fn train_all(runner: &mut Runner<'_>, cfg: &PipelineConfig) -> Result<Trained, HarnessError> {
    let store = runner.store;
    let (track, track_m) = track(runner, cfg, cfg.track_seed)?;

    let key = stage_key("vision_data", &cfg.subtree(&["camera.", "augment.", "vision."]), &[&track_m]);
    let vision_m = runner.stage("vision_data", &key, || {
        let pairs = render_training_pairs(&track, &cfg.sim, cfg.vision_pairs, cfg.stage_seed(1), &cfg.augment_config(), &cfg.poses)
            .map_err(err)?;
        Ok(dataset_files(&pairs))
    })?;

    let key = stage_key("segmenter", &cfg.subtree(&["segmenter."]), &[&vision_m]);
    let seg_m = runner.stage("segmenter", &key, || {
        let count = vision_m.files.len() / 2;
        let pairs = parse_dataset(count, |name| {
            store
                .read("vision_data", &vision_m, name)
                .map_err(|e| crate::vision::VisionError::Format(e.to_string()))
        })
        .map_err(err)?;
        let model = train_segmenter(&pairs, &cfg.segmenter_config()).map_err(err)?;
        Ok(vec![
            ("segmenter.seg".into(), model.to_bytes()),
            ("segmenter_loss.csv".into(), loss_csv(&model.meta.loss_curve)),
            (
                "segmenter_meta.csv".into(),
                format!(
                    "key,value\nepochs,{}\nfinal_loss,{}\nheldout_accuracy,{}\nroad_fraction,{}\n",
                    model.meta.epochs, model.meta.final_loss, model.meta.heldout_accuracy, model.meta.road_fraction
                )
                .into_bytes(),
            ),
        ])
    })?;
    let segmenter = SegmenterModel::from_bytes(&store.read("segmenter", &seg_m, "segmenter.seg")?).map_err(missing("segmenter"))?;

    let key = stage_key("vae_data", &(cfg.subtree(&SIM_KEYS) + &cfg.subtree(&["vae_data."])), &[&track_m]);
    let vae_data_m = runner.stage("vae_data", &key, || {
        let mut env = Env::new(track.clone(), cfg.sim.clone(), EnvMode::Training);
        let masks = collect_vae_dataset(
            &mut env,
            cfg.vae_data.episodes,
            cfg.vae_data.speed,
            cfg.vae_data.reverse_fraction,
            cfg.stage_seed(3),
        )
        .map_err(err)?;
        Ok(vec![("masks.pgm".into(), BinaryMask::stack_to_pgm(&masks).map_err(err)?)])
    })?;

    let key = stage_key("vae", &cfg.subtree(&["vae."]), &[&vae_data_m]);
    let vae_m = runner.stage("vae", &key, || {
        let bytes = store.read("vae_data", &vae_data_m, "masks.pgm").map_err(err)?;
        let masks = BinaryMask::unstack_pgm(&bytes, crate::vision::LATENT_SIZE).map_err(err)?;
        let model = train_vae(&masks, &cfg.vae_config()).map_err(err)?;
        Ok(vec![
            ("vae.vae2".into(), model.to_bytes()),
            ("vae_loss.csv".into(), loss_csv(&model.meta.loss_curve)),
            (
                "vae_meta.csv".into(),
                format!(
                    "key,value\nepochs,{}\nfinal_loss,{}\nheldout_iou,{}\nmasks,{}\n",
                    model.meta.epochs,
                    model.meta.final_loss,
                    model.meta.heldout_iou,
                    masks.len()
                )
                .into_bytes(),
            ),
        ])
    })?;
    let vae = VaeModel::from_bytes(&store.read("vae", &vae_m, "vae.vae2")?).map_err(missing("vae"))?;
    let perception = Perception {
        segmenter: &segmenter,
        vae: &vae,
    };

    let policy_keys = cfg.subtree(&SIM_KEYS) + &cfg.subtree(&["policy."]);
    let key = stage_key("rollouts", &policy_keys, &[&track_m, &seg_m, &vae_m]);
    let rollouts_m = runner.stage("rollouts", &key, || {
        let mut env = Env::new(track.clone(), cfg.sim.clone(), EnvMode::Evaluation);
        let trajs = collect_base_rollouts(&mut env, perception, cfg.policy.base_episodes, cfg.policy.starts, cfg.stage_seed(5))
            .map_err(err)?;
        Ok(vec![
            ("rollouts.csv".into(), rollouts_csv(&trajs).into_bytes()),
            ("latents.csv".into(), latents_csv(&trajs).into_bytes()),
        ])
    })?;

    let key = stage_key("value_buffer", &cfg.subtree(&["policy.gamma", "policy.k"]), &[&rollouts_m]);
    let value_m = runner.stage("value_buffer", &key, || {
        let trajs = parse_rollouts(&store.read_text("rollouts", &rollouts_m, "rollouts.csv").map_err(err)?)?;
        let vb = build_value_buffer(&trajs, cfg.policy.gamma, cfg.policy.k).map_err(err)?;
        Ok(vec![("value.vbuf".into(), vb.to_bytes())])
    })?;
    let value_buffer = ValueBuffer::from_bytes(&store.read("value_buffer", &value_m, "value.vbuf")?, cfg.policy.k)
        .map_err(missing("value_buffer"))?;

    let key = stage_key("corrections", &policy_keys, &[&track_m, &seg_m, &vae_m, &value_m]);
    let corr_m = runner.stage("corrections", &key, || {
        let mut env = Env::new(track.clone(), cfg.sim.clone(), EnvMode::Evaluation);
        let (cb, stats) = explore_corrections(
            &mut env,
            perception,
            &value_buffer,
            cfg.policy.correction_episodes,
            cfg.policy.starts,
            cfg.stage_seed(6),
        )
        .map_err(err)?;
        let stats = format!(
            "key,value\nepisodes,{}\nsteps,{}\nsegments_kept,{}\nsegments_discarded,{}\nentries,{}\n",
            stats.episodes, stats.steps, stats.segments_kept, stats.segments_discarded, stats.entries
        );
        Ok(vec![("correction.cbuf".into(), cb.to_bytes()), ("explore.csv".into(), stats.into_bytes())])
    })?;
    let correction_buffer = CorrectionBuffer::from_bytes(&store.read("corrections", &corr_m, "correction.cbuf")?, cfg.policy.k)
        .map_err(missing("corrections"))?;

    Ok(Trained {
        track,
        segmenter,
        vae,
        value_buffer,
        correction_buffer,
        manifests: vec![seg_m, vae_m, value_m, corr_m],
    })
}

/// Adapts the speed model on `track` (stage-2 protocol on unseen tracks).
fn adapt(
    runner: &mut Runner<'_>,
    cfg: &PipelineConfig,
    trained: &Trained,
    track: Arc<TrackSpec>,
    track_m: &Manifest,
) -> Result<SegmentSpeedModel, HarnessError> {
    let name = adapt_stage(track.seed);
    let mut upstream: Vec<&Manifest> = vec![track_m];
    upstream.extend(trained.manifests.iter());
    let key = stage_key(&name, &(cfg.subtree(&SIM_KEYS) + &cfg.subtree(&["speed.", "adapt."])), &upstream);
    let m = runner.stage(&name, &key, || {
        let sim = SimConfig {
            episode_cap: cfg.sim.episode_cap * cfg.adapt.laps as u64,
            ..cfg.sim.clone()
        };
        let mut env = Env::new(track.clone(), sim, EnvMode::Evaluation);
        let initial = SegmentSpeedModel::new(cfg.speed.clone());
        let (last, telemetry) = run_adaptation(&mut env, &trained.agent(true), initial, &cfg.adapt_config(track.seed)).map_err(err)?;
        // deploy the fastest profile that was actually driven without a failure, minus a margin
        let model = deployed_model(&telemetry, &last, cfg.adapt.deploy_margin);
        let lap = model.lap_length.map(|l| l.to_string()).unwrap_or_default();
        Ok(vec![
            ("speed_model.csv".into(), model.to_csv().into_bytes()),
            ("speed_model_last.csv".into(), last.to_csv().into_bytes()),
            ("lap_length.csv".into(), format!("lap_length_m\n{lap}\n").into_bytes()),
            ("telemetry.csv".into(), telemetry_csv(&telemetry).into_bytes()),
        ])
    })?;
    let lap_text = runner.store.read_text(&name, &m, "lap_length.csv")?;
    let lap_length = lap_text.lines().nth(1).filter(|l| !l.is_empty()).and_then(|l| l.parse().ok());
    let csv = runner.store.read_text(&name, &m, "speed_model.csv")?;
    SegmentSpeedModel::from_csv(cfg.speed.clone(), lap_length, &csv).map_err(missing(&name))
}

/// Loads the trained agent, failing if any stage is missing or stale.
pub fn load_trained(store: &ArtifactStore, cfg: &PipelineConfig) -> Result<Trained, HarnessError> {
    let mut runner = Runner {
        store,
        mode: Mode::LoadOnly,
        log: Vec::new(),
    };
    train_all(&mut runner, cfg)
}

/// Loads or generates the track for `seed`.
pub fn ensure_track(store: &ArtifactStore, cfg: &PipelineConfig, seed: u64) -> Result<Arc<TrackSpec>, HarnessError> {
    let mut runner = Runner {
        store,
        mode: Mode::Run { force: false },
        log: Vec::new(),
    };
    track(&mut runner, cfg, seed).map(|(t, _)| t)
}

/// Loads the adapted speed model for `seed`, adapting first if needed.
pub fn ensure_adapted(
    store: &ArtifactStore,
    cfg: &PipelineConfig,
    trained: &Trained,
    seed: u64,
) -> Result<SegmentSpeedModel, HarnessError> {
    let mut runner = Runner {
        store,
        mode: Mode::Run { force: false },
        log: Vec::new(),
    };
    let (track, track_m) = track(&mut runner, cfg, seed)?;
    adapt(&mut runner, cfg, trained, track, &track_m)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub stages: Vec<(String, StageStatus)>,
    pub metrics: Metrics,
}

impl PipelineRun {
    pub fn stages_run(&self) -> usize {
        self.stages.iter().filter(|(_, s)| *s == StageStatus::Ran).count()
    }
}

/// Runs every stage, evaluates on the training track and writes the report.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<PipelineRun, HarnessError> {
    cfg.validate()?;
    let store = ArtifactStore::new(&cfg.artifact_dir);
    std::fs::create_dir_all(store.root()).map_err(|e| HarnessError::Stage {
        stage: "setup".into(),
        message: format!("cannot create {}: {e}", store.root().display()),
        telemetry: None,
    })?;
    let mut runner = Runner {
        store: &store,
        mode: Mode::Run { force },
        log: Vec::new(),
    };
    let trained = train_all(&mut runner, cfg)?;
    let (track, track_m) = track(&mut runner, cfg, cfg.track_seed)?;
    adapt(&mut runner, cfg, &trained, track, &track_m)?;
    let stages = runner.log;
    let outcome = evaluate(
        cfg,
        &EvalOptions {
            track_seed: cfg.track_seed,
            episodes: cfg.eval.episodes,
            laps: cfg.eval.laps,
            adapted: true,
            corrections: true,
        },
    )?;
    write_report(store.root())?;
    Ok(PipelineRun {
        stages,
        metrics: outcome.metrics,
    })
}

fn loss_csv(curve: &[f64]) -> Vec<u8> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out.into_bytes()
}

fn rollouts_csv(trajs: &[Trajectory]) -> String {
    let mut out = String::from("episode,step,z1,z2,speed,reward,off_road\n");
    for t in trajs {
        for (i, s) in t.steps.iter().enumerate() {
            out.push_str(&format!(
                "{},{i},{},{},{},{},{}\n",
                t.episode, s.state.z1, s.state.z2, s.state.speed, s.reward, s.off_road as u8
            ));
        }
    }
    out
}

fn latents_csv(trajs: &[Trajectory]) -> String {
    let mut out = String::from("episode,step,z1,z2,speed\n");
    for t in trajs {
        for (i, s) in t.steps.iter().enumerate() {
            out.push_str(&format!("{},{i},{},{},{}\n", t.episode, s.state.z1, s.state.z2, s.state.speed));
        }
    }
    out
}

fn parse_rollouts(text: &str) -> Result<Vec<Trajectory>, String> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || format!("rollouts.csv line {}: {line:?}", n + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let episode: usize = f[0].parse().map_err(|_| bad())?;
        let step = Step {
            state: StateVec {
                z1: num(2)?,
                z2: num(3)?,
                speed: num(4)?,
            },
            reward: num(5)?,
            off_road: f[6] == "1",
        };
        match out.last_mut() {
            Some(t) if t.episode == episode => t.steps.push(step),
            _ => out.push(Trajectory {
                episode,
                steps: vec![step],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollouts_csv_round_trip() {
        let trajs = vec![
            Trajectory {
                episode: 0,
                steps: vec![Step {
                    state: StateVec {
                        z1: 0.1 + 0.2,
                        z2: -1e-17,
                        speed: 3.0,
                    },
                    reward: 0.30000000000000004,
                    off_road: false,
                }],
            },
            Trajectory {
                episode: 1,
                steps: vec![Step {
                    state: StateVec {
                        z1: 1.0,
                        z2: 2.0,
                        speed: 9.5,
                    },
                    reward: -47.5,
                    off_road: true,
                }],
            },
        ];
        let back = parse_rollouts(&rollouts_csv(&trajs)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].steps, trajs[0].steps);
        assert_eq!(back[1].steps, trajs[1].steps);
    }
}
