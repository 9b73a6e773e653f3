//! Flat `section.key = value` configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key '=' value
//! key     := ident ('.' ident)*
//! ```
//!
//! Whitespace around keys and values is ignored. Every key may appear at most
//! once, unknown keys are rejected and missing keys keep their defaults.
//! [`PipelineConfig::to_text`] writes every key in a fixed order using the
//! shortest round-tripping decimal form, so parse and print are inverse.

use std::path::PathBuf;
use std::time::Duration;

use super::HarnessError;
use crate::adapt::{AdaptConfig, SpeedParams};
use crate::latent::VaeConfig;
use crate::policy::CollectionStarts;
use crate::sim::{SimConfig, TrackParams};
use crate::vision::{AugmentConfig, PoseSampling, SegmenterConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct VaeDataConfig {
    pub episodes: usize,
    pub speed: f64,
    pub reverse_fraction: f64,
}

impl Default for VaeDataConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            speed: 10.0,
            reverse_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub base_episodes: usize,
    pub correction_episodes: usize,
    pub starts: CollectionStarts,
    pub gamma: f64,
    pub k: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            base_episodes: 20,
            correction_episodes: 20,
            starts: CollectionStarts::new(10.0),
            gamma: 0.95,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub laps: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 5, laps: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its own seed from it.
    pub seed: u64,
    pub artifact_dir: PathBuf,
    pub track_seed: u64,
    pub track: TrackParams,
    pub sim: SimConfig,
    pub augment: AugmentConfig,
    pub vision_pairs: usize,
    pub poses: PoseSampling,
    pub segmenter: SegmenterConfig,
    pub vae_data: VaeDataConfig,
    pub vae: VaeConfig,
    pub policy: PolicyConfig,
    pub speed: SpeedParams,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            artifact_dir: PathBuf::from("artifacts"),
            track_seed: 7,
            track: TrackParams::default(),
            sim: SimConfig::default(),
            augment: AugmentConfig::default(),
            vision_pairs: 400,
            poses: PoseSampling::default(),
            segmenter: SegmenterConfig::default(),
            vae_data: VaeDataConfig::default(),
            vae: VaeConfig::default(),
            policy: PolicyConfig::default(),
            speed: SpeedParams::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

enum Slot<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    U32(&'a mut u32),
    Bool(&'a mut bool),
    Path(&'a mut PathBuf),
    Seconds(&'a mut Duration),
}

impl Slot<'_> {
    fn render(&self) -> String {
        match self {
            Slot::F64(v) => format!("{}", **v),
            Slot::Usize(v) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::U32(v) => v.to_string(),
            Slot::Bool(v) => v.to_string(),
            Slot::Path(v) => v.display().to_string(),
            Slot::Seconds(v) => format!("{}", v.as_secs_f64()),
        }
    }

    fn assign(self, text: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(text: &str) -> Result<T, String> {
            text.parse().map_err(|_| format!("cannot parse {text:?}"))
        }
        match self {
            Slot::F64(v) => {
                let x: f64 = parse(text)?;
                if !x.is_finite() {
                    return Err(format!("{text:?} is not finite"));
                }
                *v = x;
            }
            Slot::Usize(v) => *v = parse(text)?,
            Slot::U64(v) => *v = parse(text)?,
            Slot::U32(v) => *v = parse(text)?,
            Slot::Bool(v) => *v = parse(text)?,
            Slot::Path(v) => {
                if text.is_empty() {
                    return Err("empty path".into());
                }
                *v = PathBuf::from(text);
            }
            Slot::Seconds(v) => {
                let s: f64 = parse(text)?;
                *v = Duration::try_from_secs_f64(s).map_err(|e| format!("{text:?}: {e}"))?;
            }
        }
        Ok(())
    }
}

impl PipelineConfig {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        use Slot::*;
        let t = &mut self.track;
        let s = &mut self.sim;
        let a = &mut self.augment;
        let g = &mut self.segmenter;
        let v = &mut self.vae;
        let [h1, h2] = &mut v.hidden;
        let p = &mut self.policy;
        let sp = &mut self.speed;
        let ad = &mut self.adapt;
        vec![
            ("seed", U64(&mut self.seed)),
            ("artifact_dir", Path(&mut self.artifact_dir)),
            ("track.seed", U64(&mut self.track_seed)),
            ("track.control_points", Usize(&mut t.control_points)),
            ("track.radius_min", F64(&mut t.radius_min)),
            ("track.radius_max", F64(&mut t.radius_max)),
            ("track.half_width_min", F64(&mut t.half_width_min)),
            ("track.half_width_max", F64(&mut t.half_width_max)),
            ("track.spacing", F64(&mut t.spacing)),
            ("track.angle_jitter", F64(&mut t.angle_jitter)),
            ("track.min_turn_radius", F64(&mut t.min_turn_radius)),
            ("track.min_clearance", F64(&mut t.min_clearance)),
            ("track.max_attempts", Usize(&mut t.max_attempts)),
            ("sim.dt", F64(&mut s.dt)),
            ("sim.episode_cap", U64(&mut s.episode_cap)),
            ("sim.start_heading_jitter", F64(&mut s.start_heading_jitter)),
            ("sim.start_lateral_jitter", F64(&mut s.start_lateral_jitter)),
            ("sim.speed_gain", F64(&mut s.speed_gain)),
            ("vehicle.max_accel", F64(&mut s.vehicle.max_accel)),
            ("vehicle.max_steer", F64(&mut s.vehicle.max_steer)),
            ("vehicle.wheelbase", F64(&mut s.vehicle.wheelbase)),
            ("vehicle.max_speed", F64(&mut s.vehicle.max_speed)),
            ("reward.speed_coeff", F64(&mut s.reward.speed_coeff)),
            ("reward.offroad_cap", F64(&mut s.reward.offroad_cap)),
            ("reward.offroad_slope", F64(&mut s.reward.offroad_slope)),
            ("camera.height", Usize(&mut s.camera.height)),
            ("camera.width", Usize(&mut s.camera.width)),
            ("camera.mount_height", F64(&mut s.camera.mount_height)),
            ("camera.focal_frac", F64(&mut s.camera.focal_frac)),
            ("camera.horizon_frac", F64(&mut s.camera.horizon_frac)),
            ("camera.hood_frac", F64(&mut s.camera.hood_frac)),
            ("camera.noise_sigma", F64(&mut s.camera.noise_sigma)),
            ("augment.color_jitter", F64(&mut a.color_jitter)),
            ("augment.hue", F64(&mut a.hue)),
            ("augment.saturation", F64(&mut a.saturation)),
            ("augment.contrast", F64(&mut a.contrast)),
            ("augment.rgb_shift", F64(&mut a.rgb_shift)),
            ("augment.channel_shuffle", F64(&mut a.channel_shuffle)),
            ("augment.clahe", F64(&mut a.clahe)),
            ("augment.sepia", F64(&mut a.sepia)),
            ("augment.flip", F64(&mut a.flip)),
            ("augment.shift_scale_rotate", F64(&mut a.shift_scale_rotate)),
            ("vision.pairs", Usize(&mut self.vision_pairs)),
            ("vision.pose_lateral_frac", F64(&mut self.poses.lateral_frac)),
            ("vision.pose_heading", F64(&mut self.poses.heading)),
            ("segmenter.hidden", Usize(&mut g.hidden)),
            ("segmenter.learning_rate", F64(&mut g.learning_rate)),
            ("segmenter.momentum", F64(&mut g.momentum)),
            ("segmenter.batch_size", Usize(&mut g.batch_size)),
            ("segmenter.epochs", Usize(&mut g.epochs)),
            ("segmenter.heldout_fraction", F64(&mut g.heldout_fraction)),
            ("segmenter.min_accuracy", F64(&mut g.min_accuracy)),
            ("segmenter.min_pairs", Usize(&mut g.min_pairs)),
            ("segmenter.shuffle", Bool(&mut g.shuffle)),
            ("vae_data.episodes", Usize(&mut self.vae_data.episodes)),
            ("vae_data.speed", F64(&mut self.vae_data.speed)),
            ("vae_data.reverse_fraction", F64(&mut self.vae_data.reverse_fraction)),
            ("vae.hidden1", Usize(h1)),
            ("vae.hidden2", Usize(h2)),
            ("vae.kl_weight", F64(&mut v.kl_weight)),
            ("vae.learning_rate", F64(&mut v.learning_rate)),
            ("vae.momentum", F64(&mut v.momentum)),
            ("vae.epochs", Usize(&mut v.epochs)),
            ("vae.batch_size", Usize(&mut v.batch_size)),
            ("vae.heldout_fraction", F64(&mut v.heldout_fraction)),
            ("vae.min_iou", F64(&mut v.min_iou)),
            ("policy.base_episodes", Usize(&mut p.base_episodes)),
            ("policy.correction_episodes", Usize(&mut p.correction_episodes)),
            ("policy.base_speed", F64(&mut p.starts.base_speed)),
            ("policy.speed_spread", F64(&mut p.starts.speed_spread)),
            ("policy.reverse_fraction", F64(&mut p.starts.reverse_fraction)),
            ("policy.gamma", F64(&mut p.gamma)),
            ("policy.k", Usize(&mut p.k)),
            ("speed.segment_length", F64(&mut sp.segment_length)),
            ("speed.v_init", F64(&mut sp.v_init)),
            ("speed.v_min", F64(&mut sp.v_min)),
            ("speed.v_max", F64(&mut sp.v_max)),
            ("speed.delta_up", F64(&mut sp.delta_up)),
            ("speed.delta_down", F64(&mut sp.delta_down)),
            ("speed.failure_window", Usize(&mut sp.failure_window)),
            ("adapt.runs", Usize(&mut ad.n_runs)),
            ("adapt.wall_budget_s", Seconds(&mut ad.wall_budget)),
            ("adapt.laps", U32(&mut ad.laps)),
            ("adapt.max_steps", Usize(&mut ad.max_steps)),
            ("adapt.deploy_margin", F64(&mut ad.deploy_margin)),
            ("eval.episodes", Usize(&mut self.eval.episodes)),
            ("eval.laps", U32(&mut self.eval.laps)),
        ]
    }

    /// All keys in canonical order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().slots().into_iter().map(|(k, _)| k).collect()
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut copy = self.clone();
        copy.slots().into_iter().map(|(k, s)| (k, s.render())).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let slot = self
            .slots()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| s)
            .ok_or_else(|| HarnessError::Config(format!("unknown key {key:?}")))?;
        slot.assign(value).map_err(|e| HarnessError::Config(format!("{key}: {e}")))
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {}", n + 1, e.detail())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Lines whose key starts with one of `prefixes`, plus the global seed.
    /// Stage cache keys hash this subtree.
    pub fn subtree(&self, prefixes: &[&str]) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| *k == "seed" || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |what: &str| Err(HarnessError::Config(what.to_string()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.sim.dt > 0.0) || self.sim.episode_cap == 0 {
            return bad("sim.dt and sim.episode_cap must be positive");
        }
        if !self.augment.is_valid() {
            return bad("augment probabilities must lie in [0, 1]");
        }
        if self.vision_pairs == 0 || self.vae_data.episodes == 0 {
            return bad("dataset sizes must be positive");
        }
        if !unit(self.vae_data.reverse_fraction) || !unit(self.policy.starts.reverse_fraction) {
            return bad("reverse fractions must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.policy.starts.speed_spread) || !(self.policy.starts.base_speed > 0.0) {
            return bad("policy.base_speed must be positive and policy.speed_spread in [0, 1)");
        }
        if !unit(self.policy.gamma) || self.policy.k == 0 {
            return bad("policy.gamma must lie in [0, 1] and policy.k be positive");
        }
        if self.policy.base_episodes == 0 || self.policy.correction_episodes == 0 {
            return bad("episode counts must be positive");
        }
        if self.speed.validate().is_err() {
            return bad("speed parameters need 0 < v_min <= v_init <= v_max, non-negative deltas and failure_window >= 1");
        }
        if self.adapt.laps == 0 || self.eval.laps == 0 || self.eval.episodes == 0 {
            return bad("lap and episode counts must be positive");
        }
        if !(self.adapt.deploy_margin >= 0.0 && self.adapt.deploy_margin.is_finite()) {
            return bad("adapt.deploy_margin must be a non-negative number");
        }
        Ok(())
    }

    /// Collection seeds derived from the global seed, one per stage.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        crate::rng::child_seed(self.seed, stage)
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            seed: self.stage_seed(2),
            ..self.segmenter.clone()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            rng_seed: self.stage_seed(1),
            ..self.augment.clone()
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            seed: self.stage_seed(4),
            ..self.vae.clone()
        }
    }

    pub fn adapt_config(&self, track_seed: u64) -> AdaptConfig {
        AdaptConfig {
            seed: crate::rng::child_seed(self.stage_seed(8), track_seed),
            ..self.adapt.clone()
        }
    }
}
