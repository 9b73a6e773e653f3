#![allow(dead_code)]

use std::sync::Arc;

use l2r::geom::Vec2;
use l2r::sim::{generate_track, CarState, Env, EnvMode, SimConfig, TrackParams, TrackSpec};

/// A rounded-corner rectangle `length` m long and 60 m wide: long straights
/// along y = 0 and y = 60.
pub fn rectangle(length: f64) -> TrackSpec {
    let n = (length / 0.5) as usize;
    let mut pts = Vec::new();
    for i in 0..n {
        pts.push(Vec2::new(i as f64 * 0.5, 0.0));
    }
    for k in 0..120 {
        pts.push(Vec2::new(length, k as f64 * 0.5));
    }
    for i in 0..n {
        pts.push(Vec2::new(length - i as f64 * 0.5, 60.0));
    }
    for k in 0..120 {
        pts.push(Vec2::new(0.0, 60.0 - k as f64 * 0.5));
    }
    let w = vec![6.0; pts.len()];
    TrackSpec::from_points(0, pts, w).unwrap()
}

pub fn rectangle_track() -> TrackSpec {
    rectangle(200.0)
}

pub fn default_track(seed: u64) -> TrackSpec {
    generate_track(seed, &TrackParams::default()).unwrap()
}

pub fn state_at(x: f64, y: f64, heading: f64, speed: f64, lap_distance: f64) -> CarState {
    CarState {
        position: Vec2::new(x, y),
        heading,
        speed,
        lap_distance,
        time_step: 0,
    }
}

pub fn env(track: TrackSpec, mode: EnvMode) -> Env {
    Env::new(Arc::new(track), SimConfig::default(), mode)
}

/// Distance from `p` to segment `a..b` and the clamped parameter, written out
/// independently of the library's geometry helpers.
pub fn point_segment(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let mut t = if len2 == 0.0 { 0.0 } else { ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 };
    t = t.clamp(0.0, 1.0);
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    (((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt(), t)
}
