mod common;

use common::{default_track, env, point_segment, rectangle, rectangle_track, state_at};
use l2r::geom::Vec2;
use l2r::rng;
use l2r::sim::{
    compute_reward, generate_track, lap_progress, render_camera, speed_controller, step, Action, CameraConfig, EnvMode, Palette,
    RewardConfig, SimConfig, TrackParams, TrackSpec,
};
use proptest::prelude::*;
use rand::Rng as _;

/// Proper crossing of two segments by solving the 2x2 system; touching or
/// collinear overlap counts as an intersection too.
fn segments_cross(p: Vec2, p2: Vec2, q: Vec2, q2: Vec2) -> bool {
    let r = (p2.x - p.x, p2.y - p.y);
    let s = (q2.x - q.x, q2.y - q.y);
    let denom = r.0 * s.1 - r.1 * s.0;
    let qp = (q.x - p.x, q.y - p.y);
    if denom.abs() < 1e-15 {
        // parallel: overlapping only when collinear and the projections meet
        if (qp.0 * r.1 - qp.1 * r.0).abs() > 1e-12 {
            return false;
        }
        let rr = r.0 * r.0 + r.1 * r.1;
        let t0 = (qp.0 * r.0 + qp.1 * r.1) / rr;
        let t1 = t0 + (s.0 * r.0 + s.1 * r.1) / rr;
        return t0.min(t1) <= 1.0 && t0.max(t1) >= 0.0;
    }
    let t = (qp.0 * s.1 - qp.1 * s.0) / denom;
    let u = (qp.0 * r.1 - qp.1 * r.0) / denom;
    (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
}

fn brute_self_intersects(track: &TrackSpec) -> bool {
    let n = track.len();
    let c = &track.centerline;
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(c[i], c[(i + 1) % n], c[j], c[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

fn brute_on_road(track: &TrackSpec, p: Vec2) -> bool {
    let n = track.len();
    (0..n).any(|i| {
        let (d, t) = point_segment(p, track.centerline[i], track.centerline[(i + 1) % n]);
        let w = track.half_width[i] + (track.half_width[(i + 1) % n] - track.half_width[i]) * t;
        d <= w
    })
}

#[test]
fn fifty_seeds_give_simple_loops() {
    for seed in 1..=50 {
        let t = default_track(seed);
        assert!(!brute_self_intersects(&t), "seed {seed} self-intersects");
    }
}

#[test]
fn generated_tracks_satisfy_their_invariants() {
    for seed in [0, 7, 8, 31] {
        let t = default_track(seed);
        let n = t.len();
        let mut sum = 0.0;
        for i in 0..n {
            let d = t.centerline[i].dist(t.centerline[(i + 1) % n]);
            assert!(d <= 1.0, "spacing {d}");
            sum += d;
        }
        assert!(((t.total_length - sum) / sum).abs() < 1e-9);
        assert!(t.half_width.iter().all(|w| *w > 0.0));
    }
}

#[test]
fn same_seed_is_bit_identical_and_seeds_differ() {
    let a = default_track(7);
    let b = default_track(7);
    assert_eq!(a, b);
    assert_ne!(a.centerline, default_track(8).centerline);
}

#[test]
fn impossible_parameters_exhaust_the_budget() {
    let params = TrackParams {
        radius_min: 3.0,
        radius_max: 4.0,
        min_turn_radius: 50.0,
        max_attempts: 5,
        ..TrackParams::default()
    };
    let err = generate_track(99, &params).unwrap_err();
    assert!(err.to_string().contains("99"));
}

#[test]
fn track_csv_round_trip() {
    let t = default_track(7);
    let back = TrackSpec::from_csv(7, &t.to_csv()).unwrap();
    assert_eq!(back.len(), t.len());
    for (a, b) in back.centerline.iter().zip(&t.centerline) {
        assert!(a.dist(*b) < 1e-6);
    }
    assert!(t.to_csv().starts_with("x,y,half_width\n"));
}

#[test]
fn off_road_agrees_with_full_scan() {
    for seed in [7, 8] {
        let t = default_track(seed);
        let mut r = rng::seeded(seed, 900);
        let (mut lo, mut hi) = (Vec2::new(f64::MAX, f64::MAX), Vec2::new(f64::MIN, f64::MIN));
        for p in &t.centerline {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let mut on = 0;
        for k in 0..1000 {
            // half the probes near the road so both outcomes are exercised
            let p = if k % 2 == 0 {
                let s = r.random_range(0.0..t.total_length);
                let (c, h, w) = t.pose_at(s);
                let off = r.random_range(-2.0 * w..2.0 * w);
                c + Vec2::new(-h.sin(), h.cos()) * off
            } else {
                Vec2::new(r.random_range(lo.x - 10.0..hi.x + 10.0), r.random_range(lo.y - 10.0..hi.y + 10.0))
            };
            let expected = brute_on_road(&t, p);
            assert_eq!(t.on_road(p), expected, "seed {seed} point {p:?}");
            on += expected as usize;
        }
        assert!(on > 100 && on < 900);
    }
}

#[test]
fn reward_examples() {
    let cfg = RewardConfig::default();
    assert_eq!(compute_reward(10.0, true, &cfg).unwrap(), -50.0);
    assert_eq!(compute_reward(0.0, true, &cfg).unwrap(), -25.0);
    assert!((compute_reward(10.0, false, &cfg).unwrap() - 1.0).abs() < 1e-12);
    assert!(compute_reward(-0.5, true, &cfg).is_err());
}

#[test]
fn reward_matches_formula_on_a_grid() {
    let cfg = RewardConfig::default();
    for i in 0..1000 {
        let v = i as f64 * 0.04;
        assert_eq!(compute_reward(v, true, &cfg).unwrap().to_bits(), (-25.0f64).min(-5.0 * v).to_bits());
    }
}

#[test]
fn controller_examples() {
    assert_eq!(speed_controller(10.0, 10.0, 0.5), 0.0);
    assert_eq!(speed_controller(0.0, 100.0, 0.5), 1.0);
    assert_eq!(speed_controller(10.0, 9.0, 0.5), -0.5);
}

#[test]
fn step_examples() {
    let t = rectangle_track();
    let cfg = SimConfig::default();
    let rest = state_at(50.0, 0.0, 0.0, 0.0, 50.0);
    let r = step(&rest, Action::new(0.0, 0.0), &t, &cfg).unwrap();
    assert_eq!(r.next_state.position, rest.position);
    assert_eq!(r.reward, 0.0);
    assert!(!r.off_road);

    let moving = state_at(50.0, 0.0, 0.0, 10.0, 50.0);
    let r = step(&moving, Action::new(0.0, 0.0), &t, &cfg).unwrap();
    assert!((r.next_state.position.x - 51.0).abs() < 1e-9);
    assert!(r.next_state.position.y.abs() < 1e-9);

    let outside = state_at(50.0, -6.01, 0.0, 0.0, 50.0);
    let r = step(&outside, Action::new(0.0, 0.0), &t, &cfg).unwrap();
    assert!(r.off_road && r.done);
}

#[test]
fn centered_car_sees_road_above_the_hood() {
    let t = rectangle_track();
    let cam = CameraConfig::default();
    let (img, mask) = render_camera(&state_at(60.0, 0.0, 0.0, 0.0, 60.0), &t, &cam, &Palette::default(), None);
    let row = cam.height - cam.hood_rows() - 1;
    assert_eq!(mask.get(row, cam.width / 2), 1);
    assert!(mask.is_binary());
    assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn road_out_of_view_gives_empty_ground() {
    let t = rectangle_track();
    // far outside the loop, looking away from it
    let (_, mask) = render_camera(&state_at(-200.0, -200.0, -2.4, 0.0, 0.0), &t, &CameraConfig::default(), &Palette::default(), None);
    assert_eq!(mask.count_ones(), 0);
}

#[test]
fn road_width_shrinks_towards_the_horizon() {
    // long enough that the far corner stays beyond the horizon rows
    let t = rectangle(3000.0);
    let cam = CameraConfig::default();
    let mut r = rng::seeded(3, 901);
    for _ in 0..20 {
        let x = r.random_range(10.0..150.0);
        let (_, mask) = render_camera(&state_at(x, 0.0, 0.0, 0.0, x), &t, &cam, &Palette::default(), None);
        let widths: Vec<usize> = (0..cam.height - cam.hood_rows())
            .map(|row| (0..cam.width).filter(|&c| mask.get(row, c) == 1).count())
            .collect();
        for pair in widths.windows(2) {
            assert!(pair[0] <= pair[1], "far row wider than near row: {widths:?}");
        }
    }
}

#[test]
fn identical_actions_give_identical_trajectories() {
    let run = || {
        let mut e = env(default_track(7), EnvMode::Training);
        e.reset(11);
        let mut out = Vec::new();
        for k in 0..200 {
            let r = e.step(Action::new(((k as f64) * 0.07).sin() * 0.2, 0.6)).unwrap();
            out.push((r.next_state.position.x.to_bits(), r.next_state.position.y.to_bits(), r.reward.to_bits()));
            if r.done {
                break;
            }
        }
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_mode_never_exposes_masks() {
    let mut e = env(default_track(7), EnvMode::Evaluation);
    assert!(e.reset(0).ground_truth().is_none());
    let r = e.step(Action::new(0.0, 1.0)).unwrap();
    assert!(r.observation.ground_truth().is_none());
    let mut e = env(default_track(7), EnvMode::Training);
    assert!(e.reset(0).ground_truth().is_some());
}

#[test]
fn start_perturbation_stays_in_range() {
    let t = default_track(7);
    let cfg = SimConfig::default();
    let (c, h, w) = t.pose_at(0.0);
    let mut e = env(t, EnvMode::Training);
    for seed in 0..50 {
        e.reset(seed);
        let s = *e.state();
        let dh = l2r::geom::normalize_angle(s.heading - h).abs();
        assert!(dh <= cfg.start_heading_jitter + 1e-12);
        assert!(s.position.dist(c) <= cfg.start_lateral_jitter * w + 1e-9);
        assert_eq!(s.speed, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reward_sign(v in 0.0f64..60.0, coeff in 0.0f64..2.0) {
        let cfg = RewardConfig { speed_coeff: coeff, ..RewardConfig::default() };
        prop_assert!(compute_reward(v, false, &cfg).unwrap() >= 0.0);
        prop_assert!(compute_reward(v, true, &cfg).unwrap() <= -25.0);
    }

    #[test]
    fn braking_never_speeds_up(v0 in 0.0f64..40.0, accels in prop::collection::vec(-1.0f64..=0.0, 1..60), steer in -1.0f64..1.0) {
        let t = rectangle_track();
        let cfg = SimConfig::default();
        let mut s = state_at(20.0, 0.0, 0.0, v0, 20.0);
        for a in accels {
            let next = step(&s, Action::new(steer, a), &t, &cfg).unwrap().next_state;
            prop_assert!(next.speed <= s.speed);
            s = next;
        }
    }

    #[test]
    fn lap_distance_moves_continuously(seed in 0u64..200, throttle in 0.2f64..1.0, weave in 0.0f64..0.3) {
        let track = default_track(7);
        // the projection can outrun the car on the inside of a bend by at
        // most R / (R - w) for turn radius R and half-width w
        let p = TrackParams::default();
        let stretch = p.min_turn_radius / (p.min_turn_radius - p.half_width_max);
        let mut e = env(track, EnvMode::Evaluation);
        e.reset(seed);
        let dt = e.config().dt;
        let mut prev = e.state().lap_distance;
        for k in 0..300 {
            let r = e.step(Action::new(weave * (k as f64 * 0.1).sin(), throttle)).unwrap();
            let now = r.next_state.lap_distance;
            let moved = lap_progress(e.track(), prev, now).abs();
            prop_assert!(moved <= r.next_state.speed * dt * stretch + 0.05, "step {k}: moved {moved}");
            prop_assert!((0.0..e.track().total_length).contains(&now));
            prev = now;
            if r.done {
                break;
            }
        }
    }
}
