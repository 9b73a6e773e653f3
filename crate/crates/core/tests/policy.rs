mod common;

use std::sync::OnceLock;

use common::{default_track, env, rectangle};
use l2r::adapt::{SegmentSpeedModel, SpeedParams};
use l2r::latent::{collect_vae_dataset, train_vae, VaeConfig, VaeModel};
use l2r::policy::{
    agent_act, brute_force, build_value_buffer, classify_safety, collect_base_rollouts, correction_action, discounted_returns,
    explore_corrections, CollectionStarts, CorrectionBuffer, DiscreteAction, KdTree, Perception, PolicyError, SafetyLabel, StateVec,
    Step, Trajectory, ValueBuffer,
};
use l2r::rng;
use l2r::sim::{speed_controller, Action, EnvMode, SimConfig};
use l2r::vision::{render_training_pairs, train_segmenter, AugmentConfig, PoseSampling, SegmenterConfig, SegmenterModel};
use proptest::prelude::*;
use rand::Rng as _;

fn sv(z1: f64, z2: f64, speed: f64) -> StateVec {
    StateVec { z1, z2, speed }
}

fn models() -> &'static (SegmenterModel, VaeModel) {
    static MODELS: OnceLock<(SegmenterModel, VaeModel)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let track = default_track(7);
        let pairs = render_training_pairs(&track, &SimConfig::default(), 300, 1, &AugmentConfig::default(), &PoseSampling::default()).unwrap();
        let seg = train_segmenter(&pairs, &SegmenterConfig::default()).unwrap();
        let mut e = env(track, EnvMode::Training);
        let masks = collect_vae_dataset(&mut e, 20, 10.0, 0.5, 3).unwrap();
        let vae = train_vae(&masks, &VaeConfig::default()).unwrap();
        (seg, vae)
    })
}

fn perception() -> Perception<'static> {
    let (segmenter, vae) = models();
    Perception { segmenter, vae }
}

fn rollouts() -> &'static Vec<Trajectory> {
    static TRAJS: OnceLock<Vec<Trajectory>> = OnceLock::new();
    TRAJS.get_or_init(|| {
        let mut e = env(default_track(7), EnvMode::Evaluation);
        collect_base_rollouts(&mut e, perception(), 20, CollectionStarts::new(10.0), 5).unwrap()
    })
}

fn random_states(n: usize, seed: u64) -> Vec<StateVec> {
    let mut r = rng::seeded(seed, 970);
    (0..n)
        .map(|_| sv(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(0.0..30.0)))
        .collect()
}

/// Value buffer whose first `values.len()` states sit at increasing distance
/// from the origin along z1, with unit scales.
fn line_buffer(values: &[f64], k: usize) -> ValueBuffer {
    let states = (0..values.len()).map(|i| sv(i as f64, 0.0, 0.0)).collect();
    ValueBuffer::new(states, values.to_vec(), [1.0; 3], k).unwrap()
}

fn line_corrections(ids: &[usize]) -> CorrectionBuffer {
    let entries = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (sv(i as f64, 0.0, 0.0), DiscreteAction::from_id(*id).unwrap()))
        .collect();
    CorrectionBuffer::new(entries, [1.0; 3], 5).unwrap()
}

fn uniform_speed(v: f64) -> SegmentSpeedModel {
    let mut m = SegmentSpeedModel::uniform(SpeedParams::default(), 1000.0);
    for t in &mut m.targets {
        *t = v;
    }
    m
}

#[test]
fn kd_tree_agrees_with_full_scan_on_a_thousand_queries() {
    let mut r = rng::seeded(1, 971);
    let points: Vec<[f64; 3]> = (0..5000).map(|_| [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]).collect();
    let tree = KdTree::build(points.clone());
    for _ in 0..1000 {
        let q = [r.random_range(-0.1..1.1), r.random_range(-0.1..1.1), r.random_range(-0.1..1.1)];
        assert_eq!(tree.nearest(&q, 5), brute_force(&points, &q, 5));
    }
}

#[test]
fn duplicate_points_tie_to_the_lower_index() {
    let points = vec![[1.0, 0.0, 0.0], [0.0; 3], [0.0; 3], [0.0; 3], [2.0, 0.0, 0.0]];
    let tree = KdTree::build(points);
    assert_eq!(tree.nearest(&[0.0; 3], 3), vec![1, 2, 3]);
    assert_eq!(tree.nearest(&[0.0; 3], 10).len(), 5);
}

#[test]
fn buffer_neighbors_match_the_scan_on_normalized_coordinates() {
    let states = random_states(3000, 2);
    let values = vec![1.0; states.len()];
    let b = ValueBuffer::from_entries(states, values, 5).unwrap();
    for q in random_states(1000, 3) {
        assert_eq!(b.neighbors(q), b.neighbors_brute_force(q));
    }
}

#[test]
fn myopic_returns_equal_rewards() {
    let rewards = [0.3, -1.0, 2.5, -25.0];
    assert_eq!(discounted_returns(&rewards, 0.0).unwrap(), rewards.to_vec());
}

#[test]
fn hand_computed_returns() {
    let v = discounted_returns(&[1.0, 1.0, -25.0], 0.9).unwrap();
    for (a, b) in v.iter().zip([-18.35, -21.5, -25.0]) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn bad_discount_is_rejected() {
    assert!(matches!(discounted_returns(&[1.0], 1.0), Err(PolicyError::Contract(_))));
    assert!(matches!(discounted_returns(&[], 0.5), Err(PolicyError::Contract(_))));
}

#[test]
fn positive_neighbors_are_safe() {
    let b = line_buffer(&[1.0; 10], 5);
    assert_eq!(classify_safety(&b, sv(0.0, 0.0, 0.0)), SafetyLabel::Safe);
}

#[test]
fn negative_mean_is_unsafe() {
    let b = line_buffer(&[10.0, 10.0, -25.0, -25.0, -25.0, 100.0, 100.0], 5);
    assert_eq!(classify_safety(&b, sv(0.0, 0.0, 0.0)), SafetyLabel::Unsafe);
}

#[test]
fn zero_mean_is_unsafe() {
    let b = line_buffer(&[1.0, -1.0, 2.0, -2.0, 0.0, 9.0], 5);
    assert_eq!(classify_safety(&b, sv(0.0, 0.0, 0.0)), SafetyLabel::Unsafe);
}

#[test]
fn exact_match_with_one_neighbor() {
    let b = line_buffer(&[-3.0, 5.0, -3.0], 1);
    assert_eq!(classify_safety(&b, sv(1.0, 0.0, 0.0)), SafetyLabel::Safe);
}

#[test]
fn small_buffer_uses_every_entry() {
    let b = line_buffer(&[4.0, -1.0], 5);
    assert_eq!(b.neighbors(sv(0.0, 0.0, 0.0)).len(), 2);
    assert_eq!(classify_safety(&b, sv(0.0, 0.0, 0.0)), SafetyLabel::Safe);
}

#[test]
fn unanimous_vote() {
    let b = line_corrections(&[3, 3, 3, 3, 3]);
    assert_eq!(correction_action(&b, sv(0.0, 0.0, 0.0)).unwrap().id(), 3);
}

#[test]
fn majority_vote() {
    let b = line_corrections(&[2, 2, 5, 5, 5]);
    assert_eq!(correction_action(&b, sv(0.0, 0.0, 0.0)).unwrap().id(), 5);
}

#[test]
fn tied_vote_goes_to_the_nearest_neighbor() {
    // nearest is entry 0 with action 2
    let b = line_corrections(&[2, 1, 1, 2, 4]);
    assert_eq!(correction_action(&b, sv(0.0, 0.0, 0.0)).unwrap().id(), 2);
}

#[test]
fn value_buffer_scales_come_from_the_spread() {
    let states = vec![sv(0.0, 1.0, 5.0), sv(2.0, 1.0, 15.0)];
    let b = ValueBuffer::from_entries(states, vec![1.0, 1.0], 5).unwrap();
    assert_eq!(b.scales(), [1.0, 1.0, 5.0]);
    assert_eq!(b.degenerate, [false, true, false]);
}

#[test]
fn value_buffer_needs_enough_states() {
    let t = Trajectory {
        episode: 0,
        steps: vec![
            Step {
                state: sv(0.0, 0.0, 1.0),
                reward: 0.1,
                off_road: false
            };
            99
        ],
    };
    assert!(build_value_buffer(&[t], 0.95, 5).is_err());
}

#[test]
fn buffers_round_trip_bit_exactly() {
    let states = random_states(200, 4);
    let values: Vec<f64> = (0..200).map(|i| (i as f64 * 0.77).sin() * 10.0).collect();
    let vb = ValueBuffer::from_entries(states.clone(), values, 5).unwrap();
    let back = ValueBuffer::from_bytes(&vb.to_bytes(), 5).unwrap();
    assert_eq!(back.to_bytes(), vb.to_bytes());
    assert_eq!(back.states(), vb.states());

    let entries = states.iter().enumerate().map(|(i, s)| (*s, DiscreteAction::from_id(i % 8).unwrap())).collect();
    let cb = CorrectionBuffer::new(entries, vb.scales(), 5).unwrap();
    let back = CorrectionBuffer::from_bytes(&cb.to_bytes(), 5).unwrap();
    assert_eq!(back.actions(), cb.actions());
    assert_eq!(back.to_bytes(), cb.to_bytes());
    assert!(matches!(ValueBuffer::from_bytes(&cb.to_bytes(), 5), Err(PolicyError::Format(_))));
}

#[test]
fn truncated_buffer_file_is_rejected() {
    let vb = line_buffer(&[1.0; 10], 5);
    let bytes = vb.to_bytes();
    assert!(ValueBuffer::from_bytes(&bytes[..bytes.len() - 1], 5).is_err());
}

#[test]
fn agent_rests_at_equilibrium_when_safe() {
    let vb = line_buffer(&[1.0; 10], 5);
    let d = agent_act(sv(0.0, 0.0, 12.0), 40.0, &vb, None, &uniform_speed(12.0), 0.5);
    assert_eq!(d.label, SafetyLabel::Safe);
    assert_eq!(d.action, Action::new(0.0, 0.0));
}

#[test]
fn agent_follows_the_vote_when_unsafe() {
    let vb = line_buffer(&[-1.0; 10], 5);
    let want = DiscreteAction::from_parts(-0.5, 0.5).unwrap();
    let cb = line_corrections(&[want.id(); 5]);
    let d = agent_act(sv(0.0, 0.0, 12.0), 40.0, &vb, Some(&cb), &uniform_speed(12.0), 0.5);
    assert_eq!(d.correction, Some(want));
    assert_eq!(d.action.steering, -0.5);
    assert_eq!(d.target_speed, 6.0);
    assert_eq!(d.action.acceleration, speed_controller(12.0, 6.0, 0.5));
}

#[test]
fn agent_returns_to_the_base_policy_once_safe() {
    // safe near z1 = 0, unsafe near z1 = 100
    let mut values = vec![5.0; 10];
    values.extend([-30.0; 10]);
    let states: Vec<StateVec> = (0..20).map(|i| sv(if i < 10 { i as f64 * 0.1 } else { 100.0 + i as f64 * 0.1 }, 0.0, 0.0)).collect();
    let vb = ValueBuffer::new(states, values, [1.0; 3], 5).unwrap();
    let cb = CorrectionBuffer::new(vec![(sv(100.0, 0.0, 0.0), DiscreteAction::from_id(0).unwrap()); 5], [1.0; 3], 5).unwrap();
    let trace: Vec<f64> = [0.0, 100.0, 0.0]
        .iter()
        .map(|z| agent_act(sv(*z, 0.0, 8.0), 0.0, &vb, Some(&cb), &uniform_speed(8.0), 0.5).action.steering)
        .collect();
    assert_eq!(trace[0], 0.0);
    assert_ne!(trace[1], 0.0);
    assert_eq!(trace[2], 0.0);
}

#[test]
fn unsafe_without_corrections_drives_straight() {
    let vb = line_buffer(&[-1.0; 10], 5);
    let d = agent_act(sv(0.0, 0.0, 8.0), 0.0, &vb, None, &uniform_speed(8.0), 0.5);
    assert_eq!(d.label, SafetyLabel::Unsafe);
    assert_eq!(d.action.steering, 0.0);
}

#[test]
fn straight_policy_on_a_straight_road_survives_to_the_cap() {
    let mut e = env(rectangle(3000.0), EnvMode::Evaluation);
    e.place(10.0, 0.0, 0.0, 1);
    let mut steps = 0;
    loop {
        let speed = e.state().speed;
        let r = e.step(Action::new(0.0, speed_controller(speed, 8.0, 0.5))).unwrap();
        steps += 1;
        assert!(!r.off_road);
        if r.done {
            break;
        }
    }
    assert_eq!(steps as u64, SimConfig::default().episode_cap);
}

#[test]
fn straight_policy_with_a_heading_error_leaves_the_road() {
    let mut e = env(rectangle(3000.0), EnvMode::Evaluation);
    e.place(10.0, 0.15, 0.0, 1);
    let last = loop {
        let speed = e.state().speed;
        let r = e.step(Action::new(0.0, speed_controller(speed, 8.0, 0.5))).unwrap();
        if r.done {
            break r;
        }
    };
    assert!(last.off_road);
    assert!(last.reward <= -25.0);
}

#[test]
fn base_rollouts_gather_the_expected_number_of_states() {
    let trajs = rollouts();
    let total: usize = trajs.iter().map(|t| t.steps.len()).sum();
    assert!((600..=2400).contains(&total), "{total} states");
    let vb = build_value_buffer(trajs, 0.95, 5).unwrap();
    assert!(vb.scales().iter().all(|s| *s > 0.0));
    assert_eq!(vb.degenerate, [false; 3]);
    for t in trajs.iter().filter(|t| t.ended_off_road()) {
        assert!(t.steps.last().unwrap().reward <= -25.0);
    }
}

#[test]
fn value_of_an_off_road_ending_is_the_penalty_or_worse() {
    let t = rollouts().iter().find(|t| t.ended_off_road()).expect("some rollout leaves the road");
    let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
    assert!(*discounted_returns(&rewards, 0.95).unwrap().last().unwrap() <= -25.0);
}

#[test]
fn exploration_stores_whole_recovered_segments() {
    let vb = build_value_buffer(rollouts(), 0.95, 5).unwrap();
    let mut e = env(default_track(7), EnvMode::Evaluation);
    let (cb, stats) = explore_corrections(&mut e, perception(), &vb, 20, CollectionStarts::new(10.0), 6).unwrap();
    assert_eq!(stats.entries, cb.len());
    assert!(stats.segments_kept > 0);
    assert!(stats.segments_kept + stats.segments_discarded <= stats.steps);
    // kept segments are runs of one held action, so there are no more action changes than segments
    let changes = cb.actions().windows(2).filter(|w| w[0] != w[1]).count();
    assert!(changes < stats.segments_kept);
    for i in 0..cb.len() {
        assert_eq!(classify_safety(&vb, cb.state(i)), SafetyLabel::Unsafe);
    }
}

#[test]
fn always_safe_exploration_finds_nothing_to_store() {
    let trajs = rollouts();
    let vb0 = build_value_buffer(trajs, 0.95, 5).unwrap();
    let vb = ValueBuffer::new(vb0.states().to_vec(), vec![1.0; vb0.len()], vb0.scales(), 5).unwrap();
    let mut e = env(default_track(7), EnvMode::Evaluation);
    let err = explore_corrections(&mut e, perception(), &vb, 2, CollectionStarts::new(10.0), 6).unwrap_err();
    assert!(matches!(err, PolicyError::ExplorationFailed { episodes: 2 }));
}

#[test]
fn rollouts_are_reproducible() {
    let mut e = env(default_track(7), EnvMode::Evaluation);
    let again = collect_base_rollouts(&mut e, perception(), 20, CollectionStarts::new(10.0), 5).unwrap();
    assert_eq!(&again, rollouts());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn returns_follow_the_backward_recursion(rewards in prop::collection::vec(-30.0f64..3.0, 1..60), gamma in 0.0f64..0.999) {
        let v = discounted_returns(&rewards, gamma).unwrap();
        prop_assert_eq!(*v.last().unwrap(), *rewards.last().unwrap());
        for t in 0..rewards.len() - 1 {
            prop_assert!((v[t] - (rewards[t] + gamma * v[t + 1])).abs() <= 1e-9 * (1.0 + v[t].abs()));
        }
    }

    #[test]
    fn constant_rewards_sum_geometrically(c in 0.0f64..5.0, n in 1usize..200, gamma in 0.0f64..0.99) {
        let v = discounted_returns(&vec![c; n], gamma).unwrap();
        let closed = c * (1.0 - gamma.powi(n as i32)) / (1.0 - gamma);
        prop_assert!((v[0] - closed).abs() <= 1e-9 * (1.0 + closed));
    }

    #[test]
    fn scaling_values_never_changes_labels(seed in 0u64..500, c in 0.001f64..1000.0) {
        let states = random_states(150, seed);
        let mut r = rng::seeded(seed, 972);
        let values: Vec<f64> = (0..150).map(|_| r.random_range(-25.0..3.0)).collect();
        let a = ValueBuffer::from_entries(states.clone(), values.clone(), 5).unwrap();
        let b = ValueBuffer::from_entries(states, values.iter().map(|v| v * c).collect(), 5).unwrap();
        for q in random_states(30, seed + 1) {
            prop_assert_eq!(classify_safety(&a, q), classify_safety(&b, q));
        }
    }

    #[test]
    fn identical_buffers_give_identical_decisions(seed in 0u64..500) {
        let states = random_states(120, seed);
        let entries: Vec<_> = states.iter().enumerate().map(|(i, s)| (*s, DiscreteAction::from_id((i * 7 + seed as usize) % 8).unwrap())).collect();
        let a = CorrectionBuffer::new(entries.clone(), [1.0, 1.0, 10.0], 5).unwrap();
        let b = CorrectionBuffer::new(entries, [1.0, 1.0, 10.0], 5).unwrap();
        for q in random_states(20, seed + 7) {
            prop_assert_eq!(correction_action(&a, q), correction_action(&b, q));
        }
    }
}
