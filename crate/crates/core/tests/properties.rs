use proptest::prelude::*;
use twinloop_core::pose::{
    map_to_avatar, skeleton_from_topology, Keypoint, KeypointFrame, LocomotionParams, Quaternion, Topology,
};
use twinloop_core::world::{step_pedestrian, step_vehicle};
use twinloop_core::{
    detect_locomotion, line_of_sight, parse_keypoint_frame, CrossingPhase, Obstacle, Scenario, TrackerSample, Vec2,
};

fn vec2(range: f64) -> impl Strategy<Value = Vec2> {
    (-range..range, -range..range).prop_map(|(x, y)| Vec2::new(x, y))
}

fn obstacle() -> impl Strategy<Value = Obstacle> {
    (vec2(20.0), 0.1f64..6.0, 0.1f64..3.0).prop_map(|(c, hx, hy)| Obstacle::new(c, Vec2::new(hx, hy)))
}

fn unit_quaternion() -> impl Strategy<Value = Quaternion> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            Quaternion {
                w: w / n,
                x: x / n,
                y: y / n,
                z: z / n,
            }
        })
}

fn frame() -> impl Strategy<Value = KeypointFrame> {
    let kp = (prop::array::uniform3(-3.0f64..3.0), unit_quaternion());
    (any::<u32>(), prop::collection::vec(kp, 33)).prop_map(|(tick, kps)| KeypointFrame {
        tick: tick as u64,
        keypoints: Topology::blazepose()
            .names()
            .iter()
            .zip(kps)
            .map(|(name, (position, orientation))| Keypoint {
                name: name.clone(),
                position,
                orientation,
            })
            .collect(),
    })
}

fn sine_window(amplitude: f64, freq: f64, phase: f64, heading: f64, t0: f64) -> Vec<TrackerSample> {
    (0..=72)
        .map(|i| {
            let t = i as f64 / 90.0;
            TrackerSample {
                t: t0 + t,
                vertical: 0.4 + amplitude * (std::f64::consts::TAU * freq * t + phase).sin(),
                horizontal_heading: heading,
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn line_of_sight_is_symmetric(a in vec2(30.0), b in vec2(30.0), obs in prop::collection::vec(obstacle(), 0..4)) {
        prop_assert_eq!(line_of_sight(a, b, &obs), line_of_sight(b, a, &obs));
    }

    #[test]
    fn adding_an_obstacle_never_restores_sight(a in vec2(30.0), b in vec2(30.0), obs in prop::collection::vec(obstacle(), 0..4), extra in obstacle()) {
        let before = line_of_sight(a, b, &obs);
        let mut more = obs.clone();
        more.push(extra);
        prop_assert!(before || !line_of_sight(a, b, &more));
    }

    #[test]
    fn pose_frames_round_trip(f in frame()) {
        let text = f.to_json();
        let parsed = parse_keypoint_frame(text.as_bytes()).unwrap();
        prop_assert_eq!(&parsed, &f);
        prop_assert_eq!(parse_keypoint_frame(parsed.to_json().as_bytes()).unwrap(), f);
    }

    #[test]
    fn avatar_bones_copy_keypoints_in_skeleton_order(f in frame()) {
        let skeleton = skeleton_from_topology(Topology::blazepose());
        let bones = map_to_avatar(&f, &skeleton).unwrap();
        prop_assert_eq!(bones.len(), skeleton.len());
        for (bone, binding) in bones.iter().zip(&skeleton) {
            let kp = f.keypoints.iter().find(|k| k.name == binding.keypoint).unwrap();
            prop_assert_eq!(&bone.bone, &binding.bone);
            prop_assert_eq!(bone.position, kp.position);
            prop_assert_eq!(bone.orientation, kp.orientation);
        }
    }

    #[test]
    fn walking_is_monotone_in_amplitude(a in 0.0f64..0.2, b in 0.0f64..0.2, phase in 0.0f64..6.28) {
        let p = LocomotionParams::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let w_lo = detect_locomotion(&sine_window(lo, 2.0, phase, 0.0, 0.0), &p).unwrap().walking;
        let w_hi = detect_locomotion(&sine_window(hi, 2.0, phase, 0.0, 0.0), &p).unwrap().walking;
        prop_assert!(!w_lo || w_hi);
    }

    #[test]
    fn locomotion_ignores_time_shift(amp in 0.0f64..0.2, heading in -3.0f64..3.0, shift in 0.0f64..1e4) {
        let p = LocomotionParams::default();
        let a = detect_locomotion(&sine_window(amp, 2.0, 0.3, heading, 0.0), &p).unwrap();
        let b = detect_locomotion(&sine_window(amp, 2.0, 0.3, heading, shift), &p).unwrap();
        prop_assert_eq!(a.walking, b.walking);
        prop_assert_eq!(a.speed, b.speed);
        prop_assert!((a.heading - b.heading).abs() < 1e-9);
    }

    #[test]
    fn vehicle_step_keeps_speed_non_negative_and_distance_monotone(v in 0.0f64..30.0, a in -9.8f64..3.0, steps in 1usize..200) {
        let mut s = Scenario::default().initial_vehicle();
        s.speed = v;
        for _ in 0..steps {
            let next = step_vehicle(&s, a, 0.02).unwrap();
            prop_assert!(next.speed >= 0.0);
            prop_assert!(next.distance_to_conflict <= s.distance_to_conflict);
            let travelled = (next.position - s.position).length();
            prop_assert!((travelled - (s.distance_to_conflict - next.distance_to_conflict)).abs() < 1e-9);
            s = next;
        }
    }

    #[test]
    fn stationary_phases_never_move(speed in 0.0f64..3.0) {
        let p = Scenario::default().initial_pedestrian();
        for phase in [CrossingPhase::Waiting, CrossingPhase::StoppedByWarning, CrossingPhase::Crossed] {
            let next = step_pedestrian(&p, phase, speed, 0.02).unwrap();
            prop_assert_eq!(next.speed, 0.0);
            prop_assert_eq!(next.position, p.position);
        }
    }
}
