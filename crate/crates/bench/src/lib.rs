//! Shared fixtures for the benchmarks.

use twinloop_core::pose::{Keypoint, KeypointFrame, Quaternion, Topology};
use twinloop_core::{TrackerSample, Vec2};

/// A 90 Hz leg-tracker window of in-place stepping at 2 Hz.
pub fn stepping_window(seconds: f64) -> Vec<TrackerSample> {
    let n = (seconds * 90.0).round() as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / 90.0;
            TrackerSample {
                t,
                vertical: 0.4 + 0.08 * (std::f64::consts::TAU * 2.0 * t).sin(),
                horizontal_heading: 0.1,
            }
        })
        .collect()
}

/// A complete, valid 33-keypoint frame.
pub fn pose_frame() -> KeypointFrame {
    KeypointFrame {
        tick: 1,
        keypoints: Topology::blazepose()
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| Keypoint {
                name: name.clone(),
                position: [i as f64 * 0.01, 1.0, 0.0],
                orientation: Quaternion::IDENTITY,
            })
            .collect(),
    }
}

/// Observer and target pairs spread around the default scene.
pub fn sight_lines(n: usize) -> Vec<(Vec2, Vec2)> {
    (0..n)
        .map(|i| {
            let f = i as f64 / n as f64;
            (Vec2::new(-80.0 + 75.0 * f, 0.0), Vec2::new(0.0, -5.0 + 8.0 * f))
        })
        .collect()
}
