//! Walking-in-place detection from leg trackers.
//!
//! Lifting the legs makes the trackers oscillate vertically. A window counts
//! as walking when the oscillation is both large enough (peak-to-trough) and
//! actually oscillating (at least one pair of mean crossings). Speed is
//! binary: the configured step speed while walking, zero otherwise.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerSample {
    pub t: f64,
    pub vertical: f64,
    pub horizontal_heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocomotionParams {
    pub window_length: f64,
    pub amplitude_threshold: f64,
    pub step_speed: f64,
}

impl Default for LocomotionParams {
    fn default() -> Self {
        LocomotionParams {
            window_length: 0.8,
            amplitude_threshold: 0.05,
            step_speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocomotionState {
    pub walking: bool,
    pub heading: f64,
    pub speed: f64,
    pub last_step_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocomotionError {
    #[error("tracker samples out of order at index {index}")]
    Unordered { index: usize },
    #[error("window spans {span} s, need at least {required} s")]
    TooShort { span: f64, required: f64 },
    #[error("non-finite tracker sample at index {index}")]
    NonFinite { index: usize },
}

const SPAN_EPS: f64 = 1e-9;

pub fn detect_locomotion(
    window: &[TrackerSample],
    params: &LocomotionParams,
) -> Result<LocomotionState, LocomotionError> {
    for (index, s) in window.iter().enumerate() {
        if !(s.t.is_finite() && s.vertical.is_finite() && s.horizontal_heading.is_finite()) {
            return Err(LocomotionError::NonFinite { index });
        }
    }
    if let Some(i) = window.windows(2).position(|w| w[1].t <= w[0].t) {
        return Err(LocomotionError::Unordered { index: i + 1 });
    }
    let span = match (window.first(), window.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    if span + SPAN_EPS < params.window_length {
        return Err(LocomotionError::TooShort {
            span,
            required: params.window_length,
        });
    }

    let n = window.len() as f64;
    let mean = window.iter().map(|s| s.vertical).sum::<f64>() / n;
    let (lo, hi) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.vertical), hi.max(s.vertical))
        });

    // Sign changes of the mean-removed signal; exact zeros carry the previous sign.
    let mut crossings = Vec::new();
    let mut prev_sign = 0i8;
    for s in window {
        let d = s.vertical - mean;
        let sign = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            prev_sign
        };
        if prev_sign != 0 && sign != prev_sign {
            crossings.push(s.t);
        }
        if sign != 0 {
            prev_sign = sign;
        }
    }

    let walking = hi - lo >= params.amplitude_threshold && crossings.len() >= 2;
    let (sin, cos) = window.iter().fold((0.0, 0.0), |(s, c), x| {
        (s + x.horizontal_heading.sin(), c + x.horizontal_heading.cos())
    });
    Ok(LocomotionState {
        walking,
        heading: sin.atan2(cos),
        speed: if walking { params.step_speed } else { 0.0 },
        last_step_at: if walking { crossings.last().copied() } else { None },
    })
}

/// Sliding-window detector fed one sample at a time.
#[derive(Debug, Clone)]
pub struct LocomotionDetector {
    params: LocomotionParams,
    window: VecDeque<TrackerSample>,
}

impl LocomotionDetector {
    pub fn new(params: LocomotionParams) -> Self {
        LocomotionDetector {
            params,
            window: VecDeque::new(),
        }
    }

    /// Appends a sample and, once the window is long enough, re-evaluates.
    pub fn push(&mut self, sample: TrackerSample) -> Result<Option<LocomotionState>, LocomotionError> {
        if let Some(last) = self.window.back() {
            if sample.t <= last.t {
                return Err(LocomotionError::Unordered {
                    index: self.window.len(),
                });
            }
        }
        self.window.push_back(sample);
        // Keep the newest sample at or before the cutoff so the span covers the window.
        let cutoff = sample.t - self.params.window_length;
        while self.window.len() >= 2 && self.window[1].t <= cutoff + SPAN_EPS {
            self.window.pop_front();
        }
        let samples = self.window.make_contiguous();
        match detect_locomotion(samples, &self.params) {
            Ok(state) => Ok(Some(state)),
            Err(LocomotionError::TooShort { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // Synthetic leg trace: A·sin(2πft) sampled at 90 Hz.
    fn sinusoid(amplitude: f64, freq: f64, duration: f64, heading: f64) -> Vec<TrackerSample> {
        let n = (duration * 90.0).round() as usize;
        (0..=n)
            .map(|i| {
                let t = i as f64 / 90.0;
                TrackerSample {
                    t,
                    vertical: 0.4 + amplitude * (2.0 * PI * freq * t).sin(),
                    horizontal_heading: heading,
                }
            })
            .collect()
    }

    #[test]
    fn flat_signal_is_standing() {
        let w = sinusoid(0.0, 2.0, 0.8, 0.0);
        let s = detect_locomotion(&w, &LocomotionParams::default()).unwrap();
        assert!(!s.walking);
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn two_hertz_stepping_walks() {
        let w = sinusoid(0.08, 2.0, 0.8, 0.3);
        let s = detect_locomotion(&w, &LocomotionParams::default()).unwrap();
        assert!(s.walking);
        assert_eq!(s.speed, 1.0);
        assert!((s.heading - 0.3).abs() < 1e-12);
        assert!(s.last_step_at.is_some());
    }

    #[test]
    fn small_oscillation_is_below_threshold() {
        let w = sinusoid(0.02, 2.0, 0.8, 0.0);
        assert!(!detect_locomotion(&w, &LocomotionParams::default()).unwrap().walking);
    }

    #[test]
    fn single_lift_is_not_walking() {
        // One ramp up: big range, no oscillation.
        let w: Vec<_> = (0..=72)
            .map(|i| TrackerSample {
                t: i as f64 / 90.0,
                vertical: i as f64 * 0.002,
                horizontal_heading: 0.0,
            })
            .collect();
        let s = detect_locomotion(&w, &LocomotionParams::default()).unwrap();
        assert!(!s.walking);
    }

    #[test]
    fn heading_wraps_around() {
        let mut w = sinusoid(0.08, 2.0, 0.8, 0.0);
        for (i, s) in w.iter_mut().enumerate() {
            s.horizontal_heading = if i % 2 == 0 { PI - 0.1 } else { -PI + 0.1 };
        }
        let s = detect_locomotion(&w, &LocomotionParams::default()).unwrap();
        // Straight-line average of the angles would give ~0; the circular mean sits near ±π.
        let (even, odd) = (w.len().div_ceil(2) as f64, (w.len() / 2) as f64);
        let expected = ((even - odd) * 0.1f64.sin()).atan2(-(even + odd) * 0.1f64.cos());
        assert!((s.heading - expected).abs() < 1e-9);
        assert!(s.heading.abs() > PI - 0.01);
    }

    #[test]
    fn window_errors() {
        let p = LocomotionParams::default();
        let short = sinusoid(0.08, 2.0, 0.5, 0.0);
        assert!(matches!(
            detect_locomotion(&short, &p),
            Err(LocomotionError::TooShort { .. })
        ));
        assert!(matches!(detect_locomotion(&[], &p), Err(LocomotionError::TooShort { .. })));
        let mut w = sinusoid(0.08, 2.0, 0.8, 0.0);
        w.swap(3, 4);
        assert_eq!(detect_locomotion(&w, &p), Err(LocomotionError::Unordered { index: 4 }));
    }

    #[test]
    fn streaming_detector_tracks_start_and_stop() {
        let mut det = LocomotionDetector::new(LocomotionParams::default());
        let walk = sinusoid(0.08, 2.0, 2.0, 0.0);
        let mut last = None;
        for s in &walk {
            if let Some(state) = det.push(*s).unwrap() {
                last = Some(state);
            }
        }
        assert!(last.unwrap().walking);
        // Then stand still for a second.
        let t0 = walk.last().unwrap().t;
        for i in 1..=90 {
            let state = det
                .push(TrackerSample {
                    t: t0 + i as f64 / 90.0,
                    vertical: 0.4,
                    horizontal_heading: 0.0,
                })
                .unwrap();
            last = state;
        }
        assert!(!last.unwrap().walking);
        assert!(det
            .push(TrackerSample {
                t: t0,
                vertical: 0.4,
                horizontal_heading: 0.0
            })
            .is_err());
    }
}
