//! Planar geometry for the intersection scene.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A point or displacement in the world frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn length(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn normalized(self) -> Option<Vec2> {
        let len = self.length();
        if len > 0.0 && len.is_finite() {
            Some(self * (1.0 / len))
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn axis(self, i: usize) -> f64 {
        if i == 0 {
            self.x
        } else {
            self.y
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangular footprint, e.g. a parked bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub half_extents: Vec2,
}

impl Obstacle {
    pub fn new(center: Vec2, half_extents: Vec2) -> Self {
        Obstacle {
            center,
            half_extents,
        }
    }

    pub fn min(&self) -> Vec2 {
        self.center - self.half_extents
    }

    pub fn max(&self) -> Vec2 {
        self.center + self.half_extents
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (lo, hi) = (self.min(), self.max());
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y
    }

    /// Parameter interval `[t0, t1] ⊆ [0, 1]` over which the segment `a + t·(b − a)`
    /// lies inside the rectangle, by slab clipping. `None` when they do not meet.
    pub fn clip_segment(&self, a: Vec2, b: Vec2) -> Option<(f64, f64)> {
        let d = b - a;
        let (lo, hi) = (self.min(), self.max());
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for axis in 0..2 {
            let (p, dir) = (a.axis(axis), d.axis(axis));
            let (lo, hi) = (lo.axis(axis), hi.axis(axis));
            if dir == 0.0 {
                if p < lo || p > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir;
            let (mut near, mut far) = ((lo - p) * inv, (hi - p) * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// True iff the open segment `observer → target` meets none of the obstacles.
///
/// The open segment excludes its endpoints, so an obstacle that only touches
/// the observer or the target at a single point does not block the view.
pub fn line_of_sight(observer: Vec2, target: Vec2, obstacles: &[Obstacle]) -> bool {
    obstacles.iter().all(|ob| match ob.clip_segment(observer, target) {
        None => true,
        // Contact confined to an endpoint.
        Some((t0, t1)) => t1 <= 0.0 || t0 >= 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bus() -> Obstacle {
        Obstacle::new(Vec2::new(-8.0, 3.0), Vec2::new(6.0, 1.25))
    }

    // Dense point sampling of the open segment.
    fn sampled_blocked(a: Vec2, b: Vec2, ob: &Obstacle, n: usize) -> bool {
        (1..n).any(|i| ob.contains(a + (b - a) * (i as f64 / n as f64)))
    }

    #[test]
    fn nothing_occludes_an_empty_scene() {
        assert!(line_of_sight(Vec2::new(-30.0, 0.0), Vec2::new(0.0, 5.0), &[]));
    }

    #[test]
    fn bus_blocks_diagonal_sight_line() {
        let (a, b) = (Vec2::new(-30.0, 0.0), Vec2::new(0.0, 5.0));
        assert!(sampled_blocked(a, b, &bus(), 10_000));
        assert!(!line_of_sight(a, b, &[bus()]));
    }

    #[test]
    fn both_ends_left_of_obstacles_is_clear() {
        let (a, b) = (Vec2::new(-40.0, 0.0), Vec2::new(-20.0, 5.0));
        assert!(!sampled_blocked(a, b, &bus(), 10_000));
        assert!(line_of_sight(a, b, &[bus()]));
    }

    #[test]
    fn axis_parallel_segment_outside_slab() {
        let ob = bus();
        assert!(line_of_sight(Vec2::new(-30.0, 0.0), Vec2::new(10.0, 0.0), &[ob]));
        assert!(!line_of_sight(Vec2::new(-30.0, 3.0), Vec2::new(10.0, 3.0), &[ob]));
    }

    #[test]
    fn endpoint_touching_corner_is_not_occlusion() {
        let ob = bus();
        let corner = ob.max();
        assert!(line_of_sight(Vec2::new(0.0, 10.0), corner, &[ob]));
    }

    #[test]
    fn symmetric_in_endpoints() {
        let ob = bus();
        let a = Vec2::new(-30.0, 0.0);
        for (x, y) in [(0.0, 5.0), (-1.0, 2.0), (-20.0, 1.0), (5.0, 0.5)] {
            let b = Vec2::new(x, y);
            assert_eq!(line_of_sight(a, b, &[ob]), line_of_sight(b, a, &[ob]));
        }
    }
}
