//! 2-D geometry primitives: vectors, rotations, poses, oriented boxes.
//!
//! Two independent box-intersection routines live here on purpose. Ray
//! casting (sensors) uses a slab test in the box frame; line-of-sight
//! queries (ground truth) use a brute-force segment-vs-edge test. Tests
//! cross-check one against the other.

use serde::{Deserialize, Serialize};

/// Plain 2-D vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector; `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        if n == 0.0 {
            None
        } else {
            Some(Vec2::new(self.x / n, self.y / n))
        }
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

/// 2-D rotation, cached as (cos, sin).
#[derive(Debug, Clone, Copy)]
pub struct Rot2 {
    pub cos: f64,
    pub sin: f64,
}

impl Rot2 {
    pub fn new(angle: f64) -> Self {
        Rot2 { cos: angle.cos(), sin: angle.sin() }
    }

    pub fn apply(self, v: Vec2) -> Vec2 {
        Vec2::new(self.cos * v.x - self.sin * v.y, self.sin * v.x + self.cos * v.y)
    }

    /// Applies the inverse rotation (transpose).
    pub fn apply_inv(self, v: Vec2) -> Vec2 {
        Vec2::new(self.cos * v.x + self.sin * v.y, -self.sin * v.x + self.cos * v.y)
    }
}

/// Rigid 2-D pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: Vec2,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 { position: Vec2::new(x, y), yaw }
    }

    /// Local frame -> world.
    pub fn to_world(&self, local: Vec2) -> Vec2 {
        Rot2::new(self.yaw).apply(local) + self.position
    }

    /// World -> local frame.
    pub fn to_local(&self, world: Vec2) -> Vec2 {
        Rot2::new(self.yaw).apply_inv(world - self.position)
    }
}

/// Axis-oriented rectangle footprint with arbitrary heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec2,
    pub yaw: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, yaw: f64, length: f64, width: f64) -> Self {
        OrientedBox { center, yaw, half_length: length * 0.5, half_width: width * 0.5 }
    }

    fn to_local(&self, p: Vec2) -> Vec2 {
        Rot2::new(self.yaw).apply_inv(p - self.center)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.half_length && l.y.abs() <= self.half_width
    }

    /// Corner positions in world coordinates, counter-clockwise.
    pub fn corners(&self) -> [Vec2; 4] {
        let r = Rot2::new(self.yaw);
        let hl = self.half_length;
        let hw = self.half_width;
        [
            r.apply(Vec2::new(hl, hw)) + self.center,
            r.apply(Vec2::new(-hl, hw)) + self.center,
            r.apply(Vec2::new(-hl, -hw)) + self.center,
            r.apply(Vec2::new(hl, -hw)) + self.center,
        ]
    }

    /// Slab-method ray intersection in the box frame. Returns the smallest
    /// non-negative hit parameter `t` such that `origin + t*dir` lies on the
    /// box boundary, or `None` when the ray misses. `dir` need not be unit
    /// length; `t` is in units of `|dir|`.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        let rot = Rot2::new(self.yaw);
        let o = rot.apply_inv(origin - self.center);
        let d = rot.apply_inv(dir);
        let mut t_min = 0.0_f64;
        let mut t_max = f64::INFINITY;
        for (oc, dc, half) in [(o.x, d.x, self.half_length), (o.y, d.y, self.half_width)] {
            if dc.abs() < 1e-15 {
                if oc.abs() > half {
                    return None;
                }
            } else {
                let mut t0 = (-half - oc) / dc;
                let mut t1 = (half - oc) / dc;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_min = t_min.max(t0);
                t_max = t_max.min(t1);
                if t_min > t_max {
                    return None;
                }
            }
        }
        Some(t_min)
    }

    /// Brute-force segment/box crossing: true when segment `a..b` touches
    /// the box interior or boundary. Checks endpoint containment plus all
    /// four edges via orientation tests; deliberately shares no code with
    /// [`OrientedBox::ray_hit`].
    pub fn segment_crosses(&self, a: Vec2, b: Vec2) -> bool {
        if self.contains(a) || self.contains(b) {
            return true;
        }
        let c = self.corners();
        for i in 0..4 {
            if segments_intersect(a, b, c[i], c[(i + 1) % 4]) {
                return true;
            }
        }
        false
    }

    /// Separating-axis overlap test against another box.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let axes = [
            Rot2::new(self.yaw).apply(Vec2::new(1.0, 0.0)),
            Rot2::new(self.yaw).apply(Vec2::new(0.0, 1.0)),
            Rot2::new(other.yaw).apply(Vec2::new(1.0, 0.0)),
            Rot2::new(other.yaw).apply(Vec2::new(0.0, 1.0)),
        ];
        let ca = self.corners();
        let cb = other.corners();
        for axis in axes {
            let pa = project(&ca, axis);
            let pb = project(&cb, axis);
            if pa.1 < pb.0 || pb.1 < pa.0 {
                return false;
            }
        }
        true
    }

    /// Signed distance to the box boundary (negative inside). Used by tests
    /// that verify sensor returns lie on object surfaces.
    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        let l = self.to_local(p);
        let dx = l.x.abs() - self.half_length;
        let dy = l.y.abs() - self.half_width;
        if dx > 0.0 || dy > 0.0 {
            let ox = dx.max(0.0);
            let oy = dy.max(0.0);
            (ox * ox + oy * oy).sqrt()
        } else {
            dx.max(dy)
        }
    }
}

fn project(points: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let v = p.dot(axis);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// Proper or touching intersection of segments ab and cd.
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}
