//! Centerline geometry: piecewise-constant-curvature tracks, frenet to
//! cartesian mapping and the inverse projection.
//!
//! Segments with constant curvature have closed-form poses (arcs and
//! straights), so the projection of a point onto the centerline is exact
//! per segment; the track picks the closest candidate. Queries beyond the
//! track ends fall on straight extensions of the end tangents.

use crate::real::{real, Real};
use crate::vehicle::RoadPoint;

/// Source of local road geometry for the planning model.
pub trait RoadModel<T> {
    fn road_point(&self, s: T) -> RoadPoint<T>;
}

/// Flat road with constant curvature; handy in tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRoad<T> {
    pub kappa: T,
}

impl<T: Real> RoadModel<T> for ConstantRoad<T> {
    fn road_point(&self, _s: T) -> RoadPoint<T> {
        RoadPoint::flat(self.kappa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment<T> {
    s0: T,
    len: T,
    kappa: T,
    x0: T,
    y0: T,
    psi0: T,
}

impl<T: Real> Segment<T> {
    /// Pose at arc length `t` into the segment.
    fn pose(&self, t: T) -> (T, T, T) {
        let psi = self.psi0 + self.kappa * t;
        if self.kappa.abs() < real(1e-9) {
            (
                self.x0 + t * self.psi0.cos(),
                self.y0 + t * self.psi0.sin(),
                psi,
            )
        } else {
            let inv_k = T::one() / self.kappa;
            (
                self.x0 + inv_k * (psi.sin() - self.psi0.sin()),
                self.y0 - inv_k * (psi.cos() - self.psi0.cos()),
                psi,
            )
        }
    }

    /// Closest-point parameter for `(px, py)`, clamped into the segment.
    fn project(&self, px: T, py: T) -> T {
        let zero = T::zero();
        if self.kappa.abs() < real(1e-9) {
            let (tx, ty) = (self.psi0.cos(), self.psi0.sin());
            let t = (px - self.x0) * tx + (py - self.y0) * ty;
            return t.max(zero).min(self.len);
        }
        let inv_k = T::one() / self.kappa;
        // Center of the arc sits one radius along the left normal.
        let cx = self.x0 - inv_k * self.psi0.sin();
        let cy = self.y0 + inv_k * self.psi0.cos();
        let beta = (py - cy).atan2(px - cx);
        let half_pi = T::pi() * real(0.5);
        let psi_star = if self.kappa > zero {
            beta + half_pi
        } else {
            beta - half_pi
        };
        // Wrap the swept angle into the direction of travel.
        let two_pi = T::two_pi();
        let mut sweep = psi_star - self.psi0;
        sweep -= (sweep / two_pi).floor() * two_pi;
        if self.kappa < zero {
            sweep -= two_pi;
        }
        let t = sweep / self.kappa;
        // Beyond the end: compare against both endpoints.
        if t <= self.len {
            return t.max(zero);
        }
        let (ex, ey, _) = self.pose(self.len);
        let d_end = (px - ex) * (px - ex) + (py - ey) * (py - ey);
        let d_start = (px - self.x0) * (px - self.x0) + (py - self.y0) * (py - self.y0);
        if d_end <= d_start {
            self.len
        } else {
            zero
        }
    }
}

/// Track centerline with lane geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Track<T> {
    segments: Vec<Segment<T>>,
    length: T,
    pub lane_width: T,
}

impl<T: Real> Track<T> {
    /// Build from piecewise-constant curvature rows `(s_start, kappa)`.
    /// The first row must start at `s = 0`; rows must be increasing and
    /// stay within the track length.
    pub fn from_curvature(rows: &[(T, T)], length: T, lane_width: T) -> Result<Self, String> {
        if rows.is_empty() {
            return Err("track needs at least one curvature row".into());
        }
        if rows[0].0 != T::zero() {
            return Err("first curvature row must start at s = 0".into());
        }
        if length <= T::zero() || lane_width <= T::zero() {
            return Err("track length and lane width must be > 0".into());
        }
        for pair in rows.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err("curvature rows must have increasing s".into());
            }
        }
        if rows.last().unwrap().0 >= length {
            return Err("curvature row starts beyond track length".into());
        }
        let mut segments = Vec::with_capacity(rows.len());
        let (mut x, mut y, mut psi) = (T::zero(), T::zero(), T::zero());
        for (i, &(s0, kappa)) in rows.iter().enumerate() {
            let s1 = if i + 1 < rows.len() { rows[i + 1].0 } else { length };
            let seg = Segment {
                s0,
                len: s1 - s0,
                kappa,
                x0: x,
                y0: y,
                psi0: psi,
            };
            let (nx, ny, npsi) = seg.pose(seg.len);
            x = nx;
            y = ny;
            psi = npsi;
            segments.push(seg);
        }
        Ok(Self {
            segments,
            length,
            lane_width,
        })
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn half_width(&self) -> T {
        self.lane_width * real(0.5)
    }

    /// The `(s_start, kappa)` rows this track was built from.
    pub fn curvature_rows(&self) -> Vec<(T, T)> {
        self.segments.iter().map(|seg| (seg.s0, seg.kappa)).collect()
    }

    pub fn kappa_at(&self, s: T) -> T {
        if s < T::zero() || s > self.length {
            return T::zero();
        }
        let mut kappa = self.segments[0].kappa;
        for seg in &self.segments {
            if s >= seg.s0 {
                kappa = seg.kappa;
            } else {
                break;
            }
        }
        kappa
    }

    /// Centerline pose `(x, y, psi)` at arc length `s`, extending straight
    /// beyond both ends.
    pub fn pose_at(&self, s: T) -> (T, T, T) {
        if s < T::zero() {
            let seg = &self.segments[0];
            let (tx, ty) = (seg.psi0.cos(), seg.psi0.sin());
            return (seg.x0 + s * tx, seg.y0 + s * ty, seg.psi0);
        }
        for seg in &self.segments {
            if s <= seg.s0 + seg.len {
                return seg.pose(s - seg.s0);
            }
        }
        let seg = self.segments.last().unwrap();
        let (ex, ey, epsi) = seg.pose(seg.len);
        let t = s - self.length;
        (ex + t * epsi.cos(), ey + t * epsi.sin(), epsi)
    }

    /// Map road-aligned coordinates `(s, d)` to the cartesian plane.
    pub fn to_cartesian(&self, s: T, d: T) -> (T, T) {
        let (x, y, psi) = self.pose_at(s);
        (x - d * psi.sin(), y + d * psi.cos())
    }

    /// Project a cartesian point onto the centerline, returning
    /// `(s, d, psi_c)`. Exact per segment; the straight end extensions
    /// keep the projection defined slightly off the track.
    pub fn project(&self, px: T, py: T) -> (T, T, T) {
        let mut best: Option<(T, T, T, T)> = None;
        let mut consider = |s: T, foot: (T, T, T)| {
            let (fx, fy, psi) = foot;
            let dx = px - fx;
            let dy = py - fy;
            let dist2 = dx * dx + dy * dy;
            let d = -dx * psi.sin() + dy * psi.cos();
            if best.map_or(true, |(bd, _, _, _)| dist2 < bd) {
                best = Some((dist2, s, d, psi));
            }
        };
        for seg in &self.segments {
            let t = seg.project(px, py);
            consider(seg.s0 + t, seg.pose(t));
        }
        // Straight extensions beyond both ends.
        let ext = real::<T>(200.0);
        let first = &self.segments[0];
        let (tx, ty) = (first.psi0.cos(), first.psi0.sin());
        let t0 = ((px - first.x0) * tx + (py - first.y0) * ty).max(-ext).min(T::zero());
        consider(
            t0,
            (first.x0 + t0 * tx, first.y0 + t0 * ty, first.psi0),
        );
        let last = self.segments.last().unwrap();
        let (ex, ey, epsi) = last.pose(last.len);
        let (tx, ty) = (epsi.cos(), epsi.sin());
        let t1 = ((px - ex) * tx + (py - ey) * ty).max(T::zero()).min(ext);
        consider(self.length + t1, (ex + t1 * tx, ey + t1 * ty, epsi));

        let (_, s, d, psi) = best.expect("track has segments");
        (s, d, psi)
    }
}

impl<T: Real> RoadModel<T> for Track<T> {
    fn road_point(&self, s: T) -> RoadPoint<T> {
        RoadPoint::flat(self.kappa_at(s))
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::two_pi();
    let mut w = a - (a / two_pi).round() * two_pi;
    if w <= -T::pi() {
        w += two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn arc_track() -> Track<f64> {
        // 40 m straight, quarter arc of radius 20 (left), 20 m straight.
        let arc_len = 20.0 * std::f64::consts::FRAC_PI_2;
        Track::from_curvature(&[(0.0, 0.0), (40.0, 0.05), (40.0 + arc_len, 0.0)], 100.0, 4.5)
            .unwrap()
    }

    #[test]
    fn curvature_lookup() {
        let t = arc_track();
        assert_eq!(t.kappa_at(10.0), 0.0);
        assert_eq!(t.kappa_at(50.0), 0.05);
        assert_eq!(t.kappa_at(95.0), 0.0);
        assert_eq!(t.kappa_at(-5.0), 0.0);
    }

    #[test]
    fn pose_continuity_across_joints() {
        let t = arc_track();
        for &s in &[39.999, 40.001, 71.4, 71.42] {
            let (x, y, _) = t.pose_at(s);
            let (x2, y2, _) = t.pose_at(s + 0.002);
            let step = ((x2 - x).powi(2) + (y2 - y).powi(2)).sqrt();
            assert_abs_diff_eq!(step, 0.002, epsilon = 1e-6);
        }
    }

    #[test]
    fn quarter_arc_turns_ninety_degrees() {
        let t = arc_track();
        let arc_len = 20.0 * std::f64::consts::FRAC_PI_2;
        let (_, _, psi) = t.pose_at(40.0 + arc_len);
        assert_relative_eq!(psi, std::f64::consts::FRAC_PI_2, max_relative = 1e-9);
    }

    #[test]
    fn projection_inverts_mapping() {
        let t = arc_track();
        for &s in &[0.0, 12.3, 40.0, 47.7, 63.1, 71.5, 88.0] {
            for &d in &[-2.0, -0.5, 0.0, 1.2, 2.2] {
                let (x, y) = t.to_cartesian(s, d);
                let (s2, d2, _) = t.project(x, y);
                assert_abs_diff_eq!(s2, s, epsilon = 1e-6);
                assert_abs_diff_eq!(d2, d, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn projection_beyond_ends_uses_extensions() {
        let t = arc_track();
        let (x, y) = t.to_cartesian(-3.0, 0.7);
        let (s, d, _) = t.project(x, y);
        assert_abs_diff_eq!(s, -3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(d, 0.7, epsilon = 1e-6);
        let (x, y) = t.to_cartesian(104.0, -1.0);
        let (s, d, _) = t.project(x, y);
        assert_abs_diff_eq!(s, 104.0, epsilon = 1e-6);
        assert_abs_diff_eq!(d, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn right_turn_projection() {
        let t = Track::from_curvature(&[(0.0, 0.0), (10.0, -0.1)], 25.0, 4.0).unwrap();
        let (x, y) = t.to_cartesian(18.0, 0.5);
        let (s, d, _) = t.project(x, y);
        assert_abs_diff_eq!(s, 18.0, epsilon = 1e-6);
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-3.0 * std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.3), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn validation_errors() {
        assert!(Track::<f64>::from_curvature(&[], 10.0, 4.0).is_err());
        assert!(Track::from_curvature(&[(1.0, 0.0)], 10.0, 4.0).is_err());
        assert!(Track::from_curvature(&[(0.0, 0.0), (12.0, 0.1)], 10.0, 4.0).is_err());
        assert!(Track::from_curvature(&[(0.0, 0.0), (5.0, 0.1), (3.0, 0.0)], 10.0, 4.0).is_err());
    }
}
