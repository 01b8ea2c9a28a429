use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Oriented 3D box: center `(x, y, z)`, size `(h, w, l)`, heading `theta`.
///
/// `y` is the vertical axis, so the ground-plane footprint lives in `x–z`.
/// Heading rotates about the vertical axis with `l` along the heading
/// direction `(cos θ, -sin θ)` in `(x, z)`, the KITTI camera convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], theta: f64) -> Result<Self> {
        let [h, w, l] = size;
        if !(h > 0.0 && w > 0.0 && l > 0.0) {
            return Err(Error::OutOfRange(format!("box size must be positive, got {size:?}")));
        }
        if !center.iter().chain(&size).all(|v| v.is_finite()) || !theta.is_finite() {
            return Err(Error::OutOfRange("box parameters must be finite".into()));
        }
        Ok(Self {
            x: center[0],
            y: center[1],
            z: center[2],
            h,
            w,
            l,
            theta: normalize_angle(theta),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.h, self.w, self.l]
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    /// Vertical extent `(bottom, top)` along `y`.
    pub fn y_range(&self) -> (f64, f64) {
        (self.y - 0.5 * self.h, self.y + 0.5 * self.h)
    }

    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.theta.sin_cos();
        ([c, -s], [s, c])
    }

    /// Ground-plane corners in `(x, z)`, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (e1, e2) = self.axes();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let corner = |a: f64, b: f64| {
            [
                self.x + a * hl * e1[0] + b * hw * e2[0],
                self.z + a * hl * e1[1] + b * hw * e2[1],
            ]
        };
        [corner(1.0, -1.0), corner(1.0, 1.0), corner(-1.0, 1.0), corner(-1.0, -1.0)]
    }

    /// All eight corners: the footprint at the bottom, then at the top.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint();
        let (y0, y1) = self.y_range();
        let mut out = [[0.0; 3]; 8];
        for (i, p) in fp.iter().enumerate() {
            out[i] = [p[0], y0, p[1]];
            out[i + 4] = [p[0], y1, p[1]];
        }
        out
    }

    /// Frame coordinates of a box-local offset from the center, given along
    /// the heading, the vertical, and across the heading.
    pub fn local_to_frame(&self, local: [f64; 3]) -> [f64; 3] {
        let (e1, e2) = self.axes();
        [
            self.x + local[0] * e1[0] + local[2] * e2[0],
            self.y + local[1],
            self.z + local[0] * e1[1] + local[2] * e2[1],
        ]
    }

    /// Whether `p` lies inside the box, with `eps` slack on every face.
    pub fn contains(&self, p: [f64; 3], eps: f64) -> bool {
        let (y0, y1) = self.y_range();
        if p[1] < y0 - eps || p[1] > y1 + eps {
            return false;
        }
        let (e1, e2) = self.axes();
        let d = [p[0] - self.x, p[2] - self.z];
        let a = d[0] * e1[0] + d[1] * e1[1];
        let b = d[0] * e2[0] + d[1] * e2[1];
        a.abs() <= 0.5 * self.l + eps && b.abs() <= 0.5 * self.w + eps
    }

    /// Rotates by `phi` about the vertical axis through the origin, then
    /// translates by `shift`.
    pub fn transformed(&self, phi: f64, shift: [f64; 3]) -> Self {
        let (s, c) = phi.sin_cos();
        let x = self.x * c + self.z * s;
        let z = -self.x * s + self.z * c;
        Self {
            x: x + shift[0],
            y: self.y + shift[1],
            z: z + shift[2],
            theta: normalize_angle(self.theta + phi),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IouKind {
    Bev,
    #[default]
    ThreeD,
}

impl std::str::FromStr for IouKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bev" => Ok(IouKind::Bev),
            "3d" => Ok(IouKind::ThreeD),
            other => Err(Error::OutOfRange(format!("unknown IoU kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for IouKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IouKind::Bev => "bev",
            IouKind::ThreeD => "3d",
        })
    }
}

pub fn iou(kind: IouKind, a: &Box3D, b: &Box3D) -> f64 {
    match kind {
        IouKind::Bev => iou_bev(a, b),
        IouKind::ThreeD => iou_3d(a, b),
    }
}

/// Area of the intersection of two box footprints.
pub fn footprint_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let r = a.l.hypot(a.w) * 0.5 + b.l.hypot(b.w) * 0.5;
    if (a.x - b.x).hypot(a.z - b.z) > r {
        return 0.0;
    }
    let clipped = clip_convex(&a.footprint(), &b.footprint());
    if clipped.len() < 3 {
        0.0
    } else {
        polygon_area(&clipped).abs()
    }
}

/// Bird's-eye-view IoU of the two rotated footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = footprint_intersection(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.y_range();
    let (b0, b1) = b.y_range();
    let overlap = a1.min(b1) - a0.max(b0);
    if overlap <= 0.0 {
        return 0.0;
    }
    let inter = footprint_intersection(a, b) * overlap;
    let union = a.volume() + b.volume() - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` against the convex `clip`
/// polygon. Both must be counter-clockwise.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.extend(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.extend(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom == 0.0 {
        return None;
    }
    let t = dp / denom;
    Some([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(x: f64, theta: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [1.0, 1.0, 1.0], theta).unwrap()
    }

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), -PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
        assert!((normalize_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(Box3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, -1.0, 1.0], 0.0).is_err());
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], [1.0; 3], 0.0).is_err());
    }

    #[test]
    fn footprint_is_counter_clockwise_with_heading_along_length() {
        let b = Box3D::new([1.0, 0.0, 2.0], [1.0, 2.0, 4.0], 0.0).unwrap();
        let fp = b.footprint();
        assert!((polygon_area(&fp) - 8.0).abs() < 1e-12);
        let xs: Vec<f64> = fp.iter().map(|p| p[0]).collect();
        assert!(xs.iter().any(|&x| (x - 3.0).abs() < 1e-12));
        let rotated = Box3D::new([0.0; 3], [1.0, 2.0, 4.0], 1.1).unwrap();
        assert!(polygon_area(&rotated.footprint()) > 0.0);
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = Box3D::new([3.0, 1.0, 20.0], [1.5, 1.6, 3.9], 0.7).unwrap();
        assert!((iou_bev(&b, &b) - 1.0).abs() < 1e-12);
        assert!((iou_3d(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_boxes_have_zero_iou() {
        let a = Box3D::new([0.0; 3], [1.0, 2.0, 4.0], 0.3).unwrap();
        let b = Box3D::new([10.0, 0.0, 0.0], [1.0, 2.0, 4.0], -0.3).unwrap();
        assert_eq!(iou_bev(&a, &b), 0.0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn offset_squares_and_cubes() {
        // 2×2 squares shifted by 1: intersection 2, union 6.
        let a = Box3D::new([0.0; 3], [1.0, 2.0, 2.0], 0.0).unwrap();
        let b = Box3D::new([1.0, 0.0, 0.0], [1.0, 2.0, 2.0], 0.0).unwrap();
        assert!((iou_bev(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        // unit cubes shifted by 0.5: intersection 0.5, union 1.5.
        assert!((iou_3d(&cube(0.0, 0.0), &cube(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_vertical_overlap_gives_zero_3d_iou() {
        let a = cube(0.0, 0.0);
        let b = Box3D { y: 1.0, ..a };
        assert!(iou_bev(&a, &b) > 0.99);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn rotated_square_inside_square() {
        // A unit square rotated 45° inside a 2×2 square: IoU = 1/4.
        let big = Box3D::new([0.0; 3], [1.0, 2.0, 2.0], 0.0).unwrap();
        let small = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], PI / 4.0).unwrap();
        assert!((iou_bev(&big, &small) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn contains_and_corners() {
        let b = Box3D::new([1.0, 0.5, 2.0], [1.0, 2.0, 4.0], 0.6).unwrap();
        for c in b.corners() {
            assert!(b.contains(c, 1e-9));
        }
        assert!(b.contains(b.center(), 0.0));
        assert!(!b.contains([1.0, 2.0, 2.0], 1e-9));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            -5.0..5.0f64,
            -1.0..1.0f64,
            -5.0..5.0f64,
            0.5..3.0f64,
            0.5..3.0f64,
            0.5..5.0f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, h, w, l, t)| Box3D::new([x, y, z], [h, w, l], t).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert!((iou_bev(&a, &b) - iou_bev(&b, &a)).abs() < 1e-9);
            prop_assert!((iou_3d(&a, &b) - iou_3d(&b, &a)).abs() < 1e-9);
        }

        #[test]
        fn iou_is_rigid_invariant(
            a in arb_box(),
            b in arb_box(),
            phi in -PI..PI,
            shift in prop::array::uniform3(-20.0..20.0f64),
        ) {
            let (ta, tb) = (a.transformed(phi, shift), b.transformed(phi, shift));
            prop_assert!((iou_bev(&a, &b) - iou_bev(&ta, &tb)).abs() < 1e-9);
            prop_assert!((iou_3d(&a, &b) - iou_3d(&ta, &tb)).abs() < 1e-9);
        }

        #[test]
        fn iou_3d_equals_bev_for_equal_vertical_extents(a in arb_box(), b in arb_box()) {
            let b = Box3D { y: a.y, h: a.h, ..b };
            let (i3, ib) = (iou_3d(&a, &b), iou_bev(&a, &b));
            prop_assert!(i3 <= ib + 1e-12);
            prop_assert!((i3 - ib).abs() < 1e-12);
        }

        #[test]
        fn iou_lies_in_unit_interval(a in arb_box(), b in arb_box()) {
            for v in [iou_bev(&a, &b), iou_3d(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
