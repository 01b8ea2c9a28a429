use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CalibMatrix};

fn parse_error(key: Option<&str>, line: Option<usize>, detail: impl Into<String>) -> Error {
    Error::Parse { key: key.map(str::to_owned), line, detail: detail.into() }
}

/// C-style `%.12e`: mantissa with 12 decimals, signed two-digit exponent.
fn fmt_sci(v: f64) -> String {
    let s = format!("{v:.12e}");
    let (mant, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

/// Camera calibration of one KITTI frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiCalib {
    /// Rectified camera to left color image.
    pub p2: Matrix3x4<f64>,
    /// Rectifying rotation of the reference camera.
    pub r0_rect: Matrix3<f64>,
    /// LiDAR to reference camera.
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

impl KittiCalib {
    /// Parses `KEY: v1 v2 ...` lines. Keys other than `P2`, `R0_rect` and
    /// `Tr_velo_to_cam` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p2: Option<Vec<f64>> = None;
        let mut r0: Option<Vec<f64>> = None;
        let mut tr: Option<Vec<f64>> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, rest)) = line.split_once(':') else {
                return Err(parse_error(None, Some(line_no), format!("expected `KEY: values`, got {line:?}")));
            };
            let key = key.trim();
            let (slot, want) = match key {
                "P2" => (&mut p2, 12),
                "R0_rect" => (&mut r0, 9),
                "Tr_velo_to_cam" => (&mut tr, 12),
                _ => continue,
            };
            if slot.is_some() {
                return Err(parse_error(Some(key), Some(line_no), "duplicate key"));
            }
            let values = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_error(Some(key), Some(line_no), format!("invalid number {tok:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != want {
                return Err(parse_error(
                    Some(key),
                    Some(line_no),
                    format!("expected {want} values, found {}", values.len()),
                ));
            }
            *slot = Some(values);
        }
        let need = |v: Option<Vec<f64>>, key: &str| v.ok_or_else(|| parse_error(Some(key), None, "missing key"));
        let p2 = need(p2, "P2")?;
        let r0 = need(r0, "R0_rect")?;
        let tr = need(tr, "Tr_velo_to_cam")?;
        Ok(Self {
            p2: Matrix3x4::from_row_slice(&p2),
            r0_rect: Matrix3::from_row_slice(&r0),
            tr_velo_to_cam: Matrix3x4::from_row_slice(&tr),
        })
    }

    /// The three matrices in KITTI layout, row-major, `%.12e` formatted.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, rows: usize, cols: usize, get: &dyn Fn(usize, usize) -> f64| {
            let vals: Vec<String> = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| fmt_sci(get(r, c)))
                .collect();
            writeln!(out, "{key}: {}", vals.join(" ")).expect("write to string");
        };
        line("P2", 3, 4, &|r, c| self.p2[(r, c)]);
        line("R0_rect", 3, 3, &|r, c| self.r0_rect[(r, c)]);
        line("Tr_velo_to_cam", 3, 4, &|r, c| self.tr_velo_to_cam[(r, c)]);
        out
    }

    /// `[R0_rect 0; 0 1] · [Tr_velo_to_cam; 0 0 0 1]`: LiDAR to rectified camera.
    pub fn velo_to_rect(&self) -> Matrix4<f64> {
        let mut r0 = Matrix4::identity();
        r0.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r0_rect);
        let mut tr = Matrix4::identity();
        tr.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.tr_velo_to_cam);
        r0 * tr
    }

    pub fn lidar_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.velo_to_rect() * Vector4::new(p[0], p[1], p[2], 1.0);
        [q[0], q[1], q[2]]
    }

    /// `P2 · [R0_rect 0; 0 1] · [Tr_velo_to_cam; 0 0 0 1]`, mapping LiDAR
    /// points to the left color image.
    pub fn lidar_projection(&self, image_size: (u32, u32)) -> Result<CalibMatrix> {
        let p = self.p2 * self.velo_to_rect();
        CalibMatrix::new(rows_of(&p), image_size)
    }

    /// `P2` alone, mapping rectified camera points to the image.
    pub fn camera_projection(&self, image_size: (u32, u32)) -> Result<CalibMatrix> {
        CalibMatrix::new(rows_of(&self.p2), image_size)
    }

    /// Identity rectification and extrinsics around the given `P2`.
    pub fn from_camera(p2: Matrix3x4<f64>) -> Self {
        let mut tr = Matrix3x4::zeros();
        tr.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        Self { p2, r0_rect: Matrix3::identity(), tr_velo_to_cam: tr }
    }
}

/// Parses a calibration file into the composed LiDAR-to-image projection.
pub fn parse_calib(text: &str, image_size: (u32, u32)) -> Result<CalibMatrix> {
    KittiCalib::parse(text)?.lidar_projection(image_size)
}

fn rows_of(p: &Matrix3x4<f64>) -> [[f64; 4]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| p[(r, c)]))
}

/// One object annotation line.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub category: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// `left, top, right, bottom` in pixels.
    pub bbox: [f64; 4],
    /// `h, w, l` in meters.
    pub dimensions: [f64; 3],
    /// Bottom-center `x, y, z` in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

pub const DONT_CARE: &str = "DontCare";

impl KittiLabel {
    fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 {
            return Err(parse_error(None, Some(line_no), format!("expected 15 fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(Some(name), Some(line_no), format!("invalid number {:?}", fields[i])))
        };
        let occluded = fields[2]
            .parse::<i32>()
            .map_err(|_| parse_error(Some("occluded"), Some(line_no), format!("invalid integer {:?}", fields[2])))?;
        Ok(Self {
            category: fields[0].to_owned(),
            truncated: num(1, "truncated")?,
            occluded,
            alpha: num(3, "alpha")?,
            bbox: [num(4, "bbox")?, num(5, "bbox")?, num(6, "bbox")?, num(7, "bbox")?],
            dimensions: [num(8, "dimensions")?, num(9, "dimensions")?, num(10, "dimensions")?],
            location: [num(11, "location")?, num(12, "location")?, num(13, "location")?],
            rotation_y: num(14, "rotation_y")?,
        })
    }

    fn validate(&self, line_no: usize) -> Result<()> {
        if self.dimensions.iter().any(|d| *d <= 0.0) {
            return Err(parse_error(Some("dimensions"), Some(line_no), "sizes must be positive"));
        }
        if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&self.rotation_y) {
            return Err(parse_error(Some("rotation_y"), Some(line_no), "outside [-pi, pi]"));
        }
        Ok(())
    }

    /// Center-based box; KITTI's `y` points down, so the center sits `h/2`
    /// above the annotated bottom.
    pub fn to_box(&self) -> Result<Box3D> {
        let [h, w, l] = self.dimensions;
        let [x, y, z] = self.location;
        Box3D::new([x, y - h / 2.0, z], [h, w, l], self.rotation_y)
    }

    pub fn from_box(category: &str, b: &Box3D, bbox: [f64; 4]) -> Self {
        let alpha = crate::geometry::normalize_angle(b.theta - b.x.atan2(b.z));
        Self {
            category: category.to_owned(),
            truncated: 0.0,
            occluded: 0,
            alpha,
            bbox,
            dimensions: [b.h, b.w, b.l],
            location: [b.x, b.y + b.h / 2.0, b.z],
            rotation_y: b.theta,
        }
    }

    pub fn serialize(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let mut parts = vec![self.category.clone(), f(self.truncated), self.occluded.to_string(), f(self.alpha)];
        parts.extend(self.bbox.iter().map(|v| f(*v)));
        parts.extend(self.dimensions.iter().map(|v| f(*v)));
        parts.extend(self.location.iter().map(|v| f(*v)));
        parts.push(f(self.rotation_y));
        parts.join(" ")
    }
}

/// Parses a label file, dropping `DontCare` regions. Blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let label = KittiLabel::parse_line(line, idx + 1)?;
        if label.category == DONT_CARE {
            continue;
        }
        label.validate(idx + 1)?;
        out.push(label);
    }
    Ok(out)
}

pub fn serialize_labels(labels: &[KittiLabel]) -> String {
    labels.iter().map(|l| l.serialize() + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_points;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SAMPLE: &str = "\
P0: 7.215377000000e+02 0.000000000000e+00 6.095593000000e+02 0.000000000000e+00 0.000000000000e+00 7.215377000000e+02 1.728540000000e+02 0.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00
P2: 7.215377000000e+02 0.000000000000e+00 6.095593000000e+02 4.485728000000e+01 0.000000000000e+00 7.215377000000e+02 1.728540000000e+02 2.163791000000e-01 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 2.745884000000e-03
R0_rect: 9.999239000000e-01 9.837760000000e-03 -7.445048000000e-03 -9.869795000000e-03 9.999421000000e-01 -4.278459000000e-03 7.402527000000e-03 4.351614000000e-03 9.999631000000e-01
Tr_velo_to_cam: 7.533745000000e-03 -9.999714000000e-01 -6.166020000000e-04 -4.069766000000e-03 1.480249000000e-02 7.280733000000e-04 -9.998902000000e-01 -7.631618000000e-02 9.998621000000e-01 7.523790000000e-03 1.480755000000e-02 -2.717806000000e-01
Tr_imu_to_velo: 9.999976000000e-01 7.553071000000e-04 -2.035826000000e-03 -8.086759000000e-01 -7.854027000000e-04 9.998898000000e-01 -1.482298000000e-02 3.195559000000e-01 2.024406000000e-03 1.482454000000e-02 9.998881000000e-01 -7.997231000000e-01
";

    #[test]
    fn p2_is_row_major() {
        let c = KittiCalib::parse(SAMPLE).unwrap();
        assert_eq!(c.p2[(0, 0)], 721.5377);
        assert_eq!(c.p2[(0, 2)], 609.5593);
        assert_eq!(c.p2[(0, 3)], 44.85728);
        assert_eq!(c.p2[(1, 2)], 172.854);
        assert_eq!(c.p2[(2, 3)], 2.745884e-3);
        assert_eq!(c.r0_rect[(2, 0)], 7.402527e-3);
        assert_eq!(c.tr_velo_to_cam[(0, 1)], -0.9999714);
    }

    #[test]
    fn identity_extrinsics_compose_to_p2() {
        let mut c = KittiCalib::parse(SAMPLE).unwrap();
        c = KittiCalib::from_camera(c.p2);
        let p = c.lidar_projection((1242, 375)).unwrap();
        assert_eq!(p.matrix(), &rows_of(&c.p2));
    }

    fn chain(c: &KittiCalib, p: [f64; 3]) -> [f64; 2] {
        // independent 4×4 chain with plain arrays
        let homogeneous = |i: usize, j: usize, inner: f64| match (i, j) {
            (3, 3) => 1.0,
            (3, _) => 0.0,
            _ => inner,
        };
        let r0: [[f64; 4]; 4] = std::array::from_fn(|i| {
            std::array::from_fn(|j| homogeneous(i, j, if j < 3 { c.r0_rect[(i.min(2), j)] } else { 0.0 }))
        });
        let tr: [[f64; 4]; 4] =
            std::array::from_fn(|i| std::array::from_fn(|j| homogeneous(i, j, c.tr_velo_to_cam[(i.min(2), j)])));
        let x = [p[0], p[1], p[2], 1.0];
        let mv = |m: &[[f64; 4]; 4], v: [f64; 4]| -> [f64; 4] {
            std::array::from_fn(|i| (0..4).map(|j| m[i][j] * v[j]).sum())
        };
        let cam = mv(&r0, mv(&tr, x));
        let img: [f64; 3] = std::array::from_fn(|i| (0..4).map(|j| c.p2[(i, j)] * cam[j]).sum());
        [img[0] / img[2], img[1] / img[2]]
    }

    #[test]
    fn rotated_calib_matches_matrix_chain() {
        let mut c = KittiCalib::parse(SAMPLE).unwrap();
        // a known 10° yaw inside the rectification
        let (s, co) = 10f64.to_radians().sin_cos();
        c.r0_rect = Matrix3::new(co, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, co);
        let proj = c.lidar_projection((1242, 375)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| [rng.random_range(5.0..60.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..1.0)])
            .collect();
        let got = project_points(&pts, &proj);
        for (p, uv) in pts.iter().zip(&got.uv) {
            let want = chain(&c, *p);
            assert!((uv[0] - want[0]).abs() < 1e-9 && (uv[1] - want[1]).abs() < 1e-9);
        }
        // forward-facing LiDAR points land in front of the camera
        assert!(got.depth.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn calib_round_trip() {
        let c = KittiCalib::parse(SAMPLE).unwrap();
        let text = c.serialize();
        assert!(text.starts_with("P2: 7.215377000000e+02 0.000000000000e+00"));
        assert_eq!(KittiCalib::parse(&text).unwrap(), c);
    }

    #[test]
    fn calib_errors_name_key_and_line() {
        let missing = SAMPLE.lines().filter(|l| !l.starts_with("R0_rect")).collect::<Vec<_>>().join("\n");
        assert_eq!(
            KittiCalib::parse(&missing),
            Err(Error::Parse { key: Some("R0_rect".into()), line: None, detail: "missing key".into() })
        );
        let short = SAMPLE.replace("R0_rect: 9.999239000000e-01 ", "R0_rect: ");
        match KittiCalib::parse(&short) {
            Err(Error::Parse { key: Some(k), line: Some(3), .. }) => assert_eq!(k, "R0_rect"),
            other => panic!("{other:?}"),
        }
        let bad = SAMPLE.replace("4.485728000000e+01", "4.48x");
        assert!(matches!(KittiCalib::parse(&bad), Err(Error::Parse { line: Some(2), .. })));
        assert!(matches!(KittiCalib::parse("P2 1 2 3"), Err(Error::Parse { line: Some(1), .. })));
    }

    const LABELS: &str = "\
Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Pedestrian 0.00 2 0.21 423.17 173.67 433.17 224.03 1.73 0.57 0.68 -5.82 1.73 23.62 -0.02
DontCare -1 -1 -10 0.00 0.00 0.00 0.00 -1 -1 -1 -1000 -1000 -1000 -10
";

    #[test]
    fn labels_parse_and_drop_dont_care() {
        assert!(parse_labels("").unwrap().is_empty());
        let labels = parse_labels(LABELS).unwrap();
        assert_eq!(labels.len(), 2);
        let car = &labels[0];
        assert_eq!(car.category, "Car");
        assert_eq!(car.dimensions, [1.65, 1.67, 3.64]);
        assert_eq!(car.location, [-0.65, 1.71, 46.70]);
        assert_eq!(car.rotation_y, -1.59);
        assert_eq!(labels[1].occluded, 2);
        let b = car.to_box().unwrap();
        assert!((b.y - (1.71 - 0.825)).abs() < 1e-12);
        assert_eq!(b.size(), [1.65, 1.67, 3.64]);
    }

    #[test]
    fn labels_round_trip_at_six_decimals() {
        let labels = parse_labels(LABELS).unwrap();
        let again = parse_labels(&serialize_labels(&labels)).unwrap();
        assert_eq!(again, labels);
    }

    #[test]
    fn label_errors_carry_line_numbers() {
        let text = "Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1 10 0\nCar 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1 10\n";
        assert!(matches!(parse_labels(text), Err(Error::Parse { line: Some(2), .. })));
        let bad = "Car 0 0 0 1 2 3 4 -1.5 1.6 3.9 0 1 10 0\n";
        assert!(matches!(parse_labels(bad), Err(Error::Parse { line: Some(1), .. })));
        let angle = "Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1 10 3.5\n";
        assert!(matches!(parse_labels(angle), Err(Error::Parse { .. })));
        let word = "Car 0 x 0 1 2 3 4 1.5 1.6 3.9 0 1 10 0\n";
        assert!(matches!(parse_labels(word), Err(Error::Parse { key: Some(_), line: Some(1), .. })));
    }

    #[test]
    fn box_label_conversion_round_trips() {
        let b = Box3D::new([2.0, 0.8, 20.0], [1.5, 1.6, 3.9], 0.4).unwrap();
        let l = KittiLabel::from_box("Car", &b, [0.0; 4]);
        let back = l.to_box().unwrap();
        for (p, q) in [(back.x, b.x), (back.y, b.y), (back.z, b.z), (back.theta, b.theta)] {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn scientific_format_is_c_style() {
        assert_eq!(fmt_sci(721.5377), "7.215377000000e+02");
        assert_eq!(fmt_sci(-0.0027), "-2.700000000000e-03");
        assert_eq!(fmt_sci(0.0), "0.000000000000e+00");
    }
}
