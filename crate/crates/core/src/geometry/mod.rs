//! Camera projection, grid sampling, oriented boxes and their overlaps, and
//! bin-based box encoding.

mod bins;
mod boxes;

pub use bins::{decode_bins, dim, encode_bins, BinConfig, BinEncoding};
pub use boxes::{
    clip_convex, footprint_intersection, iou, iou_3d, iou_bev, normalize_angle, polygon_area,
    Box3D, IouKind,
};

use crate::error::{Error, Result};
use crate::numerics::{DiffArray, Tape};

/// A 3×4 projection from homogeneous sensor-frame points to image-plane
/// homogeneous coordinates, plus the image size in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibMatrix {
    p: [[f64; 4]; 3],
    image_size: (u32, u32),
}

impl CalibMatrix {
    pub fn new(p: [[f64; 4]; 3], image_size: (u32, u32)) -> Result<Self> {
        if p[2].iter().all(|&v| v == 0.0) {
            return Err(Error::OutOfRange("projection row 3 is all zero".into()));
        }
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("projection matrix must be finite".into()));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::OutOfRange(format!("image size {image_size:?} must be positive")));
        }
        Ok(Self { p, image_size })
    }

    /// Pinhole camera looking down `+z` with no rotation.
    pub fn pinhole(focal: f64, principal: (f64, f64), image_size: (u32, u32)) -> Result<Self> {
        Self::new(
            [
                [focal, 0.0, principal.0, 0.0],
                [0.0, focal, principal.1, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            image_size,
        )
    }

    pub fn matrix(&self) -> &[[f64; 4]; 3] {
        &self.p
    }

    /// `(width, height)` in pixels.
    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// Homogeneous image coordinates `(u·d, v·d, d)` of a point.
    pub fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        let h = [point[0], point[1], point[2], 1.0];
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&self.p) {
            *o = row.iter().zip(&h).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn contains_pixel(&self, uv: [f64; 2]) -> bool {
        let (w, h) = self.image_size;
        uv[0] >= 0.0 && uv[0] < w as f64 && uv[1] >= 0.0 && uv[1] < h as f64
    }
}

/// Projected image coordinates and the frustum mask of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    /// True iff depth is positive and `(u, v)` falls inside the image.
    pub in_frustum: Vec<bool>,
}

/// Projects points with a perspective divide. Points at or behind the camera
/// plane get `(0, 0)` coordinates and a false mask.
pub fn project_points(points: &[[f64; 3]], calib: &CalibMatrix) -> Projection {
    let mut uv = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    let mut mask = Vec::with_capacity(points.len());
    for &p in points {
        let [a, b, d] = calib.apply(p);
        if d > 0.0 {
            let q = [a / d, b / d];
            mask.push(calib.contains_pixel(q));
            uv.push(q);
        } else {
            mask.push(false);
            uv.push([0.0, 0.0]);
        }
        depth.push(d);
    }
    Projection { uv, depth, in_frustum: mask }
}

/// Bilinear lookup of an `H×W×C` feature map at `N×2` continuous `(u, v)`
/// coordinates. Texel `(row, col)` sits at `(u, v) = (col, row)`; taps
/// outside the map read as zero. Gradients reach the map and coordinates.
pub fn bilinear_sample(tape: &mut Tape, map: &DiffArray, coords: &DiffArray) -> Result<DiffArray> {
    tape.bilinear_sample(map, coords)
}
