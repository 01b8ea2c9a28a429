//! Scene ingestion and generation: KITTI calibration and label files, point
//! cloud I/O, cropping with fixed-size subsampling, and a seeded synthetic
//! scene generator.

mod io;
mod kitti;
mod synth;

pub use io::{parse_bin_points, read_bin_points, read_csv_points, read_points, write_bin_points, write_csv_points};
pub use kitti::{parse_calib, parse_labels, serialize_labels, KittiCalib, KittiLabel, DONT_CARE};
pub use synth::{
    generate_scene, point_labels, render_features, Category, FeatureGrid, SceneConfig, SceneObject, SceneSample,
    FEATURE_CHANNELS, LEVEL_STRIDES,
};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default number of points kept per scene.
pub const TARGET_POINTS: usize = 16384;

/// A LiDAR return in meters with its reflectance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub xyz: [f64; 3],
    pub intensity: f64,
}

impl Point {
    pub fn new(xyz: [f64; 3], intensity: f64) -> Self {
        Self { xyz, intensity }
    }
}

/// Closed axis-aligned crop box in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRanges {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Default for CropRanges {
    fn default() -> Self {
        Self { x: [-40.0, 40.0], y: [-1.0, 3.0], z: [0.0, 70.4] }
    }
}

impl CropRanges {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        [self.x, self.y, self.z]
            .iter()
            .zip(p)
            .all(|(r, v)| r[0] <= v && v <= r[1])
    }
}

/// Drops points outside `ranges`, then draws exactly `target` of the rest:
/// a uniform subsample without replacement when there are more, all of them
/// padded by draws with replacement when there are fewer. Kept points
/// retain their input order; padding is appended.
pub fn crop_and_subsample(points: &[Point], ranges: &CropRanges, target: usize, seed: u64) -> Result<Vec<Point>> {
    if target == 0 {
        return Err(Error::OutOfRange("target point count must be positive".into()));
    }
    let inside: Vec<Point> = points.iter().copied().filter(|p| ranges.contains(p.xyz)).collect();
    if inside.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inside.len();
    if n >= target {
        let mut keep = index::sample(&mut rng, n, target).into_vec();
        keep.sort_unstable();
        return Ok(keep.into_iter().map(|i| inside[i]).collect());
    }
    let pad: Vec<Point> = (0..target - n).map(|_| inside[rng.random_range(0..n)]).collect();
    Ok(inside.into_iter().chain(pad).collect())
}

/// Maps LiDAR points into the rectified camera frame, then crops and
/// subsamples them there.
pub fn crop_lidar(
    points: &[Point],
    calib: &KittiCalib,
    ranges: &CropRanges,
    target: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    let cam: Vec<Point> = points
        .iter()
        .map(|p| Point::new(calib.lidar_to_camera(p.xyz), p.intensity))
        .collect();
    crop_and_subsample(&cam, ranges, target, seed)
}
