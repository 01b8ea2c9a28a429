//! Writes synthetic scenes in KITTI layout.

use std::path::Path;

use nalgebra::Matrix3x4;
use rayon::prelude::*;

use crossfuse_core::scene::{generate_scene, serialize_labels, write_bin_points, KittiCalib, SceneConfig, SceneSample};

use crate::harness::stream;
use crate::output::{ensure_dir, write_text};
use crate::CliError;

pub const SUMMARY_HEADER: [&str; 6] = ["scene", "seed", "stream", "objects", "points", "foreground_points"];

/// Calibration whose `P2` is the scene camera; points are already in the
/// camera frame, so rectification and extrinsics are identities.
pub fn scene_calib(sample: &SceneSample) -> KittiCalib {
    let m = sample.calib.matrix();
    KittiCalib::from_camera(Matrix3x4::from_fn(|r, c| m[r][c]))
}

/// Generates scene `i` and writes `calib/`, `label_2/` and `velodyne/`
/// files named by the zero-padded index.
pub fn write_scene(cfg: &SceneConfig, seed: u64, i: usize, out: &Path) -> Result<Vec<String>, CliError> {
    let sample = generate_scene(cfg, seed, stream::SCENE + i as u64)?;
    let name = format!("{i:06}");
    write_text(&out.join("calib").join(format!("{name}.txt")), &scene_calib(&sample).serialize())?;
    write_text(&out.join("label_2").join(format!("{name}.txt")), &serialize_labels(&sample.labels()))?;
    write_bin_points(&out.join("velodyne").join(format!("{name}.bin")), &sample.points)?;
    Ok(vec![
        i.to_string(),
        seed.to_string(),
        sample.stream.to_string(),
        sample.objects.len().to_string(),
        sample.points.len().to_string(),
        sample.point_labels.iter().filter(|l| l.is_some()).count().to_string(),
    ])
}

pub fn run(cfg: &SceneConfig, seed: u64, scenes: usize, out: &Path) -> Result<Vec<Vec<String>>, CliError> {
    for sub in ["calib", "label_2", "velodyne"] {
        ensure_dir(&out.join(sub))?;
    }
    (0..scenes).into_par_iter().map(|i| write_scene(cfg, seed, i, out)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossfuse_core::scene::{parse_labels, read_bin_points};

    #[test]
    fn written_scenes_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let rows = run(&cfg, 4, 2, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        let sample = generate_scene(&cfg, 4, 1).unwrap();
        let pts = read_bin_points(&dir.path().join("velodyne/000001.bin")).unwrap();
        assert_eq!(pts.len(), sample.points.len());
        let text = std::fs::read_to_string(dir.path().join("label_2/000001.txt")).unwrap();
        assert_eq!(parse_labels(&text).unwrap().len(), sample.objects.len());
        let calib = std::fs::read_to_string(dir.path().join("calib/000001.txt")).unwrap();
        let parsed = KittiCalib::parse(&calib).unwrap();
        assert_eq!(parsed.camera_projection((160, 48)).unwrap(), sample.calib);
    }
}
