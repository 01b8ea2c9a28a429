use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{KittiLabel, Point};
use crate::cdmp::LevelMap;
use crate::error::{Error, Result};
use crate::geometry::{footprint_intersection, project_points, Box3D, CalibMatrix};
use crate::numerics::DiffArray;

/// Strides of the four feature levels, finest first.
pub const LEVEL_STRIDES: [u32; 4] = [1, 2, 4, 8];
/// One-hot category channels followed by an objectness channel.
pub const FEATURE_CHANNELS: usize = Category::ALL.len() + 1;

/// Gap kept between box footprints during placement, meters.
const PLACEMENT_MARGIN: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Car,
    Pedestrian,
    Cyclist,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Car, Category::Pedestrian, Category::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "Car",
            Category::Pedestrian => "Pedestrian",
            Category::Cyclist => "Cyclist",
        }
    }

    /// `[min, max]` of `h, w, l` in meters.
    pub fn size_range(self) -> [[f64; 2]; 3] {
        match self {
            Category::Car => [[1.4, 1.7], [1.5, 1.9], [3.5, 4.5]],
            Category::Pedestrian => [[1.6, 1.9], [0.5, 0.8], [0.5, 1.0]],
            Category::Cyclist => [[1.5, 1.8], [0.5, 0.8], [1.5, 1.9]],
        }
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::OutOfRange(format!("unknown category {s:?}")))
    }
}

/// Synthetic scene parameters, read from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    pub points_per_object: usize,
    pub clutter_points: usize,
    /// Standard deviation of point jitter, meters.
    pub point_noise: f64,
    /// Standard deviation of feature-grid noise.
    pub feature_noise: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Largest `|x|` of a box center, meters.
    pub lateral_max: f64,
    /// Height of the ground plane along the downward `y` axis.
    pub ground_y: f64,
    /// Placement attempts per object and per clutter point.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects_min: 1,
            objects_max: 6,
            points_per_object: 200,
            clutter_points: 400,
            point_noise: 0.02,
            feature_noise: 0.1,
            image_width: 160,
            image_height: 48,
            focal: 93.0,
            depth_min: 12.0,
            depth_max: 50.0,
            lateral_max: 10.0,
            ground_y: 1.65,
            max_retries: 200,
        }
    }
}

macro_rules! config_keys {
    ($m:ident) => {
        $m!(
            objects_min,
            objects_max,
            points_per_object,
            clutter_points,
            point_noise,
            feature_noise,
            image_width,
            image_height,
            focal,
            depth_min,
            depth_max,
            lateral_max,
            ground_y,
            max_retries
        )
    };
}

impl SceneConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |key: Option<&str>, detail: String| Error::Parse {
                key: key.map(str::to_owned),
                line: Some(line_no),
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(None, format!("expected `key = value`, got {line:?}")))?;
            if seen.iter().any(|k| k == key) {
                return Err(err(Some(key), "duplicate key".into()));
            }
            macro_rules! assign {
                ($($f:ident),*) => {
                    match key {
                        $(stringify!($f) => {
                            cfg.$f = value
                                .parse()
                                .map_err(|_| err(Some(key), format!("invalid value {value:?}")))?;
                        })*
                        _ => return Err(err(Some(key), "unknown key".into())),
                    }
                };
            }
            config_keys!(assign);
            seen.push(key.to_owned());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in a fixed order; `parse` reads the output back exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($f:ident),*) => {
                $(writeln!(out, "{} = {}", stringify!($f), self.$f).expect("write to string");)*
            };
        }
        config_keys!(emit);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::OutOfRange(detail));
        if self.objects_min > self.objects_max {
            return bad(format!("objects_min {} exceeds objects_max {}", self.objects_min, self.objects_max));
        }
        for (name, v) in [("point_noise", self.point_noise), ("feature_noise", self.feature_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad(format!("focal {} must be positive", self.focal));
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max && self.depth_max.is_finite()) {
            return bad(format!("depth range [{}, {}] is invalid", self.depth_min, self.depth_max));
        }
        if !(self.lateral_max >= 0.0 && self.lateral_max.is_finite()) {
            return bad(format!("lateral_max {} must be non-negative", self.lateral_max));
        }
        if !self.ground_y.is_finite() {
            return bad("ground_y must be finite".into());
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive".into());
        }
        Ok(())
    }

    /// Pinhole camera with the principal point at the image center.
    pub fn calib(&self) -> Result<CalibMatrix> {
        CalibMatrix::pinhole(
            self.focal,
            (self.image_width as f64 / 2.0, self.image_height as f64 / 2.0),
            (self.image_width, self.image_height),
        )
    }
}

/// A ground-truth object with its projected image box `left, top, right, bottom`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub category: Category,
    pub bbox: Box3D,
    pub bbox2d: [f64; 4],
}

impl SceneObject {
    pub fn to_label(&self) -> KittiLabel {
        KittiLabel::from_box(self.category.name(), &self.bbox, self.bbox2d)
    }
}

/// Row-major `height × width × channels` feature grid at one stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(stride: u32, height: usize, width: usize, channels: usize) -> Self {
        Self { stride, height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn texel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    fn texel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn to_level_map(&self) -> Result<LevelMap> {
        let map = DiffArray::new(&[self.height, self.width, self.channels], self.data.clone())?;
        LevelMap::new(map, self.stride as f64)
    }
}

/// One generated scene in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub stream: u64,
    pub points: Vec<Point>,
    /// Source object of every point; `None` for clutter.
    pub point_labels: Vec<Option<usize>>,
    pub levels: Vec<FeatureGrid>,
    pub calib: CalibMatrix,
    pub objects: Vec<SceneObject>,
}

impl SceneSample {
    pub fn gt_boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn labels(&self) -> Vec<KittiLabel> {
        self.objects.iter().map(SceneObject::to_label).collect()
    }

    pub fn level_maps(&self) -> Result<Vec<LevelMap>> {
        self.levels.iter().map(FeatureGrid::to_level_map).collect()
    }
}

/// Index of the first box containing each point within `eps`.
pub fn point_labels(points: &[Point], boxes: &[Box3D], eps: f64) -> Vec<Option<usize>> {
    points
        .iter()
        .map(|p| boxes.iter().position(|b| b.contains(p.xyz, eps)))
        .collect()
}

fn inflated(b: &Box3D, margin: f64) -> Box3D {
    Box3D { w: b.w + 2.0 * margin, l: b.l + 2.0 * margin, ..*b }
}

fn projected_box(b: &Box3D, calib: &CalibMatrix) -> Option<[f64; 4]> {
    let proj = project_points(&b.corners(), calib);
    if !proj.in_frustum.iter().all(|&m| m) {
        return None;
    }
    let fold = |i: usize, f: fn(f64, f64) -> f64, init: f64| proj.uv.iter().map(|q| q[i]).fold(init, f);
    Some([
        fold(0, f64::min, f64::INFINITY),
        fold(1, f64::min, f64::INFINITY),
        fold(0, f64::max, f64::NEG_INFINITY),
        fold(1, f64::max, f64::NEG_INFINITY),
    ])
}

fn place_objects(cfg: &SceneConfig, calib: &CalibMatrix, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let category = Category::ALL[rng.random_range(0..Category::ALL.len())];
            let size = category.size_range().map(|[lo, hi]| rng.random_range(lo..=hi));
            let x = rng.random_range(-cfg.lateral_max..=cfg.lateral_max);
            let z = rng.random_range(cfg.depth_min..=cfg.depth_max);
            let theta = rng.random_range(-PI..PI);
            let bbox = Box3D::new([x, cfg.ground_y - size[0] / 2.0, z], size, theta)?;
            let grown = inflated(&bbox, PLACEMENT_MARGIN);
            if objects
                .iter()
                .any(|o| footprint_intersection(&grown, &inflated(&o.bbox, PLACEMENT_MARGIN)) > 0.0)
            {
                continue;
            }
            if let Some(bbox2d) = projected_box(&bbox, calib) {
                placed = Some(SceneObject { category, bbox, bbox2d });
                break;
            }
        }
        let obj = placed.ok_or_else(|| {
            Error::Generation(format!("could not place object {k} after {} attempts", cfg.max_retries))
        })?;
        objects.push(obj);
    }
    Ok(objects)
}

/// A point on the surface of `b`, faces drawn in proportion to their area.
fn surface_point(b: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (l, h, w) = (b.l, b.h, b.w);
    let areas = [w * h, l * h, l * w];
    let pick = rng.random_range(0.0..areas.iter().sum::<f64>());
    let mut local = [
        rng.random_range(-0.5..=0.5) * l,
        rng.random_range(-0.5..=0.5) * h,
        rng.random_range(-0.5..=0.5) * w,
    ];
    let sign = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
    let axis = if pick < areas[0] {
        0
    } else if pick < areas[0] + areas[1] {
        2
    } else {
        1
    };
    local[axis] = sign * [l, h, w][axis];
    b.local_to_frame(local)
}

/// Feature grids at every stride in [`LEVEL_STRIDES`]. Texels whose pixel
/// position falls inside an object's image box take that object's one-hot
/// category and objectness 1, painting far objects before near ones; every
/// texel then receives Gaussian noise.
pub fn render_features(
    objects: &[SceneObject],
    width: u32,
    height: u32,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureGrid>> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::OutOfRange(format!("feature noise {noise}: {e}")))?;
    let mut order: Vec<usize> = (0..objects.len()).collect();
    let range = |o: &SceneObject| o.bbox.x.hypot(o.bbox.z);
    order.sort_by(|&a, &b| range(&objects[b]).total_cmp(&range(&objects[a])).then(a.cmp(&b)));
    LEVEL_STRIDES
        .iter()
        .map(|&s| {
            let (gh, gw) = ((height as usize).div_ceil(s as usize), (width as usize).div_ceil(s as usize));
            let mut grid = FeatureGrid::zeros(s, gh, gw, FEATURE_CHANNELS);
            for &i in &order {
                let o = &objects[i];
                let [u0, v0, u1, v1] = o.bbox2d;
                for r in 0..gh {
                    let v = (r as u32 * s) as f64;
                    if v < v0 || v > v1 {
                        continue;
                    }
                    for c in 0..gw {
                        let u = (c as u32 * s) as f64;
                        if u < u0 || u > u1 {
                            continue;
                        }
                        let t = grid.texel_mut(r, c);
                        t.fill(0.0);
                        t[o.category.index()] = 1.0;
                        t[FEATURE_CHANNELS - 1] = 1.0;
                    }
                }
            }
            for v in grid.data.iter_mut() {
                *v += normal.sample(rng);
            }
            Ok(grid)
        })
        .collect()
}

/// Generates one scene from `(seed, stream)`: non-overlapping boxes resting
/// on the ground and fully visible in the image, jittered surface points per
/// box, ground clutter outside every box, and four feature levels.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, stream: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let calib = cfg.calib()?;
    let objects = place_objects(cfg, &calib, &mut rng)?;
    let jitter = Normal::new(0.0, cfg.point_noise)
        .map_err(|e| Error::OutOfRange(format!("point noise {}: {e}", cfg.point_noise)))?;

    let mut points = Vec::with_capacity(objects.len() * cfg.points_per_object + cfg.clutter_points);
    let mut labels = Vec::with_capacity(points.capacity());
    for (k, o) in objects.iter().enumerate() {
        for _ in 0..cfg.points_per_object {
            let p = surface_point(&o.bbox, &mut rng).map(|v| v + jitter.sample(&mut rng));
            points.push(Point::new(p, rng.random_range(0.2..1.0)));
            labels.push(Some(k));
        }
    }
    let x_span = cfg.lateral_max + 5.0;
    let z_span = [cfg.depth_min / 2.0, cfg.depth_max + 5.0];
    let keep_out: Vec<Box3D> = objects.iter().map(|o| inflated(&o.bbox, PLACEMENT_MARGIN)).collect();
    for _ in 0..cfg.clutter_points {
        for _ in 0..cfg.max_retries {
            let p = [
                rng.random_range(-x_span..=x_span),
                cfg.ground_y + jitter.sample(&mut rng),
                rng.random_range(z_span[0]..=z_span[1]),
            ];
            let on_footprint = keep_out.iter().any(|b| b.contains([p[0], b.y, p[2]], 0.0));
            if !on_footprint {
                points.push(Point::new(p, rng.random_range(0.0..0.3)));
                labels.push(None);
                break;
            }
        }
    }

    let levels = render_features(&objects, cfg.image_width, cfg.image_height, cfg.feature_noise, &mut rng)?;
    Ok(SceneSample { seed, stream, points, point_labels: labels, levels, calib, objects })
}
