//! RGB-D sequences on disk, depth normalization, procedural scenes with
//! analytic ground truth, and point-cloud export.
//!
//! A sequence directory holds a `manifest.toml` listing per-frame files by
//! relative path. Flow stored with frame `t` maps frame `t` to frame `t + 1`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pose_matrix, Intrinsics};
use crate::error::{Error, Result};
use crate::io::{self, ColoredPoint};
use crate::raster::{DepthFrame, FlowField, Raster, RgbFrame, VectorMap};

/// Frames per training/evaluation clip.
pub const DEFAULT_CLIP_LENGTH: usize = 7;
pub const DEFAULT_CLIP_RANGE: [f64; 2] = [0.0, 40.0];
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthUnit {
    /// 16-bit PNG in millimeters.
    Millimeter16,
    /// Single-channel PFM in meters.
    FloatMeters,
}

impl DepthUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            DepthUnit::Millimeter16 => "Millimeter16",
            DepthUnit::FloatMeters => "FloatMeters",
        }
    }

    fn extension(&self) -> &'static str {
        match self {
            DepthUnit::Millimeter16 => "png",
            DepthUnit::FloatMeters => "pfm",
        }
    }
}

impl std::str::FromStr for DepthUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Millimeter16" => Ok(DepthUnit::Millimeter16),
            "FloatMeters" => Ok(DepthUnit::FloatMeters),
            other => Err(Error::UnknownDepthUnit(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub albedo: Option<PathBuf>,
    /// Camera-to-world, 16 values row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub depth_unit: String,
    #[serde(default = "default_clip_range")]
    pub clip_range: [f64; 2],
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameRecord>,
}

fn default_clip_range() -> [f64; 2] {
    DEFAULT_CLIP_RANGE
}

impl SequenceManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileMissing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn unit(&self) -> Result<DepthUnit> {
        self.depth_unit.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.unit()?;
        if self.frames.is_empty() {
            return Err(Error::InvalidSpec("manifest lists no frames".into()));
        }
        if !self.intrinsics.is_valid() {
            return Err(Error::InvalidSpec(format!(
                "bad intrinsics {:?}",
                self.intrinsics
            )));
        }
        if !(self.clip_range[0] < self.clip_range[1]) {
            return Err(Error::InvalidSpec(format!(
                "bad clip range {:?}",
                self.clip_range
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.pose.as_ref().is_some_and(|p| p.len() != 16) {
                return Err(Error::InvalidSpec(format!(
                    "frame {i}: pose needs 16 values"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Linear RGB in `[0, 1]`.
    pub rgb: RgbFrame,
    /// Meters; 0 marks missing depth.
    pub depth: DepthFrame,
    /// Flow to the next frame.
    pub flow: Option<FlowField>,
    /// Camera-frame unit normals.
    pub normal: Option<VectorMap>,
    pub albedo: Option<Raster<f64>>,
    pub pose: Option<Matrix4<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub clip_range: [f64; 2],
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| f.depth.dims())
    }

    /// Consecutive clips of `length` frames; the last may be shorter.
    pub fn clips(&self, length: usize) -> impl Iterator<Item = &[Frame]> {
        self.frames.chunks(length.max(1))
    }

    pub fn has_flow(&self) -> bool {
        self.frames.iter().all(|f| f.flow.is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Frame dimensions must be divisible by this.
    pub downsample_factor: usize,
    pub clip_length: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            downsample_factor: crate::sensor::DEFAULT_DOWNSAMPLE,
            clip_length: DEFAULT_CLIP_LENGTH,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every frame listed in the manifest at `manifest_path`.
///
/// Every listed file is checked for existence before decoding starts. Frames
/// are decoded concurrently, then checked for consistent dimensions.
pub fn load_sequence(manifest_path: &Path, options: &LoadOptions) -> Result<Sequence> {
    let manifest = SequenceManifest::read(manifest_path)?;
    manifest.validate()?;
    let unit = manifest.unit()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    for f in &manifest.frames {
        let paths = [
            Some(&f.rgb),
            Some(&f.depth),
            f.flow.as_ref(),
            f.normal.as_ref(),
            f.albedo.as_ref(),
        ];
        for p in paths.into_iter().flatten() {
            let full = resolve(base, p);
            if !full.is_file() {
                return Err(Error::FileMissing(full));
            }
        }
    }

    let frames = manifest
        .frames
        .par_iter()
        .map(|rec| load_frame(base, rec, unit))
        .collect::<Result<Vec<_>>>()?;

    let (w, h) = frames[0].depth.dims();
    for (i, f) in frames.iter().enumerate() {
        let dims = [
            Some(f.rgb.dims()),
            Some(f.depth.dims()),
            f.flow.as_ref().map(|x| x.dims()),
            f.normal.as_ref().map(|x| x.dims()),
            f.albedo.as_ref().map(|x| x.dims()),
        ];
        if let Some(bad) = dims.into_iter().flatten().find(|&d| d != (w, h)) {
            return Err(Error::ShapeMismatch(format!(
                "frame {i}: layer is {}x{}, expected {w}x{h}",
                bad.0, bad.1
            )));
        }
    }
    let s = options.downsample_factor;
    if s == 0 || w % s != 0 || h % s != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} frames are not divisible by {s}"
        )));
    }

    Ok(Sequence {
        intrinsics: manifest.intrinsics,
        clip_range: manifest.clip_range,
        frames,
    })
}

fn load_frame(base: &Path, rec: &FrameRecord, unit: DepthUnit) -> Result<Frame> {
    let rgb_path = resolve(base, &rec.rgb);
    let rgb = if has_ext(&rgb_path, "pfm") {
        io::read_pfm_rgb(&rgb_path)?
    } else {
        io::read_rgb_png(&rgb_path)?
    };
    let depth_path = resolve(base, &rec.depth);
    let depth = match unit {
        DepthUnit::Millimeter16 => io::read_depth_png_mm(&depth_path)?,
        DepthUnit::FloatMeters => io::read_pfm_gray(&depth_path)?,
    };
    let flow = rec
        .flow
        .as_ref()
        .map(|p| io::read_flo(&resolve(base, p)))
        .transpose()?;
    let normal = rec
        .normal
        .as_ref()
        .map(|p| io::read_pfm_rgb(&resolve(base, p)))
        .transpose()?;
    let albedo = rec
        .albedo
        .as_ref()
        .map(|p| io::read_pfm_gray(&resolve(base, p)))
        .transpose()?;
    let pose = rec.pose.as_ref().map(|v| Matrix4::from_row_slice(v));
    Ok(Frame {
        rgb,
        depth,
        flow,
        normal,
        albedo,
        pose,
    })
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Writes every layer of `seq` under `dir` and returns the manifest path.
pub fn write_sequence(dir: &Path, seq: &Sequence, unit: DepthUnit) -> Result<PathBuf> {
    let records = seq
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let name = format!("frame_{i:04}");
            let rec = FrameRecord {
                rgb: PathBuf::from(format!("rgb/{name}.png")),
                depth: PathBuf::from(format!("depth/{name}.{}", unit.extension())),
                flow: f
                    .flow
                    .as_ref()
                    .map(|_| PathBuf::from(format!("flow/{name}.flo"))),
                normal: f
                    .normal
                    .as_ref()
                    .map(|_| PathBuf::from(format!("normal/{name}.pfm"))),
                albedo: f
                    .albedo
                    .as_ref()
                    .map(|_| PathBuf::from(format!("albedo/{name}.pfm"))),
                pose: f.pose.map(|m| m.transpose().as_slice().to_vec()),
            };
            io::write_rgb_png(&dir.join(&rec.rgb), &f.rgb)?;
            match unit {
                DepthUnit::Millimeter16 => io::write_depth_png_mm(&dir.join(&rec.depth), &f.depth)?,
                DepthUnit::FloatMeters => io::write_pfm_gray(&dir.join(&rec.depth), &f.depth)?,
            }
            if let (Some(p), Some(flow)) = (&rec.flow, &f.flow) {
                io::write_flo(&dir.join(p), flow)?;
            }
            if let (Some(p), Some(n)) = (&rec.normal, &f.normal) {
                io::write_pfm_rgb(&dir.join(p), n)?;
            }
            if let (Some(p), Some(a)) = (&rec.albedo, &f.albedo) {
                io::write_pfm_gray(&dir.join(p), a)?;
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = SequenceManifest {
        depth_unit: unit.as_str().to_string(),
        clip_range: seq.clip_range,
        intrinsics: seq.intrinsics,
        frames: records,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Clamp-then-affine map from `[min, max]` meters to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthNormalization {
    pub min: f64,
    pub max: f64,
}

impl DepthNormalization {
    pub fn new(range: [f64; 2]) -> Result<Self> {
        if !(range[0].is_finite() && range[1].is_finite() && range[0] < range[1]) {
            return Err(Error::InvalidParameter(format!(
                "bad depth range {range:?}"
            )));
        }
        Ok(Self {
            min: range[0],
            max: range[1],
        })
    }

    #[inline]
    pub fn normalize(&self, d: f64) -> f64 {
        (d.clamp(self.min, self.max) - self.min) / (self.max - self.min)
    }

    #[inline]
    pub fn denormalize(&self, n: f64) -> f64 {
        self.min + n * (self.max - self.min)
    }
}

pub fn clip_and_normalize(
    depth_seq: &[DepthFrame],
    range: [f64; 2],
) -> Result<(Vec<DepthFrame>, DepthNormalization)> {
    let norm = DepthNormalization::new(range)?;
    Ok((
        depth_seq
            .iter()
            .map(|d| d.map(|&v| norm.normalize(v)))
            .collect(),
        norm,
    ))
}

// ---------------------------------------------------------------- scenes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
    /// World-frame displacement per frame.
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    pub start: [f64; 3],
    /// World-frame translation per frame.
    #[serde(default)]
    pub step: [f64; 3],
    /// Point kept at the image center; without it the camera looks along +z.
    #[serde(default)]
    pub look_at: Option<[f64; 3]>,
}

/// Boxes placed by the generation seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBoxes {
    pub count: usize,
    pub region_min: [f64; 3],
    pub region_max: [f64; 3],
    pub size_min: f64,
    pub size_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    #[serde(default = "default_hfov")]
    pub hfov_deg: f64,
    #[serde(default)]
    pub intrinsics: Option<Intrinsics>,
    #[serde(default = "default_clip_range")]
    pub clip_range: [f64; 2],
    /// Direction toward the light, world frame.
    #[serde(default = "default_light")]
    pub light_dir: [f64; 3],
    pub camera: CameraPath,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub random_boxes: Option<RandomBoxes>,
}

fn default_hfov() -> f64 {
    60.0
}

fn default_light() -> [f64; 3] {
    [-0.6, -0.8, -0.5]
}

const AMBIENT: f64 = 0.2;

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileMissing(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
            .unwrap_or_else(|| Intrinsics::from_fov(self.width, self.height, self.hfov_deg))
    }

    /// A back wall, a floor and a few boxes with distinct colors, seen by a
    /// camera sliding sideways.
    pub fn random_desk(width: usize, height: usize, frame_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut boxes = Vec::new();
        for _ in 0..3 {
            let cx = rng.random_range(-0.8..0.8);
            let cz = rng.random_range(1.8..2.8);
            let size = rng.random_range(0.25..0.45);
            let albedo = [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ];
            boxes.push(BoxSpec {
                min: [cx - size / 2.0, 0.6 - size, cz - size / 2.0],
                max: [cx + size / 2.0, 0.6, cz + size / 2.0],
                albedo,
                velocity: [0.0; 3],
            });
        }
        Self {
            width,
            height,
            frame_count,
            hfov_deg: 60.0,
            intrinsics: None,
            clip_range: DEFAULT_CLIP_RANGE,
            light_dir: default_light(),
            camera: CameraPath {
                start: [0.0, 0.0, 0.0],
                step: [0.01, 0.0, 0.0],
                look_at: None,
            },
            planes: vec![
                PlaneSpec {
                    point: [0.0, 0.0, 4.0],
                    normal: [0.0, 0.0, -1.0],
                    albedo: [0.75, 0.72, 0.65],
                },
                PlaneSpec {
                    point: [0.0, 0.6, 0.0],
                    normal: [0.0, -1.0, 0.0],
                    albedo: [0.45, 0.3, 0.2],
                },
            ],
            boxes,
            random_boxes: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return bad("width, height and frame_count must be positive".into());
        }
        if !self.intrinsics().is_valid() || !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("invalid camera intrinsics or field of view".into());
        }
        if !(self.clip_range[0] < self.clip_range[1]) {
            return bad(format!("bad clip range {:?}", self.clip_range));
        }
        if Vector3::from(self.light_dir).norm() == 0.0 {
            return bad("light direction is zero".into());
        }
        for p in &self.planes {
            if Vector3::from(p.normal).norm() == 0.0 {
                return bad("plane normal is zero".into());
            }
        }
        for b in &self.boxes {
            if (0..3).any(|k| !(b.min[k] < b.max[k])) {
                return bad(format!("box min {:?} not below max {:?}", b.min, b.max));
            }
        }
        if let Some(r) = &self.random_boxes {
            if !(0.0 < r.size_min && r.size_min <= r.size_max)
                || (0..3).any(|k| !(r.region_min[k] <= r.region_max[k]))
            {
                return bad("bad random_boxes ranges".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
    },
    Cuboid {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct Primitive {
    shape: Shape,
    albedo: [f64; 3],
    velocity: Vector3<f64>,
}

impl Primitive {
    fn at_frame(&self, f: usize) -> Shape {
        let off = self.velocity * f as f64;
        match self.shape {
            Shape::Plane { point, normal } => Shape::Plane {
                point: point + off,
                normal,
            },
            Shape::Cuboid { min, max } => Shape::Cuboid {
                min: min + off,
                max: max + off,
            },
        }
    }
}

/// Ray parameter and outward world normal of the nearest hit with `t > 0`.
fn intersect(
    shape: &Shape,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    match shape {
        Shape::Plane { point, normal } => {
            let denom = normal.dot(dir);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = normal.dot(&(point - origin)) / denom;
            (t > 0.0).then(|| (t, if denom > 0.0 { -normal } else { *normal }))
        }
        Shape::Cuboid { min, max } => {
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis_near = 0;
            for k in 0..3 {
                if dir[k] == 0.0 {
                    if origin[k] < min[k] || origin[k] > max[k] {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((min[k] - origin[k]) / dir[k], (max[k] - origin[k]) / dir[k]);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                if lo > t_near {
                    t_near = lo;
                    axis_near = k;
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= 0.0 {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis_near] = -dir[axis_near].signum();
            Some((t_near, n))
        }
    }
}

fn inside(shape: &Shape, p: &Vector3<f64>) -> bool {
    match shape {
        Shape::Plane { point, normal } => normal.dot(&(p - point)).abs() < 1e-9,
        Shape::Cuboid { min, max } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
    }
}

/// Generated layers plus the index of the primitive seen at each pixel.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub sequence: Sequence,
    pub surface_ids: Vec<Raster<u32>>,
}

fn camera_rotation(position: &Vector3<f64>, look_at: Option<[f64; 3]>) -> Result<Rotation3<f64>> {
    let Some(target) = look_at else {
        return Ok(Rotation3::identity());
    };
    let z = Vector3::from(target) - position;
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z);
    if z.norm() < 1e-12 || x.norm() < 1e-9 * z.norm() {
        return Err(Error::InvalidSpec("look_at is degenerate".into()));
    }
    let z = z.normalize();
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[
        x, y, z,
    ])))
}

/// Per-pixel ray-cast result: depth, color, camera-frame normal, albedo,
/// flow and surface id.
type PixelSample = (f64, [f64; 3], [f64; 3], f64, [f64; 2], u32);

/// Ray-casts `spec` into a sequence with exact depth, camera-frame normals,
/// albedo, Lambertian RGB under a directional light, flow to the next frame
/// and camera-to-world poses.
pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let k = spec.intrinsics();
    let (w, h) = (spec.width, spec.height);

    let mut prims: Vec<Primitive> = spec
        .planes
        .iter()
        .map(|p| Primitive {
            shape: Shape::Plane {
                point: p.point.into(),
                normal: Vector3::from(p.normal).normalize(),
            },
            albedo: p.albedo,
            velocity: Vector3::zeros(),
        })
        .chain(spec.boxes.iter().map(|b| Primitive {
            shape: Shape::Cuboid {
                min: b.min.into(),
                max: b.max.into(),
            },
            albedo: b.albedo,
            velocity: b.velocity.into(),
        }))
        .collect();
    if let Some(r) = &spec.random_boxes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..r.count {
            let c: Vector3<f64> =
                Vector3::from_fn(|i, _| rng.random_range(r.region_min[i]..=r.region_max[i]));
            let half = rng.random_range(r.size_min..=r.size_max) / 2.0;
            prims.push(Primitive {
                shape: Shape::Cuboid {
                    min: c.add_scalar(-half),
                    max: c.add_scalar(half),
                },
                albedo: [
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                ],
                velocity: Vector3::zeros(),
            });
        }
    }

    let light = Vector3::from(spec.light_dir).normalize();
    let poses = (0..=spec.frame_count)
        .map(|f| {
            let c = Vector3::from(spec.camera.start) + Vector3::from(spec.camera.step) * f as f64;
            camera_rotation(&c, spec.camera.look_at).map(|r| (r, c))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut ids = Vec::with_capacity(spec.frame_count);
    for f in 0..spec.frame_count {
        let (rot, center) = poses[f];
        let (next_rot, next_center) = poses[f + 1];
        let shapes: Vec<Shape> = prims.iter().map(|p| p.at_frame(f)).collect();
        if shapes
            .iter()
            .any(|s| matches!(s, Shape::Cuboid { .. }) && inside(s, &center))
        {
            return Err(Error::InvalidSpec(format!(
                "frame {f}: camera inside a box"
            )));
        }
        if shapes.iter().any(|s| inside(s, &center)) {
            return Err(Error::InvalidSpec(format!("frame {f}: camera on a plane")));
        }

        let pixels = (0..w * h)
            .into_par_iter()
            .map(|idx| {
                let (u, v) = ((idx % w) as f64, (idx / w) as f64);
                let dir = rot * k.ray(u, v);
                let hit = shapes
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| intersect(s, &center, &dir).map(|(t, n)| (i, t, n)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let Some((id, t, n_world)) = hit else {
                    return Err(Error::InvalidSpec(format!(
                        "frame {f}: pixel ({u}, {v}) sees no geometry"
                    )));
                };
                // ray z is 1, so t is the camera-frame depth
                if !(t >= spec.clip_range[0] && t <= spec.clip_range[1]) {
                    return Err(Error::InvalidSpec(format!(
                        "frame {f}: depth {t} at ({u}, {v}) outside clip range"
                    )));
                }
                let prim = &prims[id];
                let shade = AMBIENT + (1.0 - AMBIENT) * n_world.dot(&light).max(0.0);
                let rgb = prim.albedo.map(|a| (a * shade).clamp(0.0, 1.0));
                let n_cam = rot.inverse() * n_world;

                let x_next = center + dir * t + prim.velocity;
                let p_next = Point3::from(next_rot.inverse() * (x_next - next_center));
                let flow = k
                    .project(&p_next)
                    .map_or([f64::NAN; 2], |uv| [uv[0] - u, uv[1] - v]);
                let albedo = (prim.albedo[0] + prim.albedo[1] + prim.albedo[2]) / 3.0;
                Ok((t, rgb, [n_cam.x, n_cam.y, n_cam.z], albedo, flow, id as u32))
            })
            .collect::<Result<Vec<_>>>()?;

        let layer = |g: &dyn Fn(&PixelSample) -> f64| -> DepthFrame {
            Raster::from_vec(w, h, pixels.iter().map(g).collect()).expect("sized")
        };
        frames.push(Frame {
            rgb: Raster::from_vec(w, h, pixels.iter().map(|p| p.1).collect())?,
            depth: layer(&|p| p.0),
            flow: Some(FlowField::new(Raster::from_vec(
                w,
                h,
                pixels.iter().map(|p| p.4).collect(),
            )?)),
            normal: Some(Raster::from_vec(
                w,
                h,
                pixels.iter().map(|p| p.2).collect(),
            )?),
            albedo: Some(layer(&|p| p.3)),
            pose: Some(pose_matrix(&rot, &center)),
        });
        ids.push(Raster::from_vec(
            w,
            h,
            pixels.iter().map(|p| p.5).collect(),
        )?);
    }

    Ok(SynthOutput {
        sequence: Sequence {
            intrinsics: k,
            clip_range: spec.clip_range,
            frames,
        },
        surface_ids: ids,
    })
}

/// Back-projects every valid pixel, applies `pose` (camera-to-world) when
/// given, and attaches its 8-bit color.
pub fn export_pointcloud(
    depth: &DepthFrame,
    rgb: &RgbFrame,
    intrinsics: &Intrinsics,
    pose: Option<&Matrix4<f64>>,
) -> Result<Vec<ColoredPoint>> {
    depth.ensure_same_dims(rgb, "depth vs rgb")?;
    if !intrinsics.is_valid() {
        return Err(Error::InvalidParameter(format!(
            "bad intrinsics {intrinsics:?}"
        )));
    }
    let mut points = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = *depth.get(x, y);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let p = intrinsics.back_project(x as f64, y as f64, d);
            let p = pose.map_or(p, |m| m.transform_point(&p));
            points.push(ColoredPoint {
                position: [p.x, p.y, p.z],
                color: rgb
                    .get(x, y)
                    .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8),
            });
        }
    }
    Ok(points)
}
