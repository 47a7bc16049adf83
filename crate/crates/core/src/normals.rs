//! Surface-normal maps: file I/O, strided sampling and synthetic scenes.
//!
//! Normals are expressed in the camera frame (x right, y down, z forward).
//! Confidence values κ are capped at [`KAPPA_CAP`] on load.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::single_frame::ManhattanFrame;

/// Upper bound applied to per-pixel confidence on load.
pub const KAPPA_CAP: f64 = 100.0;

/// Per-frame sample budget used to pick the default stride.
pub const MAX_SAMPLES_PER_FRAME: usize = 8192;

const NMAP_MAGIC: &[u8; 4] = b"NMAP";
const NMAP_VERSION: u16 = 1;
const NMAP_FLAG_KAPPA: u16 = 1;
const NMAP_HEADER_LEN: usize = 16;

/// A unit normal with its confidence weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalSample {
    pub n: Vector3<f64>,
    pub kappa: f64,
}

impl NormalSample {
    /// Normalises `n`; returns `None` for zero or non-finite input.
    pub fn new(n: Vector3<f64>, kappa: f64) -> Option<Self> {
        let norm = n.norm();
        if !norm.is_finite() || norm == 0.0 || !kappa.is_finite() || kappa < 0.0 {
            return None;
        }
        Some(Self { n: n / norm, kappa })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalFormat {
    Nmap,
    Png,
}

impl NormalFormat {
    /// Picks the format from the file extension (`.png` or anything else → NMAP).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => NormalFormat::Png,
            _ => NormalFormat::Nmap,
        }
    }
}

/// Per-pixel normals and confidences, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<Vector3<f64>>,
    kappa: Vec<f64>,
    valid: Vec<bool>,
}

impl NormalMap {
    /// Builds a map from raw per-pixel data. Normals are renormalised, κ is
    /// clamped to `[0, kappa_cap]`, and zero or non-finite entries are marked
    /// invalid.
    pub fn from_raw(
        width: usize,
        height: usize,
        normals: Vec<Vector3<f64>>,
        kappa: Option<Vec<f64>>,
        kappa_cap: f64,
    ) -> Result<Self> {
        let len = width * height;
        if normals.len() != len {
            return Err(Error::InvalidInput(format!(
                "expected {len} normals for {width}x{height}, got {}",
                normals.len()
            )));
        }
        let kappa = kappa.unwrap_or_else(|| vec![1.0; len]);
        if kappa.len() != len {
            return Err(Error::InvalidInput(format!(
                "expected {len} kappa values, got {}",
                kappa.len()
            )));
        }
        let mut out = Self {
            width,
            height,
            normals: Vec::with_capacity(len),
            kappa: Vec::with_capacity(len),
            valid: Vec::with_capacity(len),
        };
        for (n, k) in normals.into_iter().zip(kappa) {
            let norm = n.norm();
            let ok = norm.is_finite() && norm > 0.0 && !k.is_nan();
            out.normals.push(if ok { n / norm } else { Vector3::zeros() });
            out.kappa.push(if ok { k.clamp(0.0, kappa_cap) } else { 0.0 });
            out.valid.push(ok);
        }
        Ok(out)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    /// Normal at `(x, y)`, or `None` for an invalid pixel.
    pub fn normal(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.normals[i])
    }

    pub fn kappa(&self, x: usize, y: usize) -> f64 {
        self.kappa[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Invalidates every pixel within `border` pixels of the image edge.
    pub fn crop_border(&mut self, border_x: usize, border_y: usize) {
        for y in 0..self.height {
            for x in 0..self.width {
                if x < border_x
                    || y < border_y
                    || x + border_x >= self.width
                    || y + border_y >= self.height
                {
                    let i = y * self.width + x;
                    self.valid[i] = false;
                    self.normals[i] = Vector3::zeros();
                    self.kappa[i] = 0.0;
                }
            }
        }
    }

    /// Row-major samples on a `stride × stride` grid, skipping invalid pixels.
    pub fn sample(&self, stride: usize) -> Result<Vec<NormalSample>> {
        if stride == 0 {
            return Err(Error::InvalidInput("stride must be >= 1".into()));
        }
        let mut out = Vec::new();
        for y in (0..self.height).step_by(stride) {
            for x in (0..self.width).step_by(stride) {
                let i = y * self.width + x;
                if self.valid[i] {
                    out.push(NormalSample {
                        n: self.normals[i],
                        kappa: self.kappa[i],
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::NoUsableNormals);
        }
        Ok(out)
    }

    /// Writes the map in NMAP format with the κ plane present.
    pub fn write_nmap(&self, path: &Path) -> Result<()> {
        let len = self.len();
        let mut buf = Vec::with_capacity(NMAP_HEADER_LEN + len * 16);
        buf.extend_from_slice(NMAP_MAGIC);
        buf.extend_from_slice(&NMAP_VERSION.to_le_bytes());
        buf.extend_from_slice(&NMAP_FLAG_KAPPA.to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for n in &self.normals {
            for c in n.iter() {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        for k in &self.kappa {
            buf.extend_from_slice(&(*k as f32).to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Smallest stride keeping the sample count within [`MAX_SAMPLES_PER_FRAME`].
pub fn default_stride(width: usize, height: usize) -> usize {
    let mut s = 1;
    while width.div_ceil(s) * height.div_ceil(s) > MAX_SAMPLES_PER_FRAME {
        s += 1;
    }
    s
}

/// Loads a normal map. For PNG input an optional 8-bit grayscale κ image
/// may be given; NMAP files carry κ inline. Missing κ defaults to 1.
pub fn load_normal_map(
    path: &Path,
    format: NormalFormat,
    kappa_path: Option<&Path>,
    kappa_cap: f64,
) -> Result<NormalMap> {
    match format {
        NormalFormat::Nmap => load_nmap(path, kappa_cap),
        NormalFormat::Png => load_png(path, kappa_path, kappa_cap),
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn load_nmap(path: &Path, kappa_cap: f64) -> Result<NormalMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NMAP_HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated header ({} of {NMAP_HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != NMAP_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"NMAP\""));
    }
    let version = read_u16(&bytes, 4);
    if version != NMAP_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let flags = read_u16(&bytes, 6);
    if flags & !NMAP_FLAG_KAPPA != 0 {
        return Err(Error::format(path, 6, format!("unknown flags {flags:#06x}")));
    }
    let width = read_u32(&bytes, 8) as usize;
    let height = read_u32(&bytes, 12) as usize;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(path, 8, "image size overflows"))?;
    let has_kappa = flags & NMAP_FLAG_KAPPA != 0;
    let normals_end = NMAP_HEADER_LEN + len * 12;
    let expected = normals_end + if has_kappa { len * 4 } else { 0 };
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("unexpected end of data, expected {expected} bytes for {width}x{height}"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            path,
            expected as u64,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let normals = (0..len)
        .map(|i| {
            let at = NMAP_HEADER_LEN + i * 12;
            Vector3::new(
                read_f32(&bytes, at) as f64,
                read_f32(&bytes, at + 4) as f64,
                read_f32(&bytes, at + 8) as f64,
            )
        })
        .collect();
    let kappa = has_kappa.then(|| {
        (0..len)
            .map(|i| read_f32(&bytes, normals_end + i * 4) as f64)
            .collect()
    });
    NormalMap::from_raw(width, height, normals, kappa, kappa_cap)
}

fn load_png(path: &Path, kappa_path: Option<&Path>, kappa_cap: f64) -> Result<NormalMap> {
    let img_err = |p: &Path, e: image::ImageError| Error::Image {
        path: p.to_path_buf(),
        msg: e.to_string(),
    };
    let rgb = image::open(path).map_err(|e| img_err(path, e))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let normals = rgb
        .pixels()
        .map(|p| {
            Vector3::new(
                2.0 * p[0] as f64 / 255.0 - 1.0,
                2.0 * p[1] as f64 / 255.0 - 1.0,
                2.0 * p[2] as f64 / 255.0 - 1.0,
            )
        })
        .collect();
    let kappa = match kappa_path {
        Some(kp) => {
            let gray = image::open(kp).map_err(|e| img_err(kp, e))?.to_luma8();
            if gray.dimensions() != (w, h) {
                return Err(Error::Image {
                    path: kp.to_path_buf(),
                    msg: format!(
                        "kappa image is {}x{}, normals are {w}x{h}",
                        gray.width(),
                        gray.height()
                    ),
                });
            }
            Some(gray.pixels().map(|p| 100.0 * p[0] as f64 / 255.0).collect())
        }
        None => None,
    };
    NormalMap::from_raw(w as usize, h as usize, normals, kappa, kappa_cap)
}

/// One entry of a sequence manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub frame: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<PathBuf>,
    pub timestamp: f64,
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        if e.frame.is_relative() {
            e.frame = base.join(&e.frame);
        }
        if let Some(k) = &mut e.kappa {
            if k.is_relative() {
                *k = base.join(&*k);
            }
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// World axes in the order used by [`SynthSpec::axis_weights`].
pub const WORLD_AXES: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

/// Index of world +Z (the floor normal) in [`WORLD_AXES`].
pub const FLOOR_AXIS: usize = 4;

/// Parameters of a synthetic Manhattan sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Ground-truth frames, one per image.
    pub trajectory: Vec<ManhattanFrame>,
    /// Visibility of world `+X, −X, +Y, −Y, +Z, −Z`; must sum to 1.
    pub axis_weights: [f64; 6],
    /// Standard deviation of the angular noise on inliers (degrees).
    pub noise_deg: f64,
    /// Fraction of samples drawn uniformly on the sphere.
    pub outlier_fraction: f64,
    pub samples_per_frame: usize,
    /// Image width; defaults to `ceil(sqrt(samples_per_frame))`.
    pub width: Option<usize>,
    pub inlier_kappa: f64,
    pub outlier_kappa: f64,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            trajectory: Vec::new(),
            axis_weights: [1.0 / 6.0; 6],
            noise_deg: 0.0,
            outlier_fraction: 0.0,
            samples_per_frame: 1000,
            width: None,
            inlier_kappa: 1.0,
            outlier_kappa: 1.0,
            frame_interval: 1.0 / 30.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.axis_weights.iter().sum();
        if self.axis_weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "axis weights must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        if !(self.noise_deg >= 0.0) {
            return Err(Error::InvalidInput("noise_deg must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidInput("outlier_fraction must be in [0, 1]".into()));
        }
        if self.samples_per_frame == 0 {
            return Err(Error::InvalidInput("samples_per_frame must be >= 1".into()));
        }
        if !(self.inlier_kappa >= 0.0 && self.outlier_kappa >= 0.0) {
            return Err(Error::InvalidInput("kappa must be >= 0".into()));
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::InvalidInput("frame_interval must be > 0".into()));
        }
        if self.width == Some(0) {
            return Err(Error::InvalidInput("width must be >= 1".into()));
        }
        Ok(())
    }

    fn image_size(&self) -> (usize, usize) {
        let n = self.samples_per_frame;
        let w = self
            .width
            .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
            .max(1);
        (w, n.div_ceil(w))
    }
}

/// A synthetic frame: the samples, the same data laid out as an image, and
/// the world axis each pixel was generated from (`None` for outliers and
/// padding pixels).
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub samples: Vec<NormalSample>,
    pub map: NormalMap,
    pub labels: Vec<Option<usize>>,
}

fn frame_rng(seed: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng
}

fn unit_perpendicular(d: &Vector3<f64>, phi: f64) -> Vector3<f64> {
    let helper = if d.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let b1 = d.cross(&helper).normalize();
    let b2 = d.cross(&b1);
    b1 * phi.cos() + b2 * phi.sin()
}

fn uniform_on_sphere(rng: &mut impl Rng) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Generates one synthetic frame as seen from `frame`. The output depends
/// only on `spec.seed` and `frame_index`.
pub fn synth_frame(frame: &ManhattanFrame, spec: &SynthSpec, frame_index: u64) -> Result<SynthFrame> {
    spec.validate()?;
    let mut rng = frame_rng(spec.seed, frame_index);
    let axis_dist = WeightedIndex::new(spec.axis_weights)
        .map_err(|e| Error::InvalidInput(format!("axis weights: {e}")))?;
    let noise = Normal::new(0.0, spec.noise_deg.to_radians())
        .map_err(|e| Error::InvalidInput(format!("noise: {e}")))?;
    let (w, h) = spec.image_size();
    let n = spec.samples_per_frame;

    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(w * h);
    for _ in 0..n {
        let outlier = spec.outlier_fraction > 0.0 && rng.gen::<f64>() < spec.outlier_fraction;
        if outlier {
            let d = uniform_on_sphere(&mut rng);
            samples.push(NormalSample {
                n: d,
                kappa: spec.outlier_kappa,
            });
            labels.push(None);
            continue;
        }
        let axis = axis_dist.sample(&mut rng);
        let d = frame.axis_in_camera(&Vector3::from(WORLD_AXES[axis]));
        let n = if spec.noise_deg > 0.0 {
            let angle = noise.sample(&mut rng).abs();
            let phi = rng.gen_range(0.0..2.0 * PI);
            let k = unit_perpendicular(&d, phi);
            (d * angle.cos() + k.cross(&d) * angle.sin()).normalize()
        } else {
            d
        };
        samples.push(NormalSample {
            n,
            kappa: spec.inlier_kappa,
        });
        labels.push(Some(axis));
    }
    let mut normals: Vec<Vector3<f64>> = samples.iter().map(|s| s.n).collect();
    let mut kappa: Vec<f64> = samples.iter().map(|s| s.kappa).collect();
    normals.resize(w * h, Vector3::zeros());
    kappa.resize(w * h, 0.0);
    labels.resize(w * h, None);
    let map = NormalMap::from_raw(w, h, normals, Some(kappa), f64::INFINITY)?;
    Ok(SynthFrame {
        samples,
        map,
        labels,
    })
}

/// A generated sequence and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<SynthFrame>,
    pub ground_truth: Trajectory,
}

/// Applies [`synth_frame`] along the whole trajectory.
pub fn synth_sequence(spec: &SynthSpec) -> Result<SynthSequence> {
    if spec.trajectory.is_empty() {
        return Err(Error::NoFrames);
    }
    spec.validate()?;
    let frames = spec
        .trajectory
        .iter()
        .enumerate()
        .map(|(i, m)| synth_frame(m, spec, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = Trajectory::new(
        spec.trajectory
            .iter()
            .enumerate()
            .map(|(i, m)| (i as f64 * spec.frame_interval, m.camera_to_world()))
            .collect(),
    )?;
    Ok(SynthSequence {
        frames,
        ground_truth,
    })
}

/// File names used by [`write_sequence`].
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

/// Writes `frame_NNNNN.nmap` files, `manifest.json` and `groundtruth.txt`
/// into `dir` (created if missing). Returns the manifest path.
pub fn write_sequence(seq: &SynthSequence, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(seq.frames.len());
    for (i, (frame, (t, _))) in seq.frames.iter().zip(seq.ground_truth.iter()).enumerate() {
        let name = format!("frame_{i:05}.nmap");
        frame.map.write_nmap(&dir.join(&name))?;
        entries.push(ManifestEntry {
            frame: PathBuf::from(name),
            kappa: None,
            timestamp: *t,
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    seq.ground_truth.write(&dir.join(GROUND_TRUTH_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{exp_map, Rotation};

    fn small_map() -> NormalMap {
        let normals = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
        ];
        NormalMap::from_raw(2, 2, normals, Some(vec![1.0, 2.0, 250.0, -3.0]), KAPPA_CAP).unwrap()
    }

    #[test]
    fn invalid_pixels_are_skipped() {
        let m = small_map();
        let s = m.sample(1).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].n, Vector3::y());
        assert_eq!(s[1].kappa, 100.0);
        assert_eq!(s[2].kappa, 0.0);
        assert_eq!(m.sample(1).unwrap(), s);
    }

    #[test]
    fn strided_count() {
        let w = 640;
        let h = 480;
        let m = NormalMap::from_raw(w, h, vec![Vector3::z(); w * h], None, KAPPA_CAP).unwrap();
        assert_eq!(m.sample(8).unwrap().len(), 4800);
        assert!(matches!(m.sample(0), Err(Error::InvalidInput(_))));
        let s = default_stride(w, h);
        assert!(m.sample(s).unwrap().len() <= MAX_SAMPLES_PER_FRAME);
        assert!(m.sample(s - 1).unwrap().len() > MAX_SAMPLES_PER_FRAME);
    }

    #[test]
    fn all_invalid_means_no_usable_normals() {
        let m = NormalMap::from_raw(2, 1, vec![Vector3::zeros(); 2], None, KAPPA_CAP).unwrap();
        assert!(matches!(m.sample(1), Err(Error::NoUsableNormals)));
    }

    #[test]
    fn nmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nmap");
        let m = small_map();
        m.write_nmap(&p).unwrap();
        let back = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap();
        assert_eq!(back.width(), 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(back.is_valid(x, y), m.is_valid(x, y));
                assert_eq!(back.kappa(x, y), m.kappa(x, y));
                if let (Some(a), Some(b)) = (back.normal(x, y), m.normal(x, y)) {
                    assert!((a - b).norm() < 1e-6);
                }
            }
        }
    }

    fn nmap_bytes(w: u32, h: u32, flags: u16, normals: &[[f32; 3]], kappa: &[f32]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"NMAP");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&flags.to_le_bytes());
        b.extend_from_slice(&w.to_le_bytes());
        b.extend_from_slice(&h.to_le_bytes());
        for n in normals {
            for c in n {
                b.extend_from_slice(&c.to_le_bytes());
            }
        }
        for k in kappa {
            b.extend_from_slice(&k.to_le_bytes());
        }
        b
    }

    #[test]
    fn nmap_without_kappa_defaults_to_one_and_cap_applies() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nok.nmap");
        fs::write(&p, nmap_bytes(2, 1, 0, &[[0.0, 0.0, 3.0], [1.0, 0.0, 0.0]], &[])).unwrap();
        let m = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap();
        assert_eq!(m.kappa(0, 0), 1.0);
        assert_eq!(m.kappa(1, 0), 1.0);
        assert_eq!(m.normal(0, 0).unwrap(), Vector3::z());

        let q = dir.path().join("cap.nmap");
        fs::write(&q, nmap_bytes(1, 1, 1, &[[0.0, 1.0, 0.0]], &[250.0])).unwrap();
        let m = load_normal_map(&q, NormalFormat::Nmap, None, KAPPA_CAP).unwrap();
        assert_eq!(m.kappa(0, 0), 100.0);
    }

    #[test]
    fn nmap_format_errors_name_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nmap");
        let mut b = nmap_bytes(1, 1, 0, &[[0.0, 1.0, 0.0]], &[]);
        b[0] = b'X';
        fs::write(&p, &b).unwrap();
        let e = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }), "{e}");

        let b = nmap_bytes(2, 2, 0, &[[0.0, 1.0, 0.0]], &[]);
        fs::write(&p, &b).unwrap();
        let e = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 28, .. }), "{e}");

        let mut b = nmap_bytes(1, 1, 0, &[[0.0, 1.0, 0.0]], &[]);
        b.push(0);
        fs::write(&p, &b).unwrap();
        let e = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 28, .. }), "{e}");

        fs::write(&p, b"NMAP").unwrap();
        let e = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 4, .. }), "{e}");

        let mut b = nmap_bytes(1, 1, 0, &[[0.0, 1.0, 0.0]], &[]);
        b[4] = 2;
        fs::write(&p, &b).unwrap();
        let e = load_normal_map(&p, NormalFormat::Nmap, None, KAPPA_CAP).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 4, .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn png_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.png");
        let k = dir.path().join("k.png");
        let img = image::RgbImage::from_pixel(1, 1, image::Rgb([255, 128, 128]));
        img.save(&p).unwrap();
        image::GrayImage::from_pixel(1, 1, image::Luma([255])).save(&k).unwrap();
        let m = load_normal_map(&p, NormalFormat::from_path(&p), Some(&k), KAPPA_CAP).unwrap();
        let raw = Vector3::new(1.0, 1.0 / 255.0, 1.0 / 255.0);
        assert!((m.normal(0, 0).unwrap() - raw.normalize()).norm() < 1e-12);
        assert!((m.kappa(0, 0) - 100.0).abs() < 1e-12);
        let m = load_normal_map(&p, NormalFormat::Png, None, KAPPA_CAP).unwrap();
        assert_eq!(m.kappa(0, 0), 1.0);
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(
            &p,
            r#"[{"frame": "a.png", "kappa": "ka.png", "timestamp": 0.5}, {"frame": "/abs/b.nmap", "timestamp": 1.0}]"#,
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m[0].frame, dir.path().join("a.png"));
        assert_eq!(m[0].kappa.as_deref(), Some(dir.path().join("ka.png").as_path()));
        assert_eq!(m[1].frame, PathBuf::from("/abs/b.nmap"));
        fs::write(&p, r#"[{"frame": "a", "timestamp": 0, "extra": 1}]"#).unwrap();
        assert!(load_manifest(&p).is_err());
    }

    fn spec_for(frames: Vec<ManhattanFrame>) -> SynthSpec {
        SynthSpec {
            trajectory: frames,
            samples_per_frame: 500,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noise_free_identity_samples_are_axes() {
        let spec = spec_for(vec![ManhattanFrame::identity()]);
        let f = synth_frame(&spec.trajectory[0], &spec, 0).unwrap();
        for s in &f.samples {
            assert!(WORLD_AXES.iter().any(|a| s.n == Vector3::from(*a)), "{}", s.n);
        }
        let c = crate::single_frame::cost(&ManhattanFrame::identity(), &f.samples).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn noise_free_samples_are_frame_columns() {
        let m = ManhattanFrame::new(exp_map(&Vector3::new(0.0, 0.2, 0.0)));
        let spec = spec_for(vec![m]);
        let f = synth_frame(&m, &spec, 0).unwrap();
        let cols: Vec<_> = (0..3).map(|j| m.rotation().column(j)).collect();
        for s in &f.samples {
            assert!(cols.iter().any(|c| (s.n - c).norm() < 1e-12 || (s.n + c).norm() < 1e-12));
        }
    }

    #[test]
    fn synth_is_deterministic_and_map_matches_samples() {
        let mut spec = spec_for(vec![ManhattanFrame::identity(); 2]);
        spec.noise_deg = 3.0;
        spec.outlier_fraction = 0.2;
        let a = synth_frame(&spec.trajectory[0], &spec, 1).unwrap();
        let b = synth_frame(&spec.trajectory[0], &spec, 1).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = synth_frame(&spec.trajectory[0], &spec, 0).unwrap();
        assert_ne!(a.samples, c.samples);
        let from_map = a.map.sample(1).unwrap();
        assert_eq!(from_map.len(), a.samples.len());
        for (m, s) in from_map.iter().zip(&a.samples) {
            assert!((m.n - s.n).amax() < 1e-15);
            assert_eq!(m.kappa, s.kappa);
        }
        for s in &a.samples {
            assert!((s.n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_statistics_match_half_normal() {
        let sigma = 5.0f64;
        let spec = SynthSpec {
            trajectory: vec![ManhattanFrame::identity()],
            noise_deg: sigma,
            samples_per_frame: 100_000,
            seed: 11,
            ..SynthSpec::default()
        };
        let f = synth_frame(&spec.trajectory[0], &spec, 0).unwrap();
        let mean: f64 = f
            .samples
            .iter()
            .zip(&f.labels)
            .map(|(s, l)| {
                let a = Vector3::from(WORLD_AXES[l.unwrap()]);
                s.n.cross(&a).norm().atan2(s.n.dot(&a))
            })
            .sum::<f64>()
            / f.samples.len() as f64;
        let expected = sigma.to_radians() * (2.0 / PI).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn sequence_errors_and_round_trip() {
        assert!(matches!(synth_sequence(&spec_for(vec![])), Err(Error::NoFrames)));
        let frames: Vec<_> = (0..100)
            .map(|i| {
                let yaw = (0.5f64 * i as f64).to_radians();
                ManhattanFrame::from_camera_to_world(exp_map(&Vector3::new(0.0, 0.0, yaw)))
            })
            .collect();
        let mut spec = spec_for(frames);
        spec.samples_per_frame = 16;
        let seq = synth_sequence(&spec).unwrap();
        let rots: Vec<Rotation> = seq.ground_truth.iter().map(|(_, r)| *r).collect();
        for w in rots.windows(2) {
            let d = crate::so3::geodesic_distance(&w[0], &w[1]);
            assert!((d - 0.5f64.to_radians()).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_sequence(&seq, dir.path()).unwrap();
        assert_eq!(load_manifest(&manifest).unwrap().len(), 100);
        let back = Trajectory::read(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        for ((t0, r0), (t1, r1)) in back.iter().zip(seq.ground_truth.iter()) {
            assert!((t0 - t1).abs() < 1e-6);
            let q0 = r0.to_xyzw();
            let q1 = r1.to_xyzw();
            for k in 0..4 {
                assert!((q0[k] - q1[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let mut s = SynthSpec::default();
        s.axis_weights[0] = 0.5;
        assert!(s.validate().is_err());
        let s = SynthSpec {
            outlier_fraction: 1.5,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
        let s = SynthSpec {
            noise_deg: -1.0,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
