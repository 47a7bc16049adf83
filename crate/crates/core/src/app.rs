//! Command implementations behind the `mwrot` binary: sequence estimation,
//! synthetic data, evaluation, normaliser fitting and ground segmentation.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Deserializer, Serialize};

use crate::distribution::KappaSpline;
use crate::error::{Error, Result};
use crate::evaluation::{align, alignment_csv, AlignmentResult, Trajectory};
use crate::multi_frame::{Tracker, TrackerConfig};
use crate::normals::{
    default_stride, load_manifest, load_normal_map, synth_sequence, write_sequence, NormalFormat,
    NormalMap, NormalSample, SynthSpec, KAPPA_CAP,
};
use crate::single_frame::{optimize, FrameEstimate, LmConfig, ManhattanFrame};
use crate::so3::{exp_map, Rotation};

fn required_option<'de, D, T>(d: D) -> std::result::Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::deserialize(d)
}

/// Settings for [`cmd_estimate`]. Every field must be present in the JSON
/// file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Pixel stride; `null` picks the smallest stride keeping at most 8192
    /// samples.
    #[serde(deserialize_with = "required_option")]
    pub stride: Option<usize>,
    pub kappa_cap: f64,
    pub lm: LmConfig,
    /// Sliding-window length `n`.
    pub window: usize,
    /// Smoothness covariance in deg².
    pub smoothness_deg2: f64,
    pub huber_delta: f64,
    pub single_frame_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrackerConfig::default();
        Self {
            stride: None,
            kappa_cap: KAPPA_CAP,
            lm: LmConfig::default(),
            window: t.window,
            smoothness_deg2: t.smoothness_variance.to_degrees().to_degrees(),
            huber_delta: t.huber_delta,
            single_frame_only: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.tracker_config().validate()?;
        if self.stride == Some(0) || !(self.kappa_cap > 0.0) {
            return Err(Error::InvalidInput(
                "stride must be >= 1 and kappa_cap positive".into(),
            ));
        }
        Ok(())
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            window: self.window,
            smoothness_variance: self.smoothness_deg2.to_radians().to_radians(),
            huber_delta: self.huber_delta,
            ..TrackerConfig::default()
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// What happened to one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameStatus {
    Ok,
    /// The frame could not be used; the message says why.
    Dropped(String),
}

/// Per-frame pipeline output.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub status: FrameStatus,
    /// Camera-to-world rotation reported for the frame, if any.
    pub pose: Option<Rotation>,
    pub single: Option<FrameEstimate>,
    /// Huber weight of the frame's measurement in the window.
    pub measurement_weight: Option<f64>,
}

impl FrameRecord {
    /// Eigenvalues of the single-frame information, ascending.
    pub fn information_eigenvalues(&self) -> Option<[f64; 3]> {
        self.single.as_ref().map(|s| {
            let mut e: Vec<f64> = SymmetricEigen::new(s.information).eigenvalues.iter().copied().collect();
            e.sort_by(f64::total_cmp);
            [e[0], e[1], e[2]]
        })
    }
}

/// Single-frame optimisation followed by sliding-window smoothing, with the
/// smoothed estimate fed back as the next initialisation.
///
/// In single-frame-only mode each frame starts from the identity and no
/// smoothing happens.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    tracker: Option<Tracker>,
    frames: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let tracker = if config.single_frame_only {
            None
        } else {
            Some(Tracker::new(config.tracker_config())?)
        };
        Ok(Self {
            config,
            tracker,
            frames: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn tracker(&self) -> Option<&Tracker> {
        self.tracker.as_ref()
    }

    /// Initialisation for the next single-frame solve.
    pub fn next_init(&self) -> ManhattanFrame {
        self.tracker
            .as_ref()
            .and_then(Tracker::latest)
            .map(ManhattanFrame::from_camera_to_world)
            .unwrap_or_else(ManhattanFrame::identity)
    }

    /// Samples a loaded map with the configured stride.
    pub fn sample_map(&self, map: &NormalMap) -> Result<Vec<NormalSample>> {
        let stride = self
            .config
            .stride
            .unwrap_or_else(|| default_stride(map.width(), map.height()));
        map.sample(stride)
    }

    /// Processes one frame. `samples` is the loading outcome; input errors
    /// mark the frame dropped instead of failing the stream.
    pub fn process(&mut self, timestamp: f64, samples: Result<Vec<NormalSample>>) -> Result<FrameRecord> {
        let index = self.frames;
        self.frames += 1;
        let single = match samples.and_then(|s| optimize(&s, &self.next_init(), &self.config.lm)) {
            Err(e) if e.exit_code() == 3 => return Err(e),
            other => other,
        };
        self.process_estimate(index, timestamp, single)
    }

    /// Feeds an externally computed single-frame result (or its failure)
    /// into the tracker.
    pub fn process_estimate(
        &mut self,
        index: usize,
        timestamp: f64,
        single: Result<FrameEstimate>,
    ) -> Result<FrameRecord> {
        let mut record = FrameRecord {
            index,
            timestamp,
            status: FrameStatus::Ok,
            pose: None,
            single: None,
            measurement_weight: None,
        };
        let tracker = match &mut self.tracker {
            None => {
                match single {
                    Ok(est) => {
                        record.pose = Some(est.frame.camera_to_world());
                        record.single = Some(est);
                    }
                    Err(e) => {
                        log::warn!("frame {index}: {e}; no pose emitted");
                        record.status = FrameStatus::Dropped(e.to_string());
                    }
                }
                return Ok(record);
            }
            Some(t) => t,
        };
        let out = match single {
            Ok(est) => {
                let out = tracker.track(est.frame.camera_to_world(), est.information)?;
                record.single = Some(est);
                out
            }
            Err(e) => {
                log::warn!("frame {index}: {e}; tracking on smoothness alone");
                record.status = FrameStatus::Dropped(e.to_string());
                tracker.track_dropped()?
            }
        };
        if out.report.regularized {
            log::debug!("frame {index}: window has unobserved directions");
        }
        record.pose = Some(out.estimate);
        record.measurement_weight = Some(out.measurement_weight);
        Ok(record)
    }
}

/// Header of the per-frame CSV written by [`cmd_estimate`].
pub const FRAME_CSV_HEADER: &str =
    "frame_index,timestamp,status,cost,iterations,converged,info_eig_min,info_eig_mid,info_eig_max,huber_weight";

fn frame_csv_line(r: &FrameRecord) -> String {
    let status = match &r.status {
        FrameStatus::Ok => "ok",
        FrameStatus::Dropped(_) => "dropped",
    };
    let mut line = format!("{},{:.6},{status}", r.index, r.timestamp);
    match (&r.single, r.information_eigenvalues()) {
        (Some(s), Some(e)) => {
            let _ = write!(
                line,
                ",{:.9e},{},{},{:.9e},{:.9e},{:.9e}",
                s.cost, s.iterations, s.converged, e[0], e[1], e[2]
            );
        }
        _ => line.push_str(",,,,,,"),
    }
    match r.measurement_weight {
        Some(w) => {
            let _ = write!(line, ",{w:.9e}");
        }
        None => line.push(','),
    }
    line
}

/// Result of [`cmd_estimate`].
#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub trajectory: Trajectory,
    pub records: Vec<FrameRecord>,
}

impl EstimateOutput {
    pub fn dropped(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r.status, FrameStatus::Dropped(_)))
            .count()
    }
}

/// Runs the pipeline over a manifest, in memory.
pub fn estimate_sequence(manifest: &Path, config: &PipelineConfig) -> Result<EstimateOutput> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::NoFrames);
    }
    let mut pipeline = Pipeline::new(config.clone())?;
    let mut trajectory = Trajectory::default();
    let mut records = Vec::with_capacity(entries.len());
    for entry in &entries {
        let samples = load_normal_map(
            &entry.frame,
            NormalFormat::from_path(&entry.frame),
            entry.kappa.as_deref(),
            config.kappa_cap,
        )
        .and_then(|map| pipeline.sample_map(&map));
        let record = pipeline.process(entry.timestamp, samples)?;
        if let Some(pose) = record.pose {
            trajectory.push(record.timestamp, pose)?;
        }
        log::info!(
            "frame {} t={:.6}: {}",
            record.index,
            record.timestamp,
            record
                .information_eigenvalues()
                .map(|e| format!("info eigenvalues {:.3e} {:.3e} {:.3e}", e[0], e[1], e[2]))
                .unwrap_or_else(|| "dropped".into())
        );
        records.push(record);
    }
    Ok(EstimateOutput { trajectory, records })
}

/// `estimate`: writes the trajectory and a per-frame CSV.
pub fn cmd_estimate(
    manifest: &Path,
    config: &PipelineConfig,
    out_traj: &Path,
    out_csv: &Path,
) -> Result<EstimateOutput> {
    let out = estimate_sequence(manifest, config)?;
    out.trajectory.write(out_traj)?;
    let mut csv = String::from(FRAME_CSV_HEADER);
    csv.push('\n');
    for r in &out.records {
        csv.push_str(&frame_csv_line(r));
        csv.push('\n');
    }
    fs::write(out_csv, csv).map_err(|e| Error::io(out_csv, e))?;
    Ok(out)
}

/// Camera looking horizontally along world `+X`, with world `+Z` up
/// (camera x right, y down, z forward).
pub fn level_camera() -> Rotation {
    Rotation::from_matrix(&Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0))
}

/// Ground-truth trajectory of a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySource {
    /// Camera-to-world quaternions `[x, y, z, w]`, one per frame.
    Quaternions(Vec<[f64; 4]>),
    /// Level camera yawing about world up at a constant rate, optionally
    /// pitched about its own x axis.
    YawSweep {
        frames: usize,
        start_deg: f64,
        step_deg: f64,
        #[serde(default)]
        pitch_deg: f64,
    },
}

impl TrajectorySource {
    /// Camera-to-world rotations.
    pub fn rotations(&self) -> Vec<Rotation> {
        match self {
            TrajectorySource::Quaternions(q) => q
                .iter()
                .map(|q| Rotation::from_xyzw(q[0], q[1], q[2], q[3]))
                .collect(),
            TrajectorySource::YawSweep {
                frames,
                start_deg,
                step_deg,
                pitch_deg,
            } => {
                let pitch = exp_map(&Vector3::new(pitch_deg.to_radians(), 0.0, 0.0));
                let base = level_camera().compose(&pitch);
                (0..*frames)
                    .map(|k| {
                        let yaw = (start_deg + step_deg * k as f64).to_radians();
                        exp_map(&Vector3::new(0.0, 0.0, yaw)).compose(&base)
                    })
                    .collect()
            }
        }
    }
}

fn default_weights() -> [f64; 6] {
    [1.0 / 6.0; 6]
}

fn one() -> f64 {
    1.0
}

fn default_interval() -> f64 {
    1.0 / 30.0
}

/// JSON description read by [`cmd_synth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub trajectory: TrajectorySource,
    #[serde(default = "default_weights")]
    pub axis_weights: [f64; 6],
    #[serde(default)]
    pub noise_deg: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    pub samples_per_frame: usize,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "one")]
    pub inlier_kappa: f64,
    #[serde(default = "one")]
    pub outlier_kappa: f64,
    #[serde(default = "default_interval")]
    pub frame_interval: f64,
    pub seed: u64,
}

impl SynthFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_spec(&self) -> SynthSpec {
        SynthSpec {
            trajectory: self
                .trajectory
                .rotations()
                .into_iter()
                .map(ManhattanFrame::from_camera_to_world)
                .collect(),
            axis_weights: self.axis_weights,
            noise_deg: self.noise_deg,
            outlier_fraction: self.outlier_fraction,
            samples_per_frame: self.samples_per_frame,
            width: self.width,
            inlier_kappa: self.inlier_kappa,
            outlier_kappa: self.outlier_kappa,
            frame_interval: self.frame_interval,
            seed: self.seed,
        }
    }
}

/// `synth`: writes NMAP frames, `manifest.json` and `groundtruth.txt`.
/// Returns the manifest path.
pub fn cmd_synth(spec: &SynthFile, out_dir: &Path) -> Result<PathBuf> {
    let seq = synth_sequence(&spec.to_spec())?;
    write_sequence(&seq, out_dir)
}

/// Result of [`cmd_eval`], printable as the command's report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub alignment: AlignmentResult,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.alignment;
        let q = a.symmetry.to_xyzw();
        writeln!(f, "frames        {}", a.summary.count)?;
        writeln!(f, "dropped       {}", a.dropped)?;
        writeln!(f, "mean ARE      {:.3} deg", a.summary.mean_deg())?;
        writeln!(f, "median ARE    {:.3} deg", a.summary.median_deg())?;
        writeln!(f, "max ARE       {:.3} deg", a.summary.max_deg())?;
        write!(
            f,
            "symmetry      #{} (qx={:.6} qy={:.6} qz={:.6} qw={:.6})",
            a.symmetry_index, q[0], q[1], q[2], q[3]
        )
    }
}

/// `eval`: aligns `est` to `gt` and optionally writes per-frame errors.
pub fn cmd_eval(est: &Path, gt: &Path, csv: Option<&Path>) -> Result<EvalReport> {
    let est_t = Trajectory::read(est)?;
    let gt_t = Trajectory::read(gt)?;
    let alignment = align(&est_t, &gt_t)?;
    if let Some(path) = csv {
        fs::write(path, alignment_csv(&est_t, &alignment)).map_err(|e| Error::io(path, e))?;
    }
    Ok(EvalReport { alignment })
}

/// `fit-normalizer`: fits the default table and writes the sidecar.
pub fn cmd_fit_normalizer(out: &Path) -> Result<KappaSpline> {
    let spline = KappaSpline::fit_default()?;
    spline.write(out)?;
    Ok(spline)
}

/// Per-pixel ground labels for a normal map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundMask {
    width: usize,
    height: usize,
    ground: Vec<bool>,
}

impl GroundMask {
    /// Marks valid pixels whose normal is within `threshold` (radians) of
    /// world up seen from `frame`.
    pub fn from_normals(map: &NormalMap, frame: &ManhattanFrame, threshold: f64) -> Result<Self> {
        Self::from_up(map, &frame.up_in_camera(), threshold)
    }

    /// Marks valid pixels whose normal is within `threshold` (radians) of
    /// the camera-frame direction `up`.
    pub fn from_up(map: &NormalMap, up: &Vector3<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidInput(format!(
                "threshold must lie in (0, 90) degrees, got {}",
                threshold.to_degrees()
            )));
        }
        let up = up.normalize();
        let mut ground = Vec::with_capacity(map.len());
        for y in 0..map.height() {
            for x in 0..map.width() {
                ground.push(
                    map.normal(x, y)
                        .is_some_and(|n| n.cross(&up).norm().atan2(n.dot(&up)) < threshold),
                );
            }
        }
        Ok(Self {
            width: map.width(),
            height: map.height(),
            ground,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_ground(&self, x: usize, y: usize) -> bool {
        self.ground[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.ground.iter().filter(|g| **g).count()
    }

    /// Binary PGM (P5): 255 for ground, 0 otherwise.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.ground.iter().map(|g| if *g { 255u8 } else { 0 }));
        buf
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Where `segment` takes the frame's rotation from.
#[derive(Debug, Clone)]
pub enum RotationSource<'a> {
    /// Entry `index` of a trajectory file.
    Trajectory { path: &'a Path, index: usize },
    /// A fresh single-frame estimate. Its axis labelling is arbitrary, so
    /// up is taken as the signed Manhattan axis closest to camera `−y`
    /// (an upright camera).
    SingleFrame,
}

/// Signed axis of `frame` closest to camera `−y`.
pub fn upright_axis(frame: &ManhattanFrame) -> Vector3<f64> {
    let m = frame.rotation().matrix();
    let j = (0..3)
        .max_by(|a, b| m[(1, *a)].abs().total_cmp(&m[(1, *b)].abs()))
        .unwrap();
    let col = m.column(j).into_owned();
    if col.y > 0.0 {
        -col
    } else {
        col
    }
}

/// `segment`: thresholds normals against world up and writes a PGM mask.
pub fn cmd_segment(
    frame: &Path,
    source: RotationSource<'_>,
    threshold_deg: f64,
    out: &Path,
) -> Result<GroundMask> {
    let map = load_normal_map(frame, NormalFormat::from_path(frame), None, KAPPA_CAP)?;
    let up = match source {
        RotationSource::Trajectory { path, index } => {
            let traj = Trajectory::read(path)?;
            let (_, r) = traj.get(index).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{}: no rotation for frame {index} ({} entries)",
                    path.display(),
                    traj.len()
                ))
            })?;
            ManhattanFrame::from_camera_to_world(*r).up_in_camera()
        }
        RotationSource::SingleFrame => {
            let samples = map.sample(default_stride(map.width(), map.height()))?;
            let est = optimize(&samples, &ManhattanFrame::identity(), &LmConfig::default())?;
            upright_axis(&est.frame)
        }
    };
    let mask = GroundMask::from_up(&map, &up, threshold_deg.to_radians())?;
    mask.write_pgm(out)?;
    Ok(mask)
}
