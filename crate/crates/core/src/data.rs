//! Voxel time series: ECSF1 ingestion, intensity normalisation, unit-box
//! scaling, point sampling and synthetic dataset generation.
//!
//! # ECSF1 layout
//!
//! A dataset directory holds `manifest.json` and a raw blob:
//!
//! ```json
//! {
//!   "magic": "ECSF1",
//!   "dims": [nx, ny, nz],
//!   "spacing_mm": [dx, dy, dz],
//!   "origin_mm": [0.0, 0.0, 0.0],
//!   "timestamps_s": [t0, t1, ...],
//!   "roi": "all",
//!   "blob": "frames.f32"
//! }
//! ```
//!
//! `timestamps_min` may replace `timestamps_s`. `roi` is either `"all"` or
//! `{"rle": [n0, n1, ...]}`: alternating run lengths over the flattened voxel
//! order, starting with an outside run (which may be 0). The blob is
//! little-endian `f32` ordered `[frame][z][y][x]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::fdsolver::{self, Boundary, FdError, Grid};

pub const MAGIC: &str = "ECSF1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_BLOB: &str = "frames.f32";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad magic {0:?} (expected \"ECSF1\")")]
    BadMagic(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("blob size mismatch: expected {expected} bytes, found {actual}")]
    BlobSize { expected: usize, actual: usize },
    #[error("timestamps must be strictly increasing (index {index}: {prev} then {next})")]
    NonIncreasingTimestamps { index: usize, prev: f64, next: f64 },
    #[error("series needs at least one frame")]
    NoFrames,
    #[error("frame {frame} has {got} voxels, dims give {expected}")]
    FrameSize {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("ROI mask covers {got} voxels, dims give {expected}")]
    RoiSize { expected: usize, got: usize },
    #[error("ROI is empty")]
    EmptyRoi,
    #[error("maximum ROI intensity is {0}, cannot normalise")]
    ZeroRoi(f64),
    #[error("time span is zero; need at least two distinct timestamps")]
    ZeroDuration,
    #[error("scale factors must be positive: {0}")]
    BadScale(String),
    #[error("ROI has {roi} voxels but {requested} samples were requested without replacement")]
    InsufficientRoi { roi: usize, requested: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Solver(#[from] FdError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Time-stamped voxel intensities with a region-of-interest mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSeries {
    /// `[nx, ny, nz]`
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub timestamps_s: Vec<f64>,
    /// One field per timestamp, x fastest.
    pub frames: Vec<Vec<f64>>,
    pub roi: Vec<bool>,
}

impl VoxelSeries {
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.voxel_count();
        if self.frames.is_empty() {
            return Err(DataError::NoFrames);
        }
        if self.timestamps_s.len() != self.frames.len() {
            return Err(DataError::Manifest(format!(
                "{} timestamps for {} frames",
                self.timestamps_s.len(),
                self.frames.len()
            )));
        }
        if let Some(i) = self.timestamps_s.iter().position(|t| !t.is_finite()) {
            return Err(DataError::Manifest(format!("timestamp {i} is not finite")));
        }
        for (i, pair) in self.timestamps_s.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(DataError::NonIncreasingTimestamps {
                    index: i + 1,
                    prev: pair[0],
                    next: pair[1],
                });
            }
        }
        for (frame, f) in self.frames.iter().enumerate() {
            if f.len() != n {
                return Err(DataError::FrameSize {
                    frame,
                    expected: n,
                    got: f.len(),
                });
            }
        }
        if self.roi.len() != n {
            return Err(DataError::RoiSize {
                expected: n,
                got: self.roi.len(),
            });
        }
        if !self.roi.iter().any(|&m| m) {
            return Err(DataError::EmptyRoi);
        }
        if self.spacing_mm.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(DataError::BadScale(format!("spacing {:?}", self.spacing_mm)));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Axes with more than one voxel; these are the spatial inputs of the
    /// network.
    pub fn active_axes(&self) -> Vec<usize> {
        let axes: Vec<usize> = (0..3).filter(|&a| self.dims[a] > 1).collect();
        if axes.is_empty() {
            vec![0]
        } else {
            axes
        }
    }

    pub fn spatial_dim(&self) -> usize {
        self.active_axes().len()
    }

    pub fn voxel_index(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical centre of voxel `idx` in mm.
    pub fn voxel_center(&self, idx: usize) -> [f64; 3] {
        let ijk = self.voxel_index(idx);
        std::array::from_fn(|a| self.origin_mm[a] + (ijk[a] as f64 + 0.5) * self.spacing_mm[a])
    }

    /// Centre coordinates restricted to the active axes.
    pub fn active_center(&self, idx: usize) -> Vec<f64> {
        let c = self.voxel_center(idx);
        self.active_axes().iter().map(|&a| c[a]).collect()
    }

    pub fn roi_indices(&self) -> Vec<usize> {
        self.roi
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.timestamps_s.last().unwrap() - self.timestamps_s[0]
    }

    /// Grid over the active axes, as used by the finite-difference solver.
    pub fn grid(&self, boundary: Boundary) -> Result<Grid, DataError> {
        let axes = self.active_axes();
        Ok(Grid::new(
            axes.iter().map(|&a| self.dims[a]).collect(),
            axes.iter().map(|&a| self.spacing_mm[a]).collect(),
            axes.iter().map(|&a| self.origin_mm[a]).collect(),
            boundary,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoiSpec {
    All(String),
    Rle { rle: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    #[serde(default)]
    origin_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps_min: Option<Vec<f64>>,
    roi: RoiSpec,
    #[serde(default = "default_blob")]
    blob: String,
}

fn default_blob() -> String {
    DEFAULT_BLOB.to_string()
}

/// Alternating run lengths, starting with a run of `false`.
pub fn encode_rle(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_rle(runs: &[usize], n: usize) -> Result<Vec<bool>, DataError> {
    let total: usize = runs.iter().sum();
    if total != n {
        return Err(DataError::RoiSize {
            expected: n,
            got: total,
        });
    }
    let mut mask = Vec::with_capacity(n);
    for (i, &len) in runs.iter().enumerate() {
        mask.extend(std::iter::repeat_n(i % 2 == 1, len));
    }
    Ok(mask)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads an ECSF1 dataset from its manifest (or the directory holding it).
pub fn load_voxel_series(path: impl AsRef<Path>) -> Result<VoxelSeries, DataError> {
    let mpath = manifest_path(path.as_ref());
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    match raw.get("magic").and_then(|m| m.as_str()) {
        Some(MAGIC) => {}
        Some(other) => return Err(DataError::BadMagic(other.to_string())),
        None => return Err(DataError::BadMagic(String::new())),
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| DataError::Manifest(e.to_string()))?;
    let timestamps_s = match (&manifest.timestamps_s, &manifest.timestamps_min) {
        (Some(s), None) => s.clone(),
        (None, Some(m)) => m.iter().map(|t| t * 60.0).collect(),
        _ => {
            return Err(DataError::Manifest(
                "exactly one of timestamps_s / timestamps_min is required".into(),
            ))
        }
    };
    for (i, pair) in timestamps_s.windows(2).enumerate() {
        if !(pair[1] > pair[0]) {
            return Err(DataError::NonIncreasingTimestamps {
                index: i + 1,
                prev: pair[0],
                next: pair[1],
            });
        }
    }
    let n: usize = manifest.dims.iter().product();
    if n == 0 {
        return Err(DataError::Manifest(format!("zero extent in dims {:?}", manifest.dims)));
    }
    let roi = match &manifest.roi {
        RoiSpec::All(s) if s == "all" => vec![true; n],
        RoiSpec::All(s) => return Err(DataError::Manifest(format!("unknown roi {s:?}"))),
        RoiSpec::Rle { rle } => decode_rle(rle, n)?,
    };
    let bpath = mpath.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    let expected = n * timestamps_s.len() * 4;
    if blob.len() != expected {
        return Err(DataError::BlobSize {
            expected,
            actual: blob.len(),
        });
    }
    let frames = blob
        .chunks_exact(n * 4)
        .map(|frame| {
            frame
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        })
        .collect();
    let series = VoxelSeries {
        dims: manifest.dims,
        spacing_mm: manifest.spacing_mm,
        origin_mm: manifest.origin_mm,
        timestamps_s,
        frames,
        roi,
    };
    series.validate()?;
    Ok(series)
}

/// Writes `manifest.json` and `frames.f32` into `dir`. Frame values are
/// stored as `f32`.
pub fn save_voxel_series(series: &VoxelSeries, dir: impl AsRef<Path>) -> Result<(), DataError> {
    series.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let roi = if series.roi.iter().all(|&m| m) {
        RoiSpec::All("all".into())
    } else {
        RoiSpec::Rle {
            rle: encode_rle(&series.roi),
        }
    };
    let manifest = Manifest {
        magic: MAGIC.into(),
        dims: series.dims,
        spacing_mm: series.spacing_mm,
        origin_mm: series.origin_mm,
        timestamps_s: Some(series.timestamps_s.clone()),
        timestamps_min: None,
        roi,
        blob: DEFAULT_BLOB.into(),
    };
    let mut blob = Vec::with_capacity(series.voxel_count() * series.num_frames() * 4);
    for frame in &series.frames {
        for &v in frame {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let bpath = dir.join(DEFAULT_BLOB);
    fs::write(&bpath, blob).map_err(io_err(&bpath))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    Ok(())
}

/// Divides every frame by the maximum intensity inside the ROI across all
/// frames. Negative values are clamped to zero. Returns the scaled series
/// and the divisor `C_s`.
pub fn normalize_intensity(series: &VoxelSeries) -> Result<(VoxelSeries, f64), DataError> {
    series.validate()?;
    let roi = series.roi_indices();
    let max = series
        .frames
        .iter()
        .flat_map(|f| roi.iter().map(move |&i| f[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(DataError::ZeroRoi(max));
    }
    let mut out = series.clone();
    for frame in &mut out.frames {
        for v in frame.iter_mut() {
            *v = (*v / max).max(0.0);
        }
    }
    Ok((out, max))
}

/// Scales between physical units and the unit box the network sees.
///
/// `x̂ = (x − x_origin) / X_s`, `t̂ = (t − t_origin) / T_s`, `Ĉ = C / C_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub x_scale_mm: f64,
    pub t_scale_s: f64,
    pub c_scale: f64,
    pub x_origin_mm: Vec<f64>,
    pub t_origin_s: f64,
}

impl ScaleRecord {
    pub fn new(
        x_scale_mm: f64,
        t_scale_s: f64,
        c_scale: f64,
        x_origin_mm: Vec<f64>,
        t_origin_s: f64,
    ) -> Result<Self, DataError> {
        for (name, v) in [("X_s", x_scale_mm), ("T_s", t_scale_s), ("C_s", c_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DataError::BadScale(format!("{name}={v}")));
            }
        }
        Ok(Self {
            x_scale_mm,
            t_scale_s,
            c_scale,
            x_origin_mm,
            t_origin_s,
        })
    }

    /// No rescaling: coordinates pass through unchanged.
    pub fn identity(spatial_dim: usize) -> Self {
        Self {
            x_scale_mm: 1.0,
            t_scale_s: 1.0,
            c_scale: 1.0,
            x_origin_mm: vec![0.0; spatial_dim],
            t_origin_s: 0.0,
        }
    }

    pub fn to_unit_space(&self, x_mm: &[f64]) -> Vec<f64> {
        x_mm
            .iter()
            .zip(&self.x_origin_mm)
            .map(|(x, o)| (x - o) / self.x_scale_mm)
            .collect()
    }

    pub fn from_unit_space(&self, x_hat: &[f64]) -> Vec<f64> {
        x_hat
            .iter()
            .zip(&self.x_origin_mm)
            .map(|(x, o)| x * self.x_scale_mm + o)
            .collect()
    }

    pub fn to_unit_time(&self, t_s: f64) -> f64 {
        (t_s - self.t_origin_s) / self.t_scale_s
    }

    pub fn from_unit_time(&self, t_hat: f64) -> f64 {
        t_hat * self.t_scale_s + self.t_origin_s
    }

    /// `D = D̂ X_s² / T_s`
    pub fn diffusion_to_physical(&self, d_hat: f64) -> f64 {
        d_hat * self.x_scale_mm * self.x_scale_mm / self.t_scale_s
    }

    pub fn diffusion_to_unit(&self, d_phys: f64) -> f64 {
        d_phys * self.t_scale_s / (self.x_scale_mm * self.x_scale_mm)
    }

    /// `v = v̂ X_s / T_s`
    pub fn velocity_to_physical(&self, v_hat: f64) -> f64 {
        v_hat * self.x_scale_mm / self.t_scale_s
    }

    pub fn velocity_to_unit(&self, v_phys: f64) -> f64 {
        v_phys * self.t_scale_s / self.x_scale_mm
    }

    /// Physical `(D, v)` from unit-box estimates.
    pub fn redimensionalize(&self, d_hat: f64, v_hat: &[f64]) -> (f64, Vec<f64>) {
        (
            self.diffusion_to_physical(d_hat),
            v_hat.iter().map(|&v| self.velocity_to_physical(v)).collect(),
        )
    }

    /// Unit-box `(D̂, v̂)` from physical values.
    pub fn nondimensionalize(&self, d_phys: f64, v_phys: &[f64]) -> (f64, Vec<f64>) {
        (
            self.diffusion_to_unit(d_phys),
            v_phys.iter().map(|&v| self.velocity_to_unit(v)).collect(),
        )
    }
}

/// Unit-box scales for a series: `X_s` is the largest physical extent over
/// the active axes, `T_s = t_T − t_0`.
pub fn nondimensionalize(series: &VoxelSeries, c_scale: f64) -> Result<ScaleRecord, DataError> {
    let duration = series.duration_s();
    if !(duration > 0.0) {
        return Err(DataError::ZeroDuration);
    }
    let axes = series.active_axes();
    let extent = axes
        .iter()
        .map(|&a| series.dims[a] as f64 * series.spacing_mm[a])
        .fold(0.0, f64::max);
    ScaleRecord::new(
        extent,
        duration,
        c_scale,
        axes.iter().map(|&a| series.origin_mm[a]).collect(),
        series.timestamps_s[0],
    )
}

/// Where collocation points sit in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollocationTimes {
    /// At the acquisition times only.
    #[default]
    Frames,
    /// Uniformly distributed over `[t_0, t_T]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Collocation points per frame.
    pub k_ade: usize,
    /// Data points per frame.
    pub k_data: usize,
    pub seed: u64,
    #[serde(default)]
    pub with_replacement: bool,
    /// Map coordinates into the unit box; otherwise physical units are kept.
    #[serde(default = "default_true")]
    pub unit_box: bool,
    #[serde(default)]
    pub collocation_times: CollocationTimes,
}

fn default_true() -> bool {
    true
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k_ade: 5000,
            k_data: 5000,
            seed: 0,
            with_replacement: false,
            unit_box: true,
            collocation_times: CollocationTimes::Frames,
        }
    }
}

/// Sampled training points, in the coordinates described by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub spatial_dim: usize,
    /// `K_ade · frames` rows of `[x̂.., t̂]`.
    pub collocation: Tensor,
    /// `K_data · frames` rows of `[x̂.., t̂]`.
    pub data_points: Tensor,
    /// Normalised concentrations at `data_points`, copied from the frames.
    pub data_values: Vec<f64>,
    pub scale: ScaleRecord,
}

impl SampleBatch {
    pub fn len_ade(&self) -> usize {
        self.collocation.rows()
    }

    pub fn len_data(&self) -> usize {
        self.data_points.rows()
    }
}

/// Normalises intensities and works out the scale record used for
/// training.
pub fn prepare_series(
    series: &VoxelSeries,
    unit_box: bool,
) -> Result<(VoxelSeries, ScaleRecord), DataError> {
    let (normalized, c_scale) = normalize_intensity(series)?;
    let scale = if unit_box {
        nondimensionalize(&normalized, c_scale)?
    } else {
        if !(series.duration_s() > 0.0) {
            return Err(DataError::ZeroDuration);
        }
        ScaleRecord {
            c_scale,
            ..ScaleRecord::identity(series.spatial_dim())
        }
    };
    Ok((normalized, scale))
}

/// Draws collocation and data points uniformly over ROI voxel centres for
/// every frame. `series` should already be normalised; `scale` maps the
/// coordinates.
pub fn sample_points(
    series: &VoxelSeries,
    scale: &ScaleRecord,
    config: &SamplingConfig,
) -> Result<SampleBatch, DataError> {
    series.validate()?;
    let roi = series.roi_indices();
    let needed = config.k_ade.max(config.k_data);
    if needed == 0 {
        return Err(DataError::Spec("K_ade and K_data must be positive".into()));
    }
    if !config.with_replacement && roi.len() < needed {
        return Err(DataError::InsufficientRoi {
            roi: roi.len(),
            requested: needed,
        });
    }
    let d = series.spatial_dim();
    let cols = d + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers: Vec<Vec<f64>> = roi
        .iter()
        .map(|&i| scale.to_unit_space(&series.active_center(i)))
        .collect();
    let (t_first, t_last) = (
        series.timestamps_s[0],
        *series.timestamps_s.last().unwrap(),
    );

    let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> {
        if config.with_replacement {
            (0..k).map(|_| rng.random_range(0..roi.len())).collect()
        } else {
            index::sample(rng, roi.len(), k).into_vec()
        }
    };

    let frames = series.num_frames();
    let mut colloc = Vec::with_capacity(frames * config.k_ade * cols);
    let mut data = Vec::with_capacity(frames * config.k_data * cols);
    let mut values = Vec::with_capacity(frames * config.k_data);
    for (s, &t) in series.timestamps_s.iter().enumerate() {
        for pick in draw(&mut rng, config.k_ade) {
            colloc.extend_from_slice(&centers[pick]);
            let time = match config.collocation_times {
                CollocationTimes::Frames => t,
                CollocationTimes::Uniform => rng.random_range(t_first..=t_last),
            };
            colloc.push(scale.to_unit_time(time));
        }
        for pick in draw(&mut rng, config.k_data) {
            data.extend_from_slice(&centers[pick]);
            data.push(scale.to_unit_time(t));
            values.push(series.frames[s][roi[pick]]);
        }
    }
    Ok(SampleBatch {
        spatial_dim: d,
        collocation: Tensor::matrix(frames * config.k_ade, cols, colloc),
        data_points: Tensor::matrix(frames * config.k_data, cols, data),
        data_values: values,
        scale: scale.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Closed-form advected Gaussian.
    #[default]
    Analytic,
    /// Finite-difference solve seeded with the Gaussian at the first frame time.
    Fd,
}

/// Recipe for a synthetic dataset. Spatial vectors have one entry per
/// active axis (1 to 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: Vec<usize>,
    pub spacing_mm: Vec<f64>,
    #[serde(default)]
    pub origin_mm: Option<Vec<f64>>,
    #[serde(rename = "D_mm2_per_s")]
    pub diffusion: f64,
    #[serde(rename = "v_mm_per_s")]
    pub velocity: Vec<f64>,
    pub x0_mm: Vec<f64>,
    #[serde(default)]
    pub t_offset_s: f64,
    #[serde(default)]
    pub frame_times_s: Option<Vec<f64>>,
    #[serde(default)]
    pub frame_times_min: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: Generator,
    /// Solver step; required for `fd`, checked for stability whenever set.
    #[serde(default)]
    pub dt_s: Option<f64>,
    #[serde(default)]
    pub boundary: Boundary,
}

impl SyntheticSpec {
    pub fn frame_times(&self) -> Result<Vec<f64>, DataError> {
        match (&self.frame_times_s, &self.frame_times_min) {
            (Some(s), None) => Ok(s.clone()),
            (None, Some(m)) => Ok(m.iter().map(|t| t * 60.0).collect()),
            _ => Err(DataError::Spec(
                "exactly one of frame_times_s / frame_times_min is required".into(),
            )),
        }
    }

    fn grid(&self) -> Result<Grid, DataError> {
        let d = self.dims.len();
        let origin = self.origin_mm.clone().unwrap_or_else(|| vec![0.0; d]);
        Ok(Grid::new(
            self.dims.clone(),
            self.spacing_mm.clone(),
            origin,
            self.boundary,
        )?)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let d = self.dims.len();
        if !(1..=3).contains(&d) {
            return Err(DataError::Spec(format!("need 1 to 3 axes, got {d}")));
        }
        for (name, len) in [
            ("spacing_mm", self.spacing_mm.len()),
            ("v_mm_per_s", self.velocity.len()),
            ("x0_mm", self.x0_mm.len()),
            ("origin_mm", self.origin_mm.as_ref().map_or(d, Vec::len)),
        ] {
            if len != d {
                return Err(DataError::Spec(format!("{name} has {len} entries, dims has {d}")));
            }
        }
        if !(self.diffusion > 0.0 && self.diffusion.is_finite()) {
            return Err(DataError::Spec(format!("D must be positive, got {}", self.diffusion)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Spec(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let times = self.frame_times()?;
        if times.is_empty() {
            return Err(DataError::Spec("no frame times".into()));
        }
        for (i, pair) in times.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(DataError::NonIncreasingTimestamps {
                    index: i + 1,
                    prev: pair[0],
                    next: pair[1],
                });
            }
        }
        if times[0] + self.t_offset_s <= 0.0 {
            return Err(DataError::Spec(format!(
                "first frame time plus t_offset must be positive, got {}",
                times[0] + self.t_offset_s
            )));
        }
        let grid = self.grid()?;
        if let Some(dt) = self.dt_s {
            let limits = fdsolver::stability_limits(&grid, self.diffusion, &self.velocity);
            if !(dt > 0.0 && dt <= limits.max_dt()) {
                return Err(FdError::Unstable {
                    dt,
                    diffusion_limit: limits.diffusion,
                    advection_limit: limits.advection,
                    combined_limit: limits.combined,
                }
                .into());
            }
        } else if self.generator == Generator::Fd {
            return Err(DataError::Spec("generator \"fd\" needs dt_s".into()));
        }
        Ok(())
    }
}

/// Ground truth stored next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    #[serde(rename = "D")]
    pub diffusion: f64,
    pub v: Vec<f64>,
    pub x0: Vec<f64>,
    pub sigma: f64,
    pub generator: Generator,
    pub t_offset_s: f64,
    pub seed: u64,
}

impl TruthManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("truth serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))
    }
}

/// Noise-free frames of the synthetic recipe.
pub fn clean_frames(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>, DataError> {
    spec.validate()?;
    let grid = spec.grid()?;
    let times = spec.frame_times()?;
    let field_at = |t: f64| {
        fdsolver::analytic_field(&grid, t, spec.diffusion, &spec.velocity, &spec.x0_mm, spec.t_offset_s)
    };
    match spec.generator {
        Generator::Analytic => Ok(times.iter().map(|&t| field_at(t)).collect::<Result<_, _>>()?),
        Generator::Fd => {
            let dt = spec.dt_s.expect("validated");
            let mut frames = vec![field_at(times[0])?];
            for pair in times.windows(2) {
                let ratio = (pair[1] - pair[0]) / dt;
                let steps = ratio.round();
                if (ratio - steps).abs() > 1e-6 * ratio.max(1.0) || steps < 1.0 {
                    return Err(DataError::Spec(format!(
                        "frame gap {} is not a multiple of dt_s={dt}",
                        pair[1] - pair[0]
                    )));
                }
                let last = frames.last().unwrap();
                let stepped = fdsolver::solve_ade_fd(
                    &grid,
                    last,
                    spec.diffusion,
                    &spec.velocity,
                    dt,
                    steps as usize,
                )?;
                frames.push(stepped.into_iter().last().unwrap());
            }
            Ok(frames)
        }
    }
}

/// Builds a synthetic series plus its truth record.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(VoxelSeries, TruthManifest), DataError> {
    let mut frames = clean_frames(spec)?;
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for frame in &mut frames {
            for v in frame.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let d = spec.dims.len();
    let origin = spec.origin_mm.clone().unwrap_or_else(|| vec![0.0; d]);
    let mut dims = [1usize; 3];
    let mut spacing = [1.0f64; 3];
    let mut origin3 = [0.0f64; 3];
    dims[..d].copy_from_slice(&spec.dims);
    spacing[..d].copy_from_slice(&spec.spacing_mm);
    origin3[..d].copy_from_slice(&origin);
    let n = dims.iter().product();
    let series = VoxelSeries {
        dims,
        spacing_mm: spacing,
        origin_mm: origin3,
        timestamps_s: spec.frame_times()?,
        frames,
        roi: vec![true; n],
    };
    series.validate()?;
    let truth = TruthManifest {
        diffusion: spec.diffusion,
        v: spec.velocity.clone(),
        x0: spec.x0_mm.clone(),
        sigma: spec.noise_sigma,
        generator: spec.generator,
        t_offset_s: spec.t_offset_s,
        seed: spec.seed,
    };
    Ok((series, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_series() -> VoxelSeries {
        VoxelSeries {
            dims: [4, 2, 1],
            spacing_mm: [0.5, 0.5, 1.0],
            origin_mm: [0.0; 3],
            timestamps_s: vec![0.0, 60.0],
            frames: vec![
                vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
                vec![8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0],
            ],
            roi: vec![true; 8],
        }
    }

    #[test]
    fn rle_round_trip() {
        let mask = vec![false, false, true, true, true, false, true];
        let runs = encode_rle(&mask);
        assert_eq!(runs, vec![2, 3, 1, 1]);
        assert_eq!(decode_rle(&runs, 7).unwrap(), mask);
        assert_eq!(encode_rle(&[true, true]), vec![0, 2]);
        assert!(decode_rle(&[1, 2], 4).is_err());
    }

    #[test]
    fn normalisation_uses_global_roi_max() {
        let mut s = tiny_series();
        s.frames[0][0] = 200.0;
        s.frames[0][1] = 50.0;
        let (n, c) = normalize_intensity(&s).unwrap();
        assert_eq!(c, 200.0);
        assert_eq!(n.frames[0][1], 0.25);
    }

    #[test]
    fn normalisation_ignores_out_of_roi_spike() {
        let mut s = tiny_series();
        s.frames = vec![vec![1000.0, 5.0, 10.0, 0.0, 1.0, 2.0, 3.0, 4.0]];
        s.timestamps_s = vec![0.0];
        s.roi = vec![false, true, true, true, true, true, true, true];
        let (n, c) = normalize_intensity(&s).unwrap();
        assert_eq!(c, 10.0);
        assert_eq!(n.frames[0][1], 0.5);
    }

    #[test]
    fn normalised_series_is_fixed_point() {
        let (once, _) = normalize_intensity(&tiny_series()).unwrap();
        let (twice, c) = normalize_intensity(&once).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(once, twice);
    }

    #[test]
    fn all_zero_roi_rejected() {
        let mut s = tiny_series();
        s.frames = vec![vec![0.0; 8]; 2];
        assert!(matches!(normalize_intensity(&s), Err(DataError::ZeroRoi(_))));
    }

    #[test]
    fn redimensionalisation_example() {
        let scale = ScaleRecord::new(10.0, 10800.0, 1.0, vec![0.0], 0.0).unwrap();
        let d = scale.diffusion_to_physical(0.0135);
        assert!((d - 1.25e-4).abs() < 1e-16);
        let ident = ScaleRecord::identity(2);
        assert_eq!(ident.diffusion_to_physical(0.37), 0.37);
    }

    #[test]
    fn scales_from_series() {
        let s = tiny_series();
        let rec = nondimensionalize(&s, 1.0).unwrap();
        assert_eq!(rec.x_scale_mm, 2.0);
        assert_eq!(rec.t_scale_s, 60.0);
        assert_eq!(s.spatial_dim(), 2);
        let mut one = s.clone();
        one.frames.truncate(1);
        one.timestamps_s.truncate(1);
        assert!(matches!(nondimensionalize(&one, 1.0), Err(DataError::ZeroDuration)));
    }

    #[test]
    fn sampling_is_seeded_and_covers_roi() {
        let s = tiny_series();
        let scale = ScaleRecord::identity(2);
        let cfg = SamplingConfig {
            k_ade: 8,
            k_data: 8,
            seed: 3,
            ..SamplingConfig::default()
        };
        let a = sample_points(&s, &scale, &cfg).unwrap();
        let b = sample_points(&s, &scale, &cfg).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<f64> = a.data_values[..8].to_vec();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, s.frames[0]);
        let too_many = SamplingConfig { k_data: 9, ..cfg.clone() };
        assert!(matches!(
            sample_points(&s, &scale, &too_many),
            Err(DataError::InsufficientRoi { roi: 8, requested: 9 })
        ));
        let with = SamplingConfig {
            with_replacement: true,
            ..too_many
        };
        assert_eq!(sample_points(&s, &scale, &with).unwrap().len_data(), 18);
    }
}
