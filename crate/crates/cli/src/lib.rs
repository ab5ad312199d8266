//! Batch entry points behind the `ecs-pinn` binary.
//!
//! Each command writes only inside its output directory and finishes by
//! atomically writing a [`manifest::RunManifest`] that lists its inputs,
//! outputs and effective configuration.

pub mod manifest;
pub mod pgm;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ecs_pinn::data::{self, DataError, SyntheticSpec, VoxelSeries};
use ecs_pinn::physics::{PecletReport, VelocityMode, DEFAULT_CHARACTERISTIC_LENGTH_MM};
use ecs_pinn::trainer::{self, EpochRow, PinnModel, TrainError, TrainRecord, TrainingConfig};

use manifest::{write_atomic, RunLog, RUN_MANIFEST_FILE};

pub const RECORD_FILE: &str = "train_record.csv";
pub const REPORT_FILE: &str = "peclet_report.txt";

/// Failure classes with fixed process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or spec: exit 2.
    Usage(String),
    /// Missing or unreadable inputs, unwritable outputs: exit 3.
    Io(String),
    /// Non-finite values during training: exit 4.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Dataset and model file problems are input errors; everything else in
/// the data layer is a bad recipe or configuration.
fn data_err(e: DataError) -> CliError {
    match e {
        DataError::MissingFile(_)
        | DataError::Io { .. }
        | DataError::BadMagic(_)
        | DataError::Manifest(_)
        | DataError::BlobSize { .. }
        | DataError::NonIncreasingTimestamps { .. }
        | DataError::NoFrames
        | DataError::FrameSize { .. }
        | DataError::RoiSize { .. }
        | DataError::EmptyRoi
        | DataError::ZeroRoi(_)
        | DataError::ZeroDuration => CliError::Io(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Data(d) => data_err(d),
        TrainError::ModelFile { .. } => CliError::Io(e.to_string()),
        TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
        TrainError::Config(_) | TrainError::Physics(_) | TrainError::Network(_) => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Numerical(e.to_string()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Generates a synthetic ECSF1 dataset plus its ground truth.
pub fn cmd_gen(spec_file: &Path, out_dir: &Path, seed: Option<u64>) -> Result<PathBuf, CliError> {
    let mut log = RunLog::start("gen");
    let mut spec: SyntheticSpec = read_json(spec_file)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (series, truth) = data::generate_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(out_dir)?;
    data::save_voxel_series(&series, out_dir).map_err(data_err)?;
    let truth_path = out_dir.join(data::TRUTH_FILE);
    truth.save(&truth_path).map_err(data_err)?;
    log.config = to_value(&spec);
    log.seed = Some(spec.seed);
    log.inputs.push(spec_file.to_path_buf());
    log.outputs = vec![
        out_dir.join(data::MANIFEST_FILE),
        out_dir.join(data::DEFAULT_BLOB),
        truth_path,
    ];
    log.finish(out_dir)
}

/// Overrides applied on top of a training config file.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub mode: Option<VelocityMode>,
    pub quiet: bool,
}

pub fn load_training_config(
    config_file: Option<&Path>,
    overrides: &TrainOverrides,
) -> Result<TrainingConfig, CliError> {
    let mut config = match config_file {
        Some(p) => read_json(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(e) = overrides.epochs {
        config.epochs = e;
    }
    if let Some(m) = overrides.mode {
        config.velocity_mode = m;
    }
    config.validate().map_err(train_err)?;
    Ok(config)
}

/// Trains on a dataset; writes the model, the per-epoch record and a
/// manifest. Returns the final telemetry row.
pub fn cmd_train(
    config_file: Option<&Path>,
    dataset: &Path,
    out_dir: &Path,
    overrides: &TrainOverrides,
) -> Result<EpochRow, CliError> {
    let mut log = RunLog::start("train");
    let config = load_training_config(config_file, overrides)?;
    let series = data::load_voxel_series(dataset).map_err(data_err)?;
    create_dir(out_dir)?;
    let every = (config.epochs / 20).max(1);
    let quiet = overrides.quiet;
    let result = trainer::train_series(&config, &series, |r| {
        if !quiet && (r.epoch % every == 0 || r.epoch + 1 == config.epochs) {
            eprintln!(
                "epoch {:>6}  loss {:.4e}  ade {:.4e}  data {:.4e}  D {:.4e}  speed {:.4e}",
                r.epoch,
                r.loss,
                r.l_ade,
                r.l_data,
                r.diffusion,
                r.speed()
            );
        }
    });
    let (record, batch) = match result {
        Ok(ok) => ok,
        Err(TrainError::NonFinite { epoch, last_finite }) => {
            // Keep the last good parameters for inspection.
            let _ = last_finite.save(out_dir);
            return Err(CliError::Numerical(format!(
                "non-finite loss at epoch {epoch}; last finite model saved in {}",
                out_dir.display()
            )));
        }
        Err(e) => return Err(train_err(e)),
    };
    let mut outputs = record.model.save(out_dir).map_err(train_err)?;
    let record_path = out_dir.join(RECORD_FILE);
    write_atomic(&record_path, record.to_csv().as_bytes())?;
    outputs.push(record_path);
    log.config = to_value(&config);
    log.seed = Some(config.seed);
    log.scale = Some(batch.scale.clone());
    if let Some(p) = config_file {
        log.inputs.push(p.to_path_buf());
    }
    log.inputs.push(dataset.to_path_buf());
    log.outputs = outputs;
    log.finish(out_dir)?;
    Ok(record.final_row().cloned().expect("at least one epoch"))
}

/// Where `D` and `v` for a Péclet report come from.
#[derive(Debug, Clone)]
pub enum PecletSource {
    Values { diffusion: f64, velocity: Vec<f64> },
    Run(PathBuf),
}

pub fn cmd_analyze(
    source: &PecletSource,
    length_mm: Option<f64>,
    out_dir: Option<&Path>,
) -> Result<PecletReport, CliError> {
    let mut log = RunLog::start("analyze");
    let length = length_mm.unwrap_or(DEFAULT_CHARACTERISTIC_LENGTH_MM);
    let (diffusion, speed) = match source {
        PecletSource::Values { diffusion, velocity } => {
            (*diffusion, velocity.iter().map(|v| v * v).sum::<f64>().sqrt())
        }
        PecletSource::Run(dir) => {
            let model = PinnModel::load(dir).map_err(train_err)?;
            log.inputs.push(dir.clone());
            (model.diffusion_physical(), model.speed_physical())
        }
    };
    let report =
        PecletReport::new(diffusion, speed, length).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let path = dir.join(REPORT_FILE);
        write_atomic(&path, report.to_text().as_bytes())?;
        log.config = serde_json::json!({
            "D_mm2_per_s": diffusion,
            "speed_mm_per_s": speed,
            "L_c_mm": length,
        });
        log.outputs.push(path);
        log.finish(dir)?;
    }
    Ok(report)
}

/// Telemetry curves, plus truth/prediction image pairs when a dataset is
/// available.
#[derive(Debug, Clone, Default)]
pub struct ExportRequest {
    /// Seconds; every frame time when empty.
    pub times_s: Vec<f64>,
    /// Index along the third axis; the middle plane when unset.
    pub slice: Option<usize>,
    /// Overrides the dataset recorded in the run manifest.
    pub dataset: Option<PathBuf>,
}

/// Exports a run directory (or a bare record CSV) into `out_dir`.
pub fn cmd_export(run: &Path, out_dir: &Path, req: &ExportRequest) -> Result<Vec<PathBuf>, CliError> {
    let mut log = RunLog::start("export");
    let (run_dir, record_path) = if run.is_dir() {
        (run.to_path_buf(), run.join(RECORD_FILE))
    } else {
        (run.parent().unwrap_or(Path::new(".")).to_path_buf(), run.to_path_buf())
    };
    let text = fs::read_to_string(&record_path).map_err(io_err(&record_path))?;
    let rows = TrainRecord::rows_from_csv(&text)
        .map_err(|e| CliError::Io(format!("{}: {e}", record_path.display())))?;
    log.inputs.push(record_path);
    create_dir(out_dir)?;

    let mut outputs = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<(), CliError> {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        outputs.push(path);
        Ok(())
    };
    let n_v = rows.first().map_or(0, |r| r.velocity.len());
    let mut loss = String::from("epoch,loss,l_ade,l_data\n");
    let mut diff = String::from("epoch,D_mm2_per_s\n");
    let mut vel = String::from("epoch");
    for i in 0..n_v {
        let _ = write!(vel, ",v{i}_mm_per_s");
    }
    vel.push_str(",speed_mm_per_s\n");
    for r in &rows {
        let _ = writeln!(loss, "{},{},{},{}", r.epoch, r.loss, r.l_ade, r.l_data);
        let _ = writeln!(diff, "{},{}", r.epoch, r.diffusion);
        let _ = write!(vel, "{}", r.epoch);
        for v in &r.velocity {
            let _ = write!(vel, ",{v}");
        }
        let _ = writeln!(vel, ",{}", r.speed());
    }
    emit("loss.csv", loss)?;
    emit("diffusion.csv", diff)?;
    emit("velocity.csv", vel)?;

    let dataset = match &req.dataset {
        Some(d) => Some(d.clone()),
        None => recorded_dataset(&run_dir),
    };
    if let Some(dataset) = dataset {
        let model = PinnModel::load(&run_dir).map_err(train_err)?;
        let series = data::load_voxel_series(&dataset).map_err(data_err)?;
        log.inputs.push(dataset);
        log.inputs.push(run_dir.clone());
        for (name, body) in frame_pairs(&model, &series, req)? {
            let path = out_dir.join(&name);
            write_atomic(&path, &body)?;
            outputs.push(path);
        }
    }
    log.config = serde_json::json!({
        "times_s": req.times_s,
        "slice": req.slice,
    });
    log.outputs = outputs.clone();
    log.finish(out_dir)?;
    Ok(outputs)
}

fn recorded_dataset(run_dir: &Path) -> Option<PathBuf> {
    let m = manifest::load(&run_dir.join(RUN_MANIFEST_FILE)).ok()?;
    if m.command != "train" {
        return None;
    }
    m.inputs.last().filter(|p| p.exists()).cloned()
}

/// Metadata written next to each image pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PairSidecar {
    pub time_s: f64,
    pub slice: usize,
    pub width: usize,
    pub height: usize,
    pub scale: pgm::PairScale,
    /// Over the ROI of the full volume, in normalised units.
    pub mse: f64,
}

fn frame_pairs(
    model: &PinnModel,
    series: &VoxelSeries,
    req: &ExportRequest,
) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let (normalized, _) = data::normalize_intensity(series).map_err(data_err)?;
    let times = if req.times_s.is_empty() {
        series.timestamps_s.clone()
    } else {
        req.times_s.clone()
    };
    let [nx, ny, nz] = series.dims;
    let z = req.slice.unwrap_or(nz / 2);
    if z >= nz {
        return Err(CliError::Usage(format!("slice {z} outside 0..{nz}")));
    }
    let preds = trainer::predict(model, series, &times).map_err(train_err)?;
    let mut out = Vec::new();
    for (k, (&t, pred)) in times.iter().zip(&preds).enumerate() {
        let frame = series
            .timestamps_s
            .iter()
            .position(|&ts| (ts - t).abs() <= 1e-9 * ts.abs().max(1.0))
            .ok_or_else(|| CliError::Usage(format!("time {t} s is not a frame time of the dataset")))?;
        let truth = &normalized.frames[frame];
        let mse = trainer::mse(truth, pred, &series.roi).map_err(train_err)?;
        let plane = nx * ny;
        let truth_slice = &truth[z * plane..(z + 1) * plane];
        let pred_slice = &pred[z * plane..(z + 1) * plane];
        let scale = pgm::PairScale::of(truth_slice, pred_slice);
        let stem = format!("frame{k:03}");
        out.push((format!("{stem}_truth.pgm"), pgm::encode(nx, ny, truth_slice, &scale)));
        out.push((format!("{stem}_pred.pgm"), pgm::encode(nx, ny, pred_slice, &scale)));
        let sidecar = PairSidecar {
            time_s: t,
            slice: z,
            width: nx,
            height: ny,
            scale,
            mse,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
        out.push((format!("{stem}.json"), json.into_bytes()));
    }
    Ok(out)
}
