//! Joint optimisation of network weights, `D` and `v`.
//!
//! Every epoch evaluates the full batch (or a seeded minibatch), records one
//! telemetry row and takes one Adam step. The batch is split into fixed-size
//! chunks that are evaluated on independent tapes, possibly in parallel; their
//! losses and gradients are summed in chunk order, so results do not depend
//! on the thread count.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{
    self, CollocationTimes, DataError, SampleBatch, SamplingConfig, ScaleRecord, VoxelSeries,
};
use crate::network::{default_layer_dims, MlpParams, NetworkError};
use crate::physics::{self, DiffusionParam, PhysicsError, PhysicsParams, VelocityMode};

/// Network weights inside a saved model directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Physical parameters and scales inside a saved model directory.
pub const MODEL_META_FILE: &str = "model.json";

/// Rows per independently evaluated chunk.
pub const CHUNK_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("optimizer shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite {
        epoch: usize,
        last_finite: Box<PinnModel>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("frame dimension mismatch: {0}")]
    FrameMismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model file {path}: {message}")]
    ModelFile { path: PathBuf, message: String },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Network(NetworkError::Autodiff(e))
    }
}

fn default_epochs() -> usize {
    30_000
}
fn default_lr0() -> f64 {
    0.01
}
fn default_warmup() -> usize {
    500
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_w_ade() -> f64 {
    100.0
}
fn default_w_data() -> f64 {
    1.0
}
fn default_k() -> usize {
    5000
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_d_init() -> f64 {
    1.0e-4
}
fn default_v_init() -> f64 {
    1.0e-3
}
fn default_true() -> bool {
    true
}

/// Training hyper-parameters. JSON keys carry their units where they have
/// one; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_w_ade")]
    pub w_ade: f64,
    #[serde(default = "default_w_data")]
    pub w_data: f64,
    #[serde(default = "default_k")]
    pub k_ade: usize,
    #[serde(default = "default_k")]
    pub k_data: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_d_init", rename = "D_init_mm2_per_s")]
    pub d_init: f64,
    /// Initial value of every velocity component.
    #[serde(default = "default_v_init", rename = "v_init_mm_per_s")]
    pub v_init: f64,
    #[serde(default)]
    pub velocity_mode: VelocityMode,
    #[serde(default)]
    pub diffusion_param: DiffusionParam,
    /// Rows of each kind per step; `None` uses the full batch.
    #[serde(default)]
    pub minibatch: Option<usize>,
    /// Redraw the sample every this many epochs; `None` keeps one sample.
    #[serde(default)]
    pub resample_every: Option<usize>,
    #[serde(default)]
    pub with_replacement: bool,
    #[serde(default = "default_true")]
    pub unit_box: bool,
    #[serde(default)]
    pub collocation_times: CollocationTimes,
    /// Network widths; defaults to `[d + 1, 32, 32, 32, 32, 1]`.
    #[serde(default)]
    pub layer_dims: Option<Vec<usize>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.epochs <= self.warmup_epochs {
            return fail(format!(
                "epochs ({}) must exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.w_ade >= 0.0 && self.w_data >= 0.0) {
            return fail(format!(
                "loss weights must be non-negative (w_ade={}, w_data={})",
                self.w_ade, self.w_data
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.k_ade == 0 || self.k_data == 0 {
            return fail("k_ade and k_data must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.d_init > 0.0 && self.d_init.is_finite()) {
            return fail(format!("D_init_mm2_per_s must be positive, got {}", self.d_init));
        }
        if !self.v_init.is_finite() {
            return fail("v_init_mm_per_s must be finite".into());
        }
        if self.minibatch == Some(0) || self.resample_every == Some(0) {
            return fail("minibatch and resample_every must be positive when set".into());
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            k_ade: self.k_ade,
            k_data: self.k_data,
            seed: sampling_seed(self.seed, 0),
            with_replacement: self.with_replacement,
            unit_box: self.unit_box,
            collocation_times: self.collocation_times,
        }
    }
}

/// Seed for the `round`-th sample draw; the network uses `seed` itself.
pub fn sampling_seed(seed: u64, round: u64) -> u64 {
    seed.wrapping_add(1).wrapping_add(round.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Linear warm-up to `lr0`, then cosine annealing towards 0.
pub fn lr_schedule(epoch: usize, config: &TrainingConfig) -> Result<f64, TrainError> {
    if epoch >= config.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    let warmup = config.warmup_epochs;
    if epoch < warmup {
        return Ok(config.lr0 * (epoch + 1) as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (config.epochs - warmup) as f64;
    Ok(config.lr0 * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn from_config(sizes: &[usize], config: &TrainingConfig) -> Self {
        Self::new(
            sizes,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
            config.weight_decay,
        )
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. `decay[i]` selects which groups receive
    /// weight decay (`p ← p − lr·wd·p`, applied before the Adam move).
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        decay: &[bool],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.first.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "{} parameter groups, {} gradient groups, {} decay flags, optimizer holds {}",
                params.len(),
                grads.len(),
                decay.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(TrainError::Shape(format!(
                    "group {i}: {} parameters, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    self.first[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay_factor = if decay[i] { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= decay_factor * p[j];
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    physics: PhysicsParams,
    scale: ScaleRecord,
    /// Informational; `physics` and `scale` are authoritative.
    #[serde(rename = "D_mm2_per_s")]
    diffusion_mm2_per_s: f64,
    #[serde(rename = "v_mm_per_s")]
    velocity_mm_per_s: Vec<f64>,
}

/// Network, physical parameters and the scales that relate them to
/// physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub mlp: MlpParams,
    /// In unit-box coordinates.
    pub physics: PhysicsParams,
    pub scale: ScaleRecord,
}

impl PinnModel {
    pub fn init(
        config: &TrainingConfig,
        spatial_dim: usize,
        scale: &ScaleRecord,
    ) -> Result<Self, TrainError> {
        let dims = config
            .layer_dims
            .clone()
            .unwrap_or_else(|| default_layer_dims(spatial_dim));
        if dims.first() != Some(&(spatial_dim + 1)) {
            return Err(TrainError::Config(format!(
                "layer_dims {dims:?} must start with {} for {spatial_dim} spatial dimension(s)",
                spatial_dim + 1
            )));
        }
        let mlp = MlpParams::init_glorot(&dims, config.seed)?;
        let n_v = match config.velocity_mode {
            VelocityMode::Vector => spatial_dim,
            VelocityMode::Scalar => 1,
        };
        let physics = PhysicsParams::new(
            scale.diffusion_to_unit(config.d_init),
            vec![scale.velocity_to_unit(config.v_init); n_v],
            config.velocity_mode,
            config.diffusion_param,
        )?;
        Ok(Self {
            mlp,
            physics,
            scale: scale.clone(),
        })
    }

    pub fn spatial_dim(&self) -> usize {
        self.mlp.spatial_dim()
    }

    /// Writes [`CHECKPOINT_FILE`] and [`MODEL_META_FILE`] into `dir` and
    /// returns their paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, TrainError> {
        let dir = dir.as_ref();
        let ckpt = dir.join(CHECKPOINT_FILE);
        self.mlp.save(&ckpt).map_err(|e| TrainError::ModelFile {
            path: ckpt.clone(),
            message: e.to_string(),
        })?;
        let meta = ModelMeta {
            physics: self.physics.clone(),
            scale: self.scale.clone(),
            diffusion_mm2_per_s: self.diffusion_physical(),
            velocity_mm_per_s: self.velocity_physical(),
        };
        let meta_path = dir.join(MODEL_META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("model metadata serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| TrainError::ModelFile {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        Ok(vec![ckpt, meta_path])
    }

    /// Reads a model written by [`PinnModel::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref();
        let ckpt = dir.join(CHECKPOINT_FILE);
        let mlp = MlpParams::load(&ckpt).map_err(|e| TrainError::ModelFile {
            path: ckpt,
            message: e.to_string(),
        })?;
        let meta_path = dir.join(MODEL_META_FILE);
        let bad = |message: String| TrainError::ModelFile {
            path: meta_path.clone(),
            message,
        };
        let text = fs::read_to_string(&meta_path).map_err(|e| bad(e.to_string()))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let d = mlp.spatial_dim();
        if meta.scale.x_origin_mm.len() != d {
            return Err(bad(format!(
                "scale covers {} axes, network has {d}",
                meta.scale.x_origin_mm.len()
            )));
        }
        let physics = meta.physics;
        // Validation only; the stored parameter is kept bit-exact.
        PhysicsParams::new(
            physics.diffusion(),
            physics.velocity.clone(),
            physics.mode,
            physics.parameterization,
        )?;
        if physics.mode == VelocityMode::Vector && physics.velocity.len() != d {
            return Err(bad(format!("{} velocity components for {d} axes", physics.velocity.len())));
        }
        Ok(Self {
            mlp,
            physics,
            scale: meta.scale,
        })
    }

    /// `D` in mm²/s.
    pub fn diffusion_physical(&self) -> f64 {
        self.scale.diffusion_to_physical(self.physics.diffusion())
    }

    /// `v` in mm/s.
    pub fn velocity_physical(&self) -> Vec<f64> {
        self.physics
            .velocity
            .iter()
            .map(|&v| self.scale.velocity_to_physical(v))
            .collect()
    }

    pub fn speed_physical(&self) -> f64 {
        physics::euclidean_norm(&self.velocity_physical())
    }

    /// Parameter groups in optimizer order: `W_0, b_0, .., W_L, b_L, D, v`.
    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut groups: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.mlp.layers_mut() {
            groups.push(w.values_mut());
            groups.push(b.values_mut());
        }
        groups.push(std::slice::from_mut(&mut self.physics.diffusion_param));
        groups.push(self.physics.velocity.as_mut_slice());
        groups
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        for (w, b) in self.mlp.weights().iter().zip(self.mlp.biases()) {
            sizes.push(w.len());
            sizes.push(b.len());
        }
        sizes.push(1);
        sizes.push(self.physics.velocity.len());
        sizes
    }

    /// Weight decay applies to weight matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for _ in 0..self.mlp.num_layers() {
            mask.push(true);
            mask.push(false);
        }
        mask.push(false);
        mask.push(false);
        mask
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_ade: f64,
    pub l_data: f64,
}

/// Gradients in the order of [`PinnModel::param_groups_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub groups: Vec<Vec<f64>>,
}

impl ParamGrads {
    fn zeros(sizes: &[usize]) -> Self {
        Self {
            groups: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// ∂L/∂(stored diffusion parameter).
    pub fn diffusion(&self) -> f64 {
        self.groups[self.groups.len() - 2][0]
    }

    pub fn velocity(&self) -> &[f64] {
        &self.groups[self.groups.len() - 1]
    }
}

#[derive(Debug, Clone, Copy)]
enum Chunk {
    Ade(usize, usize),
    Data(usize, usize),
}

fn row_slice(t: &Tensor, start: usize, end: usize) -> Tensor {
    let cols = t.cols();
    Tensor::matrix(end - start, cols, t.values()[start * cols..end * cols].to_vec())
}

fn chunks(n_ade: usize, n_data: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for s in (0..n_ade).step_by(CHUNK_ROWS) {
        out.push(Chunk::Ade(s, (s + CHUNK_ROWS).min(n_ade)));
    }
    for s in (0..n_data).step_by(CHUNK_ROWS) {
        out.push(Chunk::Data(s, (s + CHUNK_ROWS).min(n_data)));
    }
    out
}

/// Weighted loss and, if requested, its gradient with respect to every
/// parameter group. Chunk contributions are reduced in a fixed order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_loss(
    model: &PinnModel,
    collocation: &Tensor,
    data_points: &Tensor,
    data_values: &[f64],
    w_ade: f64,
    w_data: f64,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>), TrainError> {
    let (n_ade, n_data) = (collocation.rows(), data_points.rows());
    if n_ade == 0 || n_data == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if data_values.len() != n_data {
        return Err(PhysicsError::LengthMismatch {
            predictions: n_data,
            measurements: data_values.len(),
        }
        .into());
    }
    let sizes = model.group_sizes();
    let eval_chunk = |chunk: Chunk| -> Result<(f64, f64, Option<ParamGrads>), TrainError> {
        let mut tape = Tape::new();
        let nodes = model.mlp.register(&mut tape, true)?;
        let phys = model.physics.register(&mut tape)?;
        let zero = tape.constant(Tensor::scalar(0.0))?;
        let (l_ade, l_data) = match chunk {
            Chunk::Ade(s, e) => {
                let pts = row_slice(collocation, s, e);
                let bundle = nodes.forward_with_derivs(&mut tape, &pts)?;
                let r = physics::ade_residual(&mut tape, &bundle, &phys)?;
                let mean = physics::loss_ade(&mut tape, r)?;
                (tape.scale(mean, (e - s) as f64 / n_ade as f64)?, zero)
            }
            Chunk::Data(s, e) => {
                let pts = row_slice(data_points, s, e);
                let pred = nodes.forward(&mut tape, &pts)?;
                let mean = physics::loss_data(&mut tape, pred, &data_values[s..e])?;
                (zero, tape.scale(mean, (e - s) as f64 / n_data as f64)?)
            }
        };
        let total = physics::total_loss(&mut tape, l_ade, l_data, w_ade, w_data)?;
        let grads = if want_grads {
            let g = tape.backward(total)?;
            let mut out = ParamGrads::zeros(&sizes);
            for (l, (&w, &b)) in nodes.weights().iter().zip(nodes.biases()).enumerate() {
                out.groups[2 * l].copy_from_slice(g.get(w).expect("trainable").values());
                out.groups[2 * l + 1].copy_from_slice(g.get(b).expect("trainable").values());
            }
            let k = out.groups.len();
            out.groups[k - 2][0] = phys.diffusion_param_grad(&g);
            out.groups[k - 1] = phys.velocity_grads(&g);
            Some(out)
        } else {
            None
        };
        let l_ade = tape.value(l_ade).item().unwrap();
        let l_data = tape.value(l_data).item().unwrap();
        Ok((l_ade, l_data, grads))
    };
    let parts: Vec<_> = chunks(n_ade, n_data)
        .into_par_iter()
        .map(eval_chunk)
        .collect::<Result<Vec<_>, _>>()?;
    let mut l_ade = 0.0;
    let mut l_data = 0.0;
    let mut grads = want_grads.then(|| ParamGrads::zeros(&sizes));
    for (a, d, g) in &parts {
        l_ade += a;
        l_data += d;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.accumulate(g);
        }
    }
    let total = physics::weighted_loss(l_ade, l_data, w_ade, w_data)?;
    Ok((
        LossBreakdown {
            total,
            l_ade,
            l_data,
        },
        grads,
    ))
}

/// One telemetry row. Loss values are measured before the epoch's update,
/// at the parameters reported in the same row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_ade: f64,
    pub l_data: f64,
    /// mm²/s
    pub diffusion: f64,
    /// mm/s, one entry per velocity component.
    pub velocity: Vec<f64>,
}

impl EpochRow {
    pub fn speed(&self) -> f64 {
        physics::euclidean_norm(&self.velocity)
    }
}

/// Full telemetry of a run plus the final model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub rows: Vec<EpochRow>,
    pub model: PinnModel,
}

impl TrainRecord {
    pub fn csv_header(n_velocity: usize) -> String {
        let mut h = String::from("epoch,lr,loss,l_ade,l_data,D");
        for i in 0..n_velocity {
            let _ = write!(h, ",v{i}");
        }
        h.push_str(",speed");
        h
    }

    /// `epoch,lr,loss,l_ade,l_data,D,v0..,speed`; reals in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let n_v = self.model.physics.velocity.len();
        let mut out = Self::csv_header(n_v);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{},{}", r.epoch, r.lr, r.loss, r.l_ade, r.l_data, r.diffusion);
            for v in &r.velocity {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", r.speed());
        }
        out
    }

    /// Parses rows written by [`TrainRecord::to_csv`].
    pub fn rows_from_csv(text: &str) -> Result<Vec<EpochRow>, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty record")?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 8 || cols[..6] != ["epoch", "lr", "loss", "l_ade", "l_data", "D"] {
            return Err(format!("unexpected header {header:?}"));
        }
        let n_v = cols.len() - 7;
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != cols.len() {
                    return Err(format!("row {i}: {} fields, expected {}", f.len(), cols.len()));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| format!("row {i}: {e}"));
                Ok(EpochRow {
                    epoch: f[0].parse().map_err(|e| format!("row {i}: {e}"))?,
                    lr: num(f[1])?,
                    loss: num(f[2])?,
                    l_ade: num(f[3])?,
                    l_data: num(f[4])?,
                    diffusion: num(f[5])?,
                    velocity: f[6..6 + n_v].iter().map(|s| num(s)).collect::<Result<_, _>>()?,
                })
            })
            .collect()
    }

    pub fn final_row(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Trains on a fixed batch.
pub fn train(config: &TrainingConfig, batch: &SampleBatch) -> Result<TrainRecord, TrainError> {
    train_with(config, batch, None, |_| {})
}

/// Normalises and samples `series`, then trains, redrawing the sample every
/// `config.resample_every` epochs when set.
pub fn train_series(
    config: &TrainingConfig,
    series: &VoxelSeries,
    on_epoch: impl FnMut(&EpochRow),
) -> Result<(TrainRecord, SampleBatch), TrainError> {
    config.validate()?;
    let (normalized, scale) = data::prepare_series(series, config.unit_box)?;
    let sampling = config.sampling();
    let batch = data::sample_points(&normalized, &scale, &sampling)?;
    let resample = |round: u64| {
        let cfg = SamplingConfig {
            seed: sampling_seed(config.seed, round),
            ..sampling.clone()
        };
        data::sample_points(&normalized, &scale, &cfg)
    };
    let record = train_with(config, &batch, Some(&resample), on_epoch)?;
    Ok((record, batch))
}

type Resampler<'a> = &'a dyn Fn(u64) -> Result<SampleBatch, DataError>;

/// Training loop with an optional resampler and a per-epoch observer.
pub fn train_with(
    config: &TrainingConfig,
    batch: &SampleBatch,
    resampler: Option<Resampler<'_>>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainRecord, TrainError> {
    config.validate()?;
    if batch.len_ade() == 0 || batch.len_data() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let mut model = PinnModel::init(config, batch.spatial_dim, &batch.scale)?;
    let mut adam = Adam::from_config(&model.group_sizes(), config);
    let decay = model.decay_mask();
    let mut current = batch.clone();
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if let (Some(every), Some(resample)) = (config.resample_every, resampler) {
            if epoch > 0 && epoch % every == 0 {
                current = resample((epoch / every) as u64)?;
            }
        }
        let lr = lr_schedule(epoch, config)?;
        let (colloc, data_pts, data_vals) = match config.minibatch {
            Some(m) => minibatch(&current, m, config.seed, epoch),
            None => (
                current.collocation.clone(),
                current.data_points.clone(),
                current.data_values.clone(),
            ),
        };
        let evaluated = evaluate_loss(
            &model,
            &colloc,
            &data_pts,
            &data_vals,
            config.w_ade,
            config.w_data,
            true,
        );
        let (losses, grads) = match evaluated {
            Ok((l, Some(g))) if l.total.is_finite() => (l, g),
            Ok(_)
            | Err(TrainError::Network(NetworkError::Autodiff(AutodiffError::NonFinite { .. })))
            | Err(TrainError::Physics(PhysicsError::Autodiff(AutodiffError::NonFinite { .. }))) => {
                return Err(TrainError::NonFinite {
                    epoch,
                    last_finite: Box::new(model),
                })
            }
            Err(e) => return Err(e),
        };
        let row = EpochRow {
            epoch,
            lr,
            loss: losses.total,
            l_ade: losses.l_ade,
            l_data: losses.l_data,
            diffusion: model.diffusion_physical(),
            velocity: model.velocity_physical(),
        };
        on_epoch(&row);
        rows.push(row);
        let before = model.clone();
        adam.step(&mut model.param_groups_mut(), &grads.groups, &decay, lr)?;
        let params_finite = model.physics.diffusion().is_finite()
            && model.physics.velocity.iter().all(|v| v.is_finite())
            && model.mlp.weights().iter().all(Tensor::is_finite);
        if !params_finite {
            return Err(TrainError::NonFinite {
                epoch,
                last_finite: Box::new(before),
            });
        }
    }
    Ok(TrainRecord { rows, model })
}

fn minibatch(batch: &SampleBatch, size: usize, seed: u64, epoch: usize) -> (Tensor, Tensor, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let mut pick = |t: &Tensor| -> Vec<usize> {
        let n = t.rows();
        let mut idx = index::sample(&mut rng, n, size.min(n)).into_vec();
        idx.sort_unstable();
        idx
    };
    let gather = |t: &Tensor, idx: &[usize]| {
        let cols = t.cols();
        let mut v = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            v.extend_from_slice(&t.values()[i * cols..(i + 1) * cols]);
        }
        Tensor::matrix(idx.len(), cols, v)
    };
    let ia = pick(&batch.collocation);
    let id = pick(&batch.data_points);
    let values = id.iter().map(|&i| batch.data_values[i]).collect();
    (gather(&batch.collocation, &ia), gather(&batch.data_points, &id), values)
}

/// Network prediction (normalised concentration) at every voxel centre of
/// `series` for each requested time in seconds.
pub fn predict(
    model: &PinnModel,
    series: &VoxelSeries,
    times_s: &[f64],
) -> Result<Vec<Vec<f64>>, TrainError> {
    let d = series.spatial_dim();
    if d != model.spatial_dim() {
        return Err(TrainError::FrameMismatch(format!(
            "series has {d} spatial dimension(s), model expects {}",
            model.spatial_dim()
        )));
    }
    let n = series.voxel_count();
    let centers: Vec<Vec<f64>> = (0..n)
        .map(|i| model.scale.to_unit_space(&series.active_center(i)))
        .collect();
    times_s
        .iter()
        .map(|&t| {
            let t_hat = model.scale.to_unit_time(t);
            let mut pts = Vec::with_capacity(n * (d + 1));
            for c in &centers {
                pts.extend_from_slice(c);
                pts.push(t_hat);
            }
            Ok(model.mlp.forward(&Tensor::matrix(n, d + 1, pts))?)
        })
        .collect()
}

/// Mean squared voxel difference over the ROI.
pub fn mse(a: &[f64], b: &[f64], roi: &[bool]) -> Result<f64, TrainError> {
    if a.len() != b.len() || a.len() != roi.len() {
        return Err(TrainError::FrameMismatch(format!(
            "frames of {} and {} voxels with a mask of {}",
            a.len(),
            b.len(),
            roi.len()
        )));
    }
    let (sum, count) = a
        .iter()
        .zip(b)
        .zip(roi)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), ((x, y), _)| (s + (x - y) * (x - y), c + 1));
    if count == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(sum / count as f64)
}
