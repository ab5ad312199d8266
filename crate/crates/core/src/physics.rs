//! Advection-diffusion residual, the two-term loss, trainable physical
//! parameters and Peclet-number analysis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, NodeId, Tape, Tensor};
use crate::network::DerivBundle;

/// Default characteristic length, 100 µm.
pub const DEFAULT_CHARACTERISTIC_LENGTH_MM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("velocity has {velocity} components but the bundle has {spatial} spatial dimensions")]
    DimensionMismatch { velocity: usize, spatial: usize },
    #[error("empty residual batch")]
    EmptyBatch,
    #[error("length mismatch: {predictions} predictions vs {measurements} measurements")]
    LengthMismatch {
        predictions: usize,
        measurements: usize,
    },
    #[error("loss weights must be non-negative (w_ade={w_ade}, w_data={w_data})")]
    NegativeWeight { w_ade: f64, w_data: f64 },
    #[error("diffusion coefficient must be positive, got {0}")]
    NonPositiveDiffusion(f64),
    #[error("characteristic length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("speed must be finite and non-negative, got {0}")]
    InvalidSpeed(f64),
    #[error("Peclet number must be finite and non-negative, got {0}")]
    InvalidPeclet(f64),
    #[error("malformed Peclet report: {0}")]
    Report(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// How the trainable diffusion coefficient is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionParam {
    /// `D = exp(log_D)`; positivity is structural.
    #[default]
    Log,
    /// `D` is optimized directly.
    Raw,
}

/// Whether velocity is a d-vector or a single scalar contracted with the
/// sum of spatial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityMode {
    #[default]
    Vector,
    Scalar,
}

impl FromStr for VelocityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vector" => Ok(Self::Vector),
            "scalar" => Ok(Self::Scalar),
            other => Err(format!("unknown velocity mode {other:?} (expected vector|scalar)")),
        }
    }
}

/// Trainable `D` and `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    /// `log D` in log mode, `D` in raw mode.
    pub diffusion_param: f64,
    pub parameterization: DiffusionParam,
    pub mode: VelocityMode,
    /// `d` components in vector mode, exactly one in scalar mode.
    pub velocity: Vec<f64>,
}

impl PhysicsParams {
    pub fn new(
        diffusion: f64,
        velocity: Vec<f64>,
        mode: VelocityMode,
        parameterization: DiffusionParam,
    ) -> Result<Self, PhysicsError> {
        if !(diffusion > 0.0 && diffusion.is_finite()) {
            return Err(PhysicsError::NonPositiveDiffusion(diffusion));
        }
        if mode == VelocityMode::Scalar && velocity.len() != 1 {
            return Err(PhysicsError::DimensionMismatch {
                velocity: velocity.len(),
                spatial: 1,
            });
        }
        let diffusion_param = match parameterization {
            DiffusionParam::Log => diffusion.ln(),
            DiffusionParam::Raw => diffusion,
        };
        Ok(Self {
            diffusion_param,
            parameterization,
            mode,
            velocity,
        })
    }

    pub fn diffusion(&self) -> f64 {
        match self.parameterization {
            DiffusionParam::Log => self.diffusion_param.exp(),
            DiffusionParam::Raw => self.diffusion_param,
        }
    }

    /// `‖v‖₂` in vector mode, `|v|` in scalar mode.
    pub fn speed(&self) -> f64 {
        euclidean_norm(&self.velocity)
    }

    /// Puts `D` and each velocity component on the tape as trainable
    /// `1 x 1` leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<PhysicsNodes, PhysicsError> {
        let diffusion_value = self.diffusion();
        let diffusion = tape.param(Tensor::scalar(diffusion_value))?;
        let velocity = self
            .velocity
            .iter()
            .map(|&v| tape.param(Tensor::scalar(v)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PhysicsNodes {
            diffusion,
            diffusion_value,
            velocity,
            mode: self.mode,
            parameterization: self.parameterization,
        })
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Physical parameters as tape leaves.
///
/// The tape holds `D` itself; in log mode the gradient with respect to
/// `log D` is recovered by the chain rule in [`PhysicsNodes::diffusion_param_grad`].
#[derive(Debug, Clone)]
pub struct PhysicsNodes {
    pub diffusion: NodeId,
    diffusion_value: f64,
    pub velocity: Vec<NodeId>,
    mode: VelocityMode,
    parameterization: DiffusionParam,
}

impl PhysicsNodes {
    /// ∂L/∂(stored diffusion parameter).
    pub fn diffusion_param_grad(&self, grads: &Gradients) -> f64 {
        let g = grads.get(self.diffusion).and_then(Tensor::item).unwrap_or(0.0);
        match self.parameterization {
            DiffusionParam::Log => g * self.diffusion_value,
            DiffusionParam::Raw => g,
        }
    }

    pub fn velocity_grads(&self, grads: &Gradients) -> Vec<f64> {
        self.velocity
            .iter()
            .map(|&id| grads.get(id).and_then(Tensor::item).unwrap_or(0.0))
            .collect()
    }
}

/// `r = N_t + v·∇N − D ΔN` per point (`n x 1`).
///
/// In scalar mode the advection term is `v Σ_i ∂N/∂x_i`.
pub fn ade_residual(
    tape: &mut Tape,
    bundle: &DerivBundle,
    phys: &PhysicsNodes,
) -> Result<NodeId, PhysicsError> {
    let spatial = bundle.spatial_dim();
    let advection = match phys.mode {
        VelocityMode::Vector => {
            if phys.velocity.len() != spatial {
                return Err(PhysicsError::DimensionMismatch {
                    velocity: phys.velocity.len(),
                    spatial,
                });
            }
            let mut acc: Option<NodeId> = None;
            for (&g, &v) in bundle.grad.iter().zip(&phys.velocity) {
                let term = tape.matmul(g, v)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            acc.expect("spatial dimension is at least 1")
        }
        VelocityMode::Scalar => {
            if phys.velocity.len() != 1 {
                return Err(PhysicsError::DimensionMismatch {
                    velocity: phys.velocity.len(),
                    spatial: 1,
                });
            }
            let mut sum = bundle.grad[0];
            for &g in &bundle.grad[1..] {
                sum = tape.add(sum, g)?;
            }
            tape.matmul(sum, phys.velocity[0])?
        }
    };
    let diffusion = tape.matmul(bundle.lap, phys.diffusion)?;
    let transport = tape.add(bundle.dt, advection)?;
    Ok(tape.sub(transport, diffusion)?)
}

/// Mean squared residual, recorded on the tape.
pub fn loss_ade(tape: &mut Tape, residuals: NodeId) -> Result<NodeId, PhysicsError> {
    let sq = tape.square(residuals)?;
    Ok(tape.mean(sq)?)
}

/// Mean squared mismatch between network predictions and measurements.
pub fn loss_data(
    tape: &mut Tape,
    predictions: NodeId,
    measurements: &[f64],
) -> Result<NodeId, PhysicsError> {
    let n = tape.value(predictions).len();
    if n != measurements.len() {
        return Err(PhysicsError::LengthMismatch {
            predictions: n,
            measurements: measurements.len(),
        });
    }
    let shape = tape.value(predictions).shape().to_vec();
    let meas = tape.constant(Tensor::new(shape, measurements.to_vec())?)?;
    let diff = tape.sub(predictions, meas)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

fn check_weights(w_ade: f64, w_data: f64) -> Result<(), PhysicsError> {
    if !(w_ade >= 0.0 && w_data >= 0.0) {
        return Err(PhysicsError::NegativeWeight { w_ade, w_data });
    }
    Ok(())
}

/// `w_ade·l_ade + w_data·l_data`, recorded on the tape.
pub fn total_loss(
    tape: &mut Tape,
    l_ade: NodeId,
    l_data: NodeId,
    w_ade: f64,
    w_data: f64,
) -> Result<NodeId, PhysicsError> {
    check_weights(w_ade, w_data)?;
    let a = tape.scale(l_ade, w_ade)?;
    let b = tape.scale(l_data, w_data)?;
    Ok(tape.add(a, b)?)
}

/// Mean of squares of a residual vector.
pub fn mean_square(residuals: &[f64]) -> Result<f64, PhysicsError> {
    if residuals.is_empty() {
        return Err(PhysicsError::EmptyBatch);
    }
    Ok(residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64)
}

/// Mean squared difference of two equal-length vectors.
pub fn mean_squared_error(predictions: &[f64], measurements: &[f64]) -> Result<f64, PhysicsError> {
    if predictions.len() != measurements.len() {
        return Err(PhysicsError::LengthMismatch {
            predictions: predictions.len(),
            measurements: measurements.len(),
        });
    }
    if predictions.is_empty() {
        return Err(PhysicsError::EmptyBatch);
    }
    let sum: f64 = predictions
        .iter()
        .zip(measurements)
        .map(|(p, m)| (p - m) * (p - m))
        .sum();
    Ok(sum / predictions.len() as f64)
}

pub fn weighted_loss(l_ade: f64, l_data: f64, w_ade: f64, w_data: f64) -> Result<f64, PhysicsError> {
    check_weights(w_ade, w_data)?;
    Ok(w_ade * l_ade + w_data * l_data)
}

/// `Pe = L_c · speed / D`.
pub fn peclet(diffusion: f64, speed: f64, length: f64) -> Result<f64, PhysicsError> {
    if !(diffusion > 0.0 && diffusion.is_finite()) {
        return Err(PhysicsError::NonPositiveDiffusion(diffusion));
    }
    if !(length > 0.0 && length.is_finite()) {
        return Err(PhysicsError::NonPositiveLength(length));
    }
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(PhysicsError::InvalidSpeed(speed));
    }
    Ok(length * speed / diffusion)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Advection,
    Diffusion,
    Mixed,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Advection => "Advection",
            Regime::Diffusion => "Diffusion",
            Regime::Mixed => "Mixed",
        })
    }
}

impl FromStr for Regime {
    type Err = PhysicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Advection" => Ok(Regime::Advection),
            "Diffusion" => Ok(Regime::Diffusion),
            "Mixed" => Ok(Regime::Mixed),
            other => Err(PhysicsError::Report(format!("unknown regime {other:?}"))),
        }
    }
}

/// `Pe > 1` advection-dominated, `Pe < 1` diffusion-dominated, exactly 1 mixed.
pub fn classify_regime(pe: f64) -> Result<Regime, PhysicsError> {
    if !(pe >= 0.0 && pe.is_finite()) {
        return Err(PhysicsError::InvalidPeclet(pe));
    }
    Ok(if pe > 1.0 {
        Regime::Advection
    } else if pe < 1.0 {
        Regime::Diffusion
    } else {
        Regime::Mixed
    })
}

/// Peclet analysis of a fitted `(D, v)`. Units: mm²/s, mm/s, mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PecletReport {
    pub diffusion_mm2_per_s: f64,
    pub speed_mm_per_s: f64,
    pub length_mm: f64,
    pub peclet: f64,
    pub regime: Regime,
}

impl PecletReport {
    pub fn new(diffusion: f64, speed: f64, length: f64) -> Result<Self, PhysicsError> {
        let pe = peclet(diffusion, speed, length)?;
        Ok(Self {
            diffusion_mm2_per_s: diffusion,
            speed_mm_per_s: speed,
            length_mm: length,
            peclet: pe,
            regime: classify_regime(pe)?,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "D_mm2_per_s={}\nspeed_mm_per_s={}\nL_c_mm={}\nPe={}\nPe_rounded={:.2}\nregime={}\n",
            self.diffusion_mm2_per_s,
            self.speed_mm_per_s,
            self.length_mm,
            self.peclet,
            self.peclet,
            self.regime
        )
    }

    pub fn from_text(text: &str) -> Result<Self, PhysicsError> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PhysicsError::Report(format!("line without '=': {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let num = |key: &str| -> Result<f64, PhysicsError> {
            fields
                .get(key)
                .ok_or_else(|| PhysicsError::Report(format!("missing {key}")))?
                .parse()
                .map_err(|e| PhysicsError::Report(format!("{key}: {e}")))
        };
        let report = Self {
            diffusion_mm2_per_s: num("D_mm2_per_s")?,
            speed_mm_per_s: num("speed_mm_per_s")?,
            length_mm: num("L_c_mm")?,
            peclet: num("Pe")?,
            regime: fields
                .get("regime")
                .ok_or_else(|| PhysicsError::Report("missing regime".into()))?
                .parse()?,
        };
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_arithmetic() {
        assert_eq!(mean_square(&[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(mean_square(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(mean_square(&[]), Err(PhysicsError::EmptyBatch));
        assert_eq!(mean_squared_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mean_squared_error(&[2.0], &[0.0]).unwrap(), 4.0);
        assert!(matches!(
            mean_squared_error(&[1.0], &[1.0, 2.0]),
            Err(PhysicsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn weighted_loss_cases() {
        assert!((weighted_loss(0.01, 0.5, 100.0, 1.0).unwrap() - 1.5).abs() < 1e-12);
        assert!((weighted_loss(0.002, 1.0, 500.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(weighted_loss(0.3, 0.7, 0.0, 0.0).unwrap(), 0.0);
        assert!(weighted_loss(1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn tape_losses_match_direct_values() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::column(vec![1.0, -1.0])).unwrap();
        let la = loss_ade(&mut tape, r).unwrap();
        assert_eq!(tape.value(la).item(), Some(1.0));
        let p = tape.constant(Tensor::column(vec![2.0])).unwrap();
        let ld = loss_data(&mut tape, p, &[0.0]).unwrap();
        assert_eq!(tape.value(ld).item(), Some(4.0));
        assert!(loss_data(&mut tape, p, &[0.0, 1.0]).is_err());
        let total = total_loss(&mut tape, la, ld, 100.0, 1.0).unwrap();
        assert_eq!(tape.value(total).item(), Some(104.0));
        assert!(total_loss(&mut tape, la, ld, 1.0, -0.5).is_err());
    }

    #[test]
    fn peclet_table_values() {
        let pe1 = peclet(1.25e-4, 5.95e-2, 0.1).unwrap();
        assert!((pe1 - 47.60).abs() < 1e-9);
        assert_eq!(classify_regime(pe1).unwrap(), Regime::Advection);
        let pe2 = peclet(3.11e-4, 1.57e-2, 0.1).unwrap();
        assert!((pe2 - 5.05).abs() < 0.005);
        assert_eq!(classify_regime(pe2).unwrap(), Regime::Advection);
        assert_eq!(peclet(1.0, 0.0, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn peclet_rejects_bad_inputs() {
        assert!(matches!(peclet(0.0, 1.0, 1.0), Err(PhysicsError::NonPositiveDiffusion(_))));
        assert!(matches!(peclet(1.0, 1.0, -1.0), Err(PhysicsError::NonPositiveLength(_))));
        assert!(classify_regime(-0.1).is_err());
    }

    #[test]
    fn regime_boundaries() {
        assert_eq!(classify_regime(0.5).unwrap(), Regime::Diffusion);
        assert_eq!(classify_regime(1.0).unwrap(), Regime::Mixed);
        assert_eq!(classify_regime(0.0).unwrap(), Regime::Diffusion);
    }

    #[test]
    fn report_text_round_trip() {
        let r = PecletReport::new(1.25e-4, 5.95e-2, 0.1).unwrap();
        let text = r.to_text();
        assert!(text.contains("Pe_rounded=47.60"));
        assert!(text.contains("regime=Advection"));
        assert_eq!(PecletReport::from_text(&text).unwrap(), r);
    }

    #[test]
    fn params_construction() {
        let p = PhysicsParams::new(2e-3, vec![0.3, 0.4], VelocityMode::Vector, DiffusionParam::Log)
            .unwrap();
        assert!((p.diffusion() - 2e-3).abs() < 1e-18);
        assert!((p.speed() - 0.5).abs() < 1e-15);
        assert!(PhysicsParams::new(-1.0, vec![0.0], VelocityMode::Scalar, DiffusionParam::Raw).is_err());
        assert!(PhysicsParams::new(1.0, vec![0.0, 1.0], VelocityMode::Scalar, DiffusionParam::Raw).is_err());
    }
}
