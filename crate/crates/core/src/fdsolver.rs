//! Explicit finite-difference solver for `∂C/∂t + v·∇C = D ΔC` and the
//! closed-form advected Gaussian.
//!
//! The solver works in flux form: each face carries the first-order upwind
//! advective flux plus the central diffusive flux, and a cell changes by the
//! net flux through its faces. On periodic grids total mass is conserved to
//! rounding; zero-flux grids close the boundary faces.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Safety factor applied to every stability limit.
pub const STABILITY_FACTOR: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("grid needs 1 to 3 axes with matching spacing/origin, got dims {dims:?}, spacing {spacing:?}")]
    GridShape { dims: Vec<usize>, spacing: Vec<f64> },
    #[error("grid axis {axis} has {extent} cells (need at least 3)")]
    GridTooSmall { axis: usize, extent: usize },
    #[error("grid spacing must be positive, got {0:?}")]
    BadSpacing(Vec<f64>),
    #[error("field has {got} values, grid has {expected}")]
    FieldSize { expected: usize, got: usize },
    #[error("velocity has {got} components, grid has {expected} axes")]
    VelocityDim { expected: usize, got: usize },
    #[error("diffusion coefficient must be finite and non-negative, got {0}")]
    BadDiffusion(f64),
    #[error("unstable time step dt={dt}: limits diffusion={diffusion_limit:e}, advection={advection_limit:e}, combined={combined_limit:e}")]
    Unstable {
        dt: f64,
        diffusion_limit: f64,
        advection_limit: f64,
        combined_limit: f64,
    },
    #[error("non-finite value at step {0}")]
    NonFinite(usize),
    #[error("effective time t + t_offset = {0} must be positive")]
    NonPositiveTime(f64),
    #[error("analytic solution needs D > 0, got {0}")]
    NonPositiveDiffusion(f64),
    #[error("point has {got} coordinates, expected {expected}")]
    PointDim { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    #[default]
    Periodic,
    ZeroFlux,
}

/// Regular cell-centred grid. Axis 0 varies fastest in field storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    #[serde(default)]
    pub boundary: Boundary,
}

impl Grid {
    pub fn new(
        dims: Vec<usize>,
        spacing: Vec<f64>,
        origin: Vec<f64>,
        boundary: Boundary,
    ) -> Result<Self, FdError> {
        let grid = Self {
            dims,
            spacing,
            origin,
            boundary,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Periodic 1D grid of `n` cells covering `[lo, hi)`.
    pub fn line(n: usize, lo: f64, hi: f64, boundary: Boundary) -> Result<Self, FdError> {
        Self::new(vec![n], vec![(hi - lo) / n as f64], vec![lo], boundary)
    }

    pub fn validate(&self) -> Result<(), FdError> {
        let d = self.dims.len();
        if !(1..=3).contains(&d) || self.spacing.len() != d || self.origin.len() != d {
            return Err(FdError::GridShape {
                dims: self.dims.clone(),
                spacing: self.spacing.clone(),
            });
        }
        if let Some((axis, &extent)) = self.dims.iter().enumerate().find(|(_, &e)| e < 3) {
            return Err(FdError::GridTooSmall { axis, extent });
        }
        if self.spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(FdError::BadSpacing(self.spacing.clone()));
        }
        Ok(())
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = Vec::with_capacity(self.dims.len());
        let mut s = 1;
        for &e in &self.dims {
            strides.push(s);
            s *= e;
        }
        strides
    }

    /// Cell-centre coordinates of flat index `idx`.
    pub fn center(&self, idx: usize) -> Vec<f64> {
        let mut rem = idx;
        self.dims
            .iter()
            .zip(&self.spacing)
            .zip(&self.origin)
            .map(|((&e, &h), &o)| {
                let i = rem % e;
                rem /= e;
                o + (i as f64 + 0.5) * h
            })
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    /// Total mass `Σ C · cell volume`.
    pub fn mass(&self, field: &[f64]) -> f64 {
        field.iter().sum::<f64>() * self.cell_volume()
    }
}

/// Stability limits for the explicit scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityLimits {
    /// `0.9 · min_i dx_i² / (2 d D)`
    pub diffusion: f64,
    /// `0.9 · min_i dx_i / |v_i|` over axes with non-zero velocity.
    pub advection: f64,
    /// `0.9 / Σ_i (2D/dx_i² + |v_i|/dx_i)`, the joint positivity bound.
    pub combined: f64,
}

impl StabilityLimits {
    pub fn max_dt(&self) -> f64 {
        self.diffusion.min(self.advection).min(self.combined)
    }
}

pub fn stability_limits(grid: &Grid, diffusion: f64, velocity: &[f64]) -> StabilityLimits {
    let d = grid.ndim() as f64;
    let mut diff = f64::INFINITY;
    let mut adv = f64::INFINITY;
    let mut rate = 0.0;
    for (&h, &v) in grid.spacing.iter().zip(velocity) {
        if diffusion > 0.0 {
            diff = diff.min(h * h / (2.0 * d * diffusion));
        }
        if v != 0.0 {
            adv = adv.min(h / v.abs());
        }
        rate += 2.0 * diffusion / (h * h) + v.abs() / h;
    }
    StabilityLimits {
        diffusion: STABILITY_FACTOR * diff,
        advection: STABILITY_FACTOR * adv,
        combined: if rate > 0.0 {
            STABILITY_FACTOR / rate
        } else {
            f64::INFINITY
        },
    }
}

/// Steps `c0` forward `steps` times and returns the field after each step.
pub fn solve_ade_fd(
    grid: &Grid,
    c0: &[f64],
    diffusion: f64,
    velocity: &[f64],
    dt: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>, FdError> {
    grid.validate()?;
    if c0.len() != grid.len() {
        return Err(FdError::FieldSize {
            expected: grid.len(),
            got: c0.len(),
        });
    }
    if velocity.len() != grid.ndim() {
        return Err(FdError::VelocityDim {
            expected: grid.ndim(),
            got: velocity.len(),
        });
    }
    if !(diffusion >= 0.0 && diffusion.is_finite()) {
        return Err(FdError::BadDiffusion(diffusion));
    }
    let limits = stability_limits(grid, diffusion, velocity);
    if !(dt > 0.0 && dt <= limits.max_dt()) {
        return Err(FdError::Unstable {
            dt,
            diffusion_limit: limits.diffusion,
            advection_limit: limits.advection,
            combined_limit: limits.combined,
        });
    }

    let strides = grid.strides();
    let n = grid.len();
    let mut frames = Vec::with_capacity(steps);
    let mut current = c0.to_vec();
    let mut delta = vec![0.0; n];
    for step in 0..steps {
        delta.iter_mut().for_each(|x| *x = 0.0);
        for axis in 0..grid.ndim() {
            let extent = grid.dims[axis];
            let stride = strides[axis];
            let h = grid.spacing[axis];
            let v = velocity[axis];
            let k = dt / h;
            for idx in 0..n {
                let i = (idx / stride) % extent;
                // flux through the face between cell `idx` and its +1 neighbour
                let right = if i + 1 < extent {
                    idx + stride
                } else if grid.boundary == Boundary::Periodic {
                    idx + stride - extent * stride
                } else {
                    continue;
                };
                let (cl, cr) = (current[idx], current[right]);
                let upwind = if v >= 0.0 { v * cl } else { v * cr };
                let flux = upwind - diffusion * (cr - cl) / h;
                delta[idx] -= k * flux;
                delta[right] += k * flux;
            }
        }
        for (c, d) in current.iter_mut().zip(&delta) {
            *c += d;
        }
        if current.iter().any(|c| !c.is_finite()) {
            return Err(FdError::NonFinite(step));
        }
        frames.push(current.clone());
    }
    Ok(frames)
}

/// Free-space fundamental solution advected at `v`:
/// `(4πD τ)^(-d/2) exp(-‖x - x0 - v t‖² / (4 D τ))` with `τ = t + t_offset`.
pub fn analytic_gaussian(
    x: &[f64],
    t: f64,
    diffusion: f64,
    velocity: &[f64],
    x0: &[f64],
    t_offset: f64,
) -> Result<f64, FdError> {
    let d = x.len();
    if velocity.len() != d || x0.len() != d {
        return Err(FdError::PointDim {
            expected: d,
            got: velocity.len().min(x0.len()),
        });
    }
    if !(diffusion > 0.0) {
        return Err(FdError::NonPositiveDiffusion(diffusion));
    }
    let tau = t + t_offset;
    if !(tau > 0.0) {
        return Err(FdError::NonPositiveTime(tau));
    }
    let r2: f64 = x
        .iter()
        .zip(velocity)
        .zip(x0)
        .map(|((&xi, &vi), &ci)| {
            let r = xi - ci - vi * t;
            r * r
        })
        .sum();
    let norm = (4.0 * PI * diffusion * tau).powf(-(d as f64) / 2.0);
    Ok(norm * (-r2 / (4.0 * diffusion * tau)).exp())
}

/// Samples [`analytic_gaussian`] at every cell centre.
pub fn analytic_field(
    grid: &Grid,
    t: f64,
    diffusion: f64,
    velocity: &[f64],
    x0: &[f64],
    t_offset: f64,
) -> Result<Vec<f64>, FdError> {
    (0..grid.len())
        .map(|i| analytic_gaussian(&grid.center(i), t, diffusion, velocity, x0, t_offset))
        .collect()
}
