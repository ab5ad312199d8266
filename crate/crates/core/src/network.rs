//! MLP surrogate `N(x, t; θ)` with analytic input derivatives.
//!
//! Inputs are rows `[x_1, .., x_d, t]`. Hidden layers apply `tanh`; the output
//! layer is affine. [`MlpNodes::forward_with_derivs`] pushes, per input
//! coordinate, the triple `(z, ∂z/∂u, ∂²z/∂u²)` through every layer using only
//! tape primitives, so the residual loss can be differentiated with respect
//! to the weights by ordinary reverse mode.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`:
//!
//! ```text
//! magic    4 bytes  "EMLP"
//! version  u32      1
//! n_dims   u32      number of layer widths
//! dims     u32 x n_dims
//! then for each layer l: W_l (fan_in x fan_out, row-major), b_l (fan_out)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::autodiff::{gemm, AutodiffError, NodeId, Tape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMLP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden width used by default.
pub const HIDDEN_WIDTH: usize = 32;
/// Number of hidden layers used by default.
pub const HIDDEN_LAYERS: usize = 4;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid layer widths {0:?}: need at least input and output, all positive, output width 1")]
    InvalidLayerDims(Vec<usize>),
    #[error("spatial dimension {0} unsupported (expected 1, 2 or 3)")]
    UnsupportedSpatialDim(usize),
    #[error("points have {got} columns, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {layer}: parameter shape {got:?} does not match expected {expected:?}")]
    ParamShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite network parameter in layer {0}")]
    NonFiniteParam(usize),
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Hidden-layer activation. Only `Tanh` is used for training; `Identity`
/// turns the network into an affine map, which is handy for checking the
/// derivative lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

/// `[d + 1, 32, 32, 32, 32, 1]`.
pub fn default_layer_dims(spatial_dim: usize) -> Vec<usize> {
    let mut dims = vec![spatial_dim + 1];
    dims.extend(std::iter::repeat_n(HIDDEN_WIDTH, HIDDEN_LAYERS));
    dims.push(1);
    dims
}

fn validate_dims(dims: &[usize]) -> Result<(), NetworkError> {
    if dims.len() < 2 || dims.contains(&0) || *dims.last().unwrap() != 1 {
        return Err(NetworkError::InvalidLayerDims(dims.to_vec()));
    }
    Ok(())
}

/// Weights `W_l` (`fan_in x fan_out`) and biases `b_l` (`1 x fan_out`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases. Reproducible per seed.
    pub fn init_glorot(layer_dims: &[usize], seed: u64) -> Result<Self, NetworkError> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite glorot bound");
            let w = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, w));
            biases.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Tanh,
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self, NetworkError> {
        validate_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(&[p[0], p[1]]))
            .collect();
        let biases = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(&[1, p[1]]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Tanh,
        })
    }

    pub fn from_parts(
        layer_dims: &[usize],
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self, NetworkError> {
        validate_dims(layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(NetworkError::InvalidLayerDims(layer_dims.to_vec()));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            let (w_shape, b_shape) = (vec![pair[0], pair[1]], vec![1, pair[1]]);
            if weights[l].shape() != w_shape.as_slice() {
                return Err(NetworkError::ParamShape {
                    layer: l,
                    expected: w_shape,
                    got: weights[l].shape().to_vec(),
                });
            }
            if biases[l].shape() != b_shape.as_slice() {
                return Err(NetworkError::ParamShape {
                    layer: l,
                    expected: b_shape,
                    got: biases[l].shape().to_vec(),
                });
            }
            if !weights[l].is_finite() || !biases[l].is_finite() {
                return Err(NetworkError::NonFiniteParam(l));
            }
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Tanh,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Number of spatial coordinates (input width minus the time column).
    pub fn spatial_dim(&self) -> usize {
        self.layer_dims[0] - 1
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    /// `(W_l, b_l)` pairs, mutable.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &mut Tensor)> {
        self.weights.iter_mut().zip(self.biases.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    fn check_points(&self, points: &Tensor) -> Result<(), NetworkError> {
        if !points.is_matrix() || points.cols() != self.input_dim() {
            return Err(NetworkError::DimensionMismatch {
                expected: self.input_dim(),
                got: if points.is_matrix() { points.cols() } else { 0 },
            });
        }
        Ok(())
    }

    /// Plain evaluation without recording a tape. `points` is `n x (d + 1)`.
    pub fn forward(&self, points: &Tensor) -> Result<Vec<f64>, NetworkError> {
        self.check_points(points)?;
        let last = self.num_layers() - 1;
        let mut z = points.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut pre = Tensor::matrix(z.rows(), w.cols(), gemm(&z, false, w, false));
            let width = w.cols();
            for row in pre.values_mut().chunks_mut(width) {
                for (x, &bias) in row.iter_mut().zip(b.values()) {
                    *x += bias;
                    if l != last && self.activation == Activation::Tanh {
                        *x = crate::autodiff::fast_tanh(*x);
                    }
                }
            }
            z = pre;
        }
        Ok(z.into_values())
    }

    /// Puts the parameters on `tape` as trainable leaves (or constants).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<MlpNodes, NetworkError> {
        let mut push = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let weights = self.weights.iter().map(&mut push).collect::<Result<Vec<_>, _>>()?;
        let biases = self.biases.iter().map(&mut push).collect::<Result<Vec<_>, _>>()?;
        Ok(MlpNodes {
            layer_dims: self.layer_dims.clone(),
            weights,
            biases,
            activation: self.activation,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.layer_dims.len() + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.values().iter().chain(b.values()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let truncated = |expected| NetworkError::Truncated {
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 12 {
            return Err(truncated(12));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetworkError::BadMagic(magic));
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = read_u32(4);
        if version != CHECKPOINT_VERSION {
            return Err(NetworkError::UnsupportedVersion(version));
        }
        let n_dims = read_u32(8) as usize;
        let header = 12 + 4 * n_dims;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let dims: Vec<usize> = (0..n_dims).map(|i| read_u32(12 + 4 * i) as usize).collect();
        validate_dims(&dims)?;
        let n_params: usize = dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        let expected = header + 8 * n_params;
        if bytes.len() != expected {
            return Err(truncated(expected));
        }
        let mut reals = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in dims.windows(2) {
            let w: Vec<f64> = reals.by_ref().take(p[0] * p[1]).collect();
            let b: Vec<f64> = reals.by_ref().take(p[1]).collect();
            weights.push(Tensor::matrix(p[0], p[1], w));
            biases.push(Tensor::matrix(1, p[1], b));
        }
        Self::from_parts(&dims, weights, biases)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Network parameters as they sit on a tape.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    layer_dims: Vec<usize>,
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
    activation: Activation,
}

/// Network value and input derivatives at a batch of points, all `n x 1`
/// nodes on the same tape as the parameters.
#[derive(Debug, Clone)]
pub struct DerivBundle {
    pub value: NodeId,
    /// ∂N/∂t
    pub dt: NodeId,
    /// ∂N/∂x_i, one node per spatial coordinate.
    pub grad: Vec<NodeId>,
    /// Σ_i ∂²N/∂x_i²
    pub lap: NodeId,
}

impl DerivBundle {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.value(self.value).rows()
    }

    pub fn spatial_dim(&self) -> usize {
        self.grad.len()
    }
}

impl MlpNodes {
    pub fn weights(&self) -> &[NodeId] {
        &self.weights
    }

    pub fn biases(&self) -> &[NodeId] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn check_points(&self, points: &Tensor) -> Result<(), NetworkError> {
        if !points.is_matrix() || points.cols() != self.input_dim() {
            return Err(NetworkError::DimensionMismatch {
                expected: self.input_dim(),
                got: if points.is_matrix() { points.cols() } else { 0 },
            });
        }
        Ok(())
    }

    /// Network output for `points` (`n x (d + 1)`), recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, points: &Tensor) -> Result<NodeId, NetworkError> {
        self.check_points(points)?;
        let mut z = tape.constant(points.clone())?;
        let last = self.weights.len() - 1;
        for l in 0..=last {
            let lin = tape.matmul(z, self.weights[l])?;
            let pre = tape.add(lin, self.biases[l])?;
            z = if l == last || self.activation == Activation::Identity {
                pre
            } else {
                tape.tanh(pre)?
            };
        }
        Ok(z)
    }

    /// Value, time derivative, spatial gradient and Laplacian at `points`.
    ///
    /// Through an affine layer the lanes map as `(Wz + b, Wz', Wz'')`; through
    /// `a = tanh(z)` they map as `(a, s z', s z'' - 2 a s (z')²)` with
    /// `s = 1 - a²`. The time lane carries first derivatives only.
    pub fn forward_with_derivs(
        &self,
        tape: &mut Tape,
        points: &Tensor,
    ) -> Result<DerivBundle, NetworkError> {
        self.check_points(points)?;
        let n = points.rows();
        let in_dim = self.input_dim();
        let spatial = in_dim - 1;
        if !(1..=3).contains(&spatial) {
            return Err(NetworkError::UnsupportedSpatialDim(spatial));
        }
        let one = tape.constant(Tensor::scalar(1.0))?;
        let mut z = tape.constant(points.clone())?;

        // first[i] = ∂z/∂u_i for every input column; second[i] = ∂²z/∂x_i²
        // for spatial columns, None while identically zero.
        let mut first = Vec::with_capacity(in_dim);
        for i in 0..in_dim {
            let mut unit = vec![0.0; n * in_dim];
            unit.iter_mut().skip(i).step_by(in_dim).for_each(|v| *v = 1.0);
            first.push(tape.constant(Tensor::matrix(n, in_dim, unit))?);
        }
        let mut second: Vec<Option<NodeId>> = vec![None; spatial];

        let last = self.weights.len() - 1;
        for l in 0..=last {
            let w = self.weights[l];
            let lin = tape.matmul(z, w)?;
            let pre = tape.add(lin, self.biases[l])?;
            for lane in first.iter_mut() {
                *lane = tape.matmul(*lane, w)?;
            }
            for lane in second.iter_mut().flatten() {
                *lane = tape.matmul(*lane, w)?;
            }
            if l == last || self.activation == Activation::Identity {
                z = pre;
                continue;
            }
            let a = tape.tanh(pre)?;
            let a_sq = tape.square(a)?;
            let neg_a_sq = tape.scale(a_sq, -1.0)?;
            let s = tape.add(neg_a_sq, one)?;
            let a_s = tape.mul(a, s)?;
            for i in 0..spatial {
                let zp = first[i];
                let zp_sq = tape.square(zp)?;
                let curv = tape.mul(a_s, zp_sq)?;
                second[i] = Some(match second[i] {
                    Some(zpp) => {
                        let lin_part = tape.mul(s, zpp)?;
                        let twice = tape.scale(curv, 2.0)?;
                        tape.sub(lin_part, twice)?
                    }
                    None => tape.scale(curv, -2.0)?,
                });
            }
            for lane in first.iter_mut() {
                *lane = tape.mul(s, *lane)?;
            }
            z = a;
        }

        let dt = first[spatial];
        first.truncate(spatial);
        let mut lap: Option<NodeId> = None;
        for lane in second.into_iter().flatten() {
            lap = Some(match lap {
                Some(acc) => tape.add(acc, lane)?,
                None => lane,
            });
        }
        let lap = match lap {
            Some(node) => node,
            None => tape.constant(Tensor::zeros(&[n, 1]))?,
        };
        Ok(DerivBundle {
            value: z,
            dt,
            grad: first,
            lap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_is_reproducible_with_zero_biases() {
        let dims = default_layer_dims(1);
        assert_eq!(dims, vec![2, 32, 32, 32, 32, 1]);
        let a = MlpParams::init_glorot(&dims, 7).unwrap();
        let b = MlpParams::init_glorot(&dims, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.biases().iter().all(|b| b.values().iter().all(|&v| v == 0.0)));
        let c = MlpParams::init_glorot(&dims, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_bound_for_square_hidden_layer() {
        let bound = glorot_bound(32, 32);
        assert!((bound - 0.306_186_217_847_897_2).abs() < 1e-15);
        let p = MlpParams::init_glorot(&[2, 32, 32, 1], 3).unwrap();
        assert!(p.weights()[1].values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(MlpParams::init_glorot(&[], 0).is_err());
        assert!(MlpParams::init_glorot(&[2], 0).is_err());
        assert!(MlpParams::init_glorot(&[2, 0, 1], 0).is_err());
        assert!(MlpParams::init_glorot(&[2, 4, 3], 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 8, 8, 1]).unwrap();
        let pts = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.1, 0.0]);
        assert_eq!(p.forward(&pts).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer_is_exact() {
        let w = Tensor::matrix(2, 1, vec![1.5, -2.0]);
        let b = Tensor::matrix(1, 1, vec![0.25]);
        let p = MlpParams::from_parts(&[2, 1], vec![w], vec![b]).unwrap();
        let pts = Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 0.0]);
        assert_eq!(p.forward(&pts).unwrap(), vec![1.5 - 4.0 + 0.25, -0.75 + 0.25]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = MlpParams::init_glorot(&[3, 4, 1], 1).unwrap();
        let pts = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        assert!(matches!(
            p.forward(&pts),
            Err(NetworkError::DimensionMismatch { expected: 3, got: 2 })
        ));
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, true).unwrap();
        assert!(nodes.forward_with_derivs(&mut tape, &pts).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = MlpParams::init_glorot(&default_layer_dims(2), 11).unwrap();
        let pts = Tensor::matrix(3, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.9, 0.0, -1.0, 0.2]);
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, false).unwrap();
        let out = nodes.forward(&mut tape, &pts).unwrap();
        let bundle = nodes.forward_with_derivs(&mut tape, &pts).unwrap();
        let plain = p.forward(&pts).unwrap();
        for ((a, b), c) in tape.value(out).values().iter().zip(&plain).zip(tape.value(bundle.value).values()) {
            assert!((a - b).abs() < 1e-14);
            assert!((a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = MlpParams::init_glorot(&default_layer_dims(3), 5).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[0..4], b"EMLP");
        assert_eq!(MlpParams::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MlpParams::from_bytes(&bad), Err(NetworkError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            MlpParams::from_bytes(&bad),
            Err(NetworkError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            MlpParams::from_bytes(&bytes[..bytes.len() - 8]),
            Err(NetworkError::Truncated { .. })
        ));
    }
}
