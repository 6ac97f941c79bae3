//! Three-way classifier head: one real logit plus `K` fake-cluster logits.
//!
//! A stack of affine layers with ReLU between them, exact reverse-mode
//! gradients, and a little-endian checkpoint format (`TDMD`).

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::io_util::{self, ByteReader};
use crate::matrix::{log_sum_exp, Matrix, MatrixError};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDMD";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];
pub const DEFAULT_CLUSTERS: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {actual} features, model expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("gradient shape {actual:?} does not match logits shape {expected:?}")]
    GradShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint holds a non-finite parameter")]
    NonFinite,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Layer sizes of a head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of fake clusters `K`; the head emits `1 + K` logits.
    pub clusters: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: DEFAULT_HIDDEN.to_vec(),
            clusters: DEFAULT_CLUSTERS,
        }
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn with_clusters(mut self, clusters: usize) -> Self {
        self.clusters = clusters;
        self
    }

    pub fn output_dim(&self) -> usize {
        1 + self.clusters
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.output_dim());
        w
    }
}

/// Affine layer `y = x Wᵀ + b`; `weights` has one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![F::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &Matrix<F>) -> Result<Matrix<F>, MatrixError> {
        let mut h = x.matmul_transposed(&self.weights)?;
        for i in 0..h.rows() {
            for (v, &b) in h.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriarchyModel<F> {
    layers: Vec<Dense<F>>,
}

/// Logits of a batch: column 0 is the real logit, columns `1..=K` the fake clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriarchyLogits<F> {
    pub z: Matrix<F>,
}

impl<F: Scalar> TriarchyLogits<F> {
    pub fn new(z: Matrix<F>) -> Self {
        Self { z }
    }

    pub fn batch(&self) -> usize {
        self.z.rows()
    }

    pub fn clusters(&self) -> usize {
        self.z.cols() - 1
    }

    pub fn fake_block(&self) -> Matrix<F> {
        self.z.column_block(1, self.z.cols())
    }
}

/// Per-sample `(z_real, log Σ_k exp(z_k))`; a 2-way softmax over this pair
/// equals the marginalized 3-way softmax.
pub fn binary_logits<F: Scalar>(z: &TriarchyLogits<F>) -> Matrix<F> {
    let mut out = Matrix::zeros(z.batch(), 2);
    for (i, row) in z.z.row_iter().enumerate() {
        out.set(i, 0, row[0]);
        out.set(i, 1, log_sum_exp(&row[1..]).expect("at least one fake cluster"));
    }
    out
}

/// Probability that each sample is fake.
pub fn fake_probability<F: Scalar>(z: &TriarchyLogits<F>) -> Vec<F> {
    binary_logits(z)
        .row_iter()
        .map(|r| {
            // σ(b − a), stable for either sign
            let d = r[1] - r[0];
            if d >= F::zero() {
                F::one() / (F::one() + (-d).exp())
            } else {
                let e = d.exp();
                e / (F::one() + e)
            }
        })
        .collect()
}

/// Saved activations of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    /// Input to each layer.
    inputs: Vec<Matrix<F>>,
    pub logits: TriarchyLogits<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(model: &TriarchyModel<F>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.outputs(), l.inputs()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    /// All entries flattened in parameter order.
    pub fn flatten(&self) -> Vec<F> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers<F: Scalar>(layers: &[Dense<F>]) -> Vec<F> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weights.data());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl<F: Scalar> TriarchyModel<F> {
    /// Default head (`input_dim → 256 → 128 → 3`), He-normal weights, zero biases.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self, ModelError> {
        Self::init_with(&ModelShape::new(input_dim), seed)
    }

    pub fn init_with(shape: &ModelShape, seed: u64) -> Result<Self, ModelError> {
        if shape.input_dim == 0 {
            return Err(ModelError::Architecture("input_dim must be at least 1".into()));
        }
        if shape.clusters < 2 {
            return Err(ModelError::Architecture("need at least two fake clusters".into()));
        }
        if shape.hidden.contains(&0) {
            return Err(ModelError::Architecture("hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = shape.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                let weights =
                    Matrix::from_fn(fan_out, fan_in, |_, _| F::lit(normal.sample(&mut rng)));
                Dense {
                    weights,
                    bias: vec![F::zero(); fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Builds a model from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Dense<F>>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(ModelError::Architecture(format!(
                    "layer {i}: {} biases for {} outputs",
                    l.bias.len(),
                    l.outputs()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(ModelError::Architecture(format!(
                    "layer {i} emits {} values, layer {} expects {}",
                    w[0].outputs(),
                    i + 1,
                    w[1].inputs()
                )));
            }
        }
        let out = layers.last().map(Dense::outputs).unwrap_or(0);
        if out < 3 {
            return Err(ModelError::Architecture(format!(
                "output width {out} leaves fewer than two fake clusters"
            )));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<F>] {
        &mut self.layers
    }

    pub fn shape(&self) -> ModelShape {
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        ModelShape {
            input_dim: self.input_dim(),
            hidden: hidden.iter().map(Dense::outputs).collect(),
            clusters: last.outputs() - 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn clusters(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(1) - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<F> {
        flatten_layers(&self.layers)
    }

    fn check_input(&self, x: &Matrix<F>) -> Result<(), ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::DimMismatch {
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<TriarchyLogits<F>, ModelError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a)?;
            if i < last {
                relu_in_place(&mut a);
            }
        }
        Ok(TriarchyLogits::new(a))
    }

    pub fn forward_trace(&self, x: &Matrix<F>) -> Result<ForwardTrace<F>, ModelError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.apply(&a)?;
            if i < last {
                relu_in_place(&mut h);
            }
            inputs.push(a);
            a = h;
        }
        Ok(ForwardTrace {
            inputs,
            logits: TriarchyLogits::new(a),
        })
    }

    /// Gradients of a loss with respect to every parameter, given `dLoss/dlogits`.
    pub fn backward(&self, x: &Matrix<F>, grad_logits: &Matrix<F>) -> Result<Gradients<F>, ModelError> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, grad_logits)
    }

    pub fn backward_trace(
        &self,
        trace: &ForwardTrace<F>,
        grad_logits: &Matrix<F>,
    ) -> Result<Gradients<F>, ModelError> {
        if grad_logits.shape() != trace.logits.z.shape() {
            return Err(ModelError::GradShape {
                expected: trace.logits.z.shape(),
                actual: grad_logits.shape(),
            });
        }
        let mut grads: Vec<Dense<F>> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let weights = delta.transpose_matmul(input)?;
            let bias = delta.col_sums();
            grads.push(Dense { weights, bias });
            if i > 0 {
                let mut upstream = delta.matmul(&layer.weights)?;
                // ReLU mask: the input of layer i is the activated output of layer i-1
                for (g, &a) in upstream.data_mut().iter_mut().zip(input.data()) {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                }
                delta = upstream;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Writes the `TDMD` checkpoint.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        io_util::write_u32(w, CHECKPOINT_VERSION)?;
        io_util::write_u32(w, self.input_dim() as u32)?;
        io_util::write_u32(w, self.layers.len() as u32)?;
        for l in &self.layers {
            io_util::write_u32(w, l.outputs() as u32)?;
            io_util::write_u32(w, l.inputs() as u32)?;
            for &v in l.weights.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
            for &v in &l.bias {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array().ok_or(ModelError::Truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = r.u32().ok_or(ModelError::Truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(version));
        }
        let input_dim = r.u32().ok_or(ModelError::Truncated)? as usize;
        let count = r.u32().ok_or(ModelError::Truncated)? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rows = r.u32().ok_or(ModelError::Truncated)? as usize;
            let cols = r.u32().ok_or(ModelError::Truncated)? as usize;
            let n = rows.checked_mul(cols).ok_or(ModelError::Truncated)?;
            if r.remaining() < (n + rows).saturating_mul(8) {
                return Err(ModelError::Truncated);
            }
            let mut read_f = || -> Result<F, ModelError> {
                let v = r.f64().ok_or(ModelError::Truncated)?;
                if !v.is_finite() {
                    return Err(ModelError::NonFinite);
                }
                Ok(F::lit(v))
            };
            let data = (0..n).map(|_| read_f()).collect::<Result<Vec<_>, _>>()?;
            let bias = (0..rows).map(|_| read_f()).collect::<Result<Vec<_>, _>>()?;
            layers.push(Dense {
                weights: Matrix::from_vec(rows, cols, data)?,
                bias,
            });
        }
        if r.remaining() != 0 {
            return Err(ModelError::Architecture("trailing bytes after last layer".into()));
        }
        let model = Self::from_layers(layers)?;
        if model.input_dim() != input_dim {
            return Err(ModelError::DimMismatch {
                expected: input_dim,
                actual: model.input_dim(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        io_util::write_atomic(path, |w| self.write_checkpoint(w))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_checkpoint(&mut r)
    }
}

fn relu_in_place<F: Scalar>(m: &mut Matrix<F>) {
    for v in m.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::softmax;
    use rand::Rng;

    fn small_model(seed: u64) -> TriarchyModel<f64> {
        let shape = ModelShape::new(5).with_hidden(&[7, 6]);
        TriarchyModel::init_with(&shape, seed).unwrap()
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(b, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = TriarchyModel::<f64>::init(1024, 1024).unwrap();
        let b = TriarchyModel::<f64>::init(1024, 1024).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        let small = TriarchyModel::<f64>::init(8, 3).unwrap();
        assert!(small.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_eq!(small.clusters(), 2);
        assert_eq!(small.layers().last().unwrap().outputs(), 3);
    }

    #[test]
    fn shape_round_trips() {
        let shape = ModelShape::new(5).with_hidden(&[7, 6]).with_clusters(4);
        assert_eq!(TriarchyModel::<f64>::init_with(&shape, 0).unwrap().shape(), shape);
        assert_eq!(small_model(1).shape(), ModelShape::new(5).with_hidden(&[7, 6]));
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let m = TriarchyModel::<f64>::init(1024, 1024).unwrap();
        for l in m.layers() {
            let w = l.weights.data();
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expected = 2.0 / l.inputs() as f64;
            assert!((var / expected - 1.0).abs() < 0.2, "var {var} vs {expected}");
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let layers = vec![Dense::<f64>::zeros(4, 3), Dense::zeros(3, 4)];
        let m = TriarchyModel::from_layers(layers).unwrap();
        let z = m.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(z.z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_built_identity_layer_passes_input() {
        let m = TriarchyModel::from_layers(vec![Dense {
            weights: Matrix::<f64>::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[[1.5, -2.0, 0.25]]);
        assert_eq!(m.forward(&x).unwrap().z, x);
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let m = small_model(9);
        let x = random_batch(3, 6, 5);
        let z = m.forward(&x).unwrap();
        for b in 0..x.rows() {
            let mut a: Vec<f64> = x.row(b).to_vec();
            for (li, l) in m.layers().iter().enumerate() {
                let mut next = Vec::new();
                for o in 0..l.outputs() {
                    let mut s = l.bias[o];
                    for (i, &ai) in a.iter().enumerate() {
                        s += l.weights.get(o, i) * ai;
                    }
                    if li + 1 < m.layers().len() && s < 0.0 {
                        s = 0.0;
                    }
                    next.push(s);
                }
                a = next;
            }
            for (k, &v) in a.iter().enumerate() {
                assert!((v - z.z.get(b, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = small_model(1);
        assert!(matches!(
            m.forward(&Matrix::zeros(2, 4)),
            Err(ModelError::DimMismatch { expected: 5, actual: 4 })
        ));
        let x = random_batch(1, 2, 5);
        assert!(matches!(
            m.backward(&x, &Matrix::zeros(2, 2)),
            Err(ModelError::GradShape { .. })
        ));
    }

    #[test]
    fn binary_logit_examples() {
        let z = TriarchyLogits::new(Matrix::from_rows(&[[0.0f64, 0.0, 0.0], [5.0, -100.0, -100.0]]));
        let b = binary_logits(&z);
        assert_eq!(b.get(0, 0), 0.0);
        assert!((b.get(0, 1) - 2f64.ln()).abs() < 1e-15);
        let p = fake_probability(&z);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(p[1] < 1e-40);
    }

    #[test]
    fn binary_logits_marginalize_three_way_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let row: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
            let z = TriarchyLogits::new(Matrix::from_rows(std::slice::from_ref(&row)));
            let pair = softmax(binary_logits(&z).row(0)).unwrap();
            let full = softmax(&row).unwrap();
            assert!((pair[0] - full[0]).abs() < 1e-12);
            assert!((pair[1] - (full[1] + full[2])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = small_model(2);
        let x = random_batch(2, 4, 5);
        let g = m.backward(&x, &Matrix::zeros(4, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient_is_input_times_upstream() {
        let m = TriarchyModel::from_layers(vec![Dense {
            weights: Matrix::from_rows(&[[0.5f64], [1.0], [-1.0]]),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Matrix::from_rows(&[[3.0f64]]);
        let up = Matrix::from_rows(&[[2.0f64, -1.0, 0.5]]);
        let g = m.backward(&x, &up).unwrap();
        assert_eq!(g.layers[0].weights.data(), &[6.0, -3.0, 1.5]);
        assert_eq!(g.layers[0].bias, vec![2.0, -1.0, 0.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // linear functional of the logits: L = Σ w ⊙ z
        for seed in 0..5 {
            let mut m = small_model(seed);
            let x = random_batch(seed + 100, 4, 5);
            let w = random_batch(seed + 200, 4, 3);
            let g = m.backward(&x, &w).unwrap().flatten();
            let h = 1e-5;
            let mut idx = 0;
            for li in 0..m.layers().len() {
                let n = m.layers()[li].weights.data().len() + m.layers()[li].bias.len();
                for p in 0..n {
                    let loss = |m: &TriarchyModel<f64>| -> f64 {
                        let z = m.forward(&x).unwrap().z;
                        z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
                    };
                    let nudge = |m: &mut TriarchyModel<f64>, d: f64| {
                        let l = &mut m.layers_mut()[li];
                        let nw = l.weights.data().len();
                        if p < nw {
                            l.weights.data_mut()[p] += d;
                        } else {
                            l.bias[p - nw] += d;
                        }
                    };
                    nudge(&mut m, h);
                    let up = loss(&m);
                    nudge(&mut m, -2.0 * h);
                    let down = loss(&m);
                    nudge(&mut m, h);
                    let numeric = (up - down) / (2.0 * h);
                    let a = g[idx];
                    assert!(
                        (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()).max(1e-2),
                        "param {idx}: {a} vs {numeric}"
                    );
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn relu_head_is_lipschitz_in_max_norm_per_layer() {
        let m = small_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in m.layers() {
            // ‖Wx − Wy‖∞ ≤ max_row ‖W_row‖₁ · ‖x − y‖∞, and ReLU does not expand it
            let bound = (0..l.outputs())
                .map(|o| l.weights.row(o).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            for _ in 0..50 {
                let x = Matrix::from_fn(1, l.inputs(), |_, _| rng.random_range(-1.0..1.0));
                let y = Matrix::from_fn(1, l.inputs(), |_, c| x.get(0, c) + rng.random_range(-0.01..0.01));
                let fx = l.apply(&x).unwrap().map(|v| v.max(0.0));
                let fy = l.apply(&y).unwrap().map(|v| v.max(0.0));
                let dout = fx.data().iter().zip(fy.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let din = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dout <= bound * din + 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = small_model(8);
        let bytes = m.to_checkpoint_bytes();
        let back = TriarchyModel::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TriarchyModel::<f64>::from_checkpoint_bytes(&bad),
            Err(ModelError::BadMagic(_))
        ));
        assert!(matches!(
            TriarchyModel::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Truncated)
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            TriarchyModel::<f64>::from_checkpoint_bytes(&v2),
            Err(ModelError::Version(2))
        ));
    }
}
