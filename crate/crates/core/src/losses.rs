//! Training objectives: binary real/fake cross-entropy, swapped-prediction
//! assignment loss, assignment consistency, and their weighted total.
//!
//! Every loss returns its value together with the gradient with respect to
//! the logits it consumes. Sinkhorn targets enter as constants.

use thiserror::Error;

use crate::data::Label;
use crate::matrix::{log_softmax_temp, log_sum_exp, Matrix, MatrixError};
use crate::model::{binary_logits, TriarchyLogits};
use crate::scalar::Scalar;
use crate::sinkhorn::AssignmentMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("loss needs a non-empty batch")]
    EmptyBatch,
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Mixing weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F> {
    /// Share of the binary loss; the cluster loss gets `1 − beta`.
    pub beta: F,
    /// Weight of the assignment loss inside the cluster loss.
    pub omega1: F,
    /// Weight of the consistency loss inside the cluster loss.
    pub omega2: F,
    /// Softmax temperature applied to cluster logits in the assignment loss.
    pub tau: F,
}

impl<F: Scalar> Default for LossWeights<F> {
    fn default() -> Self {
        Self {
            beta: F::lit(0.7),
            omega1: F::one(),
            omega2: F::lit(0.1),
            tau: F::lit(0.1),
        }
    }
}

impl<F: Scalar> LossWeights<F> {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta >= F::zero() && self.beta <= F::one()) {
            return Err(LossError::BadWeights(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.omega1 >= F::zero()) || !(self.omega2 >= F::zero()) {
            return Err(LossError::BadWeights("omega weights must be nonnegative".into()));
        }
        if !(self.tau > F::zero()) {
            return Err(LossError::BadWeights(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }

    /// Whether any clustering term carries weight.
    pub fn clustering_active(&self) -> bool {
        self.beta < F::one() && (self.omega1 > F::zero() || self.omega2 > F::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport<F> {
    pub binary: F,
    pub assignment: F,
    pub consistency: F,
    pub cluster: F,
    pub total: F,
}

/// `β·binary + (1−β)·(ω1·assignment + ω2·consistency)`.
pub fn total_loss<F: Scalar>(binary: F, assignment: F, consistency: F, w: &LossWeights<F>) -> LossReport<F> {
    let cluster = w.omega1 * assignment + w.omega2 * consistency;
    LossReport {
        binary,
        assignment,
        consistency,
        cluster,
        total: w.beta * binary + (F::one() - w.beta) * cluster,
    }
}

/// Value and gradient of a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<F> {
    pub value: F,
    pub grad: Matrix<F>,
}

/// Mean cross-entropy of the marginal real/fake decision.
///
/// `p(fake)` is the summed softmax mass of the fake clusters; evaluated through
/// the two binary logits so it stays finite for saturated inputs. The gradient
/// covers every column of `z`.
pub fn binary_loss<F: Scalar>(z: &TriarchyLogits<F>, labels: &[Label]) -> Result<LossValue<F>, LossError> {
    let n = z.batch();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            rows: n,
        });
    }
    let pair = binary_logits(z);
    let inv_n = F::one() / F::from_usize_lossy(n);
    let mut total = F::zero();
    let mut grad = Matrix::zeros(n, z.z.cols());
    for (i, label) in labels.iter().enumerate() {
        let (a, b) = (pair.get(i, 0), pair.get(i, 1));
        let lse = log_sum_exp(&[a, b])?;
        let (log_real, log_fake) = (a - lse, b - lse);
        let y = if label.is_fake() { F::one() } else { F::zero() };
        total -= y * log_fake + (F::one() - y) * log_real;

        let p_real = log_real.exp();
        let p_fake = log_fake.exp();
        grad.set(i, 0, (p_real - (F::one() - y)) * inv_n);
        // d b / d z_k = softmax over the fake clusters
        let fake = &z.z.row(i)[1..];
        let g_b = (p_fake - y) * inv_n;
        for (k, &zk) in fake.iter().enumerate() {
            grad.set(i, k + 1, g_b * (zk - b).exp());
        }
    }
    Ok(LossValue {
        value: total * inv_n,
        grad,
    })
}

/// Value of the swapped-prediction loss and its gradients with respect to both views' cluster logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentLoss<F> {
    pub value: F,
    pub grad_view1: Matrix<F>,
    pub grad_view2: Matrix<F>,
}

/// `−1/(2F) Σ_i [Σ_k Q'_ik log p_ik + Σ_k Q_ik log p'_ik]`, `p = softmax(z/τ)`.
///
/// Each view's prediction is supervised by the other view's assignment. An
/// empty fake set yields zero loss with empty gradients.
pub fn assignment_loss<F: Scalar>(
    z_fake: &Matrix<F>,
    z_fake_view2: &Matrix<F>,
    q: &AssignmentMatrix<F>,
    q2: &AssignmentMatrix<F>,
    tau: F,
) -> Result<AssignmentLoss<F>, LossError> {
    let shape = z_fake.shape();
    for other in [z_fake_view2.shape(), q.matrix().shape(), q2.matrix().shape()] {
        if other != shape {
            return Err(LossError::ShapeMismatch(shape, other));
        }
    }
    let f = shape.0;
    if f == 0 {
        return Ok(AssignmentLoss {
            value: F::zero(),
            grad_view1: Matrix::zeros(0, shape.1),
            grad_view2: Matrix::zeros(0, shape.1),
        });
    }
    let scale = F::one() / (F::lit(2.0) * F::from_usize_lossy(f));
    let mut total = F::zero();
    let mut grad_view1 = Matrix::zeros(shape.0, shape.1);
    let mut grad_view2 = Matrix::zeros(shape.0, shape.1);
    for i in 0..f {
        for (z, target, grad) in [
            (z_fake, q2.matrix(), &mut grad_view1),
            (z_fake_view2, q.matrix(), &mut grad_view2),
        ] {
            let logp = log_softmax_temp(z.row(i), tau)?;
            let t = target.row(i);
            let mass: F = t.iter().copied().sum();
            total -= t.iter().zip(&logp).map(|(&a, &b)| a * b).sum::<F>();
            for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
                *g = scale * (logp[k].exp() * mass - t[k]) / tau;
            }
        }
    }
    Ok(AssignmentLoss {
        value: total * scale,
        grad_view1,
        grad_view2,
    })
}

fn check_pair<F: Scalar>(q: &AssignmentMatrix<F>, q2: &AssignmentMatrix<F>) -> Result<(), LossError> {
    if q.matrix().shape() != q2.matrix().shape() {
        return Err(LossError::ShapeMismatch(q.matrix().shape(), q2.matrix().shape()));
    }
    Ok(())
}

/// `1/F Σ_i ‖Q_i − Q'_i‖²`; zero for an empty fake set.
pub fn consistency_loss<F: Scalar>(q: &AssignmentMatrix<F>, q2: &AssignmentMatrix<F>) -> Result<F, LossError> {
    check_pair(q, q2)?;
    let f = q.rows();
    if f == 0 {
        return Ok(F::zero());
    }
    let s: F = q
        .matrix()
        .data()
        .iter()
        .zip(q2.matrix().data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / F::from_usize_lossy(f))
}

/// Gradients of [`consistency_loss`] with respect to `Q` and `Q'`.
pub fn consistency_grad<F: Scalar>(
    q: &AssignmentMatrix<F>,
    q2: &AssignmentMatrix<F>,
) -> Result<(Matrix<F>, Matrix<F>), LossError> {
    check_pair(q, q2)?;
    let (f, k) = q.matrix().shape();
    if f == 0 {
        return Ok((Matrix::zeros(0, k), Matrix::zeros(0, k)));
    }
    let c = F::lit(2.0) / F::from_usize_lossy(f);
    let d = Matrix::from_fn(f, k, |i, j| c * (q.matrix().get(i, j) - q2.matrix().get(i, j)));
    let neg = d.scale(-F::one());
    Ok((d, neg))
}
