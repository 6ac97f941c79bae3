//! Entropy-regularized balanced assignment of fake samples to clusters.
//!
//! Starting from `Q0 = exp(Z/ε)` the solver alternates row normalization and
//! column scaling (columns to `B/K`) for `T` rounds and finishes with one more
//! row normalization. The last step keeps rows stochastic at the cost of exact
//! column balance, which [`balance_deviation`] reports.
//!
//! Two numerically different routes compute the same map: [`sinkhorn`] works
//! on the exponentiated matrix directly, [`sinkhorn_log`] keeps everything as
//! log-weights and never underflows. Both record a [`SinkhornTrace`] that can
//! back-propagate a gradient on `Q` to the input logits.

use thiserror::Error;

use crate::matrix::{
    col_scale_in_place, log_sum_exp, max_value, row_normalize_in_place, Matrix, MatrixError,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SinkhornError {
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("at least one iteration is required")]
    NoIterations,
    #[error("need at least one row and two clusters, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("non-finite logit at ({row}, {col})")]
    NonFiniteLogit { row: usize, col: usize },
    #[error("column {col} lost all mass in round {round}; logits spread too wide for epsilon")]
    DegenerateColumn { col: usize, round: usize },
}

/// How the column marginal is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnTarget {
    /// Every cluster receives `B/K` of the batch mass.
    #[default]
    PerClusterShare,
}

impl ColumnTarget {
    pub fn value<F: Scalar>(self, rows: usize, clusters: usize) -> F {
        match self {
            ColumnTarget::PerClusterShare => {
                F::from_usize_lossy(rows) / F::from_usize_lossy(clusters)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig<F> {
    /// Assignment temperature ε.
    pub epsilon: F,
    /// Number of row/column rounds T.
    pub iterations: usize,
    pub column_target: ColumnTarget,
}

impl<F: Scalar> Default for SinkhornConfig<F> {
    fn default() -> Self {
        Self {
            epsilon: F::lit(0.05),
            iterations: 3,
            column_target: ColumnTarget::PerClusterShare,
        }
    }
}

impl<F: Scalar> SinkhornConfig<F> {
    pub fn new(epsilon: F, iterations: usize) -> Self {
        Self {
            epsilon,
            iterations,
            column_target: ColumnTarget::PerClusterShare,
        }
    }

    pub fn validate(&self) -> Result<(), SinkhornError> {
        if !(self.epsilon > F::zero()) || !self.epsilon.is_finite() {
            return Err(SinkhornError::BadEpsilon(self.epsilon.as_f64()));
        }
        if self.iterations == 0 {
            return Err(SinkhornError::NoIterations);
        }
        Ok(())
    }
}

/// Soft assignment of `B` samples to `K` clusters with unit row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix<F> {
    q: Matrix<F>,
}

impl<F: Scalar> AssignmentMatrix<F> {
    /// Wraps a matrix after checking entries lie in `[0, 1]` and rows sum to 1 within 1e-9.
    pub fn from_matrix(q: Matrix<F>) -> Result<Self, MatrixError> {
        let tol = F::lit(1e-9);
        for (i, row) in q.row_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(v >= F::zero() && v <= F::one()) {
                    return Err(MatrixError::InvalidEntry {
                        row: i,
                        col: j,
                        value: v.as_f64(),
                    });
                }
            }
            let s: F = row.iter().copied().sum();
            if (s - F::one()).abs() > tol {
                return Err(MatrixError::ZeroRowSum(i));
            }
        }
        Ok(Self { q })
    }

    /// Every entry `1/K`.
    pub fn uniform(rows: usize, clusters: usize) -> Self {
        Self {
            q: Matrix::filled(rows, clusters, F::one() / F::from_usize_lossy(clusters)),
        }
    }

    pub fn matrix(&self) -> &Matrix<F> {
        &self.q
    }

    pub fn into_matrix(self) -> Matrix<F> {
        self.q
    }

    pub fn rows(&self) -> usize {
        self.q.rows()
    }

    pub fn clusters(&self) -> usize {
        self.q.cols()
    }

    /// Mean Shannon entropy of the rows, in nats.
    pub fn mean_row_entropy(&self) -> F {
        if self.rows() == 0 {
            return F::zero();
        }
        let total: F = self
            .q
            .row_iter()
            .map(|r| {
                r.iter()
                    .filter(|&&p| p > F::zero())
                    .map(|&p| -p * p.ln())
                    .sum::<F>()
            })
            .sum();
        total / F::from_usize_lossy(self.rows())
    }
}

/// `max_j |colsum_j − B/K| / (B/K)`.
pub fn balance_deviation<F: Scalar>(q: &AssignmentMatrix<F>) -> F {
    let target: F = ColumnTarget::PerClusterShare.value(q.rows(), q.clusters());
    q.matrix()
        .col_sums()
        .into_iter()
        .map(|s| (s - target).abs() / target)
        .fold(F::zero(), F::max)
}

fn check_input<F: Scalar>(logits: &Matrix<F>, cfg: &SinkhornConfig<F>) -> Result<(), SinkhornError> {
    cfg.validate()?;
    if logits.rows() == 0 || logits.cols() < 2 {
        return Err(SinkhornError::BadShape {
            rows: logits.rows(),
            cols: logits.cols(),
        });
    }
    for (i, r) in logits.row_iter().enumerate() {
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(SinkhornError::NonFiniteLogit { row: i, col: j });
        }
    }
    Ok(())
}

/// Balanced assignment of the rows of `logits` (B×K) to K clusters.
pub fn sinkhorn<F: Scalar>(
    logits: &Matrix<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<AssignmentMatrix<F>, SinkhornError> {
    sinkhorn_traced(logits, cfg).map(|(q, _)| q)
}

#[derive(Debug, Clone)]
enum LinearStage<F> {
    Rows { out: Matrix<F>, sums: Vec<F> },
    Columns { out: Matrix<F>, sums: Vec<F>, target: F },
}

/// Intermediate values of one solver run, kept for back-propagation.
#[derive(Debug, Clone)]
pub struct SinkhornTrace<F> {
    epsilon: F,
    kind: TraceKind<F>,
}

#[derive(Debug, Clone)]
enum TraceKind<F> {
    Linear {
        initial: Matrix<F>,
        stages: Vec<LinearStage<F>>,
    },
    Log {
        // log-weights entering each normalization, in order
        inputs: Vec<(bool, Matrix<F>)>,
        output: Matrix<F>,
    },
}

/// [`sinkhorn`] that also returns the trace needed by [`SinkhornTrace::backward`].
pub fn sinkhorn_traced<F: Scalar>(
    logits: &Matrix<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<(AssignmentMatrix<F>, SinkhornTrace<F>), SinkhornError> {
    check_input(logits, cfg)?;
    let (b, k) = logits.shape();
    let target = cfg.column_target.value(b, k);

    // Per-row max shift: a row-constant factor that the first row
    // normalization removes, so Q0 never overflows and no row is all zero.
    let mut q = logits.clone();
    for i in 0..b {
        let row = q.row_mut(i);
        let m = max_value(row).unwrap_or_else(F::zero);
        for v in row.iter_mut() {
            *v = ((*v - m) / cfg.epsilon).exp();
        }
    }
    let initial = q.clone();
    let mut stages = Vec::with_capacity(2 * cfg.iterations + 1);

    for round in 0..cfg.iterations {
        let sums = row_normalize_in_place(&mut q).map_err(|_| SinkhornError::DegenerateColumn {
            col: usize::MAX,
            round,
        })?;
        stages.push(LinearStage::Rows {
            out: q.clone(),
            sums,
        });
        let sums = col_scale_in_place(&mut q, target).map_err(|e| match e {
            MatrixError::ZeroColumnSum(col) => SinkhornError::DegenerateColumn { col, round },
            _ => SinkhornError::DegenerateColumn {
                col: usize::MAX,
                round,
            },
        })?;
        stages.push(LinearStage::Columns {
            out: q.clone(),
            sums,
            target,
        });
    }
    let sums = row_normalize_in_place(&mut q).map_err(|_| SinkhornError::DegenerateColumn {
        col: usize::MAX,
        round: cfg.iterations,
    })?;
    stages.push(LinearStage::Rows {
        out: q.clone(),
        sums,
    });

    let trace = SinkhornTrace {
        epsilon: cfg.epsilon,
        kind: TraceKind::Linear { initial, stages },
    };
    Ok((AssignmentMatrix { q }, trace))
}

/// Same map as [`sinkhorn`], evaluated on log-weights.
pub fn sinkhorn_log<F: Scalar>(
    logits: &Matrix<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<AssignmentMatrix<F>, SinkhornError> {
    sinkhorn_log_traced(logits, cfg).map(|(q, _)| q)
}

pub fn sinkhorn_log_traced<F: Scalar>(
    logits: &Matrix<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<(AssignmentMatrix<F>, SinkhornTrace<F>), SinkhornError> {
    check_input(logits, cfg)?;
    let (b, k) = logits.shape();
    let log_target = cfg.column_target.value::<F>(b, k).ln();

    let mut l = logits.scale(F::one() / cfg.epsilon);
    let mut inputs = Vec::with_capacity(2 * cfg.iterations);
    for _ in 0..cfg.iterations {
        inputs.push((true, l.clone()));
        for i in 0..b {
            let row = l.row_mut(i);
            let lse = log_sum_exp(row).expect("non-empty row");
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        inputs.push((false, l.clone()));
        for j in 0..k {
            let col = l.column(j);
            let lse = log_sum_exp(&col).expect("non-empty column");
            for i in 0..b {
                let v = l.get(i, j);
                l.set(i, j, v - lse + log_target);
            }
        }
    }
    // final row normalization as a stable softmax
    let mut q = l.clone();
    for i in 0..b {
        let row = q.row_mut(i);
        let m = max_value(row).unwrap_or_else(F::zero);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    let trace = SinkhornTrace {
        epsilon: cfg.epsilon,
        kind: TraceKind::Log {
            inputs,
            output: q.clone(),
        },
    };
    Ok((AssignmentMatrix { q }, trace))
}

/// Tries the direct solver and falls back to the log-domain route when a
/// column underflows.
pub fn sinkhorn_robust<F: Scalar>(
    logits: &Matrix<F>,
    cfg: &SinkhornConfig<F>,
) -> Result<(AssignmentMatrix<F>, SinkhornTrace<F>), SinkhornError> {
    match sinkhorn_traced(logits, cfg) {
        Err(SinkhornError::DegenerateColumn { .. }) => sinkhorn_log_traced(logits, cfg),
        other => other,
    }
}

impl<F: Scalar> SinkhornTrace<F> {
    /// True when the log-domain route produced this trace.
    pub fn is_log_domain(&self) -> bool {
        matches!(self.kind, TraceKind::Log { .. })
    }

    /// Pulls `dL/dQ` back to `dL/dlogits`.
    pub fn backward(&self, grad_q: &Matrix<F>) -> Matrix<F> {
        match &self.kind {
            TraceKind::Linear { initial, stages } => {
                let mut g = grad_q.clone();
                for stage in stages.iter().rev() {
                    g = match stage {
                        LinearStage::Rows { out, sums } => row_normalize_backward(out, sums, &g),
                        LinearStage::Columns { out, sums, target } => {
                            col_scale_backward(out, sums, *target, &g)
                        }
                    };
                }
                // Q0 = exp((z - m)/ε); the shift m drops out because the first
                // stage is invariant to per-row scaling.
                let inv_eps = F::one() / self.epsilon;
                let mut out = g;
                for (gv, &q0) in out.data_mut().iter_mut().zip(initial.data()) {
                    *gv = *gv * q0 * inv_eps;
                }
                out
            }
            TraceKind::Log { inputs, output } => {
                // Q = softmax_row(L_final)
                let mut g = Matrix::zeros(output.rows(), output.cols());
                for i in 0..output.rows() {
                    let q = output.row(i);
                    let gq = grad_q.row(i);
                    let inner: F = q.iter().zip(gq).map(|(&a, &b)| a * b).sum();
                    for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                        *gv = q[j] * (gq[j] - inner);
                    }
                }
                for (rows, input) in inputs.iter().rev() {
                    g = if *rows {
                        log_row_backward(input, &g)
                    } else {
                        log_row_backward(&input.transpose(), &g.transpose()).transpose()
                    };
                }
                g.scale(F::one() / self.epsilon)
            }
        }
    }
}

// y_ij = x_ij / s_i
fn row_normalize_backward<F: Scalar>(out: &Matrix<F>, sums: &[F], g: &Matrix<F>) -> Matrix<F> {
    let mut gx = Matrix::zeros(out.rows(), out.cols());
    for i in 0..out.rows() {
        let y = out.row(i);
        let gy = g.row(i);
        let inner: F = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
        for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
            *v = (gy[j] - inner) / sums[i];
        }
    }
    gx
}

// y_ij = c x_ij / t_j
fn col_scale_backward<F: Scalar>(out: &Matrix<F>, sums: &[F], target: F, g: &Matrix<F>) -> Matrix<F> {
    let mut inner = vec![F::zero(); out.cols()];
    for i in 0..out.rows() {
        for (j, acc) in inner.iter_mut().enumerate() {
            *acc += g.get(i, j) * out.get(i, j);
        }
    }
    Matrix::from_fn(out.rows(), out.cols(), |i, j| {
        (target * g.get(i, j) - inner[j]) / sums[j]
    })
}

// y = x - lse_row(x) (+ const)
fn log_row_backward<F: Scalar>(input: &Matrix<F>, g: &Matrix<F>) -> Matrix<F> {
    let mut gx = g.clone();
    for i in 0..input.rows() {
        let x = input.row(i);
        let lse = log_sum_exp(x).expect("non-empty row");
        let total: F = g.row(i).iter().copied().sum();
        for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
            *v -= (x[j] - lse).exp() * total;
        }
    }
    gx
}
