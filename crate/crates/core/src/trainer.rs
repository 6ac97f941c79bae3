//! Head training: dual views, balanced assignment targets, the weighted
//! objective and Adam with decoupled weight decay.

use std::fmt::Write as _;

use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::data::{augment_view, batches, DataError, EmbeddingDataset, Label};
use crate::losses::{
    assignment_loss, binary_loss, consistency_grad, consistency_loss, total_loss, LossError, LossReport,
    LossWeights,
};
use crate::matrix::Matrix;
use crate::metrics::ScoredSample;
use crate::model::{fake_probability, Dense, Gradients, ModelError, ModelShape, TriarchyModel};
use crate::scalar::Scalar;
use crate::sinkhorn::{sinkhorn_robust, AssignmentMatrix, SinkhornConfig, SinkhornError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("dataset has dimension {dataset} but the model expects {model}")]
    DimMismatch { dataset: usize, model: usize },
    #[error("model has {model} clusters but the config asks for {config}")]
    ClusterMismatch { model: usize, config: usize },
    #[error("non-finite {what} at step {step} (epoch {epoch})")]
    NonFinite { what: &'static str, step: u64, epoch: usize },
}

/// Sinkhorn targets of a batch's fake rows, one per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<F> {
    pub view1: AssignmentMatrix<F>,
    pub view2: AssignmentMatrix<F>,
}

/// Objective settings shared by training and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig<F> {
    pub weights: LossWeights<F>,
    pub sinkhorn: SinkhornConfig<F>,
    pub detach_consistency: bool,
}

impl<F: Scalar> ObjectiveConfig<F> {
    pub fn from_train(cfg: &TrainConfig<F>) -> Self {
        Self {
            weights: cfg.loss,
            sinkhorn: cfg.sinkhorn,
            detach_consistency: cfg.detach_consistency,
        }
    }
}

/// Loss values and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct Objective<F> {
    pub report: LossReport<F>,
    pub grads: Gradients<F>,
    /// Assignments computed from this batch's logits.
    pub targets: Targets<F>,
}

fn fake_rows(labels: &[Label]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i].is_fake()).collect()
}

/// Evaluates the total objective on one batch and differentiates it.
///
/// The binary term uses view 1. The assignment term is supervised by
/// `fixed_targets` when given, otherwise by fresh assignments of the current
/// logits; either way the targets are constants. The consistency term is
/// computed from fresh assignments and is differentiated through the
/// balancing iterations unless `detach_consistency` is set.
pub fn objective<F: Scalar>(
    model: &TriarchyModel<F>,
    x1: &Matrix<F>,
    x2: &Matrix<F>,
    labels: &[Label],
    cfg: &ObjectiveConfig<F>,
    fixed_targets: Option<&Targets<F>>,
) -> Result<Objective<F>, TrainError> {
    let t1 = model.forward_trace(x1)?;
    let t2 = model.forward_trace(x2)?;
    let bin = binary_loss(&t1.logits, labels)?;

    let fakes = fake_rows(labels);
    let z1 = t1.logits.z.select_rows(&fakes).column_block(1, t1.logits.z.cols());
    let z2 = t2.logits.z.select_rows(&fakes).column_block(1, t2.logits.z.cols());
    let k = model.clusters();
    let (targets, traces) = if fakes.is_empty() {
        let empty = AssignmentMatrix::uniform(0, k);
        (
            Targets {
                view1: empty.clone(),
                view2: empty,
            },
            None,
        )
    } else {
        let (q1, tr1) = sinkhorn_robust(&z1, &cfg.sinkhorn)?;
        let (q2, tr2) = sinkhorn_robust(&z2, &cfg.sinkhorn)?;
        (Targets { view1: q1, view2: q2 }, Some((tr1, tr2)))
    };
    let supervision = fixed_targets.unwrap_or(&targets);
    let assign = assignment_loss(&z1, &z2, &supervision.view1, &supervision.view2, cfg.weights.tau)?;
    let cons = consistency_loss(&targets.view1, &targets.view2)?;
    let report = total_loss(bin.value, assign.value, cons, &cfg.weights);

    let w = &cfg.weights;
    let cluster_share = F::one() - w.beta;
    let mut g1 = bin.grad.scale(w.beta);
    let mut g2 = Matrix::zeros(g1.rows(), g1.cols());
    let mut fake_g1 = assign.grad_view1.scale(cluster_share * w.omega1);
    let mut fake_g2 = assign.grad_view2.scale(cluster_share * w.omega1);
    if let (Some((tr1, tr2)), false) = (&traces, cfg.detach_consistency) {
        let (dq1, dq2) = consistency_grad(&targets.view1, &targets.view2)?;
        let c = cluster_share * w.omega2;
        fake_g1 = fake_g1.add(&tr1.backward(&dq1).scale(c)).expect("same shape");
        fake_g2 = fake_g2.add(&tr2.backward(&dq2).scale(c)).expect("same shape");
    }
    for (r, &i) in fakes.iter().enumerate() {
        for j in 0..k {
            let v = g1.get(i, j + 1) + fake_g1.get(r, j);
            g1.set(i, j + 1, v);
            g2.set(i, j + 1, fake_g2.get(r, j));
        }
    }
    let mut grads = model.backward_trace(&t1, &g1)?;
    grads.accumulate(&model.backward_trace(&t2, &g2)?);
    Ok(Objective {
        report,
        grads,
        targets,
    })
}

/// First and second moment estimates, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Dense<F>>,
    pub v: Vec<Dense<F>>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(model: &TriarchyModel<F>) -> Self {
        let zeros = Gradients::zeros_like(model).layers;
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Hyperparameters of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Scalar> AdamParams<F> {
    pub fn from_train(cfg: &TrainConfig<F>) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

fn adam_update<F: Scalar>(
    p: &mut [F],
    g: &[F],
    m: &mut [F],
    v: &mut [F],
    h: &AdamParams<F>,
    bc1: F,
    bc2: F,
) {
    let decay = F::one() - h.lr * h.weight_decay;
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (F::one() - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (F::one() - h.beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] = p[i] * decay - h.lr * mh / (vh.sqrt() + h.eps);
    }
}

/// One Adam step with decoupled weight decay:
/// `θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
pub fn adam_step<F: Scalar>(
    model: &mut TriarchyModel<F>,
    state: &mut AdamState<F>,
    grads: &Gradients<F>,
    h: &AdamParams<F>,
) {
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = F::one() - h.beta1.powi(t);
    let bc2 = F::one() - h.beta2.powi(t);
    for (((layer, g), m), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        adam_update(
            layer.weights.data_mut(),
            g.weights.data(),
            m.weights.data_mut(),
            v.weights.data_mut(),
            h,
            bc1,
            bc2,
        );
        adam_update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, h, bc1, bc2);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<F> {
    pub step: u64,
    pub epoch: usize,
    pub report: LossReport<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary<F> {
    pub epoch: usize,
    /// Component-wise mean over the epoch's steps.
    pub mean: LossReport<F>,
    pub median_total: F,
    /// Fraction of fake training samples whose largest cluster logit is each cluster.
    pub cluster_shares: Vec<F>,
}

impl<F: Scalar> EpochSummary<F> {
    pub fn minority_share(&self) -> F {
        self.cluster_shares.iter().copied().fold(F::infinity(), F::min)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub model: TriarchyModel<F>,
    pub adam: AdamState<F>,
    pub step: u64,
    pub history: Vec<StepRecord<F>>,
    pub epochs: Vec<EpochSummary<F>>,
}

/// Header of the loss history CSV.
pub const HISTORY_HEADER: &str = "step,binary,assignment,consistency,cluster,total";

impl<F: Scalar> TrainState<F> {
    /// Fresh state with a model initialized from `cfg`.
    pub fn new(input_dim: usize, cfg: &TrainConfig<F>) -> Result<Self, TrainError> {
        let shape = ModelShape::new(input_dim)
            .with_hidden(&cfg.hidden)
            .with_clusters(cfg.clusters);
        let model = TriarchyModel::init_with(&shape, derive_seed(cfg.seed, SEED_INIT))?;
        Ok(Self::from_model(model))
    }

    /// Starts from existing weights with fresh optimizer moments.
    pub fn from_model(model: TriarchyModel<F>) -> Self {
        Self {
            adam: AdamState::new(&model),
            model,
            step: 0,
            history: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.history {
            let p = &r.report;
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step, p.binary, p.assignment, p.consistency, p.cluster, p.total
            )
            .expect("writing to a String");
        }
        s
    }
}

const SEED_INIT: u64 = 1;
const SEED_BATCHES: u64 = 2;
const SEED_AUGMENT: u64 = 3;

/// Independent stream seed for `(seed, tag)` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn median<F: Scalar>(mut v: Vec<F>) -> F {
    if v.is_empty() {
        return F::nan();
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * F::lit(0.5)
    }
}

fn mean_report<F: Scalar>(records: &[StepRecord<F>]) -> LossReport<F> {
    let n = F::from_usize_lossy(records.len().max(1));
    let mut m = LossReport::<F>::default();
    for r in records {
        m.binary += r.report.binary;
        m.assignment += r.report.assignment;
        m.consistency += r.report.consistency;
        m.cluster += r.report.cluster;
        m.total += r.report.total;
    }
    LossReport {
        binary: m.binary / n,
        assignment: m.assignment / n,
        consistency: m.consistency / n,
        cluster: m.cluster / n,
        total: m.total / n,
    }
}

/// Trains a fresh model on `ds`.
pub fn train<F: Scalar>(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig<F>,
    paired_views: Option<&EmbeddingDataset>,
) -> Result<TrainState<F>, TrainError> {
    cfg.validate()?;
    let state = TrainState::new(ds.dim(), cfg)?;
    train_from(state, ds, cfg, paired_views)
}

/// Continues training `state` for `cfg.epochs` more epochs.
pub fn train_from<F: Scalar>(
    mut state: TrainState<F>,
    ds: &EmbeddingDataset,
    cfg: &TrainConfig<F>,
    paired_views: Option<&EmbeddingDataset>,
) -> Result<TrainState<F>, TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if ds.dim() != state.model.input_dim() {
        return Err(TrainError::DimMismatch {
            dataset: ds.dim(),
            model: state.model.input_dim(),
        });
    }
    if cfg.clusters != state.model.clusters() {
        return Err(TrainError::ClusterMismatch {
            model: state.model.clusters(),
            config: cfg.clusters,
        });
    }
    if let Some(v) = paired_views {
        ds.check_paired(v)?;
    }
    let ocfg = ObjectiveConfig::from_train(cfg);
    let adam = AdamParams::from_train(cfg);
    let labels = ds.labels();
    let batch_seed = derive_seed(cfg.seed, SEED_BATCHES);
    let augment_seed = derive_seed(cfg.seed, SEED_AUGMENT);

    for _ in 0..cfg.epochs {
        let epoch = state.epochs.len();
        let first = state.history.len();
        for idx in batches(ds.len(), cfg.batch_size, batch_seed, epoch as u64)? {
            let step = state.step + 1;
            let x1 = ds.matrix_of::<F>(&idx);
            let x2 = match paired_views {
                Some(v) => v.matrix_of::<F>(&idx),
                None => augment_view(&x1, cfg.augment_strength, derive_seed(augment_seed, step)),
            };
            let y: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let obj = match objective(&state.model, &x1, &x2, &y, &ocfg, None) {
                Err(TrainError::Sinkhorn(SinkhornError::NonFiniteLogit { .. })) => {
                    return Err(TrainError::NonFinite { what: "logit", step, epoch })
                }
                other => other?,
            };
            let r = &obj.report;
            if ![r.binary, r.assignment, r.consistency, r.total].iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFinite { what: "loss", step, epoch });
            }
            if !obj.grads.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    step,
                    epoch,
                });
            }
            adam_step(&mut state.model, &mut state.adam, &obj.grads, &adam);
            if !state.model.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "parameter",
                    step,
                    epoch,
                });
            }
            state.step = step;
            state.history.push(StepRecord {
                step,
                epoch,
                report: obj.report,
            });
        }
        let records = &state.history[first..];
        let eval = evaluate(&state.model, ds)?;
        state.epochs.push(EpochSummary {
            epoch,
            mean: mean_report(records),
            median_total: median(records.iter().map(|r| r.report.total).collect()),
            cluster_shares: eval.fake_cluster_shares(state.model.clusters()),
        });
    }
    Ok(state)
}

/// Per-sample detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<F> {
    pub samples: Vec<ScoredSample<F>>,
    /// Largest fake-cluster logit for every sample, labeled fake or not.
    pub argmax_cluster: Vec<usize>,
}

impl<F: Scalar> Evaluation<F> {
    pub fn scores(&self) -> Vec<F> {
        self.samples.iter().map(|s| s.score).collect()
    }

    /// Share of fake-labeled samples on each cluster.
    pub fn fake_cluster_shares(&self, clusters: usize) -> Vec<F> {
        let mut counts = vec![0usize; clusters];
        let mut n = 0usize;
        for (s, &c) in self.samples.iter().zip(&self.argmax_cluster) {
            if s.label.is_fake() {
                counts[c] += 1;
                n += 1;
            }
        }
        let n = F::from_usize_lossy(n.max(1));
        counts.into_iter().map(|c| F::from_usize_lossy(c) / n).collect()
    }
}

const EVAL_CHUNK: usize = 1024;

/// Fake probability for every sample, and a cluster id for samples that are
/// labeled fake or scored as fake (probability ≥ ½).
pub fn evaluate<F: Scalar>(model: &TriarchyModel<F>, ds: &EmbeddingDataset) -> Result<Evaluation<F>, TrainError> {
    if ds.dim() != model.input_dim() {
        return Err(TrainError::DimMismatch {
            dataset: ds.dim(),
            model: model.input_dim(),
        });
    }
    let mut samples = Vec::with_capacity(ds.len());
    let mut argmax_cluster = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = model.forward(&ds.matrix_of::<F>(chunk))?;
        let scores = fake_probability(&logits);
        for (r, &i) in chunk.iter().enumerate() {
            let fake = &logits.z.row(r)[1..];
            let c = (0..fake.len())
                .fold(0, |best, k| if fake[k] > fake[best] { k } else { best });
            let rec = &ds.records()[i];
            let assigned = rec.label.is_fake() || scores[r] >= F::lit(0.5);
            samples.push(ScoredSample {
                score: scores[r],
                label: rec.label,
                family: rec.family,
                cluster: assigned.then_some(c),
            });
            argmax_cluster.push(c);
        }
    }
    Ok(Evaluation {
        samples,
        argmax_cluster,
    })
}
