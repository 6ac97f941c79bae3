//! Finite-atom divergence toolkit: KL and JS divergences, the adversarial
//! value function and its optimal discriminator, evidence lower bounds of
//! discrete latent models, and support-coverage experiments contrasting
//! JS-optimal and KL-optimal fits.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivergenceError {
    #[error("distribution needs at least one atom")]
    Empty,
    #[error("atom {index} has invalid mass {value}")]
    InvalidMass { index: usize, value: f64 },
    #[error("masses sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("distributions live on {0} and {1} atoms")]
    LengthMismatch(usize, usize),
    #[error("discriminator value {value} at atom {index} is outside (0, 1)")]
    DiscriminatorRange { index: usize, value: f64 },
    #[error("x-atom {0} has zero evidence")]
    ZeroEvidence(usize),
    #[error("x-atom {0} is out of range")]
    AtomOutOfRange(usize),
    #[error("invalid latent model: {0}")]
    BadLatentModel(String),
    #[error("coverage experiment needs at least 4 atoms, got {0}")]
    TooFewAtoms(usize),
}

fn sum_tolerance<F: Scalar>() -> F {
    F::lit(1e-12).max(F::epsilon() * F::lit(64.0))
}

/// Probability vector over `n` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution<F> {
    p: Vec<F>,
}

impl<F: Scalar> DiscreteDistribution<F> {
    /// Checks nonnegativity and a unit sum (within 1e-12).
    pub fn new(p: Vec<F>) -> Result<Self, DivergenceError> {
        if p.is_empty() {
            return Err(DivergenceError::Empty);
        }
        for (i, &v) in p.iter().enumerate() {
            if !(v >= F::zero()) || !v.is_finite() {
                return Err(DivergenceError::InvalidMass {
                    index: i,
                    value: v.as_f64(),
                });
            }
        }
        let s: F = p.iter().copied().sum();
        if (s - F::one()).abs() > sum_tolerance() {
            return Err(DivergenceError::NotNormalized(s.as_f64()));
        }
        Ok(Self { p })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(w: Vec<F>) -> Result<Self, DivergenceError> {
        let s: F = w.iter().copied().sum();
        if !(s > F::zero()) {
            return Err(DivergenceError::NotNormalized(s.as_f64()));
        }
        Self::new(w.into_iter().map(|v| v / s).collect())
    }

    pub fn uniform(n: usize) -> Result<Self, DivergenceError> {
        Self::from_weights(vec![F::one(); n])
    }

    pub fn probs(&self) -> &[F] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.p.len()).filter(|&i| self.p[i] > F::zero()).collect()
    }

    /// Whether `self`'s support is a strict subset of `other`'s.
    pub fn support_strictly_inside(&self, other: &Self) -> bool {
        let mine = self.support();
        let theirs = other.support();
        mine.len() < theirs.len() && mine.iter().all(|i| theirs.contains(i))
    }
}

fn same_len<F>(p: &DiscreteDistribution<F>, q: &DiscreteDistribution<F>) -> Result<(), DivergenceError> {
    if p.p.len() != q.p.len() {
        return Err(DivergenceError::LengthMismatch(p.p.len(), q.p.len()));
    }
    Ok(())
}

/// KL divergence; `Infinite` when `p` puts mass where `q` has none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kl<F> {
    Finite(F),
    Infinite,
}

impl<F: Scalar> Kl<F> {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Kl::Infinite)
    }

    pub fn finite(self) -> Option<F> {
        match self {
            Kl::Finite(v) => Some(v),
            Kl::Infinite => None,
        }
    }

    /// As a float, with `+∞` for the infinite case.
    pub fn to_scalar(self) -> F {
        self.finite().unwrap_or_else(F::infinity)
    }
}

pub fn kl<F: Scalar>(p: &DiscreteDistribution<F>, q: &DiscreteDistribution<F>) -> Result<Kl<F>, DivergenceError> {
    same_len(p, q)?;
    let mut total = F::zero();
    for (&pi, &qi) in p.p.iter().zip(&q.p) {
        if pi == F::zero() {
            continue;
        }
        if qi == F::zero() {
            return Ok(Kl::Infinite);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(Kl::Finite(total))
}

/// `½(p + q)`.
pub fn mixture<F: Scalar>(p: &DiscreteDistribution<F>, q: &DiscreteDistribution<F>) -> Result<DiscreteDistribution<F>, DivergenceError> {
    same_len(p, q)?;
    let half = F::lit(0.5);
    Ok(DiscreteDistribution {
        p: p.p.iter().zip(&q.p).map(|(&a, &b)| half * (a + b)).collect(),
    })
}

/// Jensen-Shannon divergence; finite for every pair and at most `ln 2`.
pub fn js<F: Scalar>(p: &DiscreteDistribution<F>, q: &DiscreteDistribution<F>) -> Result<F, DivergenceError> {
    let m = mixture(p, q)?;
    let a = kl(p, &m)?.finite().expect("mixture covers p");
    let b = kl(q, &m)?.finite().expect("mixture covers q");
    Ok(F::lit(0.5) * (a + b))
}

/// Discriminator output per atom, strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorFn<F> {
    d: Vec<F>,
}

impl<F: Scalar> DiscriminatorFn<F> {
    pub fn new(d: Vec<F>) -> Result<Self, DivergenceError> {
        for (i, &v) in d.iter().enumerate() {
            if !(v > F::zero() && v < F::one()) {
                return Err(DivergenceError::DiscriminatorRange {
                    index: i,
                    value: v.as_f64(),
                });
            }
        }
        Ok(Self { d })
    }

    pub fn values(&self) -> &[F] {
        &self.d
    }
}

/// Clamp applied to the optimal discriminator where one density vanishes.
pub const DISCRIMINATOR_CLAMP: f64 = 1e-15;

/// `Σ p_data·ln d + Σ p_gan·ln(1 − d)`; atoms with zero weight contribute nothing.
pub fn value_function<F: Scalar>(
    p_data: &DiscreteDistribution<F>,
    p_gan: &DiscreteDistribution<F>,
    d: &DiscriminatorFn<F>,
) -> Result<F, DivergenceError> {
    same_len(p_data, p_gan)?;
    if d.d.len() != p_data.len() {
        return Err(DivergenceError::LengthMismatch(d.d.len(), p_data.len()));
    }
    let mut v = F::zero();
    for ((&pd, &pg), &di) in p_data.p.iter().zip(&p_gan.p).zip(&d.d) {
        if pd > F::zero() {
            v += pd * di.ln();
        }
        if pg > F::zero() {
            v += pg * (F::one() - di).ln();
        }
    }
    Ok(v)
}

/// `D*(x) = p_data/(p_data + p_gan)`, clamped into `(δ, 1 − δ)`; atoms
/// outside both supports get ½.
pub fn optimal_discriminator<F: Scalar>(
    p_data: &DiscreteDistribution<F>,
    p_gan: &DiscreteDistribution<F>,
) -> Result<DiscriminatorFn<F>, DivergenceError> {
    same_len(p_data, p_gan)?;
    let delta = F::lit(DISCRIMINATOR_CLAMP).max(F::epsilon());
    let half = F::lit(0.5);
    let d = p_data
        .p
        .iter()
        .zip(&p_gan.p)
        .map(|(&a, &b)| {
            let s = a + b;
            if s == F::zero() {
                half
            } else {
                (a / s).max(delta).min(F::one() - delta)
            }
        })
        .collect();
    DiscriminatorFn::new(d)
}

/// Joint `p(x, y)` over x-atoms (rows) and y-atoms (columns), plus a
/// variational posterior `q(y | x)` with one stochastic row per x-atom.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLatentModel<F> {
    joint: Matrix<F>,
    q: Matrix<F>,
}

impl<F: Scalar> DiscreteLatentModel<F> {
    pub fn new(joint: Matrix<F>, q: Matrix<F>) -> Result<Self, DivergenceError> {
        let bad = |m: String| Err(DivergenceError::BadLatentModel(m));
        if joint.shape() != q.shape() {
            return bad(format!("joint {:?} vs q {:?}", joint.shape(), q.shape()));
        }
        if joint.rows() == 0 || joint.cols() == 0 {
            return bad("empty model".into());
        }
        if joint.data().iter().chain(q.data()).any(|&v| !(v >= F::zero()) || !v.is_finite()) {
            return bad("entries must be finite and nonnegative".into());
        }
        let total: F = joint.data().iter().copied().sum();
        if (total - F::one()).abs() > sum_tolerance() {
            return bad(format!("joint sums to {total}"));
        }
        for (i, s) in q.row_sums().into_iter().enumerate() {
            if (s - F::one()).abs() > sum_tolerance() {
                return bad(format!("q row {i} sums to {s}"));
            }
        }
        Ok(Self { joint, q })
    }

    pub fn joint(&self) -> &Matrix<F> {
        &self.joint
    }

    pub fn q(&self) -> &Matrix<F> {
        &self.q
    }

    pub fn evidence(&self, x: usize) -> Result<F, DivergenceError> {
        if x >= self.joint.rows() {
            return Err(DivergenceError::AtomOutOfRange(x));
        }
        Ok(self.joint.row(x).iter().copied().sum())
    }

    /// True posterior `p(y | x)`.
    pub fn posterior(&self, x: usize) -> Result<Vec<F>, DivergenceError> {
        let e = self.evidence(x)?;
        if !(e > F::zero()) {
            return Err(DivergenceError::ZeroEvidence(x));
        }
        Ok(self.joint.row(x).iter().map(|&v| v / e).collect())
    }

    /// Same joint with `q(· | x)` replaced by the true posterior on every row with evidence.
    pub fn with_true_posterior(&self) -> Self {
        let mut q = self.q.clone();
        for x in 0..self.joint.rows() {
            if let Ok(post) = self.posterior(x) {
                q.row_mut(x).copy_from_slice(&post);
            }
        }
        Self {
            joint: self.joint.clone(),
            q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboGap<F> {
    pub elbo: F,
    pub log_evidence: F,
}

impl<F: Scalar> ElboGap<F> {
    pub fn gap(&self) -> F {
        self.log_evidence - self.elbo
    }
}

/// ELBO and log-evidence of x-atom `x`.
///
/// `elbo = Σ_y q(y|x)[ln p(x,y) − ln q(y|x)]` over the support of `q(·|x)`;
/// it is `−∞` when `q` puts mass where the joint has none.
pub fn elbo_gap<F: Scalar>(m: &DiscreteLatentModel<F>, x: usize) -> Result<ElboGap<F>, DivergenceError> {
    let e = m.evidence(x)?;
    if !(e > F::zero()) {
        return Err(DivergenceError::ZeroEvidence(x));
    }
    let mut elbo = F::zero();
    for (&q, &pj) in m.q.row(x).iter().zip(m.joint.row(x)) {
        if q == F::zero() {
            continue;
        }
        if pj == F::zero() {
            elbo = F::neg_infinity();
            break;
        }
        elbo += q * (pj.ln() - q.ln());
    }
    Ok(ElboGap {
        elbo,
        log_evidence: e.ln(),
    })
}

/// Random distribution drawn from a flat Dirichlet; every atom has positive mass.
pub fn random_distribution<F: Scalar>(rng: &mut impl Rng, n: usize) -> DiscreteDistribution<F> {
    loop {
        let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        if w.iter().all(|&v| v > 0.0) {
            let s: f64 = w.iter().sum();
            if let Ok(d) = DiscreteDistribution::from_weights(w.iter().map(|&v| F::lit(v / s)).collect()) {
                return d;
            }
        }
    }
}

/// Random distribution supported exactly on `support`.
pub fn random_distribution_on<F: Scalar>(rng: &mut impl Rng, n: usize, support: &[usize]) -> DiscreteDistribution<F> {
    let inner = random_distribution::<f64>(rng, support.len());
    let mut w = vec![F::zero(); n];
    for (&i, &v) in support.iter().zip(inner.probs()) {
        w[i] = F::lit(v);
    }
    DiscreteDistribution::from_weights(w).expect("positive mass on support")
}

/// Best JS fit found with support restricted to `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedFit<F> {
    pub q: DiscreteDistribution<F>,
    pub js: F,
    /// Candidates evaluated during the search.
    pub evaluated: usize,
    /// Every candidate had infinite `KL(p ‖ q)`.
    pub all_kl_infinite: bool,
    /// Every candidate had finite JS no larger than `ln 2`.
    pub all_js_bounded: bool,
}

/// Minimizes `JS(p ‖ q)` over `q` supported inside `support` by projected
/// random search followed by pairwise mass-transfer refinement.
pub fn restricted_js_search<F: Scalar>(
    p: &DiscreteDistribution<F>,
    support: &[usize],
    seed: u64,
) -> RestrictedFit<F> {
    let n = p.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln2 = F::LN_2();
    let slack = F::lit(1e-12);
    let full_support = p.support();
    let strict = support.len() < full_support.len();

    let mut evaluated = 0usize;
    let mut all_kl_infinite = true;
    let mut all_js_bounded = true;
    let mut score = |q: &DiscreteDistribution<F>| -> F {
        evaluated += 1;
        let j = js(p, q).expect("same length");
        if !(j.is_finite() && j <= ln2 + slack) {
            all_js_bounded = false;
        }
        if strict && !kl(p, q).expect("same length").is_infinite() {
            all_kl_infinite = false;
        }
        j
    };

    let project = |w: &[F]| -> Option<DiscreteDistribution<F>> {
        let mut full = vec![F::zero(); n];
        for (&i, &v) in support.iter().zip(w) {
            full[i] = v.max(F::zero());
        }
        DiscreteDistribution::from_weights(full).ok()
    };

    // start from p restricted to the support, or uniform on it when p has no mass there
    let start: Vec<F> = support.iter().map(|&i| p.probs()[i]).collect();
    let mut best_w = if start.iter().any(|&v| v > F::zero()) {
        start
    } else {
        vec![F::one(); support.len()]
    };
    let mut best_q = project(&best_w).expect("positive start");
    let mut best = score(&best_q);

    if support.len() > 1 {
        let rounds = 3000;
        for r in 0..rounds {
            let sigma = 0.3 * (1e-4f64 / 0.3).powf(r as f64 / rounds as f64);
            let total: F = best_w.iter().copied().sum();
            let cand: Vec<F> = best_w
                .iter()
                .map(|&v| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    v / total + F::lit(sigma * g)
                })
                .collect();
            if let Some(q) = project(&cand) {
                let s = score(&q);
                if s < best {
                    best = s;
                    best_w = support.iter().map(|&i| q.probs()[i]).collect();
                    best_q = q;
                }
            }
        }
        let mut step = F::lit(0.05);
        while step > F::lit(1e-13) {
            let mut improved = false;
            for a in 0..support.len() {
                for b in 0..support.len() {
                    if a == b || best_w[b] <= F::zero() {
                        continue;
                    }
                    let moved = step.min(best_w[b]);
                    let mut w = best_w.clone();
                    w[a] += moved;
                    w[b] -= moved;
                    if let Some(q) = project(&w) {
                        let s = score(&q);
                        if s < best {
                            best = s;
                            best_w = support.iter().map(|&i| q.probs()[i]).collect();
                            best_q = q;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= F::lit(0.5);
            }
        }
    }
    RestrictedFit {
        q: best_q,
        js: best,
        evaluated,
        all_kl_infinite,
        all_js_bounded,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow<F> {
    pub support_size: usize,
    pub best_js: F,
    pub best_support: Vec<usize>,
    /// `KL(p_data ‖ q)` at the best fit.
    pub kl_at_best: Kl<F>,
    /// Infinite KL held for every candidate tested at this size.
    pub kl_infinite_for_all: bool,
    pub js_bounded_for_all: bool,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport<F> {
    pub p_data: DiscreteDistribution<F>,
    pub rows: Vec<CoverageRow<F>>,
}

impl<F: Scalar> CoverageReport<F> {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("support_size,best_js,kl_status,candidates\n");
        for r in &self.rows {
            let status = match r.kl_at_best {
                Kl::Infinite if r.kl_infinite_for_all => "infinite".to_string(),
                Kl::Infinite => "infinite_at_best".to_string(),
                Kl::Finite(v) => format!("finite:{v}"),
            };
            writeln!(s, "{},{},{},{}", r.support_size, r.best_js, status, r.candidates)
                .expect("writing to a String");
        }
        s
    }

    /// Partial-coverage rows show finite bounded JS and infinite KL; the
    /// full-support row reaches JS = KL = 0.
    pub fn dichotomy_holds(&self) -> bool {
        let n = self.p_data.len();
        self.rows.iter().all(|r| {
            if r.support_size < n {
                r.kl_infinite_for_all && r.js_bounded_for_all && r.best_js.is_finite()
            } else {
                r.best_js.abs() < F::lit(1e-12) && r.kl_at_best.finite().is_some_and(|v| v.abs() < F::lit(1e-12))
            }
        })
    }
}

/// Subsets of `0..n` with `k` elements, in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..(1u32 << n))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|&i| m & (1 << i) != 0).collect())
        .collect()
}

/// Largest atom count for which every support subset is searched.
pub const EXHAUSTIVE_SUBSET_LIMIT: usize = 8;

/// Best JS fit per support size for a random full-support `p_data`.
pub fn coverage_experiment<F: Scalar>(n_atoms: usize, seed: u64) -> Result<CoverageReport<F>, DivergenceError> {
    if n_atoms < 4 {
        return Err(DivergenceError::TooFewAtoms(n_atoms));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_distribution(&mut rng, n_atoms);
    Ok(coverage_experiment_for(&p, seed))
}

/// [`coverage_experiment`] for a given `p_data`. Up to
/// [`EXHAUSTIVE_SUBSET_LIMIT`] atoms every support of each size is searched;
/// beyond that only the highest-mass atoms are used.
pub fn coverage_experiment_for<F: Scalar>(p: &DiscreteDistribution<F>, seed: u64) -> CoverageReport<F> {
    let n = p.len();
    let mut by_mass: Vec<usize> = (0..n).collect();
    by_mass.sort_by(|&a, &b| p.probs()[b].partial_cmp(&p.probs()[a]).expect("finite"));
    let mut rows = Vec::new();
    for s in 1..=n {
        let supports = if s == n {
            vec![(0..n).collect()]
        } else if n <= EXHAUSTIVE_SUBSET_LIMIT {
            subsets(n, s)
        } else {
            let mut top = by_mass[..s].to_vec();
            top.sort_unstable();
            vec![top]
        };
        let mut best: Option<(RestrictedFit<F>, Vec<usize>)> = None;
        let mut kl_all = true;
        let mut js_all = true;
        let mut candidates = 0;
        for (k, support) in supports.into_iter().enumerate() {
            let fit = if s == n {
                RestrictedFit {
                    q: p.clone(),
                    js: js(p, p).expect("same length"),
                    evaluated: 1,
                    all_kl_infinite: false,
                    all_js_bounded: true,
                }
            } else {
                restricted_js_search(p, &support, seed.wrapping_add((s * 1000 + k) as u64))
            };
            kl_all &= fit.all_kl_infinite;
            js_all &= fit.all_js_bounded;
            candidates += fit.evaluated;
            if best.as_ref().is_none_or(|(b, _)| fit.js < b.js) {
                best = Some((fit, support));
            }
        }
        let (fit, support) = best.expect("at least one support");
        rows.push(CoverageRow {
            support_size: s,
            best_js: fit.js,
            kl_at_best: kl(p, &fit.q).expect("same length"),
            best_support: support,
            kl_infinite_for_all: kl_all,
            js_bounded_for_all: js_all,
            candidates,
        });
    }
    CoverageReport {
        p_data: p.clone(),
        rows,
    }
}
