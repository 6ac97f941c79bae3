//! Randomized verification of the divergence identities and bounds, plus
//! optional balancing checks, reported as named pass/fail rows.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::index::sample;

use crate::divergence::{
    coverage_experiment, elbo_gap, js, kl, optimal_discriminator, random_distribution,
    random_distribution_on, value_function, CoverageReport, DiscreteDistribution, DiscreteLatentModel,
    DiscriminatorFn, DivergenceError,
};
use crate::matrix::Matrix;
use crate::sinkhorn::{balance_deviation, sinkhorn, SinkhornConfig};

/// Sizes of the randomized suite.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub seed: u64,
    /// Atoms per random distribution; at least 2.
    pub atoms: usize,
    pub pairs: usize,
    pub discriminator_pairs: usize,
    pub discriminators_per_pair: usize,
    pub latent_models: usize,
    pub support_instances: usize,
    pub sinkhorn: bool,
    pub sinkhorn_instances: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            atoms: 6,
            pairs: 1000,
            discriminator_pairs: 100,
            discriminators_per_pair: 100,
            latent_models: 100,
            support_instances: 200,
            sinkhorn: false,
            sinkhorn_instances: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub checks: Vec<CheckResult>,
    pub coverage: CoverageReport<f64>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(s, "{verdict}  {:width$}  {}", c.name, c.detail).expect("writing to a String");
        }
        s
    }
}

const LN2: f64 = std::f64::consts::LN_2;

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Random distribution whose support is a random nonempty subset (full about half the time).
fn random_partial(rng: &mut ChaCha8Rng, n: usize) -> DiscreteDistribution<f64> {
    if rng.random_bool(0.5) {
        return random_distribution(rng, n);
    }
    let size = rng.random_range(1..=n);
    let mut support = sample(rng, n, size).into_vec();
    support.sort_unstable();
    random_distribution_on(rng, n, &support)
}

fn random_latent_model(rng: &mut ChaCha8Rng, nx: usize, ny: usize) -> DiscreteLatentModel<f64> {
    let joint = random_distribution::<f64>(rng, nx * ny);
    let joint = Matrix::from_vec(nx, ny, joint.probs().to_vec()).expect("sized");
    let mut q = Matrix::zeros(nx, ny);
    for x in 0..nx {
        q.row_mut(x).copy_from_slice(random_distribution::<f64>(rng, ny).probs());
    }
    DiscreteLatentModel::new(joint, q).expect("valid by construction")
}

fn js_checks(cfg: &TheoryConfig, rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let n = cfg.atoms;
    let mut worst_sym = 0.0f64;
    let mut worst_bound = f64::NEG_INFINITY;
    let mut worst_identity = 0.0f64;
    for _ in 0..cfg.pairs {
        let p = random_partial(rng, n);
        let q = random_partial(rng, n);
        let a = js(&p, &q).expect("same length");
        let b = js(&q, &p).expect("same length");
        worst_sym = worst_sym.max((a - b).abs());
        worst_bound = worst_bound.max(a - LN2).max(-a);
        let d = optimal_discriminator(&p, &q).expect("same length");
        let v = value_function(&p, &q, &d).expect("same length");
        worst_identity = worst_identity.max((v - (2.0 * a - 2.0 * LN2)).abs());
    }
    vec![
        check(
            "js_symmetric_and_bounded",
            worst_sym <= 1e-12 && worst_bound <= 1e-12,
            format!("{} pairs, max asymmetry {worst_sym:.3e}, max bound excess {worst_bound:.3e}", cfg.pairs),
        ),
        check(
            "optimal_discriminator_identity",
            worst_identity <= 1e-9,
            format!("{} pairs, max |V(D*) - (2 JS - 2 ln 2)| = {worst_identity:.3e}", cfg.pairs),
        ),
    ]
}

fn discriminator_bound_check(cfg: &TheoryConfig, rng: &mut ChaCha8Rng) -> CheckResult {
    let n = cfg.atoms;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.discriminator_pairs {
        let p = random_partial(rng, n);
        let q = random_partial(rng, n);
        let best = value_function(&p, &q, &optimal_discriminator(&p, &q).expect("same length"))
            .expect("same length");
        for _ in 0..cfg.discriminators_per_pair {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(1e-9..1.0 - 1e-9)).collect();
            let d = DiscriminatorFn::new(d).expect("open interval");
            let v = value_function(&p, &q, &d).expect("same length");
            worst = worst.max(v - best);
        }
    }
    let total = cfg.discriminator_pairs * cfg.discriminators_per_pair;
    check(
        "value_function_upper_bound",
        worst <= 1e-9,
        format!("{total} combinations, max V(D) - V(D*) = {worst:.3e}"),
    )
}

fn elbo_checks(cfg: &TheoryConfig, rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let nx = cfg.atoms;
    let mut bound_ok = true;
    let mut strict_ok = true;
    let mut worst_exact = 0.0f64;
    let mut kl_bound_ok = true;
    let mut worst_kl_equality = 0.0f64;
    for _ in 0..cfg.latent_models {
        let ny = rng.random_range(2..=5);
        let m = random_latent_model(rng, nx, ny);
        let exact = m.with_true_posterior();
        let p_data = random_distribution::<f64>(rng, nx);
        let p_model = DiscreteDistribution::new((0..nx).map(|x| m.evidence(x).expect("in range")).collect())
            .expect("marginal of a distribution");
        let kl_data_model = kl(&p_data, &p_model).expect("same length").to_scalar();
        let entropy: f64 = -p_data.probs().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let mut neg_elbo = 0.0;
        let mut neg_elbo_exact = 0.0;
        for x in 0..nx {
            let g = elbo_gap(&m, x).expect("positive evidence");
            bound_ok &= g.elbo <= g.log_evidence + 1e-12;
            let post = m.posterior(x).expect("positive evidence");
            let differs = post.iter().zip(m.q().row(x)).any(|(a, b)| (a - b).abs() > 1e-9);
            if differs {
                strict_ok &= g.elbo < g.log_evidence;
            }
            let e = elbo_gap(&exact, x).expect("positive evidence");
            worst_exact = worst_exact.max(e.gap().abs());
            neg_elbo -= p_data.probs()[x] * g.elbo;
            neg_elbo_exact -= p_data.probs()[x] * e.elbo;
        }
        // E[-ELBO] - H(p_data) bounds KL(p_data || p_model), with equality at the true posterior
        kl_bound_ok &= neg_elbo - entropy >= kl_data_model - 1e-12;
        worst_kl_equality = worst_kl_equality.max((neg_elbo_exact - entropy - kl_data_model).abs());
    }
    vec![
        check(
            "elbo_lower_bounds_log_evidence",
            bound_ok && strict_ok,
            format!("{} models, strict whenever q differs from the posterior", cfg.latent_models),
        ),
        check(
            "elbo_tight_at_true_posterior",
            worst_exact < 1e-12,
            format!("{} models, max gap {worst_exact:.3e}", cfg.latent_models),
        ),
        check(
            "expected_elbo_bounds_kl",
            kl_bound_ok && worst_kl_equality < 1e-9,
            format!(
                "{} models, max |E[-ELBO*] - H - KL| = {worst_kl_equality:.3e}",
                cfg.latent_models
            ),
        ),
    ]
}

fn objective_equivalence_check(cfg: &TheoryConfig, rng: &mut ChaCha8Rng) -> CheckResult {
    let n = cfg.atoms;
    let rounds = (cfg.pairs / 20).max(1);
    let mut agree = 0;
    for _ in 0..rounds {
        let p = random_distribution::<f64>(rng, n);
        let candidates: Vec<_> = (0..8).map(|_| random_partial(rng, n)).collect();
        let by = |f: &dyn Fn(&DiscreteDistribution<f64>) -> f64| {
            (0..candidates.len())
                .min_by(|&a, &b| f(&candidates[a]).total_cmp(&f(&candidates[b])))
                .expect("nonempty")
        };
        let v_star = |g: &DiscreteDistribution<f64>| {
            value_function(&p, g, &optimal_discriminator(&p, g).expect("same length")).expect("same length")
        };
        let js_of = |g: &DiscreteDistribution<f64>| js(&p, g).expect("same length");
        if by(&v_star) == by(&js_of) {
            agree += 1;
        }
    }
    check(
        "generator_objective_matches_js",
        agree == rounds,
        format!("{agree}/{rounds} candidate sets pick the same minimizer under V(D*) and JS"),
    )
}

fn support_check(cfg: &TheoryConfig, rng: &mut ChaCha8Rng) -> CheckResult {
    let n = cfg.atoms;
    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cfg.support_instances {
        let p = random_distribution::<f64>(rng, n);
        let size = rng.random_range(1..n);
        let mut support = sample(rng, n, size).into_vec();
        support.sort_unstable();
        let q = random_distribution_on::<f64>(rng, n, &support);
        let j = js(&p, &q).expect("same length");
        ok &= kl(&p, &q).expect("same length").is_infinite() && j.is_finite();
        worst = worst.max(j - LN2);
    }
    check(
        "partial_support_dichotomy",
        ok && worst <= 1e-12,
        format!(
            "{} instances, KL infinite and JS finite in all, max JS - ln 2 = {worst:.3e}",
            cfg.support_instances
        ),
    )
}

fn coverage_check(report: &CoverageReport<f64>) -> CheckResult {
    let summary: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("s={}:{:.4}", r.support_size, r.best_js))
        .collect();
    check(
        "coverage_experiment",
        report.dichotomy_holds(),
        format!("best JS by support size {}", summary.join(" ")),
    )
}

fn sinkhorn_checks(cfg: &TheoryConfig, rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut rows_ok = true;
    let mut monotone_ok = true;
    let mut worst_row = 0.0f64;
    for _ in 0..cfg.sinkhorn_instances {
        let b = rng.random_range(4..=128);
        let z: Matrix<f64> = Matrix::from_fn(b, 2, |_, _| rng.random_range(-3.0..3.0));
        let short = sinkhorn(&z, &SinkhornConfig::new(0.05, 2));
        let long = sinkhorn(&z, &SinkhornConfig::new(0.05, 20));
        match (short, long) {
            (Ok(s), Ok(l)) => {
                for r in s.matrix().row_sums().into_iter().chain(l.matrix().row_sums()) {
                    worst_row = worst_row.max((r - 1.0).abs());
                }
                monotone_ok &= balance_deviation(&l) <= balance_deviation(&s);
            }
            _ => rows_ok = false,
        }
    }
    rows_ok &= worst_row <= 1e-9;
    let mut uniform_ok = true;
    for b in [1, 2, 3, 7, 64] {
        for k in [2, 3, 5] {
            let q = sinkhorn(&Matrix::filled(b, k, 0.7), &SinkhornConfig::new(0.05, 3));
            // exact for K = 2, within a few ulps otherwise
            let tol = if k == 2 { 0.0 } else { 4.0 * f64::EPSILON };
            uniform_ok &= q.is_ok_and(|q| q.matrix().data().iter().all(|&v| (v - 1.0 / k as f64).abs() <= tol));
        }
    }
    vec![
        check(
            "sinkhorn_row_stochastic",
            rows_ok,
            format!("{} instances, max |row sum - 1| = {worst_row:.3e}", cfg.sinkhorn_instances),
        ),
        check(
            "sinkhorn_more_rounds_balance_better",
            monotone_ok,
            format!("{} instances, T=20 vs T=2", cfg.sinkhorn_instances),
        ),
        check("sinkhorn_uniform_fixed_point", uniform_ok, "uniform logits give 1/K (exactly for K = 2)".into()),
    ]
}

/// Runs every check with independent random streams derived from `cfg.seed`.
pub fn run_theory_checks(cfg: &TheoryConfig) -> Result<TheoryReport, DivergenceError> {
    if cfg.atoms < 2 {
        return Err(DivergenceError::TooFewAtoms(cfg.atoms));
    }
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let mut checks = js_checks(cfg, &mut stream(1));
    checks.push(discriminator_bound_check(cfg, &mut stream(2)));
    checks.extend(elbo_checks(cfg, &mut stream(3)));
    checks.push(objective_equivalence_check(cfg, &mut stream(4)));
    checks.push(support_check(cfg, &mut stream(5)));
    let coverage = coverage_experiment::<f64>(cfg.atoms.max(4), cfg.seed)?;
    checks.push(coverage_check(&coverage));
    if cfg.sinkhorn {
        checks.extend(sinkhorn_checks(cfg, &mut stream(6)));
    }
    Ok(TheoryReport { checks, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64, atoms: usize) -> TheoryConfig {
        TheoryConfig {
            seed,
            atoms,
            pairs: 100,
            discriminator_pairs: 10,
            discriminators_per_pair: 20,
            latent_models: 20,
            support_instances: 40,
            sinkhorn: true,
            sinkhorn_instances: 20,
        }
    }

    #[test]
    fn quick_suite_passes() {
        let r = run_theory_checks(&quick(0, 5)).unwrap();
        assert!(r.all_passed(), "{}", r.to_text());
        assert!(r.to_text().lines().all(|l| l.starts_with("PASS")));
    }

    #[test]
    fn two_atoms_is_the_smallest_case() {
        let r = run_theory_checks(&quick(1, 2)).unwrap();
        assert!(r.all_passed(), "{}", r.to_text());
        assert_eq!(r.coverage.p_data.len(), 4);
        assert!(run_theory_checks(&quick(1, 1)).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(run_theory_checks(&quick(3, 4)).unwrap(), run_theory_checks(&quick(3, 4)).unwrap());
    }
}
