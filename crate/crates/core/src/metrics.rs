//! Detection metrics (ACC, AUC, EER, AP) and cluster-vs-family agreement
//! (purity, NMI).
//!
//! Conventions, since they differ between toolkits:
//! - a sample is called fake when `score >= threshold`;
//! - EER is `(FPR + FNR)/2` at the threshold minimizing `|FPR − FNR|` over
//!   the observed scores plus `+∞`, preferring the lower threshold on ties;
//! - AP is the step sum `Σ (R_k − R_{k−1})·P_k` over descending unique scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{Family, Label};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("metric needs both real and fake samples")]
    SingleClass,
    #[error("no fake samples with both a known family and a cluster")]
    NoEligibleSamples,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample<F> {
    /// Probability of being fake.
    pub score: F,
    pub label: Label,
    pub family: Family,
    pub cluster: Option<usize>,
}

impl<F: Scalar> ScoredSample<F> {
    pub fn new(score: F, label: Label) -> Self {
        Self {
            score,
            label,
            family: Family::Unknown,
            cluster: None,
        }
    }
}

fn class_counts<F: Scalar>(samples: &[ScoredSample<F>]) -> (usize, usize) {
    let fakes = samples.iter().filter(|s| s.label.is_fake()).count();
    (samples.len() - fakes, fakes)
}

/// Score groups in ascending order: `(score, reals, fakes)`.
fn tie_groups<F: Scalar>(samples: &[ScoredSample<F>]) -> Vec<(F, usize, usize)> {
    let mut sorted: Vec<(F, bool)> = samples.iter().map(|s| (s.score, s.label.is_fake())).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut groups: Vec<(F, usize, usize)> = Vec::new();
    for (score, fake) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == score => {
                if fake {
                    g.2 += 1
                } else {
                    g.1 += 1
                }
            }
            _ => groups.push((score, usize::from(!fake), usize::from(fake))),
        }
    }
    groups
}

/// Area under the ROC curve: `P(score_fake > score_real) + ½·P(tie)`.
pub fn auc<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<F, MetricError> {
    let (n_real, n_fake) = class_counts(samples);
    if n_real == 0 || n_fake == 0 {
        return Err(MetricError::SingleClass);
    }
    // twice the Mann-Whitney U, kept integral
    let mut doubled: u128 = 0;
    let mut reals_below: u128 = 0;
    for (_, reals, fakes) in tie_groups(samples) {
        doubled += fakes as u128 * (2 * reals_below + reals as u128);
        reals_below += reals as u128;
    }
    let denom = 2 * n_real as u128 * n_fake as u128;
    Ok(F::lit(doubled as f64 / denom as f64))
}

/// Fraction of samples classified correctly at `threshold`.
pub fn acc<F: Scalar>(samples: &[ScoredSample<F>], threshold: F) -> F {
    if samples.is_empty() {
        return F::zero();
    }
    let correct = samples
        .iter()
        .filter(|s| (s.score >= threshold) == s.label.is_fake())
        .count();
    F::from_usize_lossy(correct) / F::from_usize_lossy(samples.len())
}

/// Operating point at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint<F> {
    pub threshold: F,
    pub fpr: F,
    pub fnr: F,
}

/// FPR/FNR at every candidate threshold, ascending (observed scores, then `+∞`).
fn rate_sweep<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<Vec<RatePoint<F>>, MetricError> {
    let (n_real, n_fake) = class_counts(samples);
    if n_real == 0 || n_fake == 0 {
        return Err(MetricError::SingleClass);
    }
    let (nr, nf) = (F::from_usize_lossy(n_real), F::from_usize_lossy(n_fake));
    let mut fp = n_real; // reals with score >= t
    let mut fn_ = 0usize; // fakes with score < t
    let mut out = Vec::new();
    for (score, reals, fakes) in tie_groups(samples) {
        out.push(RatePoint {
            threshold: score,
            fpr: F::from_usize_lossy(fp) / nr,
            fnr: F::from_usize_lossy(fn_) / nf,
        });
        fp -= reals;
        fn_ += fakes;
    }
    out.push(RatePoint {
        threshold: F::infinity(),
        fpr: F::zero(),
        fnr: F::one(),
    });
    Ok(out)
}

/// Equal error rate together with the threshold it was read at.
pub fn eer_point<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<RatePoint<F>, MetricError> {
    let sweep = rate_sweep(samples)?;
    let mut best = sweep[0];
    for p in &sweep[1..] {
        if (p.fpr - p.fnr).abs() < (best.fpr - best.fnr).abs() {
            best = *p;
        }
    }
    Ok(best)
}

pub fn eer<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<F, MetricError> {
    eer_point(samples).map(|p| (p.fpr + p.fnr) / F::lit(2.0))
}

/// `(recall, precision)` at each unique score, highest threshold first.
pub fn pr_curve<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<Vec<(F, F)>, MetricError> {
    let (n_real, n_fake) = class_counts(samples);
    if n_real == 0 || n_fake == 0 {
        return Err(MetricError::SingleClass);
    }
    let nf = F::from_usize_lossy(n_fake);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    for (_, reals, fakes) in tie_groups(samples).into_iter().rev() {
        tp += fakes;
        fp += reals;
        let precision = F::from_usize_lossy(tp) / F::from_usize_lossy(tp + fp);
        out.push((F::from_usize_lossy(tp) / nf, precision));
    }
    Ok(out)
}

pub fn ap<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<F, MetricError> {
    let mut prev_recall = F::zero();
    let mut total = F::zero();
    for (recall, precision) in pr_curve(samples)? {
        total += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(total)
}

/// `(FPR, TPR)` from `(0, 0)` to `(1, 1)`, threshold descending.
pub fn roc_curve<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<Vec<(F, F)>, MetricError> {
    let mut pts: Vec<(F, F)> = rate_sweep(samples)?
        .into_iter()
        .map(|p| (p.fpr, F::one() - p.fnr))
        .collect();
    pts.reverse();
    Ok(pts)
}

/// Counts of `(cluster, family)` over fake samples with both known.
pub fn contingency<F: Scalar>(samples: &[ScoredSample<F>]) -> BTreeMap<(usize, Family), usize> {
    let mut table = BTreeMap::new();
    for s in samples {
        if let (Some(c), true) = (s.cluster, s.family.is_known()) {
            *table.entry((c, s.family)).or_insert(0) += 1;
        }
    }
    table
}

/// `(1/F) Σ_clusters max_family |cluster ∩ family|`.
pub fn cluster_purity<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<F, MetricError> {
    let table = contingency(samples);
    let total: usize = table.values().sum();
    if total == 0 {
        return Err(MetricError::NoEligibleSamples);
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(c, _), &n) in &table {
        let e = best.entry(c).or_insert(0);
        *e = (*e).max(n);
    }
    let hits: usize = best.values().sum();
    Ok(F::from_usize_lossy(hits) / F::from_usize_lossy(total))
}

fn entropy<F: Scalar>(counts: impl Iterator<Item = usize>, total: F) -> F {
    counts
        .filter(|&n| n > 0)
        .map(|n| {
            let p = F::from_usize_lossy(n) / total;
            -p * p.ln()
        })
        .sum()
}

/// `I(cluster; family) / sqrt(H(cluster)·H(family))`, natural logs.
///
/// When both labelings are constant the score is 1; when only one is, 0.
pub fn nmi<F: Scalar>(samples: &[ScoredSample<F>]) -> Result<F, MetricError> {
    let table = contingency(samples);
    let total_n: usize = table.values().sum();
    if total_n == 0 {
        return Err(MetricError::NoEligibleSamples);
    }
    let total = F::from_usize_lossy(total_n);
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_family: BTreeMap<Family, usize> = BTreeMap::new();
    for (&(c, f), &n) in &table {
        *by_cluster.entry(c).or_insert(0) += n;
        *by_family.entry(f).or_insert(0) += n;
    }
    let hc = entropy(by_cluster.values().copied(), total);
    let hf = entropy(by_family.values().copied(), total);
    if by_cluster.len() == 1 && by_family.len() == 1 {
        return Ok(F::one());
    }
    if by_cluster.len() == 1 || by_family.len() == 1 {
        return Ok(F::zero());
    }
    let mut mi = F::zero();
    for (&(c, f), &n) in &table {
        let pcf = F::from_usize_lossy(n) / total;
        let pc = F::from_usize_lossy(by_cluster[&c]) / total;
        let pf = F::from_usize_lossy(by_family[&f]) / total;
        mi += pcf * (pcf / (pc * pf)).ln();
    }
    let v = mi / (hc * hf).sqrt();
    // rounding can push a perfect match a hair past 1 or independence below 0
    Ok(v.max(F::zero()).min(F::one()))
}

/// Named metric values for one dataset; `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport<F> {
    pub dataset: String,
    pub rows: Vec<(String, Option<F>)>,
    pub warnings: Vec<String>,
}

impl<F: Scalar> MetricReport<F> {
    /// ACC/AUC/EER/AP, plus purity/NMI when any sample has a known family.
    pub fn compute(dataset: &str, samples: &[ScoredSample<F>]) -> Self {
        let mut warnings = Vec::new();
        let mut note = |name: &str, r: Result<F, MetricError>| -> Option<F> {
            r.map_err(|e| warnings.push(format!("{name} undefined: {e}"))).ok()
        };
        let mut rows = vec![("acc".to_string(), Some(acc(samples, F::lit(0.5))))];
        rows.push(("auc".into(), note("auc", auc(samples))));
        rows.push(("eer".into(), note("eer", eer(samples))));
        rows.push(("ap".into(), note("ap", ap(samples))));
        if samples.iter().any(|s| s.family.is_known()) {
            rows.push(("purity".into(), note("purity", cluster_purity(samples))));
            rows.push(("nmi".into(), note("nmi", nmi(samples))));
        }
        Self {
            dataset: dataset.to_string(),
            rows,
            warnings,
        }
    }

    pub fn get(&self, metric: &str) -> Option<F> {
        self.rows.iter().find(|(m, _)| m == metric).and_then(|(_, v)| *v)
    }

    /// `dataset,metric,value` rows; undefined values are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,metric,value\n");
        for (m, v) in &self.rows {
            match v {
                Some(v) => writeln!(s, "{},{},{}", self.dataset, m, v),
                None => writeln!(s, "{},{},undefined", self.dataset, m),
            }
            .expect("writing to a String");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("metrics for {}\n", self.dataset);
        for (m, v) in &self.rows {
            match v {
                Some(v) => writeln!(s, "  {:<7} {:.6}", m, v.as_f64()),
                None => writeln!(s, "  {:<7} undefined", m),
            }
            .expect("writing to a String");
        }
        for w in &self.warnings {
            writeln!(s, "  warning: {w}").expect("writing to a String");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(real: &[f64], fake: &[f64]) -> Vec<ScoredSample<f64>> {
        real.iter()
            .map(|&s| ScoredSample::new(s, Label::Real))
            .chain(fake.iter().map(|&s| ScoredSample::new(s, Label::Fake)))
            .collect()
    }

    fn clustered(pairs: &[(usize, Family)]) -> Vec<ScoredSample<f64>> {
        pairs
            .iter()
            .map(|&(c, f)| ScoredSample {
                score: 0.9,
                label: Label::Fake,
                family: f,
                cluster: Some(c),
            })
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&scored(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(auc(&scored(&[0.4], &[0.6, 0.2])).unwrap(), 0.5);
        assert_eq!(auc(&scored(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(auc(&scored(&[0.1], &[])), Err(MetricError::SingleClass));
    }

    #[test]
    fn separation_extremes() {
        let perfect = scored(&[0.1, 0.2, 0.3], &[0.7, 0.8, 0.9]);
        assert_eq!(eer(&perfect).unwrap(), 0.0);
        assert_eq!(ap(&perfect).unwrap(), 1.0);
        assert_eq!(acc(&perfect, 0.5), 1.0);

        let inverted = scored(&[0.7, 0.8, 0.9], &[0.1, 0.2, 0.3]);
        assert_eq!(auc(&inverted).unwrap(), 0.0);
        assert_eq!(eer(&inverted).unwrap(), 1.0);
        assert_eq!(acc(&inverted, 0.5), 0.0);
        assert!(eer(&scored(&[], &[0.3])).is_err());
        assert!(ap(&scored(&[0.3], &[])).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let s = scored(&[0.1, 0.6, 0.3], &[0.5, 0.9]);
        let roc = roc_curve(&s).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        let pr = pr_curve(&s).unwrap();
        assert_eq!(pr.last().unwrap().0, 1.0);
    }

    #[test]
    fn purity_and_nmi_examples() {
        use Family::*;
        let same = clustered(&[(0, GanLike), (0, GanLike), (1, DiffusionLike), (1, DiffusionLike)]);
        assert_eq!(cluster_purity(&same).unwrap(), 1.0);
        assert!((nmi(&same).unwrap() - 1.0).abs() < 1e-12);

        let swapped = clustered(&[(1, GanLike), (1, GanLike), (0, DiffusionLike), (0, DiffusionLike)]);
        assert_eq!(cluster_purity(&swapped).unwrap(), 1.0);
        assert!((nmi(&swapped).unwrap() - 1.0).abs() < 1e-12);

        // each cluster holds one of each family: contingency [[1,1],[1,1]], I = 0
        let independent = clustered(&[(0, GanLike), (0, DiffusionLike), (1, GanLike), (1, DiffusionLike)]);
        assert_eq!(nmi(&independent).unwrap(), 0.0);
        assert_eq!(cluster_purity(&independent).unwrap(), 0.5);

        let none = scored(&[0.1], &[0.9]);
        assert_eq!(cluster_purity(&none), Err(MetricError::NoEligibleSamples));
        assert_eq!(nmi(&none), Err(MetricError::NoEligibleSamples));
    }

    #[test]
    fn report_rows_and_csv() {
        let s = scored(&[0.1, 0.2], &[0.8, 0.9]);
        let r = MetricReport::compute("toy", &s);
        assert_eq!(r.get("auc"), Some(1.0));
        assert!(r.get("purity").is_none());
        assert!(r.to_csv().starts_with("dataset,metric,value\ntoy,acc,1\n"));

        let one_class = scored(&[0.1, 0.2], &[]);
        let r = MetricReport::compute("single", &one_class);
        assert_eq!(r.get("auc"), None);
        assert!(r.to_csv().contains("single,auc,undefined"));
        assert_eq!(r.warnings.len(), 3);
    }
}
