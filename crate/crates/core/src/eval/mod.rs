//! Verification and identification metrics over similarity scores.
//!
//! The decision rule throughout is accept iff `score >= threshold`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores of same-subject (genuine) and different-subject (impostor)
/// comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        let s = ScoreSet { genuine, impostor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::param("eval", "genuine and impostor scores must both be non-empty"));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| v.is_nan()) {
            return Err(Error::param("eval", "scores contain NaN"));
        }
        Ok(())
    }

    /// Ascending thresholds: -inf, every distinct score, +inf.
    fn thresholds(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t.insert(0, f64::NEG_INFINITY);
        t.push(f64::INFINITY);
        t
    }

    /// `(accepted genuine, accepted impostor)` at a threshold.
    fn accepted(&self, threshold: f64) -> (usize, usize) {
        (
            self.genuine.iter().filter(|&&s| s >= threshold).count(),
            self.impostor.iter().filter(|&&s| s >= threshold).count(),
        )
    }

    fn rates(&self, threshold: f64) -> (f64, f64) {
        let (tp, fp) = self.accepted(threshold);
        let fpr = fp as f64 / self.impostor.len() as f64;
        let fnr = 1.0 - tp as f64 / self.genuine.len() as f64;
        (fpr, fnr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over ascending thresholds (both rates non-increasing).
pub fn roc(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    scores.validate()?;
    Ok(scores
        .thresholds()
        .into_iter()
        .map(|t| {
            let (fpr, fnr) = scores.rates(t);
            RocPoint {
                threshold: t,
                fpr,
                tpr: 1.0 - fnr,
            }
        })
        .collect())
}

/// Area under a ROC curve by the trapezoid rule.
pub fn auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[0].fpr - w[1].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum::<f64>()
        .abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 at one threshold. Precision is 1 when nothing
/// is accepted; F1 is 0 when precision and recall are both 0.
pub fn pr_at(scores: &ScoreSet, threshold: f64) -> PrPoint {
    let (tp, fp) = scores.accepted(threshold);
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / scores.genuine.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrPoint {
        threshold,
        precision,
        recall,
        f1,
    }
}

pub fn precision_recall_f1(scores: &ScoreSet) -> Result<Vec<PrPoint>> {
    scores.validate()?;
    Ok(scores.thresholds().into_iter().map(|t| pr_at(scores, t)).collect())
}

/// Equal error rate and its threshold.
///
/// Walks the ascending thresholds to the first one where FPR - FNR <= 0.
/// An exact zero returns that rate, with the threshold at the midpoint of
/// the interval of equivalent thresholds. Otherwise both rates and the
/// threshold are interpolated linearly between the bracketing thresholds;
/// infinite sentinels are replaced by their finite neighbor.
pub fn eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    scores.validate()?;
    let ts = scores.thresholds();
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &ts {
        let (fpr, fnr) = scores.rates(t);
        let d = fpr - fnr;
        if d <= 0.0 {
            let (t0, fpr0, fnr0) = prev.expect("the lowest threshold accepts everything");
            let finite = |x: f64, other: f64| if x.is_finite() { x } else { other };
            if d == 0.0 {
                let lo = finite(t0, t);
                return Ok((fpr, (lo + finite(t, lo)) / 2.0));
            }
            let d0 = fpr0 - fnr0;
            let f = d0 / (d0 - d);
            let rate = fpr0 + f * (fpr - fpr0);
            let (a, b) = (finite(t0, t), finite(t, t0));
            return Ok((rate, a + f * (b - a)));
        }
        prev = Some((t, fpr, fnr));
    }
    unreachable!("the +inf threshold rejects everything")
}

/// Fraction of probes whose best-scoring gallery subject is their own.
/// `scores[p][g]` scores probe `p` against gallery entry `g`; a subject's
/// score is the best over its entries. A tie for the top score is a miss.
pub fn rank1(scores: &[Vec<f64>], gallery_ids: &[String], probe_ids: &[String]) -> Result<f64> {
    if probe_ids.is_empty() || gallery_ids.is_empty() {
        return Err(Error::param("eval", "rank-1 needs at least one probe and one gallery entry"));
    }
    if scores.len() != probe_ids.len() || scores.iter().any(|r| r.len() != gallery_ids.len()) {
        return Err(Error::shape("eval", "score matrix does not match probes x gallery"));
    }
    let mut hits = 0usize;
    for (row, pid) in scores.iter().zip(probe_ids) {
        if !gallery_ids.contains(pid) {
            return Err(Error::param("eval", format!("probe subject {pid:?} is not in the gallery")));
        }
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for (&s, gid) in row.iter().zip(gallery_ids) {
            let e = best.entry(gid.as_str()).or_insert(f64::NEG_INFINITY);
            *e = e.max(s);
        }
        let top = best.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<&str> = best.iter().filter(|(_, &v)| v == top).map(|(k, _)| *k).collect();
        if winners.len() == 1 && winners[0] == pid.as_str() {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe_ids.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: f64,
    pub rank1: Option<f64>,
}

/// Full report; precision, recall and F1 are taken at the EER threshold.
pub fn metrics_report(scores: &ScoreSet, rank1: Option<f64>) -> Result<MetricsReport> {
    let (e, t) = eer(scores)?;
    let pr = pr_at(scores, t);
    Ok(MetricsReport {
        eer: e,
        eer_threshold: t,
        precision: pr.precision,
        recall: pr.recall,
        f1: pr.f1,
        auc_roc: auc(&roc(scores)?),
        rank1,
    })
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall,f1\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet::new(g.to_vec(), i.to_vec()).unwrap()
    }

    /// P(g > i) + P(g = i) / 2 over all pairs.
    fn pairwise_auc(s: &ScoreSet) -> f64 {
        let mut acc = 0.0;
        for g in &s.genuine {
            for i in &s.impostor {
                acc += if g > i {
                    1.0
                } else if g == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (s.genuine.len() * s.impostor.len()) as f64
    }

    /// EER from a uniform grid of thresholds over [0, 1], linearly
    /// interpolated at the first grid point where FPR - FNR <= 0.
    fn dense_eer(s: &ScoreSet, n: usize) -> f64 {
        let rate = |t: f64| {
            let fp = s.impostor.iter().filter(|&&v| v >= t).count() as f64 / s.impostor.len() as f64;
            let fn_ = s.genuine.iter().filter(|&&v| v < t).count() as f64 / s.genuine.len() as f64;
            (fp, fn_)
        };
        // the grid plus every score, so no step of either curve falls between thresholds
        let mut grid: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).chain(s.genuine.iter().chain(&s.impostor).copied()).collect();
        grid.sort_by(f64::total_cmp);
        grid.push(f64::INFINITY);
        let mut prev = rate(f64::NEG_INFINITY);
        for t in grid {
            let cur = rate(t);
            let d1 = cur.0 - cur.1;
            if d1 <= 0.0 {
                if d1 == 0.0 {
                    return cur.0;
                }
                let d0 = prev.0 - prev.1;
                return prev.0 + d0 / (d0 - d1) * (cur.0 - prev.0);
            }
            prev = cur;
        }
        unreachable!()
    }

    #[test]
    fn worked_examples() {
        let sep = set(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3]);
        assert_eq!(auc(&roc(&sep).unwrap()), 1.0);
        assert_eq!(eer(&sep).unwrap().0, 0.0);

        let (e, t) = eer(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap();
        assert_eq!(e, 0.5);
        assert!(t > 0.4 && t <= 0.6);

        let s = set(&[0.9, 0.7, 0.6, 0.4], &[0.8, 0.5, 0.3, 0.1]);
        // 12 of the 16 genuine/impostor pairs are ordered correctly
        assert_eq!(pairwise_auc(&s), 0.75);
        assert_eq!(auc(&roc(&s).unwrap()), 0.75);
        let (e, t) = eer(&s).unwrap();
        assert_eq!(e, 0.25);
        assert!((t - 0.55).abs() < 1e-12);

        let same = set(&[0.2, 0.5, 0.5, 0.9], &[0.9, 0.2, 0.5, 0.5]);
        assert_eq!(auc(&roc(&same).unwrap()), 0.5);
    }

    #[test]
    fn precision_recall_examples() {
        let s = set(&[0.8, 0.4], &[0.6, 0.2]);
        let p = pr_at(&s, 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let all = pr_at(&s, f64::NEG_INFINITY);
        assert_eq!((all.recall, all.precision), (1.0, 0.5));
        let none = pr_at(&s, f64::INFINITY);
        assert_eq!((none.precision, none.recall, none.f1), (1.0, 0.0, 0.0));
        let sep = set(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3]);
        let (_, t) = eer(&sep).unwrap();
        let p = pr_at(&sep, t);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(ScoreSet::new(vec![], vec![0.1]).is_err());
        let s = ScoreSet {
            genuine: vec![0.1],
            impostor: vec![],
        };
        assert!(roc(&s).is_err() && eer(&s).is_err() && precision_recall_f1(&s).is_err());
    }

    #[test]
    fn rank1_definition() {
        let g: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let p: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let scores = vec![vec![0.9, 0.1, 0.2], vec![0.3, 0.8, 0.1], vec![0.7, 0.2, 0.4]];
        assert!((rank1(&scores, &g, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let tie = vec![vec![0.5, 0.5, 0.1]];
        assert_eq!(rank1(&tie, &g, &p[..1]).unwrap(), 0.0);
        let one = vec!["a".to_string()];
        assert_eq!(rank1(&[vec![0.2], vec![0.9]], &one, &[one[0].clone(), one[0].clone()]).unwrap(), 1.0);
        assert!(rank1(&[vec![0.2]], &one, &["z".to_string()]).is_err());
    }

    #[test]
    fn report_and_csv() {
        let s = set(&[0.9, 0.7, 0.6, 0.4], &[0.8, 0.5, 0.3, 0.1]);
        let r = metrics_report(&s, Some(1.0)).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in ["eer", "eer_threshold", "precision", "recall", "f1", "auc_roc", "rank1"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(roc_csv(&roc(&s).unwrap()).starts_with("threshold,fpr,tpr\n"));
        assert!(pr_csv(&precision_recall_f1(&s).unwrap()).starts_with("threshold,precision,recall,f1\n"));
    }

    fn score_sets() -> impl Strategy<Value = ScoreSet> {
        (
            prop::collection::vec(0.0f64..=1.0, 1..=64),
            prop::collection::vec(0.0f64..=1.0, 1..=64),
        )
            .prop_map(|(g, i)| ScoreSet::new(g, i).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn eer_matches_dense_sweep(s in score_sets()) {
            let (e, _) = eer(&s).unwrap();
            prop_assert!((e - dense_eer(&s, 10_000)).abs() <= 5e-3);
        }

        #[test]
        fn auc_matches_pairwise(s in score_sets()) {
            prop_assert!((auc(&roc(&s).unwrap()) - pairwise_auc(&s)).abs() <= 1e-9);
        }

        #[test]
        fn roc_rates_non_increasing(s in score_sets()) {
            let c = roc(&s).unwrap();
            for w in c.windows(2) {
                prop_assert!(w[1].fpr <= w[0].fpr && w[1].tpr <= w[0].tpr);
            }
        }

        #[test]
        fn monotone_transform_invariance(s in score_sets()) {
            let f = |v: &f64| (3.0 * v + 0.5).exp();
            let t = ScoreSet::new(s.genuine.iter().map(f).collect(), s.impostor.iter().map(f).collect()).unwrap();
            prop_assert!((eer(&s).unwrap().0 - eer(&t).unwrap().0).abs() < 1e-12);
            prop_assert!((auc(&roc(&s).unwrap()) - auc(&roc(&t).unwrap())).abs() < 1e-12);
            let ids: Vec<String> = (0..s.genuine.len()).map(|k| format!("g{k}")).collect();
            let rows: Vec<Vec<f64>> = s.impostor.iter().map(|_| s.genuine.clone()).collect();
            let rows_t: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(f).collect()).collect();
            let probes: Vec<String> = (0..rows.len()).map(|k| ids[k % ids.len()].clone()).collect();
            prop_assert_eq!(rank1(&rows, &ids, &probes).unwrap(), rank1(&rows_t, &ids, &probes).unwrap());
        }
    }
}
