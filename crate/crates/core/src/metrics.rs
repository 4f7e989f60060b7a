//! Ranking and thresholded classification metrics against ground truth.

use std::io::Write;

use crate::error::{Error, Result};
use crate::inference::TraceRow;

/// Scores and binary labels; `mask` selects which entries count.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub mask: Option<Vec<bool>>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Self {
        ScoredLabels {
            scores,
            labels,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    /// Masked (score, label) pairs sorted by descending score.
    fn sorted_desc(&self) -> Result<Vec<(f64, bool)>> {
        if self.scores.len() != self.labels.len() || self.mask.as_ref().is_some_and(|m| m.len() != self.scores.len()) {
            return Err(Error::Shape("scores, labels and mask must have equal length".into()));
        }
        let mut v: Vec<(f64, bool)> = self
            .scores
            .iter()
            .zip(&self.labels)
            .enumerate()
            .filter(|(i, _)| self.mask.as_ref().is_none_or(|m| m[*i]))
            .map(|(_, (&s, &l))| (s, l))
            .collect();
        if v.iter().any(|(s, _)| s.is_nan()) {
            return Err(Error::NonFinite("NaN score".into()));
        }
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(v)
    }

    fn counts(v: &[(f64, bool)]) -> (usize, usize) {
        let p = v.iter().filter(|(_, l)| *l).count();
        (p, v.len() - p)
    }
}

/// Runs of equal score in a descending list, as (positives, negatives, score).
fn tie_groups(v: &[(f64, bool)]) -> Vec<(usize, usize, f64)> {
    let mut out: Vec<(usize, usize, f64)> = Vec::new();
    for &(s, l) in v {
        match out.last_mut() {
            Some(g) if g.2 == s => {
                if l {
                    g.0 += 1
                } else {
                    g.1 += 1
                }
            }
            _ => out.push((usize::from(l), usize::from(!l), s)),
        }
    }
    out
}

fn require_both_classes(p: usize, n: usize) -> Result<()> {
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({p} positive, {n} negative)"
        )));
    }
    Ok(())
}

/// Mann–Whitney statistic with ties counted one half.
pub fn roc_auc(data: &ScoredLabels) -> Result<f64> {
    let v = data.sorted_desc()?;
    let (p, n) = ScoredLabels::counts(&v);
    require_both_classes(p, n)?;
    // Twice the win count, so ties stay integral.
    let mut twice_wins: u128 = 0;
    let mut neg_above: u128 = 0;
    for (gp, gn, _) in tie_groups(&v) {
        let (gp, gn) = (gp as u128, gn as u128);
        twice_wins += gp * (2 * (n as u128 - neg_above - gn) + gn);
        neg_above += gn;
    }
    Ok(twice_wins as f64 / (2.0 * p as f64 * n as f64))
}

/// Best F1 over thresholds at each distinct score (positive when
/// `score >= threshold`), with the smallest threshold achieving it.
pub fn best_f1(data: &ScoredLabels) -> Result<(f64, f64)> {
    let v = data.sorted_desc()?;
    let (p, _) = ScoredLabels::counts(&v);
    if p == 0 {
        return Err(Error::UndefinedMetric("F1 needs at least one positive label".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for (gp, gn, s) in tie_groups(&v) {
        tp += gp;
        fp += gn;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (p - tp)) as f64;
        if f1 >= best.0 {
            best = (f1, s);
        }
    }
    Ok(best)
}

/// ROC staircase from (0,0) to (1,1), one vertex per distinct score.
pub fn roc_points(data: &ScoredLabels) -> Result<Vec<(f64, f64)>> {
    let v = data.sorted_desc()?;
    let (p, n) = ScoredLabels::counts(&v);
    require_both_classes(p, n)?;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (gp, gn, _) in tie_groups(&v) {
        tp += gp;
        fp += gn;
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(pts)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// One line of the metrics summary; `None` where a metric is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct HazardMetrics {
    pub hazard: String,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub threshold: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn hazard_metrics(hazard: &str, data: &ScoredLabels) -> Result<HazardMetrics> {
    let v = data.sorted_desc()?;
    let (n_pos, n_neg) = ScoredLabels::counts(&v);
    let undefined_ok = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let auc = undefined_ok(roc_auc(data))?;
    let (f1, threshold) = match best_f1(data) {
        Ok((f, t)) => (Some(f), Some(t)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(HazardMetrics {
        hazard: hazard.to_string(),
        auc,
        f1,
        threshold,
        n_pos,
        n_neg,
    })
}

pub const SUMMARY_HEADER: [&str; 6] = ["hazard", "auc", "f1", "threshold", "n_pos", "n_neg"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary_csv<W: Write>(rows: &[HazardMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.hazard.clone(),
            opt(r.auc),
            opt(r.f1),
            opt(r.threshold),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics writer>", e))?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(points: &[(f64, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in points {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<roc writer>", e))?;
    Ok(())
}

/// Summary of an evaluation-objective trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSummary {
    pub first: f64,
    pub last: f64,
    pub best: f64,
    /// Largest relative drop between consecutive evaluations at or after
    /// `from_iter`.
    pub worst_relative_drop: f64,
}

pub fn summarize_trace(trace: &[TraceRow], from_iter: u64) -> Option<TraceSummary> {
    let first = trace.first()?.elbo.total;
    let last = trace.last()?.elbo.total;
    let best = trace.iter().map(|r| r.elbo.total).fold(f64::NEG_INFINITY, f64::max);
    let worst_relative_drop = trace
        .windows(2)
        .filter(|w| w[0].iter >= from_iter)
        .map(|w| (w[0].elbo.total - w[1].elbo.total) / w[0].elbo.total.abs().max(1e-300))
        .fold(0.0, f64::max);
    Some(TraceSummary {
        first,
        last,
        best,
        worst_relative_drop,
    })
}
