//! Sequence-level scoring of detections against ground truth.
//!
//! A true sequence is detected when any predicted sequence overlaps it. A
//! predicted sequence overlapping no true sequence is a false positive.
//! Results across streams are micro-averaged by summing counts.

use std::io::Write;

use thiserror::Error;

use crate::fpm::{Cell, DetectionGrid};
use crate::ingest::LabelInterval;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid sequence set: {0}")]
    InvalidSet(String),
    #[error("labels reference satellite {0} which has no detection grid")]
    SatelliteMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sorted, disjoint half-open intervals `[start, end)` on an integer axis.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SequenceSet(Vec<(i64, i64)>);

impl SequenceSet {
    pub fn new(intervals: Vec<(i64, i64)>) -> Result<Self, EvalError> {
        for &(s, e) in &intervals {
            if s >= e {
                return Err(EvalError::InvalidSet(format!("empty interval [{s}, {e})")));
            }
        }
        for pair in intervals.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(EvalError::InvalidSet(format!(
                    "intervals {:?} and {:?} are unsorted or overlap",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self(intervals))
    }

    /// Sorts and merges arbitrary intervals; touching intervals fuse.
    /// Empty intervals are dropped.
    pub fn merged(mut intervals: Vec<(i64, i64)>) -> Self {
        intervals.retain(|&(s, e)| s < e);
        intervals.sort_unstable();
        let mut out: Vec<(i64, i64)> = Vec::with_capacity(intervals.len());
        for (s, e) in intervals {
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        Self(out)
    }

    pub fn intervals(&self) -> &[(i64, i64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn translate(&self, offset: i64) -> Self {
        Self(self.0.iter().map(|&(s, e)| (s + offset, e + offset)).collect())
    }
}

/// Maximal runs of `true` as index intervals.
pub fn runs_from_mask(mask: &[bool]) -> SequenceSet {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i as i64),
            (false, Some(s)) => {
                out.push((s, i as i64));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() as i64));
    }
    SequenceSet(out)
}

/// Inverse of [`runs_from_mask`] for sets lying within `[0, len)`.
pub fn mask_from_runs(set: &SequenceSet, len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for &(s, e) in set.intervals() {
        for m in &mut mask[s.max(0) as usize..(e.max(0) as usize).min(len)] {
            *m = true;
        }
    }
    mask
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `(truth index, prediction index)` for every overlapping pair.
    pub matched: Vec<(usize, usize)>,
}

impl MatchReport {
    pub fn merge(&mut self, other: &MatchReport) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }
}

/// Two-pointer sweep over both sorted sets.
pub fn match_sequences(truth: &SequenceSet, pred: &SequenceSet) -> MatchReport {
    let t = truth.intervals();
    let p = pred.intervals();
    let mut truth_hit = vec![false; t.len()];
    let mut pred_hit = vec![false; p.len()];
    let mut matched = Vec::new();

    let (mut i, mut j) = (0, 0);
    while i < t.len() && j < p.len() {
        let (ts, te) = t[i];
        let (ps, pe) = p[j];
        if ts < pe && ps < te {
            truth_hit[i] = true;
            pred_hit[j] = true;
            matched.push((i, j));
        }
        // advance whichever ends first; later intervals of the other set may still overlap it
        if te <= pe {
            i += 1;
        } else {
            j += 1;
        }
    }

    let tp = truth_hit.iter().filter(|&&h| h).count();
    MatchReport {
        true_positives: tp,
        false_positives: pred_hit.iter().filter(|&&h| !h).count(),
        false_negatives: t.len() - tp,
        matched,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Counts were all zero; the perfect scores are a convention.
    pub vacuous: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn prf_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        vacuous: tp == 0 && fp == 0 && fn_ == 0,
    }
}

pub fn prf(report: &MatchReport) -> Metrics {
    prf_counts(report.true_positives, report.false_positives, report.false_negatives)
}

/// Label intervals of one stream converted to grid axis indices.
///
/// Minute `t` of the grid holds the class of the `window`-sample window
/// ending there, so it is a true minute when that window overlaps a label,
/// the same rule that labels training windows. Portions outside the axis
/// are clipped away.
pub fn truth_on_axis<'a>(grid: &DetectionGrid, labels: impl IntoIterator<Item = &'a LabelInterval>, window: usize) -> SequenceSet {
    let c = grid.cadence_s;
    let clip = |t: i64| t.clamp(0, grid.steps as i64);
    let lag = window.max(1) as i64 - 1;
    SequenceSet::merged(
        labels
            .into_iter()
            .map(|l| {
                let lo = (l.start_epoch - grid.start_epoch).div_euclid(c);
                let hi = (l.end_epoch - grid.start_epoch + c - 1).div_euclid(c) + lag;
                (clip(lo), clip(hi))
            })
            .collect(),
    )
}

fn check_satellites(grids: &[DetectionGrid], labels: &[LabelInterval]) -> Result<(), EvalError> {
    for l in labels {
        if !grids.iter().any(|g| g.satellite_id == l.satellite_id) {
            return Err(EvalError::SatelliteMismatch(l.satellite_id.clone()));
        }
    }
    Ok(())
}

/// Per `(satellite, station)` stream scoring, summed over streams.
pub fn evaluate_streams(grids: &[DetectionGrid], labels: &[LabelInterval], window: usize) -> Result<MatchReport, EvalError> {
    check_satellites(grids, labels)?;
    let mut total = MatchReport::default();
    for g in grids {
        for (s, station) in g.stations.iter().enumerate() {
            let truth = truth_on_axis(g, labels.iter().filter(|l| l.applies_to(station, &g.satellite_id)), window);
            let detected: Vec<bool> = g.station_row(s).iter().map(|&c| c == Cell::Detected).collect();
            total.merge(&match_sequences(&truth, &runs_from_mask(&detected)));
        }
    }
    Ok(total)
}

/// Per-satellite scoring: truth is the union of all station labels, a minute
/// is predicted when any station still reports a detection.
pub fn evaluate_satellites(grids: &[DetectionGrid], labels: &[LabelInterval], window: usize) -> Result<MatchReport, EvalError> {
    check_satellites(grids, labels)?;
    let mut total = MatchReport::default();
    for g in grids {
        let truth = truth_on_axis(g, labels.iter().filter(|l| l.satellite_id == g.satellite_id), window);
        total.merge(&match_sequences(&truth, &runs_from_mask(&g.any_detected())));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub stage: String,
    pub report: MatchReport,
    pub metrics: Metrics,
}

impl ReportRow {
    pub fn new(stage: &str, report: MatchReport) -> Self {
        let metrics = prf(&report);
        Self {
            stage: stage.to_string(),
            report,
            metrics,
        }
    }
}

pub fn write_metrics_csv<W: Write>(mut sink: W, rows: &[ReportRow]) -> Result<(), EvalError> {
    writeln!(sink, "stage,tp,fp,fn,precision,recall,f1,vacuous")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.stage,
            r.report.true_positives,
            r.report.false_positives,
            r.report.false_negatives,
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1,
            r.metrics.vacuous
        )?;
    }
    Ok(())
}

pub fn format_table(rows: &[ReportRow]) -> String {
    let mut out = String::from("Metrics\n");
    out.push_str(&format!("{:<52} {:>8}\n", "", "value"));
    for r in rows {
        let flag = if r.metrics.vacuous { " (vacuous)" } else { "" };
        for (name, v) in [("recall", r.metrics.recall), ("precision", r.metrics.precision), ("F1 score", r.metrics.f1)] {
            out.push_str(&format!("{:<52} {:>7.1}%{flag}\n", format!("{} - {name}", r.stage), 100.0 * v));
        }
    }
    out
}
