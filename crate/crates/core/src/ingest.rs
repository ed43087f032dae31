//! sTEC-rate stream ingestion: CSV parsing, minute resampling and arc segmentation.
//!
//! Streams are keyed by `(station, satellite)`. Missing epochs are gaps; a gap
//! is never filled with zero. Interpolation only happens inside
//! [`segment_arcs`] and every filled sample is flagged.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

/// Cadence assumed for a series with fewer than two samples.
pub const DEFAULT_CADENCE_S: i64 = 60;
pub const MINUTE_S: i64 = 60;

pub const STEC_CSV_HEADER: [&str; 4] = ["station", "satellite", "epoch_utc_s", "dstec_tecu_per_s"];
pub const LABEL_CSV_HEADER: [&str; 4] = ["satellite", "station", "start_epoch_utc_s", "end_epoch_utc_s"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: non-finite value {value:?}")]
    NonFinite { line: u64, value: String },
    #[error("line {line}: duplicate epoch {epoch} for ({station}, {satellite})")]
    DuplicateEpoch {
        line: u64,
        station: String,
        satellite: String,
        epoch: i64,
    },
    #[error("cadence {0} s does not divide 60 s")]
    CadenceNotDivisor(i64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StecSample {
    /// UTC seconds.
    pub epoch: i64,
    /// dsTEC/dt in TECU/s.
    pub value: f64,
}

/// One `(station, satellite)` stream. Epochs not present are gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct StecSeries {
    pub station_id: String,
    pub satellite_id: String,
    pub cadence_s: i64,
    pub samples: Vec<StecSample>,
}

impl StecSeries {
    pub fn new(station_id: impl Into<String>, satellite_id: impl Into<String>, cadence_s: i64, samples: Vec<StecSample>) -> Self {
        Self {
            station_id: station_id.into(),
            satellite_id: satellite_id.into(),
            cadence_s,
            samples,
        }
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.station_id, &self.satellite_id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Epochs on the cadence grid between the first and last sample that carry no sample.
    pub fn gap_epochs(&self) -> Vec<i64> {
        let mut gaps = Vec::new();
        for pair in self.samples.windows(2) {
            let mut t = pair[0].epoch + self.cadence_s;
            while t < pair[1].epoch {
                gaps.push(t);
                t += self.cadence_s;
            }
        }
        gaps
    }
}

/// Ground-truth TID interval, half-open `[start_epoch, end_epoch)`.
///
/// `station_id == None` is the `*` wildcard: every station of the satellite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInterval {
    pub satellite_id: String,
    pub station_id: Option<String>,
    pub start_epoch: i64,
    pub end_epoch: i64,
}

impl LabelInterval {
    pub fn applies_to(&self, station: &str, satellite: &str) -> bool {
        self.satellite_id == satellite && self.station_id.as_deref().is_none_or(|s| s == station)
    }
}

fn header_check(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<(), IngestError> {
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(IngestError::Malformed {
            line: 1,
            reason: format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str) -> Result<&'a str, IngestError> {
    match rec.get(idx).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(IngestError::Malformed {
            line: line_of(rec),
            reason: format!("missing field `{name}`"),
        }),
    }
}

fn parse_epoch(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<i64, IngestError> {
    let raw = field(rec, idx, name)?;
    raw.parse::<i64>().map_err(|_| IngestError::Malformed {
        line: line_of(rec),
        reason: format!("`{name}` is not an integer: {raw:?}"),
    })
}

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(source)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn infer_cadence(samples: &[StecSample]) -> i64 {
    match samples.windows(2).map(|p| p[1].epoch - p[0].epoch).fold(0, gcd) {
        0 => DEFAULT_CADENCE_S,
        g => g,
    }
}

/// Parses the `station,satellite,epoch_utc_s,dstec_tecu_per_s` schema.
///
/// Returns one series per distinct `(station, satellite)` pair, ordered by key,
/// with samples sorted by epoch. Cadence is the GCD of consecutive epoch steps.
pub fn parse_stec_csv<R: Read>(source: R) -> Result<Vec<StecSeries>, IngestError> {
    let mut rdr = reader(source);
    header_check(&mut rdr, &STEC_CSV_HEADER)?;

    let mut groups: BTreeMap<(String, String), BTreeMap<i64, f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 4 {
            return Err(IngestError::Malformed {
                line,
                reason: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let station = field(&rec, 0, "station")?.to_string();
        let satellite = field(&rec, 1, "satellite")?.to_string();
        let epoch = parse_epoch(&rec, 2, "epoch_utc_s")?;
        let raw = field(&rec, 3, "dstec_tecu_per_s")?;
        let value: f64 = raw.parse().map_err(|_| IngestError::Malformed {
            line,
            reason: format!("`dstec_tecu_per_s` is not a number: {raw:?}"),
        })?;
        if !value.is_finite() {
            return Err(IngestError::NonFinite {
                line,
                value: raw.to_string(),
            });
        }
        let stream = groups.entry((station.clone(), satellite.clone())).or_default();
        if stream.insert(epoch, value).is_some() {
            return Err(IngestError::DuplicateEpoch {
                line,
                station,
                satellite,
                epoch,
            });
        }
    }

    Ok(groups
        .into_iter()
        .map(|((station, satellite), by_epoch)| {
            let samples: Vec<StecSample> = by_epoch
                .into_iter()
                .map(|(epoch, value)| StecSample { epoch, value })
                .collect();
            let cadence = infer_cadence(&samples);
            StecSeries::new(station, satellite, cadence, samples)
        })
        .collect())
}

pub fn write_stec_csv<W: Write>(sink: W, series: &[StecSeries]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(STEC_CSV_HEADER)?;
    for s in series {
        for sample in &s.samples {
            w.write_record([
                s.station_id.as_str(),
                s.satellite_id.as_str(),
                &sample.epoch.to_string(),
                &format!("{:?}", sample.value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses the `satellite,station,start_epoch_utc_s,end_epoch_utc_s` schema.
/// A station of `*` becomes a wildcard label.
pub fn parse_label_csv<R: Read>(source: R) -> Result<Vec<LabelInterval>, IngestError> {
    let mut rdr = reader(source);
    header_check(&mut rdr, &LABEL_CSV_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 4 {
            return Err(IngestError::Malformed {
                line,
                reason: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let satellite_id = field(&rec, 0, "satellite")?.to_string();
        let station = field(&rec, 1, "station")?;
        let start_epoch = parse_epoch(&rec, 2, "start_epoch_utc_s")?;
        let end_epoch = parse_epoch(&rec, 3, "end_epoch_utc_s")?;
        if start_epoch >= end_epoch {
            return Err(IngestError::Malformed {
                line,
                reason: format!("label start {start_epoch} is not before end {end_epoch}"),
            });
        }
        out.push(LabelInterval {
            satellite_id,
            station_id: (station != "*").then(|| station.to_string()),
            start_epoch,
            end_epoch,
        });
    }
    Ok(out)
}

pub fn write_label_csv<W: Write>(sink: W, labels: &[LabelInterval]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(LABEL_CSV_HEADER)?;
    for l in labels {
        w.write_record([
            l.satellite_id.as_str(),
            l.station_id.as_deref().unwrap_or("*"),
            &l.start_epoch.to_string(),
            &l.end_epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Replaces wildcard labels by one label per matching station.
pub fn expand_wildcards(labels: &[LabelInterval], series: &[StecSeries]) -> Vec<LabelInterval> {
    let mut out = Vec::with_capacity(labels.len());
    for l in labels {
        match &l.station_id {
            Some(_) => out.push(l.clone()),
            None => {
                for s in series.iter().filter(|s| s.satellite_id == l.satellite_id) {
                    out.push(LabelInterval {
                        station_id: Some(s.station_id.clone()),
                        ..l.clone()
                    });
                }
            }
        }
    }
    out
}

/// Averages samples into `[minute, minute + 60)` bins.
///
/// Output epochs are minute boundaries. Minutes without input samples are
/// absent from the output, i.e. remain gaps.
pub fn resample_to_minute(series: &StecSeries) -> Result<StecSeries, IngestError> {
    if series.cadence_s <= 0 || MINUTE_S % series.cadence_s != 0 {
        return Err(IngestError::CadenceNotDivisor(series.cadence_s));
    }
    let mut samples: Vec<StecSample> = Vec::new();
    let mut current: Option<(i64, f64, usize)> = None;
    for s in &series.samples {
        let minute = s.epoch.div_euclid(MINUTE_S) * MINUTE_S;
        match &mut current {
            Some((m, sum, n)) if *m == minute => {
                *sum += s.value;
                *n += 1;
            }
            _ => {
                if let Some((m, sum, n)) = current.take() {
                    samples.push(StecSample {
                        epoch: m,
                        value: sum / n as f64,
                    });
                }
                current = Some((minute, s.value, 1));
            }
        }
    }
    if let Some((m, sum, n)) = current {
        samples.push(StecSample {
            epoch: m,
            value: sum / n as f64,
        });
    }
    Ok(StecSeries::new(series.station_id.clone(), series.satellite_id.clone(), MINUTE_S, samples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcSample {
    pub epoch: i64,
    pub value: f64,
    pub interpolated: bool,
}

/// Gap-free run of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub station_id: String,
    pub satellite_id: String,
    pub cadence_s: i64,
    /// Index into the parent series' samples of the first arc sample.
    pub start_index: usize,
    pub samples: Vec<ArcSample>,
}

impl Arc {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_epoch(&self) -> i64 {
        self.samples[0].epoch
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }
}

/// Splits a sorted series into maximal runs of consecutive cadence steps.
///
/// Gaps of at most `max_gap` missing steps are bridged by linear
/// interpolation between the neighbouring samples.
pub fn segment_arcs(series: &StecSeries, max_gap: usize) -> Vec<Arc> {
    let step = series.cadence_s;
    let mut arcs = Vec::new();
    let mut current: Option<Arc> = None;

    for (idx, s) in series.samples.iter().enumerate() {
        let sample = ArcSample {
            epoch: s.epoch,
            value: s.value,
            interpolated: false,
        };
        if let Some(arc) = current.as_mut() {
            let last = *arc.samples.last().expect("arcs are non-empty");
            let diff = s.epoch - last.epoch;
            let missing = if step > 0 && diff > 0 && diff % step == 0 {
                Some((diff / step - 1) as usize)
            } else {
                None
            };
            match missing {
                Some(0) => {
                    arc.samples.push(sample);
                    continue;
                }
                Some(k) if k <= max_gap => {
                    for j in 1..=k {
                        let frac = j as f64 / (k + 1) as f64;
                        arc.samples.push(ArcSample {
                            epoch: last.epoch + j as i64 * step,
                            value: last.value + frac * (s.value - last.value),
                            interpolated: true,
                        });
                    }
                    arc.samples.push(sample);
                    continue;
                }
                _ => arcs.push(current.take().expect("checked above")),
            }
        }
        current = Some(Arc {
            station_id: series.station_id.clone(),
            satellite_id: series.satellite_id.clone(),
            cadence_s: step,
            start_index: idx,
            samples: vec![sample],
        });
    }
    arcs.extend(current);
    arcs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(cadence: i64, pts: &[(i64, f64)]) -> StecSeries {
        StecSeries::new(
            "gopm",
            "G07",
            cadence,
            pts.iter().map(|&(epoch, value)| StecSample { epoch, value }).collect(),
        )
    }

    fn minutes(n: i64, skip: &[i64]) -> StecSeries {
        let pts: Vec<(i64, f64)> = (0..n)
            .filter(|m| !skip.contains(m))
            .map(|m| (m * 60, m as f64 * 0.5))
            .collect();
        series(60, &pts)
    }

    #[test]
    fn parses_single_stream() {
        let csv = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G07,0,0.1\ngopm,G07,5,0.2\ngopm,G07,10,0.3\n";
        let out = parse_stec_csv(csv.as_bytes()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cadence_s, 5);
        assert_eq!(out[0].samples.len(), 3);
        assert_eq!(out[0].key(), ("gopm", "G07"));
    }

    #[test]
    fn groups_by_pair_and_sorts() {
        let csv = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G20,60,1\ngopm,G07,60,2\ngopm,G07,0,3\n";
        let out = parse_stec_csv(csv.as_bytes()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].satellite_id, "G07");
        assert_eq!(out[0].samples[0].epoch, 0);
        assert_eq!(out[1].satellite_id, "G20");
    }

    #[test]
    fn rejects_nan_with_line() {
        let csv = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G07,0,0.1\ngopm,G07,5,NaN\n";
        match parse_stec_csv(csv.as_bytes()) {
            Err(IngestError::NonFinite { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        let dup = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G07,0,0.1\ngopm,G07,0,0.2\n";
        assert!(matches!(
            parse_stec_csv(dup.as_bytes()),
            Err(IngestError::DuplicateEpoch { line: 3, epoch: 0, .. })
        ));
        let bad = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G07,zero,0.1\n";
        assert!(matches!(parse_stec_csv(bad.as_bytes()), Err(IngestError::Malformed { line: 2, .. })));
        let short = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G07,0\n";
        assert!(matches!(parse_stec_csv(short.as_bytes()), Err(IngestError::Malformed { line: 2, .. })));
        let header = "a,b,c,d\n";
        assert!(matches!(parse_stec_csv(header.as_bytes()), Err(IngestError::Malformed { line: 1, .. })));
    }

    #[test]
    fn label_csv_wildcard_expands() {
        let csv = "satellite,station,start_epoch_utc_s,end_epoch_utc_s\nG07,*,0,600\nG07,gopm,60,120\n";
        let labels = parse_label_csv(csv.as_bytes()).unwrap();
        assert_eq!(labels[0].station_id, None);
        let streams = vec![series(60, &[(0, 0.0)]), StecSeries::new("mkea", "G07", 60, vec![])];
        let expanded = expand_wildcards(&labels, &streams);
        assert_eq!(expanded.len(), 3);
        assert!(expanded.iter().all(|l| l.station_id.is_some()));

        let inverted = "satellite,station,start_epoch_utc_s,end_epoch_utc_s\nG07,*,600,0\n";
        assert!(parse_label_csv(inverted.as_bytes()).is_err());
    }

    #[test]
    fn resample_constant_minute() {
        let pts: Vec<(i64, f64)> = (0..12).map(|i| (i * 5, 0.02)).collect();
        let out = resample_to_minute(&series(5, &pts)).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert!((out.samples[0].value - 0.02).abs() < 1e-15);
        assert_eq!(out.cadence_s, 60);
    }

    #[test]
    fn resample_partial_minute_mean() {
        let out = resample_to_minute(&series(5, &[(120, 0.0), (125, 0.1), (150, 0.2)])).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].epoch, 120);
        assert!((out.samples[0].value - 0.1).abs() < 1e-15);
    }

    #[test]
    fn resample_empty_minute_is_gap() {
        let out = resample_to_minute(&series(5, &[(0, 1.0), (125, 2.0)])).unwrap();
        assert_eq!(out.samples.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![0, 120]);
        assert_eq!(out.gap_epochs(), vec![60]);
    }

    #[test]
    fn resample_rejects_bad_cadence() {
        assert!(matches!(
            resample_to_minute(&series(7, &[(0, 1.0)])),
            Err(IngestError::CadenceNotDivisor(7))
        ));
    }

    #[test]
    fn one_contiguous_arc() {
        let arcs = segment_arcs(&minutes(100, &[]), 0);
        assert_eq!(arcs.len(), 1);
        assert_eq!(arcs[0].len(), 100);
    }

    #[test]
    fn gap_splits_arc() {
        let arcs = segment_arcs(&minutes(50, &[25]), 0);
        assert_eq!(arcs.iter().map(Arc::len).collect::<Vec<_>>(), vec![25, 24]);
        assert_eq!(arcs[1].start_index, 25);
    }

    #[test]
    fn small_gap_interpolated() {
        let arcs = segment_arcs(&minutes(50, &[25]), 1);
        assert_eq!(arcs.len(), 1);
        assert_eq!(arcs[0].len(), 50);
        let filled = arcs[0].samples[25];
        assert!(filled.interpolated);
        assert_eq!(filled.epoch, 25 * 60);
        // neighbours are 12.0 and 13.0
        assert!((filled.value - 12.5).abs() < 1e-12);
        assert_eq!(arcs[0].samples.iter().filter(|s| s.interpolated).count(), 1);
    }

    #[test]
    fn cadence_inference_falls_back() {
        let csv = "station,satellite,epoch_utc_s,dstec_tecu_per_s\ngopm,G07,0,0.1\n";
        assert_eq!(parse_stec_csv(csv.as_bytes()).unwrap()[0].cadence_s, DEFAULT_CADENCE_S);
    }

    #[test]
    fn csv_round_trip() {
        let s = series(60, &[(0, 0.125), (60, -1e-3), (180, 3.0)]);
        let mut buf = Vec::new();
        write_stec_csv(&mut buf, std::slice::from_ref(&s)).unwrap();
        assert_eq!(parse_stec_csv(buf.as_slice()).unwrap(), vec![s]);
    }
}
