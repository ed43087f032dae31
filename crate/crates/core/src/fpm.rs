//! Cross-station false positive mitigation.
//!
//! For one satellite, the share of stations flagging a TID at each minute is
//! compared against a constant threshold. Minutes that do not clear it lose
//! all their detections.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.75;
pub const DEFAULT_QUORUM: usize = 3;

pub const GRID_CSV_HEADER: [&str; 5] = ["satellite", "station", "epoch", "state", "probability"];
pub const VOTE_CSV_HEADER: [&str; 5] = ["satellite", "epoch", "F", "valid", "alert"];

#[derive(Debug, Error)]
pub enum FpmError {
    #[error("grid line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("mask length {mask} does not match grid axis of {steps} steps")]
    MaskLength { mask: usize, steps: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Detected,
    Normal,
    NoData,
}

impl Cell {
    fn as_str(self) -> &'static str {
        match self {
            Self::Detected => "1",
            Self::Normal => "0",
            Self::NoData => "NA",
        }
    }
}

/// Stations x minutes detection states for one satellite.
#[derive(Debug, Clone)]
pub struct DetectionGrid {
    pub satellite_id: String,
    pub stations: Vec<String>,
    pub start_epoch: i64,
    pub cadence_s: i64,
    pub steps: usize,
    /// Station-major: `cells[s * steps + t]`.
    pub cells: Vec<Cell>,
    /// Classifier probability of the anomalous class, `NaN` where there is no data.
    pub probability: Vec<f64>,
}

impl PartialEq for DetectionGrid {
    /// Probabilities compare bitwise so `NaN` cells are equal.
    fn eq(&self, other: &Self) -> bool {
        self.satellite_id == other.satellite_id
            && self.stations == other.stations
            && self.start_epoch == other.start_epoch
            && self.cadence_s == other.cadence_s
            && self.steps == other.steps
            && self.cells == other.cells
            && self.probability.len() == other.probability.len()
            && self.probability.iter().zip(&other.probability).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl DetectionGrid {
    pub fn new(satellite_id: impl Into<String>, stations: Vec<String>, start_epoch: i64, cadence_s: i64, steps: usize) -> Self {
        let n = stations.len() * steps;
        Self {
            satellite_id: satellite_id.into(),
            stations,
            start_epoch,
            cadence_s,
            steps,
            cells: vec![Cell::NoData; n],
            probability: vec![f64::NAN; n],
        }
    }

    /// Builds a grid from per-station rows of states.
    pub fn from_rows(satellite_id: &str, rows: &[(&str, Vec<Cell>)], start_epoch: i64, cadence_s: i64) -> Self {
        let steps = rows.first().map_or(0, |r| r.1.len());
        assert!(rows.iter().all(|r| r.1.len() == steps), "grid must be rectangular");
        let mut g = Self::new(
            satellite_id,
            rows.iter().map(|r| r.0.to_string()).collect(),
            start_epoch,
            cadence_s,
            steps,
        );
        g.cells = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        g
    }

    pub fn epoch(&self, t: usize) -> i64 {
        self.start_epoch + t as i64 * self.cadence_s
    }

    /// Axis index of an epoch, if it falls on the grid.
    pub fn index_of(&self, epoch: i64) -> Option<usize> {
        let off = epoch - self.start_epoch;
        (off >= 0 && off % self.cadence_s == 0 && ((off / self.cadence_s) as usize) < self.steps).then(|| (off / self.cadence_s) as usize)
    }

    #[inline]
    pub fn get(&self, station: usize, t: usize) -> Cell {
        self.cells[station * self.steps + t]
    }

    #[inline]
    pub fn set(&mut self, station: usize, t: usize, cell: Cell) {
        self.cells[station * self.steps + t] = cell;
    }

    pub fn station_row(&self, station: usize) -> &[Cell] {
        &self.cells[station * self.steps..(station + 1) * self.steps]
    }

    pub fn detected_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == Cell::Detected).count()
    }

    /// Minutes where at least one station reports a detection.
    pub fn any_detected(&self) -> Vec<bool> {
        (0..self.steps)
            .map(|t| (0..self.stations.len()).any(|s| self.get(s, t) == Cell::Detected))
            .collect()
    }
}

/// Writes grids in long form, one row per cell including `NA` cells.
pub fn write_grids<W: Write>(sink: W, grids: &[DetectionGrid]) -> Result<(), FpmError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(GRID_CSV_HEADER)?;
    for g in grids {
        for (s, station) in g.stations.iter().enumerate() {
            for t in 0..g.steps {
                let p = g.probability[s * g.steps + t];
                w.write_record([
                    g.satellite_id.as_str(),
                    station.as_str(),
                    &g.epoch(t).to_string(),
                    g.get(s, t).as_str(),
                    &if p.is_nan() { String::new() } else { format!("{p:.6}") },
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the long form written by [`write_grids`]. Cells absent from the file
/// are no-data; the axis of each satellite spans its first to last epoch.
pub fn read_grids<R: Read>(source: R) -> Result<Vec<DetectionGrid>, FpmError> {
    type Cells = BTreeMap<String, BTreeMap<i64, (Cell, f64)>>;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != GRID_CSV_HEADER {
        return Err(FpmError::Malformed {
            line: 1,
            reason: format!("expected header {}", GRID_CSV_HEADER.join(",")),
        });
    }
    let mut by_sat: BTreeMap<String, Cells> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| FpmError::Malformed { line, reason };
        if rec.len() != GRID_CSV_HEADER.len() {
            return Err(bad(format!("expected {} fields", GRID_CSV_HEADER.len())));
        }
        let epoch: i64 = rec[2].trim().parse().map_err(|_| bad(format!("bad epoch {:?}", &rec[2])))?;
        let cell = match rec[3].trim() {
            "1" => Cell::Detected,
            "0" => Cell::Normal,
            "NA" => Cell::NoData,
            other => return Err(bad(format!("unknown state {other:?}"))),
        };
        let prob = match rec[4].trim() {
            "" => f64::NAN,
            p => p.parse().map_err(|_| bad(format!("bad probability {p:?}")))?,
        };
        let prev = by_sat
            .entry(rec[0].trim().to_string())
            .or_default()
            .entry(rec[1].trim().to_string())
            .or_default()
            .insert(epoch, (cell, prob));
        if prev.is_some() {
            return Err(bad(format!("duplicate cell at epoch {epoch}")));
        }
    }

    let mut grids = Vec::new();
    for (sat, stations) in by_sat {
        let epochs: Vec<i64> = stations.values().flat_map(|m| m.keys().copied()).collect();
        let (lo, hi) = (*epochs.iter().min().expect("non-empty"), *epochs.iter().max().expect("non-empty"));
        let cadence = stations
            .values()
            .flat_map(|m| m.keys().collect::<Vec<_>>().windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>())
            .min()
            .unwrap_or(60);
        if (hi - lo) % cadence != 0 {
            return Err(FpmError::Malformed {
                line: 0,
                reason: format!("satellite {sat}: epochs are not on a regular axis"),
            });
        }
        let steps = ((hi - lo) / cadence + 1) as usize;
        let mut g = DetectionGrid::new(sat.clone(), stations.keys().cloned().collect(), lo, cadence, steps);
        for (s, cells) in stations.values().enumerate() {
            for (&epoch, &(cell, prob)) in cells {
                let t = g.index_of(epoch).ok_or_else(|| FpmError::Malformed {
                    line: 0,
                    reason: format!("satellite {sat}: epoch {epoch} off the {cadence} s axis"),
                })?;
                g.set(s, t, cell);
                g.probability[s * steps + t] = prob;
            }
        }
        grids.push(g);
    }
    Ok(grids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Stations with data at the minute.
    #[default]
    ValidStations,
    /// Every station of the satellite, whether or not it has data.
    AllStations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpmConfig {
    pub threshold: f64,
    pub min_valid: usize,
    pub denominator: Denominator,
}

impl Default for FpmConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_valid: DEFAULT_QUORUM,
            denominator: Denominator::ValidStations,
        }
    }
}

impl FpmConfig {
    pub fn header_line(&self) -> String {
        let denom = match self.denominator {
            Denominator::ValidStations => "valid-stations",
            Denominator::AllStations => "all-stations",
        };
        format!("# fpm threshold={} quorum={} denominator={denom}", self.threshold, self.min_valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteSeries {
    pub satellite_id: String,
    pub start_epoch: i64,
    pub cadence_s: i64,
    pub fraction: Vec<f64>,
    pub valid: Vec<usize>,
    pub detected: Vec<usize>,
}

/// Detection share at minute `t`, over stations with data.
pub fn vote_fraction(grid: &DetectionGrid, t: usize) -> (f64, usize) {
    vote_fraction_with(grid, t, Denominator::ValidStations)
}

pub fn vote_fraction_with(grid: &DetectionGrid, t: usize, denominator: Denominator) -> (f64, usize) {
    let (detected, valid) = tally(grid, t, denominator);
    (if valid == 0 { 0.0 } else { detected as f64 / valid as f64 }, valid)
}

fn tally(grid: &DetectionGrid, t: usize, denominator: Denominator) -> (usize, usize) {
    let mut detected = 0;
    let mut with_data = 0;
    for s in 0..grid.stations.len() {
        match grid.get(s, t) {
            Cell::Detected => {
                detected += 1;
                with_data += 1;
            }
            Cell::Normal => with_data += 1,
            Cell::NoData => {}
        }
    }
    let valid = match denominator {
        Denominator::ValidStations => with_data,
        Denominator::AllStations => grid.stations.len(),
    };
    (detected, valid)
}

pub fn votes(grid: &DetectionGrid, denominator: Denominator) -> VoteSeries {
    let mut v = VoteSeries {
        satellite_id: grid.satellite_id.clone(),
        start_epoch: grid.start_epoch,
        cadence_s: grid.cadence_s,
        fraction: Vec::with_capacity(grid.steps),
        valid: Vec::with_capacity(grid.steps),
        detected: Vec::with_capacity(grid.steps),
    };
    for t in 0..grid.steps {
        let (detected, valid) = tally(grid, t, denominator);
        v.fraction.push(if valid == 0 { 0.0 } else { detected as f64 / valid as f64 });
        v.valid.push(valid);
        v.detected.push(detected);
    }
    v
}

/// `F > T` (strict) with at least `min_valid` contributing stations.
pub fn threshold_mask(votes: &VoteSeries, cfg: &FpmConfig) -> Vec<bool> {
    votes
        .fraction
        .iter()
        .zip(&votes.valid)
        .map(|(&f, &valid)| f > cfg.threshold && valid >= cfg.min_valid)
        .collect()
}

/// Demotes every detection at minutes where the mask is false.
pub fn reclassify(grid: &DetectionGrid, mask: &[bool]) -> Result<DetectionGrid, FpmError> {
    if mask.len() != grid.steps {
        return Err(FpmError::MaskLength {
            mask: mask.len(),
            steps: grid.steps,
        });
    }
    let mut out = grid.clone();
    for s in 0..grid.stations.len() {
        for (t, &keep) in mask.iter().enumerate() {
            if !keep && out.get(s, t) == Cell::Detected {
                out.set(s, t, Cell::Normal);
            }
        }
    }
    Ok(out)
}

/// Votes, mask and filtered grid for one satellite.
pub fn apply(grid: &DetectionGrid, cfg: &FpmConfig) -> (VoteSeries, Vec<bool>, DetectionGrid) {
    let v = votes(grid, cfg.denominator);
    let mask = threshold_mask(&v, cfg);
    let filtered = reclassify(grid, &mask).expect("mask built from the same grid");
    (v, mask, filtered)
}

/// `satellite,epoch,F,valid,alert` preceded by a `#` line echoing the configuration.
pub fn write_votes<W: Write>(mut sink: W, cfg: &FpmConfig, series: &[(VoteSeries, Vec<bool>)]) -> Result<(), FpmError> {
    writeln!(sink, "{}", cfg.header_line())?;
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(VOTE_CSV_HEADER)?;
    for (v, mask) in series {
        for t in 0..v.fraction.len() {
            w.write_record([
                v.satellite_id.as_str(),
                &(v.start_epoch + t as i64 * v.cadence_s).to_string(),
                &format!("{:.6}", v.fraction[t]),
                &v.valid[t].to_string(),
                if mask[t] { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Cell::{Detected as D, NoData as X, Normal as N};

    fn column(states: &[Cell]) -> DetectionGrid {
        let names: Vec<String> = (0..states.len()).map(|i| format!("s{i}")).collect();
        let rows: Vec<(&str, Vec<Cell>)> = names.iter().zip(states).map(|(n, &c)| (n.as_str(), vec![c])).collect();
        DetectionGrid::from_rows("G12", &rows, 0, 60)
    }

    fn cfg(threshold: f64, min_valid: usize) -> FpmConfig {
        FpmConfig {
            threshold,
            min_valid,
            ..FpmConfig::default()
        }
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(vote_fraction(&column(&[D, D, D, N]), 0), (0.75, 4));
        let (f, valid) = vote_fraction(&column(&[D, D, X, N]), 0);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(valid, 3);
        assert_eq!(vote_fraction(&column(&[X, X, X]), 0), (0.0, 0));
        assert_eq!(vote_fraction_with(&column(&[D, D, X, N]), 0, Denominator::AllStations), (0.5, 4));
    }

    #[test]
    fn strict_threshold_and_quorum() {
        let at = |f: f64, valid: usize, c: &FpmConfig| {
            let v = VoteSeries {
                satellite_id: "G12".into(),
                start_epoch: 0,
                cadence_s: 60,
                fraction: vec![f],
                valid: vec![valid],
                detected: vec![(f * valid as f64).round() as usize],
            };
            threshold_mask(&v, c)[0]
        };
        assert!(!at(0.75, 4, &cfg(0.75, 3)));
        assert!(at(0.8, 5, &cfg(0.75, 3)));
        assert!(!at(1.0, 1, &cfg(0.75, 2)));
    }

    #[test]
    fn reclassify_examples() {
        let mut states = vec![N; 8];
        states[3] = D;
        let (_, _, out) = apply(&column(&states), &cfg(0.75, 3));
        assert_eq!(out.detected_count(), 0);

        let mut states = vec![D; 8];
        states[0] = N;
        let (_, _, out) = apply(&column(&states), &cfg(0.75, 3));
        assert_eq!(out.detected_count(), 7);

        let g = column(&[D, N, X, D]);
        assert_eq!(reclassify(&g, &[true]).unwrap(), g);
        assert!(matches!(reclassify(&g, &[true, false]), Err(FpmError::MaskLength { .. })));
    }

    #[test]
    fn header_echoes_threshold() {
        assert_eq!(
            FpmConfig::default().header_line(),
            "# fpm threshold=0.75 quorum=3 denominator=valid-stations"
        );
    }

    #[test]
    fn grid_csv_round_trip() {
        let mut g = DetectionGrid::from_rows(
            "G07",
            &[("aaaa", vec![D, N, X, D]), ("bbbb", vec![X, N, N, D])],
            600,
            60,
        );
        g.probability[0] = 0.9;
        g.probability[1] = 0.25;
        let mut buf = Vec::new();
        write_grids(&mut buf, std::slice::from_ref(&g)).unwrap();
        let back = read_grids(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].cells, g.cells);
        assert_eq!(back[0].start_epoch, 600);
        assert_eq!(back[0].probability[1], 0.25);
        assert!(back[0].probability[3].is_nan() || back[0].probability[3] == g.probability[3]);
    }

    #[test]
    fn grid_csv_rejects_garbage() {
        let text = "satellite,station,epoch,state,probability\nG07,aaaa,0,maybe,\n";
        assert!(matches!(read_grids(text.as_bytes()), Err(FpmError::Malformed { line: 2, .. })));
        let text = "satellite,station,epoch,state,probability\nG07,aaaa,0,1,\nG07,aaaa,0,0,\n";
        assert!(read_grids(text.as_bytes()).is_err());
        assert!(read_grids("sat,x\n".as_bytes()).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = DetectionGrid> {
        (1usize..8, 1usize..30).prop_flat_map(|(stations, steps)| {
            prop::collection::vec(prop_oneof![Just(D), Just(N), Just(X)], stations * steps).prop_map(move |cells| {
                let mut g = DetectionGrid::new("G01", (0..stations).map(|i| format!("s{i}")).collect(), 0, 60, steps);
                g.cells = cells;
                g
            })
        })
    }

    proptest! {
        #[test]
        fn counts_are_exact(g in arb_grid(), all in any::<bool>()) {
            let denom = if all { Denominator::AllStations } else { Denominator::ValidStations };
            let v = votes(&g, denom);
            for t in 0..g.steps {
                prop_assert!((0.0..=1.0).contains(&v.fraction[t]));
                prop_assert!((v.fraction[t] * v.valid[t] as f64 - v.detected[t] as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn never_creates_detections(g in arb_grid(), t in 0.0f64..=1.0, q in 0usize..4) {
            let (_, _, out) = apply(&g, &cfg(t, q));
            for (a, b) in g.cells.iter().zip(&out.cells) {
                if *b == D { prop_assert_eq!(*a, D); }
                if *a != D { prop_assert_eq!(a, b); }
            }
        }

        #[test]
        fn monotone_in_threshold(g in arb_grid(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (_, _, keep_lo) = apply(&g, &cfg(lo, 1));
            let (_, _, keep_hi) = apply(&g, &cfg(hi, 1));
            for (x, y) in keep_lo.cells.iter().zip(&keep_hi.cells) {
                if *y == D { prop_assert_eq!(*x, D); }
            }
        }

        #[test]
        fn station_permutation_invariant(g in arb_grid(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..g.stations.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut p = DetectionGrid::new("G01", order.iter().map(|&i| g.stations[i].clone()).collect(), 0, 60, g.steps);
            for (new, &old) in order.iter().enumerate() {
                for t in 0..g.steps { p.set(new, t, g.get(old, t)); }
            }
            let c = FpmConfig::default();
            let (va, ma, oa) = apply(&g, &c);
            let (vb, mb, ob) = apply(&p, &c);
            prop_assert_eq!(va.fraction, vb.fraction);
            prop_assert_eq!(ma, mb);
            for (new, &old) in order.iter().enumerate() {
                prop_assert_eq!(ob.station_row(new), oa.station_row(old));
            }
        }
    }
}
