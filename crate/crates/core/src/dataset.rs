//! Windowing, window labeling, class balancing and train/test splitting.

use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gadf::{min_max, Window};
use crate::ingest::{Arc, LabelInterval};

pub const DEFAULT_WINDOW: usize = 60;
pub const DEFAULT_MINORITY_SHARE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no anomalous windows to balance against")]
    NoAnomalous,
    #[error("minority share must lie in (0, 1], got {0}")]
    BadShare(f64),
    #[error("test fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("class {0:?} has {1} members; at least 2 are needed to split")]
    ClassTooSmall(WindowClass, usize),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: u64, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WindowClass {
    Normal,
    Anomalous,
}

impl WindowClass {
    pub fn index(self) -> usize {
        match self {
            Self::Normal => 0,
            Self::Anomalous => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Self::Normal
        } else {
            Self::Anomalous
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Anomalous => "anomalous",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: Window,
    pub class: WindowClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
    pub seed: u64,
}

/// Windows of `w` consecutive arc samples starting every `stride` samples.
/// An arc shorter than `w` yields nothing.
pub fn slide_windows(arc: &Arc, w: usize, stride: usize) -> Vec<Window> {
    assert!(w >= 1 && stride >= 1, "window and stride must be positive");
    if arc.len() < w {
        return Vec::new();
    }
    let arc_range = min_max(&arc.values());
    (0..=arc.len() - w)
        .step_by(stride)
        .map(|start| {
            let slice = &arc.samples[start..start + w];
            Window {
                station_id: arc.station_id.clone(),
                satellite_id: arc.satellite_id.clone(),
                arc_offset: start,
                start_epoch: slice[0].epoch,
                cadence_s: arc.cadence_s,
                values: slice.iter().map(|s| s.value).collect(),
                arc_range,
                has_interpolated: slice.iter().any(|s| s.interpolated),
            }
        })
        .collect()
}

/// Anomalous iff the half-open span `[start, start + w * cadence)` overlaps
/// any of the given intervals.
pub fn label_window(win: &Window, labels: &[LabelInterval]) -> WindowClass {
    let (start, end) = (win.start_epoch, win.end_epoch());
    let hit = labels
        .iter()
        .filter(|l| l.applies_to(&win.station_id, &win.satellite_id))
        .any(|l| start < l.end_epoch && l.start_epoch < end);
    if hit {
        WindowClass::Anomalous
    } else {
        WindowClass::Normal
    }
}

pub fn label_windows(windows: Vec<Window>, labels: &[LabelInterval]) -> Vec<LabeledWindow> {
    windows
        .into_iter()
        .map(|window| {
            let class = label_window(&window, labels);
            LabeledWindow { window, class }
        })
        .collect()
}

/// Number of normal windows retained for `anomalous` minority windows.
pub fn balanced_normal_target(anomalous: usize, minority_share: f64) -> usize {
    (anomalous as f64 / minority_share).round() as usize
}

/// Keeps every anomalous window and a uniform sample (without replacement)
/// of normal windows, sized so anomalous/normal equals `minority_share`.
/// Input order is preserved in the output.
pub fn balance_undersample(
    windows: &[LabeledWindow],
    minority_share: f64,
    seed: u64,
) -> Result<Vec<LabeledWindow>, DatasetError> {
    if !(minority_share > 0.0 && minority_share <= 1.0) {
        return Err(DatasetError::BadShare(minority_share));
    }
    let (anomalous, normal): (Vec<usize>, Vec<usize>) =
        (0..windows.len()).partition(|&i| windows[i].class == WindowClass::Anomalous);
    if anomalous.is_empty() {
        return Err(DatasetError::NoAnomalous);
    }
    let target = balanced_normal_target(anomalous.len(), minority_share);
    let mut keep = vec![false; windows.len()];
    for &i in &anomalous {
        keep[i] = true;
    }
    if target >= normal.len() {
        for &i in &normal {
            keep[i] = true;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &i in normal.choose_multiple(&mut rng, target) {
            keep[i] = true;
        }
    }
    Ok(windows
        .iter()
        .zip(keep)
        .filter(|&(_, k)| k)
        .map(|(w, _)| w.clone())
        .collect())
}

/// Stratified random partition: each class contributes
/// `round(fraction * class_size)` windows to the test set.
pub fn split_train_test(
    windows: &[LabeledWindow],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::BadFraction(test_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; windows.len()];
    for class in [WindowClass::Normal, WindowClass::Anomalous] {
        let mut members: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].class == class).collect();
        if members.len() < 2 {
            return Err(DatasetError::ClassTooSmall(class, members.len()));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        for &i in &members[..n_test] {
            in_test[i] = true;
        }
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (w, t) in windows.iter().zip(in_test) {
        if t {
            split.test.push(w.clone());
        } else {
            split.train.push(w.clone());
        }
    }
    Ok(split)
}

pub const MANIFEST_HEADER: [&str; 5] = ["station", "satellite", "window_start_epoch", "class", "split"];

/// One row per retained window: `station,satellite,window_start_epoch,class,split`.
pub fn write_manifest<W: Write>(sink: W, split: &DatasetSplit) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(MANIFEST_HEADER)?;
    for (name, part) in [("train", &split.train), ("test", &split.test)] {
        for lw in part {
            w.write_record([
                lw.window.station_id.as_str(),
                lw.window.satellite_id.as_str(),
                &lw.window.start_epoch.to_string(),
                lw.class.as_str(),
                name,
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub station_id: String,
    pub satellite_id: String,
    pub window_start_epoch: i64,
    pub class: WindowClass,
    pub test: bool,
}

pub fn read_manifest<R: Read>(source: R) -> Result<Vec<ManifestRow>, DatasetError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: &str| DatasetError::Manifest {
            line,
            reason: reason.to_string(),
        };
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(bad("wrong field count"));
        }
        let class = match &rec[3] {
            "normal" => WindowClass::Normal,
            "anomalous" => WindowClass::Anomalous,
            _ => return Err(bad("unknown class")),
        };
        let test = match &rec[4] {
            "train" => false,
            "test" => true,
            _ => return Err(bad("unknown split")),
        };
        rows.push(ManifestRow {
            station_id: rec[0].to_string(),
            satellite_id: rec[1].to_string(),
            window_start_epoch: rec[2].parse().map_err(|_| bad("bad epoch"))?,
            class,
            test,
        });
    }
    Ok(rows)
}
