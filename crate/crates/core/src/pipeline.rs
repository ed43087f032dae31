//! Stages wired together through files in an output directory.
//!
//! ```text
//! synth   -> streams/*.csv, labels.csv
//! train   -> model.tidm, manifest.csv, history.csv
//! detect  -> grid.csv
//! fpm     -> grid_fpm.csv, votes.csv
//! eval    -> metrics.csv
//! ```
//!
//! `run-e2e` trains on one synthetic scenario under `train/` and detects on a
//! second, independently seeded one under `validation/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cnn::{self, load_checkpoint, save_checkpoint, softmax, CnnModel, ImageSource, Scalar, TrainHistory};
use crate::config::{Dir, Precision, RunConfig};
use crate::dataset::{self, DatasetSplit, LabeledWindow, WindowClass};
use crate::eval::{self, ReportRow};
use crate::fpm::{self, Cell, DetectionGrid};
use crate::gadf::{GadfEncoder, Window};
use crate::ingest::{self, Arc, LabelInterval, StecSeries, MINUTE_S};
use crate::seed::derive_seed;
use crate::synth::{self, ScenarioConfig};
use crate::{Error, Result};

pub const STREAMS_DIR: &str = "streams";
pub const LABELS_FILE: &str = "labels.csv";
pub const MODEL_FILE: &str = "model.tidm";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const FPM_GRID_FILE: &str = "grid_fpm.csv";
pub const VOTES_FILE: &str = "votes.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_DIR: &str = "train";
pub const VALIDATION_DIR: &str = "validation";

const DETECT_BATCH: usize = 256;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    File::create(path).map(BufWriter::new).map_err(|e| Error::file(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::file(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::file(path, e))
}

fn or_default(p: &Option<PathBuf>, out_dir: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out_dir.join(name))
}

impl RunConfig {
    pub fn data_path(&self) -> PathBuf {
        or_default(&self.data.0, &self.out_dir, STREAMS_DIR)
    }
    pub fn labels_path(&self) -> PathBuf {
        or_default(&self.labels.0, &self.out_dir, LABELS_FILE)
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        or_default(&self.checkpoint.0, &self.out_dir, MODEL_FILE)
    }
    pub fn grid_path(&self) -> PathBuf {
        or_default(&self.grid.0, &self.out_dir, GRID_FILE)
    }
}

/// Seed of the validation scenario in `run-e2e`.
pub fn validation_seed(seed: u64) -> u64 {
    derive_seed(seed, &["validation"])
}

/// Reads one stream file, or every `*.csv` in a directory in name order.
pub fn load_streams(path: &Path) -> Result<Vec<StecSeries>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::file(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = Vec::new();
    for f in &files {
        let parsed = ingest::parse_stec_csv(open(f)?).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        all.extend(parsed);
    }
    all.sort_by(|a, b| (&a.satellite_id, &a.station_id).cmp(&(&b.satellite_id, &b.station_id)));
    if let Some(w) = all.windows(2).find(|w| w[0].key() == w[1].key()) {
        return Err(Error::Data(format!("stream ({}, {}) appears in more than one file", w[0].station_id, w[0].satellite_id)));
    }
    if all.is_empty() {
        return Err(Error::Data(format!("{}: no sTEC streams found", path.display())));
    }
    Ok(all)
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelInterval>> {
    if !path.is_file() {
        return Err(Error::Data(format!("label file {} does not exist", path.display())));
    }
    ingest::parse_label_csv(open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Minute-resampled, gap-segmented arcs of every stream.
pub fn prepare_arcs(streams: &[StecSeries], max_gap: usize) -> Result<Vec<Arc>> {
    let arcs: Vec<Vec<Arc>> = streams
        .par_iter()
        .map(|s| {
            let s = if s.cadence_s < MINUTE_S {
                ingest::resample_to_minute(s)?
            } else {
                s.clone()
            };
            Ok(ingest::segment_arcs(&s, max_gap))
        })
        .collect::<Result<_>>()?;
    Ok(arcs.into_iter().flatten().collect())
}

/// Encodes windows lazily so the training set never holds every image.
pub struct WindowSource<'a> {
    pub windows: &'a [LabeledWindow],
    pub encoder: GadfEncoder,
}

impl<F: Scalar> ImageSource<F> for WindowSource<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }
    fn label(&self, i: usize) -> usize {
        self.windows[i].class.index()
    }
    fn write_image(&self, i: usize, out: &mut [F]) {
        let m = self.encoder.encode(&self.windows[i].window);
        for (o, &v) in out.iter_mut().zip(&m.data) {
            *o = F::of(v);
        }
    }
}

/// Windows, labels, balancing and the train/test partition.
pub fn build_dataset(cfg: &RunConfig, streams: &[StecSeries], labels: &[LabelInterval]) -> Result<DatasetSplit> {
    let labels = ingest::expand_wildcards(labels, streams);
    let arcs = prepare_arcs(streams, cfg.max_gap)?;
    let windows: Vec<Window> = arcs.iter().flat_map(|a| dataset::slide_windows(a, cfg.window, cfg.stride)).collect();
    let labeled = dataset::label_windows(windows, &labels);
    let balanced = dataset::balance_undersample(&labeled, cfg.minority_share, derive_seed(cfg.seed, &["balance"]))?;
    Ok(dataset::split_train_test(&balanced, cfg.test_fraction, derive_seed(cfg.seed, &["split"]))?)
}

fn train_in<F: Scalar>(cfg: &RunConfig, split: &DatasetSplit) -> Result<(CnnModel<f64>, TrainHistory)> {
    let model = cnn::init_model::<F>(cfg.cnn(), derive_seed(cfg.seed, &["init"]))?;
    let encoder = cfg.encoder();
    let train_set = WindowSource {
        windows: &split.train,
        encoder,
    };
    let test_set = WindowSource {
        windows: &split.test,
        encoder,
    };
    let (best, history) = cnn::train(model, &train_set, &test_set, &cfg.train())?;
    Ok((best.cast(), history))
}

pub fn train_model(cfg: &RunConfig, split: &DatasetSplit) -> Result<(CnnModel<f64>, TrainHistory)> {
    match cfg.precision {
        Precision::F64 => train_in::<f64>(cfg, split),
        Precision::F32 => train_in::<f32>(cfg, split),
    }
}

/// Per-window anomalous probability, one batch at a time.
fn classify_in<F: Scalar>(model: &CnnModel<f64>, encoder: GadfEncoder, windows: &[Window]) -> Result<Vec<f64>> {
    let model: CnnModel<F> = model.cast();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(DETECT_BATCH) {
        let images: Vec<F> = chunk
            .par_iter()
            .flat_map_iter(|w| encoder.encode(w).data.into_iter().map(F::of))
            .collect();
        out.extend(model.forward(&images, chunk.len())?.iter().map(|l| softmax(l)[1].f64()));
    }
    Ok(out)
}

/// Stride-1 chronological inference. Each window's class lands on its final
/// minute; one grid per satellite with every station of that satellite.
pub fn detect_grids(cfg: &RunConfig, model: &CnnModel<f64>, streams: &[StecSeries]) -> Result<Vec<DetectionGrid>> {
    if model.config.input_size != cfg.image_size {
        return Err(Error::Usage(format!(
            "image size {} does not match the checkpoint's {}",
            cfg.image_size, model.config.input_size
        )));
    }
    let arcs = prepare_arcs(streams, cfg.max_gap)?;
    let windows: Vec<Window> = arcs.iter().flat_map(|a| dataset::slide_windows(a, cfg.window, 1)).collect();
    let probs = match cfg.precision {
        Precision::F64 => classify_in::<f64>(model, cfg.encoder(), &windows)?,
        Precision::F32 => classify_in::<f32>(model, cfg.encoder(), &windows)?,
    };

    let mut stations: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in streams {
        stations.entry(&s.satellite_id).or_default().insert(&s.station_id);
    }
    let mut grids = Vec::new();
    for (sat, members) in stations {
        let mine: Vec<(&Window, f64)> = windows.iter().zip(&probs).filter(|(w, _)| w.satellite_id == sat).map(|(w, &p)| (w, p)).collect();
        let Some(first) = mine.iter().map(|(w, _)| w.last_epoch()).min() else {
            eprintln!("detect: satellite {sat} has no complete window, skipped");
            continue;
        };
        let last = mine.iter().map(|(w, _)| w.last_epoch()).max().expect("non-empty");
        let cadence = mine.iter().map(|(w, _)| w.cadence_s).min().expect("non-empty");
        let steps = ((last - first) / cadence + 1) as usize;
        let names: Vec<String> = members.iter().map(|s| s.to_string()).collect();
        let mut grid = DetectionGrid::new(sat, names.clone(), first, cadence, steps);
        for (w, p) in mine {
            let s = names.iter().position(|n| *n == w.station_id).expect("station listed");
            let Some(t) = grid.index_of(w.last_epoch()) else {
                continue;
            };
            grid.set(s, t, if p > 0.5 { Cell::Detected } else { Cell::Normal });
            grid.probability[s * steps + t] = p;
        }
        grids.push(grid);
    }
    Ok(grids)
}

pub fn read_grid_file(path: &Path) -> Result<Vec<DetectionGrid>> {
    fpm::read_grids(open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_grid_file(path: &Path, grids: &[DetectionGrid]) -> Result<()> {
    let mut w = create(path)?;
    fpm::write_grids(&mut w, grids)?;
    finish(w, path)
}

/// Pre-FPM per-stream and post-FPM per-satellite scores.
pub fn evaluate(raw: &[DetectionGrid], filtered: &[DetectionGrid], labels: &[LabelInterval], window: usize) -> Result<Vec<ReportRow>> {
    Ok(vec![
        ReportRow::new("validation", eval::evaluate_streams(raw, labels, window)?),
        ReportRow::new("validation (false positive mitigation)", eval::evaluate_satellites(filtered, labels, window)?),
    ])
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<synth::Scenario> {
    let scenario_cfg: ScenarioConfig = cfg.scenario(cfg.seed);
    let scenario = synth::gen_scenario(&scenario_cfg)?;
    let dir = cfg.out_dir.join(STREAMS_DIR);
    for s in &scenario.streams {
        let path = dir.join(format!("{}_{}.csv", s.station_id, s.satellite_id));
        let mut w = create(&path)?;
        ingest::write_stec_csv(&mut w, std::slice::from_ref(s))?;
        finish(w, &path)?;
    }
    let path = cfg.out_dir.join(LABELS_FILE);
    let mut w = create(&path)?;
    ingest::write_label_csv(&mut w, &scenario.truth)?;
    finish(w, &path)?;
    println!(
        "synth: {} streams ({} stations x {} satellites), {} labelled intervals -> {}",
        scenario.streams.len(),
        scenario_cfg.stations,
        scenario_cfg.satellites,
        scenario.truth.len(),
        cfg.out_dir.display()
    );
    Ok(scenario)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(CnnModel<f64>, TrainHistory)> {
    let labels = load_labels(&cfg.labels_path())?;
    let streams = load_streams(&cfg.data_path())?;
    let split = build_dataset(cfg, &streams, &labels)?;
    let count = |set: &[LabeledWindow], c| set.iter().filter(|w| w.class == c).count();
    println!(
        "train: {} training windows ({} anomalous), {} test windows ({} anomalous)",
        split.train.len(),
        count(&split.train, WindowClass::Anomalous),
        split.test.len(),
        count(&split.test, WindowClass::Anomalous)
    );

    let path = cfg.out_dir.join(MANIFEST_FILE);
    let mut w = create(&path)?;
    dataset::write_manifest(&mut w, &split)?;
    finish(w, &path)?;

    let (model, history) = train_model(cfg, &split)?;

    let path = cfg.out_dir.join(HISTORY_FILE);
    let mut w = create(&path)?;
    cnn::write_history_csv(&mut w, &history).map_err(|e| Error::file(&path, e))?;
    finish(w, &path)?;
    let path = cfg.checkpoint_path();
    ensure_parent(&path)?;
    save_checkpoint(&model, &path)?;

    if let Some(best) = history.best() {
        println!(
            "train: best epoch {} of {}, test loss {:.4}, precision {:.3}, recall {:.3}, F1 {:.3}",
            best.epoch + 1,
            history.epochs.len(),
            best.test_loss,
            best.precision,
            best.recall,
            best.f1
        );
    }
    Ok((model, history))
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<Vec<DetectionGrid>> {
    let model: CnnModel<f64> = load_checkpoint(&cfg.checkpoint_path())?;
    let streams = load_streams(&cfg.data_path())?;
    let grids = detect_grids(cfg, &model, &streams)?;
    write_grid_file(&cfg.out_dir.join(GRID_FILE), &grids)?;
    let cells: usize = grids.iter().map(|g| g.cells.iter().filter(|&&c| c != Cell::NoData).count()).sum();
    let detected: usize = grids.iter().map(DetectionGrid::detected_count).sum();
    println!("detect: {} satellites, {cells} classified station-minutes, {detected} detections", grids.len());
    Ok(grids)
}

pub fn cmd_fpm(cfg: &RunConfig) -> Result<Vec<DetectionGrid>> {
    let fcfg = cfg.fpm();
    let grids = read_grid_file(&cfg.grid_path())?;
    let mut filtered = Vec::with_capacity(grids.len());
    let mut series = Vec::with_capacity(grids.len());
    for g in &grids {
        let (v, mask, f) = fpm::apply(g, &fcfg);
        series.push((v, mask));
        filtered.push(f);
    }
    write_grid_file(&cfg.out_dir.join(FPM_GRID_FILE), &filtered)?;
    let path = cfg.out_dir.join(VOTES_FILE);
    let mut w = create(&path)?;
    fpm::write_votes(&mut w, &fcfg, &series)?;
    finish(w, &path)?;
    let alerts: usize = series.iter().map(|(_, m)| m.iter().filter(|&&a| a).count()).sum();
    let kept: usize = filtered.iter().map(DetectionGrid::detected_count).sum();
    let raw: usize = grids.iter().map(DetectionGrid::detected_count).sum();
    println!("{}", fcfg.header_line());
    println!("fpm: {alerts} alert minutes, {kept} of {raw} detections kept");
    Ok(filtered)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let labels = load_labels(&cfg.labels_path())?;
    let raw = read_grid_file(&cfg.grid_path())?;
    let fpm_path = cfg.out_dir.join(FPM_GRID_FILE);
    let filtered = if fpm_path.is_file() {
        read_grid_file(&fpm_path)?
    } else {
        raw.iter().map(|g| fpm::apply(g, &cfg.fpm()).2).collect()
    };
    let rows = evaluate(&raw, &filtered, &labels, cfg.window)?;
    let path = cfg.out_dir.join(METRICS_FILE);
    let mut w = create(&path)?;
    eval::write_metrics_csv(&mut w, &rows)?;
    finish(w, &path)?;
    print!("{}", eval::format_table(&rows));
    Ok(rows)
}

/// Configurations of the two halves of `run-e2e`.
pub fn e2e_configs(cfg: &RunConfig) -> (RunConfig, RunConfig) {
    let mut train = cfg.clone();
    train.out_dir = Dir(cfg.out_dir.join(TRAIN_DIR));
    train.data.0 = None;
    train.labels.0 = None;
    train.checkpoint.0 = None;
    let mut validation = cfg.clone();
    validation.out_dir = Dir(cfg.out_dir.join(VALIDATION_DIR));
    validation.seed = validation_seed(cfg.seed);
    validation.data.0 = None;
    validation.labels.0 = None;
    validation.grid.0 = None;
    validation.checkpoint.0 = Some(train.checkpoint_path());
    (train, validation)
}

pub fn run_e2e(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let (train, validation) = e2e_configs(cfg);
    cmd_synth(&train)?;
    cmd_train(&train)?;
    cmd_synth(&validation)?;
    cmd_detect(&validation)?;
    cmd_fpm(&validation)?;
    cmd_eval(&validation)
}
