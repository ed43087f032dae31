//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Keys not listed in
//! [`RunConfig::entries`] are rejected so typos do not pass silently.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cnn::{CnnConfig, ConvBlockConfig, TrainConfig, CLASSES};
use crate::fpm::{Denominator, FpmConfig};
use crate::gadf::{GadfEncoder, RescaleScope};
use crate::synth::{EventLayout, ScenarioConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Path-valued keys hold `None` when empty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OptPath(pub Option<PathBuf>);

/// A path key that always has a value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dir(pub PathBuf);

impl std::ops::Deref for Dir {
    type Target = Path;
    fn deref(&self) -> &Path {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channels(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: OptPath,
    pub labels: OptPath,
    pub out_dir: Dir,
    pub checkpoint: OptPath,
    pub grid: OptPath,

    pub window: usize,
    pub stride: usize,
    pub image_size: usize,
    pub rescale: RescaleScope,
    pub max_gap: usize,
    pub test_fraction: f64,
    pub minority_share: f64,

    pub blocks: Channels,
    pub kernel: usize,
    pub dense_width: usize,
    pub precision: Precision,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub min_delta: f64,

    pub threshold: f64,
    pub quorum: usize,
    pub denominator: Denominator,

    pub seed: u64,

    pub stations: usize,
    pub satellites: usize,
    pub duration_min: i64,
    pub cadence_s: i64,
    pub noise_std: f64,
    pub trend_amplitude: f64,
    pub trend_period_min: f64,
    pub events: usize,
    pub snr: f64,
    pub period_min: f64,
    pub event_duration_min: i64,
    pub delay_spread_min: i64,
    pub affected_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let fpm = FpmConfig::default();
        let scenario = ScenarioConfig::default();
        let layout = EventLayout::default();
        Self {
            data: OptPath::default(),
            labels: OptPath::default(),
            out_dir: Dir(PathBuf::from("out")),
            checkpoint: OptPath::default(),
            grid: OptPath::default(),
            window: crate::dataset::DEFAULT_WINDOW,
            stride: 1,
            image_size: 64,
            rescale: RescaleScope::Window,
            max_gap: 5,
            test_fraction: 0.2,
            minority_share: crate::dataset::DEFAULT_MINORITY_SHARE,
            blocks: Channels(vec![8, 16, 32]),
            kernel: 3,
            dense_width: 32,
            precision: Precision::F64,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            plateau_patience: train.plateau_patience,
            plateau_factor: train.plateau_factor,
            early_stop_patience: train.early_stop_patience,
            max_epochs: train.max_epochs,
            min_delta: train.min_delta,
            threshold: fpm.threshold,
            quorum: fpm.min_valid,
            denominator: fpm.denominator,
            seed: 0,
            stations: scenario.stations,
            satellites: scenario.satellites,
            duration_min: scenario.duration_min,
            cadence_s: scenario.cadence_s,
            noise_std: scenario.noise_std,
            trend_amplitude: scenario.trend_amplitude,
            trend_period_min: scenario.trend_period_min,
            events: layout.count,
            snr: layout.snr,
            period_min: layout.period_min,
            event_duration_min: layout.duration_min,
            delay_spread_min: layout.delay_spread_min,
            affected_fraction: layout.affected_fraction,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident),* $(,)?) => {
        impl RunConfig {
            /// Every key with its current value, in file order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.to_string())),*]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$field = value
                            .parse()
                            .map_err(|e| Error::Usage(format!("{key} = {value:?}: {e}")))?
                    })*
                    other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }
        }
    };
}

keys! {
    "data" => data,
    "labels" => labels,
    "out_dir" => out_dir,
    "checkpoint" => checkpoint,
    "grid" => grid,
    "window" => window,
    "stride" => stride,
    "image_size" => image_size,
    "rescale" => rescale,
    "max_gap" => max_gap,
    "test_fraction" => test_fraction,
    "minority_share" => minority_share,
    "blocks" => blocks,
    "kernel" => kernel,
    "dense_width" => dense_width,
    "precision" => precision,
    "batch_size" => batch_size,
    "learning_rate" => learning_rate,
    "plateau_patience" => plateau_patience,
    "plateau_factor" => plateau_factor,
    "early_stop_patience" => early_stop_patience,
    "max_epochs" => max_epochs,
    "min_delta" => min_delta,
    "threshold" => threshold,
    "quorum" => quorum,
    "denominator" => denominator,
    "seed" => seed,
    "stations" => stations,
    "satellites" => satellites,
    "duration_min" => duration_min,
    "cadence_s" => cadence_s,
    "noise_std" => noise_std,
    "trend_amplitude" => trend_amplitude,
    "trend_period_min" => trend_period_min,
    "events" => events,
    "snr" => snr,
    "period_min" => period_min,
    "event_duration_min" => event_duration_min,
    "delay_spread_min" => delay_spread_min,
    "affected_fraction" => affected_fraction,
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        self.apply_text(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    /// The configuration as a file that [`RunConfig::apply_text`] reads back.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.window < 2 {
            return bad(format!("window must be at least 2 samples, got {}", self.window));
        }
        if self.stride == 0 || self.image_size == 0 {
            return bad("stride and image size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        self.cnn().validate()?;
        self.train().validate()?;
        Ok(())
    }

    pub fn cnn(&self) -> CnnConfig {
        CnnConfig {
            input_size: self.image_size,
            in_channels: 1,
            blocks: self
                .blocks
                .0
                .iter()
                .map(|&c| ConvBlockConfig {
                    kernel: self.kernel,
                    ..ConvBlockConfig::new(c)
                })
                .collect(),
            dense_width: self.dense_width,
            classes: CLASSES,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            min_delta: self.min_delta,
            seed: crate::seed::derive_seed(self.seed, &["train"]),
        }
    }

    pub fn fpm(&self) -> FpmConfig {
        FpmConfig {
            threshold: self.threshold,
            min_valid: self.quorum,
            denominator: self.denominator,
        }
    }

    pub fn encoder(&self) -> GadfEncoder {
        GadfEncoder {
            image_size: self.image_size,
            scope: self.rescale,
        }
    }

    pub fn scenario(&self, seed: u64) -> ScenarioConfig {
        let mut s = ScenarioConfig {
            stations: self.stations,
            satellites: self.satellites,
            duration_min: self.duration_min,
            cadence_s: self.cadence_s,
            noise_std: self.noise_std,
            trend_amplitude: self.trend_amplitude,
            trend_period_min: self.trend_period_min,
            seed,
            ..ScenarioConfig::default()
        };
        s.layout_events(&EventLayout {
            count: self.events,
            duration_min: self.event_duration_min,
            period_min: self.period_min,
            snr: self.snr,
            delay_spread_min: self.delay_spread_min,
            affected_fraction: self.affected_fraction,
        });
        s
    }
}

impl fmt::Display for OptPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(p) => write!(f, "{}", p.display()),
            None => Ok(()),
        }
    }
}

impl FromStr for OptPath {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(OptPath((!s.is_empty()).then(|| PathBuf::from(s))))
    }
}

impl fmt::Display for Dir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

impl FromStr for Dir {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err("must not be empty".into());
        }
        Ok(Dir(PathBuf::from(s)))
    }
}

impl fmt::Display for Channels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Channels {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',').map(|c| c.trim().parse()).collect::<Result<_, _>>().map(Channels)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32),
            _ => Err("expected f64 or f32".into()),
        }
    }
}

impl fmt::Display for RescaleScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RescaleScope::Window => "window",
            RescaleScope::Arc => "arc",
        })
    }
}

impl FromStr for RescaleScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "window" => Ok(RescaleScope::Window),
            "arc" => Ok(RescaleScope::Arc),
            _ => Err("expected window or arc".into()),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::ValidStations => "valid-stations",
            Denominator::AllStations => "all-stations",
        })
    }
}

impl FromStr for Denominator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valid-stations" => Ok(Denominator::ValidStations),
            "all-stations" => Ok(Denominator::AllStations),
            _ => Err("expected valid-stations or all-stations".into()),
        }
    }
}
