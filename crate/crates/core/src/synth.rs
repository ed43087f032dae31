//! Synthetic multi-station sTEC-rate scenarios with injected TID wave packets.
//!
//! Background streams are a slow sinusoidal trend plus white Gaussian noise.
//! A TID is a Gaussian-enveloped sinusoid with a 10-30 minute period that
//! reaches each affected station after its own propagation delay, so the
//! truth labels of one event are staggered across the network.

use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::DEFAULT_WINDOW;
use crate::ingest::{LabelInterval, StecSample, StecSeries};
use crate::seed::derive_seed;

pub const MIN_TID_PERIOD_MIN: f64 = 10.0;
pub const MAX_TID_PERIOD_MIN: f64 = 30.0;
pub const MIN_TREND_PERIOD_MIN: f64 = 240.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("TID span [{start}, {end}) is outside the series span [{first}, {last_end})")]
    EventOutsideSpan {
        start: i64,
        end: i64,
        first: i64,
        last_end: i64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TidEventConfig {
    pub satellite: usize,
    /// Minutes from scenario start, before propagation delay.
    pub onset_min: i64,
    pub duration_min: i64,
    pub period_min: f64,
    /// Peak amplitude in TECU/s.
    pub amplitude: f64,
    /// Station delays are drawn uniformly from `0..=delay_spread_min`.
    pub delay_spread_min: i64,
    pub affected_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub stations: usize,
    pub satellites: usize,
    pub duration_min: i64,
    pub cadence_s: i64,
    pub start_epoch: i64,
    pub noise_std: f64,
    pub trend_amplitude: f64,
    pub trend_period_min: f64,
    pub events: Vec<TidEventConfig>,
    pub seed: u64,
}

/// Shape of the injected events when they are laid out automatically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventLayout {
    pub count: usize,
    pub duration_min: i64,
    pub period_min: f64,
    /// Packet amplitude as a multiple of the background noise std.
    pub snr: f64,
    pub delay_spread_min: i64,
    pub affected_fraction: f64,
}

impl Default for EventLayout {
    fn default() -> Self {
        Self {
            count: 2,
            duration_min: 120,
            period_min: 20.0,
            snr: 5.0,
            delay_spread_min: 20,
            affected_fraction: 1.0,
        }
    }
}

impl Default for ScenarioConfig {
    /// 8 stations x 2 satellites x 24 h at 1-minute cadence with two TIDs at SNR 5.
    fn default() -> Self {
        let mut cfg = Self {
            stations: 8,
            satellites: 2,
            duration_min: 24 * 60,
            cadence_s: 60,
            start_epoch: 0,
            noise_std: 0.002,
            trend_amplitude: 0.004,
            trend_period_min: 360.0,
            events: Vec::new(),
            seed: 0,
        };
        cfg.layout_events(&EventLayout::default());
        cfg
    }
}

impl ScenarioConfig {
    /// Replaces the event list by `layout.count` events spread evenly in time
    /// and round-robin over satellites.
    pub fn layout_events(&mut self, layout: &EventLayout) {
        let n = layout.count as i64;
        self.events = (0..n)
            .map(|k| {
                let centre = self.duration_min * (k + 1) / (n + 1);
                TidEventConfig {
                    satellite: k as usize % self.satellites.max(1),
                    onset_min: (centre - (layout.duration_min + layout.delay_spread_min) / 2).max(0),
                    duration_min: layout.duration_min,
                    period_min: layout.period_min,
                    amplitude: layout.snr * self.noise_std,
                    delay_spread_min: layout.delay_spread_min,
                    affected_fraction: layout.affected_fraction,
                }
            })
            .collect();
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.stations == 0 || self.satellites == 0 {
            return bad("at least one station and one satellite are required".into());
        }
        if self.cadence_s <= 0 || 60 % self.cadence_s != 0 {
            return bad(format!("cadence {} s must divide 60 s", self.cadence_s));
        }
        if self.duration_min < DEFAULT_WINDOW as i64 {
            return bad(format!("duration {} min is shorter than one {DEFAULT_WINDOW}-minute window", self.duration_min));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {} must be non-negative", self.noise_std));
        }
        if !(self.trend_period_min >= MIN_TREND_PERIOD_MIN) {
            return bad(format!("trend period {} min is below {MIN_TREND_PERIOD_MIN} min", self.trend_period_min));
        }
        for (k, e) in self.events.iter().enumerate() {
            if !(MIN_TID_PERIOD_MIN..=MAX_TID_PERIOD_MIN).contains(&e.period_min) {
                return bad(format!(
                    "event {k}: period {} min outside [{MIN_TID_PERIOD_MIN}, {MAX_TID_PERIOD_MIN}]",
                    e.period_min
                ));
            }
            if !(e.affected_fraction > 0.0 && e.affected_fraction <= 1.0) {
                return bad(format!("event {k}: affected fraction {} outside (0, 1]", e.affected_fraction));
            }
            if e.satellite >= self.satellites {
                return bad(format!("event {k}: satellite index {} out of range", e.satellite));
            }
            if e.duration_min <= 0 || e.delay_spread_min < 0 || e.onset_min < 0 {
                return bad(format!("event {k}: onset, duration and delay must be non-negative"));
            }
            if e.onset_min + e.delay_spread_min + e.duration_min > self.duration_min {
                return bad(format!("event {k}: extends past the end of the scenario"));
            }
            if !e.amplitude.is_finite() {
                return bad(format!("event {k}: amplitude is not finite"));
            }
        }
        Ok(())
    }

    pub fn station_id(i: usize) -> String {
        format!("st{:02}", i + 1)
    }

    pub fn satellite_id(j: usize) -> String {
        format!("G{:02}", j + 1)
    }

    pub fn samples_per_stream(&self) -> usize {
        (self.duration_min * 60 / self.cadence_s) as usize
    }
}

/// Slow sinusoid plus white noise for one stream, seeded from the master
/// seed and the stream ids.
pub fn gen_background(cfg: &ScenarioConfig, station: usize, satellite: usize) -> StecSeries {
    let station_id = ScenarioConfig::station_id(station);
    let satellite_id = ScenarioConfig::satellite_id(satellite);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["background", &station_id, &satellite_id]));
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let omega = 2.0 * PI / (cfg.trend_period_min * 60.0);

    let samples = (0..cfg.samples_per_stream())
        .map(|k| {
            let dt = k as i64 * cfg.cadence_s;
            let trend = cfg.trend_amplitude * (omega * dt as f64 + phase).sin();
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            StecSample {
                epoch: cfg.start_epoch + dt,
                value: trend + eps,
            }
        })
        .collect();
    StecSeries::new(station_id, satellite_id, cfg.cadence_s, samples)
}

/// One station's copy of a TID, already shifted by its propagation delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TidPacket {
    pub onset_epoch: i64,
    pub duration_s: i64,
    pub period_s: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl TidPacket {
    pub fn end_epoch(&self) -> i64 {
        self.onset_epoch + self.duration_s
    }

    /// `A exp(-((tau - tau0) / sigma)^2) sin(2 pi tau / period + phase)` over
    /// the span, with `tau` measured from onset, `tau0` the span centre and
    /// `sigma` the span length, so the envelope is still `exp(-1/4)` at the
    /// edges. Zero outside the span.
    pub fn value_at(&self, epoch: i64) -> f64 {
        if epoch < self.onset_epoch || epoch >= self.end_epoch() {
            return 0.0;
        }
        let tau = (epoch - self.onset_epoch) as f64;
        let span = self.duration_s as f64;
        let envelope = (-((tau - span / 2.0) / span).powi(2)).exp();
        self.amplitude * envelope * (2.0 * PI * tau / self.period_s + self.phase).sin()
    }
}

/// Adds the packet to the series and returns the matching truth interval.
pub fn inject_tid(series: &StecSeries, packet: &TidPacket) -> Result<(StecSeries, LabelInterval), SynthError> {
    let first = series.samples.first().map_or(0, |s| s.epoch);
    let last_end = series.samples.last().map_or(0, |s| s.epoch + series.cadence_s);
    if series.is_empty() || packet.onset_epoch < first || packet.end_epoch() > last_end {
        return Err(SynthError::EventOutsideSpan {
            start: packet.onset_epoch,
            end: packet.end_epoch(),
            first,
            last_end,
        });
    }
    let mut out = series.clone();
    for s in &mut out.samples {
        s.value += packet.value_at(s.epoch);
    }
    let label = LabelInterval {
        satellite_id: series.satellite_id.clone(),
        station_id: Some(series.station_id.clone()),
        start_epoch: packet.onset_epoch,
        end_epoch: packet.end_epoch(),
    };
    Ok((out, label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Satellite-major, then station order.
    pub streams: Vec<StecSeries>,
    pub truth: Vec<LabelInterval>,
}

pub fn gen_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let mut streams: Vec<StecSeries> = (0..cfg.satellites)
        .flat_map(|j| (0..cfg.stations).map(move |i| (i, j)))
        .map(|(i, j)| gen_background(cfg, i, j))
        .collect();

    let mut truth = Vec::new();
    for (k, event) in cfg.events.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["event", &k.to_string()]));
        let n_affected = ((event.affected_fraction * cfg.stations as f64).round() as usize).clamp(1, cfg.stations);
        let all: Vec<usize> = (0..cfg.stations).collect();
        let mut affected: Vec<usize> = all.choose_multiple(&mut rng, n_affected).copied().collect();
        affected.sort_unstable();
        for station in affected {
            let delay = rng.random_range(0..=event.delay_spread_min);
            let phase = rng.random_range(0.0..2.0 * PI);
            let packet = TidPacket {
                onset_epoch: cfg.start_epoch + (event.onset_min + delay) * 60,
                duration_s: event.duration_min * 60,
                period_s: event.period_min * 60.0,
                amplitude: event.amplitude,
                phase,
            };
            let idx = event.satellite * cfg.stations + station;
            let (injected, label) = inject_tid(&streams[idx], &packet)?;
            streams[idx] = injected;
            truth.push(label);
        }
    }
    Ok(Scenario { streams, truth })
}
