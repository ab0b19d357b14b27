//! The 17-way time calendar, one-hot pattern membership and the prototype bank.
//!
//! Ids: `3 * weekday + segment` for Monday..Friday (segment 0 = morning
//! peak, 1 = off-peak, 2 = evening peak), 15 = Saturday, 16 = Sunday or
//! public holiday.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::ndtensor::Tensor;
use crate::nn::{ParamId, ParamStore};

pub const PATTERN_COUNT: usize = 17;
pub const SATURDAY: usize = 15;
pub const SUNDAY_OR_HOLIDAY: usize = 16;

const PROTOTYPE_STD: f64 = 0.02;

/// Minutes since midnight, written as `"HH:MM"` in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClockTime(pub u32);

impl ClockTime {
    pub fn hm(hour: u32, minute: u32) -> Self {
        Self(hour * 60 + minute)
    }

    fn of(ts: &NaiveDateTime) -> Self {
        Self(ts.hour() * 60 + ts.minute())
    }
}

impl Serialize for ClockTime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:02}:{:02}", self.0 / 60, self.0 % 60))
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let t = NaiveTime::parse_from_str(&s, "%H:%M").map_err(serde::de::Error::custom)?;
        Ok(Self::hm(t.hour(), t.minute()))
    }
}

/// Half-open clock window `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockWindow {
    pub start: ClockTime,
    pub end: ClockTime,
}

impl ClockWindow {
    pub fn contains(&self, t: ClockTime) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternCalendar {
    pub morning_peak: ClockWindow,
    pub evening_peak: ClockWindow,
    /// Evaluation slice of accident-prone workday hours.
    pub complex_window: ClockWindow,
    pub holidays: BTreeSet<NaiveDate>,
    pub interval_minutes: u32,
}

impl Default for PatternCalendar {
    fn default() -> Self {
        Self {
            morning_peak: ClockWindow {
                start: ClockTime::hm(6, 0),
                end: ClockTime::hm(9, 0),
            },
            evening_peak: ClockWindow {
                start: ClockTime::hm(16, 0),
                end: ClockTime::hm(22, 0),
            },
            complex_window: ClockWindow {
                start: ClockTime::hm(16, 0),
                end: ClockTime::hm(20, 0),
            },
            holidays: BTreeSet::new(),
            interval_minutes: 5,
        }
    }
}

impl PatternCalendar {
    pub fn validate(&self) -> Result<()> {
        let (m, e) = (self.morning_peak, self.evening_peak);
        if m.start >= m.end || e.start >= e.end || m.end > e.start || e.end > ClockTime(24 * 60) {
            return Err(Error::Config(format!(
                "peak windows must be ordered and non-overlapping: {m:?}, {e:?}"
            )));
        }
        if self.interval_minutes == 0 || (24 * 60) % self.interval_minutes != 0 {
            return Err(Error::Config(format!(
                "interval of {} minutes does not divide a day",
                self.interval_minutes
            )));
        }
        Ok(())
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.holidays.contains(&date)
    }

    /// Mon-Fri and not a holiday.
    pub fn is_workday(&self, ts: &NaiveDateTime) -> bool {
        !matches!(ts.weekday(), Weekday::Sat | Weekday::Sun) && !self.is_holiday(ts.date())
    }

    pub fn assign_pattern(&self, ts: &NaiveDateTime) -> usize {
        if self.is_holiday(ts.date()) {
            return SUNDAY_OR_HOLIDAY;
        }
        match ts.weekday() {
            Weekday::Sat => SATURDAY,
            Weekday::Sun => SUNDAY_OR_HOLIDAY,
            day => {
                let clock = ClockTime::of(ts);
                let segment = if self.morning_peak.contains(clock) {
                    0
                } else if self.evening_peak.contains(clock) {
                    2
                } else {
                    1
                };
                3 * day.num_days_from_monday() as usize + segment
            }
        }
    }

    /// Workday timestamps inside the complex-time window.
    pub fn is_complex_time(&self, ts: &NaiveDateTime) -> bool {
        self.is_workday(ts) && self.complex_window.contains(ClockTime::of(ts))
    }
}

/// Holiday list: one ISO date per line, `#` comments allowed.
pub fn parse_holidays(text: &str) -> Result<BTreeSet<NaiveDate>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            NaiveDate::parse_from_str(l, "%Y-%m-%d")
                .map_err(|e| Error::Data(format!("holiday line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn load_holidays(path: &Path) -> Result<BTreeSet<NaiveDate>> {
    parse_holidays(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// `(B, 17)` matrix with a single 1 per row at the sample's pattern.
pub fn one_hot_membership(ids: &[usize]) -> Result<Tensor> {
    let mut w = Tensor::zeros(&[ids.len(), PATTERN_COUNT]);
    for (row, &id) in ids.iter().enumerate() {
        if id >= PATTERN_COUNT {
            return Err(Error::Data(format!("pattern id {id} out of range")));
        }
        w.set(&[row, id], 1.0);
    }
    Ok(w)
}

/// Learnable prototypes, one `(T, N, D)` block per pattern.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeBank {
    pub psi: ParamId,
}

/// Registers `psi ~ N(0, 0.02^2)` of shape `(17, T, N, D)`.
pub fn init_prototypes(store: &mut ParamStore, steps: usize, nodes: usize, width: usize, seed: u64) -> PrototypeBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, PROTOTYPE_STD).expect("valid std");
    let shape = [PATTERN_COUNT, steps, nodes, width];
    let data = (0..shape.iter().product()).map(|_| normal.sample(&mut rng)).collect();
    let psi = store.add("prototypes.psi", Tensor::new(shape.to_vec(), data).expect("shape"));
    PrototypeBank { psi }
}
