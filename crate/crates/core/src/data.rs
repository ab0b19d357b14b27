//! Synthetic traffic with planted incidents, dataset files, z-score
//! normalisation, chronological splits and sliding windows.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::graphs::SensorGraph;
use crate::ndtensor::Tensor;
use crate::patterns::{load_holidays, PatternCalendar};

const MINUTES_PER_DAY: u32 = 24 * 60;

/// Published sensor and edge counts of the benchmark datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnownDataset {
    pub name: &'static str,
    pub sensors: usize,
    pub edges: usize,
    pub interval_minutes: u32,
}

pub const KNOWN_DATASETS: [KnownDataset; 3] = [
    KnownDataset {
        name: "PEMS03",
        sensors: 358,
        edges: 547,
        interval_minutes: 5,
    },
    KnownDataset {
        name: "PEMS08",
        sensors: 170,
        edges: 277,
        interval_minutes: 5,
    },
    KnownDataset {
        name: "Melbourne",
        sensors: 182,
        edges: 398,
        interval_minutes: 15,
    },
];

pub fn known_dataset(name: &str) -> Option<&'static KnownDataset> {
    KNOWN_DATASETS.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}

pub fn steps_per_day(interval_minutes: u32) -> Result<usize> {
    if interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(interval_minutes) {
        return Err(Error::Config(format!(
            "interval of {interval_minutes} minutes does not divide a day"
        )));
    }
    Ok((MINUTES_PER_DAY / interval_minutes) as usize)
}

/// On-disk description of a dataset; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sensor_count: usize,
    pub interval_minutes: u32,
    pub start_timestamp: NaiveDateTime,
    pub reading_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub readings_path: PathBuf,
    pub edges_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holidays_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incidents_path: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        steps_per_day(self.interval_minutes)?;
        if self.sensor_count == 0 || self.reading_channels == 0 {
            return Err(Error::Data("manifest needs sensors and channels".into()));
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> Result<usize> {
        steps_per_day(self.interval_minutes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// A planted or recorded traffic incident.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub node: usize,
    pub start_step: usize,
    pub duration_steps: usize,
    pub magnitude: f64,
}

impl Incident {
    pub fn steps(&self) -> Range<usize> {
        self.start_step..self.start_step + self.duration_steps
    }

    pub fn overlaps(&self, window: &Range<usize>) -> bool {
        let s = self.steps();
        s.start < window.end && window.start < s.end
    }
}

/// Readings with their graph, clock and incident log.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `(steps, N, C)`.
    pub readings: Tensor,
    pub graph: SensorGraph,
    pub incidents: Vec<Incident>,
    pub holidays: BTreeSet<NaiveDate>,
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.readings.shape()[0]
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.manifest.start_timestamp + Duration::minutes(step as i64 * self.manifest.interval_minutes as i64)
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        (0..self.steps()).map(|s| self.timestamp(s)).collect()
    }

    /// Calendar with this dataset's interval and holidays.
    pub fn calendar(&self, base: &PatternCalendar) -> PatternCalendar {
        let mut cal = base.clone();
        cal.interval_minutes = self.manifest.interval_minutes;
        cal.holidays.extend(self.holidays.iter().copied());
        cal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GraphKind {
    Path,
    Grid,
    Random { edge_probability: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub nodes: usize,
    pub days: usize,
    pub interval_minutes: u32,
    pub start: NaiveDateTime,
    pub graph: GraphKind,
    /// Mean flow; each node draws its level from `[0.7, 1.3]` times this.
    pub base_level: f64,
    /// Relative daily amplitude; nodes jitter it by up to 20%.
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    /// Per-node phases are uniform in `[-phase_jitter, phase_jitter]` radians.
    pub phase_jitter: f64,
    pub noise_std: f64,
    /// Expected incidents per node and day.
    pub incident_rate: f64,
    /// Fractional flow drop at the incident node.
    pub incident_magnitude: f64,
    pub incident_duration: usize,
    pub holidays: Vec<NaiveDate>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            nodes: 8,
            days: 28,
            interval_minutes: 15,
            start: NaiveDate::from_ymd_opt(2024, 1, 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("valid date"),
            graph: GraphKind::Grid,
            base_level: 200.0,
            daily_amplitude: 0.6,
            weekly_amplitude: 0.05,
            phase_jitter: 0.3,
            noise_std: 5.0,
            incident_rate: 0.05,
            incident_magnitude: 0.5,
            incident_duration: 4,
            holidays: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        steps_per_day(self.interval_minutes)?;
        let bad = |what: &str| Err(Error::Config(format!("synthetic {what}")));
        if self.nodes == 0 || self.days == 0 {
            return bad("needs nodes and days");
        }
        if !(self.base_level > 0.0 && self.base_level.is_finite()) {
            return bad("base_level must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be nonnegative");
        }
        if !(self.incident_rate >= 0.0 && self.incident_rate.is_finite()) {
            return bad("incident_rate must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.incident_magnitude) {
            return bad("incident_magnitude must lie in [0, 1]");
        }
        for a in [self.daily_amplitude, self.weekly_amplitude, self.phase_jitter] {
            if !(a >= 0.0 && a.is_finite()) {
                return bad("amplitudes and jitter must be nonnegative");
            }
        }
        if let GraphKind::Random { edge_probability } = self.graph {
            if !(0.0..=1.0).contains(&edge_probability) {
                return bad("edge_probability must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Multiplies flows by `1 - m` at each incident node and `1 - m/2` at its
/// one-hop neighbours over the incident's steps.
pub fn apply_incidents(readings: &mut Tensor, graph: &SensorGraph, incidents: &[Incident]) -> Result<()> {
    let s = readings.shape().to_vec();
    let [steps, n, c] = s[..] else {
        return Err(Error::Data(format!("readings must be (steps, N, C), got {s:?}")));
    };
    for inc in incidents {
        if inc.node >= n {
            return Err(Error::Data(format!("incident node {} out of range", inc.node)));
        }
        let touched = std::iter::once((inc.node, 1.0 - inc.magnitude))
            .chain(graph.neighbours(inc.node).iter().map(|&m| (m, 1.0 - inc.magnitude / 2.0)));
        let span = inc.start_step.min(steps)..inc.steps().end.min(steps);
        for (node, factor) in touched {
            for t in span.clone() {
                for ch in 0..c {
                    let idx = (t * n + node) * c + ch;
                    readings.data_mut()[idx] *= factor;
                }
            }
        }
    }
    Ok(())
}

/// Seasonal flows with Gaussian noise and Poisson incidents.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes;
    let graph = match cfg.graph {
        GraphKind::Path => SensorGraph::path(n),
        GraphKind::Grid => SensorGraph::grid(n),
        GraphKind::Random { edge_probability } => SensorGraph::random(n, edge_probability, &mut rng),
    };
    let per_day = steps_per_day(cfg.interval_minutes)?;
    let steps = per_day * cfg.days;
    let start_minute = (cfg.start - cfg.start.date().and_hms_opt(0, 0, 0).expect("midnight")).num_minutes() as f64;
    let start_dow = chrono::Datelike::weekday(&cfg.start).num_days_from_monday() as f64;

    struct NodeShape {
        level: f64,
        daily: f64,
        daily_phase: f64,
        weekly: f64,
        weekly_phase: f64,
    }
    let jitter = |rng: &mut ChaCha8Rng| {
        if cfg.phase_jitter > 0.0 {
            rng.random_range(-cfg.phase_jitter..=cfg.phase_jitter)
        } else {
            0.0
        }
    };
    let shapes: Vec<NodeShape> = (0..n)
        .map(|_| NodeShape {
            level: cfg.base_level * rng.random_range(0.7..=1.3),
            daily: cfg.daily_amplitude * rng.random_range(0.8..=1.2),
            daily_phase: jitter(&mut rng),
            weekly: cfg.weekly_amplitude * rng.random_range(0.8..=1.2),
            weekly_phase: jitter(&mut rng),
        })
        .collect();

    let mut readings = Tensor::zeros(&[steps, n, 1]);
    for t in 0..steps {
        let minutes = start_minute + (t as f64) * cfg.interval_minutes as f64;
        let day_frac = minutes / MINUTES_PER_DAY as f64;
        let week_frac = (start_dow + day_frac) / 7.0;
        for (i, sh) in shapes.iter().enumerate() {
            let seasonal = 1.0
                + sh.daily * (TAU * day_frac - TAU / 4.0 + sh.daily_phase).sin()
                + sh.weekly * (TAU * week_frac + sh.weekly_phase).sin();
            readings.set(&[t, i, 0], sh.level * seasonal);
        }
    }

    let mut incidents = Vec::new();
    if cfg.incident_rate > 0.0 && cfg.incident_duration > 0 {
        let poisson = Poisson::new(cfg.incident_rate).map_err(|e| Error::Config(e.to_string()))?;
        for node in 0..n {
            for day in 0..cfg.days {
                let count = poisson.sample(&mut rng) as usize;
                for _ in 0..count {
                    let start_step = day * per_day + rng.random_range(0..per_day);
                    incidents.push(Incident {
                        node,
                        start_step,
                        duration_steps: cfg.incident_duration.min(steps - start_step),
                        magnitude: cfg.incident_magnitude,
                    });
                }
            }
        }
        incidents.sort_by_key(|i| (i.start_step, i.node));
    }
    apply_incidents(&mut readings, &graph, &incidents)?;

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for x in readings.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    for x in readings.data_mut() {
        *x = x.max(0.0);
    }

    let name = cfg.name.clone();
    Ok(Dataset {
        manifest: DatasetManifest {
            readings_path: format!("{name}.csv").into(),
            edges_path: format!("{name}.edges").into(),
            holidays_path: (!cfg.holidays.is_empty()).then(|| "holidays.txt".into()),
            incidents_path: Some("incidents.csv".into()),
            name,
            sensor_count: n,
            interval_minutes: cfg.interval_minutes,
            start_timestamp: cfg.start,
            reading_channels: 1,
            steps: Some(steps),
        },
        readings,
        graph,
        incidents,
        holidays: cfg.holidays.iter().copied().collect(),
    })
}

/// Writes every file named by the manifest plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let m = &ds.manifest;
    let width = m.sensor_count * m.reading_channels;
    let path = dir.join(&m.readings_path);
    let mut out = String::with_capacity(ds.readings.numel() * 20);
    for row in ds.readings.data().chunks(width) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(&path, out).map_err(io_err(&path))?;

    let path = dir.join(&m.edges_path);
    fs::write(&path, ds.graph.to_edge_list()).map_err(io_err(&path))?;

    if let Some(rel) = &m.incidents_path {
        let path = dir.join(rel);
        let mut w = csv::Writer::from_path(&path)?;
        for inc in &ds.incidents {
            w.serialize(inc)?;
        }
        if ds.incidents.is_empty() {
            w.write_record(["node", "start_step", "duration_steps", "magnitude"])?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(rel) = &m.holidays_path {
        let path = dir.join(rel);
        let text: String = ds.holidays.iter().map(|d| format!("{d}\n")).collect();
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(m)?).map_err(io_err(&path))?;
    Ok(path)
}

/// Parses headerless CSV readings into `(steps, N, C)`.
pub fn parse_readings(text: &str, nodes: usize, channels: usize) -> Result<Tensor> {
    let width = nodes * channels;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(Error::Data(format!(
                "readings row {}: expected {width} values, got {}",
                r + 1,
                record.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!("readings row {}, column {}: not a number: {cell:?}", r + 1, c + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("readings row {}, column {}: not finite", r + 1, c + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    Ok(Tensor::new(vec![rows, nodes, channels], data)?)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let path = base.join(&manifest.readings_path);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let readings = parse_readings(&text, manifest.sensor_count, manifest.reading_channels)?;
    if let Some(steps) = manifest.steps {
        if readings.shape()[0] != steps {
            return Err(Error::Data(format!(
                "manifest declares {steps} steps, readings hold {}",
                readings.shape()[0]
            )));
        }
    }
    let graph = SensorGraph::load(&base.join(&manifest.edges_path), manifest.sensor_count)?;
    if let Some(known) = known_dataset(&manifest.name) {
        if known.sensors != manifest.sensor_count || known.edges != graph.edge_count() {
            return Err(Error::Data(format!(
                "{} should have {} sensors and {} edges, found {} and {}",
                known.name,
                known.sensors,
                known.edges,
                manifest.sensor_count,
                graph.edge_count()
            )));
        }
    }
    let incidents = match &manifest.incidents_path {
        Some(rel) => {
            let path = base.join(rel);
            let mut r = csv::Reader::from_path(&path)?;
            let incidents = r.deserialize().collect::<std::result::Result<Vec<Incident>, _>>()?;
            if let Some(bad) = incidents.iter().find(|i| i.node >= manifest.sensor_count) {
                return Err(Error::Data(format!("incident node {} out of range", bad.node)));
            }
            incidents
        }
        None => Vec::new(),
    };
    let holidays = match &manifest.holidays_path {
        Some(rel) => load_holidays(&base.join(rel))?,
        None => BTreeSet::new(),
    };
    Ok(Dataset {
        manifest,
        readings,
        graph,
        incidents,
        holidays,
    })
}

/// Per-channel mean and standard deviation of a training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits on steps `range` of `(steps, N, C)` readings.
    pub fn fit(readings: &Tensor, range: Range<usize>) -> Result<Self> {
        let s = readings.shape();
        let (n, c) = (s[1], s[2]);
        let rows = &readings.data()[range.start * n * c..range.end * n * c];
        let count = (range.len() * n) as f64;
        let mut mean = vec![0.0; c];
        for (i, x) in rows.iter().enumerate() {
            mean[i % c] += x;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, x) in rows.iter().enumerate() {
            var[i % c] += (x - mean[i % c]).powi(2);
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!("channel {ch} is constant over the training split")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, readings: &Tensor) -> Tensor {
        self.transform(readings, |x, m, s| (x - m) / s)
    }

    pub fn inverse(&self, normed: &Tensor) -> Tensor {
        self.transform(normed, |z, m, s| z * s + m)
    }

    fn transform(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.mean[i % c], self.std[i % c]))
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// Chronological 70/10/20 ranges; the first two are floored.
pub fn split_7_1_2(steps: usize, window: usize) -> Result<[Range<usize>; 3]> {
    if steps < 10 * window {
        return Err(Error::Data(format!(
            "{steps} steps is too short for windows of {window} (need {})",
            10 * window
        )));
    }
    let train = steps * 7 / 10;
    let val = steps / 10;
    Ok([0..train, train..train + val, train + val..steps])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Global step of the first input reading.
    pub start: usize,
    pub start_timestamp: NaiveDateTime,
    pub target_timestamp: NaiveDateTime,
    pub pattern: usize,
    pub incident: bool,
}

/// Stride-1 windows inside one split over shared readings.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub readings: Arc<Tensor>,
    pub input_steps: usize,
    pub output_steps: usize,
    pub samples: Vec<Sample>,
}

pub struct Batch {
    /// `(B, T, N, C)`.
    pub x: Tensor,
    /// `(B, T', N, C)`.
    pub y: Tensor,
    pub patterns: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.readings.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.readings.shape()[2]
    }

    fn block(&self, start: usize, len: usize) -> &[f64] {
        let row = self.nodes() * self.channels();
        &self.readings.data()[start * row..(start + len) * row]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (t, tp) = (self.input_steps, self.output_steps);
        let (n, c) = (self.nodes(), self.channels());
        let mut x = Vec::with_capacity(indices.len() * t * n * c);
        let mut y = Vec::with_capacity(indices.len() * tp * n * c);
        let mut patterns = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample {i} out of range")))?;
            x.extend_from_slice(self.block(s.start, t));
            y.extend_from_slice(self.block(s.start + t, tp));
            patterns.push(s.pattern);
        }
        Ok(Batch {
            x: Tensor::new(vec![indices.len(), t, n, c], x)?,
            y: Tensor::new(vec![indices.len(), tp, n, c], y)?,
            patterns,
        })
    }
}

/// Windows whose input and target lie inside `range`.
pub fn make_windows(
    readings: Arc<Tensor>,
    range: Range<usize>,
    input_steps: usize,
    output_steps: usize,
    timestamps: &[NaiveDateTime],
    calendar: &PatternCalendar,
    incidents: &[Incident],
) -> Result<WindowSet> {
    let span = input_steps + output_steps;
    if range.len() < span || range.end > readings.shape()[0] || range.end > timestamps.len() {
        return Err(Error::Data(format!(
            "split {range:?} cannot hold a window of {span} steps"
        )));
    }
    let samples = (range.start..=range.end - span)
        .map(|start| {
            let target = start + input_steps..start + span;
            Sample {
                start,
                start_timestamp: timestamps[start],
                target_timestamp: timestamps[target.start],
                pattern: calendar.assign_pattern(&timestamps[start]),
                incident: incidents.iter().any(|inc| inc.overlaps(&target)),
            }
        })
        .collect();
    Ok(WindowSet {
        readings,
        input_steps,
        output_steps,
        samples,
    })
}

/// Normalised train/validation/test windows of one dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: NormStats,
    pub calendar: PatternCalendar,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

pub fn prepare(ds: &Dataset, input_steps: usize, output_steps: usize, calendar: &PatternCalendar) -> Result<Prepared> {
    let splits = split_7_1_2(ds.steps(), input_steps + output_steps)?;
    let stats = NormStats::fit(&ds.readings, splits[0].clone())?;
    let normed = Arc::new(stats.apply(&ds.readings));
    let calendar = ds.calendar(calendar);
    calendar.validate()?;
    let stamps = ds.timestamps();
    let [train, val, test] = splits.map(|r| {
        make_windows(
            normed.clone(),
            r,
            input_steps,
            output_steps,
            &stamps,
            &calendar,
            &ds.incidents,
        )
    });
    Ok(Prepared {
        stats,
        calendar,
        train: train?,
        val: val?,
        test: test?,
    })
}
