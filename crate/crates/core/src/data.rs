//! CSV ingestion, standardization, sliding windows, and synthetic series.
//!
//! CSV layout: UTF-8, comma-separated, mandatory header `date,<feature>...`.
//! The first column is an opaque timestamp string; every other cell must
//! parse as a decimal number with `.` as the decimal separator.

use std::fmt;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub timestamps: Vec<String>,
    /// `T × F`.
    pub values: Tensor,
    pub feature_names: Vec<String>,
    pub target_index: usize,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    /// Keeps only the target column.
    pub fn target_only(&self) -> TimeSeries {
        let t = self.target_index;
        TimeSeries {
            timestamps: self.timestamps.clone(),
            values: self.values.slice_cols(t, t + 1).expect("target column in range"),
            feature_names: vec![self.feature_names[t].clone()],
            target_index: 0,
        }
    }

    fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        self.values.slice_rows(start, end)
    }
}

pub fn load_csv(path: impl AsRef<Path>, target_name: &str) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let format_err = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 || header.iter().all(|h| h.is_empty()) {
        return Err(format_err("expected a header `date,<feature>...` with at least one feature"));
    }
    let feature_names: Vec<String> = header[1..].to_vec();
    let target_index = feature_names
        .iter()
        .position(|n| n == target_name)
        .ok_or_else(|| Error::MissingColumn {
            name: target_name.to_string(),
            available: feature_names.clone(),
        })?;

    let f = feature_names.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // line 1 is the header
        let line = i + 2;
        if record.len() != header.len() {
            return Err(format_err(&format!(
                "line {line} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        timestamps.push(record[0].to_string());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: feature_names[j].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: feature_names[j].clone(),
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(format_err("no data rows"));
    }
    if timestamps.windows(2).any(|w| w[0] > w[1]) {
        warn!("{}: timestamps are not in ascending order", path.display());
    }
    let t = timestamps.len();
    Ok(TimeSeries {
        timestamps,
        values: Tensor::new(&[t, f], values)?,
        feature_names,
        target_index,
    })
}

pub fn write_csv(ts: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["date".to_string()];
    header.extend(ts.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, stamp) in ts.timestamps.iter().enumerate() {
        let mut rec = vec![stamp.clone()];
        rec.extend(ts.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-feature mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Features with zero variance get `std = 1`.
    pub fn fit(values: &Tensor) -> NormStats {
        let (t, f) = (values.rows(), values.cols());
        let mut mean = vec![0.0; f];
        for i in 0..t {
            for (m, v) in mean.iter_mut().zip(values.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; f];
        for i in 0..t {
            for ((s, v), m) in var.iter_mut().zip(values.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / t as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        let f = values.cols();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % f;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn inverse(&self, values: &Tensor) -> Tensor {
        let f = values.cols();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % f;
            *v = *v * self.std[j] + self.mean[j];
        }
        out
    }
}

/// Standardizes with `stats`, or with statistics fitted on `ts` itself.
pub fn standardize(ts: &TimeSeries, stats: Option<&NormStats>) -> TimeSeries {
    let fitted;
    let stats = match stats {
        Some(s) => s,
        None => {
            fitted = NormStats::fit(&ts.values);
            &fitted
        }
    };
    TimeSeries {
        values: stats.apply(&ts.values),
        ..ts.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Chronological split fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn train_only() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || self.train <= 0.0 {
            return Err(Error::Config(format!("bad split ratios {self:?}")));
        }
        if parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config(format!("split ratios {self:?} sum past 1")));
        }
        Ok(())
    }

    /// Row boundaries `[0, b1) [b1, b2) [b2, b3)` for a series of `t` rows.
    pub fn boundaries(&self, t: usize) -> [usize; 3] {
        let total = self.train + self.val + self.test;
        let b1 = (t as f64 * self.train).round() as usize;
        let b2 = (t as f64 * (self.train + self.val)).round() as usize;
        let b3 = if (total - 1.0).abs() < 1e-9 {
            t
        } else {
            (t as f64 * total).round() as usize
        };
        [b1.min(t), b2.min(t), b3.min(t)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Row offset of the first input row within its split.
    pub offset: usize,
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub split: Split,
    pub windows: Vec<Window>,
    pub stats: NormStats,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Number of stride-`stride` windows in `rows` rows.
pub fn window_count(rows: usize, seq_len: usize, pred_len: usize, stride: usize) -> usize {
    let span = seq_len + pred_len;
    if rows < span || stride == 0 {
        0
    } else {
        (rows - span) / stride + 1
    }
}

/// Chronological split, train-split standardization, then sliding windows.
pub fn make_windows(
    ts: &TimeSeries,
    seq_len: usize,
    pred_len: usize,
    ratios: SplitRatios,
    stride: usize,
) -> Result<(WindowSet, WindowSet, WindowSet)> {
    ratios.validate()?;
    if seq_len == 0 || stride == 0 {
        return Err(Error::Config("seq_len and stride must be positive".into()));
    }
    let span = seq_len + pred_len;
    let [b1, b2, b3] = ratios.boundaries(ts.len());
    let ranges = [(Split::Train, 0, b1, ratios.train), (Split::Val, b1, b2, ratios.val), (Split::Test, b2, b3, ratios.test)];

    for &(split, start, end, ratio) in &ranges {
        if ratio > 0.0 && end - start < span {
            return Err(Error::Length(format!(
                "{split} split has {} rows but needs at least seq_len + pred_len = {span}",
                end - start
            )));
        }
    }

    let stats = NormStats::fit(&ts.rows(0, b1)?);
    let normalized = stats.apply(&ts.values);
    let build = |split: Split, start: usize, end: usize| -> Result<WindowSet> {
        let n = window_count(end - start, seq_len, pred_len, stride);
        let mut windows = Vec::with_capacity(n);
        for w in 0..n {
            let k = start + w * stride;
            let target = if pred_len > 0 {
                normalized.slice_rows(k + seq_len, k + span)?
            } else {
                Tensor::zeros(&[1, ts.n_features()])
            };
            windows.push(Window {
                offset: k - start,
                input: normalized.slice_rows(k, k + seq_len)?,
                target,
            });
        }
        Ok(WindowSet {
            split,
            windows,
            stats: stats.clone(),
        })
    };
    Ok((
        build(Split::Train, 0, b1)?,
        build(Split::Val, b1, b2)?,
        build(Split::Test, b2, b3)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    SineMix,
    TrendPlusSeason,
    WhiteNoise,
}

impl SynthKind {
    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::SineMix => "sine_mix",
            SynthKind::TrendPlusSeason => "trend_plus_season",
            SynthKind::WhiteNoise => "white_noise",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mix" => Ok(SynthKind::SineMix),
            "trend_plus_season" => Ok(SynthKind::TrendPlusSeason),
            "white_noise" => Ok(SynthKind::WhiteNoise),
            other => Err(Error::Config(format!(
                "unknown synthetic kind `{other}` (expected sine_mix, trend_plus_season, white_noise)"
            ))),
        }
    }
}

/// Period of the strongest sine_mix component, in steps.
pub const SINE_MIX_BASE_PERIOD: f64 = 24.0;

/// Deterministic synthetic series with hourly timestamps. The last feature is the target.
pub fn synthetic_series(kind: SynthKind, t: usize, f: usize, seed: u64) -> Result<TimeSeries> {
    if t == 0 || f == 0 {
        return Err(Error::Config("synthetic series needs T > 0 and F > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let phase = Uniform::new(0.0, std::f64::consts::TAU);
    let tau = std::f64::consts::TAU;
    let mut values = vec![0.0; t * f];
    for j in 0..f {
        match kind {
            SynthKind::SineMix => {
                let p1 = SINE_MIX_BASE_PERIOD * (1.0 + 0.05 * j as f64);
                // golden-ratio and sqrt(2) multiples keep the periods incommensurate
                let periods = [p1, p1 * 1.618_033_988_75, p1 * 0.414_213_562_37 * 2.0];
                let amps = [1.0, 0.5, 0.3];
                let phases: Vec<f64> = (0..3).map(|_| phase.sample(&mut rng)).collect();
                for i in 0..t {
                    let x = i as f64;
                    let mut v = 0.0;
                    for k in 0..3 {
                        v += amps[k] * (tau * x / periods[k] + phases[k]).sin();
                    }
                    values[i * f + j] = v + 0.05 * unit.sample(&mut rng);
                }
            }
            SynthKind::TrendPlusSeason => {
                let slope = 2.0 + j as f64 * 0.5;
                let ph = phase.sample(&mut rng);
                for i in 0..t {
                    let x = i as f64;
                    values[i * f + j] = slope * x / t as f64
                        + (tau * x / SINE_MIX_BASE_PERIOD + ph).sin()
                        + 0.1 * unit.sample(&mut rng);
                }
            }
            SynthKind::WhiteNoise => {
                for i in 0..t {
                    values[i * f + j] = unit.sample(&mut rng);
                }
            }
        }
    }
    let start = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start date");
    let timestamps = (0..t)
        .map(|i| (start + Duration::hours(i as i64)).format("%Y-%m-%d %H:%M:%S").to_string())
        .collect();
    let mut feature_names: Vec<String> = (0..f.saturating_sub(1)).map(|j| format!("x{j}")).collect();
    feature_names.push("OT".to_string());
    Ok(TimeSeries {
        timestamps,
        values: Tensor::new(&[t, f], values)?,
        feature_names,
        target_index: f - 1,
    })
}
