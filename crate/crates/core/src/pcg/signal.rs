use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pcg::filter::Butterworth;

/// Samples per finalized segment.
pub const SEGMENT_LEN: usize = 2000;
pub const WINDOW_SECONDS: f64 = 4.0;
pub const BAND_LOW_HZ: f64 = 25.0;
pub const BAND_HIGH_HZ: f64 = 400.0;
pub const FILTER_ORDER: usize = 4;
/// Windows whose peak after centering is below this are treated as silent.
pub const SILENCE_FLOOR: f64 = 1e-12;

/// Abnormal is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Abnormal),
            _ => Err(Error::Data(format!("invalid label index {i}"))),
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Abnormal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(Error::Data(format!("unknown label '{other}' (expected normal|abnormal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub label: Label,
}

impl Recording {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::Data(format!("{}: sample rate must be positive", self.id)));
        }
        if self.samples.is_empty() {
            return Err(Error::Data(format!("{}: empty recording", self.id)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub values: Vec<f64>,
    pub label: Label,
    pub recording_id: String,
    pub window: u32,
}

impl Segment {
    /// `"<recording>#<window>"`
    pub fn id(&self) -> String {
        format!("{}#{}", self.recording_id, self.window)
    }
}

/// Why a window did not become a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    NonFinite,
    Silent,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::NonFinite => "non-finite",
            Rejection::Silent => "silent",
        })
    }
}

/// Zero-phase 25–400 Hz band-pass.
pub fn bandpass(rec: &Recording) -> Result<Recording> {
    rec.validate()?;
    let filter = Butterworth::bandpass(FILTER_ORDER, BAND_LOW_HZ, BAND_HIGH_HZ, rec.sample_rate)
        .map_err(|e| Error::Data(format!("{}: {e}", rec.id)))?;
    Ok(Recording {
        samples: filter.filtfilt(&rec.samples)?,
        ..rec.clone()
    })
}

/// Consecutive non-overlapping 4 s windows; the remainder is dropped.
pub fn segment(rec: &Recording) -> Vec<&[f64]> {
    let win = (WINDOW_SECONDS * rec.sample_rate).round() as usize;
    if win == 0 {
        return Vec::new();
    }
    rec.samples.chunks_exact(win).collect()
}

/// Linear interpolation onto `m` points with both endpoints aligned.
pub fn resample_linear(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if m == 1 || n == 1 {
        return vec![x[0]; m];
    }
    // position i·(n−1)/(m−1) split into integer and fractional parts exactly
    let (num, den) = (n - 1, m - 1);
    (0..m)
        .map(|i| {
            let pos = i * num;
            let (k, r) = (pos / den, pos % den);
            if r == 0 {
                x[k]
            } else {
                let t = r as f64 / den as f64;
                x[k] + t * (x[k + 1] - x[k])
            }
        })
        .collect()
}

/// Centres and scales to a peak magnitude of 1.
pub fn normalize(values: &mut [f64]) -> std::result::Result<(), Rejection> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Rejection::NonFinite);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak >= SILENCE_FLOOR) {
        return Err(Rejection::Silent);
    }
    values.iter_mut().for_each(|v| *v /= peak);
    Ok(())
}

/// Resample to 2000 points, centre, scale to ±1; rejects non-finite or
/// silent windows.
pub fn finalize_segment(window: &[f64]) -> std::result::Result<Vec<f64>, Rejection> {
    if window.is_empty() {
        return Err(Rejection::Silent);
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Rejection::NonFinite);
    }
    let mut v = resample_linear(window, SEGMENT_LEN);
    normalize(&mut v)?;
    Ok(v)
}

/// Outcome of preprocessing one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub segments: Vec<Segment>,
    /// `(window index, reason)`
    pub rejected: Vec<(u32, Rejection)>,
}

/// Band-pass, segment and finalize one recording.
pub fn preprocess_recording(rec: &Recording) -> Result<Preprocessed> {
    let filtered = bandpass(rec)?;
    let mut out = Preprocessed {
        segments: Vec::new(),
        rejected: Vec::new(),
    };
    for (w, window) in segment(&filtered).into_iter().enumerate() {
        match finalize_segment(window) {
            Ok(values) => out.segments.push(Segment {
                values,
                label: rec.label,
                recording_id: rec.id.clone(),
                window: w as u32,
            }),
            Err(r) => out.rejected.push((w as u32, r)),
        }
    }
    Ok(out)
}
