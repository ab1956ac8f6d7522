//! Synthetic two-class heart-sound recordings.
//!
//! Normal recordings are an S1/S2-like train of Gaussian-windowed low
//! tones; abnormal ones add a systolic burst of 150–350 Hz tones. White
//! noise is added at a fixed SNR.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::pcg::noise::white_noise_for_snr;
use crate::pcg::signal::{preprocess_recording, Label, Recording, Segment, WINDOW_SECONDS};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub recordings: usize,
    pub windows_per_recording: usize,
    pub sample_rate: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 125 recordings × 4 windows = 500 segments.
    fn default() -> Self {
        SynthConfig {
            recordings: 125,
            windows_per_recording: 4,
            sample_rate: 2000.0,
            snr_db: 25.0,
            seed: 7,
        }
    }
}

fn burst(out: &mut [f64], fs: f64, centre: f64, sd: f64, freq: f64, amp: f64, phase: f64) {
    let lo = ((centre - 4.0 * sd) * fs).max(0.0) as usize;
    let hi = (((centre + 4.0 * sd) * fs) as usize).min(out.len());
    for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let t = i as f64 / fs;
        let e = (-0.5 * ((t - centre) / sd).powi(2)).exp();
        *v += amp * e * (2.0 * PI * freq * t + phase).sin();
    }
}

fn murmur(out: &mut [f64], fs: f64, start: f64, end: f64, tones: &[(f64, f64)], amp: f64) {
    let lo = (start * fs).max(0.0) as usize;
    let hi = ((end * fs) as usize).min(out.len());
    if hi <= lo {
        return;
    }
    let span = (hi - lo) as f64;
    for i in lo..hi {
        let t = i as f64 / fs;
        // raised-cosine envelope over systole
        let env = 0.5 - 0.5 * (2.0 * PI * (i - lo) as f64 / span).cos();
        let s: f64 = tones.iter().map(|&(f, ph)| (2.0 * PI * f * t + ph).sin()).sum();
        out[i] += amp * env * s / tones.len() as f64;
    }
}

/// One recording; `rng` drives every random choice.
pub fn synth_recording(id: String, label: Label, cfg: &SynthConfig, rng: &mut Rng) -> Recording {
    let fs = cfg.sample_rate;
    let duration = WINDOW_SECONDS * cfg.windows_per_recording as f64 + 0.5;
    let n = (duration * fs).round() as usize;
    let mut x = vec![0.0; n];
    let bpm = 60.0 + 40.0 * rng.uniform();
    let period = 60.0 / bpm;
    let f1 = 40.0 + 20.0 * rng.uniform();
    let f2 = 60.0 + 20.0 * rng.uniform();
    let tones: Vec<(f64, f64)> = (0..4).map(|_| (150.0 + 200.0 * rng.uniform(), 2.0 * PI * rng.uniform())).collect();
    let mut t = 0.1 * rng.uniform();
    while t < duration {
        let p = period * (1.0 + 0.06 * (rng.uniform() - 0.5));
        let systole = 0.3 * p.sqrt();
        let a1 = 0.9 + 0.2 * rng.uniform();
        let a2 = 0.55 + 0.2 * rng.uniform();
        burst(&mut x, fs, t + 0.04, 0.012, f1, a1, 2.0 * PI * rng.uniform());
        burst(&mut x, fs, t + 0.04 + systole, 0.010, f2, a2, 2.0 * PI * rng.uniform());
        if label == Label::Abnormal {
            let amp = 0.35 + 0.15 * rng.uniform();
            murmur(&mut x, fs, t + 0.09, t + systole, &tones, amp);
        }
        t += p;
    }
    let noise = white_noise_for_snr(&x, cfg.snr_db, rng);
    x.iter_mut().zip(&noise).for_each(|(v, e)| *v += e);
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        // headroom for 16-bit export
        x.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Recording {
        id,
        samples: x,
        sample_rate: fs,
        label,
    }
}

/// Alternating normal/abnormal recordings, one forked stream each.
pub fn synth_recordings(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    if cfg.recordings == 0 || cfg.windows_per_recording == 0 {
        return Err(Error::invalid("synthetic dataset must have recordings and windows"));
    }
    let root = Rng::new(cfg.seed);
    Ok((0..cfg.recordings)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Normal } else { Label::Abnormal };
            synth_recording(format!("syn{i:04}"), label, cfg, &mut root.fork(i as u64))
        })
        .collect())
}

/// Synthetic recordings run through the full preprocessing pipeline.
pub fn synth_segments(cfg: &SynthConfig) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for rec in synth_recordings(cfg)? {
        out.extend(preprocess_recording(&rec)?.segments);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcg::noise::power;

    #[test]
    fn counts_and_balance() {
        let cfg = SynthConfig {
            recordings: 6,
            ..SynthConfig::default()
        };
        let segs = synth_segments(&cfg).unwrap();
        assert_eq!(segs.len(), 24);
        assert_eq!(segs.iter().filter(|s| s.label == Label::Abnormal).count(), 12);
        assert_eq!(synth_segments(&cfg).unwrap(), segs);
    }

    #[test]
    fn abnormal_recordings_carry_murmur_band_energy() {
        let cfg = SynthConfig::default();
        let band = |r: &Recording| {
            let f = crate::pcg::filter::Butterworth::bandpass(4, 150.0, 350.0, r.sample_rate).unwrap();
            power(&f.filtfilt(&r.samples).unwrap()) / power(&r.samples)
        };
        let root = Rng::new(3);
        let a = synth_recording("a".into(), Label::Normal, &cfg, &mut root.fork(0));
        let b = synth_recording("b".into(), Label::Abnormal, &cfg, &mut root.fork(0));
        assert!(band(&b) > 5.0 * band(&a), "{} vs {}", band(&b), band(&a));
    }
}
