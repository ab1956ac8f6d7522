//! Butterworth band-pass design in second-order sections and zero-phase
//! (forward-backward) filtering.
//!
//! The analog low-pass prototype is mapped to a band-pass around
//! `ω0 = √(ω1·ω2)` with bandwidth `ω2 − ω1`, using corners pre-warped by
//! `ω = 2·fs·tan(π·f/fs)`, and then to the z-plane with the bilinear
//! transform. Each section is `(1 − z⁻²) / (1 + a1·z⁻¹ + a2·z⁻²)`, carrying
//! one zero at DC and one at Nyquist.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One biquad `[b0, b1, b2, a1, a2]` with `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Section {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    pub sections: Vec<Section>,
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate: f64,
}

impl Butterworth {
    /// Band-pass built from an order-`order` prototype (`order` sections).
    pub fn bandpass(order: usize, low_hz: f64, high_hz: f64, sample_rate: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("filter order must be positive"));
        }
        if !(low_hz > 0.0 && low_hz < high_hz) {
            return Err(Error::invalid(format!("band edges must satisfy 0 < low < high, got {low_hz}..{high_hz}")));
        }
        if !(sample_rate > 2.0 * high_hz) {
            return Err(Error::Data(format!(
                "sample rate {sample_rate} Hz is too low for a {high_hz} Hz band edge (needs > {} Hz)",
                2.0 * high_hz
            )));
        }
        let fs2 = 2.0 * sample_rate;
        let w1 = fs2 * (PI * low_hz / sample_rate).tan();
        let w2 = fs2 * (PI * high_hz / sample_rate).tan();
        let (bw, w0) = (w2 - w1, (w1 * w2).sqrt());

        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
            let d = (p * p - w0 * w0).sqrt();
            for s in [p + d, p - d] {
                poles.push((fs2 + s) / (fs2 - s));
            }
        }
        // one pole of each conjugate pair; real poles are paired with each other
        let mut upper: Vec<Complex64> = poles.iter().copied().filter(|z| z.im > 1e-12).collect();
        let mut reals: Vec<f64> = poles.iter().filter(|z| z.im.abs() <= 1e-12).map(|z| z.re).collect();
        upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
        reals.sort_by(f64::total_cmp);
        let mut sections: Vec<Section> = upper
            .iter()
            .map(|z| Section {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * z.re, z.norm_sqr()],
            })
            .collect();
        for pair in reals.chunks(2) {
            let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
            sections.push(Section {
                b: [1.0, 0.0, -1.0],
                a: [-(r1 + r2), r1 * r2],
            });
        }
        if sections.len() != order {
            return Err(Error::Numerical(format!(
                "filter design produced {} sections for order {order}",
                sections.len()
            )));
        }
        let mut f = Butterworth {
            sections,
            order,
            low_hz,
            high_hz,
            sample_rate,
        };
        // unit gain at the digital image of ω0
        let centre = 2.0 * (w0 / fs2).atan();
        let g = f.response(centre * sample_rate / (2.0 * PI)).norm();
        let per = g.powf(-1.0 / order as f64);
        for s in &mut f.sections {
            s.b.iter_mut().for_each(|b| *b *= per);
        }
        Ok(f)
    }

    /// Complex single-pass response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / self.sample_rate);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Analytic single-pass magnitude of the prototype at the pre-warped
    /// frequency: `1 / √(1 + ((ω² − ω0²)/(ω·B))^(2n))`.
    pub fn analytic_magnitude(&self, freq_hz: f64) -> f64 {
        let fs2 = 2.0 * self.sample_rate;
        let warp = |f: f64| fs2 * (PI * f / self.sample_rate).tan();
        let (w1, w2, w) = (warp(self.low_hz), warp(self.high_hz), warp(freq_hz));
        let r = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + r.powi(2 * self.order as i32)).sqrt()
    }

    /// Edge padding used by [`Butterworth::filtfilt`]: three times the
    /// overall order plus one.
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.order + 1)
    }

    /// Steady-state section states for a unit step, cascaded.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let dc = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
                // direct form II transposed steady state for input 1, output dc
                let z2 = s.b[2] - s.a[1] * dc;
                let z1 = dc - s.b[0];
                let st = [scale * z1, scale * z2];
                scale *= dc;
                st
            })
            .collect()
    }

    /// Single forward pass with initial states `zi` (one pair per section).
    pub fn filter(&self, x: &[f64], zi: Option<&[[f64; 2]]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (k, s) in self.sections.iter().enumerate() {
            let [mut z1, mut z2] = zi.map_or([0.0, 0.0], |z| z[k]);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[0] * out + z2;
                z2 = s.b[2] * xin - s.a[1] * out;
                *v = out;
            }
        }
        y
    }

    /// Zero-phase filtering: odd-reflection padding, forward pass, backward
    /// pass, trim.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        let n = x.len();
        if n <= pad {
            return Err(Error::Data(format!("signal of {n} samples is too short to filter (needs > {pad})")));
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_states();
        let scaled = |x0: f64| -> Vec<[f64; 2]> { zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect() };
        let mut y = self.filter(&ext, Some(&scaled(ext[0])));
        y.reverse();
        let mut y = self.filter(&y, Some(&scaled(y[0])));
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcg_filter(fs: f64) -> Butterworth {
        Butterworth::bandpass(4, 25.0, 400.0, fs).unwrap()
    }

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn digital_response_matches_analytic_prototype() {
        let f = pcg_filter(4000.0);
        assert_eq!(f.sections.len(), 4);
        for hz in [5.0, 10.0, 25.0, 60.0, 100.0, 250.0, 400.0, 700.0, 1000.0, 1900.0] {
            let got = f.response(hz).norm();
            let want = f.analytic_magnitude(hz);
            assert!((got - want).abs() < 1e-9 * want.max(1e-6), "{hz} Hz: {got} vs {want}");
        }
    }

    #[test]
    fn corners_are_half_power() {
        let f = pcg_filter(4000.0);
        assert!((f.response(25.0).norm() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((f.response(400.0).norm() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    fn tone_gain(f: &Butterworth, hz: f64) -> f64 {
        let fs = f.sample_rate;
        let n = (8.0 * fs) as usize;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * hz * i as f64 / fs).sin()).collect();
        let y = f.filtfilt(&x).unwrap();
        // steady-state middle half
        let (a, b) = (n / 4, 3 * n / 4);
        let rms = |v: &[f64]| (v.iter().map(|s| s * s).sum::<f64>() / v.len() as f64).sqrt();
        rms(&y[a..b]) / rms(&x[a..b])
    }

    #[test]
    fn two_pass_tone_gains() {
        let f = pcg_filter(4000.0);
        assert!(db(tone_gain(&f, 100.0)).abs() < 1.0);
        assert!(db(tone_gain(&f, 10.0)) <= -40.0);
        assert!(db(tone_gain(&f, 1000.0)) <= -40.0);
    }

    #[test]
    fn zero_phase_on_symmetric_pulse() {
        let f = pcg_filter(4000.0);
        let n = 4001;
        let c = (n / 2) as f64;
        let x: Vec<f64> = (0..n).map(|i| (-((i as f64 - c) / 20.0).powi(2)).exp()).collect();
        let y = f.filtfilt(&x).unwrap();
        let err = (0..n).map(|i| (y[i] - y[n - 1 - i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_low_sample_rate_and_short_signals() {
        assert!(matches!(Butterworth::bandpass(4, 25.0, 400.0, 800.0), Err(Error::Data(_))));
        let f = pcg_filter(4000.0);
        assert_eq!(f.pad_len(), 27);
        assert!(f.filtfilt(&[0.0; 27]).is_err());
        assert!(f.filtfilt(&[0.0; 28]).is_ok());
    }

    #[test]
    fn step_states_remove_start_transient() {
        let f = pcg_filter(2000.0);
        let x = vec![3.0; 500];
        let y = f.filter(&x, Some(&f.step_states().iter().map(|z| [3.0 * z[0], 3.0 * z[1]]).collect::<Vec<_>>()));
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }
}
