use crate::error::Result;
use crate::pcg::signal::{normalize, Segment};
use crate::rng::Rng;

/// Mean power `Σv²/n`.
pub fn power(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// White Gaussian noise scaled to `P_signal / 10^(snr/10)`. Returns the
/// noise itself; `+∞` gives zeros without consuming draws.
pub fn white_noise_for_snr(values: &[f64], snr_db: f64, rng: &mut Rng) -> Vec<f64> {
    if snr_db == f64::INFINITY {
        return vec![0.0; values.len()];
    }
    let sigma = (power(values) / 10f64.powf(snr_db / 10.0)).sqrt();
    (0..values.len()).map(|_| sigma * rng.normal()).collect()
}

/// Adds white noise at `snr_db` and renormalizes to zero mean and unit peak.
/// `+∞` returns the segment unchanged.
pub fn inject_noise_snr(seg: &Segment, snr_db: f64, rng: &mut Rng) -> Result<Segment> {
    if snr_db == f64::INFINITY {
        return Ok(seg.clone());
    }
    let noise = white_noise_for_snr(&seg.values, snr_db, rng);
    let mut values: Vec<f64> = seg.values.iter().zip(&noise).map(|(s, n)| s + n).collect();
    normalize(&mut values).map_err(|r| crate::error::Error::Numerical(format!("{}: noisy segment rejected ({r})", seg.id())))?;
    Ok(Segment { values, ..seg.clone() })
}
