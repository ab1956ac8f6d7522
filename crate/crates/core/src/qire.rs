//! Quantum-inspired rotated ensemble (QiRE) kernel noise.
//!
//! A draw flattens the kernel shape to `N` elements and then:
//!
//! 1. samples `ε₀ ~ N(0, I_N)` and normalises it to the unit sphere, `ε = ε₀/‖ε₀‖`;
//! 2. draws an orthonormal basis `Q ∈ R^{N×k}` of a random subspace;
//! 3. draws a rotation `U ~ Haar(SO(k))`;
//! 4. swaps the in-subspace component for its rotated image,
//!    `ε_final = ε − QQᵀε + QUQᵀε`;
//! 5. if `p > 0`, keeps each element with probability `1 − p` and replaces
//!    dropped ones with `1/√N`;
//! 6. optionally rescales by `√N`, then reshapes to the kernel.
//!
//! With `p = 0` the draw has unit norm and leaves the orthogonal complement
//! of `span(Q)` untouched. The kernel values themselves are never read,
//! only its shape.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{haar_so, orthonormal_basis, RotationMatrix, SubspaceBasis};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QireConfig {
    /// Subspace dimension.
    pub k: usize,
    /// Decoherence (drop) probability.
    pub p: f64,
    /// Multiply the final noise by `√N`, restoring unit per-element variance.
    pub rescale_sqrt_n: bool,
}

impl Default for QireConfig {
    fn default() -> Self {
        QireConfig {
            k: 5,
            p: 0.05,
            rescale_sqrt_n: false,
        }
    }
}

impl QireConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(Error::invalid(format!(
                "qire: subspace dimension k={} must satisfy 1 <= k <= N={n}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!(
                "qire: decoherence probability p={} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }
}

/// Noise shaped like the target kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    values: Tensor,
    norm: f64,
}

impl NoiseTensor {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Euclidean norm of the flattened values.
    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// Every intermediate of one draw, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct QireTrace {
    /// Unit-norm base noise `ε`.
    pub base: Vec<f64>,
    pub basis: SubspaceBasis,
    pub rotation: RotationMatrix,
    /// `ε_final` before decoherence and rescaling.
    pub swapped: Vec<f64>,
    /// Decoherence keep-mask, present when `p > 0`.
    pub mask: Option<Vec<bool>>,
    pub noise: NoiseTensor,
}

pub fn qire_sample(kernel_shape: &[usize], cfg: &QireConfig, rng: &mut Rng) -> Result<NoiseTensor> {
    Ok(qire_sample_traced(kernel_shape, cfg, rng)?.noise)
}

pub fn qire_sample_traced(kernel_shape: &[usize], cfg: &QireConfig, rng: &mut Rng) -> Result<QireTrace> {
    let n: usize = kernel_shape.iter().product();
    cfg.validate(n)?;

    let mut base = rng.normals(n);
    let norm0 = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm0 > 0.0) {
        return Err(Error::Numerical("qire: zero-norm base noise".into()));
    }
    base.iter_mut().for_each(|v| *v /= norm0);

    let basis = orthonormal_basis(n, cfg.k, rng)?;
    let rotation = haar_so(cfg.k, rng)?;

    // ε − QQᵀε + QUQᵀε = ε + Q(UQᵀε − Qᵀε)
    let coeff = basis.project(&base);
    let rotated = rotation.apply(&coeff);
    let delta: Vec<f64> = rotated.iter().zip(&coeff).map(|(r, c)| r - c).collect();
    let lifted = basis.lift(&delta);
    let swapped: Vec<f64> = base.iter().zip(&lifted).map(|(e, d)| e + d).collect();

    let mut values = swapped.clone();
    let mask = if cfg.p > 0.0 {
        let fill = 1.0 / (n as f64).sqrt();
        let keep: Vec<bool> = (0..n).map(|_| rng.bernoulli(1.0 - cfg.p)).collect();
        for (v, &k) in values.iter_mut().zip(&keep) {
            if !k {
                *v = fill;
            }
        }
        Some(keep)
    } else {
        None
    };
    if cfg.rescale_sqrt_n {
        let s = (n as f64).sqrt();
        values.iter_mut().for_each(|v| *v *= s);
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let noise = NoiseTensor {
        values: Tensor::new(kernel_shape.to_vec(), values)?,
        norm,
    };
    Ok(QireTrace {
        base,
        basis,
        rotation,
        swapped,
        mask,
        noise,
    })
}

/// Aggregate statistics over repeated draws.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStatistics {
    pub k: usize,
    pub p: f64,
    pub n: usize,
    pub trials: usize,
    pub mean_norm: f64,
    pub norm_std: f64,
    /// Mean over every element of every draw.
    pub elem_mean: f64,
    /// Variance over every element of every draw.
    pub elem_var: f64,
    /// Mean of `‖QQᵀε_final‖² / ‖ε_final‖²`, using each draw's own `Q`.
    pub subspace_energy: f64,
}

impl NoiseStatistics {
    pub const CSV_HEADER: &'static str = "k,p,N,mean_norm,norm_std,elem_mean,elem_var,subspace_energy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.k, self.p, self.n, self.mean_norm, self.norm_std, self.elem_mean, self.elem_var, self.subspace_energy
        )
    }

    pub fn write_csv<W: Write>(rows: &[NoiseStatistics], mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

pub fn noise_statistics(cfg: &QireConfig, kernel_shape: &[usize], trials: usize, rng: &mut Rng) -> Result<NoiseStatistics> {
    if trials == 0 {
        return Err(Error::invalid("noise_statistics: trials must be at least 1"));
    }
    let n: usize = kernel_shape.iter().product();
    let mut norms = Vec::with_capacity(trials);
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut energy = 0.0;
    for _ in 0..trials {
        let tr = qire_sample_traced(kernel_shape, cfg, rng)?;
        let v = tr.noise.values().data();
        norms.push(tr.noise.norm());
        for &x in v {
            s1 += x;
            s2 += x * x;
        }
        let inside: f64 = tr.basis.project(v).iter().map(|c| c * c).sum();
        let total: f64 = v.iter().map(|x| x * x).sum();
        energy += if total > 0.0 { inside / total } else { 0.0 };
    }
    let t = trials as f64;
    let mean_norm = norms.iter().sum::<f64>() / t;
    let norm_std = (norms.iter().map(|x| (x - mean_norm).powi(2)).sum::<f64>() / t).sqrt();
    let count = t * n as f64;
    let elem_mean = s1 / count;
    let elem_var = (s2 / count - elem_mean * elem_mean).max(0.0);
    Ok(NoiseStatistics {
        k: cfg.k,
        p: cfg.p,
        n,
        trials,
        mean_norm,
        norm_std,
        elem_mean,
        elem_var,
        subspace_energy: energy / t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, p: f64) -> QireConfig {
        QireConfig {
            k,
            p,
            rescale_sqrt_n: false,
        }
    }

    /// ε + Q(U − I)Qᵀε with dense matrices, independent of the sampler's
    /// project/rotate/lift sequence.
    fn closed_form(tr: &QireTrace) -> Tensor {
        let n = tr.base.len();
        let k = tr.basis.k();
        let q = tr.basis.q();
        let eps = Tensor::new([n, 1], tr.base.clone()).unwrap();
        let u_minus_i = tr.rotation.u().zip_map(&Tensor::eye(k), |a, b| a - b).unwrap();
        let m = q
            .matmul(&u_minus_i)
            .unwrap()
            .matmul(&q.transpose().unwrap())
            .unwrap()
            .matmul(&eps)
            .unwrap();
        eps.zip_map(&m, |a, b| a + b).unwrap()
    }

    #[test]
    fn unit_norm_without_decoherence() {
        let mut rng = Rng::new(1);
        for k in 1..=9 {
            let s = qire_sample(&[3, 4, 5], &cfg(k, 0.0), &mut rng).unwrap();
            assert!((s.norm() - 1.0).abs() < 1e-10);
            assert_eq!(s.values().shape(), &[3, 4, 5]);
        }
    }

    #[test]
    fn k_one_returns_normalised_base_noise() {
        let tr = qire_sample_traced(&[20], &cfg(1, 0.0), &mut Rng::new(4)).unwrap();
        assert_eq!(tr.rotation.u().data(), &[1.0]);
        // U = [[1]] makes the swap an identity up to rounding
        for (a, b) in tr.noise.values().data().iter().zip(&tr.base) {
            assert!((a - b).abs() < 1e-15);
        }
        let base_norm: f64 = tr.base.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((base_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_decoherence_is_constant() {
        let s = qire_sample(&[2, 2], &cfg(2, 1.0), &mut Rng::new(3)).unwrap();
        assert!(s.values().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_closed_form_rearrangement() {
        let mut rng = Rng::new(12);
        for &(n, k) in &[(16, 3), (60, 5), (7, 7)] {
            let tr = qire_sample_traced(&[n], &cfg(k, 0.0), &mut rng).unwrap();
            let cf = closed_form(&tr);
            for (a, b) in tr.noise.values().data().iter().zip(cf.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoherence_mask_semantics() {
        let tr = qire_sample_traced(&[400], &cfg(5, 0.3), &mut Rng::new(2)).unwrap();
        let mask = tr.mask.as_ref().unwrap();
        let fill = 1.0 / 20.0;
        for ((v, s), &keep) in tr.noise.values().data().iter().zip(&tr.swapped).zip(mask) {
            if keep {
                assert_eq!(v, s);
            } else {
                assert_eq!(*v, fill);
            }
        }
        let dropped = mask.iter().filter(|k| !**k).count();
        assert!((60..=180).contains(&dropped), "{dropped}");
    }

    #[test]
    fn rescale_restores_unit_variance_scale() {
        let c = QireConfig {
            k: 3,
            p: 0.0,
            rescale_sqrt_n: true,
        };
        let s = qire_sample(&[100], &c, &mut Rng::new(5)).unwrap();
        assert!((s.norm() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs() {
        let mut rng = Rng::new(0);
        assert!(qire_sample(&[2, 2], &cfg(5, 0.0), &mut rng).is_err());
        assert!(qire_sample(&[2, 2], &cfg(0, 0.0), &mut rng).is_err());
        assert!(qire_sample(&[2, 2], &cfg(2, 1.5), &mut rng).is_err());
        assert!(qire_sample(&[2, 2], &cfg(2, -0.1), &mut rng).is_err());
    }

    #[test]
    fn reproducible_bitwise() {
        let a = qire_sample(&[7, 3, 2], &QireConfig::default(), &mut Rng::new(99)).unwrap();
        let b = qire_sample(&[7, 3, 2], &QireConfig::default(), &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn statistics_cases() {
        let mut rng = Rng::new(8);
        let s = noise_statistics(&cfg(3, 0.0), &[30], 200, &mut rng).unwrap();
        assert!((s.mean_norm - 1.0).abs() < 1e-10);
        assert!(s.norm_std < 1e-10);

        let trials = 4000;
        let n = 25;
        let s = noise_statistics(&cfg(4, 0.0), &[n], trials, &mut rng).unwrap();
        assert!(s.elem_mean.abs() < 5.0 / ((trials * n) as f64).sqrt());

        let s = noise_statistics(&cfg(12, 0.0), &[12], 50, &mut rng).unwrap();
        assert!((s.subspace_energy - 1.0).abs() < 1e-10);

        assert!(noise_statistics(&cfg(3, 0.0), &[30], 0, &mut rng).is_err());
        let a = noise_statistics(&cfg(3, 0.1), &[30], 20, &mut Rng::new(1)).unwrap();
        let b = noise_statistics(&cfg(3, 0.1), &[30], 20, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_has_declared_columns() {
        let s = noise_statistics(&cfg(2, 0.0), &[8], 3, &mut Rng::new(1)).unwrap();
        let mut buf = Vec::new();
        NoiseStatistics::write_csv(&[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], NoiseStatistics::CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 8);
    }
}
