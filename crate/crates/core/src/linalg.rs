//! Householder QR and the random orthogonal factors the QiRE sampler needs.
//!
//! QR costs O(N·k²) per call, which dominates a kernel-noise draw for the
//! `N × k` shapes in use (N up to a few thousand, k ≤ 9).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Diagonal entries of R smaller than this mark a rank-deficient input.
pub const RANK_TOL: f64 = 1e-12;

/// Thin QR of an `N × k` matrix (`N ≥ k ≥ 1`) by Householder reflections.
///
/// Returns `(q, r)` with `q` of shape `N × k` with orthonormal columns and
/// `r` upper triangular `k × k`. No sign normalisation is applied.
pub fn householder_qr(m: &Tensor) -> Result<(Tensor, Tensor)> {
    m.expect_rank("householder_qr", 2)?;
    let (n, k) = (m.shape()[0], m.shape()[1]);
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "householder_qr: need N >= k >= 1, got {n}x{k}"
        )));
    }
    // column-major working copy: columns are contiguous
    let mut a: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| m.data()[i * k + j]).collect()).collect();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);

    for j in 0..k {
        let x = &a[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < RANK_TOL {
            return Err(Error::RankDeficient { index: j, value: norm });
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        v.iter_mut().for_each(|t| *t /= vnorm);
        // H = I - 2vvᵀ applied to the trailing columns
        for col in a.iter_mut().skip(j) {
            let tail = &mut col[j..];
            let d: f64 = 2.0 * tail.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            tail.iter_mut().zip(&v).for_each(|(a, b)| *a -= d * b);
        }
        vs.push(v);
    }

    let mut r = Tensor::zeros([k, k]);
    for i in 0..k {
        for j in i..k {
            r.set(&[i, j], a[j][i]);
        }
        let d = r.get(&[i, i]).abs();
        if d < RANK_TOL {
            return Err(Error::RankDeficient { index: i, value: d });
        }
    }

    // Q = H_0 H_1 … H_{k-1} applied to the first k columns of I
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, v) in vs.iter().enumerate().rev() {
        for col in q.iter_mut() {
            let tail = &mut col[j..];
            let d: f64 = 2.0 * tail.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            tail.iter_mut().zip(v).for_each(|(a, b)| *a -= d * b);
        }
    }
    let mut qt = Tensor::zeros([n, k]);
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            qt.data_mut()[i * k + j] = v;
        }
    }
    Ok((qt, r))
}

/// Determinant by LU with partial pivoting.
pub fn determinant(m: &Tensor) -> Result<f64> {
    m.expect_rank("determinant", 2)?;
    let n = m.shape()[0];
    if m.shape()[1] != n {
        return Err(Error::shape("determinant", "columns", n, m.shape()[1]));
    }
    let mut a = m.data().to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
            .unwrap_or(c);
        if a[p * n + c] == 0.0 {
            return Ok(0.0);
        }
        if p != c {
            for j in 0..n {
                a.swap(p * n + j, c * n + j);
            }
            det = -det;
        }
        let piv = a[c * n + c];
        det *= piv;
        for i in c + 1..n {
            let f = a[i * n + c] / piv;
            for j in c..n {
                a[i * n + j] -= f * a[c * n + j];
            }
        }
    }
    Ok(det)
}

/// Orthonormal `N × k` basis of a random k-dimensional subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    q: Tensor,
}

impl SubspaceBasis {
    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.q.shape()[1]
    }

    /// `Qᵀv` for a length-N vector.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k];
        for (row, &x) in self.q.data().chunks(k).zip(v) {
            for (o, &qv) in out.iter_mut().zip(row) {
                *o += qv * x;
            }
        }
        out
    }

    /// `Q·c` for a length-k coefficient vector.
    pub fn lift(&self, c: &[f64]) -> Vec<f64> {
        self.q
            .data()
            .chunks(self.k())
            .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// A `k × k` rotation: orthogonal with determinant +1.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    u: Tensor,
}

impl RotationMatrix {
    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn k(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        self.u
            .data()
            .chunks(self.k())
            .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn([rows, cols], |_| rng.normal())
}

/// QR of an `n × k` standard Gaussian matrix; Q is returned as drawn.
///
/// A rank-deficient draw (probability zero in exact arithmetic) is redrawn.
pub fn orthonormal_basis(n: usize, k: usize, rng: &mut Rng) -> Result<SubspaceBasis> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "orthonormal_basis: need 1 <= k <= n, got n={n}, k={k}"
        )));
    }
    loop {
        match householder_qr(&gaussian_matrix(n, k, rng)) {
            Ok((q, _)) => return Ok(SubspaceBasis { q }),
            Err(Error::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Haar-distributed rotation in SO(k).
///
/// QR of a Gaussian matrix, columns rescaled by `sign(diag R)` so the draw
/// is Haar on O(k), then the first column negated if the determinant is
/// negative.
pub fn haar_so(k: usize, rng: &mut Rng) -> Result<RotationMatrix> {
    if k == 0 {
        return Err(Error::invalid("haar_so: k must be at least 1"));
    }
    let (mut u, r) = loop {
        match householder_qr(&gaussian_matrix(k, k, rng)) {
            Ok(qr) => break qr,
            Err(Error::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    };
    for j in 0..k {
        if r.get(&[j, j]) < 0.0 {
            for i in 0..k {
                let v = u.get(&[i, j]);
                u.set(&[i, j], -v);
            }
        }
    }
    if determinant(&u)? < 0.0 {
        for i in 0..k {
            let v = u.get(&[i, 0]);
            u.set(&[i, 0], -v);
        }
    }
    Ok(RotationMatrix { u })
}
