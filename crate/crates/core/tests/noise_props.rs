use proptest::prelude::*;
use qivc::linalg::{determinant, haar_so, householder_qr, orthonormal_basis};
use qivc::qire::{qire_sample, qire_sample_traced, QireConfig};
use qivc::{Rng, Tensor};

fn gaussian(n: usize, k: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn([n, k], |_| rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn basis_and_rotation_are_deterministic(n in 9usize..200, k in 1usize..10, seed in any::<u64>()) {
        let a = orthonormal_basis(n, k, &mut Rng::new(seed)).unwrap();
        let b = orthonormal_basis(n, k, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a.q(), b.q());
        let u = haar_so(k, &mut Rng::new(seed)).unwrap();
        let v = haar_so(k, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(u.u(), v.u());
    }

    #[test]
    fn rotations_are_proper(k in 1usize..10, seed in any::<u64>()) {
        let u = haar_so(k, &mut Rng::new(seed)).unwrap();
        let det = determinant(u.u()).unwrap();
        prop_assert!((det - 1.0).abs() < 1e-8, "det {det}");
        let utu = u.u().transpose().unwrap().matmul(u.u()).unwrap();
        prop_assert!(utu.max_abs_diff(&Tensor::eye(k)) < 1e-10);
    }

    #[test]
    fn qr_reconstructs(n in prop::sample::select(vec![9usize, 64, 512, 4096]), k in 1usize..10, seed in any::<u64>()) {
        let m = gaussian(n, k, seed);
        let (q, r) = householder_qr(&m).unwrap();
        let qr = q.matmul(&r).unwrap();
        prop_assert!(qr.max_abs_diff(&m) <= 1e-9);
        let qtq = q.transpose().unwrap().matmul(&q).unwrap();
        prop_assert!(qtq.max_abs_diff(&Tensor::eye(k)) <= 1e-10);
    }

    #[test]
    fn swap_preserves_norm_and_complement(
        n in prop::sample::select(vec![16usize, 360, 1024]),
        k in 1usize..10,
        seed in any::<u64>(),
    ) {
        let cfg = QireConfig { k, p: 0.0, rescale_sqrt_n: false };
        let tr = qire_sample_traced(&[n], &cfg, &mut Rng::new(seed)).unwrap();
        prop_assert!((tr.noise.norm() - 1.0).abs() < 1e-10);
        let inside_final = tr.basis.lift(&tr.basis.project(&tr.swapped));
        let inside_base = tr.basis.lift(&tr.basis.project(&tr.base));
        for i in 0..n {
            let a = tr.swapped[i] - inside_final[i];
            let b = tr.base[i] - inside_base[i];
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn draws_reproduce_bitwise(k in 1usize..6, p in 0.0f64..1.0, seed in any::<u64>()) {
        let cfg = QireConfig { k, p, rescale_sqrt_n: false };
        let a = qire_sample(&[3, 2, 4], &cfg, &mut Rng::new(seed)).unwrap();
        let b = qire_sample(&[3, 2, 4], &cfg, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn decoherence_approaches_the_constant_vector() {
    let n = 64;
    let fill = 1.0 / (n as f64).sqrt();
    let mut rng = Rng::new(4);
    let mut spread = Vec::new();
    for p in [0.0, 0.5, 0.9, 1.0] {
        let cfg = QireConfig {
            k: 3,
            p,
            rescale_sqrt_n: false,
        };
        let mut var = 0.0;
        for _ in 0..200 {
            let v = qire_sample(&[n], &cfg, &mut rng).unwrap().into_values();
            var += v.data().iter().map(|x| (x - fill).powi(2)).sum::<f64>() / n as f64;
        }
        spread.push(var / 200.0);
    }
    assert!(spread.windows(2).all(|w| w[1] < w[0]), "{spread:?}");
    assert_eq!(spread[3], 0.0);
}
