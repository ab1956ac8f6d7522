use proptest::prelude::*;
use qivc::gradcheck::GradCheck;
use qivc::{Graph, Result, Rng, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let r = GradCheck::default().run(inputs, f).unwrap();
    assert!(r.passed(), "{r:?}");
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), seed ^ 0xabc));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops_match_finite_differences(op in 0usize..8, b in 1usize..3, t in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let x = random(&[b, t, c], seed);
        check(&[x], |g, v| {
            let y = match op {
                0 => g.softplus(v[0]),
                1 => g.tanh(v[0]),
                2 => g.sigmoid(v[0]),
                3 => g.exp(v[0]),
                4 => g.square(v[0]),
                5 => g.reverse_time(v[0])?,
                6 => g.softmax(v[0])?,
                _ => {
                    let s = g.square(v[0]);
                    g.log(s, 0.5)?
                }
            };
            weighted_sum(g, y, seed)
        });
    }

    #[test]
    fn binary_broadcast_ops_match_finite_differences(op in 0usize..4, t in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let a = random(&[2, t, c], seed);
        let b = random(&[c], seed.wrapping_add(1)).map(|v| v.abs() + 0.5);
        check(&[a, b], |g, v| {
            let y = match op {
                0 => g.add(v[0], v[1])?,
                1 => g.sub(v[0], v[1])?,
                2 => g.mul(v[0], v[1])?,
                _ => g.div(v[0], v[1])?,
            };
            weighted_sum(g, y, seed)
        });
    }

    #[test]
    fn conv_matmul_and_pooling_match_finite_differences(k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in any::<u64>()) {
        let x = random(&[2, 6, 2], seed);
        let w = random(&[k, 2, 3], seed ^ 1);
        let bias = random(&[3], seed ^ 2);
        check(&[x, w, bias], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], stride)?;
            let p = g.max_pool_time(y)?;
            let m = g.global_max_pool(p)?;
            let h = g.tanh(m);
            weighted_sum(g, h, seed)
        });
        let a = random(&[3, 4], seed ^ 3);
        let b = random(&[4, 2], seed ^ 4);
        check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, seed)
        });
    }

    #[test]
    fn norm_and_lstm_match_finite_differences(t in 1usize..4, seed in any::<u64>()) {
        let x = random(&[2, t, 2], seed);
        let gamma = random(&[2], seed ^ 5);
        let beta = random(&[2], seed ^ 6);
        check(&[x.clone(), gamma, beta], |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, seed)
        });
        let wx = random(&[2, 8], seed ^ 7).map(|v| 0.5 * v);
        let wh = random(&[2, 8], seed ^ 8).map(|v| 0.5 * v);
        let bias = random(&[8], seed ^ 9);
        check(&[x, wx, wh, bias], |g, v| {
            let h0 = Tensor::from_fn([2, 2], |i| 0.1 * i as f64);
            let y = g.lstm(v[0], v[1], v[2], v[3], Some(&h0), None)?;
            weighted_sum(g, y, seed)
        });
    }

    #[test]
    fn same_padding_preserves_length(k in prop::sample::select(vec![1usize, 3, 5, 7]), extra in 0usize..20, seed in any::<u64>()) {
        let t = k + extra;
        let mut g = Graph::new();
        let x = g.constant(random(&[2, t, 3], seed));
        let w = g.constant(random(&[k, 3, 4], seed ^ 1));
        let b = g.constant(Tensor::zeros([4]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        prop_assert_eq!(g.shape(y), &[2, t, 4]);
    }

    #[test]
    fn softmax_rows_are_distributions(b in 1usize..5, c in 1usize..6, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.constant(random(&[b, c], seed).map(|v| v * scale));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn inference_norm_is_a_bit_stable_affine_map(seed in any::<u64>()) {
        let x = random(&[3, 5, 2], seed);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let gamma = g.constant(Tensor::new([2], vec![1.5, -0.5]).unwrap());
            let beta = g.constant(Tensor::new([2], vec![0.1, 0.2]).unwrap());
            let y = g.batch_norm_infer(xv, gamma, beta, &[0.3, -0.2], &[2.0, 0.5], 1e-5).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn log_floor_gradient_is_zero_below_the_floor() {
    let x = Tensor::new([4], vec![1e-12, 0.5, 2.0, -1.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x);
    let y = g.log_floor(v, 1e-8).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let d = grads.get_or_zero(v);
    assert_eq!(d.data(), &[0.0, 2.0, 0.5, 0.0]);
    assert_eq!(g.value(y).data()[0], 1e-8f64.ln());

    let x = Tensor::new([3], vec![0.3, 1.7, 4.0]).unwrap();
    check(&[x], |g, v| {
        let y = g.log_floor(v[0], 1e-8)?;
        Ok(g.sum(y))
    });
}
