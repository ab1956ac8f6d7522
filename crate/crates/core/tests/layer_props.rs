use proptest::prelude::*;
use qivc::gradcheck::GradCheck;
use qivc::qire::QireConfig;
use qivc::qivconv::{
    conv_train_var, draw_noise, kl_divergence, kl_var, total_loss_var, Activation, LayerConfig, VariationalKernel,
    VariationalVars,
};
use qivc::{Graph, Rng, Tensor};

fn layer_cfg(k: usize, p: f64, activation: Activation, kl_scale: f64) -> LayerConfig {
    LayerConfig {
        qire: QireConfig {
            k,
            p,
            rescale_sqrt_n: false,
        },
        kl_scale,
        activation,
        stride: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parameter_count_is_twice_the_deterministic_count(k in 1usize..8, cin in 1usize..5, cout in 1usize..5, seed in any::<u64>()) {
        let vk = VariationalKernel::init(k, cin, cout, 0.01, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(vk.param_count(), 2 * (k * cin * cout + cout));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_the_prior(
        k in 1usize..4, cin in 1usize..3, cout in 1usize..3,
        mu_scale in 0.0f64..2.0, rho_shift in -30.0f64..5.0, prior_var in 1e-3f64..1.0, seed in any::<u64>(),
    ) {
        let mut vk = VariationalKernel::init(k, cin, cout, prior_var, &mut Rng::new(seed)).unwrap();
        vk.mu_w = vk.mu_w.map(|m| m * mu_scale);
        vk.rho_w = vk.rho_w.map(|r| r + rho_shift);
        prop_assert!(kl_divergence(&vk).unwrap() >= -1e-9);

        let rho_prior = qivc::autograd::softplus_inv(prior_var.sqrt());
        vk.mu_w = vk.mu_w.map(|_| 0.0);
        vk.mu_b = vk.mu_b.map(|_| 0.0);
        vk.rho_w = vk.rho_w.map(|_| rho_prior);
        vk.rho_b = vk.rho_b.map(|_| rho_prior);
        prop_assert!(kl_divergence(&vk).unwrap().abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn layer_gradients_match_finite_differences(
        k in 1usize..4, cin in 1usize..3, cout in 1usize..3, t in 4usize..7,
        p in prop::sample::select(vec![0.0, 0.05, 0.5]),
        act in prop::sample::select(vec![Activation::Identity, Activation::Tanh, Activation::Relu]),
        lambda in prop::sample::select(vec![0.0, 1e-5]),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let vk = VariationalKernel::init(k, cin, cout, 0.01, &mut rng).unwrap();
        let cfg = layer_cfg(k, p, act, lambda);
        let noise = draw_noise(&[k, cin, cout], cout, &cfg.qire, &mut rng).unwrap();
        let x = Tensor::from_fn([2, t, cin], |_| rng.normal());
        let target = Tensor::from_fn([2, t, cout], |_| rng.normal());
        let inputs = [vk.mu_w.clone(), vk.rho_w.clone(), vk.mu_b.clone(), vk.rho_b.clone()];
        let report = GradCheck::default()
            .run(&inputs, |g: &mut Graph, v| {
                let vars = VariationalVars { mu_w: v[0], rho_w: v[1], mu_b: v[2], rho_b: v[3] };
                let xv = g.constant(x.clone());
                let y = conv_train_var(g, xv, &vars, &noise, &cfg)?;
                let tv = g.constant(target.clone());
                let d = g.sub(y, tv)?;
                let sq = g.square(d);
                let task = g.mean(sq);
                let kl = kl_var(g, &vars, 0.01)?;
                total_loss_var(g, task, kl, cfg.kl_scale)
            })
            .unwrap();
        prop_assert!(report.passed(), "{report:?}");
    }
}
