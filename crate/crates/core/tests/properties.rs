use proptest::prelude::*;

use stability_core::attention::{
    assemble_mha_bound, mha_empirical_lipschitz, mha_lipschitz_bound, projection_norms,
    MhaWeights, SPECTRAL_SEED,
};
use stability_core::linalg::{block_inf_rms_norm, row_stochastic_mix, spectral_norm, Matrix, Rng};
use stability_core::metrics::{factor_attribution, projection_norm_product, SensitivityRecord};
use stability_core::normlayer::{layernorm, layernorm_jacobian, LayerNormParams};
use stability_core::scaling::{depth_compounding_product, temperature_warmup_schedule};
use stability_core::sensitivity::{
    opnorm_inf_to_1_exhaustive, softmax, softmax_jacobian, theta_exact, theta_greedy, theta_meet_in_middle,
    ProbDist,
};
use stability_core::{Arch, ThetaMethod};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, 1..=max_len)
}

fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.0f64..1.0, rows * cols).prop_map(move |v| {
        let mut m = Matrix::new(rows, cols, v).unwrap();
        for i in 0..rows {
            let r = m.row_mut(i);
            r[0] += 1e-3;
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn block_norm_is_a_norm(a in matrix(4, 5), b in matrix(4, 5), c in -5.0f64..5.0) {
        let na = block_inf_rms_norm(&a).unwrap();
        let nb = block_inf_rms_norm(&b).unwrap();
        prop_assert!((block_inf_rms_norm(&a.scaled(c)).unwrap() - c.abs() * na).abs() <= 1e-12 * (1.0 + na));
        prop_assert!(block_inf_rms_norm(&a.add(&b)).unwrap() <= na + nb + 1e-12);
        prop_assert!(na >= 0.0);
    }

    #[test]
    fn mixing_is_nonexpansive(a in stochastic(6, 6), v in matrix(6, 3)) {
        let mixed = row_stochastic_mix(&a, &v).unwrap();
        prop_assert!(block_inf_rms_norm(&mixed).unwrap() <= block_inf_rms_norm(&v).unwrap() + 1e-9);
    }

    #[test]
    fn spectral_norm_transpose_symmetric(a in matrix(5, 3), seed in any::<u64>()) {
        let s1 = spectral_norm(&a, 1e-12, 5000, &mut Rng::new(seed)).unwrap();
        let s2 = spectral_norm(&a.transpose(), 1e-12, 5000, &mut Rng::new(seed)).unwrap();
        prop_assert!((s1 - s2).abs() <= 1e-9 * (1.0 + s1));
    }

    #[test]
    fn softmax_identity(u in logits(10), tau in 0.25f64..4.0) {
        let p = softmax(&u, tau).unwrap();
        let theta = theta_exact(&p).unwrap().theta;
        let (norm, _) = opnorm_inf_to_1_exhaustive(&softmax_jacobian(&p, tau).unwrap()).unwrap();
        prop_assert!((norm - theta / tau).abs() <= 1e-12 * (1.0 + norm));
    }

    #[test]
    fn theta_solvers_are_consistent(u in logits(14)) {
        let p = softmax(&u, 1.0).unwrap();
        let exact = theta_exact(&p).unwrap();
        let mitm = theta_meet_in_middle(&p);
        let greedy = theta_greedy(&p);
        prop_assert!((exact.theta - mitm.theta).abs() < 1e-12);
        prop_assert!(greedy.theta <= exact.theta + 1e-15);
        prop_assert!((0.0..=1.0).contains(&exact.theta));
        let mass: f64 = exact.best_subset.iter().map(|&i| p.as_slice()[i]).sum();
        prop_assert!((4.0 * mass * (1.0 - mass) - exact.theta).abs() < 1e-12);
    }

    #[test]
    fn theta_is_permutation_invariant(u in logits(12), rot in 0usize..12) {
        let p = softmax(&u, 1.0).unwrap();
        let mut q = p.as_slice().to_vec();
        let k = rot % q.len();
        q.rotate_left(k);
        let q = ProbDist::new(q).unwrap();
        prop_assert!((theta_exact(&p).unwrap().theta - theta_exact(&q).unwrap().theta).abs() < 1e-12);
    }

    #[test]
    fn layernorm_properties(
        x in prop::collection::vec(-1e3f64..1e3, 6),
        gamma in prop::collection::vec(-2.0f64..2.0, 6),
        shift in prop::collection::vec(-1.0f64..1.0, 6),
        c in -50.0f64..50.0,
    ) {
        let params = LayerNormParams::new(gamma, shift, 1e-5).unwrap();
        let y = layernorm(&x, &params).unwrap();
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 6.0).sqrt();
        prop_assert!(rms <= params.output_rms_bound() + 1e-12);

        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let y2 = layernorm(&shifted, &params).unwrap();
        for (a, b) in y.iter().zip(&y2) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        let j = layernorm_jacobian(&x, &params).unwrap();
        prop_assert!(j.mat_vec(&[1.0; 6]).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn warmup_is_monotone(init in 1.0f64..8.0, frac in 0.0f64..1.0, steps in 1usize..500, s in 0usize..600) {
        let fin = init * frac.max(0.01);
        let a = temperature_warmup_schedule(init, fin, steps, s).unwrap();
        let b = temperature_warmup_schedule(init, fin, steps, s + 1).unwrap();
        prop_assert!(b <= a);
        prop_assert!(a >= fin && a <= init);
    }

    #[test]
    fn depth_product_monotone(n in 1usize..2000, b in 0.01f64..1.0, m in 1usize..5) {
        let p = depth_compounding_product(n, b, m, 1.0).unwrap();
        let wider = depth_compounding_product(n, b * 1.01, m, 1.0).unwrap();
        let deeper = depth_compounding_product(n + 1, b, m, 1.0).unwrap();
        prop_assume!(wider.is_finite() && deeper.is_finite());
        prop_assert!(wider > p);
        prop_assert!(deeper > p);
        let crit = depth_compounding_product(n, (n as f64).powf(-1.0 / m as f64), m, 1.0).unwrap();
        prop_assert!(crit <= std::f64::consts::E * (1.0 + 1e-12));
    }

    #[test]
    fn attribution_sums(
        a in prop::collection::vec((0.01f64..1.0, 0.1f64..10.0, 0.01f64..5.0), 1..6),
        scale in prop::collection::vec((0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0), 6),
    ) {
        let rec = |l: usize, t: f64, b: f64, g: f64| SensitivityRecord {
            step: 0, layer: l, arch: Arch::PreLn, seed: 0,
            theta_over_tau: t, b_bar: b, g, s: t * b * b * g,
            grad_rms: None, theta_method: ThetaMethod::Exhaustive,
        };
        let start: Vec<_> = a.iter().enumerate().map(|(l, &(t, b, g))| rec(l, t, b, g)).collect();
        let end: Vec<_> = a.iter().zip(&scale).enumerate()
            .map(|(l, (&(t, b, g), &(x, y, z)))| rec(l, t * x, b * y, g * z)).collect();
        for d in factor_attribution(&start, &end).unwrap() {
            prop_assert!((d.sum_of_parts() - d.d_log_s).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn norm_product_transpose_invariant(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let w = MhaWeights::random(4, 1, 4, 1.0, &mut rng);
        let g = projection_norm_product(&w, 1e-12).unwrap();
        let mut t = w.clone();
        t.heads[0].wq = w.heads[0].wq.transpose();
        t.heads[0].wv = w.heads[0].wv.transpose();
        t.wo = w.wo.transpose();
        prop_assert!((projection_norm_product(&t, 1e-12).unwrap() - g).abs() <= 1e-9 * g);
    }

    #[test]
    fn mha_bound_dominates_samples(seed in any::<u64>(), tau in 0.5f64..2.0) {
        let mut rng = Rng::new(seed);
        let u = rng.normal_matrix(5, 6, 1.0);
        let w = MhaWeights::random(6, 2, 3, 0.7, &mut rng);
        let e = mha_empirical_lipschitz(&u, &w, tau, 40, &mut rng).unwrap();
        prop_assert_eq!(e.violations, 0);
    }
}

#[test]
fn value_only_weights_stay_under_value_pathway() {
    let mut rng = Rng::new(77);
    let u = rng.normal_matrix(8, 8, 1.0);
    let mut w = MhaWeights::random(8, 2, 4, 0.6, &mut rng);
    for h in &mut w.heads {
        h.wq = Matrix::zeros(8, 4);
        h.wk = Matrix::zeros(8, 4);
    }
    let b = mha_lipschitz_bound(&u, &w, 1.0, 1e-10).unwrap();
    assert!(b.attn_pathway.iter().all(|&a| a == 0.0));
    let value_only = b.wo_norm * b.value_pathway.iter().sum::<f64>();
    assert!((b.total - value_only).abs() <= 1e-12 * value_only);
    let e = mha_empirical_lipschitz(&u, &w, 1.0, 500, &mut rng).unwrap();
    assert!(e.max_ratio <= value_only * (1.0 + 1e-9));
}

#[test]
fn attention_pathway_quadruples_with_input_scale() {
    let mut rng = Rng::new(78);
    let u = rng.normal_matrix(6, 8, 1.0);
    let w = MhaWeights::random(8, 2, 4, 0.5, &mut rng);
    let base = mha_lipschitz_bound(&u, &w, 1.0, 1e-10).unwrap();
    let norms = projection_norms(&w, 1e-10, &mut Rng::new(SPECTRAL_SEED)).unwrap();
    let doubled_b = block_inf_rms_norm(&u.scaled(2.0)).unwrap() * 8f64.sqrt();
    let frozen = assemble_mha_bound(&norms, &base.theta_tilde, doubled_b, 1.0, 4);
    for (a, b) in base.attn_pathway.iter().zip(&frozen.attn_pathway) {
        assert!((b / a - 4.0).abs() < 1e-12);
    }
}

#[test]
fn bound_has_no_length_factor() {
    // Same weights, rows of identical RMS at L = 8 and L = 512: the bounds
    // can differ only through θ̃, which saturates at 1 for long uniform-ish
    // attention, and through B̄_U, which is held equal.
    let mut rng = Rng::new(79);
    let w = MhaWeights::random(8, 2, 4, 0.01, &mut rng);
    let rows = |l: usize, rng: &mut Rng| {
        let mut m = rng.normal_matrix(l, 8, 1.0);
        for i in 0..l {
            let r = m.row_mut(i);
            let n = (r.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        m
    };
    let short = mha_lipschitz_bound(&rows(8, &mut rng), &w, 1.0, 1e-10).unwrap();
    let long = mha_lipschitz_bound(&rows(512, &mut rng), &w, 1.0, 1e-10).unwrap();
    assert!((short.b_u - long.b_u).abs() < 1e-12);
    let norms = projection_norms(&w, 1e-10, &mut Rng::new(SPECTRAL_SEED)).unwrap();
    let rebuilt = assemble_mha_bound(&norms, &long.theta_tilde, short.b_u, 1.0, 4);
    assert_eq!(rebuilt.total, long.total);
}
