use nalgebra::{dmatrix, DVector};
use nuvmpc::lssm::{augment_derivative_input, Lssm};
use nuvmpc::mbf::{smooth, PosteriorRequest};
use nuvmpc::oracle::{dense_smooth, max_relative_deviation, random_instance};
use nuvmpc::priors::{
    expand_m_level, update, update_binarizing_am, update_binarizing_em, update_box, update_half_space, NuvSpec,
    Posterior, PriorParams,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bounds() -> impl Strategy<Value = (f64, f64)> {
    (-10.0..10.0f64, 0.01..10.0f64).prop_map(|(a, w)| (a, a + w))
}

fn all_specs(a: f64, b: f64, gamma: f64) -> Vec<NuvSpec> {
    vec![
        NuvSpec::l1(gamma),
        NuvSpec::lp(gamma, 0.5),
        NuvSpec::huber(gamma, 0.1),
        NuvSpec::plain(),
        NuvSpec::smoothed_plain(0.1, true),
        NuvSpec::smoothed_plain(0.1, false),
        NuvSpec::half_space_lower(a, gamma),
        NuvSpec::half_space_upper(a, gamma),
        NuvSpec::box_prior(a, b, gamma),
        NuvSpec::binarizing_am(a, b),
        NuvSpec::binarizing_em(a, b),
    ]
}

proptest! {
    #[test]
    fn updated_variances_are_positive_and_finite(
        (a, b) in bounds(),
        gamma in 1e-6..1e3f64,
        m in -50.0..50.0f64,
        v in 0.0..10.0f64,
    ) {
        for spec in all_specs(a, b, gamma) {
            let p = update(&spec, Posterior::new(m, v)).unwrap();
            prop_assert!(p.is_finite(), "{spec:?}");
            prop_assert!(p.fwd_variance > 0.0, "{spec:?}");
        }
    }

    #[test]
    fn an_estimate_on_a_level_is_a_fixed_point((a, b) in bounds()) {
        for x in [a, b] {
            let am = update_binarizing_am(&NuvSpec::binarizing_am(a, b), x).unwrap();
            let em = update_binarizing_em(&NuvSpec::binarizing_em(a, b), Posterior::point(x)).unwrap();
            prop_assert!((am.fwd_mean - x).abs() <= 1e-9 * (1.0 + x.abs()));
            prop_assert!((em.fwd_mean - x).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn box_forward_mean_stays_in_the_box((a, b) in bounds(), gamma in 1e-6..1e3f64, m in -50.0..50.0f64) {
        let p = update_box(&NuvSpec::box_prior(a, b, gamma), m).unwrap();
        let slack = 1e-9 * (1.0 + a.abs() + b.abs());
        prop_assert!(p.fwd_mean >= a - slack && p.fwd_mean <= b + slack);
    }

    #[test]
    fn box_update_is_reflection_symmetric((a, b) in bounds(), gamma in 1e-3..1e3f64, m in -50.0..50.0f64) {
        let p = update_box(&NuvSpec::box_prior(a, b, gamma), m).unwrap();
        let q = update_box(&NuvSpec::box_prior(-b, -a, gamma), -m).unwrap();
        prop_assert!((p.fwd_mean + q.fwd_mean).abs() <= 1e-9 * (1.0 + p.fwd_mean.abs()));
        prop_assert!((p.fwd_variance - q.fwd_variance).abs() <= 1e-9 * p.fwd_variance);
    }

    #[test]
    fn half_space_is_the_limit_of_a_wide_box(a in -10.0..10.0f64, gamma in 1e-2..1e2f64, m in -20.0..20.0f64) {
        prop_assume!((m - a).abs() > 1e-3);
        // the clamp scales with the far bound, so keep it moderate
        let far = 1e6;
        let d = (m - a).abs();
        // the box differs from the half-space by terms of order d / far
        let tol_mean = 3.0 * d * d / far + 1e-9 * (1.0 + a.abs());
        let tol_var = 3.0 * d / far;
        let hs = update_half_space(&NuvSpec::half_space_lower(a, gamma), m).unwrap();
        let bx = update_box(&NuvSpec::box_prior(a, a + far, gamma), m).unwrap();
        prop_assert!((hs.fwd_mean - bx.fwd_mean).abs() <= tol_mean, "{hs:?} {bx:?}");
        prop_assert!((hs.fwd_variance - bx.fwd_variance).abs() <= tol_var * hs.fwd_variance);
        let hs = update_half_space(&NuvSpec::half_space_upper(a, gamma), m).unwrap();
        let bx = update_box(&NuvSpec::box_prior(a - far, a, gamma), m).unwrap();
        prop_assert!((hs.fwd_mean - bx.fwd_mean).abs() <= tol_mean, "{hs:?} {bx:?}");
        prop_assert!((hs.fwd_variance - bx.fwd_variance).abs() <= tol_var * hs.fwd_variance);
    }

    #[test]
    fn half_space_mean_lies_on_the_admissible_side(a in -10.0..10.0f64, gamma in 1e-3..1e3f64, m in -20.0..20.0f64) {
        prop_assert!(update_half_space(&NuvSpec::half_space_lower(a, gamma), m).unwrap().fwd_mean >= a);
        prop_assert!(update_half_space(&NuvSpec::half_space_upper(a, gamma), m).unwrap().fwd_mean <= a);
    }

    #[test]
    fn em_without_posterior_variance_equals_am((a, b) in bounds(), m in -50.0..50.0f64) {
        let em = update_binarizing_em(&NuvSpec::binarizing_em(a, b), Posterior::point(m)).unwrap();
        let am = update_binarizing_am(&NuvSpec::binarizing_am(a, b), m).unwrap();
        prop_assert_eq!(em, am);
    }

    #[test]
    fn binarizing_mean_lies_between_the_levels((a, b) in bounds(), m in -50.0..50.0f64, v in 0.0..10.0f64) {
        let p = update_binarizing_em(&NuvSpec::binarizing_em(a, b), Posterior::new(m, v)).unwrap();
        let slack = 1e-9 * (1.0 + a.abs() + b.abs());
        prop_assert!(p.fwd_mean >= a - slack && p.fwd_mean <= b + slack);
    }

    #[test]
    fn level_variances_combine_symmetrically((a, b) in bounds(), va in 1e-3..10.0f64, vb in 1e-3..10.0f64) {
        let p = PriorParams::from_level_variances(a, b, va, vb);
        let q = PriorParams::from_level_variances(b, a, vb, va);
        prop_assert!((p.fwd_mean - q.fwd_mean).abs() < 1e-12 * (1.0 + p.fwd_mean.abs()));
        prop_assert!(p.fwd_variance <= va.min(vb));
    }

    #[test]
    fn equidistant_levels_are_reached_by_prefix_patterns(start in -5.0..5.0f64, step in 0.1..3.0f64, m in 2usize..7) {
        let levels: Vec<f64> = (0..m).map(|i| start + step * i as f64).collect();
        let exp = expand_m_level(&levels, true).unwrap();
        prop_assert_eq!(exp.num_binaries(), m - 1);
        for (i, level) in levels.iter().enumerate() {
            let bits: Vec<f64> = (0..m - 1).map(|j| if j < i { 1.0 } else { 0.0 }).collect();
            prop_assert!((exp.combine(&bits) - level).abs() < 1e-9);
        }
        let inits: Vec<_> = (0..m - 1).map(|j| exp.initial_params(j).fwd_variance).collect();
        for w in inits.windows(2) {
            prop_assert!(w[0] != w[1]);
        }
    }

    #[test]
    fn scaled_difference_is_a_symmetric_measure(m1 in -1e6..1e6f64, v1 in 1e-6..1e6f64, m2 in -1e6..1e6f64, v2 in 1e-6..1e6f64) {
        let p = PriorParams::new(m1, v1);
        let q = PriorParams::new(m2, v2);
        prop_assert_eq!(p.scaled_diff(&q), q.scaled_diff(&p));
        prop_assert_eq!(p.scaled_diff(&p), 0.0);
        prop_assert!(p.scaled_diff(&q) <= p.max_abs_diff(&q));
    }

    #[test]
    fn smoother_matches_the_dense_solve(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, bc, p) = random_instance(&mut rng, 20, 3, 2, 2);
        let got = smooth(&m, &bc, &p, PosteriorRequest::all()).unwrap();
        let want = dense_smooth(&m, &bc, &p).unwrap();
        prop_assert!(max_relative_deviation(&got, &want, 1e-3) < 1e-8);
    }

    #[test]
    fn derivative_augmentation_delays_the_input(us in prop::collection::vec(-2.0..2.0f64, 1..20)) {
        let base = Lssm::constant(us.len(), dmatrix![0.9, 0.1; 0.0, 0.8], dmatrix![0.0; 1.0], dmatrix![1.0, 0.5]).unwrap();
        let aug = augment_derivative_input(&base).unwrap();
        let du: Vec<DVector<f64>> = us
            .iter()
            .enumerate()
            .map(|(k, &u)| DVector::from_element(1, if k == 0 { u } else { u - us[k - 1] }))
            .collect();
        let delayed: Vec<DVector<f64>> = (0..us.len())
            .map(|k| DVector::from_element(1, if k == 0 { 0.0 } else { us[k - 1] }))
            .collect();
        let (_, y_aug) = aug.simulate(&DVector::zeros(3), &du);
        let (_, y_base) = base.simulate(&DVector::zeros(2), &delayed);
        for (ya, yb) in y_aug.iter().zip(&y_base) {
            prop_assert!((ya - yb).amax() < 1e-9);
        }
    }
}
