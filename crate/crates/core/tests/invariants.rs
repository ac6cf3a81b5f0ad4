use ncttt::autodiff::Tensor;
use ncttt::data::npy::{encode_npy, parse_npy, Dtype};
use ncttt::data::{apply_shift, make_blobs, ShiftKind, ShiftSpec};
use ncttt::nce::{expected_label, in_domain_radius, posterior_direct, posterior_logit, NoiseConfig};
use ncttt::numeric::sigmoid;
use proptest::prelude::*;

fn noise() -> impl Strategy<Value = NoiseConfig> {
    (0.05f64..2.0, 1.01f64..5.0, 1usize..=8).prop_map(|(s, b, d)| NoiseConfig::new(s, s * b, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stable_posterior_matches_direct_ratio(cfg in noise(), t in 0.0f64..4.0) {
        let eps_sq = (t * cfg.sigma_o).powi(2) * cfg.dim as f64;
        if let Ok(direct) = posterior_direct(eps_sq, &cfg) {
            let stable = sigmoid(posterior_logit(eps_sq, &cfg).unwrap());
            prop_assert!((direct - stable).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_decreases_with_distance(cfg in noise(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let l_lo = posterior_logit(lo, &cfg).unwrap();
        let l_hi = posterior_logit(hi, &cfg).unwrap();
        prop_assert!(l_lo >= l_hi);
    }

    #[test]
    fn logit_changes_sign_at_radius(cfg in noise()) {
        let r = in_domain_radius(&cfg).unwrap();
        prop_assert!(posterior_logit((0.99 * r).powi(2), &cfg).unwrap() > 0.0);
        prop_assert!(posterior_logit((1.01 * r).powi(2), &cfg).unwrap() < 0.0);
    }

    #[test]
    fn expected_label_is_a_probability_and_decreasing(dim in 1usize..=32, b in 1.01f64..6.0, step in 0.01f64..2.0) {
        let here = expected_label(b, dim).unwrap();
        let further = expected_label(b + step, dim).unwrap();
        prop_assert!((0.0..=1.0).contains(&here));
        prop_assert!(further <= here);
    }

    #[test]
    fn npy_round_trip_preserves_f8(shape in proptest::collection::vec(1usize..=5, 1..=4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) % 10_007) as f64 * 0.37 - 1000.0).collect();
        let t = Tensor::new(shape, data).unwrap();
        let back = parse_npy(&encode_npy(&t, Dtype::F8).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn npy_parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let mut framed = b"\x93NUMPY\x01\x00".to_vec();
        framed.extend(bytes);
        let _ = parse_npy(&framed);
    }

    #[test]
    fn shifts_keep_labels_and_are_deterministic(kind_ix in 0usize..ShiftKind::ALL.len(), severity in 0u8..=5, seed in 0u64..50) {
        let ds = make_blobs(3, 10, 4, 3.0, seed).unwrap();
        let spec = ShiftSpec::new(ShiftKind::ALL[kind_ix], severity).unwrap();
        let a = apply_shift(&ds, &spec, seed).unwrap();
        prop_assert_eq!(a.labels(), ds.labels());
        prop_assert_eq!(a.inputs().shape(), ds.inputs().shape());
        prop_assert_eq!(&apply_shift(&ds, &spec, seed).unwrap(), &a);
        if severity == 0 {
            prop_assert_eq!(&a, &ds);
        }
    }
}
