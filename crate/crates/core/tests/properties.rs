use std::sync::Arc;

use jid_core::imaging::{bad_pixel_rate, rmse_8bit};
use jid_core::manifold::{project_tangent, retract, ObliquePoint};
use jid_core::operator::{apply_global, apply_global_adjoint, AnalysisOperator, CoefficientStack};
use jid_core::plane::{reflect, Plane};
use jid_core::reconstruction::MeasurementModel;
use jid_core::{DepthMap, GrayImage};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oblique(n: usize, k: usize) -> impl Strategy<Value = ObliquePoint<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * k)
        .prop_filter("columns must be nonzero", move |v| {
            v.chunks(n).all(|c| dot(c, c) > 1e-6)
        })
        .prop_map(move |v| ObliquePoint::from_unnormalized(n, k, v).unwrap())
}

fn point_and_matrix() -> impl Strategy<Value = (ObliquePoint<f64>, Vec<f64>)> {
    (2usize..6, 1usize..6).prop_flat_map(|(n, k)| (oblique(n, k), prop::collection::vec(-3.0f64..3.0, n * k)))
}

fn operator(p: usize, k: usize) -> impl Strategy<Value = AnalysisOperator<f64>> {
    let n = p * p;
    prop::collection::vec(-1.0f64..1.0, n * k)
        .prop_filter("rows must be nonzero", move |v| v.chunks(n).all(|r| dot(r, r) > 1e-6))
        .prop_map(move |v| AnalysisOperator::from_unnormalized(k, n, v).unwrap())
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Plane<f64>> {
    prop::collection::vec(-1.0f64..1.0, w * h).prop_map(move |v| Plane::new(w, h, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent((x, g) in point_and_matrix()) {
        let x = Arc::new(x);
        let once = project_tangent(&x, &g).unwrap();
        let twice = project_tangent(&x, once.as_slice()).unwrap();
        let diff: f64 = once.as_slice().iter().zip(twice.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!(diff.sqrt() < 1e-12);
        prop_assert!(once.max_normal_component() < 1e-12);
    }

    #[test]
    fn retraction_stays_on_the_manifold((x, g) in point_and_matrix(), t in 0.0f64..4.0) {
        let x = Arc::new(x);
        let v = project_tangent(&x, &g).unwrap();
        let y = retract(&x, &v, t).unwrap();
        prop_assert!(y.max_norm_deviation() < 1e-12);
    }

    #[test]
    fn global_operator_is_linear(
        op in operator(3, 10),
        a in image(7, 6),
        b in image(7, 6),
        alpha in -2.0f64..2.0,
    ) {
        let mix = Plane::new(7, 6, a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| alpha * x + y).collect()).unwrap();
        let za = apply_global(&op, &a).unwrap();
        let zb = apply_global(&op, &b).unwrap();
        let zm = apply_global(&op, &mix).unwrap();
        for ((m, x), y) in zm.as_slice().iter().zip(za.as_slice()).zip(zb.as_slice()) {
            prop_assert!((m - (alpha * x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn global_adjoint_identity(op in operator(3, 9), x in image(8, 5), seed in prop::collection::vec(-1.0f64..1.0, 8 * 5 * 9)) {
        let y = CoefficientStack::new(8, 5, 9, seed).unwrap();
        let lhs = dot(apply_global(&op, &x).unwrap().as_slice(), y.as_slice());
        let rhs = dot(x.as_slice(), apply_global_adjoint(&op, &y).unwrap().as_slice());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn measurement_adjoint_identity(
        d in 1usize..5,
        w in 5usize..14,
        h in 5usize..14,
        x in prop::collection::vec(-1.0f64..1.0, 14 * 14),
        y in prop::collection::vec(-1.0f64..1.0, 14 * 14),
    ) {
        let m = MeasurementModel::<f64>::new(d, w, h, None).unwrap();
        let x = Plane::new(w, h, x[..w * h].to_vec()).unwrap();
        let y = &y[..m.measurement_count()];
        let lhs = dot(&m.apply(&x).unwrap(), y);
        let rhs = dot(x.as_slice(), m.adjoint(y).unwrap().as_slice());
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn reflection_stays_in_range(i in -100isize..100, len in 1usize..20) {
        let r = reflect(i, len);
        prop_assert!(r < len);
        if (0..len as isize).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
    }

    #[test]
    fn metrics_ignore_pixel_order(
        est in prop::collection::vec(0u8..=255, 24),
        gt in prop::collection::vec(0u8..=255, 24),
        shift in 0usize..24,
    ) {
        let to_img = |v: &[u8]| GrayImage::new(Plane::new(6, 4, v.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap(), 8).unwrap();
        let rot = |v: &[u8]| { let mut v = v.to_vec(); v.rotate_left(shift); v };
        let a = (to_img(&est), DepthMap::fully_valid(to_img(&gt)));
        let b = (to_img(&rot(&est)), DepthMap::fully_valid(to_img(&rot(&gt))));
        prop_assert_eq!(bad_pixel_rate(&a.0, &a.1, 1.0).unwrap(), bad_pixel_rate(&b.0, &b.1, 1.0).unwrap());
        prop_assert!((rmse_8bit(&a.0, &a.1).unwrap() - rmse_8bit(&b.0, &b.1).unwrap()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn operator_files_round_trip_bit_exactly(a in operator(2, 5), b in operator(2, 5), nu in 0.1f64..100.0) {
        let pair = jid_core::Pair::new(a, b, nu).unwrap();
        let bytes = jid_core::jido::encode_pair(&pair).unwrap();
        let back: jid_core::Pair = jid_core::jido::decode_pair(&bytes).unwrap();
        prop_assert_eq!(back, pair);
    }
}
