use mc2_core::numerics::{
    dilate, distance_to_set, finite_diff_grad, gaussian_filter, softmax_rows, GaussianSpec, Map2D,
    Tensor,
};
use proptest::prelude::*;

mod oracles;
use oracles::{brute_dilate, brute_distance};

fn mask_strategy(max: usize) -> impl Strategy<Value = Map2D> {
    (1..=max, 1..=max, 0.05f64..0.6).prop_flat_map(|(h, w, p)| {
        proptest::collection::vec(proptest::bool::weighted(p), h * w)
            .prop_map(move |bits| Map2D::from_mask(h, w, |y, x| bits[y * w + x]))
    })
}

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = Map2D> {
    proptest::collection::vec(0.0f64..5.0, h * w).prop_map(move |v| Map2D::new(h, w, v).unwrap())
}

#[test]
fn softmax_examples() {
    let m = Tensor::matrix(3, 2, vec![0.0, 0.0, 1000.0, 0.0, 2f64.ln(), 0.0]).unwrap();
    let p = softmax_rows(&m, 1.0).unwrap();
    assert_eq!(p.row(0), &[0.5, 0.5]);
    assert!((p.get2(1, 0) - 1.0).abs() < 1e-12 && p.get2(1, 1) < 1e-12);
    assert!((p.get2(2, 0) - 2.0 / 3.0).abs() < 1e-12);
    assert!((p.get2(2, 1) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let m = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
    assert!(softmax_rows(&m, 1.0).is_err());
}

#[test]
fn impulse_center_weight_matches_closed_form() {
    let mut a = Map2D::zeros(7, 7);
    a.set(3, 3, 1.0);
    let out = gaussian_filter(&a, &GaussianSpec::new(3, 0.5).unwrap()).unwrap();
    // offsets at distance 1 weigh exp(-1/(2*0.25)) = e^-2, corners e^-4
    let z = 1.0 + 4.0 * (-2f64).exp() + 4.0 * (-4f64).exp();
    assert!((out.get(3, 3) - 1.0 / z).abs() < 1e-12);
    assert!((out.get(3, 4) - (-2f64).exp() / z).abs() < 1e-12);
    assert!((out.get(2, 2) - (-4f64).exp() / z).abs() < 1e-12);
    assert!((out.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn filter_fixed_points_and_even_kernel() {
    let g = GaussianSpec::default();
    let c = gaussian_filter(&Map2D::filled(5, 6, 0.3), &g).unwrap();
    assert!(c.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
    let z = gaussian_filter(&Map2D::zeros(4, 4), &g).unwrap();
    assert!(z.values().iter().all(|v| *v == 0.0));
    assert!(GaussianSpec::new(4, 0.5).is_err());
}

#[test]
fn dilate_examples() {
    let mut m = Map2D::zeros(9, 9);
    m.set(4, 4, 1.0);
    let d = dilate(&m, 1).unwrap();
    assert_eq!(d.count_set(), 9);
    for y in 3..=5 {
        for x in 3..=5 {
            assert!(d.is_set(y, x));
        }
    }
    assert_eq!(dilate(&Map2D::zeros(9, 9), 1).unwrap().count_set(), 0);
    assert_eq!(dilate(&Map2D::filled(9, 9, 1.0), 2).unwrap().count_set(), 81);
    assert!(dilate(&m, 0).is_err());
}

#[test]
fn distance_examples() {
    let strip = Map2D::from_mask(1, 8, |_, x| x == 0);
    let d = distance_to_set(&strip).unwrap();
    assert_eq!(d.get(0, 5), 5.0);
    assert_eq!(d.get(0, 0), 0.0);
    assert!(distance_to_set(&Map2D::zeros(3, 3)).is_err());
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
    let g = finite_diff_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));
    let x = Tensor::new(vec![2], vec![3.0, 5.0]).unwrap();
    let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[1]), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 5.0).abs() < 1e-6 && (g.data()[1] - 3.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e3f64..1e3, 12)) {
        let m = Tensor::matrix(3, 4, v).unwrap();
        let p = softmax_rows(&m, 0.5).unwrap();
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.row(r).iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn filter_is_linear(a in map_strategy(6, 5), b in map_strategy(6, 5)) {
        let g = GaussianSpec::default();
        let sum = Map2D::new(6, 5, a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()).unwrap();
        let lhs = gaussian_filter(&sum, &g).unwrap();
        let fa = gaussian_filter(&a, &g).unwrap();
        let fb = gaussian_filter(&b, &g).unwrap();
        for ((l, x), y) in lhs.values().iter().zip(fa.values()).zip(fb.values()) {
            prop_assert!((l - x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dilate_matches_brute_force_and_is_monotone(m in mask_strategy(12), extra in mask_strategy(12), r in 1usize..3) {
        let d = dilate(&m, r).unwrap();
        prop_assert_eq!(&d, &brute_dilate(&m, r));
        let (h, w) = m.dims();
        let superset = Map2D::from_mask(h, w, |y, x| {
            m.is_set(y, x) || (y < extra.height() && x < extra.width() && extra.is_set(y, x))
        });
        let ds = dilate(&superset, r).unwrap();
        for (a, b) in d.values().iter().zip(ds.values()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn distance_matches_brute_force(m in mask_strategy(32)) {
        prop_assume!(m.count_set() > 0);
        let d = distance_to_set(&m).unwrap();
        let want = brute_distance(&m);
        prop_assert_eq!(d.values(), want.as_slice());
    }

    #[test]
    fn finite_diff_exact_on_quadratics(c in proptest::collection::vec(-3.0f64..3.0, 6), x in proptest::collection::vec(-2.0f64..2.0, 2)) {
        let f = |t: &Tensor| {
            let (a, b) = (t.data()[0], t.data()[1]);
            Ok(c[0] * a * a + c[1] * a * b + c[2] * b * b + c[3] * a + c[4] * b + c[5])
        };
        let xt = Tensor::new(vec![2], x.clone()).unwrap();
        let g = finite_diff_grad(f, &xt, 1e-3).unwrap();
        let ga = 2.0 * c[0] * x[0] + c[1] * x[1] + c[3];
        let gb = c[1] * x[0] + 2.0 * c[2] * x[1] + c[4];
        prop_assert!((g.data()[0] - ga).abs() < 1e-9);
        prop_assert!((g.data()[1] - gb).abs() < 1e-9);
    }
}
