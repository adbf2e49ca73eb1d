use cellcount_core::annotations::DotAnnotation;
use cellcount_core::imaging::{density_from_dots, gaussian_kernel, resize_bilinear, GrayImage};
use proptest::prelude::*;

fn arb_dots(w: f64, h: f64) -> impl Strategy<Value = Vec<DotAnnotation>> {
    // half the dots hug an edge or corner
    let interior = (0.0..w, 0.0..h).prop_map(|(x, y)| DotAnnotation::new(x, y));
    let edge = (0.0..w, prop::sample::select(vec![0.0, h - 1e-9])).prop_flat_map(move |(x, y)| {
        prop::bool::ANY.prop_map(move |swap| {
            if swap {
                DotAnnotation::new(y.min(w - 1e-9), x.min(h - 1e-9))
            } else {
                DotAnnotation::new(x, y)
            }
        })
    });
    prop::collection::vec(prop_oneof![interior, edge], 0..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn count_is_conserved(
        dots in arb_dots(224.0, 224.0),
        grid in 5usize..20,
        sigma in 0.3f64..4.0,
    ) {
        let k = gaussian_kernel(5, sigma).unwrap();
        let map = density_from_dots(&dots, (grid, grid), (224, 224), &k).unwrap();
        let n = dots.len() as f64;
        prop_assert!((map.total() - n).abs() < 1e-9 * n.max(1.0));
        prop_assert!(map.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn scaling_source_and_dots_together_changes_nothing(
        dots in prop::collection::vec((0u32..64, 0u32..48), 0..40),
        s in 2usize..5,
    ) {
        let k = gaussian_kernel(5, 1.0).unwrap();
        let base: Vec<DotAnnotation> = dots.iter().map(|&(x, y)| DotAnnotation::new(x as f64, y as f64)).collect();
        let scaled: Vec<DotAnnotation> = base.iter().map(|d| DotAnnotation::new(d.x * s as f64, d.y * s as f64)).collect();
        let a = density_from_dots(&base, (16, 12), (64, 48), &k).unwrap();
        let b = density_from_dots(&scaled, (16, 12), (64 * s, 48 * s), &k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn resize_stays_within_input_range(
        px in prop::collection::vec(0.0f64..=1.0, 36),
        w in 1usize..20,
        h in 1usize..20,
    ) {
        let img = GrayImage::new(6, 6, px.clone()).unwrap();
        let out = resize_bilinear(&img, w, h).unwrap();
        let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.pixels().iter().all(|&p| p >= lo - 1e-12 && p <= hi + 1e-12));
    }
}

#[test]
fn centered_dot_is_flip_symmetric() {
    let k = gaussian_kernel(5, 1.3).unwrap();
    let map = density_from_dots(&[DotAnnotation::new(5.5, 5.5)], (11, 11), (11, 11), &k).unwrap();
    for y in 0..11 {
        for x in 0..11 {
            let v = map.get(x, y);
            assert_eq!(v, map.get(10 - x, y));
            assert_eq!(v, map.get(x, 10 - y));
        }
    }
    assert!((map.total() - 1.0).abs() < 1e-12);
}

#[test]
fn corner_dot_keeps_unit_mass() {
    let k = gaussian_kernel(5, 1.0).unwrap();
    let map = density_from_dots(&[DotAnnotation::new(0.0, 0.0)], (14, 14), (224, 224), &k).unwrap();
    // in-bounds part of the kernel is its 3×3 lower-right quadrant
    let kept: f64 = (2..5)
        .flat_map(|y| (2..5).map(move |x| (x, y)))
        .map(|(x, y)| k.at(x, y))
        .sum();
    assert!((map.get(0, 0) - k.at(2, 2) / kept).abs() < 1e-12);
    assert!((map.total() - 1.0).abs() < 1e-9);
}
