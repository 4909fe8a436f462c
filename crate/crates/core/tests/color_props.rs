use pmuse_core::color::{
    bin_center, code_to_hex, hex_to_code, lab_distance, order_palette, quantize, representative_rgb, rgb_to_code,
    scale_lab, srgb_to_lab, ColorCode, LabColor, RgbColor,
};
use proptest::prelude::*;

fn any_code() -> impl Strategy<Value = ColorCode> {
    (0u32..4096).prop_map(|c| ColorCode::new(c).unwrap())
}

fn any_rgb() -> impl Strategy<Value = RgbColor> {
    any::<(u8, u8, u8)>().prop_map(|(r, g, b)| RgbColor::new(r, g, b))
}

/// Lab distance recomputed from the bin indices.
fn center_distance(p: ColorCode, q: ColorCode) -> f64 {
    let lab = |c: ColorCode| {
        let v = c.get() as f64;
        let (il, ia, ib) = ((v / 256.0).floor(), ((v / 16.0).floor()) % 16.0, v % 16.0);
        [(il * 16.0 + 8.0) / 2.55, ia * 16.0 - 120.0, ib * 16.0 - 120.0]
    };
    let (a, b) = (lab(p), lab(q));
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn order_is_idempotent_and_sorted(colors in prop::collection::vec(any_code(), 0..=5)) {
        let once = order_palette(colors.clone()).unwrap();
        prop_assert_eq!(order_palette(once.clone()).unwrap(), once.clone());
        prop_assert!(once.windows(2).all(|w| w[0].get() / 256 <= w[1].get() / 256));
        let mut a = colors;
        let mut b = once;
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scaling_stays_in_range(l in -1e6f64..1e6, a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let s = scale_lab(LabColor::new(l, a, b));
        for v in [s.l, s.a, s.b] {
            prop_assert!((0.0..=255.0).contains(&v));
        }
        prop_assert!(quantize(s).get() < 4096);
    }

    #[test]
    fn distance_is_a_metric(p in any_code(), q in any_code(), r in any_code()) {
        prop_assert_eq!(lab_distance(p, p), 0.0);
        prop_assert!((lab_distance(p, q) - lab_distance(q, p)).abs() < 1e-12);
        prop_assert!(lab_distance(p, r) <= lab_distance(p, q) + lab_distance(q, r) + 1e-9);
        prop_assert!((lab_distance(p, q) - center_distance(p, q)).abs() < 1e-9);
    }

    #[test]
    fn hex_round_trips_through_codes(c in any_rgb()) {
        let code = rgb_to_code(c);
        prop_assert_eq!(hex_to_code(&c.to_hex()).unwrap(), code);
        prop_assert_eq!(hex_to_code(&code_to_hex(code)).unwrap(), code);
    }

    #[test]
    fn lab_channels_are_in_range(c in any_rgb()) {
        let lab = srgb_to_lab(c);
        prop_assert!((-1e-9..=100.0 + 1e-9).contains(&lab.l));
        prop_assert!(lab.a.is_finite() && lab.b.is_finite());
    }
}

#[test]
fn centers_quantize_to_their_code() {
    for code in ColorCode::all() {
        assert_eq!(quantize(bin_center(code)), code);
    }
}

#[test]
fn every_reachable_code_has_a_representative() {
    let mut reachable = vec![false; 4096];
    for r in (0..=255u8).step_by(5) {
        for g in (0..=255u8).step_by(5) {
            for b in (0..=255u8).step_by(5) {
                reachable[rgb_to_code(RgbColor::new(r, g, b)).get() as usize] = true;
            }
        }
    }
    for (i, seen) in reachable.into_iter().enumerate() {
        let code = ColorCode::new(i as u32).unwrap();
        if seen {
            let rgb = representative_rgb(code).expect("representative");
            assert_eq!(rgb_to_code(rgb), code);
        }
    }
}

#[test]
fn extremes() {
    assert_eq!(hex_to_code("#000000").unwrap(), ColorCode::BLACK);
    assert_eq!(hex_to_code("#FFFFFF").unwrap(), ColorCode::WHITE);
    assert!((lab_distance(ColorCode::BLACK, ColorCode::WHITE) - 94.12).abs() < 0.01);
    assert!(hex_to_code("#12345").is_err());
    assert!(order_palette(vec![ColorCode::BLACK; 6]).is_err());
}
