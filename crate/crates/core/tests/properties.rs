use finegrain_core::bbox::{format_bbox_text, normalize_bbox, parse_bbox_text, NormBBox};
use finegrain_core::geometry::{iou, roi_align, FeatureGrid};
use finegrain_core::rouge::rouge_l_text;
use finegrain_core::vlm::{detokenize, pixel_shuffle, pixel_unshuffle, tokenize};
use proptest::prelude::*;

fn milli_box() -> impl Strategy<Value = NormBBox> {
    (0u16..1000, 0u16..1000, 1u16..=1000, 1u16..=1000).prop_map(|(a, b, w, h)| {
        let x2 = (a + w).min(1000).max(a + 1);
        let y2 = (b + h).min(1000).max(b + 1);
        NormBBox::from_millis(a, b, x2, y2).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bbox_text_round_trip(b in milli_box()) {
        let text = format_bbox_text(&b);
        prop_assert_eq!(parse_bbox_text(&text).unwrap(), b);
        prop_assert_eq!(parse_bbox_text(&format!("the box is {text} here")).unwrap(), b);
    }

    #[test]
    fn tokenizer_round_trip(s in any::<String>()) {
        prop_assert_eq!(detokenize(&tokenize(&s)), s);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in milli_box(), b in milli_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn normalization_is_idempotent(
        w in 1u32..4000, h in 1u32..4000,
        fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.001..1.0f64, fh in 0.001..1.0f64,
    ) {
        let x1 = fx * w as f64;
        let y1 = fy * h as f64;
        let x2 = (x1 + fw * w as f64).min(w as f64);
        let y2 = (y1 + fh * h as f64).min(h as f64);
        prop_assume!(x2 > x1 && y2 > y1);
        let b = normalize_bbox([x1, y1, x2, y2], w, h).unwrap();
        prop_assert_eq!(normalize_bbox([b.x1() * 1000.0, b.y1() * 1000.0, b.x2() * 1000.0, b.y2() * 1000.0], 1000, 1000).unwrap(), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pixel_shuffle_is_a_bijection(r in 1usize..4, bh in 1usize..4, bw in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (bh * r, bw * r);
        let grid = FeatureGrid::from_fn(h, w, c, |y, x, k| ((seed as usize ^ (y * 131 + x * 17 + k)) % 1009) as f64);
        let s = pixel_shuffle(&grid, r).unwrap();
        prop_assert_eq!((s.height(), s.width(), s.channels()), (bh, bw, c * r * r));
        let mut sorted_in = grid.data().to_vec();
        let mut sorted_out = s.data().to_vec();
        sorted_in.sort_by(f64::total_cmp);
        sorted_out.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_in, sorted_out);
        prop_assert_eq!(pixel_unshuffle(&s, r).unwrap(), grid);
    }

    /// ROIAlign is linear in the grid and its outputs lie within the grid's range.
    #[test]
    fn roi_align_linear_and_convex(b in milli_box(), a in -3.0..3.0f64, k in -3.0..3.0f64, seed in 0u64..1000) {
        let f = |y: usize, x: usize, c: usize| (((y * 7 + x * 13 + c * 5) as u64 * 2654435761 + seed) % 997) as f64 / 997.0;
        let g1 = FeatureGrid::from_fn(8, 8, 2, f);
        let g2 = FeatureGrid::from_fn(8, 8, 2, |y, x, c| f(x, y, c).powi(2));
        let mix = FeatureGrid::from_fn(8, 8, 2, |y, x, c| a * g1.get(y, x, c) + k * g2.get(y, x, c));
        let (p1, p2, pm) = (roi_align(&g1, &b, 4, 2).unwrap(), roi_align(&g2, &b, 4, 2).unwrap(), roi_align(&mix, &b, 4, 2).unwrap());
        for i in 0..pm.data().len() {
            prop_assert!((pm.data()[i] - (a * p1.data()[i] + k * p2.data()[i])).abs() < 1e-12);
        }
        let (lo, hi) = g1.data().iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
        prop_assert!(p1.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn rouge_identity_and_bounds(a in "[a-d ]{0,20}", b in "[a-d ]{0,20}") {
        let s = rouge_l_text(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s.f1));
        if a.split_whitespace().next().is_some() {
            prop_assert_eq!(rouge_l_text(&a, &a).f1, 1.0);
        }
        prop_assert_eq!(s.f1, rouge_l_text(&b, &a).f1);
    }
}
