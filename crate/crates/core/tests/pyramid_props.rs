use proptest::prelude::*;
use zed::pyramid::{build_pyramid, crop_to_multiple_of_8, fourth_pixel, round_quarter_value, LEVELS};
use zed::RgbImage;

fn image_strategy() -> impl Strategy<Value = RgbImage> {
    (1usize..=4, 1usize..=4).prop_flat_map(|(bw, bh)| {
        let (w, h) = (8 * bw, 8 * bh);
        proptest::collection::vec(any::<u8>(), w * h * 3).prop_map(move |d| RgbImage::new(w, h, d).unwrap())
    })
}

proptest! {
    #[test]
    fn quarter_identities_hold_exactly(img in image_strategy()) {
        let p = build_pyramid(&img).unwrap();
        for level in 1..LEVELS {
            let (fine, y) = (p.x(level - 1), p.y(level));
            prop_assert_eq!(y.width() * 2, fine.width());
            for r in 0..y.height() {
                for c in 0..y.width() {
                    for ch in 0..3 {
                        let block: [u8; 4] = [
                            fine.get(2 * r, 2 * c, ch),
                            fine.get(2 * r, 2 * c + 1, ch),
                            fine.get(2 * r + 1, 2 * c, ch),
                            fine.get(2 * r + 1, 2 * c + 1, ch),
                        ];
                        let q = y.get(r, c, ch);
                        prop_assert_eq!(u32::from(q), block.iter().map(|&v| u32::from(v)).sum::<u32>());
                        prop_assert_eq!(p.x(level).get(r, c, ch), round_quarter_value(q));
                        prop_assert_eq!(fourth_pixel(q, block[0], block[1], block[2]), Some(block[3]));
                    }
                }
            }
        }
    }

    #[test]
    fn crop_is_centered(w in 8usize..40, h in 8usize..40) {
        let img = RgbImage::from_fn(w, h, |r, c, ch| (r * 7 + c * 3 + ch) as u8);
        let out = crop_to_multiple_of_8(&img).unwrap();
        prop_assert_eq!((out.width(), out.height()), (w / 8 * 8, h / 8 * 8));
        let (dr, dc) = ((h % 8) / 2, (w % 8) / 2);
        prop_assert_eq!(out.pixel(0, 0), img.pixel(dr, dc));
    }

    #[test]
    fn rounding_error_is_at_most_half(q in 0u16..=1020) {
        let err = (f64::from(round_quarter_value(q)) - f64::from(q) / 4.0).abs();
        prop_assert!(err <= 0.5);
    }
}

#[test]
fn pyramid_has_four_levels() {
    // the coarsest of the four levels is an 8x subsampled image
    assert_eq!(LEVELS, 4);
    let p = build_pyramid(&RgbImage::filled(64, 48, [1, 2, 3])).unwrap();
    assert_eq!((p.x(3).width(), p.x(3).height()), (8, 6));
}
