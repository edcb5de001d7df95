use proptest::prelude::*;
use spoofscope_core::imaging::{decode_image, encode_png_bytes, resize_bilinear, Raster, RealField};
use spoofscope_core::vistools::{fft2d, ifft2d};

fn raster() -> impl Strategy<Value = Raster> {
    (1u32..24, 1u32..24, prop_oneof![Just(1u8), Just(3u8)]).prop_flat_map(|(w, h, c)| {
        proptest::collection::vec(any::<u8>(), (w * h * c as u32) as usize)
            .prop_map(move |data| Raster::new(w, h, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn png_round_trip(img in raster()) {
        let bytes = encode_png_bytes(&img).unwrap();
        prop_assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn pnm_matches_raw_bytes(img in raster()) {
        let magic = if img.is_gray() { "P5" } else { "P6" };
        let mut bytes = format!("{magic}\n# made by a test\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        bytes.extend_from_slice(img.data());
        prop_assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn same_size_resize_is_identity(img in raster()) {
        prop_assert_eq!(resize_bilinear(&img, img.width(), img.height()), img);
    }

    #[test]
    fn fft_inverse_recovers_input(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
        let values: Vec<f64> = (0..w * h).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 7) % 1000) as f64 / 7.0).collect();
        let field = RealField::new(w, h, values.clone()).unwrap();
        let back = ifft2d(&fft2d(&field));
        for y in 0..h {
            for x in 0..w {
                let got = back.values[y as usize * back.width + x as usize];
                prop_assert!((got.re - values[(y * w + x) as usize]).abs() < 1e-9);
                prop_assert!(got.im.abs() < 1e-9);
            }
        }
    }
}
