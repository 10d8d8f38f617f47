use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use sagiri_core::imaging::{project_mask_to_latent, ColorSpace, ExposureSpec, ImageBuffer, RegionMask, ValueRange};
use sagiri_core::losses::{color_distribution_loss, frequency_preservation_loss, soft_histogram_t, HistogramMode};
use sagiri_core::restorer::{pixel_shuffle, pixel_unshuffle};

fn unit_image(w: usize, h: usize, data: Vec<f32>) -> ImageBuffer {
    ImageBuffer::new(w, h, 3, data, ValueRange::UnitFloat, ColorSpace::Srgb).unwrap()
}

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0f32..=1.0, w * h * 3).prop_map(move |d| unit_image(w, h, d))
}

fn to_vec(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unshuffle_is_a_permutation_inverted_by_shuffle(
        b in 1usize..3, c in 1usize..4, s in 1usize..4, hs in 1usize..4, ws in 1usize..4, seed in any::<u64>()
    ) {
        let n = b * c * hs * s * ws * s;
        let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32).collect();
        let x = Tensor::from_vec(data.clone(), (b, c, hs * s, ws * s), &Device::Cpu).unwrap();
        let y = pixel_unshuffle(&x, s).unwrap();
        prop_assert_eq!(y.dims(), &[b, c * s * s, hs, ws]);
        prop_assert_eq!(to_vec(&pixel_shuffle(&y, s).unwrap()), data.clone());
        let mut a = to_vec(&y);
        let mut e = data;
        a.sort_by(f32::total_cmp);
        e.sort_by(f32::total_cmp);
        prop_assert_eq!(a, e);
    }

    #[test]
    fn exposure_is_monotone_in_radiance_and_ev(
        a in 0f64..50.0, b in 0f64..50.0, ev in -4f64..4.0, dev in 0f64..2.0, bits in 1u32..=16
    ) {
        let spec = ExposureSpec { ev, gamma: 2.2, quantize_bits: bits };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(spec.expose_sample(lo) <= spec.expose_sample(hi));
        let brighter = ExposureSpec { ev: ev + dev, ..spec };
        prop_assert!(spec.expose_sample(a) <= brighter.expose_sample(a));
        let v = spec.expose_sample(a);
        prop_assert!((0.0..=255.0).contains(&v) && v.fract() == 0.0);
    }

    #[test]
    fn latent_known_set_shrinks_as_unknown_pixels_grow(
        hs in 1usize..5, ws in 1usize..5, scale in 1usize..5,
        base in prop::collection::vec(any::<bool>(), 256), extra in prop::collection::vec(any::<bool>(), 256)
    ) {
        let (h, w) = (hs * scale, ws * scale);
        let small = RegionMask::from_fn(w, h, |y, x| !base[(y * w + x) % 256]);
        let large = RegionMask::from_fn(w, h, |y, x| !(base[(y * w + x) % 256] || extra[(y * w + x) % 256]));
        let ls = project_mask_to_latent(&small, scale, 2).unwrap();
        let ll = project_mask_to_latent(&large, scale, 2).unwrap();
        let (ks, kl) = (ls.latent().unwrap(), ll.latent().unwrap());
        for (s, l) in ks.data.iter().zip(&kl.data) {
            prop_assert!(l <= s);
        }
        prop_assert!(kl.unknown_fraction() >= ks.unknown_fraction());
    }

    #[test]
    fn frequency_loss_is_a_pseudometric(
        a in image_strategy(6, 5), b in image_strategy(6, 5), c in image_strategy(6, 5)
    ) {
        let ab = frequency_preservation_loss(&a, &b).unwrap();
        let bc = frequency_preservation_loss(&b, &c).unwrap();
        let ac = frequency_preservation_loss(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9, "{} > {} + {}", ac, ab, bc);
        prop_assert!((ab - frequency_preservation_loss(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(frequency_preservation_loss(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn color_distribution_loss_is_symmetric_and_bounded(
        a in image_strategy(4, 4), b in image_strategy(4, 4), bins in 2usize..32
    ) {
        for mode in [HistogramMode::Soft, HistogramMode::Hard] {
            let ab = color_distribution_loss(&a, &b, bins, mode).unwrap();
            let ba = color_distribution_loss(&b, &a, bins, mode).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab >= 0.0);
        }
    }

    #[test]
    fn soft_histogram_conserves_mass(data in prop::collection::vec(-0.5f32..1.5, 2 * 3 * 16), bins in 2usize..40) {
        let x = Tensor::from_vec(data, (2, 3, 4, 4), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let h = soft_histogram_t(&x, bins).unwrap();
        prop_assert_eq!(h.dims(), &[2, 3, bins]);
        let sums = h.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let min = h.flatten_all().unwrap().min(0).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(min >= 0.0);
    }
}
