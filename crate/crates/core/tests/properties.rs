//! Public-API invariants over random inputs.

use proptest::prelude::*;
use vxc_core::grid::{resample_affine, AxisAffine, Dims};
use vxc_core::io::{decode_features, encode_features};
use vxc_core::metrics::{dice, hd95};
use vxc_core::mind::{mind_descriptor, MindConfig};
use vxc_core::{FeatureVolume, Interp, Mask, Volume};

fn dims() -> impl Strategy<Value = Dims> {
    [3usize..9, 3usize..9, 3usize..9]
}

fn volume() -> impl Strategy<Value = Volume> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(0.0f32..10.0, d.iter().product::<usize>())
            .prop_map(move |v| Volume::new(d, [1.0, 1.5, 2.0], v).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    dims().prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
            .prop_map(move |(a, b)| (Mask::new(d, a).unwrap(), Mask::new(d, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_encoding_round_trips(d in dims(), c in 1usize..5, seed in any::<u32>()) {
        let n = d.iter().product::<usize>() * c;
        let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
        let f = FeatureVolume::new(d, c, [0.5, 1.0, 3.0], data).unwrap();
        let bytes = encode_features(&f);
        let g = decode_features(&bytes).unwrap();
        prop_assert_eq!(encode_features(&g), bytes);
        prop_assert_eq!(g, f);
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let (ab, ba) = (dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn hd95_is_symmetric_and_zero_on_self((a, b) in mask_pair()) {
        prop_assume!(a.count() > 0 && b.count() > 0);
        let sp = [1.0, 2.0, 0.5];
        prop_assert_eq!(hd95(&a, &a, sp).unwrap(), 0.0);
        let (ab, ba) = (hd95(&a, &b, sp).unwrap(), hd95(&b, &a, sp).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn mind_channels_average_one_in_log_space(vol in volume()) {
        // Distances are divided by their own channel mean, so -ln averages to 1
        // wherever that mean is above the variance floor.
        let m = mind_descriptor(&vol, &MindConfig::new(1, 1)).unwrap();
        prop_assert_eq!(m.dims(), vol.dims());
        for i in 0..m.voxels() {
            let v = m.voxel(i);
            prop_assert!(v.iter().all(|&x| x > 0.0 && x <= 1.0));
            if v.iter().any(|&x| x < 1.0) {
                let mean = v.iter().map(|&x| -f64::from(x).ln()).sum::<f64>() / v.len() as f64;
                prop_assert!((mean - 1.0).abs() < 1e-5, "mean -ln {}", mean);
            }
        }
    }

    #[test]
    fn mind_ignores_positive_affine_intensity_maps(vol in volume(), a in 1.0f32..8.0, b in -50.0f32..50.0) {
        let cfg = MindConfig::new(1, 1);
        let mapped = Volume::new(vol.dims(), vol.spacing(), vol.data().iter().map(|&x| a * x + b).collect()).unwrap();
        let (m0, m1) = (mind_descriptor(&vol, &cfg).unwrap(), mind_descriptor(&mapped, &cfg).unwrap());
        let worst = m0.data().iter().zip(m1.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst < 1e-3, "max deviation {}", worst);
    }

    #[test]
    fn identity_resampling_is_exact(vol in volume()) {
        let id = [AxisAffine::IDENTITY; 3];
        for interp in [Interp::Nearest, Interp::Trilinear] {
            prop_assert_eq!(&resample_affine(&vol, &id, interp).unwrap(), &vol);
        }
    }
}
