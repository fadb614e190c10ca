//! Cross-module invariants checked on random inputs.

use fusionsight::backbone::LayerSpec;
use fusionsight::depth::{self, GridCalibration, LaserScan, PolarSample, Range};
use fusionsight::heads::{self, HeadParams, HeadShape};
use fusionsight::{model_io, DetectorParams, FeatureMap, FusionMode, HeadVariant, Model, ModelConfig};
use proptest::prelude::*;

fn shape(variant: HeadVariant, channels: usize, classes: usize) -> HeadShape {
    HeadShape {
        variant,
        channels,
        pool_h: 4,
        pool_w: 4,
        hidden: [16, 8],
        classes,
    }
}

fn small_config(fusion: FusionMode, head: HeadVariant) -> ModelConfig {
    let mut cfg = ModelConfig::new(fusion, head, vec!["a".into(), "b".into()]);
    cfg.backbone_widths = vec![3, 4];
    cfg.pool = [2, 2];
    cfg.hidden = [6, 5];
    cfg
}

fn scan_with(ranges: &[f64]) -> LaserScan {
    let samples = ranges
        .iter()
        .enumerate()
        .map(|(i, &rho)| PolarSample::new(rho, depth::beam_angle_deg(i).to_radians()))
        .collect();
    LaserScan::new(samples).unwrap()
}

#[test]
fn one_conv_block_separates_the_heads() {
    for channels in [4, 32] {
        let a0 = shape(HeadVariant::Cnn0C, channels, 3).arch();
        let a1 = shape(HeadVariant::Cnn1C, channels, 3).arch();
        let convs = |a: &fusionsight::backbone::Arch| {
            a.layers.iter().filter(|(_, l)| matches!(l, LayerSpec::Conv { .. })).count()
        };
        assert_eq!(convs(&a1), convs(&a0) + 1);
        let dense = |a: &fusionsight::backbone::Arch| {
            a.layers
                .iter()
                .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
                .map(|(n, l)| (n.clone(), *l))
                .collect::<Vec<_>>()
        };
        assert_eq!(dense(&a0), dense(&a1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn head_probabilities_form_a_distribution(
        seed in 0u64..1000,
        cnn1c in any::<bool>(),
        classes in 1usize..5,
        values in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let variant = if cnn1c { HeadVariant::Cnn1C } else { HeadVariant::Cnn0C };
        let params = HeadParams::init(shape(variant, 4, classes), seed).unwrap();
        let pooled = FeatureMap::from_vec(4, 4, 4, values).unwrap();
        let out = heads::head_forward(&params, &pooled).unwrap();
        prop_assert_eq!(out.probs.len(), classes + 1);
        prop_assert!(out.probs.iter().all(|&p| p > 0.0 && p.is_finite()));
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn model_files_round_trip(seed in 0u64..1000, mode in 0usize..4, cnn1c in any::<bool>()) {
        let fusion = [FusionMode::None, FusionMode::Edges, FusionMode::Flow, FusionMode::Scale][mode];
        let head = if cnn1c { HeadVariant::Cnn1C } else { HeadVariant::Cnn0C };
        let config = small_config(fusion, head);
        let params = DetectorParams::init(&config, seed).unwrap();
        let model = Model { config, params };
        let back = model_io::from_bytes(&model_io::to_bytes(&model)).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn camera_cells_split_pixels_evenly(
        h in 1usize..80,
        w in 1usize..80,
        rows in 1usize..6,
        cols in 1usize..6,
    ) {
        prop_assume!(rows <= h && cols <= w);
        let mut counts = vec![0usize; rows * cols];
        for r in 0..h {
            for q in 0..w {
                let (cr, cc) = depth::pixel_to_camera_cell(q, r, (h, w), (rows, cols)).unwrap();
                counts[cr * cols + cc] += 1;
            }
        }
        // each cell spans floor or ceil of h/rows rows and w/cols columns
        let lo = (h / rows) * (w / cols);
        let hi = h.div_ceil(rows) * w.div_ceil(cols);
        prop_assert!(counts.iter().all(|&n| n >= lo && n <= hi));
        prop_assert_eq!(counts.iter().sum::<usize>(), h * w);
    }

    #[test]
    fn closer_returns_never_increase_distance(
        ranges in prop::collection::vec(20.0f64..5600.0, 667),
        beam in 0usize..667,
        factor in 0.1f64..1.0,
        q in 0usize..64,
        r in 0usize..48,
    ) {
        let calib = GridCalibration::default();
        let before = scan_with(&ranges);
        let mut closer = ranges.clone();
        closer[beam] = (closer[beam] * factor).max(depth::MIN_RANGE_MM);
        let after = scan_with(&closer);
        let (z0, b0) = depth::map_to_distance(q, r, (48, 64), &calib, &before).unwrap();
        let (z1, b1) = depth::map_to_distance(q, r, (48, 64), &calib, &after).unwrap();
        prop_assert_eq!(b0, b1);
        match (z0, z1) {
            (Range::Millimeters(a), Range::Millimeters(b)) => prop_assert!(b <= a),
            other => prop_assert!(false, "valid scan lost its return: {:?}", other),
        }
    }
}
