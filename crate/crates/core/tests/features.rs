use armpc::features::{
    curvature, dwt, extract_features, idwt, read_references, synthesize_references,
    write_references, FeatureLayout, FeatureMask, SynthesisSchedule, WaveletPlan,
};
use armpc::plant::{Plant, PlantConfig, ReferenceKind, SynthesisSettings};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// One periodized analysis level as an explicit `n×n` matrix: low-pass rows
/// first, then high-pass rows.
fn level_matrix(n: usize) -> DMatrix<f64> {
    let s3 = 3f64.sqrt();
    let h = [1.0 + s3, 3.0 + s3, 3.0 - s3, 1.0 - s3].map(|v| v / (4.0 * 2f64.sqrt()));
    let g = [h[3], -h[2], h[1], -h[0]];
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n / 2 {
        for k in 0..4 {
            w[(i, (2 * i + k) % n)] += h[k];
            w[(n / 2 + i, (2 * i + k) % n)] += g[k];
        }
    }
    w
}

/// Full pyramid as a product of level matrices acting on the leading block.
fn pyramid_matrix(n: usize, levels: usize) -> DMatrix<f64> {
    let mut total = DMatrix::identity(n, n);
    let mut len = n;
    for _ in 0..levels {
        let mut step = DMatrix::identity(n, n);
        step.view_mut((0, 0), (len, len))
            .copy_from(&level_matrix(len));
        total = step * total;
        len /= 2;
    }
    total
}

fn brute_curvature(r: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0.0;
    for k in 0..r.len() - 2 {
        let grad = r[k + 1] - r[k];
        let lap = (r[k + 2] - r[k + 1]) - (r[k + 1] - r[k]);
        acc += lap.abs() / (1.0 + grad * grad).powf(1.5);
        count += 1.0;
    }
    acc / count
}

#[test]
fn curvature_examples() {
    let ramp: Vec<f64> = (0..40).map(|k| k as f64).collect();
    assert_eq!(curvature(&ramp).unwrap(), 0.0);
    assert_eq!(curvature(&[5.0; 40]).unwrap(), 0.0);
    let mut bump = vec![0.0; 40];
    bump[2] = 1.0;
    bump[3] = 1.0;
    assert!((curvature(&bump).unwrap() - brute_curvature(&bump)).abs() < 1e-15);
    assert!(curvature(&[1.0, 2.0]).is_err());
}

#[test]
fn wavelet_matches_the_explicit_matrix() {
    let w = pyramid_matrix(8, 3);
    assert!((&w * w.transpose() - DMatrix::identity(8, 8)).amax() < 1e-14);
    let ramp: Vec<f64> = (0..8).map(|k| k as f64).collect();
    let expect = &w * DVector::from_vec(ramp.clone());
    let got = dwt(&ramp, &WaveletPlan::db2(3)).unwrap();
    for (a, b) in got.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    let w40 = pyramid_matrix(40, 3);
    let sig: Vec<f64> = (0..40).map(|k| ((k * 7 % 11) as f64).sin()).collect();
    let expect = &w40 * DVector::from_vec(sig.clone());
    let got = dwt(&sig, &WaveletPlan::db2(3)).unwrap();
    assert!((DVector::from_vec(got) - expect).amax() < 1e-12);
}

#[test]
fn constant_signal_and_impulse() {
    let plan1 = WaveletPlan::db2(1);
    let c = dwt(&[2.5; 16], &plan1).unwrap();
    for v in &c[..8] {
        assert!((v - 2.5 * 2f64.sqrt()).abs() < 1e-12);
    }
    assert!(c[8..].iter().all(|v| v.abs() < 1e-12));
    let plan3 = WaveletPlan::db2(3);
    let c3 = dwt(&[-1.25; 40], &plan3).unwrap();
    assert!(c3[5..].iter().all(|v| v.abs() < 1e-12));
    let mut imp = vec![0.0; 8];
    imp[0] = 1.0;
    let back = idwt(&dwt(&imp, &plan1).unwrap(), &plan1).unwrap();
    assert!(back.iter().zip(&imp).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(dwt(&[0.0; 12], &plan3).is_err());
    assert_eq!(plan3.band_lengths(40), vec![5, 5, 10, 20]);
}

#[test]
fn filters_are_orthonormal() {
    let p = WaveletPlan::db2(3);
    assert!((p.low.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-15);
    assert!(p.high.iter().sum::<f64>().abs() < 1e-15);
    assert!((p.low.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn dwt_is_orthonormal(sig in prop::collection::vec(-100.0f64..100.0, 40)) {
        let plan = WaveletPlan::db2(3);
        let c = dwt(&sig, &plan).unwrap();
        prop_assert_eq!(c.len(), 40);
        let e_sig: f64 = sig.iter().map(|v| v * v).sum();
        let e_c: f64 = c.iter().map(|v| v * v).sum();
        prop_assert!((e_sig - e_c).abs() <= 1e-10 * e_sig.max(1.0));
        let back = idwt(&c, &plan).unwrap();
        for (a, b) in back.iter().zip(&sig) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn curvature_is_shift_invariant(sig in prop::collection::vec(-10.0f64..10.0, 3..60), shift in -1e3f64..1e3) {
        let moved: Vec<f64> = sig.iter().map(|v| v + shift).collect();
        let (a, b) = (curvature(&sig).unwrap(), curvature(&moved).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300) || (a - b).abs() < 1e-12);
        prop_assert!((a - brute_curvature(&sig)).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn features_are_pure(vals in prop::collection::vec(-1.0f64..1.0, 160), x in prop::collection::vec(-1.0f64..1.0, 4)) {
        let layout = FeatureLayout::new(vec!["a".into(), "b".into(), "c".into(), "d".into()], 40, 3).unwrap();
        let w = DMatrix::from_column_slice(40, 4, &vals);
        let xc = DVector::from_vec(x);
        let f1 = extract_features(&layout, &w, &xc).unwrap();
        let f2 = extract_features(&layout, &w, &xc).unwrap();
        prop_assert_eq!(f1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for s in 0..4 {
            prop_assert_eq!(f1[layout.error_index(s)], (w[(0, s)] - xc[s]).abs());
        }
    }
}

#[test]
fn layout_lengths_and_masking() {
    let v = Plant::new(PlantConfig::vehicle_default()).unwrap();
    let r = Plant::new(PlantConfig::robot_default()).unwrap();
    let lv = FeatureLayout::new(v.state_names(), 40, 3).unwrap();
    let lr = FeatureLayout::new(r.state_names(), 40, 3).unwrap();
    assert_eq!((lv.len(), lr.len()), (168, 252));
    assert_eq!(lv.column_names().len(), 168);
    for (mask, kept) in [
        (
            FeatureMask {
                error: false,
                ..Default::default()
            },
            164,
        ),
        (
            FeatureMask {
                curvature: false,
                ..Default::default()
            },
            164,
        ),
        (
            FeatureMask {
                wavelet: false,
                ..Default::default()
            },
            8,
        ),
    ] {
        assert_eq!(mask.keep(&lv).len(), kept);
    }
}

#[test]
fn constant_window_and_displaced_state() {
    let layout = FeatureLayout::new(vec!["p".into(), "q".into()], 40, 3).unwrap();
    let w = DMatrix::from_fn(40, 2, |_, c| [0.3, -2.0][c]);
    let x = DVector::from_vec(vec![0.3, -2.0]);
    let f = extract_features(&layout, &w, &x).unwrap();
    for s in 0..2 {
        assert_eq!(f[layout.curvature_index(s)], 0.0);
        let band = layout.wavelet_range(s);
        assert!(f[band.start + 5..band.end].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(f[layout.error_index(s)], 0.0);
    }
    let moved = DVector::from_vec(vec![0.3 + 0.125, -2.0 - 0.5]);
    let g = extract_features(&layout, &w, &moved).unwrap();
    assert_eq!(g[layout.error_index(0)], 0.125);
    assert_eq!(g[layout.error_index(1)], 0.5);
    let n_err = 2;
    assert_eq!(f[..f.len() - n_err], g[..g.len() - n_err]);
    assert!(extract_features(&layout, &DMatrix::zeros(39, 2), &x).is_err());
}

#[test]
fn rapid_references_curve_more_than_slow_ones() {
    let plant = Plant::new(PlantConfig::vehicle_default()).unwrap();
    let layout = FeatureLayout::new(plant.state_names(), 40, 3).unwrap();
    let slow = plant
        .synthesize(ReferenceKind::Slow, 1000, 1)
        .unwrap()
        .states;
    let rapid = plant
        .synthesize(ReferenceKind::Rapid, 1000, 1)
        .unwrap()
        .states;
    let yaw = 1;
    let mean_curv = |refs: &DMatrix<f64>| {
        let mut acc = 0.0;
        for c in (0..960).step_by(40) {
            let f = extract_features(
                &layout,
                &refs.rows(c, 40).into_owned(),
                &refs.row(c).transpose(),
            )
            .unwrap();
            acc += f[layout.curvature_index(yaw)];
        }
        acc
    };
    assert!(mean_curv(&rapid) > mean_curv(&slow));
}

#[test]
fn synthesis_is_seeded_and_respects_input_bounds() {
    let plant = Plant::new(PlantConfig::vehicle_default()).unwrap();
    let a = plant.synthesize(ReferenceKind::Mixed, 800, 9).unwrap();
    let b = plant.synthesize(ReferenceKind::Mixed, 800, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(
        a.states,
        plant
            .synthesize(ReferenceKind::Mixed, 800, 10)
            .unwrap()
            .states
    );
    let bounds = &plant.config.constraints;
    for k in 0..a.inputs.nrows() {
        let u = a.inputs[(k, 0)];
        assert!(u >= bounds.u_min[0] && u <= bounds.u_max[0]);
        if k > 0 {
            let du = u - a.inputs[(k - 1, 0)];
            assert!(du >= bounds.du_min[0] - 1e-12 && du <= bounds.du_max[0] + 1e-12);
        }
    }
}

#[test]
fn zero_input_process_gives_the_free_response() {
    let plant = Plant::new(PlantConfig::vehicle_default()).unwrap();
    let model = plant.model_at(&DVector::zeros(4), &plant.config.constraints);
    let still = SynthesisSettings {
        input_fraction: 0.0,
        ..Default::default()
    };
    let out = synthesize_references(&model, 200, 4, &SynthesisSchedule::single(still)).unwrap();
    assert!(out.inputs.amax() == 0.0);
    assert!(out.states.amax() == 0.0);
}

#[test]
fn reference_csv_round_trip() {
    let plant = Plant::new(PlantConfig::robot_default()).unwrap();
    let refs = plant
        .synthesize(ReferenceKind::Rapid, 120, 2)
        .unwrap()
        .states;
    let mut buf = Vec::new();
    write_references(&mut buf, &plant.state_names(), &refs).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("x1,x2,theta,v1,v2,omega\n") && text.ends_with('\n'));
    let (names, back) = read_references(buf.as_slice()).unwrap();
    assert_eq!(names, plant.state_names());
    assert_eq!(back, refs);
    assert!(read_references("a,b\n1,2\n3\n".as_bytes()).is_err());
    assert!(read_references("a,b\n1,x\n".as_bytes()).is_err());
}
