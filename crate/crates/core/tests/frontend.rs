use proptest::prelude::*;

use earlyvision::io;
use earlyvision::neurophys::{f1_amplitude, Experiment, ResponseCurve};
use earlyvision::stimuli::render_grating;
use earlyvision::subcortical::{
    apply_noise, contrast_normalize, light_adapt, push_pull_identity_check, CellClass, NoiseSpec,
    OpponentChannel, PathwayParams, SubcorticalBlock,
};
use earlyvision::{GratingSpec, Grid, RgbImage, VisualGrid};

fn small_grid() -> VisualGrid {
    VisualGrid::new(2.0, 64).unwrap()
}

#[test]
fn noise_variance_and_independence() {
    let spec = NoiseSpec {
        fano: 0.5,
        ..NoiseSpec::subcortical()
    };
    let trials = 100_000;
    let base = Grid::filled(1, 2, 2.0);
    let mut a = Vec::with_capacity(trials);
    let mut b = Vec::with_capacity(trials);
    for seed in 0..trials as u64 {
        let g = apply_noise(&base, &spec, seed).unwrap();
        a.push(g.get(0, 0));
        b.push(g.get(0, 1));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let var_a = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
    let var_b = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
    assert!((var_a - 1.0).abs() <= 0.03, "{var_a}");
    let cov = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (trials as f64 - 1.0);
    assert!((cov / (var_a * var_b).sqrt()).abs() < 0.02);
}

#[test]
fn achromatic_grating_drives_red_green_channels_with_opposite_signs() {
    let grid = small_grid();
    let block = SubcorticalBlock::tuned(grid).unwrap();
    let frames = render_grating(&GratingSpec::new(2.0, 2.0, 0.8), &grid).unwrap();
    let out = block.forward(&frames.frames[2], None).unwrap();
    let rg = &out[OpponentChannel::PRg.index()];
    let gr = &out[OpponentChannel::PGr.index()];
    assert!(rg.max_abs() > 0.0);
    for (x, y) in rg.as_slice().iter().zip(gr.as_slice()) {
        assert!(
            (x + y).abs() <= 1e-12 * x.abs().max(1e-300)
                || (x - y).abs() <= 1e-12 * x.abs().max(1e-300),
            "{x} {y}"
        );
    }
}

#[test]
fn seeded_forward_is_reproducible() {
    let grid = small_grid();
    let block = SubcorticalBlock::tuned(grid).unwrap();
    let frames = render_grating(&GratingSpec::new(1.5, 3.0, 0.5), &grid).unwrap();
    let noise = NoiseSpec::subcortical();
    let a = block.forward(&frames.frames[0], Some((&noise, 8))).unwrap();
    let b = block.forward(&frames.frames[0], Some((&noise, 8))).unwrap();
    let c = block.forward(&frames.frames[0], Some((&noise, 9))).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn params_and_curves_round_trip() {
    for p in [PathwayParams::tuned_p(), PathwayParams::tuned_m()] {
        assert_eq!(
            io::params_from_json(&io::params_to_json(&p).unwrap()).unwrap(),
            p
        );
    }
    let curve = ResponseCurve::new(
        vec![0.1, 0.7, 7.0],
        vec![1.0 / 3.0, 2e-17, 0.25],
        Experiment::SizeTuning,
    )
    .unwrap();
    let back = io::read_curve_csv(
        io::curve_csv_string(&curve).unwrap().as_bytes(),
        Experiment::SizeTuning,
    )
    .unwrap();
    for (a, b) in curve.f1.iter().zip(&back.f1) {
        assert!((a - b).abs() <= 1e-12);
    }
}

fn grid_strategy() -> impl Strategy<Value = Grid> {
    prop::collection::vec(0.01f64..1.0, 36).prop_map(|v| Grid::from_vec(6, 6, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn light_adaptation_is_bounded(image in grid_strategy(), gamma in 0.01f64..2.0) {
        let la = light_adapt(&image, gamma).unwrap();
        for &v in la.output.as_slice() {
            prop_assert!(v > -0.5 && v < 0.5);
        }
    }

    #[test]
    fn contrast_normalization_is_odd(values in prop::collection::vec(-5.0f64..5.0, 64 * 64)) {
        let grid = small_grid();
        let x = Grid::from_vec(64, 64, values).unwrap();
        let neg = x.map(|v| -v);
        let p = PathwayParams { cell_class: CellClass::M, ..PathwayParams::tuned_m() };
        let a = contrast_normalize(&x, &p, &grid).unwrap();
        let b = contrast_normalize(&neg, &p, &grid).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert_eq!(u.to_bits(), (-v).to_bits());
        }
    }

    #[test]
    fn push_pull_is_identity(bits in prop::collection::vec(any::<u64>(), 100)) {
        let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).map(|v| if v.is_finite() { v } else { 1.0 }).collect();
        let out = push_pull_identity_check(&Grid::from_vec(10, 10, values.clone()).unwrap()).unwrap();
        for (a, b) in out.as_slice().iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f1_ignores_offset_and_scales_linearly(
        a in -100.0f64..100.0, b in 0.0f64..100.0, phi in 0.0f64..6.3, gain in 0.1f64..10.0
    ) {
        let s: Vec<f64> = (0..12)
            .map(|k| a + b * (2.0 * std::f64::consts::PI * k as f64 / 12.0 + phi).sin())
            .collect();
        let f = f1_amplitude(&s).unwrap();
        prop_assert!((f - b).abs() < 1e-9);
        let scaled: Vec<f64> = s.iter().map(|v| gain * v).collect();
        prop_assert!((f1_amplitude(&scaled).unwrap() - gain * f).abs() < 1e-9 * (1.0 + gain * f));
    }

    #[test]
    fn grating_frames_stay_in_unit_range(
        d in 0.0f64..3.0, sf in 0.1f64..10.0, c in 0.0f64..=1.0, theta in 0.0f64..3.14
    ) {
        let spec = GratingSpec { orientation_rad: theta, ..GratingSpec::new(d, sf, c) };
        let frames = render_grating(&spec, &small_grid()).unwrap();
        prop_assert_eq!(frames.frames.len(), 12);
        for f in &frames.frames {
            for p in f.planes() {
                prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn gray_images_are_nulled(level in 0.05f64..0.95) {
        let grid = small_grid();
        let block = SubcorticalBlock::tuned(grid).unwrap();
        let image = RgbImage::gray(Grid::filled(64, 64, level));
        for g in block.forward(&image, None).unwrap() {
            prop_assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }
}
