use earlyvision::neurophys::{MeasuredProperties, PropertySet};
use earlyvision::subcortical::{CellClass, PathwayParams};
use earlyvision::tuner::{
    gp_suggest, loss, property_loss, sobol_init, sobol_points, tune, Acquisition, Dimension,
    SearchSpace, TuneConfig,
};

fn unit_space(dim: usize) -> SearchSpace {
    SearchSpace {
        dims: (0..dim)
            .map(|i| Dimension {
                name: format!("x{i}"),
                lower: 0.0,
                upper: 1.0,
            })
            .collect(),
        cell_class: CellClass::P,
    }
}

#[test]
fn reference_losses_are_frozen() {
    // Six squared log2 ratios between the two columns, evaluated by hand.
    let direct = |a: [f64; 6], b: [f64; 6]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x / y).log2().powi(2))
            .sum::<f64>()
    };
    for (class, frozen) in [
        (CellClass::P, 5.572480091629281),
        (CellClass::M, 3.2199575249212264),
    ] {
        let tuned = PropertySet::reported_tuned(class);
        let targets = PropertySet::reference_targets(class);
        assert!((direct(tuned.to_array(), targets.to_array()) - frozen).abs() < 1e-12);
        assert!((property_loss(&tuned, &targets).unwrap() - frozen).abs() < 1e-12);
    }
}

#[test]
fn failed_properties_cost_the_penalty() {
    let targets = PropertySet::reference_targets(CellClass::M);
    let mut m = MeasuredProperties::from(targets);
    assert_eq!(loss(&m, &targets).unwrap(), 0.0);
    m.center_radius_deg = Some(-1.0);
    m.suppression_index = None;
    assert_eq!(loss(&m, &targets).unwrap(), 32.0);
}

#[test]
fn sobol_points_are_balanced() {
    for n in [16usize, 64, 256] {
        for seed in [None, Some(3)] {
            let pts = sobol_points(7, n, seed).unwrap();
            for d in 0..7 {
                let lower = pts.iter().filter(|p| p[d] < 0.5).count() as i64;
                assert!((lower - n as i64 / 2).abs() <= 1, "n {n} dim {d}: {lower}");
            }
        }
    }
}

#[test]
fn sobol_init_is_seeded_and_inside_the_box() {
    let space = SearchSpace::default_for(CellClass::M);
    let a = sobol_init(&space, 64, 9).unwrap();
    assert_eq!(a, sobol_init(&space, 64, 9).unwrap());
    assert_ne!(a, sobol_init(&space, 64, 10).unwrap());
    for p in &a {
        for (v, d) in p.iter().zip(&space.dims) {
            assert!(*v >= d.lower && *v <= d.upper, "{} = {v}", d.name);
        }
    }
}

#[test]
fn single_point_history_explores() {
    let space = unit_space(2);
    let s = gp_suggest(
        &[vec![0.4, 0.6]],
        &[1.0],
        &space,
        Acquisition::Ei,
        1.96,
        0.01,
        0,
    )
    .unwrap();
    assert_ne!(s.x, vec![0.4, 0.6]);
    assert!(s.x.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn suggestions_are_reproducible() {
    let space = unit_space(2);
    let points = vec![
        vec![0.1, 0.2],
        vec![0.7, 0.4],
        vec![0.5, 0.9],
        vec![0.3, 0.3],
    ];
    let losses: Vec<f64> = points
        .iter()
        .map(|p| (p[0] - 0.6f64).powi(2) + (p[1] - 0.2f64).powi(2))
        .collect();
    for acq in Acquisition::ALL {
        let a = gp_suggest(&points, &losses, &space, acq, 1.96, 0.01, 5).unwrap();
        let b = gp_suggest(&points, &losses, &space, acq, 1.96, 0.01, 5).unwrap();
        assert_eq!(a, b);
        assert!(!a.fallback);
    }
}

#[test]
fn locates_one_dimensional_quadratic_minimum() {
    let space = unit_space(1);
    let f = |x: f64| (x - 0.3).powi(2);
    let mut points: Vec<Vec<f64>> = sobol_init(&space, 4, 1).unwrap();
    let mut losses: Vec<f64> = points.iter().map(|p| f(p[0])).collect();
    while points.len() < 20 {
        let acq = Acquisition::ALL[points.len() % 3];
        let s = gp_suggest(
            &points,
            &losses,
            &space,
            acq,
            1.96,
            0.01,
            points.len() as u64,
        )
        .unwrap();
        losses.push(f(s.x[0]));
        points.push(s.x);
    }
    let best = (0..20)
        .min_by(|&a, &b| losses[a].total_cmp(&losses[b]))
        .unwrap();
    assert!((points[best][0] - 0.3).abs() <= 0.02, "{:?}", points[best]);
}

/// Smooth stand-in for the measurement: six positive properties of a
/// parameter point.
fn synthetic_properties(p: &PathwayParams) -> MeasuredProperties {
    MeasuredProperties::from(PropertySet::from_array([
        p.r_c * (1.0 + 0.2 * p.gamma),
        p.r_s * (1.0 + 5.0 * p.k_ratio.abs()),
        p.r_c + 0.3 * p.r_cn,
        p.r_s + p.r_cn,
        0.9 * p.n_cn / (p.n_cn + p.c50),
        0.05 + 0.4 * p.gamma / 2.0,
    ]))
}

#[test]
fn recovers_a_planted_optimum() {
    let space = SearchSpace::default_for(CellClass::P);
    let planted = space.to_params(&space.from_unit(&[0.3, 0.6, 0.45, 0.7, 0.2, 0.35, 0.8]));
    let targets = synthetic_properties(&planted).complete().unwrap();
    let config = TuneConfig::new(targets, 3);
    let mut seen = 0;
    let run = tune(
        &space,
        &config,
        |p| Ok(synthetic_properties(p)),
        |i, _| seen = i + 1,
    )
    .unwrap();
    assert_eq!(seen, config.n_evals);
    assert_eq!(run.history.len(), config.n_evals);
    let min = run
        .history
        .iter()
        .map(|e| e.loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(run.best_loss, min);
    assert!(run.best_loss < 0.05, "best loss {}", run.best_loss);
    let init_best = run.history[..config.n_init]
        .iter()
        .map(|e| e.loss)
        .fold(f64::INFINITY, f64::min);
    assert!(run.best_loss < init_best);
}

#[test]
fn evaluation_errors_are_recorded_not_fatal() {
    let space = SearchSpace::default_for(CellClass::P);
    let mut config = TuneConfig::new(PropertySet::reference_targets(CellClass::P), 0);
    config.n_evals = 20;
    config.n_init = 8;
    let run = tune(
        &space,
        &config,
        |_| Err(earlyvision::Error::ZeroMeanResponse),
        |_, _| {},
    )
    .unwrap();
    assert!(run
        .history
        .iter()
        .all(|e| e.error.is_some() && e.loss == 6.0 * 16.0));
    // With no information in the losses every proposal is a Sobol fallback.
    assert!(run.history[8..].iter().all(|e| e.fallback));
}
