//! Bounded Nelder–Mead minimization used by the response-model fits and the
//! acquisition search.

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Bounds { lower, upper }
    }

    pub fn unit(dim: usize) -> Self {
        Bounds::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| *v >= *l && *v <= *u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop once `f_worst − f_best ≤ rel_tol·|f_best| + abs_tol`.
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Initial simplex edge as a fraction of each bound's width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 4000,
            rel_tol: 1e-10,
            abs_tol: 1e-300,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn eval(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], evals: &mut usize) -> f64 {
    *evals += 1;
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead with trial points projected onto `bounds`.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    bounds: &Bounds,
    options: &NelderMeadOptions,
) -> Minimum {
    let n = x0.len();
    assert_eq!(n, bounds.dim());
    let mut evals = 0usize;
    let mut start = x0.to_vec();
    bounds.clamp(&mut start);

    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let width = bounds.upper[i] - bounds.lower[i];
        let mut v = start.clone();
        let step = options.initial_step
            * if width.is_finite() && width > 0.0 {
                width
            } else {
                1.0
            };
        v[i] = if v[i] + step <= bounds.upper[i] {
            v[i] + step
        } else {
            v[i] - step
        };
        bounds.clamp(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex
        .iter()
        .map(|x| eval(&mut f, x, &mut evals))
        .collect();
    let mut converged = false;

    while evals < options.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        if worst - best <= options.rel_tol * best.abs() + options.abs_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            bounds.clamp(&mut p);
            p
        };

        let reflected = along(1.0);
        let fr = eval(&mut f, &reflected, &mut evals);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = eval(&mut f, &expanded, &mut evals);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[n] {
            let p = along(0.5);
            let fp = eval(&mut f, &p, &mut evals);
            (p, fp)
        } else {
            let p = along(-0.5);
            let fp = eval(&mut f, &p, &mut evals);
            (p, fp)
        };
        if fc < values[n].min(fr) {
            simplex[n] = contracted;
            values[n] = fc;
            continue;
        }
        // Shrink towards the best vertex.
        for i in 1..=n {
            let shrunk: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            values[i] = eval(&mut f, &shrunk, &mut evals);
            simplex[i] = shrunk;
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("nonempty simplex");
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evals,
        converged,
    }
}

/// Runs Nelder–Mead from each start, restarting every run from its own
/// optimum until a restart no longer improves it. Returns the best result.
pub fn minimize_multistart(
    mut f: impl FnMut(&[f64]) -> f64,
    starts: &[Vec<f64>],
    bounds: &Bounds,
    options: &NelderMeadOptions,
    max_restarts: usize,
) -> Option<Minimum> {
    let mut best: Option<Minimum> = None;
    for start in starts {
        let mut current = nelder_mead(&mut f, start, bounds, options);
        let mut total = current.evals;
        for _ in 0..max_restarts {
            let next = nelder_mead(&mut f, &current.x, bounds, options);
            total += next.evals;
            let improved = next.value
                < current.value - options.rel_tol * current.value.abs() - options.abs_tol;
            if next.value <= current.value {
                current = next;
            }
            if !improved {
                break;
            }
        }
        current.evals = total;
        if best.as_ref().map_or(true, |b| current.value < b.value) {
            best = Some(current);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let b = Bounds::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let m = minimize_multistart(f, &[vec![-1.2, 1.0]], &b, &NelderMeadOptions::default(), 5)
            .unwrap();
        assert!(
            (m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            m.x
        );
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| (x[0] + 3.0).powi(2) + (x[1] - 0.2).powi(2);
        let b = Bounds::unit(2);
        let m = nelder_mead(f, &[0.5, 0.5], &b, &NelderMeadOptions::default());
        assert!(b.contains(&m.x));
        assert!(m.x[0].abs() < 1e-8);
        assert!((m.x[1] - 0.2).abs() < 1e-5);
    }
}
