//! Bound-constrained derivative-free maximization.
//!
//! The main loop is a trust-region method on a quadratic model. Each
//! iteration interpolates `2n + 1` points (the center and one point on
//! each side along every coordinate) for the gradient and the diagonal
//! curvature; off-diagonal curvature is carried between iterations with a
//! least-change symmetric secant update. When the model cannot be built
//! (an interpolation point is infeasible) the search falls back to a
//! bounded Nelder-Mead from the best point found.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub initial_radius: f64,
    pub min_radius: f64,
    pub max_evals: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { initial_radius: 0.5, min_radius: 1e-6, max_evals: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub used_fallback: bool,
}

struct Counted<'a, F> {
    f: &'a mut F,
    lo: &'a [f64],
    hi: &'a [f64],
    evals: usize,
    best_x: Vec<f64>,
    best: f64,
}

impl<F: FnMut(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        debug_assert!(x.iter().zip(self.lo.iter().zip(self.hi)).all(|(v, (l, h))| v >= l && v <= h));
        self.evals += 1;
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        if v > self.best {
            self.best = v;
            self.best_x = x.to_vec();
        }
        v
    }
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Maximizes `f` over the box `[lo, hi]` starting from `x0` (clipped into the box).
pub fn maximize_box<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: OptimOptions,
) -> OptimResult {
    let n = x0.len();
    assert!(lo.len() == n && hi.len() == n && lo.iter().zip(hi).all(|(l, h)| l <= h));
    let mut x = x0.to_vec();
    clip(&mut x, lo, hi);
    let mut c = Counted { f: &mut f, lo, hi, evals: 0, best_x: x.clone(), best: f64::NEG_INFINITY };
    let mut fx = c.eval(&x);
    let mut radius = opts.initial_radius;
    let mut converged = false;
    let mut model_failed = !fx.is_finite();

    // full model Hessian, row-major; the diagonal is refreshed every pass
    let mut hess = vec![0.0; n * n];
    let mut last: Option<(Vec<f64>, Vec<f64>)> = None;
    while !model_failed && c.evals + 2 * n + 1 <= opts.max_evals {
        if radius < opts.min_radius {
            converged = true;
            break;
        }
        // per-coordinate three-point quadratic
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        for i in 0..n {
            let up = (hi[i] - x[i]).min(radius);
            let down = (x[i] - lo[i]).min(radius);
            let (a, b) = if up > 0.0 && down > 0.0 {
                (-down, up)
            } else if up > 0.0 {
                (0.5 * up, up)
            } else if down > 0.0 {
                (-down, -0.5 * down)
            } else {
                continue;
            };
            let mut xa = x.clone();
            xa[i] += a;
            let mut xb = x.clone();
            xb[i] += b;
            xa[i] = xa[i].clamp(lo[i], hi[i]);
            xb[i] = xb[i].clamp(lo[i], hi[i]);
            let (fa, fb) = (c.eval(&xa), c.eval(&xb));
            if !(fa.is_finite() && fb.is_finite()) {
                model_failed = true;
                break;
            }
            // q(t) = fx + g t + ½ h t², through (a, fa), (b, fb)
            let (da, db) = (fa - fx, fb - fx);
            h[i] = 2.0 * (db / b - da / a) / (b - a);
            g[i] = da / a - 0.5 * h[i] * a;
        }
        if model_failed {
            break;
        }
        if c.best > fx {
            // an interpolation point beat the center: recenter there
            x = c.best_x.clone();
            fx = c.best;
            continue;
        }
        if let Some((x0, g0)) = &last {
            let dx: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = g.iter().zip(g0).map(|(a, b)| a - b).collect();
            secant_update(&mut hess, n, &dx, &dg);
        }
        for i in 0..n {
            hess[i * n + i] = h[i];
        }
        last = Some((x.clone(), g.clone()));
        let s = model_step(&hess, &g, radius, &x, lo, hi);
        let h = &hess;
        let predicted: f64 =
            (0..n).map(|i| g[i] * s[i] + 0.5 * s[i] * (0..n).map(|k| h[i * n + k] * s[k]).sum::<f64>()).sum();
        if !(predicted > 0.0) || s.iter().all(|v| v.abs() < 1e-15) {
            radius *= 0.5;
            continue;
        }
        let mut xn: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        clip(&mut xn, lo, hi);
        let fn_ = c.eval(&xn);
        let rho = (fn_ - fx) / predicted;
        let at_edge = s.iter().any(|v| (v.abs() - radius).abs() < 1e-12 * radius.max(1.0));
        if fn_.is_finite() && rho > 0.0 {
            x = xn;
            fx = fn_;
        }
        if !fn_.is_finite() || rho < 0.25 {
            radius *= 0.5;
        } else if rho > 0.75 && at_edge {
            radius = (radius * 2.0).min(4.0);
        }
        if c.best > fx {
            x = c.best_x.clone();
            fx = c.best;
        }
    }

    let mut used_fallback = false;
    if model_failed && c.evals < opts.max_evals {
        used_fallback = true;
        let start = c.best_x.clone();
        converged = nelder_mead(&mut c, &start, opts.initial_radius.max(radius), opts);
    }
    let (x, value) = (c.best_x.clone(), c.best);
    OptimResult { x, value, evaluations: c.evals, converged, used_fallback }
}

/// Powell's symmetric Broyden update of `b` so that `b·s = y` while
/// changing `b` as little as possible in Frobenius norm.
fn secant_update(b: &mut [f64], n: usize, s: &[f64], y: &[f64]) {
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return;
    }
    let r: Vec<f64> = (0..n).map(|i| y[i] - (0..n).map(|k| b[i * n + k] * s[k]).sum::<f64>()).collect();
    let rs: f64 = r.iter().zip(s).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for k in 0..n {
            b[i * n + k] += (r[i] * s[k] + s[i] * r[k]) / ss - rs * s[i] * s[k] / (ss * ss);
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        b.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Approximate maximizer of `gᵀs + ½sᵀBs` over `|s|∞ ≤ radius` inside
/// the box: a Levenberg-damped Newton step, with the damping raised until
/// the step fits the trust region.
fn model_step(b: &[f64], g: &[f64], radius: f64, x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = g.len();
    let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(gmax / radius, f64::max).max(1e-300);
    let mut lambda = 0.0;
    for _ in 0..200 {
        // (λI - B) s = g
        let a = nalgebra::DMatrix::from_fn(n, n, |i, k| if i == k { lambda - b[i * n + k] } else { -b[i * n + k] });
        if let Some(ch) = a.cholesky() {
            let s = ch.solve(&nalgebra::DVector::from_column_slice(g));
            if s.iter().all(|v| v.is_finite()) && s.amax() <= radius * (1.0 + 1e-12) {
                return (0..n).map(|i| s[i].clamp(lo[i] - x[i], hi[i] - x[i])).collect();
            }
        }
        lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 2.0 };
    }
    // steepest ascent to the trust-region edge
    let gmax = gmax.max(1e-300);
    (0..n).map(|i| (g[i] / gmax * radius).clamp(lo[i] - x[i], hi[i] - x[i])).collect()
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(c: &mut Counted<'_, F>, start: &[f64], size: f64, opts: OptimOptions) -> bool {
    let n = start.len();
    let (lo, hi) = (c.lo.to_vec(), c.hi.to_vec());
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = c.eval(start);
    simplex.push((start.to_vec(), f0));
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += if v[i] + size <= hi[i] { size } else { -size };
        clip(&mut v, &lo, &hi);
        let fv = c.eval(&v);
        simplex.push((v, fv));
    }
    while c.evals < opts.max_evals {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let spread = (1..=n)
            .map(|k| simplex[k].0.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread < opts.min_radius {
            return true;
        }
        let centroid: Vec<f64> = (0..n).map(|i| simplex[..n].iter().map(|p| p.0[i]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            let mut v: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c0, w)| c0 + t * (c0 - w)).collect();
            clip(&mut v, &lo, &hi);
            v
        };
        let xr = along(1.0);
        let fr = c.eval(&xr);
        if fr > simplex[0].1 {
            let xe = along(2.0);
            let fe = c.eval(&xe);
            simplex[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = along(-0.5);
            let fc = c.eval(&xc);
            if fc > worst.1 {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    let v: Vec<f64> = p.0.iter().zip(&best).map(|(a, b)| b + 0.5 * (a - b)).collect();
                    let fv = c.eval(&v);
                    *p = (v, fv);
                }
            }
        }
    }
    false
}
