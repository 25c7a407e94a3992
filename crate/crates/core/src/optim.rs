//! Small box-constrained minimizers: Nelder-Mead for a coarse start and a
//! projected BFGS with central finite-difference gradients for refinement.

#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const FREE: Bounds = Bounds {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    pub simplex_iter: usize,
    pub simplex_step: f64,
    pub param_tol: f64,
    pub grad_tol: f64,
    pub fd_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            simplex_iter: 60,
            simplex_step: 0.5,
            param_tol: 1e-8,
            grad_tol: 1e-6,
            fd_step: 1e-5,
        }
    }
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn project(x: &mut [f64], bounds: &[Bounds]) {
    for (v, b) in x.iter_mut().zip(bounds) {
        *v = b.clamp(*v);
    }
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: &[f64],
    bounds: &[Bounds],
    step: f64,
    max_iter: usize,
) -> (Vec<f64>, f64, usize) {
    let d = x0.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    pts.push(x0.to_vec());
    for j in 0..d {
        let mut p = x0.to_vec();
        p[j] += step;
        if p[j] > bounds[j].upper {
            p[j] = x0[j] - step;
        }
        project(&mut p, bounds);
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| obj.call(p)).collect();
    let mut iters = 0;
    let mut order: Vec<usize> = (0..=d).collect();

    while iters < max_iter {
        iters += 1;
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let best = order[0];
        let worst = order[d];
        let second = order[d.saturating_sub(1)];
        let spread = vals[worst] - vals[best];
        if spread.abs() <= 1e-9 * (1.0 + vals[best].abs()) {
            break;
        }

        let mut centroid = vec![0.0; d];
        for &i in &order[..d] {
            for j in 0..d {
                centroid[j] += pts[i][j] / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..d)
                .map(|j| centroid[j] + t * (pts[worst][j] - centroid[j]))
                .collect();
            project(&mut p, bounds);
            p
        };

        let xr = along(-1.0);
        let fr = obj.call(&xr);
        if fr < vals[best] {
            let xe = along(-2.0);
            let fe = obj.call(&xe);
            if fe < fr {
                pts[worst] = xe;
                vals[worst] = fe;
            } else {
                pts[worst] = xr;
                vals[worst] = fr;
            }
            continue;
        }
        if fr < vals[second] {
            pts[worst] = xr;
            vals[worst] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[worst] {
            let xc = along(-0.5);
            let fc = obj.call(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = obj.call(&xc);
            (xc, fc)
        };
        if fc < vals[worst].min(fr) {
            pts[worst] = xc;
            vals[worst] = fc;
            continue;
        }
        // shrink toward the best vertex
        let xb = pts[best].clone();
        for &i in &order[1..] {
            let mut p: Vec<f64> = (0..d).map(|j| xb[j] + 0.5 * (pts[i][j] - xb[j])).collect();
            project(&mut p, bounds);
            vals[i] = obj.call(&p);
            pts[i] = p;
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (pts[best].clone(), vals[best], iters)
}

fn fd_gradient<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x: &[f64],
    fx: f64,
    bounds: &[Bounds],
    h: f64,
) -> Vec<f64> {
    let d = x.len();
    let mut g = vec![0.0; d];
    let mut probe = x.to_vec();
    for j in 0..d {
        let hj = h * x[j].abs().max(1.0);
        let up_ok = x[j] + hj <= bounds[j].upper;
        let down_ok = x[j] - hj >= bounds[j].lower;
        g[j] = match (up_ok, down_ok) {
            (true, true) => {
                probe[j] = x[j] + hj;
                let fp = obj.call(&probe);
                probe[j] = x[j] - hj;
                let fm = obj.call(&probe);
                (fp - fm) / (2.0 * hj)
            }
            (true, false) => {
                probe[j] = x[j] + hj;
                (obj.call(&probe) - fx) / hj
            }
            (false, true) => {
                probe[j] = x[j] - hj;
                (fx - obj.call(&probe)) / hj
            }
            (false, false) => 0.0,
        };
        probe[j] = x[j];
    }
    g
}

/// Components of `g` that could still move `x` inside the box.
fn free_mask(x: &[f64], g: &[f64], bounds: &[Bounds]) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((&xi, &gi), b)| {
            let at_lower = xi <= b.lower && gi > 0.0;
            let at_upper = xi >= b.upper && gi < 0.0;
            !(at_lower || at_upper)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Minimizes `f` inside the box given by `bounds`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    bounds: &[Bounds],
    opts: &MinimizeOptions,
) -> MinimizeReport {
    let d = x0.len();
    assert_eq!(bounds.len(), d);
    let mut obj = Counted { f, evals: 0 };
    let mut start = x0.to_vec();
    project(&mut start, bounds);

    let (mut x, mut fx, nm_iters) = if opts.simplex_iter > 0 && d > 0 {
        nelder_mead(&mut obj, &start, bounds, opts.simplex_step, opts.simplex_iter)
    } else {
        let fx = obj.call(&start);
        (start, fx, 0)
    };

    let mut hinv = identity(d);
    let mut last_rel_step = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut g = fd_gradient(&mut obj, &x, fx, bounds, opts.fd_step);
    let mut reset_once = false;
    let mut fresh = true;

    while iterations < opts.max_iter {
        let mask = free_mask(&x, &g, bounds);
        let gp: Vec<f64> = g.iter().zip(&mask).map(|(&gi, &m)| if m { gi } else { 0.0 }).collect();
        let gnorm = norm(&gp);
        if gnorm < opts.grad_tol && last_rel_step < opts.param_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // quasi-Newton direction restricted to free coordinates
        let mut dir = vec![0.0; d];
        for i in 0..d {
            if !mask[i] {
                continue;
            }
            for j in 0..d {
                if mask[j] {
                    dir[i] -= hinv[i][j] * gp[j];
                }
            }
        }
        let mut slope: f64 = dir.iter().zip(&gp).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            hinv = identity(d);
            dir = gp.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            fresh = true;
        }
        if fresh {
            // unscaled steepest descent: cap the trial step at unit length
            let len = norm(&dir);
            if len > 1.0 {
                dir.iter_mut().for_each(|v| *v /= len);
                slope /= len;
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            project(&mut trial, bounds);
            // a step below the resolution of x cannot decrease f
            if trial == x {
                break;
            }
            let ft = obj.call(&trial);
            if ft < fx && (ft <= fx + 1e-4 * t * slope || t < 1e-6) {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }

        match accepted {
            Some((xn, fxn)) => {
                let scale = norm(&x).max(1.0);
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                last_rel_step = norm(&s) / scale;
                let gn = fd_gradient(&mut obj, &xn, fxn, bounds, opts.fd_step);
                let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                if fresh {
                    let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
                    let yy: f64 = yv.iter().map(|a| a * a).sum();
                    if sy > 0.0 && yy > 0.0 {
                        hinv = identity(d);
                        hinv.iter_mut().enumerate().for_each(|(i, row)| row[i] = sy / yy);
                    }
                    fresh = false;
                }
                bfgs_update(&mut hinv, &s, &yv);
                x = xn;
                fx = fxn;
                g = gn;
                reset_once = false;
            }
            None => {
                // no decrease along the direction: numerically at the optimum
                // unless a steepest-descent restart helps
                last_rel_step = 0.0;
                if gnorm < opts.grad_tol {
                    converged = true;
                    break;
                }
                if reset_once {
                    converged = gnorm < 100.0 * opts.grad_tol;
                    break;
                }
                hinv = identity(d);
                fresh = true;
                reset_once = true;
            }
        }
    }

    let mask = free_mask(&x, &g, bounds);
    let grad_norm = norm(
        &g.iter()
            .zip(&mask)
            .map(|(&gi, &m)| if m { gi } else { 0.0 })
            .collect::<Vec<_>>(),
    );
    MinimizeReport {
        x,
        f: fx,
        grad_norm,
        converged,
        iterations: nm_iters + iterations,
        evaluations: obj.evals,
    }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64]) {
    let d = s.len();
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    if sy <= 1e-12 * norm(s) * norm(y) || sy <= 0.0 {
        return;
    }
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..d {
        for j in 0..d {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
