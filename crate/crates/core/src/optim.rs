//! Small dense optimizers used by the hyperparameter solvers. Objective
//! closures return `None` outside their domain; such points are treated as
//! infinitely bad.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    pub f_tol: f64,
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iter: 2000, f_tol: 1e-20, x_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Nelder-Mead simplex minimization with standard coefficients.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let k = x0.len();
    let eval = |x: &[f64]| f(x).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..k {
        let mut p = x0.to_vec();
        p[j] += step[j];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut idx: Vec<usize> = (0..=k).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();

        let spread = vals[k] - vals[0];
        let size = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.f_tol) || size <= opts.x_tol || vals[0] == 0.0 {
            break;
        }

        let centroid: Vec<f64> = (0..k).map(|j| pts[..k].iter().map(|p| p[j]).sum::<f64>() / k as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..k).map(|j| centroid[j] + t * (pts[k][j] - centroid[j])).collect() };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[k] = xe;
                vals[k] = fe;
            } else {
                pts[k] = xr;
                vals[k] = fr;
            }
            continue;
        }
        if fr < vals[k - 1] {
            pts[k] = xr;
            vals[k] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[k] {
            let xc = along(-0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < vals[k].min(fr) {
            pts[k] = xc;
            vals[k] = fc;
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=k {
            let p: Vec<f64> = (0..k).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
            vals[i] = eval(&p);
            pts[i] = p;
        }
    }
    let best = (0..=k).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    Minimum { x: pts[best].clone(), value: vals[best], iterations }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn step_size(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central-difference Jacobian of a vector function.
pub fn jacobian<F>(f: &F, x: &[f64], rel: f64) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let k = x.len();
    let mut jac: Option<DMatrix<f64>> = None;
    for j in 0..k {
        let h = step_size(x[j], rel);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        let jm = jac.get_or_insert_with(|| DMatrix::zeros(fp.len(), k));
        for i in 0..fp.len() {
            jm[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

#[derive(Debug, Clone)]
pub struct RootOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step for the Jacobian.
    pub jac_step: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 60, jac_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct Root {
    pub x: Vec<f64>,
    pub norm: f64,
    pub iterations: usize,
}

/// Damped Newton iteration on a square system with a numerical Jacobian.
/// After the tolerance is met, up to two more polishing steps are taken
/// while they reduce the residual.
pub fn newton_root<F>(f: F, x0: &[f64], opts: &RootOptions) -> Option<Root>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    let mut nrm = norm(&fx);
    if !nrm.is_finite() {
        return None;
    }
    let mut polish = 0;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if nrm < opts.tol {
            polish += 1;
            if polish > 2 {
                break;
            }
        }
        iterations += 1;
        let jac = match jacobian(&f, &x, opts.jac_step) {
            Some(j) => j,
            None => break,
        };
        let rhs = DVector::from_vec(fx.clone());
        let delta = match jac.clone().lu().solve(&rhs) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => match jac.clone().svd(true, true).solve(&rhs, 1e-14) {
                Ok(d) => d,
                Err(_) => break,
            },
        };
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a - lambda * d).collect();
            if let Some(fn_) = f(&xn) {
                let nn = norm(&fn_);
                if nn.is_finite() && nn < nrm {
                    x = xn;
                    fx = fn_;
                    nrm = nn;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some(Root { x, norm: nrm, iterations })
}

#[derive(Debug, Clone)]
pub struct MaxOptions {
    /// Convergence when `|grad| / max(1, |f|)` falls below this value.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub grad_step: f64,
    pub hess_step: f64,
}

impl Default for MaxOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iter: 100, grad_step: 1e-5, hess_step: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    /// `|grad| / max(1, |f|)`.
    pub relative_gradient: f64,
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
}

/// Central-difference gradient.
pub fn gradient<F>(f: &F, x: &[f64], rel: f64) -> Option<Vec<f64>>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut g = vec![0.0; x.len()];
    for j in 0..x.len() {
        let h = step_size(x[j], rel);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        g[j] = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Some(g)
}

/// Central-difference Hessian.
pub fn hessian<F>(f: &F, x: &[f64], f0: f64, rel: f64) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|&v| step_size(v, rel)).collect();
    let mut hess = DMatrix::zeros(k, k);
    let shifted = |pairs: &[(usize, f64)]| -> Option<f64> {
        let mut y = x.to_vec();
        for &(j, s) in pairs {
            y[j] += s;
        }
        f(&y)
    };
    for i in 0..k {
        let fp = shifted(&[(i, h[i])])?;
        let fm = shifted(&[(i, -h[i])])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = shifted(&[(i, h[i]), (j, h[j])])?;
            let fpm = shifted(&[(i, h[i]), (j, -h[j])])?;
            let fmp = shifted(&[(i, -h[i]), (j, h[j])])?;
            let fmm = shifted(&[(i, -h[i]), (j, -h[j])])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Some(hess)
}

/// Newton ascent with numerical derivatives, a Levenberg shift when the
/// Hessian is not negative definite, and step halving.
pub fn newton_max<F>(f: F, x0: &[f64], opts: &MaxOptions) -> Option<Maximum>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x).filter(|v| v.is_finite())?;
    let mut iterations = 0;
    loop {
        let g = gradient(&f, &x, opts.grad_step)?;
        let hess = hessian(&f, &x, fx, opts.hess_step)?;
        let rel = norm(&g) / fx.abs().max(1.0);
        if rel < opts.grad_tol || iterations >= opts.max_iter {
            return Some(Maximum { x, value: fx, gradient: g, relative_gradient: rel, hessian: hess, iterations });
        }
        iterations += 1;
        let gv = DVector::from_vec(g.clone());
        let neg = -&hess;
        let scale = neg.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        let mut shift = 0.0;
        let mut dir = None;
        for _ in 0..30 {
            let mut a = neg.clone();
            for i in 0..k {
                a[(i, i)] += shift;
            }
            if let Some(ch) = a.cholesky() {
                dir = Some(ch.solve(&gv));
                break;
            }
            shift = if shift == 0.0 { 1e-6 * scale } else { shift * 10.0 };
        }
        let dir = dir.unwrap_or_else(|| gv.clone() / scale);
        let mut lambda = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + lambda * d).collect();
            if let Some(fnew) = f(&xn).filter(|v| v.is_finite()) {
                if fnew >= fx {
                    x = xn;
                    fx = fnew;
                    moved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !moved {
            let g = gradient(&f, &x, opts.grad_step)?;
            let hess = hessian(&f, &x, fx, opts.hess_step)?;
            let rel = norm(&g) / fx.abs().max(1.0);
            return Some(Maximum { x, value: fx, gradient: g, relative_gradient: rel, hessian: hess, iterations });
        }
    }
}
