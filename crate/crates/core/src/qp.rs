//! Small dense convex-QP primitives shared by the solvers: quadratic forms,
//! box and capped-simplex projections, an exact box-QP block solver, and a
//! projected-gradient reference solver.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("infeasible box: {0}")]
    InfeasibleBox(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `f(u) = 0.5 u' H u + g' u + c` with `H` symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn zero(dim: usize) -> Self {
        Quadratic { h: DMatrix::zeros(dim, dim), g: DVector::zeros(dim), c: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u.transpose() * &self.h * u)[(0, 0)] + self.g.dot(u) + self.c
    }

    pub fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.g
    }

    /// Accumulates `(a' u + b)^2` into the form.
    pub fn add_squared_affine(&mut self, a: &DVector<f64>, b: f64) {
        self.h.ger(2.0, a, a, 1.0);
        self.g.axpy(2.0 * b, a, 1.0);
        self.c += b * b;
    }

    /// Accumulates `w * u' u` (ridge term).
    pub fn add_ridge(&mut self, w: f64) {
        for k in 0..self.dim() {
            self.h[(k, k)] += 2.0 * w;
        }
    }
}

pub fn project_box(u: &mut DVector<f64>, lo: f64, hi: f64) {
    for v in u.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Euclidean projection of `v` onto `{u : lo <= u_j <= hi, sum u = total}`.
///
/// The projection is `u_j = clamp(v_j - nu, lo, hi)` for the scalar `nu`
/// making the sum hit `total`; the sum is monotone in `nu`, so bisection
/// finds it. A final spread over interior coordinates pins the sum to
/// `total` within ~1e-12.
pub fn project_capped_simplex(
    v: &DVector<f64>,
    lo: f64,
    hi: f64,
    total: f64,
) -> Result<DVector<f64>, QpError> {
    let n = v.len();
    if n == 0 {
        return Err(QpError::ShapeMismatch("empty vector".into()));
    }
    let (n_f, eps) = (n as f64, 1e-9);
    if total < n_f * lo - eps || total > n_f * hi + eps {
        return Err(QpError::InfeasibleBox(format!(
            "sum {total} unreachable with {n} coordinates in [{lo}, {hi}]"
        )));
    }
    let sum_at = |nu: f64| -> f64 { v.iter().map(|&x| (x - nu).clamp(lo, hi)).sum() };
    let mut nu_lo = v.min() - hi; // everything at hi: maximal sum
    let mut nu_hi = v.max() - lo; // everything at lo: minimal sum
    for _ in 0..200 {
        let mid = 0.5 * (nu_lo + nu_hi);
        if sum_at(mid) > total {
            nu_lo = mid;
        } else {
            nu_hi = mid;
        }
    }
    let nu = 0.5 * (nu_lo + nu_hi);
    let mut u = DVector::from_iterator(n, v.iter().map(|&x| (x - nu).clamp(lo, hi)));

    // Absorb the bisection residual into strictly interior coordinates.
    for _ in 0..4 {
        let residual = total - u.iter().sum::<f64>();
        if residual.abs() <= 1e-13 * total.abs().max(1.0) {
            break;
        }
        let interior: Vec<usize> =
            (0..n).filter(|&j| u[j] > lo + 1e-9 && u[j] < hi - 1e-9).collect();
        if interior.is_empty() {
            break;
        }
        let share = residual / interior.len() as f64;
        for j in interior {
            u[j] = (u[j] + share).clamp(lo, hi);
        }
    }
    Ok(u)
}

/// Exact minimizer of a strictly convex quadratic over a box, by projected
/// Newton with active-set freezing. Converges in a handful of iterations at
/// the block sizes used here (dimension = horizon).
pub fn solve_box_qp(
    q: &Quadratic,
    lo: f64,
    hi: f64,
    x0: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>, QpError> {
    let n = q.dim();
    if x0.len() != n {
        return Err(QpError::ShapeMismatch(format!("start length {} vs dim {n}", x0.len())));
    }
    let mut x = x0.clone();
    project_box(&mut x, lo, hi);
    let edge = 1e-10;

    for _ in 0..100 {
        let grad = q.grad(&x);
        // KKT residual of the projected-gradient fixed point.
        let mut kkt: f64 = 0.0;
        for j in 0..n {
            let step = (x[j] - grad[j]).clamp(lo, hi) - x[j];
            kkt = kkt.max(step.abs());
        }
        if kkt <= tol {
            return Ok(x);
        }

        let free: Vec<usize> = (0..n)
            .filter(|&j| {
                !((x[j] <= lo + edge && grad[j] > 0.0) || (x[j] >= hi - edge && grad[j] < 0.0))
            })
            .collect();
        if free.is_empty() {
            return Ok(x);
        }

        let k = free.len();
        let mut h_ff = DMatrix::zeros(k, k);
        let mut g_f = DVector::zeros(k);
        for (a, &ja) in free.iter().enumerate() {
            g_f[a] = grad[ja];
            for (b, &jb) in free.iter().enumerate() {
                h_ff[(a, b)] = q.h[(ja, jb)];
            }
        }
        let d_f = match h_ff.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g_f)),
            None => {
                // Near-singular reduced Hessian: fall back to a gradient step.
                let scale = h_ff.diagonal().max().max(1.0);
                -&g_f / scale
            }
        };

        let f_old = q.eval(&x);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = x.clone();
            for (a, &j) in free.iter().enumerate() {
                cand[j] = (cand[j] + alpha * d_f[a]).clamp(lo, hi);
            }
            if q.eval(&cand) <= f_old + 1e-14 * f_old.abs().max(1.0) {
                x = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Ok(x);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct PgSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient descent on a convex quadratic over an arbitrary closed
/// convex set given by its projection operator. Fixed step `1/L` with `L`
/// from power iteration; stops when the projected-gradient fixed-point
/// residual drops below `tol` (infinity norm).
pub fn solve_projected_gradient(
    q: &Quadratic,
    project: impl Fn(&DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> PgSolution {
    let lip = lipschitz_upper_bound(&q.h).max(1e-12);
    let step = 1.0 / lip;
    let mut x = project(x0);
    for it in 0..max_iter {
        let grad = q.grad(&x);
        let next = project(&(&x - step * &grad));
        let shift = (&next - &x).amax();
        x = next;
        if shift <= tol {
            return PgSolution { x, iterations: it + 1, converged: true };
        }
    }
    PgSolution { x, iterations: max_iter, converged: false }
}

/// Largest eigenvalue of a symmetric PSD matrix via power iteration, padded
/// by a small safety factor.
pub fn lipschitz_upper_bound(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = h * &v;
        let norm = w.norm();
        if norm <= 1e-300 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda * 1.01
}
