//! Online identification of the neighbor-coupling matrix and autoregressive
//! forecasting of the model coefficients over the prediction horizon.
//!
//! Each agent learns its own transfer matrix recursively from measured counts
//! and the controls its neighbors reported, with a ridge penalty that keeps
//! successive estimates close. Future coefficient matrices are extrapolated
//! entrywise: the structurally possible entries are flattened into a vector,
//! a scalar-weight autoregression is fit online to that vector series, and
//! forecasts are fed back as inputs for the next step out.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient history: have {have} samples, need {need}")]
    InsufficientHistory { have: usize, need: usize },
}

// ---------------------------------------------------------------------------
// Recursive ridge estimator
// ---------------------------------------------------------------------------

/// Recursive estimator for the coupling matrix mapping stacked neighbor
/// controls to inflow. Each update solves the one-step problem
///
/// ```text
/// minimize  ||v - C z||^2 + mu * ||C - C_prev||_F^2
/// ```
///
/// where `v` is the inflow attributed to neighbors this step. The minimizer
/// is `C_prev + (v - C_prev z) w^T` with `(mu I + z z^T) w = z`, realized via
/// a Cholesky solve.
#[derive(Debug, Clone)]
pub struct RecursiveRidge {
    c_hat: DMatrix<f64>,
    mu: f64,
}

impl RecursiveRidge {
    pub fn new(rows: usize, cols: usize, mu: f64) -> Self {
        assert!(mu > 0.0, "ridge weight must be positive");
        RecursiveRidge { c_hat: DMatrix::zeros(rows, cols), mu }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c_hat
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// One recursive update from the measured state transition:
    /// `v = x_now - x_prev + B_prev u_prev` is the change explained by
    /// neighbor inflow, `z_prev` the stacked neighbor controls that caused it.
    pub fn update(
        &mut self,
        x_now: &DVector<f64>,
        x_prev: &DVector<f64>,
        b_prev: &DMatrix<f64>,
        u_prev: &DVector<f64>,
        z_prev: &DVector<f64>,
    ) -> Result<(), EstimationError> {
        let (rows, cols) = self.c_hat.shape();
        if x_now.len() != rows || x_prev.len() != rows {
            return Err(EstimationError::ShapeMismatch(format!(
                "state length {} / {} for {rows}-row estimate",
                x_now.len(),
                x_prev.len()
            )));
        }
        if b_prev.nrows() != rows || b_prev.ncols() != u_prev.len() {
            return Err(EstimationError::ShapeMismatch(format!(
                "outflow term {}x{} against control length {}",
                b_prev.nrows(),
                b_prev.ncols(),
                u_prev.len()
            )));
        }
        if z_prev.len() != cols {
            return Err(EstimationError::ShapeMismatch(format!(
                "neighbor control length {} for {cols}-column estimate",
                z_prev.len()
            )));
        }
        let v = x_now - x_prev + b_prev * u_prev;
        let residual = &v - &self.c_hat * z_prev;
        let mut gram = DMatrix::identity(cols, cols) * self.mu;
        gram.ger(1.0, z_prev, z_prev, 1.0);
        let chol = gram
            .cholesky()
            .expect("mu I + z z^T is positive definite for mu > 0");
        let w = chol.solve(z_prev);
        self.c_hat.ger(1.0, &residual, &w, 1.0);
        Ok(())
    }
}

/// The per-update objective the recursive ridge step minimizes; exposed so
/// tests can verify optimality against perturbed candidates.
pub fn ridge_objective(
    candidate: &DMatrix<f64>,
    previous: &DMatrix<f64>,
    v: &DVector<f64>,
    z: &DVector<f64>,
    mu: f64,
) -> f64 {
    let fit = v - candidate * z;
    let drift = candidate - previous;
    fit.norm_squared() + mu * drift.norm_squared()
}

// ---------------------------------------------------------------------------
// Pattern flattening
// ---------------------------------------------------------------------------

/// Extracts `mat` at the given (row, col) positions, in pattern order.
pub fn flatten_by_pattern(mat: &DMatrix<f64>, pattern: &[(usize, usize)]) -> DVector<f64> {
    DVector::from_iterator(pattern.len(), pattern.iter().map(|&(r, c)| mat[(r, c)]))
}

/// Rebuilds a matrix from pattern-ordered values; entries off the pattern are
/// exactly zero.
pub fn matrix_from_pattern(
    rows: usize,
    cols: usize,
    pattern: &[(usize, usize)],
    values: &DVector<f64>,
) -> DMatrix<f64> {
    assert_eq!(pattern.len(), values.len(), "pattern/value length mismatch");
    let mut mat = DMatrix::zeros(rows, cols);
    for (&(r, c), &v) in pattern.iter().zip(values.iter()) {
        mat[(r, c)] = v;
    }
    mat
}

// ---------------------------------------------------------------------------
// Autoregressive series forecaster
// ---------------------------------------------------------------------------

/// Online autoregression over a vector series with shared scalar weights:
/// the next vector is predicted as `sum_q w_q * v(k-q)` and the weights adapt
/// by a normalized-gradient step on each observed vector.
#[derive(Debug, Clone)]
pub struct ArSeries {
    order: usize,
    delta: f64,
    /// `weights[q-1]` multiplies the q-th most recent vector.
    weights: DVector<f64>,
    /// Most recent last; capped at `order` entries.
    history: VecDeque<DVector<f64>>,
    dim: usize,
    last_error: f64,
}

impl ArSeries {
    pub fn new(dim: usize, order: usize, delta: f64) -> Self {
        assert!((2..=7).contains(&order), "autoregression order must be in 2..=7");
        assert!(delta > 0.0 && delta <= 1.0, "normalization offset must be in (0, 1]");
        let mut weights = DVector::zeros(order);
        weights[0] = 1.0;
        ArSeries { order, delta, weights, history: VecDeque::new(), dim, last_error: 0.0 }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Overrides the adaptive weights; intended for reproducing a known
    /// forecaster state.
    pub fn set_weights(&mut self, weights: DVector<f64>) {
        assert_eq!(weights.len(), self.order, "weight length must equal the order");
        self.weights = weights;
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Magnitude of the prediction error at the most recent observation.
    pub fn last_error(&self) -> f64 {
        self.last_error
    }

    /// Feeds the newly observed vector: if enough history is buffered, the
    /// weights first adapt toward predicting this vector from the past ones;
    /// either way the vector joins the history.
    pub fn observe(&mut self, latest: DVector<f64>) -> Result<(), EstimationError> {
        if latest.len() != self.dim {
            return Err(EstimationError::ShapeMismatch(format!(
                "observed vector length {} for series dimension {}",
                latest.len(),
                self.dim
            )));
        }
        if self.history.len() >= self.order {
            // Regressor rows: most recent first.
            let predicted = self.predict_from(self.history.iter());
            let error = &latest - &predicted;
            self.last_error = error.amax();
            let norm_sq: f64 = self
                .history
                .iter()
                .rev()
                .take(self.order)
                .map(|v| v.norm_squared())
                .sum();
            let scale = 1.0 / (self.delta + norm_sq.sqrt());
            // weights[q-1] += scale * <v(k-q), error>
            for (q, past) in self.history.iter().rev().take(self.order).enumerate() {
                self.weights[q] += scale * past.dot(&error);
            }
        }
        self.history.push_back(latest);
        if self.history.len() > self.order {
            self.history.pop_front();
        }
        Ok(())
    }

    /// Forecasts `count` steps ahead, feeding each forecast back as input to
    /// the next (so the prediction rolls forward hierarchically).
    pub fn forecast(&self, count: usize) -> Result<Vec<DVector<f64>>, EstimationError> {
        if self.history.len() < self.order {
            return Err(EstimationError::InsufficientHistory {
                have: self.history.len(),
                need: self.order,
            });
        }
        let mut window: Vec<DVector<f64>> = self.history.iter().cloned().collect();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let next = self.predict_from(window.iter());
            window.push(next.clone());
            window.remove(0);
            out.push(next);
        }
        Ok(out)
    }

    fn predict_from<'a>(&self, window: impl DoubleEndedIterator<Item = &'a DVector<f64>>) -> DVector<f64> {
        let mut next = DVector::zeros(self.dim);
        for (q, past) in window.rev().take(self.order).enumerate() {
            next.axpy(self.weights[q], past, 1.0);
        }
        next
    }
}

// ---------------------------------------------------------------------------
// Paired coefficient forecaster
// ---------------------------------------------------------------------------

/// Forecasts the outflow and coupling matrices over a horizon by running one
/// autoregression per matrix over its structurally possible entries. The
/// reconstruction keeps every other entry at zero, so forecasts never invent
/// couplings the topology forbids.
#[derive(Debug, Clone)]
pub struct CoefficientForecaster {
    rows: usize,
    b_cols: usize,
    c_cols: usize,
    b_pattern: Vec<(usize, usize)>,
    c_pattern: Vec<(usize, usize)>,
    b_series: ArSeries,
    c_series: ArSeries,
}

/// Forecasted coefficient sequences for steps `k+1 .. k+count`; `held` is set
/// when history was too short and the current matrices were held instead.
#[derive(Debug, Clone)]
pub struct CoefficientForecast {
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub held: bool,
}

impl CoefficientForecaster {
    pub fn new(
        rows: usize,
        b_cols: usize,
        c_cols: usize,
        b_pattern: Vec<(usize, usize)>,
        c_pattern: Vec<(usize, usize)>,
        order: usize,
        delta: f64,
    ) -> Self {
        let b_series = ArSeries::new(b_pattern.len(), order, delta);
        let c_series = ArSeries::new(c_pattern.len(), order, delta);
        CoefficientForecaster { rows, b_cols, c_cols, b_pattern, c_pattern, b_series, c_series }
    }

    pub fn b_series(&self) -> &ArSeries {
        &self.b_series
    }

    pub fn c_series(&self) -> &ArSeries {
        &self.c_series
    }

    /// Feeds the step-k matrices (measured outflow matrix, current coupling
    /// estimate) into both series.
    pub fn observe(
        &mut self,
        b_now: &DMatrix<f64>,
        c_now: &DMatrix<f64>,
    ) -> Result<(), EstimationError> {
        self.check_shapes(b_now, c_now)?;
        self.b_series.observe(flatten_by_pattern(b_now, &self.b_pattern))?;
        self.c_series.observe(flatten_by_pattern(c_now, &self.c_pattern))?;
        Ok(())
    }

    /// Forecasts the matrices for steps `k+1 .. k+count`. With too little
    /// history the current matrices are held constant and `held` is flagged,
    /// so callers always get usable sequences.
    pub fn forecast_or_hold(
        &self,
        b_now: &DMatrix<f64>,
        c_now: &DMatrix<f64>,
        count: usize,
    ) -> CoefficientForecast {
        debug_assert!(self.check_shapes(b_now, c_now).is_ok());
        match (self.b_series.forecast(count), self.c_series.forecast(count)) {
            (Ok(b_vals), Ok(c_vals)) => CoefficientForecast {
                b: b_vals
                    .iter()
                    .map(|v| matrix_from_pattern(self.rows, self.b_cols, &self.b_pattern, v))
                    .collect(),
                c: c_vals
                    .iter()
                    .map(|v| matrix_from_pattern(self.rows, self.c_cols, &self.c_pattern, v))
                    .collect(),
                held: false,
            },
            _ => CoefficientForecast {
                b: vec![b_now.clone(); count],
                c: vec![c_now.clone(); count],
                held: true,
            },
        }
    }

    fn check_shapes(
        &self,
        b_now: &DMatrix<f64>,
        c_now: &DMatrix<f64>,
    ) -> Result<(), EstimationError> {
        if b_now.shape() != (self.rows, self.b_cols) {
            return Err(EstimationError::ShapeMismatch(format!(
                "outflow matrix {:?}, expected {:?}",
                b_now.shape(),
                (self.rows, self.b_cols)
            )));
        }
        if c_now.shape() != (self.rows, self.c_cols) {
            return Err(EstimationError::ShapeMismatch(format!(
                "coupling matrix {:?}, expected {:?}",
                c_now.shape(),
                (self.rows, self.c_cols)
            )));
        }
        Ok(())
    }
}
