//! Box-constrained quantile regression as a linear program.
//!
//! Solves
//!
//! ```text
//! min  tau * sum(r+) + (1 - tau) * sum(r-)
//! s.t. A x + r+ - r- = b,   0 <= x <= 1,   r+, r- >= 0
//! ```
//!
//! with a dense bounded-variable primal simplex. The slack basis (`r+` or
//! `r-` per row depending on the sign of `b`) is feasible from the start, so
//! no phase one is needed. Entering and leaving variables follow Bland's
//! rule. Only the `x` and `r+` columns are stored; every `r-` column is the
//! negated `r+` column of the same row.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("quantile must lie in (0, 1), got {0}")]
    InvalidQuantile(f64),
    #[error("system is not finite")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("simplex did not terminate within {0} iterations")]
    IterationLimit(usize),
    #[error("simplex reported an unbounded direction")]
    Unbounded,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LpError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LpError::Dimension("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Check function `rho_tau(u)`: `tau * u` for `u >= 0`, `(tau - 1) * u` otherwise.
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

/// `sum_i rho_tau(b_i - (A x)_i)`.
pub fn quantile_objective(a: &Matrix, b: &[f64], x: &[f64], tau: f64) -> f64 {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| check_loss(bi - ax, tau)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpOptions {
    /// Iteration budget as a multiple of `rows + cols`.
    pub iteration_factor: usize,
    pub cost_tolerance: f64,
    pub pivot_tolerance: f64,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self { iteration_factor: 50, cost_tolerance: 1.0e-11, pivot_tolerance: 1.0e-11 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    AtLower,
    AtUpper,
}

struct Tableau {
    m: usize,
    n: usize,
    /// `B^-1 [A | I]`, row-major, `m x (n + m)`.
    t: Vec<f64>,
    /// Reduced costs of the stored columns.
    d: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    tau: f64,
}

impl Tableau {
    fn width(&self) -> usize {
        self.n + self.m
    }

    fn upper(&self, var: usize) -> f64 {
        if var < self.n {
            1.0
        } else {
            f64::INFINITY
        }
    }

    fn cost(&self, var: usize) -> f64 {
        if var < self.n {
            0.0
        } else if var < self.n + self.m {
            self.tau
        } else {
            1.0 - self.tau
        }
    }

    /// Stored column and sign for a variable.
    fn stored(&self, var: usize) -> (usize, f64) {
        if var < self.n + self.m {
            (var, 1.0)
        } else {
            (var - self.m, -1.0)
        }
    }

    fn reduced_cost(&self, var: usize) -> f64 {
        if var < self.n + self.m {
            self.d[var]
        } else {
            // c+ + c- = 1 and the columns are negatives of each other.
            1.0 - self.d[var - self.m]
        }
    }

    fn entry(&self, row: usize, var: usize) -> f64 {
        let (col, sign) = self.stored(var);
        sign * self.t[row * self.width() + col]
    }

    fn new(a: &Matrix, b: &[f64], tau: f64) -> Self {
        let (m, n) = (a.rows(), a.cols());
        let w = n + m;
        let mut t = vec![0.0; m * w];
        let mut beta = vec![0.0; m];
        let mut basis = vec![0; m];
        let mut status = vec![Status::AtLower; n + 2 * m];
        for i in 0..m {
            let sign = if b[i] >= 0.0 { 1.0 } else { -1.0 };
            let row = &mut t[i * w..(i + 1) * w];
            for (dst, src) in row[..n].iter_mut().zip(a.row(i)) {
                *dst = sign * src;
            }
            row[n + i] = sign;
            beta[i] = b[i].abs();
            basis[i] = if sign > 0.0 { n + i } else { n + m + i };
            status[basis[i]] = Status::Basic;
        }
        let mut tab = Self { m, n, t, d: vec![0.0; w], beta, basis, status, tau };
        for j in 0..w {
            let mut z = 0.0;
            for i in 0..m {
                z += tab.cost(tab.basis[i]) * tab.t[i * w + j];
            }
            tab.d[j] = tab.cost(j) - z;
        }
        tab
    }

    fn pivot(&mut self, row: usize, enter: usize) {
        let w = self.width();
        let alpha: Vec<f64> = (0..self.m).map(|i| self.entry(i, enter)).collect();
        let d_enter = self.reduced_cost(enter);
        let inv = 1.0 / alpha[row];
        let (head, tail) = self.t.split_at_mut(row * w);
        let (pivot_row, rest) = tail.split_at_mut(w);
        for v in pivot_row.iter_mut() {
            *v *= inv;
        }
        for (i, chunk) in head.chunks_exact_mut(w).chain(rest.chunks_exact_mut(w)).enumerate() {
            let i = if i < row { i } else { i + 1 };
            let f = alpha[i];
            if f != 0.0 {
                for (dst, src) in chunk.iter_mut().zip(pivot_row.iter()) {
                    *dst -= f * src;
                }
            }
        }
        if d_enter != 0.0 {
            for (dj, pj) in self.d.iter_mut().zip(pivot_row.iter()) {
                *dj -= d_enter * pj;
            }
        }
        // Clean up the entering column exactly.
        let (col, sign) = self.stored(enter);
        for i in 0..self.m {
            self.t[i * w + col] = if i == row { sign } else { 0.0 };
        }
        if enter < self.n + self.m {
            self.d[enter] = 0.0;
        } else {
            self.d[col] = 1.0;
        }
    }
}

/// Minimizes `sum rho_tau(b - A x)` over the unit box.
pub fn solve_box_quantile(
    a: &Matrix,
    b: &[f64],
    tau: f64,
    opts: &LpOptions,
) -> Result<QrSolution, LpError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LpError::InvalidQuantile(tau));
    }
    if b.len() != a.rows() {
        return Err(LpError::Dimension(format!("{} rows but {} rhs entries", a.rows(), b.len())));
    }
    if a.data.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(LpError::NonFinite);
    }
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        let x = vec![0.0; n];
        let objective = quantile_objective(a, b, &x, tau);
        return Ok(QrSolution { x, objective, iterations: 0 });
    }

    let mut tab = Tableau::new(a, b, tau);
    let nvars = n + 2 * m;
    let budget = opts.iteration_factor * (m + n);
    let mut iterations = 0;

    loop {
        // Bland: lowest-index improving variable.
        let enter = (0..nvars).find(|&j| match tab.status[j] {
            Status::Basic => false,
            Status::AtLower => tab.reduced_cost(j) < -opts.cost_tolerance,
            Status::AtUpper => tab.reduced_cost(j) > opts.cost_tolerance,
        });
        let Some(enter) = enter else { break };
        if iterations >= budget {
            return Err(LpError::IterationLimit(budget));
        }
        iterations += 1;

        let dir = if tab.status[enter] == Status::AtLower { 1.0 } else { -1.0 };
        let mut step = tab.upper(enter);
        let mut leave: Option<(usize, Status)> = None;
        for i in 0..m {
            let rate = dir * tab.entry(i, enter);
            let var = tab.basis[i];
            let (limit, hit) = if rate > opts.pivot_tolerance {
                (tab.beta[i].max(0.0) / rate, Status::AtLower)
            } else if rate < -opts.pivot_tolerance {
                let ub = tab.upper(var);
                if ub.is_infinite() {
                    continue;
                }
                ((ub - tab.beta[i]).max(0.0) / -rate, Status::AtUpper)
            } else {
                continue;
            };
            let better = match leave {
                None => limit < step,
                Some((r, _)) => limit < step || (limit == step && var < tab.basis[r]),
            };
            if better {
                step = limit;
                leave = Some((i, hit));
            }
        }
        if step.is_infinite() {
            return Err(LpError::Unbounded);
        }

        for i in 0..m {
            let rate = dir * tab.entry(i, enter);
            tab.beta[i] -= rate * step;
        }
        match leave {
            None => {
                tab.status[enter] = if dir > 0.0 { Status::AtUpper } else { Status::AtLower };
            }
            Some((row, hit)) => {
                let leaving = tab.basis[row];
                let entering_value = if dir > 0.0 { step } else { tab.upper(enter) - step };
                tab.pivot(row, enter);
                tab.beta[row] = entering_value;
                tab.basis[row] = enter;
                tab.status[enter] = Status::Basic;
                tab.status[leaving] = hit;
            }
        }
        for (i, v) in tab.beta.iter_mut().enumerate() {
            let ub = if tab.basis[i] < n { 1.0 } else { f64::INFINITY };
            *v = v.clamp(0.0, ub);
        }
    }

    let mut x = vec![0.0; n];
    for (j, xj) in x.iter_mut().enumerate() {
        *xj = match tab.status[j] {
            Status::AtLower => 0.0,
            Status::AtUpper => 1.0,
            Status::Basic => 0.0,
        };
    }
    for (i, &var) in tab.basis.iter().enumerate() {
        if var < n {
            x[var] = tab.beta[i].clamp(0.0, 1.0);
        }
    }
    let objective = quantile_objective(a, b, &x, tau);
    Ok(QrSolution { x, objective, iterations })
}
