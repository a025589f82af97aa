//! Dense numeric kernels: linear solves, a small simplex LP solver, CTMC
//! stationary distributions and the Erlang-C queueing probability.
//!
//! Everything here is sized for desk-scale instances (tens of states, a few
//! hundred LP columns) and favours exactness over speed.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Pivot magnitude (relative to the largest entry) below which a system is
/// declared singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Reduced-cost and feasibility tolerance used by the simplex solver.
pub const LP_TOL: f64 = 1e-9;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row vectors. All rows must have the same length
    /// and every entry must be finite.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * cols);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != cols {
                return Err(invalid(format!("row {i} has {} entries, expected {cols}", row.len())));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("row {i} has a non-finite entry")));
            }
            data.extend(row);
        }
        Ok(Self { rows: n, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "dimension mismatch in mul_vec");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Row vector times matrix: `x^T A`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "dimension mismatch in vec_mul");
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(invalid(format!(
            "solve_linear needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if b.len() != n {
        return Err(invalid(format!("right-hand side has length {}, expected {n}", b.len())));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv, piv_abs) =
            (col..n)
                .map(|r| (r, m[(r, col)].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs < PIVOT_TOL * scale {
            return Err(Error::Singular { pivot: piv_abs });
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(piv * n + j, col * n + j);
            }
            x.swap(piv, col);
        }
        let p = m[(col, col)];
        for r in col + 1..n {
            let f = m[(r, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m[(col, j)];
                m[(r, j)] -= f * v;
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for j in col + 1..n {
            acc -= m[(col, j)] * x[j];
        }
        x[col] = acc / m[(col, col)];
    }
    Ok(x)
}

/// A linear program `max c·x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  x >= 0`.
#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub eq: Vec<(Vec<f64>, f64)>,
    pub ub: Vec<(Vec<f64>, f64)>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        Self {
            objective,
            ..Self::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_eq(&mut self, row: Vec<f64>, rhs: f64) -> &mut Self {
        self.eq.push((row, rhs));
        self
    }

    pub fn add_ub(&mut self, row: Vec<f64>, rhs: f64) -> &mut Self {
        self.ub.push((row, rhs));
        self
    }

    /// Largest constraint violation of `x`, relative to `1 + |rhs|`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let dot = |row: &[f64]| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let eq = self.eq.iter().map(|(row, b)| (dot(row) - b).abs() / (1.0 + b.abs()));
        let ub = self.ub.iter().map(|(row, b)| (dot(row) - b).max(0.0) / (1.0 + b.abs()));
        let nonneg = x.iter().map(|v| (-v).max(0.0));
        eq.chain(ub).chain(nonneg).fold(0.0, f64::max)
    }
}

/// Optimal basic feasible solution of a [`LinearProgram`].
#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    pub values: Vec<f64>,
    /// Original variables that are basic at the optimum, ascending.
    pub basis: Vec<usize>,
}

struct Tableau {
    /// `rows x (cols + 1)`; the last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (r, other) in self.t.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let f = other[col];
            if f != 0.0 {
                for (v, pv) in other.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                other[col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    fn reduced_cost(&self, cost: &[f64], j: usize) -> f64 {
        cost[j]
            - self
                .basis
                .iter()
                .zip(&self.t)
                .map(|(&b, row)| cost[b] * row[j])
                .sum::<f64>()
    }

    fn objective(&self, cost: &[f64]) -> f64 {
        self.basis.iter().enumerate().map(|(r, &b)| cost[b] * self.rhs(r)).sum()
    }

    /// Primal simplex with Bland's rule over columns `0..active_cols`.
    fn maximize(&mut self, cost: &[f64], active_cols: usize) -> Result<()> {
        let max_iters = 50_000;
        for _ in 0..max_iters {
            let entering = (0..active_cols)
                .filter(|j| !self.basis.contains(j))
                .find(|&j| self.reduced_cost(cost, j) > LP_TOL);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.t.len() {
                let a = self.t[r][col];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((br, bratio)) => {
                            if ratio < bratio - 1e-12 || (ratio <= bratio + 1e-12 && self.basis[r] < self.basis[br]) {
                                Some((r, ratio))
                            } else {
                                Some((br, bratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Err(Error::LpUnbounded);
            };
            self.pivot(row, col);
        }
        Err(invalid("simplex iteration limit reached"))
    }
}

/// Maximizes a linear program with the two-phase dense simplex method.
pub fn lp_maximize(lp: &LinearProgram) -> Result<LpSolution> {
    let n = lp.num_vars();
    if n == 0 {
        return Err(invalid("linear program has no variables"));
    }
    for (row, b) in lp.eq.iter().chain(&lp.ub) {
        if row.len() != n {
            return Err(invalid(format!(
                "constraint row has {} coefficients, expected {n}",
                row.len()
            )));
        }
        if !b.is_finite() || row.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite constraint data"));
        }
    }
    let m_ub = lp.ub.len();
    let m = lp.eq.len() + m_ub;

    // Column layout: originals, slacks, artificials.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut needs_artificial = Vec::with_capacity(m);
    let mut slack_basis = Vec::with_capacity(m);
    for (k, (row, b)) in lp.ub.iter().enumerate() {
        let mut r = vec![0.0; n + m_ub];
        r[..n].copy_from_slice(row);
        r[n + k] = 1.0;
        let mut rhs = *b;
        if rhs < 0.0 {
            r.iter_mut().for_each(|v| *v = -*v);
            rhs = -rhs;
            needs_artificial.push(true);
        } else {
            needs_artificial.push(false);
        }
        r.push(rhs);
        rows.push(r);
        slack_basis.push(Some(n + k));
    }
    for (row, b) in &lp.eq {
        let mut r = vec![0.0; n + m_ub];
        r[..n].copy_from_slice(row);
        let mut rhs = *b;
        if rhs < 0.0 {
            r.iter_mut().for_each(|v| *v = -*v);
            rhs = -rhs;
        }
        r.push(rhs);
        rows.push(r);
        needs_artificial.push(true);
        slack_basis.push(None);
    }
    let n_art = needs_artificial.iter().filter(|&&a| a).count();
    let cols = n + m_ub + n_art;
    let mut basis = Vec::with_capacity(m);
    let mut art = n + m_ub;
    for (r, row) in rows.iter_mut().enumerate() {
        let rhs = row.pop().expect("rhs present");
        row.resize(cols, 0.0);
        if needs_artificial[r] {
            row[art] = 1.0;
            basis.push(art);
            art += 1;
        } else {
            basis.push(slack_basis[r].expect("slack row"));
        }
        row.push(rhs);
    }
    let mut tab = Tableau { t: rows, basis, cols };

    if n_art > 0 {
        let mut phase1 = vec![0.0; cols];
        phase1[n + m_ub..].iter_mut().for_each(|c| *c = -1.0);
        tab.maximize(&phase1, cols)?;
        let infeas = -tab.objective(&phase1);
        if infeas > LP_TOL * (1.0 + inf_norm(&tab.t.iter().map(|r| r[cols]).collect::<Vec<_>>())) {
            return Err(Error::LpInfeasible);
        }
        // Drive zero-level artificials out of the basis, dropping redundant rows.
        let mut r = 0;
        while r < tab.t.len() {
            if tab.basis[r] >= n + m_ub {
                let col = (0..n + m_ub).find(|&j| tab.t[r][j].abs() > 1e-9);
                match col {
                    Some(j) => tab.pivot(r, j),
                    None => {
                        tab.t.remove(r);
                        tab.basis.remove(r);
                        continue;
                    }
                }
            }
            r += 1;
        }
    }
    // Phase 2 ignores artificial columns.
    let active = n + m_ub;
    for row in tab.t.iter_mut() {
        let rhs = row[cols];
        row.truncate(active);
        row.push(rhs);
    }
    tab.cols = active;
    let mut cost = vec![0.0; active];
    cost[..n].copy_from_slice(&lp.objective);
    tab.maximize(&cost, active)?;

    let mut values = vec![0.0; n];
    let mut support = Vec::new();
    for (r, &b) in tab.basis.iter().enumerate() {
        if b < n {
            values[b] = tab.rhs(r).max(0.0);
            support.push(b);
        }
    }
    support.sort_unstable();
    let objective = lp.objective.iter().zip(&values).map(|(c, x)| c * x).sum();
    Ok(LpSolution {
        objective,
        values,
        basis: support,
    })
}

/// Checks that `g` is a CTMC generator: square, finite, non-negative
/// off-diagonals and zero row sums.
pub fn validate_generator(g: &Matrix) -> Result<()> {
    if !g.is_square() || g.rows() == 0 {
        return Err(invalid("generator must be a non-empty square matrix"));
    }
    let scale = g.max_abs().max(1.0);
    for i in 0..g.rows() {
        let row = g.row(i);
        for (j, &v) in row.iter().enumerate() {
            if i != j && v < 0.0 {
                return Err(invalid(format!("negative off-diagonal rate at ({i},{j})")));
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > 1e-9 * scale {
            return Err(invalid(format!("generator row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn reachable(g: &Matrix, transpose: bool) -> Vec<bool> {
    let n = g.rows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let rate = if transpose { g[(j, i)] } else { g[(i, j)] };
            if i != j && rate > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Returns true when every state reaches every other state.
pub fn is_irreducible(g: &Matrix) -> bool {
    reachable(g, false).iter().all(|&b| b) && reachable(g, true).iter().all(|&b| b)
}

/// Stationary distribution `π` of an irreducible generator: `πG = 0`, `Σπ = 1`.
pub fn stationary_distribution(g: &Matrix) -> Result<Vec<f64>> {
    validate_generator(g)?;
    let n = g.rows();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    if !is_irreducible(g) {
        return Err(Error::ReducibleChain(
            "some state cannot reach every other state".into(),
        ));
    }
    // Solve G^T π = 0 with the last balance equation replaced by Σπ = 1.
    let mut a = g.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    let pi = solve_linear(&a, &b).map_err(|e| match e {
        Error::Singular { .. } => Error::ReducibleChain("balance equations are singular".into()),
        other => other,
    })?;
    if pi.iter().any(|&p| p <= 0.0) {
        return Err(Error::ReducibleChain("zero stationary mass".into()));
    }
    Ok(pi)
}

/// Erlang-C result. `saturated` is set when `rho >= 1`, in which case the
/// probability is reported as 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueingProbability {
    pub probability: f64,
    pub saturated: bool,
}

fn erlang_c_integer(k: u64, rho: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let a = k as f64 * rho;
    // Erlang-B recursion, then convert to Erlang-C.
    let mut b = 1.0;
    for n in 1..=k {
        b = a * b / (n as f64 + a * b);
    }
    b / (1.0 - rho * (1.0 - b))
}

/// Probability that an arrival queues in an M/M/k system with per-server
/// utilization `rho`. Non-integer `k` interpolates linearly between the
/// neighbouring integers; `k` in `(0, 1)` interpolates towards 1 at `k = 0`.
pub fn erlang_c(k: f64, rho: f64) -> Result<QueueingProbability> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(invalid(format!("erlang_c needs k > 0, got {k}")));
    }
    if !(rho >= 0.0) {
        return Err(invalid(format!("erlang_c needs rho >= 0, got {rho}")));
    }
    if rho >= 1.0 {
        return Ok(QueueingProbability {
            probability: 1.0,
            saturated: true,
        });
    }
    let lo = k.floor();
    let frac = k - lo;
    let p_lo = erlang_c_integer(lo as u64, rho);
    let probability = if frac == 0.0 {
        p_lo
    } else {
        let p_hi = erlang_c_integer(lo as u64 + 1, rho);
        (1.0 - frac) * p_lo + frac * p_hi
    };
    Ok(QueueingProbability {
        probability,
        saturated: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solve_identity_and_diagonal() {
        let x = solve_linear(&Matrix::identity(2), &[3.0, 4.0]).unwrap();
        assert_eq!(x, vec![3.0, 4.0]);
        let a = Matrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve_linear(&a, &[2.0, 2.0]).unwrap();
        assert_relative_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 0.5);
    }

    #[test]
    fn solve_random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut rows = vec![vec![0.0; 5]; 5];
            for (i, row) in rows.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                row[i] += 6.0; // diagonally dominant
            }
            let a = Matrix::from_rows(rows).unwrap();
            let x_star: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let b = a.mul_vec(&x_star);
            let x = solve_linear(&a, &b).unwrap();
            for (u, v) in x.iter().zip(&x_star) {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
            let resid: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
            assert!(inf_norm(&resid) <= 1e-9 * (1.0 + inf_norm(&b)));
        }
    }

    #[test]
    fn solve_singular_is_reported() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(solve_linear(&a, &[1.0, 2.0]), Err(Error::Singular { .. })));
    }

    #[test]
    fn lp_trivial_bound() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add_ub(vec![1.0], 1.0);
        let s = lp_maximize(&lp).unwrap();
        assert_relative_eq!(s.objective, 1.0);
    }

    #[test]
    fn lp_single_type_load_reduction() {
        // variables (p, z): max z  s.t. 0.5 z - p <= 0, p <= 1
        let mut lp = LinearProgram::new(vec![0.0, 1.0]);
        lp.add_ub(vec![-1.0, 0.5], 0.0).add_ub(vec![1.0, 0.0], 1.0);
        let s = lp_maximize(&lp).unwrap();
        assert_relative_eq!(s.objective, 2.0, epsilon = 1e-12);
        assert_relative_eq!(s.values[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lp_equality_and_negative_rhs() {
        // max x + y s.t. x + y = 3, -x <= -1 (x >= 1), y <= 1.5
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.add_eq(vec![1.0, 1.0], 3.0)
            .add_ub(vec![-1.0, 0.0], -1.0)
            .add_ub(vec![0.0, 1.0], 1.5);
        let s = lp_maximize(&lp).unwrap();
        assert_relative_eq!(s.values[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.values[1], 1.5, epsilon = 1e-12);
        assert!(lp.max_violation(&s.values) < 1e-9);
    }

    #[test]
    fn lp_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add_ub(vec![1.0], 1.0).add_ub(vec![-1.0], -2.0);
        assert!(matches!(lp_maximize(&lp), Err(Error::LpInfeasible)));
        let mut lp = LinearProgram::new(vec![1.0, 0.0]);
        lp.add_ub(vec![-1.0, 1.0], 1.0);
        assert!(matches!(lp_maximize(&lp), Err(Error::LpUnbounded)));
    }

    #[test]
    fn lp_redundant_equalities() {
        let mut lp = LinearProgram::new(vec![1.0, 1.0]);
        lp.add_eq(vec![1.0, 1.0], 1.0).add_eq(vec![2.0, 2.0], 2.0);
        let s = lp_maximize(&lp).unwrap();
        assert_relative_eq!(s.objective, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_two_state_closed_form() {
        for &(x1, x2) in &[(1.0, 1.0), (0.3, 2.0), (5.0, 0.01)] {
            let g = Matrix::from_rows(vec![vec![-x1, x1], vec![x2, -x2]]).unwrap();
            let pi = stationary_distribution(&g).unwrap();
            assert_relative_eq!(pi[0], x2 / (x1 + x2), epsilon = 1e-12);
            assert_relative_eq!(pi[1], x1 / (x1 + x2), epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_single_and_loop() {
        let g = Matrix::zeros(1, 1);
        assert_eq!(stationary_distribution(&g).unwrap(), vec![1.0]);
        let g = Matrix::from_rows(vec![vec![-1.0, 1.0, 0.0], vec![0.0, -2.0, 2.0], vec![4.0, 0.0, -4.0]]).unwrap();
        let pi = stationary_distribution(&g).unwrap();
        let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (p, e) in pi.iter().zip(expect) {
            assert_relative_eq!(*p, e, epsilon = 1e-12);
        }
        let resid = g.vec_mul(&pi);
        assert!(inf_norm(&resid) < 1e-9);
    }

    #[test]
    fn stationary_rejects_reducible() {
        let g = Matrix::from_rows(vec![vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(stationary_distribution(&g), Err(Error::ReducibleChain(_))));
    }

    #[test]
    fn erlang_c_values() {
        assert_relative_eq!(erlang_c(1.0, 0.6).unwrap().probability, 0.6, epsilon = 1e-12);
        assert_relative_eq!(erlang_c(2.0, 0.5).unwrap().probability, 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(
            erlang_c(1.5, 0.5).unwrap().probability,
            (0.5 + 1.0 / 3.0) / 2.0,
            epsilon = 1e-12
        );
        let sat = erlang_c(3.0, 1.2).unwrap();
        assert!(sat.saturated);
        assert_eq!(sat.probability, 1.0);
        assert!(erlang_c(2.0, -0.1).is_err());
    }

    /// Queueing probability of the M/M/2 from its birth-death steady state.
    #[test]
    fn erlang_c_matches_birth_death_chain() {
        for &(k, rho) in &[(2usize, 0.5), (3, 0.8), (5, 0.3)] {
            let a = k as f64 * rho;
            // p_n ∝ a^n/n! for n < k, a^k/k! rho^(n-k) for n >= k
            let mut terms = Vec::new();
            let mut t = 1.0;
            for n in 0..2000usize {
                if n > 0 {
                    t *= if n <= k { a / n as f64 } else { rho };
                }
                terms.push(t);
            }
            let total: f64 = terms.iter().sum();
            let queued: f64 = terms[k..].iter().sum::<f64>() / total;
            assert_relative_eq!(erlang_c(k as f64, rho).unwrap().probability, queued, epsilon = 1e-10);
        }
    }

    #[test]
    fn erlang_c_monotone_on_grid() {
        for ki in 1..40 {
            let k = ki as f64 * 0.25;
            let mut prev = 0.0;
            for ri in 0..99 {
                let rho = ri as f64 / 100.0;
                let p = erlang_c(k, rho).unwrap().probability;
                assert!(p >= prev - 1e-12, "k={k} rho={rho}");
                prev = p;
                let p_more = erlang_c(k + 0.25, rho).unwrap().probability;
                assert!(p_more <= p + 1e-12, "k={k} rho={rho}");
            }
        }
    }
}
