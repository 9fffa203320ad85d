//! Sparse symmetric operators and a Jacobi-preconditioned conjugate gradient.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{MatMut, Par, Side};
use nalgebra::DVector;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::LinearSolveError;

/// Symmetric sparse matrix in CSR form.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    matrix: CsrMatrix<f64>,
}

impl SparseOperator {
    pub fn from_csr(matrix: CsrMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn csr(&self) -> &CsrMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        self.apply_into(x.as_slice(), y.as_mut_slice());
        y
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let offsets = self.matrix.row_offsets();
        let cols = self.matrix.col_indices();
        let vals = self.matrix.values();
        for (row, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in offsets[row]..offsets[row + 1] {
                acc += vals[k] * x[cols[k]];
            }
            *out = acc;
        }
    }

    /// `x^T A x`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        self.bilinear_form(x, x)
    }

    /// `x^T A y`.
    pub fn bilinear_form(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let offsets = self.matrix.row_offsets();
        let cols = self.matrix.col_indices();
        let vals = self.matrix.values();
        let mut total = 0.0;
        for row in 0..self.dim() {
            let mut acc = 0.0;
            for k in offsets[row]..offsets[row + 1] {
                acc += vals[k] * y[cols[k]];
            }
            total += x[row] * acc;
        }
        total
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        for (row, col, v) in self.matrix.triplet_iter() {
            if row == col {
                d[row] += *v;
            }
        }
        d
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix
            .get_entry(row, col)
            .map(|e| e.into_value())
            .unwrap_or(0.0)
    }

    /// Sum of all entries, i.e. `1^T A 1`.
    pub fn total_sum(&self) -> f64 {
        self.matrix.values().iter().sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.matrix
            .triplet_iter()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute row sum (the induced infinity norm).
    pub fn norm_inf(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|row| row.values().iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Fixed sparsity pattern for element-by-element assembly with three local
/// degrees of freedom per triangle. Values can be re-assembled in place,
/// which the fixed-point solver does once per iteration.
#[derive(Debug, Clone)]
pub struct AssemblyPattern {
    template: CsrMatrix<f64>,
    scatter: Vec<[usize; 9]>,
    diagonal: Vec<usize>,
    local_dofs: Vec<[usize; 3]>,
    constrained: Vec<bool>,
}

impl AssemblyPattern {
    pub fn new(dof_count: usize, local_dofs: &[[usize; 3]], constrained: &[bool]) -> Self {
        let mut coo = CooMatrix::new(dof_count, dof_count);
        for d in 0..dof_count {
            coo.push(d, d, 0.0);
        }
        for dofs in local_dofs {
            for &a in dofs {
                for &b in dofs {
                    coo.push(a, b, 0.0);
                }
            }
        }
        let template = CsrMatrix::from(&coo);
        let position = |row: usize, col: usize| -> usize {
            let offsets = template.row_offsets();
            let cols = &template.col_indices()[offsets[row]..offsets[row + 1]];
            offsets[row] + cols.binary_search(&col).expect("entry is in the pattern")
        };
        let scatter = local_dofs
            .iter()
            .map(|dofs| {
                let mut s = [0usize; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        s[3 * a + b] = position(dofs[a], dofs[b]);
                    }
                }
                s
            })
            .collect();
        let diagonal = (0..dof_count).map(|d| position(d, d)).collect();
        Self {
            template,
            scatter,
            diagonal,
            local_dofs: local_dofs.to_vec(),
            constrained: constrained.to_vec(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.template.nnz()
    }

    /// Assembles `sum_T element(T)` into a fresh operator. With `constrain`,
    /// rows and columns of constrained dofs are replaced by identity rows.
    pub fn assemble<F>(&self, element: F, constrain: bool) -> SparseOperator
    where
        F: FnMut(usize) -> [[f64; 3]; 3],
    {
        let mut matrix = self.template.clone();
        self.assemble_values(matrix.values_mut(), element, constrain);
        SparseOperator::from_csr(matrix)
    }

    /// In-place variant of [`assemble`](Self::assemble) on an operator that
    /// was produced by this pattern.
    pub fn reassemble<F>(&self, op: &mut SparseOperator, element: F, constrain: bool)
    where
        F: FnMut(usize) -> [[f64; 3]; 3],
    {
        self.assemble_values(op.matrix.values_mut(), element, constrain);
    }

    fn assemble_values<F>(&self, values: &mut [f64], mut element: F, constrain: bool)
    where
        F: FnMut(usize) -> [[f64; 3]; 3],
    {
        values.iter_mut().for_each(|v| *v = 0.0);
        for (t, (scatter, dofs)) in self.scatter.iter().zip(&self.local_dofs).enumerate() {
            let local = element(t);
            for a in 0..3 {
                if constrain && self.constrained[dofs[a]] {
                    continue;
                }
                for b in 0..3 {
                    if constrain && self.constrained[dofs[b]] {
                        continue;
                    }
                    values[scatter[3 * a + b]] += local[a][b];
                }
            }
        }
        if constrain {
            for (d, &pos) in self.diagonal.iter().enumerate() {
                if self.constrained[d] {
                    values[pos] = 1.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Stop once `||b - Ax|| <= rel_tol * ||b||`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradient for SPD `op`. `x` holds the
/// initial guess on entry and the solution on exit.
pub fn pcg(
    op: &SparseOperator,
    rhs: &DVector<f64>,
    x: &mut DVector<f64>,
    opts: CgOptions,
) -> Result<CgReport, LinearSolveError> {
    let n = op.dim();
    let b_norm = rhs.norm();
    if b_norm == 0.0 {
        x.fill(0.0);
        return Ok(CgReport { iterations: 0, rel_residual: 0.0 });
    }
    let inv_diag: DVector<f64> = op.diagonal().map(|d| if d != 0.0 { 1.0 / d } else { 1.0 });

    let mut ax = DVector::zeros(n);
    op.apply_into(x.as_slice(), ax.as_mut_slice());
    let mut r = rhs - &ax;
    let mut res = r.norm() / b_norm;
    if res <= opts.rel_tol {
        return Ok(CgReport { iterations: 0, rel_residual: res });
    }
    let mut z = r.component_mul(&inv_diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = DVector::zeros(n);

    for it in 1..=opts.max_iter {
        op.apply_into(p.as_slice(), ap.as_mut_slice());
        let curvature = p.dot(&ap);
        if curvature <= 0.0 || !curvature.is_finite() {
            return Err(LinearSolveError::Breakdown { curvature });
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        res = r.norm() / b_norm;
        if res <= opts.rel_tol {
            return Ok(CgReport { iterations: it, rel_residual: res });
        }
        z.copy_from(&r);
        z.component_mul_assign(&inv_diag);
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.axpy(1.0, &z, beta);
    }
    Err(LinearSolveError::NotConverged { iterations: opts.max_iter, residual: res })
}

/// Sparse Cholesky factorization with the symbolic analysis (fill-reducing
/// ordering and elimination tree) computed once per sparsity pattern.
/// Symmetric CSR storage is read as its own CSC transpose.
#[derive(Debug, Clone)]
pub struct CholeskySolver {
    symbolic: SymbolicLlt<usize>,
    dim: usize,
}

/// Numeric factor of one operator.
#[derive(Debug)]
pub struct CholeskyFactor {
    llt: Llt<usize, f64>,
    dim: usize,
}

fn csc_view(op: &SparseOperator) -> SymbolicSparseColMatRef<'_, usize> {
    let m = op.csr();
    SymbolicSparseColMatRef::new_checked(m.nrows(), m.ncols(), m.row_offsets(), None, m.col_indices())
}

impl CholeskySolver {
    pub fn new(pattern: &SparseOperator) -> Result<Self, LinearSolveError> {
        // Sequential kernels keep results independent of the thread count.
        faer::set_global_parallelism(Par::Seq);
        let symbolic = SymbolicLlt::try_new(csc_view(pattern), Side::Lower)
            .map_err(|e| LinearSolveError::Factorization(format!("{e:?}")))?;
        Ok(Self { symbolic, dim: pattern.dim() })
    }

    /// Factors `op`, which must share the pattern given to [`new`](Self::new).
    pub fn factor(&self, op: &SparseOperator) -> Result<CholeskyFactor, LinearSolveError> {
        if op.dim() != self.dim {
            return Err(LinearSolveError::Factorization(format!("dimension {} != {}", op.dim(), self.dim)));
        }
        let mat = SparseColMatRef::new(csc_view(op), op.csr().values());
        let llt = Llt::try_new_with_symbolic(self.symbolic.clone(), mat, Side::Lower)
            .map_err(|e| LinearSolveError::Factorization(format!("{e:?}")))?;
        Ok(CholeskyFactor { llt, dim: self.dim })
    }
}

impl CholeskyFactor {
    pub fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.dim;
        self.llt.solve_in_place(MatMut::from_column_major_slice_mut(x.as_mut_slice(), n, 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn laplace_1d(n: usize) -> SparseOperator {
        let mut coo = CooMatrix::new(n, n);
        for i in 0..n {
            coo.push(i, i, 2.0);
            if i + 1 < n {
                coo.push(i, i + 1, -1.0);
                coo.push(i + 1, i, -1.0);
            }
        }
        SparseOperator::from_csr(CsrMatrix::from(&coo))
    }

    #[test]
    fn cg_matches_dense_solve() {
        let op = laplace_1d(30);
        let b = DVector::from_fn(30, |i, _| (i as f64 * 0.37).sin());
        let mut x = DVector::zeros(30);
        let report = pcg(&op, &b, &mut x, CgOptions::default()).unwrap();
        assert!(report.rel_residual <= 1e-10);
        let dense = DMatrix::from_fn(30, 30, |i, j| op.get(i, j));
        let exact = dense.lu().solve(&b).unwrap();
        assert!((x - exact).amax() < 1e-8);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = laplace_1d(5);
        let mut x = DVector::from_element(5, 3.0);
        pcg(&op, &DVector::zeros(5), &mut x, CgOptions::default()).unwrap();
        assert_eq!(x, DVector::zeros(5));
    }

    #[test]
    fn iteration_cap_is_reported() {
        let op = laplace_1d(200);
        let b = DVector::from_element(200, 1.0);
        let mut x = DVector::zeros(200);
        let err = pcg(&op, &b, &mut x, CgOptions { rel_tol: 1e-14, max_iter: 3 }).unwrap_err();
        assert!(matches!(err, LinearSolveError::NotConverged { iterations: 3, .. }));
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        let mut coo = CooMatrix::new(2, 2);
        coo.push(0, 0, 1.0);
        coo.push(1, 1, -1.0);
        let op = SparseOperator::from_csr(CsrMatrix::from(&coo));
        let mut x = DVector::zeros(2);
        let err = pcg(&op, &DVector::from_vec(vec![0.0, 1.0]), &mut x, CgOptions::default());
        assert!(matches!(err, Err(LinearSolveError::Breakdown { .. })));
        let chol = CholeskySolver::new(&op).unwrap();
        assert!(chol.factor(&op).is_err());
    }

    #[test]
    fn cholesky_matches_cg() {
        let op = laplace_1d(40);
        let b = DVector::from_fn(40, |i, _| (i as f64).cos());
        let mut x_cg = DVector::zeros(40);
        pcg(&op, &b, &mut x_cg, CgOptions { rel_tol: 1e-14, max_iter: 1000 }).unwrap();
        let chol = CholeskySolver::new(&op).unwrap();
        let mut x = b.clone();
        chol.factor(&op).unwrap().solve_in_place(&mut x);
        assert!((x - x_cg).amax() < 1e-9);
    }
}
