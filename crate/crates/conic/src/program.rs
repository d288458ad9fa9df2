use nalgebra::{DMatrix, DVector};

use crate::expr::{AffMat, LinExpr};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
    Symmetric(usize),
}

impl BlockKind {
    fn len(self) -> usize {
        match self {
            BlockKind::Scalar => 1,
            BlockKind::Vector(n) => n,
            BlockKind::Matrix(r, c) => r * c,
            BlockKind::Symmetric(n) => n * (n + 1) / 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockInfo {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ScalarVar {
    index: usize,
}

impl ScalarVar {
    pub fn expr(&self) -> LinExpr {
        LinExpr::var(self.index)
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VectorVar {
    offset: usize,
    len: usize,
}

impl VectorVar {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn at(&self, i: usize) -> LinExpr {
        assert!(i < self.len);
        LinExpr::var(self.offset + i)
    }

    /// Column (`len × 1`) view as an affine matrix.
    pub fn affine(&self) -> AffMat {
        AffMat::from_fn(self.len, 1, |i, _| self.at(i))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatrixVar {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl MatrixVar {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, i: usize, j: usize) -> LinExpr {
        assert!(i < self.rows && j < self.cols);
        LinExpr::var(self.offset + j * self.rows + i)
    }

    pub fn affine(&self) -> AffMat {
        AffMat::from_fn(self.rows, self.cols, |i, j| self.at(i, j))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SymVar {
    offset: usize,
    dim: usize,
}

fn packed_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

impl SymVar {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, i: usize, j: usize) -> LinExpr {
        assert!(i < self.dim && j < self.dim);
        LinExpr::var(self.offset + packed_index(i, j))
    }

    pub fn affine(&self) -> AffMat {
        AffMat::from_fn(self.dim, self.dim, |i, j| self.at(i, j))
    }
}

/// Symmetric affine matrix constrained to the PSD cone, stored as its packed upper triangle.
#[derive(Clone, Debug)]
pub struct PsdConstraint {
    pub dim: usize,
    pub upper: Vec<LinExpr>,
}

impl PsdConstraint {
    pub fn entry(&self, i: usize, j: usize) -> &LinExpr {
        &self.upper[packed_index(i, j)]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j).eval(x))
    }
}

/// Linear objective over affine equalities, nonnegativity and PSD constraints.
#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    blocks: Vec<BlockInfo>,
    num_vars: usize,
    objective: LinExpr,
    equalities: Vec<LinExpr>,
    nonneg: Vec<LinExpr>,
    psd: Vec<PsdConstraint>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn declare(&mut self, name: &str, kind: BlockKind) -> usize {
        let offset = self.num_vars;
        self.blocks.push(BlockInfo { name: name.to_string(), kind, offset });
        self.num_vars += kind.len();
        offset
    }

    pub fn scalar(&mut self, name: &str) -> ScalarVar {
        ScalarVar { index: self.declare(name, BlockKind::Scalar) }
    }

    pub fn vector(&mut self, name: &str, len: usize) -> VectorVar {
        VectorVar { offset: self.declare(name, BlockKind::Vector(len)), len }
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> MatrixVar {
        MatrixVar { offset: self.declare(name, BlockKind::Matrix(rows, cols)), rows, cols }
    }

    pub fn symmetric(&mut self, name: &str, dim: usize) -> SymVar {
        SymVar { offset: self.declare(name, BlockKind::Symmetric(dim)), dim }
    }

    pub fn minimize(&mut self, mut objective: LinExpr) {
        objective.compact();
        self.check(&objective);
        self.objective = objective;
    }

    /// `e = 0`.
    pub fn add_eq(&mut self, mut e: LinExpr) {
        e.compact();
        self.check(&e);
        self.equalities.push(e);
    }

    /// Elementwise `a = b`.
    pub fn add_eq_mat(&mut self, a: &AffMat, b: &AffMat) {
        let d = a.minus(b);
        for e in d.entries() {
            self.add_eq(e.clone());
        }
    }

    /// `a = b` for symmetric expressions, imposed on the upper triangle only.
    pub fn add_eq_sym(&mut self, a: &AffMat, b: &AffMat) {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.nrows(), a.ncols(), "symmetric equality needs square operands");
        for j in 0..a.ncols() {
            for i in 0..=j {
                let mut e = a.get(i, j).clone() + a.get(j, i);
                e.add_scaled(b.get(i, j), -1.0);
                e.add_scaled(b.get(j, i), -1.0);
                self.add_eq(e.scaled(0.5));
            }
        }
    }

    /// `e ≥ 0`.
    pub fn add_nonneg(&mut self, mut e: LinExpr) {
        e.compact();
        self.check(&e);
        self.nonneg.push(e);
    }

    /// `lhs ≤ rhs`.
    pub fn add_le(&mut self, lhs: LinExpr, rhs: LinExpr) {
        self.add_nonneg(rhs - lhs);
    }

    /// Requires the symmetric part of `m` to be PSD.
    pub fn add_psd(&mut self, m: &AffMat) {
        assert_eq!(m.nrows(), m.ncols(), "PSD constraint needs a square matrix");
        let n = m.nrows();
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for i in 0..=j {
                let mut e = if i == j { m.get(i, i).clone() } else { (m.get(i, j).clone() + m.get(j, i)).scaled(0.5) };
                e.compact();
                self.check(&e);
                upper.push(e);
            }
        }
        self.psd.push(PsdConstraint { dim: n, upper });
    }

    fn check(&self, e: &LinExpr) {
        if let Some(i) = e.max_index() {
            assert!(i < self.num_vars, "expression references undeclared variable {i}");
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn equalities(&self) -> &[LinExpr] {
        &self.equalities
    }

    pub fn nonnegatives(&self) -> &[LinExpr] {
        &self.nonneg
    }

    pub fn psd_constraints(&self) -> &[PsdConstraint] {
        &self.psd
    }
}

/// Reads a declared block back out of a flat solution vector.
pub(crate) fn block_value(info: &BlockInfo, x: &[f64]) -> DMatrix<f64> {
    let o = info.offset;
    match info.kind {
        BlockKind::Scalar => DMatrix::from_element(1, 1, x[o]),
        BlockKind::Vector(n) => DMatrix::from_column_slice(n, 1, &x[o..o + n]),
        BlockKind::Matrix(r, c) => DMatrix::from_column_slice(r, c, &x[o..o + r * c]),
        BlockKind::Symmetric(n) => DMatrix::from_fn(n, n, |i, j| x[o + packed_index(i, j)]),
    }
}

pub(crate) fn vector_value(v: &VectorVar, x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(&x[v.offset..v.offset + v.len])
}

pub(crate) fn matrix_value(v: &MatrixVar, x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.rows, v.cols, &x[v.offset..v.offset + v.rows * v.cols])
}

pub(crate) fn sym_value(v: &SymVar, x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(v.dim, v.dim, |i, j| x[v.offset + packed_index(i, j)])
}
