use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::DMatrix;

/// Affine scalar expression `Σ c_k x_k + d` over the program's flat variable vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub(crate) fn var(index: usize) -> Self {
        Self { terms: vec![(index, 1.0)], constant: 0.0 }
    }

    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn constant_term(&self) -> f64 {
        self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, c)| c == 0.0)
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn add_scaled(&mut self, other: &LinExpr, a: f64) {
        if a == 0.0 {
            return;
        }
        self.terms.extend(other.terms.iter().map(|&(i, c)| (i, a * c)));
        self.constant += a * other.constant;
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = LinExpr::zero();
        out.add_scaled(self, a);
        out
    }

    /// Merges repeated variable indices and drops exact zeros.
    pub fn compact(&mut self) {
        if self.terms.len() < 2 {
            self.terms.retain(|&(_, c)| c != 0.0);
            return;
        }
        self.terms.sort_unstable_by_key(|&(i, _)| i);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => out.push((i, c)),
            }
        }
        out.retain(|&(_, c)| c != 0.0);
        self.terms = out;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    pub(crate) fn max_index(&self) -> Option<usize> {
        self.terms.iter().map(|&(i, _)| i).max()
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl Add<&LinExpr> for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: &LinExpr) -> LinExpr {
        self.add_scaled(rhs, 1.0);
        self
    }
}

impl Add<f64> for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: f64) -> LinExpr {
        self.constant += rhs;
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Sub<&LinExpr> for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: &LinExpr) -> LinExpr {
        self.add_scaled(rhs, -1.0);
        self
    }
}

impl Sub<f64> for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: f64) -> LinExpr {
        self.constant -= rhs;
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self.scaled(-1.0)
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(self, rhs: f64) -> LinExpr {
        self.scaled(rhs)
    }
}

impl AddAssign for LinExpr {
    fn add_assign(&mut self, rhs: LinExpr) {
        self.add_scaled(&rhs, 1.0);
    }
}

impl AddAssign<&LinExpr> for LinExpr {
    fn add_assign(&mut self, rhs: &LinExpr) {
        self.add_scaled(rhs, 1.0);
    }
}

/// Dense matrix of affine expressions, stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffMat {
    rows: usize,
    cols: usize,
    data: Vec<LinExpr>,
}

impl AffMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![LinExpr::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> LinExpr) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn constant(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| LinExpr::constant(m[(i, j)]))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(&DMatrix::identity(n, n))
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        &self.data[j * self.rows + i]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut LinExpr {
        &mut self.data[j * self.rows + i]
    }

    pub fn set(&mut self, i: usize, j: usize, e: LinExpr) {
        self.data[j * self.rows + i] = e;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    /// `a * self` for a constant matrix `a`.
    pub fn lmul(a: &DMatrix<f64>, m: &AffMat) -> AffMat {
        assert_eq!(a.ncols(), m.rows, "lmul shape mismatch");
        let mut out = AffMat::zeros(a.nrows(), m.cols);
        for j in 0..m.cols {
            for l in 0..m.rows {
                let e = m.get(l, j);
                for i in 0..a.nrows() {
                    let c = a[(i, l)];
                    if c != 0.0 {
                        out.get_mut(i, j).add_scaled(e, c);
                    }
                }
            }
        }
        out.compact();
        out
    }

    /// `self * b` for a constant matrix `b`.
    pub fn rmul(&self, b: &DMatrix<f64>) -> AffMat {
        assert_eq!(self.cols, b.nrows(), "rmul shape mismatch");
        let mut out = AffMat::zeros(self.rows, b.ncols());
        for j in 0..b.ncols() {
            for l in 0..self.cols {
                let c = b[(l, j)];
                if c == 0.0 {
                    continue;
                }
                for i in 0..self.rows {
                    out.get_mut(i, j).add_scaled(self.get(i, l), c);
                }
            }
        }
        out.compact();
        out
    }

    pub fn plus(&self, other: &AffMat) -> AffMat {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let mut out = self.clone();
        for (o, e) in out.data.iter_mut().zip(&other.data) {
            o.add_scaled(e, 1.0);
        }
        out
    }

    pub fn minus(&self, other: &AffMat) -> AffMat {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let mut out = self.clone();
        for (o, e) in out.data.iter_mut().zip(&other.data) {
            o.add_scaled(e, -1.0);
        }
        out
    }

    pub fn plus_const(&self, m: &DMatrix<f64>) -> AffMat {
        assert_eq!(self.shape(), m.shape(), "add shape mismatch");
        let mut out = self.clone();
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.get_mut(i, j).add_constant(m[(i, j)]);
            }
        }
        out
    }

    pub fn scaled(&self, a: f64) -> AffMat {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|e| e.scaled(a)).collect() }
    }

    pub fn compact(&mut self) {
        self.data.iter_mut().for_each(LinExpr::compact);
    }

    pub fn trace(&self) -> LinExpr {
        let mut t = LinExpr::zero();
        for i in 0..self.rows.min(self.cols) {
            t.add_scaled(self.get(i, i), 1.0);
        }
        t.compact();
        t
    }

    /// Frobenius inner product `Σ c_ij self_ij`.
    pub fn inner(&self, c: &DMatrix<f64>) -> LinExpr {
        assert_eq!(self.shape(), c.shape(), "inner shape mismatch");
        let mut t = LinExpr::zero();
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.add_scaled(self.get(i, j), c[(i, j)]);
            }
        }
        t.compact();
        t
    }

    pub fn hstack(parts: &[&AffMat]) -> AffMat {
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "hstack row mismatch");
        let mut data = Vec::new();
        let mut cols = 0;
        for p in parts {
            data.extend(p.data.iter().cloned());
            cols += p.cols;
        }
        Self { rows, cols, data }
    }

    pub fn vstack(parts: &[&AffMat]) -> AffMat {
        let t: Vec<AffMat> = parts.iter().map(|p| p.transpose()).collect();
        let refs: Vec<&AffMat> = t.iter().collect();
        Self::hstack(&refs).transpose()
    }

    /// `[[a, b], [c, d]]`.
    pub fn block2(a: &AffMat, b: &AffMat, c: &AffMat, d: &AffMat) -> AffMat {
        let top = Self::hstack(&[a, b]);
        let bottom = Self::hstack(&[c, d]);
        Self::vstack(&[&top, &bottom])
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = &LinExpr> {
        self.data.iter()
    }
}
