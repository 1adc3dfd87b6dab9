//! Matrix decision variables and expressions affine in them.
//!
//! An [`AffineExpr`] is a sum of terms `L · X · R` (or `L · Xᵀ · R`) plus a
//! constant. That is enough to write every LMI in the student and teacher
//! syntheses, including block matrices (blocks are embedded by selection
//! matrices on both sides).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixVar {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
}

impl MatrixVar {
    pub fn symmetric(name: impl Into<String>, dim: usize) -> Self {
        MatrixVar { name: name.into(), rows: dim, cols: dim, symmetric: true }
    }

    pub fn rectangular(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        MatrixVar { name: name.into(), rows, cols, symmetric: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Structural(format!("variable {} has an empty dimension", self.name)));
        }
        if self.symmetric && self.rows != self.cols {
            return Err(Error::Structural(format!("symmetric variable {} is not square", self.name)));
        }
        Ok(())
    }

    /// Number of scalar unknowns.
    pub fn scalar_count(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    /// (row, col) of scalar `k`. Symmetric variables store the upper
    /// triangle column by column.
    pub(crate) fn position(&self, k: usize) -> (usize, usize) {
        if self.symmetric {
            let mut j = 0;
            let mut start = 0;
            while start + j + 1 <= k {
                start += j + 1;
                j += 1;
            }
            (k - start, j)
        } else {
            (k % self.rows, k / self.rows)
        }
    }

    pub(crate) fn basis(&self, k: usize) -> DMatrix<f64> {
        let (i, j) = self.position(k);
        let mut e = DMatrix::zeros(self.rows, self.cols);
        e[(i, j)] = 1.0;
        if self.symmetric {
            e[(j, i)] = 1.0;
        }
        e
    }

    pub(crate) fn unpack(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (k, &v) in x.iter().enumerate().take(self.scalar_count()) {
            let (i, j) = self.position(k);
            m[(i, j)] = v;
            if self.symmetric {
                m[(j, i)] = v;
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
struct Term {
    var: MatrixVar,
    transpose: bool,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl Term {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        if self.transpose {
            &self.left * x.transpose() * &self.right
        } else {
            &self.left * x * &self.right
        }
    }
}

#[derive(Clone, Debug)]
pub struct AffineExpr {
    rows: usize,
    cols: usize,
    terms: Vec<Term>,
    constant: DMatrix<f64>,
}

impl AffineExpr {
    pub fn var(v: &MatrixVar) -> Self {
        AffineExpr {
            rows: v.rows,
            cols: v.cols,
            terms: vec![Term {
                var: v.clone(),
                transpose: false,
                left: DMatrix::identity(v.rows, v.rows),
                right: DMatrix::identity(v.cols, v.cols),
            }],
            constant: DMatrix::zeros(v.rows, v.cols),
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        AffineExpr { rows: m.nrows(), cols: m.ncols(), terms: Vec::new(), constant: m }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    /// Names of the variables referenced, with their declarations.
    pub fn variables(&self) -> impl Iterator<Item = &MatrixVar> {
        self.terms.iter().map(|t| &t.var)
    }

    pub fn transpose(&self) -> Self {
        AffineExpr {
            rows: self.cols,
            cols: self.rows,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    var: t.var.clone(),
                    transpose: !t.transpose,
                    left: t.right.transpose(),
                    right: t.left.transpose(),
                })
                .collect(),
            constant: self.constant.transpose(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.left *= a;
        }
        out.constant *= a;
        out
    }

    /// `M · self`
    pub fn premul(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != self.rows {
            return Err(Error::Structural(format!(
                "premultiply {}x{} by expression with {} rows",
                m.nrows(),
                m.ncols(),
                self.rows
            )));
        }
        Ok(AffineExpr {
            rows: m.nrows(),
            cols: self.cols,
            terms: self
                .terms
                .iter()
                .map(|t| Term { left: m * &t.left, ..t.clone() })
                .collect(),
            constant: m * &self.constant,
        })
    }

    /// `self · M`
    pub fn postmul(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != self.cols {
            return Err(Error::Structural(format!(
                "postmultiply expression with {} cols by {}x{}",
                self.cols,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(AffineExpr {
            rows: self.rows,
            cols: m.ncols(),
            terms: self
                .terms
                .iter()
                .map(|t| Term { right: &t.right * m, ..t.clone() })
                .collect(),
            constant: &self.constant * m,
        })
    }

    pub fn plus(&self, other: &AffineExpr) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Structural(format!(
                "adding expressions of shape {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = self.clone();
        out.terms.extend(other.terms.iter().cloned());
        out.constant += &other.constant;
        Ok(out)
    }

    pub fn minus(&self, other: &AffineExpr) -> Result<Self> {
        self.plus(&other.scale(-1.0))
    }

    pub fn plus_const(&self, m: &DMatrix<f64>) -> Result<Self> {
        self.plus(&AffineExpr::constant(m.clone()))
    }

    /// Assemble `[[E00, E01, ..], [E10, ..], ..]`.
    pub fn block(rows: Vec<Vec<AffineExpr>>) -> Result<Self> {
        let (heights, widths) = crate::linalg::block_sizes(&rows, |e| e.shape())?;
        let total_r: usize = heights.iter().sum();
        let total_c: usize = widths.iter().sum();
        let mut out = AffineExpr::zeros(total_r, total_c);
        let mut r0 = 0;
        for (i, row) in rows.into_iter().enumerate() {
            let mut c0 = 0;
            let lift_r = injection(total_r, r0, heights[i]);
            for (j, e) in row.into_iter().enumerate() {
                let lift_c = injection(total_c, c0, widths[j]).transpose();
                out = out.plus(&e.premul(&lift_r)?.postmul(&lift_c)?)?;
                c0 += widths[j];
            }
            r0 += heights[i];
        }
        Ok(out)
    }

    pub fn evaluate(&self, assignments: &BTreeMap<String, DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let mut out = self.constant.clone();
        for t in &self.terms {
            let x = assignments
                .get(&t.var.name)
                .ok_or_else(|| Error::Structural(format!("no value for variable {}", t.var.name)))?;
            if x.shape() != (t.var.rows, t.var.cols) {
                return Err(Error::Structural(format!(
                    "value for {} is {:?}, declared {:?}",
                    t.var.name,
                    x.shape(),
                    (t.var.rows, t.var.cols)
                )));
            }
            out += t.apply(x);
        }
        Ok(out)
    }

    /// Column-major coefficient form: `vec(expr(x)) = coef · x + offset`.
    pub(crate) fn linearize(&self, layout: &VarLayout) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let len = self.rows * self.cols;
        let mut coef = DMatrix::zeros(len, layout.total);
        for t in &self.terms {
            let (offset, var) = layout.lookup(&t.var)?;
            for k in 0..var.scalar_count() {
                let contrib = t.apply(&var.basis(k));
                for (idx, v) in contrib.iter().enumerate() {
                    coef[(idx, offset + k)] += v;
                }
            }
        }
        let offset = DVector::from_column_slice(self.constant.as_slice());
        Ok((coef, offset))
    }
}

fn injection(total: usize, start: usize, len: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(total, len);
    for i in 0..len {
        e[(start + i, i)] = 1.0;
    }
    e
}

/// Assignment of each declared variable to a slice of the solver vector.
#[derive(Clone, Debug)]
pub(crate) struct VarLayout {
    entries: Vec<(usize, MatrixVar)>,
    pub total: usize,
}

impl VarLayout {
    pub fn new(vars: &[MatrixVar]) -> Result<Self> {
        let mut entries = Vec::with_capacity(vars.len());
        let mut total = 0;
        for v in vars {
            v.validate()?;
            if entries.iter().any(|(_, e): &(usize, MatrixVar)| e.name == v.name) {
                return Err(Error::Structural(format!("variable {} declared twice", v.name)));
            }
            entries.push((total, v.clone()));
            total += v.scalar_count();
        }
        Ok(VarLayout { entries, total })
    }

    pub fn lookup(&self, v: &MatrixVar) -> Result<(usize, &MatrixVar)> {
        let (off, decl) = self
            .entries
            .iter()
            .find(|(_, e)| e.name == v.name)
            .ok_or_else(|| Error::Structural(format!("variable {} is not declared", v.name)))?;
        if decl != v {
            return Err(Error::Structural(format!(
                "variable {} used with shape {}x{}, declared {}x{}",
                v.name, v.rows, v.cols, decl.rows, decl.cols
            )));
        }
        Ok((*off, decl))
    }

    pub fn unpack(&self, x: &[f64]) -> BTreeMap<String, DMatrix<f64>> {
        self.entries
            .iter()
            .map(|(off, v)| (v.name.clone(), v.unpack(&x[*off..*off + v.scalar_count()])))
            .collect()
    }
}
