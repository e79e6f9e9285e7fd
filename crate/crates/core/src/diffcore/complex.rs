//! Complex quantities as paired real nodes.

use super::{DiffError, Graph, Tensor, Var};

/// Real and imaginary parts of a complex matrix living in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(re: Var, im: Var) -> Self {
        CVar { re, im }
    }
}

impl Graph {
    pub fn complex_constant(&mut self, re: Tensor, im: Tensor) -> Result<CVar, DiffError> {
        Ok(CVar::new(self.constant(re)?, self.constant(im)?))
    }

    /// Complex product `a b` expanded into four real matmuls.
    pub fn complex_matmul(&mut self, a: CVar, b: CVar) -> Result<CVar, DiffError> {
        let rr = self.matmul(a.re, b.re)?;
        let ii = self.matmul(a.im, b.im)?;
        let ri = self.matmul(a.re, b.im)?;
        let ir = self.matmul(a.im, b.re)?;
        Ok(CVar::new(self.sub(rr, ii)?, self.add(ri, ir)?))
    }

    pub fn complex_add(&mut self, a: CVar, b: CVar) -> Result<CVar, DiffError> {
        Ok(CVar::new(self.add(a.re, b.re)?, self.add(a.im, b.im)?))
    }

    pub fn complex_sub(&mut self, a: CVar, b: CVar) -> Result<CVar, DiffError> {
        Ok(CVar::new(self.sub(a.re, b.re)?, self.sub(a.im, b.im)?))
    }

    pub fn complex_transpose(&mut self, a: CVar) -> Result<CVar, DiffError> {
        Ok(CVar::new(self.transpose(a.re)?, self.transpose(a.im)?))
    }

    pub fn conj(&mut self, a: CVar) -> Result<CVar, DiffError> {
        Ok(CVar::new(a.re, self.neg(a.im)?))
    }

    /// Elementwise squared magnitude.
    pub fn abs2(&mut self, a: CVar) -> Result<Var, DiffError> {
        let r2 = self.square(a.re)?;
        let i2 = self.square(a.im)?;
        self.add(r2, i2)
    }

    /// Scale each row of a complex matrix by a real `[r,1]` column.
    pub fn complex_mul_col(&mut self, a: CVar, col: Var) -> Result<CVar, DiffError> {
        Ok(CVar::new(self.mul_col(a.re, col)?, self.mul_col(a.im, col)?))
    }

    /// `[Re a, Im a]` stacked along columns.
    pub fn complex_to_real(&mut self, a: CVar) -> Result<Var, DiffError> {
        self.concat_cols(&[a.re, a.im])
    }
}
