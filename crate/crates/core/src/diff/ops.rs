//! Public differentiable operations on [`Var`].
//!
//! Binary arithmetic broadcasts numpy-style; the broadcast is recorded as an
//! explicit `Expand` node so every primitive itself sees equal shapes.

use std::rc::Rc;

use super::tape::{Op, Tape, Var};
use super::tensor::{broadcast_shape, Tensor};
use crate::error::{Error, Result};

impl<'t> Var<'t> {
    fn unary(self, op: Op) -> Result<Var<'t>> {
        self.tape.push(op)
    }

    fn binary(self, other: Var<'t>, name: &'static str, make: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return self.tape.push(make(self.id, other.id));
        }
        let target = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: name,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let a = if sa == target { self } else { self.expand(&target)? };
        let b = if sb == target { other } else { other.expand(&target)? };
        self.tape.push(make(a.id, b.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul)
    }

    /// Unguarded division; any zero in the denominator is an error.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div)
    }

    /// `self / (other + eps)`.
    pub fn div_guarded(self, other: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.div(other.add_scalar(eps)?)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Affine(self.id, c, 0.0))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Affine(self.id, 1.0, c))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(self);
        }
        self.unary(Op::Reshape(self.id, shape.to_vec()))
    }

    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(self);
        }
        self.unary(Op::Expand(self.id, shape.to_vec()))
    }

    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(self);
        }
        self.unary(Op::SumTo(self.id, shape.to_vec()))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        self.sum_to(&[])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::Contract("mean of empty value".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Row sums of a matrix, kept as an `[N, 1]` column.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                left: s,
                right: vec![],
            });
        }
        self.sum_to(&[s[0], 1])
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id))
    }

    /// Unguarded natural log; non-positive arguments are an error.
    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id))
    }

    /// `ln(self + eps)`.
    pub fn log_guarded(self, eps: f64) -> Result<Var<'t>> {
        self.add_scalar(eps)?.log()
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Op::Softplus(self.id))
    }

    /// Logistic function, written as `exp(-softplus(-x))`.
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.neg()?.softplus()?.neg()?.exp()
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt(self.id))
    }

    pub fn recip_or_zero(self) -> Result<Var<'t>> {
        self.unary(Op::RecipOrZero(self.id))
    }

    /// L2 norm over all elements.
    pub fn norm(self) -> Result<Var<'t>> {
        self.square()?.sum()?.sqrt()
    }

    /// Per-row L2 norms of a matrix, as `[N, 1]`.
    pub fn row_norms(self) -> Result<Var<'t>> {
        self.square()?.sum_rows()?.sqrt()
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "dot",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.mul(other)?.sum()
    }

    /// Cosine similarity of two equal-shape values, guarded by `eps` in
    /// each norm.
    pub fn cosine(self, other: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let a = self.div_guarded(self.norm()?, eps)?;
        let b = other.div_guarded(other.norm()?, eps)?;
        a.dot(b)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.unary(Op::LogSoftmax(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.log_softmax()?.exp()
    }

    /// Picks `self[i, idx[i]]` for every row.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Gather(self.id, Rc::new(idx.to_vec())))
    }

    pub(crate) fn gather_rc(self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        self.unary(Op::Gather(self.id, idx))
    }

    pub(crate) fn scatter_rc(self, idx: Rc<Vec<usize>>, cols: usize) -> Result<Var<'t>> {
        self.unary(Op::Scatter(self.id, idx, cols))
    }

    /// Selects rows (first-axis entries) by index.
    pub fn index_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::IndexRows(self.id, Rc::new(rows.to_vec())))
    }

    pub(crate) fn index_rows_rc(self, rows: Rc<Vec<usize>>) -> Result<Var<'t>> {
        self.unary(Op::IndexRows(self.id, rows))
    }

    pub(crate) fn scatter_rows_rc(self, rows: Rc<Vec<usize>>, n: usize) -> Result<Var<'t>> {
        self.unary(Op::ScatterRows(self.id, rows, n))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Op::Slice(self.id, axis, start, len))
    }
}

impl Tape {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        match parts.len() {
            0 => Err(Error::Contract("concat of zero values".into())),
            1 => Ok(parts[0]),
            _ => self.push(Op::Concat(parts.iter().map(|v| v.id).collect(), axis)),
        }
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        assert_eq!(x.square().unwrap().item(), 9.0);

        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(a.dot(b).unwrap().item(), 11.0);

        let z = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(z.softmax().unwrap().eval().data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 3]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 3]"), "{err}");
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn unguarded_division_by_zero_errors() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let z = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(a.div(z), Err(Error::Numeric(_))));
        assert!(a.div_guarded(z, 1e-12).unwrap().item().is_finite());
        assert!(matches!(z.log(), Err(Error::Numeric(_))));
        assert!(z.log_guarded(1e-12).unwrap().item().is_finite());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.eval().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 2, 1).unwrap().eval().data(), &[5.0, 6.0]);
        let r = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(r.shape(), vec![4, 2]);
        assert_eq!(r.index_rows(&[3, 0]).unwrap().eval().data(), &[3.0, 4.0, 1.0, 2.0]);
    }
}
