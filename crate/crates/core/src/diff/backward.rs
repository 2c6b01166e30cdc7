use std::rc::Rc;

use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result of [`Tape::grad`]: one gradient per requested input, in order.
pub struct Gradients<'t> {
    grads: Vec<Var<'t>>,
    unreachable: Vec<usize>,
}

impl<'t> Gradients<'t> {
    pub fn get(&self, i: usize) -> Var<'t> {
        self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.grads.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Positions (into the `wrt` slice) of inputs the output does not depend
    /// on. Their gradients are zero.
    pub fn unreachable(&self) -> &[usize] {
        &self.unreachable
    }

    pub fn has_unreachable(&self) -> bool {
        !self.unreachable.is_empty()
    }
}

impl Tape {
    /// Reverse-mode gradient of the one-element `output` with respect to
    /// each of `wrt`.
    ///
    /// The backward sweep is recorded on this tape with the same primitives
    /// as the forward pass, so every returned gradient can itself be
    /// differentiated.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Gradients<'t>> {
        if output.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad needs a single-element output, got shape {:?}",
                output.shape()
            )));
        }
        let end = output.id + 1;

        let ops: Vec<(Op, bool)> = {
            let nodes = self.nodes.borrow();
            nodes[..end].iter().map(|n| (n.op.clone(), n.requires_grad)).collect()
        };
        // Nodes downstream of some requested input.
        let mut reach = vec![false; end];
        for w in wrt {
            if w.id < end {
                reach[w.id] = true;
            }
        }
        for id in 0..end {
            if !reach[id] && ops[id].0.inputs().iter().any(|&i| reach[i]) {
                reach[id] = true;
            }
        }
        // Of those, the ones on a requires-grad path into `output`.
        let mut live = vec![false; end];
        live[output.id] = ops[output.id].1 && reach[output.id];
        for id in (0..end).rev() {
            if live[id] {
                for i in ops[id].0.inputs() {
                    if ops[i].1 && reach[i] {
                        live[i] = true;
                    }
                }
            }
        }

        let saved = self.generation();
        self.restore_generation(output.generation().max(saved) + 1);
        let result = self.sweep(output, &ops, &live);
        self.restore_generation(saved);
        let adj = result?;

        let mut grads = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for (k, w) in wrt.iter().enumerate() {
            match adj.get(w.id).copied().flatten() {
                Some(g) => grads.push(g),
                None => {
                    unreachable.push(k);
                    grads.push(self.zeros(&w.shape()));
                }
            }
        }
        if !unreachable.is_empty() {
            log::debug!("grad: {} input(s) unreachable from output", unreachable.len());
        }
        Ok(Gradients { grads, unreachable })
    }

    fn sweep<'t>(&'t self, output: Var<'t>, ops: &[(Op, bool)], live: &[bool]) -> Result<Vec<Option<Var<'t>>>> {
        let mut adj: Vec<Option<Var<'t>>> = vec![None; output.id + 1];
        if !live[output.id] {
            return Ok(adj);
        }
        adj[output.id] = Some(self.constant(Tensor::full(&output.shape(), 1.0)));

        for id in (0..=output.id).rev() {
            let Some(g) = adj[id] else { continue };
            if !live[id] {
                continue;
            }
            let op = &ops[id].0;
            if matches!(op, Op::Leaf) {
                continue;
            }
            let out = Var { tape: self, id };
            for (input, contrib) in self.local_grads(op, out, g, |i| live[i])? {
                adj[input] = Some(match adj[input] {
                    Some(acc) => acc.add(contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(adj)
    }

    /// Vector-Jacobian products of one primitive, built from differentiable
    /// primitives. Only inputs for which `want` holds are produced.
    fn local_grads<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        g: Var<'t>,
        want: impl Fn(usize) -> bool,
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let v = |id: usize| Var { tape: self, id };
        let mut res = Vec::with_capacity(2);
        let mut emit = |id: usize, f: &dyn Fn() -> Result<Var<'t>>| -> Result<()> {
            if want(id) {
                res.push((id, f()?));
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| Ok(g))?;
                emit(*b, &|| Ok(g))?;
            }
            Op::Sub(a, b) => {
                emit(*a, &|| Ok(g))?;
                emit(*b, &|| g.neg())?;
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g.mul(v(*b)))?;
                emit(*b, &|| g.mul(v(*a)))?;
            }
            Op::Div(a, b) => {
                emit(*a, &|| g.div(v(*b)))?;
                emit(*b, &|| g.mul(out)?.div(v(*b))?.neg())?;
            }
            Op::Neg(a) => emit(*a, &|| g.neg())?,
            Op::Affine(a, s, _) => emit(*a, &|| g.scale(*s))?,
            Op::MatMul(a, b) => {
                emit(*a, &|| g.matmul(v(*b).t()?))?;
                emit(*b, &|| v(*a).t()?.matmul(g))?;
            }
            Op::Transpose(a) => emit(*a, &|| g.t())?,
            Op::Reshape(a, _) => emit(*a, &|| g.reshape(&v(*a).shape()))?,
            Op::Expand(a, _) => emit(*a, &|| g.sum_to(&v(*a).shape()))?,
            Op::SumTo(a, _) => emit(*a, &|| g.expand(&v(*a).shape()))?,
            Op::Exp(a) => emit(*a, &|| g.mul(out))?,
            Op::Log(a) => emit(*a, &|| g.div(v(*a)))?,
            Op::Softplus(a) => emit(*a, &|| g.mul(v(*a).sigmoid()?))?,
            Op::Sqrt(a) => emit(*a, &|| g.mul(out.recip_or_zero()?)?.scale(0.5))?,
            Op::RecipOrZero(a) => emit(*a, &|| g.mul(out)?.mul(out)?.neg())?,
            Op::LogSoftmax(a) => emit(*a, &|| {
                let shape = out.shape();
                let mut keep = shape.clone();
                if let Some(last) = keep.last_mut() {
                    *last = 1;
                }
                let total = g.sum_to(&keep)?.expand(&shape)?;
                g.sub(out.exp()?.mul(total)?)
            })?,
            Op::Gather(a, idx) => emit(*a, &|| g.scatter_rc(Rc::clone(idx), v(*a).shape()[1]))?,
            Op::Scatter(a, idx, _) => emit(*a, &|| g.gather_rc(Rc::clone(idx)))?,
            Op::IndexRows(a, rows) => emit(*a, &|| g.scatter_rows_rc(Rc::clone(rows), v(*a).shape()[0]))?,
            Op::ScatterRows(a, rows, _) => emit(*a, &|| g.index_rows_rc(Rc::clone(rows)))?,
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = v(p).shape()[*axis];
                    emit(p, &|| g.slice(*axis, start, len))?;
                    start += len;
                }
            }
            Op::Slice(a, axis, start, len) => emit(*a, &|| {
                let full = v(*a).shape();
                let mut pieces = Vec::with_capacity(3);
                if *start > 0 {
                    let mut s = full.clone();
                    s[*axis] = *start;
                    pieces.push(self.zeros(&s));
                }
                pieces.push(g);
                let rest = full[*axis] - start - len;
                if rest > 0 {
                    let mut s = full.clone();
                    s[*axis] = rest;
                    pieces.push(self.zeros(&s));
                }
                self.concat(&pieces, *axis)
            })?,
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_first_and_second_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().mul(x).unwrap();
        let dy = tape.grad(y, &[x]).unwrap().get(0);
        assert_eq!(dy.item(), 12.0);
        let d2y = tape.grad(dy, &[x]).unwrap().get(0);
        assert_eq!(d2y.item(), 12.0);
        assert!(d2y.generation() > dy.generation());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let loss = z.log_softmax().unwrap().gather(&[1]).unwrap().sum().unwrap().neg().unwrap();
        let g = tape.grad(loss, &[z]).unwrap().get(0).eval();
        let p = z.softmax().unwrap().eval();
        let expected = [p.data()[0], p.data()[1] - 1.0, p.data()[2]];
        for (a, b) in g.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_input_gets_zero_and_flag() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let u = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.square().unwrap();
        let g = tape.grad(y, &[x, u]).unwrap();
        assert_eq!(g.unreachable(), &[1]);
        assert_eq!(g.get(1).eval().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.grad(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let n = x.norm().unwrap();
        let g = tape.grad(n, &[x]).unwrap().get(0).eval();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }
}
