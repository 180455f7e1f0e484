//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. [`Tape::backward`] walks the nodes in reverse creation order, which
//! is a valid topological order because inputs always precede their users.

use std::cell::RefCell;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Dot(Var, Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        };
        let rg = self.needs(&[a]);
        self.push(Tensor::new(shape, data).expect("unary keeps shape"), op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            (
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| f(p, q))
                    .collect(),
            )
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// `W x` with `W: [r, c]`, `x: [c]`.
    pub fn matvec(&self, w: Var, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (wt, xt) = (&nodes[w.0].value, &nodes[x.0].value);
            if !wt.is_matrix() || xt.is_matrix() || wt.cols() != xt.len() {
                return Err(Error::shape(
                    "matvec",
                    format!("{:?} x {:?}", wt.shape(), xt.shape()),
                ));
            }
            tensor::matvec(wt.data(), wt.rows(), wt.cols(), xt.data())
        };
        let rg = self.needs(&[w, x]);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), rg))
    }

    /// `Mᵀ x` with `M: [r, c]`, `x: [r]`; i.e. the `x`-weighted sum of the rows of `M`.
    pub fn vecmat(&self, x: Var, m: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xt, mt) = (&nodes[x.0].value, &nodes[m.0].value);
            if !mt.is_matrix() || xt.is_matrix() || mt.rows() != xt.len() {
                return Err(Error::shape(
                    "vecmat",
                    format!("{:?} x {:?}", xt.shape(), mt.shape()),
                ));
            }
            let cols = mt.cols();
            let mut out = vec![0.0; cols];
            for (r, &xr) in xt.data().iter().enumerate() {
                for (o, &v) in out.iter_mut().zip(mt.row(r)) {
                    *o += xr * v;
                }
            }
            out
        };
        let rg = self.needs(&[x, m]);
        Ok(self.push(Tensor::vector(out), Op::VecMat(x, m), rg))
    }

    /// `W x + b`.
    pub fn affine(&self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), tensor::sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let out = self.vector_map("softmax", a, tensor::softmax)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::Softmax(a), rg))
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let out = self.vector_map("log_softmax", a, tensor::log_softmax)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::vector(out), Op::LogSoftmax(a), rg))
    }

    fn vector_map(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Vec<f64>> {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        if t.is_matrix() || t.is_empty() {
            return Err(Error::shape(name, format!("expected vector, got {:?}", t.shape())));
        }
        Ok(f(t.data()))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.is_matrix() {
                    return Err(Error::shape("concat", format!("matrix part {:?}", t.shape())));
                }
                out.extend_from_slice(t.data());
            }
        }
        if out.is_empty() {
            return Err(Error::shape("concat", "no elements"));
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks equal-length vectors as matrix rows, or scalars into a vector.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack", "no parts"));
        }
        let first = self.shape_of(parts[0]);
        let mut data = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape() != first.as_slice() || t.is_matrix() {
                    return Err(Error::shape(
                        "stack",
                        format!("{:?} vs {:?}", t.shape(), first),
                    ));
                }
                data.extend_from_slice(t.data());
            }
        }
        let value = if first == [1] {
            Tensor::vector(data)
        } else {
            Tensor::matrix(parts.len(), first[0], data)?
        };
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Stack(parts.to_vec()), rg))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() || x.is_matrix() {
                return Err(Error::shape("dot", format!("{:?} . {:?}", x.shape(), y.shape())));
            }
            tensor::dot(x.data(), y.data())
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    /// Selects elements of a vector, or rows of a matrix.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
                return Err(Error::shape(
                    "gather",
                    format!("index {bad} out of range for {:?}", t.shape()),
                ));
            }
            if indices.is_empty() {
                return Err(Error::shape("gather", "empty index list"));
            }
            if t.is_matrix() {
                let data = indices.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                Tensor::matrix(indices.len(), t.cols(), data)?
            } else {
                Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect())
            }
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Gather(a, indices.to_vec()), rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.with_value(a, |t| t.data().iter().sum());
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_value(a, Tensor::len) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            propagate(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatVec(w, x) => {
            let wt = &nodes[w.0].value;
            let (rows, cols) = (wt.rows(), wt.cols());
            let xv = val(*x);
            acc(grads, nodes, *w, |gw| {
                for r in 0..rows {
                    for c in 0..cols {
                        gw[r * cols + c] += g[r] * xv[c];
                    }
                }
            });
            let wv = wt.data();
            acc(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[c] += wv[r * cols + c] * g[r];
                    }
                }
            });
        }
        Op::VecMat(x, m) => {
            let mt = &nodes[m.0].value;
            let (rows, cols) = (mt.rows(), mt.cols());
            let xv = val(*x);
            acc(grads, nodes, *x, |gx| {
                for (r, gxr) in gx.iter_mut().enumerate() {
                    *gxr += tensor::dot(mt.row(r), g);
                }
            });
            acc(grads, nodes, *m, |gm| {
                for r in 0..rows {
                    for c in 0..cols {
                        gm[r * cols + c] += xv[r] * g[c];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |ga| add_into(ga, g));
            acc(grads, nodes, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |ga| add_into(ga, g));
            acc(grads, nodes, *b, |gb| {
                for (o, gi) in gb.iter_mut().zip(g) {
                    *o -= gi;
                }
            });
        }
        Op::Hadamard(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] <= bv[i] {
                        ga[i] += g[i];
                    }
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    if av[i] > bv[i] {
                        gb[i] += g[i];
                    }
                }
            });
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |ga| {
            for (o, gi) in ga.iter_mut().zip(g) {
                *o += c * gi;
            }
        }),
        Op::AddScalar(a) => acc(grads, nodes, *a, |ga| add_into(ga, g)),
        Op::Clamp(a, lo, hi) => {
            let av = val(*a);
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] >= *lo && av[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::Sigmoid(a) => acc(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }),
        Op::Tanh(a) => acc(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::Relu(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::Exp(a) => acc(grads, nodes, *a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * y[i];
            }
        }),
        Op::Square(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += 2.0 * av[i] * g[i];
                }
            })
        }
        Op::Softmax(a) => {
            let gy = tensor::dot(g, y);
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += y[i] * (g[i] - gy);
                }
            })
        }
        Op::LogSoftmax(a) => {
            let total: f64 = g.iter().sum();
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] - y[i].exp() * total;
                }
            })
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                acc(grads, nodes, *p, |gp| add_into(gp, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::Stack(parts) => {
            let n = nodes[parts[0].0].value.len();
            for (k, p) in parts.iter().enumerate() {
                acc(grads, nodes, *p, |gp| add_into(gp, &g[k * n..(k + 1) * n]));
            }
        }
        Op::Dot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[0] * bv[i];
                }
            });
            acc(grads, nodes, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[0] * av[i];
                }
            });
        }
        Op::Gather(a, indices) => {
            let width = nodes[a.0].value.cols();
            acc(grads, nodes, *a, |ga| {
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        ga[i * width + c] += g[k * width + c];
                    }
                }
            })
        }
        Op::Sum(a) => acc(grads, nodes, *a, |ga| {
            for o in ga.iter_mut() {
                *o += g[0];
            }
        }),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_derivative() {
        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let loss = tape.dot(w, x).unwrap();
        assert_eq!(tape.scalar(loss), 11.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn detached_loss_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(x);
        assert!(matches!(tape.backward(s), Err(Error::Detached)));
    }

    #[test]
    fn constant_in_parameter_gives_zero_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -0.2]));
        let z = tape.scale(w, 0.0);
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 3]));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.matvec(w, x).unwrap_err();
        assert!(err.to_string().contains("matvec"), "{err}");
        let a = tape.constant(Tensor::vector(vec![1.0]));
        assert!(tape.add(a, x).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn identity_affine_is_a_no_op() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::identity(3));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let y = tape.affine(w, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-3.0));
        assert_eq!(tape.scalar(tape.relu(x)), 0.0);
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let sq = tape.hadamard(w, w).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }
}
