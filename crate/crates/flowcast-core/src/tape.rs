//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Every primitive application appends one node holding the operation, its
//! parent indices, and the computed value. `backward` walks the tape once in
//! reverse, accumulating gradients in a fixed order, so repeated runs over the
//! same tape are bit-identical. Gradients flow through unrolled solver steps
//! (discretize-then-optimize); there is no adjoint pass.

use crate::tensor::{Shape, Tensor};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected {expected}, got {got}")]
    BadOperand {
        op: &'static str,
        expected: &'static str,
        got: Shape,
    },
    #[error("slice [{start}..{}) out of bounds for vector of length {len}", start + count)]
    SliceOutOfBounds {
        start: usize,
        count: usize,
        len: usize,
    },
    #[error("backward root must be a scalar, got {got}")]
    NonScalarRoot { got: Shape },
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    /// Elementwise a*x + b with constant coefficients; only `a` matters to the
    /// backward pass.
    Affine {
        x: usize,
        a: f64,
    },
    /// Tensor scaled by a scalar variable (scalar-tensor broadcast).
    ScaleBy {
        x: usize,
        s: usize,
    },
    Recip(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Trace(usize),
    Slice {
        x: usize,
        start: usize,
        count: usize,
    },
    Concat(usize, usize),
    /// Assemble a lower-triangular matrix from a diagonal vector and the
    /// strictly-lower entries in row-major order.
    LowerFromParts {
        diag: usize,
        off: usize,
    },
    /// Forward substitution y = L^{-1} r; only the lower triangle of L is read.
    TriSolveLower {
        l: usize,
        r: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one backward pass, indexed by the originating [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, materializing exact zeros for variables
    /// no path reached (constant subgraphs).
    pub fn wrt_or_zero(&self, v: Var, shape: Shape) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Leaves act as parameters or constants; gradients
    /// reach them but nothing differentiates *into* them.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].value.as_scalar()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TapeError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TapeError::ForeignVar)
        }
    }

    /// Matrix-matrix or matrix-vector product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (lhs, rhs) = (self.shape(a), self.shape(b));
        let value = match (self.value(a), self.value(b)) {
            (Tensor::Matrix(ma), Tensor::Matrix(mb)) if ma.ncols() == mb.nrows() => {
                Tensor::from(ma.dot(mb))
            }
            (Tensor::Matrix(ma), Tensor::Vector(vb)) if ma.ncols() == vb.len() => {
                Tensor::Vector(ma.dot(vb))
            }
            _ => return Err(TapeError::ShapeMismatch { op: "matmul", lhs, rhs }),
        };
        Ok(self.push(Op::MatMul(a.0, b.0), value))
    }

    fn zip_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (lhs, rhs) = (self.shape(a), self.shape(b));
        if lhs != rhs {
            return Err(TapeError::ShapeMismatch { op: op_name, lhs, rhs });
        }
        let value = match (self.value(a), self.value(b)) {
            (Tensor::Vector(x), Tensor::Vector(y)) => {
                Tensor::Vector(ndarray::Zip::from(x).and(y).map_collect(|&p, &q| f(p, q)))
            }
            (Tensor::Matrix(x), Tensor::Matrix(y)) => {
                Tensor::from(ndarray::Zip::from(x).and(y).map_collect(|&p, &q| f(p, q)))
            }
            _ => unreachable!("shapes equal"),
        };
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_same_shape("add", a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_same_shape("sub", a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_same_shape("hadamard", a, b, |p, q| p * q, Op::Hadamard(a.0, b.0))
    }

    /// Elementwise `a*x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var, TapeError> {
        self.check(x)?;
        let value = self.value(x).map(|v| a * v + b);
        Ok(self.push(Op::Affine { x: x.0, a }, value))
    }

    /// `x` scaled elementwise by the scalar variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TapeError> {
        self.check(x)?;
        self.check(s)?;
        let Some(sv) = self.scalar_value(s) else {
            return Err(TapeError::BadOperand {
                op: "scale_by",
                expected: "scalar multiplier",
                got: self.shape(s),
            });
        };
        let value = self.value(x).map(|v| sv * v);
        Ok(self.push(Op::ScaleBy { x: x.0, s: s.0 }, value))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TapeError> {
        self.check(x)?;
        let value = self.value(x).map(f);
        Ok(self.push(op, value))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, |v| 1.0 / v, Op::Recip(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    /// max(0, x); the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TapeError> {
        self.unary(x, f64::ln, Op::Log(x.0))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(x)?;
        let total: f64 = self.value(x).iter().sum();
        Ok(self.push(Op::Sum(x.0), Tensor::scalar(total)))
    }

    /// Trace of a square matrix, as a scalar.
    pub fn trace(&mut self, x: Var) -> Result<Var, TapeError> {
        self.check(x)?;
        let m = match self.value(x) {
            Tensor::Matrix(m) if m.nrows() == m.ncols() => m,
            _ => {
                return Err(TapeError::BadOperand {
                    op: "trace",
                    expected: "square matrix",
                    got: self.shape(x),
                })
            }
        };
        let t = m.diag().sum();
        Ok(self.push(Op::Trace(x.0), Tensor::scalar(t)))
    }

    /// Contiguous sub-vector `x[start..start+count]`.
    pub fn slice(&mut self, x: Var, start: usize, count: usize) -> Result<Var, TapeError> {
        self.check(x)?;
        let v = match self.value(x) {
            Tensor::Vector(v) => v,
            _ => {
                return Err(TapeError::BadOperand {
                    op: "slice",
                    expected: "vector",
                    got: self.shape(x),
                })
            }
        };
        if start + count > v.len() {
            return Err(TapeError::SliceOutOfBounds { start, count, len: v.len() });
        }
        let value = Tensor::Vector(v.slice(ndarray::s![start..start + count]).to_owned());
        Ok(self.push(Op::Slice { x: x.0, start, count }, value))
    }

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = match (self.value(a), self.value(b)) {
            (Tensor::Vector(x), Tensor::Vector(y)) => (x, y),
            _ => {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(a),
                    rhs: self.shape(b),
                })
            }
        };
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend(va.iter().copied());
        data.extend(vb.iter().copied());
        Ok(self.push(Op::Concat(a.0, b.0), Tensor::from_vec(data)))
    }

    /// Lower-triangular matrix from its diagonal (length d) and strictly-lower
    /// entries in row-major order (length d*(d-1)/2).
    pub fn lower_from_parts(&mut self, diag: Var, off: Var) -> Result<Var, TapeError> {
        self.check(diag)?;
        self.check(off)?;
        let (vd, vo) = match (self.value(diag), self.value(off)) {
            (Tensor::Vector(d), Tensor::Vector(o)) => (d, o),
            _ => {
                return Err(TapeError::ShapeMismatch {
                    op: "lower_from_parts",
                    lhs: self.shape(diag),
                    rhs: self.shape(off),
                })
            }
        };
        let d = vd.len();
        if vo.len() != d * d.saturating_sub(1) / 2 {
            return Err(TapeError::ShapeMismatch {
                op: "lower_from_parts",
                lhs: self.shape(diag),
                rhs: self.shape(off),
            });
        }
        let mut m = Array2::zeros((d, d));
        let mut k = 0;
        for i in 0..d {
            for j in 0..i {
                m[(i, j)] = vo[k];
                k += 1;
            }
            m[(i, i)] = vd[i];
        }
        Ok(self.push(Op::LowerFromParts { diag: diag.0, off: off.0 }, Tensor::from(m)))
    }

    /// Solve L y = r by forward substitution; only the lower triangle of `l`
    /// (diagonal included) is read, so gradients to its upper part are zero.
    /// The diagonal must be nonzero; callers guarantee this via softplus floors.
    pub fn tri_solve_lower(&mut self, l: Var, r: Var) -> Result<Var, TapeError> {
        self.check(l)?;
        self.check(r)?;
        let (ml, vr) = match (self.value(l), self.value(r)) {
            (Tensor::Matrix(m), Tensor::Vector(v)) if m.nrows() == m.ncols() && m.nrows() == v.len() => {
                (m, v)
            }
            _ => {
                return Err(TapeError::ShapeMismatch {
                    op: "tri_solve_lower",
                    lhs: self.shape(l),
                    rhs: self.shape(r),
                })
            }
        };
        let d = vr.len();
        let mut y = Array1::zeros(d);
        for i in 0..d {
            let mut acc = vr[i];
            for j in 0..i {
                acc -= ml[(i, j)] * y[j];
            }
            y[i] = acc / ml[(i, i)];
        }
        Ok(self.push(Op::TriSolveLower { l: l.0, r: r.0 }, Tensor::Vector(y)))
    }

    /// One reverse pass from the scalar `root`. The tape itself is not
    /// consumed, and repeated calls are bit-identical.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        self.check(root)?;
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(TapeError::NonScalarRoot { got: root_shape });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        match &mut grads[idx] {
            Some(g) => g.accumulate(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        match &self.nodes[i].op {
            Leaf => {}
            MatMul(a, b) => match (self.nodes[*a].value.clone(), &self.nodes[*b].value) {
                (Tensor::Matrix(ma), Tensor::Matrix(mb)) => {
                    let gm = g.matrix().expect("matmul output shape");
                    Self::add_grad(grads, *a, Tensor::from(gm.dot(&mb.t())));
                    Self::add_grad(grads, *b, Tensor::from(ma.t().dot(gm)));
                }
                (Tensor::Matrix(ma), Tensor::Vector(vb)) => {
                    let gv = g.vector().expect("matvec output shape");
                    let n = gv.len();
                    let m = vb.len();
                    let outer = Array2::from_shape_fn((n, m), |(r, c)| gv[r] * vb[c]);
                    Self::add_grad(grads, *a, Tensor::from(outer));
                    Self::add_grad(grads, *b, Tensor::Vector(ma.t().dot(gv)));
                }
                _ => unreachable!("validated in forward"),
            },
            Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.map(|v| -v));
            }
            Hadamard(a, b) => {
                let ga = elementwise_product(g, &self.nodes[*b].value);
                let gb = elementwise_product(g, &self.nodes[*a].value);
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Affine { x, a } => {
                Self::add_grad(grads, *x, g.map(|v| a * v));
            }
            ScaleBy { x, s } => {
                let sv = self.nodes[*s].value.as_scalar().expect("scalar multiplier");
                Self::add_grad(grads, *x, g.map(|v| sv * v));
                let dot: f64 = g
                    .iter()
                    .zip(self.nodes[*x].value.iter())
                    .map(|(p, q)| p * q)
                    .sum();
                Self::add_grad(grads, *s, Tensor::scalar(dot));
            }
            Recip(x) => {
                let y = &self.nodes[i].value;
                Self::add_grad(grads, *x, zip3(g, y, y, |gv, yv, _| -gv * yv * yv));
            }
            Sigmoid(x) => {
                let y = &self.nodes[i].value;
                Self::add_grad(grads, *x, zip3(g, y, y, |gv, yv, _| gv * yv * (1.0 - yv)));
            }
            Tanh(x) => {
                let y = &self.nodes[i].value;
                Self::add_grad(grads, *x, zip3(g, y, y, |gv, yv, _| gv * (1.0 - yv * yv)));
            }
            Softplus(x) => {
                let xv = &self.nodes[*x].value;
                Self::add_grad(grads, *x, zip3(g, xv, xv, |gv, v, _| gv * sigmoid(v)));
            }
            Relu(x) => {
                let xv = &self.nodes[*x].value;
                Self::add_grad(grads, *x, zip3(g, xv, xv, |gv, v, _| if v > 0.0 { gv } else { 0.0 }));
            }
            Exp(x) => {
                let y = &self.nodes[i].value;
                Self::add_grad(grads, *x, zip3(g, y, y, |gv, yv, _| gv * yv));
            }
            Log(x) => {
                let xv = &self.nodes[*x].value;
                Self::add_grad(grads, *x, zip3(g, xv, xv, |gv, v, _| gv / v));
            }
            Sum(x) => {
                let gs = g.as_scalar().expect("sum output is scalar");
                let shape = self.nodes[*x].value.shape();
                let mut full = Tensor::zeros(shape);
                for slot in full.flat_mut() {
                    *slot = gs;
                }
                Self::add_grad(grads, *x, full);
            }
            Trace(x) => {
                let gs = g.as_scalar().expect("trace output is scalar");
                let shape = self.nodes[*x].value.shape();
                let Shape::Matrix(d, _) = shape else { unreachable!() };
                let mut m = Array2::zeros((d, d));
                for k in 0..d {
                    m[(k, k)] = gs;
                }
                Self::add_grad(grads, *x, Tensor::from(m));
            }
            Slice { x, start, count } => {
                let shape = self.nodes[*x].value.shape();
                let mut full = Tensor::zeros(shape);
                let gv = g.vector().expect("slice output is vector");
                full.flat_mut()[*start..start + count].copy_from_slice(gv.as_slice().unwrap());
                Self::add_grad(grads, *x, full);
            }
            Concat(a, b) => {
                let gv = g.vector().expect("concat output is vector");
                let na = self.nodes[*a].value.shape().len();
                Self::add_grad(
                    grads,
                    *a,
                    Tensor::Vector(gv.slice(ndarray::s![..na]).to_owned()),
                );
                Self::add_grad(
                    grads,
                    *b,
                    Tensor::Vector(gv.slice(ndarray::s![na..]).to_owned()),
                );
            }
            LowerFromParts { diag, off } => {
                let gm = g.matrix().expect("lower_from_parts output is matrix");
                let d = gm.nrows();
                let mut gd = Array1::zeros(d);
                let mut go = Array1::zeros(d * d.saturating_sub(1) / 2);
                let mut k = 0;
                for r in 0..d {
                    for c in 0..r {
                        go[k] = gm[(r, c)];
                        k += 1;
                    }
                    gd[r] = gm[(r, r)];
                }
                Self::add_grad(grads, *diag, Tensor::Vector(gd));
                Self::add_grad(grads, *off, Tensor::Vector(go));
            }
            TriSolveLower { l, r } => {
                // y = L^{-1} r  =>  dr = L^{-T} g,  dL = -dr y^T on the lower triangle.
                let ml = self.nodes[*l].value.matrix().expect("matrix operand");
                let y = self.nodes[i].value.vector().expect("vector output");
                let gv = g.vector().expect("vector gradient");
                let d = y.len();
                let mut gr = Array1::zeros(d);
                for row in (0..d).rev() {
                    let mut acc = gv[row];
                    for below in row + 1..d {
                        acc -= ml[(below, row)] * gr[below];
                    }
                    gr[row] = acc / ml[(row, row)];
                }
                let mut gl = Array2::zeros((d, d));
                for r2 in 0..d {
                    for c2 in 0..=r2 {
                        gl[(r2, c2)] = -gr[r2] * y[c2];
                    }
                }
                Self::add_grad(grads, *l, Tensor::from(gl));
                Self::add_grad(grads, *r, Tensor::Vector(gr));
            }
        }
    }
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (slot, bv) in out.flat_mut().iter_mut().zip(b.iter()) {
        *slot *= bv;
    }
    out
}

/// Elementwise combine over two same-shape tensors (third argument unused slot
/// kept for symmetry with binary closures).
fn zip3(g: &Tensor, a: &Tensor, _b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), a.shape());
    let mut out = g.clone();
    for (slot, av) in out.flat_mut().iter_mut().zip(a.iter()) {
        *slot = f(*slot, av, 0.0);
    }
    out
}

/// Maximum relative disagreement between analytic gradients and central finite
/// differences, `max |analytic - numeric| / (|analytic| + 1e-8)` over every
/// coordinate of every parameter. `build` must construct the same scalar
/// expression each time it is called; NaN anywhere propagates into the result.
pub fn finite_diff_check<F>(mut build: F, params: &[Tensor], step: f64) -> Result<f64, TapeError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let eval = |ps: &[Tensor], build: &mut F| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape
            .scalar_value(root)
            .ok_or(TapeError::NonScalarRoot { got: tape.shape(root) })?)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt_or_zero(vars[pi], param.shape());
        let analytic = analytic.to_flat();
        for ci in 0..param.shape().len() {
            let mut perturbed: Vec<Tensor> = params.to_vec();
            perturbed[pi].flat_mut()[ci] += step;
            let up = eval(&perturbed, &mut build)?;
            perturbed[pi].flat_mut()[ci] -= 2.0 * step;
            let down = eval(&perturbed, &mut build)?;
            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic[ci] - numeric).abs() / (analytic[ci].abs() + 1e-8);
            // NaN-poisoning max: keep NaN once seen.
            worst = if worst.is_nan() || rel.is_nan() { f64::NAN } else { worst.max(rel) };
        }
    }
    Ok(worst)
}
