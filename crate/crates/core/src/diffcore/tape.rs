use super::array::{broadcast_index_map, broadcast_shape, Array};
use super::gemm::{col2im_add, gemm, im2col, row_major, transposed};
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        step: usize,
    },
    Interleave(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    BroadcastTo(Var),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to tape nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<Array> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Array::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`; zeros for nodes that did not participate.
    pub fn wrt(&self, v: Var) -> Array {
        self.get(v).unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| DiffError::Shape {
            op: op_name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(sa, &out_shape);
            let mb = broadcast_index_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(out_shape, data)?, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// `x · wᵀ + b` for `x: [batch, n]`, `w: [m, n]`, `b: [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(DiffError::Shape {
                op: "affine",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(DiffError::Shape {
                op: "affine(bias)",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, n, m) = (sx[0], sx[1], sw[0]);
        let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out: Vec<f64> = (0..batch).flat_map(|_| vb.iter().copied()).collect();
        gemm(batch, n, m, vx, row_major(n), vw, transposed(n), 1.0, &mut out, row_major(m));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Array::new(vec![batch, m], out)?, Op::Affine { x, w, b }, rg))
    }

    /// Length-preserving dilated 1-D convolution with symmetric zero padding.
    ///
    /// `x: [batch, c_in, len]`, `w: [c_out, c_in, kernel]` (odd kernel), `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, DiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || sw[2] % 2 == 0 || dilation == 0 {
            return Err(DiffError::Shape {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(DiffError::Shape {
                op: "conv1d(bias)",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let width = cin * k;
        let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let col = im2col(vx, batch, cin, len, k, dilation);
        let mut rows = vec![0.0; batch * len * cout];
        gemm(batch * len, width, cout, &col, row_major(width), vw, transposed(width), 0.0, &mut rows, row_major(cout));
        let mut out = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for o in 0..cout {
                for t in 0..len {
                    out[(bi * cout + o) * len + t] = rows[(bi * len + t) * cout + o] + vb[o];
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Array::new(vec![batch, cout, len], out)?,
            Op::Conv1d { x, w, b, dilation },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(DiffError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Array::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Take `count` entries along `axis` starting at `start` with stride `step`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        step: usize,
        count: usize,
    ) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || step == 0 || (count > 0 && start + (count - 1) * step >= s[axis]) {
            return Err(DiffError::Contract(format!(
                "slice(axis={axis}, start={start}, step={step}, count={count}) out of bounds for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for c in 0..count {
                let base = (o * n + start + c * step) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = s;
        out_shape[axis] = count;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Array::new(out_shape, data)?,
            Op::Slice {
                x,
                axis,
                start,
                step,
            },
            rg,
        ))
    }

    /// Interleave along the last axis: `out[2i] = a[i]`, `out[2i+1] = b[i]`.
    ///
    /// `b` may be one shorter than `a` (odd-length output).
    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = !sa.is_empty()
            && sa.len() == sb.len()
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
            && (sa[sa.len() - 1] == sb[sb.len() - 1] || sa[sa.len() - 1] == sb[sb.len() - 1] + 1);
        if !ok {
            return Err(DiffError::Shape {
                op: "interleave",
                lhs: sa,
                rhs: sb,
            });
        }
        let na = *sa.last().unwrap();
        let nb = *sb.last().unwrap();
        let n = na + nb;
        let rows = self.value(a).len() / na.max(1);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            for i in 0..na {
                data[r * n + 2 * i] = va[r * na + i];
            }
            for i in 0..nb {
                data[r * n + 2 * i + 1] = vb[r * nb + i];
            }
        }
        let mut out_shape = sa;
        *out_shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(out_shape, data)?, Op::Interleave(a, b), rg))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Array::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(DiffError::Contract(format!(
                "reduction axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Array::new(out_shape, data)?, op, rg))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let s = self.shape(x).to_vec();
        match broadcast_shape(&s, shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(DiffError::Shape {
                    op: "broadcast_to",
                    lhs: s,
                    rhs: shape.to_vec(),
                })
            }
        }
        let src = self.value(x).data();
        let data = broadcast_index_map(&s, shape).into_iter().map(|i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::new(shape.to_vec(), data)?, Op::BroadcastTo(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot);
    }

    /// Reduce an output-shaped gradient onto a (possibly broadcast) operand.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        out_shape: &[usize],
        g: impl Iterator<Item = f64>,
    ) {
        let src_shape = self.shape(v);
        if src_shape == out_shape {
            self.accumulate(grads, v, |slot| {
                slot.iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
            });
        } else {
            let map = broadcast_index_map(src_shape, out_shape);
            self.accumulate(grads, v, |slot| {
                map.iter().zip(g).for_each(|(&i, gv)| slot[i] += gv);
            });
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, out_shape, g.iter().copied());
                self.accumulate_broadcast(grads, *b, out_shape, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, out_shape, g.iter().copied());
                self.accumulate_broadcast(grads, *b, out_shape, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (val(*a), val(*b));
                let (ma, mb): (Vec<usize>, Vec<usize>) = if sa == sb {
                    ((0..g.len()).collect(), (0..g.len()).collect())
                } else {
                    (broadcast_index_map(sa, out_shape), broadcast_index_map(sb, out_shape))
                };
                if self.nodes[a.0].requires_grad {
                    let ga = g.iter().enumerate().map(|(k, gv)| {
                        if is_div {
                            gv / vb[mb[k]]
                        } else {
                            gv * vb[mb[k]]
                        }
                    });
                    self.accumulate_broadcast(grads, *a, out_shape, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = g.iter().enumerate().map(|(k, gv)| {
                        if is_div {
                            -gv * out[k] / vb[mb[k]]
                        } else {
                            gv * va[ma[k]]
                        }
                    });
                    self.accumulate_broadcast(grads, *b, out_shape, gb);
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, gv)| *s -= gv)
            }),
            Op::Scale(x, c) => self.accumulate(grads, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, gv)| *s += c * gv)
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, gv)| *s += gv)
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / vx[k];
                    }
                })
            }
            Op::Tanh(x) => self.accumulate(grads, *x, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Square(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * g[k] * vx[k];
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |s| {
                    for k in 0..s.len() {
                        if vx[k] >= *lo && vx[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Affine { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, n, m) = (sx[0], sx[1], sw[0]);
                let (vx, vw) = (val(*x), val(*w));
                self.accumulate(grads, *x, |s| {
                    gemm(batch, m, n, g, row_major(m), vw, row_major(n), 1.0, s, row_major(n));
                });
                self.accumulate(grads, *w, |s| {
                    gemm(m, batch, n, g, transposed(m), vx, row_major(n), 1.0, s, row_major(n));
                });
                self.accumulate(grads, *b, |s| {
                    for r in 0..batch {
                        for o in 0..m {
                            s[o] += g[r * m + o];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let width = cin * k;
                let (vx, vw) = (val(*x), val(*w));
                // output gradient as rows (b, t), columns o
                let mut grows = vec![0.0; batch * len * cout];
                for bi in 0..batch {
                    for o in 0..cout {
                        for t in 0..len {
                            grows[(bi * len + t) * cout + o] = g[(bi * cout + o) * len + t];
                        }
                    }
                }
                self.accumulate(grads, *x, |s| {
                    let mut dcol = vec![0.0; batch * len * width];
                    gemm(batch * len, cout, width, &grows, row_major(cout), vw, row_major(width), 0.0, &mut dcol, row_major(width));
                    col2im_add(&dcol, s, batch, cin, len, k, *dilation);
                });
                self.accumulate(grads, *w, |s| {
                    let col = im2col(vx, batch, cin, len, k, *dilation);
                    gemm(cout, batch * len, width, &grows, transposed(cout), &col, row_major(width), 1.0, s, row_major(width));
                });
                self.accumulate(grads, *b, |s| {
                    for bi in 0..batch {
                        for o in 0..cout {
                            s[o] += g[(bi * cout + o) * len..(bi * cout + o + 1) * len]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let chunk = self.shape(v)[*axis] * inner;
                        self.accumulate(grads, v, |s| {
                            for c in 0..chunk {
                                s[o * chunk + c] += g[offset + c];
                            }
                        });
                        offset += chunk;
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                step,
            } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let count = out_shape[*axis];
                self.accumulate(grads, *x, |sl| {
                    let mut k = 0;
                    for o in 0..outer {
                        for c in 0..count {
                            let base = (o * n + start + c * step) * inner;
                            for i in 0..inner {
                                sl[base + i] += g[k];
                                k += 1;
                            }
                        }
                    }
                });
            }
            Op::Interleave(a, b) => {
                let na = *self.shape(*a).last().unwrap();
                let nb = *self.shape(*b).last().unwrap();
                let n = na + nb;
                let rows = self.nodes[a.0].value.len() / na.max(1);
                self.accumulate(grads, *a, |s| {
                    for r in 0..rows {
                        for i in 0..na {
                            s[r * na + i] += g[r * n + 2 * i];
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for r in 0..rows {
                        for i in 0..nb {
                            s[r * nb + i] += g[r * n + 2 * i + 1];
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let f = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                self.accumulate(grads, *x, |sl| {
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for i in 0..inner {
                                sl[base + i] += f * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::BroadcastTo(x) => {
                self.accumulate_broadcast(grads, *x, out_shape, g.iter().copied());
            }
        }
    }
}

