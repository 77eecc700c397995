//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates adjoints. Parameters enter as leaves tied to a [`ParamStore`],
//! and each node remembers the scope it was created in so tests can inspect
//! which submodules took part in a computation.
//!
//! Feature maps use a `[channels, height * width]` layout and token sequences
//! a `[tokens, channels]` layout; nearly every op is 2-D.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Rc<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BcastAdd(Var, Var),
    BcastMul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        inv_std: Rc<Vec<f64>>,
    },
    MeanCols(Var),
    MeanRows(Var),
    MaxCols {
        x: Var,
        arg: Rc<Vec<usize>>,
    },
    MaxRows {
        x: Var,
        arg: Rc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Im2Col(Var, Rc<ConvGeom>),
    Resize(Var, Rc<ResizePlan>),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    scope: u32,
}

/// Sliding-window geometry shared by `im2col` and its adjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Bilinear interpolation taps (half-pixel centers, edge clamped).
#[derive(Debug)]
pub struct ResizePlan {
    src: (usize, usize),
    dst: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl ResizePlan {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|o| {
                    let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (pos.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    let t = pos - i0 as f64;
                    (i0, i1, t)
                })
                .collect()
        };
        let ys = axis(src_h, dst_h);
        let xs = axis(src_w, dst_w);
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                taps.push([
                    (y0 * src_w + x0, (1.0 - ty) * (1.0 - tx)),
                    (y0 * src_w + x1, (1.0 - ty) * tx),
                    (y1 * src_w + x0, ty * (1.0 - tx)),
                    (y1 * src_w + x1, ty * tx),
                ]);
            }
        }
        Self {
            src: (src_h, src_w),
            dst: (dst_h, dst_w),
            taps,
        }
    }

    /// Applies the plan to a `[channels, src_h * src_w]` buffer.
    pub fn apply(&self, channels: usize, input: &[f64]) -> Vec<f64> {
        let src_n = self.src.0 * self.src.1;
        let dst_n = self.dst.0 * self.dst.1;
        let mut out = vec![0.0; channels * dst_n];
        for c in 0..channels {
            let row = &input[c * src_n..(c + 1) * src_n];
            let orow = &mut out[c * dst_n..(c + 1) * dst_n];
            for (o, taps) in orow.iter_mut().zip(&self.taps) {
                *o = taps.iter().map(|&(i, w)| row[i] * w).sum();
            }
        }
        out
    }

    fn adjoint(&self, channels: usize, grad: &[f64]) -> Vec<f64> {
        let src_n = self.src.0 * self.src.1;
        let dst_n = self.dst.0 * self.dst.1;
        let mut out = vec![0.0; channels * src_n];
        for c in 0..channels {
            let row = &mut out[c * src_n..(c + 1) * src_n];
            let grow = &grad[c * dst_n..(c + 1) * dst_n];
            for (g, taps) in grow.iter().zip(&self.taps) {
                for &(i, w) in taps {
                    row[i] += g * w;
                }
            }
        }
        out
    }
}

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. a parameter, if it took part in the computation.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    scopes: Vec<String>,
    scope_stack: Vec<u32>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            scopes: vec![String::new()],
            scope_stack: vec![0],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let scope = *self.scope_stack.last().unwrap();
        self.nodes.push(Node { value, op, scope });
        Var(self.nodes.len() - 1)
    }

    /// Enters a named scope; nested scopes are joined with `/`.
    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scopes[*self.scope_stack.last().unwrap() as usize];
        let path = if parent.is_empty() {
            name.to_string()
        } else {
            format!("{parent}/{name}")
        };
        let id = match self.scopes.iter().position(|s| *s == path) {
            Some(i) => i,
            None => {
                self.scopes.push(path);
                self.scopes.len() - 1
            }
        };
        self.scope_stack.push(id as u32);
    }

    pub fn pop_scope(&mut self) {
        assert!(self.scope_stack.len() > 1, "pop_scope without push_scope");
        self.scope_stack.pop();
    }

    pub fn scope_of(&self, v: Var) -> &str {
        &self.scopes[self.nodes[v.0].scope as usize]
    }

    /// Every scope path that owns at least one node.
    pub fn active_scopes(&self) -> Vec<&str> {
        let mut used = vec![false; self.scopes.len()];
        for n in &self.nodes {
            used[n.scope as usize] = true;
        }
        self.scopes
            .iter()
            .zip(used)
            .filter(|(s, u)| *u && !s.is_empty())
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Direct inputs of a node.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BcastAdd(a, b)
            | Op::BcastMul(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::MeanCols(a)
            | Op::MeanRows(a)
            | Op::Reshape(a)
            | Op::Im2Col(a, _)
            | Op::Resize(a, _) => vec![*a],
            Op::NormalizeRows { x, .. }
            | Op::MaxCols { x, .. }
            | Op::MaxRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Number of recorded nodes that take `v` as a direct input, counting
    /// a node once even if it uses `v` twice.
    pub fn consumers(&self, v: Var) -> usize {
        (v.0 + 1..self.nodes.len())
            .filter(|&i| self.parents(Var(i)).contains(&v))
            .count()
    }

    /// Earliest node holding a non-finite value, with its scope.
    pub fn first_non_finite(&self) -> Option<(Var, &str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (Var(i), self.scopes[self.nodes[i].scope as usize].as_str()))
    }

    /// Outputs of every row-softmax recorded so far.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::SoftmaxRows(_)))
            .map(|(i, n)| (Var(i), &n.value))
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value)
    }

    /// Leaf bound to a stored parameter; repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Leaf);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Mul(a, b))
    }

    fn bcast_apply(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let (m, n) = (x.rows(), x.cols());
        let (bm, bn) = (y.rows(), y.cols());
        assert!(
            (bm == m || bm == 1) && (bn == n || bn == 1),
            "cannot broadcast [{bm},{bn}] onto [{m},{n}]"
        );
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let br = if bm == 1 { 0 } else { r };
            for c in 0..n {
                let bc = if bn == 1 { 0 } else { c };
                out.push(f(x.data()[r * n + c], y.data()[br * bn + bc]));
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `a + b` where `b` is `[m,n]`, `[m,1]`, `[1,n]` or `[1,1]`.
    pub fn bcast_add(&mut self, a: Var, b: Var) -> Var {
        let t = self.bcast_apply(a, b, |p, q| p + q);
        self.push(t, Op::BcastAdd(a, b))
    }

    pub fn bcast_mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.bcast_apply(a, b, |p, q| p * q);
        self.push(t, Op::BcastMul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.rows(), x.cols());
        let (k2, n) = (y.rows(), y.cols());
        assert_eq!(
            k, k2,
            "matmul inner dimension mismatch: [{m},{k}]·[{k2},{n}]"
        );
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            x.data(),
            k as isize,
            1,
            y.data(),
            n as isize,
            1,
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose2();
        self.push(t, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Tensor::new(&[m, n], out), Op::SoftmaxRows(a))
    }

    /// Standardizes each row to zero mean and unit (biased) variance.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = x.data().to_vec();
        let mut inv = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv.push(is);
        }
        self.push(
            Tensor::new(&[m, n], out),
            Op::NormalizeRows {
                x: a,
                inv_std: Rc::new(inv),
            },
        )
    }

    /// Mean over columns: `[m,n] -> [m,1]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let out = x
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        self.push(Tensor::new(&[m, 1], out), Op::MeanCols(a))
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::new(&[1, n], out), Op::MeanRows(a))
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(m);
        let mut arg = Vec::with_capacity(m);
        for (r, row) in x.data().chunks(n).enumerate() {
            let (mut bi, mut bv) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            out.push(bv);
            arg.push(r * n + bi);
        }
        self.push(
            Tensor::new(&[m, 1], out),
            Op::MaxCols {
                x: a,
                arg: Rc::new(arg),
            },
        )
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = x.data()[..n].to_vec();
        let mut arg: Vec<usize> = (0..n).collect();
        for r in 1..m {
            for c in 0..n {
                let v = x.data()[r * n + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r * n + c;
                }
            }
        }
        self.push(
            Tensor::new(&[1, n], out),
            Op::MaxRows {
                x: a,
                arg: Rc::new(arg),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), n, "concat_rows column mismatch");
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::new(&[m, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols row mismatch");
                let w = t.cols();
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let n = x.cols();
        assert!(start < end && end <= x.rows(), "slice_rows out of range");
        let data = x.data()[start * n..end * n].to_vec();
        self.push(
            Tensor::new(&[end - start, n], data),
            Op::SliceRows { x: a, start },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        assert!(start < end && end <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&x.data()[r * n + start..r * n + end]);
        }
        self.push(
            Tensor::new(&[m, end - start], data),
            Op::SliceCols { x: a, start },
        )
    }

    /// Row `i` of the output is row `idx[i]` of the input.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        let rows = idx.len();
        self.push(Tensor::new(&[rows, n], data), Op::GatherRows { x: a, idx })
    }

    /// Unfolds `[C, H*W]` into `[C*k*k, Ho*Wo]` patch columns (zero padded).
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), &[geom.channels, geom.height * geom.width]);
        let out = im2col_forward(x.data(), &geom);
        let shape = [
            geom.channels * geom.kernel * geom.kernel,
            geom.out_height() * geom.out_width(),
        ];
        self.push(Tensor::new(&shape, out), Op::Im2Col(a, Rc::new(geom)))
    }

    /// Bilinear resampling of a `[C, H*W]` map.
    pub fn resize(&mut self, a: Var, plan: Rc<ResizePlan>) -> Var {
        let x = self.value(a);
        let c = x.rows();
        assert_eq!(
            x.cols(),
            plan.src.0 * plan.src.1,
            "resize source size mismatch"
        );
        let out = plan.apply(c, x.data());
        let shape = [c, plan.dst.0 * plan.dst.1];
        self.push(Tensor::new(&shape, out), Op::Resize(a, plan))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a))
    }

    /// Records an op whose value and vector-Jacobian product are supplied by
    /// the caller. `backward(grad_out, inputs)` returns one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Rc::new(backward),
            },
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).numel(),
            1,
            "backward needs a scalar output"
        );
        let seed = Tensor::full(self.shape(output), 1.0);
        self.backward_with(output, seed)
    }

    /// Reverse pass seeded with an explicit output adjoint.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let mut params: Vec<(ParamId, Var)> =
            self.param_vars.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
        fn acc_with(
            grads: &mut [Option<Tensor>],
            v: Var,
            shape: &[usize],
            f: impl FnOnce(&mut [f64]),
        ) {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
            f(slot.data_mut());
        }
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    x.shape(),
                    g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
                );
                let gb = Tensor::new(
                    y.shape(),
                    g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect(),
                );
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::BcastAdd(a, b) | Op::BcastMul(a, b) => {
                let is_mul = matches!(node.op, Op::BcastMul(..));
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, n) = (x.rows(), x.cols());
                let (bm, bn) = (y.rows(), y.cols());
                let mut ga = Vec::with_capacity(m * n);
                let mut gb = vec![0.0; bm * bn];
                for r in 0..m {
                    let br = if bm == 1 { 0 } else { r };
                    for c in 0..n {
                        let bc = if bn == 1 { 0 } else { c };
                        let gv = g.data()[r * n + c];
                        let yv = y.data()[br * bn + bc];
                        if is_mul {
                            ga.push(gv * yv);
                            gb[br * bn + bc] += gv * x.data()[r * n + c];
                        } else {
                            ga.push(gv);
                            gb[br * bn + bc] += gv;
                        }
                    }
                }
                acc(grads, *a, Tensor::new(&[m, n], ga));
                acc(grads, *b, Tensor::new(&[bm, bn], gb));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * s)),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = (x.rows(), x.cols());
                let n = y.cols();
                // dA = G · Bᵀ
                acc_with(grads, *a, &[m, k], |d| {
                    gemm_acc(m, n, k, g.data(), n as isize, 1, y.data(), 1, n as isize, d)
                });
                // dB = Aᵀ · G
                acc_with(grads, *b, &[k, n], |d| {
                    gemm_acc(k, m, n, x.data(), 1, k as isize, g.data(), n as isize, 1, d)
                });
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose2()),
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                acc(grads, *a, Tensor::new(out.shape(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *a, Tensor::new(x.shape(), d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                acc(grads, *a, Tensor::new(x.shape(), d));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for (srow, grow) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    d.extend(srow.iter().zip(grow).map(|(s, gv)| s * (gv - dot)));
                }
                acc(grads, *a, Tensor::new(out.shape(), d));
            }
            Op::NormalizeRows { x, inv_std } => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for ((yrow, grow), is) in out
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(inv_std.iter())
                {
                    let gm = grow.iter().sum::<f64>() / n as f64;
                    let gym = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum::<f64>() / n as f64;
                    d.extend(
                        yrow.iter()
                            .zip(grow)
                            .map(|(y, gv)| is * (gv - gm - y * gym)),
                    );
                }
                acc(grads, *x, Tensor::new(out.shape(), d));
            }
            Op::MeanCols(a) => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    let v = g.data()[r] / n as f64;
                    d.extend(std::iter::repeat(v).take(n));
                }
                acc(grads, *a, Tensor::new(&[m, n], d));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let (m, n) = (x.rows(), x.cols());
                let row: Vec<f64> = g.data().iter().map(|v| v / m as f64).collect();
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend_from_slice(&row);
                }
                acc(grads, *a, Tensor::new(&[m, n], d));
            }
            Op::MaxCols { x, arg } | Op::MaxRows { x, arg } => {
                let shape = self.shape(*x).to_vec();
                acc_with(grads, *x, &shape, |d| {
                    for (gv, &i) in g.data().iter().zip(arg.iter()) {
                        d[i] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let n = out.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[off * n..(off + rows) * n].to_vec();
                    acc(grads, p, Tensor::new(&[rows, n], slice));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g.data()[r * n + off..r * n + off + w]);
                    }
                    acc(grads, p, Tensor::new(&[m, w], d));
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let shape = self.shape(*x).to_vec();
                let n = shape[1];
                acc_with(grads, *x, &shape, |d| {
                    for (o, gv) in d[start * n..].iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x).to_vec();
                let n = shape[1];
                let w = out.cols();
                acc_with(grads, *x, &shape, |d| {
                    for (r, grow) in g.data().chunks(w).enumerate() {
                        for (c, gv) in grow.iter().enumerate() {
                            d[r * n + start + c] += gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x).to_vec();
                let n = shape[1];
                acc_with(grads, *x, &shape, |d| {
                    for (grow, &src) in g.data().chunks(n).zip(idx.iter()) {
                        for (o, gv) in d[src * n..(src + 1) * n].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Im2Col(a, geom) => {
                let shape = self.shape(*a).to_vec();
                acc_with(grads, *a, &shape, |d| col2im_acc(g.data(), geom, d));
            }
            Op::Resize(a, plan) => {
                let c = out.rows();
                let shape = self.shape(*a).to_vec();
                acc(grads, *a, Tensor::new(&shape, plan.adjoint(c, g.data())));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(g, &vals);
                assert_eq!(gs.len(), inputs.len(), "custom backward arity");
                for (v, t) in inputs.iter().zip(gs) {
                    acc(grads, *v, t);
                }
            }
        }
    }
}

fn im2col_forward(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (c, h, w, k, s, p) = (
        geom.channels,
        geom.height,
        geom.width,
        geom.kernel,
        geom.stride,
        geom.pad as isize,
    );
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let mut out = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let orow = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        orow[oy * wo + ox] = x[ch * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    out
}

fn col2im_acc(g: &[f64], geom: &ConvGeom, d: &mut [f64]) {
    let (c, h, w, k, s, p) = (
        geom.channels,
        geom.height,
        geom.width,
        geom.kernel,
        geom.stride,
        geom.pad as isize,
    );
    let (ho, wo) = (geom.out_height(), geom.out_width());
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let grow = &g[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        d[ch * h * w + iy as usize * w + ix as usize] += grow[oy * wo + ox];
                    }
                }
            }
        }
    }
}
