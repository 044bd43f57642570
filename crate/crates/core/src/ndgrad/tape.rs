use super::kernels::{self as k, AttnGeom, ConvGeom, GroupNormSaved};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of an op defined outside this module.
pub trait CustomBackward<T: Scalar> {
    /// Gradients for each input, in the order the inputs were recorded.
    /// `None` marks inputs that do not receive a gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, k: Var, b: Var, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, saved: GroupNormSaved<T> },
    Mish { x: Var },
    Softmax { x: Var },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Concat { a: Var, b: Var },
    Slice { x: Var, start: usize, end: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddLast { x: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Clamp01 { x: Var },
    Upsample2 { x: Var },
    Swap01 { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    MaskedMse { a: Var, b: Var, mask: Vec<T>, count: T },
    Film { z: Var, cm: Var, cb: Var, m: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the recording order is already
/// a topological order. Gradients accumulate on leaves only; calling
/// [`Tape::backward`] twice without [`Tape::zero_grad`] sums them.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dims<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: dims {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => k::add_into(acc, &g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.dims().to_vec(), g.clone()).expect("grad dims"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ------------------------------------------------------------ ops

    /// `out[..., i] = sum_j W[i, j] x[..., j] + b[i]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.dims()[1] {
            return Err(shape_err!("affine: x {:?} with W {:?}", xv.dims(), wv.dims()));
        }
        let (dout, din) = (wv.dims()[0], wv.dims()[1]);
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.dims() != [dout] {
                    return Err(shape_err!("affine: bias {:?}, expected [{dout}]", bv.dims()));
                }
                Some(bv.data())
            }
            None => None,
        };
        let y = k::affine_fwd(xv.data(), wv.data(), bias, din, dout);
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(dims, y)?, Op::Affine { x, w, b }, rg))
    }

    /// Zero-padded 1-D convolution along axis 1 of `x[S, L, c_in]` with a
    /// kernel `[2k+1, c_out, c_in]`. `stride > 1` subsamples output steps.
    pub fn conv1d(&mut self, x: Var, kernel: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(b));
        if kv.rank() != 3 {
            return Err(shape_err!("conv1d: kernel must be rank 3, got {:?}", kv.dims()));
        }
        let (width, cout, cin) = (kv.dims()[0], kv.dims()[1], kv.dims()[2]);
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d: kernel width {width} must be odd")));
        }
        if xv.rank() != 3 || xv.dims()[2] != cin || xv.dims()[1] == 0 {
            return Err(shape_err!("conv1d: x {:?} with kernel {:?}", xv.dims(), kv.dims()));
        }
        if bv.dims() != [cout] || stride == 0 {
            return Err(shape_err!("conv1d: bias {:?} / stride {stride}", bv.dims()));
        }
        let geom = ConvGeom::new(xv.dims()[0], xv.dims()[1], cin, cout, width, stride);
        let y = k::conv1d_fwd(xv.data(), kv.data(), bv.data(), &geom);
        let rg = self.rg(&[x, kernel, b]);
        let t = Tensor::new(vec![geom.seqs, geom.out_len, cout], y)?;
        Ok(self.push(t, Op::Conv1d { x, k: kernel, b, geom }, rg))
    }

    /// Group normalisation over the last axis, independently at every
    /// leading index.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!("group_norm: {d} features not divisible by {groups} groups")));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.dims() != [d] || bv.dims() != [d] {
            return Err(shape_err!("group_norm: affine params {:?}/{:?} for width {d}", gv.dims(), bv.dims()));
        }
        let (y, saved) = k::group_norm_fwd(xv.data(), d, groups, gv.data(), bv.data(), eps);
        let dims = xv.dims().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(dims, y)?, Op::GroupNorm { x, gamma, beta, groups, saved }, rg))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Tensor::new(xv.dims().to_vec(), k::mish_fwd(xv.data())).unwrap();
        let rg = self.rg(&[x]);
        self.push(y, Op::Mish { x }, rg)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if n == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        let y = Tensor::new(xv.dims().to_vec(), k::softmax_rows(xv.data(), n))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Softmax { x }, rg))
    }

    /// Multi-head self-attention across axis 0 of `[O, L, d]` inputs, at each
    /// index of axis 1, with logits scaled by `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, key: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(key), self.value(v));
        same_dims("attention q/k", qv, kv)?;
        same_dims("attention q/v", qv, vv)?;
        if qv.rank() != 3 {
            return Err(shape_err!("attention expects [O, L, d], got {:?}", qv.dims()));
        }
        let d = qv.dims()[2];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let geom = AttnGeom {
            objects: qv.dims()[0],
            steps: qv.dims()[1],
            dim: d,
            heads,
        };
        let (y, probs) = k::attention_fwd(qv.data(), kv.data(), vv.data(), &geom);
        let dims = qv.dims().to_vec();
        let rg = self.rg(&[q, key, v]);
        Ok(self.push(Tensor::new(dims, y)?, Op::Attention { q, k: key, v, geom, probs }, rg))
    }

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (da, db) = (av.last_dim(), bv.last_dim());
        if av.rank() != bv.rank() || av.dims()[..av.rank() - 1] != bv.dims()[..bv.rank() - 1] {
            return Err(shape_err!("concat: {:?} with {:?}", av.dims(), bv.dims()));
        }
        let mut y = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(da).zip(bv.data().chunks_exact(db)) {
            y.extend_from_slice(ra);
            y.extend_from_slice(rb);
        }
        let mut dims = av.dims().to_vec();
        *dims.last_mut().unwrap() = da + db;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(dims, y)?, Op::Concat { a, b }, rg))
    }

    /// Features `start..end` of the last axis.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start >= end || end > d {
            return Err(shape_err!("slice {start}..{end} of width {d}"));
        }
        let y: Vec<T> = xv
            .data()
            .chunks_exact(d)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(dims, y)?, Op::Slice { x, start, end }, rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_dims(what, av, bv)?;
        let y = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(av.dims().to_vec(), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_op(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_op(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_op(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    /// Adds `b[d]` to every row of `x[..., d]`.
    pub fn add_lastdim(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.dims() != [d] {
            return Err(shape_err!("add_lastdim: {:?} + {:?}", xv.dims(), bv.dims()));
        }
        let mut y = xv.data().to_vec();
        for row in y.chunks_exact_mut(d) {
            k::add_into(row, bv.data());
        }
        let t = Tensor::new(xv.dims().to_vec(), y)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddLast { x, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(y, Op::AddScalar { x }, rg)
    }

    /// Clamp to `[0, 1]`; the gradient passes on the closed interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        let rg = self.rg(&[x]);
        self.push(y, Op::Clamp01 { x }, rg)
    }

    /// Nearest-neighbour doubling along axis 1 of `[S, L, d]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(shape_err!("upsample2 expects rank 3, got {:?}", xv.dims()));
        }
        let (s, l, d) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let y = Tensor::new(vec![s, 2 * l, d], k::upsample2_fwd(xv.data(), s, l, d))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Upsample2 { x }, rg))
    }

    /// `[A, B, d]` to `[B, A, d]`.
    pub fn swap01(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(shape_err!("swap01 expects rank 3, got {:?}", xv.dims()));
        }
        let (a, b, d) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let y = Tensor::new(vec![b, a, d], k::swap01(xv.data(), a, b, d))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Swap01 { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean of `(a - b)^2` over entries where `mask` is non-zero.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_dims("masked_mse", av, bv)?;
        same_dims("masked_mse mask", av, mask)?;
        let count: T = mask.data().iter().copied().sum();
        if count <= T::zero() {
            return Err(Error::Usage("masked_mse over an empty mask".into()));
        }
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .zip(mask.data())
            .map(|((&p, &q), &m)| m * (p - q) * (p - q))
            .sum();
        let rg = self.rg(&[a, b]);
        let op = Op::MaskedMse {
            a,
            b,
            mask: mask.data().to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(s / count), op, rg))
    }

    /// `(M * Cm + (1 - M)) * Z + M * Cb` with `M[..., 1]` broadcast across
    /// the feature axis.
    pub fn film(&mut self, z: Var, cm: Var, cb: Var, m: Var) -> Result<Var> {
        let (zv, cmv, cbv, mv) = (self.value(z), self.value(cm), self.value(cb), self.value(m));
        same_dims("film C_m", zv, cmv)?;
        same_dims("film C_b", zv, cbv)?;
        let d = zv.last_dim();
        if mv.last_dim() != 1 || mv.len() * d != zv.len() || mv.rank() != zv.rank() {
            return Err(shape_err!("film: mask {:?} for features {:?}", mv.dims(), zv.dims()));
        }
        let mut y = vec![T::zero(); zv.len()];
        for (p, &mm) in mv.data().iter().enumerate() {
            let one_minus = T::one() - mm;
            for f in p * d..(p + 1) * d {
                y[f] = (mm * cmv.data()[f] + one_minus) * zv.data()[f] + mm * cbv.data()[f];
            }
        }
        let t = Tensor::new(zv.dims().to_vec(), y)?;
        let rg = self.rg(&[z, cm, cb, m]);
        Ok(self.push(t, Op::Film { z, cm, cb, m }, rg))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        let rg = self.rg(&inputs);
        self.push(value, Op::Custom { inputs, rule }, rg)
    }

    // ------------------------------------------------------------ backward

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[loss.0].value.dims()
            )));
        }
        let mut local: Vec<Option<Vec<T>>> = Vec::new();
        local.resize_with(loss.0 + 1, || None);
        local[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], g);
                continue;
            }
            for (input, gi) in backward_op(nodes, node, &g) {
                if nodes[input.0].requires_grad {
                    accumulate(&mut local[input.0], gi);
                }
            }
        }
        Ok(())
    }
}

fn backward_op<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (dout, din) = (wv.dims()[0], wv.dims()[1]);
            let (dx, dw) = k::affine_bwd(xv.data(), wv.data(), g, din, dout, rg(*x), rg(*w));
            out.extend(dx.map(|d| (*x, d)));
            out.extend(dw.map(|d| (*w, d)));
            if let Some(b) = b {
                if rg(*b) {
                    let mut db = vec![T::zero(); dout];
                    k::col_sum_into(g, dout, &mut db);
                    out.push((*b, db));
                }
            }
        }
        Op::Conv1d { x, k: kern, b, geom } => {
            let (dx, dk) = k::conv1d_bwd(val(*x).data(), val(*kern).data(), g, geom, rg(*x), rg(*kern));
            out.extend(dx.map(|d| (*x, d)));
            out.extend(dk.map(|d| (*kern, d)));
            if rg(*b) {
                let mut db = vec![T::zero(); geom.cout];
                k::col_sum_into(g, geom.cout, &mut db);
                out.push((*b, db));
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, saved } => {
            let d = val(*x).last_dim();
            let (dx, dg, db) = k::group_norm_bwd(saved, g, d, *groups, val(*gamma).data());
            out.push((*x, dx));
            out.push((*gamma, dg));
            out.push((*beta, db));
        }
        Op::Mish { x } => out.push((*x, k::mish_bwd(val(*x).data(), g))),
        Op::Softmax { x } => {
            let n = node.value.last_dim();
            out.push((*x, k::softmax_rows_bwd(node.value.data(), g, n)));
        }
        Op::Attention { q, k: key, v, geom, probs } => {
            let (dq, dk, dv) = k::attention_bwd(val(*q).data(), val(*key).data(), val(*v).data(), probs, g, geom);
            out.push((*q, dq));
            out.push((*key, dk));
            out.push((*v, dv));
        }
        Op::Concat { a, b } => {
            let (da, db) = (val(*a).last_dim(), val(*b).last_dim());
            let mut ga = Vec::with_capacity(val(*a).len());
            let mut gb = Vec::with_capacity(val(*b).len());
            for row in g.chunks_exact(da + db) {
                ga.extend_from_slice(&row[..da]);
                gb.extend_from_slice(&row[da..]);
            }
            out.push((*a, ga));
            out.push((*b, gb));
        }
        Op::Slice { x, start, end } => {
            let d = val(*x).last_dim();
            let w = end - start;
            let mut gx = vec![T::zero(); val(*x).len()];
            for (dst, src) in gx.chunks_exact_mut(d).zip(g.chunks_exact(w)) {
                dst[*start..*end].copy_from_slice(src);
            }
            out.push((*x, gx));
        }
        Op::Add { a, b } => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.to_vec()));
        }
        Op::Sub { a, b } => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.iter().map(|&v| -v).collect()));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if rg(*a) {
                out.push((*a, g.iter().zip(bv).map(|(&p, &q)| p * q).collect()));
            }
            if rg(*b) {
                out.push((*b, g.iter().zip(av).map(|(&p, &q)| p * q).collect()));
            }
        }
        Op::AddLast { x, b } => {
            out.push((*x, g.to_vec()));
            if rg(*b) {
                let d = node.value.last_dim();
                let mut db = vec![T::zero(); d];
                k::col_sum_into(g, d, &mut db);
                out.push((*b, db));
            }
        }
        Op::Scale { x, s } => out.push((*x, g.iter().map(|&v| v * *s).collect())),
        Op::AddScalar { x } => out.push((*x, g.to_vec())),
        Op::Clamp01 { x } => {
            let gx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v >= T::zero() && v <= T::one() { gv } else { T::zero() })
                .collect();
            out.push((*x, gx));
        }
        Op::Upsample2 { x } => {
            let d = val(*x).dims();
            out.push((*x, k::upsample2_bwd(g, d[0], d[1], d[2])));
        }
        Op::Swap01 { x } => {
            let d = val(*x).dims();
            out.push((*x, k::swap01(g, d[1], d[0], d[2])));
        }
        Op::Reshape { x } => out.push((*x, g.to_vec())),
        Op::Sum { x } => out.push((*x, vec![g[0]; val(*x).len()])),
        Op::MaskedMse { a, b, mask, count } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let two = T::from_f64(2.0) * g[0] / *count;
            let ga: Vec<T> = av
                .iter()
                .zip(bv)
                .zip(mask)
                .map(|((&p, &q), &m)| two * m * (p - q))
                .collect();
            if rg(*b) {
                out.push((*b, ga.iter().map(|&v| -v).collect()));
            }
            out.push((*a, ga));
        }
        Op::Film { z, cm, cb, m } => {
            let (zv, cmv, cbv, mv) = (val(*z).data(), val(*cm).data(), val(*cb).data(), val(*m).data());
            let d = node.value.last_dim();
            let mut gz = vec![T::zero(); zv.len()];
            let mut gcm = vec![T::zero(); zv.len()];
            let mut gcb = vec![T::zero(); zv.len()];
            let mut gm = vec![T::zero(); mv.len()];
            for (p, &mm) in mv.iter().enumerate() {
                let mut acc = T::zero();
                for f in p * d..(p + 1) * d {
                    gz[f] = (mm * cmv[f] + T::one() - mm) * g[f];
                    gcm[f] = mm * zv[f] * g[f];
                    gcb[f] = mm * g[f];
                    acc += (cmv[f] * zv[f] - zv[f] + cbv[f]) * g[f];
                }
                gm[p] = acc;
            }
            out.push((*z, gz));
            out.push((*cm, gcm));
            out.push((*cb, gcb));
            out.push((*m, gm));
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
            for (v, gi) in inputs.iter().zip(rule.backward(&ins, &node.value, g)) {
                if let Some(gi) = gi {
                    out.push((*v, gi));
                }
            }
        }
    }
    out
}
