//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that (transitively) depends on a trainable leaf.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::numerics::attention::{attention_backward, attention_forward, AttentionLayout};
use crate::numerics::conv::{col2im, im2col, ConvGeom};
use crate::numerics::real::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::numerics::rope::{apply_rope, RopeAngles};
use crate::numerics::{ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    L2NormHeads { x: Var, heads: usize },
    Rope { x: Var, angles: Rc<RopeAngles> },
    Gather { table: Var, idx: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: F, layout: Rc<AttentionLayout> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    StraightThrough(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>>, weight: F },
    Sum(Var),
    Mean(Var),
    Charbonnier { a: Var, b: Var, eps: F },
    GradDiffMse { a: Var, b: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    /// Values saved by the forward pass for the backward pass.
    aux: Vec<F>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    param_vars: HashMap<usize, Var>,
    params_trainable: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), param_vars: HashMap::new(), params_trainable: true }
    }

    /// Graph in which parameters are treated as constants (inference).
    pub fn inference() -> Self {
        Self { params_trainable: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, aux: Vec<F>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, aux });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers parameter `id` of `store` (once per graph).
    pub fn param(&mut self, store: &ParamStore<F>, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, self.params_trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore<F>, name: &str) -> Var {
        let id = store.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(store, id)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m, k] @ [k, n]`; leading dimensions of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` with `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>, what: &str) -> Result<Var> {
        self.check_same(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.numel() != ta.cols() {
            return shape_err(format!("add_row {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by expects a single-element scale");
        }
        let sv = self.scalar(s);
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * sv).collect())?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::from_f64c(GELU_C);
        let ac = F::from_f64c(GELU_A);
        let half = F::from_f64c(0.5);
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| half * x * (F::one() + (c * (x + ac * x * x * x)).tanh())).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = F::from_f64c(1e-5);
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer_norm gain/bias width");
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = tx.rows();
        let mut out = vec![F::zero(); tx.numel()];
        // aux: per row (mean, rstd)
        let mut aux = Vec::with_capacity(rows * 2);
        let cf = F::from_usize(c).unwrap();
        for r in 0..rows {
            let xr = &tx.data()[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<F>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (xr[j] - mean) * rstd * g[j] + b[j];
            }
            aux.push(mean);
            aux.push(rstd);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_aux(t, Op::LayerNorm { x, gamma, beta }, rg, aux))
    }

    /// Normalizes each head-sized chunk of every row to unit length.
    pub fn l2_norm_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible into {heads} heads"));
        }
        let hd = d / heads;
        let eps = F::from_f64c(1e-12);
        let mut out = tx.data().to_vec();
        let mut aux = Vec::with_capacity(out.len() / hd);
        for chunk in out.chunks_mut(hd) {
            let n = (chunk.iter().map(|&v| v * v).sum::<F>() + eps).sqrt();
            for v in chunk.iter_mut() {
                *v /= n;
            }
            aux.push(n);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push_aux(t, Op::L2NormHeads { x, heads }, rg, aux))
    }

    pub fn rope(&mut self, x: Var, angles: Rc<RopeAngles>) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d % angles.head_dim != 0 || tx.rows() != angles.rows() {
            return shape_err(format!(
                "rope over {:?} with head_dim {} and {} positions",
                tx.shape(),
                angles.head_dim,
                angles.rows()
            ));
        }
        let mut out = vec![F::zero(); tx.numel()];
        apply_rope(tx.data(), d, &angles, false, &mut out);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Rope { x, angles }, rg))
    }

    /// Selects rows of `table` (embedding lookup / row routing).
    pub fn gather(&mut self, table: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let tt = self.value(table);
        let c = tt.cols();
        let rows = tt.rows();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::OutOfRange(format!("row {i} of table with {rows} rows")));
            }
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Gather { table, idx }, rg))
    }

    /// Stacks 2D tensors with equal widths along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return shape_err("concat_rows width mismatch");
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Grouped multi-head attention; `q`, `k`, `v` are `[n, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: F,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.shape() != tv.shape() || tk.cols() != d {
            return shape_err(format!("attention q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible into {heads} heads"));
        }
        if tq.rows() != layout.n_queries || tk.rows() != layout.n_keys {
            return shape_err(format!(
                "layout covers {}x{} tokens, got {}x{}",
                layout.n_queries,
                layout.n_keys,
                tq.rows(),
                tk.rows()
            ));
        }
        let (out, probs) = attention_forward(tq.data(), tk.data(), tv.data(), d, heads, scale, &layout);
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push_aux(t, Op::Attention { q, k, v, heads, scale, layout }, rg, probs))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if perm.len() != shape.len() {
            return shape_err("permute rank mismatch");
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(tx.data(), shape, perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Forward value `value`, gradient passed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, value: Tensor<F>) -> Result<Var> {
        self.check_shape(x, value.shape())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn check_shape(&self, x: Var, shape: &[usize]) -> Result<()> {
        if self.shape(x) != shape {
            return shape_err(format!("expected {:?}, got {:?}", shape, self.shape(x)));
        }
        Ok(())
    }

    /// Strided 2D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin*k*k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let s = tx.shape();
        if s.len() != 4 {
            return shape_err(format!("conv2d input must be [B,C,H,W], got {s:?}"));
        }
        let (bsz, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let geom = ConvGeom::conv(cin, h, wd, kernel, stride, pad)?;
        let cout = tw.shape()[0];
        if tw.shape() != [cout, geom.col_rows()] {
            return shape_err(format!("conv2d weight {:?}, want [{cout}, {}]", tw.shape(), geom.col_rows()));
        }
        let gl = geom.grid_len();
        let mut cols = vec![F::zero(); geom.col_rows() * gl];
        let mut out = vec![F::zero(); bsz * cout * gl];
        for bi in 0..bsz {
            im2col(&tx.data()[bi * geom.image_len()..(bi + 1) * geom.image_len()], &geom, &mut cols);
            matmul_into(
                tw.data(),
                &cols,
                &mut out[bi * cout * gl..(bi + 1) * cout * gl],
                cout,
                geom.col_rows(),
                gl,
                false,
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), cout, gl);
        }
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        let t = Tensor::new(vec![bsz, cout, geom.grid_h, geom.grid_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution. `x: [B, Cin, h, w]`, `w: [Cin, Cout*k*k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let s = tx.shape();
        if s.len() != 4 {
            return shape_err(format!("conv_transpose2d input must be [B,C,H,W], got {s:?}"));
        }
        let (bsz, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let geom = ConvGeom::conv_transpose(cout, h, wd, kernel, stride, pad)?;
        if tw.shape() != [cin, geom.col_rows()] {
            return shape_err(format!("conv_transpose2d weight {:?}, want [{cin}, {}]", tw.shape(), geom.col_rows()));
        }
        let gl = geom.grid_len();
        let il = geom.image_len();
        let mut cols = vec![F::zero(); geom.col_rows() * gl];
        let mut out = vec![F::zero(); bsz * il];
        for bi in 0..bsz {
            matmul_tn_into(
                tw.data(),
                &tx.data()[bi * cin * gl..(bi + 1) * cin * gl],
                &mut cols,
                geom.col_rows(),
                cin,
                gl,
                false,
            );
            col2im(&cols, &geom, &mut out[bi * il..(bi + 1) * il]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), cout, geom.image_h * geom.image_w);
        }
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        let t = Tensor::new(vec![bsz, cout, geom.image_h, geom.image_w], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// `weight * sum_i -log softmax(logits_i)[targets_i]`, a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>, weight: F) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        if tl.rows() != targets.len() {
            return shape_err(format!("{} logit rows for {} targets", tl.rows(), targets.len()));
        }
        let mut probs = vec![F::zero(); tl.numel()];
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::OutOfRange(format!("target {t} for vocabulary {v}")));
            }
            let row = tl.row(r);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let pr = &mut probs[r * v..(r + 1) * v];
            let mut sum = F::zero();
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - mx).exp();
                sum += *p;
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            total += -(row[t] - mx - sum.ln());
        }
        let rg = self.rg(logits);
        Ok(self.push_aux(Tensor::scalar(total * weight), Op::CrossEntropy { logits, targets, weight }, rg, probs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::from_usize(t.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `mean(sqrt((a - b)^2 + eps^2))`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: F) -> Result<Var> {
        self.check_same(a, b, "charbonnier")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = F::from_usize(ta.numel()).unwrap();
        let s = ta.data().iter().zip(tb.data()).map(|(&x, &y)| ((x - y) * (x - y) + eps * eps).sqrt()).sum::<F>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Charbonnier { a, b, eps }, rg))
    }

    /// Mean squared difference between the horizontal and vertical finite
    /// differences of two `[.., H, W]` images.
    pub fn grad_diff_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "grad_diff_mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ta.shape();
        if shape.len() < 2 {
            return shape_err("grad_diff_mse needs [.., H, W]");
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let d: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let (sum, count) = grad_diff_terms(&d, h, w, None);
        let s = if count == 0 { F::zero() } else { sum / F::from_usize(count).unwrap() };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::GradDiffMse { a, b }, rg))
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter `id`, if it took part in the graph.
    pub fn param_grad(&self, id: usize) -> Option<&[F]> {
        self.param_vars.get(&id).and_then(|&v| self.grad(v))
    }

    /// Gradients for every parameter of a store with `n_params` entries, in
    /// the layout [`crate::numerics::adamw_step`] expects.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<F>>> {
        (0..n_params).map(|id| self.param_grad(id).map(|g| g.to_vec())).collect()
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return shape_err("backward expects a single-element output");
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[out.0] = Some(vec![F::one()]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[F]) {
        let nodes = &self.nodes;
        let mut sink = GradSink { nodes, grads: &mut self.grads };
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if rg(*a) {
                    sink.acc(*a, |da| matmul_nt_into(g, tb.data(), da, m, n, k, true));
                }
                if rg(*b) {
                    sink.acc(*b, |db| matmul_tn_into(ta.data(), g, db, k, m, n, true));
                }
            }
            Op::Add(a, b) => {
                sink.acc_slice(*a, g);
                sink.acc_slice(*b, g);
            }
            Op::Sub(a, b) => {
                sink.acc_slice(*a, g);
                sink.acc(*b, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                sink.acc(*a, |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * y;
                    }
                });
                sink.acc(*b, |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                sink.acc_slice(*a, g);
                let c = nodes[b.0].value.numel();
                sink.acc(*b, |d| {
                    for row in g.chunks(c) {
                        for (x, &y) in d.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                sink.acc(*a, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x += y * s;
                    }
                });
            }
            Op::ScaleBy(a, s) => {
                let sv = val(*s)[0];
                let va = val(*a);
                sink.acc(*a, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x += y * sv;
                    }
                });
                sink.acc(*s, |d| {
                    d[0] += g.iter().zip(va).map(|(&y, &x)| y * x).sum::<F>();
                });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                let c = F::from_f64c(GELU_C);
                let ac = F::from_f64c(GELU_A);
                let half = F::from_f64c(0.5);
                let three = F::from_f64c(3.0);
                sink.acc(*a, |d| {
                    for ((x, &gy), &v) in d.iter_mut().zip(g).zip(va) {
                        let u = c * (v + ac * v * v * v);
                        let th = u.tanh();
                        let du = c * (F::one() + three * ac * v * v);
                        let dv = half * (F::one() + th) + half * v * (F::one() - th * th) * du;
                        *x += gy * dv;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = &nodes[x.0].value;
                let c = tx.cols();
                let rows = tx.rows();
                let aux = &node.aux;
                let gm = val(*gamma);
                let cf = F::from_usize(c).unwrap();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![F::zero(); c];
                    let mut db = vec![F::zero(); c];
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for j in 0..c {
                            let xh = (tx.data()[r * c + j] - mean) * rstd;
                            dg[j] += g[r * c + j] * xh;
                            db[j] += g[r * c + j];
                        }
                    }
                    sink.acc_slice(*gamma, &dg);
                    sink.acc_slice(*beta, &db);
                }
                if rg(*x) {
                    sink.acc(*x, |d| {
                        for r in 0..rows {
                            let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                            let xr = &tx.data()[r * c..(r + 1) * c];
                            let gr = &g[r * c..(r + 1) * c];
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for j in 0..c {
                                let gh = gr[j] * gm[j];
                                let xh = (xr[j] - mean) * rstd;
                                s1 += gh;
                                s2 += gh * xh;
                            }
                            for j in 0..c {
                                let gh = gr[j] * gm[j];
                                let xh = (xr[j] - mean) * rstd;
                                d[r * c + j] += rstd * (gh - s1 / cf - xh * s2 / cf);
                            }
                        }
                    });
                }
            }
            Op::L2NormHeads { x, heads } => {
                let y = node.value.data();
                let hd = node.value.cols() / heads;
                let norms = &node.aux;
                sink.acc(*x, |d| {
                    for (ci, n) in norms.iter().enumerate() {
                        let ys = &y[ci * hd..(ci + 1) * hd];
                        let gs = &g[ci * hd..(ci + 1) * hd];
                        let dot: F = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..hd {
                            d[ci * hd + j] += (gs[j] - ys[j] * dot) / *n;
                        }
                    }
                });
            }
            Op::Rope { x, angles } => {
                let d_ = node.value.cols();
                let mut back = vec![F::zero(); g.len()];
                apply_rope(g, d_, angles, true, &mut back);
                sink.acc_slice(*x, &back);
            }
            Op::Gather { table, idx } => {
                let c = node.value.cols();
                sink.acc(*table, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, &y) in d[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    sink.acc_slice(*p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Attention { q, k, v, heads, scale, layout } => {
                let d = node.value.cols();
                let nq = node.value.numel();
                let nk = nodes[k.0].value.numel();
                let mut dq = rg(*q).then(|| vec![F::zero(); nq]);
                let mut dk = rg(*k).then(|| vec![F::zero(); nk]);
                let mut dv = rg(*v).then(|| vec![F::zero(); nk]);
                attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.aux,
                    g,
                    d,
                    *heads,
                    *scale,
                    layout,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(dq) = dq {
                    sink.acc_slice(*q, &dq);
                }
                if let Some(dk) = dk {
                    sink.acc_slice(*k, &dk);
                }
                if let Some(dv) = dv {
                    sink.acc_slice(*v, &dv);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                sink.acc_slice(*x, &back);
            }
            Op::Reshape(x) | Op::StraightThrough(x) => sink.acc_slice(*x, g),
            Op::Conv2d { x, w, b, geom } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let bsz = tx.shape()[0];
                let cout = tw.shape()[0];
                let gl = geom.grid_len();
                let cr = geom.col_rows();
                let il = geom.image_len();
                let mut cols = vec![F::zero(); cr * gl];
                let mut dw = vec![F::zero(); tw.numel()];
                let mut dx = rg(*x).then(|| vec![F::zero(); tx.numel()]);
                for bi in 0..bsz {
                    let gb = &g[bi * cout * gl..(bi + 1) * cout * gl];
                    if rg(*w) {
                        im2col(&tx.data()[bi * il..(bi + 1) * il], geom, &mut cols);
                        matmul_nt_into(gb, &cols, &mut dw, cout, gl, cr, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul_tn_into(tw.data(), gb, &mut cols, cr, cout, gl, false);
                        col2im(&cols, geom, &mut dx[bi * il..(bi + 1) * il]);
                    }
                }
                if rg(*w) {
                    sink.acc_slice(*w, &dw);
                }
                if let Some(dx) = dx {
                    sink.acc_slice(*x, &dx);
                }
                if let Some(b) = b {
                    let db = channel_sums(g, cout, gl);
                    sink.acc_slice(*b, &db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let bsz = tx.shape()[0];
                let cin = tx.shape()[1];
                let gl = geom.grid_len();
                let cr = geom.col_rows();
                let il = geom.image_len();
                let mut cols = vec![F::zero(); cr * gl];
                let mut dw = vec![F::zero(); tw.numel()];
                let mut dx = rg(*x).then(|| vec![F::zero(); tx.numel()]);
                for bi in 0..bsz {
                    im2col(&g[bi * il..(bi + 1) * il], geom, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        matmul_into(tw.data(), &cols, &mut dx[bi * cin * gl..(bi + 1) * cin * gl], cin, cr, gl, false);
                    }
                    if rg(*w) {
                        matmul_nt_into(
                            &tx.data()[bi * cin * gl..(bi + 1) * cin * gl],
                            &cols,
                            &mut dw,
                            cin,
                            gl,
                            cr,
                            true,
                        );
                    }
                }
                if rg(*w) {
                    sink.acc_slice(*w, &dw);
                }
                if let Some(dx) = dx {
                    sink.acc_slice(*x, &dx);
                }
                if let Some(b) = b {
                    let db = channel_sums(g, geom.channels, geom.image_h * geom.image_w);
                    sink.acc_slice(*b, &db);
                }
            }
            Op::CrossEntropy { logits, targets, weight } => {
                let v = nodes[logits.0].value.cols();
                let s = g[0] * *weight;
                let probs = &node.aux;
                sink.acc(*logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            d[r * v + j] += s * probs[r * v + j];
                        }
                        d[r * v + t] -= s;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                sink.acc(*x, |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let s = g[0] / F::from_usize(n).unwrap();
                sink.acc(*x, |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::Charbonnier { a, b, eps } => {
                let (va, vb) = (val(*a), val(*b));
                let s = g[0] / F::from_usize(va.len()).unwrap();
                let e2 = *eps * *eps;
                let dd: Vec<F> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        let r = x - y;
                        s * r / (r * r + e2).sqrt()
                    })
                    .collect();
                sink.acc_slice(*a, &dd);
                sink.acc(*b, |d| {
                    for (x, &y) in d.iter_mut().zip(&dd) {
                        *x -= y;
                    }
                });
            }
            Op::GradDiffMse { a, b } => {
                let shape = node_shape(nodes, *a);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let diff: Vec<F> = val(*a).iter().zip(val(*b)).map(|(&x, &y)| x - y).collect();
                let mut dd = vec![F::zero(); diff.len()];
                let (_, count) = grad_diff_terms(&diff, h, w, Some(&mut dd));
                if count > 0 {
                    let s = g[0] / F::from_usize(count).unwrap();
                    dd.iter_mut().for_each(|v| *v *= s);
                }
                sink.acc_slice(*a, &dd);
                sink.acc(*b, |d| {
                    for (x, &y) in d.iter_mut().zip(&dd) {
                        *x -= y;
                    }
                });
            }
        }
    }
}

struct GradSink<'a, F> {
    nodes: &'a [Node<F>],
    grads: &'a mut Vec<Option<Vec<F>>>,
}

impl<F: Real> GradSink<'_, F> {
    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn acc_slice(&mut self, v: Var, src: &[F]) {
        self.acc(v, |dst| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        });
    }
}

fn node_shape<F: Real>(nodes: &[Node<F>], v: Var) -> &[usize] {
    nodes[v.0].value.shape()
}

fn add_channel_bias<F: Real>(out: &mut [F], bias: &[F], channels: usize, plane: usize) {
    for (ci, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[ci % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<F: Real>(g: &[F], channels: usize, plane: usize) -> Vec<F> {
    let mut out = vec![F::zero(); channels];
    for (ci, chunk) in g.chunks(plane).enumerate() {
        out[ci % channels] += chunk.iter().copied().sum::<F>();
    }
    out
}

/// Sum of squared finite differences of `d` over every `h x w` plane and the
/// number of terms; optionally accumulates the (unscaled) gradient.
fn grad_diff_terms<F: Real>(d: &[F], h: usize, w: usize, mut grad: Option<&mut [F]>) -> (F, usize) {
    let two = F::from_f64c(2.0);
    let mut sum = F::zero();
    let mut count = 0;
    for (pi, plane) in d.chunks(h * w).enumerate() {
        let base = pi * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let e = plane[i + 1] - plane[i];
                    sum += e * e;
                    count += 1;
                    if let Some(gr) = grad.as_deref_mut() {
                        gr[base + i + 1] += two * e;
                        gr[base + i] -= two * e;
                    }
                }
                if y + 1 < h {
                    let e = plane[i + w] - plane[i];
                    sum += e * e;
                    count += 1;
                    if let Some(gr) = grad.as_deref_mut() {
                        gr[base + i + w] += two * e;
                        gr[base + i] -= two * e;
                    }
                }
            }
        }
    }
    (sum, count)
}

/// Permutes the axes of a row-major array: `out.shape[i] = shape[perm[i]]`.
pub fn permute_data<F: Copy>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
