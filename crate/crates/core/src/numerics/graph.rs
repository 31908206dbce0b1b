//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward pass. [`Graph::backward`] walks the tape once in
//! reverse insertion order, which is a valid reverse topological order since
//! a node can only reference earlier nodes.

use std::collections::HashMap;

use super::functional as f;
use super::param::{ParamId, ParamStore};
use super::scalar::{Scalar, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything the selective scan keeps for its backward pass.
#[derive(Debug)]
struct ScanSaved<T> {
    x: Var,
    delta: Var,
    b: Var,
    c: Var,
    a: Var,
    d: Var,
    h0: Var,
    /// Hidden state after each token, `[L, C, d]`.
    history: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    MeanCols(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
    },
    Scan(Box<ScanSaved<T>>),
    /// Secondary output (final hidden state) of the scan node it points to.
    ScanFinal(Var),
    FocalLoss {
        pred: Var,
        target: Tensor<T>,
        alpha: T,
        beta: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// A recorded computation. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Focal-loss clamp keeping `log` finite at saturated predictions.
pub const FOCAL_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, tracked: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::domain(name, "produced a non-finite value"));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is recorded (used by verification).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a model parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            tracked: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copies the current value into an untracked node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = f::matmul(self.value(a), self.value(b))?;
        let t = self.tracked(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        let t = self.tracked(&[a]);
        self.push("transpose", value, Op::Transpose(a), t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        fwd: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let value = va.zip_map(vb, fwd)?;
        let t = self.tracked(&[a, b]);
        self.push(name, value, op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Max(a, b))
    }

    /// `x[..., C] + bias[C]`, broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        if vb.shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs channel width {c}", vb.shape()),
            ));
        }
        let mut value = vx.clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v = *v + b;
            }
        }
        let t = self.tracked(&[x, bias]);
        self.push("add_bias", value, Op::AddBias(x, bias), t)
    }

    /// `x[L, C] * s[L, 1]`, scaling each row.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let (l, c) = vx.dims2("mul_col")?;
        if vs.shape() != [l, 1] {
            return Err(Error::shape(
                "mul_col",
                format!("scale {:?} vs rows {l}", vs.shape()),
            ));
        }
        let mut value = vx.clone();
        for (row, &s) in value.data_mut().chunks_exact_mut(c).zip(vs.data()) {
            row.iter_mut().for_each(|v| *v = *v * s);
        }
        let t = self.tracked(&[x, s]);
        self.push("mul_col", value, Op::MulCol(x, s), t)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * k);
        let t = self.tracked(&[x]);
        self.push("scale", value, Op::Scale(x, k), t)
    }

    pub fn add_const(&mut self, x: Var, k: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + k);
        let t = self.tracked(&[x]);
        self.push("add_const", value, Op::AddConst(x), t)
    }

    fn unary(&mut self, name: &'static str, x: Var, fwd: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(fwd);
        let t = self.tracked(&[x]);
        self.push(name, value, op, t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, f::sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, f::softplus_scalar, Op::Softplus(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, f::gelu_scalar, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::domain("log", "non-positive argument"));
        }
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut value = vx.clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            f::softmax_slice(row)?;
        }
        let t = self.tracked(&[x]);
        self.push("softmax", value, Op::SoftmaxRows(x), t)
    }

    /// Softmax over the last axis restricted to entries where `keep` is true;
    /// the others are exactly zero. Same result as masking with `-inf`.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if keep.len() != vx.numel() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask has {} entries for {:?}", keep.len(), vx.shape()),
            ));
        }
        let c = vx.last_dim();
        let mut value = vx.clone();
        for (row, mask) in value.data_mut().chunks_exact_mut(c).zip(keep.chunks_exact(c)) {
            for (v, &k) in row.iter_mut().zip(mask) {
                if !k {
                    *v = T::neg_infinity();
                }
            }
            f::softmax_slice(row)?;
        }
        let t = self.tracked(&[x]);
        self.push("masked_softmax", value, Op::SoftmaxRows(x), t)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, mean, rstd) =
            f::layer_norm_stats(self.value(x), self.value(gain), self.value(bias))?;
        let t = self.tracked(&[x, gain, bias]);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            t,
        )
    }

    /// Per-row mean over channels: `[L, C] -> [L, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let value = f::channel_gap(self.value(x))?;
        let t = self.tracked(&[x]);
        self.push("channel_gap", value, Op::MeanCols(x), t)
    }

    /// Per-column mean over rows: `[L, C] -> [1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (l, c) = vx.dims2("mean_rows")?;
        let inv = T::one() / T::from_usize(l).unwrap();
        let mut out = vec![T::zero(); c];
        for row in vx.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let value = Tensor::from_vec(&[1, c], out)?;
        let t = self.tracked(&[x]);
        self.push("mean_rows", value, Op::MeanRows(x), t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let t = self.tracked(&[x]);
        self.push("sum", value, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::scalar(vx.sum() / T::from_usize(vx.numel()).unwrap());
        let t = self.tracked(&[x]);
        self.push("mean", value, Op::Mean(x), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column widths {c} and {pc} differ"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[rows, c], data)?;
        let t = self.tracked(parts);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let l = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != l {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {l} and {r} differ"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(l * total);
        for i in 0..l {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(&[l, total], data)?;
        let t = self.tracked(parts);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).rows(start, len)?;
        let t = self.tracked(&[x]);
        self.push("slice_rows", value, Op::SliceRows(x, start), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (l, c) = vx.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let data = vx
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[l, len], data)?;
        let t = self.tracked(&[x]);
        self.push("slice_cols", value, Op::SliceCols(x, start), t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(&[x]);
        self.push("reshape", value, Op::Reshape(x), t)
    }

    /// Multi-head scaled dot-product attention over `q[Lq,C]`, `k[Lk,C]`,
    /// `v[Lk,C]`; heads split the channel axis into equal slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads)?;
        let t = self.tracked(&[q, k, v]);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            t,
        )
    }

    /// Stride-1 "same" convolution `[c_in,h,w] -> [c_out,h,w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (ci, h, wd, co, k) = f::conv_dims(vx, vw, vb)?;
        let cols = f::im2col(vx.data(), ci, h, wd, k);
        let value = f::conv_from_cols(&cols, vw, vb, co, ci * k * k, h, wd)?;
        let t = self.tracked(&[x, w, b]);
        self.push("conv2d", value, Op::Conv2d { x, w, b, cols }, t)
    }

    /// Selective state-space scan over the rows of `x[L, C]`.
    ///
    /// Per token `t` and channel `c`, with `a[C, d]` the (negative) diagonal
    /// state matrix:
    ///
    /// ```text
    /// h[c, :] = exp(delta[t,c] * a[c, :]) * h[c, :] + delta[t,c] * b[t, :] * x[t,c]
    /// y[t, c] = <cm[t, :], h[c, :]> + d[c] * x[t, c]
    /// ```
    ///
    /// Returns `(y[L, C], h_final[C, d])`, both differentiable.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        b: Var,
        cm: Var,
        a: Var,
        d: Var,
        h0: Var,
    ) -> Result<(Var, Var)> {
        let (l, c) = self.value(x).dims2("selective_scan")?;
        let (_, ds) = self.value(a).dims2("selective_scan")?;
        let expect = |g: &Self, v: Var, shape: &[usize], what: &str| -> Result<()> {
            if g.value(v).shape() != shape {
                return Err(Error::shape(
                    "selective_scan",
                    format!("{what} has shape {:?}, expected {shape:?}", g.value(v).shape()),
                ));
            }
            Ok(())
        };
        expect(self, delta, &[l, c], "delta")?;
        expect(self, b, &[l, ds], "B")?;
        expect(self, cm, &[l, ds], "C")?;
        expect(self, a, &[c, ds], "A")?;
        expect(self, d, &[c], "D")?;
        expect(self, h0, &[c, ds], "h0")?;
        if self.value(delta).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::domain("selective_scan", "time step must be positive"));
        }

        let (y, history) = scan_forward(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(b).data(),
            self.value(cm).data(),
            self.value(a).data(),
            self.value(d).data(),
            self.value(h0).data(),
            l,
            c,
            ds,
        );
        let h_final = Tensor::from_vec(&[c, ds], history[(l - 1) * c * ds..].to_vec())?;
        let t = self.tracked(&[x, delta, b, cm, a, d, h0]);
        let yv = self.push(
            "selective_scan",
            Tensor::from_vec(&[l, c], y)?,
            Op::Scan(Box::new(ScanSaved {
                x,
                delta,
                b,
                c: cm,
                a,
                d,
                h0,
                history,
            })),
            t,
        )?;
        let hv = self.push("selective_scan", h_final, Op::ScanFinal(yv), t)?;
        Ok((yv, hv))
    }

    /// Penalty-reduced focal loss of a probability map against a Gaussian
    /// target (1 at positives), normalized by the positive count.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor<T>, alpha: f64, beta: f64) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::shape(
                "focal_loss",
                format!("{:?} vs {:?}", vp.shape(), target.shape()),
            ));
        }
        let (alpha, beta) = (T::from_f64_lossy(alpha), T::from_f64_lossy(beta));
        let loss = focal_value(vp.data(), target.data(), alpha, beta);
        let t = self.tracked(&[pred]);
        self.push(
            "focal_loss",
            Tensor::scalar(loss),
            Op::FocalLoss {
                pred,
                target: target.clone(),
                alpha,
                beta,
            },
            t,
        )
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut scan_final: HashMap<usize, Tensor<T>> = HashMap::new();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let g = match (&node.op, grads[i].take()) {
                (Op::Scan(_), g) => match (g, scan_final.contains_key(&i)) {
                    (Some(g), _) => g,
                    (None, true) => Tensor::zeros(node.value.shape()),
                    (None, false) => continue,
                },
                (_, Some(g)) => g,
                (_, None) => continue,
            };
            self.backprop_node(i, &g, &mut grads, &mut scan_final)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        scan_final: &mut HashMap<usize, Tensor<T>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let n = val(*b).dims2("matmul")?.1;
                if self.nodes[a.0].tracked {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Strides::row_major(n),
                        val(*b).data(),
                        Strides::transposed(n),
                        &mut ga,
                        Strides::row_major(k),
                        false,
                    );
                    acc(grads, *a, Tensor::from_vec(&[m, k], ga)?);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        val(*a).data(),
                        Strides::transposed(k),
                        g.data(),
                        Strides::row_major(n),
                        &mut gb,
                        Strides::row_major(n),
                        false,
                    );
                    acc(grads, *b, Tensor::from_vec(&[k, n], gb)?);
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose2()?),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |g, b| g * b)?);
                acc(grads, *b, g.zip_map(val(*a), |g, a| g * a)?);
            }
            Op::Div(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |g, b| g / b)?);
                let t = g.zip_map(y, |g, y| g * y)?;
                acc(grads, *b, t.zip_map(val(*b), |gy, b| -gy / b)?);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (va, vb) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                for idx in 0..g.numel() {
                    let (x, z) = (va.data()[idx], vb.data()[idx]);
                    let pick_b = if is_min { z < x } else { z > x };
                    if pick_b {
                        ga.data_mut()[idx] = T::zero();
                    } else {
                        gb.data_mut()[idx] = T::zero();
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone());
                let c = val(*b).numel();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks_exact(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                acc(grads, *b, Tensor::from_vec(&[c], gb)?);
            }
            Op::MulCol(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let (l, c) = vx.dims2("mul_col")?;
                let mut gx = g.clone();
                let mut gs = vec![T::zero(); l];
                for r in 0..l {
                    let srow = vs.data()[r];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let xrow = &vx.data()[r * c..(r + 1) * c];
                    gs[r] = grow.iter().zip(xrow).fold(T::zero(), |a, (&g, &x)| a + g * x);
                    gx.data_mut()[r * c..(r + 1) * c]
                        .iter_mut()
                        .for_each(|v| *v = *v * srow);
                }
                acc(grads, *x, gx);
                acc(grads, *s, Tensor::from_vec(&[l, 1], gs)?);
            }
            Op::Scale(x, k) => acc(grads, *x, g.map(|v| v * *k)),
            Op::AddConst(x) => acc(grads, *x, g.clone()),
            Op::Sigmoid(x) => acc(grads, *x, g.zip_map(y, |g, y| g * y * (T::one() - y))?),
            Op::Softplus(x) => acc(
                grads,
                *x,
                g.zip_map(val(*x), |g, x| g * f::sigmoid_scalar(x))?,
            ),
            Op::Gelu(x) => acc(
                grads,
                *x,
                g.zip_map(val(*x), |g, x| g * f::gelu_grad_scalar(x))?,
            ),
            Op::Exp(x) => acc(grads, *x, g.zip_map(y, |g, y| g * y)?),
            Op::Log(x) => acc(grads, *x, g.zip_map(val(*x), |g, x| g / x)?),
            Op::Abs(x) => acc(
                grads,
                *x,
                g.zip_map(val(*x), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?,
            ),
            Op::Relu(x) => acc(
                grads,
                *x,
                g.zip_map(val(*x), |g, x| if x > T::zero() { g } else { T::zero() })?,
            ),
            Op::Square(x) => acc(
                grads,
                *x,
                g.zip_map(val(*x), |g, x| g * (x + x))?,
            ),
            Op::SoftmaxRows(x) => {
                let c = y.last_dim();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = val(*x);
                let gn = val(*gain).data();
                let c = vx.last_dim();
                let inv_c = T::one() / T::from_usize(c).unwrap();
                let mut gx = vec![T::zero(); vx.numel()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut gxhat = vec![T::zero(); c];
                for (r, (xrow, grow)) in vx.data().chunks_exact(c).zip(g.data().chunks_exact(c)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..c {
                        xhat[j] = (xrow[j] - mu) * rs;
                        gxhat[j] = grow[j] * gn[j];
                        sum_g = sum_g + gxhat[j];
                        sum_gx = sum_gx + gxhat[j] * xhat[j];
                        gg[j] = gg[j] + grow[j] * xhat[j];
                        gb[j] = gb[j] + grow[j];
                    }
                    let (mg, mgx) = (sum_g * inv_c, sum_gx * inv_c);
                    for j in 0..c {
                        gx[r * c + j] = rs * (gxhat[j] - mg - xhat[j] * mgx);
                    }
                }
                acc(grads, *x, Tensor::from_vec(vx.shape(), gx)?);
                acc(grads, *gain, Tensor::from_vec(&[c], gg)?);
                acc(grads, *bias, Tensor::from_vec(&[c], gb)?);
            }
            Op::MeanCols(x) => {
                let (l, c) = val(*x).dims2("channel_gap")?;
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut gx = vec![T::zero(); l * c];
                for (r, row) in gx.chunks_exact_mut(c).enumerate() {
                    row.fill(g.data()[r] * inv);
                }
                acc(grads, *x, Tensor::from_vec(&[l, c], gx)?);
            }
            Op::MeanRows(x) => {
                let (l, c) = val(*x).dims2("mean_rows")?;
                let inv = T::one() / T::from_usize(l).unwrap();
                let mut gx = Vec::with_capacity(l * c);
                for _ in 0..l {
                    gx.extend(g.data().iter().map(|&v| v * inv));
                }
                acc(grads, *x, Tensor::from_vec(&[l, c], gx)?);
            }
            Op::Sum(x) => acc(grads, *x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).numel()).unwrap();
                acc(grads, *x, Tensor::full(val(*x).shape(), g.data()[0] / n));
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = val(p).shape()[0];
                    acc(grads, p, g.rows(row, r)?);
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (l, total) = g.dims2("concat_cols")?;
                let mut col = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    let data = (0..l)
                        .flat_map(|r| g.data()[r * total + col..r * total + col + c].iter().copied())
                        .collect();
                    acc(grads, p, Tensor::from_vec(&[l, c], data)?);
                    col += c;
                }
            }
            Op::SliceRows(x, start) => {
                let vx = val(*x);
                let mut gx = Tensor::zeros(vx.shape());
                let c = vx.shape()[1];
                gx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let vx = val(*x);
                let (l, c) = vx.dims2("slice_cols")?;
                let len = g.shape()[1];
                let mut gx = Tensor::zeros(vx.shape());
                for r in 0..l {
                    gx.data_mut()[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, gx);
            }
            Op::Reshape(x) => acc(grads, *x, g.clone().reshape(val(*x).shape())?),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(val(*q), val(*k), val(*v), *heads, probs, g)?;
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::Conv2d { x, w, b, cols } => {
                let vw = val(*w);
                let (co, ci, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                let (h, wd) = (y.shape()[1], y.shape()[2]);
                let hw = h * wd;
                let kk = ci * k * k;
                if self.nodes[w.0].tracked {
                    let mut gw = vec![T::zero(); co * kk];
                    T::gemm(
                        co,
                        hw,
                        kk,
                        g.data(),
                        Strides::row_major(hw),
                        cols,
                        Strides::transposed(hw),
                        &mut gw,
                        Strides::row_major(kk),
                        false,
                    );
                    acc(grads, *w, Tensor::from_vec(vw.shape(), gw)?);
                }
                if self.nodes[b.0].tracked {
                    let gb = g
                        .data()
                        .chunks_exact(hw)
                        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    acc(grads, *b, Tensor::from_vec(&[co], gb)?);
                }
                if self.nodes[x.0].tracked {
                    let mut gcols = vec![T::zero(); kk * hw];
                    T::gemm(
                        kk,
                        co,
                        hw,
                        vw.data(),
                        Strides::transposed(kk),
                        g.data(),
                        Strides::row_major(hw),
                        &mut gcols,
                        Strides::row_major(hw),
                        false,
                    );
                    let gx = f::col2im(&gcols, ci, h, wd, k);
                    acc(grads, *x, Tensor::from_vec(&[ci, h, wd], gx)?);
                }
            }
            Op::Scan(saved) => {
                let gh_final = scan_final.remove(&i);
                let out = scan_backward(self, saved, g, gh_final.as_ref())?;
                acc(grads, saved.x, out.x);
                acc(grads, saved.delta, out.delta);
                acc(grads, saved.b, out.b);
                acc(grads, saved.c, out.c);
                acc(grads, saved.a, out.a);
                acc(grads, saved.d, out.d);
                acc(grads, saved.h0, out.h0);
            }
            Op::ScanFinal(parent) => match scan_final.get_mut(&parent.0) {
                Some(existing) => existing.add_assign(g),
                None => {
                    scan_final.insert(parent.0, g.clone());
                }
            },
            Op::FocalLoss {
                pred,
                target,
                alpha,
                beta,
            } => {
                let gp = focal_grad(val(*pred).data(), target.data(), *alpha, *beta);
                let scale = g.data()[0];
                let gp = gp.into_iter().map(|v| v * scale).collect();
                acc(grads, *pred, Tensor::from_vec(val(*pred).shape(), gp)?);
            }
        }
        Ok(())
    }

    /// Adds `scale * dL/dparam` into each bound parameter's `.grad`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>, scale: T) {
        let mut bound: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        bound.sort();
        for (&id, &v) in bound {
            if let Some(g) = grads.get(v) {
                store.accumulate(id, g, scale);
            }
        }
    }

    /// `(param, gradient)` pairs in parameter order.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients<T>) -> Vec<(ParamId, &'a Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (lq, c) = q.dims2("attention")?;
    let (lk, ck) = k.dims2("attention")?;
    if ck != c || v.shape() != [lk, c] {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {c} not divisible into {heads} heads"),
        ));
    }
    let dh = c / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut out = vec![T::zero(); lq * c];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        T::gemm(
            lq,
            dh,
            lk,
            &q.data()[h * dh..],
            Strides::row_major(c),
            &k.data()[h * dh..],
            Strides::transposed(c),
            p,
            Strides::row_major(lk),
            false,
        );
        for row in p.chunks_exact_mut(lk) {
            row.iter_mut().for_each(|s| *s = *s * scale);
            f::softmax_slice(row)?;
        }
        T::gemm(
            lq,
            lk,
            dh,
            p,
            Strides::row_major(lk),
            &v.data()[h * dh..],
            Strides::row_major(c),
            &mut out[h * dh..],
            Strides::row_major(c),
            false,
        );
    }
    Ok((Tensor::from_vec(&[lq, c], out)?, probs))
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (lq, c) = q.dims2("attention")?;
    let lk = k.shape()[0];
    let dh = c / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut gq = vec![T::zero(); lq * c];
    let mut gk = vec![T::zero(); lk * c];
    let mut gv = vec![T::zero(); lk * c];
    let mut gp = vec![T::zero(); lq * lk];
    for h in 0..heads {
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        // dV_h = P^T dO_h
        T::gemm(
            lk,
            lq,
            dh,
            p,
            Strides::transposed(lk),
            &g.data()[h * dh..],
            Strides::row_major(c),
            &mut gv[h * dh..],
            Strides::row_major(c),
            false,
        );
        // dP = dO_h V_h^T
        T::gemm(
            lq,
            dh,
            lk,
            &g.data()[h * dh..],
            Strides::row_major(c),
            &v.data()[h * dh..],
            Strides::transposed(c),
            &mut gp,
            Strides::row_major(lk),
            false,
        );
        // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale
        for (grow, prow) in gp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
            let dot = grow.iter().zip(prow).fold(T::zero(), |a, (&g, &p)| a + g * p);
            for (gv, &pv) in grow.iter_mut().zip(prow) {
                *gv = pv * (*gv - dot) * scale;
            }
        }
        T::gemm(
            lq,
            lk,
            dh,
            &gp,
            Strides::row_major(lk),
            &k.data()[h * dh..],
            Strides::row_major(c),
            &mut gq[h * dh..],
            Strides::row_major(c),
            false,
        );
        T::gemm(
            lk,
            lq,
            dh,
            &gp,
            Strides::transposed(lk),
            &q.data()[h * dh..],
            Strides::row_major(c),
            &mut gk[h * dh..],
            Strides::row_major(c),
            false,
        );
    }
    Ok((
        Tensor::from_vec(&[lq, c], gq)?,
        Tensor::from_vec(&[lk, c], gk)?,
        Tensor::from_vec(&[lk, c], gv)?,
    ))
}

/// Attention probabilities `[heads, Lq, Lk]` without recording anything.
pub fn attention_probs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (lq, lk) = (q.shape()[0], k.shape()[0]);
    let (_, probs) = attention_forward(q, k, v, heads)?;
    Tensor::from_vec(&[heads, lq, lk], probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<T: Scalar>(
    x: &[T],
    delta: &[T],
    b: &[T],
    cm: &[T],
    a: &[T],
    d: &[T],
    h0: &[T],
    l: usize,
    c: usize,
    ds: usize,
) -> (Vec<T>, Vec<T>) {
    let mut history = vec![T::zero(); l * c * ds];
    let mut y = vec![T::zero(); l * c];
    let mut h = h0.to_vec();
    for t in 0..l {
        let brow = &b[t * ds..(t + 1) * ds];
        let crow = &cm[t * ds..(t + 1) * ds];
        for ch in 0..c {
            let dt = delta[t * c + ch];
            let xt = x[t * c + ch];
            let hrow = &mut h[ch * ds..(ch + 1) * ds];
            let arow = &a[ch * ds..(ch + 1) * ds];
            let mut acc = T::zero();
            for j in 0..ds {
                hrow[j] = (dt * arow[j]).exp() * hrow[j] + dt * brow[j] * xt;
                acc = acc + crow[j] * hrow[j];
            }
            y[t * c + ch] = acc + d[ch] * xt;
        }
        history[t * c * ds..(t + 1) * c * ds].copy_from_slice(&h);
    }
    (y, history)
}

struct ScanGrads<T> {
    x: Tensor<T>,
    delta: Tensor<T>,
    b: Tensor<T>,
    c: Tensor<T>,
    a: Tensor<T>,
    d: Tensor<T>,
    h0: Tensor<T>,
}

fn scan_backward<T: Scalar>(
    g: &Graph<T>,
    s: &ScanSaved<T>,
    gy: &Tensor<T>,
    gh_final: Option<&Tensor<T>>,
) -> Result<ScanGrads<T>> {
    let x = g.value(s.x).data();
    let delta = g.value(s.delta).data();
    let b = g.value(s.b).data();
    let cm = g.value(s.c).data();
    let a = g.value(s.a).data();
    let d = g.value(s.d).data();
    let h0 = g.value(s.h0).data();
    let (l, c) = g.value(s.x).dims2("selective_scan")?;
    let ds = g.value(s.a).shape()[1];
    let gy = gy.data();

    let mut gx = vec![T::zero(); l * c];
    let mut gdelta = vec![T::zero(); l * c];
    let mut gb = vec![T::zero(); l * ds];
    let mut gc = vec![T::zero(); l * ds];
    let mut ga = vec![T::zero(); c * ds];
    let mut gd = vec![T::zero(); c];
    // dL/dh_t flowing back from later tokens
    let mut gh = match gh_final {
        Some(t) => t.data().to_vec(),
        None => vec![T::zero(); c * ds],
    };

    for t in (0..l).rev() {
        let h_t = &s.history[t * c * ds..(t + 1) * c * ds];
        let h_prev = if t == 0 {
            h0
        } else {
            &s.history[(t - 1) * c * ds..t * c * ds]
        };
        let brow = &b[t * ds..(t + 1) * ds];
        let crow = &cm[t * ds..(t + 1) * ds];
        for ch in 0..c {
            let idx = t * c + ch;
            let (dt, xt, gyt) = (delta[idx], x[idx], gy[idx]);
            gx[idx] = gx[idx] + gyt * d[ch];
            gd[ch] = gd[ch] + gyt * xt;
            for j in 0..ds {
                let k = ch * ds + j;
                gc[t * ds + j] = gc[t * ds + j] + gyt * h_t[k];
                let ghk = gh[k] + gyt * crow[j];
                let abar = (dt * a[k]).exp();
                let g_abar = ghk * h_prev[k];
                gdelta[idx] = gdelta[idx] + g_abar * abar * a[k] + ghk * brow[j] * xt;
                ga[k] = ga[k] + g_abar * abar * dt;
                gb[t * ds + j] = gb[t * ds + j] + ghk * dt * xt;
                gx[idx] = gx[idx] + ghk * dt * brow[j];
                gh[k] = ghk * abar;
            }
        }
    }
    Ok(ScanGrads {
        x: Tensor::from_vec(&[l, c], gx)?,
        delta: Tensor::from_vec(&[l, c], gdelta)?,
        b: Tensor::from_vec(&[l, ds], gb)?,
        c: Tensor::from_vec(&[l, ds], gc)?,
        a: Tensor::from_vec(&[c, ds], ga)?,
        d: Tensor::from_vec(&[c], gd)?,
        h0: Tensor::from_vec(&[c, ds], gh)?,
    })
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let eps = T::from_f64_lossy(FOCAL_CLAMP);
    let hi = T::one() - eps;
    if p < eps {
        (eps, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn positive_count<T: Scalar>(target: &[T]) -> T {
    let n = target.iter().filter(|&&y| y == T::one()).count().max(1);
    T::from_usize(n).unwrap()
}

pub(crate) fn focal_value<T: Scalar>(pred: &[T], target: &[T], alpha: T, beta: T) -> T {
    let one = T::one();
    let mut total = T::zero();
    for (&p, &y) in pred.iter().zip(target) {
        let (p, _) = clamp_prob(p);
        total = total
            + if y == one {
                (one - p).powf(alpha) * p.ln()
            } else {
                (one - y).powf(beta) * p.powf(alpha) * (one - p).ln()
            };
    }
    -total / positive_count(target)
}

fn focal_grad<T: Scalar>(pred: &[T], target: &[T], alpha: T, beta: T) -> Vec<T> {
    let one = T::one();
    let norm = positive_count(target);
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, clamped) = clamp_prob(p);
            if clamped {
                return T::zero();
            }
            let d = if y == one {
                -alpha * (one - p).powf(alpha - one) * p.ln() + (one - p).powf(alpha) / p
            } else {
                (one - y).powf(beta)
                    * (alpha * p.powf(alpha - one) * (one - p).ln() - p.powf(alpha) / (one - p))
            };
            -d / norm
        })
        .collect()
}
