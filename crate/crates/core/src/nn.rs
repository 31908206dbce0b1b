//! Small parameterized layers shared by the model modules.

use rand::Rng;

use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::Result;

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Registers a truncated-normal weight.
pub(crate) fn weight<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    rng: &mut R,
) -> Result<ParamId> {
    store.add(name, Tensor::trunc_normal(shape, INIT_STD, rng))
}

pub(crate) fn constant<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    value: f64,
) -> Result<ParamId> {
    store.add(name, Tensor::full(shape, T::from_f64_lossy(value)))
}

/// `y = x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = weight(store, &format!("{name}.weight"), &[d_in, d_out], rng)?;
        let bias = if bias {
            Some(constant(store, &format!("{name}.bias"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Norm {
            gain: constant(store, &format!("{name}.gain"), &[c], 1.0)?,
            bias: constant(store, &format!("{name}.bias"), &[c], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with biased Q/K/V projections and a bias-free
/// output projection, so that a zeroed V path contributes exactly nothing.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), c, c, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), c, c, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), c, c, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, false, rng)?,
            heads,
        })
    }

    /// `out(softmax(Q K^T / sqrt(d)) V)` with queries from `xq`, keys and
    /// values from `xkv`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, store, a)
    }

    /// Zeroes the V projection (weight and bias).
    pub fn zero_values<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.v.weight).value.fill(T::zero());
        if let Some(b) = self.v.bias {
            store.get_mut(b).value.fill(T::zero());
        }
    }
}

/// Pre-norm cross-attention sub-layer: `xq + Attn(LN(xq), LN(xkv))`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub attn: Attention,
}

impl CrossAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CrossAttention {
            norm_q: Norm::new(store, &format!("{name}.norm_q"), c)?,
            norm_kv: Norm::new(store, &format!("{name}.norm_kv"), c)?,
            attn: Attention::new(store, &format!("{name}.attn"), c, heads, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
    ) -> Result<Var> {
        let q = self.norm_q.forward(g, store, xq)?;
        let kv = self.norm_kv.forward(g, store, xkv)?;
        let a = self.attn.forward(g, store, q, kv)?;
        g.add(xq, a)
    }
}

/// Two-layer gelu MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Sets every listed parameter to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).value.fill(T::zero());
    }
}
