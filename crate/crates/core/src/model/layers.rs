//! Linear, layer norm, MLP, multi-head attention and transformer blocks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zero,
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = match init {
            Init::Xavier => libm::sqrt(6.0 / (in_dim + out_dim) as f64),
            Init::Zero => 0.0,
        };
        let w = store.uniform(format!("{name}.w"), &[in_dim, out_dim], bound, rng)?;
        let b = if bias { Some(store.zeros(format!("{name}.b"), &[out_dim])?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(contract(format!("linear expects last dim {}, got {shape:?}", self.in_dim)));
        }
        let rows = g.value(x).len() / self.in_dim;
        let x2 = g.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(self.w);
        let mut y = g.matmul(x2, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            let bb = g.broadcast(b, &[rows, self.out_dim])?;
            y = g.add(y, bb)?;
        }
        let mut out = shape;
        *out.last_mut().expect("non-empty") = self.out_dim;
        g.reshape(y, &out)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: store.ones(format!("{name}.gamma"), &[dim])?, beta: store.zeros(format!("{name}.beta"), &[dim])? })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let y = g.layer_norm(x, shape.len() - 1)?;
        let gamma = g.param(self.gamma);
        let gamma = g.broadcast(gamma, &shape)?;
        let beta = g.param(self.beta);
        let beta = g.broadcast(beta, &shape)?;
        let y = g.mul(y, gamma)?;
        g.add(y, beta)
    }
}

/// Two linear layers with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, Init::Xavier, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, out_init, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention `softmax(Q K^T / sqrt(d_head) + W) V` with an
/// optional additive per-key bias `W`, shared by every head and query row.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(contract(format!("dim {dim} not divisible by {heads} heads")));
        }
        let lin = |store: &mut ParamStore<S>, n: &str, rng: &mut _| {
            Linear::new(store, &format!("{name}.{n}"), dim, dim, true, Init::Xavier, rng)
        };
        Ok(Self {
            wq: lin(store, "wq", rng)?,
            wk: lin(store, "wk", rng)?,
            wv: lin(store, "wv", rng)?,
            wo: lin(store, "wo", rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, l, dh])
    }

    /// `queries: [B, Lq, D]`, `keys: [B, Lk, D]`, `key_bias: [B, Lk]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, queries: Var, keys: Var, key_bias: Option<Var>) -> Result<Var> {
        let (sq, sk) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(contract(format!("attention shapes q {sq:?}, kv {sk:?} for dim {}", self.dim)));
        }
        let (b, lq, lk) = (sq[0], sq[1], sk[1]);
        let dh = self.dim / self.heads;
        let q = self.wq.forward(g, queries)?;
        let k = self.wk.forward(g, keys)?;
        let v = self.wv.forward(g, keys)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, S::of(1.0 / libm::sqrt(dh as f64)))?;
        if let Some(w) = key_bias {
            if g.shape(w) != [b, lk] {
                return Err(contract(format!("key bias {:?}, expected [{b}, {lk}]", g.shape(w))));
            }
            let w = g.reshape(w, &[b, 1, 1, lk])?;
            let w = g.broadcast(w, &[b, self.heads, lq, lk])?;
            let w = g.reshape(w, &[b * self.heads, lq, lk])?;
            scores = g.add(scores, w)?;
        }
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[b, self.heads, lq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, lq, self.dim])?;
        self.wo.forward(g, out)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, Init::Xavier, rng)?,
        })
    }

    /// `x: [B, L, D]`; attention never crosses the batch axis.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, None)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

pub(crate) fn values_f64<S: Scalar>(g: &Graph<'_, S>, v: Var) -> Vec<f64> {
    g.value(v).iter().map(|x| x.f64()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line `softmax(QK^T/sqrt(d) + W)V` for one head.
    fn loop_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], w: &[f64]) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> =
                    k.iter().zip(w).map(|(kj, wj)| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt() + wj).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len()).map(|c| e.iter().zip(v).map(|(ej, vj)| ej / z * vj[c]).sum()).collect()
            })
            .collect()
    }

    /// Single head with identity projections reduces to the textbook formula.
    fn identity_attention(store: &mut ParamStore<f64>, name: &str, dim: usize) -> Attention {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Attention::new(store, name, dim, 1, &mut rng).unwrap();
        for lin in [&a.wq, &a.wk, &a.wv, &a.wo] {
            let t = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
            store.get_mut(lin.w).tensor = t;
        }
        a
    }

    #[test]
    fn weighted_attention_matches_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let a = identity_attention(&mut store, "a", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let kv: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::with_params(&store);
        let qv = g.constant(Tensor::new(alloc::vec![1, 2, 3], q.concat()).unwrap());
        let kvv = g.constant(Tensor::new(alloc::vec![1, 5, 3], kv.concat()).unwrap());
        let wv = g.constant(Tensor::new(alloc::vec![1, 5], w.clone()).unwrap());
        let out = a.forward(&mut g, qv, kvv, Some(wv)).unwrap();
        let expected = loop_attention(&q, &kv, &kv, &w).concat();
        for (x, y) in g.value(out).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_bias_equals_plain_attention_and_saturated_key_vanishes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Attention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let q = Tensor::from_fn(&[1, 3, 8], |_| rng.gen_range(-1.0..1.0));
        let kv = Tensor::from_fn(&[1, 6, 8], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::with_params(&store);
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let plain = a.forward(&mut g, qv, kvv, None).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 6]));
        let biased = a.forward(&mut g, qv, kvv, Some(zero)).unwrap();
        for (x, y) in g.value(plain).iter().zip(g.value(biased)) {
            assert!((x - y).abs() < 1e-9);
        }
        // a -1e6 bias on key 2 removes it from every softmax row
        let ident = identity_attention(&mut store, "ident", 8);
        let mut g = Graph::with_params(&store);
        let (qv, kvv) = (g.constant(Tensor::from_fn(&[1, 3, 8], |i| (i as f64 * 0.37).sin())), g.constant(Tensor::from_fn(&[1, 6, 8], |i| (i as f64 * 0.11).cos())));
        let mut w = Tensor::zeros(&[1, 6]);
        w.data_mut()[2] = -1e6;
        let wv = g.constant(w);
        let _ = ident.forward(&mut g, qv, kvv, Some(wv)).unwrap();
        let softmax_node = (0..g.len()).rev().map(|i| g_var(i)).find(|&v| g.kind(v) == crate::autodiff::OpKind::Softmax).unwrap();
        let probs = g.value(softmax_node);
        for row in probs.chunks(6) {
            assert!(row[2] < 1e-30);
        }
    }

    fn g_var(i: usize) -> Var {
        // Var is opaque outside the crate; tests reach nodes by index.
        crate::autodiff::var_at(i)
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "l", 3, 2, true, Init::Xavier, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(l.forward(&mut g, x).is_err());
        let x = g.constant(Tensor::zeros(&[2, 4, 3]));
        let y = l.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 2]);
    }
}
