//! Transformer building blocks. Each block owns only [`ParamId`]s into a
//! [`ParamStore`], so the same layout runs in `f32` or `f64`.

use coca_numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var, MASKED};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), &[d_in, d_out], Init::Normal(std)),
            b: store.add(format!("{name}.b"), &[d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    /// `x[..., d_in] -> [..., d_out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[d], Init::Ones),
            bias: store.add(format!("{name}.bias"), &[d], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// Which key positions each query may see.
///
/// Lengths are per batch element and count the valid keys from the start
/// of the sequence; positions at or beyond the length are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    None,
    Causal,
    Padding(Vec<usize>),
    CausalPadding(Vec<usize>),
}

impl AttentionMask {
    /// Additive logit bias for scores shaped `[batch * heads, lq, lk]`, or
    /// `None` when nothing is masked.
    fn bias<T: Real>(
        &self,
        batch: usize,
        heads: usize,
        lq: usize,
        lk: usize,
    ) -> Result<Option<Tensor<T>>> {
        let masked = T::lit(MASKED);
        let (causal, lengths) = match self {
            AttentionMask::None => return Ok(None),
            AttentionMask::Causal => (true, None),
            AttentionMask::Padding(l) => (false, Some(l)),
            AttentionMask::CausalPadding(l) => (true, Some(l)),
        };
        if causal && lq != lk {
            return Err(Error::Model(format!(
                "causal mask needs square scores, got {lq}x{lk}"
            )));
        }
        let Some(lengths) = lengths else {
            // Same [lq, lk] pattern for every head; it broadcasts as a suffix.
            let mut data = vec![T::zero(); lq * lk];
            for q in 0..lq {
                for k in q + 1..lk {
                    data[q * lk + k] = masked;
                }
            }
            return Ok(Some(Tensor::new(vec![lq, lk], data)?));
        };
        if lengths.len() != batch {
            return Err(Error::Model(format!(
                "mask has {} lengths for batch {batch}",
                lengths.len()
            )));
        }
        let mut data = Vec::with_capacity(batch * heads * lq * lk);
        for &len in lengths {
            if len == 0 || len > lk {
                return Err(Error::Model(format!("valid length {len} outside 1..={lk}")));
            }
            let mut block = vec![T::zero(); lq * lk];
            for q in 0..lq {
                for k in 0..lk {
                    if k >= len || (causal && k > q) {
                        block[q * lk + k] = masked;
                    }
                }
            }
            for _ in 0..heads {
                data.extend_from_slice(&block);
            }
        }
        Ok(Some(Tensor::new(vec![batch * heads, lq, lk], data)?))
    }
}

/// Multi-head attention whose keys/values may come from a space of a
/// different width than the queries (cross-attention between towers).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_kv: usize,
        n_heads: usize,
        std: f64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Model(format!(
                "{name}: d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d_model, d_model, std),
            wk: Linear::new(store, &format!("{name}.k"), d_kv, d_model, std),
            wv: Linear::new(store, &format!("{name}.v"), d_kv, d_model, std),
            wo: Linear::new(store, &format!("{name}.o"), d_model, d_model, std),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.d_out
    }

    /// `q[B, Lq, d]` attends over `kv[B, Lk, d_kv]`; returns `[B, Lq, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        q: Var,
        kv: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let qs = g.shape(q).to_vec();
        let ks = g.shape(kv).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::Model(format!("attention inputs {qs:?} / {ks:?}")));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let (d, h) = (self.d_model(), self.n_heads);
        let dh = d / h;

        let split = |g: &mut Graph<T>, x: Var, len: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, len, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            Ok(g.reshape(x, &[b * h, len, dh])?)
        };
        let qp = self.wq.forward(g, q)?;
        let qp = g.scale(qp, 1.0 / (dh as f64).sqrt());
        let qh = split(g, qp, lq)?;
        let kp = self.wk.forward(g, kv)?;
        let kh = split(g, kp, lk)?;
        let vp = self.wv.forward(g, kv)?;
        let vh = split(g, vp, lk)?;

        let mut scores = g.bmm(qh, kh, true)?;
        if let Some(bias) = mask.bias::<T>(b, h, lq, lk)? {
            let bias = g.constant(bias);
            scores = g.add(scores, bias)?;
        }
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, vh, false)?;
        let ctx = g.reshape(ctx, &[b, h, lq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        self.wo.forward(g, ctx)
    }
}

/// Pre-LN residual block: self-attention, optional cross-attention, MLP.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    /// Width of the cross-attention source; `None` for a layer without
    /// cross-attention.
    pub d_cross: Option<usize>,
}

impl TransformerLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: LayerDims,
        std: f64,
    ) -> Result<Self> {
        let d = dims.d_model;
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), d);
        let self_attn =
            MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, d, dims.n_heads, std)?;
        let cross = match dims.d_cross {
            Some(dc) => Some((
                LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                MultiHeadAttention::new(
                    store,
                    &format!("{name}.cross_attn"),
                    d,
                    dc,
                    dims.n_heads,
                    std,
                )?,
            )),
            None => None,
        };
        Ok(Self {
            ln_self,
            self_attn,
            cross,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, dims.mlp_dim, std),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), dims.mlp_dim, d, std),
        })
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mask: &AttentionMask,
        cross_source: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, mask)?;
        let mut x = g.add(x, a)?;
        match (&self.cross, cross_source) {
            (Some((ln, attn)), Some(src)) => {
                let h = ln.forward(g, x)?;
                let a = attn.forward(g, h, src, &AttentionMask::None)?;
                x = g.add(x, a)?;
            }
            (None, Some(_)) => {
                return Err(Error::Model(
                    "cross-attention source given to a layer without cross-attention".into(),
                ))
            }
            (Some(_), None) => {
                return Err(Error::Model(
                    "multimodal layer needs a cross-attention source".into(),
                ))
            }
            (None, None) => {}
        }
        let h = self.ln_mlp.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// A stack of layers sharing one mask.
pub fn run_stack<T: Real>(
    g: &mut Graph<T>,
    layers: &[TransformerLayer],
    mut x: Var,
    mask: &AttentionMask,
    cross_source: Option<Var>,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(g, x, mask, cross_source)?;
    }
    Ok(x)
}

/// Learnable queries attending over a token set. No positional information
/// is added inside, so the output ignores the order of the input tokens.
#[derive(Clone, Debug)]
pub struct AttentionalPooler {
    pub queries: ParamId,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub n_query: usize,
}

impl AttentionalPooler {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        n_query: usize,
        d_model: usize,
        d_kv: usize,
        n_heads: usize,
        std: f64,
    ) -> Result<Self> {
        if n_query == 0 {
            return Err(Error::Model(format!(
                "{name}: pooler needs at least one query"
            )));
        }
        Ok(Self {
            queries: store.add(
                format!("{name}.queries"),
                &[n_query, d_model],
                Init::Normal(std),
            ),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d_kv),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                d_model,
                d_kv,
                n_heads,
                std,
            )?,
            n_query,
        })
    }

    /// `tokens[B, L, d_kv] -> [B, n_query, d_model]`; `lengths` masks
    /// trailing padding tokens.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        tokens: Var,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Model(format!("pooler input {s:?}")));
        }
        let q = g.param(self.queries);
        let q = g.broadcast_to(q, &[s[0], self.n_query, self.attn.d_model()])?;
        let kv = self.ln_kv.forward(g, tokens)?;
        let mask = match lengths {
            Some(l) => AttentionMask::Padding(l.to_vec()),
            None => AttentionMask::None,
        };
        self.attn.forward(g, q, kv, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_bias_is_upper_triangle() {
        let t = AttentionMask::Causal
            .bias::<f64>(2, 1, 3, 3)
            .unwrap()
            .unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        assert_eq!(t.at(&[0, 1]), MASKED);
        assert_eq!(t.at(&[1, 1]), 0.0);
        assert_eq!(t.at(&[2, 0]), 0.0);
    }

    #[test]
    fn padding_bias_masks_tail_keys() {
        let t = AttentionMask::CausalPadding(vec![2, 3])
            .bias::<f64>(2, 2, 3, 3)
            .unwrap()
            .unwrap();
        assert_eq!(t.shape(), &[4, 3, 3]);
        // Element 0, any head: key 2 is padding even for query 2.
        assert_eq!(t.at(&[1, 2, 2]), MASKED);
        assert_eq!(t.at(&[1, 2, 1]), 0.0);
        assert_eq!(t.at(&[2, 2, 2]), 0.0);
        assert!(AttentionMask::Padding(vec![0])
            .bias::<f64>(1, 1, 1, 1)
            .is_err());
    }
}
