//! The contrastive captioner: a ViT image encoder, a text decoder split into
//! unimodal (text-only) and multimodal (cross-attending) halves, attentional
//! poolers, and the contrastive projections.
//!
//! Text layout inside the decoder, for a caption of true length `len`
//! (including `[BOS]`/`[EOS]`) and `n_cls` classifier slots:
//!
//! ```text
//! position: 0 .. len-1 | len .. len+n_cls-1 | rest
//! content:  tokens     | [CLS]…             | [PAD]
//! ```
//!
//! The causal mask keeps `[CLS]` invisible to every real token, so one pass
//! through the unimodal stack feeds both the text embedding and the
//! captioning path.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use coca_numerics::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::{ClsAggregate, CoCaConfig, PoolerVariant};
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{
    run_stack, AttentionMask, AttentionalPooler, LayerDims, LayerNorm, Linear, TransformerLayer,
};

#[derive(Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_final: LayerNorm,
}

#[derive(Debug)]
pub struct CoCa {
    pub cfg: CoCaConfig,
    pub encoder: ImageEncoder,
    pub token_embed: ParamId,
    pub cls_embed: ParamId,
    pub text_pos: ParamId,
    pub unimodal: Vec<TransformerLayer>,
    pub unimodal_ln: LayerNorm,
    pub multimodal: Vec<TransformerLayer>,
    pub multimodal_ln: LayerNorm,
    pub lm_head: Linear,
    /// Absent when `n_query_gen == 0`.
    pub gen_pooler: Option<(AttentionalPooler, LayerNorm)>,
    pub con_pooler: AttentionalPooler,
    pub con_ln: LayerNorm,
    pub image_proj: Linear,
    pub text_proj: Linear,
    pub log_temperature: ParamId,
    unimodal_runs: AtomicUsize,
}

#[derive(Clone, Copy, Debug)]
pub struct ImageOutputs {
    /// Encoder output `[B, L, d_img]`.
    pub tokens: Var,
    /// Cross-attention source for the multimodal decoder, `[B, n, d_img]`.
    pub gen_tokens: Var,
    /// Unit-norm contrastive embedding `[B, embed_dim]`.
    pub embed: Var,
}

#[derive(Clone, Debug)]
pub struct TextOutputs {
    /// Raw unimodal stack output `[B, max_len, d_text]`.
    pub seq: Var,
    /// Unit-norm `[CLS]` embedding `[B, embed_dim]`.
    pub embed: Var,
    /// True caption lengths.
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub image_embed: Var,
    pub text_embed: Var,
    /// Teacher-forced logits `[B * text_len, vocab]`; row `b * text_len + t`
    /// scores token `t + 1` of caption `b`.
    pub caption_logits: Var,
    pub gen_tokens: Var,
    pub unimodal: Var,
    pub multimodal: Var,
}

/// Splits `[B, H, W, C]` images into `[B, (H/p)(W/p), p*p*C]` patches in
/// row-major patch order, each patch flattened as `(y, x, c)`.
pub fn patchify(images: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
        return Err(Error::Model(format!(
            "cannot split images {s:?} into {p}x{p} patches"
        )));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = ((bi * h + py * p + y) * w + px * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, gh * gw, p * p * c], out)?)
}

/// Next-token targets: position `t < len - 1` predicts token `t + 1`
/// (`[EOS]` included); everything else is ignored.
pub fn caption_targets(tokens: &[TokenSequence]) -> Vec<Option<usize>> {
    tokens
        .iter()
        .flat_map(|s| (0..s.ids.len()).map(move |t| (t + 1 < s.len).then(|| s.ids[t + 1])))
        .collect()
}

fn layer_stack<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    n: usize,
    dims: LayerDims,
    std: f64,
) -> Result<Vec<TransformerLayer>> {
    (0..n)
        .map(|i| TransformerLayer::new(store, &format!("{prefix}.layers.{i}"), dims, std))
        .collect()
}

impl CoCa {
    pub fn new<T: Real>(cfg: &CoCaConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let std = cfg.init_std;
        let (ic, tc, pc) = (&cfg.image, &cfg.text, &cfg.pooler);
        let (di, dt) = (ic.d_model, tc.d_model);

        let encoder = ImageEncoder {
            patch_embed: Linear::new(store, "encoder.patch_embed", cfg.patch_dim(), di, std),
            pos: store.add("encoder.pos", &[cfg.patch_count(), di], Init::Normal(std)),
            layers: layer_stack(
                store,
                "encoder",
                ic.layers,
                LayerDims {
                    d_model: di,
                    n_heads: ic.n_heads,
                    mlp_dim: ic.mlp_dim,
                    d_cross: None,
                },
                std,
            )?,
            ln_final: LayerNorm::new(store, "encoder.ln_final", di),
        };
        let token_embed = store.add("embeddings.token", &[tc.vocab_size, dt], Init::Normal(std));
        let cls_embed = store.add("embeddings.cls", &[tc.n_cls, dt], Init::Normal(std));
        let text_pos = store.add("embeddings.text_pos", &[tc.max_len, dt], Init::Normal(std));

        let text_dims = LayerDims {
            d_model: dt,
            n_heads: tc.n_heads,
            mlp_dim: tc.mlp_dim,
            d_cross: None,
        };
        let unimodal = layer_stack(store, "unimodal", tc.n_uni, text_dims, std)?;
        let unimodal_ln = LayerNorm::new(store, "unimodal.ln_final", dt);
        let multimodal = layer_stack(
            store,
            "multimodal",
            tc.n_multi,
            LayerDims {
                d_cross: Some(di),
                ..text_dims
            },
            std,
        )?;
        let multimodal_ln = LayerNorm::new(store, "multimodal.ln_final", dt);
        let lm_head = Linear::new(store, "multimodal.lm_head", dt, tc.vocab_size, std);

        let gen_pooler = if pc.n_query_gen > 0 {
            Some((
                AttentionalPooler::new(
                    store,
                    "poolers.generative",
                    pc.n_query_gen,
                    di,
                    di,
                    ic.n_heads,
                    std,
                )?,
                LayerNorm::new(store, "poolers.gen_ln", di),
            ))
        } else {
            None
        };
        let con_pooler = AttentionalPooler::new(
            store,
            "poolers.contrastive",
            pc.n_query_con,
            di,
            di,
            ic.n_heads,
            std,
        )?;
        let con_ln = LayerNorm::new(store, "poolers.con_ln", di);
        let image_proj = Linear::new(store, "contrastive.image_proj", di, cfg.embed_dim, std);
        let text_proj = Linear::new(store, "contrastive.text_proj", dt, cfg.embed_dim, std);
        let log_temperature = store.add(
            "contrastive.log_temperature",
            &[1],
            Init::Const(cfg.loss.temperature_init.ln()),
        );

        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            token_embed,
            cls_embed,
            text_pos,
            unimodal,
            unimodal_ln,
            multimodal,
            multimodal_ln,
            lm_head,
            gen_pooler,
            con_pooler,
            con_ln,
            image_proj,
            text_proj,
            log_temperature,
            unimodal_runs: AtomicUsize::new(0),
        })
    }

    /// Examples pushed through the unimodal stack since construction.
    pub fn unimodal_runs(&self) -> usize {
        self.unimodal_runs.load(Ordering::Relaxed)
    }

    /// Encoder tokens only: patchify, embed, add positions, transformer.
    pub fn encode_patches<T: Real>(&self, g: &mut Graph<T>, images: &Tensor<f32>) -> Result<Var> {
        let ic = &self.cfg.image;
        let s = images.shape();
        if s.len() != 4 || s[1] != ic.resolution || s[2] != ic.resolution || s[3] != ic.channels {
            return Err(Error::Model(format!(
                "images {s:?}, expected [B, {r}, {r}, {c}]",
                r = ic.resolution,
                c = ic.channels
            )));
        }
        let patches = patchify(images, ic.patch_size)?.cast::<T>();
        let x = g.constant(patches);
        let x = self.encoder.patch_embed.forward(g, x)?;
        let pos = g.param(self.encoder.pos);
        let x = g.add(x, pos)?;
        let x = run_stack(g, &self.encoder.layers, x, &AttentionMask::None, None)?;
        self.encoder.ln_final.forward(g, x)
    }

    pub fn encode_image<T: Real>(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<f32>,
    ) -> Result<ImageOutputs> {
        let tokens = self.encode_patches(g, images)?;
        let (gen_tokens, con_source) = match &self.gen_pooler {
            Some((pooler, ln)) => {
                let pooled = pooler.forward(g, tokens, None)?;
                let src = match self.cfg.pooler.variant {
                    PoolerVariant::Cascade => pooled,
                    PoolerVariant::Parallel => tokens,
                };
                (ln.forward(g, pooled)?, src)
            }
            None => (tokens, tokens),
        };
        let pooled = self.con_pooler.forward(g, con_source, None)?;
        let pooled = if self.cfg.pooler.n_query_con == 1 {
            let b = g.shape(pooled)[0];
            g.reshape(pooled, &[b, self.cfg.image.d_model])?
        } else {
            g.mean_axis(pooled, 1)?
        };
        let pooled = self.con_ln.forward(g, pooled)?;
        let proj = self.image_proj.forward(g, pooled)?;
        Ok(ImageOutputs {
            tokens,
            gen_tokens,
            embed: g.l2_normalize(proj),
        })
    }

    fn check_tokens(&self, tokens: &[TokenSequence]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Model("empty text batch".into()));
        }
        let width = self.cfg.text_len();
        for (i, t) in tokens.iter().enumerate() {
            if t.ids.len() != width || t.len == 0 || t.len > width {
                return Err(Error::Model(format!(
                    "caption {i}: {} ids with length {} do not fit {width} text slots",
                    t.ids.len(),
                    t.len
                )));
            }
            if let Some(&bad) = t.ids.iter().find(|&&id| id >= self.cfg.text.vocab_size) {
                return Err(Error::Model(format!(
                    "caption {i}: token id {bad} outside vocab"
                )));
            }
        }
        Ok(())
    }

    /// Runs the unimodal stack once and derives the `[CLS]` embedding.
    pub fn encode_text_unimodal<T: Real>(
        &self,
        g: &mut Graph<T>,
        tokens: &[TokenSequence],
    ) -> Result<TextOutputs> {
        self.check_tokens(tokens)?;
        let tc = &self.cfg.text;
        let (b, s, n_cls, v, d) = (
            tokens.len(),
            tc.max_len,
            tc.n_cls,
            tc.vocab_size,
            tc.d_model,
        );

        // Embedding rows V.. of the joint table are the [CLS] slots.
        let mut ids = Vec::with_capacity(b * s);
        for t in tokens {
            for p in 0..s {
                ids.push(if p < t.len {
                    t.ids[p]
                } else if p < t.len + n_cls {
                    v + p - t.len
                } else {
                    t.ids[p - n_cls]
                });
            }
        }
        let table = g.param(self.token_embed);
        let cls = g.param(self.cls_embed);
        let table = g.concat(&[table, cls], 0)?;
        let x = g.index_select(table, &ids)?;
        let x = g.reshape(x, &[b, s, d])?;
        let pos = g.param(self.text_pos);
        let x = g.add(x, pos)?;

        let lengths: Vec<usize> = tokens.iter().map(|t| t.len).collect();
        let mask = AttentionMask::CausalPadding(lengths.iter().map(|l| l + n_cls).collect());
        let seq = run_stack(g, &self.unimodal, x, &mask, None)?;
        self.unimodal_runs.fetch_add(b, Ordering::Relaxed);

        // Average the [CLS] outputs (and optionally the text tokens) with a
        // constant selection matrix.
        let mut avg = vec![T::zero(); b * b * s];
        for (i, &len) in lengths.iter().enumerate() {
            let rows = match tc.cls_aggregate {
                ClsAggregate::Cls => len..len + n_cls,
                ClsAggregate::ClsAndText => 0..len + n_cls,
            };
            let w = T::lit(1.0 / rows.len() as f64);
            for r in rows {
                avg[i * b * s + i * s + r] = w;
            }
        }
        let avg = g.constant(Tensor::new(vec![b, b * s], avg)?);
        let flat = g.reshape(seq, &[b * s, d])?;
        let pooled = g.matmul(avg, flat)?;
        let pooled = self.unimodal_ln.forward(g, pooled)?;
        let proj = self.text_proj.forward(g, pooled)?;
        Ok(TextOutputs {
            seq,
            embed: g.l2_normalize(proj),
            lengths,
        })
    }

    /// Multimodal stack over the whole unimodal sequence, cross-attending
    /// to `gen_tokens`. Returns `[B, max_len, d_text]`.
    pub fn decode_multimodal<T: Real>(
        &self,
        g: &mut Graph<T>,
        text: &TextOutputs,
        gen_tokens: Var,
    ) -> Result<Var> {
        let mask = AttentionMask::CausalPadding(
            text.lengths
                .iter()
                .map(|l| l + self.cfg.text.n_cls)
                .collect(),
        );
        run_stack(g, &self.multimodal, text.seq, &mask, Some(gen_tokens))
    }

    /// Logits `[B * text_len, V]` at the caption positions (the `[CLS]`
    /// slots are skipped).
    pub fn caption_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        lengths: &[usize],
        multimodal: Var,
    ) -> Result<Var> {
        let tc = &self.cfg.text;
        let (s, n_cls, d) = (tc.max_len, tc.n_cls, tc.d_model);
        let text_len = self.cfg.text_len();
        let mut rows = Vec::with_capacity(lengths.len() * text_len);
        for (i, &len) in lengths.iter().enumerate() {
            rows.extend((0..text_len).map(|t| i * s + if t < len { t } else { t + n_cls }));
        }
        let flat = g.reshape(multimodal, &[lengths.len() * s, d])?;
        let x = g.index_select(flat, &rows)?;
        let x = self.multimodal_ln.forward(g, x)?;
        self.lm_head.forward(g, x)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        images: &Tensor<f32>,
        tokens: &[TokenSequence],
    ) -> Result<ForwardOutputs> {
        if images.shape().first() != Some(&tokens.len()) {
            return Err(Error::Model(format!(
                "{:?} images for {} captions",
                images.shape(),
                tokens.len()
            )));
        }
        let img = self.encode_image(g, images)?;
        let text = self.encode_text_unimodal(g, tokens)?;
        let mm = self.decode_multimodal(g, &text, img.gen_tokens)?;
        let logits = self.caption_logits(g, &text.lengths, mm)?;
        Ok(ForwardOutputs {
            image_embed: img.embed,
            text_embed: text.embed,
            caption_logits: logits,
            gen_tokens: img.gen_tokens,
            unimodal: text.seq,
            multimodal: mm,
        })
    }
}

/// Parameter-group of a parameter name (its first dotted segment).
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Parameter totals per group plus `"total"`.
pub fn count_parameters<T: Real>(store: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, p) in store.iter() {
        *out.entry(param_group(p.name()).to_string()).or_insert(0) += p.numel();
    }
    out.insert("total".into(), store.total_params());
    out
}

/// Census of a configuration without allocating any values.
pub fn census(cfg: &CoCaConfig) -> Result<BTreeMap<String, usize>> {
    let mut store = ParamStore::<f32>::shape_only();
    CoCa::new(cfg, &mut store)?;
    Ok(count_parameters(&store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_patches_row_major() {
        // 1 image, 4x4, 1 channel, values = pixel index.
        let img = Tensor::new(vec![1, 4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        let p = p.reshape(vec![4, 4]).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn targets_shift_by_one() {
        let t = TokenSequence {
            ids: vec![1, 7, 8, 2, 0],
            len: 4,
        };
        assert_eq!(
            caption_targets(&[t]),
            vec![Some(7), Some(8), Some(2), None, None]
        );
    }
}
