//! Downstream protocols: zero-shot classification, retrieval, greedy
//! captioning, frozen-feature probing, video embeddings and the multimodal
//! classification head.
//!
//! Protocol maths lives in plain functions over embedding rows so it can be
//! checked against brute-force oracles; the model-facing wrappers only
//! compute embeddings.

use coca_numerics::{Graph, ParamStore, Rng, Tensor};
use sha2::{Digest, Sha256};

use crate::data::{class_ids, SyntheticData, TokenSequence, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::CoCa;
use crate::nn::{AttentionalPooler, Linear};
use crate::objectives::{classification_loss, one_hot};
use crate::train::AdamW;

/// Rows per inference batch.
const CHUNK: usize = 64;

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &mut [f32]) {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn select_images(images: &Tensor<f32>, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
    let s = images.shape();
    let width: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = range.len();
    Ok(Tensor::new(
        shape,
        images.data()[range.start * width..range.end * width].to_vec(),
    )?)
}

/// Unit-norm contrastive image embeddings of `[N, H, W, C]` images.
pub fn image_embeddings(
    model: &CoCa,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
) -> Result<Vec<Vec<f32>>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let chunk = select_images(images, start..(start + CHUNK).min(n))?;
        let mut g = Graph::inference(store);
        let img = model.encode_image(&mut g, &chunk)?;
        out.extend(rows(g.value(img.embed)));
    }
    Ok(out)
}

/// Unit-norm `[CLS]` text embeddings.
pub fn text_embeddings(
    model: &CoCa,
    store: &ParamStore<f32>,
    tokens: &[TokenSequence],
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(tokens.len());
    for chunk in tokens.chunks(CHUNK) {
        let mut g = Graph::inference(store);
        let t = model.encode_text_unimodal(&mut g, chunk)?;
        out.extend(rows(g.value(t.embed)));
    }
    Ok(out)
}

pub fn embed_texts(
    model: &CoCa,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    texts: &[String],
) -> Result<Vec<Vec<f32>>> {
    let len = model.cfg.text_len();
    let tokens: Vec<TokenSequence> = texts.iter().map(|t| vocab.tokenize(t, len)).collect();
    text_embeddings(model, store, &tokens)
}

// ---------------------------------------------------------------------
// Zero-shot classification

/// Per class: mean of the normalized prompt embeddings, renormalized.
pub fn class_embeddings(prompt_embeds: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    prompt_embeds
        .iter()
        .enumerate()
        .map(|(c, prompts)| {
            let first = prompts
                .first()
                .ok_or_else(|| Error::Eval(format!("class {c} has no prompts")))?;
            let mut mean = vec![0.0f32; first.len()];
            for p in prompts {
                let mut p = p.clone();
                normalize(&mut p);
                mean.iter_mut()
                    .zip(&p)
                    .for_each(|(m, x)| *m += x / prompts.len() as f32);
            }
            normalize(&mut mean);
            Ok(mean)
        })
        .collect()
}

/// Similarity matrix `[queries][candidates]` of cosine scores.
pub fn similarities(queries: &[Vec<f32>], candidates: &[Vec<f32>]) -> Vec<Vec<f32>> {
    queries
        .iter()
        .map(|q| candidates.iter().map(|c| dot(q, c)).collect())
        .collect()
}

pub fn zero_shot_predict(image_embeds: &[Vec<f32>], class_embeds: &[Vec<f32>]) -> Vec<usize> {
    similarities(image_embeds, class_embeds)
        .iter()
        .map(|s| argmax(s))
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShot {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Class embeddings from class names rendered through every template.
pub fn prompt_class_embeddings(
    model: &CoCa,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    class_names: &[String],
    templates: &[&str],
) -> Result<Vec<Vec<f32>>> {
    if class_names.is_empty() || templates.is_empty() {
        return Err(Error::Eval("zero-shot needs classes and templates".into()));
    }
    let mut prompt_embeds = Vec::with_capacity(class_names.len());
    for name in class_names {
        let texts: Vec<String> = templates
            .iter()
            .map(|t| crate::data::prompts::apply_template(t, name))
            .collect();
        prompt_embeds.push(embed_texts(model, store, vocab, &texts)?);
    }
    class_embeddings(&prompt_embeds)
}

/// Classifies `images` against class names rendered through `templates`.
pub fn zero_shot_classify(
    model: &CoCa,
    store: &ParamStore<f32>,
    vocab: &Vocab,
    images: &Tensor<f32>,
    labels: &[usize],
    class_names: &[String],
    templates: &[&str],
) -> Result<ZeroShot> {
    let classes = prompt_class_embeddings(model, store, vocab, class_names, templates)?;
    let image = image_embeddings(model, store, images)?;
    let predictions = zero_shot_predict(&image, &classes);
    Ok(ZeroShot {
        accuracy: accuracy(&predictions, labels),
        predictions,
    })
}

// ---------------------------------------------------------------------
// Retrieval

#[derive(Clone, Debug, PartialEq)]
pub struct Recall {
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Candidate indices sorted by descending score; equal scores keep index
/// order.
pub fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Recall@K in both directions for paired rows. Candidate `j` is relevant
/// to query `i` when `j == i`, or, with `groups`, when both share a group.
pub fn recall_at_k(
    image_embeds: &[Vec<f32>],
    text_embeds: &[Vec<f32>],
    ks: &[usize],
    groups: Option<&[usize]>,
) -> Result<Vec<Recall>> {
    let n = image_embeds.len();
    if n == 0 || text_embeds.len() != n || groups.is_some_and(|g| g.len() != n) {
        return Err(Error::Eval(format!(
            "retrieval needs equal nonempty lists, got {n} / {}",
            text_embeds.len()
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Eval(format!("K = {k} outside 1..={n}")));
    }
    let relevant = |i: usize, j: usize| i == j || groups.is_some_and(|g| g[i] == g[j]);
    // Rank of the first relevant candidate for each query.
    let first_hit = |sims: &[Vec<f32>]| -> Vec<usize> {
        sims.iter()
            .enumerate()
            .map(|(i, s)| ranking(s).iter().position(|&j| relevant(i, j)).unwrap_or(n))
            .collect()
    };
    let i2t = first_hit(&similarities(image_embeds, text_embeds));
    let t2i = first_hit(&similarities(text_embeds, image_embeds));
    let rate =
        |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(ks
        .iter()
        .map(|&k| Recall {
            k,
            image_to_text: rate(&i2t, k),
            text_to_image: rate(&t2i, k),
        })
        .collect())
}

/// The standard K values that fit `n` candidates.
pub fn standard_ks(n: usize) -> Vec<usize> {
    [1, 5, 10].into_iter().filter(|&k| k <= n).collect()
}

pub fn retrieve(
    model: &CoCa,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    tokens: &[TokenSequence],
    ks: &[usize],
    groups: Option<&[usize]>,
) -> Result<Vec<Recall>> {
    let i = image_embeddings(model, store, images)?;
    let t = text_embeddings(model, store, tokens)?;
    recall_at_k(&i, &t, ks, groups)
}

// ---------------------------------------------------------------------
// Captioning

/// Greedy decoding from `[BOS]`: repeatedly append the most likely token
/// (never `[PAD]` or `[BOS]`) until `[EOS]` or the text width is full.
/// Returns the generated tokens without `[BOS]`/`[EOS]`.
pub fn caption_greedy(
    model: &CoCa,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
) -> Result<Vec<Vec<usize>>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let chunk = select_images(images, start..(start + CHUNK).min(n))?;
        out.extend(greedy_chunk(model, store, &chunk)?);
    }
    Ok(out)
}

fn greedy_chunk(
    model: &CoCa,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
) -> Result<Vec<Vec<usize>>> {
    let b = images.shape()[0];
    let width = model.cfg.text_len();
    let vocab = model.cfg.text.vocab_size;
    let mut g = Graph::inference(store);
    let img = model.encode_image(&mut g, images)?;
    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    for len in 1..width {
        let tokens: Vec<TokenSequence> = seqs
            .iter()
            .map(|s| {
                let mut ids = s.clone();
                ids.resize(width, PAD);
                TokenSequence { ids, len }
            })
            .collect();
        let text = model.encode_text_unimodal(&mut g, &tokens)?;
        let mm = model.decode_multimodal(&mut g, &text, img.gen_tokens)?;
        let logits = model.caption_logits(&mut g, &text.lengths, mm)?;
        let logits = g.value(logits).clone();
        for i in 0..b {
            let next = if done[i] {
                PAD
            } else {
                let row = &logits.data()[(i * width + len - 1) * vocab..(i * width + len) * vocab];
                let mut masked = row.to_vec();
                masked[PAD] = f32::NEG_INFINITY;
                masked[BOS] = f32::NEG_INFINITY;
                argmax(&masked)
            };
            if next == EOS {
                done[i] = true;
            }
            seqs[i].push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs
        .into_iter()
        .map(|s| {
            s.into_iter()
                .skip(1)
                .take_while(|&t| t != EOS && t != PAD)
                .collect()
        })
        .collect())
}

/// The tokens strictly between `[BOS]` and `[EOS]`.
pub fn caption_body(t: &TokenSequence) -> Vec<usize> {
    t.ids[1..t.len.saturating_sub(1).max(1)].to_vec()
}

pub fn exact_match(generated: &[Vec<usize>], references: &[TokenSequence]) -> f64 {
    let hits = generated
        .iter()
        .zip(references)
        .filter(|(g, r)| **g == caption_body(r))
        .count();
    hits as f64 / generated.len().max(1) as f64
}

// ---------------------------------------------------------------------
// Frozen features and classification heads

/// SHA-256 over the raw bytes of every parameter whose name starts with
/// one of `prefixes` (all parameters when empty).
pub fn checksum(store: &ParamStore<f32>, prefixes: &[&str]) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        if prefixes.is_empty() || prefixes.iter().any(|pre| p.name().starts_with(pre)) {
            h.update(p.name().as_bytes());
            for x in p.data() {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct HeadTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadTraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrozenReport {
    pub accuracy: f64,
    pub checksum_before: String,
    pub checksum_after: String,
    /// Names of every parameter the optimizer touched.
    pub updated: Vec<String>,
    pub final_loss: f32,
}

const FROZEN_HEAD: &str = "frozen_head.";

/// Trains a fresh single-query pooler plus linear classifier on top of the
/// frozen image encoder, then reports test accuracy. The backbone runs in
/// the training graph with every one of its parameters frozen; any update
/// reaching it is a hard error.
#[allow(clippy::too_many_arguments)]
pub fn frozen_feature_eval(
    model: &CoCa,
    backbone: &ParamStore<f32>,
    train_images: &Tensor<f32>,
    train_labels: &[usize],
    test_images: &Tensor<f32>,
    test_labels: &[usize],
    n_classes: usize,
    opts: &HeadTraining,
) -> Result<FrozenReport> {
    let ic = &model.cfg.image;
    let mut store = backbone.clone();
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, false);
    }
    let pooler = AttentionalPooler::new(
        &mut store,
        &format!("{FROZEN_HEAD}pooler"),
        1,
        ic.d_model,
        ic.d_model,
        ic.n_heads,
        model.cfg.init_std,
    )?;
    let classifier = Linear::new(
        &mut store,
        &format!("{FROZEN_HEAD}classifier"),
        ic.d_model,
        n_classes,
        model.cfg.init_std,
    );
    let before = checksum(&store, &["encoder."]);

    let logits_of = |g: &mut Graph<f32>, images: &Tensor<f32>| -> Result<coca_numerics::Var> {
        let tokens = model.encode_patches(g, images)?;
        let pooled = pooler.forward(g, tokens, None)?;
        let b = images.shape()[0];
        let pooled = g.reshape(pooled, &[b, ic.d_model])?;
        classifier.forward(g, pooled)
    };

    let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.0);
    let mut rng = Rng::new(opts.seed);
    let n = train_labels.len();
    let mut updated = std::collections::BTreeSet::new();
    let mut final_loss = f32::NAN;
    for _ in 0..opts.steps {
        let idx: Vec<usize> = (0..opts.batch_size.min(n)).map(|_| rng.below(n)).collect();
        let images = gather_images(train_images, &idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let mut g = Graph::new(&store);
        let logits = logits_of(&mut g, &images)?;
        let dist = one_hot(&labels, n_classes)?;
        let loss = classification_loss(&mut g, logits, &dist)?;
        final_loss = g.value(loss).item();
        g.backward(loss)?;
        let grads = g.param_grads();
        drop(g);
        let census = opt.update(&mut store, &grads, opts.lr)?;
        updated.extend(
            census
                .updated
                .iter()
                .map(|&id| store.get(id).name().to_string()),
        );
    }
    if let Some(bad) = updated.iter().find(|n| !n.starts_with(FROZEN_HEAD)) {
        return Err(Error::Frozen(bad.clone()));
    }
    let after = checksum(&store, &["encoder."]);
    if before != after {
        return Err(Error::Frozen("encoder checksum changed".into()));
    }

    let mut pred = Vec::with_capacity(test_labels.len());
    let m = test_images.shape()[0];
    for start in (0..m).step_by(CHUNK) {
        let chunk = select_images(test_images, start..(start + CHUNK).min(m))?;
        let mut g = Graph::inference(&store);
        let logits = logits_of(&mut g, &chunk)?;
        pred.extend(rows(g.value(logits)).iter().map(|r| argmax(r)));
    }
    Ok(FrozenReport {
        accuracy: accuracy(&pred, test_labels),
        checksum_before: before,
        checksum_after: after,
        updated: updated.into_iter().collect(),
        final_loss,
    })
}

pub fn gather_images(images: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let s = images.shape();
    let width: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        if i >= s[0] {
            return Err(Error::Eval(format!("image {i} out of {}", s[0])));
        }
        data.extend_from_slice(&images.data()[i * width..(i + 1) * width]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Ok(Tensor::new(shape, data)?)
}

// ---------------------------------------------------------------------
// Video

/// `n` frame indices spread uniformly over `len` frames (repeating frames
/// when the clip is shorter than `n`).
pub fn sample_frame_indices(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * len / n).collect()
}

/// Mean of the frame embeddings, renormalized.
pub fn mean_embedding(frames: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Eval("no frames".into()))?;
    let mut mean = vec![0.0f32; first.len()];
    for f in frames {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= frames.len() as f32);
    normalize(&mut mean);
    Ok(mean)
}

/// Clip embedding of `frames[F, H, W, C]` from `n_frames` sampled frames.
pub fn video_embed(
    model: &CoCa,
    store: &ParamStore<f32>,
    frames: &Tensor<f32>,
    n_frames: usize,
) -> Result<Vec<f32>> {
    let len = frames.shape().first().copied().unwrap_or(0);
    if len == 0 || n_frames == 0 {
        return Err(Error::Eval("video needs at least one frame".into()));
    }
    let sampled = gather_images(frames, &sample_frame_indices(len, n_frames))?;
    mean_embedding(&image_embeddings(model, store, &sampled)?)
}

// ---------------------------------------------------------------------
// Multimodal classification head

const MM_HEAD: &str = "mm_head.";

/// Single-query pooler over the multimodal decoder outputs followed by a
/// linear classifier.
#[derive(Debug)]
pub struct MultimodalHead {
    pub pooler: AttentionalPooler,
    pub classifier: Linear,
    pub n_classes: usize,
}

impl MultimodalHead {
    /// Adds the head's parameters to `store` under `mm_head.`.
    pub fn new(model: &CoCa, store: &mut ParamStore<f32>, n_classes: usize) -> Result<Self> {
        let tc = &model.cfg.text;
        let std = model.cfg.init_std;
        Ok(Self {
            pooler: AttentionalPooler::new(
                store,
                &format!("{MM_HEAD}pooler"),
                1,
                tc.d_model,
                tc.d_model,
                tc.n_heads,
                std,
            )?,
            classifier: Linear::new(
                store,
                &format!("{MM_HEAD}classifier"),
                tc.d_model,
                n_classes,
                std,
            ),
            n_classes,
        })
    }

    /// Logits `[B, n_classes]` for image/text pairs.
    pub fn logits(
        &self,
        model: &CoCa,
        g: &mut Graph<f32>,
        images: &Tensor<f32>,
        tokens: &[TokenSequence],
    ) -> Result<coca_numerics::Var> {
        let img = model.encode_image(g, images)?;
        let text = model.encode_text_unimodal(g, tokens)?;
        let mm = model.decode_multimodal(g, &text, img.gen_tokens)?;
        let lengths: Vec<usize> = text
            .lengths
            .iter()
            .map(|l| l + model.cfg.text.n_cls)
            .collect();
        let pooled = self.pooler.forward(g, mm, Some(&lengths))?;
        let pooled = g.reshape(pooled, &[tokens.len(), model.cfg.text.d_model])?;
        self.classifier.forward(g, pooled)
    }

    /// Fine-tunes the head (and the backbone unless `freeze_backbone`) on
    /// labeled pairs with the classification loss. Returns the final loss.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &self,
        model: &CoCa,
        store: &mut ParamStore<f32>,
        images: &Tensor<f32>,
        tokens: &[TokenSequence],
        labels: &[usize],
        freeze_backbone: bool,
        opts: &HeadTraining,
    ) -> Result<f32> {
        for id in store.ids().collect::<Vec<_>>() {
            let head = store.get(id).name().starts_with(MM_HEAD);
            store.set_trainable(id, head || !freeze_backbone);
        }
        let mut opt = AdamW::new(store, 0.9, 0.999, 1e-8, 0.0);
        let mut rng = Rng::new(opts.seed);
        let n = labels.len();
        let mut last = f32::NAN;
        for _ in 0..opts.steps {
            let idx: Vec<usize> = (0..opts.batch_size.min(n)).map(|_| rng.below(n)).collect();
            let batch_images = gather_images(images, &idx)?;
            let batch_tokens: Vec<TokenSequence> = idx.iter().map(|&i| tokens[i].clone()).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(store);
            let logits = self.logits(model, &mut g, &batch_images, &batch_tokens)?;
            let loss =
                classification_loss(&mut g, logits, &one_hot(&batch_labels, self.n_classes)?)?;
            last = g.value(loss).item();
            g.backward(loss)?;
            let grads = g.param_grads();
            drop(g);
            opt.update(store, &grads, opts.lr)?;
        }
        Ok(last)
    }

    pub fn predict(
        &self,
        model: &CoCa,
        store: &ParamStore<f32>,
        images: &Tensor<f32>,
        tokens: &[TokenSequence],
    ) -> Result<Vec<usize>> {
        let n = tokens.len();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let chunk = select_images(images, start..end)?;
            let mut g = Graph::inference(store);
            let logits = self.logits(model, &mut g, &chunk, &tokens[start..end])?;
            out.extend(rows(g.value(logits)).iter().map(|r| argmax(r)));
        }
        Ok(out)
    }
}

/// Image/caption pairs labeled 1 when the caption is the image's own
/// alt-text and 0 when it is borrowed from an example of another class in
/// `ids`, each with probability one half.
pub fn caption_matching_pairs(
    data: &SyntheticData,
    vocab: &Vocab,
    ids: &[usize],
    width: usize,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<TokenSequence>, Vec<usize>)> {
    let labels = class_ids(&data.alt_text, &data.classes)?;
    if !ids
        .iter()
        .any(|&i| ids.iter().any(|&j| labels[j] != labels[i]))
    {
        return Err(Error::Eval(
            "caption matching needs at least two classes".into(),
        ));
    }
    let mut tokens = Vec::with_capacity(ids.len());
    let mut y = Vec::with_capacity(ids.len());
    for &i in ids {
        let matched = rng.below(2) == 1;
        let j = if matched {
            i
        } else {
            loop {
                let j = ids[rng.below(ids.len())];
                if labels[j] != labels[i] {
                    break j;
                }
            }
        };
        tokens.push(vocab.tokenize(&data.alt_text.captions[j], width));
        y.push(matched as usize);
    }
    Ok((data.alt_text.images(ids)?, tokens, y))
}
