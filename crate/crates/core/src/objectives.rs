//! Contrastive, captioning and classification losses and their weighted sum.

use coca_numerics::{Graph, ParamId, Real, Reduction, Tensor, Var};

use crate::error::{Error, Result};

/// Tolerance of the unit-norm precondition on contrastive embeddings.
const NORM_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_cap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 1.0,
            lambda_cap: 2.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_con: f64, lambda_cap: f64) -> Result<Self> {
        if !(lambda_con >= 0.0 && lambda_cap >= 0.0) {
            return Err(Error::Config(format!(
                "negative loss weight ({lambda_con}, {lambda_cap})"
            )));
        }
        if lambda_con == 0.0 && lambda_cap == 0.0 {
            return Err(Error::Config("both loss weights are zero".into()));
        }
        Ok(Self {
            lambda_con,
            lambda_cap,
        })
    }
}

fn check_unit_rows<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let d = *t.shape().last().unwrap_or(&1);
    for (i, row) in t.data().chunks(d).enumerate() {
        let n = row
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Model(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over a batch of paired unit-norm embeddings `[N, d]`:
/// mean image-to-text cross-entropy plus mean text-to-image cross-entropy,
/// with logits `x_i·y_j / σ` and `σ = exp(log_temperature)`.
pub fn contrastive_loss<T: Real>(
    g: &mut Graph<T>,
    image: Var,
    text: Var,
    log_temperature: Var,
) -> Result<Var> {
    let (si, st) = (g.shape(image).to_vec(), g.shape(text).to_vec());
    if si.len() != 2 || si != st {
        return Err(Error::Model(format!(
            "contrastive embeddings {si:?} vs {st:?}"
        )));
    }
    check_unit_rows(g, image, "image embedding")?;
    check_unit_rows(g, text, "text embedding")?;
    let n = si[0];
    let inv_sigma = g.scale(log_temperature, -1.0);
    let inv_sigma = g.exp(inv_sigma);
    let sim = g.matmul_t(image, text)?;
    let logits = g.mul(sim, inv_sigma)?;
    let logits_t = g.transpose(logits)?;
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let i2t = g.cross_entropy(logits, &diag, Reduction::Mean)?;
    let t2i = g.cross_entropy(logits_t, &diag, Reduction::Mean)?;
    Ok(g.add(i2t, t2i)?)
}

/// Per-example sum of next-token negative log-likelihoods, averaged over
/// the `batch` examples. `logits` is `[rows, V]`, aligned with `targets`.
pub fn captioning_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Option<usize>],
    batch: usize,
) -> Result<Var> {
    if batch == 0 {
        return Err(Error::Model("captioning loss over an empty batch".into()));
    }
    let total = g.cross_entropy(logits, targets, Reduction::Sum)?;
    Ok(g.scale(total, 1.0 / batch as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub con: Var,
    pub cap: Var,
}

/// `λ_con · L_con + λ_cap · L_cap`; both parts are always computed so they
/// can be logged.
pub fn coca_loss<T: Real>(
    g: &mut Graph<T>,
    image_embed: Var,
    text_embed: Var,
    log_temperature: ParamId,
    caption_logits: Var,
    targets: &[Option<usize>],
    weights: LossWeights,
) -> Result<LossParts> {
    let batch = g.shape(image_embed)[0];
    let temp = g.param(log_temperature);
    let con = contrastive_loss(g, image_embed, text_embed, temp)?;
    let cap = captioning_loss(g, caption_logits, targets, batch)?;
    let wc = g.scale(con, weights.lambda_con);
    let wp = g.scale(cap, weights.lambda_cap);
    let total = g.add(wc, wp)?;
    Ok(LossParts { total, con, cap })
}

/// Mean over rows of `-Σ p log softmax(logits)` for target distributions
/// `dist` whose rows sum to one.
pub fn classification_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    dist: &Tensor<T>,
) -> Result<Var> {
    let w = *dist.shape().last().unwrap_or(&1);
    for (i, row) in dist.data().chunks(w).enumerate() {
        let s: f64 = row.iter().map(|x| x.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|x| x.as_f64() < 0.0) {
            return Err(Error::Model(format!(
                "label distribution row {i} sums to {s}"
            )));
        }
    }
    Ok(g.soft_cross_entropy(logits, dist)?)
}

/// Row-wise one-hot distributions.
pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Model(format!(
                "label {l} outside {n_classes} classes"
            )));
        }
        data[i * n_classes + l] = T::one();
    }
    Ok(Tensor::new(vec![labels.len(), n_classes], data)?)
}
