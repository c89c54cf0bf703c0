use coca_numerics::{Rng, Tensor};

use super::{Dataset, TokenSequence, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Annotated,
    AltText,
}

/// One training batch: the first half annotated, the second alt-text.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub tokens: Vec<TokenSequence>,
    pub sources: Vec<Source>,
    pub ids: Vec<usize>,
}

/// Deterministic, seekable batch order over the training ids.
///
/// Each source walks its own permutation of the ids, reshuffled every
/// epoch; the order for step `s` depends only on `(seed, s)`, so a resumed
/// run sees exactly the batches an uninterrupted one would.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    ids: Vec<usize>,
    half: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(ids: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::Data(format!(
                "batch size {batch_size} must be even and positive"
            )));
        }
        let half = batch_size / 2;
        if ids.len() < half {
            return Err(Error::Data(format!(
                "{} training ids cannot fill half a batch of {batch_size}",
                ids.len()
            )));
        }
        Ok(Self { ids, half, seed })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.ids.len() / self.half
    }

    /// Example ids of `(annotated, alt_text)` halves at `step`.
    pub fn indices(&self, step: usize) -> (Vec<usize>, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = ((step / spe) as u64, step % spe);
        let take = |stream: u64| -> Vec<usize> {
            let perm = Rng::derived(self.seed, stream).permutation(self.ids.len());
            perm[pos * self.half..(pos + 1) * self.half]
                .iter()
                .map(|&i| self.ids[i])
                .collect()
        };
        (take(2 * epoch), take(2 * epoch + 1))
    }

    pub fn batch(
        &self,
        step: usize,
        annotated: &Dataset,
        alt_text: &Dataset,
        vocab: &Vocab,
        text_len: usize,
    ) -> Result<Batch> {
        let (a, b) = self.indices(step);
        let ia = annotated.images(&a)?;
        let ib = alt_text.images(&b)?;
        let images = Tensor::stack(&[&ia, &ib])?;
        let shape = images.shape();
        let images =
            images
                .clone()
                .reshape(vec![shape[0] * shape[1], shape[2], shape[3], shape[4]])?;
        let tokens = a
            .iter()
            .map(|&i| vocab.tokenize(&annotated.captions[i], text_len))
            .chain(
                b.iter()
                    .map(|&i| vocab.tokenize(&alt_text.captions[i], text_len)),
            )
            .collect();
        let sources = std::iter::repeat_n(Source::Annotated, a.len())
            .chain(std::iter::repeat_n(Source::AltText, b.len()))
            .collect();
        Ok(Batch {
            images,
            tokens,
            sources,
            ids: a.into_iter().chain(b).collect(),
        })
    }
}
