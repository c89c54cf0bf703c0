//! Tokenization, prompts, synthetic datasets, their on-disk format, and
//! mixed-source batching.

mod batching;
mod io;
pub mod prompts;
pub mod synthetic;
pub mod vocab;

pub use batching::{Batch, BatchPlan, Source};
pub use io::{read_cdat, read_dataset, write_cdat, write_dataset, DataDir};
pub use prompts::{label_to_caption, TEMPLATES};
pub use synthetic::{class_info, generate_synthetic, ClassInfo, SyntheticData, SyntheticSpec};
pub use vocab::{TokenSequence, Vocab, BOS, EOS, PAD, UNK};

use coca_numerics::Tensor;

use crate::error::{Error, Result};

/// Images with aligned captions and (optionally empty) label sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<f32>,
    pub captions: Vec<String>,
    pub labels: Vec<Vec<String>>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: Vec::new(),
            captions: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        captions: Vec<String>,
        labels: Vec<Vec<String>>,
    ) -> Result<Self> {
        let ds = Self {
            height,
            width,
            channels,
            pixels,
            captions,
            labels,
        };
        let n = ds.captions.len();
        if ds.pixels.len() != n * ds.image_len() {
            return Err(Error::Data(format!(
                "{} pixels for {n} images of {}x{}x{}",
                ds.pixels.len(),
                height,
                width,
                channels
            )));
        }
        if !ds.labels.is_empty() && ds.labels.len() != n {
            return Err(Error::Data(format!(
                "{} label sets for {n} captions",
                ds.labels.len()
            )));
        }
        Ok(ds)
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32], caption: String, labels: Vec<String>) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::Data(format!(
                "image of {} values, expected {}",
                image.len(),
                self.image_len()
            )));
        }
        if caption.contains('\n') {
            return Err(Error::Data("captions must be single-line".into()));
        }
        self.pixels.extend_from_slice(image);
        self.captions.push(caption);
        self.labels.push(labels);
        Ok(())
    }

    /// `[ids.len(), H, W, C]` stack of the selected images.
    pub fn images(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(ids.len() * self.image_len());
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Data(format!("example {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        Ok(Tensor::new(
            vec![ids.len(), self.height, self.width, self.channels],
            data,
        )?)
    }
}

/// Class index of every example, taken from the first label.
pub fn class_ids(ds: &Dataset, classes: &[ClassInfo]) -> Result<Vec<usize>> {
    ds.labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let name = l
                .first()
                .ok_or_else(|| Error::Data(format!("example {i} has no labels")))?;
            classes
                .iter()
                .position(|c| &c.name == name)
                .ok_or_else(|| Error::Data(format!("example {i}: unknown class {name:?}")))
        })
        .collect()
}

/// Vocabulary covering both caption sources and every prompt template
/// filled with every class name.
pub fn build_vocab(data: &SyntheticData) -> Vocab {
    let prompts: Vec<String> = data
        .classes
        .iter()
        .flat_map(|c| {
            TEMPLATES
                .iter()
                .map(move |t| prompts::apply_template(t, &c.name))
        })
        .collect();
    let texts = data
        .annotated
        .captions
        .iter()
        .chain(&data.alt_text.captions)
        .chain(&prompts)
        .map(String::as_str);
    Vocab::from_corpus(texts)
}

/// Held-out accuracy of nearest-centroid classification on raw pixels, with
/// centroids from the training split of the annotated source. A sanity
/// check that the classes are separable at all.
pub fn nearest_centroid_accuracy(data: &SyntheticData) -> Result<f64> {
    let ds = &data.annotated;
    let labels = class_ids(ds, &data.classes)?;
    if data.test.is_empty() {
        return Err(Error::Data("no held-out examples".into()));
    }
    let k = data.classes.len();
    let mut centroids = vec![vec![0.0f64; ds.image_len()]; k];
    let mut counts = vec![0usize; k];
    for &i in &data.train {
        counts[labels[i]] += 1;
        for (c, &x) in centroids[labels[i]].iter_mut().zip(ds.image(i)) {
            *c += x as f64;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let dist = |c: &[f64], x: &[f32]| {
        c.iter()
            .zip(x)
            .map(|(a, &b)| (a - b as f64).powi(2))
            .sum::<f64>()
    };
    let hits = data
        .test
        .iter()
        .filter(|&&i| {
            let x = ds.image(i);
            let best = (0..k)
                .min_by(|&a, &b| dist(&centroids[a], x).total_cmp(&dist(&centroids[b], x)))
                .unwrap_or(0);
            best == labels[i]
        })
        .count();
    Ok(hits as f64 / data.test.len() as f64)
}
