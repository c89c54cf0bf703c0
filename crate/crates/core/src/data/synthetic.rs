//! Procedural image-text data: each class is a colored shape or texture,
//! described either by a templated label caption (the "annotated" source)
//! or by a noisier free-form sentence (the "alt-text" source).

use coca_numerics::Rng;

use super::prompts::label_to_caption;
use super::Dataset;
use crate::error::{Error, Result};

const NAMES: [&str; 24] = [
    "cat", "dog", "bird", "fish", "tree", "flower", "car", "boat", "chair", "lamp", "horse",
    "fern", "truck", "cup", "frog", "cactus", "train", "clock", "owl", "moss", "plane", "vase",
    "bee", "kite",
];

const PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
    [0.95, 0.55, 0.1],
    [0.95, 0.95, 0.95],
];

const BACKGROUND: f32 = 0.05;

const OPENERS: [&str; 4] = ["look at this", "here is my", "check out the", "i found a"];
const ADJECTIVES: [&str; 4] = ["nice", "small", "great", "old"];
const TAILS: [&str; 4] = [
    "on the table",
    "at home today",
    "in the garden",
    "from last week",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Examples per class and source, held-out ones included.
    pub per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            per_class: 68,
            test_per_class: 4,
            size: 16,
            channels: 3,
            noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Data(format!("n_classes {} < 2", self.n_classes)));
        }
        if self.test_per_class >= self.per_class {
            return Err(Error::Data(format!(
                "test_per_class {} leaves no training examples out of {}",
                self.test_per_class, self.per_class
            )));
        }
        if self.size < 4 || self.channels == 0 || !(self.noise >= 0.0) {
            return Err(Error::Data(
                "size >= 4, channels >= 1 and noise >= 0 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub supercategory: String,
}

pub fn class_info(c: usize) -> ClassInfo {
    let name = NAMES
        .get(c)
        .map_or_else(|| format!("thing{c}"), |s| s.to_string());
    let supercategory = match name.as_str() {
        "cat" | "dog" | "bird" | "fish" | "horse" | "frog" | "owl" | "bee" => "animal",
        "tree" | "flower" | "fern" | "cactus" | "moss" => "plant",
        "car" | "boat" | "truck" | "train" | "plane" => "vehicle",
        _ => "object",
    };
    ClassInfo {
        name,
        supercategory: supercategory.to_string(),
    }
}

/// Foreground mask value of the class pattern at pixel `(y, x)`.
fn pattern(kind: usize, y: usize, x: usize, size: usize) -> bool {
    let s = size as f64;
    let (fy, fx) = ((y as f64 + 0.5) / s - 0.5, (x as f64 + 0.5) / s - 0.5);
    let r = (fx * fx + fy * fy).sqrt();
    let band = (size / 4).max(1);
    match kind {
        0 => (y / band).is_multiple_of(2),
        1 => (x / band).is_multiple_of(2),
        2 => ((x + y) / band).is_multiple_of(2),
        3 => ((x / band) + (y / band)).is_multiple_of(2),
        4 => r < 0.3,
        5 => (0.22..0.4).contains(&r),
        6 => fx.abs() < 0.1 || fy.abs() < 0.1,
        _ => fy > -0.35 && fy < 0.35 && fx.abs() < (fy + 0.35) * 0.6,
    }
}

/// Noiseless `size × size × channels` image of class `c`.
pub fn class_prototype(c: usize, size: usize, channels: usize) -> Vec<f32> {
    let kind = c % 8;
    let color = PALETTE[(c + c / 8) % 8];
    let mut img = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let on = pattern(kind, y, x, size);
            for ch in 0..channels {
                img.push(if on { color[ch % 3] } else { BACKGROUND });
            }
        }
    }
    img
}

pub fn alt_text(info: &ClassInfo, rng: &mut Rng) -> String {
    format!(
        "{} {} {} {}",
        OPENERS[rng.below(OPENERS.len())],
        ADJECTIVES[rng.below(ADJECTIVES.len())],
        info.name,
        TAILS[rng.below(TAILS.len())]
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub classes: Vec<ClassInfo>,
    pub annotated: Dataset,
    pub alt_text: Dataset,
    /// Example ids (shared by both sources) in the training split.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Both sources hold `n_classes * per_class` examples with example `i`
/// belonging to class `i / per_class`; the sources draw independent noise.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<SyntheticData> {
    spec.validate()?;
    let classes: Vec<ClassInfo> = (0..spec.n_classes).map(class_info).collect();
    let prototypes: Vec<Vec<f32>> = (0..spec.n_classes)
        .map(|c| class_prototype(c, spec.size, spec.channels))
        .collect();

    let make = |annotated: bool, rng: &mut Rng| -> Result<Dataset> {
        let mut ds = Dataset::empty(spec.size, spec.size, spec.channels);
        for (c, info) in classes.iter().enumerate() {
            for _ in 0..spec.per_class {
                let img: Vec<f32> = prototypes[c]
                    .iter()
                    .map(|&p| {
                        if spec.noise > 0.0 {
                            (p as f64 + rng.normal() * spec.noise).clamp(0.0, 1.0) as f32
                        } else {
                            p
                        }
                    })
                    .collect();
                let labels = vec![info.name.clone(), info.supercategory.clone()];
                let caption = if annotated {
                    label_to_caption(&labels, rng)?
                } else {
                    alt_text(info, rng)
                };
                ds.push(&img, caption, labels)?;
            }
        }
        Ok(ds)
    };
    let annotated = make(true, rng)?;
    let alt_text = make(false, rng)?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.n_classes {
        let base = c * spec.per_class;
        let perm = rng.permutation(spec.per_class);
        let mut held: Vec<usize> = perm[..spec.test_per_class]
            .iter()
            .map(|&i| base + i)
            .collect();
        let mut kept: Vec<usize> = perm[spec.test_per_class..]
            .iter()
            .map(|&i| base + i)
            .collect();
        held.sort_unstable();
        kept.sort_unstable();
        test.extend(held);
        train.extend(kept);
    }
    Ok(SyntheticData {
        classes,
        annotated,
        alt_text,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_are_pairwise_distinct() {
        let protos: Vec<Vec<f32>> = (0..24).map(|c| class_prototype(c, 16, 3)).collect();
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                let d: f32 = protos[i]
                    .iter()
                    .zip(&protos[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d > 0.0, "classes {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn class_names() {
        assert_eq!(class_info(0).name, "cat");
        assert_eq!(class_info(0).supercategory, "animal");
        assert_eq!(class_info(30).name, "thing30");
    }
}
