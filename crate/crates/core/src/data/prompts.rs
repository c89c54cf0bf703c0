use coca_numerics::Rng;

use crate::error::{Error, Result};

/// Caption templates; `{}` receives the label text.
pub const TEMPLATES: [&str; 8] = [
    "a photo of the {}",
    "a photo of a {}",
    "a picture of the {}",
    "an image of the {}",
    "a rendering of the {}",
    "a close-up photo of the {}",
    "a drawing of the {}",
    "a pattern showing the {}",
];

pub fn apply_template(template: &str, text: &str) -> String {
    template.replacen("{}", text, 1)
}

/// Shuffles the labels, joins them with ", " and wraps the result in a
/// randomly chosen template.
pub fn label_to_caption(labels: &[impl AsRef<str>], rng: &mut Rng) -> Result<String> {
    if labels.is_empty() {
        return Err(Error::Data("empty label set".into()));
    }
    let mut names: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
    rng.shuffle(&mut names);
    let template = TEMPLATES[rng.below(TEMPLATES.len())];
    Ok(apply_template(template, &names.join(", ")))
}
