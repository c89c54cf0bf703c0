//! Model and training configuration.
//!
//! Files are UTF-8, one `key = value` per line with dotted keys
//! (`text.n_uni = 1`). `#` starts a comment. An optional `preset = <name>`
//! line selects the starting preset; every other key overrides it, and
//! unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolerVariant {
    /// Both poolers read the encoder output.
    Parallel,
    /// The contrastive pooler reads the generative pooler's output.
    Cascade,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsAggregate {
    /// Mean over the `[CLS]` outputs only.
    Cls,
    /// Mean over the `[CLS]` outputs and every real text token.
    ClsAndText,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageConfig {
    pub resolution: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    /// Positions available to the decoder, `[CLS]` included.
    pub max_len: usize,
    pub n_uni: usize,
    pub n_multi: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub n_cls: usize,
    pub cls_aggregate: ClsAggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolerConfig {
    /// 0 disables the generative pooler; the decoder then cross-attends to
    /// every encoder token.
    pub n_query_gen: usize,
    pub n_query_con: usize,
    pub variant: PoolerVariant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_con: f64,
    pub lambda_cap: f64,
    pub temperature_init: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoCaConfig {
    pub image: ImageConfig,
    pub text: TextConfig,
    pub pooler: PoolerConfig,
    pub loss: LossConfig,
    /// Width of the shared contrastive embedding space.
    pub embed_dim: usize,
    pub init_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

/// Everything a run needs: model shape plus optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: CoCaConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 4] = ["coca-tiny", "coca-base", "coca-large", "coca"];

impl CoCaConfig {
    pub fn patch_count(&self) -> usize {
        let side = self.image.resolution / self.image.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.image.patch_size * self.image.patch_size * self.image.channels
    }

    /// Padded token-sequence length (BOS..EOS plus padding) the decoder
    /// accepts once the `[CLS]` slots are reserved.
    pub fn text_len(&self) -> usize {
        self.text.max_len - self.text.n_cls
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let i = &self.image;
        let t = &self.text;
        if i.patch_size == 0 || i.resolution == 0 || !i.resolution.is_multiple_of(i.patch_size) {
            return bad(format!(
                "image.resolution {} must be a positive multiple of image.patch_size {}",
                i.resolution, i.patch_size
            ));
        }
        for (name, d, h) in [
            ("image", i.d_model, i.n_heads),
            ("text", t.d_model, t.n_heads),
        ] {
            if h == 0 || d == 0 || d % h != 0 {
                return bad(format!(
                    "{name}.d_model {d} must be divisible by {name}.n_heads {h}"
                ));
            }
        }
        if i.channels == 0 || i.layers == 0 || i.mlp_dim == 0 || t.mlp_dim == 0 {
            return bad("channels, layers and mlp dims must be positive".into());
        }
        if t.n_uni == 0 || t.n_multi == 0 {
            return bad(format!(
                "text.n_uni {} and text.n_multi {} must be >= 1",
                t.n_uni, t.n_multi
            ));
        }
        if t.vocab_size < 5 {
            return bad(format!(
                "text.vocab_size {} leaves no room beyond reserved ids",
                t.vocab_size
            ));
        }
        if t.n_cls == 0 || t.max_len < t.n_cls + 2 {
            return bad(format!(
                "text.max_len {} must hold BOS, EOS and {} [CLS] slots",
                t.max_len, t.n_cls
            ));
        }
        if self.pooler.n_query_con == 0 {
            return bad("pooler.n_query_con must be >= 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed.dim must be positive".into());
        }
        if !(self.loss.temperature_init > 0.0) {
            return bad(format!(
                "loss.temperature_init {} must be > 0",
                self.loss.temperature_init
            ));
        }
        if self.loss.lambda_con < 0.0 || self.loss.lambda_cap < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.loss.lambda_con == 0.0 && self.loss.lambda_cap == 0.0 {
            return bad("loss.lambda_con and loss.lambda_cap cannot both be zero".into());
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "train.batch_size {} must be even and positive",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "train.warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn image(
    resolution: usize,
    patch_size: usize,
    layers: usize,
    d_model: usize,
    n_heads: usize,
    mlp_dim: usize,
) -> ImageConfig {
    ImageConfig {
        resolution,
        patch_size,
        channels: 3,
        layers,
        d_model,
        n_heads,
        mlp_dim,
    }
}

fn text(
    vocab_size: usize,
    max_len: usize,
    n_uni: usize,
    n_multi: usize,
    d_model: usize,
    n_heads: usize,
    mlp_dim: usize,
) -> TextConfig {
    TextConfig {
        vocab_size,
        max_len,
        n_uni,
        n_multi,
        d_model,
        n_heads,
        mlp_dim,
        n_cls: 1,
        cls_aggregate: ClsAggregate::Cls,
    }
}

const DEFAULT_POOLER: PoolerConfig = PoolerConfig {
    n_query_gen: 256,
    n_query_con: 1,
    variant: PoolerVariant::Cascade,
};

const DEFAULT_LOSS: LossConfig = LossConfig {
    lambda_con: 1.0,
    lambda_cap: 2.0,
    temperature_init: 0.07,
};

fn web_scale_train() -> TrainConfig {
    TrainConfig {
        steps: 500_000,
        batch_size: 65_536,
        peak_lr: 8e-4,
        warmup_fraction: 0.02,
        weight_decay: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        checkpoint_every: 10_000,
        seed: 0,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, train) = match name {
            "coca-tiny" => (
                CoCaConfig {
                    image: image(16, 4, 2, 64, 4, 256),
                    text: text(128, 16, 1, 1, 64, 4, 256),
                    pooler: PoolerConfig {
                        n_query_gen: 8,
                        ..DEFAULT_POOLER
                    },
                    loss: DEFAULT_LOSS,
                    embed_dim: 64,
                    // Wider than the large presets' 0.02: at this width it
                    // trains faster and more reliably across seeds.
                    init_std: 0.05,
                },
                TrainConfig {
                    steps: 2000,
                    batch_size: 32,
                    peak_lr: 3e-4,
                    checkpoint_every: 500,
                    ..web_scale_train()
                },
            ),
            "coca-base" => (
                CoCaConfig {
                    image: image(288, 18, 12, 768, 12, 3072),
                    text: text(64_000, 64, 12, 12, 768, 12, 3072),
                    pooler: DEFAULT_POOLER,
                    loss: DEFAULT_LOSS,
                    embed_dim: 768,
                    init_std: 0.02,
                },
                web_scale_train(),
            ),
            "coca-large" => (
                CoCaConfig {
                    image: image(288, 18, 24, 1024, 16, 4096),
                    text: text(64_000, 64, 12, 12, 1024, 16, 4096),
                    pooler: DEFAULT_POOLER,
                    loss: DEFAULT_LOSS,
                    embed_dim: 1024,
                    init_std: 0.02,
                },
                web_scale_train(),
            ),
            "coca" => (
                CoCaConfig {
                    image: image(288, 18, 40, 1408, 16, 6144),
                    text: text(64_000, 64, 18, 18, 1408, 16, 5632),
                    pooler: DEFAULT_POOLER,
                    loss: DEFAULT_LOSS,
                    embed_dim: 1408,
                    init_std: 0.02,
                },
                web_scale_train(),
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            preset: name.to_string(),
            model,
            train,
        })
    }

    /// Parses a config file body on top of its `preset` line (or
    /// `default_preset` when there is none).
    pub fn parse(body: &str, default_preset: &str) -> Result<Self> {
        let pairs = parse_pairs(body)?;
        let preset = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or(default_preset);
        let mut cfg = Self::preset(preset)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, default_preset: &str) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&body, default_preset)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Overrides one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image.resolution" => m.image.resolution = num(key, value)?,
            "image.patch_size" => m.image.patch_size = num(key, value)?,
            "image.channels" => m.image.channels = num(key, value)?,
            "image.layers" => m.image.layers = num(key, value)?,
            "image.d_model" => m.image.d_model = num(key, value)?,
            "image.n_heads" => m.image.n_heads = num(key, value)?,
            "image.mlp_dim" => m.image.mlp_dim = num(key, value)?,
            "text.vocab_size" => m.text.vocab_size = num(key, value)?,
            "text.max_len" => m.text.max_len = num(key, value)?,
            "text.n_uni" => m.text.n_uni = num(key, value)?,
            "text.n_multi" => m.text.n_multi = num(key, value)?,
            "text.d_model" => m.text.d_model = num(key, value)?,
            "text.n_heads" => m.text.n_heads = num(key, value)?,
            "text.mlp_dim" => m.text.mlp_dim = num(key, value)?,
            "text.n_cls" => m.text.n_cls = num(key, value)?,
            "text.cls_aggregate" => {
                m.text.cls_aggregate = match value {
                    "cls" => ClsAggregate::Cls,
                    "cls+text" => ClsAggregate::ClsAndText,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected cls or cls+text, got {value:?}"
                        )))
                    }
                }
            }
            "pooler.n_query_gen" => m.pooler.n_query_gen = num(key, value)?,
            "pooler.n_query_con" => m.pooler.n_query_con = num(key, value)?,
            "pooler.variant" => {
                m.pooler.variant = match value {
                    "parallel" => PoolerVariant::Parallel,
                    "cascade" => PoolerVariant::Cascade,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected parallel or cascade, got {value:?}"
                        )))
                    }
                }
            }
            "embed.dim" => m.embed_dim = num(key, value)?,
            "init.std" => m.init_std = num(key, value)?,
            "loss.lambda_con" => m.loss.lambda_con = num(key, value)?,
            "loss.lambda_cap" => m.loss.lambda_cap = num(key, value)?,
            "loss.temperature_init" => m.loss.temperature_init = num(key, value)?,
            "train.steps" => t.steps = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.peak_lr" => t.peak_lr = num(key, value)?,
            "train.warmup_fraction" => t.warmup_fraction = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.eps" => t.eps = num(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "preset" => {
                return Err(Error::Config(
                    "preset can only be chosen once, before other keys".into(),
                ))
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key in canonical order with its resolved value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("preset", self.preset.clone()),
            ("image.resolution", m.image.resolution.to_string()),
            ("image.patch_size", m.image.patch_size.to_string()),
            ("image.channels", m.image.channels.to_string()),
            ("image.layers", m.image.layers.to_string()),
            ("image.d_model", m.image.d_model.to_string()),
            ("image.n_heads", m.image.n_heads.to_string()),
            ("image.mlp_dim", m.image.mlp_dim.to_string()),
            ("text.vocab_size", m.text.vocab_size.to_string()),
            ("text.max_len", m.text.max_len.to_string()),
            ("text.n_uni", m.text.n_uni.to_string()),
            ("text.n_multi", m.text.n_multi.to_string()),
            ("text.d_model", m.text.d_model.to_string()),
            ("text.n_heads", m.text.n_heads.to_string()),
            ("text.mlp_dim", m.text.mlp_dim.to_string()),
            ("text.n_cls", m.text.n_cls.to_string()),
            (
                "text.cls_aggregate",
                match m.text.cls_aggregate {
                    ClsAggregate::Cls => "cls",
                    ClsAggregate::ClsAndText => "cls+text",
                }
                .to_string(),
            ),
            ("pooler.n_query_gen", m.pooler.n_query_gen.to_string()),
            ("pooler.n_query_con", m.pooler.n_query_con.to_string()),
            (
                "pooler.variant",
                match m.pooler.variant {
                    PoolerVariant::Parallel => "parallel",
                    PoolerVariant::Cascade => "cascade",
                }
                .to_string(),
            ),
            ("embed.dim", m.embed_dim.to_string()),
            ("init.std", m.init_std.to_string()),
            ("loss.lambda_con", m.loss.lambda_con.to_string()),
            ("loss.lambda_cap", m.loss.lambda_cap.to_string()),
            ("loss.temperature_init", m.loss.temperature_init.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.peak_lr", t.peak_lr.to_string()),
            ("train.warmup_fraction", t.warmup_fraction.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.seed", t.seed.to_string()),
        ]
    }

    /// Canonical `key = value` dump; `parse` of this reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical dump.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Splits a config body into `(key, value)` pairs.
pub fn parse_pairs(body: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in body.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                lineno + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("coca-huge").is_err());
    }

    #[test]
    fn tiny_defaults() {
        let c = RunConfig::preset("coca-tiny").unwrap();
        assert_eq!(c.model.loss.lambda_cap, 2.0);
        assert_eq!(c.model.loss.lambda_con, 1.0);
        assert_eq!(c.model.loss.temperature_init, 0.07);
        assert_eq!(c.model.pooler.variant, PoolerVariant::Cascade);
        assert_eq!((c.model.text.n_uni, c.model.text.n_multi), (1, 1));
        assert_eq!(c.model.pooler.n_query_gen, 8);
        assert!(c.model.text.vocab_size <= 256);
        assert_eq!(
            (c.train.steps, c.train.batch_size, c.train.peak_lr),
            (2000, 32, 3e-4)
        );
    }

    #[test]
    fn base_preset_matches_table_shape() {
        let c = RunConfig::preset("coca-base").unwrap().model;
        assert_eq!(c.patch_count(), 256);
        assert_eq!(
            (
                c.image.layers,
                c.image.mlp_dim,
                c.image.d_model,
                c.image.n_heads
            ),
            (12, 3072, 768, 12)
        );
        assert_eq!(
            (c.text.n_uni, c.text.n_multi, c.text.mlp_dim),
            (12, 12, 3072)
        );
    }

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::preset("coca-tiny").unwrap();
        c.set("text.cls_aggregate", "cls+text").unwrap();
        c.set("pooler.variant", "parallel").unwrap();
        c.set("loss.temperature_init", "0.123456789").unwrap();
        let back = RunConfig::parse(&c.to_kv_string(), "coca-base").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn file_overrides_preset() {
        let c = RunConfig::parse(
            "preset = coca-tiny\n# comment\ntext.n_uni = 3  # trailing\n",
            "coca-base",
        )
        .unwrap();
        assert_eq!(c.preset, "coca-tiny");
        assert_eq!(c.model.text.n_uni, 3);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(RunConfig::parse("text.n_unii = 3", "coca-tiny").is_err());
        assert!(RunConfig::parse("text.n_uni 3", "coca-tiny").is_err());
        assert!(RunConfig::parse("text.n_uni = three", "coca-tiny").is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut c = RunConfig::preset("coca-tiny").unwrap();
        c.set("image.resolution", "17").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset("coca-tiny").unwrap();
        c.set("text.n_multi", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset("coca-tiny").unwrap();
        c.set("loss.temperature_init", "0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::preset("coca-tiny").unwrap();
        c.set("train.batch_size", "7").unwrap();
        assert!(c.validate().is_err());
    }
}
