//! End-to-end finite-difference check of the joint loss on a micro model.

use coca_numerics::{
    finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Rng, Tensor,
};

use crate::config::{
    ClsAggregate, CoCaConfig, ImageConfig, LossConfig, PoolerConfig, PoolerVariant, TextConfig,
};
use crate::data::{TokenSequence, BOS, EOS, PAD};
use crate::error::Result;
use crate::model::{caption_targets, param_group, CoCa};
use crate::objectives::{coca_loss, LossWeights};

/// d = 8, one encoder layer and a 1+1 decoder over 4 patches.
pub fn micro_config() -> CoCaConfig {
    CoCaConfig {
        image: ImageConfig {
            resolution: 4,
            patch_size: 2,
            channels: 3,
            layers: 1,
            d_model: 8,
            n_heads: 2,
            mlp_dim: 16,
        },
        text: TextConfig {
            vocab_size: 12,
            max_len: 6,
            n_uni: 1,
            n_multi: 1,
            d_model: 8,
            n_heads: 2,
            mlp_dim: 16,
            n_cls: 1,
            cls_aggregate: ClsAggregate::Cls,
        },
        pooler: PoolerConfig {
            n_query_gen: 2,
            n_query_con: 1,
            variant: PoolerVariant::Cascade,
        },
        loss: LossConfig {
            lambda_con: 1.0,
            lambda_cap: 2.0,
            temperature_init: 0.07,
        },
        embed_dim: 8,
        init_std: 0.5,
    }
}

/// Groups a parameter name for reporting; the temperature is its own group.
pub fn report_group(name: &str) -> String {
    if name.ends_with("log_temperature") {
        "log_temperature".into()
    } else {
        param_group(name).to_string()
    }
}

/// Checks every parameter of a seeded micro model on a three-example batch.
pub fn run_gradcheck(
    cfg: &CoCaConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new(seed);
    let model = CoCa::new(cfg, &mut store)?;
    let mut rng = Rng::derived(seed, 1);
    let batch = 3;
    let r = cfg.image.resolution;
    let images = Tensor::new(
        vec![batch, r, r, cfg.image.channels],
        (0..batch * r * r * cfg.image.channels)
            .map(|_| rng.uniform() as f32)
            .collect(),
    )?;
    let width = cfg.text_len();
    let tokens: Vec<TokenSequence> = (0..batch)
        .map(|b| {
            // Lengths 2..=width so padding and full rows are both covered.
            let len = 2 + (b * (width - 2)) / (batch - 1).max(1);
            let mut ids = vec![BOS];
            ids.extend((0..len - 2).map(|_| 4 + rng.below(cfg.text.vocab_size - 4)));
            ids.push(EOS);
            ids.resize(width, PAD);
            TokenSequence { ids, len }
        })
        .collect();
    let targets = caption_targets(&tokens);
    let weights = LossWeights::new(cfg.loss.lambda_con, cfg.loss.lambda_cap)?;

    let mut failure = None;
    let report = finite_diff_check(
        &mut store,
        |g: &mut Graph<f64>| {
            let run = |g: &mut Graph<f64>| -> Result<coca_numerics::Var> {
                let out = model.forward(g, &images, &tokens)?;
                let parts = coca_loss(
                    g,
                    out.image_embed,
                    out.text_embed,
                    model.log_temperature,
                    out.caption_logits,
                    &targets,
                    weights,
                )?;
                Ok(parts.total)
            };
            run(g).map_err(|e| {
                let msg = e.to_string();
                failure.get_or_insert(e);
                coca_numerics::Error::Invalid {
                    op: "coca_loss",
                    detail: msg,
                }
            })
        },
        opts,
    );
    match (report, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}
