//! Ablation sweeps: train each variant of one axis identically and tabulate
//! held-out zero-shot accuracy and retrieval.

use std::str::FromStr;
use std::time::Instant;

use coca_numerics::ParamStore;

use crate::config::{ClsAggregate, PoolerVariant, RunConfig};
use crate::data::{class_ids, DataDir, TokenSequence, TEMPLATES};
use crate::error::{Error, Result};
use crate::eval::{retrieve, standard_ks, zero_shot_classify, Recall};
use crate::model::CoCa;
use crate::report::{AblationRow, AblationTable};
use crate::train::{build_model, TrainOptions, TrainState, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    LossRatio,
    NUniSplit,
    PoolerVariant,
    NQuery,
    ClsDesign,
}

pub const AXES: [Axis; 5] = [
    Axis::LossRatio,
    Axis::NUniSplit,
    Axis::PoolerVariant,
    Axis::NQuery,
    Axis::ClsDesign,
];

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::LossRatio => "loss_ratio",
            Axis::NUniSplit => "n_uni_split",
            Axis::PoolerVariant => "pooler_variant",
            Axis::NQuery => "n_query",
            Axis::ClsDesign => "cls_design",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AXES.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = AXES.iter().map(|a| a.name()).collect();
            Error::Config(format!(
                "unknown ablation axis {s:?} (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// Smallest decoder depth the unimodal split sweep runs at, so that three
/// distinct splits exist.
const MIN_SPLIT_DEPTH: usize = 4;

/// The labeled configurations of an axis, derived from `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>> {
    let mut out = Vec::new();
    let mut push = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        out.push((label, c));
    };
    match axis {
        Axis::LossRatio => {
            for (con, cap) in [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)] {
                push(format!("{con}:{cap}"), &|c| {
                    c.model.loss.lambda_con = con;
                    c.model.loss.lambda_cap = cap;
                });
            }
        }
        Axis::NUniSplit => {
            let total = (base.model.text.n_uni + base.model.text.n_multi).max(MIN_SPLIT_DEPTH);
            let mut splits: Vec<usize> = [0.25, 0.5, 0.75]
                .iter()
                .map(|f| ((total as f64 * f).round() as usize).clamp(1, total - 1))
                .collect();
            splits.dedup();
            for n_uni in splits {
                push(format!("{n_uni}/{total}"), &|c| {
                    c.model.text.n_uni = n_uni;
                    c.model.text.n_multi = total - n_uni;
                });
            }
        }
        Axis::PoolerVariant => {
            for (label, v) in [
                ("parallel", PoolerVariant::Parallel),
                ("cascade", PoolerVariant::Cascade),
            ] {
                push(label.to_string(), &|c| c.model.pooler.variant = v);
            }
        }
        Axis::NQuery => {
            let mut grid = vec![0, 1, 32, base.model.pooler.n_query_gen];
            grid.sort_unstable();
            grid.dedup();
            for n in grid {
                push(n.to_string(), &|c| c.model.pooler.n_query_gen = n);
            }
        }
        Axis::ClsDesign => {
            for (n_cls, agg) in [
                (1, ClsAggregate::Cls),
                (1, ClsAggregate::ClsAndText),
                (8, ClsAggregate::Cls),
                (8, ClsAggregate::ClsAndText),
            ] {
                let label = match agg {
                    ClsAggregate::Cls => format!("{n_cls}cls"),
                    ClsAggregate::ClsAndText => format!("{n_cls}cls+text"),
                };
                push(label, &|c| {
                    // Keep the caption width fixed while adding [CLS] slots.
                    c.model.text.max_len = base.model.text.max_len - base.model.text.n_cls + n_cls;
                    c.model.text.n_cls = n_cls;
                    c.model.text.cls_aggregate = agg;
                });
            }
        }
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldOut {
    pub zero_shot_accuracy: f64,
    pub recall: Vec<Recall>,
}

/// Zero-shot accuracy on the annotated held-out images and class-level
/// retrieval between held-out alt-text images and captions.
pub fn evaluate_held_out(model: &CoCa, store: &ParamStore<f32>, dir: &DataDir) -> Result<HeldOut> {
    let data = &dir.data;
    if data.test.is_empty() {
        return Err(Error::Eval("dataset has no held-out split".into()));
    }
    let labels_all = class_ids(&data.annotated, &data.classes)?;
    let labels: Vec<usize> = data.test.iter().map(|&i| labels_all[i]).collect();
    let names: Vec<String> = data.classes.iter().map(|c| c.name.clone()).collect();
    let zs = zero_shot_classify(
        model,
        store,
        &dir.vocab,
        &data.annotated.images(&data.test)?,
        &labels,
        &names,
        &TEMPLATES,
    )?;

    let alt_labels = class_ids(&data.alt_text, &data.classes)?;
    let groups: Vec<usize> = data.test.iter().map(|&i| alt_labels[i]).collect();
    let tokens: Vec<TokenSequence> = data
        .test
        .iter()
        .map(|&i| {
            dir.vocab
                .tokenize(&data.alt_text.captions[i], model.cfg.text_len())
        })
        .collect();
    let recall = retrieve(
        model,
        store,
        &data.alt_text.images(&data.test)?,
        &tokens,
        &standard_ks(data.test.len()),
        Some(&groups),
    )?;
    Ok(HeldOut {
        zero_shot_accuracy: zs.accuracy,
        recall,
    })
}

pub const COLUMNS: [&str; 4] = ["zeroshot_acc", "i2t_r1", "t2i_r1", "final_loss"];

/// Trains every variant of `axis` from scratch with the base seed and
/// tabulates the held-out metrics. `on_row` sees each finished row and its
/// wall-clock seconds.
pub fn ablation_run(
    base: &RunConfig,
    axis: Axis,
    dir: &DataDir,
    mut on_row: impl FnMut(&AblationRow, f64),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, cfg) in variants(base, axis)? {
        let started = Instant::now();
        let (model, store) = build_model(&cfg)?;
        let mut state = TrainState::init(store, &cfg.train);
        let trainer = Trainer::new(&model, &cfg, &dir.data, &dir.vocab)?;
        let curve = trainer.run(&mut state, &TrainOptions::default(), |_| {})?;
        let held = evaluate_held_out(&model, &state.store, dir)?;
        let r1 = &held.recall[0];
        let row = AblationRow {
            variant: label,
            config_hash: cfg.hash(),
            seed: cfg.train.seed,
            metrics: vec![
                held.zero_shot_accuracy,
                r1.image_to_text,
                r1.text_to_image,
                curve.last().map_or(f64::NAN, |r| r.total as f64),
            ],
        };
        on_row(&row, started.elapsed().as_secs_f64());
        rows.push(row);
    }
    Ok(AblationTable {
        axis: axis.name().to_string(),
        columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::preset("coca-tiny").unwrap()
    }

    #[test]
    fn loss_ratio_grid() {
        let v = variants(&tiny(), Axis::LossRatio).unwrap();
        let labels: Vec<&str> = v.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["1:1", "1:2", "2:1"]);
        assert_eq!(v[1].1.model.loss.lambda_cap, 2.0);
    }

    #[test]
    fn split_grid_scales_to_depth() {
        let v = variants(&tiny(), Axis::NUniSplit).unwrap();
        let splits: Vec<(usize, usize)> = v
            .iter()
            .map(|(_, c)| (c.model.text.n_uni, c.model.text.n_multi))
            .collect();
        assert_eq!(splits, [(1, 3), (2, 2), (3, 1)]);
        let mut base = tiny();
        base.model.text.n_uni = 6;
        base.model.text.n_multi = 6;
        let v = variants(&base, Axis::NUniSplit).unwrap();
        let n: Vec<usize> = v.iter().map(|(_, c)| c.model.text.n_uni).collect();
        assert_eq!(n, [3, 6, 9]);
    }

    #[test]
    fn other_grids() {
        assert_eq!(variants(&tiny(), Axis::PoolerVariant).unwrap().len(), 2);
        let q: Vec<usize> = variants(&tiny(), Axis::NQuery)
            .unwrap()
            .iter()
            .map(|(_, c)| c.model.pooler.n_query_gen)
            .collect();
        assert_eq!(q, [0, 1, 8, 32]);
        let cls = variants(&tiny(), Axis::ClsDesign).unwrap();
        assert!(cls
            .iter()
            .all(|(_, c)| c.model.text_len() == tiny().model.text_len()));
        assert!("depth".parse::<Axis>().is_err());
    }
}
