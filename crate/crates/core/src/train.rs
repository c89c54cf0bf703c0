//! AdamW, the warmup/decay schedule and the pretraining loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use coca_numerics::{Graph, ParamId, ParamStore, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{BatchPlan, SyntheticData, TokenSequence, Vocab};
use crate::error::{io_err, Error, Result};
use crate::model::{caption_targets, CoCa};
use crate::objectives::{coca_loss, LossWeights};

/// Full-moment Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Which parameters an update touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateCensus {
    pub updated: Vec<ParamId>,
}

impl AdamW {
    pub fn new(
        store: &ParamStore<f32>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros = |id: ParamId| vec![0.0f32; store.get(id).numel()];
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    pub fn from_config(store: &ParamStore<f32>, t: &TrainConfig) -> Self {
        Self::new(store, t.beta1, t.beta2, t.eps, t.weight_decay)
    }

    /// One update of every trainable parameter; parameters without a
    /// gradient are treated as having a zero gradient. A gradient for a
    /// frozen parameter, or any non-finite gradient, aborts before anything
    /// is modified.
    pub fn update(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(ParamId, Tensor<f32>)],
        lr: f64,
    ) -> Result<UpdateCensus> {
        let mut by_id: Vec<Option<&Tensor<f32>>> = vec![None; store.len()];
        for (id, g) in grads {
            let p = store.get(*id);
            if !p.trainable() {
                if g.data().iter().any(|&x| x != 0.0) {
                    return Err(Error::Frozen(p.name().to_string()));
                }
                continue;
            }
            if g.shape() != p.shape() {
                return Err(Error::Model(format!(
                    "gradient {:?} for {} {:?}",
                    g.shape(),
                    p.name(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", p.name()),
                    step: self.step,
                });
            }
            by_id[id.index()] = Some(g);
        }

        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let mut census = UpdateCensus::default();
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| store.get(id).trainable())
            .collect();
        for id in ids {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let data = store.get_mut(id).data_mut();
            let grad = by_id[id.index()].map(Tensor::data);
            for i in 0..data.len() {
                let g = grad.map_or(0.0, |g| g[i] as f64);
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let adaptive = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] = data[i] * decay - (lr * adaptive) as f32;
            }
            census.updated.push(id);
        }
        self.step += 1;
        Ok(census)
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, store: &ParamStore<f32>) {
        for (id, p) in store.iter() {
            let shape = p.shape().to_vec();
            ckpt.push(
                format!("adam.m/{}", p.name()),
                Tensor::new(shape.clone(), self.m[id.index()].clone()).unwrap(),
            );
            ckpt.push(
                format!("adam.v/{}", p.name()),
                Tensor::new(shape, self.v[id.index()].clone()).unwrap(),
            );
        }
        ckpt.push("adam.step", Tensor::scalar(self.step as f32));
    }

    pub fn restore_from(&mut self, ckpt: &Checkpoint, store: &ParamStore<f32>) -> Result<()> {
        for (id, p) in store.iter() {
            for (prefix, slot) in [("adam.m/", &mut self.m), ("adam.v/", &mut self.v)] {
                let t = ckpt.require(&format!("{prefix}{}", p.name()))?;
                if t.shape() != p.shape() {
                    return Err(Error::Format(format!(
                        "{prefix}{}: shape {:?}",
                        p.name(),
                        t.shape()
                    )));
                }
                slot[id.index()] = t.data().to_vec();
            }
        }
        self.step = ckpt.require("adam.step")?.item() as usize;
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    pub fn from_config(t: &TrainConfig) -> Self {
        Self::new(t.peak_lr, t.warmup_fraction, t.steps)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let (w, n) = (self.warmup_steps, self.total_steps);
        if step > n {
            return Err(Error::Config(format!(
                "step {step} beyond schedule end {n}"
            )));
        }
        Ok(if step < w {
            self.peak_lr * step as f64 / w as f64
        } else if n == w {
            self.peak_lr
        } else {
            self.peak_lr * (n - step) as f64 / (n - w) as f64
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    /// 0-based update index; losses are measured before the update.
    pub step: usize,
    pub total: f32,
    pub con: f32,
    pub cap: f32,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "step,total,con,cap,lr";

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.total, r.con, r.cap, r.lr);
    }
    s
}

pub fn parse_curves(body: &str) -> Result<Vec<CurveRow>> {
    let mut lines = body.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::Format("curves: missing header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("curves: bad row {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(CurveRow {
                step: f[0].parse().map_err(|_| bad())?,
                total: f[1].parse().map_err(|_| bad())?,
                con: f[2].parse().map_err(|_| bad())?,
                cap: f[3].parse().map_err(|_| bad())?,
                lr: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Parameters, optimizer moments and step counter of a run.
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub opt: AdamW,
}

impl TrainState {
    pub fn init(model_store: ParamStore<f32>, t: &TrainConfig) -> Self {
        let opt = AdamW::from_config(&model_store, t);
        Self {
            store: model_store,
            opt,
        }
    }

    pub fn step(&self) -> usize {
        self.opt.step
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.add_store("param/", &self.store);
        self.opt.save_into(&mut c, &self.store);
        c
    }

    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        c.restore_store("param/", &mut self.store)?;
        self.opt.restore_from(c, &self.store)
    }
}

/// Builds a model and a freshly initialized store for a configuration.
pub fn build_model(cfg: &RunConfig) -> Result<(CoCa, ParamStore<f32>)> {
    let mut store = ParamStore::new(cfg.train.seed);
    let model = CoCa::new(&cfg.model, &mut store)?;
    Ok((model, store))
}

/// Checks that a dataset fits a model configuration.
pub fn check_data(cfg: &RunConfig, data: &SyntheticData, vocab: &Vocab) -> Result<()> {
    let m = &cfg.model;
    let ds = &data.annotated;
    if ds.height != m.image.resolution
        || ds.width != m.image.resolution
        || ds.channels != m.image.channels
    {
        return Err(Error::Config(format!(
            "data images are {}x{}x{}, model expects {r}x{r}x{}",
            ds.height,
            ds.width,
            ds.channels,
            m.image.channels,
            r = m.image.resolution
        )));
    }
    if vocab.len() > m.text.vocab_size {
        return Err(Error::Config(format!(
            "data vocabulary has {} tokens, text.vocab_size is {}",
            vocab.len(),
            m.text.vocab_size
        )));
    }
    Ok(())
}

/// Where and how often a run persists itself.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed updates (simulated interruption).
    pub stop_after: Option<usize>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub struct Trainer<'a> {
    pub model: &'a CoCa,
    pub cfg: &'a RunConfig,
    pub data: &'a SyntheticData,
    pub vocab: &'a Vocab,
    plan: BatchPlan,
    schedule: Schedule,
    weights: LossWeights,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a CoCa,
        cfg: &'a RunConfig,
        data: &'a SyntheticData,
        vocab: &'a Vocab,
    ) -> Result<Self> {
        cfg.validate()?;
        check_data(cfg, data, vocab)?;
        let plan = BatchPlan::new(data.train.clone(), cfg.train.batch_size, cfg.train.seed)?;
        let weights = LossWeights::new(cfg.model.loss.lambda_con, cfg.model.loss.lambda_cap)?;
        Ok(Self {
            model,
            cfg,
            data,
            vocab,
            plan,
            schedule: Schedule::from_config(&cfg.train),
            weights,
        })
    }

    /// Forward, backward and update on the batch of `state.step()`.
    pub fn step(&self, state: &mut TrainState) -> Result<CurveRow> {
        let step = state.step();
        let batch = self.plan.batch(
            step,
            &self.data.annotated,
            &self.data.alt_text,
            self.vocab,
            self.cfg.model.text_len(),
        )?;
        let targets = caption_targets(&batch.tokens);
        let mut g = Graph::new(&state.store);
        let out = self.model.forward(&mut g, &batch.images, &batch.tokens)?;
        let parts = coca_loss(
            &mut g,
            out.image_embed,
            out.text_embed,
            self.model.log_temperature,
            out.caption_logits,
            &targets,
            self.weights,
        )?;
        let (total, con, cap) = (
            g.value(parts.total).item(),
            g.value(parts.con).item(),
            g.value(parts.cap).item(),
        );
        if !total.is_finite() || g.check_finite().is_err() {
            return Err(Error::NonFinite {
                what: format!("loss (total {total}, con {con}, cap {cap})"),
                step,
            });
        }
        g.backward(parts.total)?;
        let grads = g.param_grads();
        drop(g);
        let lr = self.schedule.lr_at(step + 1)?;
        state.opt.update(&mut state.store, &grads, lr)?;
        Ok(CurveRow {
            step,
            total,
            con,
            cap,
            lr,
        })
    }

    /// Runs from `state.step()` to the configured total (or the stop
    /// point), checkpointing periodically. On a non-finite loss or update
    /// the last finite state is written to `last_good.ckpt` and the error
    /// is returned.
    pub fn run(
        &self,
        state: &mut TrainState,
        opts: &TrainOptions,
        mut on_step: impl FnMut(&CurveRow),
    ) -> Result<Vec<CurveRow>> {
        let end = opts
            .stop_after
            .map_or(self.cfg.train.steps, |s| s.min(self.cfg.train.steps));
        let mut rows = Vec::new();
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(CONFIG_FILE);
            fs::write(&path, self.cfg.to_kv_string()).map_err(io_err(&path))?;
        }
        while state.step() < end {
            let snapshot = (state.store.clone(), state.opt.clone());
            let result = self.step(state).and_then(|row| {
                if state
                    .store
                    .iter()
                    .any(|(_, p)| p.data().iter().any(|x| !x.is_finite()))
                {
                    Err(Error::NonFinite {
                        what: "parameters after update".into(),
                        step: row.step,
                    })
                } else {
                    Ok(row)
                }
            });
            match result {
                Ok(row) => {
                    on_step(&row);
                    rows.push(row);
                }
                Err(e @ Error::NonFinite { .. }) => {
                    state.store = snapshot.0;
                    state.opt = snapshot.1;
                    if let Some(dir) = &opts.out_dir {
                        state.to_checkpoint().save(&dir.join(LAST_GOOD_FILE))?;
                        write_curves(&dir.join(CURVES_FILE), &rows)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            let every = self.cfg.train.checkpoint_every;
            if let Some(dir) = &opts.out_dir {
                if every > 0 && state.step().is_multiple_of(every) && state.step() < end {
                    state.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            state.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            write_curves(&dir.join(CURVES_FILE), &rows)?;
        }
        Ok(rows)
    }
}

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    fs::write(path, curves_csv(rows)).map_err(io_err(path))
}

/// Full-batch training on one fixed set of pairs at a constant learning
/// rate, as in an overfitting run. Returns the total loss of every step.
pub fn fit_pairs(
    model: &CoCa,
    state: &mut TrainState,
    images: &Tensor<f32>,
    tokens: &[TokenSequence],
    weights: LossWeights,
    steps: usize,
    lr: f64,
) -> Result<Vec<f32>> {
    let targets = caption_targets(tokens);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new(&state.store);
        let out = model.forward(&mut g, images, tokens)?;
        let parts = coca_loss(
            &mut g,
            out.image_embed,
            out.text_embed,
            model.log_temperature,
            out.caption_logits,
            &targets,
            weights,
        )?;
        let total = g.value(parts.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: state.step(),
            });
        }
        g.backward(parts.total)?;
        let grads = g.param_grads();
        drop(g);
        state.opt.update(&mut state.store, &grads, lr)?;
        losses.push(total);
    }
    Ok(losses)
}

/// Loads a run directory's config and checkpoint into a fresh model.
pub fn load_run(
    ckpt_path: &Path,
    config_path: Option<&Path>,
) -> Result<(RunConfig, CoCa, TrainState)> {
    let cfg_path = match config_path {
        Some(p) => p.to_path_buf(),
        None => ckpt_path
            .parent()
            .map(|d| d.join(CONFIG_FILE))
            .ok_or_else(|| Error::Config("cannot locate config next to checkpoint".into()))?,
    };
    let cfg = RunConfig::load(&cfg_path, "coca-tiny")?;
    cfg.validate()?;
    let (model, store) = build_model(&cfg)?;
    let mut state = TrainState::init(store, &cfg.train);
    state.restore(&Checkpoint::load(ckpt_path)?)?;
    Ok((cfg, model, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_knee_and_end() {
        let s = Schedule::new(8e-4, 0.02, 500_000);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(10_000).unwrap() - 8e-4).abs() < 1e-18);
        assert!((s.lr_at(5_000).unwrap() - 4e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(500_000).unwrap(), 0.0);
        assert!(s.lr_at(500_001).is_err());
    }

    #[test]
    fn curves_round_trip() {
        let rows = vec![CurveRow {
            step: 3,
            total: 1.234_567_9,
            con: 0.1,
            cap: f32::MIN_POSITIVE,
            lr: 3e-4,
        }];
        assert_eq!(parse_curves(&curves_csv(&rows)).unwrap(), rows);
    }
}
