//! The downstream protocols behind `coca eval`, each returning named metrics.

use anyhow::{bail, Result};
use coca_core::data::{class_ids, DataDir, TokenSequence, TEMPLATES};
use coca_core::eval::{
    accuracy, caption_greedy, caption_matching_pairs, exact_match, frozen_feature_eval,
    prompt_class_embeddings, retrieve, standard_ks, video_embed, zero_shot_classify,
    zero_shot_predict, HeadTraining, MultimodalHead,
};
use coca_core::{CoCa, Error};
use coca_numerics::{ParamStore, Rng, Tensor};

use crate::{EvalArgs, Relevance, Task};

type Metrics = Vec<(String, f64)>;

pub fn run(a: &EvalArgs, model: &CoCa, store: ParamStore<f32>, dir: &DataDir) -> Result<Metrics> {
    let mut test = dir.data.test.clone();
    if let Some(n) = a.limit {
        if n == 0 {
            bail!(Error::Config("--limit must be positive".into()));
        }
        test.truncate(n);
    }
    if test.is_empty() {
        bail!(Error::Eval("dataset has no held-out examples".into()));
    }
    let mut head = HeadTraining {
        seed: a.seed,
        ..HeadTraining::default()
    };
    if let Some(steps) = a.head_steps {
        head.steps = steps;
    }
    if let Some(lr) = a.head_lr {
        head.lr = lr;
    }
    match a.task {
        Task::Zeroshot => zeroshot(model, &store, dir, &test),
        Task::Retrieval => retrieval(model, &store, dir, &test, a.relevance),
        Task::Caption => caption(model, &store, dir, &test),
        Task::Frozen => frozen(model, &store, dir, &test, &head),
        Task::Video => video(model, &store, dir, &test, a.frames),
        Task::Multimodal => multimodal(model, store, dir, &test, &head),
    }
}

fn class_names(dir: &DataDir) -> Vec<String> {
    dir.data.classes.iter().map(|c| c.name.clone()).collect()
}

fn zeroshot(
    model: &CoCa,
    store: &ParamStore<f32>,
    dir: &DataDir,
    test: &[usize],
) -> Result<Metrics> {
    let data = &dir.data;
    let all = class_ids(&data.annotated, &data.classes)?;
    let labels: Vec<usize> = test.iter().map(|&i| all[i]).collect();
    let zs = zero_shot_classify(
        model,
        store,
        &dir.vocab,
        &data.annotated.images(test)?,
        &labels,
        &class_names(dir),
        &TEMPLATES,
    )?;
    Ok(vec![
        ("zeroshot_acc".into(), zs.accuracy),
        ("n".into(), test.len() as f64),
    ])
}

fn retrieval(
    model: &CoCa,
    store: &ParamStore<f32>,
    dir: &DataDir,
    test: &[usize],
    relevance: Relevance,
) -> Result<Metrics> {
    let data = &dir.data;
    let width = model.cfg.text_len();
    let tokens: Vec<TokenSequence> = test
        .iter()
        .map(|&i| dir.vocab.tokenize(&data.alt_text.captions[i], width))
        .collect();
    let all = class_ids(&data.alt_text, &data.classes)?;
    let groups: Vec<usize> = test.iter().map(|&i| all[i]).collect();
    let groups = (relevance == Relevance::Class).then_some(groups.as_slice());
    let recall = retrieve(
        model,
        store,
        &data.alt_text.images(test)?,
        &tokens,
        &standard_ks(test.len()),
        groups,
    )?;
    let mut out = Vec::new();
    for r in &recall {
        out.push((format!("i2t_r@{}", r.k), r.image_to_text));
        out.push((format!("t2i_r@{}", r.k), r.text_to_image));
    }
    out.push(("n".into(), test.len() as f64));
    Ok(out)
}

fn caption(
    model: &CoCa,
    store: &ParamStore<f32>,
    dir: &DataDir,
    test: &[usize],
) -> Result<Metrics> {
    let data = &dir.data;
    let width = model.cfg.text_len();
    let generated = caption_greedy(model, store, &data.annotated.images(test)?)?;
    let refs: Vec<TokenSequence> = test
        .iter()
        .map(|&i| dir.vocab.tokenize(&data.annotated.captions[i], width))
        .collect();
    let labels = class_ids(&data.annotated, &data.classes)?;
    // A caption names its class when any token, stripped of punctuation,
    // is the class word.
    let mentions = test
        .iter()
        .zip(&generated)
        .filter(|(&i, gen)| {
            let name = &data.classes[labels[i]].name;
            gen.iter().any(|&t| {
                dir.vocab
                    .token(t)
                    .is_some_and(|w| w.trim_matches(|c: char| !c.is_alphanumeric()) == name)
            })
        })
        .count();
    for (&i, gen) in test.iter().zip(&generated).take(4) {
        println!(
            "# caption {i}: {:?} (reference {:?})",
            dir.vocab.detokenize(gen),
            data.annotated.captions[i]
        );
    }
    Ok(vec![
        ("caption_exact_match".into(), exact_match(&generated, &refs)),
        (
            "caption_class_mention".into(),
            mentions as f64 / test.len() as f64,
        ),
        ("n".into(), test.len() as f64),
    ])
}

fn frozen(
    model: &CoCa,
    store: &ParamStore<f32>,
    dir: &DataDir,
    test: &[usize],
    opts: &HeadTraining,
) -> Result<Metrics> {
    let data = &dir.data;
    let labels = class_ids(&data.annotated, &data.classes)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let r = frozen_feature_eval(
        model,
        store,
        &data.annotated.images(&data.train)?,
        &pick(&data.train),
        &data.annotated.images(test)?,
        &pick(test),
        data.classes.len(),
        opts,
    )?;
    println!(
        "# encoder checksum before {} after {}",
        r.checksum_before, r.checksum_after
    );
    Ok(vec![
        ("frozen_acc".into(), r.accuracy),
        ("frozen_final_loss".into(), r.final_loss as f64),
        (
            "encoder_unchanged".into(),
            (r.checksum_before == r.checksum_after) as u8 as f64,
        ),
        ("n".into(), test.len() as f64),
    ])
}

/// One clip per class: its held-out images from both sources as frames.
fn video(
    model: &CoCa,
    store: &ParamStore<f32>,
    dir: &DataDir,
    test: &[usize],
    n_frames: usize,
) -> Result<Metrics> {
    let data = &dir.data;
    let labels = class_ids(&data.annotated, &data.classes)?;
    let ds = &data.annotated;
    let frame_shape = [ds.height, ds.width, ds.channels];
    let mut clips = Vec::new();
    let mut truth = Vec::new();
    for c in 0..data.classes.len() {
        let ids: Vec<usize> = test.iter().copied().filter(|&i| labels[i] == c).collect();
        if ids.is_empty() {
            continue;
        }
        let mut pixels = Vec::new();
        for &i in &ids {
            pixels.extend_from_slice(data.annotated.image(i));
        }
        for &i in &ids {
            pixels.extend_from_slice(data.alt_text.image(i));
        }
        let frames = Tensor::new(
            vec![
                2 * ids.len(),
                frame_shape[0],
                frame_shape[1],
                frame_shape[2],
            ],
            pixels,
        )?;
        clips.push(video_embed(model, store, &frames, n_frames)?);
        truth.push(c);
    }
    let classes = prompt_class_embeddings(model, store, &dir.vocab, &class_names(dir), &TEMPLATES)?;
    let pred = zero_shot_predict(&clips, &classes);
    Ok(vec![
        ("video_zeroshot_acc".into(), accuracy(&pred, &truth)),
        ("clips".into(), clips.len() as f64),
        ("frames".into(), n_frames as f64),
    ])
}

/// Fine-tunes a binary head on "does this caption belong to this image".
fn multimodal(
    model: &CoCa,
    mut store: ParamStore<f32>,
    dir: &DataDir,
    test: &[usize],
    opts: &HeadTraining,
) -> Result<Metrics> {
    let data = &dir.data;
    let width = model.cfg.text_len();
    let mut rng = Rng::derived(opts.seed, 1);
    let (train_images, train_tokens, train_y) =
        caption_matching_pairs(data, &dir.vocab, &data.train, width, &mut rng)?;
    let (test_images, test_tokens, test_y) =
        caption_matching_pairs(data, &dir.vocab, test, width, &mut rng)?;
    let head = MultimodalHead::new(model, &mut store, 2)?;
    let loss = head.train(
        model,
        &mut store,
        &train_images,
        &train_tokens,
        &train_y,
        false,
        opts,
    )?;
    let pred = head.predict(model, &store, &test_images, &test_tokens)?;
    Ok(vec![
        ("match_acc".into(), accuracy(&pred, &test_y)),
        ("match_final_loss".into(), loss as f64),
        ("n".into(), test.len() as f64),
    ])
}
