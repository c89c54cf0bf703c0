//! Acceptance suite: one PASS/FAIL line per criterion at the contract
//! tolerances. Runs without the libtest harness so the lines always print;
//! exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use coca_core::ablation::{evaluate_held_out, variants, Axis, AXES};
use coca_core::checkpoint::Checkpoint;
use coca_core::config::CoCaConfig;
use coca_core::data::{
    build_vocab, class_ids, generate_synthetic, DataDir, SyntheticSpec, TokenSequence, BOS, EOS,
    PAD,
};
use coca_core::eval::{
    caption_greedy, checksum, class_embeddings, exact_match, frozen_feature_eval, gather_images,
    image_embeddings, normalize, recall_at_k, standard_ks, video_embed, zero_shot_predict,
    HeadTraining,
};
use coca_core::model::{caption_targets, census, CoCa};
use coca_core::objectives::{captioning_loss, coca_loss, contrastive_loss, LossWeights};
use coca_core::report::AblationTable;
use coca_core::train::{build_model, fit_pairs, load_run, TrainOptions, TrainState, Trainer};
use coca_core::RunConfig;
use coca_numerics::{Graph, Init, ParamStore, Rng, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient integrity", gradient_integrity),
        ("loss identities", loss_identities),
        ("structural invariants", structural_invariants),
        ("toy learning", toy_learning),
        ("captioning overfit", captioning_overfit),
        ("frozen-feature contract", frozen_contract),
        ("protocol oracles", protocol_oracles),
        ("ablation harness", ablation_harness),
        ("persistence", persistence),
        ("config fidelity", config_fidelity),
    ];
    let mut passed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS  {:>2} {name:<24} {detail} [{secs:.1}s]", i + 1);
            }
            Err(detail) => println!("FAIL  {:>2} {name:<24} {detail} [{secs:.1}s]", i + 1),
        }
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed != criteria.len() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------
// 1

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_coca"))
        .args(["gradcheck", "--tol", "1e-3", "--step", "1e-4"])
        .output()
        .map_err(e)?;
    let secs = started.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    check(
        out.status.success(),
        format!("gradcheck exited {:?}:\n{stdout}", out.status.code()),
    )?;
    let groups: Vec<&str> = stdout
        .lines()
        .filter(|l| l.ends_with("pass") || l.ends_with("FAIL"))
        .filter_map(|l| l.split_whitespace().next())
        .collect();
    check(
        groups.contains(&"log_temperature"),
        "log_temperature group missing",
    )?;
    check(
        groups.len() >= 5,
        format!("only {} groups checked", groups.len()),
    )?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    let summary = stdout
        .lines()
        .find(|l| l.starts_with("gradcheck passed"))
        .unwrap_or("");
    Ok(format!("{} groups; {summary}; {secs:.1}s", groups.len()))
}

// ---------------------------------------------------------------------
// 2

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn loss_identities() -> Outcome {
    let mut rng = Rng::new(11);
    let store = ParamStore::<f64>::new(0);
    let con = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64, String> {
        let mut g = Graph::new(&store);
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let lt = g.constant(Tensor::scalar(0.07f64.ln()));
        let l = contrastive_loss(&mut g, x, y, lt).map_err(e)?;
        Ok(g.value(l).item())
    };
    let single = con(&unit_rows(1, 8, &mut rng), &unit_rows(1, 8, &mut rng))?;
    check(single == 0.0, format!("N=1 contrastive {single}"))?;
    let row = unit_rows(1, 8, &mut rng);
    let both = Tensor::new(vec![2, 8], row.data().repeat(2)).map_err(e)?;
    let twin = con(&both, &both)?;
    let twin_err = (twin - 2.0 * 2f64.ln()).abs();
    check(
        twin_err <= 1e-6,
        format!("identical pair error {twin_err:e}"),
    )?;

    let (t, v) = (7, 50);
    let targets: Vec<Option<usize>> = (0..10).map(|i| (i < t).then_some(i * 3)).collect();
    let mut g = Graph::new(&store);
    let logits = g.constant(Tensor::zeros([10, v]));
    let cap = captioning_loss(&mut g, logits, &targets, 1).map_err(e)?;
    let cap_err = (g.value(cap).item() - t as f64 * (v as f64).ln()).abs();
    check(
        cap_err <= 1e-6,
        format!("uniform captioning error {cap_err:e}"),
    )?;

    let mut store = ParamStore::<f64>::new(0);
    let lt = store.add("log_temperature", &[1], Init::Const(0.07f64.ln()));
    let (img, txt) = (unit_rows(4, 8, &mut rng), unit_rows(4, 8, &mut rng));
    let raw = Tensor::<f64>::randn([12, 10], 1.0, &mut rng);
    let targets: Vec<Option<usize>> = (0..12)
        .map(|i| (i % 3 != 2).then(|| rng.below(10)))
        .collect();
    let mut worst: f64 = 0.0;
    for (wc, wp) in [(1.0, 2.0), (1.0, 1.0), (2.0, 1.0), (0.0, 1.0)] {
        let mut g = Graph::new(&store);
        let (i, t, l) = (
            g.constant(img.clone()),
            g.constant(txt.clone()),
            g.constant(raw.clone()),
        );
        let w = LossWeights::new(wc, wp).map_err(e)?;
        let parts = coca_loss(&mut g, i, t, lt, l, &targets, w).map_err(e)?;
        let (total, c, p) = (
            g.value(parts.total).item(),
            g.value(parts.con).item(),
            g.value(parts.cap).item(),
        );
        worst = worst.max((total - (wc * c + wp * p)).abs());
    }
    check(worst <= 1e-7, format!("recombination error {worst:e}"))?;
    Ok(format!(
        "N=1 → 0; twin error {twin_err:.1e}; T·lnV error {cap_err:.1e}; recombination error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------
// 3

fn shape_tiny() -> CoCaConfig {
    let mut cfg = RunConfig::preset("coca-tiny").unwrap();
    cfg.set("text.vocab_size", "64").unwrap();
    cfg.set("text.max_len", "9").unwrap();
    cfg.model
}

fn random_images(cfg: &CoCaConfig, n: usize, rng: &mut Rng) -> Tensor<f32> {
    let r = cfg.image.resolution;
    let len = n * r * r * cfg.image.channels;
    Tensor::new(
        vec![n, r, r, cfg.image.channels],
        (0..len).map(|_| rng.uniform() as f32).collect(),
    )
    .unwrap()
}

fn random_caption(cfg: &CoCaConfig, len: usize, rng: &mut Rng) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend((0..len - 2).map(|_| 4 + rng.below(cfg.text.vocab_size - 4)));
    ids.push(EOS);
    ids.resize(cfg.text_len(), PAD);
    TokenSequence { ids, len }
}

fn structural_invariants() -> Outcome {
    let cfg = shape_tiny();
    let mut store = ParamStore::<f32>::new(21);
    let model = CoCa::new(&cfg, &mut store).map_err(e)?;
    let mut rng = Rng::new(22);

    let cross: Vec<&str> = store
        .iter()
        .map(|(_, p)| p.name())
        .filter(|n| n.starts_with("unimodal.") && n.contains("cross"))
        .collect();
    check(
        cross.is_empty() && model.unimodal.iter().all(|l| !l.has_cross()),
        format!("{cross:?}"),
    )?;

    let text: Vec<TokenSequence> = [3, 8, 5]
        .iter()
        .map(|&l| random_caption(&cfg, l, &mut rng))
        .collect();
    let imgs = random_images(&cfg, 3, &mut rng);
    let run = |store: &ParamStore<f32>, imgs: &Tensor<f32>, text: &[TokenSequence]| {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, imgs, text).unwrap();
        (
            g.value(out.text_embed).clone(),
            g.value(out.caption_logits).clone(),
        )
    };
    let (embed, logits) = run(&store, &imgs, &text);
    let (embed_other, logits_other) = run(&store, &Tensor::zeros(imgs.shape().to_vec()), &text);
    check(
        embed.data() == embed_other.data(),
        "text embedding depends on the image",
    )?;
    check(
        logits.max_abs_diff(&logits_other) > 1e-4,
        "captioning ignores the image",
    )?;

    // Future tokens: change everything after position t of example 1.
    let v = cfg.text.vocab_size;
    let width = cfg.text_len();
    let t = 3;
    let mut future = text.clone();
    for id in &mut future[1].ids[t + 1..7] {
        *id = 4 + (*id - 4 + 1) % (v - 4);
    }
    let (_, lf) = run(&store, &imgs, &future);
    let rows = width * v..(width + t + 1) * v;
    check(
        logits.data()[rows.clone()] == lf.data()[rows],
        "logits depend on future tokens",
    )?;

    // [CLS] parameters: random perturbation, every real caption position.
    let mut perturbed = store.clone();
    let mut noise = Rng::new(23);
    perturbed
        .get_mut(model.cls_embed)
        .data_mut()
        .iter_mut()
        .for_each(|x| *x += noise.normal() as f32);
    let (ep, lp) = run(&perturbed, &imgs, &text);
    for (b, tok) in text.iter().enumerate() {
        let rows = b * width * v..(b * width + tok.len) * v;
        check(
            logits.data()[rows.clone()] == lp.data()[rows],
            "logits depend on [CLS] parameters",
        )?;
    }
    check(
        embed.max_abs_diff(&ep) > 1e-4,
        "[CLS] perturbation did not reach the embedding",
    )?;

    let before = model.unimodal_runs();
    let mut g = Graph::new(&store);
    let out = model.forward(&mut g, &imgs, &text).map_err(e)?;
    let parts = coca_loss(
        &mut g,
        out.image_embed,
        out.text_embed,
        model.log_temperature,
        out.caption_logits,
        &caption_targets(&text),
        LossWeights::default(),
    )
    .map_err(e)?;
    g.backward(parts.total).map_err(e)?;
    let runs = model.unimodal_runs() - before;
    check(
        runs == text.len(),
        format!("{runs} unimodal executions for {} examples", text.len()),
    )?;
    Ok("no unimodal cross-attention; image, future-token and [CLS] invariances bitwise; 1 unimodal pass/example".into())
}

// ---------------------------------------------------------------------
// 4

fn toy_learning() -> Outcome {
    let started = Instant::now();
    let data = generate_synthetic(&SyntheticSpec::default(), &mut Rng::new(0)).map_err(e)?;
    let dir = DataDir {
        vocab: build_vocab(&data),
        data,
    };
    let cfg = RunConfig::preset("coca-tiny").map_err(e)?;
    check(
        cfg.train.steps == 2000 && cfg.train.batch_size == 32,
        "tiny preset is not 2000 × 32",
    )?;
    let (model, store) = build_model(&cfg).map_err(e)?;
    let mut state = TrainState::init(store, &cfg.train);
    Trainer::new(&model, &cfg, &dir.data, &dir.vocab)
        .map_err(e)?
        .run(&mut state, &TrainOptions::default(), |_| {})
        .map_err(e)?;
    let held = evaluate_held_out(&model, &state.store, &dir).map_err(e)?;
    let r1 = &held.recall[0];
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "zero-shot {:.4}, R@1 i→t {:.4} t→i {:.4} on {} held-out pairs; {secs:.0}s",
        held.zero_shot_accuracy,
        r1.image_to_text,
        r1.text_to_image,
        dir.data.test.len()
    );
    check(
        r1.k == 1
            && dir.data.test.len() == 32
            && held.zero_shot_accuracy >= 0.9
            && r1.image_to_text >= 0.9
            && r1.text_to_image >= 0.9
            && secs <= 15.0 * 60.0,
        detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------------
// 5

fn captioning_overfit() -> Outcome {
    let spec = SyntheticSpec {
        n_classes: 16,
        per_class: 2,
        test_per_class: 1,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &mut Rng::new(5)).map_err(e)?;
    let vocab = build_vocab(&data);
    let cfg = RunConfig::preset("coca-tiny").map_err(e)?;
    let (model, store) = build_model(&cfg).map_err(e)?;
    let mut state = TrainState::init(store, &cfg.train);
    let ids = &data.train;
    let images = data.annotated.images(ids).map_err(e)?;
    let tokens: Vec<TokenSequence> = ids
        .iter()
        .map(|&i| vocab.tokenize(&data.annotated.captions[i], cfg.model.text_len()))
        .collect();
    let losses = fit_pairs(
        &model,
        &mut state,
        &images,
        &tokens,
        LossWeights::default(),
        300,
        1e-3,
    )
    .map_err(e)?;
    let generated = caption_greedy(&model, &state.store, &images).map_err(e)?;
    let em = exact_match(&generated, &tokens);
    let detail = format!(
        "exact match {em:.4} on {} pairs after {} steps (final loss {:.3})",
        ids.len(),
        losses.len(),
        losses.last().copied().unwrap_or(f32::NAN)
    );
    check(ids.len() == 16 && em >= 0.9, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------
// 6

fn frozen_contract() -> Outcome {
    let cfg = RunConfig::preset("coca-tiny").map_err(e)?;
    let (model, store) = build_model(&cfg).map_err(e)?;
    let spec = SyntheticSpec {
        noise: 0.0,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &mut Rng::new(6)).map_err(e)?;
    let labels = class_ids(&data.annotated, &data.classes).map_err(e)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let before = checksum(&store, &["encoder."]);
    let report = frozen_feature_eval(
        &model,
        &store,
        &data.annotated.images(&data.train).map_err(e)?,
        &pick(&data.train),
        &data.annotated.images(&data.test).map_err(e)?,
        &pick(&data.test),
        data.classes.len(),
        &HeadTraining::default(),
    )
    .map_err(e)?;
    check(
        report.checksum_before == before && report.checksum_after == before,
        "encoder checksum changed",
    )?;
    check(
        report.updated.iter().all(|n| n.starts_with("frozen_head.")),
        format!("updated {:?}", report.updated),
    )?;
    check(
        report.accuracy == 1.0,
        format!("accuracy {}", report.accuracy),
    )?;
    Ok(format!(
        "checksum {}… unchanged; accuracy {}",
        &before[..12],
        report.accuracy
    ))
}

// ---------------------------------------------------------------------
// 7

fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.normal() as f32).collect())
        .collect()
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn first_max(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, s) in scores.enumerate() {
        if s > best.0 {
            best = (s, i);
        }
    }
    best.1
}

fn protocol_oracles() -> Outcome {
    let mut rng = Rng::new(31);
    let mut instances = 0;
    for trial in 0..32 {
        let (n, k, d) = (1 + trial, 1 + trial % 9, 8);
        // Zero-shot: exhaustive (image, class) enumeration.
        let prompts: Vec<Vec<Vec<f32>>> = (0..k).map(|_| random_rows(3, d, &mut rng)).collect();
        let mut images = random_rows(n, d, &mut rng);
        images.iter_mut().for_each(|v| normalize(v));
        let classes = class_embeddings(&prompts).map_err(e)?;
        let oracle_classes: Vec<Vec<f32>> = prompts
            .iter()
            .map(|ps| {
                let mut m = vec![0.0f64; d];
                for p in ps {
                    let norm = p.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    m.iter_mut()
                        .zip(p)
                        .for_each(|(a, x)| *a += *x as f64 / norm);
                }
                m.iter().map(|&x| x as f32).collect()
            })
            .collect();
        let oracle: Vec<usize> = images
            .iter()
            .map(|img| first_max(oracle_classes.iter().map(|c| cos64(img, c))))
            .collect();
        check(
            zero_shot_predict(&images, &classes) == oracle,
            format!("zero-shot differs at N={n}, K={k}"),
        )?;

        // Retrieval: rank of the paired item under a full 64-bit sort.
        let mut txt: Vec<Vec<f32>> = images
            .iter()
            .map(|v| v.iter().map(|x| x + rng.normal() as f32).collect())
            .collect();
        txt.iter_mut().for_each(|v| normalize(v));
        let ks = standard_ks(n);
        let got = recall_at_k(&images, &txt, &ks, None).map_err(e)?;
        let recall = |q: &[Vec<f32>], c: &[Vec<f32>], k: usize| {
            let hits = q
                .iter()
                .enumerate()
                .filter(|(i, qi)| {
                    let mut order: Vec<(f64, usize)> = c
                        .iter()
                        .enumerate()
                        .map(|(j, cj)| (cos64(qi, cj), j))
                        .collect();
                    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    order.iter().position(|&(_, j)| j == *i).unwrap() < k
                })
                .count();
            hits as f64 / q.len() as f64
        };
        for (r, &k) in got.iter().zip(&ks) {
            check(
                r.image_to_text == recall(&images, &txt, k)
                    && r.text_to_image == recall(&txt, &images, k),
                format!("retrieval differs at N={n}, k={k}"),
            )?;
        }
        instances += 1;
    }

    // Video: explicit frame sampling and averaging of per-frame embeddings.
    let cfg = RunConfig::preset("coca-tiny").map_err(e)?;
    let (model, store) = build_model(&cfg).map_err(e)?;
    let mut worst: f64 = 0.0;
    for len in [1, 5, 16, 23] {
        let frames = random_images(&cfg.model, len, &mut rng);
        let got = video_embed(&model, &store, &frames, 16).map_err(e)?;
        let mut mean = vec![0.0f64; got.len()];
        for i in 0..16 {
            let one = gather_images(&frames, &[i * len / 16]).map_err(e)?;
            let emb = &image_embeddings(&model, &store, &one).map_err(e)?[0];
            mean.iter_mut()
                .zip(emb)
                .for_each(|(m, x)| *m += *x as f64 / 16.0);
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in got.iter().zip(&mean) {
            worst = worst.max((*a as f64 - b / norm).abs());
        }
        // Ordering: the clip retrieves the same nearest frame as the oracle mean.
        let frame_embeds = image_embeddings(&model, &store, &frames).map_err(e)?;
        let oracle: Vec<f32> = mean.iter().map(|&x| x as f32).collect();
        check(
            first_max(frame_embeds.iter().map(|f| cos64(&got, f)))
                == first_max(frame_embeds.iter().map(|f| cos64(&oracle, f))),
            "video nearest frame differs",
        )?;
    }
    check(worst < 1e-5, format!("video embedding off by {worst:e}"))?;
    Ok(format!(
        "{instances} zero-shot + retrieval instances exact; video max deviation {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------
// 8

fn small_dir(seed: u64) -> Result<DataDir, String> {
    let spec = SyntheticSpec {
        n_classes: 4,
        per_class: 8,
        test_per_class: 2,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &mut Rng::new(seed)).map_err(e)?;
    Ok(DataDir {
        vocab: build_vocab(&data),
        data,
    })
}

fn quick_config(steps: usize) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::preset("coca-tiny").map_err(e)?;
    cfg.train.steps = steps;
    cfg.train.batch_size = 8;
    cfg.train.checkpoint_every = 2;
    Ok(cfg)
}

fn ablation_harness() -> Outcome {
    let dir = small_dir(41)?;
    let base = quick_config(2)?;
    let tmp = tempfile::tempdir().map_err(e)?;
    let mut sizes = Vec::new();
    for axis in AXES {
        let grid = variants(&base, axis).map_err(e)?;
        let table = coca_core::ablation::ablation_run(&base, axis, &dir, |_, _| {}).map_err(e)?;
        check(
            table.rows.len() == grid.len(),
            format!("{}: {} rows", axis.name(), table.rows.len()),
        )?;
        let path = tmp.path().join(format!("{}.tsv", axis.name()));
        table.save(&path).map_err(e)?;
        check(
            AblationTable::load(&path).map_err(e)? == table,
            format!("{} table does not reload", axis.name()),
        )?;
        if axis == Axis::LossRatio {
            let labels: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
            check(
                labels == ["1:1", "1:2", "2:1"],
                format!("loss_ratio grid {labels:?}"),
            )?;
            let weights: Vec<(f64, f64)> = grid
                .iter()
                .map(|(_, c)| (c.model.loss.lambda_con, c.model.loss.lambda_cap))
                .collect();
            check(
                weights == [(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)],
                format!("{weights:?}"),
            )?;
        }
        sizes.push(format!("{}={}", axis.name(), table.rows.len()));
    }
    Ok(format!("rows {}; all tables reload", sizes.join(" ")))
}

// ---------------------------------------------------------------------
// 9

fn persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let dir = small_dir(51)?;
    let data_path = tmp.path().join("data");
    dir.save(&data_path).map_err(e)?;
    let back = DataDir::load(&data_path).map_err(e)?;
    let bits = |d: &DataDir| {
        d.data
            .annotated
            .pixels()
            .iter()
            .chain(d.data.alt_text.pixels())
            .map(|p| p.to_bits())
            .collect::<Vec<_>>()
    };
    check(
        back == dir && bits(&back) == bits(&dir),
        "dataset round trip differs",
    )?;

    let cfg = quick_config(8)?;
    let (model, store) = build_model(&cfg).map_err(e)?;
    let trainer = Trainer::new(&model, &cfg, &dir.data, &dir.vocab).map_err(e)?;
    let mut full = TrainState::init(store.clone(), &cfg.train);
    let reference = trainer
        .run(&mut full, &TrainOptions::default(), |_| {})
        .map_err(e)?;

    let run_dir = tmp.path().join("run");
    let mut head = TrainState::init(store, &cfg.train);
    let opts = TrainOptions {
        out_dir: Some(run_dir.clone()),
        stop_after: Some(3),
    };
    trainer.run(&mut head, &opts, |_| {}).map_err(e)?;
    let ckpt_path = run_dir.join("model.ckpt");
    let bytes = std::fs::read(&ckpt_path).map_err(e)?;
    let reloaded = Checkpoint::load(&ckpt_path).map_err(e)?;
    check(
        reloaded.to_bytes().map_err(e)? == bytes,
        "checkpoint save→load→save differs",
    )?;
    check(
        reloaded == head.to_checkpoint(),
        "checkpoint contents differ",
    )?;

    let (_, _, mut resumed) = load_run(&ckpt_path, None).map_err(e)?;
    check(
        resumed.step() == 3,
        format!("resumed at {}", resumed.step()),
    )?;
    let tail = trainer
        .run(&mut resumed, &TrainOptions::default(), |_| {})
        .map_err(e)?;
    check(
        tail == reference[3..],
        "resumed curve differs from the uninterrupted run",
    )?;
    let same = resumed
        .store
        .iter()
        .zip(full.store.iter())
        .all(|((_, a), (_, b))| a.data() == b.data());
    check(same, "resumed parameters differ")?;
    Ok(format!(
        "dataset and checkpoint ({} bytes) bitwise; resumed curve identical over steps 3..{}",
        bytes.len(),
        reference.len()
    ))
}

// ---------------------------------------------------------------------
// 10

fn config_fidelity() -> Outcome {
    let cfg = RunConfig::preset("coca-base").map_err(e)?;
    let counts = census(&cfg.model).map_err(e)?;
    let encoder = counts.get("encoder").copied().unwrap_or(0) as f64;
    let total = counts.get("total").copied().unwrap_or(0) as f64;
    let detail = format!(
        "encoder {:.1}M ({:+.1}%), total {:.1}M ({:+.1}%)",
        encoder / 1e6,
        (encoder / 86e6 - 1.0) * 100.0,
        total / 1e6,
        (total / 383e6 - 1.0) * 100.0
    );
    check(
        (encoder / 86e6 - 1.0).abs() <= 0.05 && (total / 383e6 - 1.0).abs() <= 0.05,
        detail.clone(),
    )?;
    Ok(detail)
}
