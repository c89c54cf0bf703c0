//! Model graph: shapes, parameter census, the shared unimodal pass and the
//! information-flow invariants of the decoder.

use coca_core::config::{CoCaConfig, PoolerVariant};
use coca_core::data::{TokenSequence, BOS, EOS, PAD};
use coca_core::model::{census, count_parameters, CoCa};
use coca_core::RunConfig;
use coca_numerics::{Graph, ParamStore, Rng, Tensor};

/// The tiny preset at the shape-oracle size: vocab 64, 8 caption slots.
fn tiny() -> CoCaConfig {
    let mut cfg = RunConfig::preset("coca-tiny").unwrap();
    cfg.set("text.vocab_size", "64").unwrap();
    cfg.set("text.max_len", "9").unwrap();
    cfg.model
}

fn images(cfg: &CoCaConfig, n: usize, rng: &mut Rng) -> Tensor<f32> {
    let r = cfg.image.resolution;
    Tensor::new(
        vec![n, r, r, cfg.image.channels],
        (0..n * r * r * cfg.image.channels)
            .map(|_| rng.uniform() as f32)
            .collect(),
    )
    .unwrap()
}

fn caption(cfg: &CoCaConfig, len: usize, rng: &mut Rng) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend((0..len - 2).map(|_| 4 + rng.below(cfg.text.vocab_size - 4)));
    ids.push(EOS);
    ids.resize(cfg.text_len(), PAD);
    TokenSequence { ids, len }
}

fn captions(cfg: &CoCaConfig, lens: &[usize], rng: &mut Rng) -> Vec<TokenSequence> {
    lens.iter().map(|&l| caption(cfg, l, rng)).collect()
}

fn norms(t: &Tensor<f32>) -> Vec<f32> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|x| x * x).sum::<f32>().sqrt())
        .collect()
}

#[test]
fn forward_shapes_follow_the_config() {
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(0);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    let mut rng = Rng::new(1);
    let b = 3;
    let mut g = Graph::new(&store);
    let out = model
        .forward(
            &mut g,
            &images(&cfg, b, &mut rng),
            &captions(&cfg, &[2, 5, 8], &mut rng),
        )
        .unwrap();
    assert_eq!(g.shape(out.image_embed), &[b, cfg.embed_dim]);
    assert_eq!(g.shape(out.text_embed), &[b, cfg.embed_dim]);
    assert_eq!(g.shape(out.caption_logits), &[b * 8, 64]);
    assert_eq!(g.shape(out.gen_tokens), &[b, 8, 64]);
    assert_eq!(g.shape(out.unimodal), &[b, 9, 64]);
    for n in norms(g.value(out.image_embed))
        .into_iter()
        .chain(norms(g.value(out.text_embed)))
    {
        assert!((n - 1.0).abs() < 1e-5, "{n}");
    }
}

#[test]
fn token_count_follows_resolution() {
    let mut cfg = tiny();
    cfg.image.resolution = 36;
    cfg.image.patch_size = 18;
    assert_eq!(cfg.patch_count(), 4);
    cfg.image.resolution = 288;
    assert_eq!(cfg.patch_count(), 256);

    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(0);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    let bad = Tensor::zeros([1, 12, 12, 3]);
    let mut g = Graph::new(&store);
    assert!(model.encode_image(&mut g, &bad).is_err());
}

#[test]
fn text_embedding_ignores_the_image_bitwise() {
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(2);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    let mut rng = Rng::new(3);
    let text = captions(&cfg, &[4, 8], &mut rng);
    let a = images(&cfg, 2, &mut rng);
    let b = Tensor::zeros(a.shape().to_vec());
    let run = |imgs: &Tensor<f32>| {
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, imgs, &text).unwrap();
        (
            g.value(out.text_embed).clone(),
            g.value(out.caption_logits).clone(),
        )
    };
    let ((ta, la), (tb, lb)) = (run(&a), run(&b));
    assert_eq!(ta.data(), tb.data());
    // Cross-attention is live: the captioning path does see the image.
    assert!(la.max_abs_diff(&lb) > 1e-4);
}

#[test]
fn caption_logits_ignore_future_tokens() {
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(4);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    let mut rng = Rng::new(5);
    let imgs = images(&cfg, 1, &mut rng);
    let base = caption(&cfg, 8, &mut rng);
    let t = 3;
    let mut changed = base.clone();
    for id in &mut changed.ids[t + 1..7] {
        *id = 4 + (*id - 4 + 1) % (cfg.text.vocab_size - 4);
    }
    let run = |tok: &TokenSequence| {
        let mut g = Graph::new(&store);
        let out = model
            .forward(&mut g, &imgs, std::slice::from_ref(tok))
            .unwrap();
        g.value(out.caption_logits).clone()
    };
    let (a, b) = (run(&base), run(&changed));
    let v = cfg.text.vocab_size;
    assert_eq!(a.data()[..(t + 1) * v], b.data()[..(t + 1) * v]);
    assert_ne!(a.data()[(t + 1) * v..], b.data()[(t + 1) * v..]);
}

#[test]
fn caption_logits_ignore_cls_parameters() {
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(6);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    let mut rng = Rng::new(7);
    let imgs = images(&cfg, 2, &mut rng);
    let text = captions(&cfg, &[3, 8], &mut rng);
    let run = |store: &ParamStore<f32>| {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &imgs, &text).unwrap();
        (
            g.value(out.caption_logits).clone(),
            g.value(out.text_embed).clone(),
        )
    };
    let (la, ea) = run(&store);
    let mut perturbed = store.clone();
    let mut rng = Rng::new(77);
    let cls = perturbed.get_mut(model.cls_embed);
    // A random (not uniform) shift: layer norm would cancel a constant one.
    cls.data_mut()
        .iter_mut()
        .for_each(|x| *x += rng.normal() as f32);
    let (lb, eb) = run(&perturbed);
    let v = cfg.text.vocab_size;
    for (b, tok) in text.iter().enumerate() {
        let rows = b * 8 * v..(b * 8 + tok.len) * v;
        assert_eq!(la.data()[rows.clone()], lb.data()[rows]);
    }
    assert!(ea.max_abs_diff(&eb) > 1e-4);
}

#[test]
fn one_unimodal_pass_serves_both_losses() {
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(8);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    let mut rng = Rng::new(9);
    let imgs = images(&cfg, 4, &mut rng);
    let text = captions(&cfg, &[2, 4, 6, 8], &mut rng);
    let before = model.unimodal_runs();
    let mut g = Graph::new(&store);
    let out = model.forward(&mut g, &imgs, &text).unwrap();
    let targets = coca_core::model::caption_targets(&text);
    let parts = coca_core::objectives::coca_loss(
        &mut g,
        out.image_embed,
        out.text_embed,
        model.log_temperature,
        out.caption_logits,
        &targets,
        Default::default(),
    )
    .unwrap();
    g.backward(parts.total).unwrap();
    assert_eq!(model.unimodal_runs() - before, 4);

    let shared = g.value(out.unimodal).clone();
    let mut g2 = Graph::new(&store);
    let standalone = model.encode_text_unimodal(&mut g2, &text).unwrap();
    assert_eq!(g2.value(standalone.seq).data(), shared.data());
    assert_eq!(
        g2.value(standalone.embed).data(),
        g.value(out.text_embed).data()
    );
}

#[test]
fn unimodal_layers_hold_no_cross_attention() {
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(0);
    let model = CoCa::new(&cfg, &mut store).unwrap();
    assert!(model.unimodal.iter().all(|l| !l.has_cross()));
    assert!(model.multimodal.iter().all(|l| l.has_cross()));
    let unimodal: Vec<&str> = store
        .iter()
        .map(|(_, p)| p.name())
        .filter(|n| n.starts_with("unimodal."))
        .collect();
    assert!(!unimodal.is_empty());
    assert!(unimodal.iter().all(|n| !n.contains("cross")));
}

/// Parameter count of the tiny preset written out from the architecture.
fn tiny_formula(cfg: &CoCaConfig) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let ln = |d: usize| 2 * d;
    let mha = |d: usize, dkv: usize| 2 * linear(d, d) + 2 * linear(dkv, d);
    let layer = |d: usize, mlp: usize, cross: Option<usize>| {
        ln(d)
            + mha(d, d)
            + cross.map_or(0, |dc| ln(d) + mha(d, dc))
            + ln(d)
            + linear(d, mlp)
            + linear(mlp, d)
    };
    let (ic, tc, pc) = (&cfg.image, &cfg.text, &cfg.pooler);
    let (di, dt) = (ic.d_model, tc.d_model);
    let p = ic.patch_size * ic.patch_size * ic.channels;
    let l = (ic.resolution / ic.patch_size).pow(2);
    let encoder = linear(p, di) + l * di + ic.layers * layer(di, ic.mlp_dim, None) + ln(di);
    let embeddings = (tc.vocab_size + tc.n_cls + tc.max_len) * dt;
    let unimodal = tc.n_uni * layer(dt, tc.mlp_dim, None) + ln(dt);
    let multimodal =
        tc.n_multi * layer(dt, tc.mlp_dim, Some(di)) + ln(dt) + linear(dt, tc.vocab_size);
    let pooler = |n: usize| n * di + ln(di) + mha(di, di);
    let poolers = pooler(pc.n_query_gen) + ln(di) + pooler(pc.n_query_con) + ln(di);
    let contrastive = linear(di, cfg.embed_dim) + linear(dt, cfg.embed_dim) + 1;
    encoder + embeddings + unimodal + multimodal + poolers + contrastive
}

#[test]
fn tiny_count_matches_closed_form() {
    for cfg in [tiny(), RunConfig::preset("coca-tiny").unwrap().model] {
        let counts = census(&cfg).unwrap();
        assert_eq!(counts["total"], tiny_formula(&cfg));
        let groups: usize = counts
            .iter()
            .filter(|(k, _)| *k != "total")
            .map(|(_, v)| v)
            .sum();
        assert_eq!(groups, counts["total"]);
        for g in [
            "encoder",
            "embeddings",
            "unimodal",
            "multimodal",
            "poolers",
            "contrastive",
        ] {
            assert!(counts[g] > 0, "{g}");
        }
    }
    // The materialized store agrees with the shape-only census.
    let cfg = tiny();
    let mut store = ParamStore::<f32>::new(0);
    CoCa::new(&cfg, &mut store).unwrap();
    assert_eq!(count_parameters(&store), census(&cfg).unwrap());
}

#[test]
fn base_census_is_near_the_published_size() {
    let cfg = RunConfig::preset("coca-base").unwrap().model;
    let counts = census(&cfg).unwrap();
    let enc = counts["encoder"] as f64;
    let total = counts["total"] as f64;
    assert!((enc / 86e6 - 1.0).abs() <= 0.05, "encoder {enc}");
    assert!((total / 383e6 - 1.0).abs() <= 0.05, "total {total}");
}

#[test]
fn pooler_variants_and_raw_encoder_tokens() {
    let mut rng = Rng::new(10);
    for (variant, n_query_gen) in [
        (PoolerVariant::Parallel, 8),
        (PoolerVariant::Cascade, 8),
        (PoolerVariant::Cascade, 0),
    ] {
        let mut cfg = tiny();
        cfg.pooler.variant = variant;
        cfg.pooler.n_query_gen = n_query_gen;
        let mut store = ParamStore::<f32>::new(11);
        let model = CoCa::new(&cfg, &mut store).unwrap();
        let imgs = images(&cfg, 2, &mut rng);
        let text = captions(&cfg, &[3, 6], &mut rng);
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &imgs, &text).unwrap();
        let expect = if n_query_gen == 0 {
            cfg.patch_count()
        } else {
            n_query_gen
        };
        assert_eq!(g.shape(out.gen_tokens), &[2, expect, cfg.image.d_model]);
        let targets = coca_core::model::caption_targets(&text);
        let parts = coca_core::objectives::coca_loss(
            &mut g,
            out.image_embed,
            out.text_embed,
            model.log_temperature,
            out.caption_logits,
            &targets,
            Default::default(),
        )
        .unwrap();
        g.backward(parts.total).unwrap();
        assert!(g.param_grads().iter().all(|(_, t)| t.is_finite()));
        assert_eq!(
            store.id("poolers.generative.queries").is_some(),
            n_query_gen > 0
        );
    }
}

#[test]
fn multiple_cls_slots_and_text_averaging() {
    let mut rng = Rng::new(12);
    for (n_cls, agg) in [(4, "cls"), (2, "cls+text")] {
        let mut rc = RunConfig::preset("coca-tiny").unwrap();
        rc.set("text.vocab_size", "64").unwrap();
        rc.set("text.max_len", &(8 + n_cls).to_string()).unwrap();
        rc.set("text.n_cls", &n_cls.to_string()).unwrap();
        rc.set("text.cls_aggregate", agg).unwrap();
        let cfg = rc.model;
        let mut store = ParamStore::<f32>::new(13);
        let model = CoCa::new(&cfg, &mut store).unwrap();
        let imgs = images(&cfg, 2, &mut rng);
        let text = captions(&cfg, &[3, 8], &mut rng);
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &imgs, &text).unwrap();
        assert_eq!(g.shape(out.caption_logits), &[16, 64]);
        for n in norms(g.value(out.text_embed)) {
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
