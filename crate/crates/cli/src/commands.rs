use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use coca_core::ablation::{ablation_run, variants, Axis};
use coca_core::config::parse_pairs;
use coca_core::data::{
    build_vocab, generate_synthetic, nearest_centroid_accuracy, DataDir, SyntheticSpec,
};
use coca_core::gradcheck::{micro_config, report_group, run_gradcheck};
use coca_core::model::census as param_census;
use coca_core::report::{AblationTable, EvalReport};
use coca_core::train::{
    build_model, curves_csv, load_run, parse_curves, TrainOptions, TrainState, Trainer,
    CHECKPOINT_FILE, CURVES_FILE, LAST_GOOD_FILE,
};
use coca_core::{Error, RunConfig};
use coca_numerics::{GradCheckOptions, OpKind, Rng};

use crate::{
    tasks, AblateArgs, CensusArgs, CheckFailed, ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs,
    TrainArgs,
};

fn split_set(kv: &str) -> Result<(&str, &str)> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into())
}

/// Preset, then file, then `--set` flags, then the seed flag.
pub fn resolve(args: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (None, preset) => RunConfig::preset(preset.as_deref().unwrap_or("coca-tiny"))?,
        (Some(path), None) => RunConfig::load(path, "coca-tiny")?,
        (Some(path), Some(preset)) => {
            let body = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            let mut cfg = RunConfig::preset(preset)?;
            for (k, v) in parse_pairs(&body)?.iter().filter(|(k, _)| k != "preset") {
                cfg.set(k, v)?;
            }
            cfg
        }
    };
    for kv in &args.set {
        let (k, v) = split_set(kv)?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &RunConfig) {
    println!("# resolved config (hash {})", cfg.hash());
    print!("{}", cfg.to_kv_string());
    println!();
}

fn load_data(dir: &Path) -> Result<DataDir> {
    DataDir::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = SyntheticSpec::default();
    let mut apply = |key: &str, value: &str| -> Result<()> {
        let bad = || Error::Config(format!("{key}: cannot parse {value:?}"));
        match key {
            "classes" => spec.n_classes = value.parse().map_err(|_| bad())?,
            "per_class" => spec.per_class = value.parse().map_err(|_| bad())?,
            "test_per_class" => spec.test_per_class = value.parse().map_err(|_| bad())?,
            "size" => spec.size = value.parse().map_err(|_| bad())?,
            "channels" => spec.channels = value.parse().map_err(|_| bad())?,
            "noise" => spec.noise = value.parse().map_err(|_| bad())?,
            _ => bail!(Error::Config(format!("unknown dataset key {key:?}"))),
        }
        Ok(())
    };
    if let Some(path) = &a.spec {
        let body = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        for (k, v) in parse_pairs(&body)? {
            apply(&k, &v)?;
        }
    }
    let flags = [
        ("classes", a.classes.map(|v| v.to_string())),
        ("per_class", a.per_class.map(|v| v.to_string())),
        ("test_per_class", a.test_per_class.map(|v| v.to_string())),
        ("size", a.size.map(|v| v.to_string())),
        ("channels", a.channels.map(|v| v.to_string())),
        ("noise", a.noise.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply(k, &v)?;
        }
    }

    println!("# resolved dataset spec");
    println!("seed = {}", a.seed);
    println!("classes = {}", spec.n_classes);
    println!("per_class = {}", spec.per_class);
    println!("test_per_class = {}", spec.test_per_class);
    println!("size = {}", spec.size);
    println!("channels = {}", spec.channels);
    println!("noise = {}", spec.noise);
    println!();

    let data = generate_synthetic(&spec, &mut Rng::new(a.seed))?;
    let centroid = nearest_centroid_accuracy(&data)?;
    let dir = DataDir {
        vocab: build_vocab(&data),
        data,
    };
    dir.save(&a.out)?;
    println!(
        "wrote {} examples per source ({} train, {} test), vocabulary {} to {}",
        dir.data.annotated.len(),
        dir.data.train.len(),
        dir.data.test.len(),
        dir.vocab.len(),
        a.out.display()
    );
    println!("nearest-centroid held-out accuracy {centroid}");
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let dir = load_data(&a.data)?;
    let curves_path = a.out.join(CURVES_FILE);
    let (cfg, model, mut state, earlier) = if a.resume {
        let (cfg, model, state) = load_run(&a.out.join(CHECKPOINT_FILE), None)?;
        let earlier: Vec<_> = match fs::read_to_string(&curves_path) {
            Ok(body) => parse_curves(&body)?
                .into_iter()
                .filter(|r| r.step < state.step())
                .collect(),
            Err(_) => Vec::new(),
        };
        (cfg, model, state, earlier)
    } else {
        let cfg = resolve(&a.cfg, a.seed)?;
        let (model, store) = build_model(&cfg)?;
        let state = TrainState::init(store, &cfg.train);
        (cfg, model, state, Vec::new())
    };
    print_config(&cfg);
    if a.resume {
        println!("resuming at step {}", state.step());
    }

    let trainer = Trainer::new(&model, &cfg, &dir.data, &dir.vocab)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        stop_after: a.stop_after,
    };
    let started = Instant::now();
    println!("step,total,con,cap,lr");
    let result = trainer.run(&mut state, &opts, |r| {
        if a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == cfg.train.steps) {
            println!("{},{},{},{},{:e}", r.step, r.total, r.con, r.cap, r.lr);
        }
    });
    // The trainer writes only this invocation's rows; put the earlier ones back.
    if !earlier.is_empty() {
        if let Ok(body) = fs::read_to_string(&curves_path) {
            let mut rows = earlier;
            rows.extend(parse_curves(&body)?);
            fs::write(&curves_path, curves_csv(&rows)).map_err(|source| Error::Io {
                path: curves_path.clone(),
                source,
            })?;
        }
    }
    match result {
        Ok(rows) => {
            println!(
                "stopped at step {} after {:.1}s; checkpoint {}",
                state.step(),
                started.elapsed().as_secs_f64(),
                a.out.join(CHECKPOINT_FILE).display()
            );
            if let Some(last) = rows.last() {
                println!(
                    "final loss {} (con {}, cap {})",
                    last.total, last.con, last.cap
                );
            }
            Ok(())
        }
        Err(e @ Error::NonFinite { .. }) => {
            eprintln!(
                "last finite state saved to {}",
                a.out.join(LAST_GOOD_FILE).display()
            );
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let dir = load_data(&a.data)?;
    let (cfg, model, state) = load_run(&a.ckpt, a.config.as_deref())?;
    print_config(&cfg);
    coca_core::train::check_data(&cfg, &dir.data, &dir.vocab)
        .context("checkpoint and dataset are incompatible")?;
    let started = Instant::now();
    let step = state.step();
    let metrics = tasks::run(a, &model, state.store, &dir)?;

    let task = format!("{:?}", a.task).to_lowercase();
    let mut report = EvalReport::new()
        .provenance("task", &task)
        .provenance("checkpoint", a.ckpt.display())
        .provenance("data", a.data.display())
        .provenance("config_hash", cfg.hash())
        .provenance("train_seed", cfg.train.seed)
        .provenance("step", step)
        .provenance("eval_seed", a.seed);
    for (k, v) in metrics {
        report.metric(&k, v);
    }
    let path = match &a.out {
        Some(p) => p.clone(),
        None => a
            .ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{task}.txt")),
    };
    report.save(&path)?;
    if EvalReport::load(&path)? != report {
        bail!(Error::Format(format!(
            "{} does not reload to the same report",
            path.display()
        )));
    }
    print!("{report}");
    println!(
        "# {:.1}s; report written to {}",
        started.elapsed().as_secs_f64(),
        path.display()
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut cfg = RunConfig {
        preset: "micro".into(),
        model: micro_config(),
        train: RunConfig::preset("coca-tiny")?.train,
    };
    if let Some(path) = &a.config {
        let body = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        for (k, v) in parse_pairs(&body)? {
            cfg.set(&k, &v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = split_set(kv)?;
        cfg.set(k, v)?;
    }
    cfg.model.validate()?;
    let corrupt = match &a.corrupt {
        None => None,
        Some(name) => Some(
            OpKind::parse(name)
                .ok_or_else(|| Error::Config(format!("--corrupt: unknown op {name:?}")))?,
        ),
    };

    println!("# resolved gradcheck config");
    for (k, v) in cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| !k.starts_with("train."))
    {
        println!("{k} = {v}");
    }
    println!("tol = {}", a.tol);
    println!("step = {}", a.step);
    println!("seed = {}", a.seed);
    println!("corrupt = {}", a.corrupt.as_deref().unwrap_or("none"));
    println!();

    let opts = GradCheckOptions {
        h: a.step,
        tol: a.tol,
        corrupt,
        ..GradCheckOptions::default()
    };
    let started = Instant::now();
    let report = run_gradcheck(&cfg.model, a.seed, &opts)?;
    println!(
        "{:<18} {:>7} {:>9} {:>12}  status",
        "group", "tensors", "elements", "max_rel_err"
    );
    for g in report.groups(report_group) {
        println!(
            "{:<18} {:>7} {:>9} {:>12.3e}  {}",
            g.group,
            g.tensors,
            g.elements,
            g.max_rel_err,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    let worst = report.max_rel_err();
    println!("# {:.2}s", started.elapsed().as_secs_f64());
    if report.passed() {
        println!(
            "gradcheck passed: max relative error {worst:.3e} <= {}",
            a.tol
        );
        Ok(())
    } else {
        Err(CheckFailed(format!(
            "gradcheck failed: max relative error {worst:.3e} > {}",
            a.tol
        ))
        .into())
    }
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let axis: Axis = a.axis.parse()?;
    let base = resolve(&a.cfg, a.seed)?;
    let dir = load_data(&a.data)?;
    print_config(&base);
    let grid = variants(&base, axis)?;
    println!(
        "# axis {}: {}",
        axis.name(),
        grid.iter()
            .map(|(l, _)| l.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    // Wall-clock is reported relative to the first variant; nothing is
    // asserted about it.
    let mut first_secs = None;
    let table = ablation_run(&base, axis, &dir, |row, secs| {
        let cells: Vec<String> = row.metrics.iter().map(|m| format!("{m:.4}")).collect();
        let reference = *first_secs.get_or_insert(secs);
        println!(
            "{:<12} {}  ({secs:.1}s, x{:.2})",
            row.variant,
            cells.join("  "),
            secs / reference.max(1e-9)
        );
    })?;
    table.save(&a.out)?;
    if AblationTable::load(&a.out)? != table {
        bail!(Error::Format(format!(
            "{} does not reload to the same table",
            a.out.display()
        )));
    }
    println!();
    print!("{}", table.to_tsv());
    println!("# {} rows written to {}", table.rows.len(), a.out.display());
    Ok(())
}

pub fn census(a: &CensusArgs) -> Result<()> {
    let cfg = resolve(&a.cfg, None)?;
    print_config(&cfg);
    let counts = param_census(&cfg.model)?;
    for (group, n) in &counts {
        if group != "total" {
            println!("{group:<18} {n:>14}");
        }
    }
    let total = counts.get("total").copied().unwrap_or(0);
    println!("{:<18} {total:>14}  ({:.1}M)", "total", total as f64 / 1e6);
    Ok(())
}
