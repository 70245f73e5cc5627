use std::fs;
use std::path::{Path, PathBuf};

use cessl::data::{
    generate_synthetic, load_checkpoint, load_manifest, load_recordings, make_splits, save_checkpoint, write_synthetic,
    Checkpoint, DatasetManifest, SplitSpec, Splits, SynthConfig,
};
use cessl::gradcheck::{run_gradcheck, GradReport, GradRow};
use cessl::model::{AdapterPolicy, Backbone, BackboneConfig};
use cessl::signal::Recording;
use cessl::trainer::{
    attach_fresh_adapters, benchmark_iteration, evaluate, log_jsonl, pretrain, run_cessl, TrainOutcome, TrainerConfig,
};
use cessl::{Error, Result, SeededRng};
use serde::Serialize;
use serde_json::json;

use crate::config::{self, RunConfig};
use crate::{BenchArgs, Command, EvalArgs, GradcheckArgs, Preset, RunArgs, SplitName, SynthArgs};

/// Random stream for freshly initialized backbones.
const INIT_STREAM: u64 = 7;
/// Records in the probe batch stored with each checkpoint.
const PROBE_RECORDS: usize = 4;
const PROBE_TOL: f64 = 1e-15;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => train(&a, Mode::Pretrain),
        Command::Adapt(a) => train(&a, Mode::Adapt),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Bench(a) => bench(&a),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.csv")
    } else {
        p.to_path_buf()
    }
}

/// Refuses a non-empty directory unless forced, then creates it.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("{} is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.n, a.classes, a.len, a.seed);
    cfg.sample_rate = a.sample_rate;
    cfg.priors.clone_from(&a.priors);
    cfg.burst_amplitude = a.burst_amplitude;
    cfg.noise_std = a.noise_std;
    cfg.validate()?;
    prepare_out(&a.out, a.force)?;
    let ds = generate_synthetic(&cfg)?;
    let path = write_synthetic(&ds, &a.out)?;
    write_json(&a.out.join("synth.json"), &cfg)?;
    println!("wrote {} records to {}", ds.records.len(), path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Pretrain,
    Adapt,
}

fn preset(p: Preset, classes: usize) -> BackboneConfig {
    match p {
        Preset::Toy => BackboneConfig::toy(classes),
        Preset::Base => BackboneConfig::base(classes),
    }
}

fn check_classes(model: &Backbone, manifest: &DatasetManifest) -> Result<()> {
    let (m, d) = (model.config().num_classes, manifest.num_classes());
    if m != d {
        return Err(Error::Data(format!("model predicts {m} classes, dataset has {d}")));
    }
    Ok(())
}

/// Loads the model the run starts from: a checkpoint or a fresh backbone.
fn initial_model(cfg: &mut RunConfig, args: &RunArgs, manifest: &DatasetManifest) -> Result<Backbone> {
    let model = match &cfg.paths.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if args.backbone.is_some() || args.seq_len.is_some() {
                return Err(usage("--backbone and --seq-len apply only to --init random"));
            }
            if cfg.backbone.as_ref().is_some_and(|b| b != ck.model.config()) {
                return Err(usage("configured backbone differs from the checkpoint's"));
            }
            cfg.backbone = Some(ck.model.config().clone());
            ck.model
        }
        None => {
            let c = manifest.num_classes();
            let mut b = match args.backbone {
                Some(p) => preset(p, c),
                None => cfg.backbone.clone().unwrap_or_else(|| BackboneConfig::toy(c)),
            };
            if let Some(len) = args.seq_len {
                b.seq_len = len;
            }
            b.validate().map_err(|e| usage(format!("backbone: {e}")))?;
            cfg.backbone = Some(b.clone());
            Backbone::new(b, &mut SeededRng::derive(cfg.trainer.seed, INIT_STREAM))?
        }
    };
    check_classes(&model, manifest)?;
    Ok(model)
}

fn records(
    manifest: &DatasetManifest,
    idx: &[usize],
    trainer: &TrainerConfig,
    model: &Backbone,
    labels: bool,
) -> Result<Vec<Recording>> {
    load_recordings(manifest, idx, trainer.sample_rate, model.config().seq_len, labels)
}

fn mode_name(mode: Mode, t: &TrainerConfig) -> &'static str {
    match mode {
        Mode::Pretrain => "supervised pretraining",
        Mode::Adapt if t.is_degenerate() => "degenerate: uniform LoRA",
        Mode::Adapt if !t.semi_bn => "CE-SSL without semi-BN",
        Mode::Adapt if t.freeze_first_k_conv > 0 => "CE-SSL-F",
        Mode::Adapt => "CE-SSL",
    }
}

fn train(args: &RunArgs, mode: Mode) -> Result<()> {
    let mut cfg = config::resolve(args)?;
    if mode == Mode::Pretrain && cfg.paths.checkpoint.is_none() {
        cfg.random_init = true;
    }
    cfg.validate()?;
    if mode == Mode::Adapt && !cfg.random_init && cfg.paths.checkpoint.is_none() {
        return Err(usage("adapt needs --checkpoint or --init random"));
    }
    let data = cfg.paths.data.clone().ok_or_else(|| usage("--data is required"))?;
    let out = cfg.paths.out.clone().ok_or_else(|| usage("--out is required"))?;
    let manifest = load_manifest(&manifest_path(&data))?;
    let mut model = initial_model(&mut cfg, args, &manifest)?;
    let splits = make_splits(&manifest, &cfg.split)?;
    prepare_out(&out, args.force)?;
    write_json(&out.join("config.json"), &cfg)?;

    let t = &cfg.trainer;
    let val = records(&manifest, &splits.val, t, &model, true)?;
    let test = records(&manifest, &splits.test, t, &model, true)?;
    let header = json!({
        "command": match mode { Mode::Pretrain => "pretrain", Mode::Adapt => "adapt" },
        "mode": mode_name(mode, t),
        "seed": t.seed,
        "labeled": splits.labeled.len(),
        "unlabeled": splits.unlabeled.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
    });
    eprintln!("{}", mode_name(mode, t));
    let outcome = match mode {
        Mode::Pretrain => {
            let idx: Vec<usize> = splits.labeled.iter().chain(&splits.unlabeled).copied().collect();
            let train = records(&manifest, &idx, t, &model, true)?;
            pretrain(model, &train, &val, t)?
        }
        Mode::Adapt => {
            let labeled = records(&manifest, &splits.labeled, t, &model, true)?;
            let unlabeled = records(&manifest, &splits.unlabeled, t, &model, false)?;
            attach_fresh_adapters(&mut model, t, AdapterPolicy::default())?;
            run_cessl(model, &labeled, &unlabeled, &val, t)?
        }
    };
    write_outcome(&out, &outcome, &manifest, &test, t, header)
}

fn write_outcome(
    out: &Path,
    o: &TrainOutcome,
    manifest: &DatasetManifest,
    test: &[Recording],
    t: &TrainerConfig,
    header: serde_json::Value,
) -> Result<()> {
    let mut report = evaluate(&o.model, test, t.threshold)?;
    report.time_per_iter_ms = o.report.time_per_iter_ms;
    report.trainable_params = o.report.trainable_params;
    let mut ck = Checkpoint::new(o.model.clone(), manifest.class_names.clone()).with_probe(t.seed, PROBE_RECORDS)?;
    ck.plan.clone_from(&o.plan);
    save_checkpoint(&ck, &out.join("model.ckpt"))?;
    write_json(&out.join("metrics.json"), &report)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "best_iteration": o.best_iteration,
            "iterations": o.iterations,
            "stopped_early": o.stopped_early,
            "val": o.report,
            "final_val": o.final_report,
            "ranks": o.plan.as_ref().map(|p| p.ranks().clone()),
        }),
    )?;
    let mut log = serde_json::to_string(&json!({ "header": header }))?;
    log.push('\n');
    log.push_str(&log_jsonl(&o.log)?);
    fs::write(out.join("log.jsonl"), log)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn split_indices(s: &Splits, which: SplitName, n: usize) -> Vec<usize> {
    match which {
        SplitName::Test => s.test.clone(),
        SplitName::Val => s.val.clone(),
        SplitName::Labeled => s.labeled.clone(),
        SplitName::Unlabeled => s.unlabeled.clone(),
        SplitName::All => (0..n).collect(),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let mut spec = SplitSpec {
        seed: a.seed,
        ..SplitSpec::default()
    };
    config::apply_split(&mut spec, &a.split_flags);
    spec.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&manifest_path(&a.data))?;
    check_classes(&ck.model, &manifest)?;
    if let Some(dev) = ck.verify_probe()? {
        if dev > PROBE_TOL {
            return Err(Error::Numerical(format!("stored probe outputs not reproduced: max deviation {dev:e}")));
        }
        eprintln!("probe outputs reproduced (max deviation {dev:e})");
    }
    let splits = make_splits(&manifest, &spec)?;
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
    }
    let idx = split_indices(&splits, a.split, manifest.len());
    let recs = load_recordings(
        &manifest,
        &idx,
        cessl::signal::TARGET_RATE,
        ck.model.config().seq_len,
        true,
    )?;
    let report = evaluate(&ck.model, &recs, a.threshold)?;
    if let Some(out) = &a.out {
        write_json(&out.join("metrics.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be >= 1"));
    }
    let mut rows: Vec<GradRow> = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        for r in run_gradcheck(seed, a.corrupt.as_deref())?.rows {
            match rows.iter_mut().find(|x| x.layer == r.layer && x.tensor == r.tensor) {
                Some(x) => {
                    x.max_rel_error = x.max_rel_error.max(r.max_rel_error);
                    x.pass &= r.pass;
                }
                None => rows.push(r),
            }
        }
    }
    let report = GradReport { seed: a.seed, rows };
    print!("{}", report.table());
    let last = a.seed + a.seeds - 1;
    if !report.passed() {
        return Err(Error::Numerical(format!(
            "gradient check failed over seeds {}..={last} (worst {:.3e})",
            a.seed,
            report.worst()
        )));
    }
    println!("all rows PASS over seeds {}..={last}", a.seed);
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let mut base = TrainerConfig {
        seed: a.seed,
        ..TrainerConfig::default()
    };
    config::apply_trainer(&mut base, &a.trainer);
    let mut variants = Vec::new();
    for &f in &a.freeze_values {
        for &r in &a.r_values {
            for &p in &a.p_values {
                let cfg = TrainerConfig {
                    p,
                    r,
                    freeze_first_k_conv: f,
                    ..base.clone()
                };
                cfg.validate()?;
                variants.push(cfg);
            }
        }
    }
    if variants.is_empty() {
        return Err(usage("no variants to benchmark"));
    }
    if a.iters < 20 {
        return Err(usage(format!("--iters must be >= 20, got {}", a.iters)));
    }
    let (model, labeled, unlabeled) = bench_inputs(a, &base)?;
    if let Some(f) = variants.iter().map(|v| v.freeze_first_k_conv).max() {
        if f > model.config().n_conv {
            return Err(usage(format!("cannot freeze {f} of {} conv blocks", model.config().n_conv)));
        }
    }
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "p",
        "r",
        "freeze",
        "trainable_params",
        "adapter_params",
        "time_per_iter_ms",
        "cv",
    ])?;
    for cfg in &variants {
        let mut m = model.clone();
        attach_fresh_adapters(&mut m, cfg, AdapterPolicy::default())?;
        let res = benchmark_iteration(&m, &labeled, &unlabeled, cfg, a.iters)?;
        let name = format!("p{}_r{}_f{}", cfg.p, cfg.r, cfg.freeze_first_k_conv);
        log::info!("{name}: {:.2} ms/iter", res.median_ms);
        w.write_record([
            name,
            cfg.p.to_string(),
            cfg.r.to_string(),
            cfg.freeze_first_k_conv.to_string(),
            res.trainable_params.to_string(),
            res.adapter_params.to_string(),
            format!("{:.4}", res.median_ms),
            format!("{:.4}", res.cv()),
        ])?;
    }
    let table = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .map_err(|e| Error::Data(e.to_string()))?;
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out.join("bench.csv"), &table)?;
    }
    Ok(())
}

/// Backbone plus labeled and unlabeled recordings for benchmarking.
fn bench_inputs(a: &BenchArgs, t: &TrainerConfig) -> Result<(Backbone, Vec<Recording>, Vec<Recording>)> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Backbone::new(BackboneConfig::toy(a.classes), &mut SeededRng::derive(a.seed, INIT_STREAM))?,
    };
    let len = model.config().seq_len;
    let (labeled, mut unlabeled) = match &a.data {
        Some(d) => {
            let manifest = load_manifest(&manifest_path(d))?;
            check_classes(&model, &manifest)?;
            let s = make_splits(
                &manifest,
                &SplitSpec {
                    seed: a.seed,
                    ..SplitSpec::default()
                },
            )?;
            (
                load_recordings(&manifest, &s.labeled, t.sample_rate, len, true)?,
                load_recordings(&manifest, &s.unlabeled, t.sample_rate, len, false)?,
            )
        }
        None => {
            let n = 2 * (t.labeled_batch + t.unlabeled_batch);
            let classes = model.config().num_classes;
            let mut recs = generate_synthetic(&SynthConfig::new(n, classes, len, a.seed))?.recordings(len)?;
            let unl = recs.split_off(n / 2);
            (recs, unl)
        }
    };
    for r in unlabeled.iter_mut() {
        r.label = None;
    }
    Ok((model, labeled, unlabeled))
}
