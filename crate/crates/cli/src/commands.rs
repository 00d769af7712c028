use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glioma_core::config::KvConfig;
use glioma_core::gradsuite;
use glioma_core::io::{
    class_counts, load_case, load_predictions, predictions_to_csv, read_volume, stratified_split,
    write_phantom_dataset, write_volume, CaseRecord, DatasetManifest, GradePrediction, PhantomSpec, Prediction, Split,
    DEFAULT_TRAIN_FRACTION,
};
use glioma_core::metrics::{classification_metrics, confusion, overlap, segmentation_metrics, threshold, Overlap};
use glioma_core::models::{
    argmax, classify, nest, segment, stack, Checkpoint, HandoffMode, HybridConfig, Segmenter, UNetConfig,
    DEFAULT_THRESHOLD, HGG,
};
use glioma_core::params::{Ctx, Mode};
use glioma_core::preprocess::Volume;
use glioma_core::train::{
    train_classification, train_segmentation, ClsExample, SegExample, StopReason, Task, TrainOutcome, TrainRunConfig,
};
use glioma_core::volcore::{Tape, Tensor};
use glioma_core::{Error, Result};

use crate::settings::{create_dir, resolve, write_file, Resolved};
use crate::{EvaluateArgs, ExportAttentionArgs, GradcheckArgs, PhantomGenArgs, PredictArgs, TrainArgs, TrainClsArgs};

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path_flag(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// phantom-gen

pub fn phantom_gen(a: PhantomGenArgs) -> Result<()> {
    let mut defaults = KvConfig::new();
    defaults.set("n", 16);
    defaults.set("seed", 0);
    defaults.set("train_fraction", DEFAULT_TRAIN_FRACTION);
    let mut spec_kv = PhantomSpec::default().to_kv();
    // the phantom seed follows `seed`
    spec_kv = spec_kv.entries().iter().filter(|(k, _)| k != "seed").fold(KvConfig::new(), |mut kv, (k, v)| {
        kv.set(k, v);
        kv
    });
    nest(&mut defaults, "phantom", &spec_kv);
    let r = resolve(
        "phantom-gen",
        defaults,
        &a.config,
        vec![
            ("n", some(&a.n)),
            ("seed", some(&a.seed)),
            ("train_fraction", some(&a.train_fraction)),
        ],
    )?;
    let n: usize = r.parse("n")?;
    let seed: u64 = r.parse("seed")?;
    let fraction: f64 = r.parse("train_fraction")?;
    let mut section = r.kv.section("phantom");
    section.set("seed", seed);
    let spec = PhantomSpec::from_kv(&section)?;
    let (n_hgg, n_lgg) = class_counts(n);
    if n_hgg < 2 || n_lgg < 2 {
        return Err(Error::Config(format!(
            "`n` = {n} gives {n_hgg} HGG / {n_lgg} LGG; a stratified split needs two of each"
        )));
    }
    create_dir(&a.out)?;
    let manifest = write_phantom_dataset(&a.out, &spec, n_hgg, n_lgg)?;
    let split = stratified_split(&manifest, fraction, seed)?;
    split.save(a.out.join("manifest.csv"))?;
    r.write_echo(&a.out)?;
    log::info!(
        "wrote {n} phantoms ({n_hgg} HGG, {n_lgg} LGG), {} train / {} val",
        split.split(Split::Train).count(),
        split.split(Split::Val).count()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared dataset loading

fn parse_split(name: &str) -> Result<Option<Split>> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "all" => Ok(None),
        other => Err(Error::Config(format!("split must be train, val or all, got `{other}`"))),
    }
}

fn load_cases(manifest_path: &Path, which: Option<Split>, normalize: bool) -> Result<Vec<CaseRecord>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| which.is_none() || e.split == which)
        .collect();
    if which.is_some() && manifest.entries.iter().all(|e| e.split.is_none()) {
        return Err(Error::Data(format!("{} has no split assignment", manifest_path.display())));
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{} selects no cases", manifest_path.display())));
    }
    entries.into_iter().map(|e| load_case(&base, e, normalize)).collect()
}

// ---------------------------------------------------------------------------
// training

fn train_defaults(task: Task) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("data", "");
    kv.set("val_split", "val");
    kv.set("normalize", true);
    let base = match task {
        Task::Segmentation => TrainRunConfig::segmentation(0),
        Task::Classification => TrainRunConfig::classification(0),
    };
    // task is fixed by the command; the augmentation seed follows `seed`
    for (k, v) in base.to_kv().entries() {
        if k != "task" && k != "augment.seed" {
            kv.set(k, v);
        }
    }
    kv
}

fn train_flags(a: &TrainArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("data", path_flag(&a.data)),
        ("max_epochs", some(&a.epochs)),
        ("batch_size", some(&a.batch_size)),
        ("lr", some(&a.lr)),
        ("patience", a.patience.clone()),
        ("target", a.target.clone()),
        ("seed", some(&a.seed)),
        ("augment", a.no_augment.then(|| "off".to_string())),
        ("val_split", a.val_split.clone()),
    ]
}

const TRAIN_KEYS: [&str; 7] = ["lr", "batch_size", "max_epochs", "patience", "target", "seed", "augment"];

fn run_config(r: &mut Resolved, task: Task) -> Result<TrainRunConfig> {
    if r.get("augment") == "off" {
        r.drop_defaults_under("augment");
    }
    let mut kv = r.subset(&TRAIN_KEYS, &["augment"]);
    kv.set("task", task);
    TrainRunConfig::from_kv(&kv)
}

struct TrainData<T> {
    train: Vec<T>,
    val: Vec<T>,
}

fn training_cases(r: &Resolved) -> Result<TrainData<CaseRecord>> {
    let data = r.path("data")?;
    let normalize: bool = r.parse("normalize")?;
    let val_split = match r.get("val_split") {
        "val" => Split::Val,
        "train" => Split::Train,
        other => return Err(Error::Config(format!("val_split must be val or train, got `{other}`"))),
    };
    Ok(TrainData {
        train: load_cases(&data, Some(Split::Train), normalize)?,
        val: load_cases(&data, Some(val_split), normalize)?,
    })
}

fn write_training(out: &Path, ckpt_name: &str, ckpt: &Checkpoint, outcome: &TrainOutcome, task: Task) -> Result<()> {
    ckpt.save(out.join(ckpt_name))?;
    write_file(&out.join("history.csv"), outcome.history.to_csv().as_bytes())?;
    let mut summary = KvConfig::new();
    summary.set("task", task);
    summary.set("stop", outcome.stop.to_string().replace('#', ""));
    summary.set("epochs_run", outcome.history.len());
    summary.set("best_epoch", outcome.best_epoch);
    summary.set("optimizer_steps", outcome.optimizer_steps);
    if let Some(best) = outcome.history.records().iter().find(|e| e.epoch == outcome.best_epoch) {
        summary.set("best_val_loss", best.val_loss);
        summary.set(glioma_core::train::History::metric_name(task), best.val_metric);
    }
    write_file(&out.join("summary.txt"), summary.to_text().as_bytes())?;
    match &outcome.stop {
        StopReason::Diverged { epoch, reason } => Err(Error::Diverged {
            epoch: *epoch,
            reason: reason.clone(),
        }),
        _ => Ok(()),
    }
}

pub fn train_seg(a: TrainArgs) -> Result<()> {
    let mut defaults = train_defaults(Task::Segmentation);
    nest(&mut defaults, "unet", &UNetConfig::default().to_kv());
    let mut r = resolve("train-seg", defaults, &a.config, train_flags(&a))?;
    let cfg = run_config(&mut r, Task::Segmentation)?;
    let net_cfg = UNetConfig::from_kv(&r.kv.section("unet"))?;
    let data = training_cases(&r)?;
    let to_seg = |cases: Vec<CaseRecord>| -> Vec<SegExample> {
        cases
            .into_iter()
            .map(|c| SegExample {
                id: c.patient_id,
                image: c.image,
                mask: c.mask,
            })
            .collect()
    };
    create_dir(&a.out)?;
    r.write_echo(&a.out)?;
    let run = train_segmentation(&to_seg(data.train), &to_seg(data.val), net_cfg, &cfg)?;
    write_training(&a.out, "segmenter.ckpt", &run.checkpoint(), &run.outcome, Task::Segmentation)
}

fn load_segmenter(path: &Path) -> Result<Segmenter> {
    Segmenter::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn train_cls(a: TrainClsArgs) -> Result<()> {
    let mut defaults = train_defaults(Task::Classification);
    defaults.set("segmenter", "");
    defaults.set("handoff.threshold", DEFAULT_THRESHOLD);
    defaults.set("handoff.mode", HandoffMode::default());
    nest(&mut defaults, "hybrid", &HybridConfig::default().to_kv());
    let mut flags = train_flags(&a.train);
    flags.push(("segmenter", path_flag(&a.segmenter)));
    let mut r = resolve("train-cls", defaults, &a.train.config, flags)?;
    let cfg = run_config(&mut r, Task::Classification)?;
    let net_cfg = HybridConfig::from_kv(&r.kv.section("hybrid"))?;
    let mut segmenter = load_segmenter(&r.path("segmenter")?)?;
    segmenter.threshold = r.parse("handoff.threshold")?;
    segmenter.mode = r.parse("handoff.mode")?;
    let data = training_cases(&r)?;
    if let Some(c) = data.train.first().filter(|c| c.image.shape() != net_cfg.input) {
        return Err(Error::Config(format!(
            "hybrid.input is {:?} but the cases are {:?}",
            net_cfg.input,
            c.image.shape()
        )));
    }
    let to_cls = |cases: Vec<CaseRecord>| -> Vec<ClsExample> {
        cases
            .into_iter()
            .map(|c| ClsExample {
                id: c.patient_id,
                image: c.image,
                grade: c.grade,
            })
            .collect()
    };
    create_dir(&a.train.out)?;
    r.write_echo(&a.train.out)?;
    let run = train_classification(&to_cls(data.train), &to_cls(data.val), &segmenter, net_cfg, &cfg)?;
    write_training(&a.train.out, "classifier.ckpt", &run.checkpoint(), &run.outcome, Task::Classification)
}

// ---------------------------------------------------------------------------
// predict

/// The grading network with the handoff settings it was trained with.
struct Grader {
    net: glioma_core::models::Hybrid,
    store: glioma_core::params::ParamStore<f32>,
    threshold: f32,
    mode: HandoffMode,
}

fn load_grader(path: &Path) -> Result<Grader> {
    let ckpt = Checkpoint::load(path)?;
    let (net, store) = ckpt.load_hybrid()?;
    let parse = |key: &str, default: &str| ckpt.config.get(key).unwrap_or(default).to_string();
    let threshold = parse("handoff.threshold", &DEFAULT_THRESHOLD.to_string());
    Ok(Grader {
        net,
        store,
        threshold: threshold
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad handoff.threshold `{threshold}`", path.display())))?,
        mode: parse("handoff.mode", "mask").parse()?,
    })
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let mut defaults = KvConfig::new();
    defaults.set("data", "");
    defaults.set("segmenter", "");
    defaults.set("classifier", "");
    defaults.set("split", "all");
    defaults.set("normalize", true);
    defaults.set("threshold", DEFAULT_THRESHOLD);
    defaults.set("batch_size", 4);
    let r = resolve(
        "predict",
        defaults,
        &a.config,
        vec![
            ("data", path_flag(&a.data)),
            ("segmenter", path_flag(&a.segmenter)),
            ("classifier", path_flag(&a.classifier)),
            ("split", a.split.clone()),
        ],
    )?;
    let tau: f32 = r.parse("threshold")?;
    let batch: usize = r.parse("batch_size")?;
    let mut segmenter = load_segmenter(&r.path("segmenter")?)?;
    let grader = r.optional_path("classifier").map(|p| load_grader(&p)).transpose()?;
    let cases = load_cases(&r.path("data")?, parse_split(r.get("split"))?, r.parse("normalize")?)?;

    create_dir(&a.out.join("masks"))?;
    r.write_echo(&a.out)?;
    let images: Vec<&Tensor<f32>> = cases.iter().map(|c| c.image.tensor()).collect();
    let probs = segment(&segmenter.net, &segmenter.store, &images, batch)?;
    let grades = match &grader {
        Some(g) => {
            segmenter.threshold = g.threshold;
            segmenter.mode = g.mode;
            let volumes: Vec<&Volume> = cases.iter().map(|c| &c.image).collect();
            let inputs: Vec<Tensor<f32>> = segmenter.handoff(&volumes, batch)?.into_iter().map(|h| h.input).collect();
            let p = classify(&g.net, &g.store, &inputs.iter().collect::<Vec<_>>(), batch)?;
            p.into_iter().map(Some).collect()
        }
        None => vec![None; cases.len()],
    };
    let mut rows = Vec::with_capacity(cases.len());
    for ((case, prob), grade) in cases.iter().zip(&probs).zip(grades) {
        let rel = PathBuf::from("masks").join(format!("{}_pred.vvol", case.patient_id));
        let mask = Volume::mask(threshold(prob, tau).reshape(case.mask.shape().to_vec())?)?
            .with_spacing(case.image.spacing())?;
        write_volume(a.out.join(&rel), &mask)?;
        rows.push(Prediction {
            patient_id: case.patient_id.clone(),
            mask: Some(rel),
            grade: grade.map(|p: Vec<f64>| GradePrediction {
                probs: [p[0], p[1]],
                grade: argmax(&p),
            }),
        });
    }
    write_file(&a.out.join("predictions.csv"), predictions_to_csv(&rows)?.as_bytes())?;
    log::info!("predicted {} cases", rows.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut defaults = KvConfig::new();
    defaults.set("data", "");
    defaults.set("predictions", "");
    defaults.set("run_id", "eval");
    let r = resolve(
        "evaluate",
        defaults,
        &a.config,
        vec![
            ("data", path_flag(&a.data)),
            ("predictions", path_flag(&a.predictions)),
            ("run_id", a.run_id.clone()),
        ],
    )?;
    let manifest_path = r.path("data")?;
    let predictions_path = r.path("predictions")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let rows = load_predictions(&predictions_path)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no rows", predictions_path.display())));
    }
    let by_id: HashMap<&str, _> = manifest.entries.iter().map(|e| (e.patient_id.as_str(), e)).collect();
    let graded = rows.iter().filter(|p| p.grade.is_some()).count();
    let masked = rows.iter().filter(|p| p.mask.is_some()).count();
    for (what, n) in [("grade", graded), ("mask", masked)] {
        if n != 0 && n != rows.len() {
            return Err(Error::Data(format!("{n} of {} rows have a {what} prediction", rows.len())));
        }
    }
    if graded == 0 && masked == 0 {
        return Err(Error::Data("predictions carry neither masks nor grades".into()));
    }

    let (manifest_base, predictions_base) = (base_dir(&manifest_path), base_dir(&predictions_path));
    let mut labels = Vec::with_capacity(rows.len());
    let mut pooled = Overlap::default();
    for p in &rows {
        let entry = by_id
            .get(p.patient_id.as_str())
            .ok_or_else(|| Error::Data(format!("patient `{}` is not in the manifest", p.patient_id)))?;
        labels.push(entry.grade);
        if let Some(mask) = &p.mask {
            let predicted = read_volume(predictions_base.join(mask))?;
            let truth = read_volume(manifest_base.join(&entry.mask))?;
            pooled = pooled + overlap(predicted.tensor(), truth.tensor())?;
        }
    }
    let run_id = r.get("run_id").to_string();
    let report = if graded > 0 {
        let preds: Vec<usize> = rows.iter().map(|p| p.grade.as_ref().map_or(0, |g| g.grade)).collect();
        let counts = confusion(&preds, &labels, HGG)?;
        let report = classification_metrics(counts)?.with_run_id(&run_id);
        create_dir(&a.out)?;
        write_file(&a.out.join("confusion.csv"), counts.to_csv(HGG).as_bytes())?;
        if masked > 0 {
            report.with_overlap(pooled)
        } else {
            report
        }
    } else {
        segmentation_metrics(pooled).with_run_id(&run_id)
    };
    create_dir(&a.out)?;
    r.write_echo(&a.out)?;
    write_file(&a.out.join("report.csv"), report.to_csv().as_bytes())?;
    write_file(&a.out.join("report.txt"), report.to_text().as_bytes())?;
    print!("{}", report.to_text());
    Ok(())
}

// ---------------------------------------------------------------------------
// export-attention

/// Spacing of a map downsampled from `dims` to `small`.
fn scaled_spacing(spacing: [f32; 3], dims: [usize; 3], small: &[usize]) -> [f32; 3] {
    std::array::from_fn(|i| spacing[i] * dims[i] as f32 / small[i] as f32)
}

fn attention_volume(map: &Tensor<f32>, case: &CaseRecord) -> Result<Volume> {
    let shape = map.shape()[1..].to_vec();
    let spacing = scaled_spacing(case.image.spacing(), case.image.dims(), &shape[1..]);
    Volume::image(map.reshape(shape)?)?.with_spacing(spacing)
}

pub fn export_attention(a: ExportAttentionArgs) -> Result<()> {
    let mut defaults = KvConfig::new();
    defaults.set("data", "");
    defaults.set("checkpoint", "");
    defaults.set("segmenter", "");
    defaults.set("split", "all");
    defaults.set("normalize", true);
    defaults.set("limit", 0);
    let r = resolve(
        "export-attention",
        defaults,
        &a.config,
        vec![
            ("data", path_flag(&a.data)),
            ("checkpoint", path_flag(&a.checkpoint)),
            ("segmenter", path_flag(&a.segmenter)),
            ("split", a.split.clone()),
            ("limit", some(&a.limit)),
        ],
    )?;
    let ckpt = Checkpoint::load(r.path("checkpoint")?)?;
    let mut cases = load_cases(&r.path("data")?, parse_split(r.get("split"))?, r.parse("normalize")?)?;
    let limit: usize = r.parse("limit")?;
    if limit > 0 {
        cases.truncate(limit);
    }
    let dir = a.out.join("attention");
    create_dir(&dir)?;
    r.write_echo(&a.out)?;
    match ckpt.model_kind() {
        Some("unet") => {
            let (net, store) = ckpt.load_unet::<f32>()?;
            if !net.config.attention {
                return Err(Error::Data("the segmenter was built without attention gates".into()));
            }
            for case in &cases {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
                let out = net.forward(&ctx, ctx.input(stack(&[case.image.tensor()])?))?;
                for (level, gate) in out.attention.iter().enumerate() {
                    let v = attention_volume(&gate.value(), case)?;
                    write_volume(dir.join(format!("{}_gate{level}.vvol", case.patient_id)), &v)?;
                }
            }
        }
        Some("hybrid") => {
            let (net, store) = ckpt.load_hybrid::<f32>()?;
            if !net.config.spatial_channel {
                return Err(Error::Data("the classifier was built without spatial/channel attention".into()));
            }
            let grader_cfg = |key: &str| ckpt.config.get(key).map(str::to_string);
            let mut segmenter = load_segmenter(&r.path("segmenter")?)?;
            if let Some(t) = grader_cfg("handoff.threshold") {
                segmenter.threshold = t.parse().map_err(|_| Error::Data(format!("bad handoff.threshold `{t}`")))?;
            }
            if let Some(m) = grader_cfg("handoff.mode") {
                segmenter.mode = m.parse()?;
            }
            let mut channels = String::from("patient_id");
            for c in 0..net.config.d_model {
                let _ = write!(channels, ",c{c}");
            }
            channels.push('\n');
            for case in &cases {
                let handoff = segmenter.handoff(&[&case.image], 1)?.remove(0);
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
                let out = net.forward(&ctx, ctx.input(stack(&[&handoff.input])?))?;
                let spatial = out.spatial_mask.expect("spatial/channel attention enabled");
                let v = attention_volume(&spatial.value(), case)?;
                write_volume(dir.join(format!("{}_spatial.vvol", case.patient_id)), &v)?;
                let channel = out.channel_mask.expect("spatial/channel attention enabled").value();
                channels.push_str(&case.patient_id);
                for w in channel.data() {
                    let _ = write!(channels, ",{w}");
                }
                channels.push('\n');
            }
            write_file(&a.out.join("channel_attention.csv"), channels.as_bytes())?;
        }
        other => return Err(Error::Data(format!("checkpoint holds unknown model {other:?}"))),
    }
    log::info!("exported attention for {} cases", cases.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut defaults = KvConfig::new();
    defaults.set("seeds", gradsuite::DEFAULT_SEEDS);
    defaults.set("filter", "");
    let r = resolve(
        "gradcheck",
        defaults,
        &a.config,
        vec![("seeds", some(&a.seeds)), ("filter", a.filter.clone())],
    )?;
    let seeds: u64 = r.parse("seeds")?;
    if seeds == 0 {
        return Err(Error::Config("`seeds` must be at least 1".into()));
    }
    let filter = Some(r.get("filter")).filter(|f| !f.is_empty());
    let results = gradsuite::run(seeds, filter)?;
    if results.is_empty() {
        return Err(Error::Config(format!("no gradient case matches `{}`", r.get("filter"))));
    }
    for res in &results {
        println!(
            "{:<5} {:<10} {:<26} max rel err {:.3e} (seed {}, {} entries)",
            if res.passed() { "ok" } else { "FAIL" },
            res.module,
            res.name,
            res.max_rel_err,
            res.worst_seed,
            res.checked
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        r.write_echo(out)?;
        write_file(&out.join("gradcheck.csv"), gradsuite::to_csv(&results).as_bytes())?;
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| format!("{}/{}", r.module, r.name)).collect();
    if failed.is_empty() {
        println!("{} cases passed at tolerance {:e}", results.len(), gradsuite::TOLERANCE);
        Ok(())
    } else {
        Err(Error::Backward(format!("gradient check failed for {}", failed.join(", "))))
    }
}
