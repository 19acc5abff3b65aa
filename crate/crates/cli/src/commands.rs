use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use voxres::dataio::{
    generate_phantoms, load_checkpoint, load_manifest, oversample_with_augmentation, read_volume, save_checkpoint,
    split_dataset, undersample_majority, write_manifest, write_volume, Checkpoint, ManifestRecord, Split,
};
use voxres::harness::{
    evaluate as evaluate_model, export_curves, export_overlay, train_with, transfer_init, Dataset, Datasets,
    EpochRecord, ManifestDataset, RunStatus, TaskTag, TrainReport,
};
use voxres::preprocess::{preprocess_pipeline, Intensity, MaskVolume, Volume};
use voxres::{Model, Shape5};

use crate::config::{Balance, RunConfig};
use crate::rundir::{check_target, RunDir};
use crate::{CliError, Common};

const PHANTOM_CHUNK: usize = 16;

fn usage(e: voxres::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn resolve(base: RunConfig, common: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.extend(["model.seed", "train.seed", "phantom.seed"].map(|k| format!("{k}={s}")));
    }
    RunConfig::resolve(base, common.config.as_deref(), &overrides)
}

pub fn gen_phantoms(count: usize, out: &Path, common: &Common) -> Result<(), CliError> {
    let cfg = resolve(RunConfig::default(), common)?;
    cfg.phantom.validate().map_err(usage)?;
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let dir = RunDir::create(out, common.force)?;
    let volumes = dir.subdir("volumes")?;
    let masks = dir.subdir("masks")?;
    let tag = format!("task-{:?}", cfg.phantom.task).to_lowercase();
    let mut records = Vec::with_capacity(count);
    for start in (0..count).step_by(PHANTOM_CHUNK) {
        let end = (start + PHANTOM_CHUNK).min(count);
        for (i, p) in (start..end).zip(generate_phantoms(&cfg.phantom, start as u64..end as u64)?) {
            let name = format!("phantom_{i:05}.vol3");
            write_volume(&p.volume, volumes.join(&name))?;
            let mask_data = p.mask.data().iter().map(|&m| f32::from(m)).collect();
            let mask = Volume::new(mask_data, p.mask.dims(), p.volume.spacing(), Intensity::Normalized)?;
            write_volume(&mask, masks.join(&name))?;
            let mut r = ManifestRecord::new(format!("volumes/{name}"), p.label);
            r.tags.push(tag.clone());
            records.push(r);
        }
    }
    write_manifest(&records, dir.path().join("manifest.jsonl"))?;
    cfg.write(&dir.path().join("config.json"))?;
    let out = dir.commit()?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    println!("wrote {count} phantoms ({positives} positive) to {}", out.display());
    Ok(())
}

fn read_mask(path: &Path) -> voxres::Result<MaskVolume> {
    let v = read_volume(path)?;
    MaskVolume::new(v.data().iter().map(|&x| u8::from(x != 0.0)).collect(), v.dims())
}

pub fn preprocess(manifest: &Path, masks: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    let cfg = resolve(RunConfig::default(), common)?;
    let records = load_manifest(manifest)?.records;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let dir = RunDir::create(out, common.force)?;
    let volumes = dir.subdir("volumes")?;
    let mut done = Vec::new();
    let mut names = BTreeSet::new();
    let mut failures = Vec::new();
    for r in &records {
        let name = Path::new(&r.path).file_name().map(|n| n.to_string_lossy().into_owned());
        let result = match &name {
            None => Err(voxres::Error::Validation("record path has no file name".into())),
            Some(n) if !names.insert(n.clone()) => {
                Err(voxres::Error::Validation(format!("output name `{n}` is already taken")))
            }
            Some(n) => read_volume(base.join(&r.path)).and_then(|v| {
                let m = read_mask(&masks.join(n))?;
                let p = preprocess_pipeline(&v, &m, &cfg.preprocess)?;
                write_volume(&p, volumes.join(n))
            }),
        };
        match result {
            Ok(()) => {
                let mut rec = r.clone();
                rec.path = format!("volumes/{}", name.expect("set on success"));
                done.push(rec);
            }
            Err(e) => {
                eprintln!("failed: {}: {e}", r.path);
                failures.push(serde_json::json!({ "path": r.path, "error": e.to_string() }));
            }
        }
    }
    write_manifest(&done, dir.path().join("manifest.jsonl"))?;
    if !failures.is_empty() {
        let lines: Vec<String> = failures.iter().map(|f| f.to_string()).collect();
        std::fs::write(dir.path().join("failures.jsonl"), lines.join("\n") + "\n")
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    cfg.write(&dir.path().join("config.json"))?;
    let out = dir.commit()?;
    println!(
        "preprocessed {} of {} volumes into {}",
        done.len(),
        records.len(),
        out.display()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} volume(s) failed, see failures.jsonl",
            failures.len()
        )))
    }
}

/// Manifest records with absolute paths, split when none carry a split.
fn load_records(manifest: &Path, cfg: &RunConfig, allow_split: bool) -> Result<Vec<ManifestRecord>, CliError> {
    let mut records = load_manifest(manifest)?.records;
    if records.is_empty() {
        return Err(CliError::Runtime(format!("{} has no records", manifest.display())));
    }
    let base = manifest.parent().unwrap_or(Path::new(""));
    for r in &mut records {
        let joined = base.join(&r.path);
        let abs = std::path::absolute(&joined).unwrap_or(joined);
        r.path = abs.to_string_lossy().into_owned();
    }
    let with_split = records.iter().filter(|r| r.split.is_some()).count();
    if with_split == 0 && allow_split {
        records = split_dataset(&records, cfg.split.scheme()?, cfg.train.seed)?;
    } else if with_split != 0 && with_split != records.len() {
        return Err(CliError::Runtime(format!(
            "{} mixes records with and without a split",
            manifest.display()
        )));
    }
    Ok(records)
}

fn print_epoch(e: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.3}  lr {:.3e}  ({:.1}s)",
        e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.lr, e.seconds
    );
}

enum Mode {
    Scratch,
    Transfer(Box<Checkpoint>),
}

fn run_training(manifest: &Path, out: &Path, force: bool, mut cfg: RunConfig, mode: Mode) -> Result<(), CliError> {
    let default_balance = match mode {
        Mode::Scratch => Balance::Undersample,
        Mode::Transfer(_) => Balance::Oversample,
    };
    if cfg.balance.strategy == Balance::Auto {
        cfg.balance.strategy = default_balance;
    }
    cfg.train.validate().map_err(usage)?;
    cfg.balance.augment.validate().map_err(usage)?;
    check_target(out, force)?;

    let mut records = load_records(manifest, &cfg, true)?;
    records = match cfg.balance.strategy {
        Balance::Undersample => undersample_majority(&records, cfg.train.seed)?,
        Balance::Oversample => oversample_with_augmentation(&records, &cfg.balance.augment, cfg.train.seed)?,
        Balance::None | Balance::Auto => records,
    };
    let root = PathBuf::new();
    let train_set = ManifestDataset::split(&root, &records, Split::Train);
    let val_set = ManifestDataset::split(&root, &records, Split::Val);
    let test_set = ManifestDataset::split(&root, &records, Split::Test);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::Runtime("training needs train and val records".into()));
    }
    let [d, h, w] = train_set.volume(0)?.dims();
    cfg.model.input_shape = Shape5 { n: 1, c: 1, d, h, w };
    cfg.model.validate().map_err(usage)?;

    let mut model = Model::<f32>::build(cfg.model.clone())?;
    let transfer = match &mode {
        Mode::Scratch => None,
        Mode::Transfer(src) => Some(transfer_init(
            &mut model,
            src,
            &cfg.train.head_units,
            cfg.train.reinit_head,
        )?),
    };
    let dir = RunDir::create(out, force)?;
    let data = Datasets {
        train: &train_set,
        val: &val_set,
        test: (!test_set.is_empty()).then_some(&test_set as &dyn Dataset),
    };
    let mut outcome = train_with(&mut model, &data, &cfg.train, print_epoch)?;
    outcome.report.transfer = transfer;

    cfg.write(&dir.path().join("config.json"))?;
    write_manifest(&records, dir.path().join("manifest.jsonl"))?;
    outcome.report.write_json(dir.path().join("report.json"))?;
    save_checkpoint(&outcome.checkpoint, dir.path().join("checkpoint.ckpt"))?;
    if !outcome.report.epochs.is_empty() {
        export_curves(&outcome.report, dir.path().join("curves.csv"))?;
    }
    let out = dir.commit()?;

    let r = &outcome.report;
    match &r.test {
        Some(t) => println!(
            "best epoch {} (val_loss {:.4}); test accuracy {:.4}, auc {}",
            r.best_epoch,
            r.best_val_loss,
            t.accuracy,
            t.auc.map_or("undefined".into(), |a| format!("{a:.4}"))
        ),
        None => println!(
            "best epoch {} (val_loss {:.4}); no test records",
            r.best_epoch, r.best_val_loss
        ),
    }
    println!("run written to {}", out.display());
    if let RunStatus::Aborted { reason } = &r.status {
        return Err(CliError::Runtime(format!("training aborted: {reason}")));
    }
    Ok(())
}

pub fn train(manifest: &Path, out: &Path, common: &Common) -> Result<(), CliError> {
    let cfg = resolve(RunConfig::default(), common)?;
    if cfg.train.source.is_some() {
        return Err(CliError::Usage(
            "train.source is set; use `finetune` for transfer runs".into(),
        ));
    }
    run_training(manifest, out, common.force, cfg, Mode::Scratch)
}

pub fn finetune(manifest: &Path, source: Option<&Path>, out: &Path, common: &Common) -> Result<(), CliError> {
    let first = resolve(RunConfig::default(), common)?;
    let source = source
        .map(Path::to_path_buf)
        .or(first.train.source)
        .ok_or_else(|| CliError::Usage("finetune needs a source checkpoint (--source or train.source)".into()))?;
    let ckpt = load_checkpoint(&source)?;
    // The source architecture becomes the default so only deliberate changes differ.
    let mut base = RunConfig::default();
    if let Some(m) = &ckpt.meta.model {
        base.model = m.clone();
    }
    base.train.task = TaskTag::Emphysema;
    let mut cfg = resolve(base, common)?;
    cfg.train.source = Some(std::path::absolute(&source).unwrap_or(source));
    run_training(manifest, out, common.force, cfg, Mode::Transfer(Box::new(ckpt)))
}

pub fn evaluate(
    checkpoint: &Path,
    manifest: &Path,
    split: Option<&str>,
    out: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    let wanted = match split {
        None => None,
        Some("all") => Some(None),
        Some(s) => Some(Some(
            serde_json::from_value::<Split>(serde_json::Value::String(s.into()))
                .map_err(|_| CliError::Usage(format!("unknown split `{s}`; use train, val, test or all")))?,
        )),
    };
    if let Some(o) = out {
        check_target(o, force)?;
    }
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let records = load_records(manifest, &RunConfig::default(), false)?;
    let has_test = records.iter().any(|r| r.split == Some(Split::Test));
    let filter = wanted.unwrap_or(has_test.then_some(Split::Test));
    let chosen: Vec<ManifestRecord> = records
        .into_iter()
        .filter(|r| filter.is_none() || r.split == filter)
        .collect();
    if chosen.is_empty() {
        return Err(CliError::Runtime("no records match the requested split".into()));
    }
    let data = ManifestDataset::new(PathBuf::new(), chosen);
    let e = evaluate_model(&model, &data, 2)?;
    let summary = serde_json::json!({
        "n": e.labels.len(),
        "accuracy": e.accuracy,
        "auc": e.auc,
        "loss": e.loss,
    });
    println!("{summary}");
    if e.auc.is_none() {
        eprintln!("note: AUC is undefined because only one class is present");
    }
    if let Some(o) = out {
        let text = serde_json::to_string_pretty(&e).expect("evaluation serializes");
        std::fs::write(o, text + "\n").map_err(|err| CliError::Runtime(format!("{}: {err}", o.display())))?;
    }
    Ok(())
}

pub fn report(runs: &[String], out: &Path, force: bool) -> Result<(), CliError> {
    let mut parsed = Vec::new();
    let mut ids = BTreeSet::new();
    for r in runs {
        let (id, dir) = r
            .split_once('=')
            .filter(|(id, dir)| !id.is_empty() && !dir.is_empty())
            .ok_or_else(|| CliError::Usage(format!("--run `{r}` is not ID=DIR")))?;
        if !ids.insert(id) {
            return Err(CliError::Usage(format!("run id `{id}` given twice")));
        }
        parsed.push((id, PathBuf::from(dir)));
    }
    check_target(out, force)?;
    let mut reports = Vec::new();
    for (id, dir) in &parsed {
        reports.push((*id, TrainReport::read_json(dir.join("report.json"))?));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    let refs: Vec<(&str, &TrainReport)> = reports.iter().map(|(id, r)| (*id, r)).collect();
    export_overlay(&refs, out)?;
    let rows: usize = reports.iter().map(|(_, r)| r.epochs.len()).sum();
    println!("wrote {rows} rows from {} runs to {}", reports.len(), out.display());
    Ok(())
}
