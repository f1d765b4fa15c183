use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use segfield::metrics::{evaluate_subject, MetricsReport};
use segfield::model::{ImplicitModel, ModelConfig, TemplateConfig, TemplateNet};
use segfield::phantom::{
    generate_dataset, load_subject, split_dataset, DatasetSplit, PhantomSpec, Subject, MIN_SPLIT_IDS,
};
use segfield::train::{infer, pretrain_template, train_main, PretrainConfig, TrainConfig, TrainSinks};
use segfield::volume::{svol, GridDims, LabelVolume};
use segfield::Error;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, EvalArgs, ExportArgs, InferArgs, PhantomArgs, PretrainArgs, TrainArgs};
use crate::manifest::{now_ms, ManifestWriter, RunManifest, RunStatus};
use crate::obj::{class_surface, to_obj};
use crate::{CliError, CliResult, THREADS_ENV};

pub const SPLIT_FILE: &str = "split.json";
pub const TEMPLATE_CKPT: &str = "template.snn";
pub const MODEL_CONFIG: &str = "model.json";
pub const TRAIN_CONFIG: &str = "train_config.json";
pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const PRETRAIN_LOG: &str = "pretrain_log.ndjson";
pub const METRICS_CSV: &str = "metrics.csv";

/// Architecture stored next to a template checkpoint (same stem, `.json`).
#[derive(Debug, Serialize, Deserialize)]
struct TemplateMeta {
    num_classes: usize,
    template: TemplateConfig,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    if source.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> segfield::Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> segfield::Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> segfield::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a second run in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn ensure_fresh(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_none();
        if !empty {
            return Err(CliError::Usage(format!(
                "output directory {} exists and is not empty",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(())
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Phantom(a) => &a.out,
        Command::Pretrain(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Infer(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Export(a) => &a.out,
    }
}

fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::Phantom(a) => Some(a.seed),
        Command::Pretrain(a) => Some(a.seed),
        Command::Train(a) => Some(a.seed),
        _ => None,
    }
}

pub fn execute(cli: &Cli, argv: &[String]) -> CliResult<()> {
    configure_threads()?;
    let out = cli.workdir.join(out_dir(&cli.command));
    ensure_fresh(&out)?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        argv: argv.to_vec(),
        workdir: cli.workdir.clone(),
        config: serde_json::to_value(&cli.command).expect("arguments serialize"),
        seed: seed_of(&cli.command),
        artifacts: Vec::new(),
        version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        threads: rayon::current_num_threads(),
        started_unix_ms: now_ms(),
        wall_seconds: None,
        status: RunStatus::Running,
        error: None,
    };
    let mut writer = ManifestWriter::begin(&out, manifest)?;
    let wd = cli.workdir.as_path();
    let result = match &cli.command {
        Command::Phantom(a) => phantom(a, &out),
        Command::Pretrain(a) => pretrain(wd, a, &out),
        Command::Train(a) => train(wd, a, &out),
        Command::Infer(a) => infer_cmd(wd, a, &out),
        Command::Eval(a) => eval(wd, a, &out),
        Command::Export(a) => export(wd, a, &out),
    };
    match result {
        Ok(artifacts) => {
            writer.manifest.artifacts = artifacts;
            writer.finish(None)?;
            Ok(())
        }
        Err(e) => {
            let _ = writer.finish(Some(e.to_string()));
            Err(e)
        }
    }
}

fn phantom(a: &PhantomArgs, out: &Path) -> CliResult<Vec<PathBuf>> {
    let spec = PhantomSpec {
        seed: a.seed,
        dims: [a.dims; 3],
        num_lobes: a.lobes,
        segments_per_lobe: a.segments,
        tree_depth: a.depth,
        branch_radius: a.radius,
        noise_std: a.noise,
    };
    spec.validate()?;
    let ids = generate_dataset(out, a.n, &spec)?;
    info!("wrote {} subjects to {}", ids.len(), out.display());
    let mut artifacts: Vec<PathBuf> = ids.iter().map(PathBuf::from).collect();
    if ids.len() >= MIN_SPLIT_IDS {
        write_json(&out.join(SPLIT_FILE), &split_dataset(&ids, a.seed)?)?;
        artifacts.push(SPLIT_FILE.into());
    } else {
        warn!("fewer than {MIN_SPLIT_IDS} subjects; no split file written");
    }
    Ok(artifacts)
}

fn load_split(wd: &Path, data: &Path, split: Option<&PathBuf>) -> segfield::Result<DatasetSplit> {
    let path = match split {
        Some(p) => wd.join(p),
        None => data.join(SPLIT_FILE),
    };
    read_json(&path)
}

fn load_subjects(data: &Path, ids: &[String]) -> segfield::Result<Vec<Subject>> {
    ids.iter().map(|id| load_subject(&data.join(id))).collect()
}

fn common_classes(subjects: &[Subject]) -> CliResult<usize> {
    let first = subjects
        .first()
        .ok_or_else(|| CliError::Usage("the split selects no subjects".into()))?
        .num_classes();
    if let Some(s) = subjects.iter().find(|s| s.num_classes() != first) {
        return Err(Error::Consistency(format!(
            "subjects disagree on class count ({} vs {})",
            first,
            s.num_classes()
        ))
        .into());
    }
    Ok(first as usize)
}

fn pretrain(wd: &Path, a: &PretrainArgs, out: &Path) -> CliResult<Vec<PathBuf>> {
    let data = wd.join(&a.data);
    let split = load_split(wd, &data, a.split.as_ref())?;
    let subjects = load_subjects(&data, &split.train)?;
    let num_classes = common_classes(&subjects)?;
    let template = match &a.template_config {
        Some(p) => read_json(&wd.join(p))?,
        None => TemplateConfig::default(),
    };
    let mut model_cfg = ModelConfig::new(1, num_classes);
    model_cfg.template = template.clone();
    let cfg = PretrainConfig {
        epochs: a.epochs,
        steps_per_epoch: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let refs: Vec<&Subject> = subjects.iter().collect();
    let pre = pretrain_template(&refs, &model_cfg, &cfg)?;
    pre.template.save(&out.join(TEMPLATE_CKPT))?;
    write_json(&out.join(TEMPLATE_CKPT).with_extension("json"), &TemplateMeta { num_classes, template })?;
    let log: String = pre
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, loss)| serde_json::json!({ "epoch": epoch, "loss": loss }).to_string() + "\n")
        .collect();
    write_file(&out.join(PRETRAIN_LOG), log)?;
    Ok(vec![TEMPLATE_CKPT.into(), "template.json".into(), PRETRAIN_LOG.into()])
}

fn train(wd: &Path, a: &TrainArgs, out: &Path) -> CliResult<Vec<PathBuf>> {
    let data = wd.join(&a.data);
    let split = load_split(wd, &data, a.split.as_ref())?;
    let train_set = load_subjects(&data, &split.train)?;
    let val_set = load_subjects(&data, &split.val)?;
    let num_classes = common_classes(&train_set)?;
    let cfg = TrainConfig {
        input_mode: a.input_mode,
        points_per_subject: a.points,
        gamma: a.gamma,
        lr: a.lr,
        lambda_def: a.lambda_def,
        alpha: a.alpha,
        beta: a.beta,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut model_cfg = ModelConfig::new(a.input_mode.channels(), num_classes);
    let template = match &a.template_ckpt {
        Some(ckpt) => {
            let ckpt = wd.join(ckpt);
            let meta: TemplateMeta = read_json(&ckpt.with_extension("json"))?;
            if meta.num_classes != num_classes {
                return Err(Error::CheckpointMismatch(format!(
                    "template has {} classes, dataset has {num_classes}",
                    meta.num_classes
                ))
                .into());
            }
            model_cfg.template = meta.template.clone();
            Some(TemplateNet::load(meta.template, num_classes, &ckpt)?)
        }
        None => {
            warn!("no template checkpoint given; training against a random template");
            None
        }
    };
    let mut model = ImplicitModel::new(model_cfg.clone(), a.seed)?;
    if let Some(t) = template {
        model.set_template(t)?;
    }
    model_cfg.save(&out.join(MODEL_CONFIG))?;
    write_json(&out.join(TRAIN_CONFIG), &cfg)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let outcome = train_main(
        model,
        &train_set,
        &val_set,
        &cfg,
        TrainSinks {
            log: Some(&mut log),
            checkpoint_dir: Some(out),
        },
    )?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    info!("best epoch {} (val dice {:?})", outcome.best_epoch, outcome.best_val_dice);
    Ok([MODEL_CONFIG, TRAIN_CONFIG, TRAIN_LOG, "best.snn", "last.snn"]
        .map(PathBuf::from)
        .to_vec())
}

/// Subjects selected by either a single bundle or the test part of a split.
fn select_subjects(
    wd: &Path,
    single: Option<&PathBuf>,
    data: Option<&PathBuf>,
    split: Option<&PathBuf>,
) -> CliResult<Vec<(String, PathBuf)>> {
    match (single, data) {
        (Some(dir), None) => {
            let dir = wd.join(dir);
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "subject".into());
            Ok(vec![(id, dir)])
        }
        (None, Some(data)) => {
            let data = wd.join(data);
            let split = load_split(wd, &data, split)?;
            Ok(split.test.iter().map(|id| (id.clone(), data.join(id))).collect())
        }
        _ => Err(CliError::Usage("give either a single subject bundle or --data".into())),
    }
}

fn infer_cmd(wd: &Path, a: &InferArgs, out: &Path) -> CliResult<Vec<PathBuf>> {
    let run = wd.join(&a.model);
    let model_cfg = ModelConfig::load(&run.join(MODEL_CONFIG))?;
    let cfg: TrainConfig = read_json(&run.join(TRAIN_CONFIG))?;
    let model = ImplicitModel::load(model_cfg, &run.join(&a.ckpt))?;
    let mut artifacts = Vec::new();
    for (id, dir) in select_subjects(wd, a.subject.as_ref(), a.data.as_ref(), a.split.as_ref())? {
        let subject = load_subject(&dir)?;
        if subject.num_classes() as usize != model.config.num_classes {
            return Err(Error::CheckpointMismatch(format!(
                "model predicts {} classes, subject {id} has {}",
                model.config.num_classes,
                subject.num_classes()
            ))
            .into());
        }
        let dims = match a.out_dims {
            Some(n) => GridDims::cube(n)?,
            None => subject.dims(),
        };
        let pred = infer(&subject, cfg.input_mode, cfg.input_resolution, &model, dims)?;
        let name = PathBuf::from(format!("{id}.svol"));
        svol::write_labels(&out.join(&name), &pred)?;
        info!("{id}: wrote {}^3 prediction", dims.d);
        artifacts.push(name);
    }
    Ok(artifacts)
}

fn eval(wd: &Path, a: &EvalArgs, out: &Path) -> CliResult<Vec<PathBuf>> {
    let subjects = select_subjects(wd, a.gt.as_ref(), a.data.as_ref(), a.split.as_ref())?;
    let pred_path = wd.join(&a.pred);
    let single = a.gt.is_some();
    let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
    let mut artifacts = Vec::new();
    for (id, dir) in subjects {
        let gt = load_subject(&dir)?;
        let path = if single { pred_path.clone() } else { pred_path.join(format!("{id}.svol")) };
        let pred = svol::read_labels(&path, gt.num_classes())?;
        let report = evaluate_subject(&gt, &pred, a.tau)?;
        let name = PathBuf::from(format!("report_{id}.json"));
        write_json(&out.join(&name), &report)?;
        let branches = PathBuf::from(format!("branches_{id}.csv"));
        write_file(&out.join(&branches), report.branches_csv())?;
        csv.push_str(&report.csv_row(&id));
        csv.push('\n');
        info!("{id}: dice {:.4} nsd {:.4} nib {} nia {}", report.dice_macro, report.nsd, report.nib, report.nia);
        artifacts.extend([name, branches]);
    }
    write_file(&out.join(METRICS_CSV), csv)?;
    artifacts.push(METRICS_CSV.into());
    Ok(artifacts)
}

fn export(wd: &Path, a: &ExportArgs, out: &Path) -> CliResult<Vec<PathBuf>> {
    if a.labels.is_none() && a.reports.is_empty() {
        return Err(CliError::Usage("export needs --labels and/or --reports".into()));
    }
    let mut artifacts = Vec::new();
    if let Some(p) = &a.labels {
        let path = wd.join(p);
        let labels = match svol::read(&path)? {
            svol::SvolData::Labels { dims, data } => {
                let k = data.iter().copied().max().unwrap_or(0).saturating_add(1).max(2);
                LabelVolume::new(dims, k, data)?
            }
            svol::SvolData::Scalar { .. } => {
                return Err(Error::Format {
                    path,
                    msg: "expected u8 labels, found f32 volume".into(),
                }
                .into())
            }
        };
        for cls in 1..labels.num_classes() {
            let mesh = class_surface(&labels, cls);
            if mesh.faces.is_empty() {
                continue;
            }
            let name = PathBuf::from(format!("class_{cls:02}.obj"));
            write_file(&out.join(&name), to_obj(&mesh, &format!("class_{cls}")))?;
            artifacts.push(name);
        }
    }
    if !a.reports.is_empty() {
        let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
        for p in &a.reports {
            let path = wd.join(p);
            let report: MetricsReport = read_json(&path)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let subject = stem.strip_prefix("report_").unwrap_or(&stem);
            csv.push_str(&report.csv_row(subject));
            csv.push('\n');
        }
        write_file(&out.join(METRICS_CSV), csv)?;
        artifacts.push(METRICS_CSV.into());
    }
    Ok(artifacts)
}
