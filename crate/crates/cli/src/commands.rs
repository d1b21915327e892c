use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use protodist::config::ExperimentConfig;
use protodist::datasets::{load_source, ManifestOptions};
use protodist::ood::{run_benchmark, write_score_csv, EvalReport, ScoreKind};
use protodist::{load_checkpoint, Checkpoint, Dataset, Error, FusionConfig, Split};
use serde_json::Value;

use crate::grid::write_grid;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_STATE: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    /// Prefixes the message with the config key or file that caused it.
    fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => EXIT_USAGE,
            Error::State(_) | Error::Migration { .. } | Error::NonFinite { .. } | Error::Fitting(_) => EXIT_STATE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

/// What a successful command produced.
#[derive(Debug)]
pub struct Outcome {
    /// Files written, all present on disk.
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_keyed(key: &str, spec: &str, options: &ManifestOptions) -> Result<Dataset, CliError> {
    load_source(spec, options).map_err(|e| CliError::from(e).context(key))
}

fn open_checkpoint(dir: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(dir).map_err(|e| CliError::from(e).context(format!("checkpoint {}", dir.display())))
}

fn options_for(ckpt: &Checkpoint, labelled: bool) -> ManifestOptions {
    ManifestOptions {
        image_shape: ckpt.model.config.image_shape,
        num_classes: labelled.then_some(ckpt.model.config.num_classes),
    }
}

/// Test split if the source has one, otherwise all of it, truncated to `limit`.
fn evaluation_data(key: &str, spec: &str, options: &ManifestOptions, limit: Option<usize>) -> Result<Dataset, CliError> {
    let ds = load_keyed(key, spec, options)?.evaluation_set();
    let ds = match limit {
        Some(n) => ds.head(n),
        None => ds,
    };
    if ds.is_empty() {
        return Err(CliError::data(format!("{key}: `{spec}` holds no samples")));
    }
    Ok(ds)
}

fn training_data(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let spec = cfg
        .data
        .train
        .as_deref()
        .ok_or_else(|| CliError::usage("data.train: no training source configured"))?;
    let options = ManifestOptions {
        image_shape: cfg.model.image_shape,
        num_classes: Some(cfg.model.num_classes),
    };
    let mut data = load_keyed("data.train", spec, &options)?;
    if data.manifest.split_indices(Split::Val).is_empty() {
        data = data.carve_validation(cfg.data.val_fraction, cfg.data.split_seed);
    }
    if let Some(test) = cfg.data.test.as_deref() {
        let test = load_keyed("data.test", test, &options)?.with_split(Split::Test);
        data = data.concat(test)?;
    }
    Ok(data)
}

fn write_train_log(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "epoch",
        "cls",
        "kl",
        "rec",
        "orth",
        "total",
        "val_cls",
        "val_kl",
        "val_rec",
        "val_orth",
        "val_total",
        "val_accuracy",
        "seconds",
    ])
    .map_err(|e| io_err(path, e))?;
    for log in &ckpt.history {
        let t = &log.train;
        let v = log.val.as_ref();
        let row = [
            log.epoch.to_string(),
            t.cls.to_string(),
            t.kl.to_string(),
            t.rec.to_string(),
            t.orth.to_string(),
            t.total.to_string(),
            opt(v.map(|v| v.cls)),
            opt(v.map(|v| v.kl)),
            opt(v.map(|v| v.rec)),
            opt(v.map(|v| v.orth)),
            opt(v.map(|v| v.total)),
            opt(log.val_accuracy),
            log.seconds.to_string(),
        ];
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn train(
    config: Option<&Path>,
    out: &Path,
    resume: bool,
    overrides: &[(String, Value)],
) -> Result<Outcome, CliError> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load_with_overrides(path, overrides)?,
        None => ExperimentConfig::default().with_overrides(overrides)?,
    };
    let ckpt_dir = cfg
        .train
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| out.join("checkpoint"));
    cfg.train.checkpoint_dir = Some(ckpt_dir.clone());
    let data = training_data(&cfg)?;

    let previous = if resume {
        if !ckpt_dir.join("meta.json").exists() {
            return Err(CliError {
                code: EXIT_STATE,
                message: format!("--resume: no checkpoint in {}", ckpt_dir.display()),
            });
        }
        Some(open_checkpoint(&ckpt_dir)?)
    } else {
        None
    };

    create_dir(out)?;
    let config_path = out.join("config.json");
    let text = serde_json::to_string_pretty(&cfg.to_flat_json()).expect("config serializes");
    fs::write(&config_path, text).map_err(|e| io_err(&config_path, e))?;

    let ckpt = protodist::fit(&data, &cfg.model, &cfg.train, previous, &mut |log| {
        eprintln!(
            "epoch {:>3}  {}  val_acc {}  ({:.1}s)",
            log.epoch,
            log.train,
            log.val_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            log.seconds
        );
    })?;

    let log_path = out.join("train_log.csv");
    write_train_log(&log_path, &ckpt)?;
    let last = ckpt.history.last();
    let summary = format!(
        "trained {} epochs ({} steps); final train loss {}; val accuracy {}",
        ckpt.epoch,
        ckpt.step,
        last.map(|l| l.train.total.to_string()).unwrap_or_else(|| "-".into()),
        last.and_then(|l| l.val_accuracy)
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into()),
    );
    Ok(Outcome {
        artifacts: vec![ckpt_dir, config_path, log_path],
        summary,
    })
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub id: String,
    pub ood: String,
    pub fusion: FusionConfig,
    pub limit: Option<usize>,
    pub batch_size: usize,
    pub out: PathBuf,
}

pub fn eval_ood(req: &EvalRequest) -> Result<Outcome, CliError> {
    if req.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be positive"));
    }
    let ckpt = open_checkpoint(&req.checkpoint)?;
    if !ckpt.pipeline.is_fitted() {
        return Err(CliError {
            code: EXIT_STATE,
            message: "checkpoint has no fitted score normalizers; rerun `train` (fit) to fit them on validation data"
                .into(),
        });
    }
    let id = evaluation_data("--id", &req.id, &options_for(&ckpt, true), req.limit)?;
    let ood = evaluation_data("--ood", &req.ood, &options_for(&ckpt, false), req.limit)?;
    let extractor = ckpt.train_config.extractor()?;
    let (report, records) = run_benchmark(
        &ckpt.model,
        &id,
        &ood,
        &ckpt.pipeline,
        &req.fusion,
        &extractor,
        req.batch_size,
    )?;
    create_dir(&req.out)?;
    let report_path = req.out.join("report.json");
    let scores_path = req.out.join("scores.csv");
    report.write_json(&report_path)?;
    write_score_csv(&scores_path, &records)?;
    Ok(Outcome {
        artifacts: vec![report_path, scores_path],
        summary: format!(
            "auroc {:.4} ({} + {}, p={}); id accuracy {:.4}; {} id / {} ood samples",
            report.auroc,
            req.fusion.distance_score,
            req.fusion.recon_score,
            req.fusion.p,
            report.id_accuracy,
            report.n_id,
            report.n_ood
        ),
    })
}

pub fn reconstruct(
    checkpoint: &Path,
    data: Option<&str>,
    count: usize,
    prototypes: bool,
    out: &Path,
) -> Result<Outcome, CliError> {
    if data.is_none() && !prototypes {
        return Err(CliError::usage("reconstruct needs --data, --prototypes, or both"));
    }
    let ckpt = open_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    create_dir(out)?;
    let mut artifacts = Vec::new();
    let mut summary = Vec::new();

    if let Some(spec) = data {
        if count == 0 {
            return Err(CliError::usage("--count must be positive"));
        }
        let ds = evaluation_data("--data", spec, &options_for(&ckpt, false), Some(count))?;
        let x = ds.pixels();
        let x_hat = model.reconstruct(x.view())?;
        let mut cells: Vec<_> = x.outer_iter().collect();
        cells.extend(x_hat.outer_iter());
        let path = out.join("reconstructions.png");
        write_grid(&path, &cells, ds.len()).map_err(|e| io_err(&path, e))?;
        artifacts.push(path);
        summary.push(format!("{} samples with reconstructions", ds.len()));
    }

    if prototypes {
        let phi = model.prototypes();
        let (k, j, l) = phi.dim();
        let z: Array2<f32> = phi.to_owned().into_shape_with_order((k * j, l)).expect("contiguous");
        let decoded = model.decode(z.view())?;
        let cells: Vec<_> = decoded.outer_iter().collect();
        let path = out.join("prototypes.png");
        write_grid(&path, &cells, j).map_err(|e| io_err(&path, e))?;
        artifacts.push(path);
        summary.push(format!("{k}x{j} decoded prototypes"));
    }

    Ok(Outcome {
        artifacts,
        summary: summary.join("; "),
    })
}

fn latent_means(ckpt: &Checkpoint, ds: &Dataset) -> Result<Array2<f32>, CliError> {
    let batch = ckpt.train_config.batch_size.max(1);
    let x = ds.pixels();
    let mut parts = Vec::new();
    for start in (0..ds.len()).step_by(batch) {
        let end = (start + batch).min(ds.len());
        parts.push(ckpt.model.encode(x.slice(s![start..end, .., .., ..]))?.mu);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same latent width"))
}

pub fn project(
    checkpoint: &Path,
    id: &str,
    ood: Option<&str>,
    limit: Option<usize>,
    out: &Path,
) -> Result<Outcome, CliError> {
    let ckpt = open_checkpoint(checkpoint)?;
    let mut sets = vec![("id", evaluation_data("--id", id, &options_for(&ckpt, true), limit)?)];
    if let Some(spec) = ood {
        sets.push(("ood", evaluation_data("--ood", spec, &options_for(&ckpt, false), limit)?));
    }
    let latent_dim = ckpt.model.config.latent_dim;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| io_err(out, e))?;
    let mut header = vec!["id".to_string(), "source".into(), "label".into()];
    header.extend((0..latent_dim).map(|i| format!("z{i}")));
    w.write_record(&header).map_err(|e| io_err(out, e))?;

    let mut rows = 0;
    for (name, ds) in &sets {
        let mu = latent_means(&ckpt, ds)?;
        for (i, (entry, z)) in ds.manifest.entries.iter().zip(mu.outer_iter()).enumerate() {
            let mut row = vec![format!("{name}:{i}"), name.to_string(), entry.label.to_string()];
            row.extend(z.iter().map(f32::to_string));
            w.write_record(&row).map_err(|e| io_err(out, e))?;
            rows += 1;
        }
    }
    let phi = ckpt.model.prototypes();
    let (n_classes, per_class, _) = phi.dim();
    for k in 0..n_classes {
        for j in 0..per_class {
            let mut row = vec![format!("prototype:{k}:{j}"), "prototype".into(), k.to_string()];
            row.extend(phi.slice(s![k, j, ..]).iter().map(f32::to_string));
            w.write_record(&row).map_err(|e| io_err(out, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| io_err(out, e))?;
    Ok(Outcome {
        artifacts: vec![out.to_path_buf()],
        summary: format!("{rows} rows ({} prototypes), {latent_dim} latent dimensions", n_classes * per_class),
    })
}

fn run_name(path: &Path) -> String {
    let dir = path.parent().and_then(Path::file_name);
    match dir {
        Some(d) if path.file_name().is_some_and(|f| f == "report.json") => d.to_string_lossy().into_owned(),
        _ => path.display().to_string(),
    }
}

/// Renders reports as a markdown table, best fused AUROC first.
pub fn report_table(reports: &[(String, EvalReport)]) -> String {
    let mut sorted: Vec<&(String, EvalReport)> = reports.iter().collect();
    sorted.sort_by(|a, b| b.1.auroc.total_cmp(&a.1.auroc));
    let mut out = String::from("| run | fusion | AUROC | ID accuracy |");
    for k in ScoreKind::ALL {
        out.push_str(&format!(" {k} |"));
    }
    out.push_str(" n_id | n_ood |\n|---|---|---|---|");
    for _ in ScoreKind::ALL {
        out.push_str("---|");
    }
    out.push_str("---|---|\n");
    for (name, r) in sorted {
        out.push_str(&format!(
            "| {name} | {}+{} L{} | {:.4} | {:.4} |",
            r.fusion.distance_score, r.fusion.recon_score, r.fusion.p, r.auroc, r.id_accuracy
        ));
        for k in ScoreKind::ALL {
            match r.score_aurocs.get(&k) {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {} | {} |\n", r.n_id, r.n_ood));
    }
    out
}

pub fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<Outcome, CliError> {
    if paths.is_empty() {
        return Err(CliError::usage("report needs at least one report.json"));
    }
    let mut reports = Vec::new();
    for path in paths {
        let r = EvalReport::read_json(path).map_err(|e| match e {
            Error::Json { source, .. } => CliError::data(format!("{}: not an evaluation report: {source}", path.display())),
            other => CliError::from(other),
        })?;
        reports.push((run_name(path), r));
    }
    let table = report_table(&reports);
    let mut artifacts = Vec::new();
    if let Some(path) = out {
        fs::write(path, &table).map_err(|e| io_err(path, e))?;
        artifacts.push(path.to_path_buf());
    }
    Ok(Outcome {
        artifacts,
        summary: table.trim_end().to_string(),
    })
}
