use std::io::Write as _;
use std::path::{Path, PathBuf};

use drgrade::attribution::{integrated_gradients, render_overlay, Baseline, IgConfig, Target};
use drgrade::fundus::{
    build_balanced, degrade, DatasetManifest, DegradationParams, DegradationSeeds, FundusImage, GradeLabel,
    ManifestEntry,
};
use drgrade::metrics::report;
use drgrade::model::{load, save, train, Model, ModelConfig, TrainOptions, TrainingMeta};
use drgrade_service::{Service, ServiceConfig, ServiceError};
use serde_json::json;

use crate::{CliError, Command, Format};

trait OrExit<T> {
    fn or_data(self) -> Result<T, CliError>;
    fn or_internal(self) -> Result<T, CliError>;
}

impl<T, E: std::fmt::Display> OrExit<T> for Result<T, E> {
    fn or_data(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::data(e.to_string()))
    }

    fn or_internal(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::internal(e.to_string()))
    }
}

fn emit(value: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
    let _ = out.flush();
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    let manifest = DatasetManifest::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if manifest.is_empty() {
        return Err(CliError::data("empty manifest"));
    }
    Ok(manifest)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Degrade { input, out, seed } => run_degrade(&input, &out, seed),
        Command::BuildDataset {
            inputs,
            per_label,
            seed,
            out,
        } => run_build_dataset(&inputs, per_label, seed, &out),
        Command::Synth {
            out,
            per_class,
            size,
            seed,
        } => {
            if per_class == 0 || size < drgrade::fundus::MIN_IMAGE_SIDE {
                return Err(CliError::usage("--per-class must be positive and --size at least 16"));
            }
            let manifest = drgrade::synth::write_corpus(&out, per_class, size, seed).or_internal()?;
            emit(json!({"event": "synth", "images": manifest.len(), "manifest": out.join("manifest.csv")}));
            Ok(())
        }
        Command::Train {
            data,
            epochs,
            out,
            lr,
            batch,
            seed,
            augment,
        } => {
            let opts = TrainOptions {
                epochs,
                batch_size: batch,
                lr,
                seed,
                augment,
            };
            run_train(&data, &out, &opts)
        }
        Command::Eval { model, data, format } => run_eval(&model, &data, format),
        Command::Attribute {
            model,
            image,
            out,
            steps,
            target,
            baseline,
            mask_csv,
        } => run_attribute(&model, &image, &out, steps, &target, &baseline, mask_csv.as_deref()),
        Command::Serve { config } => run_serve(&config),
    }
}

/// Streams one source image at a time; file names carry the source index so
/// equal stems from different directories cannot collide.
fn run_degrade(input: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let manifest = load_manifest(input)?;
    std::fs::create_dir_all(out).or_internal()?;
    let params = DegradationParams::default();
    let mut entries = Vec::with_capacity(manifest.len() * 8);
    for (i, entry) in manifest.entries().iter().enumerate() {
        let img = manifest.load_image(entry).or_data()?;
        let seeds = DegradationSeeds::for_image(seed, i as u64);
        for code in drgrade::fundus::DegradationCode::all() {
            let name = format!("{i:05}_{}_d{}.png", stem(&entry.path), code.value());
            degrade(&img, code, &seeds, &params).save_png(&out.join(&name)).or_internal()?;
            entries.push(ManifestEntry {
                path: name.into(),
                label: entry.label,
                origin: entry.origin.clone(),
                degradation_code: code,
            });
        }
    }
    let root = std::path::absolute(out).or_internal()?;
    let out_manifest = DatasetManifest::new(root, entries);
    let manifest_path = out.join("manifest.csv");
    out_manifest.save(&manifest_path).or_internal()?;
    emit(json!({
        "event": "degrade",
        "inputs": manifest.len(),
        "outputs": out_manifest.len(),
        "manifest": manifest_path,
    }));
    Ok(())
}

fn run_build_dataset(inputs: &[PathBuf], per_label: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if per_label == 0 {
        return Err(CliError::usage("--per-label must be positive"));
    }
    let manifests = inputs
        .iter()
        .map(|p| DatasetManifest::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let balanced = build_balanced(&manifests, per_label, seed).or_data()?;
    balanced.save(out).or_internal()?;
    emit(json!({"event": "build_dataset", "entries": balanced.len(), "per_label": per_label, "manifest": out}));
    Ok(())
}

fn run_train(data: &Path, out: &Path, opts: &TrainOptions) -> Result<(), CliError> {
    if opts.batch_size == 0 {
        return Err(CliError::usage("--batch must be positive"));
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(CliError::usage("--lr must be a positive number"));
    }
    let manifest = load_manifest(data)?;
    let config = ModelConfig {
        seed: opts.seed,
        ..ModelConfig::default()
    };
    let mut model = Model::build(config).or_internal()?.with_id(stem(out));
    let report_ = train(&mut model, &manifest, opts, |s| {
        emit(json!({"event": "epoch", "epoch": s.epoch, "loss": s.loss, "accuracy": s.accuracy}));
    })
    .or_data()?;
    let meta = TrainingMeta {
        epochs: opts.epochs,
        final_loss: report_.final_loss,
    };
    save(&model, &meta, out).or_internal()?;
    // a clean pass with the final weights, rather than the running in-epoch figure
    let clean = report(&model, &manifest).or_data()?;
    emit(json!({
        "event": "done",
        "epochs": opts.epochs,
        "steps": report_.steps,
        "final_loss": report_.final_loss,
        "train_accuracy": clean.accuracy,
        "checkpoint": out,
    }));
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    load(path)
        .map(|(m, _)| m)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn run_eval(model: &Path, data: &Path, format: Format) -> Result<(), CliError> {
    let model = load_model(model)?;
    let manifest = load_manifest(data)?;
    let metrics = report(&model, &manifest).or_data()?;
    match format {
        Format::Json => println!("{}", serde_json::to_string(&metrics).or_internal()?),
        Format::Table => print!("{}", metrics.to_table()),
    }
    Ok(())
}

fn run_attribute(
    model: &Path,
    image: &Path,
    out: &Path,
    steps: usize,
    target: &str,
    baseline: &str,
    mask_csv: Option<&Path>,
) -> Result<(), CliError> {
    if steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }
    let target = match target {
        "predicted" => Target::Predicted,
        t => {
            let grade = t
                .parse::<i64>()
                .ok()
                .and_then(|g| GradeLabel::new(g).ok())
                .ok_or_else(|| CliError::usage(format!("--target must be `predicted` or 0-4, got {t:?}")))?;
            Target::Grade(grade)
        }
    };
    let model = load_model(model)?;
    let img = FundusImage::open(image).or_data()?;
    let baseline = match baseline {
        "black" => Baseline::Black,
        path => {
            let base = FundusImage::open(Path::new(path)).or_data()?;
            Baseline::from_image(&base, model.config().input_size).or_data()?
        }
    };
    let prediction = model.predict(&img).or_data()?;
    let mask = integrated_gradients(&model, &img, &IgConfig { baseline, steps, target }).or_data()?;
    render_overlay(&mask, &img).save_png(out).or_internal()?;
    if let Some(csv) = mask_csv {
        std::fs::write(csv, mask.to_csv()).or_internal()?;
    }
    let max_abs = mask.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    emit(json!({
        "grade": prediction.grade,
        "probabilities": prediction.probabilities,
        "model_id": prediction.model_id,
        "target": mask.target,
        "steps": steps,
        "completeness_gap": mask.completeness_gap,
        "score_input": mask.score_input,
        "score_baseline": mask.score_baseline,
        "mask_max_abs": max_abs,
        "overlay": out,
    }));
    Ok(())
}

fn service_error(e: ServiceError) -> CliError {
    match e {
        ServiceError::Config(m) => CliError::config(m),
        e @ (ServiceError::Checkpoint { .. } | ServiceError::FeedbackLog(_)) => CliError::data(e.to_string()),
        e => CliError::internal(e.to_string()),
    }
}

#[cfg(unix)]
async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}

#[cfg(not(unix))]
async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn run_serve(path: &Path) -> Result<(), CliError> {
    let mut config = ServiceConfig::load(path).map_err(service_error)?;
    config.apply_env(std::env::vars()).map_err(service_error)?;
    config.validate().map_err(service_error)?;
    tracing_subscriber::fmt().json().with_writer(std::io::stdout).init();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().or_internal()?;
    runtime.block_on(async {
        let service = Service::open(config.clone()).map_err(service_error)?;
        let listener = tokio::net::TcpListener::bind(config.listen).await.map_err(|e| CliError {
            exit: 3,
            code: "bind_failed",
            message: format!("cannot bind {}: {e}", config.listen),
        })?;
        let addr = listener.local_addr().or_internal()?;
        emit(json!({"event": "listening", "addr": addr.to_string()}));
        service.run(listener, shutdown_signal()).await.or_internal()?;
        emit(json!({"event": "stopped"}));
        Ok(())
    })
}
