//! Command implementations behind the CLI surface. Each returns structured
//! results so tests can drive them directly; `main` maps errors to exit
//! codes (0 success, 1 runtime failure, 2 usage/configuration error).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use atlseg_core::adapter::{count_adapter_params, make_variant, Placement, VARIANT_NAMES};
use atlseg_core::checkpoint::{
    apply_checkpoint, load_checkpoint, save_checkpoint, CheckpointData, RngState,
};
use atlseg_core::data::{
    load_dataset, read_pnm, resize_bilinear_plane, resize_nearest, split, write_pgm, Sample,
};
use atlseg_core::gradcheck::families::{check_family, FAMILY_NAMES};
use atlseg_core::metrics::{format_metrics_table, MetricsReport};
use atlseg_core::model::ModelAssembly;
use atlseg_core::train::{
    apply_freeze_policy, count_params, evaluate, train, ParamReport, TrainHistory,
};
use atlseg_core::Tensor;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Configuration or usage problems: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failures after a validly configured run started: exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Configurations above this total are shape-accounting presets; training
/// them on the CPU engine is refused.
const TRAINABLE_TOTAL_LIMIT: usize = 20_000_000;

fn validate_model_config(config: &RunConfig) -> Result<(), CliError> {
    config
        .encoder_config()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    config
        .decoder_config()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    config
        .train_config()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(atl) = config.atl_config()? {
        atl.validate(config.encoder.embed_dim)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn build_model(config: &RunConfig) -> Result<ModelAssembly, CliError> {
    validate_model_config(config)?;
    let model = ModelAssembly::new(
        config.encoder_config(),
        config.atl_config()?,
        config.decoder_config(),
        config.train.seed,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    apply_freeze_policy(&model);
    Ok(model)
}

fn load_split_dataset(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let spec = config.dataset_spec()?;
    let samples = load_dataset(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    split(samples, spec.train_fraction, spec.seed).map_err(|e| CliError::Usage(e.to_string()))
}

/// Closed-form parameter accounting for a configuration, without
/// materializing the model (the full-shape preset would need gigabytes).
pub fn closed_form_counts(config: &RunConfig) -> Result<ParamReport, CliError> {
    validate_model_config(config)?;
    let encoder = config.encoder_config().param_count();
    let decoder = config
        .decoder_config()
        .param_count(config.encoder.embed_dim);
    let adapters = match config.atl_config()? {
        Some(atl) => count_adapter_params(&atl, config.encoder.embed_dim, config.encoder.num_blocks),
        None => 0,
    };
    Ok(ParamReport {
        total: encoder + adapters + decoder,
        trainable: adapters + decoder,
    })
}

pub struct TrainArtifacts {
    pub output_dir: PathBuf,
    pub history: TrainHistory,
    pub checkpoint_path: PathBuf,
    pub final_metrics: MetricsReport,
    pub report: ParamReport,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainArtifacts, CliError> {
    let counts = closed_form_counts(config)?;
    if counts.total > TRAINABLE_TOTAL_LIMIT {
        return Err(CliError::Usage(format!(
            "this configuration has {} parameters and exists for shape accounting; \
             training it is not supported on the CPU engine — use `count-params` instead",
            counts.total
        )));
    }
    let (train_set, val_set) = load_split_dataset(config)?;
    let model = build_model(config)?;
    let report = count_params(&model);

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", config.output_dir.display())))?;
    let echo = config.to_toml();
    std::fs::write(config.output_dir.join("config.toml"), &echo)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let train_config = config.train_config();
    let outcome =
        train(&model, &train_set, &val_set, &train_config).map_err(|e| CliError::Runtime(e.to_string()))?;

    let history_csv = outcome.history.csv();
    std::fs::write(config.output_dir.join("history.csv"), &history_csv)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let final_metrics = *outcome.history.final_val().expect("epochs >= 1");
    let metrics_csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, final_metrics.csv_row());
    std::fs::write(config.output_dir.join("final_metrics.csv"), metrics_csv)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let checkpoint_path = config.output_dir.join("checkpoint.atls");
    let rng_state = RngState::capture(&outcome.rng);
    save_checkpoint(
        &checkpoint_path,
        &model,
        Some(&outcome.optimizer),
        config.train.epochs as u64,
        &rng_state,
        &echo,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    Ok(TrainArtifacts {
        output_dir: config.output_dir.clone(),
        history: outcome.history,
        checkpoint_path,
        final_metrics,
        report,
    })
}

fn model_from_checkpoint(path: &Path) -> Result<(ModelAssembly, RunConfig, CheckpointData), CliError> {
    let data = load_checkpoint(path).map_err(|e| CliError::Usage(e.to_string()))?;
    let config: RunConfig = toml::from_str(&data.config_text)
        .map_err(|e| CliError::Usage(format!("checkpoint carries an unreadable config: {e}")))?;
    let model = build_model(&config)?;
    apply_checkpoint(&model, &data).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((model, config, data))
}

pub fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    let (model, mut config, _) = model_from_checkpoint(checkpoint)?;
    if let Some(dir) = dataset_dir {
        config.dataset.source = "directory".into();
        config.dataset.directory = Some(dir.to_path_buf());
    }
    let (_, val_set) = load_split_dataset(&config)?;
    let metrics = evaluate(&model, &val_set, config.train.batch_size, 0.5)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(metrics)
}

pub fn cmd_predict(checkpoint: &Path, image_path: &Path, out_path: &Path) -> Result<(), CliError> {
    let (model, config, _) = model_from_checkpoint(checkpoint)?;
    let image = read_pnm(image_path).map_err(|e| CliError::Usage(e.to_string()))?;
    let size = config.encoder.image_size;

    // Normalize to [0,1] RGB planes at the model resolution.
    let n = image.width * image.height;
    let mut planes = vec![vec![0.0f64; n]; 3];
    for (c, plane) in planes.iter_mut().enumerate() {
        for (p, slot) in plane.iter_mut().enumerate() {
            *slot = match image.channels {
                3 => image.data[p * 3 + c] as f64 / 255.0,
                _ => image.data[p] as f64 / 255.0,
            };
        }
    }
    let mut values = Vec::with_capacity(3 * size * size);
    for plane in &planes {
        values.extend(resize_bilinear_plane(plane, image.height, image.width, size, size));
    }
    let input = Tensor::from_vec(values, &[1, 3, size, size])
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let logits = model.forward(&input).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mask = atlseg_core::decoder::predict_mask(&logits, 0.5)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mask_bytes: Vec<u8> = mask
        .values()
        .iter()
        .map(|&v| if v >= 0.5 { 255u8 } else { 0 })
        .collect();
    // Back to the native resolution of the input file.
    let native = resize_nearest(&mask_bytes, size, size, image.height, image.width);
    write_pgm(out_path, image.width, image.height, &native)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn cmd_count_params(config: &RunConfig, all_trainable: bool) -> Result<ParamReport, CliError> {
    let mut report = closed_form_counts(config)?;
    if all_trainable {
        report.trainable = report.total;
    }
    Ok(report)
}

pub fn format_param_report(report: &ParamReport) -> String {
    format!(
        "total      {}\ntrainable  {}\nratio      {:.4}\n",
        report.total,
        report.trainable,
        report.ratio()
    )
}

pub struct GradcheckReport {
    pub rows: Vec<(String, f64)>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|(_, e)| *e < GRADCHECK_TOLERANCE)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, err) in &self.rows {
            let status = if *err < GRADCHECK_TOLERANCE { "pass" } else { "FAIL" };
            out.push_str(&format!("{name:<20} {err:>12.3e}  {status}\n"));
        }
        out
    }
}

pub fn cmd_gradcheck() -> GradcheckReport {
    GradcheckReport {
        rows: FAMILY_NAMES
            .iter()
            .map(|&name| (name.to_string(), check_family(name).expect("known family")))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub midlay: String,
    pub residual: bool,
    pub placement: Placement,
    pub seed: u64,
    pub trainable: usize,
    pub outcome: Result<MetricsReport, String>,
    pub wall_seconds: f64,
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str =
        "name,midlay,residual,placement,P,REC,F1,OA,MIoU,Landslide-IoU,trainable_params,seed,status";

    /// Deterministic CSV (wall time appears only in the rendered table).
    pub fn csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let (metrics, status) = match &row.outcome {
                Ok(m) => (m.csv_row(), "ok".to_string()),
                Err(e) => (",,,,,".to_string(), e.replace([',', '\n'], ";")),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.name, row.midlay, row.residual, row.placement, metrics, row.trainable, row.seed, status
            ));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let headers = [
            "Model",
            "MidLay",
            "residual",
            "outside block",
            "P(%)",
            "REC(%)",
            "F1(%)",
            "OA(%)",
            "MIoU(%)",
            "Landslide-IoU(%)",
            "train params",
            "wall(s)",
        ];
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
        for row in &self.rows {
            let mut line = vec![
                row.name.clone(),
                row.midlay.clone(),
                if row.residual { "yes" } else { "no" }.into(),
                if row.placement == Placement::OutsideBlock { "yes" } else { "no" }.into(),
            ];
            match &row.outcome {
                Ok(m) => line.extend(m.table_cells()),
                Err(e) => {
                    line.extend(std::iter::repeat_n(String::from("-"), 5));
                    line.push(format!("failed: {e}"));
                }
            }
            line.push(row.trainable.to_string());
            line.push(format!("{:.1}", row.wall_seconds));
            cells.push(line);
        }
        atlseg_core::metrics::align_table(&cells)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.outcome.is_err())
    }
}

/// Trains and evaluates every ablation-grid variant for every seed. Rows
/// keep the grid's order (baseline last); runs execute on a small worker
/// pool, each fully isolated with its own dataset copy, model and RNG.
pub fn cmd_ablate(base: &RunConfig, seeds: &[u64]) -> Result<AblationReport, CliError> {
    validate_model_config(base)?;
    // Surface dataset problems before spawning workers.
    let _ = load_split_dataset(base)?;

    let mut tasks: Vec<(usize, String, u64)> = Vec::new();
    for name in VARIANT_NAMES {
        for &seed in seeds {
            tasks.push((tasks.len(), name.to_string(), seed));
        }
    }

    let results: Vec<Mutex<Option<AblationRow>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(tasks.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let (_, name, seed) = &tasks[i];
                let row = run_ablation_task(base, name, *seed);
                *results[i].lock().unwrap() = Some(row);
            });
        }
    });

    let rows = results
        .into_iter()
        .map(|cell| cell.into_inner().unwrap().expect("worker filled every slot"))
        .collect();
    Ok(AblationReport { rows })
}

fn run_ablation_task(base: &RunConfig, variant: &str, seed: u64) -> AblationRow {
    let started = Instant::now();
    let spec = make_variant(variant).expect("grid names are valid");
    let mut config = base.clone();
    config.adapter.variant = variant.to_string();
    config.train.seed = seed;
    let trainable = closed_form_counts(&config)
        .map(|r| r.trainable)
        .unwrap_or(0);

    let outcome = (|| -> Result<MetricsReport, String> {
        let (train_set, val_set) = load_split_dataset(&config).map_err(|e| e.to_string())?;
        let model = build_model(&config).map_err(|e| e.to_string())?;
        let run = train(&model, &train_set, &val_set, &config.train_config())
            .map_err(|e| e.to_string())?;
        Ok(*run.history.final_val().expect("epochs >= 1"))
    })();

    AblationRow {
        name: variant.to_string(),
        midlay: spec.midlay_label(),
        residual: spec.residual,
        placement: spec.placement,
        seed,
        trainable,
        outcome,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Renders the single-row metrics block used by `train` and `eval` output.
pub fn render_metrics(label: &str, metrics: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(MetricsReport::CSV_HEADER);
    out.push('\n');
    out.push_str(&metrics.csv_row());
    out.push('\n');
    out.push_str(&format_metrics_table(&[(label.to_string(), *metrics)]));
    out
}
