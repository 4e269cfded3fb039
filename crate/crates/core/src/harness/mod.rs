//! Run orchestration: configuration, data, the training loop, sweeps and
//! artifact files.

pub mod config;
pub mod dataset;
pub mod train;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::embedding::EmbeddingBank;
use crate::encoder::Mlp;
use crate::error::{PcpError, Result};

pub use config::{EncoderConfig, EvalConfig, Mode, OptimConfig, RunConfig, ScheduleConfig, SWEEP_AXES};
pub use dataset::{load_dataset, DataFormat, DataSource, Dataset, SyntheticSpec};
pub use train::{
    embed_dataset, train_on, EpochRecord, EpochView, Stage, StageTrace, Trainer, TrainObserver,
    TrainingOutcome,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.pcpw";
pub const EMBEDDINGS_FILE: &str = "embeddings.pcpe";
pub const CONFIG_FILE: &str = "config.json";
pub const HEADER_FILE: &str = "run_header.json";
pub const SUMMARY_FILE: &str = "summary.csv";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PcpError::io(path, e))
}

/// One JSON object per record, newline terminated.
pub fn metrics_jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Write the bank as a `PCPE` file.
pub fn export_embeddings(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    write_file(path, &bank.to_pcpe_bytes())
}

pub fn import_embeddings(path: &Path) -> Result<EmbeddingBank> {
    let bytes = fs::read(path).map_err(|e| PcpError::io(path, e))?;
    EmbeddingBank::from_pcpe_bytes(&bytes)
}

pub fn save_checkpoint(encoder: &Mlp, path: &Path) -> Result<()> {
    write_file(path, &encoder.to_pcpw_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| PcpError::io(path, e))?;
    Mlp::from_pcpw_bytes(&bytes)
}

#[derive(Serialize)]
struct RunHeader<'a> {
    mode: String,
    seed: u64,
    rounds: usize,
    train_samples: usize,
    test_samples: usize,
    bank_across_rounds: &'a str,
    parallel: bool,
}

/// Persist a finished run under `dir`.
pub fn write_outputs(
    dir: &Path,
    config: &RunConfig,
    outcome: &TrainingOutcome,
    train_len: usize,
    test_len: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PcpError::io(dir, e))?;
    write_file(&dir.join(METRICS_FILE), metrics_jsonl(&outcome.records).as_bytes())?;
    let mut timing = String::new();
    for r in &outcome.records {
        timing.push_str(&format!(
            "{{\"epoch\":{},\"wall_time\":{}}}\n",
            r.epoch, r.wall_time
        ));
    }
    write_file(&dir.join(TIMING_FILE), timing.as_bytes())?;
    save_checkpoint(&outcome.encoder, &dir.join(CHECKPOINT_FILE))?;
    export_embeddings(&outcome.bank, &dir.join(EMBEDDINGS_FILE))?;
    write_file(&dir.join(CONFIG_FILE), config.to_json().as_bytes())?;
    let header = RunHeader {
        mode: config.mode.to_string(),
        seed: config.seed,
        rounds: config.rounds,
        train_samples: train_len,
        test_samples: test_len,
        bank_across_rounds: "carried",
        parallel: crate::par::is_parallel(),
    };
    write_file(
        &dir.join(HEADER_FILE),
        serde_json::to_string_pretty(&header).expect("header serializes").as_bytes(),
    )
}

/// Load the configured data, train, and write artifacts when an output
/// directory is set.
pub fn run_training(config: &RunConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let source = config
        .dataset
        .as_ref()
        .ok_or_else(|| PcpError::ConfigError("no dataset configured".into()))?;
    let train = source.load()?;
    let test = config.test_dataset.as_ref().map(DataSource::load).transpose()?;
    let outcome = train_on(config, &train, test.as_ref(), &mut ())?;
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, config, &outcome, train.len(), test.as_ref().map_or(0, Dataset::len))?;
    }
    Ok(outcome)
}

/// Final record of one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub last: EpochRecord,
    pub records: Vec<EpochRecord>,
}

/// One run per value of `axis`, all sharing the template's seed.
pub fn sweep_on(
    template: &RunConfig,
    axis: &str,
    values: &[String],
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(PcpError::ConfigError("sweep needs at least one value".into()));
    }
    if !SWEEP_AXES.contains(&axis) {
        return Err(PcpError::ConfigError(format!(
            "unknown sweep axis {axis:?}; expected one of {SWEEP_AXES:?}"
        )));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = template.clone();
        c.set_axis(axis, v)?;
        c.validate()?;
        c.output_dir = template.output_dir.as_ref().map(|d| d.join(format!("{axis}={v}")));
        configs.push(c);
    }
    let mut rows = Vec::with_capacity(values.len());
    for (c, v) in configs.iter().zip(values) {
        let outcome = train_on(c, train, test, &mut ())?;
        if let Some(dir) = &c.output_dir {
            write_outputs(dir, c, &outcome, train.len(), test.map_or(0, Dataset::len))?;
        }
        rows.push(SweepRow {
            value: v.clone(),
            last: outcome.records.last().cloned().expect("at least one epoch"),
            records: outcome.records,
        });
    }
    if let Some(dir) = &template.output_dir {
        fs::create_dir_all(dir).map_err(|e| PcpError::io(dir, e))?;
        write_file(&dir.join(SUMMARY_FILE), summary_csv(axis, &rows)?.as_bytes())?;
    }
    Ok(rows)
}

/// Sweep over the template's configured dataset.
pub fn sweep(template: &RunConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    let source = template
        .dataset
        .as_ref()
        .ok_or_else(|| PcpError::ConfigError("no dataset configured".into()))?;
    let train = source.load()?;
    let test = template.test_dataset.as_ref().map(DataSource::load).transpose()?;
    sweep_on(template, axis, values, &train, test.as_ref())
}

/// Summary table: the swept value followed by the final record's fields.
pub fn summary_csv(axis: &str, rows: &[SweepRow]) -> Result<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        axis,
        "epoch",
        "num_clusters",
        "loss_instance",
        "loss_cluster",
        "loss_total",
        "kept_fraction",
        "demoted_count",
        "pulled_back_count",
        "knn_accuracy",
        "purity",
        "nmi",
        "filter_precision",
        "filter_recall",
    ];
    let csv_err = |e: csv::Error| PcpError::NumericError(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        let r = &row.last;
        w.write_record([
            row.value.clone(),
            r.epoch.to_string(),
            r.num_clusters.to_string(),
            r.loss_instance.to_string(),
            r.loss_cluster.to_string(),
            r.loss_total.to_string(),
            r.kept_fraction.to_string(),
            r.demoted_count.to_string(),
            r.pulled_back_count.to_string(),
            opt(r.knn_accuracy),
            opt(r.purity),
            opt(r.nmi),
            opt(r.filter_precision),
            opt(r.filter_recall),
        ])
        .map_err(csv_err)?;
    }
    let mut bytes = w.into_inner().map_err(|e| PcpError::NumericError(e.to_string()))?;
    bytes.flush().ok();
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Default output location for a run without an explicit directory.
pub fn default_output_dir(config: &RunConfig) -> PathBuf {
    PathBuf::from(format!("runs/{}-seed{}", config.mode, config.seed))
}
