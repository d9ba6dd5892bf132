//! End-to-end run: (synthesize | load) → split → compose → train → evaluate,
//! driven by one TOML or JSON config.
//!
//! ```toml
//! [synth]              # optional; replaces [data].dataset / [data].store
//! n_records = 2500
//!
//! [data]
//! train_fraction = 0.8 # used when no separate train_dataset is given
//! split_ratio = 0.7    # validation share of the held-out records
//! split_seed = 0
//!
//! [compose]
//! base = "cond"
//! subtract_condition = true
//!
//! [head]
//! kind = "nonlinear"
//! k = 16
//!
//! [train]
//! max_epochs = 50
//!
//! [output]
//! dir = "runs/synthetic"
//! ```
//!
//! Every output file is a pure function of the config: no timestamps, no
//! absolute paths, floats printed in shortest round-trip form.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compose::{compose_dataset, CompositionVariant};
use crate::dataset::{
    load_dataset, split_dataset, split_with_train, write_dataset, CstsRecord, DatasetFormat,
    DatasetSplit, DEFAULT_VALIDATION_RATIO,
};
use crate::embstore::{read_store, write_store, EmbeddingStore};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::projection::{train, write_checkpoint, EpochRecord, HeadKind, HeadSpec, TrainConfig};
use crate::synth::{synth, SynthConfig};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TEST_SCORES_FILE: &str = "test_scores.csv";
pub const SYNTH_DATASET_FILE: &str = "dataset.jsonl";
pub const SYNTH_STORE_FILE: &str = "store.cemb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Records to evaluate on (and to train on when `train_dataset` is unset).
    pub dataset: Option<PathBuf>,
    pub store: Option<PathBuf>,
    /// Separate training records; must be served by the same store.
    pub train_dataset: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            store: None,
            train_dataset: None,
            train_fraction: 0.8,
            split_ratio: DEFAULT_VALIDATION_RATIO,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

fn default_variant() -> CompositionVariant {
    CompositionVariant::COND_MINUS_C
}

fn default_head() -> HeadSpec {
    HeadSpec::new(HeadKind::Nonlinear, 16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_variant")]
    pub compose: CompositionVariant,
    #[serde(default = "default_head")]
    pub head: HeadSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl PipelineConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`. Relative
    /// paths in `[data]` and `[output]` resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        config.rebase(path.parent().unwrap_or_else(|| Path::new("")));
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.data.dataset,
            &mut self.data.store,
            &mut self.data.train_dataset,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match (&self.synth, &self.data.dataset, &self.data.store) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => return bad("[synth] and [data].dataset/store are exclusive"),
            (None, _, _) => return bad("need either [synth] or both [data].dataset and [data].store"),
        }
        if self.synth.is_some() && self.data.train_dataset.is_some() {
            return bad("[data].train_dataset cannot be combined with [synth]");
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub variant: CompositionVariant,
    pub head: HeadSpec,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_spearman: Option<f64>,
    pub test_spearman: f64,
    /// Raw cosine of the composed test pairs, without the head.
    pub test_spearman_unsupervised: f64,
}

/// Writes `epoch,train_loss,val_spearman`; an undefined Spearman is left blank.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["epoch", "train_loss", "val_spearman"]).map_err(csv_error)?;
    for h in history {
        let val = h.val_spearman.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([h.epoch.to_string(), h.train_loss.to_string(), val])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `record_id,score,rating` per pair.
pub fn write_scores_csv(path: &Path, ids: &[&str], scores: &[f64], ratings: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["record_id", "score", "rating"]).map_err(csv_error)?;
    for ((id, s), r) in ids.iter().zip(scores).zip(ratings) {
        w.write_record([id.to_string(), s.to_string(), r.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn load_inputs(config: &PipelineConfig, out: &Path) -> Result<(Vec<CstsRecord>, EmbeddingStore)> {
    if let Some(s) = &config.synth {
        let generated = synth(s)?;
        write_dataset(&generated.records, &out.join(SYNTH_DATASET_FILE))?;
        write_store(&generated.store, &out.join(SYNTH_STORE_FILE))?;
        return Ok((generated.records, generated.store));
    }
    let (dataset, store) = match (&config.data.dataset, &config.data.store) {
        (Some(d), Some(s)) => (d, s),
        _ => unreachable!("validated"),
    };
    Ok((load_dataset(dataset, DatasetFormat::Jsonl)?, read_store(store)?))
}

fn split(config: &PipelineConfig, records: &[CstsRecord]) -> Result<DatasetSplit> {
    let d = &config.data;
    Ok(match &d.train_dataset {
        Some(path) => {
            let mut s = split_dataset(records, d.split_ratio, d.split_seed)?;
            s.train = load_dataset(path, DatasetFormat::Jsonl)?;
            s
        }
        None => split_with_train(records, d.train_fraction, d.split_ratio, d.split_seed)?,
    })
}

/// Runs every stage and writes the checkpoint, report, training history and
/// test scores into `config.output.dir`. Errors carry the failing stage name.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let out = &config.output.dir;
    fs::create_dir_all(out).map_err(|e| Error::from(e).in_stage("output"))?;

    let stage = if config.synth.is_some() { "synth" } else { "load" };
    let (records, store) = load_inputs(config, out).map_err(|e| e.in_stage(stage))?;
    let parts = split(config, &records).map_err(|e| e.in_stage("split"))?;

    let variant = config.compose;
    let compose = |rs: &[CstsRecord]| compose_dataset(rs, &store, variant).map_err(Error::from);
    let (train_pairs, val_pairs, test_pairs) = (|| {
        Ok::<_, Error>((
            compose(&parts.train)?,
            compose(&parts.validation)?,
            compose(&parts.test)?,
        ))
    })()
    .map_err(|e| e.in_stage("compose"))?;

    let outcome = train(&train_pairs, &val_pairs, &config.train, config.head)
        .map_err(|e| Error::from(e).in_stage("train"))?;

    let (projected, unsupervised) = (|| {
        Ok::<_, Error>((
            evaluate(&test_pairs, Some(&outcome.model))?,
            evaluate(&test_pairs, None)?,
        ))
    })()
    .map_err(|e| e.in_stage("eval"))?;

    let report = PipelineReport {
        variant,
        head: config.head,
        n_train: train_pairs.len(),
        n_validation: val_pairs.len(),
        n_test: test_pairs.len(),
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        val_spearman: outcome.best_val_spearman,
        test_spearman: projected.report.spearman,
        test_spearman_unsupervised: unsupervised.report.spearman,
    };

    (|| {
        write_checkpoint(
            &out.join(CHECKPOINT_FILE),
            &outcome.model,
            config.train.seed,
            outcome.best_epoch,
            outcome.best_val_spearman,
        )?;
        write_json(&out.join(REPORT_FILE), &report)?;
        write_history_csv(&out.join(HISTORY_FILE), &outcome.history)?;
        let ids: Vec<&str> = test_pairs.iter().map(|p| p.record_id.as_str()).collect();
        write_scores_csv(
            &out.join(TEST_SCORES_FILE),
            &ids,
            &projected.scores,
            &projected.ratings,
        )
    })()
    .map_err(|e| e.in_stage("write"))?;
    Ok(report)
}
