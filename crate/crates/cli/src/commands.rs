//! Command implementations: pretrain, finetune, ablate, report.
//!
//! Every command is a pure function of (config, seed, data): outputs land
//! under the chosen --out directory and never inside input data
//! directories, and repeated runs produce bit-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use finsent_core::data::{
    self, Agreement, DataError, Document, LabeledSentence, Splits, Vocabulary,
};
use finsent_core::metrics::MetricsReport;
use finsent_core::model::{HeadSource, ModelError, ParamSet};
use finsent_core::schedule::{ScheduleError, StrategyPreset, TrainingPlan};
use finsent_core::train::{self, FinetuneSettings, PretrainCorpus, RunRecord, TrainError};

use crate::checkpoint::{self, Checkpoint, CheckpointError, Provenance};
use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Missing paths, unusable inputs, mismatched artifacts. Exit code 2.
    #[error("{0}")]
    Input(String),
    /// Malformed data files. Exit code 3.
    #[error("{0}")]
    Parse(String),
    /// Numeric or internal failures. Exit code 4.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Parse(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Parse(_) | DataError::Validation(_) => CliError::Parse(e.to_string()),
            DataError::Input(_) | DataError::Io { .. } => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Input(m) => CliError::Input(m),
            TrainError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Input(e.to_string()),
            ConfigError::Parse { .. } => CliError::Parse(e.to_string()),
            ConfigError::Invalid(_) => CliError::Input(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Input(e.to_string()),
            CheckpointError::Corrupt(_) | CheckpointError::Version(_) => {
                CliError::Parse(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

// ── Data loading ─────────────────────────────────────────────────────

fn load_phrasebank(config: &ExperimentConfig) -> Result<Vec<LabeledSentence>, CliError> {
    let path = config.data.phrasebank.as_ref().ok_or_else(|| {
        CliError::Input("config.data.phrasebank is required for this experiment".into())
    })?;
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Input(format!(
                "{} contains no files",
                path.display()
            )));
        }
        let mut all = Vec::new();
        for file in files {
            all.extend(data::parse_phrasebank(&file)?);
        }
        Ok(all)
    } else {
        Ok(data::parse_phrasebank(path)?)
    }
}

fn load_corpus(
    config: &ExperimentConfig,
) -> Result<(Vec<Document>, Option<data::FilterStats>), CliError> {
    let dir = config.data.corpus_dir.as_ref().ok_or_else(|| {
        CliError::Input("config.data.corpus_dir is required for this experiment".into())
    })?;
    if !dir.is_dir() {
        return Err(CliError::Input(format!(
            "corpus directory {} does not exist",
            dir.display()
        )));
    }
    let docs = data::read_corpus_dir(dir)?;
    if docs.iter().all(|d| d.sentences.is_empty()) {
        return Err(CliError::Input(format!(
            "corpus directory {} holds no sentences",
            dir.display()
        )));
    }
    if let Some(kw_path) = &config.data.keywords {
        let keywords = data::read_keywords(kw_path)?;
        let (kept, stats) = data::filter_corpus(&docs, &keywords)?;
        if kept.iter().all(|d| d.sentences.is_empty()) || kept.is_empty() {
            return Err(CliError::Input(
                "keyword filter removed every document".into(),
            ));
        }
        Ok((kept, Some(stats)))
    } else {
        Ok((docs, None))
    }
}

fn corpus_sentences(docs: &[Document]) -> Vec<String> {
    docs.iter()
        .flat_map(|d| d.sentences.iter().cloned())
        .collect()
}

/// Model weights plus vocabulary, either restored from a checkpoint (whose
/// embedded config must match) or freshly initialized.
fn params_and_vocab(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    seed: u64,
    vocab_corpus: &[String],
) -> Result<(ParamSet, Vocabulary, Option<String>), CliError> {
    match checkpoint_path {
        Some(path) => {
            let ckpt = checkpoint::load_checkpoint(path)?;
            if ckpt.params.config != config.model {
                return Err(CliError::Input(format!(
                    "checkpoint model config does not match the experiment config ({} vs {})",
                    serde_json::to_string(&ckpt.params.config).unwrap_or_default(),
                    serde_json::to_string(&config.model).unwrap_or_default()
                )));
            }
            let specials = ckpt.vocab.len().min(5);
            let vocab = Vocabulary::from_tokens(ckpt.vocab[specials..].iter().cloned());
            let hash = checkpoint::file_hash(path)?;
            Ok((ckpt.params, vocab, Some(hash)))
        }
        None => {
            let vocab = data::build_vocab(
                vocab_corpus.iter().map(|s| s.as_str()),
                config.model.vocab_size,
            )?;
            let params =
                ParamSet::init(&config.model, seed).map_err(|e| CliError::Input(e.to_string()))?;
            Ok((params, vocab, None))
        }
    }
}

fn provenance(config: &ExperimentConfig, seed: u64, parent: Option<String>) -> Provenance {
    Provenance {
        seed,
        config_hash: checkpoint::json_hash(config),
        parent,
    }
}

// ── Shared report shapes ─────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub provenance: Provenance,
    pub kind: String,
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_agreement: BTreeMap<String, MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<data::FilterStats>,
}

fn step_loss_csv(record: &RunRecord) -> String {
    let mut csv = String::from("step,loss\n");
    for (i, loss) in record.step_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, fmt_f64(*loss));
    }
    csv
}

fn val_loss_csv(records: &[(usize, &RunRecord)]) -> String {
    let mut csv = String::from("fold,epoch,val_loss,val_accuracy\n");
    for (fold, record) in records {
        for (e, loss) in record.epoch_val_loss.iter().enumerate() {
            let acc = record.epoch_val_accuracy.get(e).copied().unwrap_or(0.0);
            let _ = writeln!(csv, "{fold},{},{},{}", e + 1, fmt_f64(*loss), fmt_f64(acc));
        }
    }
    csv
}

fn confusion_csv(report: &MetricsReport) -> String {
    let labels = ["positive", "negative", "neutral"];
    let n = report.confusion.len();
    let mut csv = String::from("gold\\predicted");
    for c in 0..n {
        let _ = write!(csv, ",{}", labels.get(c).copied().unwrap_or("?"));
    }
    csv.push('\n');
    for (g, row) in report.confusion.iter().enumerate() {
        let _ = write!(csv, "{}", labels.get(g).copied().unwrap_or("?"));
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    csv
}

// ── pretrain ─────────────────────────────────────────────────────────

pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let seed = config.seeds[0];
    let (docs, filter_stats) = load_corpus(config)?;
    let sentences = corpus_sentences(&docs);
    if let Some(stats) = &filter_stats {
        println!(
            "keyword filter kept {}/{} documents",
            stats.kept, stats.total
        );
    }

    let vocab = data::build_vocab(
        sentences.iter().map(|s| s.as_str()),
        config.model.vocab_size,
    )?;
    let mut params =
        ParamSet::init(&config.model, seed).map_err(|e| CliError::Input(e.to_string()))?;
    let plan = config.pretrain_plan()?;
    let settings = config.pretrain_settings(seed);
    let corpus = if config.pretrain.nsp {
        PretrainCorpus::Documents(&docs)
    } else {
        PretrainCorpus::Sentences(&sentences)
    };
    let record = train::pretrain_mlm(&mut params, &vocab, &corpus, &plan, &settings)?;

    let ckpt = Checkpoint {
        params,
        vocab: vocab.tokens().to_vec(),
        provenance: provenance(config, seed, None),
    };
    checkpoint::save_checkpoint(&out.join("checkpoint.mbf"), &ckpt)?;
    write_file(&out.join("pretrain_loss.csv"), &step_loss_csv(&record))?;
    let doc = MetricsDocument {
        provenance: ckpt.provenance.clone(),
        kind: "pretrain".into(),
        metrics: None,
        by_agreement: BTreeMap::new(),
        runs: vec![record],
        mean_mse: None,
        mean_r2: None,
        filter: filter_stats,
    };
    write_file(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&doc).unwrap(),
    )?;
    println!(
        "pretraining complete; checkpoint at {}",
        out.join("checkpoint.mbf").display()
    );
    Ok(())
}

// ── finetune ─────────────────────────────────────────────────────────

fn split_labeled(
    config: &ExperimentConfig,
    records: &[LabeledSentence],
    seed: u64,
) -> Result<Splits<LabeledSentence>, CliError> {
    if config.train.stratified_split {
        Ok(data::split_dataset_stratified(records, seed)?)
    } else {
        Ok(data::split_dataset(records, seed)?)
    }
}

fn agreement_breakdown(
    params: &ParamSet,
    vocab: &Vocabulary,
    test: &[LabeledSentence],
    class_weights: &[f64],
    plan: &TrainingPlan,
    settings: &FinetuneSettings,
) -> Result<BTreeMap<String, MetricsReport>, CliError> {
    let mut by_agreement = BTreeMap::new();
    for level in Agreement::ALL {
        let subset: Vec<LabeledSentence> = test
            .iter()
            .filter(|s| s.agreement == level)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let report =
            train::evaluate_classifier(params, vocab, &subset, class_weights, plan, settings)?;
        by_agreement.insert(level.percent().to_string(), report);
    }
    Ok(by_agreement)
}

fn train_class_weights(
    train: &[LabeledSentence],
    num_classes: usize,
) -> Result<Vec<f64>, CliError> {
    let counts = train::count_labels(train, num_classes)?;
    let total: usize = counts.iter().sum();
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                (total as f64 / c as f64).sqrt()
            }
        })
        .collect())
}

pub fn cmd_finetune(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let seed = config.seeds[0];
    match config.kind {
        ExperimentKind::FinetuneCls | ExperimentKind::SizeSweep => {
            let records = load_phrasebank(config)?;
            let splits = split_labeled(config, &records, seed)?;
            let train_texts: Vec<String> = splits.train.iter().map(|s| s.text.clone()).collect();
            let (mut params, vocab, parent) =
                params_and_vocab(config, checkpoint_path, seed, &train_texts)?;
            let plan = config.plan.to_plan()?;
            let settings = config.finetune_settings(seed);

            if config.kind == ExperimentKind::SizeSweep {
                let sizes = config.train.sizes.clone().ok_or_else(|| {
                    CliError::Input("config.train.sizes is required for size-sweep".into())
                })?;
                let points = train::size_sweep(&params, &vocab, &splits, &sizes, &plan, &settings)?;
                let mut csv = String::from("size,test_weighted_ce,test_accuracy,test_macro_f1\n");
                for p in &points {
                    let t = p.record.test.as_ref().unwrap();
                    let _ = writeln!(
                        csv,
                        "{},{},{},{}",
                        p.size,
                        fmt_f64(t.weighted_ce),
                        fmt_f64(t.accuracy),
                        fmt_f64(t.macro_f1)
                    );
                }
                write_file(&out.join("sweep.csv"), &csv)?;
                let doc = MetricsDocument {
                    provenance: provenance(config, seed, parent),
                    kind: "size-sweep".into(),
                    metrics: None,
                    by_agreement: BTreeMap::new(),
                    runs: points.into_iter().map(|p| p.record).collect(),
                    mean_mse: None,
                    mean_r2: None,
                    filter: None,
                };
                write_file(
                    &out.join("metrics.json"),
                    &serde_json::to_string_pretty(&doc).unwrap(),
                )?;
                return Ok(());
            }

            let record =
                train::finetune_classifier(&mut params, &vocab, &splits, &plan, &settings)?;
            let class_weights = train_class_weights(&splits.train, config.model.num_classes)?;
            let test_report = record
                .test
                .clone()
                .expect("classification run always carries test metrics");
            let by_agreement = agreement_breakdown(
                &params,
                &vocab,
                &splits.test,
                &class_weights,
                &plan,
                &settings,
            )?;

            let prov = provenance(config, seed, parent);
            let ckpt = Checkpoint {
                params,
                vocab: vocab.tokens().to_vec(),
                provenance: prov.clone(),
            };
            checkpoint::save_checkpoint(&out.join("checkpoint.mbf"), &ckpt)?;
            write_file(&out.join("confusion.csv"), &confusion_csv(&test_report))?;
            write_file(&out.join("valloss.csv"), &val_loss_csv(&[(0, &record)]))?;
            write_file(&out.join("steploss.csv"), &step_loss_csv(&record))?;
            let doc = MetricsDocument {
                provenance: prov,
                kind: "finetune-cls".into(),
                metrics: Some(test_report),
                by_agreement,
                runs: vec![record],
                mean_mse: None,
                mean_r2: None,
                filter: None,
            };
            write_file(
                &out.join("metrics.json"),
                &serde_json::to_string_pretty(&doc).unwrap(),
            )?;
            Ok(())
        }
        ExperimentKind::FinetuneReg => {
            let path = config.data.fiqa.as_ref().ok_or_else(|| {
                CliError::Input("config.data.fiqa is required for finetune-reg".into())
            })?;
            let records = data::parse_fiqa(path)?;
            let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
            let (params, vocab, parent) = params_and_vocab(config, checkpoint_path, seed, &texts)?;
            let folds = data::kfold_split(&records, config.train.kfold, seed)?;
            let plan = config.plan.to_plan()?;
            let settings = config.finetune_settings(seed);
            let runs = train::finetune_regressor(&params, &vocab, &folds, &plan, &settings)?;
            let (mean_mse, mean_r2) = train::regression_summary(&runs);

            let rows: Vec<(usize, &RunRecord)> = runs.iter().enumerate().collect();
            write_file(&out.join("valloss.csv"), &val_loss_csv(&rows))?;
            let mut csv = String::from("fold,mse,r2\n");
            for (i, r) in runs.iter().enumerate() {
                let t = r.test.as_ref().unwrap();
                let _ = writeln!(
                    csv,
                    "{i},{},{}",
                    t.mse.map(fmt_f64).unwrap_or_default(),
                    t.r2.map(fmt_f64).unwrap_or_default()
                );
            }
            write_file(&out.join("folds.csv"), &csv)?;
            let doc = MetricsDocument {
                provenance: provenance(config, seed, parent),
                kind: "finetune-reg".into(),
                metrics: None,
                by_agreement: BTreeMap::new(),
                runs,
                mean_mse,
                mean_r2,
                filter: None,
            };
            write_file(
                &out.join("metrics.json"),
                &serde_json::to_string_pretty(&doc).unwrap(),
            )?;
            Ok(())
        }
        other => Err(CliError::Input(format!(
            "finetune cannot run a {:?} experiment; use the matching command",
            other
        ))),
    }
}

// ── ablate ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub cell: String,
    pub status: String,
    pub n_seeds: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub weighted_ce: Option<f64>,
    pub unweighted_ce: Option<f64>,
    pub note: String,
}

#[derive(Debug, Serialize)]
struct GridDocument {
    provenance: Provenance,
    kind: String,
    rows: Vec<GridRow>,
    per_seed: BTreeMap<String, Vec<CellSeedOutcome>>,
}

#[derive(Debug, Clone, Serialize)]
struct CellSeedOutcome {
    seed: u64,
    accuracy: f64,
    macro_f1: f64,
    weighted_ce: f64,
    unweighted_ce: f64,
    best_epoch: Option<usize>,
    /// Minimum validation loss across epochs, the model-selection signal.
    best_val_loss: Option<f64>,
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn grid_csv(rows: &[GridRow]) -> String {
    let mut csv =
        String::from("cell,status,n_seeds,accuracy,macro_f1,weighted_ce,unweighted_ce,note\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.cell,
            r.status,
            r.n_seeds,
            opt(r.accuracy),
            opt(r.macro_f1),
            opt(r.weighted_ce),
            opt(r.unweighted_ce),
            r.note
        );
    }
    csv
}

/// One grid cell evaluated across all config seeds. Returns per-seed
/// outcomes; errors abort the cell, not the grid.
fn run_cell(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    records: &[LabeledSentence],
    plan: &TrainingPlan,
    prepare: &dyn Fn(
        &mut ParamSet,
        &Vocabulary,
        &Splits<LabeledSentence>,
        u64,
    ) -> Result<(), CliError>,
) -> Result<Vec<CellSeedOutcome>, CliError> {
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let splits = split_labeled(config, records, seed)?;
        let train_texts: Vec<String> = splits.train.iter().map(|s| s.text.clone()).collect();
        let (mut params, vocab, _) = params_and_vocab(config, checkpoint_path, seed, &train_texts)?;
        prepare(&mut params, &vocab, &splits, seed)?;
        let settings = config.finetune_settings(seed);
        let record = train::finetune_classifier(&mut params, &vocab, &splits, plan, &settings)?;
        let t = record.test.as_ref().unwrap();
        let best_val_loss = record
            .epoch_val_loss
            .iter()
            .cloned()
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            });
        outcomes.push(CellSeedOutcome {
            seed,
            accuracy: t.accuracy,
            macro_f1: t.macro_f1,
            weighted_ce: t.weighted_ce,
            unweighted_ce: t.unweighted_ce,
            best_epoch: record.best_epoch,
            best_val_loss,
        });
    }
    Ok(outcomes)
}

fn summarize_cell(
    cell: &str,
    result: Result<Vec<CellSeedOutcome>, CliError>,
) -> (GridRow, Vec<CellSeedOutcome>) {
    match result {
        Ok(outcomes) => {
            let mut acc: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
            let mut f1: Vec<f64> = outcomes.iter().map(|o| o.macro_f1).collect();
            let mut wce: Vec<f64> = outcomes.iter().map(|o| o.weighted_ce).collect();
            let mut uce: Vec<f64> = outcomes.iter().map(|o| o.unweighted_ce).collect();
            (
                GridRow {
                    cell: cell.to_string(),
                    status: "ok".into(),
                    n_seeds: outcomes.len(),
                    accuracy: median(&mut acc),
                    macro_f1: median(&mut f1),
                    weighted_ce: median(&mut wce),
                    unweighted_ce: median(&mut uce),
                    note: String::new(),
                },
                outcomes,
            )
        }
        Err(e) => (
            GridRow {
                cell: cell.to_string(),
                status: "error".into(),
                n_seeds: 0,
                accuracy: None,
                macro_f1: None,
                weighted_ce: None,
                unweighted_ce: None,
                note: e.to_string().replace(',', ";"),
            },
            Vec::new(),
        ),
    }
}

pub fn cmd_ablate(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let records = load_phrasebank(config)?;
    let base_plan = config.plan.to_plan()?;
    let no_prepare = |_: &mut ParamSet, _: &Vocabulary, _: &Splits<LabeledSentence>, _: u64| Ok(());

    let mut rows = Vec::new();
    let mut per_seed: BTreeMap<String, Vec<CellSeedOutcome>> = BTreeMap::new();

    match config.kind {
        ExperimentKind::AblateStrategies => {
            for preset in [
                StrategyPreset::Na,
                StrategyPreset::Stl,
                StrategyPreset::StlGu,
                StrategyPreset::All,
            ] {
                let mut plan = TrainingPlan::preset(preset);
                plan.peak_lr = base_plan.peak_lr;
                plan.warmup_proportion = base_plan.warmup_proportion;
                plan.unfreeze_interval = base_plan.unfreeze_interval;
                plan.head_source = base_plan.head_source;
                let result = run_cell(config, checkpoint_path, &records, &plan, &no_prepare);
                let (row, outcomes) = summarize_cell(preset.as_str(), result);
                per_seed.insert(preset.as_str().to_string(), outcomes);
                rows.push(row);
            }
        }
        ExperimentKind::AblateLayers => {
            let mut cells: Vec<(String, HeadSource)> = (1..=config.model.num_layers)
                .map(|k| (format!("layer-{k}"), HeadSource::Layer(k)))
                .collect();
            cells.push((
                "mean-all".into(),
                HeadSource::MeanAll {
                    include_embedding: true,
                },
            ));
            for (name, source) in cells {
                let mut plan = base_plan.clone();
                plan.head_source = source;
                let result = run_cell(config, checkpoint_path, &records, &plan, &no_prepare);
                let (row, outcomes) = summarize_cell(&name, result);
                per_seed.insert(name, outcomes);
                rows.push(row);
            }
        }
        ExperimentKind::AblateLastk => {
            let ks: Vec<usize> = config
                .train
                .last_k_grid
                .clone()
                .unwrap_or_else(|| (0..=config.model.num_layers).collect());
            for k in ks {
                let plan = base_plan.clone().with_freeze_last_k(k);
                let result = run_cell(config, checkpoint_path, &records, &plan, &no_prepare);
                let (row, outcomes) = summarize_cell(&format!("last-{k}"), result);
                per_seed.insert(format!("last-{k}"), outcomes);
                rows.push(row);
            }
        }
        ExperimentKind::AblatePretraining => {
            let (docs, _) = load_corpus(config)?;
            let domain_sentences = corpus_sentences(&docs);
            let pretrain_plan = config.pretrain_plan()?;
            let arms: Vec<(&str, bool, bool)> = vec![
                ("vanilla", false, false),
                ("task", true, false),
                ("domain", false, true),
            ];
            for (name, task_arm, domain_arm) in arms {
                let arm_sentences = domain_sentences.clone();
                let pretrain_plan = pretrain_plan.clone();
                let prepare = move |params: &mut ParamSet,
                                    vocab: &Vocabulary,
                                    splits: &Splits<LabeledSentence>,
                                    seed: u64|
                      -> Result<(), CliError> {
                    let settings = config.pretrain_settings(seed);
                    if task_arm {
                        train::further_pretrain_on_task(
                            params,
                            vocab,
                            splits,
                            &pretrain_plan,
                            &settings,
                        )?;
                    }
                    if domain_arm {
                        train::pretrain_mlm(
                            params,
                            vocab,
                            &PretrainCorpus::Sentences(&arm_sentences),
                            &pretrain_plan,
                            &settings,
                        )?;
                    }
                    Ok(())
                };
                // All three arms must share one vocabulary so their token
                // spaces are comparable; build it from corpus plus task text.
                let result = run_cell_with_shared_vocab(
                    config,
                    &records,
                    &domain_sentences,
                    &base_plan,
                    &prepare,
                );
                let (row, outcomes) = summarize_cell(name, result);
                per_seed.insert(name.to_string(), outcomes);
                rows.push(row);
            }
        }
        other => {
            return Err(CliError::Input(format!(
                "ablate cannot run a {:?} experiment; use the matching command",
                other
            )))
        }
    }

    let prov = provenance(config, config.seeds[0], None);
    write_file(&out.join("grid.csv"), &grid_csv(&rows))?;
    let doc = GridDocument {
        provenance: prov,
        kind: format!("{:?}", config.kind),
        rows: rows.clone(),
        per_seed,
    };
    write_file(
        &out.join("grid.json"),
        &serde_json::to_string_pretty(&doc).unwrap(),
    )?;

    let failed = rows.iter().filter(|r| r.status == "error").count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} grid cell(s) failed; see grid.csv"
        )));
    }
    println!("ablation grid complete: {} cells", rows.len());
    Ok(())
}

/// Like `run_cell`, but the vocabulary is built from the union of the
/// domain corpus and the task training split rather than a checkpoint.
fn run_cell_with_shared_vocab(
    config: &ExperimentConfig,
    records: &[LabeledSentence],
    domain_sentences: &[String],
    plan: &TrainingPlan,
    prepare: &dyn Fn(
        &mut ParamSet,
        &Vocabulary,
        &Splits<LabeledSentence>,
        u64,
    ) -> Result<(), CliError>,
) -> Result<Vec<CellSeedOutcome>, CliError> {
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let splits = split_labeled(config, records, seed)?;
        let mut vocab_corpus: Vec<String> = domain_sentences.to_vec();
        vocab_corpus.extend(splits.train.iter().map(|s| s.text.clone()));
        let vocab = data::build_vocab(
            vocab_corpus.iter().map(|s| s.as_str()),
            config.model.vocab_size,
        )?;
        let mut params =
            ParamSet::init(&config.model, seed).map_err(|e| CliError::Input(e.to_string()))?;
        prepare(&mut params, &vocab, &splits, seed)?;
        let settings = config.finetune_settings(seed);
        let record = train::finetune_classifier(&mut params, &vocab, &splits, plan, &settings)?;
        let t = record.test.as_ref().unwrap();
        let best_val_loss = record
            .epoch_val_loss
            .iter()
            .cloned()
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            });
        outcomes.push(CellSeedOutcome {
            seed,
            accuracy: t.accuracy,
            macro_f1: t.macro_f1,
            weighted_ce: t.weighted_ce,
            unweighted_ce: t.unweighted_ce,
            best_epoch: record.best_epoch,
            best_val_loss,
        });
    }
    Ok(outcomes)
}

// ── report ───────────────────────────────────────────────────────────

pub fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let metrics_path = dir.join("metrics.json");
    let grid_path = dir.join("grid.csv");
    let mut printed = false;

    if metrics_path.is_file() {
        let content = fs::read_to_string(&metrics_path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", metrics_path.display())))?;
        let doc: MetricsDocument = serde_json::from_str(&content)
            .map_err(|e| CliError::Parse(format!("{}: {e}", metrics_path.display())))?;
        println!("kind:        {}", doc.kind);
        println!("config hash: {}", doc.provenance.config_hash);
        println!("seed:        {}", doc.provenance.seed);
        if let Some(parent) = &doc.provenance.parent {
            println!("parent:      {parent}");
        }
        if let Some(m) = &doc.metrics {
            println!(
                "test: accuracy {:.4}  macro-F1 {:.4}  weighted CE {:.4}  (n = {})",
                m.accuracy, m.macro_f1, m.weighted_ce, m.n
            );
        }
        for (level, m) in &doc.by_agreement {
            println!(
                "  agreement {level:>3}%: accuracy {:.4}  macro-F1 {:.4}  (n = {})",
                m.accuracy, m.macro_f1, m.n
            );
        }
        if let (Some(mse), r2) = (doc.mean_mse, doc.mean_r2) {
            println!(
                "regression: mean MSE {:.5}  mean R2 {}",
                mse,
                r2.map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        for run in &doc.runs {
            if let Some(best) = run.best_epoch {
                println!(
                    "  run seed {}: best epoch {} of {}",
                    run.seed,
                    best,
                    run.epoch_val_loss.len()
                );
            }
        }
        printed = true;
    }

    if grid_path.is_file() {
        let content = fs::read_to_string(&grid_path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", grid_path.display())))?;
        println!("{content}");
        printed = true;
    }

    if !printed {
        return Err(CliError::Input(format!(
            "no metrics.json or grid.csv found under {}",
            dir.display()
        )));
    }
    Ok(())
}
