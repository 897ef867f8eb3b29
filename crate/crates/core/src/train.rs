//! Training loops for further pre-training and fine-tuning, model selection
//! on validation loss, and evaluation drivers.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, TensorError};
use crate::data::{
    make_mlm_batch, make_nsp_batch, DataError, Document, LabeledSentence, RegressionExample,
    Splits, Vocabulary,
};
use crate::metrics::{classification_metrics, regression_metrics, MetricsError, MetricsReport};
use crate::model::{
    bind_encoder, bind_head, classify, collect_grads, group_of, mlm_logits, nsp_logits, regress,
    HeadKind, ModelError, ParamSet, TokenBatch,
};
use crate::rng;
use crate::schedule::{
    adam_step, frozen_set, group_learning_rates, stlr_lr, OptimizerState, ScheduleError,
    TrainingPlan,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Everything recorded about one training run. Wall-clock timings are kept
/// in memory but never serialized, so reports stay bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub step_losses: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were kept; the argmin of validation loss.
    pub best_epoch: Option<usize>,
    pub test: Option<MetricsReport>,
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl RunRecord {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            step_losses: Vec::new(),
            epoch_val_loss: Vec::new(),
            epoch_val_accuracy: Vec::new(),
            best_epoch: None,
            test: None,
            wall_clock_secs: Vec::new(),
        }
    }
}

/// 1-based index of the smallest validation loss, earliest on ties.
pub fn select_best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &loss) in val_losses.iter().enumerate() {
        if best.map(|(_, b)| loss < b).unwrap_or(true) {
            best = Some((i + 1, loss));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 64,
            max_len: 64,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            max_len: 64,
            mask_rate: 0.15,
            seed: 42,
        }
    }
}

/// Unlabeled input for the masked-LM objective. Document corpora add the
/// next-sentence objective on top.
pub enum PretrainCorpus<'a> {
    Sentences(&'a [String]),
    Documents(&'a [Document]),
}

pub fn count_labels(
    data: &[LabeledSentence],
    num_classes: usize,
) -> Result<Vec<usize>, TrainError> {
    let mut counts = vec![0usize; num_classes];
    for r in data {
        let idx = r.label.index();
        if idx >= num_classes {
            return Err(TrainError::Input(format!(
                "label {} outside the {num_classes}-class head",
                r.label
            )));
        }
        counts[idx] += 1;
    }
    Ok(counts)
}

fn encode_labeled(
    vocab: &Vocabulary,
    chunk: &[&LabeledSentence],
    max_len: usize,
) -> Result<(TokenBatch, Vec<usize>), TrainError> {
    let texts: Vec<&str> = chunk.iter().map(|s| s.text.as_str()).collect();
    let batch = crate::data::encode_batch(vocab, &texts, max_len)?;
    let labels = chunk.iter().map(|s| s.label.index()).collect();
    Ok((batch, labels))
}

/// Run the classifier over a dataset in evaluation mode and compute metrics.
pub fn evaluate_classifier(
    params: &ParamSet,
    vocab: &Vocabulary,
    data: &[LabeledSentence],
    class_weights: &[f64],
    plan: &TrainingPlan,
    settings: &FinetuneSettings,
) -> Result<MetricsReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Input("empty evaluation set".into()));
    }
    let num_classes = params.config.num_classes;
    let mut logits_all: Vec<Scalar> = Vec::with_capacity(data.len() * num_classes);
    let mut gold = Vec::with_capacity(data.len());
    let refs: Vec<&LabeledSentence> = data.iter().collect();
    for chunk in refs.chunks(settings.batch_size.max(1)) {
        let (batch, labels) = encode_labeled(vocab, chunk, settings.max_len)?;
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, params, |_| false);
        let head = bind_head(&mut tape, params, HeadKind::Classification, |_| false);
        let output = enc.encode(&mut tape, &batch, None)?;
        let logits = classify(&mut tape, &head, &output, plan.head_source, 0.0, None)?;
        logits_all.extend_from_slice(tape.data(logits));
        gold.extend(labels);
    }
    Ok(classification_metrics(
        &logits_all,
        num_classes,
        &gold,
        class_weights,
    )?)
}

fn check_disjoint(splits: &Splits<LabeledSentence>) -> Result<(), TrainError> {
    let train: HashSet<&str> = splits.train.iter().map(|s| s.text.as_str()).collect();
    for (name, part) in [("validation", &splits.validation), ("test", &splits.test)] {
        for s in part {
            if train.contains(s.text.as_str()) {
                return Err(TrainError::Input(format!(
                    "{name} split overlaps the train split: {:?}",
                    s.text
                )));
            }
        }
    }
    let val: HashSet<&str> = splits.validation.iter().map(|s| s.text.as_str()).collect();
    for s in &splits.test {
        if val.contains(s.text.as_str()) {
            return Err(TrainError::Input(format!(
                "test split overlaps the validation split: {:?}",
                s.text
            )));
        }
    }
    Ok(())
}

/// With the head attached to encoder layer k, layers above k never see the
/// loss; they are left out of the update entirely and stay at their
/// starting weights.
fn reachable_from_head(source: crate::model::HeadSource, group: &str) -> bool {
    match source {
        crate::model::HeadSource::Layer(k) => match group.strip_prefix("encoder.") {
            Some(idx) => idx.parse::<usize>().map(|i| i <= k).unwrap_or(true),
            None => true,
        },
        _ => true,
    }
}

/// Fine-tune the classification head (and whatever the plan leaves
/// unfrozen) with weighted cross entropy; after each epoch evaluate on the
/// validation split and keep the best epoch's weights. Test metrics are
/// computed once, on the kept checkpoint.
pub fn finetune_classifier(
    params: &mut ParamSet,
    vocab: &Vocabulary,
    splits: &Splits<LabeledSentence>,
    plan: &TrainingPlan,
    settings: &FinetuneSettings,
) -> Result<RunRecord, TrainError> {
    if splits.train.is_empty() || splits.validation.is_empty() || splits.test.is_empty() {
        return Err(TrainError::Input(
            "all three splits must be non-empty".into(),
        ));
    }
    check_disjoint(splits)?;
    let num_classes = params.config.num_classes;
    let num_layers = params.config.num_layers;
    let counts = count_labels(&splits.train, num_classes)?;
    count_labels(&splits.validation, num_classes)?;
    count_labels(&splits.test, num_classes)?;
    // Weights come from the train split only; a class never seen in
    // training gets weight 1 so evaluation stays defined.
    let class_weights: Vec<f64> = {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    1.0
                } else {
                    (total as f64 / c as f64).sqrt()
                }
            })
            .collect()
    };
    let weights_scalar: Vec<Scalar> = class_weights.iter().map(|&w| w as Scalar).collect();

    let steps_per_epoch = splits.train.len().div_ceil(settings.batch_size.max(1));
    let total_steps = settings.epochs * steps_per_epoch;
    let mut plan = plan.clone();
    if plan.total_steps == 0 {
        plan.total_steps = total_steps;
    }
    plan.validate()?;

    let mut record = RunRecord::new(settings.seed);
    let mut state = OptimizerState::new();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut step = 0usize;

    for epoch in 1..=settings.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::derive(
            settings.seed,
            &[rng::STREAM_SHUFFLE, epoch as u64],
        ));
        order.shuffle(&mut shuffle_rng);

        for (batch_idx, chunk_ids) in order.chunks(settings.batch_size.max(1)).enumerate() {
            let chunk: Vec<&LabeledSentence> =
                chunk_ids.iter().map(|&i| &splits.train[i]).collect();
            let (batch, labels) = encode_labeled(vocab, &chunk, settings.max_len)?;
            let frozen = frozen_set(&plan, step, steps_per_epoch, num_layers)?;
            let trainable = |name: &str| {
                let group = group_of(name);
                !frozen.contains(&group) && reachable_from_head(plan.head_source, &group)
            };

            let mut tape = Tape::new();
            let enc = bind_encoder(&mut tape, params, trainable);
            let head = bind_head(&mut tape, params, HeadKind::Classification, trainable);
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng::derive(
                settings.seed,
                &[rng::STREAM_DROPOUT, epoch as u64, batch_idx as u64],
            ));
            let output = enc.encode(&mut tape, &batch, Some(&mut dropout_rng))?;
            let logits = classify(
                &mut tape,
                &head,
                &output,
                plan.head_source,
                params.config.dropout as Scalar,
                Some(&mut dropout_rng),
            )?;
            let loss = tape.cross_entropy_weighted(logits, &labels, &weights_scalar)?;
            tape.backward(loss)?;
            record.step_losses.push(tape.value(loss) as f64);

            let grads = collect_grads(&tape, &[enc.bound(), head.bound()]);
            let base_lr = stlr_lr(&plan, (step + 1).min(plan.total_steps))?;
            let lrs = group_learning_rates(&plan, base_lr, num_layers);
            let bound: Vec<String> = enc
                .bound()
                .iter()
                .chain(head.bound().iter())
                .map(|(n, _)| n.clone())
                .filter(|n| reachable_from_head(plan.head_source, &group_of(n)))
                .collect();
            adam_step(params, &grads, &mut state, &lrs, &frozen, &bound)?;
            step += 1;
        }

        let val = evaluate_classifier(
            params,
            vocab,
            &splits.validation,
            &class_weights,
            &plan,
            settings,
        )?;
        record.epoch_val_loss.push(val.weighted_ce);
        record.epoch_val_accuracy.push(val.accuracy);
        if best
            .as_ref()
            .map(|(b, _)| val.weighted_ce < *b)
            .unwrap_or(true)
        {
            best = Some((val.weighted_ce, params.clone()));
        }
        record.wall_clock_secs.push(started.elapsed().as_secs_f64());
    }

    if let Some((_, best_params)) = best {
        *params = best_params;
    }
    record.best_epoch = select_best_epoch(&record.epoch_val_loss);
    record.test = Some(evaluate_classifier(
        params,
        vocab,
        &splits.test,
        &class_weights,
        &plan,
        settings,
    )?);
    Ok(record)
}

/// Optimize the masked-LM objective (plus next-sentence prediction when the
/// corpus is documents) over the corpus for the given number of epochs.
pub fn pretrain_mlm(
    params: &mut ParamSet,
    vocab: &Vocabulary,
    corpus: &PretrainCorpus,
    plan: &TrainingPlan,
    settings: &PretrainSettings,
) -> Result<RunRecord, TrainError> {
    let sentence_count = match corpus {
        PretrainCorpus::Sentences(s) => s.len(),
        PretrainCorpus::Documents(d) => d.iter().map(|doc| doc.sentences.len()).sum(),
    };
    if sentence_count == 0 {
        return Err(TrainError::Input("empty pre-training corpus".into()));
    }
    let num_layers = params.config.num_layers;
    let vocab_weights: Vec<Scalar> = vec![1.0; params.config.vocab_size];
    let nsp_weights: Vec<Scalar> = vec![1.0, 1.0];
    if vocab.len() > params.config.vocab_size {
        return Err(TrainError::Input(format!(
            "vocabulary ({}) exceeds model vocab_size ({})",
            vocab.len(),
            params.config.vocab_size
        )));
    }

    let steps_per_epoch = sentence_count.div_ceil(settings.batch_size.max(1));
    let mut plan = plan.clone();
    if plan.total_steps == 0 {
        plan.total_steps = settings.epochs * steps_per_epoch;
    }
    plan.validate()?;

    let mut record = RunRecord::new(settings.seed);
    let mut state = OptimizerState::new();
    let mut step = 0usize;

    for epoch in 1..=settings.epochs {
        let started = Instant::now();
        let epoch_order: Vec<usize> = match corpus {
            PretrainCorpus::Sentences(sentences) => {
                let mut order: Vec<usize> = (0..sentences.len()).collect();
                let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::derive(
                    settings.seed,
                    &[rng::STREAM_SHUFFLE, epoch as u64],
                ));
                order.shuffle(&mut shuffle_rng);
                order
            }
            PretrainCorpus::Documents(_) => Vec::new(),
        };
        for batch_idx in 0..steps_per_epoch {
            let mask_seed = rng::derive(
                settings.seed,
                &[rng::STREAM_MASK, epoch as u64, batch_idx as u64],
            );
            let masked = match corpus {
                PretrainCorpus::Sentences(sentences) => {
                    let chunk: Vec<&str> = epoch_order[batch_idx * settings.batch_size
                        ..((batch_idx + 1) * settings.batch_size).min(epoch_order.len())]
                        .iter()
                        .map(|&i| sentences[i].as_str())
                        .collect();
                    make_mlm_batch(
                        &chunk,
                        vocab,
                        settings.max_len,
                        settings.mask_rate,
                        mask_seed,
                    )?
                }
                PretrainCorpus::Documents(docs) => make_nsp_batch(
                    docs,
                    vocab,
                    settings.batch_size,
                    settings.max_len,
                    settings.mask_rate,
                    mask_seed,
                )?,
            };
            if masked.masked_positions.is_empty() {
                continue;
            }

            let frozen = frozen_set(&plan, step, steps_per_epoch, num_layers)?;
            let trainable = |name: &str| !frozen.contains(&group_of(name));
            let mut tape = Tape::new();
            let enc = bind_encoder(&mut tape, params, trainable);
            let mlm_head = bind_head(&mut tape, params, HeadKind::Mlm, trainable);
            let nsp_head = masked
                .is_next
                .as_ref()
                .map(|_| bind_head(&mut tape, params, HeadKind::Nsp, trainable));

            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng::derive(
                settings.seed,
                &[rng::STREAM_DROPOUT, epoch as u64, batch_idx as u64],
            ));
            let output = enc.encode(&mut tape, &masked.tokens, Some(&mut dropout_rng))?;
            let logits = mlm_logits(&mut tape, &mlm_head, &output, &masked.masked_positions)?;
            let targets: Vec<usize> = masked.masked_targets.iter().map(|&t| t as usize).collect();
            let mut loss = tape.cross_entropy_weighted(logits, &targets, &vocab_weights)?;
            if let (Some(head), Some(is_next)) = (&nsp_head, &masked.is_next) {
                let nsp = nsp_logits(&mut tape, head, &output)?;
                let nsp_labels: Vec<usize> = is_next.iter().map(|&b| usize::from(b)).collect();
                let nsp_loss = tape.cross_entropy_weighted(nsp, &nsp_labels, &nsp_weights)?;
                loss = tape.add(loss, nsp_loss)?;
            }
            tape.backward(loss)?;
            record.step_losses.push(tape.value(loss) as f64);

            let mut bindings: Vec<&[(String, crate::autograd::TensorId)]> =
                vec![enc.bound(), mlm_head.bound()];
            if let Some(head) = &nsp_head {
                bindings.push(head.bound());
            }
            let grads = collect_grads(&tape, &bindings);
            let base_lr = stlr_lr(&plan, (step + 1).min(plan.total_steps.max(1)))?;
            let lrs = group_learning_rates(&plan, base_lr, num_layers);
            let bound: Vec<String> = bindings
                .iter()
                .flat_map(|b| b.iter().map(|(n, _)| n.clone()))
                .collect();
            adam_step(params, &grads, &mut state, &lrs, &frozen, &bound)?;
            step += 1;
        }
        record.wall_clock_secs.push(started.elapsed().as_secs_f64());
    }
    Ok(record)
}

/// Further pre-training on the task data itself: the corpus is exactly the
/// classification training split, never the validation or test split.
pub fn further_pretrain_on_task(
    params: &mut ParamSet,
    vocab: &Vocabulary,
    splits: &Splits<LabeledSentence>,
    plan: &TrainingPlan,
    settings: &PretrainSettings,
) -> Result<RunRecord, TrainError> {
    let sentences: Vec<String> = splits.train.iter().map(|s| s.text.clone()).collect();
    pretrain_mlm(
        params,
        vocab,
        &PretrainCorpus::Sentences(&sentences),
        plan,
        settings,
    )
}

/// Masked-token prediction accuracy on held-out sentences, in eval mode.
pub fn mlm_heldout_accuracy(
    params: &ParamSet,
    vocab: &Vocabulary,
    sentences: &[String],
    settings: &PretrainSettings,
) -> Result<f64, TrainError> {
    if sentences.is_empty() {
        return Err(TrainError::Input("empty held-out set".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let refs: Vec<&str> = sentences.iter().map(|s| s.as_str()).collect();
    for (batch_idx, chunk) in refs.chunks(settings.batch_size.max(1)).enumerate() {
        let mask_seed = rng::derive(settings.seed, &[rng::STREAM_MASK, 0, batch_idx as u64]);
        let masked = make_mlm_batch(
            chunk,
            vocab,
            settings.max_len,
            settings.mask_rate,
            mask_seed,
        )?;
        if masked.masked_positions.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, params, |_| false);
        let head = bind_head(&mut tape, params, HeadKind::Mlm, |_| false);
        let output = enc.encode(&mut tape, &masked.tokens, None)?;
        let logits = mlm_logits(&mut tape, &head, &output, &masked.masked_positions)?;
        let v = params.config.vocab_size;
        let data = tape.data(logits);
        for (i, &target) in masked.masked_targets.iter().enumerate() {
            let row = &data[i * v..(i + 1) * v];
            let mut best = 0;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            if best == target as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(TrainError::Input(
            "no maskable tokens in held-out set".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

fn evaluate_regressor(
    params: &ParamSet,
    vocab: &Vocabulary,
    data: &[RegressionExample],
    settings: &FinetuneSettings,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    let refs: Vec<&RegressionExample> = data.iter().collect();
    for chunk in refs.chunks(settings.batch_size.max(1)) {
        let texts: Vec<&str> = chunk.iter().map(|r| r.text.as_str()).collect();
        let batch = crate::data::encode_batch(vocab, &texts, settings.max_len)?;
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, params, |_| false);
        let head = bind_head(&mut tape, params, HeadKind::Regression, |_| false);
        let output = enc.encode(&mut tape, &batch, None)?;
        let pred = regress(&mut tape, &head, &output)?;
        predictions.extend(tape.data(pred).iter().map(|&p| p as f64));
        targets.extend(chunk.iter().map(|r| r.score));
    }
    Ok((predictions, targets))
}

fn regression_report(predictions: &[f64], targets: &[f64]) -> Result<MetricsReport, TrainError> {
    let reg = regression_metrics(predictions, targets)?;
    Ok(MetricsReport {
        n: targets.len(),
        accuracy: 0.0,
        macro_f1: 0.0,
        per_class_f1: Vec::new(),
        weighted_ce: 0.0,
        unweighted_ce: 0.0,
        confusion: Vec::new(),
        absent_classes: Vec::new(),
        mse: Some(reg.mse),
        r2: reg.r2,
        r2_degenerate: reg.degenerate_targets,
    })
}

/// Independent fine-tuning per cross-validation fold, each starting from
/// the same checkpoint. Within each fold 20% of the training portion is set
/// aside for epoch selection; the fold's test portion is scored once.
pub fn finetune_regressor(
    start: &ParamSet,
    vocab: &Vocabulary,
    folds: &[(Vec<RegressionExample>, Vec<RegressionExample>)],
    plan: &TrainingPlan,
    settings: &FinetuneSettings,
) -> Result<Vec<RunRecord>, TrainError> {
    if folds.len() < 2 {
        return Err(TrainError::Input(format!(
            "{} folds, need at least 2",
            folds.len()
        )));
    }
    let mut seen_test: HashSet<&str> = HashSet::new();
    for (train, test) in folds {
        let train_texts: HashSet<&str> = train.iter().map(|r| r.text.as_str()).collect();
        for r in test {
            if train_texts.contains(r.text.as_str()) {
                return Err(TrainError::Input(format!(
                    "fold test example also in its train portion: {:?}",
                    r.text
                )));
            }
            if !seen_test.insert(r.text.as_str()) {
                return Err(TrainError::Input(format!(
                    "example appears in two test folds: {:?}",
                    r.text
                )));
            }
        }
    }

    let num_layers = start.config.num_layers;
    let mut records = Vec::with_capacity(folds.len());
    for (fold_idx, (fold_train, fold_test)) in folds.iter().enumerate() {
        if fold_train.len() < 2 {
            return Err(TrainError::Input(format!(
                "fold {fold_idx}: train portion too small"
            )));
        }
        let mut order: Vec<usize> = (0..fold_train.len()).collect();
        let mut split_rng = ChaCha8Rng::seed_from_u64(rng::derive(
            settings.seed,
            &[rng::STREAM_SPLIT, fold_idx as u64],
        ));
        order.shuffle(&mut split_rng);
        let n_val = (fold_train.len() / 5).max(1);
        let val: Vec<RegressionExample> = order[..n_val]
            .iter()
            .map(|&i| fold_train[i].clone())
            .collect();
        let train: Vec<RegressionExample> = order[n_val..]
            .iter()
            .map(|&i| fold_train[i].clone())
            .collect();

        let mut params = start.clone();
        let steps_per_epoch = train.len().div_ceil(settings.batch_size.max(1));
        let mut plan = plan.clone();
        if plan.total_steps == 0 {
            plan.total_steps = settings.epochs * steps_per_epoch;
        }
        plan.validate()?;

        let mut record = RunRecord::new(settings.seed);
        let mut state = OptimizerState::new();
        let mut best: Option<(f64, ParamSet)> = None;
        let mut step = 0usize;
        for epoch in 1..=settings.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::derive(
                settings.seed,
                &[rng::STREAM_SHUFFLE, fold_idx as u64, epoch as u64],
            ));
            order.shuffle(&mut shuffle_rng);
            for (batch_idx, chunk_ids) in order.chunks(settings.batch_size.max(1)).enumerate() {
                let chunk: Vec<&RegressionExample> = chunk_ids.iter().map(|&i| &train[i]).collect();
                let texts: Vec<&str> = chunk.iter().map(|r| r.text.as_str()).collect();
                let batch = crate::data::encode_batch(vocab, &texts, settings.max_len)?;
                let targets: Vec<Scalar> = chunk.iter().map(|r| r.score as Scalar).collect();

                let frozen = frozen_set(&plan, step, steps_per_epoch, num_layers)?;
                let trainable = |name: &str| !frozen.contains(&group_of(name));
                let mut tape = Tape::new();
                let enc = bind_encoder(&mut tape, &params, trainable);
                let head = bind_head(&mut tape, &params, HeadKind::Regression, trainable);
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng::derive(
                    settings.seed,
                    &[
                        rng::STREAM_DROPOUT,
                        fold_idx as u64,
                        epoch as u64,
                        batch_idx as u64,
                    ],
                ));
                let output = enc.encode(&mut tape, &batch, Some(&mut dropout_rng))?;
                let pred = regress(&mut tape, &head, &output)?;
                let loss = tape.mse_loss(pred, &targets)?;
                tape.backward(loss)?;
                record.step_losses.push(tape.value(loss) as f64);

                let grads = collect_grads(&tape, &[enc.bound(), head.bound()]);
                let base_lr = stlr_lr(&plan, (step + 1).min(plan.total_steps))?;
                let lrs = group_learning_rates(&plan, base_lr, num_layers);
                let bound: Vec<String> = enc
                    .bound()
                    .iter()
                    .chain(head.bound().iter())
                    .map(|(n, _)| n.clone())
                    .collect();
                adam_step(&mut params, &grads, &mut state, &lrs, &frozen, &bound)?;
                step += 1;
            }
            let (pred, tgt) = evaluate_regressor(&params, vocab, &val, settings)?;
            let val_mse = regression_metrics(&pred, &tgt)?.mse;
            record.epoch_val_loss.push(val_mse);
            record.epoch_val_accuracy.push(0.0);
            if best.as_ref().map(|(b, _)| val_mse < *b).unwrap_or(true) {
                best = Some((val_mse, params.clone()));
            }
            record.wall_clock_secs.push(started.elapsed().as_secs_f64());
        }
        if let Some((_, best_params)) = best {
            params = best_params;
        }
        record.best_epoch = select_best_epoch(&record.epoch_val_loss);
        let (pred, tgt) = evaluate_regressor(&params, vocab, fold_test, settings)?;
        record.test = Some(regression_report(&pred, &tgt)?);
        records.push(record);
    }
    Ok(records)
}

/// Mean MSE and mean defined-R² across fold records.
pub fn regression_summary(records: &[RunRecord]) -> (Option<f64>, Option<f64>) {
    let mses: Vec<f64> = records
        .iter()
        .filter_map(|r| r.test.as_ref().and_then(|t| t.mse))
        .collect();
    let r2s: Vec<f64> = records
        .iter()
        .filter_map(|r| r.test.as_ref().and_then(|t| t.r2))
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    (mean(&mses), mean(&r2s))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub record: RunRecord,
}

/// Subsample rule for the size sweep: one seeded shuffle, prefixes of it,
/// so smaller subsamples are subsets of larger ones. The full size keeps
/// the original order and reproduces a plain fine-tune run exactly.
pub fn nested_subsample<T: Clone>(train: &[T], size: usize, seed: u64) -> Vec<T> {
    if size >= train.len() {
        return train.to_vec();
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng::derive(seed, &[rng::STREAM_SWEEP]));
    order.shuffle(&mut rng);
    order[..size].iter().map(|&i| train[i].clone()).collect()
}

/// Fine-tune on nested subsamples of the train split, one run per size,
/// always from the same starting checkpoint. A size equal to the full train
/// split reproduces `finetune_classifier` exactly.
pub fn size_sweep(
    start: &ParamSet,
    vocab: &Vocabulary,
    splits: &Splits<LabeledSentence>,
    sizes: &[usize],
    plan: &TrainingPlan,
    settings: &FinetuneSettings,
) -> Result<Vec<SweepPoint>, TrainError> {
    for &size in sizes {
        if size == 0 || size > splits.train.len() {
            return Err(TrainError::Input(format!(
                "sweep size {size} outside 1..={}",
                splits.train.len()
            )));
        }
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let sub = Splits {
            train: nested_subsample(&splits.train, size, settings.seed),
            validation: splits.validation.clone(),
            test: splits.test.clone(),
        };
        let mut params = start.clone();
        let record = finetune_classifier(&mut params, vocab, &sub, plan, settings)?;
        points.push(SweepPoint { size, record });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, split_dataset};
    use crate::metrics::regression_metrics;
    use crate::model::ModelConfig;
    use crate::schedule::{StrategyPreset, TrainingPlan};
    use crate::synth;

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 32,
            num_heads: 2,
            ff_dim: 64,
            vocab_size,
            max_seq_len: 16,
            dropout: 0.1,
            num_classes: 3,
        }
    }

    fn synth_setup(n: usize, seed: u64) -> (ParamSet, Vocabulary, Splits<LabeledSentence>) {
        let data = synth::sentiment_dataset(n, seed);
        let texts: Vec<String> = data.iter().map(|s| s.text.clone()).collect();
        let vocab = build_vocab(texts.iter().map(|s| s.as_str()), 120).unwrap();
        let splits = split_dataset(&data, seed).unwrap();
        let params = ParamSet::init(&tiny_config(vocab.len().max(120)), seed).unwrap();
        (params, vocab, splits)
    }

    #[test]
    fn best_epoch_is_argmin_of_validation_loss() {
        assert_eq!(select_best_epoch(&[0.9, 0.5, 0.7]), Some(2));
        assert_eq!(select_best_epoch(&[0.5, 0.5, 0.7]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn zero_epochs_leave_params_bit_unchanged() {
        let corpus = synth::mlm_corpus(40, 3);
        let vocab = build_vocab(corpus.iter().map(|s| s.as_str()), 100).unwrap();
        let mut params = ParamSet::init(&tiny_config(100), 5).unwrap();
        let before = params.clone();
        let plan = TrainingPlan::preset(StrategyPreset::Na);
        let settings = PretrainSettings {
            epochs: 0,
            batch_size: 8,
            max_len: 16,
            mask_rate: 0.15,
            seed: 1,
        };
        let record = pretrain_mlm(
            &mut params,
            &vocab,
            &PretrainCorpus::Sentences(&corpus),
            &plan,
            &settings,
        )
        .unwrap();
        assert!(record.step_losses.is_empty());
        for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn pretrain_is_deterministic_per_seed() {
        let corpus = synth::mlm_corpus(60, 7);
        let vocab = build_vocab(corpus.iter().map(|s| s.as_str()), 100).unwrap();
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(1e-3);
        let settings = PretrainSettings {
            epochs: 1,
            batch_size: 16,
            max_len: 16,
            mask_rate: 0.15,
            seed: 9,
        };
        let run = || {
            let mut params = ParamSet::init(&tiny_config(100), 2).unwrap();
            let record = pretrain_mlm(
                &mut params,
                &vocab,
                &PretrainCorpus::Sentences(&corpus),
                &plan,
                &settings,
            )
            .unwrap();
            (record.step_losses.clone(), params)
        };
        let (losses_a, params_a) = run();
        let (losses_b, params_b) = run();
        assert_eq!(losses_a, losses_b);
        for ((_, a), (_, b)) in params_a.iter().zip(params_b.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn pretrain_loss_decreases_on_small_corpus() {
        let corpus = synth::mlm_corpus(120, 11);
        let vocab = build_vocab(corpus.iter().map(|s| s.as_str()), 100).unwrap();
        let mut params = ParamSet::init(&tiny_config(100), 3).unwrap();
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(1e-3);
        let settings = PretrainSettings {
            epochs: 3,
            batch_size: 16,
            max_len: 16,
            mask_rate: 0.15,
            seed: 4,
        };
        let record = pretrain_mlm(
            &mut params,
            &vocab,
            &PretrainCorpus::Sentences(&corpus),
            &plan,
            &settings,
        )
        .unwrap();
        let first: f64 = record.step_losses[..4].iter().sum::<f64>() / 4.0;
        let n = record.step_losses.len();
        let last: f64 = record.step_losses[n - 4..].iter().sum::<f64>() / 4.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn task_pretraining_stream_is_exactly_the_train_split() {
        let (_, vocab, splits) = synth_setup(60, 21);
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(1e-3);
        let settings = PretrainSettings {
            epochs: 1,
            batch_size: 8,
            max_len: 16,
            mask_rate: 0.15,
            seed: 2,
        };

        let mut via_task = ParamSet::init(&tiny_config(vocab.len().max(120)), 8).unwrap();
        further_pretrain_on_task(&mut via_task, &vocab, &splits, &plan, &settings).unwrap();

        let train_sentences: Vec<String> = splits.train.iter().map(|s| s.text.clone()).collect();
        let mut via_sentences = ParamSet::init(&tiny_config(vocab.len().max(120)), 8).unwrap();
        pretrain_mlm(
            &mut via_sentences,
            &vocab,
            &PretrainCorpus::Sentences(&train_sentences),
            &plan,
            &settings,
        )
        .unwrap();

        for ((_, a), (_, b)) in via_task.iter().zip(via_sentences.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn finetune_requires_disjoint_splits() {
        let (mut params, vocab, mut splits) = synth_setup(40, 31);
        splits.validation[0] = splits.train[0].clone();
        let plan = TrainingPlan::preset(StrategyPreset::Na);
        let settings = FinetuneSettings {
            epochs: 1,
            batch_size: 8,
            max_len: 16,
            seed: 1,
        };
        assert!(matches!(
            finetune_classifier(&mut params, &vocab, &splits, &plan, &settings),
            Err(TrainError::Input(_))
        ));
    }

    #[test]
    fn finetune_overfits_small_train_set() {
        let (mut params, vocab, mut splits) = synth_setup(60, 41);
        splits.train.truncate(16);
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(1e-3);
        let settings = FinetuneSettings {
            epochs: 40,
            batch_size: 16,
            max_len: 16,
            seed: 3,
        };
        finetune_classifier(&mut params, &vocab, &splits, &plan, &settings).unwrap();
        // Evaluate on the train split itself: memorization must be possible.
        let weights = vec![1.0; 3];
        let report =
            evaluate_classifier(&params, &vocab, &splits.train, &weights, &plan, &settings)
                .unwrap();
        assert!(report.accuracy > 0.9, "train accuracy {}", report.accuracy);
    }

    #[test]
    fn poisoned_test_labels_cannot_change_model_selection() {
        let (params, vocab, splits) = synth_setup(60, 51);
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(5e-4);
        let settings = FinetuneSettings {
            epochs: 3,
            batch_size: 16,
            max_len: 16,
            seed: 5,
        };

        let mut clean_params = params.clone();
        let clean =
            finetune_classifier(&mut clean_params, &vocab, &splits, &plan, &settings).unwrap();

        let mut poisoned_splits = splits.clone();
        for (i, s) in poisoned_splits.test.iter_mut().enumerate() {
            s.label = crate::data::SentimentLabel::ALL[i % 3];
        }
        let mut poisoned_params = params.clone();
        let poisoned = finetune_classifier(
            &mut poisoned_params,
            &vocab,
            &poisoned_splits,
            &plan,
            &settings,
        )
        .unwrap();

        assert_eq!(clean.best_epoch, poisoned.best_epoch);
        assert_eq!(clean.epoch_val_loss, poisoned.epoch_val_loss);
        for ((_, a), (_, b)) in clean_params.iter().zip(poisoned_params.iter()) {
            assert_eq!(a.value, b.value, "weights depend on test labels");
        }
    }

    #[test]
    fn frozen_groups_finish_bit_identical() {
        let (params, vocab, splits) = synth_setup(50, 61);
        let start = params.clone();
        let plan = TrainingPlan::preset(StrategyPreset::Stl)
            .with_peak_lr(1e-3)
            .with_freeze_last_k(1);
        let settings = FinetuneSettings {
            epochs: 2,
            batch_size: 16,
            max_len: 16,
            seed: 7,
        };
        let mut tuned = params;
        finetune_classifier(&mut tuned, &vocab, &splits, &plan, &settings).unwrap();
        for (name, p) in tuned.iter() {
            let group = group_of(name);
            let frozen = group == "embeddings" || group == "encoder.1";
            if frozen {
                assert_eq!(
                    p.value,
                    start.get(name).unwrap().value,
                    "{name} changed while frozen"
                );
            }
        }
        // The head must actually have moved.
        assert_ne!(
            tuned.get("head.cls.w").unwrap().value,
            start.get("head.cls.w").unwrap().value
        );
    }

    #[test]
    fn regressor_folds_must_not_overlap() {
        let data = synth::regression_dataset(20, 71);
        let vocab = build_vocab(data.iter().map(|r| r.text.as_str()), 120).unwrap();
        let params = ParamSet::init(&tiny_config(120), 1).unwrap();
        let plan = TrainingPlan::preset(StrategyPreset::Na);
        let settings = FinetuneSettings {
            epochs: 1,
            batch_size: 8,
            max_len: 16,
            seed: 1,
        };
        let folds = vec![
            (data[..10].to_vec(), data[10..].to_vec()),
            (data[10..].to_vec(), data[5..15].to_vec()),
        ];
        assert!(matches!(
            finetune_regressor(&params, &vocab, &folds, &plan, &settings),
            Err(TrainError::Input(_))
        ));
    }

    #[test]
    fn regressor_runs_per_fold_from_common_start() {
        let data = synth::regression_dataset(24, 81);
        let vocab = build_vocab(data.iter().map(|r| r.text.as_str()), 120).unwrap();
        let params = ParamSet::init(&tiny_config(120), 2).unwrap();
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(5e-4);
        let settings = FinetuneSettings {
            epochs: 2,
            batch_size: 8,
            max_len: 16,
            seed: 2,
        };
        let folds = crate::data::kfold_split(&data, 2, 3).unwrap();
        let records = finetune_regressor(&params, &vocab, &folds, &plan, &settings).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            let test = r.test.as_ref().unwrap();
            assert!(test.mse.is_some());
            assert_eq!(test.n, 12);
        }
        let (mean_mse, _) = regression_summary(&records);
        assert!(mean_mse.unwrap() >= 0.0);
    }

    #[test]
    fn constant_prediction_never_beats_the_test_mean() {
        // Predicting the train-mean score is at best R^2 = 0 on a test fold.
        let targets = [0.8, -0.2, 0.3, -0.9, 0.5];
        let train_mean = 0.1f64;
        let m = regression_metrics(&vec![train_mean; 5], &targets).unwrap();
        assert!(m.r2.unwrap() <= 0.0);
    }

    #[test]
    fn regression_overfit_oracle_on_sixteen_pairs() {
        let data = synth::regression_dataset(16, 91);
        let vocab = build_vocab(data.iter().map(|r| r.text.as_str()), 120).unwrap();
        let mut params = ParamSet::init(&tiny_config(120), 5).unwrap();
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(2e-3);
        let settings = FinetuneSettings {
            epochs: 1,
            batch_size: 16,
            max_len: 16,
            seed: 6,
        };

        let num_layers = params.config.num_layers;
        let mut state = crate::schedule::OptimizerState::new();
        let texts: Vec<&str> = data.iter().map(|r| r.text.as_str()).collect();
        let targets: Vec<Scalar> = data.iter().map(|r| r.score as Scalar).collect();
        let mut reached = None;
        for step in 0..300 {
            let batch = crate::data::encode_batch(&vocab, &texts, settings.max_len).unwrap();
            let mut tape = Tape::new();
            let enc = bind_encoder(&mut tape, &params, |_| true);
            let head = bind_head(&mut tape, &params, HeadKind::Regression, |_| true);
            let output = enc.encode(&mut tape, &batch, None).unwrap();
            let pred = regress(&mut tape, &head, &output).unwrap();
            let loss = tape.mse_loss(pred, &targets).unwrap();
            if (tape.value(loss) as f64) < 0.01 {
                reached = Some(step);
                break;
            }
            tape.backward(loss).unwrap();
            let grads = collect_grads(&tape, &[enc.bound(), head.bound()]);
            let lrs = crate::schedule::group_learning_rates(&plan, plan.peak_lr, num_layers);
            let bound: Vec<String> = enc
                .bound()
                .iter()
                .chain(head.bound().iter())
                .map(|(n, _)| n.clone())
                .collect();
            crate::schedule::adam_step(
                &mut params,
                &grads,
                &mut state,
                &lrs,
                &Default::default(),
                &bound,
            )
            .unwrap();
        }
        assert!(
            reached.is_some(),
            "train MSE never fell below 0.01 within 300 steps"
        );
    }

    #[test]
    fn sweep_subsamples_are_nested_and_full_size_is_original() {
        let data: Vec<u32> = (0..50).collect();
        let small = nested_subsample(&data, 10, 9);
        let large = nested_subsample(&data, 25, 9);
        for x in &small {
            assert!(large.contains(x));
        }
        assert_eq!(nested_subsample(&data, 50, 9), data);
    }

    #[test]
    fn sweep_full_size_reproduces_plain_finetune() {
        let (params, vocab, mut splits) = synth_setup(45, 101);
        splits.train.truncate(12);
        let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(5e-4);
        let settings = FinetuneSettings {
            epochs: 2,
            batch_size: 8,
            max_len: 16,
            seed: 4,
        };

        let sweep = size_sweep(&params, &vocab, &splits, &[12], &plan, &settings).unwrap();
        let mut direct_params = params.clone();
        let direct =
            finetune_classifier(&mut direct_params, &vocab, &splits, &plan, &settings).unwrap();
        assert_eq!(sweep[0].record.step_losses, direct.step_losses);
        assert_eq!(sweep[0].record.epoch_val_loss, direct.epoch_val_loss);

        assert!(matches!(
            size_sweep(&params, &vocab, &splits, &[13], &plan, &settings),
            Err(TrainError::Input(_))
        ));
    }

    #[test]
    fn overfit_loss_median_decreases_monotonically_after_warm_start() {
        // Full-batch training on the toy set: the per-step median loss over
        // five seeds must be non-increasing once past the first 10 steps.
        let mut trajectories: Vec<Vec<f64>> = Vec::new();
        for seed in 1..=5u64 {
            let data = synth::sentiment_dataset(16, 200 + seed);
            let vocab = build_vocab(data.iter().map(|s| s.text.as_str()), 120).unwrap();
            let mut params = ParamSet::init(&tiny_config(120), seed).unwrap();
            let plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(1e-3);
            let texts: Vec<&str> = data.iter().map(|s| s.text.as_str()).collect();
            let labels: Vec<usize> = data.iter().map(|s| s.label.index()).collect();
            let weights = vec![1.0 as Scalar; 3];
            let mut state = crate::schedule::OptimizerState::new();
            let lrs = crate::schedule::group_learning_rates(
                &plan,
                plan.peak_lr,
                params.config.num_layers,
            );
            let mut losses = Vec::new();
            for _ in 0..50 {
                let batch = crate::data::encode_batch(&vocab, &texts, 16).unwrap();
                let mut tape = Tape::new();
                let enc = bind_encoder(&mut tape, &params, |_| true);
                let head = bind_head(&mut tape, &params, HeadKind::Classification, |_| true);
                let output = enc.encode(&mut tape, &batch, None).unwrap();
                let logits =
                    classify(&mut tape, &head, &output, Default::default(), 0.0, None).unwrap();
                let loss = tape
                    .cross_entropy_weighted(logits, &labels, &weights)
                    .unwrap();
                losses.push(tape.value(loss) as f64);
                tape.backward(loss).unwrap();
                let grads = collect_grads(&tape, &[enc.bound(), head.bound()]);
                let bound: Vec<String> = enc
                    .bound()
                    .iter()
                    .chain(head.bound().iter())
                    .map(|(n, _)| n.clone())
                    .collect();
                crate::schedule::adam_step(
                    &mut params,
                    &grads,
                    &mut state,
                    &lrs,
                    &Default::default(),
                    &bound,
                )
                .unwrap();
            }
            trajectories.push(losses);
        }
        let median_at = |t: usize| {
            let mut v: Vec<f64> = trajectories.iter().map(|tr| tr[t]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[2]
        };
        for t in 10..49 {
            assert!(
                median_at(t + 1) <= median_at(t) + 1e-9,
                "median loss rose from step {t}: {} -> {}",
                median_at(t),
                median_at(t + 1)
            );
        }
    }

    #[test]
    fn layers_above_the_head_source_stay_at_init() {
        let (params, vocab, splits) = synth_setup(40, 121);
        let start = params.clone();
        let mut plan = TrainingPlan::preset(StrategyPreset::Na).with_peak_lr(1e-3);
        plan.head_source = crate::model::HeadSource::Layer(1);
        let settings = FinetuneSettings {
            epochs: 1,
            batch_size: 16,
            max_len: 16,
            seed: 2,
        };
        let mut tuned = params;
        finetune_classifier(&mut tuned, &vocab, &splits, &plan, &settings).unwrap();
        for (name, p) in tuned.iter() {
            if group_of(name) == "encoder.2" {
                assert_eq!(
                    p.value,
                    start.get(name).unwrap().value,
                    "{name} trained above the head source"
                );
            }
        }
        assert_ne!(
            tuned.get("encoder.1.attn.wq").unwrap().value,
            start.get("encoder.1.attn.wq").unwrap().value
        );
    }

    #[test]
    fn sweep_median_test_loss_does_not_worsen_with_more_data() {
        let sizes = [100usize, 250];
        let mut by_size: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
        for seed in 1..=5u64 {
            let data = synth::sentiment_dataset(420, 300 + seed);
            let splits = split_dataset(&data, seed).unwrap();
            let vocab = build_vocab(splits.train.iter().map(|s| s.text.as_str()), 120).unwrap();
            let params = ParamSet::init(&tiny_config(120), seed).unwrap();
            let plan = TrainingPlan::preset(StrategyPreset::Stl).with_peak_lr(1e-3);
            let settings = FinetuneSettings {
                epochs: 4,
                batch_size: 16,
                max_len: 16,
                seed,
            };
            let points = size_sweep(&params, &vocab, &splits, &sizes, &plan, &settings).unwrap();
            for (i, p) in points.iter().enumerate() {
                by_size[i].push(p.record.test.as_ref().unwrap().weighted_ce);
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let m100 = median(&mut by_size[0]);
        let m250 = median(&mut by_size[1]);
        assert!(
            m250 <= m100,
            "median test loss worsened with more data: {m100} -> {m250}"
        );
    }

    #[test]
    fn finetune_is_bit_reproducible() {
        let (params, vocab, splits) = synth_setup(45, 111);
        let plan = TrainingPlan::preset(StrategyPreset::All).with_peak_lr(1e-3);
        let settings = FinetuneSettings {
            epochs: 2,
            batch_size: 16,
            max_len: 16,
            seed: 8,
        };
        let run = || {
            let mut p = params.clone();
            let r = finetune_classifier(&mut p, &vocab, &splits, &plan, &settings).unwrap();
            (serde_json::to_string(&r).unwrap(), p)
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
