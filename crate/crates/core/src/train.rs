//! Training loop, evaluation and per-table inference.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use catt_tensor::{AdamW, AdamWConfig, Graph, Mode};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_batch, prepare_table, prepare_tables, PairSample};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{argmax_rows, build_model, Model, ModelConfig, Variant};
use crate::pairing::DEFAULT_K;
use crate::table::{apply_empty_cell_policy, BoxMode, RelationLabel, RelationMap, Table};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub k: usize,
    /// Epochs without a new best validation micro-F1 before stopping.
    pub patience: usize,
    pub bbox_mode: BoxMode,
    /// Loss weights for classes 0, 1, 2; unweighted when absent.
    pub class_weights: Option<[f64; 3]>,
    /// Stop as soon as validation micro-F1 reaches this value.
    pub target_val_micro_f1: Option<f64>,
    /// Also score the training pairs after every epoch.
    pub track_train_metrics: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            k: DEFAULT_K,
            patience: 5,
            bbox_mode: BoxMode::Aligned,
            class_weights: None,
            target_val_micro_f1: None,
            track_train_metrics: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size, k and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument(format!("bad class weights {w:?}")));
            }
        }
        self.model.validate()
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    fn input_size(&self) -> u32 {
        self.model.input_size as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_micro_f1: f64,
    pub val_macro_f1: f64,
    pub train_micro_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best validation micro-F1.
    pub model: Model<f32>,
    /// Optimizer state matching `model`.
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Batches of `size` in order, with a trailing singleton folded into the
/// batch before it so batch norm always sees two samples.
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Confusion matrix of `model` over `samples`, batches scored in parallel.
pub fn evaluate_samples(model: &Model<f32>, samples: &[PairSample], batch_size: usize) -> Result<ConfusionMatrix> {
    let size = model.config.input_size;
    batch_ranges(samples.len(), batch_size.max(1))
        .into_par_iter()
        .map(|r| {
            let refs: Vec<&PairSample> = samples[r].iter().collect();
            let batch = make_batch::<f32>(&refs, size);
            let pred = model.predict(&batch)?;
            let mut cm = ConfusionMatrix::new();
            for (s, p) in refs.iter().zip(pred) {
                cm.add(s.label, RelationLabel::from_index(p).expect("three classes"));
            }
            Ok(cm)
        })
        .try_reduce(ConfusionMatrix::new, |mut a, b| {
            a.merge(&b);
            Ok(a)
        })
}

pub fn train(
    train_tables: &[(Table, GrayImage)],
    val_tables: &[(Table, GrayImage)],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_tables.is_empty() || val_tables.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    let started = Instant::now();
    let train_samples = prepare_tables(train_tables, config.bbox_mode, config.k, config.input_size())?;
    let val_samples = prepare_tables(val_tables, config.bbox_mode, config.k, config.input_size())?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    info!(
        "{} train pairs, {} val pairs, preprocessed in {:.1}s",
        train_samples.len(),
        val_samples.len(),
        started.elapsed().as_secs_f64()
    );
    train_on_samples(&train_samples, &val_samples, config)
}

/// Training on already prepared pairs.
pub fn train_on_samples(
    train_samples: &[PairSample],
    val_samples: &[PairSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let size = config.model.input_size;
    let mut model = build_model::<f32>(&config.model_config())?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let weights: Option<Vec<f32>> = config.class_weights.map(|w| w.iter().map(|&v| v as f32).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let eval_batch = config.batch_size.max(64);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>, AdamW)> = None;
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for r in batch_ranges(order.len(), config.batch_size) {
            let refs: Vec<&PairSample> = order[r].iter().map(|&i| &train_samples[i]).collect();
            let batch = make_batch::<f32>(&refs, size);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, Mode::Train)?;
            let loss = g.softmax_cross_entropy(out.logits, &batch.labels, weights.as_deref())?;
            let value = g.scalar_f64(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            loss_sum += value * refs.len() as f64;
            g.backward(loss)?;
            opt.step(&mut model.store, &g);
        }
        let train_loss = loss_sum / order.len() as f64;
        let val = MetricsReport::from_confusion(evaluate_samples(&model, val_samples, eval_batch)?)?;
        let train_micro_f1 = if config.track_train_metrics {
            let cm = evaluate_samples(&model, train_samples, eval_batch)?;
            Some(MetricsReport::from_confusion(cm)?.micro_avg.f1)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_micro_f1: val.micro_avg.f1,
            val_macro_f1: val.macro_avg.f1,
            train_micro_f1,
        };
        info!(
            "epoch {epoch}: loss {train_loss:.4}, val micro-F1 {:.4}, macro-F1 {:.4}{} ({:.1}s)",
            record.val_micro_f1,
            record.val_macro_f1,
            train_micro_f1.map_or(String::new(), |f| format!(", train micro-F1 {f:.4}")),
            t0.elapsed().as_secs_f64()
        );
        history.push(record);
        let f1 = val.micro_avg.f1;
        if best.as_ref().map_or(true, |(b, ..)| f1 > *b) {
            best = Some((f1, epoch, model.clone(), opt.clone()));
        }
        let best_epoch = best.as_ref().unwrap().1;
        if config.target_val_micro_f1.is_some_and(|t| f1 >= t) {
            info!("target validation micro-F1 reached at epoch {epoch}");
            break;
        }
        if epoch - best_epoch >= config.patience {
            info!("no improvement for {} epochs, stopping", config.patience);
            break;
        }
    }
    let (_, best_epoch, model, optimizer) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        best_epoch,
        train_pairs: train_samples.len(),
        val_pairs: val_samples.len(),
    })
}

/// Scores every candidate pair of `tables` under the configured box mode
/// and K.
pub fn evaluate(model: &Model<f32>, tables: &[(Table, GrayImage)], config: &TrainConfig) -> Result<MetricsReport> {
    let samples = prepare_tables(tables, config.bbox_mode, config.k, model.config.input_size as u32)?;
    if samples.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    MetricsReport::from_confusion(evaluate_samples(model, &samples, config.batch_size.max(64))?)
}

/// Metrics of a predictor that returns the ground truth for every
/// candidate pair.
pub fn evaluate_oracle(tables: &[Table], mode: BoxMode, k: usize) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new();
    for t in tables {
        let t = apply_empty_cell_policy(t, mode)?;
        for p in crate::pairing::generate_pairs(&t, k)? {
            cm.add(p.label, p.label);
        }
    }
    MetricsReport::from_confusion(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub cell_id_a: u32,
    pub cell_id_b: u32,
    pub predicted: RelationLabel,
    pub truth: RelationLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TablePrediction {
    pub table_id: String,
    pub bbox_mode: BoxMode,
    pub k: usize,
    pub pairs: Vec<PairPrediction>,
}

impl TablePrediction {
    /// Predicted non-zero relations.
    pub fn relations(&self) -> RelationMap {
        self.pairs
            .iter()
            .filter(|p| p.predicted != RelationLabel::NoConnection)
            .map(|p| ((p.cell_id_a, p.cell_id_b), p.predicted))
            .collect()
    }
}

/// Classifies the candidate pairs of one table.
pub fn predict_table(
    model: &Model<f32>,
    table: &Table,
    image: &GrayImage,
    mode: BoxMode,
    k: usize,
) -> Result<(Table, TablePrediction)> {
    let t = apply_empty_cell_policy(table, mode)?;
    let samples = prepare_table(&t, image, k, model.config.input_size as u32)?;
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(128) {
        let refs: Vec<&PairSample> = chunk.iter().collect();
        let batch = make_batch::<f32>(&refs, model.config.input_size);
        let mut g = Graph::new();
        let out = model.infer(&mut g, &batch)?;
        for (s, p) in chunk.iter().zip(argmax_rows(g.value(out.logits).data())) {
            pairs.push(PairPrediction {
                cell_id_a: s.cell_a,
                cell_id_b: s.cell_b,
                predicted: RelationLabel::from_index(p).expect("three classes"),
                truth: s.label,
            });
        }
    }
    let prediction = TablePrediction {
        table_id: t.id.clone(),
        bbox_mode: mode,
        k,
        pairs,
    };
    Ok((t, prediction))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_micro_f1,val_macro_f1\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_micro_f1, r.val_macro_f1);
    }
    out
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
