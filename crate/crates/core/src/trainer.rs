//! Training loop, evaluation and the ablation runner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{mean_pairwise_cosine_distance, AdjacencyMatrix};
use crate::model::{argmax, Model, ModelConfig};
use crate::optim::sgd_step;
use crate::synth::Dataset;
use crate::tape::Tape;

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub a_offdiag: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Rows are true classes, columns predictions, each row in percent.
    pub confusion: Vec<Vec<f64>>,
}

/// Model configuration for a run on `ds`, checking that the two agree.
pub fn model_config(cfg: &RunConfig, ds: &Dataset) -> Result<ModelConfig> {
    cfg.validate()?;
    if ds.info.frames != cfg.frames || ds.info.classes != cfg.classes {
        return Err(Error::Config(format!(
            "run expects N={} K={}, dataset has N={} K={}",
            cfg.frames, cfg.classes, ds.info.frames, ds.info.classes
        )));
    }
    let mc = ModelConfig {
        frames: cfg.frames,
        dim: cfg.dim,
        classes: cfg.classes,
        rows: ds.info.rows,
        cols: ds.info.cols,
        module_count: cfg.module_count,
        weighted_fusion: cfg.use_weighted_fusion,
        mean_axis: cfg.fusion_mean_axis,
        cell: cfg.cell,
        seed: cfg.seed,
        ..ModelConfig::default()
    };
    mc.validate()?;
    Ok(mc)
}

fn check_agreement(model: &Model, ds: &Dataset) -> Result<()> {
    let c = model.config();
    let i = &ds.info;
    if (c.frames, c.rows, c.cols, c.classes) != (i.frames, i.rows, i.cols, i.classes) {
        return Err(Error::Config(format!(
            "checkpoint is for N={} {}x{} K={}, dataset has N={} {}x{} K={}",
            c.frames, c.rows, c.cols, c.classes, i.frames, i.rows, i.cols, i.classes
        )));
    }
    Ok(())
}

/// Argmax accuracy, mean loss and row-normalized confusion matrix over the
/// samples at `indices`.
pub fn evaluate(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    check_agreement(model, ds)?;
    let k = model.config().classes;
    let mut counts = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for &i in indices {
        let s = &ds.samples[i];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &s.images)?;
        let l = tape.cross_entropy(out.logits, s.label)?;
        loss += tape.value(l).data()[0];
        let pred = argmax(tape.value(out.logits).data());
        counts[s.label][pred] += 1;
        correct += usize::from(pred == s.label);
    }
    let n = indices.len().max(1) as f64;
    let confusion = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        confusion,
    })
}

fn snapshot(model: &Model, epoch: usize, loss: f64, train_acc: f64, val_acc: f64) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        epoch,
        train_loss: loss,
        train_accuracy: train_acc,
        val_accuracy: val_acc,
        a_offdiag: AdjacencyMatrix::offdiag_magnitude(model.adjacency()),
        weights: model.intensity_weights()?.values().to_vec(),
    })
}

fn numerical(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => {
            Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})"))
        }
        other => other,
    }
}

/// Minibatch SGD on the training split of `ds`.
///
/// Each epoch visits the training samples in an order drawn from the run seed
/// and the epoch number; the batch loss is the mean cross-entropy, so every
/// parameter (the adjacency matrix included) receives the batch-averaged
/// gradient.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

/// [`train`] with a callback invoked after every metrics row.
pub fn train_with(
    cfg: &RunConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let mc = model_config(cfg, ds)?;
    let sgd = cfg.sgd()?;
    let mut model = Model::new(mc)?;
    let split = ds.split();

    let train0 = evaluate(&model, ds, &split.train)?;
    let val0 = evaluate(&model, ds, &split.val)?;
    let first = snapshot(&model, 0, train0.mean_loss, train0.accuracy, val0.accuracy)?;
    on_epoch(&first);
    let mut metrics = vec![first];

    let mut order = split.train.clone();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &ds.samples[i];
                let r = model
                    .sample_gradients(&s.images, s.label)
                    .map_err(|e| numerical(epoch, b, e))?;
                if !r.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss (epoch {epoch}, batch {b})"
                    )));
                }
                loss_sum += r.loss;
                correct += usize::from(argmax(&r.logits) == s.label);
                model.params_mut().accumulate(&r.grads, scale);
            }
            sgd_step(model.params_mut(), &sgd)?;
            if model.params().iter().any(|(_, _, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter update (epoch {epoch}, batch {b})"
                )));
            }
        }
        let n = order.len().max(1) as f64;
        let val = evaluate(&model, ds, &split.val)?;
        let rec = snapshot(&model, epoch, loss_sum / n, correct as f64 / n, val.accuracy)?;
        on_epoch(&rec);
        metrics.push(rec);
    }
    Ok(TrainOutcome { model, metrics })
}

/// `epoch,train_loss,train_acc,val_acc,a_offdiag,w_1..w_N` with one row per record.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let n = records.first().map_or(0, |r| r.weights.len());
    let mut out = String::from("epoch,train_loss,train_acc,val_acc,a_offdiag");
    for i in 1..=n {
        out.push_str(&format!(",w_{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy, r.a_offdiag
        ));
        for w in &r.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    out
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub module_count: usize,
    pub fusion: bool,
}

impl Variant {
    /// Baseline, one, two and three modules, and two modules with fusion.
    pub const TABLE: [Variant; 5] = [
        Variant { module_count: 0, fusion: false },
        Variant { module_count: 1, fusion: false },
        Variant { module_count: 2, fusion: false },
        Variant { module_count: 3, fusion: false },
        Variant { module_count: 2, fusion: true },
    ];

    pub fn label(&self) -> String {
        match (self.module_count, self.fusion) {
            (0, false) => "encoder baseline".to_string(),
            (0, true) => "encoder baseline + weighted fusion".to_string(),
            (k, false) => format!("graph module x{k}"),
            (k, true) => format!("graph module x{k} + weighted fusion"),
        }
    }

    /// Parses `"0,1,2,3,2f"`-style lists; a trailing `f` turns fusion on.
    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',')
            .map(|tok| {
                let tok = tok.trim();
                let (digits, fusion) = match tok.strip_suffix('f') {
                    Some(d) => (d, true),
                    None => (tok, false),
                };
                let module_count = digits
                    .parse()
                    .map_err(|_| Error::Config(format!("bad variant {tok:?}")))?;
                Ok(Variant { module_count, fusion })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub val_accuracy: f64,
    /// Mean pairwise cosine distance between frame features after the last
    /// graph module, averaged over validation clips.
    pub oversmoothing: f64,
}

/// Mean pairwise cosine distance of the fused-in frame features over `indices`.
pub fn oversmoothing(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ds.samples[i].images)?;
        total += mean_pairwise_cosine_distance(tape.value(out.final_features()));
    }
    Ok(total / indices.len().max(1) as f64)
}

/// Trains and evaluates every variant with the same seed and data.
pub fn ablation(base: &RunConfig, ds: &Dataset, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let val = ds.split().val;
    variants
        .iter()
        .map(|&v| {
            let cfg = RunConfig {
                module_count: v.module_count,
                use_weighted_fusion: v.fusion,
                ..base.clone()
            };
            let out = train(&cfg, ds)?;
            Ok(AblationRow {
                variant: v,
                val_accuracy: evaluate(&out.model, ds, &val)?.accuracy,
                oversmoothing: oversmoothing(&out.model, ds, &val)?,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<36} {:>10} {:>14}\n", "method", "val acc %", "cos distance");
    for r in rows {
        out.push_str(&format!(
            "{:<36} {:>10.2} {:>14.4}\n",
            r.variant.label(),
            100.0 * r.val_accuracy,
            r.oversmoothing
        ));
    }
    out
}

pub fn confusion_table(e: &Evaluation) -> String {
    let k = e.confusion.len();
    let mut out = String::from("true\\pred");
    for j in 0..k {
        out.push_str(&format!(" {j:>7}"));
    }
    out.push('\n');
    for (i, row) in e.confusion.iter().enumerate() {
        out.push_str(&format!("{i:>9}"));
        for v in row {
            out.push_str(&format!(" {v:>7.2}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, SyntheticSpec};

    fn tiny() -> (RunConfig, Dataset) {
        let spec = SyntheticSpec {
            classes: 2,
            frames: 3,
            rows: 8,
            cols: 8,
            distractors: 1,
            ..SyntheticSpec::default()
        };
        let ds = make_dataset(&spec, 5).unwrap();
        let cfg = RunConfig {
            frames: 3,
            dim: 4,
            classes: 2,
            epochs: 2,
            batch_size: 3,
            ..RunConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let (cfg, ds) = tiny();
        let out = train(&RunConfig { epochs: 0, ..cfg.clone() }, &ds).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.model, Model::new(model_config(&cfg, &ds).unwrap()).unwrap());
        let csv = metrics_csv(&out.metrics);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("epoch,train_loss,train_acc,val_acc,a_offdiag,w_1,w_2,w_3\n"));
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let (cfg, ds) = tiny();
        let cfg = RunConfig { learning_rate: 0.0, ..cfg };
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.model, Model::new(model_config(&cfg, &ds).unwrap()).unwrap());
    }

    #[test]
    fn training_moves_every_parameter_and_is_deterministic() {
        let (cfg, ds) = tiny();
        let cfg = RunConfig { learning_rate: 0.05, ..cfg };
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        let init = Model::new(model_config(&cfg, &ds).unwrap()).unwrap();
        for ((_, name, t0), (_, _, t1)) in init.params().iter().zip(a.model.params().iter()) {
            assert_ne!(t0, t1, "{name} did not move");
        }
        assert!(a.metrics.last().unwrap().a_offdiag > 0.0);
        assert_eq!(a.metrics[0].a_offdiag, 0.0);
    }

    #[test]
    fn mismatched_dataset_is_rejected_before_work() {
        let (cfg, ds) = tiny();
        assert!(matches!(
            train(&RunConfig { frames: 4, ..cfg.clone() }, &ds),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(&RunConfig { module_count: 5, ..cfg }, &ds),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn confusion_rows_sum_to_hundred() {
        let (cfg, ds) = tiny();
        let model = Model::new(model_config(&cfg, &ds).unwrap()).unwrap();
        let all: Vec<usize> = (0..ds.samples.len()).collect();
        let e = evaluate(&model, &ds, &all).unwrap();
        for row in &e.confusion {
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn variant_lists() {
        let v = Variant::parse_list("0,1,2,3,2f").unwrap();
        assert_eq!(v, Variant::TABLE.to_vec());
        assert!(Variant::parse_list("x").is_err());
    }
}
