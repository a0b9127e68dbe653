//! Student training: mini-batch momentum SGD over the configured
//! distillation objective, with per-epoch metrics.
//!
//! Replay contract: the metrics row of epoch `e` is computed by a full
//! evaluation pass over the training set with the weights as they stand at
//! the end of epoch `e`. Re-evaluating a saved checkpoint from that epoch
//! with [`evaluate_epoch`] reproduces the row bit for bit, because both
//! paths run the same value-path forward and the same loss kernels over
//! the same deterministic encodings.
//!
//! Randomness: weight init, per-epoch shuffling, and input encoding each
//! draw from their own seed stream, so changing one (say, the encoder)
//! leaves the others untouched.

use std::path::Path;

use serde::Deserialize;

use crate::data::{Dataset, Split};
use crate::distill::{build_objective, method_objective, DistillConfig, Method, TeacherLogits};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, fmt_f64_array};
use crate::network::{encode_input, EncodedInput, Encoder, SpikingNet};
use crate::optim::{cosine_lr, step_affine_layers, MomentumSgd, TrainPlan};
use crate::rng::{substream_rng, Stream};
use crate::tape::{SpikeMode, Tape};

/// One evaluation pass over a dataset: mean losses per objective term and
/// accuracy per timestep and aggregated. Loss means and accuracies are
/// fixed-order sums over samples in dataset order.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    /// Epoch the weights belong to, 1-based; 0 is the initialized network.
    pub epoch: usize,
    pub total_loss: f64,
    pub cls_loss: f64,
    pub kd_loss: f64,
    pub ela_loss: f64,
    pub sta_loss: f64,
    /// Fraction of samples whose timestep-t logits rank the label first.
    pub per_timestep_accuracy: Vec<f64>,
    /// Fraction of samples whose time-averaged logits rank the label first.
    pub aggregated_accuracy: f64,
}

impl EpochMetrics {
    /// One JSONL record with exact float text.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"epoch\":{},\"total_loss\":{},\"cls_loss\":{},\"kd_loss\":{},\"ela_loss\":{},\
             \"sta_loss\":{},\"per_timestep_accuracy\":{},\"aggregated_accuracy\":{}}}",
            self.epoch,
            fmt_f64(self.total_loss),
            fmt_f64(self.cls_loss),
            fmt_f64(self.kd_loss),
            fmt_f64(self.ela_loss),
            fmt_f64(self.sta_loss),
            fmt_f64_array(&self.per_timestep_accuracy),
            fmt_f64(self.aggregated_accuracy)
        )
    }
}

/// Renders one record per epoch.
pub fn render_metrics(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&m.to_json_line());
        out.push('\n');
    }
    out
}

/// Writes [`render_metrics`] output atomically.
pub fn write_metrics(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    io::write_atomic(path, &render_metrics(metrics))
}

/// Parses a [`write_metrics`] file. Round trips are value-identical.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    io::parse_jsonl(path)
}

/// Encodes every sample of a dataset. Each sample draws from its own
/// substream keyed by split and row index, so encodings are independent of
/// epoch count, batch size, and each other.
pub fn encode_dataset(
    dataset: &Dataset,
    encoder: Encoder,
    timesteps: usize,
    seed: u64,
) -> Result<Vec<EncodedInput>> {
    // Disjoint substream halves keep train and test draws uncorrelated.
    let offset = match dataset.split() {
        Split::Train => 0u64,
        Split::Test => 1u64 << 40,
    };
    (0..dataset.len())
        .map(|i| {
            let mut rng = substream_rng(seed, Stream::Encoder, offset + i as u64);
            encode_input(dataset.feature_row(i), encoder, timesteps, &mut rng)
        })
        .collect()
}

pub(crate) fn check_teacher_cover(
    dataset: &Dataset,
    teacher: Option<&[TeacherLogits]>,
    config: &DistillConfig,
) -> Result<()> {
    if config.method == Method::CeOnly {
        return Ok(());
    }
    let Some(teacher) = teacher else {
        return Err(Error::invalid(format!(
            "method {} requires teacher logits",
            config.method.as_str()
        )));
    };
    if teacher.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "teacher logits cover {} samples but the dataset has {}",
            teacher.len(),
            dataset.len()
        )));
    }
    for (i, t) in teacher.iter().enumerate() {
        if t.classes() != dataset.classes() {
            return Err(Error::invalid(format!(
                "teacher logits for sample {i} have {} classes, dataset has {}",
                t.classes(),
                dataset.classes()
            )));
        }
    }
    Ok(())
}

fn teacher_for(teacher: Option<&[TeacherLogits]>, i: usize) -> Option<&TeacherLogits> {
    teacher.map(|t| &t[i])
}

/// A non-finite value surfacing anywhere inside a training epoch means the
/// optimization left the finite range; everything else passes through.
fn diverged_if_non_finite(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::Diverged {
            epoch,
            detail: format!("non-finite {context}"),
        },
        other => other,
    }
}

/// Full evaluation pass: mean objective terms and accuracies of `net` over
/// `dataset` with precomputed encodings. `epoch` only labels the record.
pub fn evaluate_epoch(
    net: &SpikingNet,
    dataset: &Dataset,
    encoded: &[EncodedInput],
    teacher: Option<&[TeacherLogits]>,
    config: &DistillConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    config.validate()?;
    check_teacher_cover(dataset, teacher, config)?;
    if encoded.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "{} encoded inputs for {} samples",
            encoded.len(),
            dataset.len()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let n = dataset.len();
    let t_len = net.timesteps;
    let mut sums = [0.0f64; 5];
    let mut step_hits = vec![0usize; t_len];
    let mut agg_hits = 0usize;
    for i in 0..n {
        let record = net.forward(&encoded[i])?;
        let breakdown = method_objective(
            &record.logits,
            teacher_for(teacher, i),
            dataset.label(i),
            config,
        )?;
        sums[0] += breakdown.total;
        sums[1] += breakdown.cls;
        sums[2] += breakdown.kd;
        sums[3] += breakdown.ela;
        sums[4] += breakdown.sta;
        for (t, &p) in record.logits.predict_per_timestep().iter().enumerate() {
            if p == dataset.label(i) {
                step_hits[t] += 1;
            }
        }
        if record.logits.predict_aggregate() == dataset.label(i) {
            agg_hits += 1;
        }
    }
    let inv = 1.0 / n as f64;
    Ok(EpochMetrics {
        epoch,
        total_loss: sums[0] * inv,
        cls_loss: sums[1] * inv,
        kd_loss: sums[2] * inv,
        ela_loss: sums[3] * inv,
        sta_loss: sums[4] * inv,
        per_timestep_accuracy: step_hits.iter().map(|&h| h as f64 * inv).collect(),
        aggregated_accuracy: agg_hits as f64 * inv,
    })
}

/// A trained student with its per-epoch metrics log.
#[derive(Debug, Clone)]
pub struct StudentArtifacts {
    pub net: SpikingNet,
    /// One record per completed epoch, evaluated at end-of-epoch weights.
    pub metrics: Vec<EpochMetrics>,
}

/// Trains `net` in place semantics-wise: consumes it, runs `plan.epochs`
/// epochs of mini-batch momentum SGD on the configured objective, and
/// returns the final network plus one metrics record per epoch.
///
/// Teacher logits must cover the training set in dataset order whenever
/// the method is not `ce-only`. Gradient updates only ever see the train
/// split. A non-finite batch loss aborts with the epoch and the per-term
/// snapshot of the offending batch.
pub fn train_student(
    mut net: SpikingNet,
    dataset: &Dataset,
    teacher: Option<&[TeacherLogits]>,
    plan: &TrainPlan,
    config: &DistillConfig,
    encoder: Encoder,
    seed: u64,
) -> Result<StudentArtifacts> {
    plan.validate_fields()?;
    config.validate()?;
    if dataset.split() != Split::Train {
        return Err(Error::invalid("student training requires the train split"));
    }
    if net.input_dim() != dataset.dim() || net.classes() != dataset.classes() {
        return Err(Error::invalid(format!(
            "network maps {} -> {} but dataset needs {} -> {}",
            net.input_dim(),
            net.classes(),
            dataset.dim(),
            dataset.classes()
        )));
    }
    check_teacher_cover(dataset, teacher, config)?;
    let encoded = encode_dataset(dataset, encoder, net.timesteps, seed)?;

    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(plan.batch_size);
    let total_steps = plan.epochs * batches_per_epoch;
    let mut opt = MomentumSgd::new(plan.momentum, plan.weight_decay)?;
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(plan.epochs);

    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = substream_rng(seed, Stream::StudentShuffle, epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        for batch in order.chunks(plan.batch_size) {
            let lr = if plan.cosine_schedule {
                cosine_lr(plan.learning_rate, step, total_steps)?
            } else {
                plan.learning_rate
            };
            step += 1;
            let mut tape = Tape::new();
            let params = net.register_params(&mut tape);
            let mut totals = Vec::with_capacity(batch.len());
            for &i in batch {
                let logits = net
                    .forward_on_tape(&mut tape, &params, &encoded[i], SpikeMode::Hard)
                    .map_err(|e| diverged_if_non_finite(e, epoch))?;
                let obj = build_objective(
                    &mut tape,
                    &logits,
                    teacher_for(teacher, i),
                    dataset.label(i),
                    config,
                )?;
                totals.push(obj.total);
            }
            let sum = tape.add_n(&totals)?;
            let loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
            let loss_value = tape.value(loss).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: divergence_snapshot(&net, dataset, &encoded, teacher, config, batch),
                });
            }
            let grads = tape.backward(loss)?;
            let values = step_affine_layers(&mut opt, lr, &net.layers, &params, &grads)
                .map_err(|e| diverged_if_non_finite(e, epoch))?;
            for (layer, (w, b)) in net.layers.iter_mut().zip(values) {
                layer.weight = w;
                layer.bias = b;
            }
        }
        metrics.push(
            evaluate_epoch(&net, dataset, &encoded, teacher, config, epoch + 1)
                .map_err(|e| diverged_if_non_finite(e, epoch))?,
        );
    }

    Ok(StudentArtifacts { net, metrics })
}

/// Per-term loss values of the failing batch, for the divergence error.
/// Terms that are themselves non-finite print as such.
fn divergence_snapshot(
    net: &SpikingNet,
    dataset: &Dataset,
    encoded: &[EncodedInput],
    teacher: Option<&[TeacherLogits]>,
    config: &DistillConfig,
    batch: &[usize],
) -> String {
    let mut sums = [0.0f64; 5];
    for &i in batch {
        let Ok(record) = net.forward(&encoded[i]) else {
            return "batch loss is not finite".to_string();
        };
        let Ok(b) =
            method_objective(&record.logits, teacher_for(teacher, i), dataset.label(i), config)
        else {
            return "batch loss is not finite".to_string();
        };
        for (s, v) in sums.iter_mut().zip([b.total, b.cls, b.kd, b.ela, b.sta]) {
            *s += v;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    format!(
        "batch loss is not finite: total={} cls={} kd={} ela={} sta={}",
        sums[0] * inv,
        sums[1] * inv,
        sums[2] * inv,
        sums[3] * inv,
        sums[4] * inv
    )
}
