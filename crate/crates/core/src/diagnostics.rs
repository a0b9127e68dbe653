//! Gradient-level diagnostics of distillation selectivity, temporal
//! accuracy analytics, and raw logit export.
//!
//! All three statistics probe the same object: the gradient `g` of the
//! method's weighted distillation sum (everything in the objective beyond
//! the classification term), taken per layer. Each statistic conditions
//! on a timestep state (see [`Condition`]) and applies a different lens:
//!
//! - `pair_share` (erroneous timesteps): with `u_k` the gradient of
//!   logit `z_{t,k}`, the directional effects are `D_true = |<g, u_{y*}>|`,
//!   `D_false = |<g, u_{c_false}>|`, and `D_rest = |<g, grad of the mean
//!   remaining logit>|`; the share is
//!   `(D_true + D_false) / (D_true + D_false + D_rest)`. All three zero
//!   means the share is undefined and the value is skipped, not zeroed.
//! - `ref_align` (weak timesteps): cosine between `g` and the gradient
//!   of `(m_t - m_ref)^2`, where the margin `m_t = z_{t,y*} - z_{t,c_false}`
//!   and the reference margin `m_ref = sum_{t'!=t} w[t][t'] * m_{t'}` is
//!   held constant. Undefined (skipped) when either norm is below 1e-12.
//! - `kd_ratio` (correct timesteps): `||g|| / ||grad cls||` per layer.
//!   A run without a distillation term reports 0; a task-gradient norm
//!   below 1e-12 makes the ratio undefined (skipped).
//!
//! All gradients are taken w.r.t. weight matrices only (biases excluded)
//! and all loss gradients are of the full per-sample objective terms; the
//! timestep only selects the condition a value is attributed to.
//!
//! Report schema (JSONL, `kind` discriminated):
//! `{"kind":"samples","indices":[..]}` — diagnosed sample rows;
//! `{"kind":"layer_stat","statistic":..,"condition":..,"layer":..,
//!   "count":..,"mean":..|null,"std":..|null,"values":[..]}` — one per
//! layer per statistic, aggregated over (sample, timestep) values;
//! `{"kind":"temporal_accuracy","per_timestep":[..],"aggregated":..,
//!   "correct_timestep_histogram":[..]}` — whole-dataset analytics.

use std::path::Path;

use crate::data::Dataset;
use crate::distill::{build_objective, sta_weights, DistillConfig, TeacherLogits};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, fmt_f64_array};
use crate::network::{EncodedInput, Encoder, SpikingNet, TemporalLogits};
use crate::rng::{substream_rng, Stream};
use crate::tape::{NodeId, SpikeMode, Tape};
use crate::train::encode_dataset;

/// Norms below this are treated as zero directions: cosines and ratios
/// against them are undefined.
const NORM_FLOOR: f64 = 1e-12;

/// State of one (sample, timestep) prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// The timestep's argmax is not the label.
    Erroneous,
    /// Correct, but with a margin below the batch median of correct
    /// margins: right for fragile reasons.
    Weak,
    /// Correct with a margin at or above that median.
    Correct,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Erroneous => "erroneous",
            Condition::Weak => "weak",
            Condition::Correct => "correct",
        }
    }
}

/// Condition and margin of one (sample, timestep).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepCondition {
    pub condition: Condition,
    /// `z[label] - z[top non-truth class]`; negative iff erroneous,
    /// except for exact ties which also count as erroneous.
    pub margin: f64,
}

/// The strongest class other than `label` (ties to the lowest index).
pub fn top_non_truth(row: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j == label {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = j;
        }
    }
    best
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Labels every (sample, timestep) of an evaluation batch. The weak/correct
/// split compares each correct margin against the median margin over all
/// correct timesteps of the batch; strictly below is weak.
pub fn classify_timesteps(
    batch: &[TemporalLogits],
    labels: &[usize],
) -> Result<Vec<Vec<TimestepCondition>>> {
    if batch.is_empty() {
        return Err(Error::invalid("classification needs at least one sample"));
    }
    if batch.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} samples but {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let mut margins = Vec::with_capacity(batch.len());
    let mut correct_pool = Vec::new();
    for (logits, &label) in batch.iter().zip(labels) {
        if label >= logits.classes() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                logits.classes()
            )));
        }
        let preds = logits.predict_per_timestep();
        let row_margins: Vec<f64> = (0..logits.timesteps())
            .map(|t| {
                let row = logits.row(t);
                row[label] - row[top_non_truth(row, label)]
            })
            .collect();
        for (t, &m) in row_margins.iter().enumerate() {
            if preds[t] == label {
                correct_pool.push(m);
            }
        }
        margins.push((preds, row_margins));
    }
    let cut = if correct_pool.is_empty() {
        f64::NEG_INFINITY
    } else {
        median(correct_pool)
    };
    Ok(margins
        .into_iter()
        .zip(labels)
        .map(|((preds, row_margins), &label)| {
            preds
                .iter()
                .zip(row_margins)
                .map(|(&p, margin)| {
                    let condition = if p != label {
                        Condition::Erroneous
                    } else if margin < cut {
                        Condition::Weak
                    } else {
                        Condition::Correct
                    };
                    TimestepCondition { condition, margin }
                })
                .collect()
        })
        .collect())
}

/// Mean and population standard deviation of one layer's collected values.
/// `mean`/`std` are `None` when nothing was defined at this layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStat {
    pub layer: usize,
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// The per-(sample, timestep) values behind the aggregate, in
    /// collection order, so reports are recomputable.
    pub values: Vec<f64>,
}

impl LayerStat {
    pub fn from_values(layer: usize, values: Vec<f64>) -> Self {
        let count = values.len();
        let (mean, std) = if count == 0 {
            (None, None)
        } else {
            let m = values.iter().sum::<f64>() / count as f64;
            let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
            (Some(m), Some(var.sqrt()))
        };
        LayerStat {
            layer,
            count,
            mean,
            std,
            values,
        }
    }
}

/// Per-timestep vs aggregated accuracy, and how many timesteps the
/// finally-correct samples got right individually.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAccuracyReport {
    pub per_timestep: Vec<f64>,
    pub aggregated: f64,
    /// `histogram[k]` = number of finally-correct samples with exactly `k`
    /// correct timesteps, `k` in `0..=T`. Sums to the finally-correct count.
    pub correct_timestep_histogram: Vec<usize>,
}

impl TemporalAccuracyReport {
    /// Finally-correct samples with at least one erroneous timestep, as a
    /// fraction of all finally-correct samples; 0 when none are correct.
    pub fn fraction_correct_with_errors(&self) -> f64 {
        let total: usize = self.correct_timestep_histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let full = *self.correct_timestep_histogram.last().unwrap();
        (total - full) as f64 / total as f64
    }
}

/// Accuracy analytics over one batch of model outputs.
pub fn temporal_accuracy_report(
    outputs: &[TemporalLogits],
    labels: &[usize],
) -> Result<TemporalAccuracyReport> {
    if outputs.is_empty() {
        return Err(Error::invalid("temporal accuracy needs at least one sample"));
    }
    if outputs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} outputs but {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let t_len = outputs[0].timesteps();
    for o in outputs {
        if o.timesteps() != t_len {
            return Err(Error::invalid("outputs must share one timestep count"));
        }
    }
    let mut step_hits = vec![0usize; t_len];
    let mut agg_hits = 0usize;
    let mut histogram = vec![0usize; t_len + 1];
    for (logits, &label) in outputs.iter().zip(labels) {
        let preds = logits.predict_per_timestep();
        let k = preds.iter().filter(|&&p| p == label).count();
        for (t, &p) in preds.iter().enumerate() {
            if p == label {
                step_hits[t] += 1;
            }
        }
        if logits.predict_aggregate() == label {
            agg_hits += 1;
            histogram[k] += 1;
        }
    }
    let inv = 1.0 / outputs.len() as f64;
    Ok(TemporalAccuracyReport {
        per_timestep: step_hits.iter().map(|&h| h as f64 * inv).collect(),
        aggregated: agg_hits as f64 * inv,
        correct_timestep_histogram: histogram,
    })
}

/// Everything one diagnostics run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    /// Dataset rows the gradient statistics were computed on, ascending.
    pub sample_indices: Vec<usize>,
    pub pair_share: Vec<LayerStat>,
    pub ref_align: Vec<LayerStat>,
    pub kd_ratio: Vec<LayerStat>,
    /// Whole-dataset accuracy analytics (not restricted to the samples).
    pub temporal: TemporalAccuracyReport,
}

/// Collected per-layer statistic values across (sample, timestep) pairs.
struct Collector {
    pair: Vec<Vec<f64>>,
    refa: Vec<Vec<f64>>,
    kdr: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gradient of `node` w.r.t. every layer's weight matrix.
fn weight_grads(
    tape: &Tape,
    node: NodeId,
    weight_ids: &[NodeId],
    numels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let grads = tape.backward(node)?;
    Ok(weight_ids
        .iter()
        .zip(numels)
        .map(|(&id, &n)| grads.wrt_dense(id, n))
        .collect())
}

/// Runs one sample's forward, builds all conditioned probe nodes, then
/// takes the needed backward passes and pushes defined statistic values.
#[allow(clippy::too_many_arguments)]
fn collect_sample(
    net: &SpikingNet,
    input: &EncodedInput,
    teacher: Option<&TeacherLogits>,
    label: usize,
    conditions: &[TimestepCondition],
    config: &DistillConfig,
    out: &mut Collector,
) -> Result<()> {
    let mut tape = Tape::new();
    let params = net.register_params(&mut tape);
    let logits = net.forward_on_tape(&mut tape, &params, input, SpikeMode::Hard)?;
    let obj = build_objective(&mut tape, &logits, teacher, label, config)?;
    let weight_ids = params.weight_ids();
    let numels: Vec<usize> = net.layers.iter().map(|l| l.weight.numel()).collect();
    let layers = net.layers.len();

    let rows: Vec<Vec<f64>> = logits.iter().map(|&id| tape.value(id).data().to_vec()).collect();
    let student = TemporalLogits::from_rows(
        &rows
            .iter()
            .map(|r| crate::tensor::Tensor::vector(r.clone()))
            .collect::<Vec<_>>(),
    )?;
    let any_weak = conditions.iter().any(|c| c.condition == Condition::Weak);
    let weights = if any_weak && student.timesteps() >= 2 {
        Some(sta_weights(&student, config.sta_temperature, config.sta_variant)?)
    } else {
        None
    };

    // Probe nodes first (mutable tape), backward passes after.
    struct ErrProbe {
        z_true: NodeId,
        z_false: NodeId,
        rest: Option<NodeId>,
    }
    let mut err_probes: Vec<ErrProbe> = Vec::new();
    let mut weak_probes: Vec<NodeId> = Vec::new();
    for (t, cond) in conditions.iter().enumerate() {
        let row = &rows[t];
        let c_false = top_non_truth(row, label);
        match cond.condition {
            Condition::Erroneous => {
                let z_true = tape.select(logits[t], vec![label])?;
                let z_false = tape.select(logits[t], vec![c_false])?;
                let rest_idx: Vec<usize> =
                    (0..row.len()).filter(|&j| j != label && j != c_false).collect();
                let rest = if rest_idx.is_empty() {
                    None
                } else {
                    let picked = tape.select(logits[t], rest_idx)?;
                    Some(tape.mean_all(picked)?)
                };
                err_probes.push(ErrProbe {
                    z_true,
                    z_false,
                    rest,
                });
            }
            Condition::Weak => {
                let w_row = &weights.as_ref().expect("weak timestep implies weights")[t];
                let m_ref: f64 = conditions
                    .iter()
                    .enumerate()
                    .filter(|&(s, _)| s != t)
                    .map(|(s, c)| w_row[s] * c.margin)
                    .sum();
                let z_true = tape.select(logits[t], vec![label])?;
                let z_false = tape.select(logits[t], vec![c_false])?;
                let neg = tape.scale(z_false, -1.0)?;
                let m = tape.add(z_true, neg)?;
                let diff = tape.shift(m, -m_ref)?;
                weak_probes.push(tape.mul(diff, diff)?);
            }
            Condition::Correct => {}
        }
    }

    // One update vector, three lenses: every statistic probes the same
    // weighted distillation gradient, conditioned on the timestep state.
    let distill_g = obj
        .distill
        .map(|n| weight_grads(&tape, n, &weight_ids, &numels))
        .transpose()?;
    let needs_cls = conditions.iter().any(|c| c.condition == Condition::Correct);
    let cls_g = if needs_cls {
        Some(weight_grads(&tape, obj.cls, &weight_ids, &numels)?)
    } else {
        None
    };

    if let Some(align_g) = &distill_g {
        for probe in &err_probes {
            let u_true = weight_grads(&tape, probe.z_true, &weight_ids, &numels)?;
            let u_false = weight_grads(&tape, probe.z_false, &weight_ids, &numels)?;
            let u_rest = probe
                .rest
                .map(|n| weight_grads(&tape, n, &weight_ids, &numels))
                .transpose()?;
            for l in 0..layers {
                let d_true = dot(&align_g[l], &u_true[l]).abs();
                let d_false = dot(&align_g[l], &u_false[l]).abs();
                let d_rest = u_rest.as_ref().map_or(0.0, |u| dot(&align_g[l], &u[l]).abs());
                let denom = d_true + d_false + d_rest;
                if denom > 0.0 {
                    out.pair[l].push((d_true + d_false) / denom);
                }
            }
        }
    }

    if let Some(temporal_g) = &distill_g {
        for &probe in &weak_probes {
            let m_g = weight_grads(&tape, probe, &weight_ids, &numels)?;
            for l in 0..layers {
                let (na, nb) = (norm(&temporal_g[l]), norm(&m_g[l]));
                if na >= NORM_FLOOR && nb >= NORM_FLOOR {
                    let cos = dot(&temporal_g[l], &m_g[l]) / (na * nb);
                    out.refa[l].push(cos.clamp(-1.0, 1.0));
                }
            }
        }
    }

    if let Some(cls_g) = &cls_g {
        let correct = conditions.iter().filter(|c| c.condition == Condition::Correct).count();
        for _ in 0..correct {
            for l in 0..layers {
                let task = norm(&cls_g[l]);
                if task < NORM_FLOOR {
                    continue;
                }
                let num = distill_g.as_ref().map_or(0.0, |g| norm(&g[l]));
                out.kdr[l].push(num / task);
            }
        }
    }
    Ok(())
}

/// Runs the three gradient statistics over `samples` rows drawn without
/// replacement from the dataset (clamped to its size) and the temporal
/// analytics over the whole dataset. Never mutates the network. Teacher
/// logits, when given, must cover the dataset in row order.
pub fn run_diagnostics(
    net: &SpikingNet,
    dataset: &Dataset,
    teacher: Option<&[TeacherLogits]>,
    config: &DistillConfig,
    encoder: Encoder,
    samples: usize,
    seed: u64,
) -> Result<DiagnosticsReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("diagnostics need at least one sample"));
    }
    if samples == 0 {
        return Err(Error::invalid("diagnostics need at least one sampled row"));
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
    crate::train::check_teacher_cover(dataset, teacher, config)?;
    let encoded = encode_dataset(dataset, encoder, net.timesteps, seed)?;

    let outputs: Vec<TemporalLogits> = (0..dataset.len())
        .map(|i| Ok(net.forward(&encoded[i])?.logits))
        .collect::<Result<_>>()?;
    let temporal = temporal_accuracy_report(&outputs, dataset.labels())?;

    let take = samples.min(dataset.len());
    let mut rng = substream_rng(seed, Stream::Diagnostics, 0);
    let mut indices = rand::seq::index::sample(&mut rng, dataset.len(), take).into_vec();
    indices.sort_unstable();

    let batch: Vec<TemporalLogits> = indices.iter().map(|&i| outputs[i].clone()).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.label(i)).collect();
    let conditions = classify_timesteps(&batch, &labels)?;

    let layers = net.layers.len();
    let mut out = Collector {
        pair: vec![Vec::new(); layers],
        refa: vec![Vec::new(); layers],
        kdr: vec![Vec::new(); layers],
    };
    for (pos, &i) in indices.iter().enumerate() {
        collect_sample(
            net,
            &encoded[i],
            teacher.map(|t| &t[i]),
            dataset.label(i),
            &conditions[pos],
            config,
            &mut out,
        )?;
    }

    let stats = |values: Vec<Vec<f64>>| {
        values
            .into_iter()
            .enumerate()
            .map(|(l, v)| LayerStat::from_values(l, v))
            .collect()
    };
    Ok(DiagnosticsReport {
        sample_indices: indices,
        pair_share: stats(out.pair),
        ref_align: stats(out.refa),
        kd_ratio: stats(out.kdr),
        temporal,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), fmt_f64)
}

fn layer_stat_lines(out: &mut String, statistic: &str, condition: &str, stats: &[LayerStat]) {
    for s in stats {
        out.push_str(&format!(
            "{{\"kind\":\"layer_stat\",\"statistic\":\"{}\",\"condition\":\"{}\",\"layer\":{},\
             \"count\":{},\"mean\":{},\"std\":{},\"values\":{}}}\n",
            statistic,
            condition,
            s.layer,
            s.count,
            fmt_opt(s.mean),
            fmt_opt(s.std),
            fmt_f64_array(&s.values)
        ));
    }
}

/// Renders the report as JSONL (see the module docs for the schema).
pub fn render_diagnostics(report: &DiagnosticsReport) -> String {
    let mut out = String::new();
    let idx: Vec<String> = report.sample_indices.iter().map(|i| i.to_string()).collect();
    out.push_str(&format!("{{\"kind\":\"samples\",\"indices\":[{}]}}\n", idx.join(",")));
    layer_stat_lines(&mut out, "pair_share", "erroneous", &report.pair_share);
    layer_stat_lines(&mut out, "ref_align", "weak", &report.ref_align);
    layer_stat_lines(&mut out, "kd_ratio", "correct", &report.kd_ratio);
    let hist: Vec<String> = report
        .temporal
        .correct_timestep_histogram
        .iter()
        .map(|h| h.to_string())
        .collect();
    out.push_str(&format!(
        "{{\"kind\":\"temporal_accuracy\",\"per_timestep\":{},\"aggregated\":{},\
         \"correct_timestep_histogram\":[{}]}}\n",
        fmt_f64_array(&report.temporal.per_timestep),
        fmt_f64(report.temporal.aggregated),
        hist.join(",")
    ));
    out
}

/// Writes [`render_diagnostics`] output atomically.
pub fn write_diagnostics(report: &DiagnosticsReport, path: &Path) -> Result<()> {
    io::write_atomic(path, &render_diagnostics(report))
}

/// CSV of one sample's per-timestep logits: header lists class indices
/// `0..C-1`, one row per timestep, exact float text. Emptiness is
/// unrepresentable: [`TemporalLogits`] guarantees `T >= 1, C >= 2`.
pub fn render_logit_heatmap(logits: &TemporalLogits) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..logits.classes()).map(|c| c.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..logits.timesteps() {
        let cells: Vec<String> = logits.row(t).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes [`render_logit_heatmap`] output atomically.
pub fn export_logit_heatmap(logits: &TemporalLogits, path: &Path) -> Result<()> {
    io::write_atomic(path, &render_logit_heatmap(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};
    use crate::distill::Method;
    use crate::lif::LifParams;
    use crate::teacher::train_teacher;
    use crate::tensor::Tensor;
    use crate::train::train_student;

    fn logits(rows: &[&[f64]]) -> TemporalLogits {
        let tensors: Vec<Tensor> = rows.iter().map(|r| Tensor::vector(r.to_vec())).collect();
        TemporalLogits::from_rows(&tensors).unwrap()
    }

    #[test]
    fn classification_hand_case() {
        // Sample 0, label 0: margins 2, 1, -3 (last erroneous).
        // Sample 1, label 1: margins 4, -1 (last erroneous).
        // Correct margins pool {2, 1, 4}, median 2: margin 1 is weak.
        let batch = vec![
            logits(&[&[3.0, 1.0, 0.0], &[2.0, 1.0, 0.5], &[0.0, 3.0, 1.0]]),
            logits(&[&[1.0, 5.0, 0.0], &[2.0, 1.0, 0.0]]),
        ];
        let conds = classify_timesteps(&batch, &[0, 1]).unwrap();
        let states: Vec<Condition> = conds.iter().flatten().map(|c| c.condition).collect();
        assert_eq!(
            states,
            vec![
                Condition::Correct,
                Condition::Weak,
                Condition::Erroneous,
                Condition::Correct,
                Condition::Erroneous
            ]
        );
        let margins: Vec<f64> = conds.iter().flatten().map(|c| c.margin).collect();
        assert_eq!(margins, vec![2.0, 1.0, -3.0, 4.0, -1.0]);
    }

    #[test]
    fn erroneous_iff_argmax_differs_even_on_ties() {
        let batch = vec![logits(&[&[1.0, 1.0]])];
        let conds = classify_timesteps(&batch, &[1]).unwrap();
        // Tie goes to class 0, so label 1 is not predicted: erroneous.
        assert_eq!(conds[0][0].condition, Condition::Erroneous);
        assert_eq!(conds[0][0].margin, 0.0);
    }

    #[test]
    fn temporal_report_hand_counts() {
        // label 0 sample: correct at t0,t1; wrong at t2; aggregate correct.
        // label 1 sample: wrong everywhere; aggregate wrong.
        // label 2 sample: correct everywhere; aggregate correct.
        let outputs = vec![
            logits(&[&[2.0, 0.0, 1.0], &[3.0, 1.0, 0.0], &[0.0, 2.5, 1.0]]),
            logits(&[&[4.0, 0.0, 1.0], &[2.0, 0.0, 1.0], &[9.0, 0.0, 1.0]]),
            logits(&[&[0.0, 1.0, 2.0], &[0.0, 0.0, 4.0], &[1.0, 0.0, 3.0]]),
        ];
        let r = temporal_accuracy_report(&outputs, &[0, 1, 2]).unwrap();
        assert_eq!(r.per_timestep, vec![2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(r.aggregated, 2.0 / 3.0);
        assert_eq!(r.correct_timestep_histogram, vec![0, 0, 1, 1]);
        let total: usize = r.correct_timestep_histogram.iter().sum();
        assert_eq!(total, 2);
        assert_eq!(r.fraction_correct_with_errors(), 0.5);
    }

    #[test]
    fn single_timestep_degenerates() {
        let outputs = vec![logits(&[&[2.0, 0.0]]), logits(&[&[0.0, 1.0]])];
        let r = temporal_accuracy_report(&outputs, &[0, 0]).unwrap();
        assert_eq!(r.per_timestep, vec![0.5]);
        assert_eq!(r.aggregated, 0.5);
        assert_eq!(r.correct_timestep_histogram, vec![0, 1]);
    }

    #[test]
    fn perfect_model_masses_at_full_histogram() {
        let outputs = vec![logits(&[&[2.0, 0.0], &[3.0, 1.0]]); 4];
        let r = temporal_accuracy_report(&outputs, &[0; 4]).unwrap();
        assert_eq!(r.per_timestep, vec![1.0, 1.0]);
        assert_eq!(r.aggregated, 1.0);
        assert_eq!(r.correct_timestep_histogram, vec![0, 0, 4]);
        assert_eq!(r.fraction_correct_with_errors(), 0.0);
    }

    #[test]
    fn layer_stat_matches_direct_recomputation() {
        let values = vec![0.25, 0.5, 0.75, 1.0];
        let s = LayerStat::from_values(2, values.clone());
        let mean = values.iter().sum::<f64>() / 4.0;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!((s.mean.unwrap() - mean).abs() < 1e-12);
        assert!((s.std.unwrap() - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.count, 4);
        let empty = LayerStat::from_values(0, vec![]);
        assert_eq!(empty.mean, None);
        assert_eq!(empty.std, None);
    }

    fn fixture() -> (Dataset, Vec<TeacherLogits>, SpikingNet) {
        let spec = SyntheticSpec {
            classes: 3,
            dimension: 8,
            samples_per_class: 10,
            spread: 0.25,
        };
        let (train, _) = gen_synthetic(&spec, 31).unwrap();
        let plan = crate::optim::TrainPlan {
            epochs: 6,
            batch_size: 10,
            learning_rate: 0.3,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine_schedule: true,
        };
        let teacher = train_teacher(&train, &plan, &[16], 31).unwrap();
        let mut config: DistillConfig = serde_json::from_str("{}").unwrap();
        config.method = Method::Seal;
        let mut rng = substream_rng(31, Stream::StudentInit, 0);
        let net = SpikingNet::random(&[8, 12, 3], LifParams::default(), 4, 1.0, &mut rng).unwrap();
        let out = train_student(
            net,
            &train,
            Some(&teacher.logits),
            &plan,
            &config,
            Encoder::Constant,
            31,
        )
        .unwrap();
        (train, teacher.logits, out.net)
    }

    #[test]
    fn report_ranges_and_weight_freeze() {
        let (train, teacher, net) = fixture();
        let before: Vec<Tensor> = net.layers.iter().map(|l| l.weight.clone()).collect();
        let mut config: DistillConfig = serde_json::from_str("{}").unwrap();
        config.method = Method::Seal;
        let report = run_diagnostics(
            &net,
            &train,
            Some(&teacher),
            &config,
            Encoder::Constant,
            8,
            77,
        )
        .unwrap();
        for s in &report.pair_share {
            for &v in &s.values {
                assert!((0.0..=1.0).contains(&v), "pair share {v}");
            }
        }
        for s in &report.ref_align {
            for &v in &s.values {
                assert!((-1.0..=1.0).contains(&v), "ref align {v}");
            }
        }
        for s in &report.kd_ratio {
            for &v in &s.values {
                assert!(v >= 0.0, "kd ratio {v}");
            }
        }
        for (layer, b) in net.layers.iter().zip(&before) {
            assert_eq!(layer.weight.data(), b.data());
        }
        // Aggregates recompute from stored values.
        for s in report.pair_share.iter().chain(&report.ref_align).chain(&report.kd_ratio) {
            if s.count > 0 {
                let m = s.values.iter().sum::<f64>() / s.count as f64;
                assert!((s.mean.unwrap() - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_class_pair_share_is_one_where_defined() {
        // With C = 2 the rest set is empty, so D_rest = 0 exactly and every
        // defined share is 1.
        let spec = SyntheticSpec {
            classes: 2,
            dimension: 5,
            samples_per_class: 8,
            spread: 0.5,
        };
        let (train, _) = gen_synthetic(&spec, 5).unwrap();
        let plan = crate::optim::TrainPlan {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.2,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine_schedule: true,
        };
        let teacher = train_teacher(&train, &plan, &[8], 5).unwrap();
        let mut config: DistillConfig = serde_json::from_str("{}").unwrap();
        config.method = Method::Seal;
        let mut rng = substream_rng(5, Stream::StudentInit, 0);
        let net = SpikingNet::random(&[5, 6, 2], LifParams::default(), 3, 1.0, &mut rng).unwrap();
        let report = run_diagnostics(
            &net,
            &train,
            Some(&teacher.logits),
            &config,
            Encoder::Constant,
            6,
            5,
        )
        .unwrap();
        for s in &report.pair_share {
            for &v in &s.values {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn ce_only_reports_zero_kd_ratio_and_missing_shares() {
        let (train, _, net) = fixture();
        let config: DistillConfig = {
            let mut c: DistillConfig = serde_json::from_str("{}").unwrap();
            c.method = Method::CeOnly;
            c
        };
        let report =
            run_diagnostics(&net, &train, None, &config, Encoder::Constant, 5, 9).unwrap();
        for s in &report.pair_share {
            assert_eq!(s.count, 0);
            assert_eq!(s.mean, None);
        }
        for s in &report.kd_ratio {
            for &v in &s.values {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let (train, teacher, net) = fixture();
        let mut config: DistillConfig = serde_json::from_str("{}").unwrap();
        config.method = Method::Seal;
        let run = || {
            render_diagnostics(
                &run_diagnostics(
                    &net,
                    &train,
                    Some(&teacher),
                    &config,
                    Encoder::Constant,
                    5,
                    13,
                )
                .unwrap(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn heatmap_round_trips_exactly() {
        let l = logits(&[&[0.1, -2.5, 3.0], &[1.0 / 3.0, 0.0, -7.25]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.csv");
        export_logit_heatmap(&l, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "0,1,2");
        for t in 0..2 {
            let row: Vec<f64> = lines
                .next()
                .unwrap()
                .split(',')
                .map(|c| c.parse().unwrap())
                .collect();
            assert_eq!(row, l.row(t));
        }
    }

    #[test]
    fn untrained_net_still_produces_well_formed_records() {
        let spec = SyntheticSpec {
            classes: 3,
            dimension: 4,
            samples_per_class: 4,
            spread: 0.4,
        };
        let (train, _) = gen_synthetic(&spec, 2).unwrap();
        let mut rng = substream_rng(2, Stream::StudentInit, 0);
        let net = SpikingNet::random(&[4, 5, 3], LifParams::default(), 2, 1.0, &mut rng).unwrap();
        let config: DistillConfig = {
            let mut c: DistillConfig = serde_json::from_str("{}").unwrap();
            c.method = Method::CeOnly;
            c
        };
        let report =
            run_diagnostics(&net, &train, None, &config, Encoder::Constant, 5, 4).unwrap();
        let text = render_diagnostics(&report);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("kind").is_some());
        }
    }

    #[test]
    fn split_mismatch_and_empty_sampling_are_rejected() {
        let (train, _, net) = fixture();
        let config: DistillConfig = {
            let mut c: DistillConfig = serde_json::from_str("{}").unwrap();
            c.method = Method::CeOnly;
            c
        };
        assert!(run_diagnostics(&net, &train, None, &config, Encoder::Constant, 0, 1).is_err());
        let _ = Split::Test;
    }
}
