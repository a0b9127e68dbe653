//! The non-spiking teacher: a relu MLP trained with cross-entropy, plus
//! JSONL export/import of its per-sample logits.
//!
//! The teacher consumes raw features (the time-average of a
//! constant-current encoding) and emits one time-invariant logit vector
//! per sample. Training is mini-batch momentum SGD with the cosine
//! schedule; everything is deterministic in the run seed.

use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::data::{Dataset, Split};
use crate::distill::{build_cls_loss, TeacherLogits};
use crate::error::{Error, Result};
use crate::io::{fmt_f64_array, parse_jsonl, read_file, write_atomic};
use crate::network::{AffineLayer, TapeParams};
use crate::optim::{cosine_lr, step_affine_layers, MomentumSgd, TrainPlan};
use crate::rng::{substream_rng, Stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax, Tensor};

/// A fully connected relu network; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<AffineLayer>,
}

impl Mlp {
    /// Builds from explicit layers; consecutive dimensions must chain.
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "mlp_chain",
                    lhs: vec![w[0].out_dim()],
                    rhs: vec![w[1].in_dim()],
                });
            }
        }
        if layers.last().unwrap().out_dim() < 2 {
            return Err(Error::invalid("mlp output layer needs at least 2 classes"));
        }
        Ok(Mlp { layers })
    }

    /// Random fan-in-scaled init over the dimension chain `dims`.
    pub fn random(dims: &[usize], init_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("mlp needs an input and an output dimension"));
        }
        let layers = dims
            .windows(2)
            .map(|w| AffineLayer::random(w[0], w[1], init_scale, rng))
            .collect();
        Mlp::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    /// Value-path forward to logits.
    pub fn forward(&self, features: &[f64]) -> Result<Tensor> {
        if features.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: vec![self.input_dim()],
                rhs: vec![features.len()],
            });
        }
        let mut x = features.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(&x);
            if i + 1 < self.layers.len() {
                // Same convention as the tape relu, bit for bit.
                for v in &mut x {
                    *v = if *v > 0.0 { *v } else { 0.0 };
                }
            }
        }
        Ok(Tensor::vector(x))
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(self.forward(features)?.data()))
    }

    /// Registers weights and biases as tape leaves, layer by layer.
    pub fn register_params(&self, tape: &mut Tape) -> TapeParams {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weight.clone());
                let b = tape.leaf(l.bias.clone());
                (w, b)
            })
            .collect();
        TapeParams { layers }
    }

    /// Tape-path forward producing the logit node; mirrors `forward`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        features: &[f64],
    ) -> Result<NodeId> {
        if features.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: vec![self.input_dim()],
                rhs: vec![features.len()],
            });
        }
        if params.layers.len() != self.layers.len() {
            return Err(Error::invalid("tape params do not match mlp layer count"));
        }
        let mut x = tape.leaf(Tensor::vector(features.to_vec()));
        for (i, &(w, b)) in params.layers.iter().enumerate() {
            let prod = tape.matmul(x, w)?;
            x = tape.add(prod, b)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Writes back updated parameter values after an optimizer step.
    pub fn set_params(&mut self, values: &[(Tensor, Tensor)]) -> Result<()> {
        if values.len() != self.layers.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (layer, (w, b)) in self.layers.iter_mut().zip(values) {
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mlp_set_params",
                    lhs: layer.weight.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            layer.weight = w.clone();
            layer.bias = b.clone();
        }
        Ok(())
    }

    /// Serializes as `mlp-net-v1` JSON with exact decimal floats.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"format\":\"mlp-net-v1\",\"layers\":[");
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!(
                "{{\"in_dim\":{},\"out_dim\":{},\"weight\":{},\"bias\":{}}}",
                layer.in_dim(),
                layer.out_dim(),
                fmt_f64_array(layer.weight.data()),
                fmt_f64_array(layer.bias.data())
            ));
        }
        s.push_str("]}\n");
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct MlpJson {
            format: String,
            layers: Vec<LayerJson>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct LayerJson {
            in_dim: usize,
            out_dim: usize,
            weight: Vec<f64>,
            bias: Vec<f64>,
        }
        let parsed: MlpJson = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if parsed.format != "mlp-net-v1" {
            return Err(Error::Json {
                path: origin.to_string(),
                message: format!("unsupported format {:?}, expected \"mlp-net-v1\"", parsed.format),
            });
        }
        let layers = parsed
            .layers
            .into_iter()
            .map(|l| {
                let weight = Tensor::new(vec![l.in_dim, l.out_dim], l.weight)?;
                let bias = Tensor::new(vec![l.out_dim], l.bias)?;
                AffineLayer::new(weight, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Mlp::from_json(&read_file(path)?, &path.display().to_string())
    }
}

/// Fraction of samples whose argmax matches the label.
pub fn mlp_accuracy(net: &Mlp, dataset: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..dataset.len() {
        if net.predict(dataset.feature_row(i))? == dataset.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// A trained teacher plus its logits for every sample of the training set,
/// in dataset order.
#[derive(Debug, Clone)]
pub struct TeacherArtifacts {
    pub net: Mlp,
    pub logits: Vec<TeacherLogits>,
}

/// Trains the teacher MLP on the train split. `hidden` lists hidden-layer
/// widths. Zero epochs are allowed and return logits of the freshly
/// initialized network. Non-finite losses abort with the epoch index.
pub fn train_teacher(
    dataset: &Dataset,
    plan: &TrainPlan,
    hidden: &[usize],
    seed: u64,
) -> Result<TeacherArtifacts> {
    plan.validate_fields()?;
    if dataset.split() != Split::Train {
        return Err(Error::invalid("teacher training requires the train split"));
    }
    let mut dims = vec![dataset.dim()];
    dims.extend_from_slice(hidden);
    dims.push(dataset.classes());
    let mut init_rng = substream_rng(seed, Stream::TeacherInit, 0);
    let mut net = Mlp::random(&dims, 1.0, &mut init_rng)?;

    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(plan.batch_size);
    let total_steps = plan.epochs * batches_per_epoch;
    let mut opt = MomentumSgd::new(plan.momentum, plan.weight_decay)?;
    let mut step = 0usize;

    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = substream_rng(seed, Stream::TeacherShuffle, epoch as u64);
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
            let mut sample_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let logits = net.forward_on_tape(&mut tape, &params, dataset.feature_row(i))?;
                sample_losses.push(build_cls_loss(&mut tape, &[logits], dataset.label(i), 1.0)?);
            }
            let sum = tape.add_n(&sample_losses)?;
            let loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
            let loss_value = tape.value(loss).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch cross-entropy = {loss_value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let values =
                step_affine_layers(&mut opt, lr, net.layers(), &params, &grads).map_err(|e| {
                    match e {
                        Error::NonFinite { context } => Error::Diverged {
                            epoch,
                            detail: format!("non-finite {context}"),
                        },
                        other => other,
                    }
                })?;
            net.set_params(&values)?;
        }
    }

    let logits = dataset_logits(&net, dataset)?;
    Ok(TeacherArtifacts { net, logits })
}

/// Evaluates the network on every sample, in order.
pub fn dataset_logits(net: &Mlp, dataset: &Dataset) -> Result<Vec<TeacherLogits>> {
    (0..dataset.len())
        .map(|i| TeacherLogits::new(net.forward(dataset.feature_row(i))?))
        .collect()
}

/// Renders one `{"index":i,"logits":[...]}` record per sample.
pub fn render_teacher_logits(logits: &[TeacherLogits]) -> String {
    let mut out = String::new();
    for (i, l) in logits.iter().enumerate() {
        out.push_str(&format!(
            "{{\"index\":{},\"logits\":{}}}\n",
            i,
            fmt_f64_array(l.values().data())
        ));
    }
    out
}

/// Writes [`render_teacher_logits`] output atomically.
pub fn export_teacher_logits(logits: &[TeacherLogits], path: &Path) -> Result<()> {
    write_atomic(path, &render_teacher_logits(logits))
}

/// Reads a teacher-logit JSONL file. Indices must be contiguous from 0 and
/// every record must have the same class count. An empty file yields an
/// empty set (rejected later by training preconditions).
pub fn import_teacher_logits(path: &Path) -> Result<Vec<TeacherLogits>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Record {
        index: usize,
        logits: Vec<f64>,
    }
    let records: Vec<Record> = parse_jsonl(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if r.index != i {
            return Err(Error::Json {
                path: path.display().to_string(),
                message: format!("record {i} has index {}, expected contiguous indices", r.index),
            });
        }
        let tl = TeacherLogits::from_vec(r.logits)?;
        if let Some(first) = out.first() {
            let c0 = TeacherLogits::classes(first);
            if tl.classes() != c0 {
                return Err(Error::Json {
                    path: path.display().to_string(),
                    message: format!(
                        "record {i} has {} classes, expected {c0}",
                        tl.classes()
                    ),
                });
            }
        }
        out.push(tl);
    }
    Ok(out)
}
