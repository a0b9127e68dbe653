//! Feedforward spiking network: affine layers interleaved with
//! leaky integrate-and-fire neurons, unrolled over discrete timesteps.
//!
//! Layout for dims `[D, H1, .., Hk, C]`: the first affine layer maps the
//! encoded input to currents (multiply-accumulate work), each hidden width
//! gets a spiking neuron layer, and the final affine readout maps spikes to
//! per-timestep logits. Membrane state persists across timesteps within one
//! forward pass and starts at rest.
//!
//! Two forward paths exist and produce bit-identical logits: a value-only
//! pass used for evaluation and tracing, and a taped pass used for
//! training gradients. Both call the same arithmetic kernels in the same
//! order.

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io;
use crate::lif::{lif_step, LifParams, LifState};
use crate::tape::{NodeId, SpikeMode, Tape};
use crate::tensor::{argmax, matmul_kernel, Tensor};

/// One affine map `x @ weight + bias` with `weight` of shape
/// `(in_dim, out_dim)` and `bias` of shape `(out_dim,)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    /// Builds a layer after validating shapes.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "affine_layer",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(AffineLayer { weight, bias })
    }

    /// Fan-in scaled uniform initialization: weights drawn from
    /// `U(-scale/sqrt(in_dim), +scale/sqrt(in_dim))`, biases zero.
    pub fn random(in_dim: usize, out_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale / (in_dim as f64).sqrt();
        let mut w = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..in_dim * out_dim {
            w.push(rng.random_range(-bound..=bound));
        }
        AffineLayer {
            weight: Tensor::matrix(in_dim, out_dim, w).expect("init shape"),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Value-path affine map for a rank-1 input.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        let mut out = matmul_kernel(x, self.weight.data(), 1, self.in_dim(), self.out_dim());
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        out
    }
}

/// Per-timestep class logits of one sample: shape `(timesteps, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalLogits {
    values: Tensor,
}

impl TemporalLogits {
    /// Wraps a rank-2 tensor of at least 1 timestep and 2 classes.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] < 1 || values.shape()[1] < 2 {
            return Err(Error::invalid(format!(
                "temporal logits need shape (T >= 1, C >= 2), got {:?}",
                values.shape()
            )));
        }
        Ok(TemporalLogits { values })
    }

    /// Stacks per-timestep rank-1 logit rows.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("temporal logits need at least one timestep"));
        }
        let c = rows[0].numel();
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.rank() != 1 || r.numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "temporal_logits",
                    lhs: vec![c],
                    rhs: r.shape().to_vec(),
                });
            }
            data.extend_from_slice(r.data());
        }
        TemporalLogits::new(Tensor::matrix(rows.len(), c, data)?)
    }

    pub fn timesteps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Logit row at timestep `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Mean logits over time, the aggregated readout used for prediction.
    pub fn aggregate(&self) -> Vec<f64> {
        let (t, c) = (self.timesteps(), self.classes());
        let mut out = vec![0.0; c];
        for ti in 0..t {
            for j in 0..c {
                out[j] += self.values.data()[ti * c + j];
            }
        }
        for v in &mut out {
            *v /= t as f64;
        }
        out
    }

    /// Argmax class of each timestep row (ties to the lowest index).
    pub fn predict_per_timestep(&self) -> Vec<usize> {
        (0..self.timesteps()).map(|t| argmax(self.row(t))).collect()
    }

    /// Argmax class of the aggregated logits.
    pub fn predict_aggregate(&self) -> usize {
        argmax(&self.aggregate())
    }
}

/// How a static feature vector becomes a current sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoder {
    /// The feature vector is injected unchanged at every timestep.
    Constant,
    /// Each feature is treated as a Bernoulli rate in [0, 1] and sampled
    /// independently per timestep.
    Rate,
}

/// Encoded input: one current vector per timestep.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    pub steps: Vec<Tensor>,
}

/// Encodes one feature vector. `Rate` encoding requires features in [0, 1]
/// and draws from `rng`; `Constant` ignores `rng`.
pub fn encode_input(
    features: &[f64],
    encoder: Encoder,
    timesteps: usize,
    rng: &mut impl Rng,
) -> Result<EncodedInput> {
    if timesteps == 0 {
        return Err(Error::invalid("encoder needs at least one timestep"));
    }
    if features.is_empty() {
        return Err(Error::invalid("encoder needs a non-empty feature vector"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("encoder features"));
    }
    let steps = match encoder {
        Encoder::Constant => {
            let step = Tensor::vector(features.to_vec());
            vec![step; timesteps]
        }
        Encoder::Rate => {
            if features.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid("rate encoding requires features in [0, 1]"));
            }
            let mut steps = Vec::with_capacity(timesteps);
            for _ in 0..timesteps {
                let row: Vec<f64> = features
                    .iter()
                    .map(|&p| if rng.random_range(0.0..1.0) < p { 1.0 } else { 0.0 })
                    .collect();
                steps.push(Tensor::vector(row));
            }
            steps
        }
    };
    Ok(EncodedInput { steps })
}

/// Everything observed during one value-path forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub logits: TemporalLogits,
    /// Binary spike vectors indexed `[hidden_layer][timestep]`.
    pub spikes: Vec<Vec<Tensor>>,
    /// Post-reset membrane potentials indexed `[hidden_layer][timestep]`.
    pub membranes: Vec<Vec<Tensor>>,
}

/// Tape handles for one registration of the network parameters.
#[derive(Debug, Clone)]
pub struct TapeParams {
    /// `(weight, bias)` leaf ids per affine layer, in layer order.
    pub layers: Vec<(NodeId, NodeId)>,
}

impl TapeParams {
    /// Weight leaf ids only, in layer order.
    pub fn weight_ids(&self) -> Vec<NodeId> {
        self.layers.iter().map(|&(w, _)| w).collect()
    }
}

/// Spiking classifier with persistent membrane state across `timesteps`.
#[derive(Debug, Clone)]
pub struct SpikingNet {
    pub layers: Vec<AffineLayer>,
    pub lif: LifParams,
    pub timesteps: usize,
}

impl SpikingNet {
    /// Builds a network from explicit layers, validating the chain.
    pub fn new(layers: Vec<AffineLayer>, lif: LifParams, timesteps: usize) -> Result<Self> {
        lif.validate()?;
        if timesteps == 0 {
            return Err(Error::invalid("network needs at least one timestep"));
        }
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one affine layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "spiking_net",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        if layers.last().unwrap().out_dim() < 2 {
            return Err(Error::invalid("network needs at least 2 output classes"));
        }
        Ok(SpikingNet {
            layers,
            lif,
            timesteps,
        })
    }

    /// Random network for dims `[input, hidden.., classes]` with fan-in
    /// scaled uniform weights.
    pub fn random(
        dims: &[usize],
        lif: LifParams,
        timesteps: usize,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("network needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("network dims must be positive"));
        }
        let layers = dims
            .windows(2)
            .map(|p| AffineLayer::random(p[0], p[1], init_scale, rng))
            .collect();
        SpikingNet::new(layers, lif, timesteps)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Hidden spiking layer widths, in order.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim())
            .collect()
    }

    /// Total parameter count over all weights and biases.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    fn check_input(&self, input: &EncodedInput) -> Result<()> {
        if input.steps.len() != self.timesteps {
            return Err(Error::invalid(format!(
                "encoded input has {} steps, network expects {}",
                input.steps.len(),
                self.timesteps
            )));
        }
        for step in &input.steps {
            if step.rank() != 1 || step.numel() != self.input_dim() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: vec![self.input_dim()],
                    rhs: step.shape().to_vec(),
                });
            }
            step.ensure_finite("encoded input")?;
        }
        Ok(())
    }

    /// Value-path forward pass with hard spikes. Records spikes and
    /// post-reset membranes of every hidden layer at every timestep.
    pub fn forward(&self, input: &EncodedInput) -> Result<ForwardRecord> {
        self.check_input(input)?;
        let hidden = self.layers.len() - 1;
        let mut states: Vec<LifState> = (0..hidden)
            .map(|l| LifState::resting(self.layers[l].out_dim()))
            .collect();
        let mut spikes: Vec<Vec<Tensor>> = vec![Vec::with_capacity(self.timesteps); hidden];
        let mut membranes: Vec<Vec<Tensor>> = vec![Vec::with_capacity(self.timesteps); hidden];
        let mut rows = Vec::with_capacity(self.timesteps);

        for t in 0..self.timesteps {
            let mut x = input.steps[t].data().to_vec();
            for l in 0..hidden {
                let current = Tensor::vector(self.layers[l].apply(&x));
                let (s, next) = lif_step(&states[l], &current, &self.lif)?;
                x = s.data().to_vec();
                spikes[l].push(s);
                membranes[l].push(next.membrane.clone());
                states[l] = next;
            }
            rows.push(Tensor::vector(self.layers[hidden].apply(&x)));
        }
        Ok(ForwardRecord {
            logits: TemporalLogits::from_rows(&rows)?,
            spikes,
            membranes,
        })
    }

    /// Registers every weight and bias as tape leaves.
    pub fn register_params(&self, tape: &mut Tape) -> TapeParams {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        TapeParams { layers }
    }

    /// Taped forward pass returning one logit node of shape `(classes,)`
    /// per timestep. Produces values bit-identical to [`SpikingNet::forward`]
    /// when `mode` is [`SpikeMode::Hard`].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        input: &EncodedInput,
        mode: SpikeMode,
    ) -> Result<Vec<NodeId>> {
        self.check_input(input)?;
        if params.layers.len() != self.layers.len() {
            return Err(Error::invalid("tape params do not match network layers"));
        }
        let hidden = self.layers.len() - 1;
        // Resting membranes enter the tape as zero leaves so t = 0 computes
        // alpha * u + i exactly like the value path, bit for bit.
        let mut membranes: Vec<NodeId> = (0..hidden)
            .map(|l| tape.leaf(Tensor::zeros(vec![self.layers[l].out_dim()])))
            .collect();
        let mut logits = Vec::with_capacity(self.timesteps);

        for t in 0..self.timesteps {
            let mut x = tape.leaf(input.steps[t].clone());
            for l in 0..hidden {
                let (w, b) = params.layers[l];
                let prod = tape.matmul(x, w)?;
                let current = tape.add(prod, b)?;
                let leaked = tape.scale(membranes[l], self.lif.leak_alpha)?;
                let v = tape.add(leaked, current)?;
                let above = tape.shift(v, -self.lif.v_threshold)?;
                let s = tape.spike(above, self.lif.surrogate_width, mode)?;
                let reset = tape.scale(s, -self.lif.v_threshold)?;
                membranes[l] = tape.add(v, reset)?;
                x = s;
            }
            let (w, b) = params.layers[hidden];
            let prod = tape.matmul(x, w)?;
            logits.push(tape.add(prod, b)?);
        }
        Ok(logits)
    }

    // ── serialization ───────────────────────────────────────────────────

    /// Renders the network as deterministic JSON with exact float text.
    pub fn to_json(&self) -> Result<String> {
        for (i, l) in self.layers.iter().enumerate() {
            l.weight.ensure_finite(&format!("layer {i} weight"))?;
            l.bias.ensure_finite(&format!("layer {i} bias"))?;
        }
        let mut out = String::from("{\"format\":\"snn-net-v1\",");
        out.push_str(&format!("\"timesteps\":{},", self.timesteps));
        out.push_str(&format!(
            "\"lif\":{{\"leak_alpha\":{},\"v_threshold\":{},\"surrogate_width\":{}}},",
            io::fmt_f64(self.lif.leak_alpha),
            io::fmt_f64(self.lif.v_threshold),
            io::fmt_f64(self.lif.surrogate_width)
        ));
        out.push_str("\"layers\":[");
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!(
                "{{\"in_dim\":{},\"out_dim\":{},\"weight\":{},\"bias\":{}}}",
                l.in_dim(),
                l.out_dim(),
                io::fmt_f64_array(l.weight.data()),
                io::fmt_f64_array(l.bias.data())
            ));
        }
        out.push_str("]}\n");
        Ok(out)
    }

    /// Parses [`SpikingNet::to_json`] output, validating shapes, ranges,
    /// and finiteness.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct LayerFile {
            in_dim: usize,
            out_dim: usize,
            weight: Vec<f64>,
            bias: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct NetFile {
            format: String,
            timesteps: usize,
            lif: LifParams,
            layers: Vec<LayerFile>,
        }
        let file: NetFile = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if file.format != "snn-net-v1" {
            return Err(Error::Json {
                path: origin.to_string(),
                message: format!("unsupported format {:?}", file.format),
            });
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let weight = Tensor::matrix(l.in_dim, l.out_dim, l.weight).map_err(|e| Error::Json {
                path: origin.to_string(),
                message: format!("layer {i}: {e}"),
            })?;
            let bias = Tensor::new(vec![l.out_dim], l.bias).map_err(|e| Error::Json {
                path: origin.to_string(),
                message: format!("layer {i}: {e}"),
            })?;
            weight.ensure_finite(&format!("{origin} layer {i} weight"))?;
            bias.ensure_finite(&format!("{origin} layer {i} bias"))?;
            layers.push(AffineLayer::new(weight, bias)?);
        }
        SpikingNet::new(layers, file.lif, file.timesteps)
    }

    /// Writes [`SpikingNet::to_json`] atomically.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        io::write_atomic(path, &self.to_json()?)
    }

    /// Loads a network from a JSON checkpoint.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&io::read_file(path)?, &path.display().to_string())
    }
}
