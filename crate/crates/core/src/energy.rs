//! Synaptic-operation energy accounting over spike traces.
//!
//! Counting convention: the first affine layer consumes real-valued
//! encoded input, so its synapses do multiply-accumulates (MACs), counted
//! once per sample from connectivity alone. Hidden spiking layers do
//! accumulates (ACs): a spike activates all outgoing synapses of its
//! neuron, so each spike contributes its neuron's fan-out. For a dense
//! layer of width n feeding width m, every neuron's fan-out is m.
//!
//! Counts are exact integers; energy is `e_ac * acs + e_mac * macs` in
//! picojoules. Reports average over samples and note so in the schema:
//! `acs`/`sop_pj`/`fire_rate` are per-sample means, `macs` is per sample
//! by construction, and `fire_rate` is total spikes over total
//! neuron-timesteps.

use std::path::Path;

use serde::Deserialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64};
use crate::network::{Encoder, ForwardRecord, SpikingNet};
use crate::train::encode_dataset;

fn default_e_ac() -> f64 {
    0.9
}
fn default_e_mac() -> f64 {
    4.6
}

/// Energy cost per operation, in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyModel {
    #[serde(default = "default_e_ac")]
    pub e_ac: f64,
    #[serde(default = "default_e_mac")]
    pub e_mac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            e_ac: default_e_ac(),
            e_mac: default_e_mac(),
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("e_ac", self.e_ac), ("e_mac", self.e_mac)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} {v} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// One layer's spikes and connectivity: `spikes[t][i]` is neuron `i` at
/// timestep `t`, `fan_out[i]` its outgoing synapse count.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    fan_out: Vec<u64>,
    spikes: Vec<Vec<u8>>,
}

impl LayerTrace {
    /// Validates shape agreement and binary spikes. Zero timesteps are
    /// allowed: such a trace carries connectivity only.
    pub fn new(fan_out: Vec<u64>, spikes: Vec<Vec<u8>>) -> Result<Self> {
        if fan_out.is_empty() {
            return Err(Error::invalid("layer trace needs at least one neuron"));
        }
        for row in &spikes {
            if row.len() != fan_out.len() {
                return Err(Error::invalid(format!(
                    "spike row has {} neurons, layer has {}",
                    row.len(),
                    fan_out.len()
                )));
            }
            if row.iter().any(|&s| s > 1) {
                return Err(Error::invalid("spikes must be 0 or 1"));
            }
        }
        Ok(LayerTrace { fan_out, spikes })
    }

    pub fn neurons(&self) -> usize {
        self.fan_out.len()
    }

    pub fn timesteps(&self) -> usize {
        self.spikes.len()
    }

    pub fn fan_out(&self) -> &[u64] {
        &self.fan_out
    }

    pub fn spikes(&self) -> &[Vec<u8>] {
        &self.spikes
    }

    /// Total spikes in this layer.
    pub fn spike_count(&self) -> u64 {
        self.spikes.iter().flatten().map(|&s| s as u64).sum()
    }

    /// Spike-driven accumulates: every spike activates its fan-out.
    pub fn acs(&self) -> u64 {
        let mut total = 0u64;
        for row in &self.spikes {
            for (i, &s) in row.iter().enumerate() {
                total += self.fan_out[i] * s as u64;
            }
        }
        total
    }

    /// Connectivity-driven multiply-accumulates, independent of spikes.
    pub fn macs(&self) -> u64 {
        self.fan_out.iter().sum()
    }
}

/// Spiking layers of one forward pass, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrace {
    pub layers: Vec<LayerTrace>,
}

impl SpikeTrace {
    /// Extracts the spiking hidden layers of one recorded forward pass.
    /// Neuron fan-out in hidden layer `h` is the next affine layer's
    /// output width.
    pub fn from_forward(net: &SpikingNet, record: &ForwardRecord) -> Result<SpikeTrace> {
        let hidden = net.layers.len() - 1;
        if record.spikes.len() != hidden {
            return Err(Error::invalid(format!(
                "record has {} spiking layers, network has {hidden}",
                record.spikes.len()
            )));
        }
        let mut layers = Vec::with_capacity(hidden);
        for h in 0..hidden {
            let width = net.layers[h].out_dim();
            let fan = net.layers[h + 1].out_dim() as u64;
            let mut rows = Vec::with_capacity(record.spikes[h].len());
            for step in &record.spikes[h] {
                if step.numel() != width {
                    return Err(Error::invalid(format!(
                        "spike step has {} neurons, layer {h} has {width}",
                        step.numel()
                    )));
                }
                let row: Vec<u8> = step
                    .data()
                    .iter()
                    .map(|&v| {
                        if v == 0.0 {
                            Ok(0u8)
                        } else if v == 1.0 {
                            Ok(1u8)
                        } else {
                            Err(Error::invalid(format!("non-binary spike value {v}")))
                        }
                    })
                    .collect::<Result<_>>()?;
                rows.push(row);
            }
            layers.push(LayerTrace::new(vec![fan; width], rows)?);
        }
        Ok(SpikeTrace { layers })
    }
}

/// Exact triple sum of `fan_out[i] * spike[t][i]` over the trace.
pub fn count_acs(trace: &SpikeTrace) -> u64 {
    trace.layers.iter().map(LayerTrace::acs).sum()
}

/// Exact connectivity sum over the trace, independent of spikes and of
/// the timestep count.
pub fn count_macs(trace: &SpikeTrace) -> u64 {
    trace.layers.iter().map(LayerTrace::macs).sum()
}

/// Multiply-accumulate count of the network's analog input layer: every
/// input feature feeds every first-hidden neuron once per sample.
pub fn input_macs(net: &SpikingNet) -> u64 {
    (net.layers[0].in_dim() as u64) * (net.layers[0].out_dim() as u64)
}

/// Synaptic-operation energy in picojoules.
pub fn sop(acs: u64, macs: u64, model: &EnergyModel) -> Result<f64> {
    model.validate()?;
    Ok(model.e_ac * acs as f64 + model.e_mac * macs as f64)
}

/// Total spikes over total neuron-timesteps. Rejects traces without a
/// single neuron-timestep.
pub fn fire_rate(trace: &SpikeTrace) -> Result<f64> {
    let mut spikes = 0u64;
    let mut slots = 0u64;
    for l in &trace.layers {
        spikes += l.spike_count();
        slots += (l.neurons() as u64) * (l.timesteps() as u64);
    }
    if slots == 0 {
        return Err(Error::invalid("fire rate needs at least one neuron-timestep"));
    }
    Ok(spikes as f64 / slots as f64)
}

/// Per-layer breakdown of an [`EnergyReport`]. `layer` indexes spiking
/// hidden layers from 0; counts are per-sample means.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub layer: usize,
    pub neurons: usize,
    /// Total outgoing synapses of the layer.
    pub fan_out: u64,
    /// Mean accumulate count per sample.
    pub acs: f64,
    /// Layer spikes over layer neuron-timesteps, pooled across samples.
    pub fire_rate: f64,
}

/// Dataset-level energy accounting; see the module docs for averaging
/// conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub samples: usize,
    /// Mean accumulate count per sample.
    pub acs: f64,
    /// Multiply-accumulate count per sample (input layer connectivity).
    pub macs: u64,
    /// `e_ac * acs + e_mac * macs` with the per-sample mean counts.
    pub sop_pj: f64,
    /// Total spikes over total neuron-timesteps, all samples pooled.
    pub fire_rate: f64,
    pub per_layer: Vec<LayerEnergy>,
}

/// Runs the network over every dataset row and aggregates energy counts.
pub fn energy_report(
    net: &SpikingNet,
    dataset: &Dataset,
    encoder: Encoder,
    model: &EnergyModel,
    seed: u64,
) -> Result<EnergyReport> {
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("energy report needs at least one sample"));
    }
    if net.input_dim() != dataset.dim() {
        return Err(Error::invalid(format!(
            "network expects {} inputs, dataset has {}",
            net.input_dim(),
            dataset.dim()
        )));
    }
    let encoded = encode_dataset(dataset, encoder, net.timesteps, seed)?;
    let hidden = net.layers.len() - 1;
    let mut layer_acs = vec![0u64; hidden];
    let mut layer_spikes = vec![0u64; hidden];
    let mut layer_slots = vec![0u64; hidden];
    let mut fan_totals = vec![0u64; hidden];
    for enc in &encoded {
        let record = net.forward(enc)?;
        let trace = SpikeTrace::from_forward(net, &record)?;
        for (h, l) in trace.layers.iter().enumerate() {
            layer_acs[h] += l.acs();
            layer_spikes[h] += l.spike_count();
            layer_slots[h] += (l.neurons() as u64) * (l.timesteps() as u64);
            fan_totals[h] = l.macs();
        }
    }
    let n = dataset.len();
    let inv = 1.0 / n as f64;
    let per_layer: Vec<LayerEnergy> = (0..hidden)
        .map(|h| LayerEnergy {
            layer: h,
            neurons: net.layers[h].out_dim(),
            fan_out: fan_totals[h],
            acs: layer_acs[h] as f64 * inv,
            fire_rate: layer_spikes[h] as f64 / layer_slots[h] as f64,
        })
        .collect();
    let total_acs: u64 = layer_acs.iter().sum();
    let macs = input_macs(net);
    let mean_acs = total_acs as f64 * inv;
    let spikes: u64 = layer_spikes.iter().sum();
    let slots: u64 = layer_slots.iter().sum();
    Ok(EnergyReport {
        samples: n,
        acs: mean_acs,
        macs,
        sop_pj: model.e_ac * mean_acs + model.e_mac * macs as f64,
        fire_rate: spikes as f64 / slots as f64,
        per_layer,
    })
}

/// Renders the report as one JSON object with exact float text.
pub fn render_energy(report: &EnergyReport) -> String {
    let mut layers = String::new();
    for (i, l) in report.per_layer.iter().enumerate() {
        if i > 0 {
            layers.push(',');
        }
        layers.push_str(&format!(
            "{{\"layer\":{},\"neurons\":{},\"fan_out\":{},\"acs\":{},\"fire_rate\":{}}}",
            l.layer,
            l.neurons,
            l.fan_out,
            fmt_f64(l.acs),
            fmt_f64(l.fire_rate)
        ));
    }
    format!(
        "{{\"samples\":{},\"acs\":{},\"macs\":{},\"sop_pj\":{},\"fire_rate\":{},\
         \"per_layer\":[{}],\"note\":\"per-sample averages\"}}\n",
        report.samples,
        fmt_f64(report.acs),
        report.macs,
        fmt_f64(report.sop_pj),
        fmt_f64(report.fire_rate),
        layers
    )
}

/// Writes [`render_energy`] output atomically.
pub fn write_energy(report: &EnergyReport, path: &Path) -> Result<()> {
    io::write_atomic(path, &render_energy(report))
}
