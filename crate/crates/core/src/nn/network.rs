use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::crossbar::{quantize_activations, BitPlanes, Crossbar, EnergyCoefficient, EnergyLedger, StateTensor};
use crate::device::DeviceModel;
use crate::rng::Stream;
use crate::{Error, Result};

/// How dense layers execute on their crossbars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Stored weights are read exactly.
    Ideal,
    /// One fluctuating read per cell.
    NoisyOriginal,
    /// One fluctuating read per cell per activation bit plane.
    NoisyDecomposed,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Ideal => "ideal",
            ExecMode::NoisyOriginal => "original",
            ExecMode::NoisyDecomposed => "decomposed",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(ExecMode::Ideal),
            "original" | "noisy_original" => Ok(ExecMode::NoisyOriginal),
            "decomposed" | "noisy_decomposed" => Ok(ExecMode::NoisyDecomposed),
            other => Err(Error::config(
                "mode",
                format!("unknown mode `{other}` (expected ideal|original|decomposed)"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Logits; softmax is applied by the loss and by prediction.
    SoftmaxHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantization {
    /// `None` programs master weights verbatim.
    pub weight_bits: Option<u32>,
    /// `None` drives crossbars with raw activations; decomposition needs `Some`.
    pub act_bits: Option<u32>,
}

impl Default for Quantization {
    fn default() -> Self {
        Quantization {
            weight_bits: Some(8),
            act_bits: Some(8),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSharing {
    #[default]
    PerLayer,
    Global,
}

/// Activation scale used to quantize layer inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActScaling {
    /// Maximum over the current batch (training).
    Batch,
    /// Each layer's frozen running maximum (evaluation).
    Frozen,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub scaling: ActScaling,
    /// Keep activations, deviations and states for backward/replay.
    pub record: bool,
}

impl ForwardOptions {
    pub const TRAIN: ForwardOptions = ForwardOptions {
        scaling: ActScaling::Batch,
        record: true,
    };
    pub const EVAL: ForwardOptions = ForwardOptions {
        scaling: ActScaling::Frozen,
        record: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Full-precision master weights, row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Index into [`Network::thetas`].
    pub rho_slot: usize,
    /// Frozen activation maximum used to quantize this layer's inputs at evaluation.
    pub act_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    pub quant: Quantization,
    pub sharing: RhoSharing,
    pub init_rho: f64,
}

/// A stack of crossbar-backed dense layers with trainable `(W, B, theta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
    /// `theta = ln rho`, one per layer or a single shared slot.
    pub thetas: Vec<f64>,
    pub device: DeviceModel,
    pub mode: ExecMode,
    pub quant: Quantization,
}

/// Saved forward state of one layer.
#[derive(Clone, Debug, Default)]
pub struct LayerTape {
    /// Dequantized inputs, `batch x inputs`.
    pub input: Vec<f64>,
    /// Per-read unit deviation, `batch x outputs x inputs`; absent in ideal mode.
    pub deviations: Option<Vec<f64>>,
    /// Pre-activations, `batch x outputs`.
    pub pre: Vec<f64>,
    /// Programmed weights used by the forward pass.
    pub weights: Vec<f64>,
    pub amplitude: f64,
    /// Largest input activation seen in this batch.
    pub input_max: f64,
    /// State samples per batch item (one per plane).
    pub states: Vec<Vec<StateTensor>>,
}

/// Everything backward needs from a forward call.
#[derive(Clone, Debug)]
pub struct Tape {
    fingerprint: u64,
    pub mode: ExecMode,
    pub batch: usize,
    pub recorded: bool,
    pub layers: Vec<LayerTape>,
}

/// One state sample per layer (and plane) shared by every input.
#[derive(Clone, Debug)]
pub struct HeldStates {
    pub layers: Vec<Vec<StateTensor>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            theta: vec![0.0; net.thetas.len()],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.bias)
            .flatten()
            .chain(&self.theta)
            .all(|g| g.is_finite())
    }
}

enum Source<'a> {
    Fresh(&'a mut Stream),
    Held(&'a HeldStates),
    Replay(&'a Tape),
}

impl Network {
    pub fn new(spec: &NetworkSpec, device: DeviceModel, mode: ExecMode, rng: &mut Stream) -> Result<Self> {
        if spec.sizes.len() < 2 || spec.sizes.contains(&0) {
            return Err(Error::config("sizes", "need at least two non-zero layer widths"));
        }
        if !(spec.init_rho.is_finite() && spec.init_rho > 0.0) {
            return Err(Error::config("init_rho", "must be > 0"));
        }
        let n_layers = spec.sizes.len() - 1;
        let slots = match spec.sharing {
            RhoSharing::PerLayer => n_layers,
            RhoSharing::Global => 1,
        };
        let layers = spec
            .sizes
            .windows(2)
            .enumerate()
            .map(|(li, pair)| {
                let (inputs, outputs) = (pair[0], pair[1]);
                let he = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
                DenseLayer {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| he.sample(rng)).collect(),
                    bias: vec![0.0; outputs],
                    activation: if li + 1 == n_layers {
                        Activation::SoftmaxHead
                    } else {
                        Activation::Relu
                    },
                    rho_slot: if slots == 1 { 0 } else { li },
                    act_max: 0.0,
                }
            })
            .collect();
        let net = Network {
            layers,
            thetas: vec![spec.init_rho.ln(); slots],
            device,
            mode,
            quant: spec.quant,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks layer conformance and mode/quantization compatibility.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        for (li, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::shape(format!("layer {li} parameters do not match its shape")));
            }
            if l.rho_slot >= self.thetas.len() {
                return Err(Error::shape(format!(
                    "layer {li} refers to missing rho slot {}",
                    l.rho_slot
                )));
            }
        }
        for (li, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::shape(format!(
                    "layer {li} emits {} values but layer {} takes {}",
                    pair[0].outputs,
                    li + 1,
                    pair[1].inputs
                )));
            }
        }
        if self.mode == ExecMode::NoisyDecomposed && self.quant.act_bits.is_none() {
            return Err(Error::config(
                "act_bits",
                "decomposed execution needs activation quantization",
            ));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn rho(&self, layer: usize) -> f64 {
        self.thetas[self.layers[layer].rho_slot].exp()
    }

    /// Sequential crossbar read steps per inference: one per layer, times the
    /// number of bit planes in decomposed mode.
    pub fn read_steps(&self) -> u64 {
        let per_layer = match self.mode {
            ExecMode::NoisyDecomposed => self.quant.act_bits.unwrap_or(1) as u64,
            _ => 1,
        };
        per_layer * self.layers.len() as u64
    }

    /// Reads charged to one cell per inference.
    pub fn reads_per_cell(&self) -> f64 {
        match self.mode {
            ExecMode::NoisyDecomposed => self.quant.act_bits.unwrap_or(1) as f64,
            _ => 1.0,
        }
    }

    /// Programs layer `li` onto a crossbar (quantize-on-forward).
    pub fn program(&self, li: usize) -> Result<Crossbar> {
        let l = &self.layers[li];
        let rho = EnergyCoefficient::from_theta(self.thetas[l.rho_slot]);
        let xb = match self.quant.weight_bits {
            Some(bits) => Crossbar::program(&l.weights, l.outputs, l.inputs, &l.bias, bits, rho)?,
            None => Crossbar::program_full_precision(&l.weights, l.outputs, l.inputs, &l.bias, rho)?,
        };
        Ok(xb.with_id(li))
    }

    fn planes_per_read(&self) -> usize {
        match self.mode {
            ExecMode::Ideal => 0,
            ExecMode::NoisyOriginal => 1,
            ExecMode::NoisyDecomposed => self.quant.act_bits.unwrap_or(0) as usize,
        }
    }

    /// Draws one state sample per layer (and plane) to be shared by all inputs.
    pub fn sample_held(&self, rng: &mut Stream) -> HeldStates {
        let planes = self.planes_per_read();
        HeldStates {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (0..planes)
                        .map(|_| self.device.sample_states(&[l.outputs, l.inputs], rng))
                        .collect()
                })
                .collect(),
        }
    }

    /// Forward pass with fresh state samples for every input and layer.
    pub fn forward(
        &self,
        x: &Tensor,
        rng: &mut Stream,
        ledger: &mut EnergyLedger,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Tape)> {
        self.run(x, Source::Fresh(rng), ledger, opts)
    }

    /// Forward pass reusing one state sample for every input.
    pub fn forward_held(
        &self,
        x: &Tensor,
        held: &HeldStates,
        ledger: &mut EnergyLedger,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Tape)> {
        self.run(x, Source::Held(held), ledger, opts)
    }

    /// Forward pass replaying the states recorded on `tape`.
    pub fn replay(&self, x: &Tensor, tape: &Tape, ledger: &mut EnergyLedger) -> Result<(Tensor, Tape)> {
        if !tape.recorded || tape.batch != x.rows() || tape.mode != self.mode {
            return Err(Error::Contract("tape does not match this forward call".into()));
        }
        self.run(x, Source::Replay(tape), ledger, ForwardOptions::TRAIN)
    }

    fn run(
        &self,
        x: &Tensor,
        mut source: Source<'_>,
        ledger: &mut EnergyLedger,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Tape)> {
        self.validate()?;
        if x.shape().len() != 2 || x.cols() != self.inputs() {
            return Err(Error::shape(format!(
                "input {:?} does not conform to a {}-input network",
                x.shape(),
                self.inputs()
            )));
        }
        let batch = x.rows();
        let planes_needed = self.planes_per_read();
        let mut act = x.values().to_vec();
        let mut tape_layers = Vec::with_capacity(self.layers.len());

        for (li, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            let xb = self.program(li)?;
            let amp = self.device.amplitude(xb.rho().rho())?;
            let input_max = act.iter().fold(0.0f64, |m, &v| m.max(v));

            let (levels, drive, step) = match self.quant.act_bits {
                Some(bits) => {
                    let max = match opts.scaling {
                        ActScaling::Frozen if layer.act_max > 0.0 => layer.act_max,
                        _ => input_max,
                    };
                    let (levels, step) = quantize_activations(&act, max, bits);
                    let drive = levels.iter().map(|&q| q as f64).collect::<Vec<_>>();
                    (levels, drive, step)
                }
                None => (Vec::new(), act.clone(), 1.0),
            };

            let mut lt = LayerTape {
                amplitude: amp,
                input_max,
                ..LayerTape::default()
            };
            if opts.record {
                lt.input = drive.iter().map(|&d| step * d).collect();
                lt.weights = xb.weights().to_vec();
                lt.pre = Vec::with_capacity(batch * n_out);
                if self.mode != ExecMode::Ideal {
                    lt.deviations = Some(vec![0.0; batch * n_out * n_in]);
                }
            }

            let mut scratch = vec![StateTensor::zeros(&[n_out, n_in]); planes_needed];
            let mut out = Vec::with_capacity(batch * n_out);
            for j in 0..batch {
                let drive_j = &drive[j * n_in..(j + 1) * n_in];
                let states: &[StateTensor] = match &mut source {
                    Source::Fresh(rng) => {
                        for s in scratch.iter_mut() {
                            self.device.sample_states_into(s, &mut **rng);
                        }
                        &scratch
                    }
                    Source::Held(h) => &h.layers[li],
                    Source::Replay(_) if planes_needed == 0 => &scratch,
                    Source::Replay(t) => &t.layers[li].states[j],
                };
                let trace = lt
                    .deviations
                    .as_mut()
                    .map(|d| &mut d[j * n_out * n_in..(j + 1) * n_out * n_in]);
                let y = match self.mode {
                    ExecMode::Ideal => xb.mac_ideal(&self.device, drive_j, step, ledger)?,
                    ExecMode::NoisyOriginal => {
                        xb.mac_original_scaled(&self.device, drive_j, step, &states[0], ledger, trace)?
                    }
                    ExecMode::NoisyDecomposed => {
                        let bits = self.quant.act_bits.expect("validated");
                        let planes = BitPlanes::decompose(&levels[j * n_in..(j + 1) * n_in], bits)?;
                        xb.mac_decomposed_traced(&self.device, &planes, states, step, ledger, trace)?
                    }
                };
                if opts.record {
                    lt.pre.extend_from_slice(&y);
                    if planes_needed > 0 {
                        lt.states.push(states.to_vec());
                    }
                }
                out.extend(y.into_iter().map(|v| match layer.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Identity | Activation::SoftmaxHead => v,
                }));
            }
            tape_layers.push(lt);
            act = out;
        }

        let logits = Tensor::new(&[batch, self.outputs()], act)?;
        let tape = Tape {
            fingerprint: self.fingerprint(),
            mode: self.mode,
            batch,
            recorded: opts.record,
            layers: tape_layers,
        };
        Ok((logits, tape))
    }

    /// Gradients of a scalar loss with respect to every `W`, `B` and `theta`,
    /// given `dL/dlogits` for the forward call that produced `tape`.
    pub fn backward(&self, tape: &Tape, dlogits: &Tensor) -> Result<Gradients> {
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::Contract("tape was recorded against different parameters".into()));
        }
        if !tape.recorded {
            return Err(Error::Contract("tape was recorded without saved activations".into()));
        }
        if dlogits.shape() != [tape.batch, self.outputs()] {
            return Err(Error::shape("loss gradient does not match the logits"));
        }
        let batch = tape.batch;
        let mut grads = Gradients::zeros(self);
        let mut dy = dlogits.values().to_vec();

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lt = &tape.layers[li];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            let amp = lt.amplitude;
            let gw = &mut grads.weights[li];
            let gb = &mut grads.bias[li];
            let mut dx = vec![0.0; batch * n_in];
            let mut d_amp = 0.0;

            for j in 0..batch {
                let x = &lt.input[j * n_in..(j + 1) * n_in];
                let dxj = &mut dx[j * n_in..(j + 1) * n_in];
                for i in 0..n_out {
                    let mut dz = dy[j * n_out + i];
                    if layer.activation == Activation::Relu && lt.pre[j * n_out + i] <= 0.0 {
                        dz = 0.0;
                    }
                    if dz == 0.0 {
                        continue;
                    }
                    gb[i] += dz;
                    let w = &lt.weights[i * n_in..(i + 1) * n_in];
                    let gwi = &mut gw[i * n_in..(i + 1) * n_in];
                    match &lt.deviations {
                        Some(dev) => {
                            let v = &dev[(j * n_out + i) * n_in..(j * n_out + i + 1) * n_in];
                            for k in 0..n_in {
                                let g = 1.0 + amp * v[k];
                                gwi[k] += dz * g * x[k];
                                dxj[k] += dz * w[k] * g;
                                d_amp += dz * w[k] * v[k] * x[k];
                            }
                        }
                        None => {
                            for k in 0..n_in {
                                gwi[k] += dz * x[k];
                                dxj[k] += dz * w[k];
                            }
                        }
                    }
                }
            }
            // amplitude = kappa * exp(-theta)
            grads.theta[layer.rho_slot] -= d_amp * amp;
            dy = dx;
        }
        Ok(grads)
    }

    /// Hash of every trainable parameter; tapes remember it to detect staleness.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(PRIME);
        };
        for l in &self.layers {
            l.weights.iter().for_each(|&w| eat(w));
            l.bias.iter().for_each(|&b| eat(b));
        }
        self.thetas.iter().for_each(|&t| eat(t));
        h
    }
}
