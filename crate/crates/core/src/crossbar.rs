//! Crossbar arrays: programmed weights, multiply-accumulate in the original
//! (one analog read per cell) and bit-decomposed (one read per activation bit
//! plane) mechanisms, and energy metering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::device::{check_drive, check_rho, DeviceModel};
use crate::{Error, Result};

/// Trainable energy coefficient, stored as `theta` with `rho = exp(theta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnergyCoefficient {
    theta: f64,
}

impl Default for EnergyCoefficient {
    fn default() -> Self {
        EnergyCoefficient { theta: 0.0 }
    }
}

impl EnergyCoefficient {
    pub fn from_theta(theta: f64) -> Self {
        EnergyCoefficient { theta }
    }

    pub fn from_rho(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(EnergyCoefficient { theta: rho.ln() })
    }

    pub fn theta(self) -> f64 {
        self.theta
    }

    pub fn rho(self) -> f64 {
        self.theta.exp()
    }
}

/// Sampled fluctuation data: the active state of every cell for one read.
///
/// Logically a one-hot tensor `s[.., l]` that is 1 only at the active state;
/// stored as the active index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTensor {
    shape: Vec<usize>,
    states: Vec<u8>,
}

impl StateTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        StateTensor {
            shape: shape.to_vec(),
            states: vec![0; shape.iter().product()],
        }
    }

    pub fn from_states(shape: &[usize], states: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != states.len() {
            return Err(Error::shape(format!("{} states for shape {shape:?}", states.len())));
        }
        Ok(StateTensor {
            shape: shape.to_vec(),
            states,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn states(&self) -> &[u8] {
        &self.states
    }

    pub(crate) fn states_mut(&mut self) -> &mut [u8] {
        &mut self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The one-hot coefficient vector at flat position `pos`.
    pub fn one_hot(&self, pos: usize, m: usize) -> Vec<u8> {
        let mut v = vec![0; m];
        v[self.states[pos] as usize] = 1;
        v
    }

    fn check_against(&self, rows: usize, cols: usize, m: usize) -> Result<()> {
        if self.shape != [rows, cols] {
            return Err(Error::shape(format!(
                "state tensor {:?} does not cover a {rows}x{cols} crossbar",
                self.shape
            )));
        }
        if let Some(&bad) = self.states.iter().find(|&&l| l as usize >= m) {
            return Err(Error::StateIndex {
                index: bad as usize,
                states: m,
            });
        }
        Ok(())
    }
}

/// One bit plane of a decomposed activation vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlane {
    pub position: u32,
    pub delta: Vec<u8>,
}

/// Binary expansion `x = sum_p delta_p * 2^p` of a quantized activation vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlanes {
    bits: u32,
    levels: Vec<u32>,
    planes: Vec<BitPlane>,
}

impl BitPlanes {
    pub fn decompose(levels: &[u32], bits: u32) -> Result<Self> {
        if !(1..=24).contains(&bits) {
            return Err(Error::domain(format!("activation bit-width {bits} not in 1..=24")));
        }
        if let Some(&x) = levels.iter().find(|&&x| x >> bits != 0) {
            return Err(Error::domain(format!(
                "quantized activation {x} does not fit in {bits} bits"
            )));
        }
        let planes = (0..bits)
            .map(|p| BitPlane {
                position: p,
                delta: levels.iter().map(|&x| ((x >> p) & 1) as u8).collect(),
            })
            .collect();
        Ok(BitPlanes {
            bits,
            levels: levels.to_vec(),
            planes,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn planes(&self) -> &[BitPlane] {
        &self.planes
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn width(&self) -> usize {
        self.levels.len()
    }

    pub fn reconstruct(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.width()];
        for plane in &self.planes {
            for (o, &d) in out.iter_mut().zip(&plane.delta) {
                *o += (d as u32) << plane.position;
            }
        }
        out
    }
}

/// Unsigned linear quantization of non-negative activations against `max`.
/// Returns integer levels in `[0, 2^bits)` and the step that dequantizes them.
pub fn quantize_activations(x: &[f64], max: f64, bits: u32) -> (Vec<u32>, f64) {
    let top = ((1u64 << bits) - 1) as f64;
    if max.is_nan() || max <= 0.0 {
        return (vec![0; x.len()], 0.0);
    }
    let levels = x
        .iter()
        .map(|&v| ((v / max).clamp(0.0, 1.0) * top).round() as u32)
        .collect();
    (levels, max / top)
}

/// Read energy and read counts for one crossbar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub reads: u64,
    pub energy: f64,
    pub cell_reads: Vec<u64>,
}

/// Accumulated read energy and per-cell read counts, keyed by crossbar id.
/// Ledgers only grow; two ledgers merge by addition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    entries: BTreeMap<usize, Usage>,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_energy(&self) -> f64 {
        self.entries.values().map(|u| u.energy).sum()
    }

    pub fn total_reads(&self) -> u64 {
        self.entries.values().map(|u| u.reads).sum()
    }

    pub fn usage(&self, id: usize) -> Option<&Usage> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    fn charge(&mut self, id: usize, cells: usize, reads_per_cell: u64, energy: f64) {
        debug_assert!(energy >= 0.0);
        let usage = self.entries.entry(id).or_default();
        if usage.cell_reads.len() < cells {
            usage.cell_reads.resize(cells, 0);
        }
        for c in &mut usage.cell_reads[..cells] {
            *c += reads_per_cell;
        }
        usage.reads += cells as u64 * reads_per_cell;
        usage.energy += energy;
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        for (&id, theirs) in &other.entries {
            let ours = self.entries.entry(id).or_default();
            if ours.cell_reads.len() < theirs.cell_reads.len() {
                ours.cell_reads.resize(theirs.cell_reads.len(), 0);
            }
            for (a, b) in ours.cell_reads.iter_mut().zip(&theirs.cell_reads) {
                *a += b;
            }
            ours.reads += theirs.reads;
            ours.energy += theirs.energy;
        }
    }

    /// `crossbar,reads,energy` rows, one per crossbar id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("crossbar,reads,energy\n");
        for (id, u) in &self.entries {
            let _ = writeln!(out, "{id},{},{}", u.reads, crate::report::sig6(u.energy));
        }
        out
    }
}

/// A programmed weight array with its bias, energy coefficient and
/// quantization metadata. Immutable after programming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossbar {
    pub id: usize,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    #[serde(rename = "theta")]
    rho: EnergyCoefficient,
    weight_bits: Option<u32>,
    weight_scale: f64,
}

impl Crossbar {
    /// Programs `weights` (row-major, `rows x cols`) with symmetric linear
    /// quantization at `weight_bits`; scale is `max|w| / (2^(bits-1) - 1)`.
    pub fn program(
        weights: &[f64],
        rows: usize,
        cols: usize,
        bias: &[f64],
        weight_bits: u32,
        rho: EnergyCoefficient,
    ) -> Result<Self> {
        if !(2..=32).contains(&weight_bits) {
            return Err(Error::domain(format!("weight bit-width {weight_bits} not in 2..=32")));
        }
        let mut xb = Crossbar::program_full_precision(weights, rows, cols, bias, rho)?;
        let (grid, scale) = quantize_weights(weights, weight_bits);
        xb.weights = grid;
        xb.weight_bits = Some(weight_bits);
        xb.weight_scale = scale;
        Ok(xb)
    }

    /// Programs weights verbatim (no quantization grid).
    pub fn program_full_precision(
        weights: &[f64],
        rows: usize,
        cols: usize,
        bias: &[f64],
        rho: EnergyCoefficient,
    ) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} weights for a {rows}x{cols} crossbar",
                weights.len()
            )));
        }
        if bias.len() != rows {
            return Err(Error::shape(format!("{} biases for {rows} rows", bias.len())));
        }
        if weights.iter().chain(bias).any(|w| !w.is_finite()) {
            return Err(Error::domain("weights and biases must be finite"));
        }
        check_rho(rho.rho())?;
        Ok(Crossbar {
            id: 0,
            rows,
            cols,
            weights: weights.to_vec(),
            bias: bias.to_vec(),
            rho,
            weight_bits: None,
            weight_scale: 1.0,
        })
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn rho(&self) -> EnergyCoefficient {
        self.rho
    }

    pub fn weight_bits(&self) -> Option<u32> {
        self.weight_bits
    }

    pub fn weight_scale(&self) -> f64 {
        self.weight_scale
    }

    /// Noise-free product `W x * step + b`.
    pub fn mac_ideal(&self, device: &DeviceModel, x: &[f64], step: f64, ledger: &mut EnergyLedger) -> Result<Vec<f64>> {
        self.check_drive_vector(x)?;
        let rho = self.rho.rho();
        let mut y = Vec::with_capacity(self.rows);
        let mut energy = 0.0;
        for (row, b) in self.weights.chunks_exact(self.cols).zip(&self.bias) {
            let mut acc = *b;
            for (&w, &xk) in row.iter().zip(x) {
                acc += w * (step * xk);
                energy += device.read_energy_unchecked(rho, w, xk);
            }
            y.push(acc);
        }
        ledger.charge(self.id, self.rows * self.cols, 1, energy);
        Ok(y)
    }

    /// Original mechanism: every cell is read once, driven at `x_k`.
    /// `y_i = sum_k r(w_ik, rho, l_ik) * x_k + b_i`.
    pub fn mac_original(
        &self,
        device: &DeviceModel,
        x: &[f64],
        states: &StateTensor,
        ledger: &mut EnergyLedger,
    ) -> Result<Vec<f64>> {
        self.mac_original_scaled(device, x, 1.0, states, ledger, None)
    }

    /// [`Crossbar::mac_original`] with drives in quantization levels and
    /// `step` converting them back to activation units. When `trace` is given
    /// it receives the sampled unit deviation of every cell.
    pub fn mac_original_scaled(
        &self,
        device: &DeviceModel,
        x: &[f64],
        step: f64,
        states: &StateTensor,
        ledger: &mut EnergyLedger,
        mut trace: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        self.check_drive_vector(x)?;
        states.check_against(self.rows, self.cols, device.m())?;
        let rho = self.rho.rho();
        let amp = device.amplitude(rho)?;
        let u = device.deviations();
        let gains: Vec<f64> = u.iter().map(|u| 1.0 + u * amp).collect();
        let mut y = Vec::with_capacity(self.rows);
        let mut energy = 0.0;
        for i in 0..self.rows {
            let row = &self.weights[i * self.cols..(i + 1) * self.cols];
            let s = &states.states()[i * self.cols..(i + 1) * self.cols];
            let mut acc = self.bias[i];
            for k in 0..self.cols {
                let r = row[k] * gains[s[k] as usize];
                acc += r * (step * x[k]);
                energy += device.read_energy_unchecked(rho, row[k], x[k]);
            }
            if let Some(t) = trace.as_deref_mut() {
                for (tk, &sk) in t[i * self.cols..(i + 1) * self.cols].iter_mut().zip(s) {
                    *tk = u[sk as usize];
                }
            }
            y.push(acc);
        }
        ledger.charge(self.id, self.rows * self.cols, 1, energy);
        Ok(y)
    }

    /// Decomposed mechanism: plane `p` drives the array with the binary
    /// vector `delta_p` under its own state sample, and the plane results
    /// are accumulated with weight `2^p` and rescaled by `step`.
    pub fn mac_decomposed(
        &self,
        device: &DeviceModel,
        planes: &BitPlanes,
        states: &[StateTensor],
        step: f64,
        ledger: &mut EnergyLedger,
    ) -> Result<Vec<f64>> {
        self.mac_decomposed_traced(device, planes, states, step, ledger, None)
    }

    /// [`Crossbar::mac_decomposed`] that optionally records, per cell, the
    /// bit-weighted mean deviation `sum_p 2^p delta_p u_p / x`.
    pub fn mac_decomposed_traced(
        &self,
        device: &DeviceModel,
        planes: &BitPlanes,
        states: &[StateTensor],
        step: f64,
        ledger: &mut EnergyLedger,
        mut trace: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        if planes.width() != self.cols {
            return Err(Error::shape(format!(
                "{} decomposed inputs for {} columns",
                planes.width(),
                self.cols
            )));
        }
        if states.len() != planes.bits() as usize {
            return Err(Error::shape(format!(
                "{} state samples for {} bit planes",
                states.len(),
                planes.bits()
            )));
        }
        for s in states {
            s.check_against(self.rows, self.cols, device.m())?;
        }
        let rho = self.rho.rho();
        let amp = device.amplitude(rho)?;
        let u = device.deviations();
        let gains: Vec<f64> = u.iter().map(|u| 1.0 + u * amp).collect();
        let bits = planes.bits();
        let peri = device.peripheral_energy() * bits as f64;
        let levels = planes.levels();
        let mut y = Vec::with_capacity(self.rows);
        let mut energy = 0.0;
        for i in 0..self.rows {
            let base = i * self.cols;
            let mut acc = self.bias[i];
            for k in 0..self.cols {
                let w = self.weights[base + k];
                let level = levels[k];
                energy += rho * w.abs() * level.count_ones() as f64 + peri;
                if level == 0 {
                    if let Some(t) = trace.as_deref_mut() {
                        t[base + k] = 0.0;
                    }
                    continue;
                }
                let mut multiplier = 0.0;
                let mut deviation = 0.0;
                let mut rest = level;
                while rest != 0 {
                    let p = rest.trailing_zeros();
                    let l = states[p as usize].states()[base + k] as usize;
                    let weight = (1u64 << p) as f64;
                    multiplier += weight * gains[l];
                    deviation += weight * u[l];
                    rest &= rest - 1;
                }
                acc += w * (step * multiplier);
                if let Some(t) = trace.as_deref_mut() {
                    t[base + k] = deviation / level as f64;
                }
            }
            y.push(acc);
        }
        ledger.charge(self.id, self.rows * self.cols, bits as u64, energy);
        Ok(y)
    }

    fn check_drive_vector(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "input of length {} for {} columns",
                x.len(),
                self.cols
            )));
        }
        x.iter().try_for_each(|&v| check_drive(v))
    }
}

/// Symmetric linear quantization; returns dequantized grid values and scale.
pub fn quantize_weights(weights: &[f64], bits: u32) -> (Vec<f64>, f64) {
    let top = ((1u64 << (bits - 1)) - 1) as f64;
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return (vec![0.0; weights.len()], 1.0);
    }
    let scale = max_abs / top;
    let grid = weights
        .iter()
        .map(|&w| max_abs * ((w / scale).round().clamp(-top, top) / top))
        .collect();
    (grid, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn unit() -> EnergyCoefficient {
        EnergyCoefficient::default()
    }

    #[test]
    fn program_examples() {
        let xb = Crossbar::program(&[0.0], 1, 1, &[0.0], 8, unit()).unwrap();
        assert_eq!(xb.weights(), &[0.0]);
        assert_eq!(xb.weight_scale(), 1.0);

        let xb = Crossbar::program(&[1.0, -1.0], 1, 2, &[0.0], 8, unit()).unwrap();
        assert_eq!(xb.weights(), &[1.0, -1.0]);

        let xb = Crossbar::program(&[0.333], 1, 1, &[0.0], 2, unit()).unwrap();
        assert_eq!(xb.weight_scale(), 0.333);
        assert_eq!(xb.weights(), &[0.333]);
    }

    #[test]
    fn two_bit_grid_enumeration() {
        // The 2-bit symmetric grid is {-s, 0, s}; every weight lands on it.
        let w = [0.333, -0.2, 0.1, -0.333, 0.17, 0.16];
        let xb = Crossbar::program(&w, 2, 3, &[0.0, 0.0], 2, unit()).unwrap();
        let grid = [-0.333, 0.0, 0.333];
        for (&orig, &q) in w.iter().zip(xb.weights()) {
            let nearest = grid
                .iter()
                .copied()
                .min_by(|a, b| (a - orig).abs().total_cmp(&(b - orig).abs()))
                .unwrap();
            assert_eq!(q, nearest, "{orig}");
        }
    }

    #[test]
    fn program_rejects_bad_inputs() {
        assert!(Crossbar::program(&[1.0], 1, 1, &[0.0], 1, unit()).is_err());
        assert!(Crossbar::program(&[f64::NAN], 1, 1, &[0.0], 8, unit()).is_err());
        assert!(matches!(
            Crossbar::program(&[1.0, 2.0], 1, 2, &[0.0, 0.0], 8, unit()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn noiseless_original_is_dot_product() {
        let d = DeviceModel::two_state(0.0);
        let xb = Crossbar::program_full_precision(&[1.0, 2.0], 1, 2, &[0.0], unit()).unwrap();
        let s = d.sample_states(&[1, 2], &mut rng::stream(0, &[0]));
        let y = xb.mac_original(&d, &[0.5, 0.5], &s, &mut EnergyLedger::new()).unwrap();
        assert_eq!(y, vec![1.5]);
    }

    #[test]
    fn two_state_read_takes_both_values() {
        let d = DeviceModel::two_state(0.1);
        let xb = Crossbar::program_full_precision(&[1.0], 1, 1, &[0.0], unit()).unwrap();
        let mut r = rng::stream(3, &[0]);
        let mut hi = 0usize;
        let n = 20_000;
        for _ in 0..n {
            let s = d.sample_states(&[1, 1], &mut r);
            let y = xb.mac_original(&d, &[1.0], &s, &mut EnergyLedger::new()).unwrap()[0];
            if (y - 1.1).abs() < 1e-12 {
                hi += 1;
            } else {
                assert!((y - 0.9).abs() < 1e-12, "{y}");
            }
        }
        let f = hi as f64 / n as f64;
        assert!((f - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn mac_original_errors() {
        let d = DeviceModel::two_state(0.1);
        let xb = Crossbar::program_full_precision(&[1.0, 2.0], 1, 2, &[0.0], unit()).unwrap();
        let s = StateTensor::zeros(&[1, 2]);
        let mut l = EnergyLedger::new();
        assert!(matches!(xb.mac_original(&d, &[1.0], &s, &mut l), Err(Error::Shape(_))));
        assert!(matches!(
            xb.mac_original(&d, &[1.0, -0.5], &s, &mut l),
            Err(Error::Domain(_))
        ));
        let wrong = StateTensor::zeros(&[2, 1]);
        assert!(matches!(
            xb.mac_original(&d, &[1.0, 1.0], &wrong, &mut l),
            Err(Error::Shape(_))
        ));
        let bad_state = StateTensor::from_states(&[1, 2], vec![0, 2]).unwrap();
        assert!(matches!(
            xb.mac_original(&d, &[1.0, 1.0], &bad_state, &mut l),
            Err(Error::StateIndex { .. })
        ));
        assert_eq!(l.total_reads(), 0);
    }

    #[test]
    fn decompose_examples() {
        let p = BitPlanes::decompose(&[7], 3).unwrap();
        let deltas: Vec<u8> = p.planes().iter().map(|pl| pl.delta[0]).collect();
        assert_eq!(deltas, vec![1, 1, 1]);
        let p = BitPlanes::decompose(&[0], 3).unwrap();
        assert!(p.planes().iter().all(|pl| pl.delta[0] == 0));
        let p = BitPlanes::decompose(&[5], 3).unwrap();
        let deltas: Vec<u8> = p.planes().iter().map(|pl| pl.delta[0]).collect();
        assert_eq!(deltas, vec![1, 0, 1]);
        assert!(matches!(BitPlanes::decompose(&[8], 3), Err(Error::Domain(_))));
    }

    #[test]
    fn decomposed_noiseless_and_energy() {
        let d = DeviceModel::two_state(0.0);
        let xb = Crossbar::program_full_precision(&[1.0], 1, 1, &[0.0], unit()).unwrap();
        let planes = BitPlanes::decompose(&[7], 3).unwrap();
        let mut r = rng::stream(0, &[1]);
        let states: Vec<_> = (0..3).map(|_| d.sample_states(&[1, 1], &mut r)).collect();
        let mut dec = EnergyLedger::new();
        let y = xb.mac_decomposed(&d, &planes, &states, 1.0, &mut dec).unwrap();
        assert_eq!(y, vec![7.0]);
        let mut ori = EnergyLedger::new();
        xb.mac_original(&d, &[7.0], &states[0], &mut ori).unwrap();
        assert_eq!(dec.total_energy(), 3.0);
        assert_eq!(ori.total_energy(), 7.0);
        assert_eq!(dec.usage(0).unwrap().cell_reads, vec![3]);
        assert_eq!(ori.usage(0).unwrap().cell_reads, vec![1]);
    }

    #[test]
    fn decomposed_plane_count_mismatch() {
        let d = DeviceModel::two_state(0.1);
        let xb = Crossbar::program_full_precision(&[1.0], 1, 1, &[0.0], unit()).unwrap();
        let planes = BitPlanes::decompose(&[7], 3).unwrap();
        let states = vec![StateTensor::zeros(&[1, 1]); 2];
        assert!(matches!(
            xb.mac_decomposed(&d, &planes, &states, 1.0, &mut EnergyLedger::new()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decomposed_std_matches_bit_weighted_closed_form() {
        // x = 7, w = 1, sigma(w) = 0.1: std = sqrt(1 + 4 + 16) * 0.1.
        let d = DeviceModel::two_state(0.1);
        let xb = Crossbar::program_full_precision(&[1.0], 1, 1, &[0.0], unit()).unwrap();
        let planes = BitPlanes::decompose(&[7], 3).unwrap();
        let mut r = rng::stream(21, &[0]);
        let n = 1_000_000;
        let mut states = vec![StateTensor::zeros(&[1, 1]); 3];
        let mut ledger = EnergyLedger::new();
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            for s in &mut states {
                d.sample_states_into(s, &mut r);
            }
            let y = xb.mac_decomposed(&d, &planes, &states, 1.0, &mut ledger).unwrap()[0];
            s1 += y;
            s2 += y * y;
        }
        let mean = s1 / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        let expect = 21f64.sqrt() * 0.1;
        assert!((std / expect - 1.0).abs() < 0.02, "{std} vs {expect}");
    }

    #[test]
    fn ledger_merge_adds() {
        let d = DeviceModel::two_state(0.1);
        let xb = Crossbar::program_full_precision(&[1.0, -2.0], 1, 2, &[0.0], unit()).unwrap();
        let s = StateTensor::zeros(&[1, 2]);
        let mut a = EnergyLedger::new();
        let mut b = EnergyLedger::new();
        xb.mac_original(&d, &[1.0, 2.0], &s, &mut a).unwrap();
        xb.mac_original(&d, &[3.0, 0.0], &s, &mut b).unwrap();
        let mut both = a.clone();
        both.merge(&b);
        assert_eq!(both.total_energy(), 5.0 + 3.0);
        assert_eq!(both.usage(0).unwrap().cell_reads, vec![2, 2]);
        assert_eq!(both.to_csv(), "crossbar,reads,energy\n0,4,8\n");
    }

    #[test]
    fn crossbar_json_embeds_grid_and_theta() {
        let xb = Crossbar::program(&[1.0, -0.5], 1, 2, &[0.1], 4, EnergyCoefficient::from_theta(-0.25)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&xb).unwrap();
        assert_eq!(v["theta"], -0.25);
        assert_eq!(v["weight_bits"], 4);
        let back: Crossbar = serde_json::from_value(v).unwrap();
        assert_eq!(back, xb);
    }

    #[test]
    fn quantize_activations_levels() {
        let (q, step) = quantize_activations(&[0.0, 0.5, 1.0, 2.0], 1.0, 8);
        assert_eq!(q, vec![0, 128, 255, 255]);
        assert_eq!(step, 1.0 / 255.0);
        let (q, step) = quantize_activations(&[0.0, 0.0], 0.0, 8);
        assert_eq!((q, step), (vec![0, 0], 0.0));
    }

    proptest! {
        #[test]
        fn bit_planes_reconstruct(levels in proptest::collection::vec(0u32..256, 1..20)) {
            let p = BitPlanes::decompose(&levels, 8).unwrap();
            prop_assert_eq!(p.reconstruct(), levels);
        }

        #[test]
        fn quantized_weights_lie_on_grid(
            w in proptest::collection::vec(-2.0f64..2.0, 1..30), bits in 2u32..10,
        ) {
            let (grid, scale) = quantize_weights(&w, bits);
            let top = ((1u64 << (bits - 1)) - 1) as f64;
            for (g, o) in grid.iter().zip(&w) {
                let q = g / scale;
                prop_assert!((q - q.round()).abs() < 1e-9);
                prop_assert!(q.abs() <= top + 1e-9);
                prop_assert!((g - o).abs() <= scale / 2.0 + 1e-12);
            }
        }

        #[test]
        fn decomposed_energy_never_exceeds_original(
            w in proptest::collection::vec(-2.0f64..2.0, 1..6),
            x in proptest::collection::vec(0u32..256, 1..6),
        ) {
            let n = w.len().min(x.len());
            let (w, x) = (&w[..n], &x[..n]);
            let d = DeviceModel::two_state(0.1);
            let xb = Crossbar::program_full_precision(w, 1, n, &[0.0], unit()).unwrap();
            let planes = BitPlanes::decompose(x, 8).unwrap();
            let states = vec![StateTensor::zeros(&[1, n]); 8];
            let mut dec = EnergyLedger::new();
            let mut ori = EnergyLedger::new();
            xb.mac_decomposed(&d, &planes, &states, 1.0, &mut dec).unwrap();
            let drive: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            xb.mac_original(&d, &drive, &states[0], &mut ori).unwrap();
            prop_assert!(dec.total_energy() <= ori.total_energy());
            let closed: f64 = w.iter().zip(x).map(|(w, &x)| w.abs() * x.count_ones() as f64).sum();
            prop_assert!((dec.total_energy() - closed).abs() <= 1e-12 * closed.max(1.0));
        }
    }
}
