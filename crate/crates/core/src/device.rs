//! The fluctuating memory cell.
//!
//! A cell storing weight `w` sits in one of `m` states at every read. In state
//! `l` it returns `w * (1 + u_l * A(rho))` where `u_l` is the state's unit
//! deviation and `A(rho) = kappa / rho` is the fluctuation amplitude: a larger
//! energy coefficient `rho` narrows the spread of read values. A read driven
//! at `drive` costs `rho * |w| * drive + E_peri`.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crossbar::StateTensor;
use crate::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Named fluctuation intensities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Weak,
    Normal,
    Strong,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Weak, Intensity::Normal, Intensity::Strong];

    pub fn kappa(self) -> f64 {
        match self {
            Intensity::Weak => 0.05,
            Intensity::Normal => 0.10,
            Intensity::Strong => 0.20,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Weak => "weak",
            Intensity::Normal => "normal",
            Intensity::Strong => "strong",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Intensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weak" => Ok(Intensity::Weak),
            "normal" => Ok(Intensity::Normal),
            "strong" => Ok(Intensity::Strong),
            other => Err(Error::config(
                "intensity",
                format!("unknown preset `{other}` (expected weak|normal|strong)"),
            )),
        }
    }
}

#[derive(Deserialize)]
struct RawDeviceModel {
    m: usize,
    probs: Vec<f64>,
    deviations: Vec<f64>,
    kappa: f64,
    #[serde(default)]
    peripheral_energy: f64,
}

impl TryFrom<RawDeviceModel> for DeviceModel {
    type Error = Error;

    fn try_from(raw: RawDeviceModel) -> Result<Self> {
        if raw.m != raw.probs.len() {
            return Err(Error::config(
                "m",
                format!("m = {} but {} probabilities given", raw.m, raw.probs.len()),
            ));
        }
        DeviceModel::new(raw.probs, raw.deviations, raw.kappa, raw.peripheral_energy)
    }
}

/// Parametric model of a fluctuating cell. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDeviceModel")]
pub struct DeviceModel {
    m: usize,
    probs: Vec<f64>,
    deviations: Vec<f64>,
    kappa: f64,
    peripheral_energy: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        DeviceModel::preset(Intensity::Normal)
    }
}

impl DeviceModel {
    pub fn new(probs: Vec<f64>, deviations: Vec<f64>, kappa: f64, peripheral_energy: f64) -> Result<Self> {
        let m = probs.len();
        if m == 0 || m > u8::MAX as usize {
            return Err(Error::config("m", format!("state count {m} not in 1..=255")));
        }
        if deviations.len() != m {
            return Err(Error::config(
                "deviations",
                format!("{} deviations for {m} states", deviations.len()),
            ));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("probs", "each probability must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::config("probs", format!("probabilities sum to {total}")));
        }
        if deviations.iter().any(|u| !u.is_finite()) {
            return Err(Error::config("deviations", "deviations must be finite"));
        }
        let mean: f64 = probs.iter().zip(&deviations).map(|(p, u)| p * u).sum();
        if mean.abs() > SUM_TOL {
            return Err(Error::config(
                "deviations",
                format!("deviation law must be zero-mean, got {mean}"),
            ));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::config("kappa", format!("{kappa} is not a finite value >= 0")));
        }
        if !(peripheral_energy.is_finite() && peripheral_energy >= 0.0) {
            return Err(Error::config(
                "peripheral_energy",
                format!("{peripheral_energy} is not a finite value >= 0"),
            ));
        }
        Ok(DeviceModel {
            m,
            probs,
            deviations,
            kappa,
            peripheral_energy,
        })
    }

    /// `m` equiprobable states with deviations evenly spaced over `[-1, 1]`.
    /// A single-state device has deviation 0.
    pub fn evenly_spaced(m: usize, kappa: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("m", "at least one state is required"));
        }
        let probs = vec![1.0 / m as f64; m];
        let deviations = if m == 1 {
            vec![0.0]
        } else {
            (0..m).map(|l| -1.0 + 2.0 * l as f64 / (m - 1) as f64).collect()
        };
        DeviceModel::new(probs, deviations, kappa, 0.0)
    }

    /// The default two-state cell: deviations -1 and +1, each with probability 1/2.
    pub fn two_state(kappa: f64) -> Self {
        DeviceModel::evenly_spaced(2, kappa).expect("two-state device with kappa >= 0")
    }

    pub fn preset(intensity: Intensity) -> Self {
        DeviceModel::two_state(intensity.kappa())
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        DeviceModel::new(
            self.probs.clone(),
            self.deviations.clone(),
            kappa,
            self.peripheral_energy,
        )
    }

    pub fn with_peripheral_energy(&self, peripheral_energy: f64) -> Result<Self> {
        DeviceModel::new(
            self.probs.clone(),
            self.deviations.clone(),
            self.kappa,
            peripheral_energy,
        )
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn deviations(&self) -> &[f64] {
        &self.deviations
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn peripheral_energy(&self) -> f64 {
        self.peripheral_energy
    }

    /// Variance of the unit deviation under the state distribution.
    pub fn deviation_variance(&self) -> f64 {
        let mean: f64 = self.probs.iter().zip(&self.deviations).map(|(p, u)| p * u).sum();
        self.probs
            .iter()
            .zip(&self.deviations)
            .map(|(p, u)| p * (u - mean) * (u - mean))
            .sum()
    }

    /// Fluctuation amplitude `kappa / rho`.
    pub fn amplitude(&self, rho: f64) -> Result<f64> {
        check_rho(rho)?;
        Ok(self.kappa / rho)
    }

    /// The value read from a cell storing `w` while it sits in state `l`.
    pub fn effective_weight(&self, w: f64, rho: f64, l: usize) -> Result<f64> {
        let amp = self.amplitude(rho)?;
        let u = self.deviation(l)?;
        Ok(w * (1.0 + u * amp))
    }

    pub fn deviation(&self, l: usize) -> Result<f64> {
        self.deviations.get(l).copied().ok_or(Error::StateIndex {
            index: l,
            states: self.m,
        })
    }

    /// Energy of one read of a cell storing `w` at the given drive.
    pub fn read_energy(&self, rho: f64, w: f64, drive: f64) -> Result<f64> {
        check_rho(rho)?;
        check_drive(drive)?;
        Ok(self.read_energy_unchecked(rho, w, drive))
    }

    #[inline]
    pub(crate) fn read_energy_unchecked(&self, rho: f64, w: f64, drive: f64) -> f64 {
        rho * w.abs() * drive + self.peripheral_energy
    }

    /// Draws one active state per position of `shape`.
    pub fn sample_states<R: RngCore + ?Sized>(&self, shape: &[usize], rng: &mut R) -> StateTensor {
        let mut out = StateTensor::zeros(shape);
        self.sample_states_into(&mut out, rng);
        out
    }

    /// Redraws every position of `out` in place.
    pub fn sample_states_into<R: RngCore + ?Sized>(&self, out: &mut StateTensor, rng: &mut R) {
        StateSampler::new(self).fill(out.states_mut(), rng);
    }
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("energy coefficient must be > 0, got {rho}")))
    }
}

pub(crate) fn check_drive(drive: f64) -> Result<()> {
    if drive.is_finite() && drive >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "read drive must be finite and >= 0, got {drive}"
        )))
    }
}

/// Draws state indices from a device's state distribution.
///
/// Equiprobable power-of-two devices consume `log2(m)` random bits per state;
/// other devices invert the cumulative distribution with a 53-bit uniform.
enum StateSampler {
    Single,
    Bits { width: u32 },
    Inverse { cumulative: Vec<f64> },
}

impl StateSampler {
    fn new(model: &DeviceModel) -> Self {
        let m = model.m;
        if m == 1 {
            return StateSampler::Single;
        }
        let uniform = model.probs.iter().all(|&p| p == 1.0 / m as f64);
        if uniform && m.is_power_of_two() {
            return StateSampler::Bits {
                width: m.trailing_zeros(),
            };
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = model
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Rounding can leave the last bound a hair under one.
        *cumulative.last_mut().unwrap() = f64::INFINITY;
        StateSampler::Inverse { cumulative }
    }

    fn fill<R: RngCore + ?Sized>(&self, out: &mut [u8], rng: &mut R) {
        match self {
            StateSampler::Single => out.fill(0),
            StateSampler::Bits { width } => {
                let per_word = (64 / width) as usize;
                let mask = (1u64 << width) - 1;
                for chunk in out.chunks_mut(per_word) {
                    let mut word = rng.next_u64();
                    for s in chunk {
                        *s = (word & mask) as u8;
                        word >>= width;
                    }
                }
            }
            StateSampler::Inverse { cumulative } => {
                for s in out.iter_mut() {
                    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                    *s = cumulative.iter().position(|&c| u < c).unwrap() as u8;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn amplitude_substitution() {
        let d = DeviceModel::two_state(0.1);
        assert_eq!(d.amplitude(1.0).unwrap(), 0.1);
        assert_eq!(DeviceModel::two_state(0.0).amplitude(5.0).unwrap(), 0.0);
        assert_eq!(DeviceModel::two_state(0.2).amplitude(2.0).unwrap(), 0.1);
    }

    #[test]
    fn amplitude_rejects_non_positive_rho() {
        let d = DeviceModel::two_state(0.1);
        assert!(matches!(d.amplitude(0.0), Err(Error::Domain(_))));
        assert!(matches!(d.amplitude(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn effective_weight_examples() {
        let d = DeviceModel::two_state(0.1);
        assert!((d.effective_weight(1.0, 1.0, 1).unwrap() - 1.1).abs() < 1e-15);
        for l in 0..2 {
            assert_eq!(d.effective_weight(0.0, 3.0, l).unwrap(), 0.0);
        }
        let quiet = DeviceModel::evenly_spaced(3, 0.0).unwrap();
        for l in 0..3 {
            assert_eq!(quiet.effective_weight(0.7, 1.0, l).unwrap(), 0.7);
        }
        assert!(matches!(
            d.effective_weight(1.0, 1.0, 2),
            Err(Error::StateIndex { index: 2, states: 2 })
        ));
    }

    #[test]
    fn read_energy_examples() {
        let d = DeviceModel::two_state(0.1);
        assert_eq!(d.read_energy(1.0, 1.0, 7.0).unwrap(), 7.0);
        assert_eq!(d.read_energy(2.0, -0.5, 1.0).unwrap(), 1.0);
        let peri = d.with_peripheral_energy(0.01).unwrap();
        assert_eq!(peri.read_energy(1.0, 0.0, 3.0).unwrap(), 0.01);
        assert!(matches!(d.read_energy(1.0, 1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(DeviceModel::new(vec![0.5, 0.4], vec![-1.0, 1.0], 0.1, 0.0).is_err());
        assert!(DeviceModel::new(vec![0.5, 0.5], vec![-1.0, 2.0], 0.1, 0.0).is_err());
        assert!(DeviceModel::new(vec![0.5, 0.5], vec![-1.0, 1.0], -0.1, 0.0).is_err());
        assert!(DeviceModel::new(vec![], vec![], 0.1, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_and_shape() {
        let d = DeviceModel::two_state(0.1);
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(
            text,
            r#"{"m":2,"probs":[0.5,0.5],"deviations":[-1.0,1.0],"kappa":0.1,"peripheral_energy":0.0}"#
        );
        let back: DeviceModel = serde_json::from_str(
            r#"{"m":2,"probs":[0.5,0.5],"deviations":[-1,1],"kappa":0.1,"peripheral_energy":0.0}"#,
        )
        .unwrap();
        assert_eq!(back, d);
        let bad = serde_json::from_str::<DeviceModel>(r#"{"m":3,"probs":[0.5,0.5],"deviations":[-1,1],"kappa":0.1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn presets_by_name() {
        assert_eq!("weak".parse::<Intensity>().unwrap().kappa(), 0.05);
        assert_eq!("Normal".parse::<Intensity>().unwrap().kappa(), 0.10);
        assert_eq!("strong".parse::<Intensity>().unwrap().kappa(), 0.20);
        assert!("extreme".parse::<Intensity>().is_err());
    }

    #[test]
    fn single_state_samples_zero() {
        let d = DeviceModel::evenly_spaced(1, 0.3).unwrap();
        let mut r = rng::stream(1, &[0]);
        let s = d.sample_states(&[4, 5], &mut r);
        assert!(s.states().iter().all(|&l| l == 0));
    }

    #[test]
    fn two_state_frequency_within_binomial_bound() {
        // 3 sigma of a Bernoulli(1/2) mean over 10^6 draws is 0.0015.
        let d = DeviceModel::two_state(0.1);
        let mut r = rng::stream(11, &[0]);
        let s = d.sample_states(&[1000, 1000], &mut r);
        let ones = s.states().iter().filter(|&&l| l == 1).count() as f64 / 1e6;
        assert!((ones - 0.5).abs() <= 0.002, "frequency {ones}");
    }

    #[test]
    fn inverse_sampler_matches_probs() {
        let d = DeviceModel::new(vec![0.2, 0.5, 0.3], vec![-1.0, 0.2, 0.333_333_333_333_333_3], 0.1, 0.0);
        // 0.2*-1 + 0.5*0.2 + 0.3*u = 0 -> u = 1/3
        let d = d.unwrap();
        let mut r = rng::stream(5, &[0]);
        let s = d.sample_states(&[200_000], &mut r);
        for (l, p) in d.probs().iter().enumerate() {
            let f = s.states().iter().filter(|&&x| x as usize == l).count() as f64 / 2e5;
            let sigma = (p * (1.0 - p) / 2e5).sqrt();
            assert!((f - p).abs() < 4.0 * sigma, "state {l}: {f} vs {p}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = DeviceModel::evenly_spaced(4, 0.1).unwrap();
        let a = d.sample_states(&[3, 7], &mut rng::stream(3, &[1, 2]));
        let b = d.sample_states(&[3, 7], &mut rng::stream(3, &[1, 2]));
        assert_eq!(a, b);
        assert!(a.states().iter().all(|&l| l < 4));
    }

    fn device_strategy() -> impl Strategy<Value = DeviceModel> {
        (1usize..=4, 0.0f64..0.5).prop_map(|(m, k)| DeviceModel::evenly_spaced(m, k).unwrap())
    }

    proptest! {
        #[test]
        fn reads_are_unbiased(d in device_strategy(), w in -3.0f64..3.0, rho in 0.1f64..10.0) {
            let mean: f64 = (0..d.m())
                .map(|l| d.probs()[l] * d.effective_weight(w, rho, l).unwrap())
                .sum();
            prop_assert!((mean - w).abs() <= 1e-12 * w.abs().max(1.0));
        }

        #[test]
        fn spread_narrows_with_rho(
            k in 0.01f64..0.5, w in prop_oneof![-3.0f64..-0.01, 0.01f64..3.0],
            r1 in 0.1f64..5.0, dr in 0.01f64..5.0, m in 2usize..=4,
        ) {
            let d = DeviceModel::evenly_spaced(m, k).unwrap();
            let spread = |rho: f64| {
                let v: Vec<f64> = (0..m).map(|l| d.effective_weight(w, rho, l).unwrap()).collect();
                v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
            };
            prop_assert!(spread(r1 + dr) < spread(r1));
        }

        #[test]
        fn read_energy_is_homogeneous_in_weight(
            rho in 0.1f64..4.0, w in -3.0f64..3.0, c in 0.01f64..10.0, drive in 0.0f64..255.0,
            peri in 0.0f64..0.1,
        ) {
            let d = DeviceModel::two_state(0.1).with_peripheral_energy(peri).unwrap();
            let scaled = d.read_energy(rho, c * w, drive).unwrap() - peri;
            let base = d.read_energy(rho, w, drive).unwrap() - peri;
            prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
            prop_assert!(d.read_energy(rho, w, drive).unwrap() >= peri);
        }
    }
}
