//! Independent oracles for the fluctuation statistics of a single crossbar
//! row `y = sum_k r(w_k) x_k`: closed form, exhaustive enumeration of joint
//! states, and Monte Carlo through the crossbar MAC itself.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::{BitPlanes, Crossbar, EnergyCoefficient, EnergyLedger, StateTensor};
use crate::device::{check_drive, DeviceModel, Intensity};
use crate::report::sig6;
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Largest joint outcome count enumerated exhaustively.
pub const ENUMERATION_CAP: u64 = 1_000_000;
pub const MC_TRIALS_SCALAR: u64 = 1_000_000;
pub const MC_TRIALS_VECTOR: u64 = 100_000;
/// Agreement tolerance between closed form and enumeration (relative).
pub const EXACT_TOL: f64 = 1e-12;
/// Monte Carlo agreement band, in standard errors.
pub const MC_SIGMAS: f64 = 3.0;

const CHUNK: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    ClosedForm,
    Enumeration,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    Enumeration,
    MonteCarlo { trials: u64, seed: u64 },
}

/// Output statistics of one row under a given method.
///
/// `tolerance` is the absolute band on the variance within which the
/// report is expected to match the closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    pub method: MethodKind,
    pub trials: Option<u64>,
    pub tolerance: f64,
    pub mean_se: Option<f64>,
    pub variance_se: Option<f64>,
}

impl StatReport {
    fn exact(mean: f64, variance: f64, method: MethodKind, tolerance: f64) -> Self {
        let variance = variance.max(0.0);
        StatReport {
            mean,
            variance,
            std: variance.sqrt(),
            method,
            trials: None,
            tolerance,
            mean_se: None,
            variance_se: None,
        }
    }

    /// Whether `self` (Monte Carlo) lies within [`MC_SIGMAS`] standard errors
    /// of `exact` in both mean and variance.
    pub fn agrees_with(&self, exact: &StatReport) -> bool {
        let mse = self.mean_se.unwrap_or(0.0);
        let vse = self.variance_se.unwrap_or(0.0);
        (self.mean - exact.mean).abs() <= MC_SIGMAS * mse + 1e-12 * exact.mean.abs().max(1.0)
            && (self.variance - exact.variance).abs() <= MC_SIGMAS * vse + 1e-12 * exact.variance.max(1.0)
    }
}

fn check_row(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::shape(format!("{} weights for {n} inputs", w.len())));
    }
    if w.is_empty() {
        return Err(Error::shape("an instance needs at least one cell"));
    }
    if w.iter().any(|w| !w.is_finite()) {
        return Err(Error::domain("weights must be finite"));
    }
    Ok(())
}

fn mean_deviation(model: &DeviceModel) -> f64 {
    model.probs().iter().zip(model.deviations()).map(|(p, u)| p * u).sum()
}

/// Statistics of the original mechanism, one read per cell at drive `x_k`.
pub fn stats_original(model: &DeviceModel, rho: f64, w: &[f64], x: &[f64], method: Method) -> Result<StatReport> {
    check_row(w, x.len())?;
    x.iter().try_for_each(|&v| check_drive(v))?;
    let amp = model.amplitude(rho)?;
    match method {
        Method::ClosedForm => {
            let ubar = mean_deviation(model);
            let var_u = model.deviation_variance();
            let mean = w.iter().zip(x).map(|(w, x)| w * x * (1.0 + ubar * amp)).sum();
            let var = w.iter().zip(x).map(|(w, x)| (w * x * amp).powi(2) * var_u).sum();
            Ok(StatReport::exact(mean, var, MethodKind::ClosedForm, 0.0))
        }
        Method::Enumeration => {
            let cells: Vec<(f64, f64)> = w.iter().copied().zip(x.iter().copied()).collect();
            enumerate(model, rho, &cells)
        }
        Method::MonteCarlo { trials, seed } => {
            let xb = row_crossbar(w, rho)?;
            let ideal: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
            monte_carlo(
                trials,
                seed,
                ideal,
                |rng, states, ledger| {
                    model.sample_states_into(&mut states[0], rng);
                    Ok(xb.mac_original(model, x, &states[0], ledger)?[0])
                },
                1,
                w.len(),
            )
        }
    }
}

/// Statistics of the decomposed mechanism: bit `p` of `x_k` is read under its
/// own independent state sample and weighted by `2^p`.
pub fn stats_decomposed(
    model: &DeviceModel,
    rho: f64,
    w: &[f64],
    x: &[u32],
    bits: u32,
    method: Method,
) -> Result<StatReport> {
    check_row(w, x.len())?;
    let planes = BitPlanes::decompose(x, bits)?;
    let amp = model.amplitude(rho)?;
    match method {
        Method::ClosedForm => {
            let ubar = mean_deviation(model);
            let var_u = model.deviation_variance();
            let mut mean = 0.0;
            let mut var = 0.0;
            for (&w, &x) in w.iter().zip(x) {
                let bit_weight: f64 = (0..bits).filter(|p| x >> p & 1 == 1).map(|p| 4f64.powi(p as i32)).sum();
                mean += w * x as f64 * (1.0 + ubar * amp);
                var += (w * amp).powi(2) * var_u * bit_weight;
            }
            Ok(StatReport::exact(mean, var, MethodKind::ClosedForm, 0.0))
        }
        Method::Enumeration => {
            // Every (cell, plane) pair is an independent read; unset bits
            // still draw a state that contributes nothing.
            let mut cells = Vec::with_capacity(w.len() * bits as usize);
            for (&w, &x) in w.iter().zip(x) {
                for p in 0..bits {
                    let drive = f64::from((x >> p) & 1) * (1u64 << p) as f64;
                    cells.push((w, drive));
                }
            }
            enumerate(model, rho, &cells)
        }
        Method::MonteCarlo { trials, seed } => {
            let xb = row_crossbar(w, rho)?;
            let ideal: f64 = w.iter().zip(x).map(|(w, &x)| w * x as f64).sum();
            monte_carlo(
                trials,
                seed,
                ideal,
                |rng, states, ledger| {
                    for s in states.iter_mut() {
                        model.sample_states_into(s, rng);
                    }
                    Ok(xb.mac_decomposed(model, &planes, states, 1.0, ledger)?[0])
                },
                bits as usize,
                w.len(),
            )
        }
    }
}

fn row_crossbar(w: &[f64], rho: f64) -> Result<Crossbar> {
    Crossbar::program_full_precision(w, 1, w.len(), &[0.0], EnergyCoefficient::from_rho(rho)?)
}

/// Compensated running sum.
#[derive(Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.c
    }
}

/// Exact moments of `sum_j r(w_j, l_j) d_j` over all `m^n` joint states.
fn enumerate(model: &DeviceModel, rho: f64, cells: &[(f64, f64)]) -> Result<StatReport> {
    let m = model.m();
    let outcomes = (m as f64).powi(cells.len() as i32);
    if outcomes > ENUMERATION_CAP as f64 {
        return Err(Error::Capacity {
            outcomes,
            cap: ENUMERATION_CAP,
        });
    }
    let reads: Vec<Vec<f64>> = cells
        .iter()
        .map(|&(w, d)| (0..m).map(|l| Ok(model.effective_weight(w, rho, l)? * d)).collect())
        .collect::<Result<_>>()?;
    let probs = model.probs();
    let visit = |f: &mut dyn FnMut(f64, f64)| {
        let mut idx = vec![0usize; cells.len()];
        loop {
            let mut p = 1.0;
            let mut v = Neumaier::default();
            for (j, &l) in idx.iter().enumerate() {
                p *= probs[l];
                v.add(reads[j][l]);
            }
            f(p, v.value());
            let mut j = 0;
            loop {
                if j == idx.len() {
                    return;
                }
                idx[j] += 1;
                if idx[j] < m {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    };
    let mut mean = Neumaier::default();
    visit(&mut |p, v| mean.add(p * v));
    let mean = mean.value();
    let mut var = Neumaier::default();
    visit(&mut |p, v| var.add(p * (v - mean) * (v - mean)));
    let var = var.value();
    Ok(StatReport::exact(
        mean,
        var,
        MethodKind::Enumeration,
        EXACT_TOL * var.max(1.0),
    ))
}

/// Power sums of `y - center`, merged by addition in chunk order.
#[derive(Default, Clone, Copy)]
struct PowerSums {
    n: u64,
    s: [f64; 4],
}

impl PowerSums {
    fn push(&mut self, d: f64) {
        self.n += 1;
        let d2 = d * d;
        self.s[0] += d;
        self.s[1] += d2;
        self.s[2] += d2 * d;
        self.s[3] += d2 * d2;
    }

    fn merge(mut self, o: PowerSums) -> Self {
        self.n += o.n;
        for i in 0..4 {
            self.s[i] += o.s[i];
        }
        self
    }
}

type Trial<'a> = dyn Fn(&mut rng::Stream, &mut [StateTensor], &mut EnergyLedger) -> Result<f64> + Sync + 'a;

/// Runs `trials` independent draws in fixed-size chunks, chunk `c` on stream
/// `(seed, [MONTE_CARLO, c])`, so the estimate does not depend on threading.
fn monte_carlo<F>(trials: u64, seed: u64, center: f64, trial: F, samples: usize, cols: usize) -> Result<StatReport>
where
    F: Fn(&mut rng::Stream, &mut [StateTensor], &mut EnergyLedger) -> Result<f64> + Sync,
{
    if trials < 2 {
        return Err(Error::domain("Monte Carlo needs at least 2 trials"));
    }
    let trial: &Trial = &trial;
    let chunks = trials.div_ceil(CHUNK);
    let sums: Vec<PowerSums> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &[tag::MONTE_CARLO, c]);
            let mut states = vec![StateTensor::zeros(&[1, cols]); samples];
            let mut ledger = EnergyLedger::new();
            let mut acc = PowerSums::default();
            let n = CHUNK.min(trials - c * CHUNK);
            for _ in 0..n {
                acc.push(trial(&mut r, &mut states, &mut ledger)? - center);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let total = sums.into_iter().fold(PowerSums::default(), PowerSums::merge);
    let n = total.n as f64;
    let d = total.s[0] / n;
    let m2 = (total.s[1] / n - d * d).max(0.0);
    let m4 = total.s[3] / n - 4.0 * d * total.s[2] / n + 6.0 * d * d * total.s[1] / n - 3.0 * d.powi(4);
    let variance = m2 * n / (n - 1.0);
    // Finite-sample variance of the unbiased estimator, split as
    // (mu4 - s^4) / n + 2 s^4 / (n (n - 1)). The first term vanishes for
    // two-point laws, so the second is kept separately.
    let variance_se = ((m4 - variance * variance).max(0.0) / n + 2.0 * variance * variance / (n * (n - 1.0))).sqrt();
    Ok(StatReport {
        mean: center + d,
        variance,
        std: variance.sqrt(),
        method: MethodKind::MonteCarlo,
        trials: Some(trials),
        tolerance: MC_SIGMAS * variance_se,
        mean_se: Some((variance / n).sqrt()),
        variance_se: Some(variance_se),
    })
}

/// A single-row instance checked by [`check_inequalities`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub name: String,
    #[serde(default)]
    pub device: DeviceModel,
    #[serde(default = "one")]
    pub rho: f64,
    pub w: Vec<f64>,
    pub x: Vec<u32>,
    pub bits: u32,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Equality case: the inequality holds but is not strict.
    pub degenerate: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub instance: String,
    pub passed: bool,
    pub sigma_original: f64,
    pub sigma_decomposed: f64,
    pub sigma_ratio: Option<f64>,
    pub energy_original: f64,
    pub energy_decomposed: f64,
    pub energy_ratio: Option<f64>,
    pub checks: Vec<Check>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXACT_TOL * a.abs().max(b.abs()).max(1.0)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Compares the two mechanisms on one instance: spread, ledger energy and
/// Monte Carlo agreement. Failures are report entries, not errors; only a
/// malformed instance is an error.
pub fn check_inequalities(
    model: &DeviceModel,
    rho: f64,
    w: &[f64],
    x: &[u32],
    bits: u32,
    mc_trials: u64,
    seed: u64,
) -> Result<InequalityReport> {
    let drive: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let ori = stats_original(model, rho, w, &drive, Method::ClosedForm)?;
    let dec = stats_decomposed(model, rho, w, x, bits, Method::ClosedForm)?;
    let mut checks = Vec::new();

    // Spread: equal exactly when no noisy cell carries two or more set bits.
    let noisy = model.kappa() > 0.0 && model.deviation_variance() > 0.0;
    let strict = noisy && w.iter().zip(x).any(|(&w, &x)| w != 0.0 && x.count_ones() >= 2);
    let (passed, degenerate) = if strict {
        (dec.std < ori.std, false)
    } else {
        (close(dec.variance, ori.variance), true)
    };
    checks.push(Check {
        name: "sigma".into(),
        passed,
        degenerate,
        detail: format!(
            "sigma_decomposed {} vs sigma_original {}{}",
            sig6(dec.std),
            sig6(ori.std),
            if degenerate {
                ", degenerate, inequality not strict"
            } else {
                ""
            }
        ),
    });

    // Ledger energy from one read of each mechanism.
    let xb = row_crossbar(w, rho)?;
    let planes = BitPlanes::decompose(x, bits)?;
    let zeros = StateTensor::zeros(&[1, w.len()]);
    let mut e_ori = EnergyLedger::new();
    xb.mac_original(model, &drive, &zeros, &mut e_ori)?;
    let mut e_dec = EnergyLedger::new();
    xb.mac_decomposed(model, &planes, &vec![zeros.clone(); bits as usize], 1.0, &mut e_dec)?;
    let (eo, ed) = (e_ori.total_energy(), e_dec.total_energy());
    let peri = model.peripheral_energy();
    let expect_o: f64 = w.iter().zip(x).map(|(w, &x)| rho * w.abs() * x as f64 + peri).sum();
    let expect_d: f64 = w
        .iter()
        .zip(x)
        .map(|(w, &x)| rho * w.abs() * x.count_ones() as f64 + peri * bits as f64)
        .sum();
    checks.push(Check {
        name: "energy_ledger".into(),
        passed: close(eo, expect_o) && close(ed, expect_d),
        degenerate: false,
        detail: format!(
            "ledger {} / {} vs closed form {} / {}",
            sig6(ed),
            sig6(eo),
            sig6(expect_d),
            sig6(expect_o)
        ),
    });
    if peri == 0.0 {
        let equal_case = w.iter().zip(x).all(|(&w, &x)| w == 0.0 || x <= 1);
        let (passed, degenerate) = if equal_case {
            (close(ed, eo), true)
        } else {
            (ed < eo, false)
        };
        checks.push(Check {
            name: "energy".into(),
            passed,
            degenerate,
            detail: format!(
                "E_decomposed {} vs E_original {}{}",
                sig6(ed),
                sig6(eo),
                if degenerate {
                    ", degenerate, inequality not strict"
                } else {
                    ""
                }
            ),
        });
    }

    if mc_trials > 0 {
        let mc_o = stats_original(
            model,
            rho,
            w,
            &drive,
            Method::MonteCarlo {
                trials: mc_trials,
                seed,
            },
        )?;
        let mc_d = stats_decomposed(
            model,
            rho,
            w,
            x,
            bits,
            Method::MonteCarlo {
                trials: mc_trials,
                seed: seed ^ 0xD5C0,
            },
        )?;
        for (name, mc, cf) in [("mc_original", &mc_o, &ori), ("mc_decomposed", &mc_d, &dec)] {
            checks.push(Check {
                name: name.into(),
                passed: mc.agrees_with(cf),
                degenerate: false,
                detail: format!(
                    "mean {} (closed {}, se {}), variance {} (closed {}, se {})",
                    sig6(mc.mean),
                    sig6(cf.mean),
                    sig6(mc.mean_se.unwrap_or(0.0)),
                    sig6(mc.variance),
                    sig6(cf.variance),
                    sig6(mc.variance_se.unwrap_or(0.0)),
                ),
            });
        }
    }

    Ok(InequalityReport {
        instance: String::new(),
        passed: checks.iter().all(|c| c.passed),
        sigma_original: ori.std,
        sigma_decomposed: dec.std,
        sigma_ratio: ratio(dec.std, ori.std),
        energy_original: eo,
        energy_decomposed: ed,
        energy_ratio: ratio(ed, eo),
        checks,
    })
}

/// The regression suite run by the `verify` command.
pub fn default_suite() -> Vec<Instance> {
    let strong = DeviceModel::preset(Intensity::Strong);
    let normal = DeviceModel::preset(Intensity::Normal);
    let three = DeviceModel::evenly_spaced(3, 0.15).expect("valid device");
    let inst = |name: &str, device: &DeviceModel, rho: f64, w: Vec<f64>, x: Vec<u32>, bits| Instance {
        name: name.into(),
        device: device.clone(),
        rho,
        w,
        x,
        bits,
    };
    vec![
        inst("x7", &normal, 1.0, vec![1.0], vec![7], 3),
        inst("x1", &normal, 1.0, vec![1.0], vec![1], 3),
        inst("x4", &normal, 1.0, vec![1.0], vec![4], 3),
        inst("x0", &normal, 1.0, vec![1.0], vec![0], 3),
        inst(
            "noiseless",
            &normal.with_kappa(0.0).expect("valid"),
            1.0,
            vec![1.0],
            vec![7],
            3,
        ),
        inst(
            "vector_strong",
            &strong,
            0.5,
            vec![0.8, -0.3, 1.2, 0.05],
            vec![200, 3, 77, 255],
            8,
        ),
        inst(
            "vector_three_state",
            &three,
            2.0,
            vec![-1.5, 0.7, 0.4],
            vec![5, 6, 1],
            3,
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub seed: u64,
    pub instances: Vec<InequalityReport>,
}

impl SuiteReport {
    /// One line per check.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.instances {
            for c in &r.checks {
                let _ = writeln!(
                    out,
                    "{} {}: {} ({})",
                    if c.passed { "PASS" } else { "FAIL" },
                    r.instance,
                    c.name,
                    c.detail
                );
            }
        }
        let _ = writeln!(
            out,
            "{}",
            if self.passed {
                "all checks passed"
            } else {
                "verification FAILED"
            }
        );
        out
    }
}

/// Checks every instance; scalar instances use [`MC_TRIALS_SCALAR`] trials
/// and vector instances [`MC_TRIALS_VECTOR`] unless `trials` is given.
pub fn run_suite(instances: &[Instance], trials: Option<u64>, seed: u64) -> Result<SuiteReport> {
    let reports = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let t = trials.unwrap_or(if inst.w.len() == 1 {
                MC_TRIALS_SCALAR
            } else {
                MC_TRIALS_VECTOR
            });
            let mut r = check_inequalities(
                &inst.device,
                inst.rho,
                &inst.w,
                &inst.x,
                inst.bits,
                t,
                rng::stream_id(&[tag::INSTANCE, seed, i as u64]),
            )?;
            r.instance = inst.name.clone();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        passed: reports.iter().all(|r| r.passed),
        seed,
        instances: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mc(trials: u64) -> Method {
        Method::MonteCarlo { trials, seed: 5 }
    }

    #[test]
    fn noiseless_variance_is_zero_for_all_methods() {
        let d = DeviceModel::two_state(0.0);
        for m in [Method::ClosedForm, Method::Enumeration, mc(1000)] {
            let r = stats_original(&d, 1.0, &[0.5, -2.0], &[3.0, 1.0], m).unwrap();
            assert_eq!(r.variance, 0.0);
            assert_eq!(r.mean, -0.5);
            let r = stats_decomposed(&d, 1.0, &[0.5, -2.0], &[3, 1], 2, m).unwrap();
            assert_eq!(r.variance, 0.0);
        }
    }

    #[test]
    fn two_state_single_read() {
        let d = DeviceModel::two_state(0.1);
        for m in [Method::ClosedForm, Method::Enumeration] {
            let r = stats_original(&d, 1.0, &[1.0], &[1.0], m).unwrap();
            assert!((r.std - 0.1).abs() < 1e-15, "{r:?}");
            let r = stats_original(&d, 1.0, &[1.0], &[7.0], m).unwrap();
            assert!((r.std - 0.7).abs() < 1e-14);
            let r = stats_decomposed(&d, 1.0, &[1.0], &[7], 3, m).unwrap();
            assert!((r.std - 21f64.sqrt() * 0.1).abs() < 1e-14);
            let r4 = stats_decomposed(&d, 1.0, &[1.0], &[4], 3, m).unwrap();
            assert!((r4.std - 0.4).abs() < 1e-14);
            let r0 = stats_decomposed(&d, 1.0, &[1.0], &[0], 3, m).unwrap();
            assert_eq!(r0.std, 0.0);
        }
    }

    #[test]
    fn enumeration_capacity() {
        let d = DeviceModel::evenly_spaced(3, 0.1).unwrap();
        let w = vec![1.0; 13];
        let x = vec![1.0; 13];
        assert!(matches!(
            stats_original(&d, 1.0, &w, &x, Method::Enumeration),
            Err(Error::Capacity { .. })
        ));
        let w = vec![1.0; 4];
        assert!(stats_decomposed(&d, 1.0, &w, &[1, 2, 3, 0], 3, Method::Enumeration).is_ok());
        assert!(stats_decomposed(&d, 1.0, &w, &[1, 2, 3, 0], 4, Method::Enumeration).is_err());
    }

    #[test]
    fn monte_carlo_is_thread_independent() {
        let d = DeviceModel::two_state(0.2);
        let run = || stats_decomposed(&d, 1.0, &[0.7, -0.2], &[5, 3], 3, mc(20_000)).unwrap();
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a, b);
    }

    #[test]
    fn x7_report() {
        let d = DeviceModel::two_state(0.1);
        let r = check_inequalities(&d, 1.0, &[1.0], &[7], 3, 100_000, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.sigma_ratio.unwrap() - 21f64.sqrt() / 7.0).abs() < 1e-12);
        assert!((r.energy_ratio.unwrap() - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn x1_and_noiseless_are_degenerate() {
        let d = DeviceModel::two_state(0.1);
        let r = check_inequalities(&d, 1.0, &[1.0], &[1], 3, 0, 1).unwrap();
        assert!(r.passed);
        assert!(r
            .checks
            .iter()
            .filter(|c| c.name == "sigma" || c.name == "energy")
            .all(|c| c.degenerate));
        let d0 = DeviceModel::two_state(0.0);
        let r = check_inequalities(&d0, 1.0, &[1.0], &[7], 3, 0, 1).unwrap();
        assert!(r.passed);
        assert_eq!(r.sigma_original, 0.0);
        assert!(r.checks[0].degenerate);
        assert!(r.checks[0].detail.contains("degenerate, inequality not strict"));
    }

    #[test]
    fn default_suite_passes() {
        let r = run_suite(&default_suite(), Some(20_000), 0).unwrap();
        assert!(r.passed, "{}", r.to_text());
        let json = serde_json::to_string(&r).unwrap();
        let back: SuiteReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.instances.len(), r.instances.len());
    }

    #[test]
    fn instance_json_defaults() {
        let i: Instance = serde_json::from_str(r#"{"name":"a","w":[1.0],"x":[7],"bits":3}"#).unwrap();
        assert_eq!(i.rho, 1.0);
        assert_eq!(i.device, DeviceModel::default());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn closed_form_matches_enumeration(
            m in 1usize..=3,
            kappa in 0.0f64..0.4,
            rho in 0.3f64..3.0,
            cells in proptest::collection::vec((-2.0f64..2.0, 0u32..8), 1..=3),
        ) {
            let d = DeviceModel::evenly_spaced(m, kappa).unwrap();
            let w: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let x: Vec<u32> = cells.iter().map(|c| c.1).collect();
            let cf = stats_decomposed(&d, rho, &w, &x, 3, Method::ClosedForm).unwrap();
            let en = stats_decomposed(&d, rho, &w, &x, 3, Method::Enumeration).unwrap();
            prop_assert!(close(cf.mean, en.mean));
            prop_assert!(close(cf.variance, en.variance));
            let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let cf = stats_original(&d, rho, &w, &xf, Method::ClosedForm).unwrap();
            let en = stats_original(&d, rho, &w, &xf, Method::Enumeration).unwrap();
            prop_assert!(close(cf.mean, en.mean));
            prop_assert!(close(cf.variance, en.variance));
        }

        #[test]
        fn decomposition_never_widens_spread(
            cells in proptest::collection::vec((-2.0f64..2.0, 0u32..256), 1..6),
        ) {
            let d = DeviceModel::two_state(0.1);
            let w: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let x: Vec<u32> = cells.iter().map(|c| c.1).collect();
            let r = check_inequalities(&d, 1.0, &w, &x, 8, 0, 0).unwrap();
            prop_assert!(r.passed, "{:?}", r);
        }
    }
}
