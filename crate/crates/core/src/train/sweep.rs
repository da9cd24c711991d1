use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Regime};
use super::experiment::{finetune, pretrain, RunOutput};
use crate::data::Dataset;
use crate::device::Intensity;
use crate::report::sig6;
use crate::{Error, Result};

pub const SWEEP_HEADER: &str = "regime,axis,value,seed,acc_mean,acc_std,energy_mean,rho_final";

/// Budget search: iterations of log-space bisection on `lambda`.
const BUDGET_ITERS: usize = 8;
/// The search starts this many decades below `budget_lambda_max`.
const BUDGET_DECADES: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    Intensity,
    EnergyBudget,
    /// Activation bit-width (and so the number of bit planes).
    Bits,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Intensity => "intensity",
            Axis::EnergyBudget => "energy_budget",
            Axis::Bits => "bits",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "intensity" => Ok(Axis::Intensity),
            "energy_budget" => Ok(Axis::EnergyBudget),
            "bits" => Ok(Axis::Bits),
            other => Err(Error::config(
                "axis",
                format!("unknown axis `{other}` (expected lambda|intensity|energy_budget|bits)"),
            )),
        }
    }
}

/// One parsed axis value: a display label and a sort key.
#[derive(Clone, Debug)]
struct Point {
    label: String,
    key: f64,
    apply: Setting,
}

#[derive(Clone, Copy, Debug)]
enum Setting {
    Lambda(f64),
    Intensity(Intensity),
    Budget(f64),
    Bits(u32),
}

fn parse_point(axis: Axis, raw: &str) -> Result<Point> {
    let bad = |msg: String| Error::config("values", msg);
    let number = || -> Result<f64> {
        raw.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| bad(format!("`{raw}` is not a finite number >= 0")))
    };
    Ok(match axis {
        Axis::Lambda => {
            let v = number()?;
            Point {
                label: sig6(v),
                key: v,
                apply: Setting::Lambda(v),
            }
        }
        Axis::EnergyBudget => {
            let v = number()?;
            Point {
                label: sig6(v),
                key: v,
                apply: Setting::Budget(v),
            }
        }
        Axis::Intensity => {
            let i: Intensity = raw
                .trim()
                .parse()
                .map_err(|_| bad(format!("unknown intensity `{raw}`")))?;
            Point {
                label: i.name().into(),
                key: i.kappa(),
                apply: Setting::Intensity(i),
            }
        }
        Axis::Bits => {
            let b: u32 = raw
                .trim()
                .parse()
                .map_err(|_| bad(format!("`{raw}` is not a bit-width")))?;
            Point {
                label: b.to_string(),
                key: b as f64,
                apply: Setting::Bits(b),
            }
        }
    })
}

/// One emitted table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub regime: Regime,
    pub axis: Axis,
    pub value: String,
    pub seed: u64,
    pub acc_mean: f64,
    pub acc_std: Option<f64>,
    pub energy_mean: f64,
    pub rho_final: f64,
    /// The `lambda` the run used (found by search on the budget axis).
    pub lambda: f64,
    pub ideal_acc: f64,
}

/// A point whose energy budget could not be met.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    pub value: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub infeasible: Vec<Infeasible>,
}

impl SweepResult {
    /// The fixed-header result table, sorted by axis value then seed.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.regime,
                r.axis,
                r.value,
                r.seed,
                sig6(r.acc_mean),
                sig6(r.acc_std.unwrap_or(f64::NAN)),
                sig6(r.energy_mean),
                sig6(r.rho_final)
            );
        }
        out
    }

    /// `value,seed,reason` for budgets that could not be met.
    pub fn infeasible_csv(&self) -> String {
        let mut out = String::from("value,seed,reason\n");
        for i in &self.infeasible {
            let _ = writeln!(out, "{},{},{}", i.value, i.seed, i.reason.replace(',', ";"));
        }
        out
    }
}

fn apply(base: &ExperimentConfig, s: Setting) -> ExperimentConfig {
    let mut cfg = base.clone();
    match s {
        Setting::Lambda(v) => cfg.lambda = v,
        Setting::Intensity(i) => {
            cfg.intensity = i;
            cfg.kappa = None;
        }
        Setting::Bits(b) => cfg.act_bits = Some(b),
        Setting::Budget(_) => {}
    }
    cfg
}

/// Everything the shared ideal pretraining depends on.
fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    serde_json::json!([
        cfg.hidden,
        cfg.weight_bits,
        cfg.act_bits,
        cfg.rho_sharing,
        cfg.init_rho,
        cfg.optimizer,
        cfg.pretrain_epochs,
        cfg.batch_size,
        cfg.data,
        seed
    ])
    .to_string()
}

type Pretrained = (crate::nn::Network, Vec<super::EpochRecord>, Option<String>);

fn row(cfg: &ExperimentConfig, axis: Axis, label: &str, out: &RunOutput) -> Result<SweepRow> {
    let m = &out.metrics;
    if let Some(d) = &m.diverged {
        return Err(Error::Divergence(format!("{axis}={label}, seed {}: {d}", m.seed)));
    }
    let e = m.eval.as_ref().expect("evaluated run");
    Ok(SweepRow {
        regime: cfg.regime,
        axis,
        value: label.to_string(),
        seed: m.seed,
        acc_mean: e.acc_mean,
        acc_std: e.acc_std,
        energy_mean: e.energy_mean,
        rho_final: m.rho_final_mean(),
        lambda: cfg.lambda,
        ideal_acc: m.ideal_acc.unwrap_or(f64::NAN),
    })
}

/// Bisects `lambda` in log space for the smallest value whose mean energy
/// meets `budget`.
fn budget_search(
    cfg: &ExperimentConfig,
    label: &str,
    budget: f64,
    pre: &Pretrained,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<std::result::Result<SweepRow, Infeasible>> {
    let probe = |lambda: f64| -> Result<SweepRow> {
        let c = ExperimentConfig { lambda, ..cfg.clone() };
        let out = finetune(&c, seed, pre.clone(), train, test)?;
        row(&c, Axis::EnergyBudget, label, &out)
    };
    let at_zero = probe(0.0)?;
    if at_zero.energy_mean <= budget {
        return Ok(Ok(at_zero));
    }
    let chance = 1.0 / train.classes.max(2) as f64;
    let at_max = probe(cfg.budget_lambda_max)?;
    if at_max.energy_mean > budget || at_max.acc_mean < chance {
        return Ok(Err(Infeasible {
            value: label.to_string(),
            seed,
            reason: format!(
                "at lambda {} energy {} and accuracy {}",
                sig6(cfg.budget_lambda_max),
                sig6(at_max.energy_mean),
                sig6(at_max.acc_mean)
            ),
        }));
    }
    let (mut lo, mut hi) = (
        (cfg.budget_lambda_max.ln() - BUDGET_DECADES * 10f64.ln()),
        cfg.budget_lambda_max.ln(),
    );
    let mut best = at_max;
    for _ in 0..BUDGET_ITERS {
        let mid = 0.5 * (lo + hi);
        let r = probe(mid.exp())?;
        if r.energy_mean <= budget && r.acc_mean >= chance {
            hi = mid;
            best = r;
        } else {
            lo = mid;
        }
    }
    Ok(Ok(best))
}

/// Runs `base` once per (value, seed). Points are independent and may run in
/// parallel; rows come back sorted by axis value, then seed.
pub fn sweep(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    train: &Dataset,
    test: &Dataset,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("values", "a sweep needs at least one value"));
    }
    base.validate()?;
    if axis == Axis::EnergyBudget && !base.regime.trains_rho() {
        return Err(Error::config(
            "regime",
            format!("an energy budget needs a regime that trains rho, not {}", base.regime),
        ));
    }
    let points = values
        .iter()
        .map(|v| parse_point(axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for p in &points {
        let cfg = apply(base, p.apply);
        cfg.validate()?;
        for &seed in &base.seeds {
            jobs.push((p.clone(), cfg.clone(), seed));
        }
    }

    let mut keys: BTreeMap<String, (ExperimentConfig, u64)> = BTreeMap::new();
    for (_, cfg, seed) in &jobs {
        keys.entry(pretrain_key(cfg, *seed))
            .or_insert_with(|| (cfg.clone(), *seed));
    }
    let pretrained: BTreeMap<String, Pretrained> = keys
        .into_par_iter()
        .map(|(k, (cfg, seed))| Ok((k, pretrain(&cfg, seed, train)?)))
        .collect::<Result<_>>()?;

    let results: Vec<(f64, u64, std::result::Result<SweepRow, Infeasible>)> = jobs
        .par_iter()
        .map(|(p, cfg, seed)| {
            let pre = &pretrained[&pretrain_key(cfg, *seed)];
            let outcome = match p.apply {
                Setting::Budget(b) => budget_search(cfg, &p.label, b, pre, train, test, *seed)?,
                _ => {
                    let out = finetune(cfg, *seed, pre.clone(), train, test)?;
                    Ok(row(cfg, axis, &p.label, &out)?)
                }
            };
            Ok((p.key, *seed, outcome))
        })
        .collect::<Result<_>>()?;

    let mut sorted = results;
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut rows = Vec::new();
    let mut infeasible = Vec::new();
    for (_, _, r) in sorted {
        match r {
            Ok(row) => rows.push(row),
            Err(i) => infeasible.push(i),
        }
    }
    Ok(SweepResult { rows, infeasible })
}
