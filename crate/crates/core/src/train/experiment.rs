use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, Regime};
use crate::crossbar::{Crossbar, EnergyLedger};
use crate::data::{self, Dataset, Split};
use crate::nn::{ExecMode, ForwardOptions, LossConfig, Network, NetworkSpec, OptimizerState, Tensor};
use crate::report::sig6;
use crate::rng::{self, tag};
use crate::{Error, Result};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub loss: f64,
    /// Energy penalty at the end of the epoch.
    pub penalty: f64,
    pub train_acc: f64,
    /// `rho` of every layer at the end of the epoch.
    pub rho: Vec<f64>,
}

/// Monte Carlo evaluation of a network on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: ExecMode,
    pub reps: usize,
    pub acc_mean: f64,
    /// Sample standard deviation across repetitions; undefined for one repetition.
    pub acc_std: Option<f64>,
    /// Mean read energy per inference.
    pub energy_mean: f64,
    pub read_steps: u64,
    pub accuracies: Vec<f64>,
}

/// Outcome of one (config, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub regime: Regime,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Under the regime's evaluation mode, on the configured device.
    pub eval: Option<Evaluation>,
    /// Same weights read exactly.
    pub ideal_acc: Option<f64>,
    /// `rho` per layer when fine-tuning starts and ends.
    pub rho_initial: Vec<f64>,
    pub rho_final: Vec<f64>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
    /// Excluded from every CSV so outputs stay reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl Metrics {
    pub fn rho_final_mean(&self) -> f64 {
        self.rho_final.iter().sum::<f64>() / self.rho_final.len().max(1) as f64
    }

    pub fn rho_initial_mean(&self) -> f64 {
        self.rho_initial.iter().sum::<f64>() / self.rho_initial.len().max(1) as f64
    }
}

/// Trained network, its programmed crossbars and the optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub regime: Regime,
    pub network: Network,
    pub crossbars: Vec<Crossbar>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    fn new(seed: u64, regime: Regime, network: Network, optimizer: OptimizerState) -> Result<Self> {
        let crossbars = (0..network.layers.len())
            .map(|li| network.program(li))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            seed,
            regime,
            network,
            crossbars,
            optimizer,
        })
    }

    /// Checks that the stored crossbars are exactly what the network programs.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.crossbars.len() != self.network.layers.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} crossbars for {} layers",
                self.crossbars.len(),
                self.network.layers.len()
            )));
        }
        for (li, xb) in self.crossbars.iter().enumerate() {
            if *xb != self.network.program(li)? {
                return Err(Error::shape(format!("crossbar {li} does not match layer {li}")));
            }
        }
        Ok(())
    }
}

/// The checkpoint file of a training invocation: the resolved config and
/// one checkpoint per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub config: ExperimentConfig,
    pub runs: Vec<Checkpoint>,
}

impl TrainArtifact {
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::format("runs", "checkpoint holds no runs"));
        }
        self.runs.iter().try_for_each(Checkpoint::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub checkpoint: Checkpoint,
}

/// Training and test sets for a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Letters {
            train_per_class,
            test_per_class,
            seed,
            ..
        } => {
            let spec = cfg.data.letter_spec()?.expect("letters source");
            let train = data::gen_letters(&spec, *train_per_class, rng::stream_id(&[tag::DATA, *seed, 0]))?;
            let mut test = data::gen_letters(&spec, *test_per_class, rng::stream_id(&[tag::DATA, *seed, 1]))?;
            test.split = Split::Test;
            Ok((train, test))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = data::load_idx(train_images, train_labels)?;
            let mut test = data::load_idx(test_images, test_labels)?;
            test.split = Split::Test;
            if test.pixels() != train.pixels() {
                return Err(Error::format("test_images", "image size differs from the training set"));
            }
            test.classes = test.classes.max(train.classes);
            Ok((train, test))
        }
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Monte Carlo accuracy and energy of `net` executed in `mode`. Repetition
/// `r` re-samples every state from stream `(seed, [EVAL, r])`; activation
/// scales are the network's frozen maxima.
pub fn evaluate(net: &Network, ds: &Dataset, mode: ExecMode, reps: usize, seed: u64) -> Result<Evaluation> {
    if reps == 0 {
        return Err(Error::config("reps", "must be >= 1"));
    }
    if ds.is_empty() {
        return Err(Error::config("dataset", "evaluation set is empty"));
    }
    let mut net = net.clone();
    net.mode = mode;
    net.validate()?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<(Tensor, Vec<usize>)> = indices.chunks(EVAL_CHUNK).map(|c| ds.gather(c)).collect();
    let per_rep: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::stream(seed, &[tag::EVAL, r as u64]);
            let mut ledger = EnergyLedger::new();
            let mut correct = 0;
            for (x, y) in &chunks {
                let (logits, _) = net.forward(x, &mut stream, &mut ledger, ForwardOptions::EVAL)?;
                correct += accuracy(&logits, y);
            }
            Ok((
                correct as f64 / ds.len() as f64,
                ledger.total_energy() / ds.len() as f64,
            ))
        })
        .collect::<Result<_>>()?;
    let n = reps as f64;
    let accuracies: Vec<f64> = per_rep.iter().map(|r| r.0).collect();
    let acc_mean = accuracies.iter().sum::<f64>() / n;
    let acc_std =
        (reps > 1).then(|| (accuracies.iter().map(|a| (a - acc_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(Evaluation {
        mode,
        reps,
        acc_mean,
        acc_std,
        energy_mean: per_rep.iter().map(|r| r.1).sum::<f64>() / n,
        read_steps: net.read_steps(),
        accuracies,
    })
}

struct PhasePlan {
    phase: Phase,
    epochs: usize,
    lambda: f64,
    theta_lr_scale: f64,
}

/// Trains `net` in its current mode. Returns the reason if a loss went
/// non-finite; the epochs completed so far stay in `log`.
fn train_phase(
    net: &mut Network,
    opt: &mut OptimizerState,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    plan: &PhasePlan,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<Option<String>> {
    let loss_cfg = LossConfig::architectural(net, plan.lambda)?;
    let phase_id = plan.phase as u64;
    for epoch in 0..plan.epochs {
        let shuffle = rng::stream_id(&[tag::SHUFFLE, seed, phase_id, epoch as u64]);
        let mut maxima = vec![0.0f64; net.layers.len()];
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for (bi, idx) in data::batches(ds, cfg.batch_size, shuffle)?.enumerate() {
            let (x, y) = ds.gather(&idx);
            let mut stream = rng::stream(seed, &[tag::TRAIN, phase_id, epoch as u64, bi as u64]);
            let mut ledger = EnergyLedger::new();
            let (logits, tape) = net.forward(&x, &mut stream, &mut ledger, ForwardOptions::TRAIN)?;
            let (loss, grads) = net.loss_and_gradients(&logits, &tape, &y, &loss_cfg)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Ok(Some(format!(
                    "non-finite loss in {} epoch {epoch}, batch {bi}",
                    plan.phase.name()
                )));
            }
            for (m, lt) in maxima.iter_mut().zip(&tape.layers) {
                *m = m.max(lt.input_max);
            }
            correct += accuracy(&logits, &y);
            loss_sum += loss;
            batches += 1;
            opt.step_network(net, &grads, plan.theta_lr_scale)?;
        }
        for (l, m) in net.layers.iter_mut().zip(maxima) {
            l.act_max = m;
        }
        log.push(EpochRecord {
            phase: plan.phase,
            epoch,
            loss: loss_sum / batches as f64,
            penalty: crate::nn::energy_penalty(net, &loss_cfg)?,
            train_acc: correct as f64 / ds.len() as f64,
            rho: (0..net.layers.len()).map(|li| net.rho(li)).collect(),
        });
    }
    Ok(None)
}

fn network_spec(cfg: &ExperimentConfig, train: &Dataset) -> NetworkSpec {
    let mut sizes = vec![train.pixels()];
    sizes.extend(&cfg.hidden);
    sizes.push(train.classes.max(2));
    NetworkSpec {
        sizes,
        quant: cfg.quantization(),
        sharing: cfg.rho_sharing,
        init_rho: cfg.init_rho,
    }
}

/// The shared ideal-mode starting point of every regime for `seed`.
pub fn pretrain(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
) -> Result<(Network, Vec<EpochRecord>, Option<String>)> {
    cfg.validate()?;
    let device = cfg.device_model()?;
    let mut init = rng::stream(seed, &[tag::INIT]);
    let mut net = Network::new(&network_spec(cfg, train), device, ExecMode::Ideal, &mut init)?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = Vec::new();
    let plan = PhasePlan {
        phase: Phase::Pretrain,
        epochs: cfg.pretrain_epochs,
        lambda: 0.0,
        theta_lr_scale: 0.0,
    };
    let diverged = train_phase(&mut net, &mut opt, train, cfg, &plan, seed, &mut log)?;
    Ok((net, log, diverged))
}

/// Fine-tunes `pretrained` under the config's regime and evaluates it.
pub fn finetune(
    cfg: &ExperimentConfig,
    seed: u64,
    pretrained: (Network, Vec<EpochRecord>, Option<String>),
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput> {
    let start = Instant::now();
    let (mut net, mut log, diverged) = pretrained;
    let regime = cfg.regime;
    net.device = cfg.device_model()?;
    net.mode = regime.train_mode();
    net.validate()?;
    let rho_initial: Vec<f64> = (0..net.layers.len()).map(|li| net.rho(li)).collect();
    let mut opt = OptimizerState::new(cfg.optimizer);
    let diverged = match diverged {
        Some(d) => Some(d),
        None => {
            let plan = PhasePlan {
                phase: Phase::Finetune,
                epochs: cfg.epochs,
                lambda: if regime.trains_rho() { cfg.lambda } else { 0.0 },
                theta_lr_scale: if regime.trains_rho() { cfg.theta_lr_scale } else { 0.0 },
            };
            train_phase(&mut net, &mut opt, train, cfg, &plan, seed, &mut log)?
        }
    };
    let (eval, ideal_acc) = if diverged.is_none() {
        let eval_seed = rng::stream_id(&[tag::EVAL, seed]);
        let eval = evaluate(&net, test, regime.eval_mode(), cfg.eval_reps, eval_seed)?;
        let ideal = evaluate(&net, test, ExecMode::Ideal, 1, eval_seed)?;
        (Some(eval), Some(ideal.acc_mean))
    } else {
        (None, None)
    };
    let metrics = Metrics {
        regime,
        seed,
        epochs: log,
        eval,
        ideal_acc,
        rho_initial,
        rho_final: (0..net.layers.len()).map(|li| net.rho(li)).collect(),
        diverged,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let checkpoint = Checkpoint::new(seed, regime, net, opt)?;
    Ok(RunOutput { metrics, checkpoint })
}

/// Pretrains in ideal mode, fine-tunes under `cfg.regime` and evaluates.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let start = Instant::now();
    let pre = pretrain(cfg, seed, train)?;
    let mut out = finetune(cfg, seed, pre, train, test)?;
    out.metrics.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// [`run_experiment`] for every configured seed, in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&s| run_experiment(cfg, s, train, test))
        .collect()
}

/// `regime,seed,mode,acc_mean,acc_std,energy_mean,read_steps,ideal_acc,rho_initial,rho_final`.
pub(crate) fn metrics_csv(runs: &[Metrics]) -> String {
    let mut out =
        String::from("regime,seed,mode,acc_mean,acc_std,energy_mean,read_steps,ideal_acc,rho_initial,rho_final\n");
    for m in runs {
        let nan = f64::NAN;
        let e = m.eval.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.regime,
            m.seed,
            e.map_or("none", |e| e.mode.name()),
            sig6(e.map_or(nan, |e| e.acc_mean)),
            sig6(e.and_then(|e| e.acc_std).unwrap_or(nan)),
            sig6(e.map_or(nan, |e| e.energy_mean)),
            e.map_or(0, |e| e.read_steps),
            sig6(m.ideal_acc.unwrap_or(nan)),
            sig6(m.rho_initial_mean()),
            sig6(m.rho_final_mean()),
        );
    }
    out
}

/// `seed,phase,epoch,loss,penalty,train_acc,rho_0,...`.
pub(crate) fn epochs_csv(runs: &[Metrics]) -> String {
    let layers = runs
        .iter()
        .flat_map(|m| &m.epochs)
        .map(|e| e.rho.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("seed,phase,epoch,loss,penalty,train_acc");
    for l in 0..layers {
        let _ = write!(out, ",rho_{l}");
    }
    out.push('\n');
    for m in runs {
        for e in &m.epochs {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                m.seed,
                e.phase.name(),
                e.epoch,
                sig6(e.loss),
                sig6(e.penalty),
                sig6(e.train_acc)
            );
            for r in &e.rho {
                let _ = write!(out, ",{}", sig6(*r));
            }
            out.push('\n');
        }
    }
    out
}

impl RunOutput {
    pub fn metrics_csv(runs: &[RunOutput]) -> String {
        metrics_csv(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())
    }

    pub fn epochs_csv(runs: &[RunOutput]) -> String {
        epochs_csv(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())
    }
}
