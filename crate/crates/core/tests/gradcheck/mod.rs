//! Central-difference gradient checks with the sampled states held fixed
//! (replayed from the tape). Shared by the gradient tests and the
//! acceptance report.
#![allow(dead_code)]

use nxb_core::crossbar::EnergyLedger;
use nxb_core::device::DeviceModel;
use nxb_core::nn::{
    cross_entropy, energy_penalty, ExecMode, ForwardOptions, LossConfig, Network, NetworkSpec, Quantization,
    RhoSharing, Tensor,
};
use nxb_core::rng;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub enum Param {
    W(usize, usize),
    B(usize, usize),
    Theta(usize),
}

fn get(net: &mut Network, p: Param) -> &mut f64 {
    match p {
        Param::W(l, i) => &mut net.layers[l].weights[i],
        Param::B(l, i) => &mut net.layers[l].bias[i],
        Param::Theta(s) => &mut net.thetas[s],
    }
}

pub fn setup(mode: ExecMode, act_bits: Option<u32>, seed: u64) -> (Network, Tensor, Vec<usize>) {
    let spec = NetworkSpec {
        sizes: vec![30, 16, 4],
        quant: Quantization {
            weight_bits: None,
            act_bits,
        },
        sharing: RhoSharing::PerLayer,
        init_rho: 0.7,
    };
    let mut init = rng::stream(seed, &[1]);
    let mut net = Network::new(&spec, DeviceModel::two_state(0.2), mode, &mut init).unwrap();
    for l in net.layers.iter_mut() {
        for b in l.bias.iter_mut() {
            *b = init.gen_range(-0.1..0.1);
        }
    }
    let batch = 8;
    let x: Vec<f64> = (0..batch * 30).map(|_| init.gen::<f64>()).collect();
    let labels = (0..batch).map(|_| init.gen_range(0..4)).collect();
    (net, Tensor::new(&[batch, 30], x).unwrap(), labels)
}

/// Fraction of coordinates whose analytic and central-difference gradients agree.
pub fn agreement(net: &Network, x: &Tensor, labels: &[usize], lambda: f64, params: &[Param], seed: u64) -> (f64, f64) {
    let cfg = LossConfig::architectural(net, lambda).unwrap();
    let (logits, tape) = net
        .forward(
            x,
            &mut rng::stream(seed, &[2]),
            &mut EnergyLedger::new(),
            ForwardOptions::TRAIN,
        )
        .unwrap();
    let (_, grads) = net.loss_and_gradients(&logits, &tape, labels, &cfg).unwrap();
    let loss_at = |n: &Network| {
        let (l, _) = n.replay(x, &tape, &mut EnergyLedger::new()).unwrap();
        cross_entropy(&l, labels).unwrap().0 + energy_penalty(n, &cfg).unwrap()
    };
    let mut ok = 0;
    let mut worst = 0.0f64;
    for &p in params {
        let analytic = match p {
            Param::W(l, i) => grads.weights[l][i],
            Param::B(l, i) => grads.bias[l][i],
            Param::Theta(s) => grads.theta[s],
        };
        let mut plus = net.clone();
        *get(&mut plus, p) += H;
        let mut minus = net.clone();
        *get(&mut minus, p) -= H;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel <= REL_TOL {
            ok += 1;
        }
    }
    (ok as f64 / params.len() as f64, worst)
}

pub fn all_params(net: &Network, layers: std::ops::Range<usize>) -> Vec<Param> {
    let mut out = Vec::new();
    for l in layers {
        out.extend((0..net.layers[l].weights.len()).map(|i| Param::W(l, i)));
        out.extend((0..net.layers[l].bias.len()).map(|i| Param::B(l, i)));
        out.push(Param::Theta(net.layers[l].rho_slot));
    }
    out
}
