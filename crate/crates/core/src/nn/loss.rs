use super::{Gradients, Network, Tensor};
use crate::crossbar::EnergyLedger;
use crate::{Error, Result};

/// Energy-regularization settings: weight `lambda` and the per-cell read
/// counts `alpha_t` of one inference, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: Vec<Vec<f64>>,
}

impl LossConfig {
    pub fn new(lambda: f64, alpha: Vec<Vec<f64>>) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config("lambda", format!("{lambda} is not a finite value >= 0")));
        }
        Ok(LossConfig { lambda, alpha })
    }

    /// Plain task loss.
    pub fn unregularized(net: &Network) -> Self {
        LossConfig::architectural(net, 0.0).expect("lambda 0 is valid")
    }

    /// Read counts fixed by the architecture: one read per cell per
    /// inference, times the number of bit planes when decomposed.
    pub fn architectural(net: &Network, lambda: f64) -> Result<Self> {
        let per_cell = net.reads_per_cell();
        let alpha = net.layers.iter().map(|l| vec![per_cell; l.weights.len()]).collect();
        LossConfig::new(lambda, alpha)
    }

    /// Read counts measured by a reference ledger covering `inferences` inputs.
    pub fn from_ledger(net: &Network, lambda: f64, ledger: &EnergyLedger, inferences: u64) -> Result<Self> {
        if inferences == 0 {
            return Err(Error::domain("reference ledger must cover at least one inference"));
        }
        let alpha = net
            .layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let usage = ledger
                    .usage(li)
                    .ok_or_else(|| Error::shape(format!("reference ledger has no entry for layer {li}")))?;
                if usage.cell_reads.len() != l.weights.len() {
                    return Err(Error::shape(format!(
                        "reference ledger covers the wrong cells of layer {li}"
                    )));
                }
                Ok(usage.cell_reads.iter().map(|&c| c as f64 / inferences as f64).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        LossConfig::new(lambda, alpha)
    }

    fn check(&self, net: &Network) -> Result<()> {
        if self.alpha.len() != net.layers.len()
            || self
                .alpha
                .iter()
                .zip(&net.layers)
                .any(|(a, l)| a.len() != l.weights.len())
        {
            return Err(Error::shape("read counts do not cover the network's cells"));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if labels.len() != batch {
        return Err(Error::shape(format!("{} labels for {batch} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::shape(format!("label {bad} for {classes} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; batch * classes];
    for (j, &y) in labels.iter().enumerate() {
        let row = logits.row(j);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[y];
        for (k, v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            grad[j * classes + k] = (p - if k == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, Tensor::new(&[batch, classes], grad)?))
}

/// `lambda * sum_t alpha_t * rho * |w_t|` over every programmed weight.
pub fn energy_penalty(net: &Network, cfg: &LossConfig) -> Result<f64> {
    cfg.check(net)?;
    if cfg.lambda == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for li in 0..net.layers.len() {
        let xb = net.program(li)?;
        let rho = net.rho(li);
        let s: f64 = xb.weights().iter().zip(&cfg.alpha[li]).map(|(w, a)| a * w.abs()).sum();
        total += rho * s;
    }
    Ok(cfg.lambda * total)
}

/// Adds the regularizer's gradient: `lambda * alpha_t * rho * sign(w_t)` on
/// each weight (sign(0) = 0) and `lambda * rho * sum alpha_t |w_t|` on theta.
pub(crate) fn add_energy_penalty_grad(net: &Network, cfg: &LossConfig, grads: &mut Gradients) -> Result<()> {
    cfg.check(net)?;
    if cfg.lambda == 0.0 {
        return Ok(());
    }
    for li in 0..net.layers.len() {
        let xb = net.program(li)?;
        let rho = net.rho(li);
        let mut theta = 0.0;
        for ((g, &w), &a) in grads.weights[li].iter_mut().zip(xb.weights()).zip(&cfg.alpha[li]) {
            let sign = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            *g += cfg.lambda * a * rho * sign;
            theta += a * w.abs();
        }
        grads.theta[net.layers[li].rho_slot] += cfg.lambda * rho * theta;
    }
    Ok(())
}

/// Cross-entropy plus the energy regularizer.
pub fn loss_with_energy_reg(logits: &Tensor, labels: &[usize], net: &Network, cfg: &LossConfig) -> Result<f64> {
    let (ce, _) = cross_entropy(logits, labels)?;
    Ok(ce + energy_penalty(net, cfg)?)
}

impl Network {
    /// Loss and full gradient for one recorded forward call.
    pub fn loss_and_gradients(
        &self,
        logits: &Tensor,
        tape: &super::Tape,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(f64, Gradients)> {
        let (ce, dlogits) = cross_entropy(logits, labels)?;
        let mut grads = self.backward(tape, &dlogits)?;
        add_energy_penalty_grad(self, cfg, &mut grads)?;
        Ok((ce + energy_penalty(self, cfg)?, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceModel;
    use crate::nn::{Activation, DenseLayer, ExecMode, Quantization};

    fn one_cell(w: f64, rho: f64) -> Network {
        Network {
            layers: vec![DenseLayer {
                inputs: 1,
                outputs: 1,
                weights: vec![w],
                bias: vec![0.0],
                activation: Activation::SoftmaxHead,
                rho_slot: 0,
                act_max: 0.0,
            }],
            thetas: vec![rho.ln()],
            device: DeviceModel::two_state(0.1),
            mode: ExecMode::NoisyOriginal,
            quant: Quantization {
                weight_bits: None,
                act_bits: None,
            },
        }
    }

    #[test]
    fn penalty_substitution() {
        let net = one_cell(2.0, 0.5);
        let cfg = LossConfig::new(1.0, vec![vec![3.0]]).unwrap();
        assert!((energy_penalty(&net, &cfg).unwrap() - 3.0).abs() < 1e-12);
        let neg = one_cell(-2.0, 0.5);
        assert_eq!(energy_penalty(&net, &cfg).unwrap(), energy_penalty(&neg, &cfg).unwrap());
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let net = one_cell(2.0, 0.5);
        let logits = Tensor::from_rows(&[[0.3, -0.2], [1.0, 2.0]]).unwrap();
        let cfg = LossConfig::new(0.0, vec![vec![8.0]]).unwrap();
        let (ce, _) = cross_entropy(&logits, &[0, 1]).unwrap();
        assert_eq!(loss_with_energy_reg(&logits, &[0, 1], &net, &cfg).unwrap(), ce);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::from_rows(&[[1.0, 2.0, 0.5]]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[1]).unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp() / z).collect();
        assert!((loss - (-p[1].ln())).abs() < 1e-12);
        for (k, &pk) in p.iter().enumerate() {
            let expect = pk - if k == 1 { 1.0 } else { 0.0 };
            assert!((g.values()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_get_no_sign_pressure() {
        let net = one_cell(0.0, 1.0);
        let cfg = LossConfig::new(1.0, vec![vec![1.0]]).unwrap();
        let mut g = Gradients::zeros(&net);
        add_energy_penalty_grad(&net, &cfg, &mut g).unwrap();
        assert_eq!(g.weights[0][0], 0.0);
        assert_eq!(g.theta[0], 0.0);
    }

    #[test]
    fn bad_labels_rejected() {
        let logits = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(cross_entropy(&logits, &[2]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
        assert!(LossConfig::new(-1.0, vec![]).is_err());
    }
}
