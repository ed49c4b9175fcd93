//! Finite-difference verification of the hand-written backward passes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{ModelConfig, SiameseNet, INPUT_CHANNELS};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;
const MIN_WEIGHTS: usize = 50;
const BATCH: usize = 4;
const ATTEMPTS_PER_TENSOR: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Dense,
    Residual,
}

impl LayerKind {
    fn of(name: &str) -> LayerKind {
        if name.starts_with("head.") {
            LayerKind::Dense
        } else if name.contains(".up.") {
            LayerKind::Residual
        } else if name.contains(".bn.") {
            LayerKind::BatchNorm
        } else {
            LayerKind::Conv
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightCheck {
    pub name: String,
    pub index: usize,
    pub kind: LayerKind,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<WeightCheck>,
    /// Sampled weights whose +-step interval crossed a ReLU or pooling
    /// switch and were replaced by another draw.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn kinds(&self) -> Vec<LayerKind> {
        let mut k: Vec<LayerKind> = self.checks.iter().map(|c| c.kind.clone()).collect();
        k.sort();
        k.dedup();
        k
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Random continuous pair batch and alternating targets for a config.
pub(crate) fn random_batch(config: &ModelConfig, rng: &mut ChaCha8Rng, batch: usize) -> (Tensor<f64>, Tensor<f64>, Vec<f64>) {
    let hw = config.input_hw;
    let shape = [batch, INPUT_CHANNELS, hw, hw];
    let len = shape.iter().product();
    let mut draw = || Tensor::from_vec(&shape, (0..len).map(|_| rng.random::<f64>()).collect());
    let (a, b) = (draw(), draw());
    let t = (0..batch).map(|i| (i % 2) as f64).collect();
    (a, b, t)
}

/// Compares analytic loss gradients of a small model, evaluated in 64-bit,
/// against central differences on at least 50 sampled weights.
///
/// Central differences are only meaningful where the loss is smooth over
/// `[w - h, w + h]`. A draw whose perturbed passes take a different ReLU or
/// pooling branch than the unperturbed pass is replaced by another draw.
/// Each trainable tensor gets up to 20 draws to contribute a weight.
pub fn grad_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    if config.input_hw > 16 {
        return Err(Error::Config(format!(
            "gradient check needs an input of at most 16x16, got {0}x{0}",
            config.input_hw
        )));
    }
    let mut net = SiameseNet::<f64>::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, t) = random_batch(config, &mut rng, BATCH);

    net.zero_grad();
    net.forward_train(&a, &b, &t)?;
    let base_pattern = net.activation_pattern();
    net.backward();

    let trainable: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| p.trainable)
        .map(|(i, (_, p))| (i, p.value.len()))
        .collect();
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.grad.clone()).collect();
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();

    let mut checks: Vec<WeightCheck> = Vec::new();
    let mut seen: Vec<(usize, usize)> = Vec::new();
    let mut skipped_kinks = 0;
    let mut probe = |i: usize, j: usize, checks: &mut Vec<WeightCheck>| -> Result<bool> {
        let orig = net.params()[i].1.value.data()[j];
        let mut loss_at = |v: f64| -> Result<(f64, u64)> {
            net.params_mut()[i].1.value.data_mut()[j] = v;
            let loss = net.forward_train(&a, &b, &t)?;
            Ok((loss, net.activation_pattern()))
        };
        let (plus, p_plus) = loss_at(orig + FD_STEP)?;
        let (minus, p_minus) = loss_at(orig - FD_STEP)?;
        net.params_mut()[i].1.value.data_mut()[j] = orig;
        if p_plus != base_pattern || p_minus != base_pattern {
            return Ok(false);
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let g = analytic[i][j];
        checks.push(WeightCheck {
            name: names[i].clone(),
            index: j,
            kind: LayerKind::of(&names[i]),
            analytic: g,
            numeric,
            rel_error: rel_error(g, numeric),
        });
        Ok(true)
    };

    for &(i, len) in &trainable {
        for _ in 0..ATTEMPTS_PER_TENSOR {
            let j = rng.random_range(0..len);
            if seen.contains(&(i, j)) {
                continue;
            }
            seen.push((i, j));
            if probe(i, j, &mut checks)? {
                break;
            }
            skipped_kinks += 1;
        }
    }
    let total: usize = trainable.iter().map(|t| t.1).sum();
    while checks.len() < MIN_WEIGHTS && seen.len() < total {
        let &(i, len) = trainable.choose(&mut rng).expect("model has parameters");
        let j = rng.random_range(0..len);
        if seen.contains(&(i, j)) {
            continue;
        }
        seen.push((i, j));
        if !probe(i, j, &mut checks)? {
            skipped_kinks += 1;
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        checks,
        skipped_kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::sigmoid;

    #[test]
    fn tiny_model_passes() {
        let r = grad_check(&ModelConfig::tiny(), 3).unwrap();
        assert!(r.checks.len() >= MIN_WEIGHTS);
        assert_eq!(r.kinds(), vec![LayerKind::Conv, LayerKind::BatchNorm, LayerKind::Dense, LayerKind::Residual]);
        let worst = r.checks.iter().max_by(|x, y| x.rel_error.total_cmp(&y.rel_error)).unwrap();
        assert!(r.max_rel_error <= 1e-3, "worst: {worst:?}");
    }

    #[test]
    fn rejects_large_inputs() {
        assert!(grad_check(&ModelConfig::mini(), 0).is_err());
    }

    #[test]
    fn bias_gradient_is_mean_residual() {
        let cfg = ModelConfig::tiny();
        let mut net = SiameseNet::<f64>::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b, t) = random_batch(&cfg, &mut rng, 4);
        net.zero_grad();
        net.forward_train(&a, &b, &t).unwrap();
        let preds = net.train_predictions().unwrap().to_vec();
        net.backward();
        let want = preds.iter().zip(&t).map(|(p, t)| p - t).sum::<f64>() / 4.0;
        let params = net.params();
        let bias = params.iter().find(|(n, _)| n == "head.bias").unwrap().1;
        assert!((bias.grad[0] - want).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictions_have_zero_gradient() {
        let cfg = ModelConfig::tiny();
        let mut net = SiameseNet::<f64>::build(&cfg).unwrap();
        for (name, p) in net.params_mut() {
            if name == "head.bias" {
                p.value.data_mut()[0] = 60.0;
            }
        }
        assert!(sigmoid(60.0) > 1.0 - 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, _) = random_batch(&cfg, &mut rng, 4);
        net.zero_grad();
        net.forward_train(&a, &b, &[1.0; 4]).unwrap();
        net.backward();
        for (name, p) in net.params() {
            if p.trainable {
                assert!(p.grad.iter().all(|g| g.abs() <= 1e-6), "{name}");
            }
        }
    }
}
