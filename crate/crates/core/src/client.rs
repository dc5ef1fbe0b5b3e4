//! Client-side local training.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::model::{row_mean, ModelSpec};
use crate::optim::{AdamParams, Optimizer, OptimizerKind};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Proximal coefficient; 0 disables the term.
    pub prox_mu: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        let hp = AdamParams::default();
        LocalConfig {
            epochs: 1,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            prox_mu: 0.0,
        }
    }
}

impl LocalConfig {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("local.epochs and local.batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("local.lr must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("local.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("local.eps must be positive"));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config("local.prox_mu must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A trained local model as submitted to the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub sample_count: usize,
}

impl AsRef<[f64]> for ClientUpdate {
    fn as_ref(&self) -> &[f64] {
        &self.params
    }
}

/// Runs `cfg.epochs` passes of shuffled minibatch training from `global`.
///
/// Optimizer state is created fresh on every call. With `prox_mu > 0` the
/// per-batch objective adds `prox_mu / 2 * |w - global|^2`. The final partial
/// minibatch of each epoch is kept.
pub fn local_update(
    spec: &ModelSpec,
    client_id: usize,
    global: &ParamVector,
    shard: &Dataset,
    cfg: &LocalConfig,
    rng: &mut SeededRng,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::invalid(format!("client {client_id} has an empty shard")));
    }
    let mut w = global.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.adam(), w.len());
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shard.batch(chunk);
            let (mut loss, mut grad) = spec.ce_loss_and_grad(&w, &batch)?;
            if cfg.prox_mu > 0.0 {
                let drift = w.sub(global);
                loss += 0.5 * cfg.prox_mu * drift.norm_sq();
                grad = grad.add_scaled(cfg.prox_mu, &drift);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "local training",
                    round: None,
                    step,
                    loss,
                });
            }
            opt.step(w.as_mut_slice(), &grad);
            step += 1;
        }
    }
    if !w.is_finite() {
        return Err(Error::Divergence {
            stage: "local training",
            round: None,
            step,
            loss: f64::NAN,
        });
    }
    Ok(ClientUpdate {
        client_id,
        params: w,
        sample_count: shard.len(),
    })
}

/// Average of the clients' softmax outputs on `inputs`; row-stochastic.
pub fn ensemble_logits(clients: &[ClientUpdate], spec: &ModelSpec, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    if clients.is_empty() {
        return Err(Error::invalid("ensemble needs at least one client"));
    }
    let probs = clients
        .iter()
        .map(|c| spec.predict_proba(&c.params, inputs))
        .collect::<Result<Vec<_>>>()?;
    if probs.len() == 1 {
        return Ok(probs.into_iter().next().expect("one element"));
    }
    Ok(row_mean(&probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use ndarray::array;

    fn toy() -> (ModelSpec, Dataset, ParamVector) {
        let d = generate_synthetic(3, 20, 4, 3.0, &mut SeededRng::new(1, 1)).unwrap();
        let spec = ModelSpec::logistic(4, 3);
        let w = spec.init_params(&mut SeededRng::new(2, 2));
        (spec, d, w)
    }

    #[test]
    fn zero_lr_returns_global() {
        let (spec, d, w) = toy();
        let cfg = LocalConfig {
            lr: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let u = local_update(&spec, 4, &w, &d, &cfg, &mut SeededRng::new(0, 0)).unwrap();
        assert_eq!(u.params, w);
        assert_eq!(u.sample_count, 60);
        assert_eq!(u.client_id, 4);
    }

    #[test]
    fn single_sgd_step_matches_gradient() {
        let spec = ModelSpec::logistic(2, 2);
        let d = Dataset::new(array![[0.5, 1.0]], vec![1], 2).unwrap();
        let w = ParamVector::new(vec![0.1, -0.2, 0.3, 0.0, 0.0, 0.05]);
        let cfg = LocalConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.5,
            ..Default::default()
        };
        // Pencil-and-paper: logits z = [0.5*0.1 + 0.3, 0.5*-0.2 + 0 + 0.05] = [0.35, -0.05]
        // softmax -> q1 = 1 / (1 + e^0.4); dz = [q0, q1 - 1].
        let q1 = 1.0 / (1.0 + 0.4f64.exp());
        let q0 = 1.0 - q1;
        let dz = [q0, q1 - 1.0];
        let grad = [0.5 * dz[0], 0.5 * dz[1], dz[0], dz[1], dz[0], dz[1]];
        let expected: Vec<f64> = w.iter().zip(grad).map(|(a, g)| a - 0.5 * g).collect();
        let u = local_update(&spec, 0, &w, &d, &cfg, &mut SeededRng::new(0, 0)).unwrap();
        for (a, b) in u.params.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let (spec, d, w) = toy();
        let cfg = LocalConfig::default();
        let a = local_update(&spec, 0, &w, &d, &cfg, &mut SeededRng::new(5, 5)).unwrap();
        let b = local_update(&spec, 0, &w, &d, &cfg, &mut SeededRng::new(5, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn proximal_term_shrinks_drift() {
        let (spec, d, w) = toy();
        let mut last = f64::INFINITY;
        // Plain SGD with lr * mu < 1 keeps every run stable.
        for mu in [0.0, 1.0, 10.0, 100.0, 900.0] {
            let cfg = LocalConfig {
                optimizer: OptimizerKind::Sgd,
                lr: 1e-3,
                epochs: 2,
                batch_size: 8,
                prox_mu: mu,
                ..Default::default()
            };
            let u = local_update(&spec, 0, &w, &d, &cfg, &mut SeededRng::new(3, 3)).unwrap();
            let drift = u.params.squared_distance(&w).sqrt();
            assert!(drift <= last, "mu {mu}: drift {drift} > {last}");
            last = drift;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, d, _) = toy();
        // Logits overflow to +-inf and the softmax turns into NaN.
        let w = ParamVector::new((0..spec.param_count()).map(|i| if i % 2 == 0 { 1e308 } else { -1e308 }).collect());
        let cfg = LocalConfig {
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        };
        let err = local_update(&spec, 0, &w, &d, &cfg, &mut SeededRng::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(err.in_round(7).exit_code(), 2);
    }

    #[test]
    fn ensemble_examples() {
        let spec = ModelSpec::logistic(2, 2);
        let x = array![[0.3, 0.9], [1.0, 0.2]];
        let a = ClientUpdate {
            client_id: 0,
            params: ParamVector::new(vec![1.0, -1.0, 2.0, -2.0, 0.5, -0.5]),
            sample_count: 1,
        };
        let own = spec.predict_proba(&a.params, x.view()).unwrap();
        assert_eq!(ensemble_logits(&[a.clone()], &spec, x.view()).unwrap(), own);

        let mirror = ClientUpdate {
            client_id: 1,
            params: ParamVector::new(vec![-1.0, 1.0, -2.0, 2.0, -0.5, 0.5]),
            sample_count: 1,
        };
        let t = ensemble_logits(&[a, mirror], &spec, x.view()).unwrap();
        assert!(t.iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn ensemble_rows_are_stochastic() {
        let spec = ModelSpec::mlp(3, 4, 5, crate::model::Activation::Relu);
        let clients: Vec<ClientUpdate> = (0..3)
            .map(|i| ClientUpdate {
                client_id: i,
                params: spec.init_params(&mut SeededRng::new(i as u64, 0)),
                sample_count: 1,
            })
            .collect();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 / 10.0);
        let t = ensemble_logits(&clients, &spec, x.view()).unwrap();
        for row in t.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
