//! Full-space finetuning: start from the FedAVG model and train every
//! parameter on the labeled proxy set.

use super::{fedavg, AggregationConfig, AggregationResult};
use crate::client::ClientUpdate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{full_batch, ModelSpec};
use crate::optim::{AdamParams, Optimizer, OptimizerKind};
use crate::rng::SeededRng;

pub fn finetune_fullspace(
    clients: &[ClientUpdate],
    proxy: &Dataset,
    spec: &ModelSpec,
    cfg: &AggregationConfig,
    rng: &mut SeededRng,
) -> Result<AggregationResult> {
    if proxy.is_empty() {
        return Err(Error::invalid("proxy set is empty"));
    }
    let mut w = fedavg(clients)?.global;
    let full = full_batch(proxy);
    let before = spec.ce_loss(&w, &full)?;

    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.finetune_lr, AdamParams::default(), w.len());
    let mut order: Vec<usize> = (0..proxy.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.finetune_epochs {
        rng.shuffle(&mut order);
        for rows in order.chunks(cfg.server_batch) {
            let (loss, grad) = spec.ce_loss_and_grad(&w, &proxy.batch(rows))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "server finetuning",
                    round: None,
                    step,
                    loss,
                });
            }
            opt.step(w.as_mut_slice(), &grad);
            step += 1;
        }
    }
    let after = spec.ce_loss(&w, &full)?;
    if !after.is_finite() {
        return Err(Error::Divergence {
            stage: "server finetuning",
            round: None,
            step,
            loss: after,
        });
    }
    Ok(AggregationResult {
        global: w,
        coefficients: None,
        proxy_loss_before: Some(before),
        proxy_loss_after: Some(after),
    })
}

#[cfg(test)]
mod tests {
    use super::super::Strategy;
    use super::*;
    use crate::data::generate_synthetic;

    fn cfg(lr: f64, epochs: usize) -> AggregationConfig {
        AggregationConfig {
            finetune_lr: lr,
            finetune_epochs: epochs,
            ..AggregationConfig::with_strategy(Strategy::Finetune)
        }
    }

    fn clients(spec: &ModelSpec) -> Vec<ClientUpdate> {
        (0..3)
            .map(|i| ClientUpdate {
                client_id: i,
                params: spec.init_params(&mut SeededRng::new(11, i as u64)),
                sample_count: 4 + i,
            })
            .collect()
    }

    #[test]
    fn zero_lr_is_fedavg() {
        let spec = ModelSpec::logistic(3, 3);
        let proxy = generate_synthetic(3, 8, 3, 2.0, &mut SeededRng::new(1, 0)).unwrap();
        let c = clients(&spec);
        let r = finetune_fullspace(&c, &proxy, &spec, &cfg(0.0, 4), &mut SeededRng::new(0, 0)).unwrap();
        assert_eq!(r.global, fedavg(&c).unwrap().global);
        assert!(r.coefficients.is_none());
    }

    #[test]
    fn training_on_own_shard_lowers_proxy_loss() {
        let spec = ModelSpec::logistic(4, 3);
        let shard = generate_synthetic(3, 20, 4, 3.0, &mut SeededRng::new(2, 0)).unwrap();
        let c = vec![ClientUpdate {
            client_id: 0,
            params: spec.init_params(&mut SeededRng::new(5, 0)),
            sample_count: shard.len(),
        }];
        let r = finetune_fullspace(&c, &shard, &spec, &cfg(1e-2, 30), &mut SeededRng::new(0, 0)).unwrap();
        assert!(r.proxy_loss_after.unwrap() < r.proxy_loss_before.unwrap());
    }

    #[test]
    fn empty_proxy_is_rejected() {
        let spec = ModelSpec::logistic(3, 3);
        let empty = Dataset::new(ndarray::Array2::zeros((0, 3)), vec![], 3).unwrap();
        assert!(finetune_fullspace(&clients(&spec), &empty, &spec, &cfg(1e-3, 1), &mut SeededRng::new(0, 0)).is_err());
    }
}
