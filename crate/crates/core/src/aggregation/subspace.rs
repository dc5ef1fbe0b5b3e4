//! Aggregation by optimizing the global model inside the convex hull of the
//! client models.
//!
//! The global model is parameterized as `w(p) = sum_m p_m w_m` with `p` on
//! the probability simplex, so only one scalar per sampled client is
//! trained. Starting from the FedAVG weights, each proxy minibatch takes an
//! optimizer step on `p` along `dL/dp_m = <grad_w L, w_m>` and projects back
//! onto the simplex.
//!
//! After the last epoch the full-proxy loss is compared across the optimized
//! point, the starting weights and every vertex; the smallest wins (the
//! starting weights first, then the optimized point, then vertices by client
//! position). The returned model is therefore never worse on the proxy set
//! than FedAVG or any single client model.

use ndarray::{Array2, ArrayView2, Axis};

use super::{fedavg_weights, require_clients, AggregationConfig, AggregationResult};
use crate::client::{ensemble_logits, ClientUpdate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{coefficient_gradient, convex_combine, project_simplex, CoefficientVector, ParamVector};
use crate::model::{Batch, ModelSpec};
use crate::optim::{AdamParams, Optimizer};
use crate::rng::SeededRng;

/// Server-side loss over the proxy set.
trait ProxyObjective {
    fn len(&self) -> usize;
    fn batch_loss_grad(&self, w: &[f64], rows: &[usize]) -> Result<(f64, ParamVector)>;
    fn full_loss(&self, w: &[f64]) -> Result<f64>;
}

struct LabeledProxy<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    full: Batch,
}

impl ProxyObjective for LabeledProxy<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn batch_loss_grad(&self, w: &[f64], rows: &[usize]) -> Result<(f64, ParamVector)> {
        self.spec.ce_loss_and_grad(w, &self.data.batch(rows))
    }

    fn full_loss(&self, w: &[f64]) -> Result<f64> {
        self.spec.ce_loss(w, &self.full)
    }
}

struct DistillProxy<'a> {
    spec: &'a ModelSpec,
    inputs: Array2<f64>,
    targets: Array2<f64>,
    full: Batch,
    temperature: f64,
}

impl ProxyObjective for DistillProxy<'_> {
    fn len(&self) -> usize {
        self.inputs.nrows()
    }

    fn batch_loss_grad(&self, w: &[f64], rows: &[usize]) -> Result<(f64, ParamVector)> {
        let batch = Batch::soft(self.inputs.select(Axis(0), rows), self.targets.select(Axis(0), rows))?;
        self.spec.kl_loss_and_grad(w, &batch, self.temperature)
    }

    fn full_loss(&self, w: &[f64]) -> Result<f64> {
        self.spec.kl_loss(w, &self.full, self.temperature)
    }
}

fn diverged(step: usize, loss: f64) -> Error {
    Error::Divergence {
        stage: "server aggregation",
        round: None,
        step,
        loss,
    }
}

fn optimize_coefficients<O: ProxyObjective>(
    clients: &[ClientUpdate],
    objective: &O,
    cfg: &AggregationConfig,
    rng: &mut SeededRng,
) -> Result<AggregationResult> {
    require_clients(clients)?;
    if objective.len() == 0 {
        return Err(Error::invalid("proxy set is empty"));
    }
    let init = fedavg_weights(clients)?;

    let mut p = init.as_slice().to_vec();
    let mut opt = Optimizer::new(cfg.server_optimizer, cfg.server_lr, AdamParams::default(), p.len());
    let mut order: Vec<usize> = (0..objective.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.server_epochs {
        rng.shuffle(&mut order);
        for rows in order.chunks(cfg.server_batch) {
            let w = convex_combine(clients, &CoefficientVector::new(p.clone())?)?;
            let (loss, wgrad) = objective.batch_loss_grad(&w, rows)?;
            if !loss.is_finite() {
                return Err(diverged(step, loss));
            }
            let pgrad = coefficient_gradient(clients, &wgrad)?;
            opt.step(&mut p, &pgrad);
            if p.iter().any(|x| !x.is_finite()) {
                return Err(diverged(step, loss));
            }
            p = project_simplex(&p)?.into_vec();
            step += 1;
        }
    }
    let optimized = CoefficientVector::new(p)?;

    let n = clients.len();
    let mut candidates = vec![init.clone(), optimized];
    for m in 0..n {
        candidates.push(CoefficientVector::one_hot(n, m)?);
    }
    let init_loss = objective.full_loss(&convex_combine(clients, &init)?)?;
    if !init_loss.is_finite() {
        return Err(diverged(step, init_loss));
    }
    let mut best: (f64, CoefficientVector, ParamVector) = (f64::INFINITY, init.clone(), ParamVector::zeros(0));
    for cand in candidates {
        let w = convex_combine(clients, &cand)?;
        let loss = objective.full_loss(&w)?;
        if loss < best.0 {
            best = (loss, cand, w);
        }
    }
    let (after, p, global) = best;
    Ok(AggregationResult {
        global,
        coefficients: Some(p),
        proxy_loss_before: Some(init_loss),
        proxy_loss_after: Some(after),
    })
}

/// Coefficient search against cross-entropy on a labeled proxy set.
pub fn smartfl(
    clients: &[ClientUpdate],
    proxy: &Dataset,
    spec: &ModelSpec,
    cfg: &AggregationConfig,
    rng: &mut SeededRng,
) -> Result<AggregationResult> {
    if proxy.is_empty() {
        return Err(Error::invalid("proxy set is empty"));
    }
    let objective = LabeledProxy {
        spec,
        data: proxy,
        full: crate::model::full_batch(proxy),
    };
    optimize_coefficients(clients, &objective, cfg, rng)
}

/// Coefficient search against `KL(ensemble || global)` on unlabeled proxy
/// inputs. Ensemble targets are computed once, from the submitted models.
pub fn smartfl_u(
    clients: &[ClientUpdate],
    proxy_inputs: ArrayView2<f64>,
    spec: &ModelSpec,
    cfg: &AggregationConfig,
    rng: &mut SeededRng,
) -> Result<AggregationResult> {
    require_clients(clients)?;
    if proxy_inputs.nrows() == 0 {
        return Err(Error::invalid("proxy set is empty"));
    }
    let targets = ensemble_logits(clients, spec, proxy_inputs)?;
    let inputs = proxy_inputs.to_owned();
    let full = Batch::soft(inputs.clone(), targets.clone())?;
    let objective = DistillProxy {
        spec,
        inputs,
        targets,
        full,
        temperature: cfg.temperature,
    };
    optimize_coefficients(clients, &objective, cfg, rng)
}
