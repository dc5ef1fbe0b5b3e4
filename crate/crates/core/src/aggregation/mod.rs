//! Server-side aggregation strategies.
//!
//! | strategy        | proxy data | coefficients | notes                                  |
//! |-----------------|------------|--------------|----------------------------------------|
//! | `fedavg`        | no         | yes          | sample-count weighted average          |
//! | `smartfl`       | labeled    | yes          | projected descent over the simplex     |
//! | `smartfl_u`     | unlabeled  | yes          | same, distilling the client ensemble   |
//! | `finetune`      | labeled    | no           | full-space training after FedAVG       |
//! | `abavg`         | labeled    | yes          | weights proportional to proxy accuracy |
//! | `krum`          | no         | yes (vertex) | single most central client             |
//! | `median`        | no         | no           | coordinate-wise median                 |
//! | `trimmed_mean`  | no         | no           | coordinate-wise trimmed mean           |

mod finetune;
mod robust;
mod subspace;

use serde::{Deserialize, Serialize};

pub use finetune::finetune_fullspace;
pub use robust::{coord_median, krum, trimmed_mean};
pub use subspace::{smartfl, smartfl_u};

use crate::client::ClientUpdate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{convex_combine, CoefficientVector, ParamVector};
use crate::model::ModelSpec;
use crate::optim::OptimizerKind;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Smartfl,
    SmartflU,
    Finetune,
    Abavg,
    Krum,
    Median,
    TrimmedMean,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Fedavg,
        Strategy::Smartfl,
        Strategy::SmartflU,
        Strategy::Finetune,
        Strategy::Abavg,
        Strategy::Krum,
        Strategy::Median,
        Strategy::TrimmedMean,
    ];

    pub fn needs_proxy(self) -> bool {
        matches!(self, Strategy::Smartfl | Strategy::SmartflU | Strategy::Finetune | Strategy::Abavg)
    }

    pub fn needs_labeled_proxy(self) -> bool {
        matches!(self, Strategy::Smartfl | Strategy::Finetune | Strategy::Abavg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Smartfl => "smartfl",
            Strategy::SmartflU => "smartfl_u",
            Strategy::Finetune => "finetune",
            Strategy::Abavg => "abavg",
            Strategy::Krum => "krum",
            Strategy::Median => "median",
            Strategy::TrimmedMean => "trimmed_mean",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub strategy: Strategy,
    /// Passes over the proxy set for the coefficient search.
    pub server_epochs: usize,
    pub server_lr: f64,
    pub server_batch: usize,
    pub server_optimizer: OptimizerKind,
    /// Distillation temperature for `smartfl_u`.
    pub temperature: f64,
    pub trim_beta: f64,
    pub krum_f: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            strategy: Strategy::Fedavg,
            server_epochs: 20,
            server_lr: 1e-2,
            server_batch: 32,
            server_optimizer: OptimizerKind::Adam,
            temperature: 1.0,
            trim_beta: 0.2,
            krum_f: 0,
            finetune_epochs: 20,
            finetune_lr: 1e-3,
        }
    }
}

impl AggregationConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        AggregationConfig {
            strategy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strategy;
        if matches!(s, Strategy::Smartfl | Strategy::SmartflU) {
            if self.server_epochs == 0 || self.server_batch == 0 {
                return Err(Error::config("aggregation.server_epochs and server_batch must be positive"));
            }
            if !(self.server_lr >= 0.0 && self.server_lr.is_finite()) {
                return Err(Error::config("aggregation.server_lr must be finite and >= 0"));
            }
        }
        if s == Strategy::SmartflU && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("aggregation.temperature must be positive"));
        }
        if s == Strategy::Finetune {
            if self.finetune_epochs == 0 || self.server_batch == 0 {
                return Err(Error::config("aggregation.finetune_epochs and server_batch must be positive"));
            }
            if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
                return Err(Error::config("aggregation.finetune_lr must be finite and >= 0"));
            }
        }
        if s == Strategy::TrimmedMean && !(0.0..0.5).contains(&self.trim_beta) {
            return Err(Error::config(format!("aggregation.trim_beta must lie in [0, 0.5), got {}", self.trim_beta)));
        }
        Ok(())
    }
}

/// Outcome of one aggregation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub global: ParamVector,
    pub coefficients: Option<CoefficientVector>,
    pub proxy_loss_before: Option<f64>,
    pub proxy_loss_after: Option<f64>,
}

impl AggregationResult {
    fn combined<M: AsRef<[f64]>>(models: &[M], p: CoefficientVector) -> Result<Self> {
        Ok(AggregationResult {
            global: convex_combine(models, &p)?,
            coefficients: Some(p),
            proxy_loss_before: None,
            proxy_loss_after: None,
        })
    }

    fn plain(global: ParamVector) -> Self {
        AggregationResult {
            global,
            coefficients: None,
            proxy_loss_before: None,
            proxy_loss_after: None,
        }
    }
}

fn require_clients(clients: &[ClientUpdate]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::invalid("aggregation needs at least one client"));
    }
    let d = clients[0].params.len();
    if clients.iter().any(|c| c.params.len() != d) {
        return Err(Error::invalid("client models have different lengths"));
    }
    Ok(())
}

/// Sample-count proportional weights over the given clients.
pub fn fedavg_weights(clients: &[ClientUpdate]) -> Result<CoefficientVector> {
    require_clients(clients)?;
    let counts: Vec<f64> = clients.iter().map(|c| c.sample_count as f64).collect();
    if counts.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("clients report zero samples in total"));
    }
    CoefficientVector::from_weights(&counts)
}

pub fn fedavg(clients: &[ClientUpdate]) -> Result<AggregationResult> {
    let p = fedavg_weights(clients)?;
    AggregationResult::combined(clients, p)
}

/// Weights proportional to each client's accuracy on the proxy set; uniform
/// when every accuracy is zero.
pub fn abavg(clients: &[ClientUpdate], proxy: &Dataset, spec: &ModelSpec) -> Result<AggregationResult> {
    require_clients(clients)?;
    if proxy.is_empty() {
        return Err(Error::invalid("abavg needs a non-empty proxy set"));
    }
    let acc = clients
        .iter()
        .map(|c| spec.evaluate(&c.params, proxy).map(|r| r.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let p = if acc.iter().all(|&a| a == 0.0) {
        CoefficientVector::uniform(clients.len())?
    } else {
        CoefficientVector::from_weights(&acc)?
    };
    AggregationResult::combined(clients, p)
}

/// Dispatches to the configured strategy.
pub fn aggregate(
    clients: &[ClientUpdate],
    proxy: Option<&Dataset>,
    spec: &ModelSpec,
    cfg: &AggregationConfig,
    rng: &mut SeededRng,
) -> Result<AggregationResult> {
    let need_proxy = || proxy.ok_or_else(|| Error::config(format!("strategy {} needs proxy data", cfg.strategy.name())));
    match cfg.strategy {
        Strategy::Fedavg => fedavg(clients),
        Strategy::Smartfl => smartfl(clients, need_proxy()?, spec, cfg, rng),
        Strategy::SmartflU => smartfl_u(clients, need_proxy()?.inputs().view(), spec, cfg, rng),
        Strategy::Finetune => finetune_fullspace(clients, need_proxy()?, spec, cfg, rng),
        Strategy::Abavg => abavg(clients, need_proxy()?, spec),
        Strategy::Krum => krum(clients, cfg.krum_f),
        Strategy::Median => coord_median(clients),
        Strategy::TrimmedMean => trimmed_mean(clients, cfg.trim_beta),
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn update(id: usize, params: Vec<f64>, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: ParamVector::new(params),
            sample_count: n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::update;
    use super::*;
    use ndarray::array;

    #[test]
    fn fedavg_examples() {
        let a = update(0, vec![1.0, 0.0], 5);
        let b = update(1, vec![0.0, 1.0], 5);
        assert_eq!(fedavg(&[a.clone(), b.clone()]).unwrap().global.as_slice(), &[0.5, 0.5]);
        let a3 = ClientUpdate { sample_count: 15, ..a.clone() };
        let r = fedavg(&[a3, b]).unwrap();
        assert_eq!(r.global.as_slice(), &[0.75, 0.25]);
        assert_eq!(r.coefficients.unwrap().as_slice(), &[0.75, 0.25]);
        assert_eq!(fedavg(&[a.clone()]).unwrap().global, a.params);
        assert!(fedavg(&[]).is_err());
        assert!(fedavg(&[ClientUpdate { sample_count: 0, ..a }]).is_err());
    }

    fn abavg_fixture() -> (ModelSpec, Dataset) {
        // Ten points, class 0 where feature 0 is large.
        let x = array![
            [1.0, 0.0], [0.9, 0.1], [0.8, 0.0], [0.7, 0.2], [0.6, 0.1],
            [0.0, 1.0], [0.1, 0.9], [0.0, 0.8], [0.2, 0.7], [0.1, 0.6]
        ];
        let y = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        (ModelSpec::logistic(2, 2), Dataset::new(x, y, 2).unwrap())
    }

    #[test]
    fn abavg_proportional_to_accuracy() {
        let (spec, proxy) = abavg_fixture();
        let right = update(0, vec![1.0, -1.0, -1.0, 1.0, 0.0, 0.0], 1); // 100%
        let wrong = update(1, vec![-1.0, 1.0, 1.0, -1.0, 0.0, 0.0], 1); // 0%
        let class0 = update(2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1); // 50%
        let r = abavg(&[class0.clone(), class0.clone()], &proxy, &spec).unwrap();
        assert_eq!(r.coefficients.unwrap().as_slice(), &[0.5, 0.5]);
        let r = abavg(&[right, wrong.clone()], &proxy, &spec).unwrap();
        assert_eq!(r.coefficients.unwrap().as_slice(), &[1.0, 0.0]);
        let r = abavg(&[wrong.clone(), wrong], &proxy, &spec).unwrap();
        assert_eq!(r.coefficients.unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn abavg_nine_to_one() {
        let spec = ModelSpec::logistic(1, 2);
        // Ten samples; client A predicts class 0 always, B class 1 always.
        let x = ndarray::Array2::zeros((10, 1));
        let y = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let proxy = Dataset::new(x, y, 2).unwrap();
        let a = update(0, vec![0.0, 0.0, 1.0, 0.0], 1);
        let b = update(1, vec![0.0, 0.0, 0.0, 1.0], 1);
        let r = abavg(&[a, b], &proxy, &spec).unwrap();
        let p = r.coefficients.unwrap();
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dispatcher_requires_proxy() {
        let spec = ModelSpec::logistic(1, 2);
        let c = [update(0, vec![0.0; 4], 1)];
        let cfg = AggregationConfig::with_strategy(Strategy::Smartfl);
        let err = aggregate(&c, None, &spec, &cfg, &mut SeededRng::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = AggregationConfig::with_strategy(Strategy::TrimmedMean);
        cfg.trim_beta = 0.5;
        assert!(cfg.validate().is_err());
        cfg.trim_beta = 0.2;
        assert!(cfg.validate().is_ok());
        let mut cfg = AggregationConfig::with_strategy(Strategy::Smartfl);
        cfg.server_epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
