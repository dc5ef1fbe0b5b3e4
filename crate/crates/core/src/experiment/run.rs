//! The federated training loop.

use std::time::Instant;

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ExperimentConfig};
use crate::aggregation::aggregate;
use crate::attack::{flip_labels, omniscient_updates, AttackKind};
use crate::client::{local_update, ClientUpdate};
use crate::data::{dirichlet_partition_pool, generate_synthetic, load_idx, sample_proxy, Dataset, Partition};
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::model::ModelSpec;
use crate::rng::{streams, SeededRng};

/// Everything a run needs that does not change between rounds.
#[derive(Clone, Debug)]
pub struct Environment {
    pub spec: ModelSpec,
    pub test: Dataset,
    pub proxy: Dataset,
    pub partition: Partition,
    /// Training shards as the clients see them (label-flipped for malicious
    /// clients under that attack).
    pub shards: Vec<Dataset>,
    pub malicious_ids: Vec<usize>,
    pub init: ParamVector,
}

impl Environment {
    pub fn is_malicious(&self, client: usize) -> bool {
        self.malicious_ids.binary_search(&client).is_ok()
    }
}

/// Per-round outcome. Round 0 describes the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_ids: Vec<usize>,
    /// Aligned with `client_ids` when the strategy produces coefficients.
    pub coefficients: Option<Vec<f64>>,
    pub malicious: Vec<bool>,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub proxy_acc: Option<f64>,
    pub proxy_loss_before: Option<f64>,
    pub proxy_loss_after: Option<f64>,
    /// Set when the round was skipped instead of aggregated.
    pub warning: Option<String>,
    pub wall_clock_ms: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub global: ParamVector,
    pub malicious_ids: Vec<usize>,
}

impl RunOutput {
    /// Highest evaluated test accuracy over all rounds, initial model included.
    pub fn best_accuracy(&self) -> f64 {
        self.records.iter().filter_map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Test accuracy of the last record.
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().and_then(|r| r.test_acc).unwrap_or(f64::NAN)
    }

    pub fn accuracy_at(&self, round: usize) -> Option<f64> {
        self.records.iter().find(|r| r.round == round).and_then(|r| r.test_acc)
    }
}

fn truncate(d: Dataset, limit: Option<usize>, k: usize) -> Result<Dataset> {
    let n = limit.map_or(d.len(), |l| l.min(d.len()));
    Dataset::new(d.inputs().slice(s![..n, ..]).to_owned(), d.labels()[..n].to_vec(), k)
}

/// Loads or generates the train and test sets.
pub fn load_data(cfg: &ExperimentConfig, master: &SeededRng) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            input_dim,
            separation,
        } => {
            let per = train_per_class + test_per_class;
            let all = generate_synthetic(*num_classes, per, *input_dim, *separation, &mut master.derive(&[streams::DATA]))?;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for c in 0..*num_classes {
                tr.extend(c * per..c * per + train_per_class);
                te.extend(c * per + train_per_class..(c + 1) * per);
            }
            Ok((all.subset(&tr), all.subset(&te)))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let k = train.num_classes().max(test.num_classes());
            Ok((truncate(train, *train_limit, k)?, truncate(test, *test_limit, k)?))
        }
    }
}

/// Data loading, proxy sampling, partitioning, attacker selection and model
/// initialization. The partition does not depend on the strategy, so runs
/// that differ only in aggregation share clients and starting point.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Environment> {
    cfg.validate()?;
    let master = SeededRng::new(cfg.seed, 0);
    let (train, test) = load_data(cfg, &master)?;
    let (proxy_idx, rest) = if cfg.proxy.size == 0 {
        (Vec::new(), (0..train.len()).collect())
    } else {
        sample_proxy(&train, cfg.proxy.imbalance_spec(), &mut master.derive(&[streams::PROXY]))?
    };
    let mut partition = dirichlet_partition_pool(&train, &rest, cfg.clients, cfg.alpha, &mut master.derive(&[streams::PARTITION]))?;
    partition.proxy_indices = proxy_idx;

    let malicious_ids = cfg.attack.malicious_ids(cfg.clients, &mut master.derive(&[streams::ATTACK]));
    let shards = partition
        .client_indices
        .iter()
        .enumerate()
        .map(|(m, idx)| {
            let shard = train.subset(idx);
            if cfg.attack.kind == AttackKind::LabelFlip && malicious_ids.binary_search(&m).is_ok() {
                flip_labels(&shard)
            } else {
                shard
            }
        })
        .collect();

    let spec = cfg.model_spec(train.input_dim(), train.num_classes());
    spec.validate()?;
    let init = spec.init_params(&mut master.derive(&[streams::INIT]));
    Ok(Environment {
        spec,
        test,
        proxy: train.subset(&partition.proxy_indices),
        partition,
        shards,
        malicious_ids,
        init,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let env = prepare(cfg)?;
    run_prepared(cfg, &env)
}

fn evaluate_into(record: &mut RoundRecord, cfg: &ExperimentConfig, env: &Environment, global: &ParamVector) -> Result<()> {
    let report = env.spec.evaluate(global, &env.test)?;
    record.test_acc = Some(report.accuracy);
    record.test_loss = Some(report.mean_loss);
    if cfg.proxy.labeled && !env.proxy.is_empty() {
        record.proxy_acc = Some(env.spec.evaluate(global, &env.proxy)?.accuracy);
    }
    Ok(())
}

fn empty_record(round: usize) -> RoundRecord {
    RoundRecord {
        round,
        client_ids: Vec::new(),
        coefficients: None,
        malicious: Vec::new(),
        test_acc: None,
        test_loss: None,
        proxy_acc: None,
        proxy_loss_before: None,
        proxy_loss_after: None,
        warning: None,
        wall_clock_ms: 0,
    }
}

/// Runs all rounds on a prepared environment.
pub fn run_prepared(cfg: &ExperimentConfig, env: &Environment) -> Result<RunOutput> {
    let master = SeededRng::new(cfg.seed, 0);
    let per_round = cfg.clients_per_round();
    let omniscient = cfg.attack.kind == AttackKind::Omniscient;
    let proxy = (!env.proxy.is_empty()).then_some(&env.proxy);

    let mut global = env.init.clone();
    let mut records = Vec::with_capacity(cfg.rounds + 1);
    let mut initial = empty_record(0);
    evaluate_into(&mut initial, cfg, env, &global)?;
    records.push(initial);

    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let mut sampled = master.derive(&[streams::SAMPLING, t as u64]).sample_without_replacement(cfg.clients, per_round);
        sampled.sort_unstable();
        let mut record = empty_record(t);
        record.malicious = sampled.iter().map(|&m| env.is_malicious(m)).collect();

        let trained: Vec<ClientUpdate> = sampled
            .par_iter()
            .filter(|&&m| !(omniscient && env.is_malicious(m)))
            .map(|&m| {
                let mut rng = master.derive(&[streams::LOCAL, t as u64, m as u64]);
                local_update(&env.spec, m, &global, &env.shards[m], &cfg.local, &mut rng)
            })
            .collect::<Result<_>>()
            .map_err(|e| e.in_round(t))?;

        let updates = if omniscient {
            let bad: Vec<usize> = sampled.iter().copied().filter(|&m| env.is_malicious(m)).collect();
            if bad.is_empty() {
                trained
            } else {
                match omniscient_updates(&trained, &global, &bad) {
                    Ok(fake) => {
                        let mut all = trained;
                        all.extend(fake);
                        all.sort_by_key(|u| u.client_id);
                        all
                    }
                    Err(Error::AttackInapplicable(why)) => {
                        log::warn!("round {t} skipped: {why}");
                        record.client_ids = sampled;
                        record.warning = Some(format!("round skipped: {why}"));
                        Vec::new()
                    }
                    Err(e) => return Err(e.in_round(t)),
                }
            }
        } else {
            trained
        };

        if !updates.is_empty() {
            record.client_ids = updates.iter().map(|u| u.client_id).collect();
            let mut rng = master.derive(&[streams::SERVER, t as u64]);
            let result = aggregate(&updates, proxy, &env.spec, &cfg.aggregation, &mut rng).map_err(|e| e.in_round(t))?;
            record.coefficients = result.coefficients.map(|p| p.into_vec());
            record.proxy_loss_before = result.proxy_loss_before;
            record.proxy_loss_after = result.proxy_loss_after;
            global = result.global;
        }

        if t % cfg.eval_every == 0 || t == cfg.rounds {
            evaluate_into(&mut record, cfg, env, &global)?;
        }
        record.wall_clock_ms = started.elapsed().as_millis() as u64;
        log::info!(
            "round {t}: clients {:?} acc {}",
            record.client_ids,
            record.test_acc.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        records.push(record);
    }

    Ok(RunOutput {
        records,
        global,
        malicious_ids: env.malicious_ids.clone(),
    })
}

/// Mean coefficient given to malicious clients over rounds `from..=to`,
/// averaging over every (round, malicious client) pair that was sampled.
pub fn mean_malicious_coefficient(records: &[RoundRecord], from: usize, to: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records.iter().filter(|r| (from..=to).contains(&r.round)) {
        if let Some(p) = &r.coefficients {
            for (c, &bad) in p.iter().zip(&r.malicious) {
                if bad {
                    sum += c;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean number of clients aggregated per round over `from..=to`.
pub fn mean_clients_per_round(records: &[RoundRecord], from: usize, to: usize) -> f64 {
    let rs: Vec<_> = records.iter().filter(|r| (from..=to).contains(&r.round) && !r.client_ids.is_empty()).collect();
    rs.iter().map(|r| r.client_ids.len() as f64).sum::<f64>() / rs.len().max(1) as f64
}
