//! Poisoning behaviours for a fixed subset of malicious clients.
//!
//! * Label flip: a malicious client trains honestly on data whose labels are
//!   shifted to the next class, `c -> (c + 1) mod K`.
//! * Omniscient: a malicious client skips training and submits
//!   `global - mean_delta`, where `mean_delta` is the sample-weighted mean
//!   update of the benign clients in the same round.

use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    Omniscient,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Fraction of all clients that are malicious.
    pub rate: f64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!("attack.rate must lie in [0, 1), got {}", self.rate)));
        }
        Ok(())
    }

    /// `floor(rate * clients)` distinct ids, ascending, fixed for a run.
    pub fn malicious_ids(&self, clients: usize, rng: &mut SeededRng) -> Vec<usize> {
        if self.kind == AttackKind::None {
            return Vec::new();
        }
        let k = (self.rate * clients as f64).floor() as usize;
        let mut ids = rng.sample_without_replacement(clients, k);
        ids.sort_unstable();
        ids
    }
}

/// Shifts every label to the next class.
pub fn flip_labels(shard: &Dataset) -> Dataset {
    let k = shard.num_classes();
    let labels = shard.labels().iter().map(|&y| (y + 1) % k).collect();
    shard.with_labels(labels).expect("shifted labels stay in range")
}

/// Fabricates one update per id in `malicious_ids` that cancels the benign
/// clients' weighted mean update. Reported sample counts equal the mean
/// benign count, rounded up.
pub fn omniscient_updates(benign: &[ClientUpdate], global: &ParamVector, malicious_ids: &[usize]) -> Result<Vec<ClientUpdate>> {
    if benign.is_empty() {
        return Err(Error::AttackInapplicable("no benign clients in this round".into()));
    }
    let total: usize = benign.iter().map(|c| c.sample_count).sum();
    if total == 0 {
        return Err(Error::AttackInapplicable("benign clients report zero samples".into()));
    }
    let mut mean_delta = vec![0.0; global.len()];
    for c in benign {
        let w = c.sample_count as f64 / total as f64;
        for ((m, x), g) in mean_delta.iter_mut().zip(c.params.iter()).zip(global.iter()) {
            *m += w * (x - g);
        }
    }
    let params = global.sub(&mean_delta);
    let sample_count = total.div_ceil(benign.len());
    Ok(malicious_ids
        .iter()
        .map(|&client_id| ClientUpdate {
            client_id,
            params: params.clone(),
            sample_count,
        })
        .collect())
}
