//! Byzantine-robust baselines: Krum, coordinate-wise median, trimmed mean.

use super::{require_clients, AggregationResult};
use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::math::{CoefficientVector, ParamVector};

/// Picks the client whose summed squared distance to its `n - f - 2` nearest
/// neighbours is smallest. Requires `n >= 2f + 3`; ties go to the lower
/// index.
pub fn krum(clients: &[ClientUpdate], f: usize) -> Result<AggregationResult> {
    require_clients(clients)?;
    let n = clients.len();
    if n < 2 * f + 3 {
        return Err(Error::config(format!("krum with f = {f} needs at least {} clients, got {n}", 2 * f + 3)));
    }
    let k = n - f - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = clients[i].params.squared_distance(&clients[j].params);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut best = (f64::INFINITY, 0);
    for (i, row) in dist.iter().enumerate() {
        let mut others: Vec<f64> = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).collect();
        others.sort_by(f64::total_cmp);
        let score: f64 = others[..k].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok(AggregationResult {
        global: clients[best.1].params.clone(),
        coefficients: Some(CoefficientVector::one_hot(n, best.1)?),
        proxy_loss_before: None,
        proxy_loss_after: None,
    })
}

fn per_coordinate(clients: &[ClientUpdate], reduce: impl Fn(&mut [f64]) -> f64) -> ParamVector {
    let d = clients[0].params.len();
    let mut column = vec![0.0; clients.len()];
    let out = (0..d)
        .map(|j| {
            for (slot, c) in column.iter_mut().zip(clients) {
                *slot = c.params[j];
            }
            column.sort_by(f64::total_cmp);
            reduce(&mut column)
        })
        .collect();
    ParamVector::new(out)
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn coord_median(clients: &[ClientUpdate]) -> Result<AggregationResult> {
    require_clients(clients)?;
    let global = per_coordinate(clients, |v| {
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    });
    Ok(AggregationResult::plain(global))
}

/// Coordinate-wise mean after dropping the `floor(beta * n)` smallest and
/// largest values.
pub fn trimmed_mean(clients: &[ClientUpdate], beta: f64) -> Result<AggregationResult> {
    require_clients(clients)?;
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::invalid(format!("trim fraction must lie in [0, 0.5), got {beta}")));
    }
    let n = clients.len();
    let cut = (beta * n as f64).floor() as usize;
    if 2 * cut >= n {
        return Err(Error::invalid(format!("trimming {cut} from each side of {n} values leaves nothing")));
    }
    let kept = (n - 2 * cut) as f64;
    let global = per_coordinate(clients, |v| v[cut..n - cut].iter().sum::<f64>() / kept);
    Ok(AggregationResult::plain(global))
}

#[cfg(test)]
mod tests {
    use super::super::test_util::update;
    use super::*;
    use proptest::prelude::*;

    fn scalars(values: &[f64]) -> Vec<ClientUpdate> {
        values.iter().enumerate().map(|(i, &v)| update(i, vec![v], 1)).collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(coord_median(&scalars(&[0.0, 10.0, 1.0])).unwrap().global.as_slice(), &[1.0]);
        assert_eq!(coord_median(&scalars(&[0.0, 2.0])).unwrap().global.as_slice(), &[1.0]);
        let same = vec![update(0, vec![1.5, -2.0], 1); 4];
        assert_eq!(coord_median(&same).unwrap().global.as_slice(), &[1.5, -2.0]);
        assert!(coord_median(&same).unwrap().coefficients.is_none());
    }

    #[test]
    fn trimmed_mean_examples() {
        let r = trimmed_mean(&scalars(&[0.0, 1.0, 2.0, 3.0, 100.0]), 0.2).unwrap();
        assert_eq!(r.global.as_slice(), &[2.0]);
        let r = trimmed_mean(&scalars(&[0.0, 1.0, 5.0]), 0.0).unwrap();
        assert_eq!(r.global.as_slice(), &[2.0]);
        for beta in [0.0, 0.1, 0.3, 0.49] {
            let r = trimmed_mean(&scalars(&[0.25; 7]), beta).unwrap();
            assert_eq!(r.global.as_slice(), &[0.25]);
        }
        assert!(trimmed_mean(&scalars(&[1.0]), 0.5).is_err());
    }

    /// Direct evaluation of every Krum score.
    fn brute_scores(models: &[Vec<f64>], f: usize) -> Vec<f64> {
        let n = models.len();
        (0..n)
            .map(|i| {
                let mut d: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| models[i].iter().zip(&models[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                d.sort_by(f64::total_cmp);
                d[..n - f - 2].iter().sum()
            })
            .collect()
    }

    #[test]
    fn krum_skips_outlier() {
        let models = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1], vec![9.0, 9.0]];
        let scores = brute_scores(&models, 0);
        let expected = (0..4).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let clients: Vec<_> = models.iter().enumerate().map(|(i, m)| update(i, m.clone(), 1)).collect();
        let r = krum(&clients, 0).unwrap();
        let chosen = r.coefficients.unwrap().as_slice().iter().position(|&x| x == 1.0).unwrap();
        assert_eq!(chosen, expected);
        assert!(chosen < 3);
        assert_eq!(r.global.as_slice(), models[chosen].as_slice());
    }

    #[test]
    fn krum_ties_and_preconditions() {
        let same = vec![update(0, vec![1.0], 1), update(1, vec![1.0], 1), update(2, vec![1.0], 1)];
        assert_eq!(krum(&same, 0).unwrap().coefficients.unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(krum(&same, 1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn krum_is_permutation_equivariant(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 5..9),
            seed in 0u64..1000,
        ) {
            let n = raw.len();
            let clients: Vec<_> = raw.iter().enumerate().map(|(i, m)| update(i, m.clone(), 1)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            crate::rng::SeededRng::new(seed, 0).shuffle(&mut perm);
            let permuted: Vec<_> = perm.iter().map(|&i| clients[i].clone()).collect();
            let a = krum(&clients, 1).unwrap();
            let b = krum(&permuted, 1).unwrap();
            // Continuous inputs: ties have probability zero.
            prop_assert_eq!(a.global, b.global);
        }

        #[test]
        fn robust_means_stay_in_benign_range(
            benign in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 7..12),
            signs in prop::collection::vec(any::<bool>(), 3),
        ) {
            let n_bad = 2;
            let mut clients: Vec<_> = benign.iter().enumerate().map(|(i, m)| update(i, m.clone(), 1)).collect();
            for b in 0..n_bad {
                let v = if signs[b] { 1e6 } else { -1e6 };
                clients.push(update(100 + b, vec![v; 4], 1));
            }
            let n = clients.len();
            // beta with floor(beta n) >= n_bad
            let beta = (n_bad as f64 + 0.5) / n as f64;
            for r in [coord_median(&clients).unwrap(), trimmed_mean(&clients, beta).unwrap()] {
                for j in 0..4 {
                    let lo = benign.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
                    let hi = benign.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(r.global[j] >= lo - 1e-12 && r.global[j] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn krum_returns_a_vertex(raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 3..8)) {
            let clients: Vec<_> = raw.iter().enumerate().map(|(i, m)| update(i, m.clone(), 1)).collect();
            let r = krum(&clients, 0).unwrap();
            prop_assert!(clients.iter().any(|c| c.params == r.global));
        }
    }
}
