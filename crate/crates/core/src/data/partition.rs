//! Non-IID client partitioning and server proxy-set sampling.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Assignment of dataset rows to clients and to the server's proxy set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub proxy_indices: Vec<usize>,
    pub alpha: f64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Checks disjointness, non-empty clients and bounds against `n` rows.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let all = self.client_indices.iter().flatten().chain(&self.proxy_indices);
        for &i in all {
            if i >= n {
                return Err(Error::invalid(format!("index {i} out of range for {n} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("index {i} assigned twice")));
            }
        }
        if let Some(m) = self.client_indices.iter().position(|c| c.is_empty()) {
            return Err(Error::invalid(format!("client {m} has no samples")));
        }
        Ok(())
    }
}

/// Target size and class imbalance of the server proxy set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    /// Largest class count divided by smallest class count.
    pub degree: f64,
    pub size: usize,
}

/// Per-class counts of a proxy set of `size` over `num_classes` classes whose
/// max/min ratio is `degree`.
///
/// Class `c` gets weight `degree^(-c / (K - 1))`, a geometric profile from
/// the largest class (index 0) down to the smallest. Weights are scaled to
/// `size` and rounded by largest remainder; ties go to the lower class
/// index.
pub fn imbalance_counts(size: usize, num_classes: usize, degree: f64) -> Result<Vec<usize>> {
    if !(degree >= 1.0 && degree.is_finite()) {
        return Err(Error::config(format!("imbalance degree must be >= 1, got {degree}")));
    }
    if num_classes == 0 || size < num_classes {
        return Err(Error::config(format!(
            "proxy size {size} cannot cover {num_classes} classes"
        )));
    }
    let k = num_classes;
    let weights: Vec<f64> = (0..k)
        .map(|c| if k == 1 { 1.0 } else { degree.powf(-(c as f64) / (k - 1) as f64) })
        .collect();
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| size as f64 * w / total).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = size - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::config(format!(
            "imbalance degree {degree} is not achievable with {size} samples over {k} classes"
        )));
    }
    Ok(counts)
}

/// Draws the server proxy set with the class profile of
/// [`imbalance_counts`]. Returns `(proxy, remainder)`, both ascending.
pub fn sample_proxy(data: &Dataset, spec: ImbalanceSpec, rng: &mut SeededRng) -> Result<(Vec<usize>, Vec<usize>)> {
    let counts = imbalance_counts(spec.size, data.num_classes(), spec.degree)?;
    let by_class = data.indices_by_class();
    let mut proxy = Vec::with_capacity(spec.size);
    for (c, (&want, pool)) in counts.iter().zip(&by_class).enumerate() {
        if want > pool.len() {
            return Err(Error::config(format!(
                "proxy needs {want} samples of class {c} but only {} exist",
                pool.len()
            )));
        }
        // Per-class streams and prefix sampling make smaller proxy sets
        // subsets of larger ones under the same seed.
        let picks = rng.derive(&[c as u64]).sample_without_replacement(pool.len(), want);
        proxy.extend(picks.into_iter().map(|j| pool[j]));
    }
    proxy.sort_unstable();
    let mut in_proxy = vec![false; data.len()];
    for &i in &proxy {
        in_proxy[i] = true;
    }
    let rest = (0..data.len()).filter(|&i| !in_proxy[i]).collect();
    Ok((proxy, rest))
}

/// One draw from a symmetric Dirichlet(alpha) over `k` categories.
///
/// Gamma variates are combined in log space so that tiny concentrations
/// (where every `Gamma(alpha)` draw underflows) still give a valid
/// distribution.
fn dirichlet(alpha: f64, k: usize, rng: &mut SeededRng) -> Vec<f64> {
    let logs: Vec<f64> = if alpha >= 1.0 {
        let g = Gamma::new(alpha, 1.0).expect("alpha checked positive");
        (0..k).map(|_| g.sample(rng).ln()).collect()
    } else {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let g = Gamma::new(alpha + 1.0, 1.0).expect("alpha checked positive");
        (0..k)
            .map(|_| {
                let u = 1.0 - rng.uniform();
                g.sample(rng).ln() + u.ln() / alpha
            })
            .collect()
    };
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Dirichlet partition of the whole dataset.
pub fn dirichlet_partition(data: &Dataset, clients: usize, alpha: f64, rng: &mut SeededRng) -> Result<Partition> {
    let pool: Vec<usize> = (0..data.len()).collect();
    dirichlet_partition_pool(data, &pool, clients, alpha, rng)
}

/// Splits the rows in `pool` across `clients`.
///
/// For every class, proportions are drawn from a symmetric Dirichlet(alpha)
/// and each sample of that class goes to a client drawn from those
/// proportions. Each sample's draw comes from its own stream keyed by its row,
/// so removing rows from the pool (a bigger proxy set, say) leaves every other
/// sample with the same client. Clients left empty each take one sample (the
/// last one) from the currently largest client, lowest index on ties.
pub fn dirichlet_partition_pool(
    data: &Dataset,
    pool: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if pool.len() < clients {
        return Err(Error::config(format!(
            "{} samples cannot give each of {clients} clients a sample",
            pool.len()
        )));
    }

    let mut by_class = vec![Vec::new(); data.num_classes()];
    for &i in pool {
        by_class[data.labels()[i]].push(i);
    }
    let proportions: Vec<Vec<f64>> = (0..data.num_classes()).map(|_| dirichlet(alpha, clients, rng)).collect();
    let mut assigned = vec![Vec::new(); clients];
    for (q, members) in proportions.iter().zip(&by_class) {
        for &i in members {
            let u = rng.derive(&[i as u64]).uniform();
            assigned[categorical(q, u)].push(i);
        }
    }

    while let Some(empty) = assigned.iter().position(|c| c.is_empty()) {
        let (largest, _) = assigned
            .iter()
            .enumerate()
            .fold((0, 0), |best, (m, c)| if c.len() > best.1 { (m, c.len()) } else { best });
        let moved = assigned[largest].pop().expect("largest client holds >= 2 samples");
        assigned[empty].push(moved);
    }
    for c in &mut assigned {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices: assigned,
        proxy_indices: Vec::new(),
        alpha,
    })
}

/// Per-client class histograms.
pub fn class_counts_of(data: &Dataset, partition: &Partition) -> Vec<Vec<usize>> {
    partition
        .client_indices
        .iter()
        .map(|idx| {
            let mut h = vec![0; data.num_classes()];
            for &i in idx {
                h[data.labels()[i]] += 1;
            }
            h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn balanced(classes: usize, per_class: usize) -> Dataset {
        let n = classes * per_class;
        let labels = (0..n).map(|i| i / per_class).collect();
        Dataset::new(Array2::zeros((n, 1)), labels, classes).unwrap()
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let d = balanced(4, 2000);
        let p = dirichlet_partition(&d, 4, 1e6, &mut SeededRng::new(17, 0)).unwrap();
        for h in class_counts_of(&d, &p) {
            let total: usize = h.iter().sum();
            for c in h {
                let share = c as f64 / total as f64;
                assert!((share - 0.25).abs() < 0.05, "share {share}");
            }
        }
    }

    #[test]
    fn tiny_alpha_concentrates_classes() {
        let d = balanced(10, 100);
        let p = dirichlet_partition(&d, 10, 0.01, &mut SeededRng::new(23, 0)).unwrap();
        let mut distinct: Vec<usize> = class_counts_of(&d, &p)
            .iter()
            .map(|h| h.iter().filter(|&&c| c > 0).count())
            .collect();
        distinct.sort_unstable();
        assert!(distinct[distinct.len() / 2] <= 2, "{distinct:?}");
        p.validate(d.len()).unwrap();
    }

    #[test]
    fn single_client_gets_everything() {
        let d = balanced(3, 5);
        let p = dirichlet_partition(&d, 1, 0.5, &mut SeededRng::new(1, 0)).unwrap();
        assert_eq!(p.client_indices, vec![(0..15).collect::<Vec<_>>()]);
    }

    #[test]
    fn too_few_samples_is_a_config_error() {
        let d = balanced(2, 2);
        assert!(matches!(dirichlet_partition(&d, 5, 1.0, &mut SeededRng::new(1, 0)), Err(Error::Config(_))));
        assert!(dirichlet_partition(&d, 2, 0.0, &mut SeededRng::new(1, 0)).is_err());
    }

    #[test]
    fn imbalance_examples() {
        let c = imbalance_counts(128, 10, 1.0).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 128);
        let (mx, mn) = (*c.iter().max().unwrap(), *c.iter().min().unwrap());
        assert_eq!((mx, mn), (13, 12));
        assert_eq!(c, vec![13, 13, 13, 13, 13, 13, 13, 13, 12, 12]);

        assert_eq!(imbalance_counts(100, 10, 1.0).unwrap(), vec![10; 10]);
        assert_eq!(imbalance_counts(60, 2, 5.0).unwrap(), vec![50, 10]);
        assert!(imbalance_counts(5, 10, 1.0).is_err());
        assert!(imbalance_counts(12, 10, 100.0).is_err());
        assert!(imbalance_counts(20, 2, 0.5).is_err());
    }

    #[test]
    fn proxy_sampling_splits_dataset() {
        let d = balanced(10, 30);
        let (proxy, rest) = sample_proxy(&d, ImbalanceSpec { degree: 1.0, size: 100 }, &mut SeededRng::new(2, 0)).unwrap();
        assert_eq!(proxy.len(), 100);
        assert_eq!(rest.len(), 200);
        assert_eq!(d.subset(&proxy).class_counts(), vec![10; 10]);
        let mut all = [proxy, rest].concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn larger_proxy_contains_smaller() {
        let d = balanced(5, 40);
        let pick = |size| sample_proxy(&d, ImbalanceSpec { size, degree: 1.0 }, &mut SeededRng::new(4, 0)).unwrap().0;
        let (small, large) = (pick(10), pick(50));
        assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn shrinking_the_pool_keeps_remaining_assignments() {
        let d = balanced(4, 50);
        let full: Vec<usize> = (0..d.len()).collect();
        let part: Vec<usize> = full.iter().copied().filter(|i| i % 7 != 0).collect();
        let a = dirichlet_partition_pool(&d, &full, 6, 0.5, &mut SeededRng::new(9, 1)).unwrap();
        let b = dirichlet_partition_pool(&d, &part, 6, 0.5, &mut SeededRng::new(9, 1)).unwrap();
        let owner = |p: &Partition, i: usize| p.client_indices.iter().position(|c| c.contains(&i));
        let moved = part.iter().filter(|&&i| owner(&a, i) != owner(&b, i)).count();
        // Only the empty-client repair may move anything.
        assert!(moved <= 6, "{moved} samples changed client");
    }

    #[test]
    fn proxy_needs_enough_class_samples() {
        let d = balanced(2, 20);
        let r = sample_proxy(&d, ImbalanceSpec { degree: 5.0, size: 60 }, &mut SeededRng::new(2, 0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn partition_covers_pool_and_preserves_class_marginals(
            seed in 0u64..1000,
            clients in 1usize..12,
            alpha in prop_oneof![Just(0.01), Just(0.1), Just(1.0), Just(100.0)],
            proxy_size in 10usize..40,
        ) {
            let d = balanced(5, 30);
            let mut rng = SeededRng::new(seed, 0);
            let (proxy, rest) = sample_proxy(&d, ImbalanceSpec { degree: 1.0, size: proxy_size }, &mut rng).unwrap();
            let mut p = dirichlet_partition_pool(&d, &rest, clients, alpha, &mut rng).unwrap();
            p.proxy_indices = proxy;
            p.validate(d.len()).unwrap();
            let covered: usize = p.client_indices.iter().map(Vec::len).sum::<usize>() + p.proxy_indices.len();
            prop_assert_eq!(covered, d.len());

            let mut summed = vec![0usize; 5];
            for h in class_counts_of(&d, &p) {
                for (s, c) in summed.iter_mut().zip(h) { *s += c; }
            }
            let proxy_counts = d.subset(&p.proxy_indices).class_counts();
            for c in 0..5 {
                prop_assert_eq!(summed[c] + proxy_counts[c], 30);
            }
        }

        #[test]
        fn realized_imbalance_tracks_degree(size in 20usize..300, degree in 1.0f64..8.0, k in 2usize..8) {
            if let Ok(c) = imbalance_counts(size, k, degree) {
                prop_assert_eq!(c.iter().sum::<usize>(), size);
                let mx = *c.iter().max().unwrap() as f64;
                let mn = *c.iter().min().unwrap() as f64;
                // Rounding moves each count by < 1, so the ratio differs by at
                // most (degree + 1) / min from the target.
                prop_assert!((mx / mn - degree).abs() <= (degree + 1.0) / mn + 1e-9);
                if mn >= degree + 1.0 {
                    prop_assert!((mx / mn - degree).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn partition_is_deterministic(seed in 0u64..100) {
            let d = balanced(3, 20);
            let a = dirichlet_partition(&d, 4, 0.3, &mut SeededRng::new(seed, 1)).unwrap();
            let b = dirichlet_partition(&d, 4, 0.3, &mut SeededRng::new(seed, 1)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
