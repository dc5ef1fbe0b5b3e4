//! Self-checks run by `smartfl check`.
//!
//! Every check compares the implementation against an independent oracle
//! (exhaustive grids, finite differences, a hand-rolled training loop) or an
//! exact invariant. Sizes are chosen so the whole suite finishes in seconds
//! even in an unoptimized build.

use std::time::Instant;

use ndarray::Array2;

use crate::aggregation::{coord_median, fedavg_weights, krum, smartfl, trimmed_mean, AggregationConfig, Strategy};
use crate::client::{local_update, ClientUpdate};
use crate::data::{generate_synthetic, Dataset};
use crate::experiment::{prepare, run_prepared, write_csv, ExperimentConfig};
use crate::math::{coefficient_gradient, convex_combine, project_simplex, ParamVector};
use crate::model::{full_batch, softmax_rows, Activation, Batch, ModelSpec};
use crate::rng::{streams, SeededRng};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<String, String>;

pub const CHECKS: [(&str, CheckFn); 8] = [
    ("simplex_projection_grid", simplex_projection_grid),
    ("gradients_finite_difference", gradients_finite_difference),
    ("smartfl_descent_30_rounds", smartfl_descent),
    ("convex_hull_membership", convex_hull_membership),
    ("krum_returns_vertex", krum_returns_vertex),
    ("robust_benign_range", robust_benign_range),
    ("fedavg_single_client", fedavg_single_client),
    ("run_determinism", run_determinism),
];

pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name,
                passed,
                detail: format!("{detail} [{:.2}s]", start.elapsed().as_secs_f64()),
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Grid search over the 1- and 2-simplex for the closest point.
fn grid_projection(v: &[f64], steps: usize) -> Vec<f64> {
    let h = 1.0 / steps as f64;
    let mut best = (f64::INFINITY, Vec::new());
    match v.len() {
        2 => {
            for i in 0..=steps {
                let p = [i as f64 * h, 1.0 - i as f64 * h];
                let d = sq_dist(&p, v);
                if d < best.0 {
                    best = (d, p.to_vec());
                }
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let p = [i as f64 * h, j as f64 * h, 1.0 - (i + j) as f64 * h];
                    let d = sq_dist(&p, v);
                    if d < best.0 {
                        best = (d, p.to_vec());
                    }
                }
            }
        }
        _ => unreachable!("grid oracle covers two and three coordinates"),
    }
    best.1
}

fn simplex_projection_grid() -> Result<String, String> {
    let mut rng = SeededRng::new(101, 0);
    let mut n = 0;
    for (dim, steps, count) in [(2, 10_000, 100), (3, 400, 60)] {
        let h = 1.0 / steps as f64;
        for _ in 0..count {
            let v: Vec<f64> = (0..dim).map(|_| 4.0 * rng.uniform() - 2.0).collect();
            let p = project_simplex(&v).map_err(|e| e.to_string())?;
            let g = grid_projection(&v, steps);
            // The projection is optimal, so it can only beat the grid; and the
            // grid minimizer is within one cell of it.
            ensure(sq_dist(p.as_slice(), &v) <= sq_dist(&g, &v) + 1e-12, || format!("{v:?}: grid beats projection"))?;
            ensure(sq_dist(p.as_slice(), &g).sqrt() <= 2.0 * h, || format!("{v:?}: {p:?} far from grid {g:?}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} instances"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = sq_dist(a, b).sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.uniform())
}

fn gradients_finite_difference() -> Result<String, String> {
    let mut rng = SeededRng::new(202, 0);
    let mut worst: f64 = 0.0;
    let (mut models, mut coeffs) = (0, 0);
    for i in 0..120 {
        let d = 2 + rng.below(4);
        let k = 2 + rng.below(3);
        let spec = if i % 2 == 0 { ModelSpec::logistic(d, k) } else { ModelSpec::mlp(d, 3, k, Activation::Tanh) };
        let w = spec.init_params(&mut rng.derive(&[i]));
        let n = 1 + rng.below(5);
        let x = random_matrix(n, d, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let hard = Batch::labeled(x.clone(), labels, k).map_err(|e| e.to_string())?;
        let mut t = random_matrix(n, k, &mut rng);
        softmax_rows(&mut t);
        let soft = Batch::soft(x, t).map_err(|e| e.to_string())?;
        let temp = 0.5 + 2.0 * rng.uniform();

        let (_, g) = spec.ce_loss_and_grad(&w, &hard).map_err(|e| e.to_string())?;
        let fd = central_difference(|p| spec.ce_loss(p, &hard).expect("valid batch"), &w, 1e-5);
        let e1 = rel_err(&g, &fd);
        let (_, g) = spec.kl_loss_and_grad(&w, &soft, temp).map_err(|e| e.to_string())?;
        let fd = central_difference(|p| spec.kl_loss(p, &soft, temp).expect("valid batch"), &w, 1e-5);
        let e2 = rel_err(&g, &fd);
        ensure(e1 < 1e-4 && e2 < 1e-4, || format!("model instance {i}: rel. err {e1:.2e} / {e2:.2e}"))?;
        worst = worst.max(e1).max(e2);
        models += 1;

        // d/dp of L(sum_m p_m w_m), with p free (no projection).
        let m = 2 + rng.below(3);
        let clients: Vec<ParamVector> = (0..m).map(|j| spec.init_params(&mut rng.derive(&[i, 1000 + j as u64]))).collect();
        let p: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let combine = |p: &[f64]| {
            let mut w = vec![0.0; spec.param_count()];
            for (c, &pm) in clients.iter().zip(p) {
                for (a, b) in w.iter_mut().zip(c.iter()) {
                    *a += pm * b;
                }
            }
            w
        };
        let (_, wg) = spec.ce_loss_and_grad(&combine(&p), &hard).map_err(|e| e.to_string())?;
        let pg = coefficient_gradient(&clients, &wg).map_err(|e| e.to_string())?;
        let fd = central_difference(|q| spec.ce_loss(&combine(q), &hard).expect("valid batch"), &p, 1e-5);
        let e3 = rel_err(&pg, &fd);
        ensure(e3 < 1e-4, || format!("coefficient instance {i}: rel. err {e3:.2e}"))?;
        worst = worst.max(e3);
        coeffs += 1;
    }
    Ok(format!("{models} model + {coeffs} coefficient instances, worst rel. err {worst:.1e}"))
}

/// A small non-IID federation trained by hand so every aggregation step can be
/// inspected.
struct Federation {
    spec: ModelSpec,
    shards: Vec<Dataset>,
    proxy: Dataset,
}

fn federation() -> Result<Federation, String> {
    let data = generate_synthetic(4, 40, 6, 3.0, &mut SeededRng::new(303, 0)).map_err(|e| e.to_string())?;
    let proxy_rows: Vec<usize> = (0..data.len()).filter(|i| i % 10 == 0).collect();
    let rest: Vec<usize> = (0..data.len()).filter(|i| i % 10 != 0).collect();
    let part = crate::data::dirichlet_partition_pool(&data, &rest, 6, 0.3, &mut SeededRng::new(303, 1)).map_err(|e| e.to_string())?;
    Ok(Federation {
        spec: ModelSpec::mlp(6, 5, 4, Activation::Tanh),
        shards: part.client_indices.iter().map(|idx| data.subset(idx)).collect(),
        proxy: data.subset(&proxy_rows),
    })
}

/// Runs `rounds` rounds of SmartFL and hands each round's inputs and result to
/// `inspect`.
fn smartfl_rounds(
    rounds: usize,
    mut inspect: impl FnMut(usize, &[ClientUpdate], &crate::aggregation::AggregationResult) -> Result<(), String>,
) -> Result<(), String> {
    let fed = federation()?;
    let master = SeededRng::new(404, 0);
    let mut global = fed.spec.init_params(&mut master.derive(&[streams::INIT]));
    let local = crate::client::LocalConfig {
        lr: 1e-2,
        ..Default::default()
    };
    let agg = AggregationConfig {
        server_epochs: 5,
        ..AggregationConfig::with_strategy(Strategy::Smartfl)
    };
    for t in 1..=rounds {
        let mut sampled = master.derive(&[streams::SAMPLING, t as u64]).sample_without_replacement(fed.shards.len(), 3);
        sampled.sort_unstable();
        let updates = sampled
            .iter()
            .map(|&m| local_update(&fed.spec, m, &global, &fed.shards[m], &local, &mut master.derive(&[streams::LOCAL, t as u64, m as u64])))
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let r = smartfl(&updates, &fed.proxy, &fed.spec, &agg, &mut master.derive(&[streams::SERVER, t as u64])).map_err(|e| e.to_string())?;
        inspect(t, &updates, &r)?;
        global = r.global;
    }
    Ok(())
}

fn smartfl_descent() -> Result<String, String> {
    let fed = federation()?;
    let full = full_batch(&fed.proxy);
    let loss = |w: &[f64]| fed.spec.ce_loss(w, &full).expect("labeled proxy");
    let mut rounds = 0;
    smartfl_rounds(30, |t, updates, r| {
        let after = loss(&r.global);
        let init = loss(&convex_combine(updates, &fedavg_weights(updates).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
        let best_vertex = updates.iter().map(|u| loss(&u.params)).fold(f64::INFINITY, f64::min);
        ensure(after <= init.min(best_vertex), || format!("round {t}: {after} > min({init}, {best_vertex})"))?;
        rounds += 1;
        Ok(())
    })?;
    Ok(format!("{rounds} rounds"))
}

fn convex_hull_membership() -> Result<String, String> {
    let mut rounds = 0;
    smartfl_rounds(30, |t, updates, r| {
        let p = r.coefficients.as_ref().ok_or("no coefficients")?;
        let sum: f64 = p.as_slice().iter().sum();
        ensure(p.as_slice().iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-9, || format!("round {t}: p = {p:?}"))?;
        let w = convex_combine(updates, p).map_err(|e| e.to_string())?;
        ensure(sq_dist(&w, &r.global).sqrt() <= 1e-9, || format!("round {t}: global != combine(p)"))?;
        for j in 0..r.global.len() {
            let lo = updates.iter().map(|u| u.params[j]).fold(f64::INFINITY, f64::min);
            let hi = updates.iter().map(|u| u.params[j]).fold(f64::NEG_INFINITY, f64::max);
            ensure(r.global[j] >= lo && r.global[j] <= hi, || format!("round {t}: coordinate {j} outside [{lo}, {hi}]"))?;
        }
        rounds += 1;
        Ok(())
    })?;
    Ok(format!("{rounds} rounds"))
}

fn random_updates(rng: &mut SeededRng, n: usize, d: usize, scale: f64) -> Vec<ClientUpdate> {
    (0..n)
        .map(|i| ClientUpdate {
            client_id: i,
            params: ParamVector::new((0..d).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect()),
            sample_count: 1 + rng.below(50),
        })
        .collect()
}

fn krum_returns_vertex() -> Result<String, String> {
    let mut rng = SeededRng::new(505, 0);
    for i in 0..200 {
        let f = rng.below(3);
        let n = 2 * f + 3 + rng.below(4);
        let d = 1 + rng.below(8);
        let clients = random_updates(&mut rng, n, d, 3.0);
        let r = krum(&clients, f).map_err(|e| e.to_string())?;
        let p = r.coefficients.ok_or("krum without coefficients")?;
        let chosen = p.as_slice().iter().position(|&x| x == 1.0).ok_or_else(|| format!("instance {i}: {p:?} not one-hot"))?;
        ensure(r.global == clients[chosen].params, || format!("instance {i}: global is not client {chosen}"))?;
    }
    Ok("200 instances".into())
}

fn robust_benign_range() -> Result<String, String> {
    let mut rng = SeededRng::new(606, 0);
    for i in 0..200 {
        let benign = 3 + rng.below(8);
        // Median needs a strict benign majority; trimming must reach every outlier.
        let bad = rng.below(benign.div_ceil(2).min(4));
        let d = 1 + rng.below(6);
        let mut clients = random_updates(&mut rng, benign, d, 1.0);
        for b in 0..bad {
            let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
            clients.push(ClientUpdate {
                client_id: benign + b,
                params: ParamVector::new(vec![sign * 1e6; d]),
                sample_count: 10,
            });
        }
        rng.shuffle(&mut clients);
        let n = clients.len();
        let beta = (bad as f64 + 0.5) / n as f64;
        let outputs = [
            ("median", coord_median(&clients).map_err(|e| e.to_string())?),
            ("trimmed_mean", trimmed_mean(&clients, beta.min(0.49)).map_err(|e| e.to_string())?),
        ];
        for (name, r) in outputs {
            if name == "trimmed_mean" && ((beta.min(0.49) * n as f64).floor() as usize) < bad {
                continue;
            }
            for j in 0..d {
                let vals = clients.iter().filter(|c| c.params[j].abs() < 1e5).map(|c| c.params[j]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                ensure(r.global[j] >= lo && r.global[j] <= hi, || format!("instance {i}: {name} coordinate {j} = {} outside [{lo}, {hi}]", r.global[j]))?;
            }
        }
    }
    Ok("200 instances, outliers at +-1e6".into())
}

fn tiny_config(text: &str) -> Result<ExperimentConfig, String> {
    let base = "rounds = 5\nclients = 6\nparticipation = 0.5\nalpha = 0.3\nseed = 7\n\
                [data]\nsource = \"synthetic\"\nnum_classes = 3\ntrain_per_class = 40\ntest_per_class = 20\ninput_dim = 6\n\
                [proxy]\nsize = 15\n[local]\nlr = 0.01\n";
    let mut table: toml::Table = base.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let extra: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    for (k, v) in extra {
        match (table.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
            (_, v) => {
                table.insert(k, v);
            }
        }
    }
    ExperimentConfig::from_toml_str(&toml::to_string(&table).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn fedavg_single_client() -> Result<String, String> {
    let cfg = tiny_config("clients = 1\nparticipation = 1.0\n[aggregation]\nstrategy = \"fedavg\"\n")?;
    let env = prepare(&cfg).map_err(|e| e.to_string())?;
    let out = run_prepared(&cfg, &env).map_err(|e| e.to_string())?;

    // Centralized reference: the same client trained for the same epochs.
    let master = SeededRng::new(cfg.seed, 0);
    let mut w = env.init.clone();
    for t in 1..=cfg.rounds {
        let mut rng = master.derive(&[streams::LOCAL, t as u64, 0]);
        w = local_update(&env.spec, 0, &w, &env.shards[0], &cfg.local, &mut rng).map_err(|e| e.to_string())?.params;
    }
    let same = out.global.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "federated and centralized parameters differ".into())?;
    Ok(format!("{} parameters bit-identical after {} rounds", w.len(), cfg.rounds))
}

fn run_determinism() -> Result<String, String> {
    let mut sizes = Vec::new();
    for strategy in ["smartfl", "smartfl_u", "median"] {
        let cfg = tiny_config(&format!("[aggregation]\nstrategy = \"{strategy}\"\nserver_epochs = 3\n[attack]\nkind = \"omniscient\"\nrate = 0.34\n"))?;
        let csv = |cfg: &ExperimentConfig| -> Result<Vec<u8>, String> {
            let out = crate::experiment::run(cfg).map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            write_csv(&out.records, &mut buf).map_err(|e| e.to_string())?;
            Ok(buf)
        };
        let a = csv(&cfg)?;
        let b = csv(&cfg)?;
        ensure(a == b, || format!("{strategy}: CSV bytes differ between identical runs"))?;
        sizes.push(a.len());
    }
    Ok(format!("CSV byte-identical for 3 strategies ({sizes:?} bytes)"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_oracle_is_sane() {
        let g = grid_projection(&[0.2, 0.3, 0.5], 10);
        assert!(sq_dist(&g, &[0.2, 0.3, 0.5]) < 1e-20);
        let g = grid_projection(&[2.0, 0.0], 100);
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn all_checks_pass() {
        for o in run_all() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}
