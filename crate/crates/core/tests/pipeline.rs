use std::collections::HashSet;

use smartfl::aggregation::fedavg;
use smartfl::experiment::{prepare, run, run_prepared, write_csv, ExperimentConfig};

fn config(extra: &str) -> ExperimentConfig {
    let base = r#"
        rounds = 6
        clients = 10
        participation = 0.3
        alpha = 0.1
        seed = 5
        [data]
        source = "synthetic"
        num_classes = 4
        train_per_class = 50
        test_per_class = 20
        input_dim = 6
        [proxy]
        size = 16
        [local]
        lr = 0.03
    "#;
    ExperimentConfig::from_toml_str(&format!("{base}\n{extra}")).unwrap()
}

fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&run(cfg).unwrap().records, &mut buf).unwrap();
    buf
}

#[test]
fn untrained_model_is_near_chance() {
    let mut cfg = config("");
    cfg.rounds = 0;
    let out = run(&cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    let acc = out.records[0].test_acc.unwrap();
    assert!((acc - 0.25).abs() < 0.15, "{acc}");
}

#[test]
fn selection_frequency_matches_participation() {
    let mut cfg = config("[aggregation]\nstrategy = \"fedavg\"");
    cfg.rounds = 400;
    cfg.eval_every = 400;
    cfg.local.epochs = 1;
    let out = run(&cfg).unwrap();
    let k = cfg.clients_per_round();
    let mut counts = vec![0usize; cfg.clients];
    for r in &out.records[1..] {
        assert_eq!(r.client_ids.len(), k);
        assert_eq!(r.client_ids.iter().collect::<HashSet<_>>().len(), k, "sampled with replacement");
        for &id in &r.client_ids {
            counts[id] += 1;
        }
    }
    let q = k as f64 / cfg.clients as f64;
    let t = cfg.rounds as f64;
    let sigma = (t * q * (1.0 - q)).sqrt();
    for (m, &c) in counts.iter().enumerate() {
        assert!((c as f64 - t * q).abs() <= 3.0 * sigma, "client {m}: {c} of {t} rounds");
    }
}

#[test]
fn malicious_flags_match_the_malicious_set() {
    for kind in ["label_flip", "omniscient"] {
        let cfg = config(&format!("[aggregation]\nstrategy = \"smartfl\"\n[attack]\nkind = \"{kind}\"\nrate = 0.3"));
        let out = run(&cfg).unwrap();
        assert_eq!(out.malicious_ids.len(), 3);
        let bad: HashSet<_> = out.malicious_ids.iter().copied().collect();
        for r in &out.records {
            let want: Vec<bool> = r.client_ids.iter().map(|id| bad.contains(id)).collect();
            assert_eq!(r.malicious, want, "round {}", r.round);
        }
    }
}

#[test]
fn no_attack_means_no_flags() {
    let out = run(&config("")).unwrap();
    assert!(out.malicious_ids.is_empty());
    assert!(out.records.iter().all(|r| r.malicious.iter().all(|&m| !m)));
}

#[test]
fn fedavg_is_order_invariant() {
    let cfg = config("[aggregation]\nstrategy = \"fedavg\"");
    let env = prepare(&cfg).unwrap();
    let global = env.init.clone();
    let mut updates: Vec<_> = (0..5)
        .map(|m| {
            smartfl::client::local_update(&env.spec, m, &global, &env.shards[m], &cfg.local, &mut smartfl::SeededRng::new(1, m as u64))
                .unwrap()
        })
        .collect();
    let forward = fedavg(&updates).unwrap().global;
    updates.reverse();
    updates.swap(1, 3);
    let shuffled = fedavg(&updates).unwrap().global;
    for (a, b) in forward.iter().zip(shuffled.iter()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = config("[aggregation]\nstrategy = \"smartfl\"\n[attack]\nkind = \"omniscient\"\nrate = 0.2");
    let on = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| csv_bytes(&cfg))
    };
    assert_eq!(on(1), on(4));
}

#[test]
fn strategy_does_not_change_shared_setup() {
    let a = prepare(&config("[aggregation]\nstrategy = \"fedavg\"")).unwrap();
    let b = prepare(&config("[aggregation]\nstrategy = \"median\"")).unwrap();
    assert_eq!(a.init, b.init);
    assert_eq!(a.partition, b.partition);
    assert_eq!(a.proxy, b.proxy);
}

#[test]
fn prepared_and_direct_runs_agree() {
    let cfg = config("[aggregation]\nstrategy = \"abavg\"");
    let env = prepare(&cfg).unwrap();
    assert_eq!(run_prepared(&cfg, &env).unwrap().records.iter().map(|r| r.test_acc).collect::<Vec<_>>(), run(&cfg).unwrap().records.iter().map(|r| r.test_acc).collect::<Vec<_>>());
}

#[test]
fn omniscient_takeover_round_is_a_warning() {
    // Every client malicious except one; with two sampled per round some
    // rounds contain no benign client and must be skipped, not fail.
    let mut cfg = config("[aggregation]\nstrategy = \"fedavg\"\n[attack]\nkind = \"omniscient\"\nrate = 0.9");
    cfg.rounds = 30;
    cfg.participation = 0.2;
    let out = run(&cfg).unwrap();
    let warned: Vec<_> = out.records.iter().filter(|r| r.warning.is_some()).collect();
    assert!(!warned.is_empty());
    for r in warned {
        assert!(r.malicious.iter().all(|&m| m));
        assert!(r.coefficients.is_none());
    }
}
