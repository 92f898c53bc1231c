// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;

use super::*;
use crate::dpselect::SelectionRule;
use crate::fedcore;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::benchmark();
    for c in &mut cfg.clients {
        c.spec.n_patients = 60;
    }
    cfg.algorithms = vec![Algorithm::FedAvg, Algorithm::FedBN];
    cfg.seeds = vec![0, 1];
    cfg.model = ModelConfig {
        vocab_size: 200,
        dim: 8,
        max_len: 8,
        ..ModelConfig::default()
    };
    cfg.training.max_rounds = 3;
    cfg.training.patience = 2;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Report files minus their timestamp line.
fn reports(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for name in ["sweep.csv", "sweep.json", "table1.csv", "selection.json", "table1.txt"] {
        let mut bytes = read(&out.join(name));
        if name.ends_with(".txt") {
            let cut = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
            bytes.drain(..cut);
        }
        files.insert(name.to_owned(), bytes);
    }
    files
}

#[test]
fn subsets_follow_binomial_counts() {
    let subjects: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let subsets = subject_subsets(&subjects);
    assert_eq!(subsets.len(), 15);
    for (size, expected) in [(1, 4), (2, 6), (3, 4), (4, 1)] {
        assert_eq!(subsets.iter().filter(|s| s.len() == size).count(), expected);
    }
    assert_eq!(subsets[0], vec!["a"]);
    assert_eq!(subsets.last().unwrap(), &subjects);

    let cfg = tiny();
    let cells = enumerate_cells(&cfg);
    assert_eq!(cells.len(), cfg.seeds.len() * (1 + 15 * cfg.algorithms.len()));
    assert_eq!(cells.iter().filter(|c| c.size() == 2 && c.seed == 0).count(), 4 * cfg.algorithms.len());
}

#[test]
fn config_validation_and_round_trip() {
    let cfg = ExperimentConfig::benchmark();
    assert!(cfg.validate().is_ok());
    let json = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds": [4]}"#).unwrap();
    assert_eq!(partial.seeds, vec![4]);
    assert_eq!(partial.clients.len(), 5);

    assert!(ExperimentConfig { host: "nobody".into(), ..cfg.clone() }.validate().is_err());
    assert!(ExperimentConfig { seeds: vec![], ..cfg.clone() }.validate().is_err());
    assert!(ExperimentConfig { k_values: vec![6], ..cfg.clone() }.validate().is_err());
    assert!(ExperimentConfig { algorithms: vec![], ..cfg.clone() }.validate().is_err());
    let mut dup = cfg.clone();
    dup.clients[1].spec.client_id = "host".into();
    assert!(dup.validate().is_err());
    let err = ExperimentConfig { seeds: vec![], ..cfg }.validate().unwrap_err();
    assert!(err.is_config());
}

#[test]
fn generate_writes_every_client_deterministically() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = cmd_generate(&cfg, a.path()).unwrap();
    cmd_generate(&cfg, b.path()).unwrap();
    assert_eq!(files.len(), 5);
    for f in &files {
        assert!(f.patients.exists() && f.dictionary.exists() && f.schema.exists());
        let twin = b.path().join("data").join(f.patients.file_name().unwrap());
        assert_eq!(read(&f.patients), read(&twin));
    }
    let loaded = load_datasets(&cfg, a.path()).unwrap();
    assert_eq!(loaded, generate_datasets(&cfg).unwrap());
    for (ds, entry) in loaded.iter().zip(&cfg.clients) {
        assert_eq!(ds.meta.as_ref().unwrap().spec.shift, entry.spec.shift);
        assert_eq!(ds.schema_profile, entry.schema);
    }
}

#[test]
fn prepare_shares_one_vocabulary_and_resplits_by_seed() {
    let cfg = tiny();
    let data = generate_datasets(&cfg).unwrap();
    let p0 = prepare(&cfg, &data, 0).unwrap();
    let p1 = prepare(&cfg, &data, 1).unwrap();
    assert_eq!(p0.clients.len(), 5);
    for c in &p0.clients {
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (48, 6, 6));
    }
    // Renamed schemas contribute their own tokens.
    assert!(p0.vocab.id("lab") != crate::encoder::UNK);
    assert!(p0.vocab.id("labevents") != crate::encoder::UNK);
    let host0 = &p0.client("host").unwrap().test;
    let host1 = &p1.client("host").unwrap().test;
    assert_ne!(host0, host1);
    let again = prepare(&cfg, &data, 0).unwrap();
    assert_eq!(again.client("host").unwrap().train, p0.client("host").unwrap().train);
}

#[test]
fn sweep_is_deterministic_resumable_and_consistent() {
    let cfg = tiny();
    let data = generate_datasets(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sweep = run_sweep(&cfg, &data, out).unwrap();
    assert!(sweep.failed.is_empty());
    assert_eq!(sweep.cells.len(), enumerate_cells(&cfg).len());

    // Single rows are exactly host-only training.
    for &seed in &cfg.seeds {
        let prep = prepare(&cfg, &data, seed).unwrap();
        let host = prep.client("host").unwrap();
        let single = fedcore::train_single(&prep.model, host, &cfg.run_config(Algorithm::FedAvg, vec!["host".into()], seed)).unwrap();
        let test = fedcore::evaluate(&prep.model, single.best_host_params(), &host.test).unwrap().macro_auroc;
        let row = sweep.get(&CellKey::single(seed, "host")).unwrap();
        assert_eq!(row.test_macro_auroc, test);
        assert_eq!(row.checksum, single.best_host_params().checksum());
    }

    let first = reports(out);
    let table1 = fs::read_to_string(out.join("table1.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(table1.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let avg_col = headers.iter().position(|h| h == "average").unwrap();
    let best_col = headers.iter().position(|h| h == "best").unwrap();
    let subsets_col = headers.iter().position(|h| h == "subsets").unwrap();
    let expected_col = headers.iter().position(|h| h == "expected_subsets").unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let avg: f64 = rec[avg_col].parse().unwrap();
        let best: f64 = rec[best_col].parse().unwrap();
        assert!(best >= avg);
        assert_eq!(rec[subsets_col], rec[expected_col]);
    }

    // Tamper with one cached result and drop another: the tampered value
    // must survive (not rerun) and the dropped one must come back identical.
    let cache = out.join("cells.jsonl");
    let lines: Vec<String> = fs::read_to_string(&cache).unwrap().lines().map(String::from).collect();
    let mut tampered: CellResult = serde_json::from_str(&lines[lines.len() - 1]).unwrap();
    let dropped: CellResult = serde_json::from_str(&lines[lines.len() - 2]).unwrap();
    tampered.test_macro_auroc = 0.123;
    let mut kept: Vec<String> = lines[..lines.len() - 2].to_vec();
    kept.push(serde_json::to_string(&tampered).unwrap());
    fs::write(&cache, kept.join("\n") + "\n").unwrap();
    let resumed = run_sweep(&cfg, &data, out).unwrap();
    assert_eq!(resumed.get(&tampered.key).unwrap().test_macro_auroc, 0.123);
    assert_eq!(resumed.get(&dropped.key).unwrap(), &dropped);

    // A fresh directory, sequential execution: byte-identical reports.
    let dir2 = tempfile::tempdir().unwrap();
    let seq = ExperimentConfig {
        execution: Execution::Sequential,
        ..cfg.clone()
    };
    run_sweep(&seq, &data, dir2.path()).unwrap();
    assert_eq!(reports(dir2.path()), first);

    let read_back = read_sweep(dir2.path()).unwrap();
    assert_eq!(read_back.cells, run_sweep(&cfg, &data, dir2.path()).unwrap().cells);

    let other = ExperimentConfig {
        seeds: vec![9],
        ..cfg.clone()
    };
    assert!(run_sweep(&other, &data, dir2.path()).unwrap_err().is_config());
}

/// Hand-built sweep: joining subject `j` adds exactly `w[j]` to host AUROC.
fn toy_sweep(cfg: &ExperimentConfig, gains: &[(&str, f64)], cosine: &[(&str, f64)]) -> SweepOutput {
    let gain = |id: &str| gains.iter().find(|(g, _)| *g == id).unwrap().1;
    let mut cells = BTreeMap::new();
    let mut push = |key: CellKey, v: f64| {
        cells.insert(
            key.clone(),
            CellResult {
                key,
                test_macro_auroc: v,
                val_macro_auroc: v,
                best_round: 0,
                rounds_run: 1,
                checksum: String::new(),
            },
        );
    };
    for &seed in &cfg.seeds {
        push(CellKey::single(seed, &cfg.host), 0.5);
        for s in subject_subsets(&cfg.subjects()) {
            for (i, &a) in cfg.algorithms.iter().enumerate() {
                let v = 0.5 + s.iter().map(|id| gain(id)).sum::<f64>() * (1.0 + i as f64);
                push(CellKey::fed(seed, &cfg.host, a, s.clone()), v);
            }
        }
    }
    let mut selection = Vec::new();
    for &seed in &cfg.seeds {
        for &metric in &cfg.metrics {
            let candidates = cosine
                .iter()
                .map(|(id, c)| CandidateScore {
                    client_id: id.to_string(),
                    score: match metric {
                        Metric::Cosine => *c,
                        Metric::Euclidean => 2.0 - 2.0 * c,
                        Metric::Kl => (1.0 - c) / 10.0,
                    },
                    sigma: 0.0,
                    m: 48,
                })
                .collect();
            selection.push(SelectionRecord {
                seed,
                host: cfg.host.clone(),
                metric,
                candidates,
            });
        }
    }
    SweepOutput {
        cells,
        selection,
        failed: vec![],
    }
}

fn toy() -> (ExperimentConfig, SweepOutput) {
    let cfg = tiny();
    // Dyadic gains keep every delta exact, so ties stay ties.
    let gains = [("twin", 0.03125), ("mild", 0.0078125), ("far_a", -0.015625), ("far_b", -0.0078125)];
    let cosine = [("twin", 0.9), ("mild", 0.6), ("far_a", -0.4), ("far_b", 0.1)];
    let sweep = toy_sweep(&cfg, &gains, &cosine);
    (cfg, sweep)
}

#[test]
fn engineered_monotone_sweep_correlates_perfectly() {
    let (cfg, sweep) = toy();
    let report = correlate(&cfg, &sweep).unwrap();
    for seed in [Some(0), Some(1), None] {
        let cos = report.averaged(seed, Metric::Cosine).unwrap();
        let euc = report.averaged(seed, Metric::Euclidean).unwrap();
        let kl = report.averaged(seed, Metric::Kl).unwrap();
        for row in [cos, euc, kl] {
            let sign = if row.metric == Metric::Cosine { 1.0 } else { -1.0 };
            assert!((row.overall.spearman.unwrap() - sign).abs() < 1e-12);
            assert!((row.overall.kendall.unwrap() - sign).abs() < 1e-12);
            for (_, c) in &row.by_size {
                assert!((c.spearman.unwrap() - sign).abs() < 1e-12);
            }
        }
    }
    // 4 + 12 + 12 + 4 pairs per algorithm.
    let one = report
        .rows
        .iter()
        .find(|r| r.seed == Some(0) && r.metric == Metric::Cosine && r.algorithm == Some(Algorithm::FedAvg))
        .unwrap();
    assert_eq!(one.overall.pairs, 32);
    assert_eq!(one.by_size.iter().map(|(_, c)| c.pairs).collect::<Vec<_>>(), vec![4, 12, 12, 4]);
}

#[test]
fn algorithm_average_is_mean_of_per_algorithm_correlations() {
    let cfg = tiny();
    let gains = [("twin", 0.03), ("mild", -0.015), ("far_a", 0.01), ("far_b", -0.02)];
    let cosine = [("twin", 0.9), ("mild", 0.6), ("far_a", -0.4), ("far_b", 0.1)];
    let mut sweep = toy_sweep(&cfg, &gains, &cosine);
    // Perturb one algorithm so the per-algorithm correlations differ.
    for (k, r) in sweep.cells.iter_mut() {
        if k.method == Method::Fed(Algorithm::FedBN) && k.subjects.contains(&"far_a".to_string()) {
            r.test_macro_auroc -= 0.05;
        }
    }
    let report = correlate(&cfg, &sweep).unwrap();
    let per: Vec<f64> = cfg
        .algorithms
        .iter()
        .map(|&a| {
            report
                .rows
                .iter()
                .find(|r| r.seed == Some(0) && r.metric == Metric::Cosine && r.algorithm == Some(a))
                .unwrap()
                .overall
                .spearman
                .unwrap()
        })
        .collect();
    assert_ne!(per[0], per[1]);
    let avg = report.averaged(Some(0), Metric::Cosine).unwrap().overall.spearman.unwrap();
    assert_eq!(avg, per.iter().sum::<f64>() / per.len() as f64);
}

#[test]
fn performance_delta_checks_pairing() {
    let (_, sweep) = toy();
    let with = CellKey::fed(0, "host", Algorithm::FedAvg, vec!["twin".into(), "mild".into()]);
    let without = CellKey::fed(0, "host", Algorithm::FedAvg, vec!["mild".into()]);
    let d = performance_delta(&sweep, &with, &without, "twin").unwrap();
    assert_eq!(d, 0.03125);
    let solo = CellKey::fed(0, "host", Algorithm::FedAvg, vec!["twin".into()]);
    assert_eq!(performance_delta(&sweep, &solo, &CellKey::single(0, "host"), "twin").unwrap(), 0.03125);

    assert!(performance_delta(&sweep, &with, &without, "host").is_err());
    assert!(performance_delta(&sweep, &with, &without, "mild").is_err());
    let other_seed = CellKey::fed(1, "host", Algorithm::FedAvg, vec!["mild".into()]);
    assert!(performance_delta(&sweep, &with, &other_seed, "twin").is_err());
    let other_algo = CellKey::fed(0, "host", Algorithm::FedBN, vec!["mild".into()]);
    assert!(performance_delta(&sweep, &with, &other_algo, "twin").is_err());
}

#[test]
fn select_eval_degenerate_cases() {
    let (mut cfg, sweep) = toy();
    cfg.k_values = vec![1, 2, 3, 4, 5];
    let report = select_eval(&cfg, &sweep).unwrap();
    let subsets = subject_subsets(&cfg.subjects());
    for r in &report.rows {
        assert!(r.selected.is_empty() || subsets.contains(&r.selected));
        assert!(r.best >= r.average);
        if r.k == 5 {
            assert_eq!(r.selected_auroc, r.all_clients_auroc);
            assert!(r.underline);
        }
        if r.k == 1 {
            assert_eq!(r.selected_auroc, r.single);
        }
    }
    // Similarity tracks benefit here, so the top-2 subjects are also Best.
    let r = report.averaged(0, Metric::Cosine, 3).unwrap();
    assert_eq!(r.selected, vec!["twin", "mild"]);
    assert!(r.bold && r.asterisk && r.underline);

    let dir = tempfile::tempdir().unwrap();
    write_select_eval(&report, dir.path()).unwrap();
    write_correlation(&correlate(&cfg, &sweep).unwrap(), dir.path()).unwrap();
    for f in ["table2.csv", "table2.txt", "table3.csv", "table3.txt", "select_eval.json", "correlation.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn selection_record_orders_by_config() {
    let (cfg, sweep) = toy();
    let rec = sweep.record(0, Metric::Euclidean).unwrap();
    let picked = rec.selected(SelectionRule::TopK(3), &cfg.subjects()).unwrap();
    assert_eq!(picked, vec!["twin", "mild"]);
    assert!(rec.selected(SelectionRule::TopK(6), &cfg.subjects()).is_err());
}
