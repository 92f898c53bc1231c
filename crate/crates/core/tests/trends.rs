// SPDX-License-Identifier: Apache-2.0

//! Behaviour on small synthetic federations: learnability, twin selection,
//! twin benefit and checkpoint replay.

use ehrfl::dpselect::{self, Metric, SelectionConfig, SelectionRule};
use ehrfl::encoder::ParamSet;
use ehrfl::experiment::{self, CellKey, ClientEntry, ExperimentConfig};
use ehrfl::fedcore::{self, Algorithm};
use ehrfl::synthdata::{ClientGenSpec, SchemaProfile};

/// Host, a zero-shift twin and a strongly shifted client.
fn three_clients(n: usize, data_seed: u64) -> ExperimentConfig {
    let entry = |id: &str, shift: f64, shift_seed: u64| ClientEntry {
        spec: ClientGenSpec {
            client_id: id.into(),
            n_patients: n,
            shift,
            shift_seed,
            ..ClientGenSpec::default()
        },
        schema: SchemaProfile::identity(),
    };
    let mut cfg = ExperimentConfig::benchmark();
    cfg.clients = vec![entry("host", 0.0, 0), entry("twin", 0.0, 0), entry("far", 0.8, 2)];
    cfg.k_values = vec![2];
    cfg.data_seed = data_seed;
    cfg
}

#[test]
fn host_task_is_learnable_within_fifty_epochs() {
    let mut cfg = three_clients(1000, 0);
    cfg.training.max_rounds = 50;
    let data = experiment::generate_datasets(&cfg).unwrap();
    let prep = experiment::prepare(&cfg, &data, 0).unwrap();
    let host = prep.client("host").unwrap();
    let out = fedcore::train_single(&prep.model, host, &cfg.run_config(Algorithm::FedAvg, vec!["host".into()], 0)).unwrap();
    assert!(out.rounds_run() <= 50);
    let test = fedcore::evaluate(&prep.model, out.best_host_params(), &host.test).unwrap().macro_auroc;
    assert!(out.best_val_macro_auroc > 0.7, "validation AUROC {}", out.best_val_macro_auroc);
    assert!(test > 0.7, "test AUROC {test}");
}

#[test]
fn cosine_selection_prefers_the_twin() {
    let mut picked = 0;
    for seed in 0..10 {
        let mut cfg = three_clients(400, seed);
        cfg.training.max_rounds = 20;
        let data = experiment::generate_datasets(&cfg).unwrap();
        let prep = experiment::prepare(&cfg, &data, seed).unwrap();
        let host = prep.client("host").unwrap();
        let candidates: Vec<_> = prep.clients.iter().filter(|c| c.id != "host").cloned().collect();
        let sel = SelectionConfig {
            metric: Metric::Cosine,
            rule: SelectionRule::TopK(2),
            dp: cfg.dp,
            seed,
        };
        let train = cfg.run_config(Algorithm::FedAvg, vec!["host".into()], seed);
        let (outcome, _) = dpselect::run_selection_protocol(&prep.model, host, &candidates, &sel, &train).unwrap();
        if outcome.selected == ["twin"] {
            picked += 1;
        }
    }
    assert!(picked >= 9, "twin selected in {picked} of 10 runs");
}

#[test]
fn joining_the_twin_rarely_hurts_the_host() {
    let mut gains = 0;
    let runs = 10;
    for seed in 0..runs {
        let mut cfg = three_clients(500, seed);
        cfg.training.max_rounds = 30;
        let data = experiment::generate_datasets(&cfg).unwrap();
        let prep = experiment::prepare(&cfg, &data, seed).unwrap();
        let host = prep.client("host").unwrap();
        let single = fedcore::train_single(&prep.model, host, &cfg.run_config(Algorithm::FedAvg, vec!["host".into()], seed)).unwrap();
        let fed = fedcore::run_federation(&prep.model, &cfg.run_config(Algorithm::FedAvg, vec!["host".into(), "twin".into()], seed), &prep.clients).unwrap();
        let a = fedcore::evaluate(&prep.model, single.best_host_params(), &host.test).unwrap().macro_auroc;
        let b = fedcore::evaluate(&prep.model, fed.best_host_params(), &host.test).unwrap().macro_auroc;
        if b - a >= 0.0 {
            gains += 1;
        }
    }
    assert!(2 * gains > runs, "twin helped in {gains} of {runs} runs");
}

#[test]
fn deltas_from_sweep_match_stored_checkpoints() {
    let mut cfg = three_clients(80, 3);
    cfg.algorithms = vec![Algorithm::FedAvg, Algorithm::FedBN];
    cfg.seeds = vec![1];
    cfg.training.max_rounds = 3;
    cfg.save_checkpoints = true;
    cfg.model.dim = 8;
    let data = experiment::generate_datasets(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sweep = experiment::run_sweep(&cfg, &data, dir.path()).unwrap();
    let prep = experiment::prepare(&cfg, &data, 1).unwrap();
    let host = prep.client("host").unwrap();
    let replay = |key: &CellKey| {
        let path = dir.path().join("checkpoints").join(format!("{}.json", key.file_stem()));
        let params = ParamSet::load(&path).unwrap();
        assert_eq!(params.checksum(), sweep.get(key).unwrap().checksum);
        fedcore::evaluate(&prep.model, &params, &host.test).unwrap().macro_auroc
    };
    for a in &cfg.algorithms {
        let pairs = [
            (CellKey::fed(1, "host", *a, vec!["twin".into()]), CellKey::single(1, "host"), "twin"),
            (CellKey::fed(1, "host", *a, vec!["twin".into(), "far".into()]), CellKey::fed(1, "host", *a, vec!["twin".into()]), "far"),
            (CellKey::fed(1, "host", *a, vec!["twin".into(), "far".into()]), CellKey::fed(1, "host", *a, vec!["far".into()]), "twin"),
        ];
        for (with, without, subject) in pairs {
            let logged = experiment::performance_delta(&sweep, &with, &without, subject).unwrap();
            assert_eq!(logged, replay(&with) - replay(&without));
        }
    }
}
