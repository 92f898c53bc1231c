// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use super::*;
use crate::seeds;

fn small_config(attention: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        dim: 8,
        max_len: 6,
        n_tasks: 2,
        attention,
        ..ModelConfig::default()
    }
}

fn random_patients(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<EncodedPatient> {
    let mut rng = seeds::rng(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=4);
            let events = (0..k)
                .map(|_| {
                    let len = rng.random_range(1..=cfg.max_len);
                    let mut ids: Vec<u32> = (0..len).map(|_| rng.random_range(1..cfg.vocab_size as u32)).collect();
                    ids.resize(cfg.max_len, PAD);
                    ids
                })
                .collect();
            let labels = (0..cfg.n_tasks).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            EncodedPatient { events, labels }
        })
        .collect()
}

/// Central finite differences on sampled trainable coordinates; returns the
/// maximum relative error against the analytic gradient.
fn fd_max_rel_error(model: &Model, params: &ParamSet, batch: &[&EncodedPatient], prox: Option<Prox<'_>>, samples: usize, seed: u64) -> f64 {
    let analytic = model.grad(params, batch, prox).unwrap().grad.flatten();
    let flat = params.flatten();
    let trainable: Vec<usize> = {
        let mut idx = Vec::new();
        let mut at = 0;
        for t in &params.tensors {
            if !t.is_statistic() {
                idx.extend(at..at + t.len());
            }
            at += t.len();
        }
        idx
    };
    let mut rng = seeds::rng(seed);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let i = trainable[rng.random_range(0..trainable.len())];
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = model.batch_loss(&params.unflatten(&plus).unwrap(), batch, prox).unwrap();
        let lm = model.batch_loss(&params.unflatten(&minus).unwrap(), batch, prox).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(3);
    let patients = random_patients(&cfg, 5, 11);
    let batch: Vec<&EncodedPatient> = patients.iter().collect();
    let err = fd_max_rel_error(&model, &params, &batch, None, 200, 5);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradient_with_attention_and_prox_matches_finite_differences() {
    let cfg = small_config(true);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(4);
    let anchor = model.init(5);
    let patients = random_patients(&cfg, 5, 12);
    let batch: Vec<&EncodedPatient> = patients.iter().collect();
    let prox = Prox { mu: 0.3, anchor: &anchor };
    let err = fd_max_rel_error(&model, &params, &batch, Some(prox), 200, 6);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn norm_tensors_exist_per_stage_and_tags_are_total() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let p = model.init(0);
    for stage in ["encoder", "aggregator"] {
        assert!(p.tensors.iter().any(|t| t.name.starts_with(stage) && t.tag == Tag::Norm));
    }
    for t in &p.tensors {
        let norm_name = t.name.contains(".norm.");
        assert_eq!(norm_name, t.tag == Tag::Norm, "{}", t.name);
    }
}

#[test]
fn encode_events_shape_and_pad_invariance() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(1);
    let events = vec![vec![3, 4, 5, PAD, PAD, PAD], vec![7, 8, PAD, PAD, PAD, PAD], vec![9, PAD, PAD, PAD, PAD, PAD]];
    let z = model.encode_events(&params, &events).unwrap();
    assert_eq!(z.dim(), (3, 8));

    let mut long_cfg = cfg.clone();
    long_cfg.max_len = 12;
    let long_model = Model::new(long_cfg).unwrap();
    let long_events: Vec<Vec<u32>> = events
        .iter()
        .map(|e| {
            let mut v = e.clone();
            v.resize(12, PAD);
            v
        })
        .collect();
    let z_long = long_model.encode_events(&params, &long_events).unwrap();
    assert_eq!(z, z_long);

    let a = EncodedPatient { events: events.clone(), labels: vec![1.0, 0.0] };
    let b = EncodedPatient { events: long_events, labels: vec![1.0, 0.0] };
    let la = model.batch_loss(&params, &[&a], None).unwrap();
    let lb = long_model.batch_loss(&params, &[&b], None).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn random_events_do_not_collide() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(8);
    let mut rng = seeds::rng(99);
    for _ in 0..100 {
        let mut pair = Vec::new();
        while pair.len() < 2 {
            let mut ids: Vec<u32> = (0..3).map(|_| rng.random_range(2..50)).collect();
            ids.resize(cfg.max_len, PAD);
            if pair.first() != Some(&ids) {
                pair.push(ids);
            }
        }
        let z = model.encode_events(&params, &pair).unwrap();
        assert_ne!(z.row(0), z.row(1));
    }
}

#[test]
fn aggregation_properties() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(2);
    let events = vec![vec![3, 4, PAD, PAD, PAD, PAD], vec![5, PAD, PAD, PAD, PAD, PAD], vec![6, 7, 8, PAD, PAD, PAD]];
    let z = model.encode_events(&params, &events).unwrap();

    // k = 1: the embedding is the single transformed vector.
    let single = model.aggregate(&params, &z.slice(ndarray::s![0..1, ..]).to_owned()).unwrap();
    let (emb, _) = model
        .infer(&params, &[&EncodedPatient { events: vec![events[0].clone()], labels: vec![0.0; 2] }])
        .unwrap();
    assert_eq!(single, emb[0]);

    let base = model.aggregate(&params, &z).unwrap();
    let doubled = ndarray::concatenate(ndarray::Axis(0), &[z.view(), z.view()]).unwrap();
    let dup = model.aggregate(&params, &doubled).unwrap();
    for (a, b) in base.values().iter().zip(dup.values()) {
        assert!((a - b).abs() < 1e-14);
    }
    let permuted = ndarray::stack(ndarray::Axis(0), &[z.row(2), z.row(0), z.row(1)]).unwrap();
    let perm = model.aggregate(&params, &permuted).unwrap();
    for (a, b) in base.values().iter().zip(perm.values()) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(model.aggregate(&params, &ndarray::Array2::zeros((0, 8))).is_err());
}

#[test]
fn predict_is_affine_in_head() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = model.init(2);
    params.get_mut("head.weight").unwrap().values.iter_mut().for_each(|x| *x = 0.0);
    let zero = Embedding(vec![0.0; 8]);
    assert_eq!(model.predict(&params, &zero).unwrap(), TaskLogits(vec![0.0, 0.0]));

    let l = Embedding((0..8).map(|i| i as f64 * 0.1).collect());
    let w: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.05).collect();
    params.get_mut("head.weight").unwrap().values = w.clone();
    let z1 = model.predict(&params, &l).unwrap();
    params.get_mut("head.weight").unwrap().values = w.iter().map(|x| 2.0 * x).collect();
    let z2 = model.predict(&params, &l).unwrap();
    for (a, b) in z1.0.iter().zip(&z2.0) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }

    let one_task = Model::new(ModelConfig { n_tasks: 1, ..cfg }).unwrap();
    assert_eq!(one_task.predict(&one_task.init(0), &zero).unwrap().0.len(), 1);
}

#[test]
fn loss_values() {
    let ln2 = std::f64::consts::LN_2;
    assert!((loss(&TaskLogits(vec![0.0]), &[1.0]).unwrap() - ln2).abs() < 1e-15);
    assert!(loss(&TaskLogits(vec![30.0]), &[1.0]).unwrap() < 1e-12);
    assert!((loss(&TaskLogits(vec![0.0, 0.0, 0.0]), &[1.0, 0.0, 1.0]).unwrap() - 3.0 * ln2).abs() < 1e-14);
    assert!(loss(&TaskLogits(vec![0.0]), &[1.0, 0.0]).is_err());
    assert!(loss(&TaskLogits(vec![-800.0]), &[1.0]).unwrap().is_finite());
}

#[test]
fn prox_with_zero_mu_is_a_no_op() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(1);
    let anchor = model.init(2);
    let patients = random_patients(&cfg, 4, 3);
    let batch: Vec<&EncodedPatient> = patients.iter().collect();
    let plain = model.grad(&params, &batch, None).unwrap().grad;
    let prox = model.grad(&params, &batch, Some(Prox { mu: 0.0, anchor: &anchor })).unwrap().grad;
    assert!(plain.bit_eq(&prox));
}

#[test]
fn isolated_prox_term_is_exact() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let mut params = model.init(1);
    // Saturated heads with all-positive labels give an exactly zero data gradient.
    params.get_mut("head.weight").unwrap().values.iter_mut().for_each(|x| *x = 0.0);
    params.get_mut("head.bias").unwrap().values.iter_mut().for_each(|x| *x = 1000.0);
    let anchor = model.init(2);
    let mut patients = random_patients(&cfg, 4, 3);
    patients.iter_mut().for_each(|p| p.labels.iter_mut().for_each(|y| *y = 1.0));
    let batch: Vec<&EncodedPatient> = patients.iter().collect();
    let mu = 0.37;
    let g = model.grad(&params, &batch, Some(Prox { mu, anchor: &anchor })).unwrap().grad;
    for ((gt, w), a) in g.tensors.iter().zip(&params.tensors).zip(&anchor.tensors) {
        for ((gi, wi), ai) in gt.values.iter().zip(&w.values).zip(&a.values) {
            let expected = if w.is_statistic() { 0.0 } else { mu * (wi - ai) };
            assert_eq!(gi.to_bits(), expected.to_bits(), "{}", w.name);
        }
    }
}

#[test]
fn grad_rejects_empty_batch_and_bad_layout() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(1);
    assert!(model.grad(&params, &[], None).is_err());
    let other = Model::new(ModelConfig { dim: 4, ..cfg.clone() }).unwrap().init(0);
    let patients = random_patients(&cfg, 2, 1);
    assert!(model.grad(&other, &[&patients[0]], None).is_err());
}

#[test]
fn train_local_is_deterministic_and_rejects_zero_epochs() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(1);
    let data = random_patients(&cfg, 40, 5);
    let optim = OptimConfig { learning_rate: 0.05, batch_size: 8 };
    assert!(train_local(&model, &params, &data, 0, &optim, None, TrainSchedule::new(1)).is_err());
    let a = train_local(&model, &params, &data, 3, &optim, None, TrainSchedule::new(1)).unwrap();
    let b = train_local(&model, &params, &data, 3, &optim, None, TrainSchedule::new(1)).unwrap();
    assert!(a.params.bit_eq(&b.params));
    let c = train_local(&model, &params, &data, 3, &optim, None, TrainSchedule::new(2)).unwrap();
    assert!(!a.params.bit_eq(&c.params));
}

#[test]
fn split_schedule_reproduces_one_long_run() {
    let cfg = small_config(false);
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init(1);
    let data = random_patients(&cfg, 30, 5);
    let optim = OptimConfig { learning_rate: 0.05, batch_size: 8 };
    let long = train_local(&model, &params, &data, 3, &optim, None, TrainSchedule::new(9)).unwrap();
    let mut p = params.clone();
    for e in 0..3 {
        p = train_local(&model, &p, &data, 1, &optim, None, TrainSchedule { seed: 9, first_epoch: e }).unwrap().params;
    }
    assert!(long.params.bit_eq(&p));
}
