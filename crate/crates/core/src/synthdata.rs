// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic EHR sites.
//!
//! A shared "world" (seeded by `world_seed`) fixes the medical concepts, the
//! reference concept prevalence and the reference per-task label weights.
//! Each client perturbs prevalence and label weights towards its own random
//! direction by the shift parameter `s`, so `s = 0` clients are samples of
//! the reference population and `s = 1` clients share nothing with it but the
//! concept vocabulary. Labels come from a logistic model over each patient's
//! empirical concept frequencies.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub const EVENT_TYPES: [&str; 3] = ["labevents", "inputevents", "prescriptions"];

/// Observation window length in minutes (12 hours).
pub const WINDOW_MINUTES: u32 = 720;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureValue {
    Code(i64),
    Text(String),
    Numeric(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub name: String,
    pub value: FeatureValue,
}

impl FeaturePair {
    pub fn new(name: impl Into<String>, value: FeatureValue) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalEvent {
    pub event_type: String,
    pub features: Vec<FeaturePair>,
    pub minutes_since_admission: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<MedicalEvent>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub event_type: String,
    pub feature_name: String,
    pub code: i64,
    pub text: String,
}

/// Code-to-text lookup keyed by `(event_type, feature_name, code)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeDictionary {
    entries: BTreeMap<(String, String, i64), String>,
}

impl CodeDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        event_type: impl Into<String>,
        feature_name: impl Into<String>,
        code: i64,
        text: impl Into<String>,
    ) {
        self.entries
            .insert((event_type.into(), feature_name.into(), code), text.into());
    }

    pub fn lookup(&self, event_type: &str, feature_name: &str, code: i64) -> Option<&str> {
        // BTreeMap over owned tuples has no borrowed-key lookup for tuples of &str.
        self.entries
            .get(&(event_type.to_owned(), feature_name.to_owned(), code))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = DictionaryEntry> + '_ {
        self.entries.iter().map(|((e, f, c), t)| DictionaryEntry {
            event_type: e.clone(),
            feature_name: f.clone(),
            code: *c,
            text: t.clone(),
        })
    }

    /// Checks that no two codes under the same `(event_type, feature_name)`
    /// map to the same text.
    pub fn is_injective(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .all(|((e, f, _), t)| seen.insert((e.as_str(), f.as_str(), t.as_str())))
    }
}

impl Serialize for CodeDictionary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.entries())
    }
}

impl<'de> Deserialize<'de> for CodeDictionary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let list = Vec::<DictionaryEntry>::deserialize(d)?;
        let mut dict = CodeDictionary::new();
        for e in list {
            dict.insert(e.event_type, e.feature_name, e.code, e.text);
        }
        Ok(dict)
    }
}

/// Renaming tables describing how one site's schema differs from the
/// reference naming.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaProfile {
    #[serde(default)]
    pub event_type_renames: BTreeMap<String, String>,
    #[serde(default)]
    pub feature_name_renames: BTreeMap<String, String>,
    #[serde(default)]
    pub code_offset: i64,
}

impl SchemaProfile {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.code_offset == 0
            && self.event_type_renames.iter().all(|(k, v)| k == v)
            && self.feature_name_renames.iter().all(|(k, v)| k == v)
    }

    fn rename_event_type<'a>(&'a self, name: &'a str) -> &'a str {
        self.event_type_renames
            .get(name)
            .map(String::as_str)
            .unwrap_or(name)
    }

    fn rename_feature<'a>(&'a self, name: &'a str) -> &'a str {
        self.feature_name_renames
            .get(name)
            .map(String::as_str)
            .unwrap_or(name)
    }

    /// Composes two profiles: `self` applied first, then `next`.
    pub fn then(&self, next: &SchemaProfile) -> SchemaProfile {
        let compose = |a: &BTreeMap<String, String>, b: &BTreeMap<String, String>| {
            let mut out = BTreeMap::new();
            for (k, v) in a {
                out.insert(k.clone(), b.get(v).cloned().unwrap_or_else(|| v.clone()));
            }
            for (k, v) in b {
                if !a.contains_key(k) && !a.values().any(|x| x == k) {
                    out.insert(k.clone(), v.clone());
                }
            }
            out
        };
        SchemaProfile {
            event_type_renames: compose(&self.event_type_renames, &next.event_type_renames),
            feature_name_renames: compose(&self.feature_name_renames, &next.feature_name_renames),
            code_offset: self.code_offset + next.code_offset,
        }
    }
}

/// Checks that `f(x) = table.get(x).unwrap_or(x)` is injective over `universe`
/// together with every name the table mentions.
fn check_bijective(table: &BTreeMap<String, String>, universe: &BTreeSet<String>, what: &str) -> Result<()> {
    let mut domain: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    domain.extend(table.keys().map(String::as_str));
    let mut image = BTreeSet::new();
    for name in domain {
        let mapped = table.get(name).map(String::as_str).unwrap_or(name);
        if mapped.is_empty() {
            return Err(Error::InvalidInput(format!("{what} renaming of {name:?} is empty")));
        }
        if !image.insert(mapped) {
            return Err(Error::InvalidInput(format!(
                "{what} renaming is not bijective: several names map to {mapped:?}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Generator parameters for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientGenSpec {
    pub client_id: String,
    pub n_patients: usize,
    pub n_tasks: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub n_concepts: usize,
    /// Distribution shift relative to the reference population, in `[0, 1]`.
    pub shift: f64,
    /// Selects the direction the client shifts towards.
    pub shift_seed: u64,
    /// Seed of the shared world (concepts, reference prevalence and labels).
    pub world_seed: u64,
    /// Dirichlet concentration of per-patient concept mixtures, per concept.
    pub concentration: f64,
    /// Slope of the label logit in the concept-frequency score.
    pub label_gain: f64,
}

impl Default for ClientGenSpec {
    fn default() -> Self {
        Self {
            client_id: "client".to_owned(),
            n_patients: 1000,
            n_tasks: 4,
            events_min: 6,
            events_max: 12,
            n_concepts: 30,
            shift: 0.0,
            shift_seed: 0,
            world_seed: 0,
            concentration: 0.3,
            label_gain: 8.0,
        }
    }
}

impl ClientGenSpec {
    fn validate(&self) -> Result<()> {
        if self.n_patients < 10 {
            return Err(Error::InvalidInput(format!(
                "need at least 10 patients to split 8:1:1, got {}",
                self.n_patients
            )));
        }
        if self.n_tasks < 1 {
            return Err(Error::InvalidInput("need at least one task".into()));
        }
        if self.events_min < 1 || self.events_max < self.events_min {
            return Err(Error::InvalidInput(format!(
                "bad event count range [{}, {}]",
                self.events_min, self.events_max
            )));
        }
        if self.n_concepts < 2 {
            return Err(Error::InvalidInput("need at least two concepts".into()));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::InvalidInput(format!("shift {} outside [0, 1]", self.shift)));
        }
        if !(self.concentration > 0.0) || !self.label_gain.is_finite() {
            return Err(Error::InvalidInput("concentration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub spec: ClientGenSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: String,
    pub patients: Vec<PatientRecord>,
    pub dictionary: CodeDictionary,
    pub schema_profile: SchemaProfile,
    pub splits: Splits,
    pub meta: Option<GenerationMeta>,
}

impl ClientDataset {
    pub fn n_tasks(&self) -> usize {
        self.patients.first().map_or(0, |p| p.labels.len())
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&PatientRecord> {
        idx.iter().map(|&i| &self.patients[i]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Concept {
    event_type: usize,
    code: Option<i64>,
    name: &'static str,
    unit: &'static str,
    mean: f64,
}

const LAB_CONCEPTS: [(i64, &str, &str, f64); 10] = [
    (50931, "Glucose", "mg/dL", 110.0),
    (50912, "Creatinine", "mg/dL", 1.2),
    (50971, "Potassium", "mEq/L", 4.1),
    (50983, "Sodium", "mEq/L", 139.0),
    (51222, "Hemoglobin", "g/dL", 11.0),
    (50813, "Lactate", "mmol/L", 2.0),
    (51265, "Platelet Count", "K/uL", 210.0),
    (51301, "White Blood Cells", "K/uL", 10.0),
    (50882, "Bicarbonate", "mEq/L", 24.0),
    (50902, "Chloride", "mEq/L", 103.0),
];

const INPUT_CONCEPTS: [(i64, &str, &str, f64); 10] = [
    (225977, "Dialysate Fluid", "mL", 500.0),
    (225158, "NaCl 0.9%", "mL", 250.0),
    (220949, "Dextrose 5%", "mL", 100.0),
    (222168, "Propofol", "mg", 40.0),
    (223258, "Insulin - Regular", "units", 6.0),
    (225152, "Heparin Sodium", "units", 1000.0),
    (221906, "Norepinephrine", "mg", 2.0),
    (221744, "Fentanyl", "mcg", 50.0),
    (221668, "Midazolam", "mg", 2.0),
    (225166, "Potassium Chloride", "mEq", 20.0),
];

const DRUG_CONCEPTS: [(&str, &str, f64); 10] = [
    ("Aspirin", "mg", 81.0),
    ("Metoprolol", "mg", 25.0),
    ("Furosemide", "mg", 40.0),
    ("Vancomycin", "mg", 1000.0),
    ("Acetaminophen", "mg", 650.0),
    ("Pantoprazole", "mg", 40.0),
    ("Ondansetron", "mg", 4.0),
    ("Lisinopril", "mg", 10.0),
    ("Atorvastatin", "mg", 40.0),
    ("Ceftriaxone", "g", 1.0),
];

const EXTRA_NAMES: [&str; 10] = [
    "Albumin", "Calcium Total", "Phosphate", "Troponin T", "Bilirubin Total",
    "Anion Gap", "INR(PT)", "Hematocrit", "Urea Nitrogen", "Magnesium",
];

fn concept_table(n: usize) -> Vec<Concept> {
    (0..n)
        .map(|i| {
            let slot = i / 3;
            match i % 3 {
                0 => match LAB_CONCEPTS.get(slot) {
                    Some(&(code, name, unit, mean)) => Concept { event_type: 0, code: Some(code), name, unit, mean },
                    None => {
                        let name = EXTRA_NAMES[slot % EXTRA_NAMES.len()];
                        Concept { event_type: 0, code: Some(51500 + i as i64), name, unit: "units", mean: 10.0 }
                    }
                },
                1 => match INPUT_CONCEPTS.get(slot) {
                    Some(&(code, name, unit, mean)) => Concept { event_type: 1, code: Some(code), name, unit, mean },
                    None => Concept {
                        event_type: 1,
                        code: Some(229000 + i as i64),
                        name: EXTRA_NAMES[slot % EXTRA_NAMES.len()],
                        unit: "mL",
                        mean: 100.0,
                    },
                },
                _ => match DRUG_CONCEPTS.get(slot) {
                    Some(&(name, unit, mean)) => Concept { event_type: 2, code: None, name, unit, mean },
                    None => Concept {
                        event_type: 2,
                        code: None,
                        name: EXTRA_NAMES[slot % EXTRA_NAMES.len()],
                        unit: "mg",
                        mean: 5.0,
                    },
                },
            }
        })
        .collect()
}

fn concept_label(c: &Concept, idx: usize) -> String {
    // Extra concepts may reuse a display name; disambiguate so the
    // dictionary stays injective.
    if idx >= 30 {
        format!("{} {}", c.name, idx)
    } else {
        c.name.to_owned()
    }
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        let u = 1.0 / draws.len() as f64;
        draws.iter_mut().for_each(|x| *x = u);
    }
    draws
}

struct Population {
    prevalence: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

fn population<R: Rng>(rng: &mut R, n_concepts: usize, n_tasks: usize) -> Population {
    let prevalence = dirichlet(rng, &vec![2.0; n_concepts]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let weights = (0..n_tasks)
        .map(|_| (0..n_concepts).map(|_| normal.sample(rng)).collect())
        .collect();
    Population { prevalence, weights }
}

fn mix(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates one client in the reference naming, split 8:1:1 with `seed`.
pub fn generate_client(spec: &ClientGenSpec, seed: u64) -> Result<ClientDataset> {
    spec.validate()?;
    let concepts = concept_table(spec.n_concepts);

    let mut world_rng = seeds::rng(seeds::derive(spec.world_seed, &[0x77]));
    let reference = population(&mut world_rng, spec.n_concepts, spec.n_tasks);
    let mut shift_rng = seeds::rng(seeds::derive(spec.world_seed, &[0x5f, spec.shift_seed]));
    let alternative = population(&mut shift_rng, spec.n_concepts, spec.n_tasks);

    let prevalence = mix(&reference.prevalence, &alternative.prevalence, spec.shift);
    let weights: Vec<Vec<f64>> = reference
        .weights
        .iter()
        .zip(&alternative.weights)
        .map(|(a, b)| mix(a, b, spec.shift))
        .collect();
    let centers: Vec<f64> = weights
        .iter()
        .map(|w| w.iter().zip(&prevalence).map(|(a, p)| a * p).sum())
        .collect();

    let alpha: Vec<f64> = prevalence
        .iter()
        .map(|p| (p * spec.concentration * spec.n_concepts as f64).max(1e-3))
        .collect();
    let jitter = Normal::new(0.0, 0.15).expect("valid");
    let mut rng = seeds::rng(seeds::derive(seed, &[seeds::hash_str(&spec.client_id)]));

    let mut patients = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let mixture = dirichlet(&mut rng, &alpha);
        let k = rng.random_range(spec.events_min..=spec.events_max);
        let mut counts = vec![0usize; spec.n_concepts];
        let mut times: Vec<u32> = (0..k).map(|_| rng.random_range(0..WINDOW_MINUTES)).collect();
        times.sort_unstable();

        let mut events = Vec::with_capacity(k);
        for &minutes in &times {
            let c = sample_index(&mut rng, &mixture);
            counts[c] += 1;
            let concept = &concepts[c];
            let value = (concept.mean * (1.0 + jitter.sample(&mut rng))).max(0.0);
            // Two significant digits keeps the value vocabulary small.
            let value = round_sig(value, 2);
            events.push(make_event(concept, c, value, minutes));
        }

        let labels = weights
            .iter()
            .zip(&centers)
            .map(|(w, center)| {
                let score: f64 = w
                    .iter()
                    .zip(&counts)
                    .map(|(wc, &n)| wc * n as f64 / k as f64)
                    .sum();
                let p = sigmoid(spec.label_gain * (score - center));
                u8::from(rng.random::<f64>() < p)
            })
            .collect();

        patients.push(PatientRecord {
            patient_id: format!("{}-{:05}", spec.client_id, i),
            events,
            labels,
        });
    }

    let mut dictionary = CodeDictionary::new();
    for (i, c) in concepts.iter().enumerate() {
        if let Some(code) = c.code {
            dictionary.insert(EVENT_TYPES[c.event_type], "itemid", code, concept_label(c, i));
        }
    }

    let ds = ClientDataset {
        client_id: spec.client_id.clone(),
        patients,
        dictionary,
        schema_profile: SchemaProfile::identity(),
        splits: Splits::default(),
        meta: Some(GenerationMeta {
            spec: spec.clone(),
            seed,
        }),
    };
    split_dataset(ds, seed)
}

fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    let r = (x * scale).round() / scale;
    // Re-parse to land on the shortest decimal representation.
    format!("{r:.12}").parse::<f64>().unwrap_or(r)
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn make_event(c: &Concept, idx: usize, value: f64, minutes: u32) -> MedicalEvent {
    let label = concept_label(c, idx);
    let features = match c.event_type {
        0 => vec![
            FeaturePair::new("itemid", FeatureValue::Code(c.code.expect("lab code"))),
            FeaturePair::new("value", FeatureValue::Numeric(value)),
            FeaturePair::new("valueuom", FeatureValue::Text(c.unit.to_owned())),
        ],
        1 => vec![
            FeaturePair::new("itemid", FeatureValue::Code(c.code.expect("input code"))),
            FeaturePair::new("amount", FeatureValue::Numeric(value)),
            FeaturePair::new("amountuom", FeatureValue::Text(c.unit.to_owned())),
        ],
        _ => vec![
            FeaturePair::new("drug", FeatureValue::Text(label)),
            FeaturePair::new("dose_val_rx", FeatureValue::Numeric(value)),
            FeaturePair::new("dose_unit_rx", FeatureValue::Text(c.unit.to_owned())),
        ],
    };
    MedicalEvent {
        event_type: EVENT_TYPES[c.event_type].to_owned(),
        features,
        minutes_since_admission: minutes,
    }
}

/// Rewrites event types, feature names and codes according to `profile`.
///
/// The dictionary is rewritten alongside, so code-to-text resolution is
/// unchanged. `seed` is accepted for interface stability; the transform
/// itself is deterministic.
pub fn apply_schema_heterogeneity(
    ds: &ClientDataset,
    profile: &SchemaProfile,
    _seed: u64,
) -> Result<ClientDataset> {
    let mut event_types = BTreeSet::new();
    let mut feature_names = BTreeSet::new();
    for p in &ds.patients {
        for e in &p.events {
            event_types.insert(e.event_type.clone());
            for f in &e.features {
                feature_names.insert(f.name.clone());
            }
        }
    }
    for entry in ds.dictionary.entries() {
        event_types.insert(entry.event_type);
        feature_names.insert(entry.feature_name);
    }
    check_bijective(&profile.event_type_renames, &event_types, "event type")?;
    check_bijective(&profile.feature_name_renames, &feature_names, "feature name")?;

    let offset = profile.code_offset;
    let patients = ds
        .patients
        .iter()
        .map(|p| {
            let events = p
                .events
                .iter()
                .map(|e| MedicalEvent {
                    event_type: profile.rename_event_type(&e.event_type).to_owned(),
                    features: e
                        .features
                        .iter()
                        .map(|f| FeaturePair {
                            name: profile.rename_feature(&f.name).to_owned(),
                            value: match &f.value {
                                FeatureValue::Code(c) => FeatureValue::Code(c + offset),
                                other => other.clone(),
                            },
                        })
                        .collect(),
                    minutes_since_admission: e.minutes_since_admission,
                })
                .collect();
            PatientRecord {
                patient_id: p.patient_id.clone(),
                events,
                labels: p.labels.clone(),
            }
        })
        .collect();

    let mut dictionary = CodeDictionary::new();
    for entry in ds.dictionary.entries() {
        dictionary.insert(
            profile.rename_event_type(&entry.event_type),
            profile.rename_feature(&entry.feature_name),
            entry.code + offset,
            entry.text,
        );
    }

    Ok(ClientDataset {
        client_id: ds.client_id.clone(),
        patients,
        dictionary,
        schema_profile: ds.schema_profile.then(profile),
        splits: ds.splits.clone(),
        meta: ds.meta.clone(),
    })
}

/// Shuffles patients with `seed` and assigns 8:1:1, remainder to train.
pub fn split_dataset(mut ds: ClientDataset, seed: u64) -> Result<ClientDataset> {
    ds.splits = make_splits(ds.patients.len(), seed)?;
    Ok(ds)
}

pub fn make_splits(n: usize, seed: u64) -> Result<Splits> {
    if n < 10 {
        return Err(Error::InvalidInput(format!("need at least 10 patients to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(seed, &[0x5b1])));
    let n_valid = n / 10;
    let n_test = n / 10;
    let n_train = n - n_valid - n_test;
    Ok(Splits {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    })
}

/// Empirical concept histogram over all events, keyed by the resolved
/// concept text so it is comparable across schema renamings.
pub fn concept_histogram(ds: &ClientDataset) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for p in &ds.patients {
        for e in &p.events {
            let Some(first) = e.features.first() else { continue };
            let key = match &first.value {
                FeatureValue::Code(c) => ds
                    .dictionary
                    .lookup(&e.event_type, &first.name, *c)
                    .map(str::to_owned)
                    .unwrap_or_else(|| c.to_string()),
                FeatureValue::Text(t) => t.clone(),
                FeatureValue::Numeric(x) => x.to_string(),
            };
            *counts.entry(key).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.values_mut().for_each(|v| *v /= total);
    }
    counts
}

pub fn total_variation(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Paths of the files written for one client.
#[derive(Debug, Clone)]
pub struct ClientFiles {
    pub patients: PathBuf,
    pub dictionary: PathBuf,
    pub schema: PathBuf,
    pub meta: PathBuf,
}

impl ClientFiles {
    pub fn in_dir(dir: &Path, client_id: &str) -> Self {
        Self {
            patients: dir.join(format!("{client_id}.jsonl")),
            dictionary: dir.join(format!("{client_id}.dict.json")),
            schema: dir.join(format!("{client_id}.schema.json")),
            meta: dir.join(format!("{client_id}.meta.json")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    client_id: String,
    splits: Splits,
    generation: Option<GenerationMeta>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_patients_jsonl(path: &Path, patients: &[PatientRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for p in patients {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_patients_jsonl(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut patients = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        patients.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(patients)
}

pub fn read_dictionary(path: &Path) -> Result<CodeDictionary> {
    read_json(path)
}

pub fn write_client(dir: &Path, ds: &ClientDataset) -> Result<ClientFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ClientFiles::in_dir(dir, &ds.client_id);
    write_patients_jsonl(&files.patients, &ds.patients)?;
    write_json(&files.dictionary, &ds.dictionary)?;
    write_json(&files.schema, &ds.schema_profile)?;
    write_json(
        &files.meta,
        &MetaFile {
            client_id: ds.client_id.clone(),
            splits: ds.splits.clone(),
            generation: ds.meta.clone(),
        },
    )?;
    Ok(files)
}

pub fn read_client(dir: &Path, client_id: &str) -> Result<ClientDataset> {
    let files = ClientFiles::in_dir(dir, client_id);
    let meta: MetaFile = read_json(&files.meta)?;
    Ok(ClientDataset {
        client_id: meta.client_id,
        patients: read_patients_jsonl(&files.patients)?,
        dictionary: read_json(&files.dictionary)?,
        schema_profile: read_json(&files.schema)?,
        splits: meta.splits,
        meta: meta.generation,
    })
}
