// SPDX-License-Identifier: Apache-2.0

//! Event linearization: `event_type name_1 value_1 name_2 value_2 ...`,
//! with coded values replaced by their dictionary text.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{self, CodeDictionary, FeatureValue, MedicalEvent, PatientRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedEvent {
    pub text: String,
    pub source_event_index: usize,
}

/// Counters surfaced in run reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizeStats {
    pub events: usize,
    pub unmapped_codes: usize,
}

/// Canonical text of a numeric value: shortest round-trip decimal.
pub fn format_numeric(x: f64) -> String {
    // `Display` for f64 is the shortest representation that round-trips and
    // never uses exponent notation or digit grouping.
    format!("{x}")
}

pub fn resolve_value(
    event_type: &str,
    feature_name: &str,
    value: &FeatureValue,
    dict: &CodeDictionary,
    stats: &mut LinearizeStats,
) -> String {
    match value {
        FeatureValue::Code(code) => match dict.lookup(event_type, feature_name, *code) {
            Some(text) => text.to_owned(),
            None => {
                stats.unmapped_codes += 1;
                code.to_string()
            }
        },
        FeatureValue::Text(t) => t.clone(),
        FeatureValue::Numeric(x) => format_numeric(*x),
    }
}

pub fn linearize_event_with(
    event: &MedicalEvent,
    index: usize,
    dict: &CodeDictionary,
    stats: &mut LinearizeStats,
) -> Result<LinearizedEvent> {
    if event.features.is_empty() {
        return Err(Error::InvalidInput(format!(
            "event {index} ({}) has no feature pairs",
            event.event_type
        )));
    }
    let mut text = event.event_type.clone();
    for pair in &event.features {
        text.push(' ');
        text.push_str(&pair.name);
        text.push(' ');
        text.push_str(&resolve_value(&event.event_type, &pair.name, &pair.value, dict, stats));
    }
    stats.events += 1;
    Ok(LinearizedEvent {
        text,
        source_event_index: index,
    })
}

pub fn linearize_event(event: &MedicalEvent, dict: &CodeDictionary) -> Result<LinearizedEvent> {
    linearize_event_with(event, 0, dict, &mut LinearizeStats::default())
}

pub fn linearize_patient_with(
    patient: &PatientRecord,
    dict: &CodeDictionary,
    stats: &mut LinearizeStats,
) -> Result<Vec<LinearizedEvent>> {
    patient
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| linearize_event_with(e, i, dict, stats))
        .collect()
}

pub fn linearize_patient(patient: &PatientRecord, dict: &CodeDictionary) -> Result<Vec<LinearizedEvent>> {
    linearize_patient_with(patient, dict, &mut LinearizeStats::default())
}

/// Writes one linearized event per line, with a blank line after each patient.
pub fn linearize_file(input: &Path, dict_path: &Path, output: &Path) -> Result<LinearizeStats> {
    let patients = synthdata::read_patients_jsonl(input)?;
    let dict = synthdata::read_dictionary(dict_path)?;
    let file = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut out = BufWriter::new(file);
    let mut stats = LinearizeStats::default();
    for p in &patients {
        for ev in linearize_patient_with(p, &dict, &mut stats)? {
            writeln!(out, "{}", ev.text).map_err(|e| Error::io(output, e))?;
        }
        writeln!(out).map_err(|e| Error::io(output, e))?;
    }
    out.flush().map_err(|e| Error::io(output, e))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{
        apply_schema_heterogeneity, generate_client, ClientGenSpec, FeaturePair, SchemaProfile,
    };

    fn glucose_dict() -> CodeDictionary {
        let mut d = CodeDictionary::new();
        d.insert("labevents", "itemid", 50931, "Glucose");
        d
    }

    fn glucose_event() -> MedicalEvent {
        MedicalEvent {
            event_type: "labevents".into(),
            features: vec![
                FeaturePair::new("itemid", FeatureValue::Code(50931)),
                FeaturePair::new("value", FeatureValue::Numeric(70.0)),
                FeaturePair::new("valueuom", FeatureValue::Text("mg/dL".into())),
            ],
            minutes_since_admission: 0,
        }
    }

    #[test]
    fn resolves_codes_numbers_and_fallbacks() {
        let dict = glucose_dict();
        let mut stats = LinearizeStats::default();
        assert_eq!(resolve_value("labevents", "itemid", &FeatureValue::Code(50931), &dict, &mut stats), "Glucose");
        assert_eq!(resolve_value("labevents", "value", &FeatureValue::Numeric(70.0), &dict, &mut stats), "70");
        assert_eq!(stats.unmapped_codes, 0);
        let empty = CodeDictionary::new();
        assert_eq!(resolve_value("labevents", "itemid", &FeatureValue::Code(99999), &empty, &mut stats), "99999");
        assert_eq!(stats.unmapped_codes, 1);
    }

    #[test]
    fn numeric_formatting_is_shortest_round_trip() {
        assert_eq!(format_numeric(0.1), "0.1");
        assert_eq!(format_numeric(1.25), "1.25");
        assert_eq!(format_numeric(1e21), "1000000000000000000000");
        assert_eq!(format_numeric(-3.0), "-3");
    }

    #[test]
    fn glucose_lab_event_linearizes_as_expected() {
        let ev = linearize_event(&glucose_event(), &glucose_dict()).unwrap();
        assert_eq!(ev.text, "labevents itemid Glucose value 70 valueuom mg/dL");
    }

    #[test]
    fn single_pair_and_empty_events() {
        let ev = MedicalEvent {
            event_type: "prescriptions".into(),
            features: vec![FeaturePair::new("drug", FeatureValue::Text("Aspirin".into()))],
            minutes_since_admission: 3,
        };
        assert_eq!(linearize_event(&ev, &CodeDictionary::new()).unwrap().text, "prescriptions drug Aspirin");
        let empty = MedicalEvent {
            features: vec![],
            ..ev
        };
        assert!(linearize_event(&empty, &CodeDictionary::new()).is_err());
    }

    #[test]
    fn patient_linearization_preserves_order() {
        let mut second = glucose_event();
        second.event_type = "inputevents".into();
        let p = PatientRecord {
            patient_id: "p".into(),
            events: vec![glucose_event(), second, glucose_event()],
            labels: vec![0],
        };
        let out = linearize_patient(&p, &CodeDictionary::new()).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.iter().map(|e| e.source_event_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(out[1].text.starts_with("inputevents itemid 50931"));
    }

    #[test]
    fn renamed_feature_changes_exactly_one_token() {
        let spec = ClientGenSpec {
            client_id: "a".into(),
            n_patients: 50,
            ..ClientGenSpec::default()
        };
        let ds = generate_client(&spec, 4).unwrap();
        let mut profile = SchemaProfile::default();
        profile.feature_name_renames.insert("itemid".into(), "item_code".into());
        profile.event_type_renames.insert("labevents".into(), "lab_events".into());
        profile.code_offset = 1000;
        let renamed = apply_schema_heterogeneity(&ds, &profile, 0).unwrap();

        for (p, q) in ds.patients.iter().zip(&renamed.patients) {
            let a = linearize_patient(p, &ds.dictionary).unwrap();
            let b = linearize_patient(q, &renamed.dictionary).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let xs: Vec<&str> = x.text.split(' ').collect();
                let ys: Vec<&str> = y.text.split(' ').collect();
                assert_eq!(xs.len(), ys.len());
                let diffs: Vec<(&str, &str)> =
                    xs.iter().zip(&ys).filter(|(u, v)| u != v).map(|(u, v)| (*u, *v)).collect();
                for d in &diffs {
                    assert!(
                        *d == ("itemid", "item_code") || *d == ("labevents", "lab_events"),
                        "unexpected token change {d:?}"
                    );
                }
                let expected = usize::from(xs[0] == "labevents") + usize::from(x.text.contains(" itemid "));
                assert_eq!(diffs.len(), expected);
            }
        }
    }

    #[test]
    fn first_token_is_event_type_across_corpus() {
        let spec = ClientGenSpec {
            client_id: "a".into(),
            n_patients: 1000,
            ..ClientGenSpec::default()
        };
        let ds = generate_client(&spec, 21).unwrap();
        let mut stats = LinearizeStats::default();
        for p in &ds.patients {
            let evs = linearize_patient_with(p, &ds.dictionary, &mut stats).unwrap();
            for (ev, src) in evs.iter().zip(&p.events) {
                assert_eq!(ev.text.split(' ').next(), Some(src.event_type.as_str()));
            }
        }
        assert_eq!(stats.unmapped_codes, 0);
    }

    #[test]
    fn empty_dictionary_falls_back_to_digits() {
        let spec = ClientGenSpec {
            client_id: "a".into(),
            n_patients: 20,
            ..ClientGenSpec::default()
        };
        let ds = generate_client(&spec, 2).unwrap();
        let mut stats = LinearizeStats::default();
        let p = &ds.patients[0];
        let evs = linearize_patient_with(p, &CodeDictionary::new(), &mut stats).unwrap();
        assert_eq!(evs.len(), p.events.len());
        let coded = p
            .events
            .iter()
            .flat_map(|e| &e.features)
            .filter(|f| matches!(f.value, FeatureValue::Code(_)))
            .count();
        assert_eq!(stats.unmapped_codes, coded);
    }

    #[test]
    fn value_tokens_survive_schema_renaming() {
        use std::collections::BTreeMap;
        let spec = ClientGenSpec {
            client_id: "a".into(),
            n_patients: 100,
            ..ClientGenSpec::default()
        };
        let ds = generate_client(&spec, 5).unwrap();
        let mut profile = SchemaProfile::default();
        profile.event_type_renames.insert("inputevents".into(), "input_events".into());
        profile.feature_name_renames.insert("value".into(), "valuenum".into());
        profile.code_offset = 7;
        let renamed = apply_schema_heterogeneity(&ds, &profile, 0).unwrap();
        let values = |d: &crate::synthdata::ClientDataset| {
            let mut bag: BTreeMap<String, usize> = BTreeMap::new();
            let mut stats = LinearizeStats::default();
            for p in &d.patients {
                for e in &p.events {
                    for f in &e.features {
                        let v = resolve_value(&e.event_type, &f.name, &f.value, &d.dictionary, &mut stats);
                        *bag.entry(v).or_default() += 1;
                    }
                }
            }
            bag
        };
        assert_eq!(values(&ds), values(&renamed));
    }
}
