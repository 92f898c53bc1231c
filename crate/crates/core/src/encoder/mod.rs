// SPDX-License-Identifier: Apache-2.0

//! Tokenization, the two-stage patient encoder, multi-task heads and local
//! SGD training.

mod model;
mod params;
mod train;
mod vocab;

pub use model::{
    loss, EncodedPatient, Embedding, GradOutput, Mode, Model, ModelConfig, NormStats, Prox, TaskLogits,
};
pub use params::{ParamSet, Tag, Tensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{train_local, LocalTrainOutput, OptimConfig, TrainSchedule};
pub use vocab::{tokenize, Vocabulary, PAD, UNK};

use crate::error::Result;
use crate::linearizer;
use crate::synthdata::PatientRecord;

/// Linearizes and tokenizes a patient.
pub fn encode_patient(
    patient: &PatientRecord,
    dict: &crate::synthdata::CodeDictionary,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedPatient> {
    let events = linearizer::linearize_patient(patient, dict)?
        .iter()
        .map(|e| tokenize(e, vocab, max_len))
        .collect();
    Ok(EncodedPatient {
        events,
        labels: patient.labels.iter().map(|&y| f64::from(y)).collect(),
    })
}

#[cfg(test)]
mod tests;
