// SPDX-License-Identifier: Apache-2.0

//! What a host saves by federating with `K` of `N` candidate clients instead
//! of all of them, net of the selection procedure's own cost.
//!
//! `N` and `K` both count the host. Units are abstract.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Candidate clients, host included.
    pub n: u64,
    /// Selected participants, host included.
    pub k: u64,
    /// Communication rounds.
    pub r: u64,
    /// Local epochs per round.
    pub l: u64,
    /// Epochs the host spends training its selection model.
    pub e: u64,
    /// Data usage fee per participating subject.
    pub x: f64,
    /// One local epoch of training.
    pub c_train: f64,
    /// Sending model weights between servers once.
    pub c_model: f64,
    pub c_extract: f64,
    pub c_average: f64,
    pub c_embedding: f64,
    pub c_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub selection_cost: f64,
    pub data_usage_savings: f64,
    pub compute_savings: f64,
    pub total_net_savings: f64,
}

impl CostLedger {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > self.n {
            return Err(Error::InvalidInput(format!("need 1 <= K <= N, got K = {}, N = {}", self.k, self.n)));
        }
        if self.r < 1 || self.l < 1 || self.e < 1 {
            return Err(Error::InvalidInput("R, L and E must be positive".into()));
        }
        let costs = [self.x, self.c_train, self.c_model, self.c_extract, self.c_average, self.c_embedding, self.c_sim];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput("costs must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn excluded(&self) -> f64 {
        (self.n - self.k) as f64
    }

    /// `E·C_train + N·(C_model + C_extract + C_average + C_embedding + C_sim)`
    pub fn selection_cost(&self) -> f64 {
        self.e as f64 * self.c_train
            + self.n as f64 * (self.c_model + self.c_extract + self.c_average + self.c_embedding + self.c_sim)
    }

    /// `(N − K)·X`
    pub fn data_usage_savings(&self) -> f64 {
        self.excluded() * self.x
    }

    /// `(N − K)·R·(L·C_train + 2·C_model)`
    pub fn compute_savings(&self) -> f64 {
        self.excluded() * self.r as f64 * (self.l as f64 * self.c_train + 2.0 * self.c_model)
    }

    /// Closed form of data + compute savings minus selection cost.
    pub fn total_net_savings(&self) -> f64 {
        let nk = self.excluded();
        let n = self.n as f64;
        let r = self.r as f64;
        nk * self.x + (nk * r * self.l as f64 - self.e as f64) * self.c_train + (2.0 * nk * r - n) * self.c_model
            - n * (self.c_extract + self.c_average + self.c_embedding + self.c_sim)
    }

    pub fn report(&self) -> Result<CostReport> {
        self.validate()?;
        Ok(CostReport {
            selection_cost: self.selection_cost(),
            data_usage_savings: self.data_usage_savings(),
            compute_savings: self.compute_savings(),
            total_net_savings: self.total_net_savings(),
        })
    }
}
