//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

pub mod attention_oracle;
pub mod grad_suite;
pub mod metric_oracle;
pub mod state_oracle;
