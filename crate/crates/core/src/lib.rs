//! Core library: calculator document model and registry, the calculator
//! expression language, embedding retrieval, the chat-model gateway, and the
//! pipelines built on top of them (curation, agent execution, benchmarking,
//! cohort analytics).

pub mod agent;
pub mod bands;
pub mod bench;
pub mod cohort;
pub mod curation;
pub mod gateway;
pub mod lang;
pub mod model;
pub mod retrieval;
#[cfg(test)]
pub(crate) mod testutil;
