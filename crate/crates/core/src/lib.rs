//! Claim-level diagnostics for multimodal retrieval-augmented QA.

pub mod corpus;
pub mod judges;
pub mod retrieval;
pub mod checker;
pub mod filtering;
pub mod metrics;
pub mod reporting;
pub mod pipeline;
