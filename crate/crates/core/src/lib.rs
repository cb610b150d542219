pub mod agents;
pub mod belief;
pub mod coordinator;
pub mod llm;
pub mod metrics;
pub mod runtime;
pub mod strategy;
pub mod types;
