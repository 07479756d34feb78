//! Library side of the benchmark harness: workload generators and the JSON
//! report schema, kept separate from the binary so tests can drive them
//! directly.

pub mod report;
pub mod workloads;
