//! JSON run report: workload echo, per-run wall time and executor
//! statistics, and the oracle verdict.

use serde::Serialize;
use taskfabric::ExecutorStats;

use crate::workloads::WorkloadSpec;

/// One timed run: wall-clock milliseconds around ticket wait (graph
/// construction excluded) plus the executor statistics it produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunSample {
    pub wall_ms: f64,
    pub stats: ExecutorStats,
}

/// The full report emitted by `--report` (and to stdout otherwise). Identical
/// flags produce identical keys.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub workload: WorkloadSpec,
    pub workers: usize,
    pub gpus: usize,
    pub runs: Vec<RunSample>,
    /// True only if the workload oracle matched after every run.
    pub checksum_ok: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{WorkloadKind, WorkloadSpec};
    use taskfabric::{DeviceMemoryStats, StealStats};

    #[test]
    fn report_serializes_with_the_documented_keys() {
        let report = Report {
            workload: WorkloadSpec { kind: WorkloadKind::Views, ..WorkloadSpec::default() },
            workers: 8,
            gpus: 2,
            runs: vec![RunSample {
                wall_ms: 12.5,
                stats: ExecutorStats {
                    per_worker_tasks: vec![3, 1],
                    steals: StealStats { attempted: 4, succeeded: 2 },
                    per_device: vec![DeviceMemoryStats { allocated_bytes: 4096, peak_bytes: 2048 }],
                    iterations_completed: 1,
                },
            }],
            checksum_ok: true,
        };
        let value = serde_json::to_value(&report).unwrap();
        assert_eq!(value["workload"]["kind"], "views");
        assert_eq!(value["workers"], 8);
        assert_eq!(value["gpus"], 2);
        assert_eq!(value["runs"][0]["wall_ms"], 12.5);
        assert_eq!(value["runs"][0]["stats"]["per_worker_tasks"], serde_json::json!([3, 1]));
        assert_eq!(value["runs"][0]["stats"]["steals"]["attempted"], 4);
        assert_eq!(value["runs"][0]["stats"]["steals"]["succeeded"], 2);
        assert_eq!(value["runs"][0]["stats"]["per_device"][0]["allocated_bytes"], 4096);
        assert_eq!(value["runs"][0]["stats"]["per_device"][0]["peak_bytes"], 2048);
        assert_eq!(value["checksum_ok"], true);
    }
}
