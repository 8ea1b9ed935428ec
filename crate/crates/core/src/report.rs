//! Run and metrics reports. Both serialise to deterministic JSON: fixed
//! field order and ordered maps only.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dmatask::{DeliveredNotification, OrphanEvent, RequestRecord};
use crate::kernel::{
    build_mpu_configuration, ConfigError, FaultEvent, FaultKind, Kernel, Mode, TaskId, TaskRecord,
    TaskRole, TaskState, COMPAT_MAPPING,
};
use crate::metrics::{
    exposure, fit_linear, worst_case_exposure, CounterReport, CreationCount, ExposureRow, LinearFit,
    Variant,
};
use crate::scenario::Scenario;
use crate::sim::{boot_specs, Termination};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_LINT: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSummary {
    pub id: TaskId,
    pub name: String,
    pub role: TaskRole,
    pub privileged: bool,
    pub state: TaskState,
    pub iterations_done: u32,
    pub deadline_misses: u32,
    pub creation_checks: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub creation_violation: Option<String>,
    pub pending_notifications: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CanaryReport {
    pub addr: String,
    pub expected: u8,
    pub actual: u8,
    pub intact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compat_mapping: Option<String>,
    pub termination: Termination,
    pub ticks_executed: u64,
    pub toggles: BTreeMap<String, bool>,
    pub faults: Vec<FaultEvent>,
    pub requests: Vec<RequestRecord>,
    pub notifications: Vec<DeliveredNotification>,
    pub orphans: Vec<OrphanEvent>,
    pub ear_state: BTreeMap<String, String>,
    pub exposure: Vec<ExposureRow>,
    pub counters: CounterReport,
    pub tasks: Vec<TaskSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_canary: Option<CanaryReport>,
}

impl SimulationReport {
    pub fn mpu_violations(&self) -> usize {
        self.faults
            .iter()
            .filter(|f| f.kind == FaultKind::MpuViolation)
            .count()
    }

    /// 3 when any MPU violation was contained, 0 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.mpu_violations() > 0 {
            EXIT_VIOLATION
        } else {
            EXIT_OK
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Output of the `metrics` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsDocument {
    pub scenario: String,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compat_mapping: Option<String>,
    pub assumptions: Vec<String>,
    pub rows: Vec<ExposureRow>,
    pub creation_checks: Vec<CreationCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub creation_fit: Option<LinearFit>,
}

impl MetricsDocument {
    pub fn row(&self, task: &str, variant: Variant) -> Option<&ExposureRow> {
        self.rows.iter().find(|r| r.name == task && r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

const METHOD_NOTES: [&str; 4] = [
    "exposed bytes: bytes an unprivileged access may read or write under the task's MPU configuration; the system partition is never counted",
    "worst case: per area, up to three legal naturally aligned power-of-two user regions chosen greedily to maximise that area's exposure; DBOX legality includes the creation rules",
    "dma_controller_exposed: unprivileged reach into a DMA controller range, or into the descriptor arena when descriptors live in kernel RAM",
    "exposed_executable_bytes is a proxy for code-reuse surface, not a gadget count",
];

/// Standard and worst-case exposure for every unprivileged task that
/// survives creation, plus the creation cost series.
pub fn metrics_document(scenario: &Scenario) -> Result<MetricsDocument, ConfigError> {
    let mut kernel = Kernel::new(scenario.profile.clone(), scenario.layout);
    for (spec, role) in boot_specs(scenario) {
        kernel.spawn(spec, role, 0);
    }
    let profile = &kernel.profile;
    let layout = &kernel.layout;
    let live: Vec<TaskRecord> = kernel
        .tasks()
        .iter()
        .filter(|t| t.state != TaskState::Voided)
        .cloned()
        .collect();
    let mut rows = Vec::new();
    for t in live.iter().filter(|t| !t.privileged) {
        let cfg = build_mpu_configuration(t, layout, profile)?;
        rows.push(exposure(t, &cfg, profile, layout));
        let others: Vec<TaskRecord> = live.iter().filter(|o| o.id != t.id).cloned().collect();
        rows.push(worst_case_exposure(t, &others, profile, layout)?);
    }
    let creation_checks = kernel.counters.creation_intersection_checks.clone();
    let points: Vec<(u64, u64)> = creation_checks
        .iter()
        .map(|c| (c.existing_tasks as u64, c.checks))
        .collect();
    let mut assumptions: Vec<String> = METHOD_NOTES.iter().map(|s| s.to_string()).collect();
    assumptions.extend(scenario.notes.iter().cloned());
    Ok(MetricsDocument {
        scenario: scenario.name.clone(),
        mode: layout.mode,
        compat_mapping: (layout.mode == Mode::FmpuCompat).then(|| COMPAT_MAPPING.to_string()),
        assumptions,
        rows,
        creation_checks,
        creation_fit: fit_linear(&points).ok(),
    })
}
