//! Static check of a scenario: applies the creation rules to every task
//! without simulating.

use serde::Serialize;

use crate::kernel::{create_task, HardeningRule, KernelLayout, Mode, TaskId, TaskRecord, TaskState};
use crate::report::{EXIT_LINT, EXIT_OK};
use crate::scenario::Scenario;
use crate::sim::boot_specs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LintStatus {
    Ok,
    Voided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskLint {
    pub id: TaskId,
    pub name: String,
    pub status: LintStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<HardeningRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintReport {
    pub scenario: String,
    pub mode: Mode,
    pub tasks: Vec<TaskLint>,
    pub warnings: Vec<String>,
}

impl LintReport {
    pub fn exit_code(&self) -> i32 {
        if self.tasks.iter().any(|t| t.status == LintStatus::Voided) {
            EXIT_LINT
        } else {
            EXIT_OK
        }
    }
}

fn create_all(scenario: &Scenario, layout: &KernelLayout) -> Vec<(TaskRecord, Option<crate::kernel::Violation>)> {
    let mut records: Vec<TaskRecord> = Vec::new();
    let mut out = Vec::new();
    for (i, (spec, role)) in boot_specs(scenario).into_iter().enumerate() {
        let (mut rec, rep) = create_task(TaskId(i as u32), spec, &records, &scenario.profile, layout);
        rec.role = role;
        records.push(rec.clone());
        out.push((rec, rep.violation));
    }
    out
}

/// In DBOX mode any voided task fails the check. In compatibility mode the
/// DBOX rules are evaluated anyway and reported as warnings.
pub fn check(scenario: &Scenario) -> LintReport {
    let layout = scenario.layout;
    let tasks = create_all(scenario, &layout)
        .into_iter()
        .map(|(rec, v)| TaskLint {
            id: rec.id,
            name: rec.name,
            status: if rec.state == TaskState::Voided {
                LintStatus::Voided
            } else {
                LintStatus::Ok
            },
            rule: v.as_ref().and_then(|v| v.rule()),
            message: v.map(|v| v.to_string()),
        })
        .collect();
    let mut warnings = Vec::new();
    if layout.mode == Mode::FmpuCompat {
        let strict = KernelLayout {
            mode: Mode::Dbox,
            ..layout
        };
        for (rec, v) in create_all(scenario, &strict) {
            if let Some(v) = v {
                warnings.push(format!("task {} ({}) would be voided in DBOX mode: {v}", rec.id, rec.name));
            }
        }
    }
    LintReport {
        scenario: scenario.name.clone(),
        mode: layout.mode,
        tasks,
        warnings,
    }
}
