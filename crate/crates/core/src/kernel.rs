//! Microkernel: task records, creation-time hardening, per-task MPU layout,
//! round-robin scheduling and the exception protocol.
//!
//! Two region layouts are supported. [`Mode::Dbox`] places the kernel in the
//! two highest slots so no user region can shadow it, and adds a per-task
//! code region. [`Mode::FmpuCompat`] reproduces the permissive baseline:
//! kernel in low slots, a whole-peripheral-partition region, and user
//! regions on top of everything.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmatask::DmaNotification;
use crate::memmap::{AddressRange, DescriptorHome, MemoryProfile};
use crate::metrics::{CounterReport, CreationCount};
use crate::mpu::{
    validate_range, Access, MpuConfiguration, MpuError, MpuRegionDescriptor, Permission,
};
use crate::policy::DmaCapability;
use crate::script::Step;

pub const MAX_USER_REGIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Ready,
    Running,
    BlockedOnNotify,
    /// Periodic task waiting for its next release.
    Delayed,
    /// Script ran to completion.
    Finished,
    Stopped,
    Voided,
}

impl TaskState {
    pub fn is_live(self) -> bool {
        !matches!(self, TaskState::Stopped | TaskState::Voided | TaskState::Finished)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    #[serde(alias = "dbox")]
    Dbox,
    #[serde(alias = "fmpu_compat")]
    FmpuCompat,
}

impl Mode {
    /// Slots rewritten on every context switch.
    pub fn dynamic_slots(self) -> &'static [usize] {
        match self {
            Mode::Dbox => &[1, 2, 3, 4, 5],
            Mode::FmpuCompat => &[4, 5, 6, 7],
        }
    }

    pub fn user_slots(self) -> [usize; MAX_USER_REGIONS] {
        match self {
            Mode::Dbox => [3, 4, 5],
            Mode::FmpuCompat => [5, 6, 7],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dbox => "DBOX",
            Mode::FmpuCompat => "FMPU_COMPAT",
        })
    }
}

/// Slot map used in compatibility mode, printed in reports.
pub const COMPAT_MAPPING: &str = "approximation: slot0 whole flash (unprivileged RO, executable), \
slot1 kernel code (privileged RO), slot2 kernel data (privileged RW, XN), \
slot3 peripheral partition (unprivileged RW, XN), slot4 task stack, slots5-7 user regions";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelLayout {
    pub syscalls_region: AddressRange,
    pub kernel_code_region: AddressRange,
    pub kernel_data_region: AddressRange,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskRole {
    User,
    DmaService,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserRegion {
    pub range: AddressRange,
    pub permission: Permission,
}

/// Everything needed to create a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub privileged: bool,
    pub code_region: AddressRange,
    pub stack_region: AddressRange,
    pub user_regions: Vec<UserRegion>,
    pub capabilities: Vec<DmaCapability>,
    pub behavior: Vec<Step>,
    pub period: Option<u32>,
    pub iterations: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub id: TaskId,
    pub name: String,
    pub role: TaskRole,
    pub privileged: bool,
    pub code_region: AddressRange,
    pub stack_region: AddressRange,
    pub user_regions: Vec<UserRegion>,
    capabilities: Vec<DmaCapability>,
    pub behavior: Vec<Step>,
    pub state: TaskState,
    pub notification_box: VecDeque<DmaNotification>,
    pub pc: usize,
    pub period: Option<u32>,
    pub iterations: Option<u32>,
    pub iterations_done: u32,
    pub release_at: u64,
    pub deadline_misses: u32,
}

impl TaskRecord {
    pub fn from_spec(id: TaskId, spec: TaskSpec) -> Self {
        Self {
            id,
            name: spec.name,
            role: TaskRole::User,
            privileged: spec.privileged,
            code_region: spec.code_region,
            stack_region: spec.stack_region,
            user_regions: spec.user_regions,
            capabilities: spec.capabilities,
            behavior: spec.behavior,
            state: TaskState::Ready,
            notification_box: VecDeque::new(),
            pc: 0,
            period: spec.period,
            iterations: spec.iterations,
            iterations_done: 0,
            release_at: 0,
            deadline_misses: 0,
        }
    }

    /// Capabilities are fixed at creation; there is no mutable accessor.
    pub fn capabilities(&self) -> &[DmaCapability] {
        &self.capabilities
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    MpuViolation,
    DmaRequestRejected,
    RegionRedefinitionRejected,
    TaskCreationVoided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub tick: u64,
    pub task_id: TaskId,
    pub kind: FaultKind,
    pub detail: String,
}

/// Protection rules enforced on stacks and user regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HardeningRule {
    /// (a) no mapping over a DMA controller's configuration interface.
    DmaControllerOverlap,
    /// (b) no mapping over kernel code or data.
    KernelOverlap,
    /// (c) no mapping over another task's stack.
    ForeignStackOverlap,
    /// (d) no mapping over the kernel-RAM descriptor arena.
    DescriptorArenaOverlap,
}

impl HardeningRule {
    pub fn label(self) -> &'static str {
        match self {
            HardeningRule::DmaControllerOverlap => "(a) region maps the DMA controller interface",
            HardeningRule::KernelOverlap => "(b) region maps kernel code or data",
            HardeningRule::ForeignStackOverlap => "(c) region maps another task's stack",
            HardeningRule::DescriptorArenaOverlap => "(d) region maps the transfer descriptor arena",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("{region}: {error}")]
    IllegalDescriptor { region: String, error: MpuError },
    #[error("{count} user regions requested, at most {MAX_USER_REGIONS} allowed")]
    TooManyRegions { count: usize },
    #[error("{region} {range} violates {}: overlaps {conflict}", .rule.label())]
    Rule {
        rule: HardeningRule,
        region: String,
        range: AddressRange,
        conflict: String,
    },
}

impl Violation {
    pub fn rule(&self) -> Option<HardeningRule> {
        match self {
            Violation::Rule { rule, .. } => Some(*rule),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreationReport {
    pub intersection_checks: u64,
    pub existing_tasks: usize,
    pub violation: Option<Violation>,
}

fn check_legality(regions: &[(String, AddressRange)]) -> Result<(), Violation> {
    for (label, range) in regions {
        validate_range(range).map_err(|error| Violation::IllegalDescriptor {
            region: label.clone(),
            error,
        })?;
    }
    Ok(())
}

/// Applies rules (a)-(d) to `regions`, counting every range-intersection
/// test. `existing` holds the tasks already created; `own` is skipped so a
/// task's user regions may overlay its own stack.
pub fn check_hardening(
    regions: &[(String, AddressRange)],
    own: Option<TaskId>,
    existing: &[TaskRecord],
    profile: &MemoryProfile,
    layout: &KernelLayout,
    checks: &mut u64,
) -> Result<(), Violation> {
    let arena = match profile.dma_descriptor_home {
        DescriptorHome::KernelRam => profile.descriptor_arena,
        DescriptorHome::Mmio => None,
    };
    for (label, range) in regions {
        let fail = |rule, conflict: String| Violation::Rule {
            rule,
            region: label.clone(),
            range: *range,
            conflict,
        };
        for ctrl in profile.dma_controllers() {
            *checks += 1;
            if range.intersects(&ctrl.range) {
                return Err(fail(HardeningRule::DmaControllerOverlap, ctrl.id.clone()));
            }
        }
        for (name, kernel) in [
            ("kernel code", layout.kernel_code_region),
            ("kernel data", layout.kernel_data_region),
        ] {
            *checks += 1;
            if range.intersects(&kernel) {
                return Err(fail(HardeningRule::KernelOverlap, name.to_string()));
            }
        }
        for other in existing.iter().filter(|t| t.state != TaskState::Voided) {
            if Some(other.id) == own {
                continue;
            }
            *checks += 1;
            if range.intersects(&other.stack_region) {
                return Err(fail(
                    HardeningRule::ForeignStackOverlap,
                    format!("stack of task {} ({})", other.id, other.name),
                ));
            }
        }
        if let Some(arena) = arena {
            *checks += 1;
            if range.intersects(&arena) {
                return Err(fail(HardeningRule::DescriptorArenaOverlap, "descriptor arena".into()));
            }
        }
    }
    Ok(())
}

fn guarded_regions(stack: AddressRange, user: &[UserRegion]) -> Vec<(String, AddressRange)> {
    let mut out = vec![("stack".to_string(), stack)];
    out.extend(
        user.iter()
            .enumerate()
            .map(|(i, u)| (format!("user region {i}"), u.range)),
    );
    out
}

/// Creates a task, or returns it in state `Voided` when a creation rule
/// fails. Hardening rules are skipped in compatibility mode.
pub fn create_task(
    id: TaskId,
    spec: TaskSpec,
    existing: &[TaskRecord],
    profile: &MemoryProfile,
    layout: &KernelLayout,
) -> (TaskRecord, CreationReport) {
    let existing_tasks = existing.iter().filter(|t| t.state != TaskState::Voided).count();
    let mut report = CreationReport {
        intersection_checks: 0,
        existing_tasks,
        violation: None,
    };
    let mut record = TaskRecord::from_spec(id, spec);

    let outcome = (|| {
        if record.user_regions.len() > MAX_USER_REGIONS {
            return Err(Violation::TooManyRegions {
                count: record.user_regions.len(),
            });
        }
        let mut regions = guarded_regions(record.stack_region, &record.user_regions);
        regions.push(("code".to_string(), record.code_region));
        check_legality(&regions)?;
        regions.pop();
        if layout.mode == Mode::Dbox {
            check_hardening(
                &regions,
                Some(id),
                existing,
                profile,
                layout,
                &mut report.intersection_checks,
            )?;
        }
        Ok(())
    })();

    if let Err(v) = outcome {
        record.state = TaskState::Voided;
        report.violation = Some(v);
    }
    (record, report)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot build MPU slot {slot} ({label}): {error}")]
pub struct ConfigError {
    pub slot: usize,
    pub label: &'static str,
    pub error: MpuError,
}

/// Smallest legal MPU block covering `range`.
pub fn covering_block(range: &AddressRange) -> AddressRange {
    let mut size = u64::from(range.size().max(32)).next_power_of_two();
    loop {
        let base = u64::from(range.base()) / size * size;
        if base + size >= range.end() && size <= 1 << 31 {
            return AddressRange::new(base as u32, size as u32).expect("in range");
        }
        size *= 2;
        if size > 1 << 31 {
            return AddressRange::new(range.base() & 0x8000_0000, 1 << 31).expect("in range");
        }
    }
}

pub fn build_mpu_configuration(
    task: &TaskRecord,
    layout: &KernelLayout,
    profile: &MemoryProfile,
) -> Result<MpuConfiguration, ConfigError> {
    let mut cfg = MpuConfiguration::new(true);
    let mut put = |slot: usize, label: &'static str, range: AddressRange, permission: Permission| {
        cfg.set(MpuRegionDescriptor::new(slot as u8, range, permission))
            .map_err(|error| ConfigError { slot, label, error })
    };
    match layout.mode {
        Mode::Dbox => {
            put(0, "syscalls", layout.syscalls_region, Permission::read_only_exec())?;
            put(1, "task code", task.code_region, Permission::read_only_exec())?;
            put(2, "task stack", task.stack_region, Permission::read_write_data())?;
            put(6, "kernel code", layout.kernel_code_region, Permission::privileged_exec())?;
            put(7, "kernel data", layout.kernel_data_region, Permission::privileged_data())?;
        }
        Mode::FmpuCompat => {
            put(0, "unprivileged flash", covering_block(&profile.flash), Permission::read_only_exec())?;
            put(1, "kernel code", layout.kernel_code_region, Permission::privileged_exec())?;
            put(2, "kernel data", layout.kernel_data_region, Permission::privileged_data())?;
            put(
                3,
                "peripherals",
                covering_block(&profile.peripheral_partition),
                Permission::new(Access::Rw, Access::Rw, true).expect("ordered"),
            )?;
            put(4, "task stack", task.stack_region, Permission::read_write_data())?;
        }
    }
    for (slot, region) in layout.mode.user_slots().into_iter().zip(&task.user_regions) {
        put(slot, "user region", region.range, region.permission)?;
    }
    Ok(cfg)
}

/// Pure scheduling decision: the next READY task after `last` in id order.
pub fn schedule_tick(tasks: &[TaskRecord], last: Option<TaskId>) -> Option<TaskId> {
    let ready = |t: &&TaskRecord| matches!(t.state, TaskState::Ready | TaskState::Running);
    let after = tasks
        .iter()
        .filter(ready)
        .find(|t| last.is_none_or(|l| t.id > l));
    after.or_else(|| tasks.iter().find(ready)).map(|t| t.id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub task: TaskId,
    /// False when the task continues its current time slice.
    pub switch: bool,
}

/// Kernel state for one simulation.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub profile: MemoryProfile,
    pub layout: KernelLayout,
    tasks: Vec<TaskRecord>,
    pub faults: Vec<FaultEvent>,
    pub counters: CounterReport,
    pub time_slice: u32,
    current: Option<TaskId>,
    slice_used: u32,
}

impl Kernel {
    pub fn new(profile: MemoryProfile, layout: KernelLayout) -> Self {
        Self {
            profile,
            layout,
            tasks: Vec::new(),
            faults: Vec::new(),
            counters: CounterReport::default(),
            time_slice: 1,
            current: None,
            slice_used: 0,
        }
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn task_mut(&mut self, id: TaskId) -> Option<&mut TaskRecord> {
        self.tasks.iter_mut().find(|t| t.id == id)
    }

    pub fn current(&self) -> Option<TaskId> {
        self.current
    }

    /// Creates and registers a task; ids are assigned in creation order.
    pub fn spawn(&mut self, spec: TaskSpec, role: TaskRole, tick: u64) -> (TaskId, CreationReport) {
        let id = TaskId(self.tasks.len() as u32);
        let (mut record, report) = create_task(id, spec, &self.tasks, &self.profile, &self.layout);
        record.role = role;
        if let Some(v) = &report.violation {
            self.faults.push(FaultEvent {
                tick,
                task_id: id,
                kind: FaultKind::TaskCreationVoided,
                detail: v.to_string(),
            });
        }
        self.counters.creation_intersection_checks.push(CreationCount {
            task: id,
            existing_tasks: report.existing_tasks,
            checks: report.intersection_checks,
        });
        self.tasks.push(record);
        (id, report)
    }

    /// Picks the task to run this tick. While the current task has time
    /// left in its slice it keeps the CPU without a context switch.
    pub fn schedule(&mut self) -> Option<Dispatch> {
        if let Some(cur) = self.current {
            let running = self.task(cur).is_some_and(|t| t.state == TaskState::Running);
            if running && self.slice_used < self.time_slice {
                self.slice_used += 1;
                return Some(Dispatch {
                    task: cur,
                    switch: false,
                });
            }
        }
        schedule_tick(&self.tasks, self.current).map(|task| Dispatch { task, switch: true })
    }

    /// Makes `to` the running task and returns its MPU configuration. Every
    /// switch rewrites the mode's dynamic slots, even when `to` was already
    /// running.
    pub fn context_switch(&mut self, to: TaskId) -> Result<MpuConfiguration, ConfigError> {
        if let Some(prev) = self.current.and_then(|c| self.task_mut(c)) {
            if prev.state == TaskState::Running {
                prev.state = TaskState::Ready;
            }
        }
        let task = self.task(to).expect("scheduled task exists");
        let cfg = build_mpu_configuration(task, &self.layout, &self.profile)?;
        self.counters.context_switches += 1;
        self.counters.dynamic_regions_written += self.layout.mode.dynamic_slots().len() as u64;
        let task = self.task_mut(to).expect("scheduled task exists");
        task.state = TaskState::Running;
        self.current = Some(to);
        self.slice_used = 1;
        Ok(cfg)
    }

    /// Ends the running task's slice.
    pub fn yield_current(&mut self) {
        if let Some(t) = self.current.and_then(|c| self.task_mut(c)) {
            if t.state == TaskState::Running {
                t.state = TaskState::Ready;
            }
        }
    }

    /// Stops the offending task; every other task is left untouched.
    pub fn handle_mpu_violation(&mut self, id: TaskId, tick: u64, detail: String) {
        if let Some(t) = self.task_mut(id) {
            t.state = TaskState::Stopped;
        }
        self.faults.push(FaultEvent {
            tick,
            task_id: id,
            kind: FaultKind::MpuViolation,
            detail,
        });
    }

    pub fn record_fault(&mut self, tick: u64, task_id: TaskId, kind: FaultKind, detail: String) {
        self.faults.push(FaultEvent {
            tick,
            task_id,
            kind,
            detail,
        });
    }

    /// Replaces a running task's user regions, or rejects the request and
    /// lets the task continue. Takes effect at the next context switch.
    pub fn redefine_user_regions(
        &mut self,
        id: TaskId,
        regions: Vec<UserRegion>,
        tick: u64,
    ) -> Result<(), Violation> {
        let task = self.task(id).expect("task exists");
        let result = (|| {
            if regions.len() > MAX_USER_REGIONS {
                return Err(Violation::TooManyRegions { count: regions.len() });
            }
            let mut labelled = guarded_regions(task.stack_region, &regions);
            labelled.remove(0);
            check_legality(&labelled)?;
            if self.layout.mode == Mode::Dbox {
                let mut scratch = 0;
                check_hardening(&labelled, Some(id), &self.tasks, &self.profile, &self.layout, &mut scratch)?;
            }
            Ok(())
        })();
        match result {
            Ok(()) => {
                self.task_mut(id).expect("task exists").user_regions = regions;
                Ok(())
            }
            Err(v) => {
                self.record_fault(tick, id, FaultKind::RegionRedefinitionRejected, v.to_string());
                Err(v)
            }
        }
    }

    /// Unprivileged tasks may only enter the kernel from the syscalls region.
    pub fn syscall_gate(&self, id: TaskId, at: u32) -> bool {
        let task = self.task(id).expect("task exists");
        task.privileged || self.layout.syscalls_region.contains_addr(u64::from(at))
    }
}
