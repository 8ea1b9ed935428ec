//! Tick loop tying the kernel, the DMA engine and the DMA service together.
//!
//! Each tick: release due periodic tasks, test for termination, dispatch
//! one task for one scripted action (the DMA task runs one service step
//! instead), then advance the engine and run the completion ISR.

use serde::Serialize;

use crate::dma::{raw_dma_config_via_mmio, ByteStore, DmaEngineState, RawOutcome, TransferDescriptor};
use crate::dmatask::{DmaService, SubmitOutcome};
use crate::kernel::{
    CreationReport, FaultKind, Kernel, TaskId, TaskRole, TaskSpec, TaskState,
};
use crate::metrics::exposure;
use crate::mpu::{check_access, AccessKind, AccessQuery, MpuConfiguration};
use crate::policy::DmaRequest;
use crate::report::{CanaryReport, SimulationReport, TaskSummary};
use crate::scenario::Scenario;
use crate::script::Action;
use crate::trace::{Subsystem, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Completed,
    Idle,
    TickLimit,
}

pub const DMA_TASK_NAME: &str = "dma_service";

/// Task specifications in creation order: the DMA service first, when the
/// scenario has one, then the user tasks as listed.
pub fn boot_specs(scenario: &Scenario) -> Vec<(TaskSpec, TaskRole)> {
    let mut out = Vec::new();
    if let Some(d) = &scenario.dma_task {
        out.push((
            TaskSpec {
                name: DMA_TASK_NAME.to_string(),
                privileged: true,
                code_region: d.code,
                stack_region: d.stack,
                user_regions: Vec::new(),
                capabilities: Vec::new(),
                behavior: Vec::new(),
                period: None,
                iterations: None,
            },
            TaskRole::DmaService,
        ));
    }
    out.extend(scenario.tasks.iter().cloned().map(|t| (t, TaskRole::User)));
    out
}

pub struct Simulation {
    scenario: Scenario,
    pub kernel: Kernel,
    pub engine: DmaEngineState,
    pub service: DmaService,
    pub memory: ByteStore,
    pub trace: Trace,
    creation: Vec<CreationReport>,
    cfg: Option<MpuConfiguration>,
    tick: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Self {
        let mut kernel = Kernel::new(scenario.profile.clone(), scenario.layout);
        kernel.time_slice = scenario.time_slice;
        let mut memory = ByteStore::new();
        for (addr, bytes) in &scenario.init {
            memory.write_slice(*addr, bytes);
        }
        if let Some(c) = scenario.canary {
            memory.write(c.addr, c.value);
        }
        let mut trace = Trace::new();
        trace.emit(
            0,
            Subsystem::Kernel,
            "BOOT",
            None,
            format!("scenario={} mode={}", scenario.name, scenario.layout.mode),
        );
        let mut creation = Vec::new();
        for (spec, role) in boot_specs(&scenario) {
            let name = spec.name.clone();
            let (id, report) = kernel.spawn(spec, role, 0);
            match &report.violation {
                None => trace.emit(
                    0,
                    Subsystem::Kernel,
                    "CREATE",
                    Some(id),
                    format!("name={name} checks={}", report.intersection_checks),
                ),
                Some(v) => trace.emit(0, Subsystem::Kernel, "VOIDED", Some(id), format!("name={name} {v}")),
            }
            creation.push(report);
        }
        Self {
            engine: DmaEngineState::for_profile(&scenario.profile),
            service: DmaService::new(scenario.profile.dma_channels),
            scenario,
            kernel,
            memory,
            trace,
            creation,
            cfg: None,
            tick: 0,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    fn user_tasks(&self) -> impl Iterator<Item = &crate::kernel::TaskRecord> {
        self.kernel
            .tasks()
            .iter()
            .filter(|t| t.role == TaskRole::User && t.state != TaskState::Voided)
    }

    fn has_work(&self) -> bool {
        let task_work = self.user_tasks().any(|t| match t.state {
            TaskState::Ready | TaskState::Running | TaskState::Delayed => true,
            TaskState::BlockedOnNotify => self.service.has_pending_for(t.id),
            _ => false,
        });
        task_work || self.engine.active().next().is_some()
    }

    fn final_termination(&self) -> Termination {
        let mut any_finished = false;
        for t in self.user_tasks() {
            match t.state {
                TaskState::Finished => any_finished = true,
                TaskState::Stopped => {}
                _ => return Termination::Idle,
            }
        }
        if any_finished {
            Termination::Completed
        } else {
            Termination::Idle
        }
    }

    /// Runs until the scenario finishes or `horizon` ticks have elapsed.
    pub fn run(&mut self, horizon: u64) -> Termination {
        loop {
            self.release_delayed();
            if !self.has_work() {
                let t = self.final_termination();
                self.trace.emit(self.tick, Subsystem::Kernel, "HALT", None, format!("termination={t:?}"));
                return t;
            }
            if self.tick >= horizon {
                self.trace.emit(self.tick, Subsystem::Kernel, "HALT", None, "termination=TickLimit");
                return Termination::TickLimit;
            }
            self.step();
        }
    }

    fn release_delayed(&mut self) {
        let tick = self.tick;
        let mut released = Vec::new();
        for id in self.kernel.tasks().iter().map(|t| t.id).collect::<Vec<_>>() {
            let t = self.kernel.task_mut(id).expect("listed");
            if t.state == TaskState::Delayed && t.release_at <= tick {
                t.state = TaskState::Ready;
                released.push(id);
            }
        }
        for id in released {
            self.trace.emit(tick, Subsystem::Kernel, "RELEASE", Some(id), "");
        }
    }

    /// Executes one tick.
    pub fn step(&mut self) {
        let tick = self.tick;
        if let Some(d) = self.kernel.schedule() {
            if d.switch {
                match self.kernel.context_switch(d.task) {
                    Ok(cfg) => {
                        self.cfg = Some(cfg);
                        self.trace.emit(
                            tick,
                            Subsystem::Kernel,
                            "SWITCH",
                            Some(d.task),
                            format!("slots={}", self.kernel.layout.mode.dynamic_slots().len()),
                        );
                    }
                    Err(e) => {
                        self.kernel.handle_mpu_violation(d.task, tick, e.to_string());
                        self.trace.emit(tick, Subsystem::Mpu, "FAULT", Some(d.task), e.to_string());
                        self.cfg = None;
                    }
                }
            }
            if self.cfg.is_some() {
                let role = self.kernel.task(d.task).expect("scheduled").role;
                match role {
                    TaskRole::DmaService => {
                        self.service
                            .service_step(&mut self.kernel, &mut self.engine, tick, &mut self.trace)
                    }
                    TaskRole::User => self.run_user(d.task),
                }
            }
        }
        let completions = self.engine.engine_tick(&mut self.memory);
        for c in &completions {
            self.trace.emit(
                tick,
                Subsystem::Dma,
                "COMPLETE",
                Some(c.owner_task),
                format!("ch={}", c.channel),
            );
        }
        self.service
            .isr_deliver(&mut self.kernel, completions, tick, &mut self.trace);
        self.tick += 1;
    }

    fn skip_disabled(&mut self, id: TaskId) {
        let toggles = &self.scenario.toggles;
        let task = self.kernel.task_mut(id).expect("scheduled");
        while task.pc < task.behavior.len() && !task.behavior[task.pc].enabled(toggles) {
            task.pc += 1;
        }
    }

    fn run_user(&mut self, id: TaskId) {
        self.skip_disabled(id);
        let task = self.kernel.task(id).expect("scheduled");
        if let Some(step) = task.behavior.get(task.pc).cloned() {
            if self.execute(id, &step.action) {
                self.kernel.task_mut(id).expect("scheduled").pc += 1;
            }
        }
        self.skip_disabled(id);
        let task = self.kernel.task(id).expect("scheduled");
        if task.pc >= task.behavior.len() && task.state == TaskState::Running {
            self.end_iteration(id);
        }
    }

    fn end_iteration(&mut self, id: TaskId) {
        let tick = self.tick;
        let task = self.kernel.task_mut(id).expect("scheduled");
        task.iterations_done += 1;
        task.pc = 0;
        let done = task.iterations_done;
        let finished = match (task.iterations, task.period) {
            (Some(n), _) => done >= n,
            (None, Some(_)) => false,
            (None, None) => true,
        };
        let mut detail = format!("iter={done}");
        if finished {
            task.state = TaskState::Finished;
        } else if let Some(period) = task.period {
            task.release_at += u64::from(period);
            if task.release_at <= tick {
                task.deadline_misses += 1;
                detail.push_str(" deadline=MISSED");
            } else {
                task.state = TaskState::Delayed;
            }
        }
        self.trace.emit(tick, Subsystem::Kernel, "ITERATION", Some(id), detail);
        if finished {
            self.trace.emit(tick, Subsystem::Kernel, "FINISH", Some(id), "");
        }
    }

    fn mpu_check(&mut self, id: TaskId, addr: u32, len: u32, kind: AccessKind) -> bool {
        let tick = self.tick;
        let privileged = self.kernel.task(id).expect("scheduled").privileged;
        let cfg = self.cfg.as_ref().expect("configured");
        let q = AccessQuery::new(addr, len, kind, privileged);
        let ok = check_access(cfg, &q, &self.kernel.profile).is_allow();
        let detail = format!("{kind:?} addr={addr:#010x} len={len}");
        if ok {
            self.trace.emit(tick, Subsystem::Mpu, "ALLOW", Some(id), detail);
        } else {
            self.trace.emit(tick, Subsystem::Mpu, "FAULT", Some(id), detail.clone());
            self.kernel.handle_mpu_violation(id, tick, detail);
            self.trace.emit(tick, Subsystem::Kernel, "STOP", Some(id), "");
        }
        ok
    }

    fn gate(&mut self, id: TaskId, at: u32, what: &str) -> bool {
        let tick = self.tick;
        self.kernel.counters.svc_events += 1;
        if self.kernel.syscall_gate(id, at) {
            self.trace.emit(tick, Subsystem::Kernel, "SYSCALL", Some(id), format!("{what} at={at:#010x}"));
            return true;
        }
        let detail = format!("{what} from {at:#010x} outside the syscalls region");
        self.trace.emit(tick, Subsystem::Mpu, "FAULT", Some(id), detail.clone());
        self.kernel.handle_mpu_violation(id, tick, detail);
        self.trace.emit(tick, Subsystem::Kernel, "STOP", Some(id), "");
        false
    }

    /// Performs one action. Returns whether the program counter advances.
    fn execute(&mut self, id: TaskId, action: &Action) -> bool {
        let tick = self.tick;
        match action {
            Action::MemRead { addr, len } => self.mpu_check(id, *addr, *len, AccessKind::Read),
            Action::MemWrite { addr, len, fill } => {
                let ok = self.mpu_check(id, *addr, *len, AccessKind::Write);
                if ok {
                    for i in 0..*len {
                        self.memory.write(addr.wrapping_add(i), *fill);
                    }
                }
                ok
            }
            Action::Exec { addr } => self.mpu_check(id, *addr, 1, AccessKind::Execute),
            Action::Syscall { at } => self.gate(id, *at, "syscall"),
            Action::DmaRequest {
                at,
                peripheral,
                operation,
                ear,
            } => {
                if !self.gate(id, *at, "dma_request") {
                    return false;
                }
                let req = DmaRequest {
                    requester: id,
                    peripheral_id: peripheral.clone(),
                    operation: *operation,
                    ear: ear.clone(),
                };
                let out = self
                    .service
                    .submit_request(req, &mut self.kernel, tick, &mut self.trace);
                !matches!(out, SubmitOutcome::Dropped)
            }
            Action::RawDmaConfig {
                channel,
                source,
                destination,
                length,
                direction,
            } => {
                let privileged = self.kernel.task(id).expect("scheduled").privileged;
                let d = TransferDescriptor::new(*channel, *source, *destination, *length, *direction, id);
                let cfg = self.cfg.as_ref().expect("configured");
                let out = raw_dma_config_via_mmio(&mut self.engine, d, cfg, privileged, &self.kernel.profile);
                match out {
                    Ok(RawOutcome::Installed) => {
                        self.service.register_raw(*channel, id);
                        self.trace.emit(
                            tick,
                            Subsystem::Dma,
                            "RAW_INSTALL",
                            Some(id),
                            format!("ch={channel} src={source} dst={destination} len={length}"),
                        );
                        true
                    }
                    Ok(RawOutcome::Busy) => {
                        self.trace.emit(tick, Subsystem::Dma, "RAW_BUSY", Some(id), format!("ch={channel}"));
                        true
                    }
                    Ok(RawOutcome::Fault { target }) => {
                        let detail = format!("Write descriptor registers {target}");
                        self.trace.emit(tick, Subsystem::Mpu, "FAULT", Some(id), detail.clone());
                        self.kernel.handle_mpu_violation(id, tick, detail);
                        self.trace.emit(tick, Subsystem::Kernel, "STOP", Some(id), "");
                        false
                    }
                    Err(e) => {
                        self.trace.emit(tick, Subsystem::Dma, "RAW_ERROR", Some(id), format!("ch={channel} {e}"));
                        true
                    }
                }
            }
            Action::RedefineRegions { at, regions } => {
                if !self.gate(id, *at, "redefine_regions") {
                    return false;
                }
                match self.kernel.redefine_user_regions(id, regions.clone(), tick) {
                    Ok(()) => self.trace.emit(tick, Subsystem::Kernel, "REDEFINE", Some(id), "status=OK"),
                    Err(v) => self.trace.emit(
                        tick,
                        Subsystem::Kernel,
                        "REDEFINE",
                        Some(id),
                        format!("status=REJECTED {v}"),
                    ),
                }
                true
            }
            Action::WaitNotify => {
                let task = self.kernel.task_mut(id).expect("scheduled");
                match task.notification_box.pop_front() {
                    Some(n) => {
                        self.trace.emit(
                            tick,
                            Subsystem::Kernel,
                            "CONSUME",
                            Some(id),
                            format!("req={} status={}", n.request_id, n.status),
                        );
                        true
                    }
                    None => {
                        task.state = TaskState::BlockedOnNotify;
                        self.trace.emit(tick, Subsystem::Kernel, "WAIT", Some(id), "");
                        false
                    }
                }
            }
            Action::Nop => true,
        }
    }

    /// Assembles the report for the run so far.
    pub fn report(&self, termination: Termination) -> SimulationReport {
        let profile = &self.kernel.profile;
        let layout = &self.kernel.layout;
        let exposure_rows = self
            .kernel
            .tasks()
            .iter()
            .filter(|t| !t.privileged && t.state != TaskState::Voided)
            .filter_map(|t| {
                let cfg = crate::kernel::build_mpu_configuration(t, layout, profile).ok()?;
                Some(exposure(t, &cfg, profile, layout))
            })
            .collect();
        let tasks = self
            .kernel
            .tasks()
            .iter()
            .zip(&self.creation)
            .map(|(t, c)| TaskSummary {
                id: t.id,
                name: t.name.clone(),
                role: t.role,
                privileged: t.privileged,
                state: t.state,
                iterations_done: t.iterations_done,
                deadline_misses: t.deadline_misses,
                creation_checks: c.intersection_checks,
                creation_violation: c.violation.as_ref().map(|v| v.to_string()),
                pending_notifications: t.notification_box.len(),
            })
            .collect();
        let counters = if self.tick == 0 {
            Default::default()
        } else {
            self.kernel.counters.clone()
        };
        SimulationReport {
            scenario: self.scenario.name.clone(),
            mode: layout.mode,
            compat_mapping: (layout.mode == crate::kernel::Mode::FmpuCompat)
                .then(|| crate::kernel::COMPAT_MAPPING.to_string()),
            termination,
            ticks_executed: self.tick,
            toggles: self.scenario.toggles.clone(),
            faults: self.kernel.faults.clone(),
            requests: self.service.requests.clone(),
            notifications: self.service.delivered.clone(),
            orphans: self.service.orphans.clone(),
            ear_state: self
                .service
                .ear_state
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
            exposure: exposure_rows,
            counters,
            tasks,
            kernel_canary: self.scenario.canary.map(|c| {
                let actual = self.memory.read(c.addr);
                CanaryReport {
                    addr: format!("{:#010x}", c.addr),
                    expected: c.value,
                    actual,
                    intact: actual == c.value,
                }
            }),
        }
    }

    pub fn mpu_violations(&self) -> usize {
        self.kernel
            .faults
            .iter()
            .filter(|f| f.kind == FaultKind::MpuViolation)
            .count()
    }
}

/// Boots `scenario` and runs it to completion or to the horizon. The
/// horizon defaults to the scenario's `ticks`.
pub fn simulate(scenario: Scenario, horizon: Option<u64>) -> (SimulationReport, Trace) {
    let horizon = horizon.or(scenario.ticks).unwrap_or(DEFAULT_HORIZON);
    let mut sim = Simulation::new(scenario);
    let t = sim.run(horizon);
    let report = sim.report(t);
    (report, sim.trace)
}

/// Horizon used when neither the scenario nor the caller sets one.
pub const DEFAULT_HORIZON: u64 = 10_000;
