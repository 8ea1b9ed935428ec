//! The trusted DMA service: a bounded request queue, policy validation,
//! channel programming, and the completion ISR that notifies requesters.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dma::{Completion, Direction, DmaEngineState, TransferDescriptor};
use crate::kernel::{Kernel, TaskId, TaskState};
use crate::memmap::AddressRange;
use crate::metrics::ValidationCount;
use crate::policy::{buffer_regions, validate_request_counted, DmaOperation, DmaRequest, Ear, Reason, Verdict};
use crate::trace::{Subsystem, Trace};

pub type RequestId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    NoCapability,
    RightMissing,
    BufferNotOwned,
    EarDenied,
    PeripheralUnknown,
    NotDmaCapable,
    QueueFull,
}

impl From<Reason> for RejectReason {
    fn from(r: Reason) -> Self {
        match r {
            Reason::NoCapability => RejectReason::NoCapability,
            Reason::RightMissing => RejectReason::RightMissing,
            Reason::BufferNotOwned => RejectReason::BufferNotOwned,
            Reason::EarDenied => RejectReason::EarDenied,
            Reason::PeripheralUnknown => RejectReason::PeripheralUnknown,
            Reason::NotDmaCapable | Reason::Ok => RejectReason::NotDmaCapable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NotifyStatus {
    Ok,
    Rejected(RejectReason),
    Error,
}

impl NotifyStatus {
    pub fn is_ok(self) -> bool {
        self == NotifyStatus::Ok
    }
}

impl fmt::Display for NotifyStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NotifyStatus::Ok => f.write_str("OK"),
            NotifyStatus::Error => f.write_str("ERROR"),
            NotifyStatus::Rejected(r) => {
                let s = serde_json::to_value(r).expect("enum serializes");
                write!(f, "REJECTED({})", s.as_str().unwrap_or("?"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaNotification {
    pub channel: Option<u32>,
    #[serde(flatten)]
    pub status: NotifyStatus,
    pub request_id: RequestId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Service,
    /// Installed by a task writing controller registers directly.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Registration {
    pub task: TaskId,
    pub request_id: Option<RequestId>,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct QueuedRequest {
    id: RequestId,
    request: DmaRequest,
    verdict: Option<Verdict>,
}

/// Lifecycle of one submitted request, kept for the report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub tick: u64,
    pub requester: TaskId,
    pub peripheral: String,
    pub operation: crate::policy::OperationKind,
    pub verdict: Option<Verdict>,
    pub channel: Option<u32>,
    /// Memory ranges the programmed descriptor touches.
    pub transfer_ranges: Vec<AddressRange>,
    /// Whether every transfer range sat inside one of the requester's own
    /// regions when the channel was programmed.
    pub confined: Option<bool>,
    pub outcome: Option<NotifyStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveredNotification {
    pub tick: u64,
    pub task: TaskId,
    #[serde(flatten)]
    pub notification: DmaNotification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OrphanEvent {
    pub tick: u64,
    pub task: TaskId,
    pub channel: Option<u32>,
    pub request_id: Option<RequestId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Queued(RequestId),
    QueueFull(RequestId),
    Dropped,
}

#[derive(Debug, Clone)]
pub struct DmaService {
    queue: VecDeque<QueuedRequest>,
    capacity: usize,
    registry: Vec<Option<Registration>>,
    head_retries: u32,
    next_request_id: RequestId,
    /// Addressing state last applied to each peripheral (slave address,
    /// slave select or channel sequence).
    pub ear_state: BTreeMap<String, Ear>,
    pub requests: Vec<RequestRecord>,
    pub delivered: Vec<DeliveredNotification>,
    pub orphans: Vec<OrphanEvent>,
}

impl DmaService {
    pub fn new(channels: u32) -> Self {
        Self {
            queue: VecDeque::new(),
            capacity: channels as usize,
            registry: vec![None; channels as usize],
            head_retries: 0,
            next_request_id: 0,
            ear_state: BTreeMap::new(),
            requests: Vec::new(),
            delivered: Vec::new(),
            orphans: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn registry(&self) -> &[Option<Registration>] {
        &self.registry
    }

    pub fn registered_channels(&self) -> usize {
        self.registry.iter().flatten().count()
    }

    /// True while a task still waits on queued or in-flight work.
    pub fn has_pending_for(&self, task: TaskId) -> bool {
        self.queue.iter().any(|q| q.request.requester == task)
            || self.registry.iter().flatten().any(|r| r.task == task)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.registered_channels() == 0
    }

    fn record_mut(&mut self, id: RequestId) -> &mut RequestRecord {
        &mut self.requests[id as usize]
    }

    /// Hands a request from `req.requester` to the service.
    pub fn submit_request(
        &mut self,
        req: DmaRequest,
        kernel: &mut Kernel,
        tick: u64,
        trace: &mut Trace,
    ) -> SubmitOutcome {
        let live = kernel
            .task(req.requester)
            .is_some_and(|t| !matches!(t.state, TaskState::Stopped | TaskState::Voided));
        if !live {
            return SubmitOutcome::Dropped;
        }
        kernel.counters.svc_events += 1;
        let id = self.next_request_id;
        self.next_request_id += 1;
        self.requests.push(RequestRecord {
            id,
            tick,
            requester: req.requester,
            peripheral: req.peripheral_id.clone(),
            operation: req.operation.kind(),
            verdict: None,
            channel: None,
            transfer_ranges: Vec::new(),
            confined: None,
            outcome: None,
        });
        let task = req.requester;
        if self.queue.len() >= self.capacity {
            trace.emit(
                tick,
                Subsystem::Kernel,
                "SUBMIT",
                Some(task),
                format!("req={id} periph={} queue=FULL", req.peripheral_id),
            );
            self.notify(
                kernel,
                task,
                DmaNotification {
                    channel: None,
                    status: NotifyStatus::Rejected(RejectReason::QueueFull),
                    request_id: id,
                },
                tick,
                trace,
            );
            return SubmitOutcome::QueueFull(id);
        }
        trace.emit(
            tick,
            Subsystem::Kernel,
            "SUBMIT",
            Some(task),
            format!("req={id} periph={} op={:?}", req.peripheral_id, req.operation.kind()),
        );
        self.queue.push_back(QueuedRequest {
            id,
            request: req,
            verdict: None,
        });
        SubmitOutcome::Queued(id)
    }

    fn notify(
        &mut self,
        kernel: &mut Kernel,
        task: TaskId,
        n: DmaNotification,
        tick: u64,
        trace: &mut Trace,
    ) {
        self.record_mut(n.request_id).outcome = Some(n.status);
        let ch = n.channel.map_or_else(|| "-".to_string(), |c| c.to_string());
        let Some(t) = kernel
            .task_mut(task)
            .filter(|t| !matches!(t.state, TaskState::Stopped | TaskState::Voided))
        else {
            self.orphans.push(OrphanEvent {
                tick,
                task,
                channel: n.channel,
                request_id: Some(n.request_id),
            });
            trace.emit(
                tick,
                Subsystem::Isr,
                "ORPHAN",
                Some(task),
                format!("req={} ch={ch} status={}", n.request_id, n.status),
            );
            return;
        };
        t.notification_box.push_back(n);
        if t.state == TaskState::BlockedOnNotify {
            t.state = TaskState::Ready;
        }
        kernel.counters.svc_events += 1;
        self.delivered.push(DeliveredNotification {
            tick,
            task,
            notification: n,
        });
        trace.emit(
            tick,
            Subsystem::Isr,
            "NOTIFY",
            Some(task),
            format!("req={} ch={ch} status={}", n.request_id, n.status),
        );
    }

    /// One scheduled slot of the DMA task: handles the head of the queue.
    pub fn service_step(
        &mut self,
        kernel: &mut Kernel,
        engine: &mut DmaEngineState,
        tick: u64,
        trace: &mut Trace,
    ) {
        let Some(mut head) = self.queue.pop_front() else {
            return;
        };
        let requester = head.request.requester;
        let verdict = match head.verdict {
            Some(v) => v,
            None => {
                let task = kernel.task(requester).expect("requester exists");
                let (v, checks) = validate_request_counted(&head.request, task, &kernel.profile);
                kernel.counters.validation_checks.push(ValidationCount {
                    request: head.id,
                    checks,
                });
                self.record_mut(head.id).verdict = Some(v);
                let word = if v.is_accept() { "ACCEPT" } else { "REJECT" };
                trace.emit(
                    tick,
                    Subsystem::Policy,
                    word,
                    Some(requester),
                    format!("req={} reason={}", head.id, reason_tag(v.reason)),
                );
                head.verdict = Some(v);
                v
            }
        };
        if !verdict.is_accept() {
            kernel.record_fault(
                tick,
                requester,
                crate::kernel::FaultKind::DmaRequestRejected,
                format!("request {} on {}: {}", head.id, head.request.peripheral_id, reason_tag(verdict.reason)),
            );
            self.notify(
                kernel,
                requester,
                DmaNotification {
                    channel: None,
                    status: NotifyStatus::Rejected(verdict.reason.into()),
                    request_id: head.id,
                },
                tick,
                trace,
            );
            self.head_retries = 0;
            return;
        }
        let Some(channel) = engine.lowest_free().filter(|c| self.registry[*c as usize].is_none()) else {
            self.head_retries += 1;
            if self.head_retries > self.capacity as u32 {
                self.head_retries = 0;
                trace.emit(tick, Subsystem::Dma, "NO_CHANNEL", Some(requester), format!("req={} giving up", head.id));
                self.notify(
                    kernel,
                    requester,
                    DmaNotification {
                        channel: None,
                        status: NotifyStatus::Rejected(RejectReason::QueueFull),
                        request_id: head.id,
                    },
                    tick,
                    trace,
                );
            } else {
                trace.emit(
                    tick,
                    Subsystem::Dma,
                    "NO_CHANNEL",
                    Some(requester),
                    format!("req={} retry={}", head.id, self.head_retries),
                );
                self.queue.push_front(head);
            }
            return;
        };
        self.head_retries = 0;
        let peripheral = kernel
            .profile
            .peripheral(&head.request.peripheral_id)
            .expect("accepted peripheral exists");
        let dreg = peripheral.data_register();
        let d = match head.request.operation {
            DmaOperation::Read { into } => {
                TransferDescriptor::new(channel, dreg, into, into.size(), Direction::PeriphToMem, requester)
            }
            DmaOperation::Write { from } => {
                TransferDescriptor::new(channel, from, dreg, from.size(), Direction::MemToPeriph, requester)
            }
            DmaOperation::FullDuplex { tx, rx } => TransferDescriptor::new(
                channel,
                tx,
                dreg,
                head.request.operation.length(),
                Direction::FullDuplex,
                requester,
            )
            .with_duplex_rx(rx),
        };
        if head.request.ear != Ear::None {
            self.ear_state.insert(peripheral.id.clone(), head.request.ear.clone());
        }
        let ranges = d.memory_ranges();
        let owned = buffer_regions(kernel.task(requester).expect("requester exists"));
        let confined = ranges.iter().all(|r| owned.iter().any(|(o, _)| o.contains(r)));
        if let Err(e) = engine.configure_channel(d) {
            trace.emit(tick, Subsystem::Dma, "CONFIG_ERROR", Some(requester), format!("req={} {e}", head.id));
            self.notify(
                kernel,
                requester,
                DmaNotification {
                    channel: Some(channel),
                    status: NotifyStatus::Error,
                    request_id: head.id,
                },
                tick,
                trace,
            );
            return;
        }
        kernel.counters.svc_events += 1;
        self.registry[channel as usize] = Some(Registration {
            task: requester,
            request_id: Some(head.id),
            origin: Origin::Service,
        });
        let rec = self.record_mut(head.id);
        rec.channel = Some(channel);
        rec.transfer_ranges = ranges;
        rec.confined = Some(confined);
        trace.emit(
            tick,
            Subsystem::Dma,
            "CONFIGURE",
            Some(requester),
            format!("req={} ch={channel} len={}", head.id, head.request.operation.length()),
        );
    }

    /// Records a channel a task programmed directly.
    pub fn register_raw(&mut self, channel: u32, task: TaskId) {
        if let Some(slot) = self.registry.get_mut(channel as usize) {
            *slot = Some(Registration {
                task,
                request_id: None,
                origin: Origin::Raw,
            });
        }
    }

    /// The completion ISR: notifies each registered owner and frees the
    /// channel. Completions are handled in channel order.
    pub fn isr_deliver(
        &mut self,
        kernel: &mut Kernel,
        mut completions: Vec<Completion>,
        tick: u64,
        trace: &mut Trace,
    ) {
        completions.sort_by_key(|c| c.channel);
        for c in completions {
            let Some(reg) = self.registry.get_mut(c.channel as usize).and_then(Option::take) else {
                trace.emit(tick, Subsystem::Isr, "SPURIOUS", Some(c.owner_task), format!("ch={}", c.channel));
                continue;
            };
            debug_assert_eq!(reg.task, c.owner_task);
            match (reg.origin, reg.request_id) {
                (Origin::Service, Some(id)) => self.notify(
                    kernel,
                    reg.task,
                    DmaNotification {
                        channel: Some(c.channel),
                        status: NotifyStatus::Ok,
                        request_id: id,
                    },
                    tick,
                    trace,
                ),
                _ => trace.emit(tick, Subsystem::Isr, "RAW_DONE", Some(reg.task), format!("ch={}", c.channel)),
            }
        }
    }
}

pub fn reason_tag(r: Reason) -> &'static str {
    match r {
        Reason::Ok => "OK",
        Reason::NoCapability => "NO_CAPABILITY",
        Reason::RightMissing => "RIGHT_MISSING",
        Reason::BufferNotOwned => "BUFFER_NOT_OWNED",
        Reason::EarDenied => "EAR_DENIED",
        Reason::PeripheralUnknown => "PERIPHERAL_UNKNOWN",
        Reason::NotDmaCapable => "NOT_DMA_CAPABLE",
    }
}
