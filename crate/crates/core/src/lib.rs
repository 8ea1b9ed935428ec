//! Simulator for an MPU-protected microkernel whose DMA traffic is mediated
//! by a trusted, capability-checking DMA service.

pub mod dma;
pub mod dmatask;
pub mod kernel;
pub mod lint;
pub mod memmap;
pub mod metrics;
pub mod mpu;
pub mod policy;
pub mod report;
pub mod scenario;
pub mod script;
pub mod sim;
pub mod trace;

pub use dma::{ByteStore, Direction, DmaEngineState, TransferDescriptor};
pub use dmatask::{DmaNotification, DmaService, NotifyStatus, RejectReason};
pub use kernel::{
    build_mpu_configuration, create_task, FaultEvent, FaultKind, Kernel, KernelLayout, Mode,
    TaskId, TaskRecord, TaskSpec, TaskState, UserRegion,
};
pub use memmap::{AddressRange, DescriptorHome, EarKind, MemoryProfile, PeripheralKind, PeripheralRecord};
pub use metrics::{exposure, fit_linear, worst_case_exposure, Area, CounterReport, ExposureRow, LinearFit};
pub use mpu::{check_access, Access, AccessKind, AccessQuery, Decision, MpuConfiguration, MpuRegionDescriptor, Permission};
pub use policy::{validate_request, DmaCapability, DmaOperation, DmaRequest, Ear, Reason, Rights, Verdict};
pub use report::SimulationReport;
pub use scenario::{Scenario, ScenarioError};
pub use sim::{simulate, Simulation, Termination};
pub use trace::{Trace, TraceEvent};
