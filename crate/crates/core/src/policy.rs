//! Capability-based DMA policy.
//!
//! A capability pairs one peripheral with a set of rights and the off-chip
//! addressing it may use (extensible access rights, EAR). Capabilities never
//! describe memory: a request's buffers must instead sit inside the
//! requester's own stack or one of its user regions.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::TaskRecord;
use crate::memmap::{AddressRange, EarKind, MemoryProfile, PeripheralKind};
use crate::mpu::{Access, AccessKind};

/// Granted rights flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rights(u8);

impl Rights {
    pub const READ: Rights = Rights(0b001);
    pub const WRITE: Rights = Rights(0b010);
    pub const FULL_DUPLEX: Rights = Rights(0b100);
    pub const ALL: Rights = Rights(0b111);

    pub const fn empty() -> Self {
        Rights(0)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        Rights(bits & Self::ALL.0)
    }

    pub fn contains(self, other: Rights) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn names(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.contains(Rights::READ) {
            out.push("read");
        }
        if self.contains(Rights::WRITE) {
            out.push("write");
        }
        if self.contains(Rights::FULL_DUPLEX) {
            out.push("full_duplex");
        }
        out
    }
}

impl std::ops::BitOr for Rights {
    type Output = Rights;

    fn bitor(self, rhs: Rights) -> Rights {
        Rights(self.0 | rhs.0)
    }
}

impl fmt::Display for Rights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("|"))
    }
}

/// Off-chip addressing parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ear {
    None,
    I2cSlaveAddress(u8),
    SpiSlaveSelect(String),
    AdcChannelMask(u32),
}

impl Ear {
    pub fn kind(&self) -> EarKind {
        match self {
            Ear::None => EarKind::None,
            Ear::I2cSlaveAddress(_) => EarKind::I2cSlaveAddress,
            Ear::SpiSlaveSelect(_) => EarKind::SpiSlaveSelect,
            Ear::AdcChannelMask(_) => EarKind::AdcChannelMask,
        }
    }

    /// Whether a granted EAR covers the requested one: channel masks by
    /// subset, slave addresses and selects by equality.
    pub fn permits(&self, requested: &Ear) -> bool {
        match (self, requested) {
            (Ear::None, Ear::None) => true,
            (Ear::I2cSlaveAddress(g), Ear::I2cSlaveAddress(r)) => g == r,
            (Ear::SpiSlaveSelect(g), Ear::SpiSlaveSelect(r)) => g == r,
            (Ear::AdcChannelMask(g), Ear::AdcChannelMask(r)) => r & !g == 0,
            _ => false,
        }
    }
}

impl fmt::Display for Ear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ear::None => f.write_str("-"),
            Ear::I2cSlaveAddress(a) => write!(f, "i2c={a:#04x}"),
            Ear::SpiSlaveSelect(s) => write!(f, "ss={s}"),
            Ear::AdcChannelMask(m) => write!(f, "adc={m:#x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapabilityError {
    #[error("capability names unknown peripheral {0}")]
    UnknownPeripheral(String),
    #[error("capability on {0} grants no rights")]
    NoRights(String),
    #[error("{0} does not support full-duplex transfers")]
    DuplexUnsupported(String),
    #[error("{peripheral} expects addressing {expected:?}, capability carries {found:?}")]
    EarMismatch {
        peripheral: String,
        expected: EarKind,
        found: EarKind,
    },
}

/// An immutable grant of DMA rights on one peripheral.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaCapability {
    peripheral_id: String,
    rights: Rights,
    ear: Ear,
}

impl DmaCapability {
    pub fn new(
        peripheral_id: impl Into<String>,
        rights: Rights,
        ear: Ear,
        profile: &MemoryProfile,
    ) -> Result<Self, CapabilityError> {
        let peripheral_id = peripheral_id.into();
        let Some(p) = profile.peripheral(&peripheral_id) else {
            return Err(CapabilityError::UnknownPeripheral(peripheral_id));
        };
        if rights.is_empty() {
            return Err(CapabilityError::NoRights(peripheral_id));
        }
        if rights.contains(Rights::FULL_DUPLEX) && !p.kind.supports_duplex() {
            return Err(CapabilityError::DuplexUnsupported(peripheral_id));
        }
        if ear.kind() != p.ear_kind {
            return Err(CapabilityError::EarMismatch {
                peripheral: peripheral_id,
                expected: p.ear_kind,
                found: ear.kind(),
            });
        }
        Ok(Self {
            peripheral_id,
            rights,
            ear,
        })
    }

    pub fn peripheral_id(&self) -> &str {
        &self.peripheral_id
    }

    pub fn rights(&self) -> Rights {
        self.rights
    }

    pub fn ear(&self) -> &Ear {
        &self.ear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OperationKind {
    Read,
    Write,
    FullDuplex,
}

impl OperationKind {
    /// Rights a capability must hold for this operation.
    pub fn required_rights(self) -> Rights {
        match self {
            OperationKind::Read => Rights::READ,
            OperationKind::Write => Rights::WRITE,
            OperationKind::FullDuplex => Rights::ALL,
        }
    }
}

/// Transfer direction together with the requester's buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DmaOperation {
    /// Peripheral to memory.
    Read { into: AddressRange },
    /// Memory to peripheral.
    Write { from: AddressRange },
    FullDuplex { tx: AddressRange, rx: AddressRange },
}

impl DmaOperation {
    pub fn kind(&self) -> OperationKind {
        match self {
            DmaOperation::Read { .. } => OperationKind::Read,
            DmaOperation::Write { .. } => OperationKind::Write,
            DmaOperation::FullDuplex { .. } => OperationKind::FullDuplex,
        }
    }

    /// Each buffer with the access the requester must hold on it: a
    /// peripheral-to-memory transfer writes the buffer, the reverse reads it.
    pub fn buffers(&self) -> Vec<(AddressRange, AccessKind)> {
        match *self {
            DmaOperation::Read { into } => vec![(into, AccessKind::Write)],
            DmaOperation::Write { from } => vec![(from, AccessKind::Read)],
            DmaOperation::FullDuplex { tx, rx } => {
                vec![(tx, AccessKind::Read), (rx, AccessKind::Write)]
            }
        }
    }

    /// Bytes moved by the transfer.
    pub fn length(&self) -> u32 {
        match *self {
            DmaOperation::Read { into } => into.size(),
            DmaOperation::Write { from } => from.size(),
            DmaOperation::FullDuplex { tx, rx } => tx.size().min(rx.size()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaRequest {
    pub requester: crate::kernel::TaskId,
    pub peripheral_id: String,
    pub operation: DmaOperation,
    pub ear: Ear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    Ok,
    NoCapability,
    RightMissing,
    BufferNotOwned,
    EarDenied,
    PeripheralUnknown,
    NotDmaCapable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictDecision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: VerdictDecision,
    pub reason: Reason,
}

impl Verdict {
    pub const ACCEPT: Verdict = Verdict {
        decision: VerdictDecision::Accept,
        reason: Reason::Ok,
    };

    pub fn reject(reason: Reason) -> Self {
        debug_assert_ne!(reason, Reason::Ok);
        Verdict {
            decision: VerdictDecision::Reject,
            reason,
        }
    }

    pub fn is_accept(&self) -> bool {
        self.decision == VerdictDecision::Accept
    }
}

/// Regions a task may name as DMA buffers, each with the task's access on it.
pub fn buffer_regions(task: &TaskRecord) -> Vec<(AddressRange, Access)> {
    let mut out = vec![(task.stack_region, Access::Rw)];
    out.extend(
        task.user_regions
            .iter()
            .map(|u| (u.range, u.permission.at_level(task.privileged))),
    );
    out
}

/// Decides a DMA request. Checks run in a fixed order and the first failure
/// names the verdict: peripheral known, peripheral DMA-capable, any
/// capability on it, required rights, EAR coverage, then buffer ownership.
pub fn validate_request(req: &DmaRequest, task: &TaskRecord, profile: &MemoryProfile) -> Verdict {
    validate_request_counted(req, task, profile).0
}

/// [`validate_request`] plus the number of elementary checks it performed.
pub fn validate_request_counted(
    req: &DmaRequest,
    task: &TaskRecord,
    profile: &MemoryProfile,
) -> (Verdict, u64) {
    let mut checks = 1;
    let Some(peripheral) = profile.peripheral(&req.peripheral_id) else {
        return (Verdict::reject(Reason::PeripheralUnknown), checks);
    };
    checks += 1;
    if !peripheral.dma_capable || peripheral.kind == PeripheralKind::DmaController {
        return (Verdict::reject(Reason::NotDmaCapable), checks);
    }

    let required = req.operation.kind().required_rights();
    let mut on_peripheral = false;
    let mut with_rights = false;
    let mut covered = false;
    for cap in task.capabilities().iter() {
        checks += 1;
        if cap.peripheral_id() != req.peripheral_id {
            continue;
        }
        on_peripheral = true;
        checks += 1;
        if !cap.rights().contains(required) {
            continue;
        }
        with_rights = true;
        checks += 1;
        if cap.ear().permits(&req.ear) {
            covered = true;
            break;
        }
    }
    if !on_peripheral {
        return (Verdict::reject(Reason::NoCapability), checks);
    }
    if !with_rights {
        return (Verdict::reject(Reason::RightMissing), checks);
    }
    if !covered {
        return (Verdict::reject(Reason::EarDenied), checks);
    }

    let regions = buffer_regions(task);
    for (buffer, needed) in req.operation.buffers() {
        let owned = regions.iter().any(|(range, access)| {
            checks += 1;
            range.contains(&buffer) && access.allows(needed)
        });
        if !owned {
            return (Verdict::reject(Reason::BufferNotOwned), checks);
        }
    }
    (Verdict::ACCEPT, checks)
}
