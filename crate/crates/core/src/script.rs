//! Scripted task behaviour. Each scheduled tick a task performs one step.

use serde::{Deserialize, Serialize};

use crate::dma::Direction;
use crate::kernel::UserRegion;
use crate::memmap::AddressRange;
use crate::policy::{DmaOperation, Ear};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    MemRead {
        addr: u32,
        len: u32,
    },
    MemWrite {
        addr: u32,
        len: u32,
        fill: u8,
    },
    Exec {
        addr: u32,
    },
    /// A supervisor call issued from instruction address `at`.
    Syscall {
        at: u32,
    },
    DmaRequest {
        at: u32,
        peripheral: String,
        operation: DmaOperation,
        ear: Ear,
    },
    /// Programs a DMA channel directly through its configuration registers.
    RawDmaConfig {
        channel: u32,
        source: AddressRange,
        destination: AddressRange,
        length: u32,
        direction: Direction,
    },
    RedefineRegions {
        at: u32,
        regions: Vec<UserRegion>,
    },
    WaitNotify,
    Nop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    MemRead,
    MemWrite,
    Exec,
    Syscall,
    DmaRequest,
    RawDmaConfig,
    RedefineRegions,
    WaitNotify,
    Nop,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::MemRead { .. } => ActionKind::MemRead,
            Action::MemWrite { .. } => ActionKind::MemWrite,
            Action::Exec { .. } => ActionKind::Exec,
            Action::Syscall { .. } => ActionKind::Syscall,
            Action::DmaRequest { .. } => ActionKind::DmaRequest,
            Action::RawDmaConfig { .. } => ActionKind::RawDmaConfig,
            Action::RedefineRegions { .. } => ActionKind::RedefineRegions,
            Action::WaitNotify => ActionKind::WaitNotify,
            Action::Nop => ActionKind::Nop,
        }
    }
}

/// An action, optionally gated behind a scenario toggle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub action: Action,
    pub toggle: Option<String>,
}

impl Step {
    pub fn new(action: Action) -> Self {
        Self { action, toggle: None }
    }

    pub fn enabled(&self, toggles: &std::collections::BTreeMap<String, bool>) -> bool {
        match &self.toggle {
            None => true,
            Some(name) => toggles.get(name).copied().unwrap_or(false),
        }
    }
}
