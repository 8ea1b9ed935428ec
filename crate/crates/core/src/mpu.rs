//! Eight-slot MPU with a privileged-only background region.
//!
//! Overlapping regions resolve to the highest slot number. Multi-byte
//! accesses are checked byte by byte and allowed only when every byte is.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memmap::{AddressRange, MemoryProfile, ADDRESS_SPACE_END, CODE_PARTITION};

pub const REGION_SLOTS: usize = 8;
pub const MIN_REGION_SIZE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Access {
    None,
    Ro,
    Rw,
}

impl Access {
    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read | AccessKind::Execute => self != Access::None,
            AccessKind::Write => self == Access::Rw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permission {
    privileged: Access,
    unprivileged: Access,
    execute_never: bool,
}

impl Permission {
    pub fn new(privileged: Access, unprivileged: Access, execute_never: bool) -> Result<Self, MpuError> {
        if unprivileged > privileged {
            return Err(MpuError::PermissionOrder { privileged, unprivileged });
        }
        Ok(Self {
            privileged,
            unprivileged,
            execute_never,
        })
    }

    pub fn privileged(&self) -> Access {
        self.privileged
    }

    pub fn unprivileged(&self) -> Access {
        self.unprivileged
    }

    pub fn execute_never(&self) -> bool {
        self.execute_never
    }

    pub fn at_level(&self, privileged: bool) -> Access {
        if privileged {
            self.privileged
        } else {
            self.unprivileged
        }
    }

    pub fn allows(&self, kind: AccessKind, privileged: bool) -> bool {
        let granted = self.at_level(privileged).allows(kind);
        match kind {
            AccessKind::Execute => granted && !self.execute_never,
            _ => granted,
        }
    }

    pub fn read_only_exec() -> Self {
        Self::new(Access::Ro, Access::Ro, false).expect("ordered")
    }

    pub fn read_write_data() -> Self {
        Self::new(Access::Rw, Access::Rw, true).expect("ordered")
    }

    pub fn privileged_exec() -> Self {
        Self::new(Access::Ro, Access::None, false).expect("ordered")
    }

    pub fn privileged_data() -> Self {
        Self::new(Access::Rw, Access::None, true).expect("ordered")
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P:{:?} U:{:?}{}",
            self.privileged,
            self.unprivileged,
            if self.execute_never { " XN" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MpuError {
    #[error("region size {0:#x} is not a power of two of at least 32 bytes")]
    Size(u32),
    #[error("region base {base:#010x} is not aligned to its size {size:#x}")]
    Alignment { base: u32, size: u32 },
    #[error("region number {0} is outside 0..=7")]
    Number(u8),
    #[error("unprivileged access {unprivileged:?} exceeds privileged access {privileged:?}")]
    PermissionOrder { privileged: Access, unprivileged: Access },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpuRegionDescriptor {
    pub number: u8,
    pub range: AddressRange,
    pub permission: Permission,
    pub enabled: bool,
}

impl MpuRegionDescriptor {
    pub fn new(number: u8, range: AddressRange, permission: Permission) -> Self {
        Self {
            number,
            range,
            permission,
            enabled: true,
        }
    }
}

/// Size must be a power of two of at least 32 bytes; base must be size-aligned.
pub fn validate_range(range: &AddressRange) -> Result<(), MpuError> {
    let size = range.size();
    if !size.is_power_of_two() || size < MIN_REGION_SIZE {
        return Err(MpuError::Size(size));
    }
    if !range.base().is_multiple_of(size) {
        return Err(MpuError::Alignment {
            base: range.base(),
            size,
        });
    }
    Ok(())
}

pub fn validate_descriptor(d: &MpuRegionDescriptor) -> Result<(), MpuError> {
    if usize::from(d.number) >= REGION_SLOTS {
        return Err(MpuError::Number(d.number));
    }
    validate_range(&d.range)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpuConfiguration {
    regions: [Option<MpuRegionDescriptor>; REGION_SLOTS],
    pub background_enabled: bool,
}

impl MpuConfiguration {
    pub fn new(background_enabled: bool) -> Self {
        Self {
            regions: [None; REGION_SLOTS],
            background_enabled,
        }
    }

    /// Installs `d` in the slot named by its number.
    pub fn set(&mut self, d: MpuRegionDescriptor) -> Result<(), MpuError> {
        validate_descriptor(&d)?;
        self.regions[usize::from(d.number)] = Some(d);
        Ok(())
    }

    pub fn clear(&mut self, slot: usize) {
        self.regions[slot] = None;
    }

    pub fn slot(&self, slot: usize) -> Option<&MpuRegionDescriptor> {
        self.regions.get(slot).and_then(Option::as_ref)
    }

    pub fn slots(&self) -> &[Option<MpuRegionDescriptor>; REGION_SLOTS] {
        &self.regions
    }

    /// Enabled regions, lowest slot first.
    pub fn enabled(&self) -> impl DoubleEndedIterator<Item = &MpuRegionDescriptor> {
        self.regions.iter().flatten().filter(|d| d.enabled)
    }

    /// The region that decides the permission for `addr`, if any.
    pub fn governing_region(&self, addr: u64) -> Option<&MpuRegionDescriptor> {
        self.enabled().rev().find(|d| d.range.contains_addr(addr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessQuery {
    pub addr: u32,
    pub width: u32,
    pub kind: AccessKind,
    pub privileged: bool,
}

impl AccessQuery {
    pub fn new(addr: u32, width: u32, kind: AccessKind, privileged: bool) -> Self {
        Self {
            addr,
            width,
            kind,
            privileged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Allow,
    Fault,
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

fn background_allows(cfg: &MpuConfiguration, addr: u64, kind: AccessKind, privileged: bool) -> bool {
    if !(privileged && cfg.background_enabled) {
        return false;
    }
    kind != AccessKind::Execute || CODE_PARTITION.contains_addr(addr)
}

/// Core-processor access check.
///
/// The span is walked in segments over which the governing region cannot
/// change, so long spans cost one step per region boundary rather than per
/// byte.
pub fn check_access(cfg: &MpuConfiguration, q: &AccessQuery, profile: &MemoryProfile) -> Decision {
    let end = u64::from(q.addr) + u64::from(q.width);
    if end > ADDRESS_SPACE_END {
        return Decision::Fault;
    }
    let boundaries = [
        u64::from(profile.system_partition.base()),
        profile.system_partition.end(),
        CODE_PARTITION.end(),
    ];
    let mut addr = u64::from(q.addr);
    while addr < end {
        let mut segment_end = end;
        for d in cfg.enabled() {
            let lo = u64::from(d.range.base());
            if lo > addr {
                segment_end = segment_end.min(lo);
            } else if d.range.end() > addr {
                segment_end = segment_end.min(d.range.end());
            }
        }
        for &b in &boundaries {
            if b > addr {
                segment_end = segment_end.min(b);
            }
        }

        let allowed = match cfg.governing_region(addr) {
            Some(d) => d.permission.allows(q.kind, q.privileged),
            None => background_allows(cfg, addr, q.kind, q.privileged),
        };
        if !allowed || (!q.privileged && profile.in_system_partition(addr)) {
            return Decision::Fault;
        }
        addr = segment_end;
    }
    Decision::Allow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memmap::{DescriptorHome, MemoryProfile, PERIPHERAL_PARTITION, SYSTEM_PARTITION};

    fn r(base: u32, size: u32) -> AddressRange {
        AddressRange::new(base, size).unwrap()
    }

    fn profile() -> MemoryProfile {
        MemoryProfile {
            flash: r(0x0800_0000, 0x1000),
            ram: r(0x2000_0000, 0x1000),
            peripheral_partition: PERIPHERAL_PARTITION,
            system_partition: SYSTEM_PARTITION,
            peripherals: vec![],
            dma_channels: 1,
            dma_descriptor_home: DescriptorHome::Mmio,
            descriptor_arena: None,
            transfer_rate: 4,
        }
    }

    fn perm(p: Access, u: Access, xn: bool) -> Permission {
        Permission::new(p, u, xn).unwrap()
    }

    #[test]
    fn descriptor_legality() {
        let p = Permission::read_write_data();
        assert!(validate_descriptor(&MpuRegionDescriptor::new(0, r(0x2000_0040, 64), p)).is_ok());
        assert_eq!(
            validate_descriptor(&MpuRegionDescriptor::new(0, r(0x2000_0020, 64), p)),
            Err(MpuError::Alignment { base: 0x2000_0020, size: 64 })
        );
        assert_eq!(
            validate_descriptor(&MpuRegionDescriptor::new(0, r(0x2000_0000, 48), p)),
            Err(MpuError::Size(48))
        );
        assert_eq!(
            validate_descriptor(&MpuRegionDescriptor::new(0, r(0x2000_0000, 16), p)),
            Err(MpuError::Size(16))
        );
        assert_eq!(
            validate_descriptor(&MpuRegionDescriptor::new(8, r(0x2000_0000, 32), p)),
            Err(MpuError::Number(8))
        );
    }

    #[test]
    fn permission_order_invariant() {
        assert!(Permission::new(Access::Ro, Access::Rw, true).is_err());
        assert!(Permission::new(Access::None, Access::Ro, true).is_err());
        assert!(Permission::new(Access::Rw, Access::Ro, true).is_ok());
    }

    #[test]
    fn unprivileged_read_in_ro_region() {
        let mut cfg = MpuConfiguration::new(true);
        cfg.set(MpuRegionDescriptor::new(1, r(0x2000_0000, 256), perm(Access::Rw, Access::Ro, true)))
            .unwrap();
        let q = AccessQuery::new(0x2000_0010, 4, AccessKind::Read, false);
        assert_eq!(check_access(&cfg, &q, &profile()), Decision::Allow);
    }

    #[test]
    fn higher_slot_wins_on_overlap() {
        let mut cfg = MpuConfiguration::new(true);
        cfg.set(MpuRegionDescriptor::new(2, r(0x2000_0000, 256), perm(Access::Rw, Access::Rw, true)))
            .unwrap();
        cfg.set(MpuRegionDescriptor::new(3, r(0x2000_0080, 64), perm(Access::Rw, Access::Ro, true)))
            .unwrap();
        let p = profile();
        let write = |addr| check_access(&cfg, &AccessQuery::new(addr, 1, AccessKind::Write, false), &p);
        assert_eq!(write(0x2000_0090), Decision::Fault);
        assert_eq!(write(0x2000_0000), Decision::Allow);
        // a span straddling into the RO overlap faults as a whole
        let q = AccessQuery::new(0x2000_007E, 4, AccessKind::Write, false);
        assert_eq!(check_access(&cfg, &q, &p), Decision::Fault);
    }

    #[test]
    fn background_is_privileged_only() {
        let cfg = MpuConfiguration::new(true);
        let p = profile();
        let read = |privileged| check_access(&cfg, &AccessQuery::new(0x2000_0500, 4, AccessKind::Read, privileged), &p);
        assert_eq!(read(true), Decision::Allow);
        assert_eq!(read(false), Decision::Fault);
        let off = MpuConfiguration::new(false);
        assert_eq!(
            check_access(&off, &AccessQuery::new(0x2000_0500, 4, AccessKind::Read, true), &p),
            Decision::Fault
        );
    }

    #[test]
    fn background_execute_only_from_code() {
        let cfg = MpuConfiguration::new(true);
        let p = profile();
        let exec = |addr| check_access(&cfg, &AccessQuery::new(addr, 2, AccessKind::Execute, true), &p);
        assert_eq!(exec(0x0800_0000), Decision::Allow);
        assert_eq!(exec(0x2000_0000), Decision::Fault);
        assert_eq!(exec(0x4000_0000), Decision::Fault);
    }

    #[test]
    fn execute_needs_read_and_no_xn() {
        let mut cfg = MpuConfiguration::new(true);
        cfg.set(MpuRegionDescriptor::new(0, r(0x0800_0000, 0x400), Permission::read_only_exec()))
            .unwrap();
        cfg.set(MpuRegionDescriptor::new(1, r(0x2000_0000, 0x400), Permission::read_write_data()))
            .unwrap();
        let p = profile();
        let exec = |addr| check_access(&cfg, &AccessQuery::new(addr, 2, AccessKind::Execute, false), &p);
        assert_eq!(exec(0x0800_0010), Decision::Allow);
        assert_eq!(exec(0x2000_0010), Decision::Fault);
    }

    #[test]
    fn system_partition_needs_privilege() {
        let mut cfg = MpuConfiguration::new(true);
        cfg.set(MpuRegionDescriptor::new(
            5,
            r(0xE000_0000, 0x1000_0000),
            perm(Access::Rw, Access::Rw, true),
        ))
        .unwrap();
        let p = profile();
        let write = |privileged| {
            check_access(&cfg, &AccessQuery::new(0xE000_E010, 4, AccessKind::Write, privileged), &p)
        };
        assert_eq!(write(false), Decision::Fault);
        assert_eq!(write(true), Decision::Allow);
    }

    #[test]
    fn span_past_address_space_faults() {
        let cfg = MpuConfiguration::new(true);
        let q = AccessQuery::new(0xFFFF_FFFE, 4, AccessKind::Read, true);
        assert_eq!(check_access(&cfg, &q, &profile()), Decision::Fault);
    }

    #[test]
    fn disabled_region_is_ignored() {
        let mut cfg = MpuConfiguration::new(true);
        let mut d = MpuRegionDescriptor::new(4, r(0x2000_0000, 256), Permission::read_write_data());
        d.enabled = false;
        cfg.set(d).unwrap();
        let q = AccessQuery::new(0x2000_0000, 1, AccessKind::Read, false);
        assert_eq!(check_access(&cfg, &q, &profile()), Decision::Fault);
    }
}
