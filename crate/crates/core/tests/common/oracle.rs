//! Naive reference implementations used to cross-check the library.

use capdma_core::metrics::{area_bytes, Area};
use capdma_core::policy::{OperationKind, VerdictDecision};
use capdma_core::{
    Access, AccessKind, AccessQuery, AddressRange, Decision, DmaRequest, Ear, KernelLayout, MemoryProfile,
    MpuConfiguration, PeripheralKind, Reason, Rights, TaskRecord, Verdict,
};

fn in_range(r: &AddressRange, addr: u64) -> bool {
    u64::from(r.base()) <= addr && addr < u64::from(r.base()) + u64::from(r.size())
}

fn level_allows(level: Access, kind: AccessKind) -> bool {
    !matches!((level, kind), (Access::None, _) | (Access::Ro, AccessKind::Write))
}

/// Per-byte scan of all eight slots. The last enabled slot covering a byte
/// decides it; no slot means the background rule.
pub fn brute_force_check(cfg: &MpuConfiguration, q: &AccessQuery, profile: &MemoryProfile) -> Decision {
    let mut ok = true;
    for i in 0..u64::from(q.width) {
        let addr = u64::from(q.addr) + i;
        if addr >= 1 << 32 {
            ok = false;
            continue;
        }
        let mut winner = None;
        for slot in 0..8 {
            if let Some(d) = cfg.slot(slot) {
                if d.enabled && in_range(&d.range, addr) {
                    winner = Some(d);
                }
            }
        }
        let byte_ok = match winner {
            Some(d) => {
                let p = d.permission;
                let level = if q.privileged { p.privileged() } else { p.unprivileged() };
                level_allows(level, q.kind) && !(q.kind == AccessKind::Execute && p.execute_never())
            }
            None => q.privileged && cfg.background_enabled && (q.kind != AccessKind::Execute || addr < 0x2000_0000),
        };
        let system = in_range(&profile.system_partition, addr);
        if !byte_ok || (system && !q.privileged) {
            ok = false;
        }
    }
    if ok {
        Decision::Allow
    } else {
        Decision::Fault
    }
}

fn rights_of(kind: OperationKind) -> Vec<Rights> {
    match kind {
        OperationKind::Read => vec![Rights::READ],
        OperationKind::Write => vec![Rights::WRITE],
        OperationKind::FullDuplex => vec![Rights::READ, Rights::WRITE, Rights::FULL_DUPLEX],
    }
}

/// A request's EAR split into elements: one per ADC channel bit.
fn ear_elements(requested: &Ear) -> Vec<Ear> {
    match requested {
        Ear::AdcChannelMask(m) => (0..32)
            .filter(|b| m & (1 << b) != 0)
            .map(|b| Ear::AdcChannelMask(1 << b))
            .collect(),
        other => vec![other.clone()],
    }
}

fn element_granted(granted: &Ear, element: &Ear) -> bool {
    match (granted, element) {
        (Ear::None, Ear::None) => true,
        (Ear::I2cSlaveAddress(a), Ear::I2cSlaveAddress(b)) => a == b,
        (Ear::SpiSlaveSelect(a), Ear::SpiSlaveSelect(b)) => a == b,
        (Ear::AdcChannelMask(a), Ear::AdcChannelMask(b)) => a & b == *b,
        _ => false,
    }
}

fn same_ear_family(a: &Ear, b: &Ear) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}

/// Enumerates every (capability, right, EAR element) and every (buffer,
/// region) pair, then reads the verdict off the collected facts.
pub fn brute_force_validate(req: &DmaRequest, task: &TaskRecord, profile: &MemoryProfile) -> Verdict {
    let reject = |reason| Verdict {
        decision: VerdictDecision::Reject,
        reason,
    };
    let Some(p) = profile.peripherals.iter().find(|p| p.id == req.peripheral_id) else {
        return reject(Reason::PeripheralUnknown);
    };
    if !p.dma_capable || p.kind == PeripheralKind::DmaController {
        return reject(Reason::NotDmaCapable);
    }

    let kind = req.operation.kind();
    let elements = ear_elements(&req.ear);
    let mut any_cap = false;
    let mut any_rights = false;
    let mut any_cover = false;
    for cap in task.capabilities() {
        if cap.peripheral_id() != req.peripheral_id {
            continue;
        }
        any_cap = true;
        let mut all_rights = true;
        for right in rights_of(kind) {
            if !cap.rights().contains(right) {
                all_rights = false;
            }
        }
        if !all_rights {
            continue;
        }
        any_rights = true;
        let mut covered = same_ear_family(cap.ear(), &req.ear);
        for e in &elements {
            if !element_granted(cap.ear(), e) {
                covered = false;
            }
        }
        if covered {
            any_cover = true;
        }
    }
    if !any_cap {
        return reject(Reason::NoCapability);
    }
    if !any_rights {
        return reject(Reason::RightMissing);
    }
    if !any_cover {
        return reject(Reason::EarDenied);
    }

    let mut regions = vec![(task.stack_region, Access::Rw)];
    for u in &task.user_regions {
        let level = if task.privileged {
            u.permission.privileged()
        } else {
            u.permission.unprivileged()
        };
        regions.push((u.range, level));
    }
    for (buffer, needed) in req.operation.buffers() {
        let mut owned = false;
        for (range, level) in &regions {
            let inside = range.base() <= buffer.base() && buffer.end() <= range.end();
            if inside && level_allows(*level, needed) {
                owned = true;
            }
        }
        if !owned {
            return reject(Reason::BufferNotOwned);
        }
    }
    Verdict::ACCEPT
}

/// Bytes of `area` an unprivileged read may touch, counted one address at
/// a time through [`brute_force_check`].
pub fn brute_force_exposed(
    cfg: &MpuConfiguration,
    area: Area,
    profile: &MemoryProfile,
    layout: &KernelLayout,
) -> u64 {
    let mut n = 0;
    for &(lo, hi) in area_bytes(area, profile, layout).spans() {
        for addr in lo..hi {
            let q = AccessQuery::new(addr as u32, 1, AccessKind::Read, false);
            if brute_force_check(cfg, &q, profile) == Decision::Allow {
                n += 1;
            }
        }
    }
    n
}
