//! Security metrics and cost counters.
//!
//! Exposure is the share of an area's bytes that a task can read or write
//! unprivileged while it runs. It is computed by walking the MPU slots from
//! highest to lowest and letting each slot claim the bytes no higher slot
//! has claimed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    build_mpu_configuration, check_hardening, ConfigError, KernelLayout, Mode, TaskId,
    TaskRecord, UserRegion, MAX_USER_REGIONS,
};
use crate::memmap::{AddressRange, DescriptorHome, MemoryProfile, PeripheralKind, RangeSet};
use crate::mpu::{Access, MpuConfiguration, Permission, MIN_REGION_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Area {
    FlashKernel,
    FlashSyscalls,
    FlashUser,
    RamKernel,
    RamUser,
    PeriphSystem,
    PeriphStandard,
}

impl Area {
    pub const ALL: [Area; 7] = [
        Area::FlashKernel,
        Area::FlashSyscalls,
        Area::FlashUser,
        Area::RamKernel,
        Area::RamUser,
        Area::PeriphSystem,
        Area::PeriphStandard,
    ];

    pub fn is_flash(self) -> bool {
        matches!(self, Area::FlashKernel | Area::FlashSyscalls | Area::FlashUser)
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("enum serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

/// Bytes making up each area for a profile and layout.
pub fn area_bytes(area: Area, profile: &MemoryProfile, layout: &KernelLayout) -> RangeSet {
    let flash = RangeSet::from_ranges([&profile.flash]);
    let ram = RangeSet::from_ranges([&profile.ram]);
    let kcode = RangeSet::from_ranges([&layout.kernel_code_region]);
    let sys = RangeSet::from_ranges([&layout.syscalls_region]);
    let kdata = RangeSet::from_ranges([&layout.kernel_data_region]);
    let periph = |system: bool| {
        RangeSet::from_ranges(
            profile
                .peripherals
                .iter()
                .filter(|p| (p.kind == PeripheralKind::System) == system)
                .map(|p| &p.range),
        )
    };
    match area {
        Area::FlashKernel => kcode.intersect(&flash),
        Area::FlashSyscalls => sys.intersect(&flash),
        Area::FlashUser => flash.subtract(&kcode).subtract(&sys),
        Area::RamKernel => kdata.intersect(&ram),
        Area::RamUser => ram.subtract(&kdata),
        Area::PeriphSystem => periph(true),
        Area::PeriphStandard => periph(false),
    }
}

/// Bytes an unprivileged access may touch under `cfg`: readable or
/// writable, and separately executable. The system partition is removed
/// because it always requires privilege.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExposedSets {
    pub data: RangeSet,
    pub exec: RangeSet,
}

pub fn exposed_sets(cfg: &MpuConfiguration, profile: &MemoryProfile) -> ExposedSets {
    let mut claimed = RangeSet::new();
    let mut out = ExposedSets::default();
    for d in cfg.enabled().rev() {
        let own = RangeSet::from_ranges([&d.range]);
        let fresh = own.subtract(&claimed);
        let p = d.permission;
        if p.unprivileged() != Access::None {
            out.data = out.data.union(&fresh);
            if !p.execute_never() {
                out.exec = out.exec.union(&fresh);
            }
        }
        claimed = claimed.union(&own);
    }
    let sys = RangeSet::from_ranges([&profile.system_partition]);
    out.data = out.data.subtract(&sys);
    out.exec = out.exec.subtract(&sys);
    out
}

/// Ranges whose unprivileged reachability counts as exposing the DMA
/// controller: its register interface, plus a kernel-RAM descriptor arena.
pub fn dma_control_surface(profile: &MemoryProfile) -> RangeSet {
    let mut set = RangeSet::from_ranges(profile.dma_controllers().map(|p| &p.range));
    if profile.dma_descriptor_home == DescriptorHome::KernelRam {
        if let Some(a) = &profile.descriptor_arena {
            set.insert(a);
        }
    }
    set
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaExposure {
    pub area: Area,
    pub exposed_bytes: u64,
    pub total_bytes: u64,
    pub ratio_percent: f64,
}

impl AreaExposure {
    fn new(area: Area, exposed_bytes: u64, total_bytes: u64) -> Self {
        let ratio = if total_bytes == 0 {
            0.0
        } else {
            round2(100.0 * exposed_bytes as f64 / total_bytes as f64)
        };
        Self {
            area,
            exposed_bytes,
            total_bytes,
            ratio_percent: ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Standard,
    WorstCase,
}

/// One exposure row: a task under one configuration variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExposureRow {
    pub task: TaskId,
    pub name: String,
    pub variant: Variant,
    pub mode: Mode,
    pub areas: Vec<AreaExposure>,
    pub dma_controller_exposed: bool,
    /// Unprivileged-executable bytes in the slot. A proxy for code-reuse
    /// surface, not a gadget count.
    pub exposed_executable_bytes: u64,
    /// Worst case only: the user regions chosen for each area.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub chosen_regions: BTreeMap<Area, Vec<AddressRange>>,
}

impl ExposureRow {
    pub fn area(&self, area: Area) -> &AreaExposure {
        self.areas.iter().find(|a| a.area == area).expect("all areas present")
    }
}

/// Standard exposure of a task under its declared configuration.
pub fn exposure(
    task: &TaskRecord,
    cfg: &MpuConfiguration,
    profile: &MemoryProfile,
    layout: &KernelLayout,
) -> ExposureRow {
    let sets = exposed_sets(cfg, profile);
    let areas = Area::ALL
        .iter()
        .map(|&a| {
            let total = area_bytes(a, profile, layout);
            AreaExposure::new(a, total.intersect(&sets.data).len(), total.len())
        })
        .collect();
    ExposureRow {
        task: task.id,
        name: task.name.clone(),
        variant: Variant::Standard,
        mode: layout.mode,
        areas,
        dma_controller_exposed: !sets.data.intersect(&dma_control_surface(profile)).is_empty(),
        exposed_executable_bytes: sets.exec.len(),
        chosen_regions: BTreeMap::new(),
    }
}

fn worst_permission(area: Area) -> Permission {
    if area.is_flash() {
        Permission::read_only_exec()
    } else {
        Permission::read_write_data()
    }
}

/// Greedy choice of up to three legal user regions maximising the newly
/// exposed bytes of `area`. Ties prefer the smaller block, then the lower
/// base. Legality is descriptor legality plus, in DBOX mode, the creation
/// rules.
pub fn worst_case_regions(
    task: &TaskRecord,
    area: Area,
    others: &[TaskRecord],
    profile: &MemoryProfile,
    layout: &KernelLayout,
) -> Result<Vec<UserRegion>, ConfigError> {
    let target = area_bytes(area, profile, layout);
    let permission = worst_permission(area);
    let mut probe = task.clone();
    probe.user_regions.clear();
    let base_cfg = build_mpu_configuration(&probe, layout, profile)?;
    let user_slots = layout.mode.user_slots();
    let top_user = user_slots[MAX_USER_REGIONS - 1];
    // bytes held by slots above the user slots can never be gained
    let mut blocked = RangeSet::from_ranges([&profile.system_partition]);
    for d in base_cfg.enabled().filter(|d| d.number as usize > top_user) {
        blocked.insert(&d.range);
    }
    let mut exposed = exposed_sets(&base_cfg, profile).data;
    let mut chosen = Vec::new();
    let (Some(first), Some(last)) = (target.spans().first(), target.spans().last()) else {
        return Ok(chosen);
    };
    let (lo, hi) = (first.0, last.1);
    for _ in 0..MAX_USER_REGIONS {
        let mut best: Option<(u64, AddressRange)> = None;
        for k in (MIN_REGION_SIZE.trailing_zeros()..=31).rev() {
            let size = 1u64 << k;
            if best.is_some_and(|(g, _)| size < g) {
                continue;
            }
            let mut base = lo / size * size;
            while base < hi {
                let block = AddressRange::new(base as u32, size as u32).expect("aligned block fits");
                let gain = RangeSet::from_ranges([&block])
                    .intersect(&target)
                    .subtract(&exposed)
                    .subtract(&blocked)
                    .len();
                let better = match best {
                    None => gain > 0,
                    Some((g, b)) => gain > g || (gain == g && block.size() < b.size()),
                };
                if better && legal(task, &block, others, profile, layout) {
                    best = Some((gain, block));
                }
                base += size;
            }
        }
        let Some((_, block)) = best else { break };
        exposed.insert(&block);
        exposed = exposed.subtract(&blocked);
        chosen.push(UserRegion {
            range: block,
            permission,
        });
    }
    Ok(chosen)
}

fn legal(
    task: &TaskRecord,
    block: &AddressRange,
    others: &[TaskRecord],
    profile: &MemoryProfile,
    layout: &KernelLayout,
) -> bool {
    if layout.mode == Mode::FmpuCompat {
        return true;
    }
    let mut scratch = 0;
    check_hardening(
        &[("candidate".to_string(), *block)],
        Some(task.id),
        others,
        profile,
        layout,
        &mut scratch,
    )
    .is_ok()
}

/// Worst-case row: each area is scored under the user regions that expose
/// the most of that area.
pub fn worst_case_exposure(
    task: &TaskRecord,
    others: &[TaskRecord],
    profile: &MemoryProfile,
    layout: &KernelLayout,
) -> Result<ExposureRow, ConfigError> {
    let mut areas = Vec::new();
    let mut chosen_regions = BTreeMap::new();
    let mut dma_exposed = false;
    let mut exec = 0;
    let surface = dma_control_surface(profile);
    for area in Area::ALL {
        let regions = worst_case_regions(task, area, others, profile, layout)?;
        let mut variant = task.clone();
        variant.user_regions = regions.clone();
        let cfg = build_mpu_configuration(&variant, layout, profile)?;
        let sets = exposed_sets(&cfg, profile);
        let total = area_bytes(area, profile, layout);
        areas.push(AreaExposure::new(area, total.intersect(&sets.data).len(), total.len()));
        dma_exposed |= !sets.data.intersect(&surface).is_empty();
        exec = exec.max(sets.exec.len());
        chosen_regions.insert(area, regions.iter().map(|r| r.range).collect());
    }
    Ok(ExposureRow {
        task: task.id,
        name: task.name.clone(),
        variant: Variant::WorstCase,
        mode: layout.mode,
        areas,
        dma_controller_exposed: dma_exposed,
        exposed_executable_bytes: exec,
        chosen_regions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreationCount {
    pub task: TaskId,
    pub existing_tasks: usize,
    pub checks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationCount {
    pub request: u32,
    pub checks: u64,
}

/// Abstract cost counters accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterReport {
    pub context_switches: u64,
    pub dynamic_regions_written: u64,
    pub creation_intersection_checks: Vec<CreationCount>,
    pub validation_checks: Vec<ValidationCount>,
    pub svc_events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FitError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points share the same n")]
    Degenerate,
}

/// Fits `y = a + b n`. `exact` is decided in integer arithmetic: every
/// point must be collinear with the first two distinct abscissae.
pub fn fit_linear(points: &[(u64, u64)]) -> Result<LinearFit, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    let (x0, y0) = points[0];
    let Some(&(x1, y1)) = points.iter().find(|p| p.0 != x0) else {
        return Err(FitError::Degenerate);
    };
    let (dx, dy) = (x1 as i128 - x0 as i128, y1 as i128 - y0 as i128);
    let exact = points
        .iter()
        .all(|&(x, y)| (y as i128 - y0 as i128) * dx == (x as i128 - x0 as i128) * dy);

    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 as f64 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let slope = if exact { dy as f64 / dx as f64 } else { sxy / sxx };
    let intercept = if exact {
        y0 as f64 - slope * x0 as f64
    } else {
        my - slope * mx
    };
    Ok(LinearFit {
        intercept,
        slope,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_exact_line() {
        let f = fit_linear(&[(0, 13047), (1, 13332), (2, 13617), (3, 13902)]).unwrap();
        assert!(f.exact);
        assert_eq!(f.slope, 285.0);
        assert_eq!(f.intercept, 13047.0);
    }

    #[test]
    fn fit_constant_series() {
        let f = fit_linear(&[(0, 0), (1, 0), (2, 0)]).unwrap();
        assert!(f.exact);
        assert_eq!(f.slope, 0.0);
    }

    #[test]
    fn fit_errors_and_inexact() {
        assert_eq!(fit_linear(&[(2, 1), (2, 5), (2, 9)]), Err(FitError::Degenerate));
        assert_eq!(fit_linear(&[(0, 1), (1, 2)]), Err(FitError::TooFewPoints(2)));
        let f = fit_linear(&[(0, 0), (1, 1), (2, 4)]).unwrap();
        assert!(!f.exact);
        assert!((f.slope - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ratio_rounding() {
        let a = AreaExposure::new(Area::RamUser, 1, 3);
        assert_eq!(a.ratio_percent, 33.33);
        assert_eq!(AreaExposure::new(Area::RamUser, 0, 0).ratio_percent, 0.0);
    }
}
