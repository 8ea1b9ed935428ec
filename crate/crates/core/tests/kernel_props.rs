mod common;

use capdma_core::dma::{raw_dma_config_via_mmio, RawOutcome};
use capdma_core::kernel::TaskRole;
use capdma_core::metrics::exposed_sets;
use capdma_core::memmap::RangeSet;
use capdma_core::{
    build_mpu_configuration, exposure, worst_case_exposure, Access, AddressRange, Area, Direction, DmaEngineState,
    Kernel, Mode, Permission, TaskSpec, TaskState, TransferDescriptor, UserRegion,
};
use proptest::prelude::*;

use common::{r, toy_layout, toy_profile};

/// Aligned block of `2^log2` bytes somewhere in `[lo, lo + span)`.
fn block(lo: u32, span: u32, log2: std::ops::RangeInclusive<u32>) -> impl Strategy<Value = AddressRange> {
    (log2, 0..span).prop_map(move |(k, off)| {
        let size = 1u32 << k;
        r((lo + off) & !(size - 1), size)
    })
}

fn any_region() -> impl Strategy<Value = AddressRange> {
    prop_oneof![
        block(0x2000_0000, 0x4000, 5..=12),
        block(0x4001_0000, 0x1_8000, 5..=14),
        block(0x0800_0000, 0x1_0000, 5..=14),
        block(0xE000_E000, 0x1000, 5..=8),
    ]
}

fn permission() -> impl Strategy<Value = Permission> {
    prop_oneof![
        Just(Permission::read_write_data()),
        Just(Permission::read_only_exec()),
        Just(Permission::new(Access::Rw, Access::Ro, true).unwrap()),
        Just(Permission::privileged_data()),
    ]
}

fn spec() -> impl Strategy<Value = TaskSpec> {
    (
        block(0x2000_0000, 0x4000, 8..=11),
        0u32..12,
        prop::collection::vec((any_region(), permission()), 0..=3),
    )
        .prop_map(|(stack, code, regions)| TaskSpec {
            name: format!("t{:x}", stack.base()),
            privileged: false,
            code_region: r(0x0800_4000 + code * 0x1000, 0x1000),
            stack_region: stack,
            user_regions: regions
                .into_iter()
                .map(|(range, permission)| UserRegion { range, permission })
                .collect(),
            capabilities: vec![],
            behavior: vec![],
            period: None,
            iterations: None,
        })
}

fn boot(mode: Mode, specs: &[TaskSpec]) -> (Kernel, Vec<u64>) {
    let mut k = Kernel::new(toy_profile(), toy_layout(mode));
    let checks = specs
        .iter()
        .map(|s| k.spawn(s.clone(), TaskRole::User, 0).1.intersection_checks)
        .collect();
    (k, checks)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dbox_never_exposes_kernel_or_controller(specs in prop::collection::vec(spec(), 1..5)) {
        let (k, _) = boot(Mode::Dbox, &specs);
        let live: Vec<_> = k.tasks().iter().filter(|t| t.state != TaskState::Voided).cloned().collect();
        for t in &live {
            let cfg = build_mpu_configuration(t, &k.layout, &k.profile).unwrap();
            let row = exposure(t, &cfg, &k.profile, &k.layout);
            prop_assert_eq!(row.area(Area::FlashKernel).exposed_bytes, 0);
            prop_assert_eq!(row.area(Area::RamKernel).exposed_bytes, 0);
            prop_assert!(!row.dma_controller_exposed);

            let data = exposed_sets(&cfg, &k.profile).data;
            for earlier in live.iter().filter(|o| o.id < t.id) {
                let stack = RangeSet::from_ranges([&earlier.stack_region]);
                prop_assert!(data.intersect(&stack).is_empty(), "{} sees stack of {}", t.name, earlier.name);
            }
        }
    }

    #[test]
    fn creation_checks_follow_formula(specs in prop::collection::vec(spec(), 1..6)) {
        let (k, checks) = boot(Mode::Dbox, &specs);
        let controllers = k.profile.dma_controllers().count() as u64;
        let mut live_before = 0u64;
        for (t, n) in k.tasks().iter().zip(checks) {
            if t.state != TaskState::Voided {
                let guarded = 1 + t.user_regions.len() as u64;
                prop_assert_eq!(n, guarded * (controllers + 2 + live_before));
                live_before += 1;
            }
        }

        let (compat, checks) = boot(Mode::FmpuCompat, &specs);
        prop_assert!(checks.iter().all(|&n| n == 0));
        prop_assert!(compat.tasks().iter().all(|t| t.state == TaskState::Ready));
    }

    #[test]
    fn dbox_blocks_raw_descriptor_writes(specs in prop::collection::vec(spec(), 1..5)) {
        let (k, _) = boot(Mode::Dbox, &specs);
        for t in k.tasks().iter().filter(|t| t.state != TaskState::Voided) {
            let cfg = build_mpu_configuration(t, &k.layout, &k.profile).unwrap();
            for ch in 0..k.profile.dma_channels {
                let mut engine = DmaEngineState::for_profile(&k.profile);
                let d = TransferDescriptor::new(ch, t.stack_region, r(0x2000_0100, 4), 4, Direction::MemToPeriph, t.id);
                let out = raw_dma_config_via_mmio(&mut engine, d, &cfg, false, &k.profile).unwrap();
                let faulted = matches!(out, RawOutcome::Fault { .. });
                prop_assert!(faulted, "{} installed a descriptor on channel {}", t.name, ch);
                prop_assert!(engine.active().next().is_none());
            }
        }
    }

    #[test]
    fn voided_tasks_never_dispatched(specs in prop::collection::vec(spec(), 1..5), ticks in 1usize..40) {
        let (mut k, _) = boot(Mode::Dbox, &specs);
        for _ in 0..ticks {
            let Some(d) = k.schedule() else { break };
            prop_assert_ne!(k.task(d.task).unwrap().state, TaskState::Voided);
            if d.switch {
                k.context_switch(d.task).unwrap();
            }
            k.yield_current();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dbox_worst_case_keeps_kernel_and_controller(specs in prop::collection::vec(spec(), 1..4)) {
        let (k, _) = boot(Mode::Dbox, &specs);
        let live: Vec<_> = k.tasks().iter().filter(|t| t.state != TaskState::Voided).cloned().collect();
        for t in &live {
            let others: Vec<_> = live.iter().filter(|o| o.id != t.id).cloned().collect();
            let row = worst_case_exposure(t, &others, &k.profile, &k.layout).unwrap();
            prop_assert_eq!(row.area(Area::FlashKernel).exposed_bytes, 0);
            prop_assert_eq!(row.area(Area::RamKernel).exposed_bytes, 0);
            prop_assert_eq!(row.area(Area::PeriphSystem).exposed_bytes, 0);
            prop_assert!(!row.dma_controller_exposed);
        }
    }
}
