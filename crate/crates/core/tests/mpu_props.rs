mod common;

use std::collections::BTreeSet;

use capdma_core::memmap::RangeSet;
use capdma_core::mpu::validate_range;
use capdma_core::{
    check_access, Access, AccessKind, AccessQuery, AddressRange, Decision, MpuConfiguration, MpuRegionDescriptor,
    Permission,
};
use proptest::prelude::*;

use common::oracle::brute_force_check;
use common::{r, toy_profile, ANCHORS, WINDOW};

#[derive(Debug, Clone)]
struct SlotSpec {
    log2: u32,
    offset: u32,
    privileged: u8,
    unprivileged: u8,
    xn: bool,
    enabled: bool,
}

fn level(i: u8) -> Access {
    [Access::None, Access::Ro, Access::Rw][usize::from(i % 3)]
}

impl SlotSpec {
    fn permission(&self) -> Permission {
        let p = level(self.privileged);
        let u = level(self.unprivileged).min(p);
        Permission::new(p, u, self.xn).unwrap()
    }

    fn descriptor(&self, slot: u8, anchor: u32) -> MpuRegionDescriptor {
        let size = 1u32 << self.log2;
        let base = (anchor + self.offset) & !(size - 1);
        let mut d = MpuRegionDescriptor::new(slot, r(base, size), self.permission());
        d.enabled = self.enabled;
        d
    }
}

fn slot_spec() -> impl Strategy<Value = SlotSpec> {
    (5u32..=12, 0..WINDOW, 0u8..3, 0u8..3, any::<bool>(), prop::bool::weighted(0.9)).prop_map(
        |(log2, offset, privileged, unprivileged, xn, enabled)| SlotSpec {
            log2,
            offset,
            privileged,
            unprivileged,
            xn,
            enabled,
        },
    )
}

fn kind() -> impl Strategy<Value = AccessKind> {
    prop_oneof![Just(AccessKind::Read), Just(AccessKind::Write), Just(AccessKind::Execute)]
}

#[derive(Debug, Clone)]
struct Case {
    cfg: MpuConfiguration,
    query: AccessQuery,
}

fn case() -> impl Strategy<Value = Case> {
    (
        0..ANCHORS.len(),
        prop::collection::vec(prop::option::weighted(0.6, slot_spec()), 8),
        any::<bool>(),
        0..WINDOW,
        1u32..=128,
        kind(),
        any::<bool>(),
    )
        .prop_map(|(a, slots, background, offset, width, kind, privileged)| {
            let anchor = ANCHORS[a];
            let mut cfg = MpuConfiguration::new(background);
            for (i, s) in slots.iter().enumerate() {
                if let Some(s) = s {
                    cfg.set(s.descriptor(i as u8, anchor)).unwrap();
                }
            }
            Case {
                cfg,
                query: AccessQuery::new(anchor + offset, width, kind, privileged),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn check_access_matches_byte_scan(c in case()) {
        let p = toy_profile();
        prop_assert_eq!(check_access(&c.cfg, &c.query, &p), brute_force_check(&c.cfg, &c.query, &p));
    }

    #[test]
    fn privilege_is_monotone(c in case()) {
        let p = toy_profile();
        let mut q = c.query;
        q.privileged = false;
        if check_access(&c.cfg, &q, &p) == Decision::Allow {
            q.privileged = true;
            prop_assert_eq!(check_access(&c.cfg, &q, &p), Decision::Allow);
        }
    }

    #[test]
    fn check_is_deterministic(c in case()) {
        let p = toy_profile();
        let first = check_access(&c.cfg, &c.query, &p);
        prop_assert_eq!(first, check_access(&c.cfg.clone(), &c.query, &p));
    }

    #[test]
    fn higher_slot_decides_overlap(
        a in 0..ANCHORS.len(),
        lo in 0u8..7,
        gap in 1u8..8,
        first in slot_spec(),
        second in slot_spec(),
        pick in any::<prop::sample::Index>(),
        kind in kind(),
        privileged in any::<bool>(),
    ) {
        let anchor = ANCHORS[a];
        let hi = (lo + gap).min(7);
        prop_assume!(hi > lo);
        let mut low = first.descriptor(lo, anchor);
        let mut high = second.descriptor(hi, anchor);
        low.enabled = true;
        high.enabled = true;
        let Some(overlap) = low.range.intersection(&high.range) else {
            return Ok(());
        };
        let addr = overlap.base() + pick.index(overlap.size() as usize) as u32;
        let q = AccessQuery::new(addr, 1, kind, privileged);
        let p = toy_profile();

        let mut both = MpuConfiguration::new(true);
        both.set(low).unwrap();
        both.set(high).unwrap();
        let mut alone = MpuConfiguration::new(true);
        alone.set(high).unwrap();
        prop_assert_eq!(check_access(&both, &q, &p), check_access(&alone, &q, &p));
    }

    #[test]
    fn system_partition_never_unprivileged(c in case(), off in 0u32..0x1000) {
        let p = toy_profile();
        let q = AccessQuery::new(0xE000_0000 + off, 4, c.query.kind, false);
        prop_assert_eq!(check_access(&c.cfg, &q, &p), Decision::Fault);
    }

    #[test]
    fn range_serializes_and_parses_back(base in any::<u32>(), size in 1u32..=0x10_0000) {
        let Ok(range) = AddressRange::new(base, size) else {
            prop_assert!(u64::from(base) + u64::from(size) > 1 << 32);
            return Ok(());
        };
        let v = serde_json::to_value(range).unwrap();
        let text = v["base"].as_str().unwrap();
        let parsed = u32::from_str_radix(text.trim_start_matches("0x"), 16).unwrap();
        let back = AddressRange::new(parsed, v["size"].as_u64().unwrap() as u32).unwrap();
        prop_assert_eq!(back, range);
        prop_assert_eq!(back.to_string(), range.to_string());
    }

    #[test]
    fn legal_ranges_are_aligned_powers(base in any::<u32>(), log2 in 0u32..20) {
        let size = 1u32 << log2;
        if let Ok(range) = AddressRange::new(base, size) {
            let legal = validate_range(&range).is_ok();
            prop_assert_eq!(legal, size >= 32 && base % size == 0);
        }
    }

    #[test]
    fn range_set_matches_byte_set(
        spans in prop::collection::vec((0u32..512, 1u32..128), 1..6),
        cut in prop::collection::vec((0u32..512, 1u32..128), 0..4),
    ) {
        let to_set = |v: &[(u32, u32)]| {
            let ranges: Vec<_> = v.iter().map(|&(b, s)| r(b, s)).collect();
            RangeSet::from_ranges(ranges.iter())
        };
        let bytes = |v: &[(u32, u32)]| -> BTreeSet<u32> {
            v.iter().flat_map(|&(b, s)| b..b + s).collect()
        };
        let (a, b) = (to_set(&spans), to_set(&cut));
        let (ba, bb) = (bytes(&spans), bytes(&cut));
        prop_assert_eq!(a.len(), ba.len() as u64);
        prop_assert_eq!(a.union(&b).len(), ba.union(&bb).count() as u64);
        prop_assert_eq!(a.subtract(&b).len(), ba.difference(&bb).count() as u64);
        prop_assert_eq!(a.intersect(&b).len(), ba.intersection(&bb).count() as u64);
        for x in 0..700u32 {
            prop_assert_eq!(a.contains_addr(u64::from(x)), ba.contains(&x));
        }
    }
}
