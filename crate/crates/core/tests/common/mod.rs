#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use rand::Rng;

use capdma_core::kernel::{KernelLayout, Mode};
use capdma_core::memmap::{PERIPHERAL_PARTITION, SYSTEM_PARTITION};
use capdma_core::{
    Access, AccessKind, AccessQuery, AddressRange, DescriptorHome, DmaCapability, DmaOperation, DmaRequest, Ear, EarKind, MemoryProfile,
    MpuConfiguration, MpuRegionDescriptor, Permission, PeripheralKind, PeripheralRecord, Rights, Scenario, TaskId, TaskRecord, TaskSpec, UserRegion,
};

pub fn r(base: u32, size: u32) -> AddressRange {
    AddressRange::new(base, size).unwrap()
}

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

pub fn load(name: &str) -> Scenario {
    Scenario::from_path(scenario_path(name)).unwrap()
}

pub const SHIPPED: [&str; 4] = ["table3_reconstruction", "microbench_creation", "plc", "dma_bypass"];

fn periph(id: &str, base: u32, kind: PeripheralKind, dma: bool, ear: EarKind, data: u32) -> PeripheralRecord {
    PeripheralRecord {
        id: id.into(),
        range: r(base, 0x400),
        kind,
        dma_capable: dma,
        ear_kind: ear,
        data_offset: data,
    }
}

/// Small profile: 64K flash, 16K RAM, three ordinary peripherals, one
/// controller and one system peripheral.
pub fn toy_profile() -> MemoryProfile {
    MemoryProfile {
        flash: r(0x0800_0000, 0x1_0000),
        ram: r(0x2000_0000, 0x4000),
        peripheral_partition: PERIPHERAL_PARTITION,
        system_partition: SYSTEM_PARTITION,
        peripherals: vec![
            periph("SPI1", 0x4001_3000, PeripheralKind::Spi, true, EarKind::SpiSlaveSelect, 0x0c),
            periph("ADC1", 0x4001_2400, PeripheralKind::Adc, true, EarKind::AdcChannelMask, 0x58),
            periph("USART1", 0x4001_3800, PeripheralKind::Usart, true, EarKind::None, 0x04),
            periph("DMA1", 0x4002_6000, PeripheralKind::DmaController, false, EarKind::None, 0),
            periph("SCB", 0xE000_ED00, PeripheralKind::System, false, EarKind::None, 0),
        ],
        dma_channels: 2,
        dma_descriptor_home: DescriptorHome::Mmio,
        descriptor_arena: None,
        transfer_rate: 4,
    }
}

pub fn toy_layout(mode: Mode) -> KernelLayout {
    KernelLayout {
        syscalls_region: r(0x0800_0000, 0x2000),
        kernel_code_region: r(0x0800_2000, 0x2000),
        kernel_data_region: r(0x2000_0000, 0x1000),
        mode,
    }
}

pub fn toy_task(id: u32, profile: &MemoryProfile) -> TaskRecord {
    let (stack, caps, regions) = match id {
        0 => (
            r(0x2000_1000, 0x400),
            vec![
                DmaCapability::new("SPI1", Rights::READ | Rights::WRITE, Ear::SpiSlaveSelect("SS_A".into()), profile),
                DmaCapability::new("ADC1", Rights::READ, Ear::AdcChannelMask(0b0101), profile),
            ],
            vec![
                UserRegion {
                    range: r(0x2000_2000, 0x200),
                    permission: Permission::read_write_data(),
                },
                UserRegion {
                    range: r(0x2000_3000, 0x100),
                    permission: Permission::new(Access::Rw, Access::Ro, true).unwrap(),
                },
            ],
        ),
        _ => (
            r(0x2000_1400, 0x400),
            vec![
                DmaCapability::new("SPI1", Rights::ALL, Ear::SpiSlaveSelect("SS_B".into()), profile),
                DmaCapability::new("ADC1", Rights::READ | Rights::WRITE, Ear::AdcChannelMask(0b0011), profile),
            ],
            vec![UserRegion {
                range: r(0x2000_2000, 0x200),
                permission: Permission::read_write_data(),
            }],
        ),
    };
    TaskRecord::from_spec(
        TaskId(id),
        TaskSpec {
            name: format!("toy{id}"),
            privileged: false,
            code_region: r(0x0800_8000 + id * 0x1000, 0x1000),
            stack_region: stack,
            user_regions: regions,
            capabilities: caps.into_iter().map(Result::unwrap).collect(),
            behavior: vec![],
            period: None,
            iterations: None,
        },
    )
}

/// Candidate buffers: inside, equal to, straddling and outside the toy
/// tasks' regions.
pub fn toy_buffers() -> Vec<AddressRange> {
    vec![
        r(0x2000_1000, 0x400),
        r(0x2000_1100, 0x40),
        r(0x2000_13f0, 0x20),
        r(0x2000_1500, 0x10),
        r(0x2000_2000, 0x200),
        r(0x2000_3010, 0x10),
        r(0x2000_0100, 0x10),
        r(0x2000_21f8, 0x10),
    ]
}

pub fn toy_ears() -> Vec<Ear> {
    vec![
        Ear::None,
        Ear::SpiSlaveSelect("SS_A".into()),
        Ear::SpiSlaveSelect("SS_B".into()),
        Ear::AdcChannelMask(0b0001),
        Ear::AdcChannelMask(0b0100),
        Ear::AdcChannelMask(0b0101),
        Ear::AdcChannelMask(0b0010),
        Ear::I2cSlaveAddress(0x50),
    ]
}

pub fn toy_operations() -> Vec<DmaOperation> {
    let bufs = toy_buffers();
    let mut ops = Vec::new();
    for &b in &bufs {
        ops.push(DmaOperation::Read { into: b });
        ops.push(DmaOperation::Write { from: b });
    }
    for &tx in &bufs {
        for &rx in &bufs {
            ops.push(DmaOperation::FullDuplex { tx, rx });
        }
    }
    ops
}

/// Every requester x peripheral x EAR x operation combination.
pub fn toy_requests() -> Vec<DmaRequest> {
    let mut out = Vec::new();
    for task in 0..2 {
        for periph in ["SPI1", "ADC1", "USART1", "DMA1", "UART9"] {
            for ear in toy_ears() {
                for op in toy_operations() {
                    out.push(DmaRequest {
                        requester: TaskId(task),
                        peripheral_id: periph.into(),
                        operation: op,
                        ear: ear.clone(),
                    });
                }
            }
        }
    }
    out
}

/// Window starts near partition boundaries and the top of the address space.
pub const ANCHORS: [u32; 5] = [0x0800_0000, 0x1fff_f000, 0x4002_5000, 0xdfff_f000, 0xffff_e000];
pub const WINDOW: u32 = 0x2000;

pub fn random_permission(rng: &mut impl Rng) -> Permission {
    let levels = [Access::None, Access::Ro, Access::Rw];
    let p = levels[rng.gen_range(0..3)];
    let u = levels[rng.gen_range(0..=levels.iter().position(|l| *l == p).unwrap())];
    Permission::new(p, u, rng.gen_bool(0.5)).unwrap()
}

pub fn random_config(rng: &mut impl Rng, anchor: u32) -> MpuConfiguration {
    let mut cfg = MpuConfiguration::new(rng.gen_bool(0.8));
    for slot in 0..8u8 {
        if !rng.gen_bool(0.6) {
            continue;
        }
        let size = 1u32 << rng.gen_range(5..=12);
        let base = (anchor + rng.gen_range(0..WINDOW)) & !(size - 1);
        let mut d = MpuRegionDescriptor::new(slot, r(base, size), random_permission(rng));
        d.enabled = rng.gen_bool(0.9);
        cfg.set(d).unwrap();
    }
    cfg
}

pub fn random_query(rng: &mut impl Rng, anchor: u32) -> AccessQuery {
    let addr = anchor + rng.gen_range(0..WINDOW);
    let width = match rng.gen_range(0..4) {
        0 => 1,
        1 => 4,
        2 => 16,
        _ => rng.gen_range(1..=256),
    };
    let kind = [AccessKind::Read, AccessKind::Write, AccessKind::Execute][rng.gen_range(0..3)];
    AccessQuery::new(addr, width, kind, rng.gen_bool(0.5))
}

/// A configuration and query sharing one anchor window.
pub fn random_case(rng: &mut impl Rng) -> (MpuConfiguration, AccessQuery) {
    let anchor = ANCHORS[rng.gen_range(0..ANCHORS.len())];
    (random_config(rng, anchor), random_query(rng, anchor))
}
