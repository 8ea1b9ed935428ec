//! Physical address space of the simulated MCU.
//!
//! The 32-bit space is split into the architectural 0.5 GiB partitions. A
//! [`MemoryProfile`] places flash, RAM and a peripheral inventory inside
//! them; every other module does its address arithmetic through the
//! half-open [`AddressRange`] and the [`RangeSet`] helpers defined here.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exclusive upper bound of the 32-bit address space.
pub const ADDRESS_SPACE_END: u64 = 1 << 32;

pub const CODE_PARTITION: AddressRange = AddressRange::fixed(0x0000_0000, 0x2000_0000);
pub const SRAM_PARTITION: AddressRange = AddressRange::fixed(0x2000_0000, 0x2000_0000);
pub const PERIPHERAL_PARTITION: AddressRange = AddressRange::fixed(0x4000_0000, 0x2000_0000);
pub const SYSTEM_PARTITION: AddressRange = AddressRange::fixed(0xE000_0000, 0x2000_0000);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RangeError {
    #[error("address range must not be empty")]
    Empty,
    #[error("range {base:#010x}+{size:#x} runs past the end of the address space")]
    Overflow { base: u32, size: u32 },
}

/// Half-open byte range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AddressRange {
    base: u32,
    size: u32,
}

impl AddressRange {
    pub fn new(base: u32, size: u32) -> Result<Self, RangeError> {
        if size == 0 {
            return Err(RangeError::Empty);
        }
        if u64::from(base) + u64::from(size) > ADDRESS_SPACE_END {
            return Err(RangeError::Overflow { base, size });
        }
        Ok(Self { base, size })
    }

    const fn fixed(base: u32, size: u32) -> Self {
        Self { base, size }
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// Exclusive end, widened so the last partition can end at 2^32.
    pub fn end(&self) -> u64 {
        u64::from(self.base) + u64::from(self.size)
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        addr >= u64::from(self.base) && addr < self.end()
    }

    pub fn contains(&self, inner: &AddressRange) -> bool {
        contains(self, inner)
    }

    pub fn intersects(&self, other: &AddressRange) -> bool {
        u64::from(self.base) < other.end() && u64::from(other.base) < self.end()
    }

    pub fn intersection(&self, other: &AddressRange) -> Option<AddressRange> {
        let lo = self.base.max(other.base);
        let hi = self.end().min(other.end());
        (u64::from(lo) < hi).then(|| AddressRange::fixed(lo, (hi - u64::from(lo)) as u32))
    }
}

impl Serialize for AddressRange {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("AddressRange", 2)?;
        st.serialize_field("base", &format!("{:#010x}", self.base))?;
        st.serialize_field("size", &self.size)?;
        st.end()
    }
}

impl fmt::Display for AddressRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#010x}, {:#010x})", self.base, self.end())
    }
}

/// True iff `inner` lies wholly inside `outer`.
pub fn contains(outer: &AddressRange, inner: &AddressRange) -> bool {
    inner.base >= outer.base && inner.end() <= outer.end()
}

/// A set of bytes stored as sorted, disjoint, non-adjacent half-open spans.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    spans: Vec<(u64, u64)>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ranges<'a>(ranges: impl IntoIterator<Item = &'a AddressRange>) -> Self {
        let mut set = Self::new();
        for r in ranges {
            set.insert(r);
        }
        set
    }

    pub fn insert(&mut self, range: &AddressRange) {
        self.insert_span(u64::from(range.base()), range.end());
    }

    pub fn insert_span(&mut self, mut lo: u64, mut hi: u64) {
        if lo >= hi {
            return;
        }
        let mut merged = Vec::with_capacity(self.spans.len() + 1);
        let mut placed = false;
        for &(a, b) in &self.spans {
            if b < lo {
                merged.push((a, b));
            } else if a > hi {
                if !placed {
                    merged.push((lo, hi));
                    placed = true;
                }
                merged.push((a, b));
            } else {
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        if !placed {
            merged.push((lo, hi));
        }
        self.spans = merged;
    }

    pub fn union(&self, other: &RangeSet) -> RangeSet {
        let mut out = self.clone();
        for &(a, b) in &other.spans {
            out.insert_span(a, b);
        }
        out
    }

    pub fn subtract(&self, other: &RangeSet) -> RangeSet {
        let mut out = Vec::new();
        for &(a, b) in &self.spans {
            let mut cursor = a;
            for &(c, d) in &other.spans {
                if d <= cursor || c >= b {
                    continue;
                }
                if c > cursor {
                    out.push((cursor, c));
                }
                cursor = cursor.max(d);
                if cursor >= b {
                    break;
                }
            }
            if cursor < b {
                out.push((cursor, b));
            }
        }
        RangeSet { spans: out }
    }

    pub fn intersect(&self, other: &RangeSet) -> RangeSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.spans.len() && j < other.spans.len() {
            let (a, b) = self.spans[i];
            let (c, d) = other.spans[j];
            let lo = a.max(c);
            let hi = b.min(d);
            if lo < hi {
                out.push((lo, hi));
            }
            if b < d {
                i += 1;
            } else {
                j += 1;
            }
        }
        RangeSet { spans: out }
    }

    /// Total number of bytes in the set.
    pub fn len(&self) -> u64 {
        self.spans.iter().map(|(a, b)| b - a).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        self.spans.iter().any(|&(a, b)| addr >= a && addr < b)
    }

    pub fn spans(&self) -> &[(u64, u64)] {
        &self.spans
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PeripheralKind {
    Usart,
    Spi,
    I2c,
    Adc,
    Gpio,
    Timer,
    DmaController,
    System,
    Other,
}

impl PeripheralKind {
    /// Buses that can read and write in the same transfer.
    pub fn supports_duplex(self) -> bool {
        matches!(self, PeripheralKind::Spi | PeripheralKind::I2c)
    }
}

/// Off-chip addressing schema a peripheral needs before a DMA transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EarKind {
    None,
    I2cSlaveAddress,
    SpiSlaveSelect,
    AdcChannelMask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeripheralRecord {
    pub id: String,
    pub range: AddressRange,
    pub kind: PeripheralKind,
    pub dma_capable: bool,
    pub ear_kind: EarKind,
    /// Offset of the 4-byte data register that DMA streams through.
    pub data_offset: u32,
}

impl PeripheralRecord {
    pub fn data_register(&self) -> AddressRange {
        let offset = self.data_offset.min(self.range.size() - 1);
        let width = 4.min(self.range.size() - offset);
        AddressRange::fixed(self.range.base() + offset, width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DescriptorHome {
    Mmio,
    KernelRam,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryProfile {
    pub flash: AddressRange,
    pub ram: AddressRange,
    pub peripheral_partition: AddressRange,
    pub system_partition: AddressRange,
    pub peripherals: Vec<PeripheralRecord>,
    pub dma_channels: u32,
    pub dma_descriptor_home: DescriptorHome,
    /// Kernel-RAM area holding transfer descriptors when the home is `KernelRam`.
    pub descriptor_arena: Option<AddressRange>,
    /// Bytes moved per channel per tick.
    pub transfer_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("peripherals {first} {first_range} and {second} {second_range} overlap")]
    Overlap {
        first: String,
        first_range: AddressRange,
        second: String,
        second_range: AddressRange,
    },
    #[error("{what} {range} lies outside its partition {partition}")]
    Partition {
        what: String,
        range: AddressRange,
        partition: AddressRange,
    },
}

impl MemoryProfile {
    /// Checks every profile invariant. Called by the scenario loader.
    pub fn validate(&self) -> Result<(), ProfileError> {
        let within = |what: &str, range: AddressRange, partition: AddressRange| {
            if partition.contains(&range) {
                Ok(())
            } else {
                Err(ProfileError::Partition {
                    what: what.to_string(),
                    range,
                    partition,
                })
            }
        };
        within("flash", self.flash, CODE_PARTITION)?;
        within("ram", self.ram, SRAM_PARTITION)?;
        within("peripheral partition", self.peripheral_partition, PERIPHERAL_PARTITION)?;
        within("system partition", self.system_partition, SYSTEM_PARTITION)?;
        if self.dma_channels == 0 {
            return Err(ProfileError::Schema("dma channel count must be at least 1".into()));
        }
        if self.transfer_rate == 0 {
            return Err(ProfileError::Schema("dma transfer rate must be at least 1".into()));
        }
        match (self.dma_descriptor_home, self.descriptor_arena) {
            (DescriptorHome::KernelRam, None) => {
                return Err(ProfileError::Schema(
                    "descriptor home KERNEL_RAM requires a descriptor arena".into(),
                ))
            }
            (_, Some(arena)) => within("descriptor arena", arena, self.ram)?,
            _ => {}
        }

        for (i, p) in self.peripherals.iter().enumerate() {
            if p.id.is_empty() {
                return Err(ProfileError::Schema("peripheral id must not be empty".into()));
            }
            if self.peripherals[..i].iter().any(|q| q.id == p.id) {
                return Err(ProfileError::Schema(format!("duplicate peripheral id {}", p.id)));
            }
            if p.data_offset >= p.range.size() {
                return Err(ProfileError::Schema(format!(
                    "{}: data register offset {:#x} outside the peripheral",
                    p.id, p.data_offset
                )));
            }
            let partition = if p.kind == PeripheralKind::System {
                self.system_partition
            } else {
                self.peripheral_partition
            };
            within(&p.id, p.range, partition)?;
            let ear_ok = match p.ear_kind {
                EarKind::None => true,
                EarKind::I2cSlaveAddress => p.kind == PeripheralKind::I2c,
                EarKind::SpiSlaveSelect => p.kind == PeripheralKind::Spi,
                EarKind::AdcChannelMask => p.kind == PeripheralKind::Adc,
            };
            if !ear_ok {
                return Err(ProfileError::Schema(format!(
                    "{}: addressing schema {:?} does not fit a {:?} peripheral",
                    p.id, p.ear_kind, p.kind
                )));
            }
        }

        let mut sorted: Vec<&PeripheralRecord> = self.peripherals.iter().collect();
        sorted.sort_by_key(|p| p.range.base());
        for pair in sorted.windows(2) {
            if pair[0].range.intersects(&pair[1].range) {
                return Err(ProfileError::Overlap {
                    first: pair[0].id.clone(),
                    first_range: pair[0].range,
                    second: pair[1].id.clone(),
                    second_range: pair[1].range,
                });
            }
        }
        Ok(())
    }

    pub fn peripheral(&self, id: &str) -> Option<&PeripheralRecord> {
        self.peripherals.iter().find(|p| p.id == id)
    }

    /// The unique peripheral whose range holds `addr`.
    pub fn peripheral_at(&self, addr: u32) -> Option<&PeripheralRecord> {
        self.peripherals
            .iter()
            .find(|p| p.range.contains_addr(u64::from(addr)))
    }

    pub fn dma_controllers(&self) -> impl Iterator<Item = &PeripheralRecord> {
        self.peripherals
            .iter()
            .filter(|p| p.kind == PeripheralKind::DmaController)
    }

    pub fn in_system_partition(&self, addr: u64) -> bool {
        self.system_partition.contains_addr(addr)
    }
}

/// Free-function form of [`MemoryProfile::peripheral_at`].
pub fn peripheral_at(profile: &MemoryProfile, addr: u32) -> Option<&PeripheralRecord> {
    profile.peripheral_at(addr)
}
