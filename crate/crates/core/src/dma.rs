//! DMA controller model: channels holding one-shot transfer descriptors and
//! an engine that moves bytes as a bus master.
//!
//! The engine never consults the MPU. Whatever a descriptor names gets
//! read and written, kernel memory included.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::TaskId;
use crate::memmap::{AddressRange, DescriptorHome, MemoryProfile};
use crate::mpu::{check_access, AccessKind, AccessQuery, MpuConfiguration};

pub const DEFAULT_TRANSFER_RATE: u32 = 4;

/// Register block stride of one channel inside the controller's MMIO range.
pub const CHANNEL_STRIDE: u32 = 0x14;
/// Offset of channel 0's register block.
pub const CHANNEL_BLOCK_OFFSET: u32 = 0x08;
/// Size of one descriptor slot in a kernel-RAM arena.
pub const ARENA_SLOT: u32 = 16;
/// Bytes written to program one descriptor.
pub const DESCRIPTOR_WRITE_WIDTH: u32 = 16;

/// Sparse simulated memory. Unwritten bytes read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ByteStore {
    bytes: BTreeMap<u32, u8>,
}

impl ByteStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, addr: u32) -> u8 {
        self.bytes.get(&addr).copied().unwrap_or(0)
    }

    pub fn write(&mut self, addr: u32, value: u8) {
        if value == 0 {
            self.bytes.remove(&addr);
        } else {
            self.bytes.insert(addr, value);
        }
    }

    pub fn read_range(&self, range: &AddressRange) -> Vec<u8> {
        (0..range.size()).map(|i| self.read(range.base() + i)).collect()
    }

    pub fn write_slice(&mut self, base: u32, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            self.write(base.wrapping_add(i as u32), *b);
        }
    }

    pub fn fill(&mut self, range: &AddressRange, value: u8) {
        for i in 0..range.size() {
            self.write(range.base() + i, value);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    PeriphToMem,
    MemToPeriph,
    FullDuplex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferDescriptor {
    pub channel: u32,
    pub source: AddressRange,
    pub destination: AddressRange,
    /// Receive buffer of a full-duplex transfer; `source` is then the
    /// transmit buffer and `destination` the peripheral data register.
    pub duplex_rx: Option<AddressRange>,
    pub length: u32,
    pub direction: Direction,
    pub owner_task: TaskId,
    pub ticks_remaining: u32,
    pub progress: u32,
}

impl TransferDescriptor {
    pub fn new(
        channel: u32,
        source: AddressRange,
        destination: AddressRange,
        length: u32,
        direction: Direction,
        owner_task: TaskId,
    ) -> Self {
        Self {
            channel,
            source,
            destination,
            duplex_rx: None,
            length,
            direction,
            owner_task,
            ticks_remaining: 0,
            progress: 0,
        }
    }

    pub fn with_duplex_rx(mut self, rx: AddressRange) -> Self {
        self.duplex_rx = Some(rx);
        self
    }

    /// Memory-side ranges, for the post-hoc confused-deputy check.
    pub fn memory_ranges(&self) -> Vec<AddressRange> {
        match self.direction {
            Direction::PeriphToMem => vec![self.destination],
            Direction::MemToPeriph => vec![self.source],
            Direction::FullDuplex => {
                let mut v = vec![self.source];
                v.extend(self.duplex_rx);
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigureError {
    #[error("channel {0} busy")]
    Busy(u32),
    #[error("no channel {channel}; controller has {channels}")]
    NoSuchChannel { channel: u32, channels: u32 },
    #[error("invalid descriptor: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompletionStatus {
    Ok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub channel: u32,
    pub owner_task: TaskId,
    pub status: CompletionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaEngineState {
    channels: Vec<Option<TransferDescriptor>>,
    pub transfer_rate: u32,
}

impl DmaEngineState {
    pub fn new(channels: u32, transfer_rate: u32) -> Self {
        Self {
            channels: vec![None; channels as usize],
            transfer_rate: transfer_rate.max(1),
        }
    }

    pub fn for_profile(profile: &MemoryProfile) -> Self {
        Self::new(profile.dma_channels, profile.transfer_rate)
    }

    pub fn channel_count(&self) -> u32 {
        self.channels.len() as u32
    }

    pub fn channel(&self, channel: u32) -> Option<&TransferDescriptor> {
        self.channels.get(channel as usize).and_then(Option::as_ref)
    }

    pub fn is_busy(&self, channel: u32) -> bool {
        self.channel(channel).is_some()
    }

    pub fn lowest_free(&self) -> Option<u32> {
        self.channels.iter().position(Option::is_none).map(|c| c as u32)
    }

    pub fn active(&self) -> impl Iterator<Item = &TransferDescriptor> {
        self.channels.iter().flatten()
    }

    pub fn configure_channel(&mut self, mut d: TransferDescriptor) -> Result<(), ConfigureError> {
        let channels = self.channel_count();
        let slot = self
            .channels
            .get_mut(d.channel as usize)
            .ok_or(ConfigureError::NoSuchChannel {
                channel: d.channel,
                channels,
            })?;
        if d.length == 0 {
            return Err(ConfigureError::Invalid("zero length"));
        }
        if (d.direction == Direction::FullDuplex) != d.duplex_rx.is_some() {
            return Err(ConfigureError::Invalid("full duplex needs exactly one receive buffer"));
        }
        if slot.is_some() {
            return Err(ConfigureError::Busy(d.channel));
        }
        d.progress = 0;
        d.ticks_remaining = d.length.div_ceil(self.transfer_rate);
        *slot = Some(d);
        Ok(())
    }

    /// Advances every active channel by up to `transfer_rate` bytes and
    /// returns the transfers that finished, in channel order.
    pub fn engine_tick(&mut self, memory: &mut ByteStore) -> Vec<Completion> {
        let rate = self.transfer_rate;
        let mut done = Vec::new();
        for slot in &mut self.channels {
            let Some(d) = slot else { continue };
            let end = (d.progress + rate).min(d.length);
            for i in d.progress..end {
                move_byte(d, i, memory);
            }
            d.progress = end;
            d.ticks_remaining = (d.length - end).div_ceil(rate);
            if d.progress == d.length {
                done.push(Completion {
                    channel: d.channel,
                    owner_task: d.owner_task,
                    status: CompletionStatus::Ok,
                });
                *slot = None;
            }
        }
        done
    }
}

fn at(range: &AddressRange, i: u32) -> u32 {
    range.base() + i % range.size()
}

/// Ranges shorter than the transfer wrap, which is how a peripheral data
/// register behaves as a FIFO window.
fn move_byte(d: &TransferDescriptor, i: u32, memory: &mut ByteStore) {
    match d.duplex_rx {
        Some(rx) => {
            let data = at(&d.destination, i);
            memory.write(at(&rx, i), memory.read(data));
            memory.write(data, memory.read(at(&d.source, i)));
        }
        None => {
            let b = memory.read(at(&d.source, i));
            memory.write(at(&d.destination, i), b);
        }
    }
}

/// Address a task must write to program `channel` directly.
pub fn descriptor_target(profile: &MemoryProfile, channel: u32) -> Option<AddressRange> {
    let base = match profile.dma_descriptor_home {
        DescriptorHome::Mmio => {
            profile.dma_controllers().next()?.range.base() + CHANNEL_BLOCK_OFFSET + CHANNEL_STRIDE * channel
        }
        DescriptorHome::KernelRam => profile.descriptor_arena?.base() + ARENA_SLOT * channel,
    };
    AddressRange::new(base, DESCRIPTOR_WRITE_WIDTH).ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawOutcome {
    Installed,
    /// The register write went through but the channel was already active.
    Busy,
    /// The MPU refused the register write.
    Fault { target: AddressRange },
}

/// A task programming a channel by writing descriptor registers itself.
/// The write is an ordinary core access, so it is checked against the
/// task's MPU configuration before the descriptor takes effect.
pub fn raw_dma_config_via_mmio(
    engine: &mut DmaEngineState,
    d: TransferDescriptor,
    mpu: &MpuConfiguration,
    privileged: bool,
    profile: &MemoryProfile,
) -> Result<RawOutcome, ConfigureError> {
    let target = descriptor_target(profile, d.channel).ok_or(ConfigureError::NoSuchChannel {
        channel: d.channel,
        channels: engine.channel_count(),
    })?;
    let q = AccessQuery::new(target.base(), target.size(), AccessKind::Write, privileged);
    if !check_access(mpu, &q, profile).is_allow() {
        return Ok(RawOutcome::Fault { target });
    }
    match engine.configure_channel(d) {
        Ok(()) => Ok(RawOutcome::Installed),
        Err(ConfigureError::Busy(_)) => Ok(RawOutcome::Busy),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(base: u32, size: u32) -> AddressRange {
        AddressRange::new(base, size).unwrap()
    }

    #[test]
    fn ten_bytes_at_rate_four_take_three_ticks() {
        let mut e = DmaEngineState::new(2, 4);
        let mut m = ByteStore::new();
        m.write_slice(0x2000_0000, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        let d = TransferDescriptor::new(
            0,
            r(0x2000_0000, 10),
            r(0x2000_1000, 10),
            10,
            Direction::MemToPeriph,
            TaskId(3),
        );
        e.configure_channel(d).unwrap();
        assert_eq!(e.channel(0).unwrap().ticks_remaining, 3);
        assert!(e.engine_tick(&mut m).is_empty());
        assert!(e.engine_tick(&mut m).is_empty());
        let done = e.engine_tick(&mut m);
        assert_eq!(
            done,
            vec![Completion {
                channel: 0,
                owner_task: TaskId(3),
                status: CompletionStatus::Ok
            }]
        );
        assert_eq!(m.read_range(&r(0x2000_1000, 10)), (1..=10).collect::<Vec<u8>>());
        assert!(e.engine_tick(&mut m).is_empty());
    }

    #[test]
    fn busy_and_range_errors() {
        let mut e = DmaEngineState::new(1, 4);
        let d = TransferDescriptor::new(0, r(0, 4), r(0x100, 4), 4, Direction::MemToPeriph, TaskId(1));
        e.configure_channel(d.clone()).unwrap();
        assert_eq!(e.configure_channel(d.clone()), Err(ConfigureError::Busy(0)));
        let mut far = d;
        far.channel = 1;
        assert!(matches!(e.configure_channel(far), Err(ConfigureError::NoSuchChannel { .. })));
    }

    #[test]
    fn data_register_acts_as_fifo() {
        let mut e = DmaEngineState::new(1, 4);
        let mut m = ByteStore::new();
        m.write_slice(0x4000_4404, &[0xAA, 0xBB, 0xCC, 0xDD]);
        let d = TransferDescriptor::new(
            0,
            r(0x4000_4404, 4),
            r(0x2000_0000, 8),
            8,
            Direction::PeriphToMem,
            TaskId(1),
        );
        e.configure_channel(d).unwrap();
        e.engine_tick(&mut m);
        e.engine_tick(&mut m);
        assert_eq!(
            m.read_range(&r(0x2000_0000, 8)),
            vec![0xAA, 0xBB, 0xCC, 0xDD, 0xAA, 0xBB, 0xCC, 0xDD]
        );
    }

    #[test]
    fn full_duplex_swaps_through_data_register() {
        let mut e = DmaEngineState::new(1, 4);
        let mut m = ByteStore::new();
        let dreg = r(0x4001_300C, 4);
        m.write_slice(dreg.base(), &[9, 9, 9, 9]);
        m.write_slice(0x2000_0000, &[1, 2, 3, 4]);
        let d = TransferDescriptor::new(0, r(0x2000_0000, 4), dreg, 4, Direction::FullDuplex, TaskId(1))
            .with_duplex_rx(r(0x2000_0100, 4));
        e.configure_channel(d).unwrap();
        e.engine_tick(&mut m);
        assert_eq!(m.read_range(&r(0x2000_0100, 4)), vec![9, 9, 9, 9]);
        assert_eq!(m.read_range(&dreg), vec![1, 2, 3, 4]);
    }

    #[test]
    fn duplex_without_rx_is_invalid() {
        let mut e = DmaEngineState::new(1, 4);
        let d = TransferDescriptor::new(0, r(0, 4), r(0x100, 4), 4, Direction::FullDuplex, TaskId(1));
        assert!(matches!(e.configure_channel(d), Err(ConfigureError::Invalid(_))));
    }

    #[test]
    fn idle_engine_reports_nothing() {
        let mut e = DmaEngineState::new(3, 4);
        assert!(e.engine_tick(&mut ByteStore::new()).is_empty());
        assert_eq!(e.lowest_free(), Some(0));
    }
}
