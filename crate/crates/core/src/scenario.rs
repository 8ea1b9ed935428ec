//! Scenario documents: JSON files describing the MCU, the kernel layout,
//! the tasks and their scripts.
//!
//! Addresses and sizes may be written as integers or as `"0x..."` strings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::dma::{Direction, DEFAULT_TRANSFER_RATE};
use crate::kernel::{KernelLayout, Mode, TaskSpec, UserRegion};
use crate::memmap::{
    AddressRange, DescriptorHome, EarKind, MemoryProfile, PeripheralKind, PeripheralRecord,
    ProfileError, PERIPHERAL_PARTITION, SYSTEM_PARTITION,
};
use crate::mpu::{Access, Permission};
use crate::policy::{DmaCapability, DmaOperation, Ear, OperationKind, Rights};
use crate::script::{Action, Step};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

fn schema(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema(msg.into())
}

/// Integer that reads from a number or a hex/decimal string and writes as hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Hex(pub u64);

impl Serialize for Hex {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:#x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Hex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Hex;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an unsigned integer or a \"0x\" string")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Hex, E> {
                Ok(Hex(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Hex, E> {
                u64::try_from(v).map(Hex).map_err(|_| E::custom("negative value"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Hex, E> {
                parse_int(v).map(Hex).ok_or_else(|| E::custom(format!("bad integer {v:?}")))
            }
        }
        d.deserialize_any(V)
    }
}

fn parse_int(s: &str) -> Option<u64> {
    let t = s.trim().replace('_', "");
    match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => t.parse().ok(),
    }
}

impl Hex {
    fn u32(self, what: &str) -> Result<u32, ScenarioError> {
        u32::try_from(self.0).map_err(|_| schema(format!("{what}: {:#x} exceeds 32 bits", self.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeDoc {
    pub base: Hex,
    pub size: Hex,
}

impl RangeDoc {
    pub fn range(&self, what: &str) -> Result<AddressRange, ScenarioError> {
        AddressRange::new(self.base.u32(what)?, self.size.u32(what)?)
            .map_err(|e| schema(format!("{what}: {e}")))
    }

    pub fn from_range(r: &AddressRange) -> Self {
        Self {
            base: Hex(r.base().into()),
            size: Hex(r.size().into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peripheral: Option<RangeDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<RangeDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaDoc {
    pub channels: u32,
    #[serde(default = "default_home")]
    pub descriptor_home: DescriptorHome,
    #[serde(default = "default_rate")]
    pub transfer_rate: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_arena: Option<RangeDoc>,
}

fn default_home() -> DescriptorHome {
    DescriptorHome::Mmio
}

fn default_rate() -> u32 {
    DEFAULT_TRANSFER_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeripheralDoc {
    pub id: String,
    pub base: Hex,
    pub size: Hex,
    pub kind: PeripheralKind,
    #[serde(default)]
    pub dma_capable: bool,
    #[serde(default = "default_ear")]
    pub ear: EarKind,
    #[serde(default)]
    pub data_offset: Hex,
}

fn default_ear() -> EarKind {
    EarKind::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitDoc {
    pub addr: Hex,
    /// Hex digits, two per byte.
    pub bytes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McuDoc {
    pub flash: RangeDoc,
    pub ram: RangeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<PartitionsDoc>,
    pub dma: DmaDoc,
    pub peripherals: Vec<PeripheralDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub init: Vec<InitDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaTaskDoc {
    pub code: RangeDoc,
    pub stack: RangeDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanaryDoc {
    pub addr: Hex,
    pub value: Hex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDoc {
    pub syscalls: RangeDoc,
    pub code: RangeDoc,
    pub data: RangeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dma_task: Option<DmaTaskDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canary: Option<CanaryDoc>,
    #[serde(default = "default_slice")]
    pub time_slice: u32,
}

fn default_slice() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDoc {
    pub base: Hex,
    pub size: Hex,
    /// Unprivileged access.
    pub access: Access,
    /// Privileged access; defaults to RW.
    #[serde(default, rename = "priv", skip_serializing_if = "Option::is_none")]
    pub privileged: Option<Access>,
    #[serde(default = "yes")]
    pub xn: bool,
}

fn yes() -> bool {
    true
}

/// Listing-1 style capability: `[peripheral, [rights...], options]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityDoc(
    pub String,
    pub Vec<String>,
    #[serde(default)] pub serde_json::Value,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum ActionDoc {
    MemRead {
        addr: Hex,
        #[serde(default = "one")]
        len: Hex,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    MemWrite {
        addr: Hex,
        #[serde(default = "one")]
        len: Hex,
        #[serde(default)]
        fill: Hex,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    Exec {
        addr: Hex,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    Syscall {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Hex>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    DmaRequest {
        peripheral: String,
        operation: OperationKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        buffer: Option<RangeDoc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tx: Option<RangeDoc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rx: Option<RangeDoc>,
        #[serde(default)]
        ear: serde_json::Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Hex>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    RawDmaConfig {
        channel: u32,
        source: RangeDoc,
        destination: RangeDoc,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        length: Option<Hex>,
        #[serde(default = "m2p")]
        direction: Direction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    RedefineRegions {
        regions: Vec<RegionDoc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Hex>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    WaitNotify {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
    Nop {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toggle: Option<String>,
    },
}

fn one() -> Hex {
    Hex(1)
}

fn m2p() -> Direction {
    Direction::MemToPeriph
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub name: String,
    #[serde(default)]
    pub privileged: bool,
    pub code: RangeDoc,
    pub stack: RangeDoc,
    #[serde(default)]
    pub regions: Vec<RegionDoc>,
    #[serde(default)]
    pub capabilities: Vec<CapabilityDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u32>,
    #[serde(default)]
    pub behavior: Vec<ActionDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticks: Option<u64>,
    pub mcu: McuDoc,
    pub kernel: KernelDoc,
    #[serde(default)]
    pub tasks: Vec<TaskDoc>,
    #[serde(default)]
    pub attack_toggles: BTreeMap<String, bool>,
}

/// Builds and validates the profile described by the `mcu` object.
pub fn load_profile(doc: &McuDoc) -> Result<MemoryProfile, ScenarioError> {
    let parts = doc.partitions.as_ref();
    let peripheral_partition = match parts.and_then(|p| p.peripheral.as_ref()) {
        Some(r) => r.range("peripheral partition")?,
        None => PERIPHERAL_PARTITION,
    };
    let system_partition = match parts.and_then(|p| p.system.as_ref()) {
        Some(r) => r.range("system partition")?,
        None => SYSTEM_PARTITION,
    };
    let peripherals = doc
        .peripherals
        .iter()
        .map(|p| {
            Ok(PeripheralRecord {
                id: p.id.clone(),
                range: RangeDoc {
                    base: p.base,
                    size: p.size,
                }
                .range(&p.id)?,
                kind: p.kind,
                dma_capable: p.dma_capable,
                ear_kind: p.ear,
                data_offset: p.data_offset.u32(&p.id)?,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let profile = MemoryProfile {
        flash: doc.flash.range("flash")?,
        ram: doc.ram.range("ram")?,
        peripheral_partition,
        system_partition,
        peripherals,
        dma_channels: doc.dma.channels,
        dma_descriptor_home: doc.dma.descriptor_home,
        descriptor_arena: doc
            .dma
            .descriptor_arena
            .as_ref()
            .map(|a| a.range("descriptor arena"))
            .transpose()?,
        transfer_rate: doc.dma.transfer_rate,
    };
    profile.validate()?;
    Ok(profile)
}

/// Inverse of [`load_profile`].
pub fn emit_profile(profile: &MemoryProfile) -> McuDoc {
    let partitions = (profile.peripheral_partition != PERIPHERAL_PARTITION
        || profile.system_partition != SYSTEM_PARTITION)
        .then(|| PartitionsDoc {
            peripheral: Some(RangeDoc::from_range(&profile.peripheral_partition)),
            system: Some(RangeDoc::from_range(&profile.system_partition)),
        });
    McuDoc {
        flash: RangeDoc::from_range(&profile.flash),
        ram: RangeDoc::from_range(&profile.ram),
        partitions,
        dma: DmaDoc {
            channels: profile.dma_channels,
            descriptor_home: profile.dma_descriptor_home,
            transfer_rate: profile.transfer_rate,
            descriptor_arena: profile.descriptor_arena.as_ref().map(RangeDoc::from_range),
        },
        peripherals: profile
            .peripherals
            .iter()
            .map(|p| PeripheralDoc {
                id: p.id.clone(),
                base: Hex(p.range.base().into()),
                size: Hex(p.range.size().into()),
                kind: p.kind,
                dma_capable: p.dma_capable,
                ear: p.ear_kind,
                data_offset: Hex(p.data_offset.into()),
            })
            .collect(),
        init: Vec::new(),
    }
}

/// Interprets an EAR value for a peripheral's addressing schema.
/// I2C takes a 7-bit address, SPI a select-line name, ADC a mask or a
/// list of channel numbers / `ADC_CHANNEL_n` names.
pub fn parse_ear(kind: EarKind, v: &serde_json::Value, what: &str) -> Result<Ear, ScenarioError> {
    use serde_json::Value;
    let int = |v: &Value| -> Option<u64> {
        match v {
            Value::Number(n) => n.as_u64(),
            Value::String(s) => parse_int(s),
            _ => None,
        }
    };
    match kind {
        EarKind::None => match v {
            Value::Null => Ok(Ear::None),
            _ => Err(schema(format!("{what}: peripheral takes no addressing option"))),
        },
        EarKind::I2cSlaveAddress => match int(v) {
            Some(a) if a <= 0x7F => Ok(Ear::I2cSlaveAddress(a as u8)),
            _ => Err(schema(format!("{what}: expected a 7-bit I2C slave address"))),
        },
        EarKind::SpiSlaveSelect => match v {
            Value::String(s) if !s.is_empty() => Ok(Ear::SpiSlaveSelect(s.clone())),
            _ => Err(schema(format!("{what}: expected an SPI slave-select name"))),
        },
        EarKind::AdcChannelMask => {
            let channel = |v: &Value| -> Option<u32> {
                let n = match v {
                    Value::String(s) => {
                        let c = s.strip_prefix("ADC_CHANNEL_")?;
                        c.parse().ok()?
                    },
                    Value::Number(n) => n.as_u64()?,
                    _ => return None,
                };
                (n < 32).then(|| 1u32 << n)
            };
            let mask = match v {
                Value::Array(items) => items
                    .iter()
                    .map(channel)
                    .try_fold(0u32, |acc, c| c.map(|c| acc | c)),
                other => int(other).and_then(|m| u32::try_from(m).ok()),
            };
            mask.map(Ear::AdcChannelMask)
                .ok_or_else(|| schema(format!("{what}: expected an ADC channel mask or channel list")))
        }
    }
}

fn parse_rights(names: &[String], what: &str) -> Result<Rights, ScenarioError> {
    names.iter().try_fold(Rights::empty(), |acc, n| {
        let r = match n.trim_start_matches('e').to_ascii_uppercase().as_str() {
            "READ" => Rights::READ,
            "WRITE" => Rights::WRITE,
            "FULL_DUPLEX" | "FULLDUPLEX" => Rights::FULL_DUPLEX,
            _ => return Err(schema(format!("{what}: unknown right {n:?}"))),
        };
        Ok(acc | r)
    })
}

fn region(doc: &RegionDoc, what: &str) -> Result<UserRegion, ScenarioError> {
    let range = RangeDoc {
        base: doc.base,
        size: doc.size,
    }
    .range(what)?;
    let permission = Permission::new(doc.privileged.unwrap_or(Access::Rw), doc.access, doc.xn)
        .map_err(|e| schema(format!("{what}: {e}")))?;
    Ok(UserRegion { range, permission })
}

/// The privileged DMA service task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaTaskLayout {
    pub code: AddressRange,
    pub stack: AddressRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Canary {
    pub addr: u32,
    pub value: u8,
}

/// A loaded, validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub notes: Vec<String>,
    pub ticks: Option<u64>,
    pub profile: MemoryProfile,
    pub layout: KernelLayout,
    pub dma_task: Option<DmaTaskLayout>,
    pub canary: Option<Canary>,
    pub time_slice: u32,
    pub init: Vec<(u32, Vec<u8>)>,
    pub tasks: Vec<TaskSpec>,
    pub toggles: BTreeMap<String, bool>,
}

impl Scenario {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc = serde_json::from_str(text)?;
        Self::from_doc(&doc)
    }

    pub fn from_doc(doc: &ScenarioDoc) -> Result<Self, ScenarioError> {
        let profile = load_profile(&doc.mcu)?;
        let k = &doc.kernel;
        let layout = KernelLayout {
            syscalls_region: k.syscalls.range("kernel.syscalls")?,
            kernel_code_region: k.code.range("kernel.code")?,
            kernel_data_region: k.data.range("kernel.data")?,
            mode: doc.mode,
        };
        for (what, r, home) in [
            ("kernel.syscalls", layout.syscalls_region, profile.flash),
            ("kernel.code", layout.kernel_code_region, profile.flash),
            ("kernel.data", layout.kernel_data_region, profile.ram),
        ] {
            if !home.contains(&r) {
                return Err(ProfileError::Partition {
                    what: what.into(),
                    range: r,
                    partition: home,
                }
                .into());
            }
        }
        if k.time_slice == 0 {
            return Err(schema("kernel.time_slice must be at least 1"));
        }
        let dma_task = k
            .dma_task
            .as_ref()
            .map(|d| {
                Ok::<_, ScenarioError>(DmaTaskLayout {
                    code: user_code(d.code.range("kernel.dma_task.code")?, &profile, &layout, "kernel.dma_task.code")?,
                    stack: d.stack.range("kernel.dma_task.stack")?,
                })
            })
            .transpose()?;
        let canary = k
            .canary
            .as_ref()
            .map(|c| {
                let value = u8::try_from(c.value.0).map_err(|_| schema("kernel.canary.value must fit a byte"))?;
                Ok::<_, ScenarioError>(Canary {
                    addr: c.addr.u32("kernel.canary.addr")?,
                    value,
                })
            })
            .transpose()?;
        let init = doc
            .mcu
            .init
            .iter()
            .map(|i| Ok((i.addr.u32("mcu.init.addr")?, decode_hex(&i.bytes)?)))
            .collect::<Result<Vec<_>, ScenarioError>>()?;

        let has_controller = profile.dma_controllers().next().is_some();
        let mut tasks = Vec::new();
        let mut names = std::collections::BTreeSet::new();
        for t in &doc.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(schema(format!("duplicate task name {}", t.name)));
            }
            let spec = task_spec(t, &profile, &layout)?;
            let needs_service = !spec.capabilities.is_empty()
                || spec
                    .behavior
                    .iter()
                    .any(|s| matches!(s.action, Action::DmaRequest { .. }));
            if needs_service && (dma_task.is_none() || !has_controller) {
                return Err(schema(format!(
                    "task {}: DMA capabilities and requests need a DMA_CONTROLLER peripheral and kernel.dma_task",
                    t.name
                )));
            }
            let raw = spec
                .behavior
                .iter()
                .any(|s| matches!(s.action, Action::RawDmaConfig { .. }));
            let raw_target = match profile.dma_descriptor_home {
                DescriptorHome::Mmio => has_controller,
                DescriptorHome::KernelRam => profile.descriptor_arena.is_some(),
            };
            if raw && !raw_target {
                return Err(schema(format!(
                    "task {}: RAW_DMA_CONFIG needs a DMA controller or descriptor arena",
                    t.name
                )));
            }
            tasks.push(spec);
        }
        Ok(Self {
            name: doc.name.clone(),
            description: doc.description.clone(),
            notes: doc.notes.clone(),
            ticks: doc.ticks,
            profile,
            layout,
            dma_task,
            canary,
            time_slice: k.time_slice,
            init,
            tasks,
            toggles: doc.attack_toggles.clone(),
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.layout.mode = mode;
        self
    }

    /// Sets a toggle; unknown names are reported as an error.
    pub fn set_toggle(&mut self, name: &str, value: bool) -> Result<(), ScenarioError> {
        match self.toggles.get_mut(name) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(schema(format!("unknown attack toggle {name:?}"))),
        }
    }
}

fn decode_hex(s: &str) -> Result<Vec<u8>, ScenarioError> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !s.len().is_multiple_of(2) {
        return Err(schema("init bytes need an even number of hex digits"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| schema(format!("bad hex byte {:?}", &s[i..i + 2]))))
        .collect()
}

/// Task code must sit in flash outside the syscall and kernel code regions.
fn user_code(
    r: AddressRange,
    profile: &MemoryProfile,
    layout: &KernelLayout,
    what: &str,
) -> Result<AddressRange, ScenarioError> {
    if !profile.flash.contains(&r) {
        return Err(schema(format!("{what} {r} lies outside flash")));
    }
    if r.intersects(&layout.syscalls_region) || r.intersects(&layout.kernel_code_region) {
        return Err(schema(format!("{what} {r} overlaps kernel flash")));
    }
    Ok(r)
}

fn task_spec(t: &TaskDoc, profile: &MemoryProfile, layout: &KernelLayout) -> Result<TaskSpec, ScenarioError> {
    let what = |s: &str| format!("task {}: {s}", t.name);
    let user_regions = t
        .regions
        .iter()
        .enumerate()
        .map(|(i, r)| region(r, &what(&format!("region {i}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let capabilities = t
        .capabilities
        .iter()
        .map(|c| {
            let ctx = what(&format!("capability {}", c.0));
            let p = profile
                .peripheral(&c.0)
                .ok_or_else(|| schema(format!("{ctx}: unknown peripheral")))?;
            let rights = parse_rights(&c.1, &ctx)?;
            let ear = parse_ear(p.ear_kind, &c.2, &ctx)?;
            DmaCapability::new(c.0.clone(), rights, ear, profile).map_err(|e| schema(format!("{ctx}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gate = layout.syscalls_region.base();
    let behavior = t
        .behavior
        .iter()
        .enumerate()
        .map(|(i, a)| action(a, profile, gate, &what(&format!("step {i}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if t.period == Some(0) {
        return Err(schema(what("period must be at least 1")));
    }
    Ok(TaskSpec {
        name: t.name.clone(),
        privileged: t.privileged,
        code_region: user_code(t.code.range(&what("code"))?, profile, layout, &what("code"))?,
        stack_region: t.stack.range(&what("stack"))?,
        user_regions,
        capabilities,
        behavior,
        period: t.period,
        iterations: t.iterations,
    })
}

fn action(a: &ActionDoc, profile: &MemoryProfile, gate: u32, what: &str) -> Result<Step, ScenarioError> {
    let at = |h: &Option<Hex>| h.map_or(Ok(gate), |h| h.u32(what));
    let len = |h: Hex| -> Result<u32, ScenarioError> {
        let l = h.u32(what)?;
        if l == 0 {
            Err(schema(format!("{what}: length must be positive")))
        } else {
            Ok(l)
        }
    };
    let (action, toggle) = match a {
        ActionDoc::MemRead { addr, len: l, toggle } => (
            Action::MemRead {
                addr: addr.u32(what)?,
                len: len(*l)?,
            },
            toggle,
        ),
        ActionDoc::MemWrite {
            addr,
            len: l,
            fill,
            toggle,
        } => (
            Action::MemWrite {
                addr: addr.u32(what)?,
                len: len(*l)?,
                fill: u8::try_from(fill.0).map_err(|_| schema(format!("{what}: fill must fit a byte")))?,
            },
            toggle,
        ),
        ActionDoc::Exec { addr, toggle } => (Action::Exec { addr: addr.u32(what)? }, toggle),
        ActionDoc::Syscall { at: a, toggle } => (Action::Syscall { at: at(a)? }, toggle),
        ActionDoc::DmaRequest {
            peripheral,
            operation,
            buffer,
            tx,
            rx,
            ear,
            at: a,
            toggle,
        } => {
            let need = |r: &Option<RangeDoc>, name: &str| {
                r.as_ref()
                    .ok_or_else(|| schema(format!("{what}: {operation:?} request needs {name}")))?
                    .range(what)
            };
            let operation = match operation {
                OperationKind::Read => DmaOperation::Read {
                    into: need(buffer, "buffer")?,
                },
                OperationKind::Write => DmaOperation::Write {
                    from: need(buffer, "buffer")?,
                },
                OperationKind::FullDuplex => DmaOperation::FullDuplex {
                    tx: need(tx, "tx")?,
                    rx: need(rx, "rx")?,
                },
            };
            // unknown peripherals are left for the policy to reject
            let ear = match profile.peripheral(peripheral) {
                Some(p) => parse_ear(p.ear_kind, ear, what)?,
                None => Ear::None,
            };
            (
                Action::DmaRequest {
                    at: at(a)?,
                    peripheral: peripheral.clone(),
                    operation,
                    ear,
                },
                toggle,
            )
        }
        ActionDoc::RawDmaConfig {
            channel,
            source,
            destination,
            length,
            direction,
            toggle,
        } => {
            let source = source.range(what)?;
            let destination = destination.range(what)?;
            let length = match length {
                Some(l) => len(*l)?,
                None => source.size().max(destination.size()),
            };
            (
                Action::RawDmaConfig {
                    channel: *channel,
                    source,
                    destination,
                    length,
                    direction: *direction,
                },
                toggle,
            )
        }
        ActionDoc::RedefineRegions { regions, at: a, toggle } => (
            Action::RedefineRegions {
                at: at(a)?,
                regions: regions
                    .iter()
                    .enumerate()
                    .map(|(i, r)| region(r, &format!("{what} region {i}")))
                    .collect::<Result<_, _>>()?,
            },
            toggle,
        ),
        ActionDoc::WaitNotify { toggle } => (Action::WaitNotify, toggle),
        ActionDoc::Nop { toggle } => (Action::Nop, toggle),
    };
    Ok(Step {
        action,
        toggle: toggle.clone(),
    })
}
