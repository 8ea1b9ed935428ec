//! Event trace. One tab-separated line per event:
//! `tick  SUB  EVENT  task  detail`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kernel::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subsystem {
    #[serde(rename = "KRN")]
    Kernel,
    #[serde(rename = "MPU")]
    Mpu,
    #[serde(rename = "DMA")]
    Dma,
    #[serde(rename = "POL")]
    Policy,
    #[serde(rename = "ISR")]
    Isr,
}

impl Subsystem {
    pub fn tag(self) -> &'static str {
        match self {
            Subsystem::Kernel => "KRN",
            Subsystem::Mpu => "MPU",
            Subsystem::Dma => "DMA",
            Subsystem::Policy => "POL",
            Subsystem::Isr => "ISR",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "KRN" => Subsystem::Kernel,
            "MPU" => Subsystem::Mpu,
            "DMA" => Subsystem::Dma,
            "POL" => Subsystem::Policy,
            "ISR" => Subsystem::Isr,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub subsystem: Subsystem,
    pub event: String,
    pub task: Option<TaskId>,
    pub detail: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let task = self.task.map_or_else(|| "-".to_string(), |t| t.to_string());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.tick,
            self.subsystem.tag(),
            self.event,
            task,
            self.detail
        )
    }
}

impl TraceEvent {
    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.splitn(5, '\t');
        let tick = it.next()?.parse().ok()?;
        let subsystem = Subsystem::from_tag(it.next()?)?;
        let event = it.next()?.to_string();
        let task = match it.next()? {
            "-" => None,
            t => Some(TaskId(t.parse().ok()?)),
        };
        let detail = it.next().unwrap_or("").to_string();
        Some(Self {
            tick,
            subsystem,
            event,
            task,
            detail,
        })
    }

    /// Value of a `key=value` token in the detail field.
    pub fn field(&self, key: &str) -> Option<&str> {
        self.detail
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(key)?.strip_prefix('='))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(
        &mut self,
        tick: u64,
        subsystem: Subsystem,
        event: &str,
        task: Option<TaskId>,
        detail: impl Into<String>,
    ) {
        self.events.push(TraceEvent {
            tick,
            subsystem,
            event: event.to_string(),
            task,
            detail: detail.into(),
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}
