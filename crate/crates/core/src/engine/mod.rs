//! Discrete-event core: virtual clock, message delivery, packet accounting and
//! atomic multi-hop payment execution.

mod payment;
mod queue;
mod sim;

use serde::{Deserialize, Serialize};

use crate::pcn::NodeId;
use crate::SimTime;

#[cfg(test)]
pub(crate) use payment::hop_amounts;
pub use payment::{execute_payment, FailReason, HopFailure, Payment, PaymentId, PaymentStatus};
pub use queue::EventQueue;
pub use sim::{Ctx, MemorySample, RunOptions, RunReport, ShadowAudit, Simulation};

/// Who originated a packet, for the node/router packet metric split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Originated by the payment sender or receiver.
    Endpoint,
    /// Originated or forwarded by an intermediary, or routing maintenance.
    Router,
}

/// Byte model for packets and routing-state entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeModel {
    pub control: u32,
    pub payment_lock: u32,
    pub table_entry: u32,
}

impl Default for SizeModel {
    fn default() -> Self {
        SizeModel {
            control: 64,
            payment_lock: 128,
            table_entry: 32,
        }
    }
}

impl SizeModel {
    pub fn table_update(&self, entries: usize) -> u32 {
        self.table_entry * entries.max(1) as u32
    }
}

/// Protocol-defined message contents.
pub trait Payload: Clone + std::fmt::Debug {
    /// Short tag used in traces.
    fn label(&self) -> &'static str;
    fn size(&self, sizes: &SizeModel) -> u32;
}

/// For protocols that never exchange messages.
#[derive(Clone, Debug)]
pub enum NoMessage {}

impl Payload for NoMessage {
    fn label(&self) -> &'static str {
        match *self {}
    }

    fn size(&self, _: &SizeModel) -> u32 {
        match *self {}
    }
}

#[derive(Clone, Debug)]
pub struct Message<M> {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub kind: M,
    pub payload_size: u32,
    pub origin_role: Role,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketCounters {
    /// Every send attempt, payment packets included.
    pub sent: u64,
    pub dropped: u64,
    pub node_count: u64,
    pub node_bytes: u64,
    pub router_count: u64,
    pub router_bytes: u64,
}

impl PacketCounters {
    pub(crate) fn record(&mut self, role: Role, size: u32) {
        self.sent += 1;
        match role {
            Role::Endpoint => {
                self.node_count += 1;
                self.node_bytes += size as u64;
            }
            Role::Router => {
                self.router_count += 1;
                self.router_bytes += size as u64;
            }
        }
    }

    pub(crate) fn record_drop(&mut self) {
        self.sent += 1;
        self.dropped += 1;
    }
}

/// One line of the optional event trace: `time kind src dst size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub kind: &'static str,
    pub src: NodeId,
    pub dst: NodeId,
    pub size: u32,
    pub role: Role,
}

impl std::fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {} {} {} {}", self.time, self.kind, self.src, self.dst, self.size)
    }
}
