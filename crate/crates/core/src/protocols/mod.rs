//! Routing protocols behind one interface.
//!
//! Protocol state for a node is only touched from that node's callbacks; nodes exchange
//! information exclusively through [`Ctx::send`]. The `basic` oracle is the one exception:
//! it reads the whole live network.

pub mod basic;
pub mod etora;
pub mod mdart;
pub mod terp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Ctx, FailReason, HopFailure, Message, Payload, PaymentId};
use crate::pcn::{Amount, NodeId};
use crate::SimTime;

pub use basic::{basic_route, Basic};
pub use etora::{Etora, EtoraParams, Height};
pub use mdart::{Mdart, MdartAddress, MdartError, MdartParams};
pub use terp::{Observation, Terp, TerpParams, TerpRouteEntry, TrustEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Basic,
    Etora,
    Terp,
    Mdart,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::Basic,
        ProtocolKind::Etora,
        ProtocolKind::Terp,
        ProtocolKind::Mdart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Basic => "basic",
            ProtocolKind::Etora => "etora",
            ProtocolKind::Terp => "terp",
            ProtocolKind::Mdart => "mdart",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown protocol `{0}` (valid: basic|etora|terp|mdart)")]
pub struct UnknownProtocol(pub String);

impl FromStr for ProtocolKind {
    type Err = UnknownProtocol;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| UnknownProtocol(s.to_string()))
    }
}

/// Per-protocol parameter overrides, namespaced by protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub etora: EtoraParams,
    pub terp: TerpParams,
    pub mdart: MdartParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteRequest {
    pub payment: PaymentId,
    pub src: NodeId,
    pub dst: NodeId,
    pub amount: Amount,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Forwarding {
    /// The full path, starting at the sender.
    SourceRoute(Vec<NodeId>),
    /// Each node picks the next hop; `label` travels in the packet header.
    HopByHop { label: Option<u64> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prepared {
    Ready(Forwarding),
    /// The protocol resolves the payment later through [`Ctx::resolve`].
    Pending,
    Failed(FailReason),
}

/// A payment lock travelling hop by hop.
#[derive(Clone, Copy, Debug)]
pub struct Flow<'a> {
    pub payment: PaymentId,
    pub src: NodeId,
    pub dst: NodeId,
    pub amount: Amount,
    pub label: Option<u64>,
    /// Nodes visited so far, sender first.
    pub path: &'a [NodeId],
}

/// Routing state held by one node.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Footprint {
    /// All protocol entries.
    pub entries: f64,
    /// The routing-table part of `entries`.
    pub routing_entries: f64,
}

pub type ProtoCtx<'a, P> = Ctx<'a, <P as RoutingProtocol>::Msg, <P as RoutingProtocol>::Timer>;

pub trait RoutingProtocol {
    type Msg: Payload;
    type Timer: Clone + fmt::Debug;

    fn kind(&self) -> ProtocolKind;

    fn on_bootstrap(&mut self, _ctx: &mut ProtoCtx<'_, Self>, _node: NodeId) {}

    fn on_message(&mut self, ctx: &mut ProtoCtx<'_, Self>, msg: Message<Self::Msg>);

    fn on_timer(&mut self, _ctx: &mut ProtoCtx<'_, Self>, _node: NodeId, _timer: Self::Timer) {}

    /// `node` lost its channel to `neighbor`.
    fn on_link_down(&mut self, _ctx: &mut ProtoCtx<'_, Self>, _node: NodeId, _neighbor: NodeId) {}

    /// Called at the sender when a payment arrives.
    fn prepare(&mut self, ctx: &mut ProtoCtx<'_, Self>, req: &RouteRequest) -> Prepared;

    /// Forwarding decision at `node` for a hop-by-hop payment.
    fn next_hop(&mut self, ctx: &mut ProtoCtx<'_, Self>, node: NodeId, flow: &Flow<'_>) -> Result<NodeId, FailReason>;

    /// Hop outcome notification once a payment attempt resolves.
    fn on_outcome(
        &mut self,
        _ctx: &mut ProtoCtx<'_, Self>,
        _req: &RouteRequest,
        _route: &[NodeId],
        _outcome: Result<(), HopFailure>,
    ) {
    }

    fn footprint(&self, node: NodeId, now: SimTime) -> Footprint;
}

/// Index of the best score; exact ties go to the lower node id.
pub(crate) fn argmax_by_score(cands: impl IntoIterator<Item = (NodeId, f64)>) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for (id, score) in cands {
        best = match best {
            None => Some((id, score)),
            Some((bid, bs)) if score > bs || (score == bs && id < bid) => Some((id, score)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn protocol_names_round_trip() {
        for p in ProtocolKind::ALL {
            assert_eq!(p.name().parse::<ProtocolKind>().unwrap(), p);
        }
        let err = "zrp".parse::<ProtocolKind>().unwrap_err();
        assert!(err.to_string().contains("basic|etora|terp|mdart"));
    }

    proptest! {
        #[test]
        fn argmax_is_scale_free(
            scores in proptest::collection::vec(0.0f64..10.0, 1..12),
            exp in -8i32..8,
        ) {
            let factor = 2f64.powi(exp);
            let base = argmax_by_score(scores.iter().enumerate().map(|(i, &s)| (NodeId(i as u32), s)));
            let scaled = argmax_by_score(scores.iter().enumerate().map(|(i, &s)| (NodeId(i as u32), s * factor)));
            prop_assert_eq!(base, scaled);
        }
    }
}
