//! Height-based DAG routing with partial link reversal. The next hop among downstream
//! neighbors blends DAG proximity with the outbound channel balance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    argmax_by_score, Flow, Footprint, Forwarding, Prepared, ProtoCtx, ProtocolKind, RouteRequest, RoutingProtocol,
};
use crate::engine::{FailReason, Message, Payload, PaymentId, Role, SizeModel};
use crate::pcn::NodeId;
use crate::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtoraParams {
    /// Weight of the balance term in next-hop scoring.
    pub alpha: f64,
    pub query_timeout_ms: u64,
    /// A node holding a height answers queries with an update at most this often.
    pub upd_min_interval_ms: u64,
}

impl Default for EtoraParams {
    fn default() -> Self {
        EtoraParams {
            alpha: 0.5,
            query_timeout_ms: 2_000,
            upd_min_interval_ms: 100,
        }
    }
}

/// Ordered lexicographically: reference level `(tau, oid, r)`, then `delta`, then `id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Height {
    pub tau: SimTime,
    pub oid: NodeId,
    pub r: bool,
    pub delta: i64,
    pub id: NodeId,
}

impl Height {
    pub fn zero(dst: NodeId) -> Self {
        Height {
            tau: SimTime::ZERO,
            oid: NodeId(0),
            r: false,
            delta: 0,
            id: dst,
        }
    }

    fn reference(&self) -> (SimTime, NodeId, bool) {
        (self.tau, self.oid, self.r)
    }
}

#[derive(Clone, Debug)]
pub enum EtoraMsg {
    Qry { dst: NodeId },
    Upd { dst: NodeId, height: Option<Height> },
    Clr { dst: NodeId, tau: SimTime, oid: NodeId },
}

impl Payload for EtoraMsg {
    fn label(&self) -> &'static str {
        match self {
            EtoraMsg::Qry { .. } => "qry",
            EtoraMsg::Upd { .. } => "upd",
            EtoraMsg::Clr { .. } => "clr",
        }
    }

    fn size(&self, sizes: &SizeModel) -> u32 {
        sizes.control
    }
}

#[derive(Clone, Debug)]
pub enum EtoraTimer {
    QueryTimeout { payment: PaymentId, dst: NodeId },
}

#[derive(Clone, Debug, Default)]
struct DestState {
    height: Option<Height>,
    route_required: bool,
    last_upd: Option<SimTime>,
    neighbors: Vec<(NodeId, Option<Height>)>,
}

impl DestState {
    fn neighbor(&self, id: NodeId) -> Option<Height> {
        self.neighbors.iter().find(|(n, _)| *n == id).and_then(|(_, h)| *h)
    }

    fn set_neighbor(&mut self, id: NodeId, h: Option<Height>) {
        match self.neighbors.iter_mut().find(|(n, _)| *n == id) {
            Some(slot) => slot.1 = h,
            None => self.neighbors.push((id, h)),
        }
    }

    fn has_downstream(&self) -> bool {
        match self.height {
            Some(own) => self.neighbors.iter().any(|(_, h)| h.is_some_and(|h| h < own)),
            None => false,
        }
    }

    fn min_neighbor(&self) -> Option<Height> {
        self.neighbors.iter().filter_map(|(_, h)| *h).min()
    }
}

#[derive(Debug)]
pub struct Etora {
    params: EtoraParams,
    nodes: Vec<HashMap<NodeId, DestState>>,
    pending: HashMap<(NodeId, NodeId), Vec<PaymentId>>,
}

type Cx<'a> = ProtoCtx<'a, Etora>;

impl Etora {
    pub fn new(n: usize, params: EtoraParams) -> Self {
        Etora {
            params,
            nodes: vec![HashMap::new(); n],
            pending: HashMap::new(),
        }
    }

    pub fn height(&self, node: NodeId, dst: NodeId) -> Option<Height> {
        if node == dst {
            return Some(Height::zero(dst));
        }
        self.nodes[node.index()].get(&dst).and_then(|s| s.height)
    }

    /// Last height `node` heard from `neighbor` for `dst`.
    pub fn neighbor_height(&self, node: NodeId, neighbor: NodeId, dst: NodeId) -> Option<Height> {
        self.nodes[node.index()].get(&dst).and_then(|s| s.neighbor(neighbor))
    }

    fn state(&mut self, node: NodeId, dst: NodeId) -> &mut DestState {
        let st = self.nodes[node.index()].entry(dst).or_default();
        if node == dst {
            st.height = Some(Height::zero(dst));
        }
        st
    }

    fn broadcast_upd(&mut self, ctx: &mut Cx<'_>, node: NodeId, dst: NodeId) {
        let now = ctx.now();
        let st = self.state(node, dst);
        st.last_upd = Some(now);
        let height = st.height;
        ctx.broadcast(node, EtoraMsg::Upd { dst, height }, if node == dst { Role::Endpoint } else { Role::Router }, None);
    }

    /// Candidate next hops: downstream neighbors over open channels with enough balance.
    fn downstream(&self, ctx: &Cx<'_>, node: NodeId, dst: NodeId) -> Vec<(NodeId, Height)> {
        let Some(st) = self.nodes[node.index()].get(&dst) else { return Vec::new() };
        let Some(own) = (if node == dst { Some(Height::zero(dst)) } else { st.height }) else {
            return Vec::new();
        };
        st.neighbors
            .iter()
            .filter_map(|&(n, h)| h.filter(|h| *h < own).map(|h| (n, h)))
            .filter(|(n, _)| ctx.net().outbound_balance(node, *n).is_some())
            .collect()
    }

    /// Scores `(1 - alpha) / (1 + d) + alpha * b` where `d` is the neighbor's delta shifted
    /// to be non-negative and `b` the normalized outbound balance.
    pub fn choose(alpha: f64, cands: &[(NodeId, i64, f64)]) -> Option<NodeId> {
        let shift = cands.iter().map(|c| c.1).min().unwrap_or(0).min(0);
        argmax_by_score(
            cands
                .iter()
                .map(|&(n, delta, b)| (n, (1.0 - alpha) / (1.0 + (delta - shift) as f64) + alpha * b)),
        )
    }

    fn flush_pending(&mut self, ctx: &mut Cx<'_>, node: NodeId, dst: NodeId) {
        if let Some(list) = self.pending.remove(&(node, dst)) {
            for p in list {
                ctx.resolve(p, Ok(Forwarding::HopByHop { label: None }));
            }
        }
    }

    /// Adopts a height one below the lowest neighbor if the node has none yet.
    fn adopt(&mut self, ctx: &mut Cx<'_>, node: NodeId, dst: NodeId) -> bool {
        let st = self.state(node, dst);
        let Some(min) = st.min_neighbor() else { return false };
        st.height = Some(Height {
            delta: min.delta + 1,
            id: node,
            ..min
        });
        st.route_required = false;
        self.broadcast_upd(ctx, node, dst);
        self.flush_pending(ctx, node, dst);
        true
    }

    /// The node lost its last downstream link after a neighbor changed height.
    fn reverse(&mut self, ctx: &mut Cx<'_>, node: NodeId, dst: NodeId) {
        let now = ctx.now();
        let st = self.state(node, dst);
        let known: Vec<Height> = st.neighbors.iter().filter_map(|(_, h)| *h).collect();
        if known.is_empty() {
            st.height = None;
            self.broadcast_upd(ctx, node, dst);
            return;
        }
        let max_ref = known.iter().map(Height::reference).max().expect("non-empty");
        let all_same = known.iter().all(|h| h.reference() == max_ref);
        let (tau, oid, r) = max_ref;
        st.height = if !all_same {
            // propagate the highest reference level
            let delta = known.iter().filter(|h| h.reference() == max_ref).map(|h| h.delta).min().expect("non-empty");
            Some(Height { tau, oid, r, delta: delta - 1, id: node })
        } else if !r {
            // reflect
            Some(Height { tau, oid, r: true, delta: 0, id: node })
        } else if oid == node {
            // our own reflected level came back: partition
            st.height = None;
            for (_, h) in st.neighbors.iter_mut() {
                if h.is_some_and(|h| (h.tau, h.oid) == (tau, oid)) {
                    *h = None;
                }
            }
            ctx.broadcast(node, EtoraMsg::Clr { dst, tau, oid }, Role::Router, None);
            return;
        } else {
            Some(Self::generated(now, node))
        };
        self.broadcast_upd(ctx, node, dst);
    }

    fn generated(now: SimTime, node: NodeId) -> Height {
        Height {
            tau: now,
            oid: node,
            r: false,
            delta: 0,
            id: node,
        }
    }

    /// Lost downstream through a link failure or an erased neighbor.
    fn regenerate(&mut self, ctx: &mut Cx<'_>, node: NodeId, dst: NodeId) {
        let now = ctx.now();
        let alive = ctx.net().open_degree(node) > 0;
        let st = self.state(node, dst);
        st.height = alive.then(|| Self::generated(now, node));
        self.broadcast_upd(ctx, node, dst);
    }

    fn on_qry(&mut self, ctx: &mut Cx<'_>, node: NodeId, dst: NodeId) {
        let min_gap = self.params.upd_min_interval_ms;
        let now = ctx.now();
        let st = self.state(node, dst);
        if st.height.is_some() {
            if st.last_upd.is_none_or(|t| now.saturating_sub(t) > min_gap) {
                self.broadcast_upd(ctx, node, dst);
            }
        } else if !st.route_required {
            if st.min_neighbor().is_some() {
                self.adopt(ctx, node, dst);
            } else {
                st.route_required = true;
                ctx.broadcast(node, EtoraMsg::Qry { dst }, Role::Router, None);
            }
        }
    }

    fn on_upd(&mut self, ctx: &mut Cx<'_>, node: NodeId, from: NodeId, dst: NodeId, h: Option<Height>) {
        let st = self.state(node, dst);
        let had_downstream = st.has_downstream();
        st.set_neighbor(from, h);
        if node == dst {
            return;
        }
        if st.height.is_none() {
            if st.route_required && h.is_some() {
                self.adopt(ctx, node, dst);
            }
        } else if had_downstream && !st.has_downstream() {
            self.reverse(ctx, node, dst);
        }
    }

    fn on_clr(&mut self, ctx: &mut Cx<'_>, node: NodeId, from: NodeId, dst: NodeId, tau: SimTime, oid: NodeId) {
        let st = self.state(node, dst);
        let had_downstream = st.has_downstream();
        for (n, h) in st.neighbors.iter_mut() {
            if *n == from || h.is_some_and(|h| (h.tau, h.oid) == (tau, oid)) {
                *h = None;
            }
        }
        if node == dst {
            return;
        }
        let own_level = st.height.is_some_and(|h| (h.tau, h.oid, h.r) == (tau, oid, true));
        if own_level {
            st.height = None;
            st.route_required = false;
            ctx.broadcast(node, EtoraMsg::Clr { dst, tau, oid }, Role::Router, None);
        } else if st.height.is_some() && had_downstream && !st.has_downstream() {
            self.regenerate(ctx, node, dst);
        }
    }

    /// Nodes holding a height for `dst` that have no downstream neighbor on an open channel.
    pub fn stranded(&self, ctx_net: &crate::pcn::Network, dst: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (i, dests) in self.nodes.iter().enumerate() {
            let node = NodeId(i as u32);
            if node == dst {
                continue;
            }
            let Some(st) = dests.get(&dst) else { continue };
            let Some(own) = st.height else { continue };
            let ok = st
                .neighbors
                .iter()
                .any(|&(n, h)| h.is_some_and(|h| h < own) && ctx_net.outbound_balance(node, n).is_some());
            if !ok {
                out.push(node);
            }
        }
        out
    }
}

impl RoutingProtocol for Etora {
    type Msg = EtoraMsg;
    type Timer = EtoraTimer;

    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Etora
    }

    fn on_message(&mut self, ctx: &mut Cx<'_>, msg: Message<EtoraMsg>) {
        let node = msg.receiver;
        match msg.kind {
            EtoraMsg::Qry { dst } => self.on_qry(ctx, node, dst),
            EtoraMsg::Upd { dst, height } => self.on_upd(ctx, node, msg.sender, dst, height),
            EtoraMsg::Clr { dst, tau, oid } => self.on_clr(ctx, node, msg.sender, dst, tau, oid),
        }
    }

    fn on_timer(&mut self, ctx: &mut Cx<'_>, node: NodeId, timer: EtoraTimer) {
        let EtoraTimer::QueryTimeout { payment, dst } = timer;
        let Some(list) = self.pending.get_mut(&(node, dst)) else { return };
        let Some(pos) = list.iter().position(|&p| p == payment) else { return };
        list.remove(pos);
        if list.is_empty() {
            self.pending.remove(&(node, dst));
            // allow a later payment to query again
            if let Some(st) = self.nodes[node.index()].get_mut(&dst) {
                if st.height.is_none() {
                    st.route_required = false;
                }
            }
        }
        ctx.resolve(payment, Err(FailReason::NoRoute));
    }

    fn on_link_down(&mut self, ctx: &mut Cx<'_>, node: NodeId, neighbor: NodeId) {
        let dsts: Vec<NodeId> = self.nodes[node.index()].keys().copied().collect();
        let mut affected = Vec::new();
        for dst in dsts {
            let st = self.state(node, dst);
            let had = st.has_downstream();
            st.neighbors.retain(|(n, _)| *n != neighbor);
            if node != dst && st.height.is_some() && had && !st.has_downstream() {
                affected.push(dst);
            }
        }
        affected.sort();
        for dst in affected {
            self.regenerate(ctx, node, dst);
        }
    }

    fn prepare(&mut self, ctx: &mut Cx<'_>, req: &RouteRequest) -> Prepared {
        let (src, dst) = (req.src, req.dst);
        if src == dst {
            return Prepared::Ready(Forwarding::SourceRoute(vec![src]));
        }
        let st = self.state(src, dst);
        if st.height.is_some() {
            return Prepared::Ready(Forwarding::HopByHop { label: None });
        }
        self.pending.entry((src, dst)).or_default().push(req.payment);
        ctx.set_timer(
            src,
            self.params.query_timeout_ms,
            EtoraTimer::QueryTimeout {
                payment: req.payment,
                dst,
            },
        );
        let st = self.state(src, dst);
        if st.min_neighbor().is_some() {
            self.adopt(ctx, src, dst);
        } else if !st.route_required {
            st.route_required = true;
            ctx.broadcast(src, EtoraMsg::Qry { dst }, Role::Endpoint, None);
        }
        Prepared::Pending
    }

    fn next_hop(&mut self, ctx: &mut Cx<'_>, node: NodeId, flow: &Flow<'_>) -> Result<NodeId, FailReason> {
        let down = self.downstream(ctx, node, flow.dst);
        if down.is_empty() {
            return Err(FailReason::NoRoute);
        }
        let net = ctx.net();
        let cands: Vec<(NodeId, i64, f64)> = down
            .into_iter()
            .filter_map(|(n, h)| {
                let cid = net.channel_between(node, n)?;
                let ch = net.channel(cid);
                (ch.balance_from(node) >= flow.amount).then(|| (n, h.delta, ch.normalized_balance_from(node)))
            })
            .collect();
        Self::choose(self.params.alpha, &cands).ok_or(FailReason::InsufficientBalance)
    }

    fn footprint(&self, node: NodeId, _: SimTime) -> Footprint {
        let entries: usize = self.nodes[node.index()]
            .values()
            .map(|st| st.height.is_some() as usize + st.neighbors.len())
            .sum();
        Footprint {
            entries: entries as f64,
            routing_entries: entries as f64,
        }
    }
}
