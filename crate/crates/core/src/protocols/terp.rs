//! On-demand request/reply routing with per-neighbor trust.
//!
//! Trust is kept in integer basis points (10 000 = 1.0) so that update sequences are exact.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    argmax_by_score, Flow, Footprint, Forwarding, Prepared, ProtoCtx, ProtocolKind, RouteRequest, RoutingProtocol,
};
use crate::engine::{FailReason, HopFailure, Message, Payload, PaymentId, Role, SizeModel};
use crate::pcn::{Amount, FeePolicy, NodeId};
use crate::SimTime;

const BP: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerpParams {
    pub trust_initial: f64,
    pub trust_reward: f64,
    pub trust_penalty: f64,
    /// Next hops with trust below this are never used.
    pub trust_threshold: f64,
    pub weight_trust: f64,
    pub weight_balance: f64,
    pub weight_hops: f64,
    pub discovery_timeout_ms: u64,
    /// Total discovery attempts before giving up.
    pub discovery_attempts: u32,
    pub route_lifetime_ms: u64,
}

impl Default for TerpParams {
    fn default() -> Self {
        TerpParams {
            trust_initial: 0.5,
            trust_reward: 0.05,
            trust_penalty: 0.20,
            trust_threshold: 0.3,
            weight_trust: 0.5,
            weight_balance: 0.3,
            weight_hops: 0.2,
            discovery_timeout_ms: 2_000,
            discovery_attempts: 3,
            route_lifetime_ms: 10_000,
        }
    }
}

fn to_bp(x: f64) -> u32 {
    (x.clamp(0.0, 1.0) * BP).round() as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Forwarded,
    Dropped,
}

/// What a node knows about one neighbor's reliability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrustEntry {
    pub trust_bp: u32,
    pub forwards_seen: u32,
    pub drops_seen: u32,
}

impl TrustEntry {
    pub fn trust(&self) -> f64 {
        self.trust_bp as f64 / BP
    }
}

#[derive(Clone, Copy, Debug)]
struct TrustRule {
    initial: u32,
    reward: u32,
    penalty: u32,
    threshold: u32,
}

impl TrustRule {
    fn new(p: &TerpParams) -> Self {
        TrustRule {
            initial: to_bp(p.trust_initial),
            reward: to_bp(p.trust_reward),
            penalty: to_bp(p.trust_penalty),
            threshold: to_bp(p.trust_threshold),
        }
    }

    fn fresh(&self) -> TrustEntry {
        TrustEntry {
            trust_bp: self.initial,
            forwards_seen: 0,
            drops_seen: 0,
        }
    }

    fn apply(&self, e: &mut TrustEntry, obs: Observation) {
        match obs {
            Observation::Forwarded => {
                e.trust_bp = (e.trust_bp + self.reward).min(BP as u32);
                e.forwards_seen += 1;
            }
            Observation::Dropped => {
                e.trust_bp = e.trust_bp.saturating_sub(self.penalty);
                e.drops_seen += 1;
            }
        }
    }
}

/// Applies one observation with the default rule; exposed for property checks.
pub fn update_trust(trust_bp: u32, obs: Observation) -> u32 {
    let rule = TrustRule::new(&TerpParams::default());
    let mut e = TrustEntry {
        trust_bp,
        forwards_seen: 0,
        drops_seen: 0,
    };
    rule.apply(&mut e, obs);
    e.trust_bp
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerpRouteEntry {
    pub dest: NodeId,
    pub next_hop: NodeId,
    pub seq_no: u32,
    pub hop_count: u32,
    /// Largest amount believed deliverable through `next_hop`, net of fees.
    pub balance_hint: Amount,
    pub expiry: SimTime,
}

#[derive(Clone, Debug)]
pub enum TerpMsg {
    Rreq {
        origin: NodeId,
        rreq_id: u32,
        dst: NodeId,
        dst_seq: u32,
        hop_count: u32,
        amount: Amount,
    },
    Rrep {
        origin: NodeId,
        rreq_id: u32,
        dst: NodeId,
        dst_seq: u32,
        /// Hops from the sender of this reply to `dst`.
        hop_count: u32,
        /// Deliverable amount from the sender of this reply.
        hint: Amount,
        /// The sender's fee policy on its hop towards `dst`; `None` when the sender is `dst`.
        policy: Option<FeePolicy>,
        /// When the sender's own entry expires; upstream entries never outlive it.
        expiry: SimTime,
    },
}

impl Payload for TerpMsg {
    fn label(&self) -> &'static str {
        match self {
            TerpMsg::Rreq { .. } => "rreq",
            TerpMsg::Rrep { .. } => "rrep",
        }
    }

    fn size(&self, sizes: &SizeModel) -> u32 {
        sizes.control
    }
}

#[derive(Clone, Debug)]
pub enum TerpTimer {
    Discovery { dst: NodeId, rreq_id: u32 },
}

/// Recently seen request ids from one origin: the highest id and a 64-id window below it.
#[derive(Clone, Copy, Debug, Default)]
struct SeenWindow {
    max: u32,
    mask: u64,
}

impl SeenWindow {
    /// Returns true if `id` is new and records it.
    fn insert(&mut self, id: u32) -> bool {
        if self.mask == 0 || id > self.max {
            let shift = if self.mask == 0 { 64 } else { id - self.max };
            self.mask = if shift >= 64 { 0 } else { self.mask << shift };
            self.mask |= 1;
            self.max = id;
            return true;
        }
        let back = self.max - id;
        if back >= 64 || self.mask & (1 << back) != 0 {
            return false;
        }
        self.mask |= 1 << back;
        true
    }
}

#[derive(Debug, Default)]
struct NodeState {
    seq: u32,
    next_rreq: u32,
    trust: Vec<(NodeId, TrustEntry)>,
    routes: HashMap<NodeId, Vec<TerpRouteEntry>>,
    seen: HashMap<NodeId, SeenWindow>,
    reverse: HashMap<(NodeId, u32), NodeId>,
    reverse_expiry: VecDeque<(SimTime, (NodeId, u32))>,
    /// Per destination: latest sequence number and the hop count advertised for it.
    advertised: HashMap<NodeId, (u32, u32)>,
}

impl NodeState {
    fn trust_of(&self, n: NodeId) -> Option<&TrustEntry> {
        self.trust.iter().find(|(id, _)| *id == n).map(|(_, t)| t)
    }

    fn trust_mut(&mut self, n: NodeId) -> Option<&mut TrustEntry> {
        self.trust.iter_mut().find(|(id, _)| *id == n).map(|(_, t)| t)
    }

    fn purge_reverse(&mut self, now: SimTime) {
        while let Some(&(t, key)) = self.reverse_expiry.front() {
            if t > now {
                break;
            }
            self.reverse_expiry.pop_front();
            self.reverse.remove(&key);
        }
    }

    fn max_seq(&self, dst: NodeId, now: SimTime) -> Option<u32> {
        self.routes.get(&dst)?.iter().filter(|e| e.expiry > now).map(|e| e.seq_no).max()
    }

    /// Installs a route learned from a neighbor that advertised `reported` hops. For one
    /// destination sequence number the node keeps a fixed advertised hop count and only
    /// accepts neighbors advertising strictly fewer, so next-hop chains cannot loop.
    fn install(&mut self, entry: TerpRouteEntry, reported: u32, now: SimTime) -> bool {
        match self.advertised.get(&entry.dest) {
            Some(&(s, _)) if entry.seq_no < s => return false,
            Some(&(s, h)) if entry.seq_no == s && reported >= h => return false,
            Some(&(s, _)) if entry.seq_no == s => {}
            _ => {
                self.advertised.insert(entry.dest, (entry.seq_no, entry.hop_count));
            }
        }
        let list = self.routes.entry(entry.dest).or_default();
        list.retain(|e| e.expiry > now && e.seq_no == entry.seq_no);
        match list.iter_mut().find(|e| e.next_hop == entry.next_hop) {
            Some(e) => *e = entry,
            None => list.push(entry),
        }
        true
    }

    fn advertised_hops(&self, dst: NodeId) -> u32 {
        self.advertised.get(&dst).map_or(0, |a| a.1)
    }
}

#[derive(Debug)]
struct Discovery {
    attempt: u32,
    rreq_id: u32,
    amount: Amount,
    payments: Vec<PaymentId>,
}

#[derive(Debug)]
pub struct Terp {
    params: TerpParams,
    rule: TrustRule,
    nodes: Vec<NodeState>,
    discoveries: HashMap<(NodeId, NodeId), Discovery>,
}

type Cx<'a> = ProtoCtx<'a, Terp>;

impl Terp {
    pub fn new(n: usize, params: TerpParams) -> Self {
        Terp {
            rule: TrustRule::new(&params),
            params,
            nodes: (0..n).map(|_| NodeState::default()).collect(),
            discoveries: HashMap::new(),
        }
    }

    pub fn trust(&self, observer: NodeId, neighbor: NodeId) -> Option<TrustEntry> {
        self.nodes[observer.index()].trust_of(neighbor).copied()
    }

    pub fn is_trusted(&self, observer: NodeId, neighbor: NodeId) -> bool {
        self.trust(observer, neighbor)
            .is_some_and(|t| t.trust_bp >= self.rule.threshold)
    }

    /// Unexpired route entries `node` holds for `dst`.
    pub fn routes(&self, node: NodeId, dst: NodeId, now: SimTime) -> Vec<TerpRouteEntry> {
        self.nodes[node.index()]
            .routes
            .get(&dst)
            .map(|l| l.iter().filter(|e| e.expiry > now).copied().collect())
            .unwrap_or_default()
    }

    pub fn observe(&mut self, observer: NodeId, neighbor: NodeId, obs: Observation) {
        let rule = self.rule;
        if let Some(e) = self.nodes[observer.index()].trust_mut(neighbor) {
            rule.apply(e, obs);
        }
    }

    /// Weighted choice over `(next_hop, trust, balance_hint, hops)` candidates.
    pub fn select(&self, cands: &[(NodeId, f64, Amount, u32)]) -> Option<NodeId> {
        let max_hint = cands.iter().map(|c| c.2).max()?;
        let min_hops = cands.iter().map(|c| c.3).min()?;
        let p = &self.params;
        argmax_by_score(cands.iter().map(|&(n, trust, hint, hops)| {
            let balance = if max_hint == 0 { 0.0 } else { hint as f64 / max_hint as f64 };
            let hop_term = min_hops as f64 / hops.max(1) as f64;
            (n, p.weight_trust * trust + p.weight_balance * balance + p.weight_hops * hop_term)
        }))
    }

    /// Usable entries at `node`: unexpired, trusted next hop on an open channel that can
    /// carry `amount`, and not already on the payment's path.
    fn choose(&self, ctx: &Cx<'_>, node: NodeId, dst: NodeId, amount: Amount, avoid: &[NodeId]) -> Option<NodeId> {
        let now = ctx.now();
        let st = &self.nodes[node.index()];
        let list = st.routes.get(&dst)?;
        let cands: Vec<_> = list
            .iter()
            .filter(|e| e.expiry > now && !avoid.contains(&e.next_hop))
            .filter(|e| ctx.net().outbound_balance(node, e.next_hop).is_some_and(|b| b >= amount))
            .filter_map(|e| {
                let t = st.trust_of(e.next_hop)?;
                (t.trust_bp >= self.rule.threshold).then_some((e.next_hop, t.trust(), e.balance_hint, e.hop_count))
            })
            .collect();
        self.select(&cands)
    }

    fn refresh(&mut self, node: NodeId, dst: NodeId, next: NodeId, now: SimTime) {
        let lifetime = self.params.route_lifetime_ms;
        if let Some(list) = self.nodes[node.index()].routes.get_mut(&dst) {
            for e in list.iter_mut().filter(|e| e.next_hop == next && e.expiry > now) {
                e.expiry = now + lifetime;
            }
        }
    }

    fn send_rreq(&mut self, ctx: &mut Cx<'_>, from: NodeId, except: Option<NodeId>, msg: TerpMsg, role: Role) {
        let TerpMsg::Rreq { amount, .. } = msg else { return };
        let targets: Vec<NodeId> = ctx
            .net()
            .open_neighbors(from)
            .map(|(v, _)| v)
            .filter(|&v| Some(v) != except && self.is_trusted(from, v))
            .filter(|&v| ctx.net().outbound_balance(from, v).is_some_and(|b| b >= amount))
            .collect();
        for v in targets {
            ctx.send(from, v, msg.clone(), role);
        }
    }

    fn start_attempt(&mut self, ctx: &mut Cx<'_>, src: NodeId, dst: NodeId) {
        let now = ctx.now();
        let amount = self.discoveries[&(src, dst)].amount;
        let st = &mut self.nodes[src.index()];
        st.seq += 1;
        st.next_rreq += 1;
        let rreq_id = st.next_rreq;
        st.seen.entry(src).or_default().insert(rreq_id);
        let dst_seq = st.max_seq(dst, now).unwrap_or(0);
        let disc = self.discoveries.get_mut(&(src, dst)).expect("active discovery");
        disc.attempt += 1;
        disc.rreq_id = rreq_id;
        let msg = TerpMsg::Rreq {
            origin: src,
            rreq_id,
            dst,
            dst_seq,
            hop_count: 0,
            amount,
        };
        self.send_rreq(ctx, src, None, msg, Role::Endpoint);
        ctx.set_timer(src, self.params.discovery_timeout_ms, TerpTimer::Discovery { dst, rreq_id });
    }

    fn try_complete(&mut self, ctx: &mut Cx<'_>, src: NodeId, dst: NodeId) {
        let Some(disc) = self.discoveries.get(&(src, dst)) else { return };
        if self.choose(ctx, src, dst, disc.amount, &[]).is_none() {
            return;
        }
        let disc = self.discoveries.remove(&(src, dst)).expect("present");
        for p in disc.payments {
            ctx.resolve(p, Ok(Forwarding::HopByHop { label: None }));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_rreq(
        &mut self,
        ctx: &mut Cx<'_>,
        node: NodeId,
        from: NodeId,
        origin: NodeId,
        rreq_id: u32,
        dst: NodeId,
        dst_seq: u32,
        hop_count: u32,
        amount: Amount,
    ) {
        if !self.is_trusted(node, from) {
            return;
        }
        let now = ctx.now();
        let lifetime = self.params.discovery_timeout_ms;
        let st = &mut self.nodes[node.index()];
        if !st.seen.entry(origin).or_default().insert(rreq_id) {
            return;
        }
        st.purge_reverse(now);
        st.reverse.insert((origin, rreq_id), from);
        st.reverse_expiry.push_back((now + lifetime, (origin, rreq_id)));

        if node == dst {
            st.seq = st.seq.max(dst_seq + 1);
            let reply = TerpMsg::Rrep {
                origin,
                rreq_id,
                dst,
                dst_seq: st.seq,
                hop_count: 0,
                hint: Amount::MAX,
                policy: None,
                expiry: now + self.params.route_lifetime_ms,
            };
            ctx.send(node, from, reply, Role::Endpoint);
            return;
        }

        // Reply from a fresh enough cached route that can carry the amount.
        let cached = st
            .routes
            .get(&dst)
            .into_iter()
            .flatten()
            .filter(|e| e.expiry > now && e.seq_no >= dst_seq && e.balance_hint >= amount && e.next_hop != from)
            .copied()
            .collect::<Vec<_>>();
        let usable: Vec<_> = cached
            .iter()
            .filter(|e| self.is_trusted(node, e.next_hop))
            .filter(|e| ctx.net().outbound_balance(node, e.next_hop).is_some_and(|b| b >= amount))
            .copied()
            .collect();
        if let Some(best) = usable.iter().min_by_key(|e| (e.hop_count, e.next_hop)) {
            let policy = ctx
                .net()
                .channel_between(node, best.next_hop)
                .map(|c| ctx.net().channel(c).policy_from(node));
            let reply = TerpMsg::Rrep {
                origin,
                rreq_id,
                dst,
                dst_seq: best.seq_no,
                hop_count: self.nodes[node.index()].advertised_hops(dst),
                hint: best.balance_hint,
                policy,
                expiry: best.expiry,
            };
            ctx.send(node, from, reply, Role::Router);
            return;
        }

        let fwd = TerpMsg::Rreq {
            origin,
            rreq_id,
            dst,
            dst_seq,
            hop_count: hop_count + 1,
            amount,
        };
        self.send_rreq(ctx, node, Some(from), fwd, Role::Router);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_rrep(
        &mut self,
        ctx: &mut Cx<'_>,
        node: NodeId,
        from: NodeId,
        origin: NodeId,
        rreq_id: u32,
        dst: NodeId,
        dst_seq: u32,
        hop_count: u32,
        hint: Amount,
        policy: Option<FeePolicy>,
        expiry: SimTime,
    ) {
        if !self.is_trusted(node, from) {
            return;
        }
        let Some(cid) = ctx.net().channel_between(node, from) else { return };
        let ch = ctx.net().channel(cid);
        let outbound = ch.balance_from(node);
        let my_hint = match policy {
            None => outbound,
            Some(p) => hint.min(super::basic::max_forwardable(p, outbound)),
        };
        let my_policy = ch.policy_from(node);
        let now = ctx.now();
        let entry = TerpRouteEntry {
            dest: dst,
            next_hop: from,
            seq_no: dst_seq,
            hop_count: hop_count + 1,
            balance_hint: my_hint,
            expiry: expiry.min(now + self.params.route_lifetime_ms),
        };
        if entry.expiry <= now {
            return;
        }
        let st = &mut self.nodes[node.index()];
        if !st.install(entry, hop_count, now) {
            return;
        }

        if node == origin {
            self.try_complete(ctx, node, dst);
            return;
        }
        st.purge_reverse(now);
        let Some(&back) = st.reverse.get(&(origin, rreq_id)) else { return };
        let reply = TerpMsg::Rrep {
            origin,
            rreq_id,
            dst,
            dst_seq,
            hop_count: st.advertised_hops(dst),
            hint: my_hint,
            policy: Some(my_policy),
            expiry: entry.expiry,
        };
        ctx.send(node, back, reply, Role::Router);
    }

    /// Drops entries for `dst` via `next` at `node`.
    fn invalidate(&mut self, node: NodeId, dst: NodeId, next: NodeId) {
        if let Some(list) = self.nodes[node.index()].routes.get_mut(&dst) {
            list.retain(|e| e.next_hop != next);
        }
    }
}

impl RoutingProtocol for Terp {
    type Msg = TerpMsg;
    type Timer = TerpTimer;

    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Terp
    }

    fn on_bootstrap(&mut self, ctx: &mut Cx<'_>, node: NodeId) {
        let fresh = self.rule.fresh();
        self.nodes[node.index()].trust = ctx.net().open_neighbors(node).map(|(v, _)| (v, fresh)).collect();
    }

    fn on_message(&mut self, ctx: &mut Cx<'_>, msg: Message<TerpMsg>) {
        let (node, from) = (msg.receiver, msg.sender);
        match msg.kind {
            TerpMsg::Rreq {
                origin,
                rreq_id,
                dst,
                dst_seq,
                hop_count,
                amount,
            } => self.on_rreq(ctx, node, from, origin, rreq_id, dst, dst_seq, hop_count, amount),
            TerpMsg::Rrep {
                origin,
                rreq_id,
                dst,
                dst_seq,
                hop_count,
                hint,
                policy,
                expiry,
            } => self.on_rrep(ctx, node, from, origin, rreq_id, dst, dst_seq, hop_count, hint, policy, expiry),
        }
    }

    fn on_timer(&mut self, ctx: &mut Cx<'_>, node: NodeId, timer: TerpTimer) {
        let TerpTimer::Discovery { dst, rreq_id } = timer;
        let Some(disc) = self.discoveries.get(&(node, dst)) else { return };
        if disc.rreq_id != rreq_id {
            return;
        }
        if disc.attempt < self.params.discovery_attempts {
            self.start_attempt(ctx, node, dst);
        } else {
            let disc = self.discoveries.remove(&(node, dst)).expect("present");
            for p in disc.payments {
                ctx.resolve(p, Err(FailReason::NoRoute));
            }
        }
    }

    fn on_link_down(&mut self, _: &mut Cx<'_>, node: NodeId, neighbor: NodeId) {
        for list in self.nodes[node.index()].routes.values_mut() {
            list.retain(|e| e.next_hop != neighbor);
        }
    }

    fn prepare(&mut self, ctx: &mut Cx<'_>, req: &RouteRequest) -> Prepared {
        let (src, dst) = (req.src, req.dst);
        if src == dst {
            return Prepared::Ready(Forwarding::SourceRoute(vec![src]));
        }
        if self.choose(ctx, src, dst, req.amount, &[]).is_some() {
            return Prepared::Ready(Forwarding::HopByHop { label: None });
        }
        match self.discoveries.get_mut(&(src, dst)) {
            Some(disc) => disc.payments.push(req.payment),
            None => {
                self.discoveries.insert(
                    (src, dst),
                    Discovery {
                        attempt: 0,
                        rreq_id: 0,
                        amount: req.amount,
                        payments: vec![req.payment],
                    },
                );
                self.start_attempt(ctx, src, dst);
            }
        }
        Prepared::Pending
    }

    fn next_hop(&mut self, ctx: &mut Cx<'_>, node: NodeId, flow: &Flow<'_>) -> Result<NodeId, FailReason> {
        let next = self
            .choose(ctx, node, flow.dst, flow.amount, flow.path)
            .ok_or(FailReason::NoRoute)?;
        self.refresh(node, flow.dst, next, ctx.now());
        Ok(next)
    }

    fn on_outcome(&mut self, _: &mut Cx<'_>, req: &RouteRequest, route: &[NodeId], outcome: Result<(), HopFailure>) {
        let last = route.len().saturating_sub(1);
        match outcome {
            Ok(()) => {
                for i in 0..last.saturating_sub(1) {
                    self.observe(route[i], route[i + 1], Observation::Forwarded);
                }
            }
            Err(f) => {
                let culprit = matches!(f.reason, FailReason::MaliciousDrop | FailReason::Refused);
                if culprit && f.node_index >= 1 {
                    for i in 0..f.node_index - 1 {
                        self.observe(route[i], route[i + 1], Observation::Forwarded);
                    }
                    self.observe(route[f.node_index - 1], route[f.node_index], Observation::Dropped);
                }
                for i in 0..=f.node_index.min(last.saturating_sub(1)) {
                    if i + 1 < route.len() {
                        self.invalidate(route[i], req.dst, route[i + 1]);
                    }
                }
            }
        }
    }

    fn footprint(&self, node: NodeId, now: SimTime) -> Footprint {
        let st = &self.nodes[node.index()];
        let routes: usize = st.routes.values().map(|l| l.iter().filter(|e| e.expiry > now).count()).sum();
        Footprint {
            entries: (routes + st.trust.len()) as f64,
            routing_entries: routes as f64,
        }
    }
}
