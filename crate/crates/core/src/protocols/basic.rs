//! Global-knowledge baseline: every node reads one shared view of the network.

use super::{Flow, Footprint, Forwarding, Prepared, ProtoCtx, ProtocolKind, RouteRequest, RoutingProtocol};
use crate::engine::{FailReason, Message, NoMessage};
use crate::pcn::{Amount, Behavior, Network, NodeId};
use crate::SimTime;

const INF: Amount = Amount::MAX;

fn can_route_through(net: &Network, node: NodeId) -> bool {
    let n = net.node(node);
    !n.failed && n.behavior != Behavior::NonParticipating
}

/// Minimum-hop route from `src` to `dst` on which every hop can carry `amount` plus all
/// downstream fees. Among equally short routes the lexicographically smallest node
/// sequence wins. `src == dst` yields the zero-hop route `[src]`.
///
/// Known non-participating nodes are never used as intermediaries.
pub fn basic_route(net: &Network, src: NodeId, dst: NodeId, amount: Amount) -> Option<Vec<NodeId>> {
    if src == dst {
        return Some(vec![src]);
    }
    let layers = need_layers(net, src, dst, amount)?;
    Some(reconstruct(net, src, &layers))
}

/// `layers[j][v]`: smallest amount `v` must receive to deliver `amount` at `dst` in
/// exactly `j` further hops (`INF` if impossible). Stops at the first `k` at which `src`
/// becomes feasible; returns `None` once no layer can improve any node any more.
fn need_layers(net: &Network, src: NodeId, dst: NodeId, amount: Amount) -> Option<Vec<Vec<Amount>>> {
    let n = net.node_count();
    if net.node(src).failed || net.node(dst).failed {
        return None;
    }
    let mut layer = vec![INF; n];
    layer[dst.index()] = amount;
    let mut best = layer.clone();
    let mut layers = vec![layer];
    loop {
        let prev = layers.last().expect("non-empty");
        // Can the source send directly into the previous layer?
        if net.open_neighbors(src).any(|(x, cid)| {
            prev[x.index()] != INF && net.channel(cid).balance_from(src) >= prev[x.index()]
        }) {
            return Some(layers);
        }
        if layers.len() >= n {
            return None;
        }
        let mut next = vec![INF; n];
        let mut improved = false;
        for w in net.node_ids() {
            if w == src || w == dst || !can_route_through(net, w) {
                continue;
            }
            let mut need = INF;
            for (x, cid) in net.open_neighbors(w) {
                let carry = prev[x.index()];
                if carry == INF {
                    continue;
                }
                let ch = net.channel(cid);
                if ch.balance_from(w) >= carry {
                    need = need.min(carry.saturating_add(ch.policy_from(w).fee_for(carry)));
                }
            }
            next[w.index()] = need;
            if need < best[w.index()] {
                best[w.index()] = need;
                improved = true;
            }
        }
        if !improved {
            return None;
        }
        layers.push(next);
    }
}

/// Largest `y` with `y + fee(y) <= budget` (fees are monotone in `y`).
pub(crate) fn max_forwardable(policy: crate::pcn::FeePolicy, budget: Amount) -> Amount {
    let (mut lo, mut hi) = (0, budget);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if mid.saturating_add(policy.fee_for(mid)) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Walks forward choosing the smallest feasible neighbor at each step. `budget` is the
/// most the current node may receive while keeping everything upstream feasible.
fn reconstruct(net: &Network, src: NodeId, layers: &[Vec<Amount>]) -> Vec<NodeId> {
    let k = layers.len();
    let mut route = vec![src];
    let mut cur = src;
    let mut budget = INF;
    for remaining in (0..k).rev() {
        let layer = &layers[remaining];
        let mut choice: Option<(NodeId, Amount)> = None;
        for (x, cid) in net.open_neighbors(cur) {
            let carry = layer[x.index()];
            if carry == INF || choice.is_some_and(|(c, _)| c < x) {
                continue;
            }
            let ch = net.channel(cid);
            let outbound = ch.balance_from(cur);
            if outbound < carry {
                continue;
            }
            let policy = ch.policy_from(cur);
            let next_budget = if cur == src {
                outbound
            } else {
                if carry.saturating_add(policy.fee_for(carry)) > budget {
                    continue;
                }
                outbound.min(max_forwardable(policy, budget))
            };
            choice = Some((x, next_budget));
        }
        let (next, next_budget) = choice.expect("layers guarantee a feasible continuation");
        route.push(next);
        cur = next;
        budget = next_budget;
    }
    route
}

/// The oracle. Its shared structure holds every node and channel plus an all-pairs hop
/// distance matrix, rebuilt whenever a channel closes.
#[derive(Debug, Default)]
pub struct Basic {
    nodes: usize,
    channels: usize,
    distances: Vec<u16>,
    stale: bool,
}

impl Basic {
    pub fn new(net: &Network) -> Self {
        let mut basic = Basic::default();
        basic.rebuild(net);
        basic
    }

    fn rebuild(&mut self, net: &Network) {
        let n = net.node_count();
        self.nodes = n;
        self.channels = net.channels().iter().filter(|c| c.open).count();
        self.distances = Vec::with_capacity(n * n);
        for u in net.node_ids() {
            self.distances
                .extend(net.hop_distances(u).into_iter().map(|d| d.min(u16::MAX as u32) as u16));
        }
        self.stale = false;
    }

    pub fn hop_distance(&self, a: NodeId, b: NodeId) -> Option<u32> {
        let d = self.distances[a.index() * self.nodes + b.index()];
        (d != u16::MAX).then_some(d as u32)
    }

    /// Entries in the shared structure.
    pub fn global_entries(&self) -> usize {
        self.nodes + self.channels + self.distances.len()
    }
}

impl RoutingProtocol for Basic {
    type Msg = NoMessage;
    type Timer = ();

    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Basic
    }

    fn on_message(&mut self, _: &mut ProtoCtx<'_, Self>, msg: Message<NoMessage>) {
        match msg.kind {}
    }

    fn on_link_down(&mut self, _: &mut ProtoCtx<'_, Self>, _: NodeId, _: NodeId) {
        self.stale = true;
    }

    fn prepare(&mut self, ctx: &mut ProtoCtx<'_, Self>, req: &RouteRequest) -> Prepared {
        if self.stale {
            self.rebuild(ctx.net());
        }
        if req.src != req.dst && self.hop_distance(req.src, req.dst).is_none() {
            return Prepared::Failed(FailReason::NoRoute);
        }
        match basic_route(ctx.net(), req.src, req.dst, req.amount) {
            Some(route) => Prepared::Ready(Forwarding::SourceRoute(route)),
            None => Prepared::Failed(FailReason::NoRoute),
        }
    }

    fn next_hop(&mut self, _: &mut ProtoCtx<'_, Self>, _: NodeId, _: &Flow<'_>) -> Result<NodeId, FailReason> {
        Err(FailReason::NoRoute)
    }

    /// The shared structure split evenly across nodes.
    fn footprint(&self, _: NodeId, _: SimTime) -> Footprint {
        let share = self.global_entries() as f64 / self.nodes.max(1) as f64;
        Footprint {
            entries: share,
            routing_entries: share,
        }
    }
}
