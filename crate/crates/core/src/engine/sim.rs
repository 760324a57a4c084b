use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    execute_payment, EventQueue, FailReason, HopFailure, Message, PacketCounters, Payment, PaymentId,
    PaymentStatus, Role, SizeModel, TraceRecord,
};
use crate::pcn::{average_channel_count, channel_fee, Amount, Behavior, ChannelId, Network, NodeId};
use crate::protocols::{Flow, Footprint, Forwarding, Prepared, RouteRequest, RoutingProtocol};
use crate::SimTime;

const LATENCY_STREAM: u64 = 4;

pub(crate) enum Event<M, T> {
    Arrival(PaymentId),
    Deliver(Message<M>),
    Timer { node: NodeId, timer: T },
    NodeFail(NodeId),
    Sample,
}

pub(crate) struct Core<M, T> {
    now: SimTime,
    net: Network,
    queue: EventQueue<Event<M, T>>,
    latency_rng: ChaCha8Rng,
    latency_ms: (u64, u64),
    counters: PacketCounters,
    sizes: SizeModel,
    resolutions: Vec<(PaymentId, Result<Forwarding, FailReason>)>,
    trace: Option<Vec<TraceRecord>>,
}

impl<M, T> Core<M, T> {
    fn count_packet(&mut self, kind: &'static str, src: NodeId, dst: NodeId, size: u32, role: Role) {
        self.counters.record(role, size);
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                time: self.now,
                kind,
                src,
                dst,
                size,
                role,
            });
        }
    }
}

/// The view a protocol callback gets of the simulator.
pub struct Ctx<'a, M, T> {
    core: &'a mut Core<M, T>,
}

impl<'a, M: super::Payload, T> Ctx<'a, M, T> {
    pub fn now(&self) -> SimTime {
        self.core.now
    }

    /// Read access to the network. Protocols other than the oracle restrict themselves
    /// to the calling node's own channels.
    pub fn net(&self) -> &Network {
        &self.core.net
    }

    pub fn sizes(&self) -> &SizeModel {
        &self.core.sizes
    }

    /// Sends `kind` over the channel `from -> to`.
    ///
    /// Returns false if nothing was put on the wire: non-participating nodes never emit
    /// router traffic, and sends from failed nodes or over closed channels are dropped.
    pub fn send(&mut self, from: NodeId, to: NodeId, kind: M, role: Role) -> bool {
        let core = &mut *self.core;
        let sender = core.net.node(from);
        if role == Role::Router && sender.behavior == Behavior::NonParticipating {
            return false;
        }
        if sender.failed || core.net.outbound_balance(from, to).is_none() {
            core.counters.record_drop();
            return false;
        }
        let size = kind.size(&core.sizes);
        core.count_packet(kind.label(), from, to, size, role);
        let (lo, hi) = core.latency_ms;
        let at = core.now + core.latency_rng.random_range(lo..=hi);
        core.queue.push(
            at,
            Event::Deliver(Message {
                sender: from,
                receiver: to,
                kind,
                payload_size: size,
                origin_role: role,
            }),
        );
        true
    }

    /// Sends `kind` to every open neighbor of `from` except `except`.
    pub fn broadcast(&mut self, from: NodeId, kind: M, role: Role, except: Option<NodeId>) -> usize {
        let targets: Vec<NodeId> = self
            .core
            .net
            .open_neighbors(from)
            .map(|(v, _)| v)
            .filter(|&v| Some(v) != except)
            .collect();
        targets
            .into_iter()
            .filter(|&v| self.send(from, v, kind.clone(), role))
            .count()
    }

    pub fn set_timer(&mut self, node: NodeId, delay_ms: u64, timer: T) {
        let at = self.core.now + delay_ms;
        self.core.queue.push(at, Event::Timer { node, timer });
    }

    /// Completes a payment previously answered with [`Prepared::Pending`].
    pub fn resolve(&mut self, payment: PaymentId, result: Result<Forwarding, FailReason>) {
        self.core.resolutions.push((payment, result));
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub sizes: SizeModel,
    pub latency_ms: (u64, u64),
    pub seed: u64,
    pub trace: bool,
    /// Keep an independently computed shadow ledger and count discrepancies.
    pub audit: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            sizes: SizeModel::default(),
            latency_ms: (10, 100),
            seed: 0,
            trace: false,
            audit: false,
        }
    }
}

/// Shadow accounting of every channel, updated from settled payments only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShadowAudit {
    shadow: Vec<(Amount, Amount)>,
    capacities: Vec<Amount>,
    pub payments_checked: u64,
    pub conservation_violations: u64,
    pub unwind_violations: u64,
    pub settlement_mismatches: u64,
    pub final_mismatches: u64,
}

impl ShadowAudit {
    fn new(net: &Network) -> Self {
        ShadowAudit {
            shadow: net.channels().iter().map(|c| (c.balance_a, c.balance_b)).collect(),
            capacities: net.channels().iter().map(|c| c.capacity).collect(),
            ..Default::default()
        }
    }

    pub fn violations(&self) -> u64 {
        self.conservation_violations + self.unwind_violations + self.settlement_mismatches + self.final_mismatches
    }

    fn check(&mut self, net: &Network, route: &[NodeId], amount: Amount, succeeded: bool) {
        self.payments_checked += 1;
        let channels: Vec<_> = route.windows(2).filter_map(|w| net.channel_between(w[0], w[1])).collect();
        if succeeded {
            // Recompute the forwarded amounts from the fee formula, last hop first.
            let mut carried = amount;
            for i in (0..channels.len()).rev() {
                let ch = net.channel(channels[i]);
                let entry = &mut self.shadow[channels[i].index()];
                if route[i] == ch.a {
                    entry.0 -= carried;
                    entry.1 += carried;
                } else {
                    entry.1 -= carried;
                    entry.0 += carried;
                }
                if i > 0 {
                    carried += channel_fee(ch.policy_from(route[i]), carried).unwrap_or(0);
                }
            }
        }
        for cid in channels {
            let ch = net.channel(cid);
            if ch.balance_a + ch.balance_b != self.capacities[cid.index()] {
                self.conservation_violations += 1;
            }
            if (ch.balance_a, ch.balance_b) != self.shadow[cid.index()] {
                if succeeded {
                    self.settlement_mismatches += 1;
                } else {
                    self.unwind_violations += 1;
                }
            }
        }
    }

    fn finish(&mut self, net: &Network) {
        for (i, ch) in net.channels().iter().enumerate() {
            if (ch.balance_a, ch.balance_b) != self.shadow[i] {
                self.final_mismatches += 1;
            }
            if ch.balance_a + ch.balance_b != self.capacities[i] {
                self.conservation_violations += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MemorySample {
    pub entries_mean: f64,
    pub bytes_mean: f64,
    pub routing_entries_mean: f64,
    pub routing_entries_max: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub node_count: usize,
    pub payments: Vec<Payment>,
    pub counters: PacketCounters,
    pub channel_samples: Vec<f64>,
    pub memory: MemorySample,
    pub audit: Option<ShadowAudit>,
    pub trace: Option<Vec<TraceRecord>>,
    pub end_time: SimTime,
}

pub struct Simulation<P: RoutingProtocol> {
    core: Core<P::Msg, P::Timer>,
    protocol: P,
    payments: Vec<Payment>,
    samples: Vec<f64>,
    end: Option<SimTime>,
    audit: Option<ShadowAudit>,
    bootstrapped: bool,
}

impl<P: RoutingProtocol> Simulation<P> {
    /// Nodes carrying a `fail_time` get their failure scheduled here.
    pub fn new(net: Network, protocol: P, opts: RunOptions) -> Self {
        let mut latency_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        latency_rng.set_stream(LATENCY_STREAM);
        let mut queue = EventQueue::new();
        for node in net.nodes() {
            if let Some(t) = node.fail_time {
                queue.push(t, Event::NodeFail(node.id));
            }
        }
        let audit = opts.audit.then(|| ShadowAudit::new(&net));
        Simulation {
            core: Core {
                now: SimTime::ZERO,
                net,
                queue,
                latency_rng,
                latency_ms: opts.latency_ms,
                counters: PacketCounters::default(),
                sizes: opts.sizes,
                resolutions: Vec::new(),
                trace: opts.trace.then(Vec::new),
            },
            protocol,
            payments: Vec::new(),
            samples: Vec::new(),
            end: None,
            audit,
            bootstrapped: false,
        }
    }

    pub fn schedule_payment(&mut self, at: SimTime, src: NodeId, dst: NodeId, amount: Amount) -> PaymentId {
        let id = PaymentId(self.payments.len() as u32);
        self.payments.push(Payment::new(id, src, dst, amount, at));
        self.core.queue.push(at, Event::Arrival(id));
        id
    }

    pub fn schedule_failure(&mut self, at: SimTime, node: NodeId) {
        self.core.queue.push(at, Event::NodeFail(node));
    }

    /// Closes a channel at the current time and notifies both endpoints.
    pub fn close_channel(&mut self, id: ChannelId) {
        self.bootstrap();
        let ch = self.core.net.channel(id);
        if !ch.open {
            return;
        }
        let (a, b) = (ch.a, ch.b);
        self.core.net.close_channel(id);
        self.protocol.on_link_down(&mut Ctx { core: &mut self.core }, a, b);
        self.protocol.on_link_down(&mut Ctx { core: &mut self.core }, b, a);
        self.drain_resolutions();
    }

    /// `count` channel-count samples evenly spaced over `[start, end]`.
    pub fn schedule_samples(&mut self, start: SimTime, end: SimTime, count: usize) {
        let span = end.saturating_sub(start);
        for i in 0..count {
            let offset = if count > 1 { span * i as u64 / (count as u64 - 1) } else { 0 };
            self.core.queue.push(start + offset, Event::Sample);
        }
    }

    /// Events after `end` are not processed.
    pub fn set_end(&mut self, end: SimTime) {
        self.end = Some(end);
    }

    pub fn now(&self) -> SimTime {
        self.core.now
    }

    pub fn protocol(&self) -> &P {
        &self.protocol
    }

    pub fn network(&self) -> &Network {
        &self.core.net
    }

    pub fn payments(&self) -> &[Payment] {
        &self.payments
    }

    pub fn counters(&self) -> PacketCounters {
        self.core.counters
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.core.trace.as_deref()
    }

    pub fn audit(&self) -> Option<&ShadowAudit> {
        self.audit.as_ref()
    }

    /// Runs `f` against the protocol with a live context at the current time.
    pub fn with_ctx<R>(&mut self, f: impl FnOnce(&mut P, &mut Ctx<'_, P::Msg, P::Timer>) -> R) -> R {
        let r = f(&mut self.protocol, &mut Ctx { core: &mut self.core });
        self.drain_resolutions();
        r
    }

    fn bootstrap(&mut self) {
        if self.bootstrapped {
            return;
        }
        self.bootstrapped = true;
        for i in 0..self.core.net.node_count() {
            let node = NodeId(i as u32);
            self.protocol.on_bootstrap(&mut Ctx { core: &mut self.core }, node);
        }
        self.drain_resolutions();
    }

    /// Processes events up to and including `until` (or the configured end).
    pub fn run_until(&mut self, until: SimTime) {
        self.bootstrap();
        let limit = self.end.map_or(until, |e| e.min(until));
        while let Some(t) = self.core.queue.peek_time() {
            if t > limit {
                break;
            }
            let (t, event) = self.core.queue.pop().expect("peeked");
            self.core.now = t;
            self.dispatch(event);
            self.drain_resolutions();
        }
        if self.core.now < limit && limit != SimTime(u64::MAX) {
            self.core.now = limit;
        }
    }

    /// Runs to the configured end, or until the queue is empty.
    pub fn run(&mut self) {
        self.run_until(self.end.unwrap_or(SimTime(u64::MAX)));
    }

    fn dispatch(&mut self, event: Event<P::Msg, P::Timer>) {
        match event {
            Event::Arrival(id) => {
                let p = &self.payments[id.index()];
                let req = RouteRequest {
                    payment: id,
                    src: p.src,
                    dst: p.dst,
                    amount: p.amount,
                };
                let prepared = self.protocol.prepare(&mut Ctx { core: &mut self.core }, &req);
                match prepared {
                    Prepared::Ready(fwd) => self.forward(id, fwd),
                    Prepared::Pending => {}
                    Prepared::Failed(reason) => self.payments[id.index()].fail(reason, self.core.now),
                }
            }
            Event::Deliver(msg) => {
                if self.core.net.node(msg.receiver).failed {
                    return;
                }
                self.protocol.on_message(&mut Ctx { core: &mut self.core }, msg);
            }
            Event::Timer { node, timer } => {
                if self.core.net.node(node).failed {
                    return;
                }
                self.protocol.on_timer(&mut Ctx { core: &mut self.core }, node, timer);
            }
            Event::NodeFail(node) => {
                if self.core.net.node(node).failed {
                    return;
                }
                let lost = self.core.net.fail_node(node);
                for neighbor in lost {
                    self.protocol
                        .on_link_down(&mut Ctx { core: &mut self.core }, neighbor, node);
                }
            }
            Event::Sample => self.samples.push(average_channel_count(&self.core.net)),
        }
    }

    fn drain_resolutions(&mut self) {
        while !self.core.resolutions.is_empty() {
            let batch = std::mem::take(&mut self.core.resolutions);
            for (id, result) in batch {
                if self.payments[id.index()].status != PaymentStatus::Pending {
                    continue;
                }
                match result {
                    Ok(fwd) => self.forward(id, fwd),
                    Err(reason) => self.payments[id.index()].fail(reason, self.core.now),
                }
            }
        }
    }

    fn forward(&mut self, id: PaymentId, fwd: Forwarding) {
        let p = &self.payments[id.index()];
        let req = RouteRequest {
            payment: id,
            src: p.src,
            dst: p.dst,
            amount: p.amount,
        };
        let route = match fwd {
            Forwarding::SourceRoute(route) => route,
            Forwarding::HopByHop { label } => match self.walk(&req, label) {
                Ok(route) => route,
                Err((path, reason)) => {
                    let failure = HopFailure {
                        reason,
                        node_index: path.len() - 1,
                    };
                    self.account_payment_packets(&path, Err(failure));
                    self.payments[id.index()].fail(reason, self.core.now);
                    self.protocol
                        .on_outcome(&mut Ctx { core: &mut self.core }, &req, &path, Err(failure));
                    return;
                }
            },
        };

        let now = self.core.now;
        let result = execute_payment(&mut self.core.net, &route, &mut self.payments[id.index()], now);
        if let Some(audit) = &mut self.audit {
            audit.check(&self.core.net, &route, req.amount, result.is_ok());
        }
        self.account_payment_packets(&route, result);
        self.protocol
            .on_outcome(&mut Ctx { core: &mut self.core }, &req, &route, result);
    }

    /// Asks each node in turn for the next hop. On failure returns the partial path.
    fn walk(&mut self, req: &RouteRequest, label: Option<u64>) -> Result<Vec<NodeId>, (Vec<NodeId>, FailReason)> {
        let mut path = vec![req.src];
        let limit = self.core.net.node_count();
        loop {
            let cur = *path.last().expect("non-empty");
            if cur == req.dst {
                return Ok(path);
            }
            if path.len() > limit {
                return Err((path, FailReason::NoRoute));
            }
            let flow = Flow {
                payment: req.payment,
                src: req.src,
                dst: req.dst,
                amount: req.amount,
                label,
                path: &path,
            };
            match self.protocol.next_hop(&mut Ctx { core: &mut self.core }, cur, &flow) {
                Ok(next) if !path.contains(&next) && self.core.net.channel_between(cur, next).is_some() => {
                    path.push(next)
                }
                Ok(_) => return Err((path, FailReason::NoRoute)),
                Err(reason) => return Err((path, reason)),
            }
        }
    }

    /// Lock packets forward, then settle or fail packets back, as far as each got.
    fn account_payment_packets(&mut self, route: &[NodeId], result: Result<(), HopFailure>) {
        let hops = route.len().saturating_sub(1);
        if hops == 0 {
            return;
        }
        let size = self.core.sizes.payment_lock;
        let role_of = |node: NodeId| {
            if node == route[0] || node == route[hops] {
                Role::Endpoint
            } else {
                Role::Router
            }
        };
        let (locks, back_kind, back_from) = match result {
            Ok(()) => (hops, "settle", 0),
            Err(HopFailure {
                reason: FailReason::MaliciousDrop,
                node_index,
            }) => (hops, "settle", node_index),
            Err(HopFailure { node_index, .. }) => (node_index, "fail", 0),
        };
        for i in 0..locks {
            self.core.count_packet("lock", route[i], route[i + 1], size, role_of(route[i]));
        }
        // Settles travel from the receiver back towards the sender; a dropper stops them.
        // Failure notices travel from the node that stopped the lock.
        let top = if back_kind == "settle" { hops } else { locks };
        for i in (back_from..top).rev() {
            let from = route[i + 1];
            let role = if back_kind == "settle" { role_of(from) } else { Role::Router };
            self.core.count_packet(back_kind, from, route[i], size, role);
        }
    }

    /// Fails whatever is still pending and collects the run's outputs.
    pub fn finish(mut self) -> RunReport {
        let now = self.core.now;
        for p in &mut self.payments {
            if p.status == PaymentStatus::Pending {
                p.fail(FailReason::NoRoute, now);
            }
        }
        if let Some(audit) = &mut self.audit {
            audit.finish(&self.core.net);
        }
        let n = self.core.net.node_count();
        let mut total = Footprint::default();
        let mut routing_max: f64 = 0.0;
        for i in 0..n {
            let fp = self.protocol.footprint(NodeId(i as u32), now);
            total.entries += fp.entries;
            total.routing_entries += fp.routing_entries;
            routing_max = routing_max.max(fp.routing_entries);
        }
        let denom = n.max(1) as f64;
        let entry_bytes = self.core.sizes.table_entry as f64;
        RunReport {
            node_count: n,
            payments: self.payments,
            counters: self.core.counters,
            channel_samples: self.samples,
            memory: MemorySample {
                entries_mean: total.entries / denom,
                bytes_mean: total.entries * entry_bytes / denom,
                routing_entries_mean: total.routing_entries / denom,
                routing_entries_max: routing_max,
            },
            audit: self.audit,
            trace: self.core.trace,
            end_time: now,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Payload;
    use crate::pcn::FeePolicy;
    use crate::protocols::ProtocolKind;

    #[derive(Clone, Debug)]
    struct Ping;

    impl Payload for Ping {
        fn label(&self) -> &'static str {
            "ping"
        }
        fn size(&self, sizes: &SizeModel) -> u32 {
            sizes.control
        }
    }

    /// Records deliveries; routes nothing.
    #[derive(Default)]
    struct Recorder {
        delivered: Vec<(SimTime, NodeId, NodeId)>,
    }

    impl RoutingProtocol for Recorder {
        type Msg = Ping;
        type Timer = ();

        fn kind(&self) -> ProtocolKind {
            ProtocolKind::Basic
        }
        fn on_message(&mut self, ctx: &mut Ctx<'_, Ping, ()>, msg: Message<Ping>) {
            self.delivered.push((ctx.now(), msg.sender, msg.receiver));
        }
        fn prepare(&mut self, _: &mut Ctx<'_, Ping, ()>, _: &RouteRequest) -> Prepared {
            Prepared::Failed(FailReason::NoRoute)
        }
        fn next_hop(&mut self, _: &mut Ctx<'_, Ping, ()>, _: NodeId, _: &Flow<'_>) -> Result<NodeId, FailReason> {
            Err(FailReason::NoRoute)
        }
        fn footprint(&self, _: NodeId, _: SimTime) -> Footprint {
            Footprint::default()
        }
    }

    fn pair_net() -> Network {
        let mut net = Network::with_nodes(3);
        net.connect(NodeId(0), NodeId(1), 100, FeePolicy::ZERO);
        net.connect(NodeId(1), NodeId(2), 100, FeePolicy::ZERO);
        net
    }

    #[test]
    fn delivery_latency_within_bounds() {
        let mut sim = Simulation::new(pair_net(), Recorder::default(), RunOptions::default());
        sim.with_ctx(|_, ctx| {
            for _ in 0..200 {
                assert!(ctx.send(NodeId(0), NodeId(1), Ping, Role::Router));
            }
        });
        sim.run();
        let delivered = &sim.protocol().delivered;
        assert_eq!(delivered.len(), 200);
        assert!(delivered.iter().all(|(t, _, _)| (10..=100).contains(&t.0)));
    }

    #[test]
    fn send_over_closed_channel_is_dropped() {
        let mut net = pair_net();
        net.close_channel(crate::pcn::ChannelId(0));
        let mut sim = Simulation::new(net, Recorder::default(), RunOptions::default());
        let sent = sim.with_ctx(|_, ctx| ctx.send(NodeId(0), NodeId(1), Ping, Role::Endpoint));
        assert!(!sent);
        sim.run();
        assert!(sim.protocol().delivered.is_empty());
        assert_eq!(sim.counters().dropped, 1);
        assert_eq!(sim.counters().node_count + sim.counters().router_count, 0);
    }

    #[test]
    fn counter_sum_identity() {
        let mut sim = Simulation::new(pair_net(), Recorder::default(), RunOptions::default());
        sim.schedule_failure(SimTime(1), NodeId(2));
        sim.run_until(SimTime(1));
        // 1000 sends, a third of them over the channel that just closed
        sim.with_ctx(|_, ctx| {
            for i in 0..1000u32 {
                let (from, to, role) = match i % 3 {
                    0 => (NodeId(0), NodeId(1), Role::Endpoint),
                    1 => (NodeId(1), NodeId(0), Role::Router),
                    _ => (NodeId(1), NodeId(2), Role::Router),
                };
                ctx.send(from, to, Ping, role);
            }
        });
        let c = sim.counters();
        assert_eq!(c.sent, 1000);
        assert_eq!(c.dropped, 333);
        assert_eq!(c.node_count + c.router_count, 1000 - c.dropped);
        assert_eq!(c.node_bytes + c.router_bytes, 64 * (1000 - c.dropped));
    }

    #[test]
    fn non_participating_nodes_emit_no_router_traffic() {
        let mut net = pair_net();
        net.node_mut(NodeId(1)).behavior = Behavior::NonParticipating;
        let mut sim = Simulation::new(net, Recorder::default(), RunOptions::default());
        let (router, endpoint) = sim.with_ctx(|_, ctx| {
            (
                ctx.send(NodeId(1), NodeId(0), Ping, Role::Router),
                ctx.send(NodeId(1), NodeId(0), Ping, Role::Endpoint),
            )
        });
        assert!(!router && endpoint);
        assert_eq!(sim.counters().sent, 1);
    }

    #[test]
    fn same_seed_same_delivery_times() {
        let run = |seed| {
            let opts = RunOptions { seed, ..RunOptions::default() };
            let mut sim = Simulation::new(pair_net(), Recorder::default(), opts);
            sim.with_ctx(|_, ctx| {
                for _ in 0..50 {
                    ctx.broadcast(NodeId(1), Ping, Role::Router, None);
                }
            });
            sim.run();
            sim.protocol().delivered.clone()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
