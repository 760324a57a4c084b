//! Payment channel network model: nodes, channels with directional balances and fees.

pub(crate) mod topology;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SimTime;

pub use topology::{generate_topology, TopologyKind, TopologyParams};

/// Balance units. Money is never represented as floating point.
pub type Amount = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub u32);

impl ChannelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Fails at its `fail_time`; all of its channels close.
    Faulty,
    /// Participates in routing, drops payments at settle.
    Malicious,
    /// Refuses to forward payments or routing traffic for others.
    NonParticipating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub behavior: Behavior,
    pub is_merchant: bool,
    pub fail_time: Option<SimTime>,
    pub failed: bool,
}

impl Node {
    pub fn honest(id: NodeId) -> Self {
        Node {
            id,
            behavior: Behavior::Honest,
            is_merchant: false,
            fail_time: None,
            failed: false,
        }
    }

    pub fn is_alive(&self) -> bool {
        !self.failed
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum PcnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient balance: need {needed}, have {available}")]
    InsufficientBalance { needed: Amount, available: Amount },
    #[error("channel {0:?} is closed")]
    ChannelClosed(ChannelId),
    #[error("node {0} is not an endpoint of channel {1:?}")]
    NotAnEndpoint(NodeId, ChannelId),
    #[error("channel between {0} and {1} already exists")]
    DuplicateChannel(NodeId, NodeId),
}

/// Fee charged by a node when forwarding out of its side of a channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeePolicy {
    pub base_fee: Amount,
    pub fee_rate_ppm: u64,
}

impl FeePolicy {
    pub const ZERO: FeePolicy = FeePolicy {
        base_fee: 0,
        fee_rate_ppm: 0,
    };

    pub fn new(base_fee: Amount, fee_rate_ppm: u64) -> Self {
        FeePolicy {
            base_fee,
            fee_rate_ppm,
        }
    }

    /// `base + floor(amount * rate / 1e6)`; callers guarantee `amount > 0`.
    pub(crate) fn fee_for(&self, amount: Amount) -> Amount {
        let proportional = (amount as u128 * self.fee_rate_ppm as u128) / 1_000_000;
        self.base_fee.saturating_add(proportional.min(u64::MAX as u128) as u64)
    }
}

/// Fee for forwarding `amount` under `policy`.
pub fn channel_fee(policy: FeePolicy, amount: Amount) -> Result<Amount, PcnError> {
    if amount == 0 {
        return Err(PcnError::InvalidArgument("amount must be positive".into()));
    }
    Ok(policy.fee_for(amount))
}

/// A bidirectional payment channel.
///
/// `balance_a` is spendable from `a` towards `b`, `balance_b` the other way round.
/// Their sum always equals `capacity`.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub id: ChannelId,
    pub a: NodeId,
    pub b: NodeId,
    pub balance_a: Amount,
    pub balance_b: Amount,
    pub capacity: Amount,
    pub policy_a: FeePolicy,
    pub policy_b: FeePolicy,
    pub open: bool,
}

impl Channel {
    pub fn new(
        id: ChannelId,
        a: NodeId,
        b: NodeId,
        balance_a: Amount,
        balance_b: Amount,
        policy_a: FeePolicy,
        policy_b: FeePolicy,
    ) -> Self {
        Channel {
            id,
            a,
            b,
            balance_a,
            balance_b,
            capacity: balance_a + balance_b,
            policy_a,
            policy_b,
            open: true,
        }
    }

    pub fn has_endpoint(&self, node: NodeId) -> bool {
        self.a == node || self.b == node
    }

    pub fn other(&self, node: NodeId) -> NodeId {
        if node == self.a {
            self.b
        } else {
            self.a
        }
    }

    /// Balance spendable by `from` towards the other endpoint.
    pub fn balance_from(&self, from: NodeId) -> Amount {
        if from == self.a {
            self.balance_a
        } else {
            self.balance_b
        }
    }

    pub fn policy_from(&self, from: NodeId) -> FeePolicy {
        if from == self.a {
            self.policy_a
        } else {
            self.policy_b
        }
    }

    /// Outbound balance of `from` divided by capacity, in `[0, 1]`.
    pub fn normalized_balance_from(&self, from: NodeId) -> f64 {
        if self.capacity == 0 {
            return 0.0;
        }
        self.balance_from(from) as f64 / self.capacity as f64
    }

    fn side_mut(&mut self, from: NodeId) -> (&mut Amount, &mut Amount) {
        if from == self.a {
            (&mut self.balance_a, &mut self.balance_b)
        } else {
            (&mut self.balance_b, &mut self.balance_a)
        }
    }

    fn check_sender(&self, from: NodeId) -> Result<(), PcnError> {
        if !self.has_endpoint(from) {
            return Err(PcnError::NotAnEndpoint(from, self.id));
        }
        if !self.open {
            return Err(PcnError::ChannelClosed(self.id));
        }
        Ok(())
    }

    /// Moves `amount` from `from`'s side to the other side. No mutation on error.
    pub fn apply_transfer(&mut self, from: NodeId, amount: Amount) -> Result<(), PcnError> {
        self.check_sender(from)?;
        let (out, inc) = self.side_mut(from);
        if *out < amount {
            return Err(PcnError::InsufficientBalance {
                needed: amount,
                available: *out,
            });
        }
        *out -= amount;
        *inc += amount;
        Ok(())
    }

    /// Lock phase: takes `amount` off the sender side without crediting the receiver.
    pub(crate) fn reserve(&mut self, from: NodeId, amount: Amount) -> Result<(), PcnError> {
        self.check_sender(from)?;
        let (out, _) = self.side_mut(from);
        if *out < amount {
            return Err(PcnError::InsufficientBalance {
                needed: amount,
                available: *out,
            });
        }
        *out -= amount;
        Ok(())
    }

    pub(crate) fn commit(&mut self, from: NodeId, amount: Amount) {
        let (_, inc) = self.side_mut(from);
        *inc += amount;
    }

    pub(crate) fn release(&mut self, from: NodeId, amount: Amount) {
        let (out, _) = self.side_mut(from);
        *out += amount;
    }

    pub fn is_conserved(&self) -> bool {
        self.balance_a.checked_add(self.balance_b) == Some(self.capacity)
    }
}

/// Nodes, channels and the adjacency index.
#[derive(Clone, Debug, Default)]
pub struct Network {
    nodes: Vec<Node>,
    channels: Vec<Channel>,
    adjacency: Vec<Vec<ChannelId>>,
    pairs: HashMap<(NodeId, NodeId), ChannelId>,
}

fn pair_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Network {
    /// `n` honest nodes with no channels.
    pub fn with_nodes(n: usize) -> Self {
        Network {
            nodes: (0..n as u32).map(|i| Node::honest(NodeId(i))).collect(),
            channels: Vec::new(),
            adjacency: vec![Vec::new(); n],
            pairs: HashMap::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id.index()]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, id: ChannelId) -> &Channel {
        &self.channels[id.index()]
    }

    pub fn channel_mut(&mut self, id: ChannelId) -> &mut Channel {
        &mut self.channels[id.index()]
    }

    pub fn add_channel(
        &mut self,
        a: NodeId,
        b: NodeId,
        balance_a: Amount,
        balance_b: Amount,
        policy_a: FeePolicy,
        policy_b: FeePolicy,
    ) -> Result<ChannelId, PcnError> {
        if a == b {
            return Err(PcnError::InvalidArgument(format!("self-channel at node {a}")));
        }
        if a.index() >= self.nodes.len() || b.index() >= self.nodes.len() {
            return Err(PcnError::InvalidArgument(format!("unknown node in channel {a}-{b}")));
        }
        let key = pair_key(a, b);
        if self.pairs.contains_key(&key) {
            return Err(PcnError::DuplicateChannel(a, b));
        }
        let id = ChannelId(self.channels.len() as u32);
        self.channels
            .push(Channel::new(id, a, b, balance_a, balance_b, policy_a, policy_b));
        self.adjacency[a.index()].push(id);
        self.adjacency[b.index()].push(id);
        self.pairs.insert(key, id);
        Ok(id)
    }

    /// Symmetric convenience constructor used by tests and hand-built topologies.
    pub fn connect(&mut self, a: NodeId, b: NodeId, balance_each: Amount, policy: FeePolicy) -> ChannelId {
        self.add_channel(a, b, balance_each, balance_each, policy, policy)
            .expect("valid channel")
    }

    pub fn channel_between(&self, a: NodeId, b: NodeId) -> Option<ChannelId> {
        self.pairs.get(&pair_key(a, b)).copied()
    }

    pub fn incident(&self, node: NodeId) -> &[ChannelId] {
        &self.adjacency[node.index()]
    }

    /// Neighbors over open channels, in channel-creation order.
    pub fn open_neighbors(&self, node: NodeId) -> impl Iterator<Item = (NodeId, ChannelId)> + '_ {
        self.adjacency[node.index()].iter().filter_map(move |&cid| {
            let ch = &self.channels[cid.index()];
            ch.open.then(|| (ch.other(node), cid))
        })
    }

    pub fn open_degree(&self, node: NodeId) -> usize {
        self.open_neighbors(node).count()
    }

    /// Outbound balance of `from` towards `to` if an open channel joins them.
    pub fn outbound_balance(&self, from: NodeId, to: NodeId) -> Option<Amount> {
        let cid = self.channel_between(from, to)?;
        let ch = &self.channels[cid.index()];
        ch.open.then(|| ch.balance_from(from))
    }

    /// Marks a node failed and closes every channel incident to it.
    /// Returns the neighbors that lost a channel.
    pub fn fail_node(&mut self, node: NodeId) -> Vec<NodeId> {
        self.nodes[node.index()].failed = true;
        let mut lost = Vec::new();
        for &cid in &self.adjacency[node.index()] {
            let ch = &mut self.channels[cid.index()];
            if ch.open {
                ch.open = false;
                lost.push(ch.other(node));
            }
        }
        lost
    }

    pub fn close_channel(&mut self, id: ChannelId) {
        self.channels[id.index()].open = false;
    }

    /// Breadth-first connectivity over open channels.
    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([NodeId(0)]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for (v, _) in self.open_neighbors(u) {
                if !seen[v.index()] {
                    seen[v.index()] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    /// Hop distances from `src` over open channels; `u32::MAX` marks unreachable.
    pub fn hop_distances(&self, src: NodeId) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.nodes.len()];
        dist[src.index()] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u.index()];
            for (v, _) in self.open_neighbors(u) {
                if dist[v.index()] == u32::MAX {
                    dist[v.index()] = d + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn total_capacity(&self) -> Amount {
        self.channels.iter().map(|c| c.capacity).sum()
    }

    /// Edge list, one `node_a node_b balance_a balance_b` line per channel.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ch in &self.channels {
            writeln!(out, "{} {} {} {}", ch.a, ch.b, ch.balance_a, ch.balance_b)?;
        }
        Ok(())
    }
}

/// Mean number of open channels incident to a node.
pub fn average_channel_count(net: &Network) -> f64 {
    let n = net.node_count();
    if n == 0 {
        return 0.0;
    }
    let open_endpoints: usize = net.channels().iter().filter(|c| c.open).count() * 2;
    open_endpoints as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(balance_a: Amount, balance_b: Amount) -> Channel {
        Channel::new(
            ChannelId(0),
            NodeId(0),
            NodeId(1),
            balance_a,
            balance_b,
            FeePolicy::ZERO,
            FeePolicy::ZERO,
        )
    }

    #[test]
    fn fee_formula() {
        assert_eq!(channel_fee(FeePolicy::new(1, 1000), 10_000), Ok(11));
        assert_eq!(channel_fee(FeePolicy::new(0, 0), 500), Ok(0));
        assert_eq!(channel_fee(FeePolicy::new(2, 1_000_000), 7), Ok(9));
        assert!(matches!(
            channel_fee(FeePolicy::new(1, 1), 0),
            Err(PcnError::InvalidArgument(_))
        ));
    }

    #[test]
    fn transfer_moves_funds() {
        let mut ch = pair(100, 0);
        ch.apply_transfer(NodeId(0), 40).unwrap();
        assert_eq!((ch.balance_a, ch.balance_b), (60, 40));
    }

    #[test]
    fn transfer_is_atomic_on_insufficient_balance() {
        let mut ch = pair(10, 90);
        let err = ch.apply_transfer(NodeId(0), 11).unwrap_err();
        assert_eq!(
            err,
            PcnError::InsufficientBalance {
                needed: 11,
                available: 10
            }
        );
        assert_eq!((ch.balance_a, ch.balance_b), (10, 90));
    }

    #[test]
    fn transfer_on_closed_channel() {
        let mut ch = pair(10, 10);
        ch.open = false;
        assert_eq!(ch.apply_transfer(NodeId(1), 1), Err(PcnError::ChannelClosed(ChannelId(0))));
        assert_eq!(ch.apply_transfer(NodeId(7), 1), Err(PcnError::NotAnEndpoint(NodeId(7), ChannelId(0))));
    }

    proptest! {
        #[test]
        fn transfers_conserve_capacity(
            a in 0u64..10_000,
            b in 0u64..10_000,
            ops in proptest::collection::vec((any::<bool>(), 0u64..5_000), 0..200),
        ) {
            let mut ch = pair(a, b);
            let total = a + b;
            for (from_a, amount) in ops {
                let from = if from_a { NodeId(0) } else { NodeId(1) };
                let before = (ch.balance_a, ch.balance_b);
                match ch.apply_transfer(from, amount) {
                    Ok(()) => {}
                    Err(_) => prop_assert_eq!(before, (ch.balance_a, ch.balance_b)),
                }
                prop_assert_eq!(ch.balance_a + ch.balance_b, total);
            }
        }
    }

    fn star(leaves: u32) -> Network {
        let mut net = Network::with_nodes(leaves as usize + 1);
        for i in 1..=leaves {
            net.connect(NodeId(0), NodeId(i), 10, FeePolicy::ZERO);
        }
        net
    }

    #[test]
    fn average_channel_count_examples() {
        let mut two = Network::with_nodes(2);
        two.connect(NodeId(0), NodeId(1), 5, FeePolicy::ZERO);
        assert_eq!(average_channel_count(&two), 1.0);

        let mut s = star(5);
        let before = average_channel_count(&s);
        assert!((before - 10.0 / 6.0).abs() < 1e-12);

        // recount by hand on the mutated graph
        s.close_channel(ChannelId(2));
        let recount: usize = s.node_ids().map(|n| s.open_degree(n)).sum();
        let after = average_channel_count(&s);
        assert!((after - recount as f64 / 6.0).abs() < 1e-12);
        assert!((before - after - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_and_self_channels_rejected() {
        let mut net = Network::with_nodes(3);
        net.connect(NodeId(0), NodeId(1), 1, FeePolicy::ZERO);
        assert_eq!(
            net.add_channel(NodeId(1), NodeId(0), 1, 1, FeePolicy::ZERO, FeePolicy::ZERO),
            Err(PcnError::DuplicateChannel(NodeId(1), NodeId(0)))
        );
        assert!(net
            .add_channel(NodeId(2), NodeId(2), 1, 1, FeePolicy::ZERO, FeePolicy::ZERO)
            .is_err());
    }

    #[test]
    fn failing_a_node_closes_its_channels() {
        let mut net = star(3);
        let lost = net.fail_node(NodeId(0));
        assert_eq!(lost, vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert_eq!(average_channel_count(&net), 0.0);
        assert!(!net.is_connected());
    }

    #[test]
    fn edge_list_dump() {
        let mut net = Network::with_nodes(2);
        net.add_channel(NodeId(0), NodeId(1), 7, 3, FeePolicy::ZERO, FeePolicy::ZERO)
            .unwrap();
        let mut out = Vec::new();
        net.write_edge_list(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 1 7 3\n");
    }
}
