//! Proactive prefix routing over dynamically assigned tree addresses, with a DHT that maps
//! node ids to their current address.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Flow, Footprint, Forwarding, Prepared, ProtoCtx, ProtocolKind, RouteRequest, RoutingProtocol};
use crate::engine::{FailReason, Message, Payload, PaymentId, Role, SizeModel};
use crate::pcn::{Behavior, Network, NodeId};
use crate::SimTime;

/// Forwarding hops after which a control packet is discarded.
const MAX_HOPS: u32 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdartParams {
    /// Address width is `ceil(log2 n) + extra_bits` unless `address_bits` is set.
    pub extra_bits: u32,
    pub address_bits: Option<u32>,
    /// Next hops kept per routing section.
    pub multipath: usize,
    pub hello_ms: u64,
    /// Entries not refreshed for this many hello periods are evicted.
    pub stale_periods: u64,
    pub cache_ttl_ms: u64,
    pub lookup_timeout_ms: u64,
    /// When nodes publish their address at their anchor.
    pub register_at_ms: u64,
    /// Period of re-publishing; 0 publishes once.
    pub register_every_ms: u64,
    /// Re-home nodes cut off from their prefix groups after a link or node failure.
    pub repair: bool,
}

impl Default for MdartParams {
    fn default() -> Self {
        MdartParams {
            extra_bits: 2,
            address_bits: None,
            multipath: 2,
            hello_ms: 500,
            stale_periods: 3,
            cache_ttl_ms: 5_000,
            lookup_timeout_ms: 5_000,
            register_at_ms: 8_000,
            register_every_ms: 5_000,
            repair: true,
        }
    }
}

impl MdartParams {
    pub fn bits_for(&self, n: usize) -> u32 {
        self.address_bits
            .unwrap_or_else(|| (n.max(1) as u64).next_power_of_two().trailing_zeros() + self.extra_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MdartError {
    #[error("address space of {bits} bits exhausted at node {node}")]
    AddressSpaceExhausted { bits: u32, node: NodeId },
    #[error("address width {0} out of range 1..=32")]
    BadWidth(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MdartAddress {
    pub bits: u32,
    pub width: u32,
}

impl MdartAddress {
    /// Highest bit position at which the two addresses differ.
    pub fn highest_diff(self, other: u32) -> Option<u32> {
        let x = self.bits ^ other;
        (x != 0).then(|| 31 - x.leading_zeros())
    }
}

impl fmt::Display for MdartAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.bits, width = self.width as usize)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// DHT key of a node id: the top `width` bits of its hash.
pub fn dht_key(id: NodeId, width: u32) -> u32 {
    (splitmix64(id.0 as u64) >> (64 - width)) as u32
}

/// Assigns one address per node so that address prefixes are held by connected sets of
/// nodes where the topology allows it, which keeps sibling subtrees reachable from inside
/// their parent subtree. Node 0 holds 0…0.
pub fn assign_addresses(net: &Network, width: u32) -> Result<Vec<MdartAddress>, MdartError> {
    if !(1..=32).contains(&width) {
        return Err(MdartError::BadWidth(width));
    }
    let greedy = greedy_addresses(net, width)?;
    let Some(bits) = bisect_addresses(net, width) else { return Ok(greedy) };
    let bisected: Vec<MdartAddress> = bits.into_iter().map(|bits| MdartAddress { bits, width }).collect();
    if stranded(net, &greedy) < stranded(net, &bisected) {
        Ok(greedy)
    } else {
        Ok(bisected)
    }
}

/// Addresses for the routing overlay: the largest connected component of nodes that take
/// part in routing (ties: the one with the lowest id). Nodes outside it never exchange
/// hellos, so they hold leftover addresses, in id order, that no route leads to.
pub fn overlay_addresses(net: &Network, width: u32) -> Result<Vec<MdartAddress>, MdartError> {
    let n = net.node_count();
    let routes = |v: NodeId| {
        let node = net.node(v);
        node.is_alive() && node.behavior != Behavior::NonParticipating
    };
    let mut comp = vec![usize::MAX; n];
    let mut best: Vec<usize> = Vec::new();
    for start in net.node_ids().filter(|&v| routes(v)) {
        if comp[start.index()] != usize::MAX {
            continue;
        }
        comp[start.index()] = start.index();
        let mut members = vec![start.index()];
        let mut i = 0;
        while i < members.len() {
            let u = NodeId(members[i] as u32);
            i += 1;
            for (v, _) in net.open_neighbors(u) {
                if routes(v) && comp[v.index()] == usize::MAX {
                    comp[v.index()] = start.index();
                    members.push(v.index());
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    if best.len() == n {
        return assign_addresses(net, width);
    }
    best.sort_unstable();
    let mut local = vec![usize::MAX; n];
    for (i, &v) in best.iter().enumerate() {
        local[v] = i;
    }
    let mut sub = Network::with_nodes(best.len());
    for ch in net.channels().iter().filter(|c| c.open) {
        let (a, b) = (local[ch.a.index()], local[ch.b.index()]);
        if a != usize::MAX && b != usize::MAX {
            sub.add_channel(NodeId(a as u32), NodeId(b as u32), ch.balance_a, ch.balance_b, ch.policy_a, ch.policy_b)
                .expect("sub-network mirrors valid channels");
        }
    }
    let inner = assign_addresses(&sub, width)?;
    let mut used = vec![false; 1usize << width];
    let mut out = vec![MdartAddress { bits: 0, width }; n];
    for (i, &v) in best.iter().enumerate() {
        out[v] = inner[i];
        used[inner[i].bits as usize] = true;
    }
    let mut spare = (0..used.len()).filter(|&a| !used[a]);
    for v in (0..n).filter(|&v| local[v] == usize::MAX) {
        let bits = spare.next().ok_or(MdartError::AddressSpaceExhausted {
            bits: width,
            node: NodeId(v as u32),
        })?;
        out[v] = MdartAddress { bits: bits as u32, width };
    }
    Ok(out)
}

const REPAIR_ROUNDS: usize = 4;

fn takes_part(net: &Network, v: NodeId) -> bool {
    let node = net.node(v);
    node.is_alive() && node.behavior != Behavior::NonParticipating
}

/// Routing nodes cut off from the largest connected part of one of their prefix groups
/// (ties: the part holding the lowest id).
fn cut_off(net: &Network, addrs: &[MdartAddress]) -> Vec<bool> {
    let n = addrs.len();
    let mut cut = vec![false; n];
    let Some(width) = addrs.first().map(|a| a.width) else { return cut };
    let routing: Vec<usize> = (0..n).filter(|&v| takes_part(net, NodeId(v as u32))).collect();
    let mut group = vec![u32::MAX; n];
    let mut part = vec![usize::MAX; n];
    for len in 1..=width {
        for &v in &routing {
            group[v] = addrs[v].bits >> (width - len);
            part[v] = usize::MAX;
        }
        let mut parts: Vec<(u32, usize)> = Vec::new();
        let mut queue = VecDeque::new();
        for &s in &routing {
            if part[s] != usize::MAX {
                continue;
            }
            let id = parts.len();
            part[s] = id;
            queue.push_back(s);
            let mut size = 0;
            while let Some(u) = queue.pop_front() {
                size += 1;
                for (w, _) in net.open_neighbors(NodeId(u as u32)) {
                    let w = w.index();
                    if group[w] == group[s] && part[w] == usize::MAX && takes_part(net, NodeId(w as u32)) {
                        part[w] = id;
                        queue.push_back(w);
                    }
                }
            }
            parts.push((group[s], size));
        }
        let mut main: HashMap<u32, usize> = HashMap::new();
        for (i, &(g, size)) in parts.iter().enumerate() {
            let best = main.entry(g).or_insert(i);
            if size > parts[*best].1 {
                *best = i;
            }
        }
        for &v in &routing {
            if main[&group[v]] != part[v] {
                cut[v] = true;
            }
        }
    }
    cut
}

/// Re-homes routing nodes that a topology change cut off from their prefix groups. Each
/// one, once it has a settled neighbor, takes the lowest-level empty sibling subtree of
/// such a neighbor (ties: lowest neighbor id) and holds its first address. Returns the
/// nodes whose address changed, in id order.
pub fn repair_addresses(net: &Network, addrs: &mut [MdartAddress]) -> Vec<NodeId> {
    let n = addrs.len();
    let Some(width) = addrs.first().map(|a| a.width) else { return Vec::new() };
    let mut moved = vec![false; n];
    for _ in 0..REPAIR_ROUNDS {
        let cut = cut_off(net, addrs);
        if !cut.iter().any(|&c| c) {
            break;
        }
        let mut settled: Vec<bool> = (0..n).map(|v| takes_part(net, NodeId(v as u32)) && !cut[v]).collect();
        let mut taken: BTreeSet<u32> = (0..n)
            .filter(|&v| !cut[v] && net.node(NodeId(v as u32)).is_alive())
            .map(|v| addrs[v].bits)
            .collect();
        let mut pending: Vec<usize> = (0..n).filter(|&v| cut[v]).collect();
        loop {
            let before = pending.len();
            pending.retain(|&v| {
                let mut near: Vec<usize> = net
                    .open_neighbors(NodeId(v as u32))
                    .map(|(u, _)| u.index())
                    .filter(|&u| settled[u])
                    .collect();
                near.sort_unstable();
                for level in 0..width {
                    for &u in &near {
                        let prefix = (addrs[u].bits >> level) ^ 1;
                        let lo = prefix << level;
                        let hi = lo | ((1u64 << level) - 1) as u32;
                        if taken.range(lo..=hi).next().is_none() {
                            addrs[v].bits = lo;
                            taken.insert(lo);
                            settled[v] = true;
                            moved[v] = true;
                            return false;
                        }
                    }
                }
                true
            });
            if pending.is_empty() || pending.len() == before {
                break;
            }
        }
        // stuck nodes keep their address unless someone took it meanwhile
        for v in pending {
            if taken.contains(&addrs[v].bits) {
                let free = (0..(1u64 << width) as u32).find(|a| !taken.contains(a));
                if let Some(a) = free {
                    addrs[v].bits = a;
                    moved[v] = true;
                }
            }
            taken.insert(addrs[v].bits);
        }
    }
    (0..n).filter(|&v| moved[v]).map(|v| NodeId(v as u32)).collect()
}

/// Over all address prefixes, the nodes not connected to the lowest-id holder of their
/// prefix through holders of the same prefix.
pub fn stranded(net: &Network, addrs: &[MdartAddress]) -> usize {
    let Some(width) = addrs.first().map(|a| a.width) else { return 0 };
    let mut total = 0;
    for len in 1..=width {
        let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
        for (v, a) in addrs.iter().enumerate() {
            groups.entry(a.bits >> (width - len)).or_default().push(v);
        }
        for set in groups.values() {
            let member = membership(net, set);
            let (reached, _) = member_tree(net, &member, set[0], false);
            total += set.len() - reached.len();
        }
    }
    total
}

/// Split attempts before giving up on a fully connected layout.
const SPLIT_BUDGET: usize = 2_000;
/// Split attempts per set when looking for a connected layout of that set alone.
const LOCAL_BUDGET: usize = 64;
/// Alternative cuts tried per set.
const SPLIT_TRIES: usize = 6;

/// Recursively splits the network into two connected halves per address bit. Sets that
/// admit no connected layout are numbered in breadth-first order instead.
fn bisect_addresses(net: &Network, width: u32) -> Option<Vec<u32>> {
    let n = net.node_count();
    if n == 0 || !net.is_connected() || (n as u64) > 1u64 << width {
        return None;
    }
    let mut bits = vec![0u32; n];
    let set: Vec<usize> = (0..n).collect();
    let mut budget = SPLIT_BUDGET;
    if !place(net, &set, 0, width, &mut bits, &mut budget) {
        place_lenient(net, &set, 0, width, &mut bits);
    }
    Some(bits)
}

fn membership(net: &Network, set: &[usize]) -> Vec<bool> {
    let mut member = vec![false; net.node_count()];
    for &v in set {
        member[v] = true;
    }
    member
}

fn complement(net: &Network, set: &[usize], upper: &[usize]) -> Vec<usize> {
    let inside = membership(net, upper);
    set.iter().copied().filter(|&v| !inside[v]).collect()
}

/// Connected layout of `set` under `prefix`, backtracking over alternative cuts.
fn place(net: &Network, set: &[usize], prefix: u32, free: u32, bits: &mut [u32], budget: &mut usize) -> bool {
    if set.len() == 1 {
        bits[set[0]] = prefix << free;
        return true;
    }
    if free == 0 || *budget == 0 {
        return false;
    }
    *budget -= 1;
    let member = membership(net, set);
    for upper in connected_splits(net, set, &member, 1usize << (free - 1)) {
        let lower = complement(net, set, &upper);
        if place(net, &lower, prefix << 1, free - 1, bits, budget)
            && place(net, &upper, prefix << 1 | 1, free - 1, bits, budget)
        {
            return true;
        }
        if *budget == 0 {
            return false;
        }
    }
    false
}

/// Like [`place`], but never fails: the best cut is taken even when one side has no
/// connected layout, and unsplittable sets are numbered in breadth-first order.
fn place_lenient(net: &Network, set: &[usize], prefix: u32, free: u32, bits: &mut [u32]) {
    let mut budget = LOCAL_BUDGET;
    if place(net, set, prefix, free, bits, &mut budget) {
        return;
    }
    let member = membership(net, set);
    match connected_splits(net, set, &member, 1usize << (free - 1)).into_iter().next() {
        Some(upper) => {
            let lower = complement(net, set, &upper);
            place_lenient(net, &lower, prefix << 1, free - 1, bits);
            place_lenient(net, &upper, prefix << 1 | 1, free - 1, bits);
        }
        None => {
            let keep = *set.iter().min().expect("non-empty set");
            let (order, _) = member_tree(net, &member, keep, false);
            for (i, v) in order.into_iter().enumerate() {
                bits[v] = prefix << free | i as u32;
            }
        }
    }
}

/// Spanning tree of the `member` nodes rooted at `root`, breadth-first or depth-first:
/// (preorder, parent).
fn member_tree(net: &Network, member: &[bool], root: usize, depth_first: bool) -> (Vec<usize>, Vec<usize>) {
    let n = net.node_count();
    let mut parent = vec![usize::MAX; n];
    let sorted_neighbors = |u: usize| {
        let mut v: Vec<usize> = net
            .open_neighbors(NodeId(u as u32))
            .map(|(v, _)| v.index())
            .filter(|&v| member[v])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    parent[root] = root;
    let mut order = vec![root];
    if depth_first {
        let mut stack = vec![(root, sorted_neighbors(root), 0usize)];
        while let Some((u, next, i)) = stack.last_mut() {
            match next.get(*i) {
                Some(&v) => {
                    *i += 1;
                    if parent[v] == usize::MAX {
                        parent[v] = *u;
                        order.push(v);
                        let nv = sorted_neighbors(v);
                        stack.push((v, nv, 0));
                    }
                }
                None => {
                    stack.pop();
                }
            }
        }
    } else {
        let mut i = 0;
        while i < order.len() {
            let u = order[i];
            i += 1;
            for v in sorted_neighbors(u) {
                if parent[v] == usize::MAX {
                    parent[v] = u;
                    order.push(v);
                }
            }
        }
    }
    (order, parent)
}

/// Connected subsets of `set` without its lowest id whose complements are connected too,
/// with both sides at most `cap` nodes, most balanced first. Cuts come from a few
/// breadth-first and depth-first spanning trees.
fn connected_splits(net: &Network, set: &[usize], member: &[bool], cap: usize) -> Vec<Vec<usize>> {
    let total = set.len();
    let Some(&keep) = set.iter().min() else { return Vec::new() };
    let lo = total.saturating_sub(cap).max(1);
    let hi = cap.min(total - 1);
    if lo > hi {
        return Vec::new();
    }
    let (order0, _) = member_tree(net, member, keep, false);
    // roots: every node of a small set, otherwise a spread starting at the kept node
    let roots: Vec<usize> = if total <= 64 {
        order0.clone()
    } else {
        let mut r: Vec<usize> = (0..8).map(|i| order0[i * (total - 1) / 7]).collect();
        r.dedup();
        r
    };
    let mut cands: Vec<(usize, bool, usize, usize)> = Vec::new(); // (imbalance, dfs, root, cut)
    for depth_first in [false, true] {
        for &root in &roots {
            let (order, parent) = member_tree(net, member, root, depth_first);
            let mut size = vec![1usize; net.node_count()];
            let mut has_keep = vec![false; net.node_count()];
            has_keep[keep] = true;
            for &v in order.iter().skip(1).rev() {
                let p = parent[v];
                size[p] += size[v];
                has_keep[p] |= has_keep[v];
            }
            cands.extend(
                order
                    .iter()
                    .skip(1)
                    .filter(|&&c| !has_keep[c] && (lo..=hi).contains(&size[c]))
                    .map(|&c| (size[c].abs_diff(total - size[c]), depth_first, root, c)),
            );
        }
    }
    cands.sort_unstable();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (_, depth_first, root, cut) in cands {
        if out.len() == SPLIT_TRIES {
            break;
        }
        let (order, parent) = member_tree(net, member, root, depth_first);
        let mut inside = vec![false; net.node_count()];
        let mut upper = Vec::new();
        // preorder: a node is inside iff it is the cut or its parent is
        for &v in &order {
            if v == cut || (v != root && inside[parent[v]]) {
                inside[v] = true;
                upper.push(v);
            }
        }
        upper.sort_unstable();
        if !out.contains(&upper) {
            out.push(upper);
        }
    }
    out
}

/// Joins nodes in breadth-first order from node 0. A joiner takes the upper half of the
/// largest address block held by a joined neighbor (ties: lowest neighbor id); with no
/// splittable neighbor block it asks the nearest joined node that still has one.
pub fn greedy_addresses(net: &Network, width: u32) -> Result<Vec<MdartAddress>, MdartError> {
    if !(1..=32).contains(&width) {
        return Err(MdartError::BadWidth(width));
    }
    let n = net.node_count();
    // block size as a power of two, per joined node
    let mut block: Vec<Option<(u32, u32)>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([NodeId(start as u32)]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<NodeId> = net.open_neighbors(u).map(|(v, _)| v).collect();
            next.sort();
            for v in next {
                if !seen[v.index()] {
                    seen[v.index()] = true;
                    queue.push_back(v);
                }
            }
        }
    }

    for (i, &node) in order.iter().enumerate() {
        if i == 0 {
            block[node.index()] = Some((0, width));
            continue;
        }
        let donor = net
            .open_neighbors(node)
            .filter_map(|(v, _)| block[v.index()].map(|(_, k)| (v, k)))
            .filter(|&(_, k)| k >= 1)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(v, _)| v)
            .or_else(|| nearest_donor(net, node, &block))
            .ok_or(MdartError::AddressSpaceExhausted { bits: width, node })?;
        let (addr, k) = block[donor.index()].expect("joined");
        block[donor.index()] = Some((addr, k - 1));
        block[node.index()] = Some((addr | 1 << (k - 1), k - 1));
    }
    Ok(block
        .into_iter()
        .map(|b| MdartAddress {
            bits: b.expect("every node joined").0,
            width,
        })
        .collect())
}

/// Closest joined node (by hops over any channel) with a splittable block; ties go to the
/// larger block, then the lower id.
fn nearest_donor(net: &Network, from: NodeId, block: &[Option<(u32, u32)>]) -> Option<NodeId> {
    let dist = net.hop_distances(from);
    (0..net.node_count())
        .filter_map(|i| block[i].filter(|b| b.1 >= 1).map(|b| (i, b.1)))
        .min_by_key(|&(i, k)| (dist[i], std::cmp::Reverse(k), i))
        .map(|(i, _)| NodeId(i as u32))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SectionEntry {
    pub next_hop: NodeId,
    pub hops: u32,
    /// Smallest normalized outbound balance along the advertised path.
    pub bottleneck: f64,
    pub refreshed: SimTime,
}

impl SectionEntry {
    fn rank_key(&self) -> (u32, std::cmp::Reverse<u64>, NodeId) {
        (self.hops, std::cmp::Reverse(self.bottleneck.to_bits()), self.next_hop)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Advert {
    pub section: u32,
    pub hops: u32,
    pub bottleneck: f64,
}

#[derive(Clone, Debug)]
pub enum MdartMsg {
    Hello { adverts: Vec<Advert> },
    Register { id: NodeId, addr: u32, key: u32, ttl: u32 },
    LookupReq { origin: NodeId, origin_addr: u32, target: NodeId, key: u32, lookup: u32, ttl: u32 },
    LookupRep { origin: NodeId, origin_addr: u32, target: NodeId, addr: Option<u32>, lookup: u32, ttl: u32 },
}

impl Payload for MdartMsg {
    fn label(&self) -> &'static str {
        match self {
            MdartMsg::Hello { .. } => "hello",
            MdartMsg::Register { .. } => "register",
            MdartMsg::LookupReq { .. } => "lookup",
            MdartMsg::LookupRep { .. } => "lookup_reply",
        }
    }

    fn size(&self, sizes: &SizeModel) -> u32 {
        match self {
            MdartMsg::Hello { adverts } => sizes.table_update(adverts.len()),
            _ => sizes.control,
        }
    }
}

#[derive(Clone, Debug)]
pub enum MdartTimer {
    Hello,
    Register,
    /// One-off publish after an address change, once hellos have refilled the table.
    Republish,
    LookupTimeout { target: NodeId, lookup: u32 },
}

#[derive(Debug, Default)]
struct NodeState {
    sections: Vec<Vec<SectionEntry>>,
    index: HashMap<NodeId, u32>,
    cache: HashMap<NodeId, (u32, SimTime)>,
}

#[derive(Debug)]
struct Lookup {
    id: u32,
    payments: Vec<PaymentId>,
}

#[derive(Debug)]
pub struct Mdart {
    params: MdartParams,
    width: u32,
    addresses: Vec<MdartAddress>,
    nodes: Vec<NodeState>,
    lookups: HashMap<(NodeId, NodeId), Lookup>,
    next_lookup: u32,
    repaired_at: Option<SimTime>,
}

type Cx<'a> = ProtoCtx<'a, Mdart>;

impl Mdart {
    pub fn new(net: &Network, params: MdartParams) -> Result<Self, MdartError> {
        let width = params.bits_for(net.node_count());
        if !(1..=32).contains(&width) {
            return Err(MdartError::BadWidth(width));
        }
        let mut addresses = overlay_addresses(net, width)?;
        if params.repair {
            repair_addresses(net, &mut addresses);
        }
        let nodes = (0..net.node_count())
            .map(|_| NodeState {
                sections: vec![Vec::new(); width as usize],
                ..NodeState::default()
            })
            .collect();
        Ok(Mdart {
            params,
            width,
            addresses,
            nodes,
            lookups: HashMap::new(),
            next_lookup: 0,
            repaired_at: None,
        })
    }

    fn register(&mut self, ctx: &mut Cx<'_>, node: NodeId) {
        let addr = self.addresses[node.index()].bits;
        let key = dht_key(node, self.width);
        let msg = MdartMsg::Register { id: node, addr, key, ttl: 0 };
        self.forward_control(ctx, node, msg, key, Role::Router);
    }

    fn repair(&mut self, ctx: &mut Cx<'_>) {
        let moved = repair_addresses(ctx.net(), &mut self.addresses);
        if moved.is_empty() {
            return;
        }
        let mut is_moved = vec![false; self.nodes.len()];
        for &v in &moved {
            is_moved[v.index()] = true;
            let st = &mut self.nodes[v.index()];
            st.sections.iter_mut().for_each(Vec::clear);
            st.cache.clear();
        }
        for st in self.nodes.iter_mut() {
            for sec in st.sections.iter_mut() {
                sec.retain(|e| !is_moved[e.next_hop.index()]);
            }
        }
        if ctx.now() >= SimTime(self.params.register_at_ms) {
            for v in moved {
                ctx.set_timer(v, 2 * self.params.hello_ms, MdartTimer::Republish);
            }
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn address(&self, node: NodeId) -> MdartAddress {
        self.addresses[node.index()]
    }

    pub fn section(&self, node: NodeId, k: u32) -> &[SectionEntry] {
        &self.nodes[node.index()].sections[k as usize]
    }

    pub fn routing_entries(&self, node: NodeId) -> usize {
        self.nodes[node.index()].sections.iter().map(Vec::len).sum()
    }

    /// Node ids anchored at `node`.
    pub fn anchored(&self, node: NodeId) -> Vec<NodeId> {
        let mut v: Vec<_> = self.nodes[node.index()].index.keys().copied().collect();
        v.sort();
        v
    }

    /// Next hop towards `key` for control traffic; `None` when `node` is where routing
    /// towards `key` ends. Skips levels whose sibling subtree is unknown.
    pub fn route_key(&self, node: NodeId, key: u32) -> Option<NodeId> {
        let own = self.addresses[node.index()].bits;
        let st = &self.nodes[node.index()];
        let diff = own ^ key;
        (0..self.width)
            .rev()
            .filter(|&b| diff & (1 << b) != 0)
            .find_map(|b| st.sections[b as usize].first().map(|e| e.next_hop))
    }

    fn hello(&mut self, ctx: &mut Cx<'_>, node: NodeId) {
        let now = ctx.now();
        let stale = self.params.hello_ms * self.params.stale_periods;
        let st = &mut self.nodes[node.index()];
        for sec in st.sections.iter_mut() {
            sec.retain(|e| now.saturating_sub(e.refreshed) < stale);
        }
        st.cache.retain(|_, (_, exp)| *exp > now);
        let neighbors: Vec<NodeId> = ctx.net().open_neighbors(node).map(|(v, _)| v).collect();
        for v in neighbors {
            let adverts: Vec<Advert> = st
                .sections
                .iter()
                .enumerate()
                .filter_map(|(k, sec)| {
                    sec.iter().find(|e| e.next_hop != v).map(|e| Advert {
                        section: k as u32,
                        hops: e.hops,
                        bottleneck: e.bottleneck,
                    })
                })
                .collect();
            ctx.send(node, v, MdartMsg::Hello { adverts }, Role::Router);
        }
        ctx.set_timer(node, self.params.hello_ms, MdartTimer::Hello);
    }

    fn on_hello(&mut self, ctx: &mut Cx<'_>, node: NodeId, from: NodeId, adverts: &[Advert]) {
        let Some(cid) = ctx.net().channel_between(node, from) else { return };
        let link = ctx.net().channel(cid).normalized_balance_from(node);
        let now = ctx.now();
        let own = self.addresses[node.index()];
        let Some(j) = own.highest_diff(self.addresses[from.index()].bits) else { return };
        let m = self.params.multipath;
        let st = &mut self.nodes[node.index()];
        let mut offers: Vec<(u32, u32, f64)> = vec![(j, 1, link)];
        offers.extend(
            adverts
                .iter()
                .filter(|a| a.section > j && a.hops + 1 < MAX_HOPS)
                .map(|a| (a.section, a.hops + 1, a.bottleneck.min(link))),
        );
        for k in j..self.width {
            let sec = &mut st.sections[k as usize];
            sec.retain(|e| e.next_hop != from);
            if let Some(&(_, hops, bottleneck)) = offers.iter().find(|o| o.0 == k) {
                sec.push(SectionEntry {
                    next_hop: from,
                    hops,
                    bottleneck,
                    refreshed: now,
                });
                sec.sort_by_key(SectionEntry::rank_key);
                sec.truncate(m);
            }
        }
    }

    fn forward_control(&mut self, ctx: &mut Cx<'_>, node: NodeId, msg: MdartMsg, key: u32, role: Role) {
        match self.route_key(node, key) {
            Some(next) => {
                ctx.send(node, next, msg, role);
            }
            None => self.deliver_control(ctx, node, msg),
        }
    }

    /// Handles a control packet at the node where routing towards its key ends.
    fn deliver_control(&mut self, ctx: &mut Cx<'_>, node: NodeId, msg: MdartMsg) {
        match msg {
            MdartMsg::Register { id, addr, .. } => {
                self.nodes[node.index()].index.insert(id, addr);
            }
            MdartMsg::LookupReq {
                origin,
                origin_addr,
                target,
                lookup,
                ..
            } => {
                let addr = self.nodes[node.index()].index.get(&target).copied();
                let reply = MdartMsg::LookupRep {
                    origin,
                    origin_addr,
                    target,
                    addr,
                    lookup,
                    ttl: 0,
                };
                if node == origin {
                    self.finish_lookup(ctx, node, target, lookup, addr);
                } else {
                    self.forward_control(ctx, node, reply, origin_addr, Role::Router);
                }
            }
            MdartMsg::LookupRep {
                origin,
                target,
                addr,
                lookup,
                ..
            } => {
                if node == origin {
                    self.finish_lookup(ctx, node, target, lookup, addr);
                }
            }
            MdartMsg::Hello { .. } => {}
        }
    }

    fn finish_lookup(&mut self, ctx: &mut Cx<'_>, node: NodeId, target: NodeId, lookup: u32, addr: Option<u32>) {
        if self.lookups.get(&(node, target)).is_none_or(|l| l.id != lookup) {
            return;
        }
        let pending = self.lookups.remove(&(node, target)).expect("present");
        match addr {
            Some(a) => {
                let exp = ctx.now() + self.params.cache_ttl_ms;
                self.nodes[node.index()].cache.insert(target, (a, exp));
                for p in pending.payments {
                    ctx.resolve(p, Ok(Forwarding::HopByHop { label: Some(a as u64) }));
                }
            }
            None => {
                for p in pending.payments {
                    ctx.resolve(p, Err(FailReason::NoRoute));
                }
            }
        }
    }
}

impl RoutingProtocol for Mdart {
    type Msg = MdartMsg;
    type Timer = MdartTimer;

    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Mdart
    }

    fn on_bootstrap(&mut self, ctx: &mut Cx<'_>, node: NodeId) {
        let offset = (node.0 as u64 * 37) % self.params.hello_ms.max(1);
        ctx.set_timer(node, offset, MdartTimer::Hello);
        ctx.set_timer(node, self.params.register_at_ms, MdartTimer::Register);
    }

    fn on_message(&mut self, ctx: &mut Cx<'_>, msg: Message<MdartMsg>) {
        let node = msg.receiver;
        match msg.kind {
            MdartMsg::Hello { adverts } => self.on_hello(ctx, node, msg.sender, &adverts),
            MdartMsg::Register { id, addr, key, ttl } if ttl < MAX_HOPS => {
                let fwd = MdartMsg::Register { id, addr, key, ttl: ttl + 1 };
                self.forward_control(ctx, node, fwd, key, Role::Router);
            }
            MdartMsg::LookupReq {
                origin,
                origin_addr,
                target,
                key,
                lookup,
                ttl,
            } if ttl < MAX_HOPS => {
                let fwd = MdartMsg::LookupReq {
                    origin,
                    origin_addr,
                    target,
                    key,
                    lookup,
                    ttl: ttl + 1,
                };
                self.forward_control(ctx, node, fwd, key, Role::Router);
            }
            MdartMsg::LookupRep {
                origin,
                origin_addr,
                target,
                addr,
                lookup,
                ttl,
            } if ttl < MAX_HOPS => {
                let fwd = MdartMsg::LookupRep {
                    origin,
                    origin_addr,
                    target,
                    addr,
                    lookup,
                    ttl: ttl + 1,
                };
                self.forward_control(ctx, node, fwd, origin_addr, Role::Router);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Cx<'_>, node: NodeId, timer: MdartTimer) {
        match timer {
            MdartTimer::Hello => self.hello(ctx, node),
            MdartTimer::Register => {
                self.register(ctx, node);
                if self.params.register_every_ms > 0 {
                    ctx.set_timer(node, self.params.register_every_ms, MdartTimer::Register);
                }
            }
            MdartTimer::Republish => self.register(ctx, node),
            MdartTimer::LookupTimeout { target, lookup } => {
                if self.lookups.get(&(node, target)).is_some_and(|l| l.id == lookup) {
                    let pending = self.lookups.remove(&(node, target)).expect("present");
                    for p in pending.payments {
                        ctx.resolve(p, Err(FailReason::NoRoute));
                    }
                }
            }
        }
    }

    fn on_link_down(&mut self, ctx: &mut Cx<'_>, node: NodeId, neighbor: NodeId) {
        for sec in self.nodes[node.index()].sections.iter_mut() {
            sec.retain(|e| e.next_hop != neighbor);
        }
        let now = ctx.now();
        if self.params.repair && self.repaired_at != Some(now) {
            self.repaired_at = Some(now);
            self.repair(ctx);
        }
    }

    fn prepare(&mut self, ctx: &mut Cx<'_>, req: &RouteRequest) -> Prepared {
        let (src, dst) = (req.src, req.dst);
        if src == dst {
            return Prepared::Ready(Forwarding::SourceRoute(vec![src]));
        }
        let now = ctx.now();
        if let Some(&(addr, exp)) = self.nodes[src.index()].cache.get(&dst) {
            if exp > now {
                return Prepared::Ready(Forwarding::HopByHop { label: Some(addr as u64) });
            }
        }
        if let Some(l) = self.lookups.get_mut(&(src, dst)) {
            l.payments.push(req.payment);
            return Prepared::Pending;
        }
        let key = dht_key(dst, self.width);
        let Some(next) = self.route_key(src, key) else {
            // anchored here
            return match self.nodes[src.index()].index.get(&dst) {
                Some(&a) => Prepared::Ready(Forwarding::HopByHop { label: Some(a as u64) }),
                None => Prepared::Failed(FailReason::NoRoute),
            };
        };
        self.next_lookup += 1;
        let lookup = self.next_lookup;
        self.lookups.insert(
            (src, dst),
            Lookup {
                id: lookup,
                payments: vec![req.payment],
            },
        );
        let msg = MdartMsg::LookupReq {
            origin: src,
            origin_addr: self.addresses[src.index()].bits,
            target: dst,
            key,
            lookup,
            ttl: 0,
        };
        ctx.send(src, next, msg, Role::Endpoint);
        ctx.set_timer(src, self.params.lookup_timeout_ms, MdartTimer::LookupTimeout { target: dst, lookup });
        Prepared::Pending
    }

    fn next_hop(&mut self, ctx: &mut Cx<'_>, node: NodeId, flow: &Flow<'_>) -> Result<NodeId, FailReason> {
        let dest = flow.label.ok_or(FailReason::NoRoute)? as u32;
        let own = self.addresses[node.index()];
        let k = own.highest_diff(dest).ok_or(FailReason::NoRoute)?;
        let sec = &self.nodes[node.index()].sections[k as usize];
        if sec.is_empty() {
            return Err(FailReason::NoRoute);
        }
        sec.iter()
            .take(2)
            .find(|e| {
                !flow.path.contains(&e.next_hop)
                    && ctx.net().outbound_balance(node, e.next_hop).is_some_and(|b| b >= flow.amount)
            })
            .map(|e| e.next_hop)
            .ok_or(FailReason::InsufficientBalance)
    }

    fn footprint(&self, node: NodeId, now: SimTime) -> Footprint {
        let st = &self.nodes[node.index()];
        let routing = self.routing_entries(node);
        let cached = st.cache.values().filter(|(_, exp)| *exp > now).count();
        Footprint {
            entries: (routing + st.index.len() + cached) as f64,
            routing_entries: routing as f64,
        }
    }
}
