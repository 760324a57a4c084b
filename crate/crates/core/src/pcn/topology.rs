use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Amount, FeePolicy, Network, NodeId, PcnError};

const TOPOLOGY_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Erdős–Rényi graph with the requested mean degree, patched until connected.
    Random,
    /// Preferential attachment; a few nodes end up with very high degree.
    Hub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyParams {
    pub mean_degree: f64,
    /// Initial fully meshed nodes of a hub topology.
    pub hubs: usize,
    /// Channels opened by each node joining a hub topology.
    pub attachment: usize,
    pub capacity_min: Amount,
    pub capacity_max: Amount,
    pub base_fee: Amount,
    pub fee_rate_ppm: u64,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            mean_degree: 4.0,
            hubs: 5,
            attachment: 2,
            capacity_min: 10_000,
            capacity_max: 1_000_000,
            base_fee: 1,
            fee_rate_ppm: 1_000,
        }
    }
}

impl TopologyParams {
    fn policy(&self) -> FeePolicy {
        FeePolicy::new(self.base_fee, self.fee_rate_ppm)
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Builds a connected network. Pure in all of its arguments, seed included.
pub fn generate_topology(
    kind: TopologyKind,
    n: usize,
    params: &TopologyParams,
    seed: u64,
) -> Result<Network, PcnError> {
    if n < 2 {
        return Err(PcnError::InvalidArgument(format!("need at least 2 nodes, got {n}")));
    }
    if params.capacity_min == 0 || params.capacity_min > params.capacity_max {
        return Err(PcnError::InvalidArgument(format!(
            "bad capacity range [{}, {}]",
            params.capacity_min, params.capacity_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TOPOLOGY_STREAM);

    let edges = match kind {
        TopologyKind::Random => random_edges(n, params.mean_degree, &mut rng)?,
        TopologyKind::Hub => preferential_edges(n, params.hubs, params.attachment, &mut rng)?,
    };

    let mut net = Network::with_nodes(n);
    let policy = params.policy();
    for (a, b) in edges {
        let capacity = log_uniform(&mut rng, params.capacity_min, params.capacity_max);
        let half = capacity / 2;
        net.add_channel(NodeId(a as u32), NodeId(b as u32), half, capacity - half, policy, policy)?;
    }
    debug_assert!(net.is_connected());
    Ok(net)
}

/// Integer drawn log-uniformly from `[lo, hi]`.
pub(crate) fn log_uniform<R: Rng>(rng: &mut R, lo: Amount, hi: Amount) -> Amount {
    if lo >= hi {
        return lo;
    }
    let (l, h) = ((lo as f64).ln(), (hi as f64).ln());
    let x = rng.random_range(l..h).exp().round() as Amount;
    x.clamp(lo, hi)
}

fn random_edges<R: Rng>(n: usize, mean_degree: f64, rng: &mut R) -> Result<Vec<(usize, usize)>, PcnError> {
    if mean_degree.is_nan() || mean_degree <= 0.0 || mean_degree >= n as f64 {
        return Err(PcnError::InvalidArgument(format!(
            "mean degree {mean_degree} unattainable with {n} nodes"
        )));
    }
    let p = (mean_degree / (n - 1) as f64).min(1.0);
    let mut edges = Vec::new();
    let mut sets = DisjointSet::new(n);
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
                sets.union(a, b);
            }
        }
    }

    // Patch: chain the components together through random members.
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for v in 0..n {
        let root = sets.find(v);
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Vec::new());
        }
        components[slot[root]].push(v);
    }
    for pair in components.windows(2) {
        let a = pair[0][rng.random_range(0..pair[0].len())];
        let b = pair[1][rng.random_range(0..pair[1].len())];
        edges.push((a.min(b), a.max(b)));
    }
    Ok(edges)
}

/// Hubs start fully meshed. Each joiner opens one channel to a hub and `m - 1` more
/// to any earlier node, both picked with probability proportional to degree.
fn preferential_edges<R: Rng>(n: usize, hubs: usize, m: usize, rng: &mut R) -> Result<Vec<(usize, usize)>, PcnError> {
    if hubs == 0 || hubs >= n {
        return Err(PcnError::InvalidArgument(format!("hub count {hubs} unattainable with {n} nodes")));
    }
    if m == 0 || m > hubs {
        return Err(PcnError::InvalidArgument(format!(
            "attachment degree {m} unattainable with {n} nodes and {hubs} hubs"
        )));
    }
    let mut edges = Vec::new();
    // Each node appears once per incident edge, so uniform picks are degree-proportional.
    let mut endpoints: Vec<usize> = Vec::new();
    let mut hub_endpoints: Vec<usize> = Vec::new();
    for a in 0..hubs {
        for b in a + 1..hubs {
            edges.push((a, b));
            endpoints.extend([a, b]);
            hub_endpoints.extend([a, b]);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for v in hubs..n {
        targets.clear();
        let hub = if hub_endpoints.is_empty() {
            0
        } else {
            hub_endpoints[rng.random_range(0..hub_endpoints.len())]
        };
        targets.push(hub);
        while targets.len() < m {
            let t = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        targets.sort_unstable();
        for &t in &targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
            if t < hubs {
                hub_endpoints.push(t);
            }
        }
    }
    edges.shuffle(rng);
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Independent union-find connectivity oracle.
    fn connected_by_union_find(net: &Network) -> bool {
        let mut parent: Vec<usize> = (0..net.node_count()).collect();
        fn root(p: &mut [usize], x: usize) -> usize {
            if p[x] == x {
                x
            } else {
                let r = root(p, p[x]);
                p[x] = r;
                r
            }
        }
        for ch in net.channels() {
            let (ra, rb) = (root(&mut parent, ch.a.index()), root(&mut parent, ch.b.index()));
            parent[ra] = rb;
        }
        let r0 = root(&mut parent, 0);
        (0..net.node_count()).all(|v| root(&mut parent, v) == r0)
    }

    fn edge_set(net: &Network) -> BTreeSet<(u32, u32, u64, u64)> {
        net.channels()
            .iter()
            .map(|c| (c.a.0, c.b.0, c.balance_a, c.balance_b))
            .collect()
    }

    #[test]
    fn random_30_nodes_degree_4() {
        let net = generate_topology(TopologyKind::Random, 30, &TopologyParams::default(), 7).unwrap();
        assert_eq!(net.node_count(), 30);
        assert!(connected_by_union_find(&net));
        let c = net.channel_count();
        assert!((40..=85).contains(&c), "expected about 60 channels, got {c}");
    }

    #[test]
    fn hub_topology_has_dominant_hub() {
        let params = TopologyParams {
            hubs: 1,
            attachment: 1,
            ..TopologyParams::default()
        };
        let net = generate_topology(TopologyKind::Hub, 30, &params, 1).unwrap();
        assert!(connected_by_union_find(&net));
        let mut degrees: Vec<usize> = net.node_ids().map(|v| net.open_degree(v)).collect();
        degrees.sort_unstable();
        let median = degrees[degrees.len() / 2];
        let max = *degrees.last().unwrap();
        assert!(max >= 5 * median && max > median, "max {max}, median {median}");
    }

    #[test]
    fn smallest_connected_graph() {
        let params = TopologyParams {
            mean_degree: 1.0,
            ..TopologyParams::default()
        };
        let net = generate_topology(TopologyKind::Random, 2, &params, 0).unwrap();
        assert_eq!(net.channel_count(), 1);
        let ch = &net.channels()[0];
        assert_eq!((ch.a, ch.b), (NodeId(0), NodeId(1)));
    }

    #[test]
    fn invalid_arguments() {
        let p = TopologyParams::default();
        assert!(generate_topology(TopologyKind::Random, 1, &p, 0).is_err());
        let dense = TopologyParams {
            mean_degree: 5.0,
            ..p.clone()
        };
        assert!(generate_topology(TopologyKind::Random, 5, &dense, 0).is_err());
        let fat_hub = TopologyParams { attachment: 6, ..p.clone() };
        assert!(generate_topology(TopologyKind::Hub, 30, &fat_hub, 0).is_err());
        let all_hubs = TopologyParams { hubs: 5, ..p };
        assert!(generate_topology(TopologyKind::Hub, 5, &all_hubs, 0).is_err());
    }

    #[test]
    fn default_hubs_dominate() {
        let p = TopologyParams::default();
        let net = generate_topology(TopologyKind::Hub, 200, &p, 1).unwrap();
        let hub_degree: usize = (0..p.hubs).map(|v| net.open_degree(NodeId(v as u32))).sum();
        // every joiner opens one of its channels to a hub
        assert!(hub_degree >= 200 - p.hubs);
        let mut rest: Vec<usize> = (p.hubs..200).map(|v| net.open_degree(NodeId(v as u32))).collect();
        rest.sort_unstable();
        let min_hub = (0..p.hubs).map(|v| net.open_degree(NodeId(v as u32))).min().unwrap();
        assert!(min_hub > rest[rest.len() / 2]);
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed() {
        let p = TopologyParams::default();
        for kind in [TopologyKind::Random, TopologyKind::Hub] {
            let a = generate_topology(kind, 200, &p, 42).unwrap();
            let b = generate_topology(kind, 200, &p, 42).unwrap();
            assert_eq!(edge_set(&a), edge_set(&b));
            let c = generate_topology(kind, 200, &p, 43).unwrap();
            assert_ne!(edge_set(&a), edge_set(&c));
        }
    }

    #[test]
    fn capacities_split_evenly_within_range() {
        let p = TopologyParams::default();
        let net = generate_topology(TopologyKind::Random, 200, &p, 3).unwrap();
        for ch in net.channels() {
            assert!((p.capacity_min..=p.capacity_max).contains(&ch.capacity));
            assert!(ch.balance_a.abs_diff(ch.balance_b) <= 1);
            assert!(ch.is_conserved());
        }
    }

    #[test]
    fn generated_networks_pass_bfs_connectivity() {
        let p = TopologyParams::default();
        for seed in 0..20 {
            for kind in [TopologyKind::Random, TopologyKind::Hub] {
                let net = generate_topology(kind, 60, &p, seed).unwrap();
                assert!(net.is_connected());
                assert!(connected_by_union_find(&net));
            }
        }
    }
}
