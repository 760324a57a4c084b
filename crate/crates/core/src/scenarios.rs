//! Experiment cells: topology, behavior assignment and payment workload.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::engine::SizeModel;
use crate::pcn::topology::log_uniform;
use crate::pcn::{generate_topology, Amount, Behavior, Network, NodeId, PcnError, TopologyKind, TopologyParams};
use crate::protocols::{ProtocolKind, ProtocolParams};
use crate::SimTime;

const BEHAVIOR_STREAM: u64 = 2;
const WORKLOAD_STREAM: u64 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Topology(#[from] PcnError),
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident, $err:literal, { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $s),+
                }
            }

            pub fn valid_names() -> String {
                [$($s),+].join("|")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| format!(concat!("unknown ", $err, " `{}` (valid: {})"), s, $name::valid_names()))
            }
        }
    };
}

named_enum!(ScenarioKind, "scenario", {
    Basic => "basic",
    Faulty => "faulty",
    Malicious => "malicious",
    LowParticipation => "low_participation",
    Hub => "hub",
    Commercial => "commercial",
});

named_enum!(
    /// Network size presets.
    SizePreset, "size", {
    Sm => "sm",
    Md => "md",
    Lg => "lg",
});

impl SizePreset {
    pub fn nodes(self) -> usize {
        match self {
            SizePreset::Sm => 30,
            SizePreset::Md => 200,
            SizePreset::Lg => 1000,
        }
    }

    pub fn default_payments(self) -> usize {
        match self {
            SizePreset::Sm | SizePreset::Md => 10_000,
            SizePreset::Lg => 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fractions {
    pub faulty: f64,
    pub malicious: f64,
    pub nonparticipating: f64,
    /// Share of nodes flagged as merchants.
    pub merchant_fraction: f64,
    /// Share of payments addressed to a merchant.
    pub merchant_share: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Fractions {
            faulty: 0.10,
            malicious: 0.10,
            nonparticipating: 0.50,
            merchant_fraction: 0.05,
            merchant_share: 0.80,
        }
    }
}

/// One experiment cell. Also the on-disk config format; every field is optional there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub size: SizePreset,
    pub protocol: ProtocolKind,
    /// Seed of this cell; for a matrix, the first of `seeds` consecutive seeds.
    pub seed: u64,
    pub seeds: u64,
    /// `None` picks the size preset's default.
    pub payments: Option<usize>,
    /// Mean payment arrivals per second.
    pub rate: f64,
    pub amount_min: Amount,
    pub amount_max: Amount,
    pub warmup_ms: u64,
    pub drain_ms: u64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub channel_samples: usize,
    pub fractions: Fractions,
    pub topology: TopologyParams,
    pub packet_sizes: SizeModel,
    pub protocols: ProtocolParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::Basic,
            size: SizePreset::Sm,
            protocol: ProtocolKind::Basic,
            seed: 1,
            seeds: 1,
            payments: None,
            rate: 50.0,
            amount_min: 10,
            amount_max: 10_000,
            warmup_ms: 10_000,
            drain_ms: 10_000,
            latency_min_ms: 10,
            latency_max_ms: 100,
            channel_samples: 10,
            fractions: Fractions::default(),
            topology: TopologyParams::default(),
            packet_sizes: SizeModel::default(),
            protocols: ProtocolParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn payment_count(&self) -> usize {
        self.payments.unwrap_or_else(|| self.size.default_payments())
    }

    /// Nominal length of the arrival window.
    pub fn workload_ms(&self) -> u64 {
        (self.payment_count() as f64 / self.rate * 1000.0).round() as u64
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let f = &self.fractions;
        for (name, v) in [
            ("faulty", f.faulty),
            ("malicious", f.malicious),
            ("nonparticipating", f.nonparticipating),
            ("merchant_fraction", f.merchant_fraction),
            ("merchant_share", f.merchant_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ScenarioError::Invalid(format!("fraction {name}={v} outside [0, 1]")));
            }
        }
        if !self.rate.is_finite() || self.rate <= 0.0 {
            return Err(ScenarioError::Invalid(format!("rate must be positive, got {}", self.rate)));
        }
        if self.amount_min == 0 || self.amount_min > self.amount_max {
            return Err(ScenarioError::Invalid(format!(
                "bad amount range [{}, {}]",
                self.amount_min, self.amount_max
            )));
        }
        if self.latency_min_ms > self.latency_max_ms {
            return Err(ScenarioError::Invalid("latency_min_ms exceeds latency_max_ms".into()));
        }
        if self.seeds == 0 {
            return Err(ScenarioError::Invalid("seeds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaymentSpec {
    pub at: SimTime,
    pub src: NodeId,
    pub dst: NodeId,
    pub amount: Amount,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub network: Network,
    pub workload: Vec<PaymentSpec>,
    pub window_start: SimTime,
    pub window_end: SimTime,
    pub end: SimTime,
}

impl Scenario {
    pub fn count(&self, behavior: Behavior) -> usize {
        self.network.nodes().iter().filter(|n| n.behavior == behavior).count()
    }
}

fn round_count(frac: f64, n: usize) -> usize {
    (frac * n as f64).round() as usize
}

/// Builds the network, adversaries and payment stream of a cell. Independent of the
/// protocol, so all protocols in a cell see the same payments.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    cfg.validate()?;
    let n = cfg.size.nodes();
    let kind = match cfg.scenario {
        ScenarioKind::Hub => TopologyKind::Hub,
        _ => TopologyKind::Random,
    };
    let mut net = generate_topology(kind, n, &cfg.topology, cfg.seed)?;

    let window_start = SimTime(cfg.warmup_ms);
    let window_end = window_start + cfg.workload_ms();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BEHAVIOR_STREAM);
    let (behavior, frac) = match cfg.scenario {
        ScenarioKind::Faulty => (Some(Behavior::Faulty), cfg.fractions.faulty),
        ScenarioKind::Malicious => (Some(Behavior::Malicious), cfg.fractions.malicious),
        ScenarioKind::LowParticipation => (Some(Behavior::NonParticipating), cfg.fractions.nonparticipating),
        _ => (None, 0.0),
    };
    if let Some(behavior) = behavior {
        let count = round_count(frac, n);
        if n - count < 2 {
            return Err(ScenarioError::Invalid(format!(
                "{count} of {n} nodes would be {behavior:?}, leaving fewer than 2 honest endpoints"
            )));
        }
        let mut chosen = index::sample(&mut rng, n, count).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let node = net.node_mut(NodeId(i as u32));
            node.behavior = behavior;
            if behavior == Behavior::Faulty {
                node.fail_time = Some(SimTime(rng.random_range(window_start.0..=window_end.0)));
            }
        }
    }
    if cfg.scenario == ScenarioKind::Commercial {
        let count = round_count(cfg.fractions.merchant_fraction, n).max(1);
        let mut chosen = index::sample(&mut rng, n, count).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            net.node_mut(NodeId(i as u32)).is_merchant = true;
        }
    }

    let honest: Vec<NodeId> = net
        .nodes()
        .iter()
        .filter(|n| n.behavior == Behavior::Honest)
        .map(|n| n.id)
        .collect();
    let merchants: Vec<NodeId> = net.nodes().iter().filter(|n| n.is_merchant).map(|n| n.id).collect();
    let others: Vec<NodeId> = honest.iter().copied().filter(|id| !net.node(*id).is_merchant).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(WORKLOAD_STREAM);
    let gap = Exp::new(cfg.rate).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let mut t = 0.0f64;
    let mut workload = Vec::with_capacity(cfg.payment_count());
    for _ in 0..cfg.payment_count() {
        t += gap.sample(&mut rng);
        let at = window_start + (t * 1000.0).round() as u64;
        let src = *honest.choose(&mut rng).expect("at least two honest nodes");
        let to_merchant = !merchants.is_empty() && rng.random_bool(cfg.fractions.merchant_share);
        let pool = if to_merchant {
            &merchants
        } else if merchants.is_empty() {
            &honest
        } else {
            &others
        };
        let dst = loop {
            let d = *pool.choose(&mut rng).expect("non-empty destination pool");
            if d != src || pool.len() == 1 {
                break d;
            }
        };
        let amount = log_uniform(&mut rng, cfg.amount_min, cfg.amount_max);
        workload.push(PaymentSpec { at, src, dst, amount });
    }
    let last = workload.last().map_or(window_end, |p| p.at.max(window_end));
    Ok(Scenario {
        network: net,
        workload,
        window_start,
        window_end,
        end: last + cfg.drain_ms,
    })
}

/// Every scenario × size × protocol × seed, in that nesting order.
pub fn cell_matrix(base: &ScenarioConfig) -> Vec<ScenarioConfig> {
    let mut cells = Vec::new();
    for &scenario in ScenarioKind::ALL {
        for &size in SizePreset::ALL {
            for protocol in ProtocolKind::ALL {
                for seed in base.seed..base.seed + base.seeds {
                    cells.push(ScenarioConfig {
                        scenario,
                        size,
                        protocol,
                        seed,
                        seeds: 1,
                        ..base.clone()
                    });
                }
            }
        }
    }
    cells
}
