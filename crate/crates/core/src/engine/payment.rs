use serde::{Deserialize, Serialize};

use crate::pcn::{Amount, Behavior, ChannelId, Network, NodeId};
use crate::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PaymentId(pub u32);

impl PaymentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailReason {
    InsufficientBalance,
    NodeFailed,
    MaliciousDrop,
    Refused,
    NoRoute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaymentStatus {
    Pending,
    Succeeded,
    Failed(FailReason),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Payment {
    pub id: PaymentId,
    pub src: NodeId,
    pub dst: NodeId,
    pub amount: Amount,
    pub created_at: SimTime,
    pub completed_at: Option<SimTime>,
    pub status: PaymentStatus,
    /// Sum of intermediary fees; set on success only.
    pub fee_paid: Amount,
    /// Route length in channels; set on success only.
    pub hops: u32,
}

impl Payment {
    pub fn new(id: PaymentId, src: NodeId, dst: NodeId, amount: Amount, created_at: SimTime) -> Self {
        Payment {
            id,
            src,
            dst,
            amount,
            created_at,
            completed_at: None,
            status: PaymentStatus::Pending,
            fee_paid: 0,
            hops: 0,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == PaymentStatus::Succeeded
    }

    pub(crate) fn fail(&mut self, reason: FailReason, at: SimTime) {
        debug_assert_eq!(self.status, PaymentStatus::Pending);
        self.status = PaymentStatus::Failed(reason);
        self.completed_at = Some(at);
    }
}

/// Where along the route a payment attempt stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HopFailure {
    pub reason: FailReason,
    /// Route index of the node at which the attempt stopped. For `Refused` and
    /// `MaliciousDrop` this is the misbehaving intermediary; otherwise it is the node
    /// that could not pass the lock on.
    pub node_index: usize,
}

/// Per-hop forwarded amounts: `amounts[i]` crosses the channel `route[i] -> route[i + 1]`.
pub(crate) fn hop_amounts(net: &Network, route: &[NodeId], amount: Amount) -> Option<(Vec<ChannelId>, Vec<Amount>)> {
    let hops = route.len().checked_sub(1)?;
    let mut channels = Vec::with_capacity(hops);
    for w in route.windows(2) {
        channels.push(net.channel_between(w[0], w[1])?);
    }
    let mut amounts = vec![0; hops];
    let mut carried = amount;
    for i in (0..hops).rev() {
        amounts[i] = carried;
        if i > 0 {
            let policy = net.channel(channels[i]).policy_from(route[i]);
            carried = carried.checked_add(policy.fee_for(carried))?;
        }
    }
    Some((channels, amounts))
}

/// Two-phase execution of `payment` along `route`.
///
/// The lock phase walks forward reserving each hop's amount (the payment amount plus all
/// downstream fees); the settle phase credits every reservation. Any failure releases all
/// reservations made so far, leaving every balance exactly as it was before the call.
pub fn execute_payment(
    net: &mut Network,
    route: &[NodeId],
    payment: &mut Payment,
    now: SimTime,
) -> Result<(), HopFailure> {
    let no_route = HopFailure {
        reason: FailReason::NoRoute,
        node_index: 0,
    };
    if route.first() != Some(&payment.src) || route.last() != Some(&payment.dst) {
        payment.fail(FailReason::NoRoute, now);
        return Err(no_route);
    }
    if route.len() == 1 {
        payment.status = PaymentStatus::Succeeded;
        payment.completed_at = Some(now);
        payment.fee_paid = 0;
        payment.hops = 0;
        return Ok(());
    }
    let Some((channels, amounts)) = hop_amounts(net, route, payment.amount) else {
        payment.fail(FailReason::NoRoute, now);
        return Err(no_route);
    };
    let last = route.len() - 1;

    let mut locked = 0;
    let mut failure = None;
    for i in 0..channels.len() {
        let from = route[i];
        let to = route[i + 1];
        let ch = net.channel(channels[i]);
        if !ch.open || net.node(from).failed || net.node(to).failed {
            failure = Some(HopFailure {
                reason: FailReason::NodeFailed,
                node_index: i,
            });
            break;
        }
        if i + 1 < last && net.node(to).behavior == Behavior::NonParticipating {
            failure = Some(HopFailure {
                reason: FailReason::Refused,
                node_index: i + 1,
            });
            break;
        }
        if net.channel_mut(channels[i]).reserve(from, amounts[i]).is_err() {
            failure = Some(HopFailure {
                reason: FailReason::InsufficientBalance,
                node_index: i,
            });
            break;
        }
        locked += 1;
    }

    if failure.is_none() {
        if let Some(j) = (1..last).find(|&j| net.node(route[j]).behavior == Behavior::Malicious) {
            failure = Some(HopFailure {
                reason: FailReason::MaliciousDrop,
                node_index: j,
            });
        }
    }

    if let Some(f) = failure {
        for i in (0..locked).rev() {
            net.channel_mut(channels[i]).release(route[i], amounts[i]);
        }
        payment.fail(f.reason, now);
        return Err(f);
    }

    for i in 0..channels.len() {
        net.channel_mut(channels[i]).commit(route[i], amounts[i]);
    }
    payment.status = PaymentStatus::Succeeded;
    payment.completed_at = Some(now);
    payment.fee_paid = amounts[0] - payment.amount;
    payment.hops = channels.len() as u32;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcn::{channel_fee, FeePolicy};
    use proptest::prelude::*;

    fn line(n: u32, balance: Amount, policy: FeePolicy) -> Network {
        let mut net = Network::with_nodes(n as usize);
        for i in 0..n - 1 {
            net.connect(NodeId(i), NodeId(i + 1), balance, policy);
        }
        net
    }

    fn balances(net: &Network) -> Vec<(Amount, Amount)> {
        net.channels().iter().map(|c| (c.balance_a, c.balance_b)).collect()
    }

    fn route(ids: &[u32]) -> Vec<NodeId> {
        ids.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn three_hop_fee_accumulation() {
        // base 1 + 1% so that each intermediary earns 11 on ~1000
        let policy = FeePolicy::new(1, 10_000);
        let mut net = line(4, 5_000, policy);
        let before = balances(&net);
        let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(3), 1000, SimTime(0));
        execute_payment(&mut net, &route(&[0, 1, 2, 3]), &mut p, SimTime(5)).unwrap();

        // hand computation with the fee formula
        let fee_c = channel_fee(policy, 1000).unwrap();
        let fee_b = channel_fee(policy, 1000 + fee_c).unwrap();
        assert_eq!((fee_b, fee_c), (11, 11));

        let after = balances(&net);
        assert_eq!(before[0].0 - after[0].0, 1022); // A debited
        let b_net = (after[0].1 - before[0].1) as i64 - (before[1].0 - after[1].0) as i64;
        let c_net = (after[1].1 - before[1].1) as i64 - (before[2].0 - after[2].0) as i64;
        assert_eq!((b_net, c_net), (11, 11));
        assert_eq!(after[2].1 - before[2].1, 1000); // D credited
        assert_eq!(p.status, PaymentStatus::Succeeded);
        assert_eq!((p.fee_paid, p.hops), (22, 3));
    }

    #[test]
    fn insufficient_balance_mid_route_unwinds() {
        let mut net = line(4, 5_000, FeePolicy::ZERO);
        net.channel_mut(ChannelId(2)).balance_a = 10;
        net.channel_mut(ChannelId(2)).capacity = 5_010;
        let before = balances(&net);
        let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(3), 1000, SimTime(0));
        let err = execute_payment(&mut net, &route(&[0, 1, 2, 3]), &mut p, SimTime(0)).unwrap_err();
        assert_eq!(err, HopFailure { reason: FailReason::InsufficientBalance, node_index: 2 });
        assert_eq!(balances(&net), before);
        assert_eq!(p.status, PaymentStatus::Failed(FailReason::InsufficientBalance));
    }

    #[test]
    fn identity_route() {
        let mut net = line(2, 10, FeePolicy::ZERO);
        let before = balances(&net);
        let mut p = Payment::new(PaymentId(0), NodeId(1), NodeId(1), 5, SimTime(0));
        execute_payment(&mut net, &route(&[1]), &mut p, SimTime(0)).unwrap();
        assert_eq!((p.status, p.hops, p.fee_paid), (PaymentStatus::Succeeded, 0, 0));
        assert_eq!(balances(&net), before);
    }

    #[test]
    fn adversarial_intermediaries() {
        for (behavior, reason) in [
            (Behavior::Malicious, FailReason::MaliciousDrop),
            (Behavior::NonParticipating, FailReason::Refused),
        ] {
            let mut net = line(4, 5_000, FeePolicy::new(1, 100));
            net.node_mut(NodeId(2)).behavior = behavior;
            let before = balances(&net);
            let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(3), 700, SimTime(0));
            let err = execute_payment(&mut net, &route(&[0, 1, 2, 3]), &mut p, SimTime(0)).unwrap_err();
            assert_eq!(err, HopFailure { reason, node_index: 2 });
            assert_eq!(balances(&net), before);
        }
        // Adversaries acting as the destination are still paid.
        let mut net = line(2, 5_000, FeePolicy::ZERO);
        net.node_mut(NodeId(1)).behavior = Behavior::Malicious;
        let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(1), 700, SimTime(0));
        assert!(execute_payment(&mut net, &route(&[0, 1]), &mut p, SimTime(0)).is_ok());
    }

    #[test]
    fn failed_node_and_broken_routes() {
        let mut net = line(3, 5_000, FeePolicy::ZERO);
        net.fail_node(NodeId(1));
        let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(2), 10, SimTime(0));
        let err = execute_payment(&mut net, &route(&[0, 1, 2]), &mut p, SimTime(0)).unwrap_err();
        assert_eq!(err.reason, FailReason::NodeFailed);

        let mut net = line(3, 5_000, FeePolicy::ZERO);
        let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(2), 10, SimTime(0));
        let err = execute_payment(&mut net, &route(&[0, 2]), &mut p, SimTime(0)).unwrap_err();
        assert_eq!(err.reason, FailReason::NoRoute);
    }

    proptest! {
        // Atomicity with a failure injected at every hop position.
        #[test]
        fn all_or_nothing(
            len in 2u32..7,
            fail_at in 0usize..6,
            kind in 0u8..3,
            amount in 1u64..3_000,
        ) {
            let mut net = line(len, 4_000, FeePolicy::new(2, 5_000));
            let hops = (len - 1) as usize;
            let fail_at = fail_at % hops;
            match kind {
                0 => {
                    let ch = net.channel_mut(ChannelId(fail_at as u32));
                    ch.balance_a = 0;
                    ch.capacity = ch.balance_b;
                }
                1 if fail_at + 1 < hops => net.node_mut(NodeId(fail_at as u32 + 1)).behavior = Behavior::Malicious,
                _ => { net.fail_node(NodeId(fail_at as u32 + 1)); }
            }
            let before = balances(&net);
            let ids: Vec<u32> = (0..len).collect();
            let mut p = Payment::new(PaymentId(0), NodeId(0), NodeId(len - 1), amount, SimTime(0));
            let result = execute_payment(&mut net, &route(&ids), &mut p, SimTime(0));
            let after = balances(&net);
            match result {
                Err(_) => prop_assert_eq!(&after, &before),
                Ok(()) => {
                    for (b, a) in before.iter().zip(&after) {
                        prop_assert!(a != b);
                    }
                }
            }
            for ch in net.channels() {
                prop_assert!(ch.is_conserved());
            }
        }
    }
}
