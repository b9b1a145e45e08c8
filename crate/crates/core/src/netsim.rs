//! Deterministic discrete-event engine and the link layer it drives.
//!
//! Events run in `(time_us, seq)` order, `seq` being the insertion counter,
//! so two runs fed the same inputs process the same events in the same
//! order. [`Network`] tracks link and end-system liveness and per-link
//! frame accounting on top of a [`Simulator`].

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{EndpointKind, LinkId, Topology, VNodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot schedule at {at_us} µs, clock is already at {now_us} µs")]
    TimeViolation { at_us: u64, now_us: u64 },
    #[error("invalid reference: {0}")]
    InvalidReference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EventKind {
    FrameArrival,
    HeartbeatDue,
    CommandDelivery,
    LinkFail,
    LinkRestore,
    NodeFail,
    NodeRestore,
    AttackInject,
    TimerExpiry,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Implemented by simulation payloads so the engine can trace them.
pub trait EventPayload {
    fn kind(&self) -> EventKind;
    fn subject(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now_us: u64,
}

impl SimClock {
    pub fn now_us(&self) -> u64 {
        self.now_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time_us: u64,
    pub seq: u64,
    pub payload: P,
}

/// One processed event, as exported in trace files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time_us: u64,
    pub seq: u64,
    pub kind: EventKind,
    pub subject: String,
}

struct Scheduled<P> {
    time_us: u64,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Scheduled<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.time_us, self.seq) == (other.time_us, other.seq)
    }
}

impl<P> Eq for Scheduled<P> {}

impl<P> PartialOrd for Scheduled<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Scheduled<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time_us, self.seq).cmp(&(other.time_us, other.seq))
    }
}

pub struct Simulator<P> {
    clock: SimClock,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled<P>>>,
    cancelled: BTreeSet<u64>,
    trace: Vec<TraceRecord>,
}

impl<P: EventPayload> Default for Simulator<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventPayload> Simulator<P> {
    pub fn new() -> Self {
        Self {
            clock: SimClock::default(),
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            trace: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now_us
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn schedule(&mut self, at_us: u64, payload: P) -> Result<EventHandle, SimError> {
        if at_us < self.clock.now_us {
            return Err(SimError::TimeViolation { at_us, now_us: self.clock.now_us });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { time_us: at_us, seq, payload }));
        Ok(EventHandle(seq))
    }

    pub fn schedule_in(&mut self, delay_us: u64, payload: P) -> EventHandle {
        let at = self.clock.now_us.saturating_add(delay_us);
        self.schedule(at, payload).expect("relative schedule is never in the past")
    }

    /// Returns false if the event already ran or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        let queued = self.queue.iter().any(|Reverse(s)| s.seq == handle.0);
        queued && self.cancelled.insert(handle.0)
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    /// Time of the next live event, if any.
    pub fn peek_time(&mut self) -> Option<u64> {
        while let Some(Reverse(head)) = self.queue.peek() {
            if self.cancelled.remove(&head.seq) {
                self.queue.pop();
                continue;
            }
            return Some(head.time_us);
        }
        None
    }

    /// Pops the next event due at or before `t_end`, advancing the clock
    /// and appending it to the trace.
    pub fn next_event(&mut self, t_end: u64) -> Option<Event<P>> {
        let due = self.peek_time()?;
        if due > t_end {
            return None;
        }
        let Reverse(s) = self.queue.pop().expect("peeked");
        debug_assert!(s.time_us >= self.clock.now_us);
        self.clock.now_us = s.time_us;
        self.trace.push(TraceRecord {
            time_us: s.time_us,
            seq: s.seq,
            kind: s.payload.kind(),
            subject: s.payload.subject(),
        });
        Some(Event { time_us: s.time_us, seq: s.seq, payload: s.payload })
    }

    /// Advance the clock to `t_end` once all due events are processed.
    pub fn advance_to(&mut self, t_end: u64) {
        self.clock.now_us = self.clock.now_us.max(t_end);
    }

    /// Process every event due at or before `t_end` and return the trace of
    /// what ran in this call.
    pub fn run_until(&mut self, t_end: u64, mut handler: impl FnMut(&mut Self, Event<P>)) -> Vec<TraceRecord> {
        let start = self.trace.len();
        while let Some(ev) = self.next_event(t_end) {
            handler(self, ev);
        }
        self.advance_to(t_end);
        self.trace[start..].to_vec()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}

/// Write a trace as line-delimited JSON records.
pub fn write_trace(trace: &[TraceRecord], out: &mut impl std::io::Write) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    LinkFail(LinkId),
    LinkRestore(LinkId),
    NodeFail(VNodeId),
    NodeRestore(VNodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinkState {
    pub link: LinkId,
    pub up: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl LinkCounters {
    pub fn in_flight(&self) -> u64 {
        self.sent - self.delivered - self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmit {
    Scheduled { arrival_us: u64 },
    Dropped,
}

struct LinkRuntime {
    ends: (usize, usize),
    latency_us: u64,
    up: bool,
    counters: LinkCounters,
}

/// Link-layer state: which links and end systems are up, and per-link frame
/// accounting. A link carries traffic only while it and both of its ends
/// are up.
pub struct Network {
    names: Vec<String>,
    kinds: Vec<EndpointKind>,
    index: BTreeMap<String, usize>,
    endpoint_up: Vec<bool>,
    links: Vec<LinkRuntime>,
    adjacency: Vec<Vec<(LinkId, usize)>>,
}

impl Network {
    /// Builds the link layer for a validated topology.
    pub fn new(t: &Topology) -> Self {
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for b in &t.bridges {
            names.push(b.to_string());
            kinds.push(EndpointKind::Bridge);
        }
        for n in &t.vnodes {
            names.push(n.id.to_string());
            kinds.push(EndpointKind::VNode);
        }
        names.push(crate::model::SUPERVISOR.to_owned());
        kinds.push(EndpointKind::Supervisor);
        let index: BTreeMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); names.len()];
        let links = t
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let a = index[l.a.as_str()];
                let b = index[l.b.as_str()];
                adjacency[a].push((LinkId(i), b));
                adjacency[b].push((LinkId(i), a));
                LinkRuntime { ends: (a, b), latency_us: l.latency_us, up: true, counters: LinkCounters::default() }
            })
            .collect();
        Self { endpoint_up: vec![true; names.len()], names, kinds, index, links, adjacency }
    }

    fn link_rt(&self, link: LinkId) -> Result<&LinkRuntime, SimError> {
        self.links.get(link.0).ok_or_else(|| SimError::InvalidReference(link.to_string()))
    }

    fn endpoint(&self, name: &str) -> Result<usize, SimError> {
        self.index.get(name).copied().ok_or_else(|| SimError::InvalidReference(name.to_owned()))
    }

    pub fn link_state(&self, link: LinkId) -> Result<LinkState, SimError> {
        Ok(LinkState { link, up: self.link_rt(link)?.up })
    }

    pub fn counters(&self, link: LinkId) -> Result<LinkCounters, SimError> {
        Ok(self.link_rt(link)?.counters)
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn is_endpoint_up(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|&i| self.endpoint_up[i])
    }

    /// Carries traffic right now.
    pub fn usable(&self, link: LinkId) -> bool {
        self.links.get(link.0).is_some_and(|l| l.up && self.endpoint_up[l.ends.0] && self.endpoint_up[l.ends.1])
    }

    /// Checks that a fault names an existing target.
    pub fn validate_fault(&self, fault: &Fault) -> Result<(), SimError> {
        match fault {
            Fault::LinkFail(l) | Fault::LinkRestore(l) => self.link_rt(*l).map(|_| ()),
            Fault::NodeFail(n) | Fault::NodeRestore(n) => {
                let i = self.endpoint(n.as_str())?;
                if self.kinds[i] == EndpointKind::VNode {
                    Ok(())
                } else {
                    Err(SimError::InvalidReference(n.to_string()))
                }
            }
        }
    }

    /// Applies a fault now. Returns whether any state changed, so restoring
    /// something already up is a no-op.
    pub fn apply_fault(&mut self, fault: &Fault) -> Result<bool, SimError> {
        self.validate_fault(fault)?;
        let (slot, up) = match fault {
            Fault::LinkFail(l) => (&mut self.links[l.0].up, false),
            Fault::LinkRestore(l) => (&mut self.links[l.0].up, true),
            Fault::NodeFail(n) => (&mut self.endpoint_up[self.index[n.as_str()]], false),
            Fault::NodeRestore(n) => (&mut self.endpoint_up[self.index[n.as_str()]], true),
        };
        let changed = *slot != up;
        *slot = up;
        Ok(changed)
    }

    /// Sends a frame onto `link`. If the link cannot carry traffic at send
    /// time the frame is dropped and counted, otherwise `payload` is
    /// scheduled as the arrival at `now + latency`.
    pub fn transmit<P: EventPayload>(
        &mut self,
        sim: &mut Simulator<P>,
        link: LinkId,
        payload: P,
    ) -> Result<Transmit, SimError> {
        let latency = self.link_rt(link)?.latency_us;
        let usable = self.usable(link);
        let counters = &mut self.links[link.0].counters;
        counters.sent += 1;
        if !usable {
            counters.dropped += 1;
            return Ok(Transmit::Dropped);
        }
        let arrival_us = sim.now() + latency;
        sim.schedule(arrival_us, payload)?;
        Ok(Transmit::Scheduled { arrival_us })
    }

    /// Settles a frame arriving over `link`. Returns true if it is
    /// delivered, false if the link went down while it was in flight.
    pub fn deliver(&mut self, link: LinkId) -> Result<bool, SimError> {
        self.link_rt(link)?;
        let usable = self.usable(link);
        let counters = &mut self.links[link.0].counters;
        if usable {
            counters.delivered += 1;
        } else {
            counters.dropped += 1;
        }
        Ok(usable)
    }

    /// Lowest-latency route between two endpoints over usable links,
    /// transiting bridges only. Returns `(latency_us, links)`.
    pub fn route(&self, from: &str, to: &str) -> Option<(u64, Vec<LinkId>)> {
        let src = *self.index.get(from)?;
        let dst = *self.index.get(to)?;
        if !self.endpoint_up[src] || !self.endpoint_up[dst] {
            return None;
        }
        let n = self.names.len();
        let mut dist = vec![u64::MAX; n];
        let mut prev: Vec<Option<(LinkId, usize)>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[src] = 0;
        heap.push(Reverse((0u64, src)));
        while let Some(Reverse((d, at))) = heap.pop() {
            if d > dist[at] {
                continue;
            }
            if at == dst {
                break;
            }
            if at != src && self.kinds[at] != EndpointKind::Bridge {
                continue;
            }
            for &(link, next) in &self.adjacency[at] {
                if !self.usable(link) {
                    continue;
                }
                let nd = d + self.links[link.0].latency_us;
                if nd < dist[next] {
                    dist[next] = nd;
                    prev[next] = Some((link, at));
                    heap.push(Reverse((nd, next)));
                }
            }
        }
        if dist[dst] == u64::MAX {
            return None;
        }
        let mut path = Vec::new();
        let mut at = dst;
        while let Some((link, p)) = prev[at] {
            path.push(link);
            at = p;
        }
        path.reverse();
        Some((dist[dst], path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fig1_topology;

    #[derive(Debug, Clone, PartialEq)]
    enum Probe {
        Tick(&'static str),
        Arrive(LinkId),
        Fault(Fault),
    }

    impl EventPayload for Probe {
        fn kind(&self) -> EventKind {
            match self {
                Probe::Tick(_) => EventKind::TimerExpiry,
                Probe::Arrive(_) => EventKind::FrameArrival,
                Probe::Fault(Fault::LinkFail(_)) => EventKind::LinkFail,
                Probe::Fault(Fault::LinkRestore(_)) => EventKind::LinkRestore,
                Probe::Fault(Fault::NodeFail(_)) => EventKind::NodeFail,
                Probe::Fault(Fault::NodeRestore(_)) => EventKind::NodeRestore,
            }
        }

        fn subject(&self) -> String {
            format!("{self:?}")
        }
    }

    #[test]
    fn events_run_in_time_then_insertion_order() {
        let mut sim = Simulator::new();
        sim.schedule(20, Probe::Tick("late")).unwrap();
        sim.schedule(10, Probe::Tick("first")).unwrap();
        sim.schedule(10, Probe::Tick("second")).unwrap();
        sim.schedule(0, Probe::Tick("now")).unwrap();
        let mut order = Vec::new();
        sim.run_until(100, |_, ev| {
            if let Probe::Tick(name) = ev.payload {
                order.push(name);
            }
        });
        assert_eq!(order, ["now", "first", "second", "late"]);
        assert_eq!(sim.now(), 100);
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut sim: Simulator<Probe> = Simulator::new();
        sim.run_until(50, |_, _| {});
        assert_eq!(
            sim.schedule(49, Probe::Tick("x")),
            Err(SimError::TimeViolation { at_us: 49, now_us: 50 })
        );
        assert!(sim.schedule(50, Probe::Tick("x")).is_ok());
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut sim: Simulator<Probe> = Simulator::new();
        let trace = sim.run_until(1_000, |_, _| {});
        assert!(trace.is_empty());
        assert_eq!(sim.now(), 1_000);
    }

    #[test]
    fn cancelled_events_never_run() {
        let mut sim = Simulator::new();
        let h = sim.schedule(5, Probe::Tick("gone")).unwrap();
        sim.schedule(6, Probe::Tick("kept")).unwrap();
        assert!(sim.cancel(h));
        assert!(!sim.cancel(h));
        let trace = sim.run_until(10, |_, _| {});
        assert_eq!(trace.len(), 1);
        assert_eq!(sim.pending(), 0);
    }

    #[test]
    fn transmit_on_up_link_arrives_after_latency() {
        let t = fig1_topology();
        let mut net = Network::new(&t);
        let mut sim = Simulator::new();
        let link = t.find_link("TSN1", "TSN3").unwrap();
        assert_eq!(net.transmit(&mut sim, link, Probe::Arrive(link)), Ok(Transmit::Scheduled { arrival_us: 10 }));
        sim.run_until(100, |_, ev| {
            if let Probe::Arrive(l) = ev.payload {
                assert_eq!(ev.time_us, 10);
                assert!(net.deliver(l).unwrap());
            }
        });
        assert_eq!(net.counters(link).unwrap(), LinkCounters { sent: 1, delivered: 1, dropped: 0 });
    }

    #[test]
    fn transmit_on_failed_link_drops() {
        let t = fig1_topology();
        let mut net = Network::new(&t);
        let mut sim: Simulator<Probe> = Simulator::new();
        let link = t.find_link("TSN2", "TSN3").unwrap();
        assert!(net.apply_fault(&Fault::LinkFail(link)).unwrap());
        assert_eq!(net.transmit(&mut sim, link, Probe::Arrive(link)), Ok(Transmit::Dropped));
        assert_eq!(net.counters(link).unwrap().dropped, 1);
        assert_eq!(sim.pending(), 0);
    }

    #[test]
    fn fault_scheduled_before_send_at_same_time_wins() {
        let t = fig1_topology();
        let link = t.find_link("TSN2", "TSN3").unwrap();
        let mut net = Network::new(&t);
        let mut sim = Simulator::new();
        sim.schedule(5, Probe::Fault(Fault::LinkFail(link))).unwrap();
        sim.schedule(5, Probe::Tick("send")).unwrap();
        let mut outcome = None;
        sim.run_until(100, |sim, ev| match ev.payload {
            Probe::Fault(f) => {
                net.apply_fault(&f).unwrap();
            }
            Probe::Tick(_) => outcome = Some(net.transmit(sim, link, Probe::Arrive(link)).unwrap()),
            Probe::Arrive(l) => {
                net.deliver(l).unwrap();
            }
        });
        assert_eq!(outcome, Some(Transmit::Dropped));
    }

    #[test]
    fn link_failing_mid_flight_drops_at_delivery() {
        let t = fig1_topology();
        let link = t.find_link("TSN2", "TSN3").unwrap();
        let mut net = Network::new(&t);
        let mut sim = Simulator::new();
        net.transmit(&mut sim, link, Probe::Arrive(link)).unwrap();
        sim.schedule(3, Probe::Fault(Fault::LinkFail(link))).unwrap();
        sim.run_until(100, |_, ev| match ev.payload {
            Probe::Fault(f) => {
                net.apply_fault(&f).unwrap();
            }
            Probe::Arrive(l) => assert!(!net.deliver(l).unwrap()),
            Probe::Tick(_) => {}
        });
        let c = net.counters(link).unwrap();
        assert_eq!((c.sent, c.delivered, c.dropped), (1, 0, 1));
    }

    #[test]
    fn node_failure_silences_access_link() {
        let t = fig1_topology();
        let mut net = Network::new(&t);
        let access = t.access_link("VNode3").unwrap();
        assert!(net.usable(access));
        net.apply_fault(&Fault::NodeFail("VNode3".into())).unwrap();
        assert!(!net.usable(access));
        assert!(net.route(crate::model::SUPERVISOR, "VNode3").is_none());
        // restoring twice is a no-op the second time
        assert!(net.apply_fault(&Fault::NodeRestore("VNode3".into())).unwrap());
        assert!(!net.apply_fault(&Fault::NodeRestore("VNode3".into())).unwrap());
        assert!(!net.apply_fault(&Fault::LinkRestore(access)).unwrap());
    }

    #[test]
    fn unknown_fault_targets_rejected() {
        let net = Network::new(&fig1_topology());
        assert!(net.validate_fault(&Fault::LinkFail(LinkId(99))).is_err());
        assert!(net.validate_fault(&Fault::NodeFail("TSN1".into())).is_err());
        assert!(net.validate_fault(&Fault::NodeFail("VNode9".into())).is_err());
    }

    #[test]
    fn control_route_avoids_failed_links() {
        let t = fig1_topology();
        let mut net = Network::new(&t);
        let (lat, _) = net.route(crate::model::SUPERVISOR, "VNode3").unwrap();
        assert_eq!(lat, 30);
        net.apply_fault(&Fault::LinkFail(t.find_link("TSN2", "TSN3").unwrap())).unwrap();
        let (lat, path) = net.route(crate::model::SUPERVISOR, "VNode3").unwrap();
        assert_eq!(lat, 40);
        assert_eq!(path.len(), 4);
        // vnodes never transit traffic
        assert!(net.route("VNode1", "VNode2").is_some_and(|(l, _)| l == 20));
    }
}
