//! Service distribution: which vnode hosts each service and which paths
//! each stream takes.
//!
//! The objective is min-max utilization, where a node's utilization is
//! `max(cpu_used / cpu_cap, mem_used / mem_cap)` including standby
//! reservations. [`solve_exact`] is a branch and bound over assignments in
//! lexicographic order; [`solve_greedy`] is first-fit-decreasing for
//! instances beyond the exhaustive scale guard.

mod paths;

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{
    Criticality, LinkPath, PlacementPlan, Ratio, Resources, ServiceId, ServiceSpec, StreamId, StreamSpec, Topology,
    VNodeId, VNodeSpec,
};

pub use paths::disjoint_paths;

pub const MAX_EXACT_SERVICES: usize = 12;
pub const MAX_EXACT_VNODES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    /// Standby reservations alone overload a node.
    Standby,
    /// Some service, or the set of services, does not fit.
    Capacity,
    /// Every capacity-feasible assignment leaves a stream unroutable.
    Routing,
}

impl fmt::Display for ConstraintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintClass::Standby => "standby",
            ConstraintClass::Capacity => "capacity",
            ConstraintClass::Routing => "routing",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    #[error("no feasible placement ({0} constraint violated)")]
    Infeasible(ConstraintClass),
    #[error("instance too large for exhaustive search: {services} services on {vnodes} vnodes")]
    ScaleGuard { services: usize, vnodes: usize },
    #[error("only {found} link-disjoint paths exist")]
    InsufficientDisjointness { found: usize },
    #[error("no live node can host the required resources")]
    NoCapacity,
    #[error("invalid reference: {0}")]
    InvalidReference(String),
}

#[derive(Debug, Clone, Copy)]
pub struct PlacementProblem<'a> {
    pub topology: &'a Topology,
    pub services: &'a [ServiceSpec],
    pub streams: &'a [StreamSpec],
}

impl<'a> PlacementProblem<'a> {
    pub fn new(topology: &'a Topology, services: &'a [ServiceSpec], streams: &'a [StreamSpec]) -> Self {
        Self { topology, services, streams }
    }

    fn check_references(&self) -> Result<(), PlacementError> {
        for svc in self.services {
            if let Some(node) = &svc.standby_on {
                if self.topology.vnode(node.as_str()).is_none() {
                    return Err(PlacementError::InvalidReference(node.to_string()));
                }
            }
        }
        for stream in self.streams {
            for end in [&stream.source, &stream.sink] {
                if !self.services.iter().any(|s| &s.id == end) {
                    return Err(PlacementError::InvalidReference(end.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Nodes sorted by id, with standby reservations pre-charged.
    fn ledgers(&self) -> Result<Vec<NodeLedger<'a>>, PlacementError> {
        let mut nodes: Vec<&VNodeSpec> = self.topology.vnodes.iter().collect();
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut ledgers: Vec<NodeLedger> = nodes.into_iter().map(NodeLedger::new).collect();
        for svc in self.services {
            if let Some(node) = &svc.standby_on {
                let ledger = ledgers.iter_mut().find(|l| &l.spec.id == node).expect("references checked");
                ledger.charge(svc);
                if !ledger.admissible() {
                    return Err(PlacementError::Infeasible(ConstraintClass::Standby));
                }
            }
        }
        Ok(ledgers)
    }
}

/// Exact per-node usage bookkeeping.
#[derive(Debug, Clone)]
struct NodeLedger<'a> {
    spec: &'a VNodeSpec,
    critical: Resources,
    non_critical: Resources,
    hosted: usize,
}

impl<'a> NodeLedger<'a> {
    fn new(spec: &'a VNodeSpec) -> Self {
        Self { spec, critical: Resources::ZERO, non_critical: Resources::ZERO, hosted: 0 }
    }

    fn slot(&mut self, c: Criticality) -> &mut Resources {
        match c {
            Criticality::Critical => &mut self.critical,
            Criticality::NonCritical => &mut self.non_critical,
        }
    }

    fn charge(&mut self, svc: &ServiceSpec) {
        *self.slot(svc.criticality) += svc.demand;
    }

    fn refund(&mut self, svc: &ServiceSpec) {
        let slot = self.slot(svc.criticality);
        *slot = slot.saturating_sub(&svc.demand);
    }

    fn admissible(&self) -> bool {
        self.spec.admits(&self.critical, &self.non_critical)
    }

    fn can_host(&mut self, svc: &ServiceSpec) -> bool {
        if svc.standby_on.as_ref() == Some(&self.spec.id) {
            return false;
        }
        self.charge(svc);
        let ok = self.admissible();
        self.refund(svc);
        ok
    }

    fn utilization(&self) -> Ratio {
        (self.critical + self.non_critical).utilization_of(&self.spec.capacity)
    }
}

/// Objective value of a plan: the highest node utilization, standby
/// reservations included.
pub fn max_utilization(topology: &Topology, services: &[ServiceSpec], assignment: &BTreeMap<ServiceId, VNodeId>) -> Ratio {
    crate::model::plan_usage(assignment, services)
        .into_iter()
        .filter_map(|(node, (c, n))| topology.vnode(node.as_str()).map(|spec| (c + n).utilization_of(&spec.capacity)))
        .max()
        .unwrap_or(Ratio::ZERO)
}

/// Number of member paths a stream gets between two bridges.
fn member_count(stream: &StreamSpec, same_bridge: bool) -> usize {
    if stream.redundant && !same_bridge {
        2
    } else {
        1
    }
}

/// Route every stream whose endpoints are both assigned.
pub fn route_streams(
    topology: &Topology,
    assignment: &BTreeMap<ServiceId, VNodeId>,
    streams: &[StreamSpec],
) -> Result<BTreeMap<StreamId, Vec<LinkPath>>, PlacementError> {
    let mut routing = BTreeMap::new();
    for stream in streams {
        let (Some(src), Some(dst)) = (assignment.get(&stream.source), assignment.get(&stream.sink)) else {
            continue;
        };
        let paths = route_between(topology, src, dst, stream)?;
        routing.insert(stream.id.clone(), paths);
    }
    Ok(routing)
}

/// Paths for one stream between two placed endpoints.
pub fn route_between(
    topology: &Topology,
    src: &VNodeId,
    dst: &VNodeId,
    stream: &StreamSpec,
) -> Result<Vec<LinkPath>, PlacementError> {
    let bridge_of = |n: &VNodeId| {
        topology
            .vnode(n.as_str())
            .map(|s| s.attached_bridge.clone())
            .ok_or_else(|| PlacementError::InvalidReference(n.to_string()))
    };
    let (a, b) = (bridge_of(src)?, bridge_of(dst)?);
    disjoint_paths(topology, a.as_str(), b.as_str(), member_count(stream, a == b))
}

/// Exhaustive min-max-utilization placement. Ties go to fewer nodes used,
/// then to the lexicographically smallest assignment in service id order.
pub fn solve_exact(p: &PlacementProblem<'_>) -> Result<PlacementPlan, PlacementError> {
    if p.services.len() > MAX_EXACT_SERVICES || p.topology.vnodes.len() > MAX_EXACT_VNODES {
        return Err(PlacementError::ScaleGuard { services: p.services.len(), vnodes: p.topology.vnodes.len() });
    }
    p.check_references()?;
    let mut ledgers = p.ledgers()?;
    let mut services: Vec<&ServiceSpec> = p.services.iter().collect();
    services.sort_by(|a, b| a.id.cmp(&b.id));
    for svc in &services {
        if !ledgers.iter_mut().any(|l| l.can_host(svc)) {
            return Err(PlacementError::Infeasible(ConstraintClass::Capacity));
        }
    }

    let mut search = Search {
        problem: p,
        services: &services,
        choice: vec![0; services.len()],
        best: None,
        routable_cache: BTreeMap::new(),
        routing_rejected: false,
    };
    search.descend(&mut ledgers, 0);

    let Some((_, _, choice)) = search.best else {
        let class = if search.routing_rejected { ConstraintClass::Routing } else { ConstraintClass::Capacity };
        return Err(PlacementError::Infeasible(class));
    };
    let assignment: BTreeMap<ServiceId, VNodeId> = services
        .iter()
        .zip(&choice)
        .map(|(svc, &n)| (svc.id.clone(), ledgers[n].spec.id.clone()))
        .collect();
    let routing = route_streams(p.topology, &assignment, p.streams)?;
    Ok(PlacementPlan { assignment, routing })
}

struct Search<'p, 'a> {
    problem: &'p PlacementProblem<'a>,
    services: &'p [&'a ServiceSpec],
    choice: Vec<usize>,
    best: Option<(Ratio, usize, Vec<usize>)>,
    routable_cache: BTreeMap<(usize, usize, bool), bool>,
    routing_rejected: bool,
}

impl Search<'_, '_> {
    fn objective(ledgers: &[NodeLedger<'_>]) -> (Ratio, usize) {
        let util = ledgers.iter().map(NodeLedger::utilization).max().unwrap_or(Ratio::ZERO);
        (util, ledgers.iter().filter(|l| l.hosted > 0).count())
    }

    fn beats_best(&self, key: &(Ratio, usize)) -> bool {
        match &self.best {
            None => true,
            Some((u, n, _)) => *key < (*u, *n),
        }
    }

    fn descend(&mut self, ledgers: &mut [NodeLedger<'_>], depth: usize) {
        let key = Self::objective(ledgers);
        // Both parts of the key only grow as services are added, and
        // assignments are visited in lexicographic order.
        if !self.beats_best(&key) {
            return;
        }
        if depth == self.services.len() {
            if self.routable(ledgers) {
                self.best = Some((key.0, key.1, self.choice.clone()));
            } else {
                self.routing_rejected = true;
            }
            return;
        }
        let svc = self.services[depth];
        for n in 0..ledgers.len() {
            if !ledgers[n].can_host(svc) {
                continue;
            }
            ledgers[n].charge(svc);
            ledgers[n].hosted += 1;
            self.choice[depth] = n;
            self.descend(ledgers, depth + 1);
            ledgers[n].hosted -= 1;
            ledgers[n].refund(svc);
        }
    }

    fn routable(&mut self, ledgers: &[NodeLedger<'_>]) -> bool {
        let topo = self.problem.topology;
        for stream in self.problem.streams {
            let node_of = |id: &ServiceId| {
                let i = self.services.iter().position(|s| &s.id == id).expect("references checked");
                self.choice[i]
            };
            let (src, dst) = (node_of(&stream.source), node_of(&stream.sink));
            let key = (src, dst, stream.redundant);
            let ok = match self.routable_cache.get(&key) {
                Some(ok) => *ok,
                None => {
                    let ok = route_between(topo, &ledgers[src].spec.id, &ledgers[dst].spec.id, stream).is_ok();
                    self.routable_cache.insert(key, ok);
                    ok
                }
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

/// First-fit-decreasing by scalarized demand, each service going to the
/// feasible node with the lowest resulting utilization.
pub fn solve_greedy(p: &PlacementProblem<'_>) -> Result<PlacementPlan, PlacementError> {
    p.check_references()?;
    let mut ledgers = p.ledgers()?;
    let max_cap = p.topology.vnodes.iter().fold(Resources::ZERO, |acc, n| {
        Resources::new(acc.cpu_millicores.max(n.capacity.cpu_millicores), acc.memory_mib.max(n.capacity.memory_mib))
    });
    let mut order: Vec<(Ratio, &ServiceSpec)> =
        p.services.iter().map(|s| (s.demand.utilization_of(&max_cap), s)).collect();
    order.sort_by(|(da, a), (db, b)| db.cmp(da).then_with(|| a.id.cmp(&b.id)));

    let mut assignment = BTreeMap::new();
    for (_, svc) in order {
        let mut best: Option<(Ratio, usize)> = None;
        for (i, ledger) in ledgers.iter_mut().enumerate() {
            if !ledger.can_host(svc) {
                continue;
            }
            ledger.charge(svc);
            let util = ledger.utilization();
            ledger.refund(svc);
            if best.is_none_or(|(u, _)| util < u) {
                best = Some((util, i));
            }
        }
        let (_, i) = best.ok_or(PlacementError::Infeasible(ConstraintClass::Capacity))?;
        ledgers[i].charge(svc);
        ledgers[i].hosted += 1;
        assignment.insert(svc.id.clone(), ledgers[i].spec.id.clone());
    }
    let routing = route_streams(p.topology, &assignment, p.streams).map_err(|e| match e {
        PlacementError::InsufficientDisjointness { .. } => PlacementError::Infeasible(ConstraintClass::Routing),
        other => other,
    })?;
    Ok(PlacementPlan { assignment, routing })
}

/// Exact within the scale guard, greedy beyond it.
pub fn solve(p: &PlacementProblem<'_>) -> Result<PlacementPlan, PlacementError> {
    match solve_exact(p) {
        Err(PlacementError::ScaleGuard { .. }) => solve_greedy(p),
        other => other,
    }
}

/// Picks the live node with the most free resources that can take `needed`.
///
/// Free vectors are scalarized as the smaller of the two components, each
/// normalized by the largest free amount of that component among the
/// candidates. Ties go to the smallest node id.
pub fn select_failover_target(
    failed: &VNodeId,
    states: &BTreeMap<VNodeId, Resources>,
    needed: &Resources,
) -> Result<VNodeId, PlacementError> {
    let candidates: Vec<(&VNodeId, &Resources)> =
        states.iter().filter(|(id, free)| *id != failed && needed.fits_within(free)).collect();
    let max_cpu = candidates.iter().map(|(_, f)| f.cpu_millicores).max().unwrap_or(0);
    let max_mem = candidates.iter().map(|(_, f)| f.memory_mib).max().unwrap_or(0);
    let score = |free: &Resources| {
        let cpu = if max_cpu == 0 { Ratio::INFINITE } else { Ratio::new(free.cpu_millicores, max_cpu) };
        let mem = if max_mem == 0 { Ratio::INFINITE } else { Ratio::new(free.memory_mib, max_mem) };
        cpu.min(mem)
    };
    let mut best: Option<(Ratio, &VNodeId)> = None;
    for (id, free) in candidates {
        let s = score(free);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, id));
        }
    }
    best.map(|(_, id)| id.clone()).ok_or(PlacementError::NoCapacity)
}
