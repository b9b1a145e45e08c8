//! Shared vocabulary: identifiers, resources, topology, services, streams and
//! placement plans, plus the validation rules every other module relies on.

use std::borrow::Borrow;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = str;

            fn deref(&self) -> &str {
                &self.0
            }
        }
    };
}

id_type!(
    /// A TSN bridge.
    BridgeId
);
id_type!(
    /// A virtualized node hosting a critical and a non-critical domain.
    VNodeId
);
id_type!(ServiceId);
id_type!(StreamId);
id_type!(
    /// Any link endpoint: a bridge, a vnode or the supervisor.
    EndpointId
);

/// Reserved endpoint name of the supervisor host.
pub const SUPERVISOR: &str = "supervisor";

/// Index of a link in [`Topology::links`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub usize);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "link#{}", self.0)
    }
}

/// Ordered list of bridge-to-bridge links. The empty path is valid when both
/// ends attach to the same bridge.
pub type LinkPath = Vec<LinkId>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error("capacity exceeded: demand {demand} > capacity {capacity}")]
    CapacityExceeded { demand: Resources, capacity: Resources },
}

/// Two-dimensional resource vector. `a.fits_within(b)` is the component-wise
/// order used for every capacity check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Resources {
    pub cpu_millicores: u64,
    pub memory_mib: u64,
}

impl Resources {
    pub const ZERO: Resources = Resources { cpu_millicores: 0, memory_mib: 0 };

    pub const fn new(cpu_millicores: u64, memory_mib: u64) -> Self {
        Self { cpu_millicores, memory_mib }
    }

    pub fn fits_within(&self, capacity: &Resources) -> bool {
        self.cpu_millicores <= capacity.cpu_millicores && self.memory_mib <= capacity.memory_mib
    }

    pub fn checked_sub(&self, other: &Resources) -> Option<Resources> {
        Some(Resources {
            cpu_millicores: self.cpu_millicores.checked_sub(other.cpu_millicores)?,
            memory_mib: self.memory_mib.checked_sub(other.memory_mib)?,
        })
    }

    pub fn saturating_sub(&self, other: &Resources) -> Resources {
        Resources {
            cpu_millicores: self.cpu_millicores.saturating_sub(other.cpu_millicores),
            memory_mib: self.memory_mib.saturating_sub(other.memory_mib),
        }
    }

    /// `max(cpu/cap.cpu, mem/cap.mem)`, exact. A zero capacity component
    /// contributes nothing when unused and saturates otherwise.
    pub fn utilization_of(&self, capacity: &Resources) -> Ratio {
        let cpu = Ratio::fraction(self.cpu_millicores, capacity.cpu_millicores);
        let mem = Ratio::fraction(self.memory_mib, capacity.memory_mib);
        cpu.max(mem)
    }
}

impl Add for Resources {
    type Output = Resources;

    fn add(self, rhs: Resources) -> Resources {
        Resources {
            cpu_millicores: self.cpu_millicores + rhs.cpu_millicores,
            memory_mib: self.memory_mib + rhs.memory_mib,
        }
    }
}

impl AddAssign for Resources {
    fn add_assign(&mut self, rhs: Resources) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Resources {
    fn sum<I: Iterator<Item = Resources>>(iter: I) -> Self {
        iter.fold(Resources::ZERO, Add::add)
    }
}

impl fmt::Display for Resources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}m, {}MiB)", self.cpu_millicores, self.memory_mib)
    }
}

/// Non-negative rational compared exactly by cross multiplication.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };
    /// Stand-in for "unbounded", larger than any finite ratio we produce.
    pub const INFINITE: Ratio = Ratio { num: 1, den: 0 };

    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    /// `num/den`, with `0/0 = 0` and `n/0 = INFINITE` for `n > 0`.
    pub fn fraction(num: u64, den: u64) -> Self {
        match (num, den) {
            (0, 0) => Ratio::ZERO,
            (_, 0) => Ratio::INFINITE,
            _ => Ratio { num, den },
        }
    }

    pub fn as_f64(&self) -> f64 {
        if self.den == 0 {
            f64::INFINITY
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.den == 0, other.den == 0) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (false, false) => {
                (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
            }
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.as_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    Critical,
    NonCritical,
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criticality::Critical => "critical",
            Criticality::NonCritical => "non_critical",
        })
    }
}

/// How a vnode's capacity is divided between its two domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSplit {
    /// Both domains draw from the whole node capacity.
    Shared,
    /// The critical domain gets `critical_percent` of each component, the
    /// non-critical domain the remainder.
    Partitioned { critical_percent: u8 },
}

impl Default for DomainSplit {
    fn default() -> Self {
        DomainSplit::Partitioned { critical_percent: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddress(pub [u8; 6]);

impl MacAddress {
    /// Locally administered address derived from an index.
    pub fn local(index: u32) -> Self {
        let b = index.to_be_bytes();
        MacAddress([0x02, 0x00, b[0], b[1], b[2], b[3]])
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", b[0], b[1], b[2], b[3], b[4], b[5])
    }
}

impl FromStr for MacAddress {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 {
            return Err(format!("malformed MAC address `{s}`"));
        }
        let mut out = [0u8; 6];
        for (slot, part) in out.iter_mut().zip(parts) {
            *slot = u8::from_str_radix(part, 16).map_err(|_| format!("malformed MAC address `{s}`"))?;
        }
        Ok(MacAddress(out))
    }
}

impl Serialize for MacAddress {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddress {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VNodeSpec {
    pub id: VNodeId,
    pub capacity: Resources,
    pub attached_bridge: BridgeId,
    pub mac: MacAddress,
    pub domain_split: DomainSplit,
}

impl VNodeSpec {
    pub fn new(id: impl Into<VNodeId>, capacity: Resources, attached_bridge: impl Into<BridgeId>, mac: MacAddress) -> Self {
        Self {
            id: id.into(),
            capacity,
            attached_bridge: attached_bridge.into(),
            mac,
            domain_split: DomainSplit::default(),
        }
    }

    pub fn with_split(mut self, split: DomainSplit) -> Self {
        self.domain_split = split;
        self
    }

    pub fn domain_capacity(&self, kind: Criticality) -> Resources {
        match self.domain_split {
            DomainSplit::Shared => self.capacity,
            DomainSplit::Partitioned { critical_percent } => {
                let pct = u64::from(critical_percent.min(100));
                let critical = Resources::new(
                    self.capacity.cpu_millicores * pct / 100,
                    self.capacity.memory_mib * pct / 100,
                );
                match kind {
                    Criticality::Critical => critical,
                    Criticality::NonCritical => self.capacity.saturating_sub(&critical),
                }
            }
        }
    }

    /// Whether the given per-domain usage is admissible on this node.
    pub fn admits(&self, critical_used: &Resources, non_critical_used: &Resources) -> bool {
        (*critical_used + *non_critical_used).fits_within(&self.capacity)
            && critical_used.fits_within(&self.domain_capacity(Criticality::Critical))
            && non_critical_used.fits_within(&self.domain_capacity(Criticality::NonCritical))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkSpec {
    pub a: EndpointId,
    pub b: EndpointId,
    pub latency_us: u64,
}

impl LinkSpec {
    pub fn new(a: &str, b: &str, latency_us: u64) -> Self {
        Self { a: a.into(), b: b.into(), latency_us }
    }

    pub fn connects(&self, x: &str, y: &str) -> bool {
        (self.a.as_str() == x && self.b.as_str() == y) || (self.a.as_str() == y && self.b.as_str() == x)
    }

    /// The opposite end of the link, if `from` is one of its ends.
    pub fn other_end(&self, from: &str) -> Option<&EndpointId> {
        if self.a.as_str() == from {
            Some(&self.b)
        } else if self.b.as_str() == from {
            Some(&self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKind {
    Bridge,
    VNode,
    Supervisor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Topology {
    pub bridges: Vec<BridgeId>,
    pub vnodes: Vec<VNodeSpec>,
    pub links: Vec<LinkSpec>,
    pub supervisor_attachment: BridgeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("link references unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("self link at `{0}`")]
    SelfLink(String),
    #[error("duplicate link {0}-{1}")]
    DuplicateLink(String, String),
    #[error("link {0}-{1} has zero latency")]
    ZeroLatency(String, String),
    #[error("vnode `{node}` attached to unknown bridge `{bridge}`")]
    UnknownAttachment { node: String, bridge: String },
    #[error("`{0}` has no link to its attachment bridge")]
    MissingAttachmentLink(String),
    #[error("`{node}` linked to `{other}`, which is not its attachment bridge")]
    StrayEndSystemLink { node: String, other: String },
    #[error("topology is disconnected")]
    Disconnected,
}

impl Topology {
    pub fn endpoint_kind(&self, name: &str) -> Option<EndpointKind> {
        if name == SUPERVISOR {
            Some(EndpointKind::Supervisor)
        } else if self.bridges.iter().any(|b| b.as_str() == name) {
            Some(EndpointKind::Bridge)
        } else if self.vnodes.iter().any(|n| n.id.as_str() == name) {
            Some(EndpointKind::VNode)
        } else {
            None
        }
    }

    pub fn has_bridge(&self, id: &str) -> bool {
        self.bridges.iter().any(|b| b.as_str() == id)
    }

    pub fn vnode(&self, id: &str) -> Option<&VNodeSpec> {
        self.vnodes.iter().find(|n| n.id.as_str() == id)
    }

    pub fn link(&self, id: LinkId) -> Option<&LinkSpec> {
        self.links.get(id.0)
    }

    pub fn find_link(&self, x: &str, y: &str) -> Option<LinkId> {
        self.links.iter().position(|l| l.connects(x, y)).map(LinkId)
    }

    pub fn link_label(&self, id: LinkId) -> String {
        match self.link(id) {
            Some(l) => format!("{}-{}", l.a, l.b),
            None => id.to_string(),
        }
    }

    /// The link connecting a vnode (or the supervisor) to its bridge.
    pub fn access_link(&self, end_system: &str) -> Option<LinkId> {
        let bridge = if end_system == SUPERVISOR {
            self.supervisor_attachment.as_str()
        } else {
            self.vnode(end_system)?.attached_bridge.as_str()
        };
        self.find_link(end_system, bridge)
    }

    pub fn is_bridge_link(&self, id: LinkId) -> bool {
        self.link(id)
            .is_some_and(|l| self.has_bridge(l.a.as_str()) && self.has_bridge(l.b.as_str()))
    }

    /// Links incident to `name`, paired with the far end, in link order.
    pub fn neighbors<'a>(&'a self, name: &'a str) -> impl Iterator<Item = (LinkId, &'a EndpointId)> + 'a {
        self.links
            .iter()
            .enumerate()
            .filter_map(move |(i, l)| l.other_end(name).map(|o| (LinkId(i), o)))
    }

    pub fn path_latency(&self, path: &[LinkId]) -> u64 {
        path.iter().filter_map(|l| self.link(*l)).map(|l| l.latency_us).sum()
    }

    /// Render a path as `A-B-C`, starting from `from`.
    pub fn path_label(&self, from: &str, path: &[LinkId]) -> String {
        let mut out = from.to_owned();
        let mut at = from.to_owned();
        for id in path {
            match self.link(*id).and_then(|l| l.other_end(&at)) {
                Some(next) => {
                    at = next.to_string();
                    out.push('-');
                    out.push_str(&at);
                }
                None => {
                    out.push_str("-?");
                    break;
                }
            }
        }
        out
    }

    /// Walk `path` from bridge `from` over bridge-to-bridge links. Returns
    /// the bridge it ends at, or `None` if the path is not contiguous.
    pub fn walk_path(&self, from: &str, path: &[LinkId]) -> Option<String> {
        let mut at = from.to_owned();
        for id in path {
            if !self.is_bridge_link(*id) {
                return None;
            }
            at = self.link(*id)?.other_end(&at)?.to_string();
        }
        Some(at)
    }
}

/// All topology invariants; empty iff the topology is well formed.
pub fn validate_topology(t: &Topology) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut names = BTreeSet::new();
    let all_names = t
        .bridges
        .iter()
        .map(BridgeId::as_str)
        .chain(t.vnodes.iter().map(|n| n.id.as_str()))
        .chain(std::iter::once(SUPERVISOR));
    for name in all_names {
        if !names.insert(name) {
            out.push(Violation::DuplicateId(name.to_owned()));
        }
    }

    for node in &t.vnodes {
        if !t.has_bridge(node.attached_bridge.as_str()) {
            out.push(Violation::UnknownAttachment {
                node: node.id.to_string(),
                bridge: node.attached_bridge.to_string(),
            });
        }
    }
    if !t.has_bridge(t.supervisor_attachment.as_str()) {
        out.push(Violation::UnknownAttachment {
            node: SUPERVISOR.to_owned(),
            bridge: t.supervisor_attachment.to_string(),
        });
    }

    let mut seen_pairs = BTreeSet::new();
    let mut valid_links = Vec::new();
    for link in &t.links {
        let mut ok = true;
        for end in [&link.a, &link.b] {
            if t.endpoint_kind(end.as_str()).is_none() {
                out.push(Violation::UnknownEndpoint(end.to_string()));
                ok = false;
            }
        }
        if link.a == link.b {
            out.push(Violation::SelfLink(link.a.to_string()));
            ok = false;
        }
        if link.latency_us == 0 {
            out.push(Violation::ZeroLatency(link.a.to_string(), link.b.to_string()));
        }
        let key = if link.a <= link.b {
            (link.a.clone(), link.b.clone())
        } else {
            (link.b.clone(), link.a.clone())
        };
        if !seen_pairs.insert(key) {
            out.push(Violation::DuplicateLink(link.a.to_string(), link.b.to_string()));
            ok = false;
        }
        if ok {
            valid_links.push(link);
        }
    }

    // End systems hang off exactly their attachment bridge.
    let end_systems = t
        .vnodes
        .iter()
        .map(|n| (n.id.as_str(), n.attached_bridge.as_str()))
        .chain(std::iter::once((SUPERVISOR, t.supervisor_attachment.as_str())));
    for (name, bridge) in end_systems {
        let mut attached = false;
        for link in &valid_links {
            if let Some(other) = link.other_end(name) {
                if other.as_str() == bridge {
                    attached = true;
                } else {
                    out.push(Violation::StrayEndSystemLink {
                        node: name.to_owned(),
                        other: other.to_string(),
                    });
                }
            }
        }
        if !attached {
            out.push(Violation::MissingAttachmentLink(name.to_owned()));
        }
    }

    if !names.is_empty() {
        let mut reached = BTreeSet::new();
        let mut queue = VecDeque::new();
        let start = *names.iter().next().expect("non-empty");
        reached.insert(start);
        queue.push_back(start);
        while let Some(at) = queue.pop_front() {
            for link in &valid_links {
                if let Some(next) = link.other_end(at) {
                    if names.contains(next.as_str()) && reached.insert(next.as_str()) {
                        queue.push_back(next.as_str());
                    }
                }
            }
        }
        if reached.len() != names.len() {
            out.push(Violation::Disconnected);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub id: ServiceId,
    pub criticality: Criticality,
    pub demand: Resources,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standby_on: Option<VNodeId>,
    /// Per-service container start delay; falls back to the system default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_delay_us: Option<u64>,
}

impl ServiceSpec {
    pub fn new(id: impl Into<ServiceId>, criticality: Criticality, demand: Resources) -> Self {
        Self { id: id.into(), criticality, demand, standby_on: None, start_delay_us: None }
    }

    pub fn with_standby(mut self, node: impl Into<VNodeId>) -> Self {
        self.standby_on = Some(node.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub id: StreamId,
    pub source: ServiceId,
    pub sink: ServiceId,
    pub period_us: u64,
    pub payload_bytes: u32,
    pub redundant: bool,
    /// Eliminate duplicates at the sink's attachment bridge as well as at
    /// the listener.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub bridge_elimination: bool,
}

impl StreamSpec {
    pub fn new(id: impl Into<StreamId>, source: impl Into<ServiceId>, sink: impl Into<ServiceId>, period_us: u64, redundant: bool) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            sink: sink.into(),
            period_us,
            payload_bytes: 1200,
            redundant,
            bridge_elimination: false,
        }
    }
}

/// Service-to-node assignment plus stream routing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct PlacementPlan {
    pub assignment: BTreeMap<ServiceId, VNodeId>,
    pub routing: BTreeMap<StreamId, Vec<LinkPath>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanViolation {
    #[error("node `{node}` over capacity in its {domain} domain")]
    CapacityExceeded { node: VNodeId, domain: Criticality },
    #[error("service `{0}` placed on its own standby node")]
    StandbyCollocated(ServiceId),
    #[error("stream `{0}` has placed endpoints but no routing")]
    Unrouted(StreamId),
    #[error("stream `{0}` has a path that does not connect its endpoints")]
    BrokenPath(StreamId),
    #[error("redundant stream `{0}` needs at least two paths")]
    TooFewPaths(StreamId),
    #[error("redundant stream `{0}` has paths sharing a link")]
    NotDisjoint(StreamId),
}

/// Per-node, per-domain usage of a plan including standby reservations.
pub fn plan_usage(
    assignment: &BTreeMap<ServiceId, VNodeId>,
    services: &[ServiceSpec],
) -> BTreeMap<VNodeId, (Resources, Resources)> {
    let mut usage: BTreeMap<VNodeId, (Resources, Resources)> = BTreeMap::new();
    let mut charge = |node: &VNodeId, svc: &ServiceSpec| {
        let slot = usage.entry(node.clone()).or_default();
        match svc.criticality {
            Criticality::Critical => slot.0 += svc.demand,
            Criticality::NonCritical => slot.1 += svc.demand,
        }
    };
    for svc in services {
        if let Some(node) = assignment.get(&svc.id) {
            charge(node, svc);
        }
        if let Some(node) = &svc.standby_on {
            charge(node, svc);
        }
    }
    usage
}

/// Every invariant a plan breaks, or an error for undeclared ids.
pub fn check_plan(
    plan: &PlacementPlan,
    t: &Topology,
    services: &[ServiceSpec],
    streams: &[StreamSpec],
) -> Result<Vec<PlanViolation>, ModelError> {
    let service_by_id: BTreeMap<&str, &ServiceSpec> = services.iter().map(|s| (s.id.as_str(), s)).collect();
    let stream_by_id: BTreeMap<&str, &StreamSpec> = streams.iter().map(|s| (s.id.as_str(), s)).collect();
    let bad = |what: &str| ModelError::InvalidReference(what.to_owned());

    for (svc, node) in &plan.assignment {
        if !service_by_id.contains_key(svc.as_str()) {
            return Err(bad(svc.as_str()));
        }
        if t.vnode(node.as_str()).is_none() {
            return Err(bad(node.as_str()));
        }
    }
    for svc in services {
        if let Some(node) = &svc.standby_on {
            if t.vnode(node.as_str()).is_none() {
                return Err(bad(node.as_str()));
            }
        }
    }
    for (stream, paths) in &plan.routing {
        if !stream_by_id.contains_key(stream.as_str()) {
            return Err(bad(stream.as_str()));
        }
        for link in paths.iter().flatten() {
            if t.link(*link).is_none() {
                return Err(bad(&link.to_string()));
            }
        }
    }
    for stream in streams {
        for end in [&stream.source, &stream.sink] {
            if !service_by_id.contains_key(end.as_str()) {
                return Err(bad(end.as_str()));
            }
        }
    }

    let mut out = Vec::new();
    for svc in services {
        if svc.standby_on.is_some() && plan.assignment.get(&svc.id) == svc.standby_on.as_ref() {
            out.push(PlanViolation::StandbyCollocated(svc.id.clone()));
        }
    }
    for (node, (crit, non)) in plan_usage(&plan.assignment, services) {
        let spec = t.vnode(node.as_str()).expect("checked above");
        if !crit.fits_within(&spec.domain_capacity(Criticality::Critical)) {
            out.push(PlanViolation::CapacityExceeded { node: node.clone(), domain: Criticality::Critical });
        }
        if !non.fits_within(&spec.domain_capacity(Criticality::NonCritical))
            || !(crit + non).fits_within(&spec.capacity)
        {
            out.push(PlanViolation::CapacityExceeded { node, domain: Criticality::NonCritical });
        }
    }

    for stream in streams {
        let (Some(src), Some(dst)) = (plan.assignment.get(&stream.source), plan.assignment.get(&stream.sink)) else {
            continue;
        };
        let src_bridge = &t.vnode(src.as_str()).expect("checked").attached_bridge;
        let dst_bridge = &t.vnode(dst.as_str()).expect("checked").attached_bridge;
        let Some(paths) = plan.routing.get(&stream.id).filter(|p| !p.is_empty()) else {
            out.push(PlanViolation::Unrouted(stream.id.clone()));
            continue;
        };
        if paths
            .iter()
            .any(|p| t.walk_path(src_bridge.as_str(), p).as_deref() != Some(dst_bridge.as_str()))
        {
            out.push(PlanViolation::BrokenPath(stream.id.clone()));
            continue;
        }
        // Co-located endpoints share one bridge; there is nothing to make redundant.
        if stream.redundant && src_bridge != dst_bridge {
            if paths.len() < 2 {
                out.push(PlanViolation::TooFewPaths(stream.id.clone()));
            } else if !pairwise_disjoint(paths) {
                out.push(PlanViolation::NotDisjoint(stream.id.clone()));
            }
        }
    }
    Ok(out)
}

pub fn pairwise_disjoint(paths: &[LinkPath]) -> bool {
    let mut used = BTreeSet::new();
    paths.iter().flatten().all(|l| used.insert(*l))
}

/// True iff every placement plan invariant holds against `t`.
pub fn plan_feasible(
    plan: &PlacementPlan,
    t: &Topology,
    services: &[ServiceSpec],
    streams: &[StreamSpec],
) -> Result<bool, ModelError> {
    check_plan(plan, t, services, streams).map(|v| v.is_empty())
}

/// Component-wise `capacity - Σ demands`.
pub fn free_resources(capacity: &Resources, deployed: &[ServiceSpec]) -> Result<Resources, ModelError> {
    let demand: Resources = deployed.iter().map(|s| s.demand).sum();
    capacity
        .checked_sub(&demand)
        .ok_or(ModelError::CapacityExceeded { demand, capacity: *capacity })
}

/// The demonstration topology: three bridges in a ring, VNode1 and VNode2 on
/// TSN1, VNode3 on TSN3, the supervisor on TSN2. All links 10 µs.
pub fn fig1_topology() -> Topology {
    let cap = Resources::new(4000, 4096);
    Topology {
        bridges: vec!["TSN1".into(), "TSN2".into(), "TSN3".into()],
        vnodes: vec![
            VNodeSpec::new("VNode1", cap, "TSN1", MacAddress::local(1)),
            VNodeSpec::new("VNode2", cap, "TSN1", MacAddress::local(2)),
            VNodeSpec::new("VNode3", cap, "TSN3", MacAddress::local(3)),
        ],
        links: vec![
            LinkSpec::new("TSN1", "TSN2", 10),
            LinkSpec::new("TSN2", "TSN3", 10),
            LinkSpec::new("TSN1", "TSN3", 10),
            LinkSpec::new("VNode1", "TSN1", 10),
            LinkSpec::new("VNode2", "TSN1", 10),
            LinkSpec::new("VNode3", "TSN3", 10),
            LinkSpec::new(SUPERVISOR, "TSN2", 10),
        ],
        supervisor_attachment: "TSN2".into(),
    }
}
