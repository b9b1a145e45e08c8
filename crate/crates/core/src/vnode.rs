//! A virtualized node: one critical and one non-critical domain, each
//! running services as containers, plus the node's heartbeat.
//!
//! The node is a plain state machine. It never schedules anything itself;
//! operations return what the caller has to schedule (container readiness
//! timers) or send (heartbeats).

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::frer::{FrerError, RecoveryOutcome, RecoveryState, SequenceGenerator, TaggedFrame};
use crate::model::{Criticality, Resources, ServiceId, ServiceSpec, StreamId, VNodeId, VNodeSpec};

pub const DEFAULT_HEARTBEAT_PERIOD_US: u64 = 500_000;
pub const DEFAULT_CONTAINER_START_DELAY_US: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStatus {
    Running,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerStatus {
    Created,
    Deploying,
    Running,
    Stopped,
    Failed,
}

impl ContainerStatus {
    fn can_become(self, next: ContainerStatus) -> bool {
        use ContainerStatus::*;
        matches!((self, next), (Created, Deploying) | (Deploying, Running) | (Running, Stopped) | (_, Failed))
    }

    /// Whether a container in this status holds its resources.
    pub fn reserves(self) -> bool {
        matches!(self, ContainerStatus::Created | ContainerStatus::Deploying | ContainerStatus::Running)
    }
}

impl fmt::Display for ContainerStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainerStatus::Created => "created",
            ContainerStatus::Deploying => "deploying",
            ContainerStatus::Running => "running",
            ContainerStatus::Stopped => "stopped",
            ContainerStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VNodeError {
    #[error("node `{0}` is down")]
    NodeDown(VNodeId),
    #[error("service `{service}` needs {demand} but only {free} is free")]
    CapacityExceeded { service: ServiceId, demand: Resources, free: Resources },
    #[error("service `{service}` cannot go from {from} to {to}")]
    InvalidTransition { service: ServiceId, from: String, to: ContainerStatus },
    #[error("{service} is {service_kind} but the target domain is {domain}")]
    CriticalityMismatch { service: ServiceId, service_kind: Criticality, domain: Criticality },
    #[error("the {0} domain is not running")]
    DomainNotRunning(Criticality),
    #[error("the {0} domain still hosts containers")]
    DomainNotEmpty(Criticality),
    #[error(transparent)]
    Frer(#[from] FrerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContainerState {
    pub service: ServiceId,
    pub spec: ServiceSpec,
    pub status: ContainerStatus,
    pub started_at_us: u64,
    pub running_at_us: Option<u64>,
    /// Frames consumed by the application; the resumable playback position.
    pub position: u64,
    /// Distinguishes container incarnations so stale readiness timers are
    /// ignored.
    pub incarnation: u64,
    start_delay_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DomainState {
    pub kind: Criticality,
    pub status: DomainStatus,
    pub capacity: Resources,
    pub containers: BTreeMap<ServiceId, ContainerState>,
}

impl DomainState {
    fn new(kind: Criticality, capacity: Resources) -> Self {
        Self { kind, status: DomainStatus::Running, capacity, containers: BTreeMap::new() }
    }

    pub fn used(&self) -> Resources {
        self.containers.values().filter(|c| c.status.reserves()).map(|c| c.spec.demand).sum()
    }

    pub fn free(&self) -> Resources {
        self.capacity.saturating_sub(&self.used())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    CreateDomain { domain: Criticality },
    RemoveDomain { domain: Criticality },
    /// A standby deployment stays `created`, holding its resources until a
    /// later `StartService`.
    DeployService { spec: ServiceSpec, standby: bool, start_delay_us: u64 },
    StartService { service: ServiceId },
    StopService { service: ServiceId },
    RemoveService { service: ServiceId },
    /// Initialize a running service's application position.
    Resume { service: ServiceId, checkpoint: Option<u64> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CreateDomain { .. } => "create_domain",
            Command::RemoveDomain { .. } => "remove_domain",
            Command::DeployService { .. } => "deploy_service",
            Command::StartService { .. } => "start_service",
            Command::StopService { .. } => "stop_service",
            Command::RemoveService { .. } => "remove_service",
            Command::Resume { .. } => "resume",
        }
    }

    pub fn service(&self) -> Option<&ServiceId> {
        match self {
            Command::CreateDomain { .. } | Command::RemoveDomain { .. } => None,
            Command::DeployService { spec, .. } => Some(&spec.id),
            Command::StartService { service }
            | Command::StopService { service }
            | Command::RemoveService { service }
            | Command::Resume { service, .. } => Some(service),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::CreateDomain { domain } | Command::RemoveDomain { domain } => write!(f, "{} {domain}", self.name()),
            _ => write!(f, "{} {}", self.name(), self.service().map(|s| s.as_str()).unwrap_or("")),
        }
    }
}

/// Result of an accepted command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ack {
    pub service: Option<ServiceId>,
    pub status: Option<ContainerStatus>,
    /// Container readiness timer the caller must schedule.
    #[serde(skip)]
    pub ready_timer: Option<ReadyTimer>,
    /// Set when `Resume` found no checkpoint and started from zero.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub warning_no_checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadyTimer {
    pub service: ServiceId,
    pub incarnation: u64,
    pub at_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DomainReport {
    pub status: DomainStatus,
    pub free: Resources,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceReport {
    pub status: ContainerStatus,
    pub position: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Heartbeat {
    pub node: VNodeId,
    pub seqno: u64,
    pub sent_at_us: u64,
    pub free: Resources,
    pub domains: BTreeMap<Criticality, DomainReport>,
    pub services: BTreeMap<ServiceId, ServiceReport>,
}

/// What the listener application did with an arriving frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Reception {
    pub outcome: RecoveryOutcome,
    /// Application position after the frame; set only when accepted.
    pub position: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct VNode {
    spec: VNodeSpec,
    alive: bool,
    epoch: u64,
    next_heartbeat_seqno: u64,
    next_incarnation: u64,
    domains: BTreeMap<Criticality, DomainState>,
    recovery: BTreeMap<(ServiceId, StreamId), RecoveryState>,
    generators: BTreeMap<(ServiceId, StreamId), SequenceGenerator>,
    history_length: u16,
    reset_timeout_us: u64,
}

impl VNode {
    pub fn new(spec: VNodeSpec) -> Self {
        Self::with_recovery_params(spec, crate::frer::DEFAULT_HISTORY_LENGTH, crate::frer::DEFAULT_RESET_TIMEOUT_US)
    }

    pub fn with_recovery_params(spec: VNodeSpec, history_length: u16, reset_timeout_us: u64) -> Self {
        let mut node = Self {
            spec,
            alive: true,
            epoch: 0,
            next_heartbeat_seqno: 0,
            next_incarnation: 0,
            domains: BTreeMap::new(),
            recovery: BTreeMap::new(),
            generators: BTreeMap::new(),
            history_length,
            reset_timeout_us,
        };
        node.boot();
        node
    }

    fn boot(&mut self) {
        self.domains = [Criticality::Critical, Criticality::NonCritical]
            .into_iter()
            .map(|k| (k, DomainState::new(k, self.spec.domain_capacity(k))))
            .collect();
        self.recovery.clear();
        self.generators.clear();
    }

    pub fn id(&self) -> &VNodeId {
        &self.spec.id
    }

    pub fn spec(&self) -> &VNodeSpec {
        &self.spec
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    /// Bumped on every restart; timers carry it so a restarted node ignores
    /// timers armed by its previous life.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn domains(&self) -> &BTreeMap<Criticality, DomainState> {
        &self.domains
    }

    pub fn container(&self, service: &str) -> Option<&ContainerState> {
        self.domains.values().find_map(|d| d.containers.get(service))
    }

    fn container_mut(&mut self, service: &str) -> Option<&mut ContainerState> {
        self.domains.values_mut().find_map(|d| d.containers.get_mut(service))
    }

    pub fn is_running(&self, service: &str) -> bool {
        self.alive && self.container(service).is_some_and(|c| c.status == ContainerStatus::Running)
    }

    /// Crash: everything on the node stops answering.
    pub fn fail(&mut self) {
        self.alive = false;
        for d in self.domains.values_mut() {
            d.status = DomainStatus::Failed;
            for c in d.containers.values_mut() {
                c.status = ContainerStatus::Failed;
            }
        }
    }

    /// Reboot with fresh, empty domains. Heartbeat numbering carries on.
    pub fn restore(&mut self) {
        if self.alive {
            return;
        }
        self.alive = true;
        self.epoch += 1;
        self.boot();
    }

    pub fn free(&self) -> Resources {
        self.spec.capacity.saturating_sub(&self.domains.values().map(DomainState::used).sum())
    }

    pub fn handle_command(&mut self, cmd: &Command, now_us: u64) -> Result<Ack, VNodeError> {
        if !self.alive {
            return Err(VNodeError::NodeDown(self.spec.id.clone()));
        }
        let ack = |service: &ServiceId, status| Ack {
            service: Some(service.clone()),
            status: Some(status),
            ready_timer: None,
            warning_no_checkpoint: false,
        };
        match cmd {
            Command::CreateDomain { domain } => {
                let d = self.domains.get_mut(domain).expect("both domains exist");
                d.status = DomainStatus::Running;
                Ok(Ack { service: None, status: None, ready_timer: None, warning_no_checkpoint: false })
            }
            Command::RemoveDomain { domain } => {
                let d = self.domains.get_mut(domain).expect("both domains exist");
                if d.containers.values().any(|c| c.status.reserves()) {
                    return Err(VNodeError::DomainNotEmpty(*domain));
                }
                d.containers.clear();
                d.status = DomainStatus::Stopped;
                Ok(Ack { service: None, status: None, ready_timer: None, warning_no_checkpoint: false })
            }
            Command::DeployService { spec, standby, start_delay_us } => {
                self.deploy(spec, *standby, *start_delay_us, now_us)
            }
            Command::StartService { service } => {
                let c = self.transition(service, ContainerStatus::Deploying)?;
                c.started_at_us = now_us;
                let timer = ReadyTimer {
                    service: service.clone(),
                    incarnation: c.incarnation,
                    at_us: now_us + c.start_delay_us,
                };
                Ok(Ack { ready_timer: Some(timer), ..ack(service, ContainerStatus::Deploying) })
            }
            Command::StopService { service } => {
                self.transition(service, ContainerStatus::Stopped)?;
                self.drop_stream_state(service);
                Ok(ack(service, ContainerStatus::Stopped))
            }
            Command::RemoveService { service } => {
                let status = self.container(service).map(|c| c.status);
                match status {
                    Some(s) if !matches!(s, ContainerStatus::Running | ContainerStatus::Deploying) => {
                        for d in self.domains.values_mut() {
                            d.containers.remove(service.as_str());
                        }
                        Ok(Ack { service: Some(service.clone()), status: None, ready_timer: None, warning_no_checkpoint: false })
                    }
                    Some(s) => Err(VNodeError::InvalidTransition {
                        service: service.clone(),
                        from: s.to_string(),
                        to: ContainerStatus::Stopped,
                    }),
                    None => Err(VNodeError::InvalidTransition {
                        service: service.clone(),
                        from: "absent".into(),
                        to: ContainerStatus::Stopped,
                    }),
                }
            }
            Command::Resume { service, checkpoint } => {
                let no_checkpoint = checkpoint.is_none();
                let c = self.container_mut(service).filter(|c| c.status == ContainerStatus::Running).ok_or_else(|| {
                    VNodeError::InvalidTransition {
                        service: service.clone(),
                        from: "not running".into(),
                        to: ContainerStatus::Running,
                    }
                })?;
                c.position = checkpoint.unwrap_or(0);
                Ok(Ack { warning_no_checkpoint: no_checkpoint, ..ack(service, ContainerStatus::Running) })
            }
        }
    }

    fn deploy(&mut self, spec: &ServiceSpec, standby: bool, start_delay_us: u64, now_us: u64) -> Result<Ack, VNodeError> {
        if let Some(existing) = self.container(&spec.id) {
            return Err(VNodeError::InvalidTransition {
                service: spec.id.clone(),
                from: existing.status.to_string(),
                to: ContainerStatus::Created,
            });
        }
        let domain = spec.criticality;
        let free_total = self.free();
        let d = self.domains.get(&domain).expect("both domains exist");
        if d.status != DomainStatus::Running {
            return Err(VNodeError::DomainNotRunning(domain));
        }
        let free = Resources::new(
            d.free().cpu_millicores.min(free_total.cpu_millicores),
            d.free().memory_mib.min(free_total.memory_mib),
        );
        if !spec.demand.fits_within(&free) {
            return Err(VNodeError::CapacityExceeded { service: spec.id.clone(), demand: spec.demand, free });
        }
        let incarnation = self.next_incarnation;
        self.next_incarnation += 1;
        let status = if standby { ContainerStatus::Created } else { ContainerStatus::Deploying };
        let container = ContainerState {
            service: spec.id.clone(),
            spec: spec.clone(),
            status,
            started_at_us: now_us,
            running_at_us: None,
            position: 0,
            incarnation,
            start_delay_us,
        };
        self.domains.get_mut(&domain).expect("both domains exist").containers.insert(spec.id.clone(), container);
        let ready_timer = (!standby).then(|| ReadyTimer { service: spec.id.clone(), incarnation, at_us: now_us + start_delay_us });
        Ok(Ack { service: Some(spec.id.clone()), status: Some(status), ready_timer, warning_no_checkpoint: false })
    }

    /// Place a service into an explicitly chosen domain. Exposed so the
    /// isolation rule can be exercised; the supervisor always targets the
    /// service's own domain.
    pub fn deploy_into(&mut self, domain: Criticality, spec: &ServiceSpec, now_us: u64) -> Result<Ack, VNodeError> {
        if domain != spec.criticality {
            return Err(VNodeError::CriticalityMismatch {
                service: spec.id.clone(),
                service_kind: spec.criticality,
                domain,
            });
        }
        self.deploy(spec, false, DEFAULT_CONTAINER_START_DELAY_US, now_us)
    }

    fn transition(&mut self, service: &ServiceId, to: ContainerStatus) -> Result<&mut ContainerState, VNodeError> {
        let Some(c) = self.container_mut(service) else {
            return Err(VNodeError::InvalidTransition { service: service.clone(), from: "absent".into(), to });
        };
        if !c.status.can_become(to) {
            return Err(VNodeError::InvalidTransition { service: service.clone(), from: c.status.to_string(), to });
        }
        c.status = to;
        Ok(c)
    }

    /// A service instance that stops or starts anew forgets its sequence
    /// numbering and recovery windows.
    fn drop_stream_state(&mut self, service: &ServiceId) {
        self.recovery.retain(|(s, _), _| s != service);
        self.generators.retain(|(s, _), _| s != service);
    }

    /// Readiness timer fired. Returns true if the container became running.
    pub fn container_ready(&mut self, timer: &ReadyTimer, now_us: u64) -> bool {
        if !self.alive {
            return false;
        }
        let Some(c) = self.container_mut(&timer.service) else {
            return false;
        };
        if c.incarnation != timer.incarnation || c.status != ContainerStatus::Deploying {
            return false;
        }
        c.status = ContainerStatus::Running;
        c.running_at_us = Some(now_us);
        self.drop_stream_state(&timer.service);
        true
    }

    /// The node's periodic status report. Seqnos are strictly increasing
    /// across the node's lifetime.
    pub fn emit_heartbeat(&mut self, now_us: u64) -> Option<Heartbeat> {
        if !self.alive {
            return None;
        }
        let seqno = self.next_heartbeat_seqno;
        self.next_heartbeat_seqno += 1;
        Some(Heartbeat {
            node: self.spec.id.clone(),
            seqno,
            sent_at_us: now_us,
            free: self.free(),
            domains: self.domains.iter().map(|(k, d)| (*k, DomainReport { status: d.status, free: d.free() })).collect(),
            services: self
                .domains
                .values()
                .flat_map(|d| d.containers.values())
                .map(|c| (c.service.clone(), ServiceReport { status: c.status, position: c.position }))
                .collect(),
        })
    }

    /// Frames the talker service emits for one period, if it is running.
    pub fn talk(
        &mut self,
        stream: &StreamId,
        service: &ServiceId,
        payload_bytes: u32,
        paths: usize,
    ) -> Result<Option<Vec<TaggedFrame>>, VNodeError> {
        if !self.is_running(service) {
            return Ok(None);
        }
        let mac = self.spec.mac;
        let gen = self
            .generators
            .entry((service.clone(), stream.clone()))
            .or_insert_with(|| SequenceGenerator::new(stream.clone()));
        Ok(Some(gen.replicate(payload_bytes, mac, paths)?))
    }

    /// A frame reached the listener service. Returns `None` if the service
    /// is not running here.
    pub fn listen(&mut self, frame: &TaggedFrame, service: &ServiceId, now_us: u64) -> Result<Option<Reception>, VNodeError> {
        if !self.is_running(service) {
            return Ok(None);
        }
        let (history, timeout) = (self.history_length, self.reset_timeout_us);
        let st = self
            .recovery
            .entry((service.clone(), frame.stream.clone()))
            .or_insert_with(|| RecoveryState::with_params(frame.stream.clone(), history, timeout));
        st.maybe_reset(now_us);
        let outcome = st.recover(frame, now_us)?;
        let position = if outcome == RecoveryOutcome::Accept {
            let c = self.container_mut(service).expect("running container exists");
            c.position += 1;
            Some(c.position)
        } else {
            None
        };
        Ok(Some(Reception { outcome, position }))
    }

    /// Consistency of the node's own bookkeeping: every domain within its
    /// capacity, every container in the domain of its criticality.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (kind, d) in &self.domains {
            if !d.used().fits_within(&d.capacity) {
                out.push(format!("{}: {kind} domain over capacity", self.spec.id));
            }
            for c in d.containers.values() {
                if c.spec.criticality != *kind {
                    out.push(format!("{}: {} running in the {kind} domain", self.spec.id, c.service));
                }
            }
        }
        let used: Resources = self.domains.values().map(DomainState::used).sum();
        if !used.fits_within(&self.spec.capacity) {
            out.push(format!("{}: node over capacity", self.spec.id));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fig1_topology, free_resources, MacAddress};
    use proptest::prelude::*;

    fn node() -> VNode {
        VNode::new(fig1_topology().vnodes[1].clone())
    }

    fn video_recv() -> ServiceSpec {
        ServiceSpec::new("video-recv", Criticality::Critical, Resources::new(1000, 1024))
    }

    fn deploy(spec: &ServiceSpec) -> Command {
        Command::DeployService { spec: spec.clone(), standby: false, start_delay_us: 2_000_000 }
    }

    #[test]
    fn deploy_runs_after_start_delay() {
        let mut n = node();
        let ack = n.handle_command(&deploy(&video_recv()), 10_000_000).unwrap();
        assert_eq!(ack.status, Some(ContainerStatus::Deploying));
        let timer = ack.ready_timer.unwrap();
        assert_eq!(timer.at_us, 12_000_000);
        assert!(n.container_ready(&timer, timer.at_us));
        let c = n.container("video-recv").unwrap();
        assert_eq!((c.status, c.running_at_us), (ContainerStatus::Running, Some(12_000_000)));
    }

    #[test]
    fn start_missing_container_is_invalid() {
        let mut n = node();
        let err = n.handle_command(&Command::StartService { service: "ghost".into() }, 0).unwrap_err();
        assert!(matches!(err, VNodeError::InvalidTransition { .. }));
    }

    #[test]
    fn wrong_domain_is_rejected() {
        let mut n = node();
        let err = n.deploy_into(Criticality::NonCritical, &video_recv(), 0).unwrap_err();
        assert!(matches!(err, VNodeError::CriticalityMismatch { .. }));
        assert!(n.deploy_into(Criticality::Critical, &video_recv(), 0).is_ok());
    }

    #[test]
    fn domain_capacity_enforced() {
        let mut n = node();
        // Critical domain is half of (4000, 4096).
        let big = ServiceSpec::new("big", Criticality::Critical, Resources::new(2500, 100));
        assert!(matches!(n.handle_command(&deploy(&big), 0), Err(VNodeError::CapacityExceeded { .. })));
    }

    #[test]
    fn fresh_node_heartbeat() {
        let mut n = node();
        let hb = n.emit_heartbeat(0).unwrap();
        assert_eq!(hb.free, Resources::new(4000, 4096));
        assert!(hb.services.is_empty());
    }

    #[test]
    fn heartbeat_lists_running_service_and_stops_after_failure() {
        let mut n = node();
        let ack = n.handle_command(&deploy(&video_recv()), 0).unwrap();
        n.container_ready(&ack.ready_timer.unwrap(), 2_000_000);
        let hb = n.emit_heartbeat(2_500_000).unwrap();
        assert_eq!(hb.services["video-recv"].status, ContainerStatus::Running);
        assert_eq!(hb.free, free_resources(&n.spec().capacity, &[video_recv()]).unwrap());
        n.fail();
        assert_eq!(n.emit_heartbeat(3_000_000), None);
        n.restore();
        let hb2 = n.emit_heartbeat(4_000_000).unwrap();
        assert_eq!(hb2.seqno, hb.seqno + 1);
        assert!(hb2.services.is_empty());
    }

    #[test]
    fn standby_waits_for_start() {
        let mut n = node();
        let cmd = Command::DeployService { spec: video_recv(), standby: true, start_delay_us: 1_000 };
        let ack = n.handle_command(&cmd, 0).unwrap();
        assert_eq!((ack.status, ack.ready_timer.is_none()), (Some(ContainerStatus::Created), true));
        assert_eq!(n.free(), Resources::new(3000, 3072));
        let ack = n.handle_command(&Command::StartService { service: "video-recv".into() }, 5).unwrap();
        assert_eq!(ack.ready_timer.unwrap().at_us, 1_005);
    }

    #[test]
    fn resume_from_checkpoint() {
        let mut n = node();
        let ack = n.handle_command(&deploy(&video_recv()), 0).unwrap();
        n.container_ready(&ack.ready_timer.unwrap(), 2_000_000);
        let ack = n.handle_command(&Command::Resume { service: "video-recv".into(), checkpoint: Some(420) }, 2_000_001).unwrap();
        assert!(!ack.warning_no_checkpoint);
        let frame = TaggedFrame {
            stream: "video".into(),
            seq: 9000,
            member_path_index: 0,
            payload_bytes: 1,
            src_mac: MacAddress::local(1),
        };
        let rx = n.listen(&frame, &"video-recv".into(), 2_000_010).unwrap().unwrap();
        assert_eq!(rx.position, Some(421));
    }

    #[test]
    fn resume_without_checkpoint_warns() {
        let mut n = node();
        let ack = n.handle_command(&deploy(&video_recv()), 0).unwrap();
        n.container_ready(&ack.ready_timer.unwrap(), 2_000_000);
        let ack = n.handle_command(&Command::Resume { service: "video-recv".into(), checkpoint: None }, 1).unwrap();
        assert!(ack.warning_no_checkpoint);
        assert_eq!(n.container("video-recv").unwrap().position, 0);
    }

    #[test]
    fn resume_requires_running() {
        let mut n = node();
        n.handle_command(&deploy(&video_recv()), 0).unwrap();
        let cmd = Command::Resume { service: "video-recv".into(), checkpoint: Some(1) };
        assert!(matches!(n.handle_command(&cmd, 1), Err(VNodeError::InvalidTransition { .. })));
    }

    #[test]
    fn stale_ready_timer_ignored() {
        let mut n = node();
        let ack = n.handle_command(&deploy(&video_recv()), 0).unwrap();
        let timer = ack.ready_timer.unwrap();
        n.fail();
        n.restore();
        n.handle_command(&deploy(&video_recv()), 10).unwrap();
        assert!(!n.container_ready(&timer, timer.at_us));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Deploy(usize, bool),
        Start(usize),
        Stop(usize),
        Remove(usize),
        Ready(usize),
        Fail,
        Restore,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0usize..4, any::<bool>()).prop_map(|(i, s)| Op::Deploy(i, s)),
            (0usize..4).prop_map(Op::Start),
            (0usize..4).prop_map(Op::Stop),
            (0usize..4).prop_map(Op::Remove),
            (0usize..4).prop_map(Op::Ready),
            Just(Op::Fail),
            Just(Op::Restore),
        ]
    }

    proptest! {
        #[test]
        fn accounting_never_drifts(ops in proptest::collection::vec(op(), 0..60)) {
            let services: Vec<ServiceSpec> = (0..4)
                .map(|i| {
                    let c = if i % 2 == 0 { Criticality::Critical } else { Criticality::NonCritical };
                    ServiceSpec::new(format!("s{i}"), c, Resources::new(700, 600))
                })
                .collect();
            let mut n = node();
            let mut timers: BTreeMap<usize, ReadyTimer> = BTreeMap::new();
            let mut last_seqno = None;
            for (t, op) in ops.into_iter().enumerate() {
                let t = t as u64;
                let result = match op {
                    Op::Deploy(i, standby) => n.handle_command(
                        &Command::DeployService { spec: services[i].clone(), standby, start_delay_us: 1 },
                        t,
                    ),
                    Op::Start(i) => n.handle_command(&Command::StartService { service: services[i].id.clone() }, t),
                    Op::Stop(i) => n.handle_command(&Command::StopService { service: services[i].id.clone() }, t),
                    Op::Remove(i) => n.handle_command(&Command::RemoveService { service: services[i].id.clone() }, t),
                    Op::Ready(i) => {
                        if let Some(timer) = timers.remove(&i) {
                            n.container_ready(&timer, t);
                        }
                        continue;
                    }
                    Op::Fail => { n.fail(); continue; }
                    Op::Restore => { n.restore(); continue; }
                };
                if let Ok(Ack { ready_timer: Some(timer), .. }) = result {
                    let i = services.iter().position(|s| s.id == timer.service).unwrap();
                    timers.insert(i, timer);
                }
                prop_assert!(n.check_invariants().is_empty());
                if let Some(hb) = n.emit_heartbeat(t) {
                    let deployed: Vec<ServiceSpec> = n
                        .domains()
                        .values()
                        .flat_map(|d| d.containers.values())
                        .filter(|c| c.status.reserves())
                        .map(|c| c.spec.clone())
                        .collect();
                    prop_assert_eq!(hb.free, free_resources(&n.spec().capacity, &deployed).unwrap());
                    if let Some(prev) = last_seqno {
                        prop_assert_eq!(hb.seqno, prev + 1);
                    }
                    last_seqno = Some(hb.seqno);
                }
            }
        }
    }
}
